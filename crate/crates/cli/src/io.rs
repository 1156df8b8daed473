//! File formats: TSV matrices in, CSV and JSON out, atomic writes.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

/// Exit-code classes.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input (exit 2).
    Input(String),
    /// The computation failed (exit 3).
    Numeric(String),
    /// Output could not be written (exit 1).
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Output(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical error: {m}"),
            CliError::Output(m) => write!(f, "output error: {m}"),
        }
    }
}

impl From<decals::Error> for CliError {
    fn from(e: decals::Error) -> Self {
        use decals::Error as E;
        match e.root() {
            E::GeneMismatch(_)
            | E::DimensionMismatch(_)
            | E::InvalidInput(_)
            | E::Divisibility { .. }
            | E::NonPositiveMean { .. }
            | E::InsufficientSamples(_) => CliError::Input(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn input_at(path: &Path, line: u64, col: usize, msg: impl fmt::Display) -> CliError {
    CliError::Input(format!("{}:{line}:{col}: {msg}", path.display()))
}

/// A labelled numeric matrix read from a delimited file.
#[derive(Debug, Clone)]
pub struct Table {
    pub corner: String,
    pub columns: Vec<String>,
    pub row_ids: Vec<String>,
    pub values: DMatrix<f64>,
}

fn parse_number(path: &Path, line: u64, col: usize, field: &str) -> CliResult<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| input_at(path, line, col, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(input_at(path, line, col, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

fn reader(path: &Path, delimiter: u8) -> CliResult<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.position() {
        Some(pos) => input_at(path, pos.line(), 1, e),
        None => CliError::Input(format!("{}: {e}", path.display())),
    }
}

/// Header row, then one row per id: `id value value ...`.
pub fn read_table(path: &Path, delimiter: u8) -> CliResult<Table> {
    let mut rdr = reader(path, delimiter)?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(input_at(path, 1, 1, "missing header row")),
    };
    if header.len() < 2 {
        return Err(input_at(path, 1, 1, "header needs an id column and at least one data column"));
    }
    let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if let Some(c) = columns.iter().position(|c| c.is_empty()) {
        return Err(input_at(path, 1, c + 2, "empty column name"));
    }
    for (c, name) in columns.iter().enumerate() {
        if columns[..c].contains(name) {
            return Err(input_at(path, 1, c + 2, format!("duplicate column '{name}'")));
        }
    }
    let width = header.len();
    let mut row_ids = Vec::new();
    let mut data = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(input_at(
                path,
                line,
                rec.len().min(width) + 1,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(input_at(path, line, 1, "empty row id"));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(input_at(path, line, 1, format!("duplicate row id '{id}' (first on line {first})")));
        }
        for (c, field) in rec.iter().enumerate().skip(1) {
            data.push(parse_number(path, line, c + 1, field)?);
        }
        row_ids.push(id);
    }
    if row_ids.is_empty() {
        return Err(input_at(path, 2, 1, "no data rows"));
    }
    Ok(Table {
        corner: header[0].trim().to_string(),
        columns,
        values: DMatrix::from_row_slice(row_ids.len(), width - 1, &data),
        row_ids,
    })
}

/// Raw string records after a mandatory header that must equal `expected`.
pub fn read_records(path: &Path, delimiter: u8, expected: &[&str]) -> CliResult<Vec<(u64, csv::StringRecord)>> {
    let mut rdr = reader(path, delimiter)?;
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Ok(Vec::new()),
        Some(r) => r.map_err(|e| csv_error(path, e))?,
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != expected {
        return Err(input_at(
            path,
            1,
            1,
            format!("header must be '{}', found '{}'", expected.join(","), names.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != expected.len() {
            return Err(input_at(
                path,
                line,
                rec.len().min(expected.len()) + 1,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        out.push((line, rec));
    }
    Ok(out)
}

pub fn field_number(path: &Path, line: u64, col: usize, field: &str) -> CliResult<f64> {
    parse_number(path, line, col, field)
}

/// 15 significant digits in scientific notation.
pub fn csv_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.14e}")
    } else {
        v.to_string()
    }
}

/// Pretty JSON whose floats carry 17 significant digits in scientific notation.
struct SciFormatter<'a>(PrettyFormatter<'a>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(writer $(, $arg)*)
            }
        )*
    };
}

impl Formatter for SciFormatter<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("serializing to memory");
    buf.push(b'\n');
    buf
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let fail = |e: &dyn fmt::Display| CliError::Output(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(bytes).map_err(|e| fail(&e))?;
    tmp.as_file().sync_all().map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    w.into_inner().expect("flushing memory buffer")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
