use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use decals::covest::{run_decals, DecalsOptions};
use decals::deconv::{align_genes, BulkMatrix, GenePolicy, ProportionEstimate, SignatureMatrix};
use decals::downstream::{aggregate_calls, sample_proportion_sets, CutoffRule, PValueRecord};
use decals::qp::SimplexVector;
use decals::simgen::{coverage_study, v_error_study, CoverageReport, Method, SimConfig, VErrorRow};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::io::{
    create_dir, csv_bytes, csv_number, field_number, read_records, read_table, sha256_hex, to_json, write_atomic,
    CliError, CliResult,
};

pub struct DeconvolveArgs {
    pub signature: PathBuf,
    pub bulk: PathBuf,
    pub out: PathBuf,
    pub level: f64,
    pub dense: bool,
    pub no_bias_correction: bool,
    pub intersect_genes: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub cv_folds: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CovarianceFile {
    cell_types: Vec<String>,
    samples: Vec<SampleCovariance>,
}

#[derive(Serialize, Deserialize)]
struct SampleCovariance {
    sample_id: String,
    matrix: Vec<Vec<f64>>,
}

fn proportions_csv(cell_types: &[String], ids: &[String], props: &[&SimplexVector]) -> Vec<u8> {
    let mut header = vec!["sample_id".to_string()];
    header.extend(cell_types.iter().cloned());
    let rows: Vec<Vec<String>> = ids
        .iter()
        .zip(props)
        .map(|(id, p)| {
            let mut r = vec![id.clone()];
            r.extend(p.as_slice().iter().map(|v| csv_number(*v)));
            r
        })
        .collect();
    csv_bytes(&header, &rows)
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn deconvolve(args: &DeconvolveArgs) -> CliResult<()> {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CliError::Input(format!("--level {} must lie in (0, 1)", args.level)));
    }
    let sig_table = read_table(&args.signature, b'\t')?;
    let bulk_table = read_table(&args.bulk, b'\t')?;
    let signature = SignatureMatrix::new(sig_table.values, sig_table.row_ids, sig_table.columns)
        .map_err(|e| CliError::from(e).prefixed(&args.signature))?;
    let bulk = BulkMatrix::new(bulk_table.values, bulk_table.row_ids, bulk_table.columns)
        .map_err(|e| CliError::from(e).prefixed(&args.bulk))?;
    let policy = if args.intersect_genes {
        GenePolicy::Intersect
    } else {
        GenePolicy::Exact
    };
    let genes_in = (signature.n_genes(), bulk.gene_ids.len());
    let (signature, bulk) = align_genes(&signature, &bulk, policy)?;
    if signature.n_genes() < genes_in.0.max(genes_in.1) {
        log::info!(
            "using {} shared genes ({} in signature, {} in bulk)",
            signature.n_genes(),
            genes_in.0,
            genes_in.1
        );
    }
    let options = DecalsOptions {
        sparse: !args.dense,
        max_iter: args.max_iter,
        tol: args.tol,
        bias_correction: !args.no_bias_correction,
        cv_folds: args.cv_folds,
        cv_seed: args.seed,
        ..DecalsOptions::default()
    };
    let result = run_decals(&signature, &bulk, &options)?;

    create_dir(&args.out)?;
    let ids: Vec<String> = result.estimates.iter().map(|e| e.sample_id.clone()).collect();
    let props: Vec<&SimplexVector> = result.estimates.iter().map(|e| &e.proportions).collect();
    write_atomic(
        &args.out.join("proportions.csv"),
        &proportions_csv(&signature.cell_types, &ids, &props),
    )?;

    let cov = CovarianceFile {
        cell_types: signature.cell_types.clone(),
        samples: result
            .estimates
            .iter()
            .map(|e| SampleCovariance {
                sample_id: e.sample_id.clone(),
                matrix: e.covariance.row_iter().map(|r| r.iter().copied().collect()).collect(),
            })
            .collect(),
    };
    write_atomic(&args.out.join("covariances.json"), &to_json(&cov))?;

    let mut rows = Vec::new();
    for e in &result.estimates {
        let ci = e.confidence_intervals(args.level)?;
        for (c, ct) in signature.cell_types.iter().enumerate() {
            rows.push(vec![
                e.sample_id.clone(),
                ct.clone(),
                csv_number(e.proportions[c]),
                csv_number(e.covariance[(c, c)].max(0.0).sqrt()),
                csv_number(ci[c].lower),
                csv_number(ci[c].upper),
            ]);
        }
    }
    let header: Vec<String> = ["sample_id", "cell_type", "estimate", "std_error", "lower", "upper"]
        .map(String::from)
        .to_vec();
    write_atomic(&args.out.join("intervals.csv"), &csv_bytes(&header, &rows))?;

    let sample_warnings: Vec<_> = result
        .estimates
        .iter()
        .flat_map(|e| e.warnings.iter().map(move |w| json!({"sample_id": e.sample_id, "warning": w})))
        .collect();
    let meta = json!({
        "command": "deconvolve",
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": now_unix(),
        "inputs": {
            "signature": args.signature.display().to_string(),
            "bulk": args.bulk.display().to_string(),
        },
        "config": {
            "level": args.level,
            "sparse": options.sparse,
            "bias_correction": options.bias_correction,
            "gene_policy": if args.intersect_genes { "intersect" } else { "exact" },
            "max_iter": options.max_iter,
            "tol": options.tol,
            "cv_folds": options.cv_folds,
            "lambda_grid": options.lambda_grid,
            "seed": options.cv_seed,
        },
        "genes": {
            "signature": genes_in.0,
            "bulk": genes_in.1,
            "used": result.n_genes,
        },
        "n_samples": ids.len(),
        "cell_types": signature.cell_types,
        "iterations": result.iterations,
        "converged": result.converged,
        "lambda": result.lambda,
        "warnings": result.warnings,
        "sample_warnings": sample_warnings,
    });
    write_atomic(&args.out.join("run_meta.json"), &to_json(&meta))?;
    log::info!(
        "{} samples, {} genes, {} iterations (converged: {})",
        ids.len(),
        result.n_genes,
        result.iterations,
        result.converged
    );
    Ok(())
}

impl CliError {
    fn prefixed(self, path: &Path) -> CliError {
        match self {
            CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Uncorrected vs bias-corrected DECALS.
    Fig1,
    /// DECALS and GLS, each with true and estimated covariances.
    Fig2,
    /// OLS vs DECALS.
    Fig4,
    /// DECALS under signature noise a0 = 0.1, 0.2, ..., 1.0.
    Noise,
    /// Covariance-estimation error for p in {150, 300} and a in {1, 2}.
    #[value(name = "tableS1")]
    TableS1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scale {
    Desk,
    Paper,
}

pub struct SimulateArgs {
    pub preset: Option<Preset>,
    pub scale: Scale,
    pub config: Option<PathBuf>,
    pub methods: Option<Vec<String>>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn base_config(args: &SimulateArgs) -> CliResult<SimConfig> {
    let mut base = match args.scale {
        Scale::Desk => SimConfig::desk(),
        Scale::Paper => SimConfig::paper(),
    };
    if args.preset == Some(Preset::TableS1) {
        base.replicates = match args.scale {
            Scale::Desk => 10,
            Scale::Paper => 100,
        };
    }
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let overrides: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            CliError::Input(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
        })?;
        let serde_json::Value::Object(fields) = overrides else {
            return Err(CliError::Input(format!("{}: config must be a JSON object", path.display())));
        };
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut merged {
            m.extend(fields);
        }
        base = serde_json::from_value(merged).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    if let Some(r) = args.replicates {
        base.replicates = r;
    }
    if let Some(s) = args.seed {
        base.seed = s;
    }
    base.validate()?;
    Ok(base)
}

fn preset_methods(preset: Option<Preset>) -> Vec<Method> {
    match preset {
        Some(Preset::Fig1) => vec![Method::DecalsUncorrected, Method::Decals],
        Some(Preset::Fig2) => vec![
            Method::DecalsOracle,
            Method::GlsOracle,
            Method::Decals,
            Method::GlsEstimated,
        ],
        Some(Preset::Fig4) => vec![Method::Ols, Method::Decals],
        Some(Preset::Noise) | None => vec![Method::Decals],
        Some(Preset::TableS1) => vec![Method::Decals, Method::Ols],
    }
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let config = base_config(args)?;
    let methods = match &args.methods {
        Some(names) => names
            .iter()
            .map(|n| n.trim().parse::<Method>())
            .collect::<Result<Vec<_>, _>>()?,
        None => preset_methods(args.preset),
    };
    create_dir(&args.out)?;
    if args.preset == Some(Preset::TableS1) {
        let rows = v_error_study(&config, &[150, 300], &[1.0, 2.0])?;
        return write_v_error(&args.out, &config, &rows);
    }
    let noise_levels: Vec<f64> = if args.preset == Some(Preset::Noise) {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    } else {
        vec![config.noise_a0]
    };
    let mut reports = Vec::new();
    for a0 in noise_levels {
        let cfg = SimConfig {
            noise_a0: a0,
            ..config.clone()
        };
        log::info!("running {} replicates at a0 = {a0}", cfg.replicates);
        reports.extend(coverage_study(&cfg, &methods)?);
    }
    write_coverage(&args.out, &reports)
}

fn write_coverage(out: &Path, reports: &[CoverageReport]) -> CliResult<()> {
    write_atomic(&out.join("report.json"), &to_json(&reports))?;
    let header: Vec<String> = [
        "method",
        "noise_a0",
        "cell_type",
        "coverage",
        "mean_width",
        "mean_abs_error",
        "coverage_min",
        "coverage_q25",
        "coverage_median",
        "coverage_q75",
        "coverage_max",
        "replicates",
        "failed_replicates",
    ]
    .map(String::from)
    .to_vec();
    let mut rows = Vec::new();
    let mut plot = Vec::new();
    println!("{:<20} {:>8} {:<10} {:>9} {:>11}", "method", "a0", "cell_type", "coverage", "mean_width");
    for r in reports {
        for (c, ct) in r.cell_types.iter().enumerate() {
            let mut row = vec![
                r.method.to_string(),
                csv_number(r.config.noise_a0),
                ct.cell_type.clone(),
                csv_number(ct.coverage),
                csv_number(ct.mean_width),
                csv_number(ct.mean_abs_error),
            ];
            row.extend(ct.replicate_quantiles.iter().map(|q| csv_number(*q)));
            row.push(r.replicates.len().to_string());
            row.push(r.failed_replicates.to_string());
            rows.push(row);
            println!(
                "{:<20} {:>8.2} {:<10} {:>9.4} {:>11.4}",
                r.method.as_str(),
                r.config.noise_a0,
                ct.cell_type,
                ct.coverage,
                ct.mean_width
            );
            for rep in &r.replicates {
                plot.push(vec![
                    r.method.to_string(),
                    csv_number(r.config.noise_a0),
                    rep.replicate.to_string(),
                    ct.cell_type.clone(),
                    rep.coverage.get(c).map_or(String::new(), |v| csv_number(*v)),
                    rep.mean_width.get(c).map_or(String::new(), |v| csv_number(*v)),
                    rep.mean_abs_error.get(c).map_or(String::new(), |v| csv_number(*v)),
                    rep.error.clone().unwrap_or_default(),
                ]);
            }
        }
    }
    write_atomic(&out.join("coverage.csv"), &csv_bytes(&header, &rows))?;
    let plot_header: Vec<String> = [
        "method",
        "noise_a0",
        "replicate",
        "cell_type",
        "coverage",
        "mean_width",
        "mean_abs_error",
        "error",
    ]
    .map(String::from)
    .to_vec();
    write_atomic(&out.join("replicates.csv"), &csv_bytes(&plot_header, &plot))
}

fn write_v_error(out: &Path, config: &SimConfig, rows: &[VErrorRow]) -> CliResult<()> {
    write_atomic(
        &out.join("v_error.json"),
        &to_json(&json!({"config": config, "rows": rows})),
    )?;
    let header: Vec<String> = ["p", "signature_sd", "method", "entry", "error", "std_error", "failed_replicates"]
        .map(String::from)
        .to_vec();
    let mut csv_rows = Vec::new();
    println!("{:>5} {:>4} {:<8} {:>7} {:>12}", "p", "a", "method", "entry", "error");
    for r in rows {
        for (e, (l, m)) in r.entries.iter().enumerate() {
            let entry = format!("{l}{m}");
            csv_rows.push(vec![
                r.p.to_string(),
                csv_number(r.signature_sd),
                r.method.to_string(),
                entry.clone(),
                csv_number(r.error[e]),
                csv_number(r.std_error[e]),
                r.failed_replicates.to_string(),
            ]);
            println!(
                "{:>5} {:>4} {:<8} {:>7} {:>12.4e}",
                r.p,
                r.signature_sd,
                r.method.as_str(),
                entry,
                r.error[e]
            );
        }
    }
    write_atomic(&out.join("v_error.csv"), &csv_bytes(&header, &csv_rows))
}

pub struct SampleArgs {
    pub result: PathBuf,
    pub draws: usize,
    pub seed: u64,
    pub out: PathBuf,
}

fn read_estimates(dir: &Path) -> CliResult<(Vec<String>, Vec<ProportionEstimate>)> {
    let prop_path = dir.join("proportions.csv");
    let cov_path = dir.join("covariances.json");
    let table = read_table(&prop_path, b',')?;
    if table.corner != "sample_id" {
        return Err(CliError::Input(format!(
            "{}:1:1: first column must be 'sample_id'",
            prop_path.display()
        )));
    }
    let text =
        std::fs::read_to_string(&cov_path).map_err(|e| CliError::Input(format!("{}: {e}", cov_path.display())))?;
    let cov: CovarianceFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}:{}:{}: {e}", cov_path.display(), e.line(), e.column())))?;
    let k = table.columns.len();
    let inconsistent = |m: String| CliError::Input(format!("{} and {}: {m}", prop_path.display(), cov_path.display()));
    if cov.cell_types != table.columns {
        return Err(inconsistent("cell types differ".into()));
    }
    if cov.samples.len() != table.row_ids.len() {
        return Err(inconsistent(format!(
            "{} samples vs {} covariance entries",
            table.row_ids.len(),
            cov.samples.len()
        )));
    }
    let mut estimates = Vec::with_capacity(cov.samples.len());
    for (i, (id, s)) in table.row_ids.iter().zip(&cov.samples).enumerate() {
        if &s.sample_id != id {
            return Err(inconsistent(format!(
                "sample {} is '{id}' in proportions but '{}' in covariances",
                i + 1,
                s.sample_id
            )));
        }
        if s.matrix.len() != k || s.matrix.iter().any(|r| r.len() != k) {
            return Err(inconsistent(format!("covariance of sample '{id}' is not {k}x{k}")));
        }
        let m = DMatrix::from_fn(k, k, |a, b| s.matrix[a][b]);
        let row: Vec<f64> = table.values.row(i).iter().copied().collect();
        let pi = SimplexVector::new(row)
            .map_err(|e| CliError::Input(format!("{}: sample '{id}': {e}", prop_path.display())))?;
        estimates.push(ProportionEstimate::new(id.clone(), SimplexVector::clip_normalize(pi.as_slice()), m));
    }
    Ok((table.columns, estimates))
}

pub fn sample(args: &SampleArgs) -> CliResult<()> {
    if args.draws == 0 {
        return Err(CliError::Input("--draws must be at least 1".into()));
    }
    let (cell_types, estimates) = read_estimates(&args.result)?;
    let set = sample_proportion_sets(&estimates, args.draws, args.seed).map_err(|e| match e.root() {
        decals::Error::NonPsd => CliError::Input(format!("{}: {e}", args.result.join("covariances.json").display())),
        _ => e.into(),
    })?;
    create_dir(&args.out)?;
    let width = args.draws.to_string().len().max(4);
    let mut files = Vec::with_capacity(args.draws);
    for (m, draw) in set.draws.iter().enumerate() {
        let name = format!("draw_{:0width$}.csv", m + 1);
        let bytes = proportions_csv(&cell_types, &set.sample_ids, &draw.iter().collect::<Vec<_>>());
        write_atomic(&args.out.join(&name), &bytes)?;
        files.push(json!({"draw_index": m + 1, "file": name, "sha256": sha256_hex(&bytes)}));
    }
    let manifest = json!({
        "source": args.result.display().to_string(),
        "seed": args.seed,
        "draws": args.draws,
        "cell_types": cell_types,
        "sample_ids": set.sample_ids,
        "files": files,
    });
    write_atomic(&args.out.join("manifest.json"), &to_json(&manifest))
}

pub struct AggregateArgs {
    pub pvalues: PathBuf,
    pub draws: usize,
    pub alpha: f64,
    pub cutoff: Option<usize>,
    pub out: PathBuf,
}

pub fn aggregate(args: &AggregateArgs) -> CliResult<()> {
    if args.draws == 0 {
        return Err(CliError::Input("--draws must be at least 1".into()));
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Input(format!("--alpha {} must lie in (0, 1)", args.alpha)));
    }
    let path = &args.pvalues;
    let rows = read_records(path, b',', &["draw_index", "unit_id", "cell_type", "p_value"])?;
    let mut records = Vec::with_capacity(rows.len());
    let mut seen = HashSet::new();
    for (line, rec) in rows {
        let at = |col: usize, msg: String| CliError::Input(format!("{}:{line}:{col}: {msg}", path.display()));
        let draw: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| at(1, format!("'{}' is not a draw index", &rec[0])))?;
        if draw == 0 || draw > args.draws {
            return Err(at(1, format!("draw index {draw} outside 1..={}", args.draws)));
        }
        let unit = rec[1].trim().to_string();
        let cell_type = rec[2].trim().to_string();
        if unit.is_empty() {
            return Err(at(2, "empty unit id".into()));
        }
        if cell_type.is_empty() {
            return Err(at(3, "empty cell type".into()));
        }
        let p = field_number(path, line, 4, &rec[3])?;
        if !(0.0..=1.0).contains(&p) {
            return Err(at(4, format!("p-value {p} outside [0, 1]")));
        }
        if !seen.insert((draw, unit.clone(), cell_type.clone())) {
            return Err(at(1, format!("duplicate entry for draw {draw}, unit '{unit}', cell type '{cell_type}'")));
        }
        records.push(PValueRecord {
            draw_index: draw,
            unit_id: unit,
            cell_type,
            p_value: p,
        });
    }
    let rule = args.cutoff.map_or(CutoffRule::TwoSd, CutoffRule::Fixed);
    let calls = aggregate_calls(&records, args.draws, args.alpha, rule)?;
    let header: Vec<String> = ["unit_id", "cell_type", "hit_count", "cutoff", "called"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = calls
        .iter()
        .map(|c| {
            vec![
                c.unit_id.clone(),
                c.cell_type.clone(),
                c.hit_count.to_string(),
                c.cutoff.to_string(),
                c.called.to_string(),
            ]
        })
        .collect();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(&args.out, &csv_bytes(&header, &rows))?;
    log::info!(
        "{} of {} (unit, cell type) pairs called at cutoff {}",
        calls.iter().filter(|c| c.called).count(),
        calls.len(),
        rule.cutoff(args.draws, args.alpha)
    );
    Ok(())
}
