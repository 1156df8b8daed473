use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn decals(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decals"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TYPES: [&str; 3] = ["T", "B", "NK"];

fn toy_signature(genes: usize) -> Vec<[f64; 3]> {
    (0..genes)
        .map(|j| {
            let j = j as f64;
            [1.0 + (j * 0.7).sin().abs() * 9.0, 2.0 + (j * 1.3).cos().abs() * 7.0, 1.5 + ((j + 2.0) * 0.4).sin().abs() * 8.0]
        })
        .collect()
}

fn toy_proportions(samples: usize) -> Vec<[f64; 3]> {
    (0..samples)
        .map(|i| {
            let a = [1.0 + (i % 4) as f64, 1.0 + (i % 3) as f64, 0.5 + (i % 5) as f64];
            let s: f64 = a.iter().sum();
            [a[0] / s, a[1] / s, a[2] / s]
        })
        .collect()
}

/// Noiseless bulk: every sample is an exact mixture of the signature columns.
fn write_fixture(dir: &Path, genes: usize, samples: usize) -> (PathBuf, PathBuf, Vec<[f64; 3]>) {
    let w = toy_signature(genes);
    let pi = toy_proportions(samples);
    let mut sig = format!("gene\t{}\n", TYPES.join("\t"));
    for (j, row) in w.iter().enumerate() {
        sig += &format!("g{}\t{}\t{}\t{}\n", j + 1, row[0], row[1], row[2]);
    }
    let mut bulk = String::from("gene");
    for i in 0..samples {
        bulk += &format!("\ts{}", i + 1);
    }
    bulk.push('\n');
    for (j, row) in w.iter().enumerate() {
        bulk += &format!("g{}", j + 1);
        for p in &pi {
            bulk += &format!("\t{:e}", row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
        }
        bulk.push('\n');
    }
    let (s, b) = (dir.join("sig.tsv"), dir.join("bulk.tsv"));
    fs::write(&s, sig).unwrap();
    fs::write(&b, bulk).unwrap();
    (s, b, pi)
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn noiseless_fixture_recovers_proportions() {
    let dir = TempDir::new().unwrap();
    let (sig, bulk, pi) = write_fixture(dir.path(), 12, 8);
    let out = dir.path().join("res");
    let run = decals(&["deconvolve", "--signature", path(&sig), "--bulk", path(&bulk), "--out", path(&out)]);
    assert!(run.status.success(), "{}", stderr(&run));
    let rows = read_csv(&out.join("proportions.csv"));
    assert_eq!(rows[0], ["sample_id", "T", "B", "NK"]);
    assert_eq!(rows.len(), 9);
    for (row, truth) in rows[1..].iter().zip(&pi) {
        for c in 0..3 {
            let v: f64 = row[c + 1].parse().unwrap();
            assert!((v - truth[c]).abs() < 1e-8, "{v} vs {}", truth[c]);
        }
    }
    let intervals = read_csv(&out.join("intervals.csv"));
    assert_eq!(intervals.len(), 1 + 8 * 3);
    for row in &intervals[1..] {
        let (est, lo, hi): (f64, f64, f64) = (row[2].parse().unwrap(), row[4].parse().unwrap(), row[5].parse().unwrap());
        assert!(lo <= est && est <= hi);
    }
    let cov: serde_json::Value = serde_json::from_slice(&fs::read(out.join("covariances.json")).unwrap()).unwrap();
    assert_eq!(cov["samples"].as_array().unwrap().len(), 8);
    assert_eq!(cov["samples"][0]["matrix"].as_array().unwrap().len(), 3);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["genes"]["used"], 12);
    assert_eq!(meta["converged"], true);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (sig, bulk, _) = write_fixture(dir.path(), 15, 20);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let run = decals(&["deconvolve", "--signature", path(&sig), "--bulk", path(&bulk), "--out", path(out), "--seed", "3"]);
        assert!(run.status.success(), "{}", stderr(&run));
    }
    for f in ["proportions.csv", "covariances.json", "intervals.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let meta = |d: &Path| {
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run_meta.json")).unwrap()).unwrap();
        m.as_object_mut().unwrap().remove("created_unix");
        m["inputs"] = serde_json::Value::Null;
        m
    };
    assert_eq!(meta(&a), meta(&b));
}

#[test]
fn misaligned_genes_are_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let (sig, bulk, pi) = write_fixture(dir.path(), 12, 8);
    let text = fs::read_to_string(&bulk).unwrap().replace("\ng7\t", "\ngene_x\t");
    fs::write(&bulk, text).unwrap();
    let out = dir.path().join("res");
    let run = decals(&["deconvolve", "--signature", path(&sig), "--bulk", path(&bulk), "--out", path(&out)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("g7"), "{}", stderr(&run));
    assert!(!out.join("proportions.csv").exists());

    // with intersection the unmatched gene is dropped and the fit is still exact
    let run = decals(&[
        "deconvolve",
        "--signature",
        path(&sig),
        "--bulk",
        path(&bulk),
        "--out",
        path(&out),
        "--intersect-genes",
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let rows = read_csv(&out.join("proportions.csv"));
    let v: f64 = rows[1][1].parse().unwrap();
    assert!((v - pi[0][0]).abs() < 1e-8);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["genes"]["used"], 11);
}

#[test]
fn parse_errors_report_line_and_column() {
    let dir = TempDir::new().unwrap();
    let (sig, bulk, _) = write_fixture(dir.path(), 12, 8);
    let mut lines: Vec<String> = fs::read_to_string(&bulk).unwrap().lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[3].split('\t').map(String::from).collect();
    fields[2] = "n/a".into();
    lines[3] = fields.join("\t");
    fs::write(&bulk, lines.join("\n")).unwrap();
    let run = decals(&["deconvolve", "--signature", path(&sig), "--bulk", path(&bulk), "--out", path(&dir.path().join("r"))]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("bulk.tsv:4:3"), "{}", stderr(&run));

    fs::write(&bulk, "gene\ts1\ts2\ng1\t1.0\n").unwrap();
    let run = decals(&["deconvolve", "--signature", path(&sig), "--bulk", path(&bulk), "--out", path(&dir.path().join("r"))]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("bulk.tsv:2:"), "{}", stderr(&run));
}

#[test]
fn sampling_writes_checksummed_draws() {
    let dir = TempDir::new().unwrap();
    let (sig, bulk, _) = write_fixture(dir.path(), 12, 8);
    let res = dir.path().join("res");
    assert!(decals(&["deconvolve", "--signature", path(&sig), "--bulk", path(&bulk), "--out", path(&res)])
        .status
        .success());

    // zero covariance: the single draw reproduces the estimate
    let zeroed = dir.path().join("zeroed");
    fs::create_dir(&zeroed).unwrap();
    fs::copy(res.join("proportions.csv"), zeroed.join("proportions.csv")).unwrap();
    let mut cov: serde_json::Value = serde_json::from_slice(&fs::read(res.join("covariances.json")).unwrap()).unwrap();
    for s in cov["samples"].as_array_mut().unwrap() {
        s["matrix"] = serde_json::json!([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    }
    fs::write(zeroed.join("covariances.json"), serde_json::to_vec(&cov).unwrap()).unwrap();
    let draws = dir.path().join("draws");
    let run = decals(&["sample", "--result", path(&zeroed), "--draws", "1", "--seed", "7", "--out", path(&draws)]);
    assert!(run.status.success(), "{}", stderr(&run));
    let est = read_csv(&res.join("proportions.csv"));
    let drawn = read_csv(&draws.join("draw_0001.csv"));
    assert_eq!(est.len(), drawn.len());
    for (a, b) in est[1..].iter().zip(&drawn[1..]) {
        assert_eq!(a[0], b[0]);
        for c in 1..4 {
            let (x, y): (f64, f64) = (a[c].parse().unwrap(), b[c].parse().unwrap());
            assert!((x - y).abs() < 1e-13);
        }
    }

    let many = dir.path().join("many");
    let run = decals(&["sample", "--result", path(&res), "--draws", "5", "--seed", "7", "--out", path(&many)]);
    assert!(run.status.success(), "{}", stderr(&run));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(many.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let file = many.join(f["file"].as_str().unwrap());
        let bytes = fs::read(&file).unwrap();
        let digest = sha256_hex(&bytes);
        assert_eq!(f["sha256"].as_str().unwrap(), digest);
        for row in &read_csv(&file)[1..] {
            let v: Vec<f64> = row[1..].iter().map(|x| x.parse().unwrap()).collect();
            assert!(v.iter().all(|x| *x >= 0.0));
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    // mismatched sample ids between the two inputs
    let mut cov: serde_json::Value = serde_json::from_slice(&fs::read(res.join("covariances.json")).unwrap()).unwrap();
    cov["samples"][0]["sample_id"] = "other".into();
    fs::write(zeroed.join("covariances.json"), serde_json::to_vec(&cov).unwrap()).unwrap();
    let run = decals(&["sample", "--result", path(&zeroed), "--draws", "1", "--out", path(&draws)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("other"), "{}", stderr(&run));
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn aggregation_applies_the_cutoff() {
    let dir = TempDir::new().unwrap();
    let pv = dir.path().join("p.csv");
    let mut text = String::from("draw_index,unit_id,cell_type,p_value\n");
    for d in 1..=100 {
        text += &format!("{d},geneA,T,{}\n", if d <= 11 { 0.001 } else { 0.5 });
        text += &format!("{d},geneB,T,{}\n", if d <= 10 { 0.001 } else { 0.5 });
    }
    fs::write(&pv, text).unwrap();
    let out = dir.path().join("calls.csv");
    let run = decals(&["aggregate", "--pvalues", path(&pv), "--draws", "100", "--out", path(&out)]);
    assert!(run.status.success(), "{}", stderr(&run));
    let rows = read_csv(&out);
    assert_eq!(rows[0], ["unit_id", "cell_type", "hit_count", "cutoff", "called"]);
    assert_eq!(rows[1], ["geneA", "T", "11", "10", "true"]);
    assert_eq!(rows[2], ["geneB", "T", "10", "10", "false"]);

    let run = decals(&["aggregate", "--pvalues", path(&pv), "--draws", "100", "--cutoff", "5", "--out", path(&out)]);
    assert!(run.status.success());
    assert_eq!(read_csv(&out)[2][4], "true");

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let run = decals(&["aggregate", "--pvalues", path(&empty), "--draws", "100", "--out", path(&out)]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert_eq!(read_csv(&out), vec![vec!["unit_id", "cell_type", "hit_count", "cutoff", "called"]]);

    fs::write(&pv, "draw_index,unit_id,cell_type,p_value\n1,g,T,0.1\n2,g,T,1.5\n").unwrap();
    let run = decals(&["aggregate", "--pvalues", path(&pv), "--draws", "2", "--out", path(&out)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains("p.csv:3:4"), "{}", stderr(&run));

    fs::write(&pv, "draw,unit,cell_type,p\n").unwrap();
    let run = decals(&["aggregate", "--pvalues", path(&pv), "--draws", "2", "--out", path(&out)]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn small_simulation_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"p": 30, "n": 60}"#).unwrap();
    let run_once = |name: &str| {
        let out = dir.path().join(name);
        let run = decals(&[
            "simulate",
            "--preset",
            "fig4",
            "--config",
            path(&cfg),
            "--replicates",
            "1",
            "--seed",
            "5",
            "--out",
            path(&out),
        ]);
        assert!(run.status.success(), "{}", stderr(&run));
        out
    };
    let (a, b) = (run_once("a"), run_once("b"));
    for f in ["report.json", "coverage.csv", "replicates.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rows = read_csv(&a.join("coverage.csv"));
    assert_eq!(rows.len(), 1 + 2 * 3);
    assert!(rows[1..].iter().any(|r| r[0] == "ols") && rows[1..].iter().any(|r| r[0] == "decals"));
    // one replicate of 60 samples: coverage is a multiple of 1/60
    for r in &rows[1..] {
        let c: f64 = r[3].parse().unwrap();
        assert!((c * 60.0 - (c * 60.0).round()).abs() < 1e-9, "{c}");
    }

    fs::write(&cfg, r#"{"p": 31}"#).unwrap();
    let run = decals(&["simulate", "--config", path(&cfg), "--out", path(&dir.path().join("c"))]);
    assert_eq!(run.status.code(), Some(2));
}
