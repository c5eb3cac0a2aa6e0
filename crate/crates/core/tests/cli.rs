use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zocertify::certify::parse_curve_csv;
use zocertify::experiment::Manifest;
use zocertify::zo::RunLog;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn zocertify(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zocertify"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = zocertify(args, &smoke_config(), out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

const DEFENCES: [&[&str]; 4] = [
    &["defend", "--method", "zo-ruds", "--estimator", "rge"],
    &["defend", "--method", "zo-ruds", "--estimator", "cge"],
    &["defend", "--method", "zo-ae-ruds", "--estimator", "cge"],
    &["defend", "--method", "fo-ds"],
];

fn full_pipeline(out: &Path) {
    ok(&["train-target"], out);
    for d in DEFENCES {
        ok(d, out);
    }
    for name in ["identity", "zo-ruds-rge", "zo-ae-ruds-cge", "fo-ds"] {
        ok(&["certify", "--defense", name], out);
    }
    ok(&["report"], out);
}

/// Every CSV and checkpoint below `dir`, keyed by relative path.
fn artefacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "ckpt")) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_byte_reproducible_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    full_pipeline(&a);
    full_pipeline(&b);
    let (fa, fb) = (artefacts(&a), artefacts(&b));
    assert!(fa.len() >= 16, "{:?}", fa.keys().collect::<Vec<_>>());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs between reruns", k.display());
    }

    // Query accounting: 18 examples, one epoch, q = 12 and d_r = 6 both
    // give 13 queries per example.
    let training = |run: &str| Manifest::load(&a.join("defend").join(run)).unwrap().queries["training"];
    assert_eq!(training("zo-ruds-rge"), 18 * 13);
    assert_eq!(training("zo-ruds-cge"), 18 * (2 * 256 + 1));
    assert_eq!(training("zo-ae-ruds-cge"), 18 * 13);
    assert_eq!(training("fo-ds"), 0);

    // Paired noise: before the first update the estimators see the same batch.
    let first = |run: &str| {
        let log = RunLog::parse_csv(&std::fs::read(a.join("defend").join(run).join("runlog.csv")).unwrap()).unwrap();
        let r = &log.rows[0];
        (r.ce, r.cs, r.mmd, r.total)
    };
    assert_eq!(first("zo-ruds-rge"), first("zo-ruds-cge"));

    // The report repeats each curve's values exactly.
    let table = std::fs::read_to_string(a.join("report/table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "defense,training_queries,certification_queries,n_examples,ca@0,ca@0.25,ca@0.5,ca@0.75"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let curve = parse_curve_csv(&std::fs::read(a.join("certify").join(cols[0]).join("curve.csv")).unwrap()).unwrap();
        assert_eq!(curve.len(), 4);
        assert_eq!(cols[4].parse::<f64>().unwrap(), curve[0].certified_accuracy);
    }
    let plot = std::fs::read_to_string(a.join("report/plot_data.csv")).unwrap();
    assert_eq!(plot.lines().next(), Some("x,y,series"));
    assert_eq!(plot.lines().count(), 1 + 4 * 4);
}

#[test]
fn invalid_requests_exit_with_validation_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();

    let o = zocertify(&["defend", "--method", "fo-ds", "--estimator", "rge"], &smoke_config(), out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("zo-ae-ruds   rge | cge"), "{err}");

    let o = zocertify(&["defend", "--method", "zo-ruds", "--estimator", "sgd"], &smoke_config(), out);
    assert_eq!(o.status.code(), Some(2));

    let o = zocertify(&["certify", "--defense", "zo-ruds-rge"], &smoke_config(), out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-target"));

    let o = zocertify(&["train-target"], &out.join("missing.toml"), out);
    assert_eq!(o.status.code(), Some(2));

    let text = std::fs::read_to_string(smoke_config())
        .unwrap()
        .replace("q = 12", "q = 0")
        .replace("n0 = 10", "n0 = 100");
    let bad = out.join("bad.toml");
    std::fs::write(&bad, text).unwrap();
    let o = zocertify(&["train-target"], &bad, out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("zo.q") && err.contains("certify.n "), "{err}");
}

#[test]
fn report_rejects_inconsistent_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(&["train-target"], out);
    ok(&["certify", "--defense", "identity"], out);
    let text = std::fs::read_to_string(smoke_config())
        .unwrap()
        .replace("radii_grid = [0.0, 0.25, 0.5, 0.75]", "radii_grid = [0.0, 0.5]");
    let other = out.join("other.toml");
    std::fs::write(&other, text).unwrap();
    ok(&["defend", "--method", "fo-ds"], out);
    let o = zocertify(&["certify", "--defense", "fo-ds"], &other, out);
    assert!(o.status.success());
    let o = zocertify(&["report"], &smoke_config(), out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("radii grid"));
}

#[test]
fn gradcheck_reports_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_zocertify"))
        .args(["gradcheck", "--seeds", "2", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report = std::fs::read_to_string(tmp.path().join("gradcheck/report.csv")).unwrap();
    assert!(report.starts_with("check,seeds,max_error,tolerance,status,detail"));
    let cge = report.lines().find(|l| l.starts_with("cge_quadratic,")).unwrap();
    let err: f64 = cge.split(',').nth(2).unwrap().parse().unwrap();
    assert!(err <= 1e-8);
    assert!(report.lines().skip(1).all(|l| l.contains(",pass,")), "{report}");
}
