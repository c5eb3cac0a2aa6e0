//! Replays the checked-in fuzz seeds through the same entry points as the
//! fuzz targets, so the seeds stay meaningful without a nightly toolchain.

use std::path::Path;

use zocertify::certify::parse_curve_csv;
use zocertify::data::{parse_idx_images, parse_idx_labels};
use zocertify::experiment::ExperimentConfig;
use zocertify::numerics::Checkpoint;
use zocertify::zo::RunLog;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn idx_seeds() {
    for (name, bytes) in seeds("idx_images") {
        assert_eq!(parse_idx_images(&bytes).is_ok(), name == "seed-2x2x2", "{name}");
    }
    for (name, bytes) in seeds("idx_labels") {
        assert_eq!(parse_idx_labels(&bytes).is_ok(), name == "seed-3", "{name}");
    }
}

#[test]
fn checkpoint_seeds_round_trip() {
    for (name, bytes) in seeds("checkpoint") {
        let ck = Checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ck.encode(), bytes, "{name}");
    }
}

#[test]
fn config_seeds_validate() {
    for (name, bytes) in seeds("config") {
        let cfg = ExperimentConfig::from_toml(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert!(cfg.validate().is_empty(), "{name}");
    }
}

#[test]
fn csv_seeds() {
    for (name, bytes) in seeds("curve_csv") {
        assert_eq!(parse_curve_csv(&bytes).is_ok(), name != "seed-empty", "{name}");
    }
    for (name, bytes) in seeds("runlog_csv") {
        let log = RunLog::parse_csv(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(log.to_csv().unwrap(), bytes);
    }
}
