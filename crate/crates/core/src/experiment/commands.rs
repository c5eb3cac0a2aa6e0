//! The pipeline stages behind the command-line subcommands. Each stage
//! reads its inputs from, and writes its outputs to, the run directory.
//!
//! ```text
//! <out>/data/{train,test}.ckpt, data/manifest.toml
//! <out>/target/classifier.ckpt, accuracy.csv
//! <out>/defend/<run>/defense.ckpt, runlog.csv
//! <out>/certify/<defense>/certificates.csv, curve.csv
//! <out>/gradcheck/report.csv
//! <out>/report/table.csv, table.txt, plot_data.csv
//! ```
//!
//! Every stage directory also gets the resolved `config.toml`, a
//! `manifest.toml` with content hashes and query totals, and a
//! `timing.toml`. The timing files and `report/table.txt` carry wall-clock
//! and are the only outputs that differ between identical reruns.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DatasetConfig, ExperimentConfig};
use crate::blackbox::{BlackBox, WhiteBox};
use crate::certify::{certificates_csv, certified_accuracy_curve, curve_csv, SmoothedClassifier};
use crate::checks::{full_suite, outcomes_csv, run_checks, CheckOutcome};
use crate::data::seed::{derive_seed, tag};
use crate::data::{generate_synthetic, load_idx, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::training::{accuracy, pretrain_autoencoder, train_classifier};
use crate::models::{Autoencoder, Classifier, Defense, RdUnet};
use crate::numerics::Checkpoint;
use crate::zo::{train_fo_ds, train_zo_ae_ruds, train_zo_ruds, Estimator, TrainReport};

/// Seeds for model initialisation, one per network family.
mod init {
    pub const CLASSIFIER: u64 = 1;
    pub const DENOISER: u64 = 2;
    pub const AUTOENCODER: u64 = 3;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    ZoRuds,
    ZoAeRuds,
    FoDs,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zo-ruds" => Some(Method::ZoRuds),
            "zo-ae-ruds" => Some(Method::ZoAeRuds),
            "fo-ds" => Some(Method::FoDs),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::ZoRuds => "zo-ruds",
            Method::ZoAeRuds => "zo-ae-ruds",
            Method::FoDs => "fo-ds",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepted `(method, estimator)` pairs, as printed on a mismatch.
pub const METHOD_MATRIX: &str = "\
method       estimator
zo-ruds      rge | cge
zo-ae-ruds   rge | cge
fo-ds        (none: first-order baseline)";

/// Resolves the estimator of a defence run; `None` means first-order.
pub fn resolve_estimator(
    method: Method,
    estimator: Option<Estimator>,
    cfg: &ExperimentConfig,
) -> Result<Option<Estimator>> {
    match (method, estimator) {
        (Method::FoDs, Some(e)) => Err(Error::Validation(vec![format!(
            "method fo-ds does not take an estimator (got {}); valid pairs:\n{METHOD_MATRIX}",
            e.name()
        )])),
        (Method::FoDs, None) => Ok(None),
        (_, Some(e)) => Ok(Some(e)),
        (_, None) => Ok(Some(cfg.zo.estimator)),
    }
}

pub fn run_name(method: Method, estimator: Option<Estimator>) -> String {
    match estimator {
        Some(e) => format!("{}-{}", method.name(), e.name()),
        None => method.name().to_string(),
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What a stage consumed and produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// File name to SHA-256 of the files read.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// File name to SHA-256 of the files written.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
    /// Black-box query totals by phase.
    #[serde(default)]
    pub queries: BTreeMap<String, u64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            ..Self::default()
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))?;
        toml::from_str(&text).map_err(|e| Error::parse(e.span().map_or(0, |s| s.start), e.message().to_string()))
    }
}

/// Wall-clock of a stage, kept apart from every reproducible output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_ms: u64,
}

impl Timing {
    pub fn load(dir: &Path) -> Option<Self> {
        toml::from_str(&std::fs::read_to_string(dir.join("timing.toml")).ok()?).ok()
    }
}

/// A stage directory being filled.
struct Stage {
    dir: PathBuf,
    manifest: Manifest,
    start: Instant,
}

impl Stage {
    fn open(dir: PathBuf, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
        Ok(Self {
            dir,
            manifest: Manifest::new(command, cfg.seed),
            start: Instant::now(),
        })
    }

    fn read(&mut self, label: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Validation(vec![format!("{label}: cannot read {}: {e}", path.display())])
        })?;
        self.manifest.inputs.insert(label.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(self) -> Result<PathBuf> {
        let manifest = toml::to_string(&self.manifest).expect("manifest serialises");
        std::fs::write(self.dir.join("manifest.toml"), manifest)?;
        let timing = Timing {
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        std::fs::write(self.dir.join("timing.toml"), toml::to_string(&timing).expect("timing serialises"))?;
        Ok(self.dir)
    }
}

/// The train and test splits, from the dataset cache when it matches the
/// configured dataset.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.out_dir.join("data");
    let key = sha256_hex(toml::to_string(&DatasetKey { seed: cfg.seed, dataset: &cfg.dataset }).expect("key").as_bytes());
    if let Ok(m) = Manifest::load(&dir) {
        if m.notes.get("key") == Some(&key) {
            let load = |name: &str| -> Result<Dataset> {
                let bytes = std::fs::read(dir.join(name))?;
                if m.outputs.get(name) != Some(&sha256_hex(&bytes)) {
                    return Err(Error::InvalidArgument(format!("{name} does not match its manifest")));
                }
                Dataset::from_checkpoint(&Checkpoint::decode(&bytes)?)
            };
            match (load("train.ckpt"), load("test.ckpt")) {
                (Ok(train), Ok(test)) => return Ok((train, test)),
                (Err(e), _) | (_, Err(e)) => log::warn!("rebuilding dataset cache: {e}"),
            }
        }
    }
    let (train, test) = build_datasets(cfg)?;
    let mut stage = Stage::open(dir, "data", cfg)?;
    stage.manifest.notes.insert("key".into(), key);
    stage.write("train.ckpt", &train.to_checkpoint().encode())?;
    stage.write("test.ckpt", &test.to_checkpoint().encode())?;
    stage.finish()?;
    Ok((train, test))
}

#[derive(Serialize)]
struct DatasetKey<'a> {
    seed: u64,
    dataset: &'a DatasetConfig,
}

fn build_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            image_size,
            channels,
            train_per_class,
            test_per_class,
            seed,
        } => {
            let spec = SyntheticSpec {
                classes: *classes,
                image_size: *image_size,
                channels: *channels,
                per_class: *train_per_class,
                seed: seed.unwrap_or(cfg.seed),
            };
            let train = generate_synthetic(&spec, Split::Train)?;
            let test = generate_synthetic(
                &SyntheticSpec {
                    per_class: *test_per_class,
                    ..spec
                },
                Split::Test,
            )?;
            Ok((train, test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let mut train = load_idx(train_images, train_labels, Split::Train)?;
            let mut test = load_idx(test_images, test_labels, Split::Test)?;
            if let Some(n) = train_limit {
                train = train.take(*n);
            }
            if let Some(n) = test_limit {
                test = test.take(*n);
            }
            let [c, h, w] = train.image_shape();
            let want = cfg.image_shape();
            if [c, h, w] != want || test.image_shape() != want {
                return Err(Error::Validation(vec![format!(
                    "IDX images are {c}x{h}x{w} but the models expect {}x{}x{}",
                    want[0], want[1], want[2]
                )]));
            }
            let classes = cfg.classes();
            for (split, d) in [("train", &mut train), ("test", &mut test)] {
                if d.classes > classes {
                    return Err(Error::Validation(vec![format!(
                        "IDX {split} labels reach {} but classifier.classes = {classes}",
                        d.classes - 1
                    )]));
                }
                d.classes = classes;
            }
            Ok((train, test))
        }
    }
}

fn init_rng(cfg: &ExperimentConfig, family: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag::INIT, family]))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub split: &'static str,
    pub accuracy: f64,
    pub n_examples: usize,
}

#[derive(Clone, Debug)]
pub struct TargetSummary {
    pub dir: PathBuf,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains the classifier that later becomes the black box.
pub fn train_target(cfg: &ExperimentConfig) -> Result<TargetSummary> {
    let (train, test) = datasets(cfg)?;
    let mut stage = Stage::open(cfg.out_dir.join("target"), "train-target", cfg)?;
    let mut clf = Classifier::new(cfg.classifier.clone(), &mut init_rng(cfg, init::CLASSIFIER))?;
    let history = train_classifier(&mut clf, &train, &cfg.target_training, cfg.seed)?;
    if let Some(last) = history.last() {
        if !last.is_finite() {
            return Err(Error::NonFinite(format!("classifier training loss {last}")));
        }
    }
    let train_accuracy = accuracy(&clf, &train)?;
    let test_accuracy = accuracy(&clf, &test)?;
    stage.write("classifier.ckpt", &Checkpoint::from_module(&clf, "classifier").encode())?;
    let rows = [
        AccuracyRow {
            split: "train",
            accuracy: train_accuracy,
            n_examples: train.len(),
        },
        AccuracyRow {
            split: "test",
            accuracy: test_accuracy,
            n_examples: test.len(),
        },
    ];
    stage.write("accuracy.csv", &csv_bytes(&rows)?)?;
    let dir = stage.finish()?;
    Ok(TargetSummary {
        dir,
        train_accuracy,
        test_accuracy,
    })
}

fn target_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("target").join("classifier.ckpt")
}

fn load_classifier(cfg: &ExperimentConfig, stage: &mut Stage) -> Result<Classifier> {
    let path = target_path(cfg);
    if !path.is_file() {
        return Err(Error::Validation(vec![format!(
            "classifier checkpoint {} is missing; run train-target first",
            path.display()
        )]));
    }
    let bytes = stage.read("classifier.ckpt", &path)?;
    let mut clf = Classifier::new(cfg.classifier.clone(), &mut init_rng(cfg, init::CLASSIFIER))?;
    Checkpoint::decode(&bytes)?.load_into(&mut clf, "classifier")?;
    Ok(clf)
}

#[derive(Clone, Debug)]
pub struct DefendSummary {
    pub dir: PathBuf,
    pub run: String,
    pub report: TrainReport,
}

/// Trains a defence in front of the sealed classifier. If training halts
/// on a non-finite value the last finite state is still written and the
/// error is returned afterwards.
pub fn defend(cfg: &ExperimentConfig, method: Method, estimator: Option<Estimator>) -> Result<DefendSummary> {
    let estimator = resolve_estimator(method, estimator, cfg)?;
    let run = run_name(method, estimator);
    let (train, _) = datasets(cfg)?;
    let mut stage = Stage::open(cfg.out_dir.join("defend").join(&run), "defend", cfg)?;
    let clf = load_classifier(cfg, &mut stage)?;
    let mut denoiser = RdUnet::new(cfg.denoiser.clone(), &mut init_rng(cfg, init::DENOISER))?;
    let mut zo = cfg.zo.clone();
    if let Some(e) = estimator {
        zo.estimator = e;
    }
    let mut ck = Checkpoint::new();
    let report = match method {
        Method::FoDs => {
            let mut wb = WhiteBox::new(clf);
            let r = train_fo_ds(&train, &mut denoiser, &mut wb, &cfg.loss, &cfg.schedule, cfg.seed)?;
            ck.extend_from_module(&denoiser, "denoiser");
            r
        }
        Method::ZoRuds => {
            let bb = BlackBox::seal_image_classifier(clf);
            let r = train_zo_ruds(&train, &mut denoiser, &bb, &cfg.loss, &zo, &cfg.schedule, cfg.seed)?;
            ck.extend_from_module(&denoiser, "denoiser");
            r
        }
        Method::ZoAeRuds => {
            let bb = BlackBox::seal_image_classifier(clf);
            let mut ae = Autoencoder::new(cfg.autoencoder.clone(), &mut init_rng(cfg, init::AUTOENCODER))?;
            let history = pretrain_autoencoder(&mut ae, &train, &cfg.autoencoder_pretraining, cfg.seed)?;
            if let Some(last) = history.last() {
                stage.manifest.notes.insert("autoencoder_pretrain_mse".into(), last.to_string());
            }
            let r = train_zo_ae_ruds(&train, &mut denoiser, &mut ae, &bb, &cfg.loss, &zo, &cfg.schedule, cfg.seed)?;
            ck.extend_from_module(&denoiser, "denoiser");
            ck.extend_from_module(&ae, "autoencoder");
            r
        }
    };
    stage.write("defense.ckpt", &ck.encode())?;
    stage.write("runlog.csv", &report.log.to_csv()?)?;
    let q = &mut stage.manifest.queries;
    q.insert("reference".into(), report.reference_queries);
    q.insert("training".into(), report.training_queries);
    stage.manifest.notes.insert("method".into(), method.name().into());
    stage.manifest.notes.insert(
        "estimator".into(),
        estimator.map_or("none", |e| e.name()).into(),
    );
    stage.manifest.notes.insert("steps".into(), report.steps.to_string());
    if let Some(h) = &report.halted {
        stage.manifest.notes.insert("halted".into(), h.clone());
    }
    let dir = stage.finish()?;
    if let Some(h) = &report.halted {
        return Err(Error::NonFinite(format!("{run} training halted: {h}")));
    }
    Ok(DefendSummary { dir, run, report })
}

/// Rebuilds a trained defence from its run directory.
pub fn load_defense(cfg: &ExperimentConfig, run: &str) -> Result<(Defense, Vec<u8>)> {
    let path = cfg.out_dir.join("defend").join(run).join("defense.ckpt");
    if !path.is_file() {
        return Err(Error::Validation(vec![format!(
            "defence checkpoint {} is missing; run defend first",
            path.display()
        )]));
    }
    let bytes = std::fs::read(&path)?;
    let ck = Checkpoint::decode(&bytes)?;
    let mut denoiser = RdUnet::new(cfg.denoiser.clone(), &mut init_rng(cfg, init::DENOISER))?;
    ck.load_into(&mut denoiser, "denoiser")?;
    let has_ae = ck.entries.iter().any(|(n, _)| n.starts_with("autoencoder."));
    let defense = if has_ae {
        let mut ae = Autoencoder::new(cfg.autoencoder.clone(), &mut init_rng(cfg, init::AUTOENCODER))?;
        ck.load_into(&mut ae, "autoencoder")?;
        Defense::DenoiserAe {
            denoiser,
            autoencoder: ae,
        }
    } else {
        Defense::Denoiser(denoiser)
    };
    Ok((defense, bytes))
}

#[derive(Clone, Debug)]
pub struct CertifySummary {
    pub dir: PathBuf,
    pub curve: Vec<crate::certify::CurvePoint>,
    pub queries: u64,
}

/// Certifies every test example under `defense` (`identity` or the name
/// of a defend run).
pub fn certify(cfg: &ExperimentConfig, defense: &str) -> Result<CertifySummary> {
    if defense.is_empty() || defense.contains(['/', '\\']) || defense.starts_with('.') {
        return Err(Error::Validation(vec![format!("invalid defence name {defense:?}")]));
    }
    let (_, test) = datasets(cfg)?;
    let mut stage = Stage::open(cfg.out_dir.join("certify").join(defense), "certify", cfg)?;
    let clf = load_classifier(cfg, &mut stage)?;
    let model = if defense == "identity" {
        Defense::Identity
    } else {
        let (d, bytes) = load_defense(cfg, defense)?;
        stage.manifest.inputs.insert("defense.ckpt".into(), sha256_hex(&bytes));
        d
    };
    let bb = BlackBox::seal_image_classifier(clf);
    let smoothed = SmoothedClassifier {
        blackbox: &bb,
        defense: &model,
    };
    let (certs, curve) = certified_accuracy_curve(&smoothed, &test, &cfg.certify, derive_seed(cfg.seed, &[tag::CERTIFY]))?;
    stage.write("certificates.csv", &certificates_csv(&certs)?)?;
    stage.write("curve.csv", &curve_csv(&curve)?)?;
    let queries = bb.queries().certification;
    stage.manifest.queries.insert("certification".into(), queries);
    stage.manifest.notes.insert("defense".into(), defense.into());
    let dir = stage.finish()?;
    Ok(CertifySummary { dir, curve, queries })
}

#[derive(Clone, Debug)]
pub struct GradcheckSummary {
    pub dir: PathBuf,
    pub outcomes: Vec<CheckOutcome>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

/// Runs the full finite-difference and estimator suite over `seeds` seeds.
pub fn gradcheck(out_dir: &Path, seeds: usize) -> Result<GradcheckSummary> {
    let dir = out_dir.join("gradcheck");
    std::fs::create_dir_all(&dir)?;
    let outcomes = run_checks(&full_suite(), seeds);
    std::fs::write(dir.join("report.csv"), outcomes_csv(&outcomes)?)?;
    Ok(GradcheckSummary { dir, outcomes })
}
