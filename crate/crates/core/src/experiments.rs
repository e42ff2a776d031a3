//! Experiment harness: configuration, data, robustness sweeps and result files.
//!
//! A run builds the benign parties once, executes the protocol without an
//! adversary, then once per swept attack with the malicious-party count set
//! just below the configured aggregator's breaking point. Every run draws from
//! the same per-party streams, so attack runs differ from the benign run only
//! by what the adversary sends.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregatorKind, CronusConfig, DEFAULT_MWU_ITERS};
use crate::attacks::{AttackKind, ThreatSpec, DEFAULT_PAF_MAGNITUDE};
use crate::federation::{
    run_cronus, run_fedavg, run_standalone, FederationError, Party, ProtocolConfig, ProtocolKind, RoundRecord,
};
use crate::model::{init_params, Activation, Architecture, Dataset, ModelError};
use crate::numerics::{squared_distance, Matrix};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("config syntax: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: FederationError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub master_seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub attack_sweep: Vec<AttackKind>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for party training; 0 uses every core. Results do not
    /// depend on it.
    #[serde(default)]
    pub workers: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Csv(CsvConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub per_party: usize,
    /// Benign parties. Malicious parties are added per attack run.
    pub parties: usize,
    pub public_size: usize,
    pub test_size: usize,
    pub cluster_sep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub train_path: PathBuf,
    pub public_path: PathBuf,
    pub test_path: PathBuf,
    /// The training file is split into this many contiguous shards.
    pub parties: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    /// The first `linear_parties` benign parties use a softmax-regression
    /// model instead (prediction sharing only).
    pub linear_parties: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![32],
            activation: Activation::Tanh,
            linear_parties: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub protocol: ProtocolKind,
    pub aggregator: AggregatorKind,
    pub rounds: usize,
    pub init_epochs: usize,
    pub local_epochs: usize,
    pub lr_private: f64,
    pub lr_public: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub public_subset_per_round: Option<usize>,
    /// Fixed ε for the robust rules. When absent each run uses its actual
    /// malicious fraction.
    pub epsilon_assumed: Option<f64>,
    pub mwu_iters: usize,
    pub cronus: CronusConfig,
    pub paf_magnitude: f64,
    pub grad_gamma: f64,
    /// Gradient-ascent targets: this many leading records of party 0.
    pub grad_targets: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            protocol: p.protocol,
            aggregator: p.aggregator,
            rounds: p.rounds,
            init_epochs: p.init_epochs,
            local_epochs: p.local_epochs,
            lr_private: p.lr_private,
            lr_public: p.lr_public,
            batch_size: p.batch_size,
            temperature: p.temperature,
            public_subset_per_round: None,
            epsilon_assumed: None,
            mwu_iters: DEFAULT_MWU_ITERS,
            cronus: CronusConfig::default(),
            paf_magnitude: DEFAULT_PAF_MAGNITUDE,
            grad_gamma: 1.0,
            grad_targets: 10,
        }
    }
}

impl ProtocolSection {
    fn to_protocol(&self, epsilon: f64, threat: ThreatSpec) -> ProtocolConfig {
        ProtocolConfig {
            protocol: self.protocol,
            aggregator: self.aggregator,
            rounds: self.rounds,
            init_epochs: self.init_epochs,
            local_epochs: self.local_epochs,
            lr_private: self.lr_private,
            lr_public: self.lr_public,
            batch_size: self.batch_size,
            temperature: self.temperature,
            public_subset_per_round: self.public_subset_per_round,
            epsilon_assumed: epsilon,
            mwu_iters: self.mwu_iters,
            cronus: self.cronus.clone(),
            threat,
        }
    }

    /// Epochs a stand-alone party trains to match the protocol's budget.
    pub fn standalone_epochs(&self) -> usize {
        match self.protocol {
            ProtocolKind::Fedavg => self.rounds * self.local_epochs,
            ProtocolKind::Cronus => self.init_epochs + self.rounds * self.local_epochs,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn benign_parties(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.parties,
            DatasetConfig::Csv(c) => c.parties,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => {
                let counts = [
                    ("classes", s.classes),
                    ("feature_dim", s.feature_dim),
                    ("per_party", s.per_party),
                    ("parties", s.parties),
                    ("public_size", s.public_size),
                    ("test_size", s.test_size),
                ];
                if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
                    return Err(config_err(format!("dataset.synthetic.{name} must be positive")));
                }
                if !(s.cluster_sep.is_finite() && s.cluster_sep > 0.0) {
                    return Err(config_err("dataset.synthetic.cluster_sep must be positive"));
                }
                if let Some(k) = self.protocol.public_subset_per_round {
                    if k > s.public_size {
                        return Err(config_err(format!(
                            "protocol.public_subset_per_round {k} exceeds public_size {}",
                            s.public_size
                        )));
                    }
                }
            }
            DatasetConfig::Csv(c) => {
                if c.parties == 0 || c.classes == 0 {
                    return Err(config_err("dataset.csv.parties and classes must be positive"));
                }
            }
        }
        let p = &self.protocol;
        if p.rounds == 0 {
            return Err(config_err("protocol.rounds must be positive"));
        }
        for (name, v) in [
            ("lr_private", p.lr_private),
            ("lr_public", p.lr_public),
            ("temperature", p.temperature),
            ("paf_magnitude", p.paf_magnitude),
            ("grad_gamma", p.grad_gamma),
        ] {
            if !v.is_finite() {
                return Err(config_err(format!("protocol.{name} must be finite")));
            }
        }
        if p.temperature <= 0.0 {
            return Err(config_err("protocol.temperature must be positive"));
        }
        p.to_protocol(p.epsilon_assumed.unwrap_or(0.0), ThreatSpec::benign())
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        if self.attack_sweep.contains(&AttackKind::None) {
            return Err(config_err("attack_sweep may not contain none"));
        }
        if self.attack_sweep.contains(&AttackKind::GradAscent) && p.protocol == ProtocolKind::Cronus {
            return Err(config_err("grad_ascent only applies to parameter averaging"));
        }
        if self.model.linear_parties > 0 && p.protocol == ProtocolKind::Fedavg {
            return Err(config_err("parameter averaging needs one architecture; set model.linear_parties = 0"));
        }
        if self.model.linear_parties > self.benign_parties() {
            return Err(config_err("model.linear_parties exceeds the party count"));
        }
        if self.model.hidden_sizes.contains(&0) {
            return Err(config_err("model.hidden_sizes entries must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data

/// Private shards, the unlabeled public set and the shared test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub shards: Vec<Dataset>,
    pub public: Matrix,
    pub test: Dataset,
    pub classes: usize,
}

impl FederatedData {
    pub fn feature_dim(&self) -> usize {
        self.test.features.cols()
    }
}

const DATA_STREAM: u64 = 0xDA7A;
const INIT_STREAM: u64 = 0x1417;
const PARTY_STREAM: u64 = 0x9A27;
const SERVER_STREAM: u64 = 0x5E7F;

/// Seeded Gaussian class clusters.
///
/// Class means are one standard-normal draw scaled so the closest pair sits
/// exactly `cluster_sep` apart; points add unit-variance noise to the mean of
/// a uniformly drawn label. Shards, public set and test set are disjoint
/// draws from one stream.
pub fn gen_synthetic(cfg: &SyntheticConfig, seed: u64) -> FederatedData {
    let (c, f) = (cfg.classes, cfg.feature_dim);
    let mut rng = rng_from_seed(derive_seed(seed, &[DATA_STREAM]));
    let mut means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..f).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut closest = f64::INFINITY;
    for i in 0..c {
        for j in i + 1..c {
            closest = closest.min(squared_distance(&means[i], &means[j]).sqrt());
        }
    }
    if closest.is_finite() && closest > 0.0 {
        let scale = cfg.cluster_sep / closest;
        means.iter_mut().flatten().for_each(|x| *x *= scale);
    }

    let mut draw = |n: usize| -> Dataset {
        let mut data = Vec::with_capacity(n * f);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.gen_range(0..c);
            data.extend(means[y].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(y);
        }
        Dataset::new(Matrix::from_vec(n, f, data).expect("sized above"), labels).expect("sized above")
    };
    let shards = (0..cfg.parties).map(|_| draw(cfg.per_party)).collect();
    let public = draw(cfg.public_size).features;
    let test = draw(cfg.test_size);
    FederatedData {
        shards,
        public,
        test,
        classes: c,
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn parse_err(line: u64, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_real(field: &str, line: u64, col: usize) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(line, format!("column {}: not a finite real: {field:?}", col + 1))),
    }
}

/// Parses a headerless CSV of reals with a consistent column count.
/// `expected_cols` pins the width.
pub fn parse_real_csv<R: Read>(r: R, expected_cols: Option<usize>) -> Result<Matrix> {
    let mut rdr = csv_reader(r);
    let mut data = Vec::new();
    let mut cols = expected_cols;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let width = *cols.get_or_insert(rec.len());
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} columns, found {}", rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            data.push(parse_real(field, line, j)?);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(parse_err(1, "empty file"));
    }
    Matrix::from_vec(rows, cols, data).ok_or_else(|| parse_err(1, "ragged rows"))
}

/// Parses `feature_1,…,feature_f,label` rows.
pub fn parse_labeled_csv<R: Read>(r: R, classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv_reader(r);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(parse_err(line, format!("expected {w} columns, found {}", rec.len())));
        }
        if w < 2 {
            return Err(parse_err(line, "need at least one feature and a label"));
        }
        for (j, field) in rec.iter().take(w - 1).enumerate() {
            data.push(parse_real(field, line, j)?);
        }
        let raw = &rec[w - 1];
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(line, format!("label {raw:?} is not a class index")))?;
        if let Some(c) = classes {
            if label >= c {
                return Err(parse_err(line, format!("label {label} outside 0..{c}")));
            }
        }
        labels.push(label);
    }
    let Some(w) = width else {
        return Err(parse_err(1, "empty file"));
    };
    let features = Matrix::from_vec(labels.len(), w - 1, data).ok_or_else(|| parse_err(1, "ragged rows"))?;
    Ok(Dataset::new(features, labels)?)
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(io_err(path))
}

fn in_file(path: &Path) -> impl FnOnce(ExperimentError) -> ExperimentError + '_ {
    move |e| ExperimentError::InFile {
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

/// Loads train, public and test files; the training rows are split into
/// `parties` contiguous shards, the first `len % parties` one row longer.
pub fn load_csv(cfg: &CsvConfig) -> Result<FederatedData> {
    let train = parse_labeled_csv(open(&cfg.train_path)?, Some(cfg.classes)).map_err(in_file(&cfg.train_path))?;
    let f = train.features.cols();
    let test = parse_labeled_csv(open(&cfg.test_path)?, Some(cfg.classes)).map_err(in_file(&cfg.test_path))?;
    if test.features.cols() != f {
        return Err(in_file(&cfg.test_path)(parse_err(
            1,
            format!("{} features, training data has {f}", test.features.cols()),
        )));
    }
    let public = parse_real_csv(open(&cfg.public_path)?, None).map_err(in_file(&cfg.public_path))?;
    if public.cols() != f {
        let hint = if public.cols() == f + 1 { "; the public set must not carry labels" } else { "" };
        return Err(in_file(&cfg.public_path)(parse_err(
            1,
            format!("{} columns, expected {f} features{hint}", public.cols()),
        )));
    }
    if train.len() < cfg.parties {
        return Err(config_err(format!(
            "{} training rows cannot fill {} parties",
            train.len(),
            cfg.parties
        )));
    }
    let (base, extra) = (train.len() / cfg.parties, train.len() % cfg.parties);
    let mut start = 0;
    let shards = (0..cfg.parties)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let rows: Vec<usize> = (start..start + len).collect();
            start += len;
            Dataset::new(train.features.select_rows(&rows), rows.iter().map(|&r| train.labels[r]).collect())
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(FederatedData {
        shards,
        public,
        test,
        classes: cfg.classes,
    })
}

/// Writes reals with Rust's shortest round-trip formatting.
pub fn write_real_csv<W: Write>(w: W, m: &Matrix) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

pub fn write_labeled_csv<W: Write>(w: W, d: &Dataset) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    for (row, y) in d.features.iter_rows().zip(&d.labels) {
        for x in row {
            write!(w, "{x},")?;
        }
        writeln!(w, "{y}")?;
    }
    w.flush()
}

/// Writes `train.csv` (shards concatenated in party order), `public.csv` and
/// `test.csv` into `dir`.
pub fn write_dataset_csv(data: &FederatedData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let create = |name: &str| {
        let p = dir.join(name);
        fs::File::create(&p).map_err(io_err(&p)).map(|f| (f, p))
    };
    let (f, p) = create("train.csv")?;
    write_labeled_csv(f, &Dataset::concat(&data.shards)).map_err(io_err(&p))?;
    let (f, p) = create("public.csv")?;
    write_real_csv(f, &data.public).map_err(io_err(&p))?;
    let (f, p) = create("test.csv")?;
    write_labeled_csv(f, &data.test).map_err(io_err(&p))?;
    Ok(())
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(s) => Ok(gen_synthetic(s, cfg.master_seed)),
        DatasetConfig::Csv(c) => load_csv(c),
    }
}

// ---------------------------------------------------------------------------
// Breaking points

/// Largest malicious count strictly below the rule's breaking point, given
/// `benign` honest parties and `n = benign + m` in total.
///
/// Krum tolerates `m/n < (n−2)/(2n)`, Bulyan `m/n < (n−3)/(4n)`, the median
/// family and the spectral filter `m/n < 1/2`. The mean has no breaking point
/// above zero; one attacker is enough and is what the sweep uses.
pub fn breaking_point_malicious(rule: AggregatorKind, benign: usize) -> usize {
    let below = |m: usize| {
        let n = benign + m;
        match rule {
            AggregatorKind::Mean => m <= 1,
            AggregatorKind::Median | AggregatorKind::MwuAvg | AggregatorKind::MwuOpt | AggregatorKind::Cronus => {
                2 * m < n
            }
            AggregatorKind::Krum => 2 * m + 2 < n,
            AggregatorKind::Bulyan => 4 * m + 3 < n,
        }
    };
    let mut m = 0;
    while below(m + 1) {
        m += 1;
    }
    m
}

/// Ratio of the spectral filter's sample complexity on parameters to that on
/// predictions, `(d₁ ln d₁)/(d₂ ln d₂)`; the `1/ε` factors cancel.
pub fn sample_complexity_ratio(d_params: usize, d_preds: usize) -> Result<f64> {
    if d_params < 2 || d_preds < 2 {
        return Err(config_err("dimensions must be at least 2"));
    }
    let g = |d: usize| d as f64 * (d as f64).ln();
    Ok(g(d_params) / g(d_preds))
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub benign_accuracy: f64,
    pub per_attack_accuracy: BTreeMap<String, f64>,
    pub worst_accuracy: Option<f64>,
    pub strongest_attack: Option<String>,
    pub robustness: Option<f64>,
    /// Mean benign-party accuracy when every party trains alone for the same
    /// number of epochs.
    pub standalone_accuracy: f64,
}

impl RobustnessReport {
    /// `per_attack` in sweep order; ties for the strongest attack go to the
    /// earliest.
    pub fn new(benign_accuracy: f64, per_attack: &[(String, f64)], standalone_accuracy: f64) -> Self {
        let strongest = per_attack
            .iter()
            .fold(None::<&(String, f64)>, |best, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            });
        let worst_accuracy = strongest.map(|s| s.1);
        // An attack can land above the benign run by chance; the ratio is
        // capped at 1 so it stays a fraction of benign accuracy retained.
        let robustness = match worst_accuracy {
            Some(w) if benign_accuracy > 0.0 => Some(w.min(benign_accuracy) / benign_accuracy),
            _ => None,
        };
        Self {
            benign_accuracy,
            per_attack_accuracy: per_attack.iter().cloned().collect(),
            worst_accuracy,
            strongest_attack: strongest.map(|s| s.0.clone()),
            robustness,
            standalone_accuracy,
        }
    }

    /// Every real rounded to six significant digits, as written to disk.
    pub fn rounded(&self) -> Self {
        Self {
            benign_accuracy: round_sig(self.benign_accuracy),
            per_attack_accuracy: self
                .per_attack_accuracy
                .iter()
                .map(|(k, v)| (k.clone(), round_sig(*v)))
                .collect(),
            worst_accuracy: self.worst_accuracy.map(round_sig),
            strongest_attack: self.strongest_attack.clone(),
            robustness: self.robustness.map(round_sig),
            standalone_accuracy: round_sig(self.standalone_accuracy),
        }
    }
}

pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub attack: AttackKind,
    pub malicious: usize,
    pub records: Vec<RoundRecord>,
    /// Final accuracy of each benign party.
    pub final_per_party: Vec<f64>,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f64 {
        let n = self.final_per_party.len().max(1) as f64;
        self.final_per_party.iter().sum::<f64>() / n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: RobustnessReport,
    /// The benign run first, then the sweep in config order.
    pub runs: Vec<RunResult>,
    pub standalone_per_party: Vec<f64>,
}

fn architecture(cfg: &ExperimentConfig, data: &FederatedData, party: usize) -> Result<Architecture> {
    let f = data.feature_dim();
    let arch = if party < cfg.model.linear_parties {
        Architecture::linear(f, data.classes)
    } else {
        Architecture::new(f, cfg.model.hidden_sizes.clone(), data.classes, cfg.model.activation)
    };
    Ok(arch?)
}

/// Benign parties first, then `malicious` attackers holding copies of the
/// benign shards in rotation.
pub fn build_parties(cfg: &ExperimentConfig, data: &FederatedData, malicious: usize) -> Result<Vec<Party>> {
    let seed = cfg.master_seed;
    let benign = data.shards.len();
    (0..benign + malicious)
        .map(|i| {
            let arch = architecture(cfg, data, i)?;
            // Parameter averaging starts every party from one global model.
            let init_seed = match cfg.protocol.protocol {
                ProtocolKind::Fedavg => derive_seed(seed, &[INIT_STREAM]),
                ProtocolKind::Cronus => derive_seed(seed, &[INIT_STREAM, i as u64]),
            };
            Ok(Party {
                index: i,
                params: init_params(&arch, init_seed)?,
                arch,
                local_data: data.shards[i % benign].clone(),
                rng_seed: derive_seed(seed, &[PARTY_STREAM, i as u64]),
                is_malicious: i >= benign,
            })
        })
        .collect()
}

/// One protocol run with `attack`; `AttackKind::None` is the benign run.
pub fn run_single(cfg: &ExperimentConfig, data: &FederatedData, attack: AttackKind) -> Result<RunResult> {
    let benign = data.shards.len();
    let malicious = match attack {
        AttackKind::None => 0,
        // OFOM needs two senders; the mean already breaks at one, so the
        // extra attacker changes nothing about the rule's tolerance.
        AttackKind::Ofom if cfg.protocol.aggregator == AggregatorKind::Mean => 2,
        _ => breaking_point_malicious(cfg.protocol.aggregator, benign),
    };
    let context = || format!("{} run with {malicious} malicious", attack.name());
    if attack != AttackKind::None && malicious == 0 {
        return Err(config_err(format!(
            "{} tolerates no malicious parties with {benign} benign",
            cfg.protocol.aggregator
        )));
    }
    let total = benign + malicious;
    let target_points = (attack == AttackKind::GradAscent).then(|| {
        let shard = &data.shards[0];
        let rows: Vec<usize> = (0..cfg.protocol.grad_targets.min(shard.len())).collect();
        Dataset::new(shard.features.select_rows(&rows), rows.iter().map(|&r| shard.labels[r]).collect())
            .expect("subset of a valid dataset")
    });
    let threat = ThreatSpec {
        total_parties: total,
        malicious_count: malicious,
        attack,
        paf_magnitude: cfg.protocol.paf_magnitude,
        grad_gamma: cfg.protocol.grad_gamma,
        target_points,
    };
    let epsilon = cfg.protocol.epsilon_assumed.unwrap_or(malicious as f64 / total as f64);
    let pcfg = cfg.protocol.to_protocol(epsilon, threat);
    let mut parties = build_parties(cfg, data, malicious)?;
    let records = match pcfg.protocol {
        ProtocolKind::Fedavg => run_fedavg(&mut parties, &data.test, &pcfg),
        ProtocolKind::Cronus => run_cronus(
            &mut parties,
            &data.public,
            &data.test,
            &pcfg,
            derive_seed(cfg.master_seed, &[SERVER_STREAM]),
        ),
    }
    .map_err(|source| ExperimentError::Run {
        context: context(),
        source,
    })?;
    let final_per_party = records
        .last()
        .map(|r| r.per_party_test_accuracy.clone())
        .unwrap_or_default();
    Ok(RunResult {
        attack,
        malicious,
        records,
        final_per_party,
    })
}

/// Per-party stand-alone accuracy with the protocol's epoch budget.
pub fn run_standalone_baseline(cfg: &ExperimentConfig, data: &FederatedData) -> Result<Vec<f64>> {
    let parties = build_parties(cfg, data, 0)?;
    let pcfg = cfg.protocol.to_protocol(0.0, ThreatSpec::benign());
    run_standalone(&parties, &data.test, &pcfg, cfg.protocol.standalone_epochs()).map_err(|source| {
        ExperimentError::Run {
            context: "stand-alone baseline".into(),
            source,
        }
    })
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err(format!("thread pool: {e}")))
}

/// Benign run, stand-alone baseline and the attack sweep on prepared data.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &FederatedData) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if data.shards.len() != cfg.benign_parties() {
        return Err(config_err(format!(
            "data has {} shards, config expects {} parties",
            data.shards.len(),
            cfg.benign_parties()
        )));
    }
    thread_pool(cfg.workers)?.install(|| {
        let standalone = run_standalone_baseline(cfg, data)?;
        let attacks: Vec<AttackKind> = std::iter::once(AttackKind::None)
            .chain(cfg.attack_sweep.iter().copied())
            .collect();
        let runs: Vec<RunResult> = attacks
            .par_iter()
            .map(|&a| run_single(cfg, data, a))
            .collect::<Result<_>>()?;
        let per_attack: Vec<(String, f64)> = runs[1..]
            .iter()
            .map(|r| (r.attack.name().to_string(), r.final_accuracy()))
            .collect();
        let standalone_mean = standalone.iter().sum::<f64>() / standalone.len().max(1) as f64;
        Ok(ExperimentOutcome {
            report: RobustnessReport::new(runs[0].final_accuracy(), &per_attack, standalone_mean),
            runs,
            standalone_per_party: standalone,
        })
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_experiment_on(cfg, &data)
}

// ---------------------------------------------------------------------------
// Output

pub fn rounds_csv(runs: &[RunResult]) -> String {
    let mut out = String::from("round,attack,party,accuracy\n");
    for run in runs {
        for rec in &run.records {
            for (party, acc) in rec.per_party_test_accuracy.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", rec.round, run.attack.name(), party, round_sig(*acc)));
            }
        }
    }
    out
}

pub fn report_json(report: &RobustnessReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&report.rounded())?;
    s.push('\n');
    Ok(s)
}

/// Writes `rounds.csv` and `report.json` into `dir`.
pub fn emit_results(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rounds = dir.join("rounds.csv");
    fs::write(&rounds, rounds_csv(&outcome.runs)).map_err(io_err(&rounds))?;
    let report = dir.join("report.json");
    fs::write(&report, report_json(&outcome.report)?).map_err(io_err(&report))?;
    Ok(())
}
