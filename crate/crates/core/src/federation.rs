//! Round-based protocol orchestration.
//!
//! Two protocols share one adversary boundary: parameter averaging, where the
//! server's aggregate overwrites every local model, and prediction sharing,
//! where parties exchange soft labels on a public set and fine-tune on the
//! robust aggregate while keeping their own (possibly heterogeneous) models.
//!
//! Party training inside a round runs on the ambient rayon pool. Every party
//! draws from its own stream seeded by `(party seed, round)`, so the output is
//! identical for any number of worker threads.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{
    agg_cronus, AggregationError, AggregationInput, AggregatorKind, CronusConfig, DEFAULT_MWU_ITERS,
};
use crate::attacks::{
    attack_label_flip, craft_for_protocol, craft_predictions, AttackContext, AttackError, AttackKind,
    ThreatSpec,
};
use crate::model::{
    accuracy, mean_loss, predict_matrix, sgd_epochs, Architecture, Dataset, ModelError, ModelParams,
    SgdConfig, SoftDataset,
};
use crate::numerics::{norm, Matrix, RealVector};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("party {party} has a different architecture from party 0")]
    HeterogeneousArchitectures { party: usize },
    #[error("round {round}: aggregation failed: {source}")]
    Aggregation {
        round: usize,
        #[source]
        source: AggregationError,
    },
    #[error("round {round}: attack crafting failed: {source}")]
    Attack {
        round: usize,
        #[source]
        source: AttackError,
    },
    #[error("party {party}: {source}")]
    Model {
        party: usize,
        #[source]
        source: ModelError,
    },
    #[error("party {party} sent a {found_rows}x{found_cols} prediction matrix, expected {rows}x{cols}")]
    PredictionShape {
        party: usize,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
}

pub type Result<T> = std::result::Result<T, FederationError>;

#[derive(Debug, Clone)]
pub struct Party {
    pub index: usize,
    pub arch: Architecture,
    pub params: ModelParams,
    pub local_data: Dataset,
    pub rng_seed: u64,
    pub is_malicious: bool,
}

impl Party {
    fn round_seed(&self, round: usize) -> u64 {
        derive_seed(self.rng_seed, &[round as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    Fedavg,
    Cronus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub protocol: ProtocolKind,
    pub aggregator: AggregatorKind,
    /// Aggregation rounds, after the stand-alone phase for prediction sharing.
    pub rounds: usize,
    /// Stand-alone epochs before the first prediction exchange.
    pub init_epochs: usize,
    /// Local epochs per round.
    pub local_epochs: usize,
    pub lr_private: f64,
    pub lr_public: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub public_subset_per_round: Option<usize>,
    /// Malicious fraction the robust aggregators are told to expect.
    pub epsilon_assumed: f64,
    pub mwu_iters: usize,
    pub cronus: CronusConfig,
    pub threat: ThreatSpec,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolKind::Fedavg,
            aggregator: AggregatorKind::Mean,
            rounds: 10,
            init_epochs: 10,
            local_epochs: 1,
            lr_private: 0.1,
            lr_public: 0.1,
            batch_size: 16,
            temperature: 1.0,
            public_subset_per_round: None,
            epsilon_assumed: 0.0,
            mwu_iters: DEFAULT_MWU_ITERS,
            cronus: CronusConfig::default(),
            threat: ThreatSpec::benign(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.protocol, self.aggregator) {
            (ProtocolKind::Cronus, AggregatorKind::Cronus) => {}
            (ProtocolKind::Cronus, other) => {
                return Err(FederationError::Config(format!(
                    "prediction sharing requires the cronus aggregator, got {other}"
                )))
            }
            (ProtocolKind::Fedavg, AggregatorKind::Cronus) => {
                return Err(FederationError::Config(
                    "the cronus aggregator only applies to prediction sharing".into(),
                ))
            }
            _ => {}
        }
        if !(0.0..0.5).contains(&self.epsilon_assumed) {
            return Err(FederationError::Config(format!(
                "epsilon_assumed {} outside [0, 0.5)",
                self.epsilon_assumed
            )));
        }
        if self.batch_size == 0 {
            return Err(FederationError::Config("batch_size must be positive".into()));
        }
        if self.public_subset_per_round == Some(0) {
            return Err(FederationError::Config("public_subset_per_round must be positive".into()));
        }
        Ok(())
    }

    fn sgd(&self, epochs: usize) -> SgdConfig {
        SgdConfig {
            lr_private: self.lr_private,
            lr_public: self.lr_public,
            batch_size: self.batch_size,
            epochs,
            temperature: self.temperature,
        }
    }
}

/// Per-sample filter telemetry summed over one prediction aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterSummary {
    pub samples: usize,
    pub flagged: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Test accuracy of every benign party, in party order.
    pub per_party_test_accuracy: Vec<f64>,
    /// Hex FNV-1a over the aggregate's bit patterns.
    pub aggregate_checksum: String,
    pub aggregate_norm: f64,
    pub attack_name: String,
    pub malicious: usize,
    pub filtered: Option<FilterSummary>,
    /// Global-model loss on the gradient-ascent targets, when there are any.
    pub target_loss: Option<f64>,
}

impl RoundRecord {
    pub fn mean_accuracy(&self) -> f64 {
        let n = self.per_party_test_accuracy.len().max(1) as f64;
        self.per_party_test_accuracy.iter().sum::<f64>() / n
    }
}

pub fn checksum(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Adversary hooks backed by updates the malicious parties already computed.
struct Precomputed<'a> {
    flipped: Vec<RealVector>,
    global: Option<&'a ModelParams>,
}

impl AttackContext for Precomputed<'_> {
    fn label_flip_updates(&self, malicious: usize) -> std::result::Result<Vec<RealVector>, AttackError> {
        if self.flipped.len() != malicious {
            return Err(AttackError::Precondition {
                attack: "label_flip",
                needed: format!("{malicious} trained malicious parties, have {}", self.flipped.len()),
            });
        }
        Ok(self.flipped.clone())
    }

    fn global_params(&self) -> Option<&ModelParams> {
        self.global
    }
}

/// Appends the malicious block after the benign updates, giving the full
/// party-ordered list the server consumes.
pub fn adversary_boundary(
    benign: Vec<RealVector>,
    threat: &ThreatSpec,
    ctx: &dyn AttackContext,
) -> std::result::Result<Vec<RealVector>, AttackError> {
    let crafted = craft_for_protocol(threat, &benign, ctx)?;
    let mut all = benign;
    all.extend(crafted.updates);
    Ok(all)
}

fn check_parties(parties: &[Party], cfg: &ProtocolConfig) -> Result<()> {
    if parties.is_empty() {
        return Err(FederationError::Config("no parties".into()));
    }
    let m = parties.iter().filter(|p| p.is_malicious).count();
    let benign = parties.len() - m;
    if benign == 0 {
        return Err(FederationError::Config("no benign parties".into()));
    }
    if parties[..benign].iter().any(|p| p.is_malicious) {
        return Err(FederationError::Config("malicious parties must occupy the highest indices".into()));
    }
    let t = &cfg.threat;
    if t.is_active() && t.malicious_count != m {
        return Err(FederationError::Config(format!(
            "threat expects {} malicious parties, party list has {m}",
            t.malicious_count
        )));
    }
    if !t.is_active() && m > 0 {
        return Err(FederationError::Config("malicious parties without an attack".into()));
    }
    for (i, p) in parties.iter().enumerate() {
        if p.index != i {
            return Err(FederationError::Config(format!("party at position {i} has index {}", p.index)));
        }
    }
    Ok(())
}

fn flipped_data(parties: &[Party], attack: AttackKind) -> Result<Vec<Option<Dataset>>> {
    parties
        .iter()
        .map(|p| {
            if p.is_malicious && attack == AttackKind::LabelFlip {
                attack_label_flip(&p.local_data, p.arch.num_classes)
                    .map(Some)
                    .map_err(|e| FederationError::Config(format!("party {}: {e}", p.index)))
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn model_err(party: usize) -> impl Fn(ModelError) -> FederationError {
    move |source| FederationError::Model { party, source }
}

/// Parameter averaging: every round the benign parties train from the global
/// model, the adversary appends its updates, the server aggregates, and the
/// aggregate overwrites every local model.
pub fn run_fedavg(parties: &mut [Party], test: &Dataset, cfg: &ProtocolConfig) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    check_parties(parties, cfg)?;
    if cfg.protocol != ProtocolKind::Fedavg {
        return Err(FederationError::Config("run_fedavg needs protocol = fedavg".into()));
    }
    let arch = parties[0].arch.clone();
    if let Some(p) = parties.iter().find(|p| p.arch != arch) {
        return Err(FederationError::HeterogeneousArchitectures { party: p.index });
    }
    let flipped = flipped_data(parties, cfg.threat.attack)?;
    let sizes: Vec<usize> = parties.iter().map(|p| p.local_data.len()).collect();
    let benign_count = parties.iter().filter(|p| !p.is_malicious).count();
    let sgd = cfg.sgd(cfg.local_epochs);

    let mut global = parties[0].params.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        // Benign parties and label-flipping parties both train honestly on
        // their own data; only the data differs.
        let trained: Vec<Option<RealVector>> = parties
            .par_iter()
            .zip(&flipped)
            .map(|(p, flip)| {
                let data = match (p.is_malicious, flip) {
                    (false, _) => &p.local_data,
                    (true, Some(f)) => f,
                    (true, None) => return Ok(None),
                };
                sgd_epochs(&global, data, None, &sgd, p.round_seed(round))
                    .map(|m| Some(m.flatten()))
                    .map_err(model_err(p.index))
            })
            .collect::<Result<_>>()?;
        let mut trained = trained.into_iter();
        let benign: Vec<RealVector> = trained.by_ref().take(benign_count).flatten().collect();
        let ctx = Precomputed {
            flipped: trained.flatten().collect(),
            global: Some(&global),
        };
        let updates = adversary_boundary(benign, &cfg.threat, &ctx)
            .map_err(|source| FederationError::Attack { round, source })?;

        let input = AggregationInput::new(&updates, Some(&sizes), cfg.epsilon_assumed)
            .map_err(|source| FederationError::Aggregation { round, source })?;
        let aggregate = cfg
            .aggregator
            .aggregate(&input, cfg.mwu_iters)
            .map_err(|source| FederationError::Aggregation { round, source })?;
        global = ModelParams::unflatten(&arch, &aggregate).map_err(model_err(0))?;
        for p in parties.iter_mut() {
            p.params = global.clone();
        }

        let acc = accuracy(&global, test).map_err(model_err(0))?;
        let target_loss = match &cfg.threat.target_points {
            Some(t) if !t.is_empty() => Some(mean_loss(&global, t).map_err(model_err(0))?),
            _ => None,
        };
        records.push(RoundRecord {
            round,
            per_party_test_accuracy: vec![acc; benign_count],
            aggregate_checksum: checksum(&aggregate),
            aggregate_norm: norm(&aggregate),
            attack_name: cfg.threat.attack.name().to_string(),
            malicious: parties.len() - benign_count,
            filtered: None,
            target_loss,
        });
    }
    Ok(records)
}

/// Public rows used in a given exchange.
fn public_rows(n_public: usize, cfg: &ProtocolConfig, seed: u64, exchange: usize) -> Vec<usize> {
    match cfg.public_subset_per_round {
        Some(k) if k < n_public => {
            let mut rng = rng_from_seed(derive_seed(seed, &[0x5EED, exchange as u64]));
            let mut rows = sample(&mut rng, n_public, k).into_vec();
            rows.sort_unstable();
            rows
        }
        _ => (0..n_public).collect(),
    }
}

/// Prediction sharing: after `init_epochs` of stand-alone training, each round
/// the server robustly aggregates the parties' soft labels on the public set
/// and every benign party fine-tunes on its private data plus the aggregate.
///
/// `seed` drives the public-subset draws and the randomized filter.
pub fn run_cronus(
    parties: &mut [Party],
    public_features: &Matrix,
    test: &Dataset,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    check_parties(parties, cfg)?;
    if cfg.protocol != ProtocolKind::Cronus {
        return Err(FederationError::Config("run_cronus needs protocol = cronus".into()));
    }
    let n_public = public_features.rows();
    if n_public == 0 {
        return Err(FederationError::Config("empty public set".into()));
    }
    if let Some(k) = cfg.public_subset_per_round {
        if k > n_public {
            return Err(FederationError::Config(format!(
                "public_subset_per_round {k} exceeds public set size {n_public}"
            )));
        }
    }
    let flipped = flipped_data(parties, cfg.threat.attack)?;
    let benign_count = parties.iter().filter(|p| !p.is_malicious).count();
    let classes = parties[0].arch.num_classes;
    if let Some(p) = parties.iter().find(|p| p.arch.num_classes != classes) {
        return Err(FederationError::HeterogeneousArchitectures { party: p.index });
    }

    // Phase 1: stand-alone training. Round 0 of each party's stream.
    let init = cfg.sgd(cfg.init_epochs);
    parties
        .par_iter_mut()
        .zip(&flipped)
        .try_for_each(|(p, flip)| -> Result<()> {
            let data = match (p.is_malicious, flip) {
                (false, _) => &p.local_data,
                (true, Some(f)) => f,
                (true, None) => return Ok(()),
            };
            if cfg.init_epochs > 0 {
                p.params = sgd_epochs(&p.params, data, None, &init, p.round_seed(0)).map_err(model_err(p.index))?;
            }
            Ok(())
        })?;

    let mut rows = public_rows(n_public, cfg, seed, 0);
    let mut aggregate = exchange(parties, &flipped, public_features, &rows, cfg, seed, 0)?;

    let sgd = cfg.sgd(cfg.local_epochs);
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let soft = SoftDataset::new(public_features.select_rows(&rows), aggregate.0.clone())
            .map_err(model_err(0))?;
        parties
            .par_iter_mut()
            .zip(&flipped)
            .try_for_each(|(p, flip)| -> Result<()> {
                let data = match (p.is_malicious, flip) {
                    (false, _) => &p.local_data,
                    (true, Some(f)) => f,
                    (true, None) => return Ok(()),
                };
                p.params = sgd_epochs(&p.params, data, Some(&soft), &sgd, p.round_seed(round))
                    .map_err(model_err(p.index))?;
                Ok(())
            })?;

        let accs: Vec<f64> = parties[..benign_count]
            .par_iter()
            .map(|p| accuracy(&p.params, test).map_err(model_err(p.index)))
            .collect::<Result<_>>()?;

        let used_aggregate = aggregate;
        rows = public_rows(n_public, cfg, seed, round);
        aggregate = exchange(parties, &flipped, public_features, &rows, cfg, seed, round)?;
        records.push(RoundRecord {
            round,
            per_party_test_accuracy: accs,
            aggregate_checksum: checksum(used_aggregate.0.as_slice()),
            aggregate_norm: norm(used_aggregate.0.as_slice()),
            attack_name: cfg.threat.attack.name().to_string(),
            malicious: parties.len() - benign_count,
            filtered: Some(used_aggregate.1),
            target_loss: None,
        });
    }
    Ok(records)
}

/// One prediction exchange: benign (and label-flipping) parties predict on the
/// selected public rows, the adversary crafts its matrices, the server
/// aggregates.
fn exchange(
    parties: &[Party],
    flipped: &[Option<Dataset>],
    public_features: &Matrix,
    rows: &[usize],
    cfg: &ProtocolConfig,
    seed: u64,
    round: usize,
) -> Result<(Matrix, FilterSummary)> {
    let x = public_features.select_rows(rows);
    let predictions: Vec<Option<Matrix>> = parties
        .par_iter()
        .zip(flipped)
        .map(|(p, flip)| {
            if p.is_malicious && flip.is_none() {
                return Ok(None);
            }
            predict_matrix(&p.params, &x).map(Some).map_err(model_err(p.index))
        })
        .collect::<Result<_>>()?;
    let benign_count = parties.iter().filter(|p| !p.is_malicious).count();
    let mut predictions = predictions.into_iter();
    let benign: Vec<Matrix> = predictions.by_ref().take(benign_count).flatten().collect();
    let flipped_preds: Vec<RealVector> = predictions.flatten().map(|m| m.into_vec()).collect();

    let ctx = Precomputed {
        flipped: flipped_preds,
        global: None,
    };
    let crafted = craft_predictions(&cfg.threat, &benign, &ctx)
        .map_err(|source| FederationError::Attack { round, source })?;
    let mut all = benign;
    all.extend(crafted);
    let (r, c) = (all[0].rows(), all[0].cols());
    if let Some((party, m)) = all.iter().enumerate().find(|(_, m)| m.rows() != r || m.cols() != c) {
        return Err(FederationError::PredictionShape {
            party,
            rows: r,
            cols: c,
            found_rows: m.rows(),
            found_cols: m.cols(),
        });
    }
    let out = agg_cronus(&all, cfg.epsilon_assumed, &cfg.cronus, derive_seed(seed, &[0xC2, round as u64]))
        .map_err(|source| FederationError::Aggregation { round, source })?;
    let summary = FilterSummary {
        samples: out.samples.len(),
        flagged: out.flagged(),
        removed: out.samples.iter().map(|s| s.removed).sum(),
    };
    Ok((out.aggregate, summary))
}

/// Each party trains alone for `epochs` epochs; returns benign test accuracy.
pub fn run_standalone(parties: &[Party], test: &Dataset, cfg: &ProtocolConfig, epochs: usize) -> Result<Vec<f64>> {
    let sgd = cfg.sgd(epochs);
    parties
        .par_iter()
        .filter(|p| !p.is_malicious)
        .map(|p| {
            let trained = sgd_epochs(&p.params, &p.local_data, None, &sgd, p.round_seed(0)).map_err(model_err(p.index))?;
            accuracy(&trained, test).map_err(model_err(p.index))
        })
        .collect()
}
