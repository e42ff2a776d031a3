//! Omniscient-adversary poisoning attacks.
//!
//! Each crafting function sees only what the malicious parties legitimately
//! observe: the benign parties' emitted updates, never their datasets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{loss_and_grad, Batch, Dataset, ModelError, ModelParams};
use crate::numerics::{self, std_normal_quantile, Matrix, NumericsError, RealVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("no benign updates to craft from")]
    NoBenignUpdates,
    #[error("{attack} needs {needed}")]
    Precondition { attack: &'static str, needed: String },
    #[error("attack infeasible for this n, m (n = {n}, m = {m})")]
    Infeasible { n: usize, m: usize },
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("{0} is not available in this protocol")]
    Unsupported(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    LabelFlip,
    Paf,
    Lie,
    Ofom,
    GradAscent,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::None,
        AttackKind::LabelFlip,
        AttackKind::Paf,
        AttackKind::Lie,
        AttackKind::Ofom,
        AttackKind::GradAscent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::Paf => "paf",
            AttackKind::Lie => "lie",
            AttackKind::Ofom => "ofom",
            AttackKind::GradAscent => "grad_ascent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_PAF_MAGNITUDE: f64 = 1e3;

/// Who is malicious and what they send.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreatSpec {
    pub total_parties: usize,
    pub malicious_count: usize,
    pub attack: AttackKind,
    /// Every coordinate of the far-away offset used by PAF and OFOM.
    pub paf_magnitude: f64,
    pub grad_gamma: f64,
    /// Records whose loss the gradient-ascent attacker wants to inflate.
    pub target_points: Option<Dataset>,
}

impl ThreatSpec {
    pub fn benign() -> Self {
        Self {
            total_parties: 0,
            malicious_count: 0,
            attack: AttackKind::None,
            paf_magnitude: DEFAULT_PAF_MAGNITUDE,
            grad_gamma: 1.0,
            target_points: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.attack != AttackKind::None && self.malicious_count > 0
    }
}

/// What the malicious block sends, in party-index order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaliciousUpdates {
    pub updates: Vec<RealVector>,
}

impl MaliciousUpdates {
    fn repeated(v: RealVector, m: usize) -> Self {
        Self {
            updates: vec![v; m],
        }
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }
}

/// Rotates every label `y → (y + 1) mod C`. All malicious parties use this
/// same map.
pub fn attack_label_flip(local: &Dataset, num_classes: usize) -> Result<Dataset> {
    if let Some(row) = local.labels.iter().position(|&l| l >= num_classes) {
        return Err(AttackError::LabelOutOfRange {
            row,
            label: local.labels[row],
            classes: num_classes,
        });
    }
    Ok(Dataset {
        features: local.features.clone(),
        labels: local.labels.iter().map(|&y| (y + 1) % num_classes).collect(),
    })
}

fn benign_sum(benign: &[RealVector]) -> Result<RealVector> {
    let n = benign.len() as f64;
    Ok(numerics::mean_vec(benign, None)?
        .into_iter()
        .map(|x| x * n)
        .collect())
}

/// PAF: benign mean plus a constant offset, sent by every malicious party.
pub fn attack_paf(benign: &[RealVector], m: usize, magnitude: f64) -> Result<MaliciousUpdates> {
    if benign.is_empty() {
        return Err(AttackError::NoBenignUpdates);
    }
    let mean = numerics::mean_vec(benign, None)?;
    let crafted = mean.into_iter().map(|x| x + magnitude).collect();
    Ok(MaliciousUpdates::repeated(crafted, m))
}

/// The LIE shift `z`: the standard normal quantile at `(n − s)/n` where
/// `s = ⌊n/2 + 1⌋ − m` parties are still needed for a majority.
pub fn lie_z(n: usize, m: usize) -> Result<f64> {
    let s = (n / 2 + 1) as i64 - m as i64;
    let p = (n as i64 - s) as f64 / n as f64;
    if !(p > 0.0 && p < 1.0) {
        return Err(AttackError::Infeasible { n, m });
    }
    Ok(std_normal_quantile(p)?)
}

/// Per-coordinate mean and population standard deviation.
pub fn coordinate_stats(benign: &[RealVector]) -> Result<(RealVector, RealVector)> {
    let mean = numerics::mean_vec(benign, None)?;
    let n = benign.len() as f64;
    let mut var = vec![0.0; mean.len()];
    for u in benign {
        for ((v, x), mu) in var.iter_mut().zip(u).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    Ok((mean, var.into_iter().map(|v| (v / n).sqrt()).collect()))
}

/// LIE: `μ̄ⱼ + z·σ̄ⱼ` on every coordinate, sent by every malicious party.
pub fn attack_lie(benign: &[RealVector], n: usize, m: usize) -> Result<MaliciousUpdates> {
    if benign.len() < 2 {
        return Err(AttackError::Precondition {
            attack: "lie",
            needed: "at least 2 benign updates".into(),
        });
    }
    let z = lie_z(n, m)?;
    let (mean, std) = coordinate_stats(benign)?;
    let crafted = mean.iter().zip(&std).map(|(mu, s)| mu + z * s).collect();
    Ok(MaliciousUpdates::repeated(crafted, m))
}

/// OFOM: one party sends `mean + offset`, the rest send the mean of the benign
/// updates together with that first malicious update.
pub fn attack_ofom(benign: &[RealVector], m: usize, magnitude: f64) -> Result<MaliciousUpdates> {
    if m < 2 {
        return Err(AttackError::Precondition {
            attack: "ofom",
            needed: "at least 2 malicious parties".into(),
        });
    }
    if benign.is_empty() {
        return Err(AttackError::NoBenignUpdates);
    }
    let nb = benign.len() as f64;
    let sum = benign_sum(benign)?;
    let first: RealVector = sum.iter().map(|s| s / nb + magnitude).collect();
    let second: RealVector = sum.iter().zip(&first).map(|(s, f)| (s + f) / (nb + 1.0)).collect();
    let mut updates = Vec::with_capacity(m);
    updates.push(first);
    updates.extend(std::iter::repeat_n(second, m - 1));
    Ok(MaliciousUpdates { updates })
}

/// Gradient ascent on the targets' loss: `global + γ·∂L/∂global`.
pub fn attack_grad_ascent(theta_a: &ModelParams, targets: &Dataset, gamma: f64) -> Result<ModelParams> {
    if targets.is_empty() {
        return Err(AttackError::Precondition {
            attack: "grad_ascent",
            needed: "a non-empty target set".into(),
        });
    }
    if !(gamma >= 0.0) {
        return Err(AttackError::Precondition {
            attack: "grad_ascent",
            needed: format!("gamma ≥ 0, got {gamma}"),
        });
    }
    let (_, grad) = loss_and_grad(theta_a, Batch::Hard(targets))?;
    let mut out = theta_a.clone();
    out.add_scaled(&grad, gamma);
    Ok(out)
}

/// Protocol-side hooks the adversary needs beyond the benign updates.
pub trait AttackContext {
    /// The updates the malicious parties emit after ordinary local training on
    /// their own label-flipped data.
    fn label_flip_updates(&self, malicious: usize) -> Result<Vec<RealVector>>;

    /// The current global model, for attacks that perturb it directly.
    fn global_params(&self) -> Option<&ModelParams>;
}

/// Context for standalone crafting where no training is possible.
pub struct UpdatesOnly;

impl AttackContext for UpdatesOnly {
    fn label_flip_updates(&self, _: usize) -> Result<Vec<RealVector>> {
        Err(AttackError::Unsupported("label_flip without local training"))
    }

    fn global_params(&self) -> Option<&ModelParams> {
        None
    }
}

/// Crafts the malicious block's updates after observing the benign ones.
pub fn craft_for_protocol(
    threat: &ThreatSpec,
    benign: &[RealVector],
    ctx: &dyn AttackContext,
) -> Result<MaliciousUpdates> {
    let m = threat.malicious_count;
    if !threat.is_active() {
        return Ok(MaliciousUpdates::default());
    }
    match threat.attack {
        AttackKind::None => Ok(MaliciousUpdates::default()),
        AttackKind::LabelFlip => Ok(MaliciousUpdates {
            updates: ctx.label_flip_updates(m)?,
        }),
        AttackKind::Paf => attack_paf(benign, m, threat.paf_magnitude),
        AttackKind::Lie => attack_lie(benign, threat.total_parties, m),
        AttackKind::Ofom => attack_ofom(benign, m, threat.paf_magnitude),
        AttackKind::GradAscent => {
            let global = ctx
                .global_params()
                .ok_or(AttackError::Unsupported("grad_ascent without a global model"))?;
            let targets = threat.target_points.as_ref().ok_or(AttackError::Precondition {
                attack: "grad_ascent",
                needed: "target points".into(),
            })?;
            let crafted = attack_grad_ascent(global, targets, threat.grad_gamma)?.flatten();
            Ok(MaliciousUpdates::repeated(crafted, m))
        }
    }
}

/// Crafting on prediction matrices: flattens each benign matrix, crafts on the
/// flat vectors (per-coordinate statistics across parties), and reshapes.
pub fn craft_predictions(
    threat: &ThreatSpec,
    benign: &[Matrix],
    ctx: &dyn AttackContext,
) -> Result<Vec<Matrix>> {
    if threat.attack == AttackKind::GradAscent && threat.is_active() {
        return Err(AttackError::Unsupported("grad_ascent on prediction updates"));
    }
    let (rows, cols) = benign
        .first()
        .map(|b| (b.rows(), b.cols()))
        .ok_or(AttackError::NoBenignUpdates)?;
    let flat: Vec<RealVector> = benign.iter().map(|b| b.as_slice().to_vec()).collect();
    let crafted = craft_for_protocol(threat, &flat, ctx)?;
    crafted
        .updates
        .into_iter()
        .map(|v| {
            let found = v.len();
            Matrix::from_vec(rows, cols, v).ok_or(AttackError::Numerics(NumericsError::DimensionMismatch {
                index: 0,
                expected: rows * cols,
                found,
            }))
        })
        .collect()
}
