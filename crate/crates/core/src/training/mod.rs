//! Training over seen compositions: classification loss plus the weighted
//! structure-consistency term, optimised with decoupled-decay adaptive
//! moments.

pub mod loss;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{FrozenEncoder, PromptState};
use crate::error::{Result, SpaError};
use crate::structure::NeighborhoodIndex;
use crate::vocab_space::{CompositionSpace, Dataset, PrimitiveKind, Sample};

pub use loss::{
    ce_loss, initial_neighborhood, objective, scl_loss, total_loss, Gradients, LossBreakdown,
};
pub use optim::{optimizer_step, OptimizerState};

const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6500;

/// Any total loss above this is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau_scl: f64,
    pub tau_cls: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 32,
            m: 3,
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
            weight_decay: 1e-6,
            lambda: 1.0,
            tau_scl: 0.10,
            tau_cls: 0.1,
            k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(SpaError::InvalidConfig("d must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SpaError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(SpaError::InvalidConfig(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(SpaError::NegativeLambda(self.lambda));
        }
        for tau in [self.tau_scl, self.tau_cls] {
            if !(tau > 0.0) {
                return Err(SpaError::NonPositiveTemperature(tau));
            }
        }
        if self.k == 0 {
            return Err(SpaError::KOutOfRange {
                k: 0,
                max: usize::MAX,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub scl: f64,
    pub total: f64,
    pub lambda: f64,
    pub neighborhood_hash: String,
    /// Optimizer steps taken so far; a logical clock, so reports stay
    /// reproducible.
    pub elapsed_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("report has the epoch-0 row")
    }
}

/// Frozen neighbourhoods for both primitive kinds.
#[derive(Debug, Clone)]
pub struct Neighborhoods {
    pub attr: NeighborhoodIndex,
    pub obj: NeighborhoodIndex,
}

impl Neighborhoods {
    /// `k` is clamped per kind to the number of other seen primitives.
    pub fn build(enc: &FrozenEncoder, state: &PromptState, k: usize) -> Result<Self> {
        let clamp = |n: usize| k.min(n.saturating_sub(1)).max(1);
        Ok(Self {
            attr: initial_neighborhood(
                enc,
                state,
                PrimitiveKind::Attribute,
                clamp(state.num_seen(PrimitiveKind::Attribute)),
            )?,
            obj: initial_neighborhood(
                enc,
                state,
                PrimitiveKind::Object,
                clamp(state.num_seen(PrimitiveKind::Object)),
            )?,
        })
    }

    pub fn hash(&self) -> String {
        format!("{}:{}", &self.attr.hash()[..16], &self.obj.hash()[..16])
    }
}

fn full_pass(
    train: &[Sample],
    space: &CompositionSpace,
    enc: &FrozenEncoder,
    state: &PromptState,
    hoods: &Neighborhoods,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let (ce, _) = if train.is_empty() {
        (0.0, Gradients::zeros_like(state))
    } else {
        ce_loss(train, space, enc, state, config.tau_cls)?
    };
    let (scl, _) = scl_loss(enc, state, &hoods.attr, &hoods.obj, config.tau_scl)?;
    total_loss(ce, scl, config.lambda)
}

/// Runs the training loop, mutating the learnable tokens of `state` in place.
///
/// Neighbourhoods are computed once from the initial snapshot and frozen.
/// Row 0 of the report is measured before any update.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    space: &CompositionSpace,
    enc: &FrozenEncoder,
    state: &mut PromptState,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.d != state.dim() || enc.dim() != state.dim() {
        return Err(SpaError::DimensionMismatch(format!(
            "dataset d={}, encoder d={}, prompt d={}",
            dataset.d,
            enc.dim(),
            state.dim()
        )));
    }
    let hoods = Neighborhoods::build(enc, state, config.k)?;
    let frozen = state.frozen_checksum();
    let mut opt = OptimizerState::new(state, config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);

    let start = full_pass(&dataset.train, space, enc, state, &hoods, config)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        ce: start.ce,
        scl: start.scl,
        total: start.total,
        lambda: config.lambda,
        neighborhood_hash: hoods.hash(),
        elapsed_steps: 0,
    }];

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut ce_sum, mut scl_sum, mut total_sum, mut weight) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| dataset.train[i].clone()).collect();
            let (b, grads) = objective(
                &batch,
                space,
                enc,
                state,
                &hoods.attr,
                &hoods.obj,
                config.tau_scl,
                config.tau_cls,
                config.lambda,
            )?;
            if !b.total.is_finite() || b.total > DIVERGENCE_LIMIT {
                return Err(SpaError::Diverged {
                    epoch,
                    loss: b.total,
                });
            }
            optimizer_step(&mut opt, &grads, state)?;
            if !opt.moments_finite() {
                return Err(SpaError::NonFinite("optimizer moments".into()));
            }
            let w = batch.len() as f64;
            ce_sum += b.ce * w;
            scl_sum += b.scl * w;
            total_sum += b.total * w;
            weight += w;
        }
        if state.frozen_checksum() != frozen {
            return Err(SpaError::FrozenMutated(format!("epoch {epoch}")));
        }
        let w = weight.max(1.0);
        epochs.push(EpochRecord {
            epoch,
            ce: ce_sum / w,
            scl: scl_sum / w,
            total: total_sum / w,
            lambda: config.lambda,
            neighborhood_hash: hoods.hash(),
            elapsed_steps: opt.steps(),
        });
    }
    Ok(TrainReport { epochs })
}

/// SCL of the current state against its frozen initial neighbourhoods.
pub fn structure_drift(
    enc: &FrozenEncoder,
    state: &PromptState,
    k: usize,
    tau: f64,
) -> Result<f64> {
    let hoods = Neighborhoods::build(enc, state, k)?;
    Ok(scl_loss(enc, state, &hoods.attr, &hoods.obj, tau)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_keys() {
        let c = TrainConfig::default();
        assert_eq!((c.k, c.lambda, c.tau_scl, c.epochs), (5, 1.0, 0.10, 20));
        let json = serde_json::to_value(&c).unwrap();
        for key in [
            "seed",
            "d",
            "m",
            "epochs",
            "batch_size",
            "lr",
            "weight_decay",
            "lambda",
            "tau_scl",
            "tau_cls",
            "K",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let parsed: TrainConfig = serde_json::from_str(r#"{"lambda": 10.0, "K": 3}"#).unwrap();
        assert_eq!(parsed.lambda, 10.0);
        assert_eq!(parsed.k, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 1}"#).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(SpaError::NegativeLambda(_))));
        let bad = TrainConfig {
            tau_scl: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
