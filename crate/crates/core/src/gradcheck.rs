//! Central finite-difference check of the training gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, zappos_shape, GenConfig};
use crate::encoder::PromptState;
use crate::error::Result;
use crate::pipeline::initial_state;
use crate::training::{ce_loss, objective, scl_loss, Gradients, Neighborhoods};
use crate::vocab_space::{CompositionSpace, PrimitiveKind, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Scale of the random offset applied to θ so the structure term is
    /// away from its minimum.
    pub perturbation: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau_scl: f64,
    pub tau_cls: f64,
    #[serde(rename = "K")]
    pub k: usize,
    /// Negates every analytic gradient; used to confirm the checker fails.
    pub flip_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 16,
            m: 3,
            coordinates: 20,
            step: 1e-4,
            tolerance: 1e-4,
            perturbation: 0.05,
            batch_size: 64,
            lambda: 1.0,
            tau_scl: 0.10,
            tau_cls: 0.05,
            k: 5,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Ce,
    Scl,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub term: LossTerm,
    pub kind: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub passed: bool,
    pub checks: Vec<CoordinateCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

struct Problem<'a> {
    batch: &'a [Sample],
    space: &'a CompositionSpace,
    hoods: &'a Neighborhoods,
    config: &'a GradcheckConfig,
}

impl Problem<'_> {
    fn eval(
        &self,
        enc: &crate::encoder::FrozenEncoder,
        state: &PromptState,
        term: LossTerm,
    ) -> Result<(f64, Gradients)> {
        let c = self.config;
        match term {
            LossTerm::Ce => ce_loss(self.batch, self.space, enc, state, c.tau_cls),
            LossTerm::Scl => scl_loss(enc, state, &self.hoods.attr, &self.hoods.obj, c.tau_scl),
            LossTerm::Total => {
                let (b, g) = objective(
                    self.batch,
                    self.space,
                    enc,
                    state,
                    &self.hoods.attr,
                    &self.hoods.obj,
                    c.tau_scl,
                    c.tau_cls,
                    c.lambda,
                )?;
                Ok((b.total, g))
            }
        }
    }
}

/// Compares analytic and numeric gradients of the three loss terms at
/// `config.coordinates` random coordinates of a perturbed prompt state on a
/// small generated benchmark.
pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let bench = generate(&GenConfig {
        d: config.d,
        train_per_comp: 2,
        test_per_comp: 1,
        seed: config.seed,
        ..zappos_shape()
    })?;
    let (enc, mut state) = initial_state(bench.view(), config.seed, config.m)?;
    let hoods = Neighborhoods::build(&enc, &state, config.k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6772_6164);
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        for v in state.theta_mut(kind).as_mut_slice() {
            *v += config.perturbation * rng.random_range(-1.0..1.0);
        }
    }
    let batch_len = config.batch_size.min(bench.dataset.train.len());
    let problem = Problem {
        batch: &bench.dataset.train[..batch_len],
        space: &bench.space,
        hoods: &hoods,
        config,
    };

    let terms = [LossTerm::Ce, LossTerm::Scl, LossTerm::Total];
    let analytic: Vec<Gradients> = terms
        .iter()
        .map(|t| problem.eval(&enc, &state, *t).map(|r| r.1))
        .collect::<Result<_>>()?;
    let sign = if config.flip_sign { -1.0 } else { 1.0 };

    let mut checks = Vec::new();
    for _ in 0..config.coordinates {
        let kind = if rng.random_bool(0.5) {
            PrimitiveKind::Attribute
        } else {
            PrimitiveKind::Object
        };
        let row = rng.random_range(0..state.num_seen(kind));
        let col = rng.random_range(0..state.dim());
        let original = state.theta(kind).get(row, col);
        let mut at = |v: f64, term| -> Result<f64> {
            state.theta_mut(kind).set(row, col, v);
            let l = problem.eval(&enc, &state, term).map(|r| r.0);
            state.theta_mut(kind).set(row, col, original);
            l
        };
        for (t, grads) in terms.iter().zip(&analytic) {
            let plus = at(original + config.step, *t)?;
            let minus = at(original - config.step, *t)?;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = sign * grads.get(kind).get(row, col);
            checks.push(CoordinateCheck {
                term: *t,
                kind: kind.as_str().to_string(),
                row,
                col,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned();
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        max_rel_error,
        passed: max_rel_error < config.tolerance,
        worst,
        checks,
    })
}
