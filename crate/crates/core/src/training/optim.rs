//! Adaptive-moment optimiser with decoupled weight decay over the token
//! matrices.

use crate::encoder::PromptState;
use crate::error::{Result, SpaError};
use crate::linalg::Matrix;
use crate::training::loss::Gradients;
use crate::vocab_space::PrimitiveKind;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl OptimizerState {
    pub fn new(state: &PromptState, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Gradients::zeros_like(state),
            second: Gradients::zeros_like(state),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments_finite(&self) -> bool {
        self.first.is_finite() && self.second.is_finite()
    }
}

struct Hyper {
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

fn update(theta: &mut Matrix, grad: &Matrix, m: &mut Matrix, v: &mut Matrix, h: &Hyper) {
    let decay = 1.0 - h.lr * h.wd;
    let th = theta.as_mut_slice();
    let ms = m.as_mut_slice();
    let vs = v.as_mut_slice();
    for (i, g) in grad.as_slice().iter().enumerate() {
        ms[i] = h.beta1 * ms[i] + (1.0 - h.beta1) * g;
        vs[i] = h.beta2 * vs[i] + (1.0 - h.beta2) * g * g;
        let m_hat = ms[i] / h.bc1;
        let v_hat = vs[i] / h.bc2;
        th[i] = th[i] * decay - h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// One update of the learnable tokens. Context and snapshots are untouched.
pub fn optimizer_step(
    opt: &mut OptimizerState,
    grads: &Gradients,
    state: &mut PromptState,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(SpaError::NonFinite("gradients".into()));
    }
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        let (r, c) = (state.theta(kind).rows(), state.theta(kind).cols());
        if grads.get(kind).rows() != r || grads.get(kind).cols() != c {
            return Err(SpaError::DimensionMismatch(format!(
                "{} gradient is {}x{}, parameters {r}x{c}",
                kind.as_str(),
                grads.get(kind).rows(),
                grads.get(kind).cols()
            )));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let hyper = Hyper {
        lr: opt.learning_rate,
        wd: opt.weight_decay,
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.epsilon,
        bc1,
        bc2,
    };
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        update(
            state.theta_mut(kind),
            grads.get(kind),
            opt.first.get_mut(kind),
            opt.second.get_mut(kind),
            &hyper,
        );
    }
    if !state.is_finite() {
        return Err(SpaError::NonFinite(
            "parameters after optimizer step".into(),
        ));
    }
    Ok(())
}
