//! Composition cross-entropy, the structure-consistency KL regulariser and
//! their weighted sum, each with analytic gradients in token space.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_all, encode_composition, FrozenEncoder, PromptState};
use crate::error::{Result, SpaError};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::structure::{kl, softmax, NeighborhoodIndex};
use crate::vocab_space::{CompositionSpace, PrimitiveKind, Sample, Split};

/// Gradients shaped like the learnable token matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub attr: Matrix,
    pub obj: Matrix,
}

impl Gradients {
    pub fn zeros_like(state: &PromptState) -> Self {
        let a = state.theta(PrimitiveKind::Attribute);
        let o = state.theta(PrimitiveKind::Object);
        Self {
            attr: Matrix::zeros(a.rows(), a.cols()),
            obj: Matrix::zeros(o.rows(), o.cols()),
        }
    }

    pub fn get(&self, kind: PrimitiveKind) -> &Matrix {
        match kind {
            PrimitiveKind::Attribute => &self.attr,
            PrimitiveKind::Object => &self.obj,
        }
    }

    pub fn get_mut(&mut self, kind: PrimitiveKind) -> &mut Matrix {
        match kind {
            PrimitiveKind::Attribute => &mut self.attr,
            PrimitiveKind::Object => &mut self.obj,
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        axpy(alpha, other.attr.as_slice(), self.attr.as_mut_slice());
        axpy(alpha, other.obj.as_slice(), self.obj.as_mut_slice());
    }

    pub fn is_finite(&self) -> bool {
        self.attr.is_finite() && self.obj.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub scl: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn total_loss(ce: f64, scl: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(SpaError::NegativeLambda(lambda));
    }
    Ok(LossBreakdown {
        ce,
        scl,
        total: ce + lambda * scl,
        lambda,
    })
}

/// Mean negative log-likelihood of the true composition among all seen
/// compositions, scored by `cos(v, t) / tau_cls`.
pub fn ce_loss(
    batch: &[Sample],
    space: &CompositionSpace,
    enc: &FrozenEncoder,
    state: &PromptState,
    tau_cls: f64,
) -> Result<(f64, Gradients)> {
    if !(tau_cls > 0.0) {
        return Err(SpaError::NonPositiveTemperature(tau_cls));
    }
    let candidates = space.seen_positions();
    let mut slot = vec![usize::MAX; space.len()];
    for (c, &pos) in candidates.iter().enumerate() {
        slot[pos] = c;
    }
    for s in batch {
        if s.label >= space.len() || space.label(s.label).split != Split::AO {
            let (a, o) = if s.label < space.len() {
                let (a, o) = space.pair_names(s.label);
                (a.to_string(), o.to_string())
            } else {
                ("?".into(), "?".into())
            };
            return Err(SpaError::UnseenLabelInBatch(a, o));
        }
    }

    let encodings = candidates
        .iter()
        .map(|&pos| {
            let l = space.label(pos);
            encode_composition(enc, state, l.attribute, l.object)
        })
        .collect::<Result<Vec<_>>>()?;

    let d = state.dim();
    let n = batch.len().max(1) as f64;
    let mut grad_t = vec![vec![0.0; d]; candidates.len()];
    let mut loss = 0.0;
    for s in batch {
        let vn = norm(&s.visual);
        let logits: Vec<f64> = encodings
            .iter()
            .map(|e| dot(&s.visual, &e.unit) / vn / tau_cls)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let target = slot[s.label];
        loss += lse - logits[target];
        for (j, g) in grad_t.iter_mut().enumerate() {
            let p = (logits[j] - lse).exp();
            let coeff = (p - if j == target { 1.0 } else { 0.0 }) / (tau_cls * n * vn);
            axpy(coeff, &s.visual, g);
        }
    }

    let mut grads = Gradients::zeros_like(state);
    for ((pos, e), g) in candidates.iter().zip(&encodings).zip(&grad_t) {
        let tok = e.backward(enc, g);
        let l = space.label(*pos);
        axpy(1.0, &tok, grads.attr.row_mut(l.attribute));
        axpy(1.0, &tok, grads.obj.row_mut(l.object));
    }
    Ok((loss / n, grads))
}

/// One kind's contribution to the structure-consistency loss:
/// `(1/N) Σ_i KL(softmax(S⁽⁰⁾[i, I_i]/τ) ‖ softmax(S⁽⁺⁾[i, I_i]/τ))`.
/// The initial branch is a constant target; gradients flow through the
/// current tokens only.
fn scl_kind(
    enc: &FrozenEncoder,
    state: &PromptState,
    kind: PrimitiveKind,
    idx: &NeighborhoodIndex,
    tau: f64,
    grads: &mut Matrix,
) -> Result<f64> {
    let theta = state.theta(kind);
    let n = theta.rows();
    if idx.len() != n {
        return Err(SpaError::DimensionMismatch(format!(
            "{} neighbourhood rows for {n} {} primitives",
            idx.len(),
            kind.as_str()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let ctx = crate::encoder::PromptRows::context(state);
    let init = encode_all(enc, ctx, state.init(kind));
    let current = encode_all(enc, ctx, theta);
    let d = state.dim();
    let mut grad_t = vec![vec![0.0; d]; n];
    let mut total = 0.0;
    for i in 0..n {
        let nb = idx.row(i);
        let s0: Vec<f64> = nb
            .iter()
            .map(|&j| dot(&init[i].unit, &init[j].unit))
            .collect();
        let s1: Vec<f64> = nb
            .iter()
            .map(|&j| dot(&current[i].unit, &current[j].unit))
            .collect();
        let p = softmax(&s0, tau);
        let q = softmax(&s1, tau);
        total += kl(&p, &q);
        for (k, &j) in nb.iter().enumerate() {
            let gs = (q[k] - p[k]) / (tau * n as f64);
            if gs == 0.0 {
                continue;
            }
            let (ti, tj) = (current[i].unit.clone(), current[j].unit.clone());
            axpy(gs, &tj, &mut grad_t[i]);
            axpy(gs, &ti, &mut grad_t[j]);
        }
    }
    for (i, g) in grad_t.iter().enumerate() {
        let tok = current[i].backward(enc, g);
        axpy(1.0, &tok, grads.row_mut(i));
    }
    Ok(total / n as f64)
}

pub fn scl_loss(
    enc: &FrozenEncoder,
    state: &PromptState,
    idx_attr: &NeighborhoodIndex,
    idx_obj: &NeighborhoodIndex,
    tau: f64,
) -> Result<(f64, Gradients)> {
    if !idx_attr.is_frozen() || !idx_obj.is_frozen() {
        return Err(SpaError::UnfrozenNeighborhood);
    }
    if !(tau > 0.0) {
        return Err(SpaError::NonPositiveTemperature(tau));
    }
    let mut grads = Gradients::zeros_like(state);
    let a = scl_kind(
        enc,
        state,
        PrimitiveKind::Attribute,
        idx_attr,
        tau,
        &mut grads.attr,
    )?;
    let o = scl_kind(
        enc,
        state,
        PrimitiveKind::Object,
        idx_obj,
        tau,
        &mut grads.obj,
    )?;
    Ok((a + o, grads))
}

/// Frozen Top-K neighbourhood of each seen primitive in the initial encoded
/// space, self excluded.
pub fn initial_neighborhood(
    enc: &FrozenEncoder,
    state: &PromptState,
    kind: PrimitiveKind,
    k: usize,
) -> Result<NeighborhoodIndex> {
    let ctx = crate::encoder::PromptRows::context(state);
    let init = encode_all(enc, ctx, state.init(kind));
    let n = init.len();
    let mut sims = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sims.set(i, j, dot(&init[i].unit, &init[j].unit));
        }
    }
    Ok(crate::structure::topk_indices(&sims, k, true)?.freeze())
}

/// Combined objective `ce + λ·scl` and its gradient.
pub fn objective(
    batch: &[Sample],
    space: &CompositionSpace,
    enc: &FrozenEncoder,
    state: &PromptState,
    idx_attr: &NeighborhoodIndex,
    idx_obj: &NeighborhoodIndex,
    tau_scl: f64,
    tau_cls: f64,
    lambda: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let (ce, g_ce) = ce_loss(batch, space, enc, state, tau_cls)?;
    let (scl, g_scl) = scl_loss(enc, state, idx_attr, idx_obj, tau_scl)?;
    let breakdown = total_loss(ce, scl, lambda)?;
    let mut g = g_ce;
    if lambda != 0.0 {
        g.add_scaled(lambda, &g_scl);
    }
    Ok((breakdown, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::context_from_seed;
    use crate::vocab_space::{build_composition_space, Vocabulary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (FrozenEncoder, PromptState, CompositionSpace, Vec<Sample>) {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_rows = |n: usize| {
            Matrix::from_vec(
                n,
                d,
                (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
        };
        let enc = FrozenEncoder::from_seed(seed, d);
        let mut state =
            PromptState::new(context_from_seed(seed, 3, d), rand_rows(4), rand_rows(3)).unwrap();
        let a = rand_rows(4);
        let o = rand_rows(3);
        state = state.with_current(a, o).unwrap();
        let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let attrs =
            Vocabulary::new(PrimitiveKind::Attribute, names("a", 4), names("ua", 1)).unwrap();
        let objs = Vocabulary::new(PrimitiveKind::Object, names("o", 3), names("uo", 1)).unwrap();
        let seen: Vec<_> = [(0, 0), (1, 1), (2, 2), (3, 0), (0, 1), (2, 1)]
            .iter()
            .map(|(a, o)| (format!("a{a}"), format!("o{o}")))
            .collect();
        let space = build_composition_space(&attrs, &objs, &seen, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let batch = (0..5)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = norm(&v);
                Sample {
                    visual: v.into_iter().map(|x| x / n).collect(),
                    label: i % 6,
                }
            })
            .collect();
        (enc, state, space, batch)
    }

    fn finite_diff<F: Fn(&PromptState) -> f64>(
        state: &PromptState,
        kind: PrimitiveKind,
        r: usize,
        c: usize,
        f: F,
    ) -> f64 {
        let h = 1e-4;
        let mut plus = state.clone();
        let v = plus.theta(kind).get(r, c);
        plus.theta_mut(kind).set(r, c, v + h);
        let mut minus = state.clone();
        minus.theta_mut(kind).set(r, c, v - h);
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let (enc, state, space, batch) = setup(1);
        let tau = 0.05;
        let (_, g) = ce_loss(&batch, &space, &enc, &state, tau).unwrap();
        for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
            for r in 0..state.theta(kind).rows() {
                for c in 0..6 {
                    let fd = finite_diff(&state, kind, r, c, |s| {
                        ce_loss(&batch, &space, &enc, s, tau).unwrap().0
                    });
                    let an = g.get(kind).get(r, c);
                    assert!(rel(fd, an) < 1e-4, "{kind:?} {r} {c}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn scl_gradient_matches_finite_differences() {
        let (enc, state, _, _) = setup(2);
        let ia = initial_neighborhood(&enc, &state, PrimitiveKind::Attribute, 2).unwrap();
        let io = initial_neighborhood(&enc, &state, PrimitiveKind::Object, 2).unwrap();
        let (loss, g) = scl_loss(&enc, &state, &ia, &io, 0.1).unwrap();
        assert!(loss > 0.0);
        for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
            for r in 0..state.theta(kind).rows() {
                for c in 0..6 {
                    let fd = finite_diff(&state, kind, r, c, |s| {
                        scl_loss(&enc, s, &ia, &io, 0.1).unwrap().0
                    });
                    let an = g.get(kind).get(r, c);
                    assert!(rel(fd, an) < 1e-4, "{kind:?} {r} {c}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn scl_is_exactly_zero_at_init_and_positive_after_perturbation() {
        let (enc, state, _, _) = setup(3);
        let fresh = PromptState::new(
            crate::encoder::PromptRows::context(&state).clone(),
            state.init(PrimitiveKind::Attribute).clone(),
            state.init(PrimitiveKind::Object).clone(),
        )
        .unwrap();
        let ia = initial_neighborhood(&enc, &fresh, PrimitiveKind::Attribute, 3).unwrap();
        let io = initial_neighborhood(&enc, &fresh, PrimitiveKind::Object, 2).unwrap();
        let (loss, g) = scl_loss(&enc, &fresh, &ia, &io, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.attr.as_slice().iter().all(|v| *v == 0.0));
        let mut moved = fresh.clone();
        let v = moved.theta(PrimitiveKind::Attribute).get(0, 0);
        moved
            .theta_mut(PrimitiveKind::Attribute)
            .set(0, 0, v + 1e-3);
        assert!(scl_loss(&enc, &moved, &ia, &io, 0.1).unwrap().0 > 0.0);
    }

    #[test]
    fn scl_rejects_unfrozen_index() {
        let (enc, state, _, _) = setup(4);
        let sims = Matrix::from_vec(4, 4, (0..16).map(|i| i as f64).collect());
        let loose = crate::structure::topk_indices(&sims, 1, true).unwrap();
        let io = initial_neighborhood(&enc, &state, PrimitiveKind::Object, 1).unwrap();
        let err = scl_loss(&enc, &state, &loose, &io, 0.1).unwrap_err();
        assert_eq!(err.to_string(), "SCL requires frozen neighborhoods");
    }

    #[test]
    fn ce_is_near_zero_for_a_perfect_match() {
        // one seen composition aligned with the visual, the other orthogonal
        let d = 4;
        let enc = FrozenEncoder::from_seed(9, d);
        let ctx = Matrix::zeros(0, d);
        let attrs = Matrix::from_vec(2, d, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let objs = Matrix::from_vec(2, d, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let state = PromptState::new(ctx, attrs, objs).unwrap();
        let v = crate::linalg::matvec(enc.projection(), &[1.0, 0.0, 0.0, 0.0]);
        let av = Vocabulary::new(
            PrimitiveKind::Attribute,
            vec!["a0".into(), "a1".into()],
            vec![],
        )
        .unwrap();
        let ov = Vocabulary::new(
            PrimitiveKind::Object,
            vec!["o0".into(), "o1".into()],
            vec![],
        )
        .unwrap();
        let space = build_composition_space(
            &av,
            &ov,
            &[("a0".into(), "o0".into()), ("a1".into(), "o1".into())],
            &[],
        )
        .unwrap();
        let batch = [Sample {
            visual: v,
            label: 0,
        }];
        let (loss, _) = ce_loss(&batch, &space, &enc, &state, 0.01).unwrap();
        assert!(loss < 1e-10, "{loss}");
    }

    #[test]
    fn ce_uniform_logits_give_log_count() {
        // visual orthogonal to every candidate embedding
        let d = 3;
        let enc = FrozenEncoder::from_seed(10, d);
        let ctx = Matrix::zeros(0, d);
        let attrs = Matrix::from_vec(2, d, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let objs = Matrix::from_vec(1, d, vec![0.0, 0.0, 0.0]);
        let state = PromptState::new(ctx, attrs, objs).unwrap();
        let v = crate::linalg::matvec(enc.projection(), &[0.0, 0.0, 1.0]);
        let av = Vocabulary::new(
            PrimitiveKind::Attribute,
            vec!["a0".into(), "a1".into()],
            vec![],
        )
        .unwrap();
        let ov = Vocabulary::new(PrimitiveKind::Object, vec!["o0".into()], vec![]).unwrap();
        let space = build_composition_space(
            &av,
            &ov,
            &[("a0".into(), "o0".into()), ("a1".into(), "o0".into())],
            &[],
        )
        .unwrap();
        let (loss, _) = ce_loss(
            &[Sample {
                visual: v,
                label: 1,
            }],
            &space,
            &enc,
            &state,
            0.01,
        )
        .unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn ce_rejects_unseen_label() {
        let (enc, state, space, mut batch) = setup(5);
        batch[0].label = space.len() - 1;
        assert!(matches!(
            ce_loss(&batch, &space, &enc, &state, 0.1),
            Err(SpaError::UnseenLabelInBatch(..))
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.0, 0.5, 1.0).unwrap();
        assert_eq!(b.total, 1.5);
        assert_eq!(total_loss(0.7, 3.0, 0.0).unwrap().total, 0.7);
        assert!(matches!(
            total_loss(1.0, 1.0, -0.1),
            Err(SpaError::NegativeLambda(_))
        ));
    }

    #[test]
    fn objective_gradient_is_linear_in_components() {
        let (enc, state, space, batch) = setup(6);
        let ia = initial_neighborhood(&enc, &state, PrimitiveKind::Attribute, 2).unwrap();
        let io = initial_neighborhood(&enc, &state, PrimitiveKind::Object, 2).unwrap();
        let lambda = 2.5;
        let (_, g) = objective(&batch, &space, &enc, &state, &ia, &io, 0.1, 0.05, lambda).unwrap();
        let (_, g_ce) = ce_loss(&batch, &space, &enc, &state, 0.05).unwrap();
        let (_, g_scl) = scl_loss(&enc, &state, &ia, &io, 0.1).unwrap();
        for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
            for (i, v) in g.get(kind).as_slice().iter().enumerate() {
                let want = g_ce.get(kind).as_slice()[i] + lambda * g_scl.get(kind).as_slice()[i];
                assert!((v - want).abs() <= 1e-12);
            }
        }
    }
}
