//! Frozen toy text encoder and the learnable prompt state.
//!
//! A prompt is a block of `m` frozen context tokens plus one (primitive) or
//! two (composition) learnable tokens. Encoding mean-pools the tokens, applies
//! a fixed orthogonal projection and L2-normalises:
//!
//! ```text
//! pooled = (Σ context + Σ tokens) / (m + n)
//! raw    = P · pooled
//! t      = raw / ‖raw‖
//! ```
//!
//! [`Encoding::backward`] pulls a gradient with respect to `t` back to the
//! learnable tokens; every token in the prompt receives the same gradient.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpaError};
use crate::linalg::{axpy, dot, feed_matrix, matvec, matvec_t, Matrix};
use crate::table::EmbeddingTable;
use crate::vocab_space::PrimitiveKind;

/// Salt mixed into the encoder seed for the context tokens, so the context
/// draw does not depend on the projection's dimension.
const CONTEXT_STREAM: u64 = 0x636f_6e74_6578_7400;

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    projection: Matrix,
    seed: u64,
}

impl FrozenEncoder {
    /// Random orthogonal `d × d` projection: the Q factor of a seeded Gaussian
    /// matrix, with column signs fixed so that diag(R) is positive.
    pub fn from_seed(seed: u64, d: usize) -> Self {
        assert!(d > 0, "encoder dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let qr = gauss.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let mut projection = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                projection.set(i, j, q[(i, j)]);
            }
        }
        Self { projection, seed }
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Encodes `context ∪ tokens`.
    pub fn encode(&self, context: &Matrix, tokens: &[&[f64]]) -> Encoding {
        let d = self.dim();
        let count = context.rows() + tokens.len();
        let mut pooled = vec![0.0; d];
        for r in context.iter_rows() {
            axpy(1.0, r, &mut pooled);
        }
        for t in tokens {
            axpy(1.0, t, &mut pooled);
        }
        let scale = 1.0 / count as f64;
        pooled.iter_mut().for_each(|v| *v *= scale);
        let raw = matvec(&self.projection, &pooled);
        let norm = dot(&raw, &raw).sqrt();
        let unit = raw.iter().map(|v| v / norm).collect();
        Encoding {
            pooled,
            raw,
            norm,
            unit,
            count,
        }
    }

    /// Gradient of a loss through the projection and the mean-pool, given
    /// the gradient with respect to the un-normalised output.
    pub fn backward_raw(&self, grad_raw: &[f64], count: usize) -> Vec<f64> {
        let mut g = matvec_t(&self.projection, grad_raw);
        let scale = 1.0 / count as f64;
        g.iter_mut().for_each(|v| *v *= scale);
        g
    }
}

/// Forward-pass intermediates of one encoding.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub pooled: Vec<f64>,
    pub raw: Vec<f64>,
    pub norm: f64,
    pub unit: Vec<f64>,
    /// Number of pooled tokens (context plus learnable).
    pub count: usize,
}

impl Encoding {
    /// Gradient w.r.t. each learnable token given `∂L/∂t` for the unit output.
    pub fn backward(&self, enc: &FrozenEncoder, grad_unit: &[f64]) -> Vec<f64> {
        // d(raw/‖raw‖) = (I − t tᵀ) / ‖raw‖
        let radial = dot(grad_unit, &self.unit);
        let grad_raw: Vec<f64> = grad_unit
            .iter()
            .zip(&self.unit)
            .map(|(g, t)| (g - radial * t) / self.norm)
            .collect();
        enc.backward_raw(&grad_raw, self.count)
    }
}

/// Read access to prompt rows, shared by the training state and the
/// SAS-extended inference state.
pub trait PromptRows {
    fn context(&self) -> &Matrix;
    fn attr_rows(&self) -> &Matrix;
    fn obj_rows(&self) -> &Matrix;

    fn rows(&self, kind: PrimitiveKind) -> &Matrix {
        match kind {
            PrimitiveKind::Attribute => self.attr_rows(),
            PrimitiveKind::Object => self.obj_rows(),
        }
    }
}

/// Frozen context block, learnable per-primitive tokens for seen primitives,
/// and the frozen initial snapshot of those tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    context: Matrix,
    pub(crate) theta_attr: Matrix,
    pub(crate) theta_obj: Matrix,
    attr_init: Matrix,
    obj_init: Matrix,
}

impl PromptState {
    /// `attr_init` / `obj_init` are the seen primitives' initial token rows.
    pub fn new(context: Matrix, attr_init: Matrix, obj_init: Matrix) -> Result<Self> {
        let d = context.cols();
        if attr_init.cols() != d || obj_init.cols() != d {
            return Err(SpaError::DimensionMismatch(format!(
                "context has dimension {d}, token rows have {} / {}",
                attr_init.cols(),
                obj_init.cols()
            )));
        }
        Ok(Self {
            context,
            theta_attr: attr_init.clone(),
            theta_obj: obj_init.clone(),
            attr_init,
            obj_init,
        })
    }

    /// Restores a state whose tokens were trained elsewhere.
    pub fn with_current(mut self, theta_attr: Matrix, theta_obj: Matrix) -> Result<Self> {
        if theta_attr.rows() != self.attr_init.rows()
            || theta_attr.cols() != self.attr_init.cols()
            || theta_obj.rows() != self.obj_init.rows()
            || theta_obj.cols() != self.obj_init.cols()
        {
            return Err(SpaError::DimensionMismatch(
                "current token rows do not match the initial snapshot".into(),
            ));
        }
        self.theta_attr = theta_attr;
        self.theta_obj = theta_obj;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.context.cols()
    }

    pub fn context_len(&self) -> usize {
        self.context.rows()
    }

    pub fn num_seen(&self, kind: PrimitiveKind) -> usize {
        self.theta(kind).rows()
    }

    pub fn theta(&self, kind: PrimitiveKind) -> &Matrix {
        match kind {
            PrimitiveKind::Attribute => &self.theta_attr,
            PrimitiveKind::Object => &self.theta_obj,
        }
    }

    pub(crate) fn theta_mut(&mut self, kind: PrimitiveKind) -> &mut Matrix {
        match kind {
            PrimitiveKind::Attribute => &mut self.theta_attr,
            PrimitiveKind::Object => &mut self.theta_obj,
        }
    }

    pub fn init(&self, kind: PrimitiveKind) -> &Matrix {
        match kind {
            PrimitiveKind::Attribute => &self.attr_init,
            PrimitiveKind::Object => &self.obj_init,
        }
    }

    /// Checksum of everything that must stay frozen: context and the
    /// initial snapshots.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        feed_matrix(&mut h, &self.context);
        feed_matrix(&mut h, &self.attr_init);
        feed_matrix(&mut h, &self.obj_init);
        hex::encode(h.finalize())
    }

    pub fn trainable_checksum(&self) -> String {
        let mut h = Sha256::new();
        feed_matrix(&mut h, &self.theta_attr);
        feed_matrix(&mut h, &self.theta_obj);
        hex::encode(h.finalize())
    }

    pub fn is_finite(&self) -> bool {
        self.theta_attr.is_finite() && self.theta_obj.is_finite()
    }

    /// View that encodes with the initial snapshot instead of current tokens.
    pub fn initial_view(&self) -> InitialView<'_> {
        InitialView(self)
    }
}

impl PromptRows for PromptState {
    fn context(&self) -> &Matrix {
        &self.context
    }
    fn attr_rows(&self) -> &Matrix {
        &self.theta_attr
    }
    fn obj_rows(&self) -> &Matrix {
        &self.theta_obj
    }
}

pub struct InitialView<'a>(&'a PromptState);

impl PromptRows for InitialView<'_> {
    fn context(&self) -> &Matrix {
        &self.0.context
    }
    fn attr_rows(&self) -> &Matrix {
        &self.0.attr_init
    }
    fn obj_rows(&self) -> &Matrix {
        &self.0.obj_init
    }
}

/// Seeded context block: `m` Gaussian tokens with per-coordinate standard
/// deviation `1/√d`.
pub fn context_from_seed(seed: u64, m: usize, d: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CONTEXT_STREAM);
    let scale = 1.0 / (d as f64).sqrt();
    let data = (0..m * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    Matrix::from_vec(m, d, data)
}

fn row_checked<'a>(rows: &'a Matrix, index: usize, what: &'static str) -> Result<&'a [f64]> {
    if index >= rows.rows() {
        return Err(SpaError::IndexOutOfRange {
            what,
            index,
            len: rows.rows(),
        });
    }
    Ok(rows.row(index))
}

pub fn encode_primitive(
    enc: &FrozenEncoder,
    state: &PromptState,
    kind: PrimitiveKind,
    index: usize,
    use_init: bool,
) -> Result<Vec<f64>> {
    if use_init {
        encode_primitive_rows(enc, &state.initial_view(), kind, index).map(|e| e.unit)
    } else {
        encode_primitive_rows(enc, state, kind, index).map(|e| e.unit)
    }
}

pub fn encode_primitive_rows<P: PromptRows + ?Sized>(
    enc: &FrozenEncoder,
    prompts: &P,
    kind: PrimitiveKind,
    index: usize,
) -> Result<Encoding> {
    let row = row_checked(prompts.rows(kind), index, "primitive row")?;
    Ok(enc.encode(prompts.context(), &[row]))
}

pub fn encode_composition<P: PromptRows + ?Sized>(
    enc: &FrozenEncoder,
    prompts: &P,
    attribute: usize,
    object: usize,
) -> Result<Encoding> {
    let a = row_checked(prompts.attr_rows(), attribute, "attribute row")?;
    let o = row_checked(prompts.obj_rows(), object, "object row")?;
    Ok(enc.encode(prompts.context(), &[a, o]))
}

/// Encodes every row of `tokens` as a single-token prompt.
pub fn encode_all(enc: &FrozenEncoder, context: &Matrix, tokens: &Matrix) -> Vec<Encoding> {
    tokens
        .iter_rows()
        .map(|r| enc.encode(context, &[r]))
        .collect()
}

/// Encoded unit vectors of `tokens` as a named table.
pub fn encoded_table(
    enc: &FrozenEncoder,
    context: &Matrix,
    tokens: &Matrix,
    names: Vec<String>,
) -> Result<EmbeddingTable> {
    let rows: Vec<Vec<f64>> = encode_all(enc, context, tokens)
        .into_iter()
        .map(|e| e.unit)
        .collect();
    EmbeddingTable::new(names, Matrix::from_rows(&rows, tokens.cols()))
}

/// JSON sidecar stored next to persisted prompt tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSidecar {
    pub seed: u64,
    pub m: usize,
    pub d: usize,
    pub checksum: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn projection_is_orthogonal_and_reproducible() {
        let enc = FrozenEncoder::from_seed(7, 8);
        let p = enc.projection();
        for i in 0..8 {
            for j in 0..8 {
                let col_dot: f64 = (0..8).map(|k| p.get(k, i) * p.get(k, j)).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((col_dot - expect).abs() < 1e-6);
            }
        }
        let again = FrozenEncoder::from_seed(7, 8);
        assert_eq!(
            enc.projection()
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            again
                .projection()
                .as_slice()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        );
        assert_ne!(
            FrozenEncoder::from_seed(8, 8).projection(),
            enc.projection()
        );
    }

    #[test]
    fn shared_token_mean_is_the_token() {
        let enc = FrozenEncoder::from_seed(1, 4);
        let ctx = Matrix::from_vec(1, 4, vec![0.5, -1.0, 2.0, 0.25]);
        let state = PromptState::new(ctx.clone(), ctx.clone(), ctx.clone()).unwrap();
        let out = encode_primitive(&enc, &state, PrimitiveKind::Attribute, 0, false).unwrap();
        let raw = matvec(enc.projection(), ctx.row(0));
        let n = dot(&raw, &raw).sqrt();
        for (a, b) in out.iter().zip(&raw) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn init_encoding_is_bitwise_stable_and_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = FrozenEncoder::from_seed(2, 8);
        let state = PromptState::new(
            context_from_seed(2, 3, 8),
            random_matrix(&mut rng, 4, 8),
            random_matrix(&mut rng, 3, 8),
        )
        .unwrap();
        let a = encode_primitive(&enc, &state, PrimitiveKind::Object, 2, true).unwrap();
        let b = encode_primitive(&enc, &state, PrimitiveKind::Object, 2, true).unwrap();
        assert_eq!(a, b);
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-9);
        assert!(matches!(
            encode_primitive(&enc, &state, PrimitiveKind::Object, 3, true),
            Err(SpaError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn composition_is_symmetric_in_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = FrozenEncoder::from_seed(5, 6);
        let ctx = context_from_seed(5, 3, 6);
        let x = random_matrix(&mut rng, 1, 6);
        let y = random_matrix(&mut rng, 1, 6);
        let ab = enc.encode(&ctx, &[x.row(0), y.row(0)]);
        let ba = enc.encode(&ctx, &[y.row(0), x.row(0)]);
        for (p, q) in ab.unit.iter().zip(&ba.unit) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_tokens_match_primitive_mean() {
        let enc = FrozenEncoder::from_seed(5, 6);
        let tok = vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.7];
        // with context equal to the token, any number of copies pools to the token
        let ctx = Matrix::from_rows(&[tok.clone(), tok.clone()], 6);
        let comp = enc.encode(&ctx, &[&tok, &tok]);
        let prim = enc.encode(&ctx, &[&tok]);
        for (p, q) in comp.unit.iter().zip(&prim.unit) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    /// Straight-line reference: mean, then explicit double loop, then divide.
    fn reference_composition(p: &Matrix, ctx: &Matrix, a: &[f64], o: &[f64]) -> Vec<f64> {
        let d = p.rows();
        let m = ctx.rows();
        let mut mean = vec![0.0; d];
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..m {
                s += ctx.get(i, j);
            }
            s += a[j] + o[j];
            mean[j] = s / (m + 2) as f64;
        }
        let mut out = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                out[i] += p.get(i, j) * mean[j];
            }
        }
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.into_iter().map(|v| v / n).collect()
    }

    #[test]
    fn composition_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = FrozenEncoder::from_seed(11, 8);
        let ctx = context_from_seed(11, 3, 8);
        let attrs = random_matrix(&mut rng, 3, 8);
        let objs = random_matrix(&mut rng, 2, 8);
        let state = PromptState::new(ctx.clone(), attrs.clone(), objs.clone()).unwrap();
        for a in 0..3 {
            for o in 0..2 {
                let got = encode_composition(&enc, &state, a, o).unwrap().unit;
                let want = reference_composition(enc.projection(), &ctx, attrs.row(a), objs.row(o));
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_transpose_projection() {
        // L = ½‖raw‖²  ⇒  ∂L/∂θ = Pᵀ raw / (m+1)
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let enc = FrozenEncoder::from_seed(12, 5);
        let ctx = context_from_seed(12, 3, 5);
        let theta = random_matrix(&mut rng, 1, 5);
        let e = enc.encode(&ctx, &[theta.row(0)]);
        let g = enc.backward_raw(&e.raw, e.count);
        let expect: Vec<f64> = matvec_t(enc.projection(), &e.raw)
            .iter()
            .map(|v| v / 4.0)
            .collect();
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        // and against finite differences
        let h = 1e-4;
        for j in 0..5 {
            let mut plus = theta.clone();
            plus.row_mut(0)[j] += h;
            let mut minus = theta.clone();
            minus.row_mut(0)[j] -= h;
            let f = |t: &Matrix| {
                let r = enc.encode(&ctx, &[t.row(0)]).raw;
                0.5 * dot(&r, &r)
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-4 * fd.abs().max(1e-8));
        }
    }

    #[test]
    fn radial_gradient_vanishes() {
        let enc = FrozenEncoder::from_seed(13, 6);
        let ctx = context_from_seed(13, 3, 6);
        let tok = [0.3, -0.2, 0.9, 0.1, 0.0, -0.5];
        let e = enc.encode(&ctx, &[&tok]);
        let g = e.backward(&enc, &e.unit.clone());
        assert!(g.iter().all(|v| v.abs() < 1e-14));
        let zero = e.backward(&enc, &[0.0; 6]);
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let enc = FrozenEncoder::from_seed(14, 8);
        let ctx = context_from_seed(14, 3, 8);
        let a = random_matrix(&mut rng, 1, 8);
        let o = random_matrix(&mut rng, 1, 8);
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |a: &[f64]| dot(&w, &enc.encode(&ctx, &[a, o.row(0)]).unit);
        let e = enc.encode(&ctx, &[a.row(0), o.row(0)]);
        let g = e.backward(&enc, &w);
        let h = 1e-4;
        for j in 0..8 {
            let mut p = a.row(0).to_vec();
            p[j] += h;
            let mut m = a.row(0).to_vec();
            m[j] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
            assert!(rel < 1e-4, "coord {j}: fd {fd} analytic {}", g[j]);
        }
    }
}
