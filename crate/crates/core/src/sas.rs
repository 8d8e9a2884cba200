//! Inference-time calibration of unseen primitives.
//!
//! Each unseen primitive finds its Top-K most similar seen primitives in the
//! initial encoded space, softmaxes those similarities at temperature τ, and
//! adds the weighted sum of the neighbours' training shifts (θ⁺ − θ⁰) to its
//! own initial token. Shifts live in token space; re-encoding the calibrated
//! token gives the adapted embedding.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_all, FrozenEncoder, PromptRows, PromptState};
use crate::error::{Result, SpaError};
use crate::linalg::{axpy, Matrix};
use crate::structure::{cosine_values, softmax, topk_indices, SimilarityMatrix};
use crate::vocab_space::{CompositionSpace, PrimitiveKind, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    pub kind: PrimitiveKind,
    pub rows: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborWeight {
    pub seen: usize,
    pub weight: f64,
}

/// Calibrated unseen tokens of one kind, with the neighbours that produced
/// each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedRows {
    pub kind: PrimitiveKind,
    pub theta: Matrix,
    pub provenance: Vec<Vec<NeighborWeight>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedPrompts {
    pub attr: CalibratedRows,
    pub obj: CalibratedRows,
}

impl CalibratedPrompts {
    pub fn get(&self, kind: PrimitiveKind) -> &CalibratedRows {
        match kind {
            PrimitiveKind::Attribute => &self.attr,
            PrimitiveKind::Object => &self.obj,
        }
    }
}

pub fn compute_deltas(state: &PromptState, kind: PrimitiveKind) -> Result<DeltaTable> {
    let cur = state.theta(kind);
    let init = state.init(kind);
    if cur.rows() != init.rows() || cur.cols() != init.cols() {
        return Err(SpaError::DimensionMismatch(
            "current and initial tokens differ in shape".into(),
        ));
    }
    let data = cur
        .as_slice()
        .iter()
        .zip(init.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    Ok(DeltaTable {
        kind,
        rows: Matrix::from_vec(cur.rows(), cur.cols(), data),
    })
}

/// Cosine similarity between the unseen primitives' initial encodings (rows)
/// and the seen primitives' initial encodings (columns).
pub fn u2s_similarity(
    enc: &FrozenEncoder,
    state: &PromptState,
    vocab: &Vocabulary,
    unseen_init: &Matrix,
) -> Result<SimilarityMatrix> {
    let kind = vocab.kind;
    if unseen_init.cols() != state.dim() {
        return Err(SpaError::DimensionMismatch(format!(
            "unseen tokens have dimension {}, prompts {}",
            unseen_init.cols(),
            state.dim()
        )));
    }
    if unseen_init.rows() != vocab.num_unseen() || state.num_seen(kind) != vocab.num_seen() {
        return Err(SpaError::DimensionMismatch(format!(
            "{} vocabulary does not match token rows",
            kind.as_str()
        )));
    }
    let ctx = state.context();
    let unit_rows = |tokens: &Matrix| {
        let enc_rows: Vec<Vec<f64>> = encode_all(enc, ctx, tokens)
            .into_iter()
            .map(|e| e.unit)
            .collect();
        Matrix::from_rows(&enc_rows, tokens.cols())
    };
    let unseen = unit_rows(unseen_init);
    let seen = unit_rows(state.init(kind));
    let values = cosine_values(&unseen, &seen).map_err(|(left, i)| {
        SpaError::ZeroNorm(if left {
            vocab.unseen[i].clone()
        } else {
            vocab.seen[i].clone()
        })
    })?;
    Ok(SimilarityMatrix {
        rows: vocab.unseen.clone(),
        cols: vocab.seen.clone(),
        values,
    })
}

/// Neighbour-weighted transfer of seen deltas onto unseen initial tokens.
pub fn adapt_unseen(
    deltas: &DeltaTable,
    u2s: &SimilarityMatrix,
    k: usize,
    tau: f64,
    theta_unseen_init: &Matrix,
) -> Result<CalibratedRows> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SpaError::NonPositiveTemperature(tau));
    }
    let n_seen = deltas.rows.rows();
    if u2s.values.cols() != n_seen || u2s.values.rows() != theta_unseen_init.rows() {
        return Err(SpaError::DimensionMismatch(format!(
            "u2s is {}x{}, expected {}x{n_seen}",
            u2s.values.rows(),
            u2s.values.cols(),
            theta_unseen_init.rows()
        )));
    }
    if deltas.rows.cols() != theta_unseen_init.cols() {
        return Err(SpaError::DimensionMismatch(
            "delta and token dimensions differ".into(),
        ));
    }
    if k == 0 || k > n_seen {
        return Err(SpaError::KOutOfRange { k, max: n_seen });
    }
    let mut theta = theta_unseen_init.clone();
    let mut provenance = Vec::with_capacity(theta.rows());
    if theta.rows() > 0 {
        let idx = topk_indices(&u2s.values, k, false)?;
        for (u, nb) in idx.indices().iter().enumerate() {
            let sims: Vec<f64> = nb.iter().map(|&j| u2s.values.get(u, j)).collect();
            let w = softmax(&sims, tau);
            let mut shift = vec![0.0; theta.cols()];
            for (&j, &wk) in nb.iter().zip(&w) {
                axpy(wk, deltas.rows.row(j), &mut shift);
            }
            axpy(1.0, &shift, theta.row_mut(u));
            provenance.push(
                nb.iter()
                    .zip(&w)
                    .map(|(&seen, &weight)| NeighborWeight { seen, weight })
                    .collect(),
            );
        }
    }
    Ok(CalibratedRows {
        kind: deltas.kind,
        theta,
        provenance,
    })
}

/// Prompt rows for every primitive, seen rows first, read-only.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedPrompts {
    context: Matrix,
    attr: Matrix,
    obj: Matrix,
    num_seen_attr: usize,
    num_seen_obj: usize,
}

impl ExtendedPrompts {
    pub fn num_seen(&self, kind: PrimitiveKind) -> usize {
        match kind {
            PrimitiveKind::Attribute => self.num_seen_attr,
            PrimitiveKind::Object => self.num_seen_obj,
        }
    }

    pub fn seen_checksum(&self) -> String {
        let seen = |m: &Matrix, n: usize| {
            Matrix::from_vec(n, m.cols(), m.as_slice()[..n * m.cols()].to_vec())
        };
        format!(
            "{}{}{}",
            self.context.checksum(),
            seen(&self.attr, self.num_seen_attr).checksum(),
            seen(&self.obj, self.num_seen_obj).checksum()
        )
    }
}

impl PromptRows for ExtendedPrompts {
    fn context(&self) -> &Matrix {
        &self.context
    }
    fn attr_rows(&self) -> &Matrix {
        &self.attr
    }
    fn obj_rows(&self) -> &Matrix {
        &self.obj
    }
}

pub fn materialize_full_prompt_state(
    state: &PromptState,
    calibrated: &CalibratedPrompts,
    space: &CompositionSpace,
) -> Result<ExtendedPrompts> {
    let mut parts = Vec::new();
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        let vocab = space.vocabulary(kind);
        let rows = &calibrated.get(kind).theta;
        if state.num_seen(kind) != vocab.num_seen() {
            return Err(SpaError::DimensionMismatch(format!(
                "{} seen rows for {} seen {} primitives",
                state.num_seen(kind),
                vocab.num_seen(),
                kind.as_str()
            )));
        }
        if rows.rows() < vocab.num_unseen() {
            return Err(SpaError::MissingCalibratedRow(
                vocab.unseen[rows.rows()].clone(),
            ));
        }
        if rows.rows() > vocab.num_unseen() || (rows.rows() > 0 && rows.cols() != state.dim()) {
            return Err(SpaError::DimensionMismatch(format!(
                "calibrated {} rows do not match the vocabulary",
                kind.as_str()
            )));
        }
        let unseen = if rows.rows() == 0 {
            Matrix::zeros(0, state.dim())
        } else {
            rows.clone()
        };
        parts.push(state.theta(kind).vstack(&unseen));
    }
    let obj = parts.pop().unwrap();
    let attr = parts.pop().unwrap();
    Ok(ExtendedPrompts {
        context: state.context().clone(),
        attr,
        obj,
        num_seen_attr: state.num_seen(PrimitiveKind::Attribute),
        num_seen_obj: state.num_seen(PrimitiveKind::Object),
    })
}
