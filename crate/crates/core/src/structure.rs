//! Similarity-structure kernels: cosine matrices, fixed Top-K neighbourhoods,
//! temperature softmax over neighbour scores and row-wise KL divergence.
//!
//! Neighbour search is exact brute force. An approximate index would slot in
//! behind [`topk_neighbors`] without changing its contract.

use sha2::{Digest, Sha256};

use crate::error::{Result, SpaError};
use crate::linalg::{dot, norm, Matrix};
use crate::table::EmbeddingTable;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Matrix,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn is_square_self(&self) -> bool {
        self.rows == self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    k: usize,
    indices: Vec<Vec<usize>>,
    frozen: bool,
}

impl NeighborhoodIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i]
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        for row in &self.indices {
            for &j in row {
                h.update((j as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-row probability vectors over neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborDistribution {
    pub probs: Matrix,
    pub temperature: f64,
}

/// Cosine similarity of every pair of rows of `a` and `b`.
pub fn cosine_values(a: &Matrix, b: &Matrix) -> std::result::Result<Matrix, (bool, usize)> {
    let na: Vec<f64> = a.iter_rows().map(norm).collect();
    let nb: Vec<f64> = b.iter_rows().map(norm).collect();
    if let Some(i) = na.iter().position(|n| *n == 0.0) {
        return Err((true, i));
    }
    if let Some(j) = nb.iter().position(|n| *n == 0.0) {
        return Err((false, j));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, ra) in a.iter_rows().enumerate() {
        for (j, rb) in b.iter_rows().enumerate() {
            out.set(i, j, dot(ra, rb) / (na[i] * nb[j]));
        }
    }
    Ok(out)
}

pub fn cosine_matrix(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(SpaError::DimensionMismatch(format!(
            "cosine between dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let values = cosine_values(a.matrix(), b.matrix()).map_err(|(left, i)| {
        let name = if left { &a.names()[i] } else { &b.names()[i] };
        SpaError::ZeroNorm(name.clone())
    })?;
    Ok(SimilarityMatrix {
        rows: a.names().to_vec(),
        cols: b.names().to_vec(),
        values,
    })
}

/// Indices of the `k` largest entries of each row, ordered by descending
/// value with ties going to the lower column index. The returned index is not
/// frozen; callers freeze it explicitly.
pub fn topk_indices(values: &Matrix, k: usize, exclude_self: bool) -> Result<NeighborhoodIndex> {
    let max = values.cols().saturating_sub(usize::from(exclude_self));
    if k == 0 || k > max {
        return Err(SpaError::KOutOfRange { k, max });
    }
    let indices = values
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let mut cand: Vec<usize> = (0..row.len())
                .filter(|&j| !(exclude_self && j == i))
                .collect();
            cand.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            cand.truncate(k);
            cand
        })
        .collect();
    Ok(NeighborhoodIndex {
        k,
        indices,
        frozen: false,
    })
}

pub fn topk_neighbors(
    s: &SimilarityMatrix,
    k: usize,
    exclude_self: bool,
) -> Result<NeighborhoodIndex> {
    topk_indices(&s.values, k, exclude_self)
}

/// `out[i][j] = values[i][idx[i][j]]`
pub fn gather_values(values: &Matrix, idx: &NeighborhoodIndex) -> Result<Matrix> {
    if idx.len() != values.rows() {
        return Err(SpaError::DimensionMismatch(format!(
            "neighbourhood has {} rows, similarity matrix {}",
            idx.len(),
            values.rows()
        )));
    }
    let mut out = Matrix::zeros(values.rows(), idx.k());
    for (i, row) in idx.indices().iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c >= values.cols() {
                return Err(SpaError::DimensionMismatch(format!(
                    "neighbour index {c} beyond {} columns",
                    values.cols()
                )));
            }
            out.set(i, j, values.get(i, c));
        }
    }
    Ok(out)
}

pub fn gather_rows(s: &SimilarityMatrix, idx: &NeighborhoodIndex) -> Result<Matrix> {
    gather_values(&s.values, idx)
}

/// Stable temperature softmax of one score vector.
pub fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn softmax_rows(scores: &Matrix, tau: f64) -> Result<NeighborDistribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SpaError::NonPositiveTemperature(tau));
    }
    let mut probs = Matrix::zeros(scores.rows(), scores.cols());
    for (i, row) in scores.iter_rows().enumerate() {
        probs.row_mut(i).copy_from_slice(&softmax(row, tau));
    }
    Ok(NeighborDistribution {
        probs,
        temperature: tau,
    })
}

/// `Σ_j p_j ln(p_j / q_j)`, with `0 ln 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Row-wise `D_KL(p ‖ q)`.
pub fn kl_rows(p: &NeighborDistribution, q: &NeighborDistribution) -> Result<Vec<f64>> {
    if p.probs.rows() != q.probs.rows() || p.probs.cols() != q.probs.cols() {
        return Err(SpaError::DimensionMismatch(format!(
            "KL between {}x{} and {}x{}",
            p.probs.rows(),
            p.probs.cols(),
            q.probs.rows(),
            q.probs.cols()
        )));
    }
    Ok(p.probs
        .iter_rows()
        .zip(q.probs.iter_rows())
        .map(|(a, b)| kl(a, b))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        let d = rows[0].len();
        let names = (0..rows.len()).map(|i| format!("p{i}")).collect();
        EmbeddingTable::new(names, Matrix::from_rows(&rows, d)).unwrap()
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let t = table(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let s = cosine_matrix(&t, &t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zero_row_names_primitive() {
        let t = table(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = cosine_matrix(&t, &t).unwrap_err();
        assert!(matches!(err, SpaError::ZeroNorm(ref n) if n == "p1"));
    }

    #[test]
    fn topk_tie_goes_to_lower_index() {
        let s = Matrix::from_vec(
            4,
            4,
            vec![
                1.0, 0.9, 0.7, 0.9, //
                0.9, 1.0, 0.7, 0.9, //
                0.7, 0.7, 1.0, 0.1, //
                0.9, 0.9, 0.1, 1.0,
            ],
        );
        let idx = topk_indices(&s, 2, true).unwrap();
        assert_eq!(idx.row(1), &[0, 3]);
        assert_eq!(idx.row(2), &[0, 1]);
        let all = topk_indices(&s, 3, true).unwrap();
        assert_eq!(all.row(0), &[1, 3, 2]);
        let arg = topk_indices(&s, 1, true).unwrap();
        assert_eq!(arg.row(3), &[0]);
        assert!(matches!(
            topk_indices(&s, 4, true),
            Err(SpaError::KOutOfRange { k: 4, max: 3 })
        ));
        assert!(matches!(
            topk_indices(&s, 0, false),
            Err(SpaError::KOutOfRange { .. })
        ));
    }

    #[test]
    fn gather_with_own_topk_is_sorted() {
        let s = Matrix::from_vec(3, 3, vec![1.0, 0.2, 0.5, 0.2, 1.0, 0.3, 0.5, 0.3, 1.0]);
        let idx = topk_indices(&s, 2, true).unwrap();
        let g = gather_values(&s, &idx).unwrap();
        for r in g.iter_rows() {
            assert!(r[0] >= r[1]);
        }
        let one = gather_values(
            &Matrix::from_vec(1, 1, vec![0.4]),
            &topk_indices(&Matrix::from_vec(1, 1, vec![0.4]), 1, false).unwrap(),
        )
        .unwrap();
        assert_eq!(one.as_slice(), &[0.4]);
    }

    #[test]
    fn softmax_reference_values() {
        // e^{0}, e^{-1}, e^{-2} over their sum
        let p = softmax(&[0.9, 0.8, 0.7], 0.1);
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let want = [1.0 / z, (-1.0f64).exp() / z, (-2.0f64).exp() / z];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.6652).abs() < 5e-5);
        assert!((p[1] - 0.2447).abs() < 5e-5);
        assert!((p[2] - 0.0900).abs() < 5e-5);
    }

    #[test]
    fn softmax_limits() {
        let s = [0.3, 0.9, -0.2];
        let hot = softmax(&s, 1e6);
        assert!(hot.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-6));
        let cold = softmax(&s, 1e-6);
        assert!((cold[1] - 1.0).abs() < 1e-6 && cold[0] < 1e-6 && cold[2] < 1e-6);
        let eq = softmax(&[0.5; 4], 0.01);
        assert!(eq.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(
            softmax_rows(&Matrix::zeros(1, 2), 0.0),
            Err(SpaError::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn kl_reference_values() {
        let p = [0.5, 0.5];
        let q = [0.9, 0.1];
        let want = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln();
        assert!((kl(&p, &q) - want).abs() < 1e-15);
        assert!((kl(&p, &q) - 0.5108).abs() < 5e-5);
        assert_eq!(kl(&q, &q), 0.0);
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(
            a in proptest::collection::vec(-1.0f64..1.0, 12),
            b in proptest::collection::vec(-1.0f64..1.0, 8),
            c in 0.01f64..100.0,
        ) {
            let a = Matrix::from_vec(3, 4, a.iter().map(|v| v + 2.0).collect());
            let b = Matrix::from_vec(2, 4, b.iter().map(|v| v - 2.0).collect());
            let scaled = Matrix::from_vec(3, 4, a.as_slice().iter().map(|v| v * c).collect());
            let s1 = cosine_values(&a, &b).unwrap();
            let s2 = cosine_values(&scaled, &b).unwrap();
            for (x, y) in s1.as_slice().iter().zip(s2.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let self_sim = cosine_values(&a, &a).unwrap();
            for i in 0..3 {
                prop_assert!((self_sim.get(i, i) - 1.0).abs() < 1e-9);
                for j in 0..3 {
                    prop_assert!((self_sim.get(i, j) - self_sim.get(j, i)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_equivariant(
            scores in proptest::collection::vec(-1.0f64..1.0, 2..8),
            tau in 0.01f64..10.0,
            rot in 0usize..8,
        ) {
            let p = softmax(&scores, tau);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            let r = rot % scores.len();
            let mut rotated = scores.clone();
            rotated.rotate_left(r);
            let mut p_rot = p.clone();
            p_rot.rotate_left(r);
            let q = softmax(&rotated, tau);
            for (x, y) in q.iter().zip(&p_rot) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_is_nonnegative(
            a in proptest::collection::vec(-1.0f64..1.0, 5),
            b in proptest::collection::vec(-1.0f64..1.0, 5),
            tau in 0.05f64..2.0,
        ) {
            let p = NeighborDistribution { probs: Matrix::from_vec(1, 5, softmax(&a, tau)), temperature: tau };
            let q = NeighborDistribution { probs: Matrix::from_vec(1, 5, softmax(&b, tau)), temperature: tau };
            prop_assert!(kl_rows(&p, &q).unwrap()[0] >= -1e-15);
            prop_assert!(kl_rows(&p, &p).unwrap()[0].abs() <= 1e-12);
        }
    }
}
