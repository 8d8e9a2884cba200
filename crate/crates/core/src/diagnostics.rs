//! Embedding-space analyses: semantic/visual alignment after mean-centring,
//! neighbour consistency against random neighbours, and partitioning unseen
//! compositions by how close they sit to seen ones.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, SpaError};
use crate::linalg::{axpy, Matrix};
use crate::structure::{cosine_values, topk_indices, SimilarityMatrix};
use crate::table::EmbeddingTable;
use crate::vocab_space::{CompositionSpace, Split};

pub fn mean_center(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    if table.len() < 2 {
        return Err(SpaError::TooFewValues {
            needed: 2,
            got: table.len(),
        });
    }
    let m = table.matrix();
    let mut mean = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        axpy(1.0, r, &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= m.rows() as f64);
    let mut out = m.clone();
    for i in 0..out.rows() {
        axpy(-1.0, &mean, out.row_mut(i));
    }
    EmbeddingTable::new(table.names().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub pearson: f64,
    pub spearman: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(SpaError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(SpaError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Significance test for a Pearson coefficient.
pub trait PValueMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn p_value(&self, x: &[f64], y: &[f64], r: f64) -> Result<f64>;
}

/// Two-sided Student-t approximation with `n − 2` degrees of freedom.
#[derive(Debug, Clone, Copy, Default)]
pub struct TApproximation;

impl PValueMethod for TApproximation {
    fn name(&self) -> &'static str {
        "t"
    }

    fn p_value(&self, x: &[f64], _y: &[f64], r: f64) -> Result<f64> {
        let df = x.len() as f64 - 2.0;
        if r.abs() >= 1.0 {
            return Ok(0.0);
        }
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist =
            StudentsT::new(0.0, 1.0, df).map_err(|e| SpaError::InvalidConfig(e.to_string()))?;
        Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
    }
}

/// Two-sided permutation test: fraction of shuffles of `y` whose |r| reaches
/// the observed |r| (with the +1 correction).
#[derive(Debug, Clone, Copy)]
pub struct Permutation {
    pub trials: usize,
    pub seed: u64,
}

impl PValueMethod for Permutation {
    fn name(&self) -> &'static str {
        "permutation"
    }

    fn p_value(&self, x: &[f64], y: &[f64], r: f64) -> Result<f64> {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut shuffled = y.to_vec();
        let mut extreme = 0usize;
        for _ in 0..self.trials {
            shuffled.shuffle(&mut rng);
            if pearson(x, &shuffled)?.abs() >= r.abs() - 1e-12 {
                extreme += 1;
            }
        }
        Ok((extreme + 1) as f64 / (self.trials + 1) as f64)
    }
}

type PValueFactory = fn(u64) -> Box<dyn PValueMethod>;

pub struct PValueRegistry {
    factories: BTreeMap<&'static str, PValueFactory>,
}

impl Default for PValueRegistry {
    fn default() -> Self {
        let mut factories: BTreeMap<&'static str, PValueFactory> = BTreeMap::new();
        factories.insert("t", |_| Box::new(TApproximation));
        factories.insert("permutation", |seed| {
            Box::new(Permutation { trials: 9999, seed })
        });
        Self { factories }
    }
}

impl PValueRegistry {
    pub fn build(&self, name: &str, seed: u64) -> Result<Box<dyn PValueMethod>> {
        self.factories
            .get(name)
            .map(|f| f(seed))
            .ok_or_else(|| SpaError::UnknownStrategy {
                kind: "p-value method",
                name: name.to_string(),
                available: self
                    .factories
                    .keys()
                    .copied()
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

pub fn correlation_with(x: &[f64], y: &[f64], method: &dyn PValueMethod) -> Result<AlignmentStats> {
    if x.len() != y.len() {
        return Err(SpaError::DimensionMismatch(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(SpaError::TooFewValues {
            needed: 3,
            got: x.len(),
        });
    }
    let r = pearson(x, y)?;
    Ok(AlignmentStats {
        pearson: r,
        spearman: spearman(x, y)?,
        p_value: method.p_value(x, y, r)?,
        n: x.len(),
    })
}

pub fn correlation(x: &[f64], y: &[f64]) -> Result<AlignmentStats> {
    correlation_with(x, y, &TApproximation)
}

fn self_cosines(t: &EmbeddingTable) -> Result<Matrix> {
    cosine_values(t.matrix(), t.matrix()).map_err(|(_, i)| SpaError::ZeroNorm(t.names()[i].clone()))
}

/// Upper-triangle entries of the cosine similarity matrix of `table`.
pub fn pairwise_similarities(table: &EmbeddingTable) -> Result<Vec<f64>> {
    let s = self_cosines(table)?;
    let n = s.rows();
    Ok((0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| s.get(i, j))
        .collect())
}

/// Correlation of pairwise similarities between two row-aligned tables,
/// both mean-centred first.
pub fn semantic_visual_alignment(
    semantic: &EmbeddingTable,
    visual: &EmbeddingTable,
    method: &dyn PValueMethod,
) -> Result<AlignmentStats> {
    check_aligned(semantic, visual)?;
    let x = pairwise_similarities(&mean_center(semantic)?)?;
    let y = pairwise_similarities(&mean_center(visual)?)?;
    correlation_with(&x, &y, method)
}

fn check_aligned(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<()> {
    if a.names() != b.names() {
        return Err(SpaError::DimensionMismatch(
            "tables are not row-aligned".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStats {
    #[serde(rename = "random")]
    pub random_neighbor_similarity: f64,
    #[serde(rename = "topk")]
    pub topk_semantic_neighbor_similarity: f64,
    /// `topk / random`, absent when the random baseline is exactly 0.
    pub ratio: Option<f64>,
}

/// Mean visual similarity to each row's Top-K semantic neighbours versus to
/// uniformly drawn non-self rows (`trials` draws of K per row, averaged).
/// Both tables are mean-centred here.
pub fn neighbor_consistency(
    semantic: &EmbeddingTable,
    visual_prototypes: &EmbeddingTable,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<ConsistencyStats> {
    check_aligned(semantic, visual_prototypes)?;
    let n = semantic.len();
    if k == 0 || k >= n {
        return Err(SpaError::KOutOfRange {
            k,
            max: n.saturating_sub(1),
        });
    }
    let sem = mean_center(semantic)?;
    let vis = mean_center(visual_prototypes)?;
    let sem_sim = self_cosines(&sem)?;
    let vis_sim = self_cosines(&vis)?;
    let idx = topk_indices(&sem_sim, k, true)?;
    let mut topk = 0.0;
    for (i, nb) in idx.indices().iter().enumerate() {
        topk += nb.iter().map(|&j| vis_sim.get(i, j)).sum::<f64>() / k as f64;
    }
    topk /= n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = trials.max(1);
    let mut random = 0.0;
    for _ in 0..trials {
        let mut acc = 0.0;
        for i in 0..n {
            // draw from the n-1 other rows
            let picks = sample(&mut rng, n - 1, k);
            acc += picks
                .iter()
                .map(|p| if p >= i { p + 1 } else { p })
                .map(|j| vis_sim.get(i, j))
                .sum::<f64>()
                / k as f64;
        }
        random += acc / n as f64;
    }
    random /= trials as f64;
    Ok(ConsistencyStats {
        random_neighbor_similarity: random,
        topk_semantic_neighbor_similarity: topk,
        ratio: (random != 0.0).then(|| topk / random),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IsolationGroup {
    Near,
    Moderate,
    Isolated,
}

impl IsolationGroup {
    pub const ALL: [IsolationGroup; 3] = [
        IsolationGroup::Near,
        IsolationGroup::Moderate,
        IsolationGroup::Isolated,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: IsolationGroup,
    pub ratio: f64,
    pub avg_sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationPartition {
    pub tags: Vec<IsolationGroup>,
    /// Minimum similarity for Near and for Moderate.
    pub thresholds: (f64, f64),
    pub groups: Vec<GroupSummary>,
}

impl IsolationPartition {
    pub fn members(&self, group: IsolationGroup) -> Vec<usize> {
        (0..self.tags.len())
            .filter(|&i| self.tags[i] == group)
            .collect()
    }
}

/// Splits `similarities` into Near / Moderate / Isolated. The top
/// `q_near` fraction (by count) sets the Near threshold, the bottom
/// `q_isolated` fraction the Isolated one; values tied with a threshold go to
/// the closer group.
pub fn isolation_partition(
    similarities: &[f64],
    quantiles: (f64, f64),
) -> Result<IsolationPartition> {
    let (q_near, q_iso) = quantiles;
    if !(q_near > 0.0) || !(q_iso >= 0.0) || q_near + q_iso > 1.0 + 1e-12 {
        return Err(SpaError::DegenerateQuantiles(format!(
            "near {q_near}, isolated {q_iso}"
        )));
    }
    let n = similarities.len();
    if n == 0 {
        return Ok(IsolationPartition {
            tags: vec![],
            thresholds: (f64::NAN, f64::NAN),
            groups: vec![],
        });
    }
    let mut sorted = similarities.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let near_count = ((q_near * n as f64).round() as usize).clamp(1, n);
    let moderate_end = (n - (q_iso * n as f64).round() as usize).max(near_count);
    let near_min = sorted[near_count - 1];
    let moderate_min = sorted[moderate_end - 1];
    let tags: Vec<IsolationGroup> = similarities
        .iter()
        .map(|&s| {
            if s >= near_min {
                IsolationGroup::Near
            } else if s >= moderate_min {
                IsolationGroup::Moderate
            } else {
                IsolationGroup::Isolated
            }
        })
        .collect();
    let groups = IsolationGroup::ALL
        .iter()
        .map(|&g| {
            let vals: Vec<f64> = similarities
                .iter()
                .zip(&tags)
                .filter(|(_, t)| **t == g)
                .map(|(s, _)| *s)
                .collect();
            GroupSummary {
                group: g,
                ratio: vals.len() as f64 / n as f64,
                avg_sim: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            }
        })
        .collect();
    Ok(IsolationPartition {
        tags,
        thresholds: (near_min, moderate_min),
        groups,
    })
}

/// Closeness of each composition with an unseen primitive to the seen
/// vocabulary: mean over its two primitives of the best similarity to a seen
/// primitive of the same kind (1 for a seen primitive). Returns composition
/// positions and their scores.
pub fn composition_isolation_scores(
    space: &CompositionSpace,
    attr_u2s: &SimilarityMatrix,
    obj_u2s: &SimilarityMatrix,
) -> (Vec<usize>, Vec<f64>) {
    let best =
        |m: &Matrix, row: usize| m.row(row).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let na = space.attributes().num_seen();
    let no = space.objects().num_seen();
    let mut positions = Vec::new();
    let mut scores = Vec::new();
    for (pos, l) in space.labels().iter().enumerate() {
        if matches!(l.split, Split::AO | Split::AOHeldout) {
            continue;
        }
        let a = if l.attribute < na {
            1.0
        } else {
            best(&attr_u2s.values, l.attribute - na)
        };
        let o = if l.object < no {
            1.0
        } else {
            best(&obj_u2s.values, l.object - no)
        };
        positions.push(pos);
        scores.push((a + o) / 2.0);
    }
    (positions, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        let d = rows[0].len();
        EmbeddingTable::new(
            (0..rows.len()).map(|i| format!("r{i}")).collect(),
            Matrix::from_rows(&rows, d),
        )
        .unwrap()
    }

    #[test]
    fn centering_cases() {
        let opp = table(vec![vec![1.0, -2.0], vec![-1.0, 2.0]]);
        assert_eq!(mean_center(&opp).unwrap(), opp);
        let same = table(vec![vec![0.3, 0.4], vec![0.3, 0.4], vec![0.3, 0.4]]);
        assert!(mean_center(&same)
            .unwrap()
            .matrix()
            .as_slice()
            .iter()
            .all(|v| v.abs() < 1e-15));
        assert!(matches!(
            mean_center(&table(vec![vec![1.0]])),
            Err(SpaError::TooFewValues { .. })
        ));
    }

    #[test]
    fn affine_and_square_correlations() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let s = correlation(&x, &y).unwrap();
        assert!((s.pearson - 1.0).abs() < 1e-12 && (s.spearman - 1.0).abs() < 1e-12);
        assert_eq!(s.p_value, 0.0);
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let s = correlation(&x, &sq).unwrap();
        assert_eq!(s.spearman, 1.0);
        assert!(s.pearson < 1.0);
        assert!(matches!(
            correlation(&x, &[1.0; 10]),
            Err(SpaError::ZeroVariance("y"))
        ));
        assert!(matches!(
            correlation(&[1.0, 2.0], &[1.0, 2.0]),
            Err(SpaError::TooFewValues { .. })
        ));
    }

    #[test]
    fn t_p_value_matches_reference() {
        // r = 0.5, n = 12 → t = 0.5·√(10/0.75) ≈ 1.8257, two-sided p ≈ 0.0979
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let p = TApproximation.p_value(&x, &x, 0.5).unwrap();
        assert!((p - 0.0979).abs() < 5e-4, "{p}");
    }

    #[test]
    fn permutation_p_value_agrees_with_t_roughly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(0.0..1.0)).collect();
        let r = pearson(&x, &y).unwrap();
        let pt = TApproximation.p_value(&x, &y, r).unwrap();
        let pp = Permutation {
            trials: 2000,
            seed: 1,
        }
        .p_value(&x, &y, r)
        .unwrap();
        assert!((pt - pp).abs() < 0.02, "{pt} vs {pp}");
        let reg = PValueRegistry::default();
        assert_eq!(reg.build("permutation", 0).unwrap().name(), "permutation");
        assert!(reg.build("exact", 0).is_err());
    }

    #[test]
    fn shuffled_pairs_are_uncorrelated() {
        let mut small = 0;
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut y = x.clone();
            rand::seq::SliceRandom::shuffle(y.as_mut_slice(), &mut rng);
            if pearson(&x, &y).unwrap().abs() < 0.1 {
                small += 1;
            }
        }
        assert!(small >= 2);
    }

    #[test]
    fn identical_tables_favour_semantic_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let t = table(rows);
        for seed in 0..5 {
            let c = neighbor_consistency(&t, &t, 3, 20, seed).unwrap();
            assert!(c.topk_semantic_neighbor_similarity >= c.random_neighbor_similarity);
        }
        assert!(neighbor_consistency(&t, &t, 12, 1, 0).is_err());
    }

    #[test]
    fn independent_tables_have_no_neighbour_advantage() {
        let mut close = 0;
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut draw = || -> Vec<Vec<f64>> {
                (0..60)
                    .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            };
            let sem = table(draw());
            let vis = table(draw());
            let c = neighbor_consistency(&sem, &vis, 5, 50, seed).unwrap();
            if (c.topk_semantic_neighbor_similarity - c.random_neighbor_similarity).abs() < 0.05 {
                close += 1;
            }
        }
        assert!(close >= 2);
    }

    #[test]
    fn partition_by_hand() {
        let sims = [0.9, 0.9, 0.6, 0.9, 0.3, 0.6, 0.9, 0.6, 0.9, 0.6];
        let p = isolation_partition(&sims, (0.5, 0.1)).unwrap();
        assert_eq!(p.members(IsolationGroup::Near).len(), 5);
        assert_eq!(p.members(IsolationGroup::Moderate).len(), 4);
        assert_eq!(p.members(IsolationGroup::Isolated), vec![4]);
        let avgs: Vec<f64> = p.groups.iter().map(|g| g.avg_sim.unwrap()).collect();
        assert!(avgs[0] >= avgs[1] && avgs[1] >= avgs[2]);

        let flat = isolation_partition(&[0.5; 7], (0.5, 0.1)).unwrap();
        assert!(flat.tags.iter().all(|t| *t == IsolationGroup::Near));
        assert!(isolation_partition(&sims, (0.0, 0.1)).is_err());
        assert!(isolation_partition(&sims, (0.8, 0.3)).is_err());
    }

    proptest! {
        #[test]
        fn centering_is_idempotent(values in proptest::collection::vec(-5.0f64..5.0, 15)) {
            let rows: Vec<Vec<f64>> = values.chunks(3).map(|c| c.to_vec()).collect();
            let once = mean_center(&table(rows)).unwrap();
            let twice = mean_center(&once).unwrap();
            for (a, b) in once.matrix().as_slice().iter().zip(twice.matrix().as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for j in 0..3 {
                let col: f64 = once.matrix().iter_rows().map(|r| r[j]).sum();
                prop_assert!(col.abs() < 1e-12);
            }
        }

        #[test]
        fn spearman_ignores_monotone_transforms(
            x in proptest::collection::vec(-2.0f64..2.0, 5..30),
            y in proptest::collection::vec(-2.0f64..2.0, 30),
        ) {
            let y = &y[..x.len()];
            prop_assume!(pearson(&x, y).is_ok());
            let base = spearman(&x, y).unwrap();
            let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let cube: Vec<f64> = y.iter().map(|v| v * v * v).collect();
            prop_assert!((spearman(&ex, y).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(&x, &cube).unwrap() - base).abs() < 1e-12);
            let p = pearson(&x, y).unwrap();
            prop_assert!(p.abs() <= 1.0 && base.abs() <= 1.0);
        }

        #[test]
        fn partition_sizes_follow_ratios(n in 5usize..80, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sims: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let p = isolation_partition(&sims, (0.5, 0.1)).unwrap();
            let sizes: Vec<usize> = IsolationGroup::ALL.iter().map(|g| p.members(*g).len()).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!((sizes[0] as f64 - 0.5 * n as f64).abs() <= 1.0);
            prop_assert!((sizes[1] as f64 - 0.4 * n as f64).abs() <= 1.0);
            prop_assert!((sizes[2] as f64 - 0.1 * n as f64).abs() <= 1.0);
        }
    }
}
