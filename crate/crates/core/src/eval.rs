//! Scoring over the full composition space and the calibration-bias
//! evaluation protocol.
//!
//! A scalar bias is added to the score of every unseen composition (any split
//! other than AO) before ranking. Sweeping it traces seen accuracy against
//! unseen accuracy; the harmonic mean is reported at its best point and the
//! area under the traced curve is the AUC. Candidates are ranked by score
//! with ties going to the lower composition index.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_composition, FrozenEncoder, PromptRows};
use crate::error::{Result, SpaError};
use crate::linalg::{dot, norm, Matrix};
use crate::vocab_space::{CompositionSpace, Sample, Split};

/// Magnitude of the sentinel biases bracketing every sweep.
pub const BIAS_SENTINEL: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Matrix,
}

impl ScoreMatrix {
    pub fn num_samples(&self) -> usize {
        self.values.rows()
    }
}

pub fn score<P: PromptRows + ?Sized>(
    test: &[Sample],
    space: &CompositionSpace,
    enc: &FrozenEncoder,
    prompts: &P,
) -> Result<ScoreMatrix> {
    let (na, no) = (space.attributes().len(), space.objects().len());
    if prompts.attr_rows().rows() < na {
        return Err(SpaError::MissingCalibratedRow(
            space
                .attributes()
                .name(prompts.attr_rows().rows())
                .to_string(),
        ));
    }
    if prompts.obj_rows().rows() < no {
        return Err(SpaError::MissingCalibratedRow(
            space.objects().name(prompts.obj_rows().rows()).to_string(),
        ));
    }
    let texts = space
        .labels()
        .iter()
        .map(|l| encode_composition(enc, prompts, l.attribute, l.object).map(|e| e.unit))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Matrix::zeros(test.len(), texts.len());
    for (i, s) in test.iter().enumerate() {
        let n = norm(&s.visual);
        if n == 0.0 {
            return Err(SpaError::ZeroNorm(format!("test sample {i}")));
        }
        for (j, t) in texts.iter().enumerate() {
            values.set(i, j, (dot(&s.visual, t) / n).clamp(-1.0, 1.0));
        }
    }
    Ok(ScoreMatrix { values })
}

fn unseen_mask(space: &CompositionSpace) -> Vec<bool> {
    space.labels().iter().map(|l| !l.split.is_seen()).collect()
}

/// Number of candidates ranked strictly ahead of `target` under `bias`.
fn rank_of(row: &[f64], target: usize, bias: f64, unseen: &[bool]) -> usize {
    let adj = |j: usize| if unseen[j] { row[j] + bias } else { row[j] };
    let t = adj(target);
    (0..row.len())
        .filter(|&j| j != target && (adj(j) > t || (adj(j) == t && j < target)))
        .count()
}

/// Top-1 prediction under `bias`.
pub fn predict(row: &[f64], bias: f64, unseen: &[bool]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, s) in row.iter().enumerate() {
        let s = if unseen[j] { s + bias } else { *s };
        if s > best_score {
            best_score = s;
            best = j;
        }
    }
    best
}

/// Per-split accuracies keyed in the fixed split order; `None` marks a split
/// with no samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracies {
    #[serde(rename = "AO")]
    pub ao: Option<f64>,
    #[serde(rename = "AO_star")]
    pub ao_heldout: Option<f64>,
    #[serde(rename = "AstarO")]
    pub astar_o: Option<f64>,
    #[serde(rename = "AOstar")]
    pub a_ostar: Option<f64>,
    #[serde(rename = "AstarOstar")]
    pub astar_ostar: Option<f64>,
}

impl SplitAccuracies {
    pub fn get(&self, split: Split) -> Option<f64> {
        match split {
            Split::AO => self.ao,
            Split::AOHeldout => self.ao_heldout,
            Split::AstarO => self.astar_o,
            Split::AOstar => self.a_ostar,
            Split::AstarOstar => self.astar_ostar,
        }
    }

    fn from_fn(mut f: impl FnMut(Split) -> Option<f64>) -> Self {
        Self {
            ao: f(Split::AO),
            ao_heldout: f(Split::AOHeldout),
            astar_o: f(Split::AstarO),
            a_ostar: f(Split::AOstar),
            astar_ostar: f(Split::AstarOstar),
        }
    }
}

fn check_inputs(scores: &ScoreMatrix, labels: &[usize], space: &CompositionSpace) -> Result<()> {
    if labels.len() != scores.num_samples() {
        return Err(SpaError::DimensionMismatch(format!(
            "{} labels for {} scored samples",
            labels.len(),
            scores.num_samples()
        )));
    }
    if scores.values.cols() != space.len() {
        return Err(SpaError::DimensionMismatch(format!(
            "{} score columns for {} compositions",
            scores.values.cols(),
            space.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= space.len()) {
        return Err(SpaError::IndexOutOfRange {
            what: "composition label",
            index: bad,
            len: space.len(),
        });
    }
    Ok(())
}

/// Top-k accuracy per split at a fixed bias.
pub fn split_accuracy_at(
    scores: &ScoreMatrix,
    labels: &[usize],
    space: &CompositionSpace,
    k: usize,
    bias: f64,
) -> Result<SplitAccuracies> {
    check_inputs(scores, labels, space)?;
    let unseen = unseen_mask(space);
    let mut hits = [0usize; 5];
    let mut totals = [0usize; 5];
    for (i, &l) in labels.iter().enumerate() {
        let slot = Split::ALL
            .iter()
            .position(|s| *s == space.label(l).split)
            .unwrap();
        totals[slot] += 1;
        if rank_of(scores.values.row(i), l, bias, &unseen) < k {
            hits[slot] += 1;
        }
    }
    Ok(SplitAccuracies::from_fn(|s| {
        let slot = Split::ALL.iter().position(|x| *x == s).unwrap();
        (totals[slot] > 0).then(|| hits[slot] as f64 / totals[slot] as f64)
    }))
}

pub fn split_accuracy(
    scores: &ScoreMatrix,
    labels: &[usize],
    space: &CompositionSpace,
    k: usize,
) -> Result<SplitAccuracies> {
    split_accuracy_at(scores, labels, space, k, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasCurve {
    pub points: Vec<CurvePoint>,
}

/// Decision boundaries of the top-1 rule: every distinct per-sample gap
/// between the best seen and best unseen score, bracketed by the sentinels.
pub fn default_bias_grid(scores: &ScoreMatrix, space: &CompositionSpace) -> Vec<f64> {
    let unseen = unseen_mask(space);
    let mut grid: Vec<f64> = vec![-BIAS_SENTINEL, BIAS_SENTINEL];
    if unseen.iter().any(|u| *u) && unseen.iter().any(|u| !*u) {
        for row in scores.values.iter_rows() {
            let best = |want_unseen: bool| {
                row.iter()
                    .zip(&unseen)
                    .filter(|(_, u)| **u == want_unseen)
                    .map(|(s, _)| *s)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            grid.push(best(false) - best(true));
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Seen accuracy over AO samples and unseen accuracy over all other samples
/// at every bias of `grid`. An empty sample group scores 0.
pub fn bias_sweep(
    scores: &ScoreMatrix,
    labels: &[usize],
    space: &CompositionSpace,
    grid: &[f64],
    k: usize,
) -> Result<BiasCurve> {
    if grid.is_empty() {
        return Err(SpaError::EmptyGrid);
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SpaError::InvalidConfig(
            "bias grid must be strictly increasing".into(),
        ));
    }
    check_inputs(scores, labels, space)?;
    let unseen = unseen_mask(space);
    let seen_total = labels.iter().filter(|&&l| !unseen[l]).count();
    let unseen_total = labels.len() - seen_total;
    let frac = |hits: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    };
    let points = grid
        .iter()
        .map(|&bias| {
            let (mut sh, mut uh) = (0, 0);
            for (i, &l) in labels.iter().enumerate() {
                if rank_of(scores.values.row(i), l, bias, &unseen) < k {
                    if unseen[l] {
                        uh += 1;
                    } else {
                        sh += 1;
                    }
                }
            }
            CurvePoint {
                bias,
                seen: frac(sh, seen_total),
                unseen: frac(uh, unseen_total),
            }
        })
        .collect();
    Ok(BiasCurve { points })
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmPoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
    pub value: f64,
}

/// Best harmonic mean over the curve (first maximum in curve order) and the
/// trapezoidal area under unseen accuracy as a function of seen accuracy.
pub fn hm_and_auc(curve: &BiasCurve) -> (HmPoint, f64) {
    let mut best = HmPoint {
        bias: 0.0,
        seen: 0.0,
        unseen: 0.0,
        value: f64::NEG_INFINITY,
    };
    for p in &curve.points {
        let h = harmonic_mean(p.seen, p.unseen);
        if h > best.value {
            best = HmPoint {
                bias: p.bias,
                seen: p.seen,
                unseen: p.unseen,
                value: h,
            };
        }
    }
    if best.value == f64::NEG_INFINITY {
        best.value = 0.0;
    }
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.seen.clamp(0.0, 1.0), p.unseen.clamp(0.0, 1.0)))
        .collect();
    // equal seen accuracy: higher unseen first, which is the order along a
    // monotone sweep read from high bias to low
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let auc: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    (best, auc.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    /// Accuracies at bias 0.
    pub splits: SplitAccuracies,
    /// Accuracies at the best-HM bias.
    pub splits_at_hm: SplitAccuracies,
    pub hm: HmPoint,
    pub auc: f64,
    /// `[bias, seen, unseen]` triples.
    pub curve: Vec<[f64; 3]>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise") + "\n"
    }
}

/// Full protocol with the exact decision-boundary grid.
pub fn evaluate_scores(
    scores: &ScoreMatrix,
    labels: &[usize],
    space: &CompositionSpace,
    k: usize,
) -> Result<MetricsReport> {
    let grid = default_bias_grid(scores, space);
    let curve = bias_sweep(scores, labels, space, &grid, k)?;
    let (hm, auc) = hm_and_auc(&curve);
    Ok(MetricsReport {
        k,
        splits: split_accuracy(scores, labels, space, k)?,
        splits_at_hm: split_accuracy_at(scores, labels, space, k, hm.bias)?,
        hm,
        auc,
        curve: curve
            .points
            .iter()
            .map(|p| [p.bias, p.seen, p.unseen])
            .collect(),
    })
}

pub fn evaluate<P: PromptRows + ?Sized>(
    test: &[Sample],
    space: &CompositionSpace,
    enc: &FrozenEncoder,
    prompts: &P,
    k: usize,
) -> Result<MetricsReport> {
    let scores = score(test, space, enc, prompts)?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    evaluate_scores(&scores, &labels, space, k)
}
