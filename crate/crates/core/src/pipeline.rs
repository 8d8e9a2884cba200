//! Train, adapt, evaluate and diagnose over a benchmark in one call each.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptInput, AdapterParams, AdapterRegistry};
use crate::datagen::{GeneratedBenchmark, LoadedBenchmark, ObservableEmbeddings};
use crate::diagnostics::{
    composition_isolation_scores, isolation_partition, neighbor_consistency,
    semantic_visual_alignment, AlignmentStats, ConsistencyStats, GroupSummary, IsolationGroup,
    PValueMethod,
};
use crate::encoder::{context_from_seed, FrozenEncoder, PromptState};
use crate::error::{Result, SpaError};
use crate::eval::{evaluate, MetricsReport};
use crate::linalg::{axpy, Matrix};
use crate::sas::{
    materialize_full_prompt_state, u2s_similarity, CalibratedPrompts, ExtendedPrompts,
};
use crate::table::EmbeddingTable;
use crate::training::{train, TrainConfig, TrainReport};
use crate::vocab_space::{CompositionSpace, Dataset, PrimitiveKind};

/// Borrowed view over the observable half of a benchmark.
#[derive(Clone, Copy)]
pub struct BenchmarkRef<'a> {
    pub space: &'a CompositionSpace,
    pub dataset: &'a Dataset,
    pub observable: &'a ObservableEmbeddings,
}

impl GeneratedBenchmark {
    pub fn view(&self) -> BenchmarkRef<'_> {
        BenchmarkRef {
            space: &self.space,
            dataset: &self.dataset,
            observable: &self.observable,
        }
    }
}

impl LoadedBenchmark {
    pub fn view(&self) -> BenchmarkRef<'_> {
        BenchmarkRef {
            space: &self.space,
            dataset: &self.dataset,
            observable: &self.observable,
        }
    }
}

/// Encoder and untrained prompt state: context from `seed`, seen tokens from
/// the observable embeddings.
pub fn initial_state(
    bench: BenchmarkRef<'_>,
    seed: u64,
    m: usize,
) -> Result<(FrozenEncoder, PromptState)> {
    let d = bench.dataset.d;
    let enc = FrozenEncoder::from_seed(seed, d);
    let seen = |kind| {
        bench
            .observable
            .seen_rows(kind, bench.space.vocabulary(kind).num_seen())
    };
    let state = PromptState::new(
        context_from_seed(seed, m, d),
        seen(PrimitiveKind::Attribute),
        seen(PrimitiveKind::Object),
    )?;
    Ok((enc, state))
}

pub fn unseen_init(bench: BenchmarkRef<'_>, kind: PrimitiveKind) -> Matrix {
    bench
        .observable
        .unseen_rows(kind, bench.space.vocabulary(kind).num_seen())
}

pub fn train_prompts(
    bench: BenchmarkRef<'_>,
    config: &TrainConfig,
) -> Result<(FrozenEncoder, PromptState, TrainReport)> {
    let (enc, mut state) = initial_state(bench, config.seed, config.m)?;
    let report = train(config, bench.dataset, bench.space, &enc, &mut state)?;
    Ok((enc, state, report))
}

pub fn adapt_prompts(
    bench: BenchmarkRef<'_>,
    enc: &FrozenEncoder,
    state: &PromptState,
    adapter: &str,
    params: &AdapterParams,
) -> Result<CalibratedPrompts> {
    let strategy = AdapterRegistry::default().build(adapter, params)?;
    let ua = unseen_init(bench, PrimitiveKind::Attribute);
    let uo = unseen_init(bench, PrimitiveKind::Object);
    strategy.adapt(&AdaptInput {
        enc,
        state,
        space: bench.space,
        unseen_attr_init: &ua,
        unseen_obj_init: &uo,
    })
}

pub fn evaluate_prompts(
    bench: BenchmarkRef<'_>,
    enc: &FrozenEncoder,
    state: &PromptState,
    calibrated: &CalibratedPrompts,
    k: usize,
) -> Result<(ExtendedPrompts, MetricsReport)> {
    let prompts = materialize_full_prompt_state(state, calibrated, bench.space)?;
    let metrics = evaluate(&bench.dataset.test, bench.space, enc, &prompts, k)?;
    Ok((prompts, metrics))
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub adapter: String,
    pub adapter_params: AdapterParams,
    pub eval_k: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            adapter: "sas".into(),
            adapter_params: AdapterParams::default(),
            eval_k: 1,
        }
    }
}

impl RunSpec {
    /// λ = 0 and no adaptation.
    pub fn baseline(train: TrainConfig) -> Self {
        Self {
            train: TrainConfig {
                lambda: 0.0,
                ..train
            },
            adapter: "none".into(),
            ..Default::default()
        }
    }
}

pub struct RunOutcome {
    pub encoder: FrozenEncoder,
    pub state: PromptState,
    pub report: TrainReport,
    pub calibrated: CalibratedPrompts,
    pub metrics: MetricsReport,
}

pub fn run(bench: BenchmarkRef<'_>, spec: &RunSpec) -> Result<RunOutcome> {
    let (encoder, state, report) = train_prompts(bench, &spec.train)?;
    let calibrated = adapt_prompts(bench, &encoder, &state, &spec.adapter, &spec.adapter_params)?;
    let (_, metrics) = evaluate_prompts(bench, &encoder, &state, &calibrated, spec.eval_k)?;
    Ok(RunOutcome {
        encoder,
        state,
        report,
        calibrated,
        metrics,
    })
}

/// Mean training visual of each seen primitive, over every training sample
/// whose composition contains it. Primitives without samples are skipped.
pub fn primitive_visual_prototypes(
    bench: BenchmarkRef<'_>,
    kind: PrimitiveKind,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let vocab = bench.space.vocabulary(kind);
    let d = bench.dataset.d;
    let mut sums = vec![vec![0.0; d]; vocab.num_seen()];
    let mut counts = vec![0usize; vocab.num_seen()];
    for s in &bench.dataset.train {
        let l = bench.space.label(s.label);
        let p = match kind {
            PrimitiveKind::Attribute => l.attribute,
            PrimitiveKind::Object => l.object,
        };
        axpy(1.0, &s.visual, &mut sums[p]);
        counts[p] += 1;
    }
    let keep: Vec<usize> = (0..vocab.num_seen()).filter(|&p| counts[p] > 0).collect();
    let names: Vec<String> = keep.iter().map(|&p| vocab.seen[p].clone()).collect();
    let visual: Vec<Vec<f64>> = keep
        .iter()
        .map(|&p| sums[p].iter().map(|v| v / counts[p] as f64).collect())
        .collect();
    let obs = bench.observable.get(kind);
    let semantic: Vec<Vec<f64>> = keep.iter().map(|&p| obs.row(p).to_vec()).collect();
    Ok((
        EmbeddingTable::new(names.clone(), Matrix::from_rows(&semantic, d))?,
        EmbeddingTable::new(names, Matrix::from_rows(&visual, d))?,
    ))
}

fn stack(a: &EmbeddingTable, b: &EmbeddingTable) -> Result<EmbeddingTable> {
    let mut names = a.names().to_vec();
    names.extend_from_slice(b.names());
    EmbeddingTable::new(names, a.matrix().vstack(b.matrix()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionIsolation {
    pub attribute: String,
    pub object: String,
    pub similarity: f64,
    pub group: IsolationGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub pearson: f64,
    pub spearman: f64,
    pub p_value: f64,
    pub p_value_method: String,
    pub n_pairs: usize,
    pub k: usize,
    pub consistency: ConsistencyStats,
    pub isolation: Vec<GroupSummary>,
    pub isolation_thresholds: (f64, f64),
    pub compositions: Vec<CompositionIsolation>,
}

impl DiagnosticsReport {
    pub fn alignment(&self) -> AlignmentStats {
        AlignmentStats {
            pearson: self.pearson,
            spearman: self.spearman,
            p_value: self.p_value,
            n: self.n_pairs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiagnoseSpec {
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub quantiles: (f64, f64),
}

impl Default for DiagnoseSpec {
    fn default() -> Self {
        Self {
            k: 5,
            trials: 100,
            seed: 0,
            quantiles: (0.5, 0.1),
        }
    }
}

/// Alignment between the observable primitive embeddings and the mean
/// training visuals of each seen primitive, neighbour consistency over the
/// same rows, and the isolation partition of compositions with an unseen
/// primitive.
pub fn diagnose(
    bench: BenchmarkRef<'_>,
    enc: &FrozenEncoder,
    state: &PromptState,
    spec: &DiagnoseSpec,
    method: &dyn PValueMethod,
) -> Result<DiagnosticsReport> {
    let (sem_a, vis_a) = primitive_visual_prototypes(bench, PrimitiveKind::Attribute)?;
    let (sem_o, vis_o) = primitive_visual_prototypes(bench, PrimitiveKind::Object)?;
    let semantic = stack(&sem_a, &sem_o)?;
    let visual = stack(&vis_a, &vis_o)?;
    let alignment = semantic_visual_alignment(&semantic, &visual, method)?;
    let consistency = neighbor_consistency(&semantic, &visual, spec.k, spec.trials, spec.seed)?;

    let au = u2s_similarity(
        enc,
        state,
        bench.space.attributes(),
        &unseen_init(bench, PrimitiveKind::Attribute),
    )?;
    let ou = u2s_similarity(
        enc,
        state,
        bench.space.objects(),
        &unseen_init(bench, PrimitiveKind::Object),
    )?;
    let (positions, scores) = composition_isolation_scores(bench.space, &au, &ou);
    if positions.is_empty() {
        return Err(SpaError::InvalidVocabulary(
            "no unseen primitives to partition".into(),
        ));
    }
    let partition = isolation_partition(&scores, spec.quantiles)?;
    let compositions = positions
        .iter()
        .zip(&scores)
        .zip(&partition.tags)
        .map(|((&p, &similarity), &group)| {
            let (a, o) = bench.space.pair_names(p);
            CompositionIsolation {
                attribute: a.to_string(),
                object: o.to_string(),
                similarity,
                group,
            }
        })
        .collect();
    Ok(DiagnosticsReport {
        pearson: alignment.pearson,
        spearman: alignment.spearman,
        p_value: alignment.p_value,
        p_value_method: method.name().to_string(),
        n_pairs: alignment.n,
        k: spec.k,
        consistency,
        isolation: partition.groups,
        isolation_thresholds: partition.thresholds,
        compositions,
    })
}
