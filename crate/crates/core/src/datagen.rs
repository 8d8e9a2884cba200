//! Seeded synthetic benchmark with known ground truth.
//!
//! Draw order (one ChaCha8 stream seeded with `config.seed`):
//!
//! 1. hidden seen prototypes: attributes, then objects, `d` normals each,
//!    normalised;
//! 2. isolation groups: a shuffle of the group list over the unseen
//!    attributes followed by the unseen objects;
//! 3. per unseen primitive, in that same order: anchor index (uniform over
//!    seen primitives of the same kind), then `d` normals for the orthogonal
//!    component;
//! 4. observable embeddings: `d` normals per primitive, attributes (seen then
//!    unseen) before objects;
//! 5. pairs: attribute permutation, object permutation, then a shuffle of the
//!    pairs not used for coverage;
//! 6. train samples for each seen pair in order, then test samples for every
//!    composition in space order, `d` normals each.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::IsolationGroup;
use crate::error::{Result, SpaError};
use crate::eval::{split_accuracy, ScoreMatrix, SplitAccuracies};
use crate::linalg::{axpy, dot, normalized, Matrix};
use crate::table::{load_table, EmbeddingTable};
use crate::vocab_space::{
    build_composition_space, read_json, samples_from_tsv, samples_to_tsv, CompositionSpace,
    Dataset, PairsFile, PrimitiveKind, Sample, VocabFile, Vocabulary,
};

pub const GENERATOR_VERSION: &str = "spa-datagen/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolationMix {
    /// Near, Moderate, Isolated.
    pub fractions: [f64; 3],
    pub targets: [f64; 3],
}

impl Default for IsolationMix {
    fn default() -> Self {
        Self {
            fractions: [0.5, 0.4, 0.1],
            targets: [0.78, 0.66, 0.41],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub d: usize,
    pub num_attrs: usize,
    pub num_unseen_attrs: usize,
    pub num_objs: usize,
    pub num_unseen_objs: usize,
    pub seen_pairs: usize,
    pub heldout_pairs: usize,
    pub train_per_comp: usize,
    pub test_per_comp: usize,
    /// Per-coordinate standard deviation of the noise on observable
    /// primitive embeddings.
    pub sigma_primitive: f64,
    /// Per-coordinate standard deviation of the noise on sample visuals.
    pub sigma_visual: f64,
    pub isolation: IsolationMix,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        zappos_shape()
    }
}

pub fn zappos_shape() -> GenConfig {
    GenConfig {
        d: 32,
        num_attrs: 12,
        num_unseen_attrs: 4,
        num_objs: 9,
        num_unseen_objs: 3,
        seen_pairs: 49,
        heldout_pairs: 9,
        train_per_comp: 12,
        test_per_comp: 8,
        sigma_primitive: 0.05,
        sigma_visual: 0.30,
        isolation: IsolationMix::default(),
        seed: 0,
    }
}

pub fn mitstates_shape() -> GenConfig {
    GenConfig {
        d: 64,
        num_attrs: 84,
        num_unseen_attrs: 31,
        num_objs: 182,
        num_unseen_objs: 63,
        seen_pairs: 955,
        heldout_pairs: 130,
        train_per_comp: 4,
        test_per_comp: 1,
        ..zappos_shape()
    }
}

pub const PRESETS: [&str; 2] = ["zappos_shape", "mitstates_shape"];

pub fn preset(name: &str) -> Result<GenConfig> {
    match name {
        "zappos_shape" => Ok(zappos_shape()),
        "mitstates_shape" => Ok(mitstates_shape()),
        other => Err(SpaError::UnknownPreset(other.to_string())),
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpaError::InfeasibleConfig(m));
        if self.d == 0 || self.num_attrs == 0 || self.num_objs == 0 {
            return bad("d and the seen vocabulary sizes must be positive".into());
        }
        let total = self.num_attrs * self.num_objs;
        if self.seen_pairs == 0 || self.seen_pairs + self.heldout_pairs > total {
            return bad(format!(
                "{} seen + {} held-out pairs do not fit in {total} seen compositions",
                self.seen_pairs, self.heldout_pairs
            ));
        }
        for s in [self.sigma_primitive, self.sigma_visual] {
            if !(s >= 0.0) || !s.is_finite() {
                return bad(format!("noise scale {s} must be finite and non-negative"));
            }
        }
        let mix = &self.isolation;
        if mix.fractions.iter().any(|f| !(*f >= 0.0))
            || (mix.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("isolation fractions must be non-negative and sum to 1".into());
        }
        let t = mix.targets;
        if t.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) || !(t[0] > t[1] && t[1] > t[2]) {
            return bad(
                "isolation targets must lie in (0, 1] and decrease Near to Isolated".into(),
            );
        }
        Ok(())
    }
}

/// Ground-truth tables. Only the oracle and the tests read these; the
/// training, adaptation and evaluation entry points take
/// [`ObservableEmbeddings`] instead.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenPrototypes {
    attr: EmbeddingTable,
    obj: EmbeddingTable,
    comp: EmbeddingTable,
}

impl HiddenPrototypes {
    pub fn attr(&self) -> &EmbeddingTable {
        &self.attr
    }
    pub fn obj(&self) -> &EmbeddingTable {
        &self.obj
    }
    pub fn comp(&self) -> &EmbeddingTable {
        &self.comp
    }
    pub fn get(&self, kind: PrimitiveKind) -> &EmbeddingTable {
        match kind {
            PrimitiveKind::Attribute => &self.attr,
            PrimitiveKind::Object => &self.obj,
        }
    }
}

/// Noisy primitive embeddings for every primitive (seen rows first), the
/// source of initial prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableEmbeddings {
    pub attr: EmbeddingTable,
    pub obj: EmbeddingTable,
}

impl ObservableEmbeddings {
    pub fn get(&self, kind: PrimitiveKind) -> &EmbeddingTable {
        match kind {
            PrimitiveKind::Attribute => &self.attr,
            PrimitiveKind::Object => &self.obj,
        }
    }

    fn slice(&self, kind: PrimitiveKind, from: usize, to: usize) -> Matrix {
        let m = self.get(kind).matrix();
        Matrix::from_vec(
            to - from,
            m.cols(),
            m.as_slice()[from * m.cols()..to * m.cols()].to_vec(),
        )
    }

    pub fn seen_rows(&self, kind: PrimitiveKind, num_seen: usize) -> Matrix {
        self.slice(kind, 0, num_seen)
    }

    pub fn unseen_rows(&self, kind: PrimitiveKind, num_seen: usize) -> Matrix {
        self.slice(kind, num_seen, self.get(kind).len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenAssignment {
    pub name: String,
    pub kind: PrimitiveKind,
    pub group: IsolationGroup,
    pub anchor: String,
    pub target: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedBenchmark {
    pub config: GenConfig,
    pub space: CompositionSpace,
    pub dataset: Dataset,
    pub observable: ObservableEmbeddings,
    pub hidden: HiddenPrototypes,
    pub assignments: Vec<UnseenAssignment>,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        if let Some(v) = normalized(&gaussian(rng, d)) {
            return v;
        }
    }
}

/// Unit vector at cosine exactly `s` (up to rounding) from the unit `anchor`.
fn place_near(anchor: &[f64], s: f64, noise: &[f64]) -> Vec<f64> {
    let mut ortho = noise.to_vec();
    axpy(-dot(noise, anchor), anchor, &mut ortho);
    let mut out: Vec<f64> = anchor.iter().map(|a| s * a).collect();
    if s < 1.0 {
        let dir = normalized(&ortho).unwrap_or_else(|| vec![0.0; anchor.len()]);
        axpy((1.0 - s * s).sqrt(), &dir, &mut out);
    }
    out
}

fn noisy_unit(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = gaussian(rng, base.len());
    if sigma == 0.0 {
        return base.to_vec();
    }
    let mut v = base.to_vec();
    axpy(sigma, &g, &mut v);
    normalized(&v).unwrap_or_else(|| base.to_vec())
}

/// Largest-remainder split of `n` items by `fractions`.
fn group_sizes(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

pub fn generate(config: &GenConfig) -> Result<GeneratedBenchmark> {
    config.validate()?;
    let d = config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let attr_vocab = Vocabulary::new(
        PrimitiveKind::Attribute,
        names("a", config.num_attrs),
        names("ua", config.num_unseen_attrs),
    )?;
    let obj_vocab = Vocabulary::new(
        PrimitiveKind::Object,
        names("o", config.num_objs),
        names("uo", config.num_unseen_objs),
    )?;

    let mut hidden_attr: Vec<Vec<f64>> = (0..config.num_attrs)
        .map(|_| unit_gaussian(&mut rng, d))
        .collect();
    let mut hidden_obj: Vec<Vec<f64>> = (0..config.num_objs)
        .map(|_| unit_gaussian(&mut rng, d))
        .collect();

    let n_unseen = config.num_unseen_attrs + config.num_unseen_objs;
    let sizes = group_sizes(n_unseen, &config.isolation.fractions);
    let mut groups: Vec<IsolationGroup> = IsolationGroup::ALL
        .iter()
        .zip(sizes)
        .flat_map(|(g, n)| std::iter::repeat_n(*g, n))
        .collect();
    groups.shuffle(&mut rng);

    let mut assignments = Vec::with_capacity(n_unseen);
    for (u, group) in groups.iter().enumerate() {
        let (kind, vocab, seen_protos) = if u < config.num_unseen_attrs {
            (PrimitiveKind::Attribute, &attr_vocab, &hidden_attr)
        } else {
            (PrimitiveKind::Object, &obj_vocab, &hidden_obj)
        };
        let local = if kind == PrimitiveKind::Attribute {
            u
        } else {
            u - config.num_unseen_attrs
        };
        let anchor = rng.random_range(0..vocab.num_seen());
        let target = config.isolation.targets[*group as usize];
        let noise = gaussian(&mut rng, d);
        let proto = place_near(&seen_protos[anchor], target, &noise);
        assignments.push(UnseenAssignment {
            name: vocab.unseen[local].clone(),
            kind,
            group: *group,
            anchor: vocab.seen[anchor].clone(),
            target,
        });
        match kind {
            PrimitiveKind::Attribute => hidden_attr.push(proto),
            PrimitiveKind::Object => hidden_obj.push(proto),
        }
    }

    let observe = |protos: &[Vec<f64>], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        protos
            .iter()
            .map(|p| noisy_unit(p, config.sigma_primitive, rng))
            .collect()
    };
    let obs_attr = observe(&hidden_attr, &mut rng);
    let obs_obj = observe(&hidden_obj, &mut rng);

    let (na, no) = (config.num_attrs, config.num_objs);
    let mut pa: Vec<usize> = (0..na).collect();
    let mut po: Vec<usize> = (0..no).collect();
    pa.shuffle(&mut rng);
    po.shuffle(&mut rng);
    let coverage: Vec<(usize, usize)> = (0..na.max(no)).map(|i| (pa[i % na], po[i % no])).collect();
    let mut rest: Vec<(usize, usize)> = (0..na)
        .flat_map(|a| (0..no).map(move |o| (a, o)))
        .filter(|p| !coverage.contains(p))
        .collect();
    rest.shuffle(&mut rng);
    let mut ordered = coverage;
    ordered.extend(rest);
    let to_names = |ps: &[(usize, usize)]| -> Vec<(String, String)> {
        ps.iter()
            .map(|&(a, o)| (attr_vocab.seen[a].clone(), obj_vocab.seen[o].clone()))
            .collect()
    };
    let seen_pairs = to_names(&ordered[..config.seen_pairs]);
    let heldout_pairs =
        to_names(&ordered[config.seen_pairs..config.seen_pairs + config.heldout_pairs]);
    let space = build_composition_space(&attr_vocab, &obj_vocab, &seen_pairs, &heldout_pairs)?;

    let comp: Vec<Vec<f64>> = space
        .labels()
        .iter()
        .map(|l| {
            let mut v = hidden_attr[l.attribute].clone();
            axpy(1.0, &hidden_obj[l.object], &mut v);
            normalized(&v).unwrap_or_else(|| hidden_attr[l.attribute].clone())
        })
        .collect();

    let draw = |label: usize, n: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Sample>| {
        for _ in 0..n {
            out.push(Sample {
                visual: noisy_unit(&comp[label], config.sigma_visual, rng),
                label,
            });
        }
    };
    let mut train = Vec::new();
    for label in space.seen_positions() {
        draw(label, config.train_per_comp, &mut rng, &mut train);
    }
    let mut test = Vec::new();
    for label in 0..space.len() {
        draw(label, config.test_per_comp, &mut rng, &mut test);
    }
    let dataset = Dataset::new(train, test, d, &space)?;

    let table = |names: Vec<String>, rows: &[Vec<f64>]| {
        EmbeddingTable::new(names, Matrix::from_rows(rows, d))
    };
    let comp_names = (0..space.len())
        .map(|i| {
            let (a, o) = space.pair_names(i);
            format!("{a}+{o}")
        })
        .collect();
    Ok(GeneratedBenchmark {
        config: config.clone(),
        observable: ObservableEmbeddings {
            attr: table(attr_vocab.all_names(), &obs_attr)?,
            obj: table(obj_vocab.all_names(), &obs_obj)?,
        },
        hidden: HiddenPrototypes {
            attr: table(attr_vocab.all_names(), &hidden_attr)?,
            obj: table(obj_vocab.all_names(), &hidden_obj)?,
            comp: table(comp_names, &comp)?,
        },
        space,
        dataset,
        assignments,
    })
}

/// Top-1 accuracy per split when test visuals are scored against the hidden
/// composition prototypes.
pub fn oracle_best_accuracy(bench: &GeneratedBenchmark) -> Result<SplitAccuracies> {
    oracle_accuracy(&bench.hidden, &bench.dataset.test, &bench.space)
}

pub fn oracle_accuracy(
    hidden: &HiddenPrototypes,
    test: &[Sample],
    space: &CompositionSpace,
) -> Result<SplitAccuracies> {
    let protos = hidden.comp().matrix();
    let mut values = Matrix::zeros(test.len(), protos.rows());
    for (i, s) in test.iter().enumerate() {
        for (j, p) in protos.iter_rows().enumerate() {
            values.set(i, j, dot(&s.visual, p));
        }
    }
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    split_accuracy(&ScoreMatrix { values }, &labels, space, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub generator_version: String,
    pub config: GenConfig,
    pub isolation: Vec<UnseenAssignment>,
    pub checksums: BTreeMap<String, String>,
}

pub const BENCHMARK_FILES: [&str; 9] = [
    "vocab.json",
    "space.json",
    "train.tsv",
    "test.tsv",
    "observable_attr.tsv",
    "observable_obj.tsv",
    "oracle/hidden_attr.tsv",
    "oracle/hidden_obj.tsv",
    "oracle/hidden_comp.tsv",
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| SpaError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| SpaError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s.into_bytes()
}

/// Writes the benchmark directory and returns its manifest.
pub fn write_benchmark(bench: &GeneratedBenchmark, dir: &Path) -> Result<BenchmarkManifest> {
    let d = bench.config.d;
    let contents: [Vec<u8>; 9] = [
        pretty(&bench.space.vocab_file()),
        pretty(&bench.space.pairs_file()),
        samples_to_tsv(&bench.dataset.train, &bench.space, d).into_bytes(),
        samples_to_tsv(&bench.dataset.test, &bench.space, d).into_bytes(),
        bench.observable.attr.to_tsv().into_bytes(),
        bench.observable.obj.to_tsv().into_bytes(),
        bench.hidden.attr.to_tsv().into_bytes(),
        bench.hidden.obj.to_tsv().into_bytes(),
        bench.hidden.comp.to_tsv().into_bytes(),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in BENCHMARK_FILES.iter().zip(&contents) {
        write_file(&dir.join(name), bytes)?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = BenchmarkManifest {
        generator_version: GENERATOR_VERSION.to_string(),
        config: bench.config.clone(),
        isolation: bench.assignments.clone(),
        checksums,
    };
    write_file(&dir.join("manifest.json"), &pretty(&manifest))?;
    Ok(manifest)
}

/// The observable part of a benchmark directory.
#[derive(Debug, Clone)]
pub struct LoadedBenchmark {
    pub space: CompositionSpace,
    pub dataset: Dataset,
    pub observable: ObservableEmbeddings,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SpaError::io(path, e))
}

pub fn load_benchmark(dir: &Path) -> Result<LoadedBenchmark> {
    let vocab: VocabFile = read_json(&dir.join("vocab.json"))?;
    let pairs: PairsFile = read_json(&dir.join("space.json"))?;
    let space = CompositionSpace::from_files(&vocab, &pairs)?;
    let (train, d) = samples_from_tsv(&read_text(&dir.join("train.tsv"))?, &space)?;
    let (test, d_test) = samples_from_tsv(&read_text(&dir.join("test.tsv"))?, &space)?;
    if d != d_test {
        return Err(SpaError::DimensionMismatch(format!(
            "train d={d}, test d={d_test}"
        )));
    }
    let observable = ObservableEmbeddings {
        attr: load_table(&dir.join("observable_attr.tsv"))?,
        obj: load_table(&dir.join("observable_obj.tsv"))?,
    };
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        if observable.get(kind).names() != space.vocabulary(kind).all_names().as_slice() {
            return Err(SpaError::InvalidVocabulary(format!(
                "observable_{}.tsv rows do not match vocab.json",
                kind.as_str()
            )));
        }
    }
    Ok(LoadedBenchmark {
        dataset: Dataset::new(train, test, d, &space)?,
        space,
        observable,
    })
}

pub fn load_hidden(dir: &Path) -> Result<HiddenPrototypes> {
    Ok(HiddenPrototypes {
        attr: load_table(&dir.join("oracle/hidden_attr.tsv"))?,
        obj: load_table(&dir.join("oracle/hidden_obj.tsv"))?,
        comp: load_table(&dir.join("oracle/hidden_comp.tsv"))?,
    })
}

pub fn load_manifest(dir: &Path) -> Result<BenchmarkManifest> {
    read_json(&dir.join("manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab_space::Split;

    fn small() -> GenConfig {
        GenConfig {
            d: 16,
            train_per_comp: 3,
            test_per_comp: 2,
            ..zappos_shape()
        }
    }

    #[test]
    fn presets_copy_vocabulary_counts() {
        let z = preset("zappos_shape").unwrap();
        assert_eq!(
            (
                z.num_attrs,
                z.num_unseen_attrs,
                z.num_objs,
                z.num_unseen_objs,
                z.seen_pairs
            ),
            (12, 4, 9, 3, 49)
        );
        let m = preset("mitstates_shape").unwrap();
        assert_eq!(
            (
                m.num_attrs,
                m.num_unseen_attrs,
                m.num_objs,
                m.num_unseen_objs,
                m.seen_pairs
            ),
            (84, 31, 182, 63, 955)
        );
        assert!(matches!(preset("cgqa"), Err(SpaError::UnknownPreset(_))));
        assert_eq!(z.isolation.targets, [0.78, 0.66, 0.41]);
    }

    #[test]
    fn infeasible_counts_are_rejected() {
        let c = GenConfig {
            seen_pairs: 100,
            heldout_pairs: 9,
            ..zappos_shape()
        };
        assert!(matches!(generate(&c), Err(SpaError::InfeasibleConfig(_))));
        let c = GenConfig {
            isolation: IsolationMix {
                fractions: [0.5, 0.5, 0.5],
                ..Default::default()
            },
            ..zappos_shape()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn space_has_expected_shape() {
        let b = generate(&small()).unwrap();
        assert_eq!(b.space.split_counts(), [49, 9, 36, 36, 12]);
        assert_eq!(b.dataset.train.len(), 49 * 3);
        assert_eq!(b.dataset.test.len(), b.space.len() * 2);
        // every seen primitive appears in some training pair
        let mut attrs = vec![false; 12];
        let mut objs = vec![false; 9];
        for p in b.space.seen_positions() {
            let l = b.space.label(p);
            attrs[l.attribute] = true;
            objs[l.object] = true;
        }
        assert!(attrs.iter().chain(&objs).all(|x| *x));
    }

    #[test]
    fn groups_follow_largest_remainder() {
        assert_eq!(group_sizes(7, &[0.5, 0.4, 0.1]), [3, 3, 1]);
        assert_eq!(group_sizes(10, &[0.5, 0.4, 0.1]), [5, 4, 1]);
        let b = generate(&small()).unwrap();
        let count = |g| b.assignments.iter().filter(|a| a.group == g).count();
        assert_eq!(
            [
                count(IsolationGroup::Near),
                count(IsolationGroup::Moderate),
                count(IsolationGroup::Isolated)
            ],
            [3, 3, 1]
        );
    }

    #[test]
    fn constructed_similarity_hits_targets() {
        for seed in 0..3 {
            let b = generate(&GenConfig { seed, ..small() }).unwrap();
            for a in &b.assignments {
                let t = b.hidden.get(a.kind);
                let cos = dot(
                    t.row(t.position(&a.name).unwrap()),
                    t.row(t.position(&a.anchor).unwrap()),
                );
                assert!((cos - a.target).abs() < 0.02, "{} {cos}", a.name);
            }
        }
    }

    #[test]
    fn unit_target_clones_the_anchor() {
        let c = GenConfig {
            isolation: IsolationMix {
                fractions: [1.0, 0.0, 0.0],
                targets: [1.0, 0.66, 0.41],
            },
            ..small()
        };
        let b = generate(&c).unwrap();
        for a in &b.assignments {
            let t = b.hidden.get(a.kind);
            assert_eq!(
                t.row(t.position(&a.name).unwrap()),
                t.row(t.position(&a.anchor).unwrap())
            );
        }
    }

    #[test]
    fn noiseless_samples_equal_their_prototype() {
        let c = GenConfig {
            sigma_primitive: 0.0,
            sigma_visual: 0.0,
            ..small()
        };
        let b = generate(&c).unwrap();
        for s in b.dataset.train.iter().chain(&b.dataset.test) {
            assert_eq!(s.visual.as_slice(), b.hidden.comp().row(s.label));
        }
        let acc = oracle_best_accuracy(&b).unwrap();
        for split in Split::ALL {
            assert_eq!(acc.get(split), Some(1.0));
        }
    }

    #[test]
    fn oracle_ceiling_degrades_with_noise() {
        let overall = |sigma| {
            let b = generate(&GenConfig {
                sigma_visual: sigma,
                ..small()
            })
            .unwrap();
            let acc = oracle_best_accuracy(&b).unwrap();
            // equal samples per composition, so split accuracies weight by label count
            Split::ALL
                .iter()
                .map(|s| acc.get(*s).unwrap() * b.space.count(*s) as f64)
                .sum::<f64>()
                / b.space.len() as f64
        };
        let (a0, a1, a5) = (overall(0.0), overall(0.1), overall(0.5));
        assert!(a0 >= a1 && a1 >= a5, "{a0} {a1} {a5}");
        let chance = 1.0 / 142.0;
        let noisy = overall(4.0);
        assert!(noisy < 3.0 * chance, "{noisy}");
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let b1 = generate(&small()).unwrap();
        let b2 = generate(&small()).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = write_benchmark(&b1, d1.path()).unwrap();
        let m2 = write_benchmark(&b2, d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(
            fs::read(d1.path().join("manifest.json")).unwrap(),
            fs::read(d2.path().join("manifest.json")).unwrap()
        );
        let other = generate(&GenConfig { seed: 1, ..small() }).unwrap();
        let d3 = tempfile::tempdir().unwrap();
        assert_ne!(
            write_benchmark(&other, d3.path()).unwrap().checksums,
            m1.checksums
        );
    }

    #[test]
    fn written_benchmark_loads_back() {
        let b = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_benchmark(&b, dir.path()).unwrap();
        let l = load_benchmark(dir.path()).unwrap();
        assert_eq!(l.space.labels(), b.space.labels());
        assert_eq!(l.dataset.test.len(), b.dataset.test.len());
        assert_eq!(l.observable.attr.names(), b.observable.attr.names());
        let h = load_hidden(dir.path()).unwrap();
        assert_eq!(h.comp().len(), b.space.len());
        assert_eq!(load_manifest(dir.path()).unwrap().isolation.len(), 7);
    }
}
