//! Primitive vocabularies, the composition space with its five split tags,
//! and the sample containers that reference it.
//!
//! Row order everywhere downstream is declaration order: seen primitives
//! first, then unseen ones. A primitive's position in that order is its
//! global index.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaError};
use crate::linalg::norm;
use crate::table::{format_value, parse_value, validate_name};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Attribute,
    Object,
}

impl PrimitiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrimitiveKind::Attribute => "attr",
            PrimitiveKind::Object => "obj",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub kind: PrimitiveKind,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl Vocabulary {
    pub fn new(kind: PrimitiveKind, seen: Vec<String>, unseen: Vec<String>) -> Result<Self> {
        let mut names = HashSet::new();
        for n in seen.iter().chain(&unseen) {
            validate_name(n)?;
            if !names.insert(n.as_str()) {
                return Err(SpaError::InvalidVocabulary(format!(
                    "{} name {n:?} is listed twice",
                    kind.as_str()
                )));
            }
        }
        Ok(Self { kind, seen, unseen })
    }

    pub fn num_seen(&self) -> usize {
        self.seen.len()
    }

    pub fn num_unseen(&self) -> usize {
        self.unseen.len()
    }

    pub fn len(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_seen(&self, index: usize) -> bool {
        index < self.seen.len()
    }

    pub fn name(&self, index: usize) -> &str {
        if index < self.seen.len() {
            &self.seen[index]
        } else {
            &self.unseen[index - self.seen.len()]
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.seen.iter().position(|n| n == name).or_else(|| {
            self.unseen
                .iter()
                .position(|n| n == name)
                .map(|i| i + self.seen.len())
        })
    }

    /// All names in global index order.
    pub fn all_names(&self) -> Vec<String> {
        self.seen.iter().chain(&self.unseen).cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "AO")]
    AO,
    #[serde(rename = "AO_star")]
    AOHeldout,
    #[serde(rename = "AstarO")]
    AstarO,
    #[serde(rename = "AOstar")]
    AOstar,
    #[serde(rename = "AstarOstar")]
    AstarOstar,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::AO,
        Split::AOHeldout,
        Split::AstarO,
        Split::AOstar,
        Split::AstarOstar,
    ];

    pub fn is_seen(self) -> bool {
        self == Split::AO
    }

    pub fn key(self) -> &'static str {
        match self {
            Split::AO => "AO",
            Split::AOHeldout => "AO_star",
            Split::AstarO => "AstarO",
            Split::AOstar => "AOstar",
            Split::AstarOstar => "AstarOstar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionLabel {
    pub attribute: usize,
    pub object: usize,
    pub split: Split,
}

/// Every evaluated (attribute, object) pair with its split tag.
#[derive(Debug, Clone)]
pub struct CompositionSpace {
    attrs: Vocabulary,
    objs: Vocabulary,
    labels: Vec<CompositionLabel>,
    index: HashMap<(usize, usize), usize>,
    seen_pairs: Vec<(String, String)>,
    heldout_pairs: Vec<(String, String)>,
}

/// On-disk form of the seen / held-out pair lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsFile {
    pub seen_pairs: Vec<(String, String)>,
    pub heldout_pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabListing {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

/// On-disk form of both vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub attributes: VocabListing,
    pub objects: VocabListing,
}

pub fn build_composition_space(
    attrs: &Vocabulary,
    objs: &Vocabulary,
    seen_pairs: &[(String, String)],
    heldout_pairs: &[(String, String)],
) -> Result<CompositionSpace> {
    if attrs.kind != PrimitiveKind::Attribute || objs.kind != PrimitiveKind::Object {
        return Err(SpaError::InvalidVocabulary(
            "expected an attribute vocabulary and an object vocabulary".into(),
        ));
    }
    let resolve_seen = |(a, o): &(String, String)| -> Result<(usize, usize)> {
        let ai = attrs
            .seen
            .iter()
            .position(|n| n == a)
            .ok_or_else(|| SpaError::UnknownPrimitive(a.clone()))?;
        let oi = objs
            .seen
            .iter()
            .position(|n| n == o)
            .ok_or_else(|| SpaError::UnknownPrimitive(o.clone()))?;
        Ok((ai, oi))
    };

    let mut labels = Vec::new();
    let mut index = HashMap::new();
    let mut push = |a: usize, o: usize, split: Split, labels: &mut Vec<CompositionLabel>| -> bool {
        if index.contains_key(&(a, o)) {
            return false;
        }
        index.insert((a, o), labels.len());
        labels.push(CompositionLabel {
            attribute: a,
            object: o,
            split,
        });
        true
    };

    for p in seen_pairs {
        let (a, o) = resolve_seen(p)?;
        if !push(a, o, Split::AO, &mut labels) {
            return Err(SpaError::DuplicatePair(p.0.clone(), p.1.clone()));
        }
    }
    for p in heldout_pairs {
        let (a, o) = resolve_seen(p)?;
        if !push(a, o, Split::AOHeldout, &mut labels) {
            let is_seen = seen_pairs.iter().any(|s| s == p);
            return Err(if is_seen {
                SpaError::OverlappingPairs(p.0.clone(), p.1.clone())
            } else {
                SpaError::DuplicatePair(p.0.clone(), p.1.clone())
            });
        }
    }
    let (na, nas) = (attrs.num_seen(), attrs.num_unseen());
    let (no, nos) = (objs.num_seen(), objs.num_unseen());
    for a in na..na + nas {
        for o in 0..no {
            push(a, o, Split::AstarO, &mut labels);
        }
    }
    for a in 0..na {
        for o in no..no + nos {
            push(a, o, Split::AOstar, &mut labels);
        }
    }
    for a in na..na + nas {
        for o in no..no + nos {
            push(a, o, Split::AstarOstar, &mut labels);
        }
    }

    Ok(CompositionSpace {
        attrs: attrs.clone(),
        objs: objs.clone(),
        labels,
        index,
        seen_pairs: seen_pairs.to_vec(),
        heldout_pairs: heldout_pairs.to_vec(),
    })
}

impl CompositionSpace {
    pub fn attributes(&self) -> &Vocabulary {
        &self.attrs
    }

    pub fn objects(&self) -> &Vocabulary {
        &self.objs
    }

    pub fn vocabulary(&self, kind: PrimitiveKind) -> &Vocabulary {
        match kind {
            PrimitiveKind::Attribute => &self.attrs,
            PrimitiveKind::Object => &self.objs,
        }
    }

    pub fn labels(&self) -> &[CompositionLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> &CompositionLabel {
        &self.labels[i]
    }

    pub fn position(&self, attribute: usize, object: usize) -> Option<usize> {
        self.index.get(&(attribute, object)).copied()
    }

    pub fn position_by_name(&self, a: &str, o: &str) -> Option<usize> {
        let ai = self.attrs.index_of(a)?;
        let oi = self.objs.index_of(o)?;
        self.position(ai, oi)
    }

    /// Label positions tagged AO, in space order.
    pub fn seen_positions(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].split == Split::AO)
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for l in &self.labels {
            counts[Split::ALL.iter().position(|s| *s == l.split).unwrap()] += 1;
        }
        counts
    }

    pub fn count(&self, split: Split) -> usize {
        self.labels.iter().filter(|l| l.split == split).count()
    }

    pub fn pair_names(&self, i: usize) -> (&str, &str) {
        let l = &self.labels[i];
        (self.attrs.name(l.attribute), self.objs.name(l.object))
    }

    pub fn pairs_file(&self) -> PairsFile {
        PairsFile {
            seen_pairs: self.seen_pairs.clone(),
            heldout_pairs: self.heldout_pairs.clone(),
        }
    }

    pub fn vocab_file(&self) -> VocabFile {
        VocabFile {
            attributes: VocabListing {
                seen: self.attrs.seen.clone(),
                unseen: self.attrs.unseen.clone(),
            },
            objects: VocabListing {
                seen: self.objs.seen.clone(),
                unseen: self.objs.unseen.clone(),
            },
        }
    }

    pub fn from_files(vocab: &VocabFile, pairs: &PairsFile) -> Result<Self> {
        let attrs = Vocabulary::new(
            PrimitiveKind::Attribute,
            vocab.attributes.seen.clone(),
            vocab.attributes.unseen.clone(),
        )?;
        let objs = Vocabulary::new(
            PrimitiveKind::Object,
            vocab.objects.seen.clone(),
            vocab.objects.unseen.clone(),
        )?;
        build_composition_space(&attrs, &objs, &pairs.seen_pairs, &pairs.heldout_pairs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub visual: Vec<f64>,
    /// Position of the label in the composition space.
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub d: usize,
}

impl Dataset {
    pub fn new(
        train: Vec<Sample>,
        test: Vec<Sample>,
        d: usize,
        space: &CompositionSpace,
    ) -> Result<Self> {
        for s in train.iter().chain(&test) {
            if s.label >= space.len() {
                return Err(SpaError::IndexOutOfRange {
                    what: "composition label",
                    index: s.label,
                    len: space.len(),
                });
            }
            if s.visual.len() != d {
                return Err(SpaError::DimensionMismatch(format!(
                    "sample of dimension {} in a dataset of dimension {d}",
                    s.visual.len()
                )));
            }
            if (norm(&s.visual) - 1.0).abs() > 1e-6 {
                return Err(SpaError::InvalidConfig(
                    "sample visual is not unit norm".into(),
                ));
            }
        }
        if let Some(s) = train
            .iter()
            .find(|s| space.label(s.label).split != Split::AO)
        {
            let (a, o) = space.pair_names(s.label);
            return Err(SpaError::UnseenLabelInBatch(a.into(), o.into()));
        }
        Ok(Self { train, test, d })
    }
}

/// Sample table: header `id\ta\to\td0…`, then one sample per line.
pub fn samples_to_tsv(samples: &[Sample], space: &CompositionSpace, d: usize) -> String {
    let mut out = String::from("id\ta\to");
    for j in 0..d {
        let _ = write!(out, "\td{j}");
    }
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let (a, o) = space.pair_names(s.label);
        let _ = write!(out, "{i}\t{a}\t{o}");
        for v in &s.visual {
            out.push('\t');
            out.push_str(&format_value(*v));
        }
        out.push('\n');
    }
    out
}

pub fn samples_from_tsv(text: &str, space: &CompositionSpace) -> Result<(Vec<Sample>, usize)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| SpaError::MalformedHeader {
        line: 1,
        reason: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 4 || cols[..3] != ["id", "a", "o"] {
        return Err(SpaError::MalformedHeader {
            line: 1,
            reason: "expected `id\\ta\\to\\td0…`".into(),
        });
    }
    let d = cols.len() - 3;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != d + 3 {
            return Err(SpaError::RaggedRow {
                line: lineno,
                expected: d + 3,
                found: fields.len(),
            });
        }
        let label = space
            .position_by_name(fields[1], fields[2])
            .ok_or_else(|| SpaError::UnknownPrimitive(format!("{} {}", fields[1], fields[2])))?;
        let visual = fields[3..]
            .iter()
            .map(|t| parse_value(t, lineno))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample { visual, label });
    }
    Ok((out, d))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SpaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SpaError::json(path.display().to_string(), e))
}
