//! Strategies for preparing unseen-primitive prompts before inference,
//! selectable by name at runtime.
//!
//! | name   | behaviour                                              |
//! |--------|--------------------------------------------------------|
//! | `sas`  | neighbour-weighted transfer of seen training shifts    |
//! | `none` | unseen primitives keep their initial tokens            |

use std::collections::BTreeMap;

use crate::encoder::{FrozenEncoder, PromptState};
use crate::error::{Result, SpaError};
use crate::linalg::Matrix;
use crate::sas::{adapt_unseen, compute_deltas, u2s_similarity, CalibratedPrompts, CalibratedRows};
use crate::vocab_space::{CompositionSpace, PrimitiveKind};

/// Everything an adapter may look at. Only observable quantities: trained
/// and initial tokens, and the unseen primitives' initial tokens.
pub struct AdaptInput<'a> {
    pub enc: &'a FrozenEncoder,
    pub state: &'a PromptState,
    pub space: &'a CompositionSpace,
    pub unseen_attr_init: &'a Matrix,
    pub unseen_obj_init: &'a Matrix,
}

impl AdaptInput<'_> {
    pub fn unseen_init(&self, kind: PrimitiveKind) -> &Matrix {
        match kind {
            PrimitiveKind::Attribute => self.unseen_attr_init,
            PrimitiveKind::Object => self.unseen_obj_init,
        }
    }
}

pub trait UnseenAdapter: Send + Sync {
    fn name(&self) -> &'static str;
    fn adapt(&self, input: &AdaptInput<'_>) -> Result<CalibratedPrompts>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterParams {
    pub k: usize,
    pub tau: f64,
}

impl Default for AdapterParams {
    fn default() -> Self {
        Self { k: 5, tau: 0.10 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StructureGuided {
    pub k: usize,
    pub tau: f64,
}

impl UnseenAdapter for StructureGuided {
    fn name(&self) -> &'static str {
        "sas"
    }

    fn adapt(&self, input: &AdaptInput<'_>) -> Result<CalibratedPrompts> {
        let run = |kind: PrimitiveKind| -> Result<CalibratedRows> {
            let vocab = input.space.vocabulary(kind);
            let init = input.unseen_init(kind);
            let deltas = compute_deltas(input.state, kind)?;
            if vocab.num_unseen() == 0 {
                return Ok(CalibratedRows {
                    kind,
                    theta: init.clone(),
                    provenance: vec![],
                });
            }
            let u2s = u2s_similarity(input.enc, input.state, vocab, init)?;
            adapt_unseen(&deltas, &u2s, self.k.min(vocab.num_seen()), self.tau, init)
        };
        Ok(CalibratedPrompts {
            attr: run(PrimitiveKind::Attribute)?,
            obj: run(PrimitiveKind::Object)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KeepInitial;

impl UnseenAdapter for KeepInitial {
    fn name(&self) -> &'static str {
        "none"
    }

    fn adapt(&self, input: &AdaptInput<'_>) -> Result<CalibratedPrompts> {
        let keep = |kind: PrimitiveKind| CalibratedRows {
            kind,
            theta: input.unseen_init(kind).clone(),
            provenance: vec![],
        };
        Ok(CalibratedPrompts {
            attr: keep(PrimitiveKind::Attribute),
            obj: keep(PrimitiveKind::Object),
        })
    }
}

type AdapterFactory = fn(&AdapterParams) -> Box<dyn UnseenAdapter>;

pub struct AdapterRegistry {
    factories: BTreeMap<&'static str, AdapterFactory>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("sas", |p| Box::new(StructureGuided { k: p.k, tau: p.tau }));
        r.register("none", |_| Box::new(KeepInitial));
        r
    }
}

impl AdapterRegistry {
    pub fn register(&mut self, name: &'static str, factory: AdapterFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: &AdapterParams) -> Result<Box<dyn UnseenAdapter>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| SpaError::UnknownStrategy {
                kind: "adapter",
                name: name.to_string(),
                available: self.names().join(", "),
            })?;
        Ok(factory(params))
    }
}
