// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens and tuned lens.
//!
//! A logit lens decodes a hidden state by pushing it straight through the
//! model's logit head. A tuned lens first applies a per-layer affine
//! [`Translator`] `h ↦ M·h + b`. The final layer never has a translator: its
//! hidden state is what the head was built for, so both lens kinds decode it
//! with the head alone.
//!
//! A fresh tuned lens starts at `M = I, b = 0`, where it reproduces the logit
//! lens exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, F32Reader};
use crate::error::{LensError, Result};
use crate::model::{LogitHead, ModelSpec};
use crate::numerics::{affine_apply, l2_norm, Matrix};

pub const LENS_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "TUNEDLENS-LENS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LensKind {
    Logit,
    Tuned,
}

impl std::fmt::Display for LensKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Logit => "logit",
            Self::Tuned => "tuned",
        })
    }
}

/// Affine map for one intermediate layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Translator {
    pub layer: usize,
    pub matrix: Matrix,
    pub bias: Vec<f64>,
}

impl Translator {
    #[must_use]
    pub fn identity(layer: usize, d: usize) -> Self {
        Self {
            layer,
            matrix: Matrix::identity(d),
            bias: vec![0.0; d],
        }
    }

    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        affine_apply(&self.matrix, &self.bias, h)
    }
}

/// How far a translator has moved from the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorSummary {
    pub layer: usize,
    pub frobenius_from_identity: f64,
    pub bias_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lens {
    kind: LensKind,
    spec: ModelSpec,
    translators: BTreeMap<usize, Translator>,
    /// Free-form creation record (seed, config digest, ...).
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: LensKind,
    spec: ModelSpec,
    layers: Vec<usize>,
    metadata: BTreeMap<String, String>,
}

impl Lens {
    /// The untrained baseline: head only, at every layer.
    #[must_use]
    pub fn logit(spec: ModelSpec) -> Self {
        Self {
            kind: LensKind::Logit,
            spec,
            translators: BTreeMap::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Tuned lens with `M = I`, `b = 0` at every intermediate layer.
    #[must_use]
    pub fn identity(spec: ModelSpec) -> Self {
        let translators = (1..spec.n_layers)
            .map(|n| (n, Translator::identity(n, spec.d_model)))
            .collect();
        Self {
            kind: LensKind::Tuned,
            spec,
            translators,
            metadata: BTreeMap::new(),
        }
    }

    /// Tuned lens from explicit translators; exactly one per layer `1..n_layers`.
    pub fn tuned(spec: ModelSpec, translators: Vec<Translator>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in translators {
            if t.layer == 0 || t.layer >= spec.n_layers {
                return Err(LensError::LayerOutOfRange {
                    layer: t.layer,
                    n_layers: spec.n_layers - 1,
                });
            }
            let d = spec.d_model;
            if t.matrix.rows() != d || t.matrix.cols() != d || t.bias.len() != d {
                return Err(LensError::Dimension {
                    what: "translator",
                    expected: d,
                    actual: if t.bias.len() != d {
                        t.bias.len()
                    } else {
                        t.matrix.rows()
                    },
                });
            }
            crate::numerics::check_finite("translator bias", &t.bias)?;
            map.insert(t.layer, t);
        }
        if let Some(missing) = (1..spec.n_layers).find(|n| !map.contains_key(n)) {
            return Err(LensError::MissingTranslator(missing));
        }
        Ok(Self {
            kind: LensKind::Tuned,
            spec,
            translators: map,
            metadata: BTreeMap::new(),
        })
    }

    #[must_use]
    pub fn kind(&self) -> LensKind {
        self.kind
    }

    #[must_use]
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    #[must_use]
    pub fn translator(&self, layer: usize) -> Option<&Translator> {
        self.translators.get(&layer)
    }

    pub fn translators(&self) -> impl Iterator<Item = &Translator> {
        self.translators.values()
    }

    fn check_head(&self, head: &LogitHead) -> Result<()> {
        if head.d_model() != self.spec.d_model {
            return Err(LensError::SpecMismatch(format!(
                "lens d_model {} vs head d_model {}",
                self.spec.d_model,
                head.d_model()
            )));
        }
        if head.vocab_size() != self.spec.vocab_size {
            return Err(LensError::SpecMismatch(format!(
                "lens vocab {} vs head vocab {}",
                self.spec.vocab_size,
                head.vocab_size()
            )));
        }
        if head.norm.is_some() != self.spec.final_norm {
            return Err(LensError::SpecMismatch(
                "lens and head disagree on final normalization".into(),
            ));
        }
        Ok(())
    }

    /// The hidden state handed to the head at `layer` (translated for a tuned lens).
    pub fn translate(&self, layer: usize, h: &[f64]) -> Result<Vec<f64>> {
        let n_layers = self.spec.n_layers;
        if layer == 0 || layer > n_layers {
            return Err(LensError::LayerOutOfRange { layer, n_layers });
        }
        if h.len() != self.spec.d_model {
            return Err(LensError::Dimension {
                what: "hidden state",
                expected: self.spec.d_model,
                actual: h.len(),
            });
        }
        if self.kind == LensKind::Logit || layer == n_layers {
            return Ok(h.to_vec());
        }
        self.translators
            .get(&layer)
            .ok_or(LensError::MissingTranslator(layer))?
            .apply(h)
    }

    /// Decodes hidden state `h` from `layer` into vocabulary logits.
    pub fn project(&self, head: &LogitHead, layer: usize, h: &[f64]) -> Result<Vec<f64>> {
        self.check_head(head)?;
        head.logits(&self.translate(layer, h)?)
    }

    /// Per-layer distance of each translator from the identity.
    #[must_use]
    pub fn summary(&self) -> Vec<TranslatorSummary> {
        self.translators
            .values()
            .map(|t| TranslatorSummary {
                layer: t.layer,
                frobenius_from_identity: t.matrix.frobenius_distance(&Matrix::identity(self.spec.d_model)),
                bias_norm: l2_norm(&t.bias),
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut payload = Vec::new();
        for t in self.translators.values() {
            container::push_f32s(&mut payload, t.matrix.as_slice().iter().map(|&v| v as f32));
            container::push_f32s(&mut payload, t.bias.iter().map(|&v| v as f32));
        }
        let header = Header {
            kind: self.kind,
            spec: self.spec.clone(),
            layers: self.translators.keys().copied().collect(),
            metadata: self.metadata.clone(),
        };
        container::write(path.as_ref(), MAGIC, LENS_FORMAT_VERSION, &header, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, payload): (Header, _) = container::read(path, MAGIC, LENS_FORMAT_VERSION)?;
        header.spec.validate().map_err(|e| LensError::Header {
            path: path.to_owned(),
            detail: e.to_string(),
        })?;
        let d = header.spec.d_model;
        let per_layer = (d * d + d) * 4;
        let expected = header.layers.len() * per_layer;
        if payload.len() != expected {
            return Err(LensError::Dimension {
                what: "lens payload bytes",
                expected,
                actual: payload.len(),
            });
        }
        let mut lens = match header.kind {
            LensKind::Logit => {
                if !header.layers.is_empty() {
                    return Err(LensError::Corrupt {
                        path: path.to_owned(),
                        detail: "logit lens carries translators".into(),
                    });
                }
                Self::logit(header.spec)
            }
            LensKind::Tuned => {
                let mut reader = F32Reader::new(&payload);
                let mut translators = Vec::with_capacity(header.layers.len());
                for &layer in &header.layers {
                    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
                    let m = widen(reader.take(d * d).expect("length checked"));
                    let b = widen(reader.take(d).expect("length checked"));
                    translators.push(Translator {
                        layer,
                        matrix: Matrix::from_vec(d, d, m)?,
                        bias: b,
                    });
                }
                Self::tuned(header.spec, translators)?
            }
        };
        lens.metadata = header.metadata;
        Ok(lens)
    }

    /// [`Lens::load`], additionally requiring the checkpoint to match `spec`.
    pub fn load_for(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<Self> {
        let lens = Self::load(path)?;
        if lens.spec.d_model != spec.d_model {
            return Err(LensError::Dimension {
                what: "lens d_model",
                expected: spec.d_model,
                actual: lens.spec.d_model,
            });
        }
        lens.spec.ensure_same(spec, "lens checkpoint")?;
        Ok(lens)
    }
}
