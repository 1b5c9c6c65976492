// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale decoder-only reference transformer with residual-stream capture.
//!
//! The architecture is a plain pre-norm stack: every block adds causal
//! multi-head attention and a GELU MLP to the residual stream, each reading an
//! RMS-normalized copy of it. The logit head is an optional final RMS norm
//! followed by an untied unembedding matrix.
//!
//! Weights are drawn from a ChaCha stream seeded by [`ModelSpec::seed`], so a
//! spec fully determines a model. The capture point for layer `n` is the
//! residual stream after block `n` (layers are numbered `1..=n_layers`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LensError, Result};
use crate::numerics::{dot, softmax, Matrix};

/// Standard deviation of token and position embeddings.
pub const EMBED_STD: f64 = 0.05;
/// Base standard deviation of residual-path output projections, divided by `sqrt(n_layers)`.
pub const RESIDUAL_STD: f64 = 0.02;
/// Epsilon inside every RMS normalization.
pub const RMS_EPS: f64 = 1e-6;
/// MLP hidden width as a multiple of `d_model`.
pub const MLP_RATIO: usize = 4;

/// Shape and seed of a reference model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default = "default_final_norm")]
    pub final_norm: bool,
    pub seed: u64,
}

fn default_final_norm() -> bool {
    true
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            vocab_size: 64,
            max_seq: 64,
            final_norm: true,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LensError::InvalidSpec(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return fail("d_model, n_heads, vocab_size and max_seq must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers < 2 {
            return fail(format!(
                "n_layers must be at least 2 to leave an intermediate layer, got {}",
                self.n_layers
            ));
        }
        if u32::try_from(self.vocab_size).is_err() {
            return fail("vocab_size must fit in u32".into());
        }
        Ok(())
    }

    /// Checks that two specs describe the same shape and weights.
    pub fn ensure_same(&self, other: &ModelSpec, context: &str) -> Result<()> {
        if self == other {
            return Ok(());
        }
        Err(LensError::SpecMismatch(format!(
            "{context}: {} vs {}",
            self.summary(),
            other.summary()
        )))
    }

    #[must_use]
    pub fn summary(&self) -> String {
        format!(
            "d_model={} n_layers={} n_heads={} vocab={} max_seq={} final_norm={} seed={}",
            self.d_model, self.n_layers, self.n_heads, self.vocab_size, self.max_seq, self.final_norm, self.seed
        )
    }
}

/// Root-mean-square normalization with a per-channel gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub gain: Vec<f64>,
    pub eps: f64,
}

impl RmsNorm {
    #[must_use]
    pub fn unit(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            eps: RMS_EPS,
        }
    }

    /// `1 / sqrt(mean(x²) + eps)`.
    #[must_use]
    pub fn inv_rms(&self, x: &[f64]) -> f64 {
        let ms = dot(x, x) / x.len() as f64;
        1.0 / (ms + self.eps).sqrt()
    }

    #[must_use]
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let r = self.inv_rms(x);
        x.iter().zip(&self.gain).map(|(v, g)| v * r * g).collect()
    }
}

/// Output head: optional final RMS norm, then unembedding.
///
/// Softmax is left to the caller; [`LogitHead::logits`] returns raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitHead {
    pub norm: Option<RmsNorm>,
    /// `vocab_size × d_model`.
    pub unembed: Matrix,
}

impl LogitHead {
    #[must_use]
    pub fn d_model(&self) -> usize {
        self.unembed.cols()
    }

    #[must_use]
    pub fn vocab_size(&self) -> usize {
        self.unembed.rows()
    }

    /// Applies the head to a hidden state.
    ///
    /// A normalizing head rejects the all-zero vector, whose direction is undefined.
    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.d_model() {
            return Err(LensError::Dimension {
                what: "logit head input",
                expected: self.d_model(),
                actual: h.len(),
            });
        }
        crate::numerics::check_finite("logit head input", h)?;
        match &self.norm {
            Some(norm) => {
                if h.iter().all(|&v| v == 0.0) {
                    return Err(LensError::DegenerateInput(
                        "zero hidden state under a normalizing logit head".into(),
                    ));
                }
                self.unembed.matvec(&norm.apply(h))
            }
            None => self.unembed.matvec(h),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: RmsNorm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    mlp_norm: RmsNorm,
    w_up: Matrix,
    w_down: Matrix,
}

/// Reference model weights. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    token_embed: Matrix,
    pos_embed: Matrix,
    blocks: Vec<Block>,
    head: LogitHead,
}

/// One sequence's captured residual stream and final logits, stored at `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedSequence {
    pub token_ids: Vec<u32>,
    pub language: String,
    /// `n_layers × T × d_model`, row-major.
    pub hidden: Vec<f32>,
    /// `T × vocab_size`, row-major.
    pub final_logits: Vec<f32>,
}

impl CapturedSequence {
    #[must_use]
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Hidden state after block `layer` (1-based) at position `t`.
    #[must_use]
    pub fn hidden_at(&self, spec: &ModelSpec, layer: usize, t: usize) -> &[f32] {
        let d = spec.d_model;
        let start = ((layer - 1) * self.len() + t) * d;
        &self.hidden[start..start + d]
    }

    /// [`Self::hidden_at`] widened to `f64`.
    #[must_use]
    pub fn hidden_f64(&self, spec: &ModelSpec, layer: usize, t: usize) -> Vec<f64> {
        self.hidden_at(spec, layer, t).iter().map(|&v| f64::from(v)).collect()
    }

    #[must_use]
    pub fn logits_at(&self, spec: &ModelSpec, t: usize) -> &[f32] {
        let v = spec.vocab_size;
        &self.final_logits[t * v..(t + 1) * v]
    }

    #[must_use]
    pub fn logits_f64(&self, spec: &ModelSpec, t: usize) -> Vec<f64> {
        self.logits_at(spec, t).iter().map(|&v| f64::from(v)).collect()
    }

    /// Checks shape consistency against `spec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(LensError::Empty("captured sequence"));
        }
        if t > spec.max_seq {
            return Err(LensError::SequenceTooLong {
                len: t,
                max_seq: spec.max_seq,
            });
        }
        if let Some((position, &id)) = self
            .token_ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= spec.vocab_size)
        {
            return Err(LensError::TokenOutOfRange {
                position,
                id,
                vocab_size: spec.vocab_size,
            });
        }
        let want_hidden = spec.n_layers * t * spec.d_model;
        if self.hidden.len() != want_hidden {
            return Err(LensError::Dimension {
                what: "captured hidden states",
                expected: want_hidden,
                actual: self.hidden.len(),
            });
        }
        if self.final_logits.len() != t * spec.vocab_size {
            return Err(LensError::Dimension {
                what: "captured final logits",
                expected: t * spec.vocab_size,
                actual: self.final_logits.len(),
            });
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Rounds to storage precision and back.
#[inline]
#[must_use]
pub fn to_storage(x: f64) -> f64 {
    f64::from(x as f32)
}

impl Model {
    /// Builds a model with deterministic Gaussian weights drawn from `spec.seed`.
    ///
    /// Residual-path projections (attention output, MLP down) use standard
    /// deviation `RESIDUAL_STD / sqrt(n_layers)`; input projections use
    /// `1 / sqrt(fan_in)`; the unembedding uses `2 / sqrt(d_model)` so that
    /// final distributions are reasonably peaked.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.d_model;
        let ff = MLP_RATIO * d;
        let in_std = 1.0 / (d as f64).sqrt();
        let resid_std = RESIDUAL_STD / (spec.n_layers as f64).sqrt();

        let token_embed = gaussian(&mut rng, spec.vocab_size, d, EMBED_STD);
        let pos_embed = gaussian(&mut rng, spec.max_seq, d, EMBED_STD);
        let blocks = (0..spec.n_layers)
            .map(|_| Block {
                attn_norm: RmsNorm::unit(d),
                wq: gaussian(&mut rng, d, d, in_std),
                wk: gaussian(&mut rng, d, d, in_std),
                wv: gaussian(&mut rng, d, d, in_std),
                wo: gaussian(&mut rng, d, d, resid_std),
                mlp_norm: RmsNorm::unit(d),
                w_up: gaussian(&mut rng, ff, d, in_std),
                w_down: gaussian(&mut rng, d, ff, resid_std),
            })
            .collect();
        let head = LogitHead {
            norm: spec.final_norm.then(|| RmsNorm::unit(d)),
            unembed: gaussian(&mut rng, spec.vocab_size, d, 2.0 * in_std),
        };
        Ok(Self {
            spec,
            token_embed,
            pos_embed,
            blocks,
            head,
        })
    }

    #[must_use]
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    #[must_use]
    pub fn head(&self) -> &LogitHead {
        &self.head
    }

    /// SHA-256 over every weight in a fixed order, as lowercase hex.
    #[must_use]
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |m: &[f64]| {
            for v in m {
                hasher.update(v.to_le_bytes());
            }
        };
        feed(self.token_embed.as_slice());
        feed(self.pos_embed.as_slice());
        for b in &self.blocks {
            feed(&b.attn_norm.gain);
            feed(b.wq.as_slice());
            feed(b.wk.as_slice());
            feed(b.wv.as_slice());
            feed(b.wo.as_slice());
            feed(&b.mlp_norm.gain);
            feed(b.w_up.as_slice());
            feed(b.w_down.as_slice());
        }
        if let Some(n) = &self.head.norm {
            feed(&n.gain);
        }
        feed(self.head.unembed.as_slice());
        hex::encode(hasher.finalize())
    }

    fn validate_tokens(&self, token_ids: &[u32]) -> Result<()> {
        if token_ids.is_empty() {
            return Err(LensError::Empty("token sequence"));
        }
        if token_ids.len() > self.spec.max_seq {
            return Err(LensError::SequenceTooLong {
                len: token_ids.len(),
                max_seq: self.spec.max_seq,
            });
        }
        for (position, &id) in token_ids.iter().enumerate() {
            if id as usize >= self.spec.vocab_size {
                return Err(LensError::TokenOutOfRange {
                    position,
                    id,
                    vocab_size: self.spec.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn attention(&self, block: &Block, stream: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let t_len = stream.len();
        let heads = self.spec.n_heads;
        let dh = self.spec.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let normed: Vec<Vec<f64>> = stream.iter().map(|x| block.attn_norm.apply(x)).collect();
        let proj = |w: &Matrix| -> Vec<Vec<f64>> { normed.iter().map(|x| w.matvec(x).expect("block dims")).collect() };
        let (q, k, v) = (proj(&block.wq), proj(&block.wk), proj(&block.wv));

        (0..t_len)
            .map(|t| {
                let mut mixed = vec![0.0; self.spec.d_model];
                for h in 0..heads {
                    let span = h * dh..(h + 1) * dh;
                    // causal: position t attends to 0..=t
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| dot(&q[t][span.clone()], &k[s][span.clone()]) * scale)
                        .collect();
                    let weights = softmax(&scores).expect("finite attention scores");
                    for (s, w) in weights.probs().iter().enumerate() {
                        for (o, vv) in mixed[span.clone()].iter_mut().zip(&v[s][span.clone()]) {
                            *o += w * vv;
                        }
                    }
                }
                block.wo.matvec(&mixed).expect("block dims")
            })
            .collect()
    }

    fn mlp(&self, block: &Block, x: &[f64]) -> Vec<f64> {
        let n = block.mlp_norm.apply(x);
        let up: Vec<f64> = block
            .w_up
            .matvec(&n)
            .expect("block dims")
            .into_iter()
            .map(gelu)
            .collect();
        block.w_down.matvec(&up).expect("block dims")
    }

    /// Runs the causal forward pass and records the residual stream after every block.
    ///
    /// Final logits are computed by the logit head from the *stored* (f32-rounded)
    /// layer-`L` hidden state, so projecting `hidden[L]` through the head
    /// reproduces `final_logits` bit for bit.
    pub fn forward_collect(&self, token_ids: &[u32], language: &str) -> Result<CapturedSequence> {
        self.validate_tokens(token_ids)?;
        let spec = &self.spec;
        let t_len = token_ids.len();
        let mut stream: Vec<Vec<f64>> = token_ids
            .iter()
            .enumerate()
            .map(|(t, &id)| {
                self.token_embed
                    .row(id as usize)
                    .iter()
                    .zip(self.pos_embed.row(t))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();

        let mut hidden = Vec::with_capacity(spec.n_layers * t_len * spec.d_model);
        for block in &self.blocks {
            let attn = self.attention(block, &stream);
            for (x, a) in stream.iter_mut().zip(&attn) {
                for (xi, ai) in x.iter_mut().zip(a) {
                    *xi += ai;
                }
                let m = self.mlp(block, x);
                for (xi, mi) in x.iter_mut().zip(&m) {
                    *xi += mi;
                }
            }
            for x in &stream {
                hidden.extend(x.iter().map(|&v| v as f32));
            }
        }

        let last = (spec.n_layers - 1) * t_len * spec.d_model;
        let mut final_logits = Vec::with_capacity(t_len * spec.vocab_size);
        for t in 0..t_len {
            let start = last + t * spec.d_model;
            let h: Vec<f64> = hidden[start..start + spec.d_model]
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            final_logits.extend(self.head.logits(&h)?.into_iter().map(|z| z as f32));
        }

        Ok(CapturedSequence {
            token_ids: token_ids.to_vec(),
            language: language.to_owned(),
            hidden,
            final_logits,
        })
    }
}
