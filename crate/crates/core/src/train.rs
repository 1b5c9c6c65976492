// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tuned-lens training.
//!
//! Each intermediate layer's translator is fit independently by minimizing the
//! forward KL divergence from the model's final-layer distribution `p` to the
//! lens distribution `q = softmax(head(M·h + b))`, averaged over hidden states.
//!
//! # Gradient
//!
//! Write `x = M·h + b`, `y = norm(x)` (or `y = x` without a final norm) and
//! `z = W·y`. Then
//!
//! ```text
//! ∂KL/∂z = q − p
//! ∂KL/∂y = Wᵀ (q − p)
//! ∂KL/∂x = r·u − (r³/d)·(u·x)·x     with u = g ⊙ ∂KL/∂y,  r = (mean(x²) + ε)^(-1/2)
//! ∂KL/∂M = (∂KL/∂x) hᵀ,   ∂KL/∂b = ∂KL/∂x
//! ```
//!
//! The RMS-norm Jacobian is exact; batch gradients are the index-ordered mean
//! of the per-sample gradients, so traces are bit-reproducible.
//!
//! # Optimizer coordinates
//!
//! Hidden states are far from zero-mean, which couples `b` to the mean
//! direction of `M` and slows Adam. The loop therefore steps `(M, c)` with
//! `x = M·(h − μ) + c`, where `μ` is the layer's mean over the training set.
//! This is the same affine map (`b = c − M·μ`), the start is still `(I, 0)`,
//! and the gradients follow exactly:
//!
//! ```text
//! ∂KL/∂c = ∂KL/∂b
//! ∂KL/∂M|c = ∂KL/∂M − (∂KL/∂b) μᵀ
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom as _, SliceRandom as _};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationSet;
use crate::error::{LensError, Result};
use crate::lens::{Lens, Translator};
use crate::model::LogitHead;
use crate::numerics::{dot, log_softmax, softmax, Distribution, Matrix};

/// Which positions of each sampled sequence contribute to a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionPolicy {
    #[default]
    All,
    Last,
    /// `k` distinct positions per sequence, drawn from the training RNG.
    Sampled(usize),
}

impl FromStr for PositionPolicy {
    type Err = LensError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "last" => Ok(Self::Last),
            other => other
                .strip_prefix("sampled-")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Self::Sampled)
                .ok_or_else(|| {
                    LensError::InvalidConfig(format!(
                        "position policy must be all, last, or sampled-<k>, got {other:?}"
                    ))
                }),
        }
    }
}

impl std::fmt::Display for PositionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Last => f.write_str("last"),
            Self::Sampled(k) => write!(f, "sampled-{k}"),
        }
    }
}

impl Serialize for PositionPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PositionPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Adam hyperparameters and the training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_sequences: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub positions: PositionPolicy,
    pub per_language: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_sequences: 8,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            positions: PositionPolicy::All,
            per_language: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LensError::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_sequences == 0 {
            return bad("batch_sequences must be at least 1".into());
        }
        // lr = 0 is allowed: it freezes the identity initialization
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    #[must_use]
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::container::sha256_hex(&json)
    }
}

/// Mean KL over a batch and its gradients with respect to the translator.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub kl: f64,
    pub grad_matrix: Matrix,
    pub grad_bias: Vec<f64>,
}

/// One training example: a hidden state and its target distribution.
pub type Example<'a> = (&'a [f64], &'a Distribution);

/// Mean forward KL of `translator` on `batch` and its exact gradients.
pub fn layer_loss_and_grads(translator: &Translator, head: &LogitHead, batch: &[Example<'_>]) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(LensError::Empty("training batch"));
    }
    let d = translator.matrix.rows();
    if head.d_model() != d {
        return Err(LensError::Dimension {
            what: "head d_model",
            expected: d,
            actual: head.d_model(),
        });
    }
    let vocab = head.vocab_size();
    let mut kl_sum = 0.0;
    let mut grad_m = vec![0.0; d * d];
    let mut grad_b = vec![0.0; d];

    for (h, p) in batch {
        if p.len() != vocab {
            return Err(LensError::Dimension {
                what: "target distribution",
                expected: vocab,
                actual: p.len(),
            });
        }
        let x = translator.apply(h)?;
        let z = head.logits(&x)?;
        let log_q = log_softmax(&z)?;
        let mut kl = 0.0;
        let mut dz = Vec::with_capacity(vocab);
        for (&pi, &lq) in p.probs().iter().zip(&log_q) {
            if pi > 0.0 {
                kl += pi * (pi.ln() - lq);
            }
            dz.push(lq.exp() - pi);
        }
        kl_sum += kl.max(0.0);

        let dy = head.unembed.matvec_t(&dz)?;
        let dx = match &head.norm {
            Some(norm) => {
                let r = norm.inv_rms(&x);
                let u: Vec<f64> = dy.iter().zip(&norm.gain).map(|(a, g)| a * g).collect();
                let coeff = r * r * r * dot(&u, &x) / d as f64;
                u.iter().zip(&x).map(|(ui, xi)| r * ui - coeff * xi).collect()
            }
            None => dy,
        };
        for (i, &gi) in dx.iter().enumerate() {
            grad_b[i] += gi;
            for (gm, &hj) in grad_m[i * d..(i + 1) * d].iter_mut().zip(h.iter()) {
                *gm += gi * hj;
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    grad_m.iter_mut().for_each(|g| *g *= scale);
    grad_b.iter_mut().for_each(|g| *g *= scale);
    Ok(LossAndGrads {
        kl: kl_sum * scale,
        grad_matrix: Matrix::from_vec(d, d, grad_m)?,
        grad_bias: grad_b,
    })
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    #[must_use]
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Non-finite gradients are rejected before any state is touched.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(LensError::Dimension {
            what: "adam parameters",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    crate::numerics::check_finite("gradient", grads)?;
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}

/// KL record for one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Batch KL before the update, per trained layer in ascending order.
    pub layer_kl: Vec<f64>,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub layers: Vec<usize>,
    pub steps: Vec<TraceStep>,
}

impl TrainTrace {
    /// Mean of `mean_kl` over the first and last `fraction` of steps (at least one step each).
    #[must_use]
    pub fn leading_trailing(&self, fraction: f64) -> (f64, f64) {
        let n = self.steps.len();
        let w = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = |s: &[TraceStep]| s.iter().map(|x| x.mean_kl).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.steps[..w.min(n)]), mean(&self.steps[n - w.min(n)..]))
    }

    /// Writes one JSON record per `(step, layer)`: `{"step":…,"layer":…,"kl":…}`.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for s in &self.steps {
            for (layer, kl) in self.layers.iter().zip(&s.layer_kl) {
                serde_json::to_writer(
                    &mut out,
                    &serde_json::json!({ "step": s.step, "layer": layer, "kl": kl }),
                )?;
                out.push(b'\n');
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| LensError::io(path, e))?;
        f.write_all(&out).map_err(|e| LensError::io(path, e))
    }
}

/// Softmax of every stored final-logit row, computed once per training run.
struct Targets(Vec<Vec<Distribution>>);

impl Targets {
    fn new(set: &ActivationSet) -> Result<Self> {
        set.sequences()
            .iter()
            .map(|s| (0..s.len()).map(|t| softmax(&s.logits_f64(&set.spec, t))).collect())
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn pick_positions(policy: PositionPolicy, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match policy {
        PositionPolicy::All => (0..len).collect(),
        PositionPolicy::Last => vec![len - 1],
        PositionPolicy::Sampled(k) => {
            let all: Vec<usize> = (0..len).collect();
            let mut picked: Vec<usize> = all.choose_multiple(rng, k.min(len)).copied().collect();
            picked.sort_unstable();
            picked
        }
    }
}

/// Mean hidden state of `layer` over every stored position, summed in index order.
fn layer_mean(set: &ActivationSet, layer: usize) -> Vec<f64> {
    let d = set.spec.d_model;
    let mut sum = vec![0.0; d];
    let mut n = 0usize;
    for seq in set.sequences() {
        for t in 0..seq.len() {
            for (s, h) in sum.iter_mut().zip(seq.hidden_f64(&set.spec, layer, t)) {
                *s += h;
            }
            n += 1;
        }
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

fn train_layer(
    set: &ActivationSet,
    head: &LogitHead,
    targets: &Targets,
    layer: usize,
    config: &TrainConfig,
) -> Result<(Translator, Vec<f64>)> {
    let spec = &set.spec;
    let d = spec.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(config.seed, layer));
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut cursor = order.len();

    // Adam runs on (M, c) with x = M·(h − μ) + c, so c = b + M·μ.
    let mu = layer_mean(set, layer);
    let mut translator = Translator::identity(layer, d);
    let mut params: Vec<f64> = translator.matrix.as_slice().to_vec();
    params.extend(translator.apply(&mu)?);
    let mut adam = AdamState::new(params.len());
    let mut kls = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut hidden: Vec<Vec<f64>> = Vec::new();
        let mut target_refs: Vec<&Distribution> = Vec::new();
        for _ in 0..config.batch_sequences.min(set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let si = order[cursor];
            cursor += 1;
            let seq = &set.sequences()[si];
            for t in pick_positions(config.positions, seq.len(), &mut rng) {
                hidden.push(seq.hidden_f64(spec, layer, t));
                target_refs.push(&targets.0[si][t]);
            }
        }
        let batch: Vec<Example<'_>> = hidden
            .iter()
            .map(Vec::as_slice)
            .zip(target_refs.iter().copied())
            .collect();

        let diverged = |detail: String| LensError::Divergence {
            layer,
            step: step + 1,
            detail,
        };
        let lg = layer_loss_and_grads(&translator, head, &batch).map_err(|e| diverged(e.to_string()))?;
        if !lg.kl.is_finite() {
            return Err(diverged(format!("loss is {}", lg.kl)));
        }
        kls.push(lg.kl);
        let mut grads = lg.grad_matrix.as_slice().to_vec();
        for (row, &gb) in grads.chunks_exact_mut(d).zip(&lg.grad_bias) {
            for (g, &m) in row.iter_mut().zip(&mu) {
                *g -= gb * m;
            }
        }
        grads.extend_from_slice(&lg.grad_bias);
        adam_step(&mut adam, &mut params, &grads, config).map_err(|e| diverged(e.to_string()))?;
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(diverged(format!("parameter {i} became non-finite")));
        }
        translator.matrix.as_mut_slice().copy_from_slice(&params[..d * d]);
        let shift = translator.matrix.matvec(&mu)?;
        for ((b, &c), m) in translator.bias.iter_mut().zip(&params[d * d..]).zip(shift) {
            *b = c - m;
        }
    }
    Ok((translator, kls))
}

fn check_trainable(set: &ActivationSet, head: &LogitHead, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if set.is_empty() {
        return Err(LensError::Empty("activation set"));
    }
    if head.d_model() != set.spec.d_model || head.vocab_size() != set.spec.vocab_size {
        return Err(LensError::SpecMismatch(format!(
            "head is {}x{}, activations are {}",
            head.vocab_size(),
            head.d_model(),
            set.spec.summary()
        )));
    }
    Ok(())
}

/// Trains the translator for a single layer in isolation.
pub fn train_translator(
    set: &ActivationSet,
    head: &LogitHead,
    layer: usize,
    config: &TrainConfig,
) -> Result<(Translator, Vec<f64>)> {
    check_trainable(set, head, config)?;
    if layer == 0 || layer >= set.spec.n_layers {
        return Err(LensError::LayerOutOfRange {
            layer,
            n_layers: set.spec.n_layers - 1,
        });
    }
    train_layer(set, head, &Targets::new(set)?, layer, config)
}

/// Trains a tuned lens on `set`, one independent job per intermediate layer.
pub fn train_lens(set: &ActivationSet, head: &LogitHead, config: &TrainConfig) -> Result<(Lens, TrainTrace)> {
    check_trainable(set, head, config)?;
    let targets = Targets::new(set)?;
    let layers: Vec<usize> = (1..set.spec.n_layers).collect();
    let results = layers
        .par_iter()
        .map(|&layer| train_layer(set, head, &targets, layer, config))
        .collect::<Vec<_>>();

    let mut translators = Vec::with_capacity(layers.len());
    let mut per_layer = Vec::with_capacity(layers.len());
    for r in results {
        let (t, kls) = r?;
        translators.push(t);
        per_layer.push(kls);
    }
    let steps = (0..config.steps)
        .map(|s| {
            let layer_kl: Vec<f64> = per_layer.iter().map(|k| k[s]).collect();
            let mean_kl = layer_kl.iter().sum::<f64>() / layer_kl.len() as f64;
            TraceStep {
                step: s + 1,
                layer_kl,
                mean_kl,
            }
        })
        .collect();

    let mut lens = Lens::tuned(set.spec.clone(), translators)?;
    lens.metadata = BTreeMap::from([
        ("config_digest".to_owned(), config.digest()),
        ("seed".to_owned(), config.seed.to_string()),
        ("steps".to_owned(), config.steps.to_string()),
        ("learning_rate".to_owned(), config.learning_rate.to_string()),
        ("positions".to_owned(), config.positions.to_string()),
        ("sequences".to_owned(), set.len().to_string()),
    ]);
    Ok((lens, TrainTrace { layers, steps }))
}

/// One lens per language tag, each trained only on that language's sequences.
pub fn train_lens_per_language(
    set: &ActivationSet,
    head: &LogitHead,
    config: &TrainConfig,
) -> Result<BTreeMap<String, (Lens, TrainTrace)>> {
    set.languages()
        .iter()
        .map(|tag| {
            let subset = set.filter_language(tag);
            let (mut lens, trace) = train_lens(&subset, head, config)?;
            lens.metadata.insert("language".into(), tag.clone());
            Ok((tag.clone(), (lens, trace)))
        })
        .collect()
}

/// Mean forward KL of `lens` at `layer` over every position of `set`.
pub fn mean_kl(set: &ActivationSet, head: &LogitHead, lens: &Lens, layer: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in set.sequences() {
        for t in 0..s.len() {
            let p = softmax(&s.logits_f64(&set.spec, t))?;
            let z = lens.project(head, layer, &s.hidden_f64(&set.spec, layer, t))?;
            sum += crate::numerics::kl_divergence(&p, &z)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(LensError::Empty("activation set"));
    }
    Ok(sum / n as f64)
}
