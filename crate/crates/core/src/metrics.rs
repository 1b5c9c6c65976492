// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise decoding metrics, grouped by language tag.
//!
//! Every metric starts from the same per-cell decode: project the hidden state
//! at `(layer, position)` through the lens, round the logits to storage (`f32`)
//! precision, and softmax. Rounding puts lens logits on the same footing as
//! the stored final logits, so at layer `L` the two are bit-identical and the
//! anchors (agreement 1, rank 1) hold exactly rather than up to ties.
//!
//! Conventions:
//!
//! - argmax ties go to the lowest index;
//! - ranks are competition ranks, `1 + #{j : p_j > p_target}`, so tied tokens
//!   share the better rank;
//! - every `(sequence, position)` pair counts once in its cell;
//! - ragged sequences shrink per-position denominators, nothing is padded;
//! - an empty cell is reported as absent (`None`), never as zero.
//!
//! "Correct" for ranks means the base model's own final top-1 by default
//! ([`RankMode::FinalTop1`]); [`RankMode::Gold`] ranks a labelled answer token
//! at a labelled position instead.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationSet;
use crate::error::{LensError, Result};
use crate::lens::{Lens, LensKind};
use crate::model::{to_storage, CapturedSequence, LogitHead, ModelSpec};
use crate::numerics::{entropy, softmax};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Index of the largest entry; ties resolve to the lowest index.
///
/// ```
/// use tunedlens::metrics::top1;
/// assert_eq!(top1(&[0.1, 0.7, 0.2]).unwrap(), 1);
/// assert_eq!(top1(&[0.5, 0.5]).unwrap(), 0);
/// ```
pub fn top1(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(LensError::Empty("top1 input"));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Competition rank of `target`: one plus the number of strictly more probable entries.
#[must_use]
pub fn competition_rank(probs: &[f64], target: usize) -> usize {
    let pt = probs[target];
    1 + probs.iter().filter(|&&p| p > pt).count()
}

/// Lens logits at one cell, rounded to storage precision.
pub fn decode_logits(
    lens: &Lens,
    head: &LogitHead,
    spec: &ModelSpec,
    seq: &CapturedSequence,
    layer: usize,
    t: usize,
) -> Result<Vec<f64>> {
    let z = lens.project(head, layer, &seq.hidden_f64(spec, layer, t))?;
    Ok(z.into_iter().map(to_storage).collect())
}

/// The base model's own next-token prediction at position `t`.
#[must_use]
pub fn final_top1(spec: &ModelSpec, seq: &CapturedSequence, t: usize) -> usize {
    top1(&seq.logits_f64(spec, t)).expect("non-empty vocabulary")
}

/// How ranks and position accuracy choose the "correct" token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    #[default]
    FinalTop1,
    Gold,
}

/// Optional gold labels for one sequence of an activation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    /// Index into the activation set.
    pub sequence: usize,
    #[serde(default)]
    pub gold_token_index: Option<u32>,
    #[serde(default)]
    pub answer_position: Option<usize>,
}

impl EvalSample {
    /// One unlabelled sample per sequence.
    #[must_use]
    pub fn all(set: &ActivationSet) -> Vec<Self> {
        (0..set.len())
            .map(|sequence| Self {
                sequence,
                gold_token_index: None,
                answer_position: None,
            })
            .collect()
    }

    fn validate(&self, index: usize, set: &ActivationSet) -> Result<()> {
        let seq = set.sequences().get(self.sequence).ok_or_else(|| {
            LensError::InvalidConfig(format!(
                "sample {index} refers to sequence {} of {}",
                self.sequence,
                set.len()
            ))
        })?;
        if let Some(g) = self.gold_token_index {
            if g as usize >= set.spec.vocab_size {
                return Err(LensError::TokenOutOfRange {
                    position: self.answer_position.unwrap_or(0),
                    id: g,
                    vocab_size: set.spec.vocab_size,
                });
            }
        }
        if let Some(p) = self.answer_position {
            if p >= seq.len() {
                return Err(LensError::InvalidConfig(format!(
                    "sample {index}: answer_position {p} beyond sequence length {}",
                    seq.len()
                )));
            }
        }
        Ok(())
    }

    fn gold(&self, index: usize) -> Result<(u32, usize)> {
        match (self.gold_token_index, self.answer_position) {
            (Some(g), Some(p)) => Ok((g, p)),
            _ => Err(LensError::MissingGold { sample: index }),
        }
    }
}

/// Per-cell decode results for one sequence (`layers × positions`).
struct SequenceDecode {
    language: String,
    /// `[layer-1][t]`
    cells: Vec<Vec<CellDecode>>,
    final_top1: Vec<usize>,
}

struct CellDecode {
    top1: usize,
    entropy: f64,
    /// Rank of the base model's final top-1 token.
    final_rank: usize,
    /// Rank of the gold token, only at the answer position.
    gold_rank: Option<usize>,
}

fn decode_sequence(
    lens: &Lens,
    head: &LogitHead,
    spec: &ModelSpec,
    seq: &CapturedSequence,
    gold: Option<(u32, usize)>,
) -> Result<SequenceDecode> {
    let final_top: Vec<usize> = (0..seq.len()).map(|t| final_top1(spec, seq, t)).collect();
    let cells = (1..=spec.n_layers)
        .map(|layer| {
            (0..seq.len())
                .map(|t| {
                    let z = decode_logits(lens, head, spec, seq, layer, t)?;
                    let p = softmax(&z)?;
                    let gold_rank = gold
                        .filter(|&(_, pos)| pos == t)
                        .map(|(g, _)| competition_rank(p.probs(), g as usize));
                    Ok(CellDecode {
                        top1: top1(&z)?,
                        entropy: entropy(&p),
                        final_rank: competition_rank(p.probs(), final_top[t]),
                        gold_rank,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceDecode {
        language: seq.language.clone(),
        cells,
        final_top1: final_top,
    })
}

fn check_inputs(lens: &Lens, set: &ActivationSet) -> Result<()> {
    lens.spec().ensure_same(&set.spec, "lens vs activation set")
}

fn check_layer(layer: usize, spec: &ModelSpec) -> Result<()> {
    if layer == 0 || layer > spec.n_layers {
        return Err(LensError::LayerOutOfRange {
            layer,
            n_layers: spec.n_layers,
        });
    }
    Ok(())
}

/// Decodes every sample's sequence in parallel; results come back in sample order.
fn decode_samples(
    lens: &Lens,
    head: &LogitHead,
    set: &ActivationSet,
    samples: &[EvalSample],
    mode: RankMode,
) -> Result<Vec<SequenceDecode>> {
    check_inputs(lens, set)?;
    for (i, s) in samples.iter().enumerate() {
        s.validate(i, set)?;
        if mode == RankMode::Gold {
            s.gold(i)?;
        }
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let gold = match mode {
                RankMode::Gold => Some(s.gold(i)?),
                RankMode::FinalTop1 => None,
            };
            decode_sequence(lens, head, &set.spec, &set.sequences()[s.sequence], gold)
        })
        .collect()
}

/// A mean with the number of contributions behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sum: f64,
    count: usize,
}

impl Acc {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn cell(self) -> Cell {
        Cell {
            value: (self.count > 0).then(|| self.sum / self.count as f64),
            count: self.count,
        }
    }
}

fn language_index(set: &ActivationSet) -> BTreeMap<&str, usize> {
    set.languages()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect()
}

/// Fraction of positions where the lens top-1 at `layer` equals the final top-1, per language.
pub fn layer_agreement(
    lens: &Lens,
    head: &LogitHead,
    set: &ActivationSet,
    layer: usize,
) -> Result<BTreeMap<String, Cell>> {
    check_layer(layer, &set.spec)?;
    let decoded = decode_samples(lens, head, set, &EvalSample::all(set), RankMode::FinalTop1)?;
    let mut accs: BTreeMap<String, Acc> = set.languages().iter().map(|l| (l.clone(), Acc::default())).collect();
    for d in &decoded {
        let acc = accs.get_mut(&d.language).expect("declared language");
        for (t, c) in d.cells[layer - 1].iter().enumerate() {
            acc.add(f64::from(u8::from(c.top1 == d.final_top1[t])));
        }
    }
    Ok(accs.into_iter().map(|(k, a)| (k, a.cell())).collect())
}

/// Entropy (nats) of the lens distribution at every `(layer, position)`; row `n-1` is layer `n`.
pub fn entropy_grid(lens: &Lens, head: &LogitHead, spec: &ModelSpec, seq: &CapturedSequence) -> Result<Vec<Vec<f64>>> {
    lens.spec().ensure_same(spec, "lens vs sequence spec")?;
    seq.validate(spec)?;
    let d = decode_sequence(lens, head, spec, seq, None)?;
    Ok(d.cells
        .iter()
        .map(|row| row.iter().map(|c| c.entropy).collect())
        .collect())
}

/// Mean competition rank of the correct token, per language and layer.
///
/// The returned vectors are indexed by `layer - 1`.
pub fn mean_rank(
    lens: &Lens,
    head: &LogitHead,
    set: &ActivationSet,
    samples: &[EvalSample],
    mode: RankMode,
) -> Result<BTreeMap<String, Vec<Cell>>> {
    let decoded = decode_samples(lens, head, set, samples, mode)?;
    let n_layers = set.spec.n_layers;
    let mut accs: BTreeMap<String, Vec<Acc>> = set
        .languages()
        .iter()
        .map(|l| (l.clone(), vec![Acc::default(); n_layers]))
        .collect();
    for d in &decoded {
        let row = accs.get_mut(&d.language).expect("declared language");
        for (li, cells) in d.cells.iter().enumerate() {
            for c in cells {
                match mode {
                    RankMode::FinalTop1 => row[li].add(c.final_rank as f64),
                    RankMode::Gold => {
                        if let Some(r) = c.gold_rank {
                            row[li].add(r as f64);
                        }
                    }
                }
            }
        }
    }
    Ok(accs
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(Acc::cell).collect()))
        .collect())
}

/// Accuracy by raw position index at `layer`, per language.
///
/// In [`RankMode::FinalTop1`] every position of every sample contributes; in
/// [`RankMode::Gold`] only each sample's answer position does, graded against
/// its gold token. The returned vectors are indexed by position.
pub fn position_accuracy(
    lens: &Lens,
    head: &LogitHead,
    set: &ActivationSet,
    samples: &[EvalSample],
    layer: usize,
    mode: RankMode,
) -> Result<BTreeMap<String, Vec<Cell>>> {
    check_layer(layer, &set.spec)?;
    let decoded = decode_samples(lens, head, set, samples, mode)?;
    let mut accs: BTreeMap<String, Vec<Acc>> = set.languages().iter().map(|l| (l.clone(), Vec::new())).collect();
    for (d, s) in decoded.iter().zip(samples) {
        let row = accs.get_mut(&d.language).expect("declared language");
        let cells = &d.cells[layer - 1];
        if row.len() < cells.len() {
            row.resize(cells.len(), Acc::default());
        }
        match mode {
            RankMode::FinalTop1 => {
                for (t, c) in cells.iter().enumerate() {
                    row[t].add(f64::from(u8::from(c.top1 == d.final_top1[t])));
                }
            }
            RankMode::Gold => {
                let (g, p) = (
                    s.gold_token_index.expect("validated"),
                    s.answer_position.expect("validated"),
                );
                row[p].add(f64::from(u8::from(cells[p].top1 == g as usize)));
            }
        }
    }
    Ok(accs
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(Acc::cell).collect()))
        .collect())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub rank_mode: RankMode,
    /// Width of position buckets for position accuracy (1 = raw positions).
    pub position_bucket: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rank_mode: RankMode::FinalTop1,
            position_bucket: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCell {
    pub layer: usize,
    /// Number of `(sequence, position)` pairs behind agreement and entropy.
    pub count: usize,
    pub agreement: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub mean_rank: Option<f64>,
    pub rank_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionCell {
    pub layer: usize,
    pub bucket_start: usize,
    /// Exclusive.
    pub bucket_end: usize,
    pub count: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub language: String,
    pub layers: Vec<LayerCell>,
    pub positions: Vec<PositionCell>,
}

/// Every metric for one lens over one activation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensMetrics {
    pub lens: String,
    pub kind: LensKind,
    /// Payload checksum of the evaluated activation set.
    pub dataset: String,
    pub languages: Vec<LanguageMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCell {
    pub layer: usize,
    pub delta: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDelta {
    pub language: String,
    pub cells: Vec<DeltaCell>,
}

/// Cellwise agreement of `lens` minus agreement of `baseline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMetrics {
    pub lens: String,
    pub baseline: String,
    pub languages: Vec<LanguageDelta>,
}

/// Per-language, per-layer aggregates for one or more lenses, plus deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub options: EvalOptions,
    pub lenses: Vec<LensMetrics>,
    pub deltas: Vec<DeltaMetrics>,
}

impl MetricsReport {
    #[must_use]
    pub fn new(spec: &ModelSpec, options: EvalOptions) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            vocab_size: spec.vocab_size,
            n_layers: spec.n_layers,
            options,
            lenses: Vec::new(),
            deltas: Vec::new(),
        }
    }

    /// Adds a delta of every lens after the first against the first.
    pub fn add_deltas_against_first(&mut self) -> Result<()> {
        let Some((base, rest)) = self.lenses.split_first() else {
            return Ok(());
        };
        let deltas = rest
            .iter()
            .map(|l| improvement_delta(l, base))
            .collect::<Result<Vec<_>>>()?;
        self.deltas.extend(deltas);
        Ok(())
    }
}

/// Computes every metric for `lens` in one pass over `set`.
pub fn evaluate(
    name: &str,
    lens: &Lens,
    head: &LogitHead,
    set: &ActivationSet,
    samples: &[EvalSample],
    options: EvalOptions,
) -> Result<LensMetrics> {
    if options.position_bucket == 0 {
        return Err(LensError::InvalidConfig("position_bucket must be positive".into()));
    }
    let decoded = decode_samples(lens, head, set, samples, options.rank_mode)?;
    let n_layers = set.spec.n_layers;
    let lang_ix = language_index(set);
    let n_langs = set.languages().len();

    let mut agree = vec![vec![Acc::default(); n_layers]; n_langs];
    let mut ent = vec![vec![Acc::default(); n_layers]; n_langs];
    let mut rank = vec![vec![Acc::default(); n_layers]; n_langs];
    // [lang][layer][bucket]
    let mut pos: Vec<Vec<Vec<Acc>>> = vec![vec![Vec::new(); n_layers]; n_langs];
    let bucket = options.position_bucket;

    for (d, s) in decoded.iter().zip(samples) {
        let li = lang_ix[d.language.as_str()];
        for (layer, cells) in d.cells.iter().enumerate() {
            let buckets = &mut pos[li][layer];
            let needed = cells.len().div_ceil(bucket);
            if buckets.len() < needed {
                buckets.resize(needed, Acc::default());
            }
            for (t, c) in cells.iter().enumerate() {
                let hit = f64::from(u8::from(c.top1 == d.final_top1[t]));
                agree[li][layer].add(hit);
                ent[li][layer].add(c.entropy);
                match options.rank_mode {
                    RankMode::FinalTop1 => {
                        rank[li][layer].add(c.final_rank as f64);
                        buckets[t / bucket].add(hit);
                    }
                    RankMode::Gold => {
                        if let Some(r) = c.gold_rank {
                            rank[li][layer].add(r as f64);
                            let g = s.gold_token_index.expect("validated") as usize;
                            buckets[t / bucket].add(f64::from(u8::from(c.top1 == g)));
                        }
                    }
                }
            }
        }
    }

    let languages = set
        .languages()
        .iter()
        .enumerate()
        .map(|(li, language)| LanguageMetrics {
            language: language.clone(),
            layers: (0..n_layers)
                .map(|l| {
                    let (a, e, r) = (agree[li][l].cell(), ent[li][l].cell(), rank[li][l].cell());
                    LayerCell {
                        layer: l + 1,
                        count: a.count,
                        agreement: a.value,
                        mean_entropy: e.value,
                        mean_rank: r.value,
                        rank_count: r.count,
                    }
                })
                .collect(),
            positions: (0..n_layers)
                .flat_map(|l| {
                    pos[li][l].iter().enumerate().map(move |(b, acc)| {
                        let c = acc.cell();
                        PositionCell {
                            layer: l + 1,
                            bucket_start: b * bucket,
                            bucket_end: (b + 1) * bucket,
                            count: c.count,
                            accuracy: c.value,
                        }
                    })
                })
                .collect(),
        })
        .collect();

    Ok(LensMetrics {
        lens: name.to_owned(),
        kind: lens.kind(),
        dataset: set.payload_checksum(),
        languages,
    })
}

/// Cellwise `lens.agreement − baseline.agreement`; may be negative.
pub fn improvement_delta(lens: &LensMetrics, baseline: &LensMetrics) -> Result<DeltaMetrics> {
    if lens.dataset != baseline.dataset {
        return Err(LensError::GridMismatch(
            "reports were computed on different activation sets".into(),
        ));
    }
    if lens.languages.len() != baseline.languages.len() {
        return Err(LensError::GridMismatch(format!(
            "{} vs {} languages",
            lens.languages.len(),
            baseline.languages.len()
        )));
    }
    let languages = lens
        .languages
        .iter()
        .zip(&baseline.languages)
        .map(|(a, b)| {
            if a.language != b.language || a.layers.len() != b.layers.len() {
                return Err(LensError::GridMismatch(format!(
                    "language {} with {} layers vs {} with {} layers",
                    a.language,
                    a.layers.len(),
                    b.language,
                    b.layers.len()
                )));
            }
            let cells = a
                .layers
                .iter()
                .zip(&b.layers)
                .map(|(x, y)| {
                    if x.layer != y.layer || x.count != y.count {
                        return Err(LensError::GridMismatch(format!(
                            "{} layer {}: counts {} vs {}",
                            a.language, x.layer, x.count, y.count
                        )));
                    }
                    Ok(DeltaCell {
                        layer: x.layer,
                        delta: x.agreement.zip(y.agreement).map(|(p, q)| p - q),
                        count: x.count,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LanguageDelta {
                language: a.language.clone(),
                cells,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeltaMetrics {
        lens: lens.lens.clone(),
        baseline: baseline.lens.clone(),
        languages,
    })
}
