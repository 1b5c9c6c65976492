// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multilingual corpora.
//!
//! Each language owns a disjoint band of the vocabulary: language `l` of `n`
//! draws from `[l·|V|/n, (l+1)·|V|/n)` with probability [`BAND_PROB`] (Zipf
//! weighted inside the band) and uniformly from the whole vocabulary
//! otherwise. Sequences are then run through the reference model.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::activations::ActivationSet;
use crate::error::{LensError, Result};
use crate::model::{CapturedSequence, Model};
use crate::numerics::Matrix;

/// Probability that a token is drawn from its language's own band.
pub const BAND_PROB: f64 = 0.95;

/// Per-language token sampler.
#[derive(Debug, Clone)]
pub struct LanguageSampler {
    band_start: u32,
    band: WeightedIndex<f64>,
    vocab_size: u32,
}

impl LanguageSampler {
    /// Sampler for language `index` out of `n_langs`.
    pub fn new(index: usize, n_langs: usize, vocab_size: usize) -> Result<Self> {
        if n_langs == 0 || index >= n_langs {
            return Err(LensError::InvalidConfig(format!(
                "language index {index} out of range for {n_langs} languages"
            )));
        }
        if vocab_size < n_langs {
            return Err(LensError::InvalidConfig(format!(
                "vocabulary of {vocab_size} cannot hold {n_langs} disjoint bands"
            )));
        }
        let lo = index * vocab_size / n_langs;
        let hi = (index + 1) * vocab_size / n_langs;
        let weights: Vec<f64> = (0..hi - lo).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        Ok(Self {
            band_start: lo as u32,
            band: WeightedIndex::new(weights).expect("non-empty positive weights"),
            vocab_size: vocab_size as u32,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        if rng.random_bool(BAND_PROB) {
            self.band_start + self.band.sample(rng) as u32
        } else {
            rng.random_range(0..self.vocab_size)
        }
    }
}

fn check_shape(model: &Model, languages: &[String], seq_len: usize) -> Result<()> {
    if languages.is_empty() {
        return Err(LensError::InvalidConfig("at least one language is required".into()));
    }
    if seq_len == 0 {
        return Err(LensError::InvalidConfig("seq_len must be positive".into()));
    }
    let max_seq = model.spec().max_seq;
    if seq_len > max_seq {
        return Err(LensError::SequenceTooLong { len: seq_len, max_seq });
    }
    Ok(())
}

fn token_streams(
    model: &Model,
    languages: &[String],
    n_seqs: usize,
    seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, Vec<u32>)>> {
    let samplers = (0..languages.len())
        .map(|i| LanguageSampler::new(i, languages.len(), model.spec().vocab_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n_seqs)
        .map(|i| {
            let lang = i % languages.len();
            let ids = (0..seq_len).map(|_| samplers[lang].sample(rng)).collect();
            (lang, ids)
        })
        .collect())
}

/// Generates `n_seqs` sequences (languages assigned round-robin) and captures them.
pub fn synth_multilingual_corpus(
    model: &Model,
    languages: &[String],
    n_seqs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<ActivationSet> {
    check_shape(model, languages, seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ActivationSet::new(model.spec().clone(), languages.to_vec())?;
    for (lang, ids) in token_streams(model, languages, n_seqs, seq_len, &mut rng)? {
        set.push(model.forward_collect(&ids, &languages[lang])?)?;
    }
    Ok(set)
}

/// Hidden generator of a realizable set: `h_n = mix · (h_L − offset)`.
///
/// The exact translator for layer `n` is therefore `(mix⁻¹, offset)`.
#[derive(Debug, Clone)]
pub struct TeacherMap {
    pub layer: usize,
    pub mix: Matrix,
    pub offset: Vec<f64>,
}

/// Distance of the teacher maps from the identity.
///
/// `mix_n = I + (mix/√d)·G` and `offset_n ~ offset · rms(h_L) · N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherScale {
    pub mix: f64,
    pub offset: f64,
}

impl Default for TeacherScale {
    fn default() -> Self {
        Self { mix: 0.3, offset: 0.5 }
    }
}

/// A corpus whose final logits are an exact affine re-projection of every
/// intermediate hidden state, using [`TeacherScale::default`].
///
/// Layer-`L` states and final logits come from the reference model; each
/// intermediate layer is replaced by `mix_n · (h_L − offset_n)`.
pub fn realizable_corpus(
    model: &Model,
    languages: &[String],
    n_seqs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<(ActivationSet, Vec<TeacherMap>)> {
    realizable_corpus_scaled(model, languages, n_seqs, seq_len, seed, TeacherScale::default())
}

/// [`realizable_corpus`] with an explicit teacher distance.
pub fn realizable_corpus_scaled(
    model: &Model,
    languages: &[String],
    n_seqs: usize,
    seq_len: usize,
    seed: u64,
    scale: TeacherScale,
) -> Result<(ActivationSet, Vec<TeacherMap>)> {
    check_shape(model, languages, seq_len)?;
    if !(scale.mix.is_finite() && scale.offset.is_finite() && scale.mix >= 0.0 && scale.offset >= 0.0) {
        return Err(LensError::InvalidConfig(format!(
            "teacher scale must be finite and non-negative, got {scale:?}"
        )));
    }
    let spec = model.spec().clone();
    let d = spec.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streams = token_streams(model, languages, n_seqs, seq_len, &mut rng)?;

    let captured = streams
        .iter()
        .map(|(lang, ids)| model.forward_collect(ids, &languages[*lang]))
        .collect::<Result<Vec<_>>>()?;
    // offsets are sized relative to the typical final-layer state
    let rms = {
        let (mut sum, mut n) = (0.0, 0usize);
        for c in &captured {
            for t in 0..c.len() {
                sum += c.hidden_f64(&spec, spec.n_layers, t).iter().map(|v| v * v).sum::<f64>();
                n += d;
            }
        }
        (sum / n.max(1) as f64).sqrt().max(1e-3)
    };

    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let teachers: Vec<TeacherMap> = (1..spec.n_layers)
        .map(|layer| {
            let mut mix = Matrix::identity(d);
            let s = scale.mix / (d as f64).sqrt();
            for v in mix.as_mut_slice() {
                *v += s * gauss.sample(&mut rng);
            }
            let offset = (0..d).map(|_| scale.offset * rms * gauss.sample(&mut rng)).collect();
            TeacherMap { layer, mix, offset }
        })
        .collect();

    let mut set = ActivationSet::new(spec.clone(), languages.to_vec())?;
    for c in captured {
        let t_len = c.len();
        let mut hidden = c.hidden.clone();
        for t in 0..t_len {
            let h_last = c.hidden_f64(&spec, spec.n_layers, t);
            for teacher in &teachers {
                let shifted: Vec<f64> = h_last.iter().zip(&teacher.offset).map(|(h, o)| h - o).collect();
                let h_n = teacher.mix.matvec(&shifted)?;
                let start = ((teacher.layer - 1) * t_len + t) * d;
                for (dst, v) in hidden[start..start + d].iter_mut().zip(h_n) {
                    *dst = v as f32;
                }
            }
        }
        set.push(CapturedSequence { hidden, ..c })?;
    }
    Ok((set, teachers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn model() -> Model {
        Model::build(ModelSpec {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            vocab_size: 40,
            max_seq: 16,
            final_norm: true,
            seed: 9,
        })
        .unwrap()
    }

    fn tags(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn language_bands_barely_overlap() {
        let m = model();
        let set = synth_multilingual_corpus(&m, &tags(&["bn", "en"]), 200, 16, 4).unwrap();
        let mut hist = vec![vec![0.0f64; 40]; 2];
        for s in set.sequences() {
            let lang = usize::from(s.language == "en");
            for &id in &s.token_ids {
                hist[lang][id as usize] += 1.0;
            }
        }
        for h in &mut hist {
            let total: f64 = h.iter().sum();
            h.iter_mut().for_each(|x| *x /= total);
        }
        let overlap: f64 = hist[0].iter().zip(&hist[1]).map(|(a, b)| a.min(*b)).sum();
        assert!(overlap < 0.10, "overlap {overlap}");
    }

    #[test]
    fn deterministic_and_empty_boundary() {
        let m = model();
        let a = synth_multilingual_corpus(&m, &tags(&["hi"]), 5, 8, 1).unwrap();
        let b = synth_multilingual_corpus(&m, &tags(&["hi"]), 5, 8, 1).unwrap();
        assert_eq!(a, b);
        let empty = synth_multilingual_corpus(&m, &tags(&["hi", "ta"]), 0, 8, 1).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.languages().len(), 2);
    }

    #[test]
    fn too_long_sequences_rejected() {
        assert!(matches!(
            synth_multilingual_corpus(&model(), &tags(&["hi"]), 1, 17, 1),
            Err(LensError::SequenceTooLong { .. })
        ));
        assert!(synth_multilingual_corpus(&model(), &[], 1, 4, 1).is_err());
    }

    #[test]
    fn zero_teacher_scale_copies_last_layer() {
        let m = model();
        let spec = m.spec().clone();
        let zero = TeacherScale { mix: 0.0, offset: 0.0 };
        let (set, _) = realizable_corpus_scaled(&m, &tags(&["hi"]), 2, 5, 3, zero).unwrap();
        let s = &set.sequences()[0];
        for layer in 1..spec.n_layers {
            assert_eq!(s.hidden_f64(&spec, layer, 4), s.hidden_f64(&spec, spec.n_layers, 4));
        }
        for bad in [-0.1, f64::NAN] {
            let scale = TeacherScale { mix: bad, offset: 0.5 };
            assert!(realizable_corpus_scaled(&m, &tags(&["hi"]), 1, 4, 3, scale).is_err());
        }
    }

    #[test]
    fn realizable_teacher_reconstructs_last_layer() {
        let m = model();
        let spec = m.spec().clone();
        let (set, teachers) = realizable_corpus(&m, &tags(&["bn"]), 3, 6, 2).unwrap();
        assert_eq!(teachers.len(), 2);
        // mix · (h_L − offset) reproduces the stored h_n up to f32 rounding
        let s = &set.sequences()[1];
        for teacher in &teachers {
            for t in 0..s.len() {
                let h_last = s.hidden_f64(&spec, spec.n_layers, t);
                let shifted: Vec<f64> = h_last.iter().zip(&teacher.offset).map(|(h, o)| h - o).collect();
                let want = teacher.mix.matvec(&shifted).unwrap();
                let got = s.hidden_f64(&spec, teacher.layer, t);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-3));
                }
            }
        }
    }
}
