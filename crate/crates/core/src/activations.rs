// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation sets: captured corpora and their dump file format.
//!
//! An activation dump decouples capture from lens training and evaluation.
//! The header records the [`ModelSpec`], the declared language tags, and a
//! per-sequence index (language, length, byte offset, token ids). The payload
//! holds, per sequence, the hidden states (`n_layers × T × d_model`) followed
//! by the final logits (`T × vocab_size`), all as little-endian `f32`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, F32Reader};
use crate::error::{LensError, Result};
use crate::model::{CapturedSequence, ModelSpec};

/// Version written by this build; readers reject anything else.
pub const ACTIVATIONS_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "TUNEDLENS-ACTIVATIONS";

/// A corpus of captured sequences sharing one model spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub spec: ModelSpec,
    languages: Vec<String>,
    sequences: Vec<CapturedSequence>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    languages: Vec<String>,
    sequences: Vec<SequenceEntry>,
}

#[derive(Serialize, Deserialize)]
struct SequenceEntry {
    language: String,
    len: usize,
    offset: u64,
    token_ids: Vec<u32>,
}

impl ActivationSet {
    /// Empty set over the declared language tags.
    pub fn new(spec: ModelSpec, languages: Vec<String>) -> Result<Self> {
        spec.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for tag in &languages {
            if tag.is_empty() || !seen.insert(tag) {
                return Err(LensError::InvalidConfig(format!(
                    "language tags must be non-empty and unique, got {languages:?}"
                )));
            }
        }
        Ok(Self {
            spec,
            languages,
            sequences: Vec::new(),
        })
    }

    /// Appends a sequence after checking its shape and language tag.
    pub fn push(&mut self, seq: CapturedSequence) -> Result<()> {
        seq.validate(&self.spec)?;
        if !self.languages.contains(&seq.language) {
            return Err(LensError::InvalidConfig(format!(
                "language tag {:?} not declared in {:?}",
                seq.language, self.languages
            )));
        }
        self.sequences.push(seq);
        Ok(())
    }

    #[must_use]
    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    #[must_use]
    pub fn sequences(&self) -> &[CapturedSequence] {
        &self.sequences
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total number of `(sequence, position)` pairs.
    #[must_use]
    pub fn n_positions(&self) -> usize {
        self.sequences.iter().map(CapturedSequence::len).sum()
    }

    /// Sequence count per language tag.
    #[must_use]
    pub fn language_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = self.languages.iter().map(|l| (l.clone(), 0)).collect();
        for s in &self.sequences {
            *counts.entry(s.language.clone()).or_default() += 1;
        }
        counts
    }

    /// Keeps only the sequences whose language equals `tag`.
    #[must_use]
    pub fn filter_language(&self, tag: &str) -> Self {
        Self {
            spec: self.spec.clone(),
            languages: vec![tag.to_owned()],
            sequences: self.sequences.iter().filter(|s| s.language == tag).cloned().collect(),
        }
    }

    /// Splits by sequence index: indices where `i % k == k - 1` go to the second set.
    #[must_use]
    pub fn split_every(&self, k: usize) -> (Self, Self) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, s) in self.sequences.iter().enumerate() {
            if k > 0 && i % k == k - 1 {
                b.push(s.clone());
            } else {
                a.push(s.clone());
            }
        }
        let mk = |sequences| Self {
            spec: self.spec.clone(),
            languages: self.languages.clone(),
            sequences,
        };
        (mk(a), mk(b))
    }

    fn payload(&self) -> (Vec<u8>, Vec<SequenceEntry>) {
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(self.sequences.len());
        for s in &self.sequences {
            index.push(SequenceEntry {
                language: s.language.clone(),
                len: s.len(),
                offset: payload.len() as u64,
                token_ids: s.token_ids.clone(),
            });
            container::push_f32s(&mut payload, s.hidden.iter().copied());
            container::push_f32s(&mut payload, s.final_logits.iter().copied());
        }
        (payload, index)
    }

    /// SHA-256 of the float payload as it would be written to disk.
    #[must_use]
    pub fn payload_checksum(&self) -> String {
        container::sha256_hex(&self.payload().0)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let (payload, sequences) = self.payload();
        let header = Header {
            spec: self.spec.clone(),
            languages: self.languages.clone(),
            sequences,
        };
        container::write(path.as_ref(), MAGIC, ACTIVATIONS_FORMAT_VERSION, &header, &payload)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, payload): (Header, _) = container::read(path, MAGIC, ACTIVATIONS_FORMAT_VERSION)?;
        let corrupt = |detail: String| LensError::Corrupt {
            path: path.to_owned(),
            detail,
        };
        let mut set = Self::new(header.spec, header.languages).map_err(|e| corrupt(format!("invalid header: {e}")))?;
        let mut reader = F32Reader::new(&payload);
        let d = set.spec.d_model;
        let (layers, vocab) = (set.spec.n_layers, set.spec.vocab_size);
        for (i, entry) in header.sequences.into_iter().enumerate() {
            if entry.len != entry.token_ids.len() {
                return Err(corrupt(format!("sequence {i}: len disagrees with token ids")));
            }
            let hidden = reader.take(layers * entry.len * d);
            let final_logits = reader.take(entry.len * vocab);
            let (Some(hidden), Some(final_logits)) = (hidden, final_logits) else {
                return Err(corrupt(format!("sequence {i} overruns the payload")));
            };
            set.push(CapturedSequence {
                token_ids: entry.token_ids,
                language: entry.language,
                hidden,
                final_logits,
            })
            .map_err(|e| corrupt(format!("sequence {i}: {e}")))?;
        }
        if reader.remaining() != 0 {
            return Err(corrupt(format!(
                "{} payload bytes not claimed by any sequence",
                reader.remaining()
            )));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn sample_set() -> ActivationSet {
        let spec = ModelSpec {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 12,
            max_seq: 8,
            final_norm: true,
            seed: 3,
        };
        let model = Model::build(spec.clone()).unwrap();
        let mut set = ActivationSet::new(spec, vec!["bn".into(), "en".into()]).unwrap();
        set.push(model.forward_collect(&[1, 2, 3], "bn").unwrap()).unwrap();
        set.push(model.forward_collect(&[4, 5], "en").unwrap()).unwrap();
        set
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        let set = sample_set();
        set.write(&path).unwrap();
        let back = ActivationSet::read(&path).unwrap();
        assert_eq!(back.payload_checksum(), set.payload_checksum());
        assert_eq!(back, set);
    }

    #[test]
    fn truncated_file_reports_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        sample_set().write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(ActivationSet::read(&path), Err(LensError::Truncated { .. })));
    }

    #[test]
    fn version_bump_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        sample_set().write(&path).unwrap();
        let text = std::fs::read(&path).unwrap();
        let s = String::from_utf8_lossy(&text).replacen("\"format_version\":1", "\"format_version\":999", 1);
        // the payload is not valid UTF-8 in general, so patch the header bytes only
        let header_end = s.find("}\n").unwrap() + 2;
        let mut patched = s.as_bytes()[..header_end].to_vec();
        let old_header_end = String::from_utf8_lossy(&text).find("}\n").unwrap() + 2;
        patched.extend_from_slice(&text[old_header_end..]);
        std::fs::write(&path, patched).unwrap();
        assert!(matches!(
            ActivationSet::read(&path),
            Err(LensError::VersionMismatch { found: 999, .. })
        ));
    }

    #[test]
    fn corrupt_header_and_payload_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.bin");
        sample_set().write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x55;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(ActivationSet::read(&path), Err(LensError::Corrupt { .. })));

        let mut garbled = bytes;
        garbled[25] = b'#';
        std::fs::write(&path, &garbled).unwrap();
        assert!(matches!(ActivationSet::read(&path), Err(LensError::Header { .. })));
    }

    #[test]
    fn undeclared_language_rejected() {
        let mut set = sample_set();
        let mut seq = set.sequences()[0].clone();
        seq.language = "ta".into();
        assert!(set.push(seq).is_err());
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let set = ActivationSet::new(ModelSpec::default(), vec!["hi".into()]).unwrap();
        set.write(&path).unwrap();
        let back = ActivationSet::read(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.languages(), ["hi"]);
    }
}
