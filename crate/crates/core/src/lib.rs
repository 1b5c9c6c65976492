// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tuned-lens workbench.
//!
//! Decode a transformer's intermediate hidden states into its output
//! vocabulary, either directly through the logit head (the *logit lens*) or
//! after a learned per-layer affine translator (the *tuned lens*), and compare
//! the two with layer-wise entropy, agreement, rank, and position metrics.
//!
//! The pieces, bottom up:
//!
//! - [`numerics`]: stable softmax, log-softmax, KL divergence, entropy.
//! - [`model`]: a seeded reference transformer that captures the residual
//!   stream after every block; [`activations`] persists those captures and
//!   [`corpus`] generates synthetic multilingual inputs.
//! - [`lens`]: logit and tuned lenses, projection, checkpoints.
//! - [`train`]: forward-KL translator training with exact gradients and Adam.
//! - [`metrics`]: agreement, entropy grids, ranks, position accuracy, deltas.
//! - [`report`]: SVG heatmaps, lens tables, JSON/CSV exports.
//!
//! Layers are numbered `1..=n_layers`; layer `n` is the residual stream after
//! block `n`. All entropies and divergences are in nats.
//!
//! ```
//! use tunedlens::{lens::Lens, model::{Model, ModelSpec}};
//!
//! let model = Model::build(ModelSpec::default()).unwrap();
//! let captured = model.forward_collect(&[3, 1, 4, 1, 5], "en").unwrap();
//! let lens = Lens::identity(model.spec().clone());
//! let h = captured.hidden_f64(model.spec(), 2, 4);
//! let logits = lens.project(model.head(), 2, &h).unwrap();
//! assert_eq!(logits.len(), 64);
//! ```

pub mod activations;
mod container;
pub mod corpus;
pub mod error;
pub mod lens;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod report;
pub mod train;

pub use container::sha256_hex;
pub use error::{LensError, Result};

// The guide's chapters are compiled as doctests so their snippets stay in sync.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/capture.md")]
    mod capture {}
    #[doc = include_str!("../../../book/src/lenses.md")]
    mod lenses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/serve.md")]
    mod serve {}
}
