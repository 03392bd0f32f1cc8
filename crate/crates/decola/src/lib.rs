//! Language-conditioned two-stage detection transformer, offline pseudo-labeling,
//! and open-vocabulary finetuning, with conditioned-AP evaluation — all on a
//! deterministic synthetic shapes dataset that runs on a CPU in minutes.
//!
//! The pipeline has two training phases plus an offline labeling step between
//! them:
//!
//! 1. **Phase 1** trains a detector whose first-stage query selection and
//!    second-stage score are conditioned on class-name embeddings; every class
//!    present in an image receives its own query budget, and matching is
//!    per class, so classes never compete for queries.
//! 2. **Pseudo-labeling** runs the Phase 1 model over weakly-labeled images
//!    (image tags, no boxes) at several resolutions and keeps the most
//!    confident box per tag per resolution.
//! 3. **Phase 2** finetunes the detector as an ordinary multi-class
//!    open-vocabulary detector on the union of human boxes and pseudo-boxes,
//!    conditioning selection on a generic "an object" embedding.
//!
//! Module map: [`geometry`] (boxes and box costs), [`vocabulary`] (class
//! embeddings), [`encoder`] (image → multi-scale grid), [`selection`]
//! (objectness scoring and top-k), [`decoder`] (block self-attention, box
//! refinement, heads), [`matching`] (Hungarian matching and losses),
//! [`pseudolabel`], [`evaluation`] (AP / conditioned AP / conditioned recall),
//! [`data`] (synthetic dataset + manifests), [`harness`] (training loops,
//! config, checkpoints, reports).

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod matching;
pub mod model;
pub mod nn;
pub mod pseudolabel;
pub mod runtime;
pub mod selection;
pub mod vocabulary;

pub use error::{DecolaError, Result};
