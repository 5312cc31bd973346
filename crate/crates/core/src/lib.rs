//! Desk-scale laboratory for connecting a frozen speech-like encoder to a
//! frozen decoder-only language model through a trainable adapter.
//!
//! The crate is organized around seven subsystems:
//!
//! - [`numkernel`]: differentiable numerical kernels (tape autodiff,
//!   parameter store, transformer encoder stack, AdamW, LR schedule,
//!   gradient checking)
//! - [`adapters`]: the five adapter architectures with explicit
//!   sequence-length accounting
//! - [`losses`]: CTC forward-backward loss, CIF quantity loss, LM
//!   cross-entropy, and the weighted composite
//! - [`toystack`]: frozen foundation-model stand-ins, prompts, joining,
//!   greedy generation
//! - [`datasynth`]: synthetic paired feature/text corpora and the FSEQ file
//!   format
//! - [`harness`]: training loop, WER/BLEU, bootstrap significance, grid
//!   runner and report emission
//! - [`cli`]: the `adapter-forge` command-line entry point

pub mod adapters;
pub mod cli;
pub mod datasynth;
pub mod error;
pub mod features;
pub mod harness;
pub mod losses;
pub mod numkernel;
pub mod toystack;

pub use adapters::{Adapter, AdapterKind, AdapterOutput, CifConfig, WlqConfig};
pub use error::{Error, Result};
pub use features::{FeatureSequence, PaddingMask};
pub use numkernel::{EncoderStackConfig, GradReport, Graph, NodeId, ParamStore, ScheduleConfig};
