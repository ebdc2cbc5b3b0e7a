// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge-conflict probing toolkit.
//!
//! Trains token-level conflict probes on cached hidden states, aggregates
//! their outputs to span and sample level, scans depth for the layers where
//! conflicts are encoded, and applies inference-time interventions
//! (contrastive decoding, representation steering, probe-guided control).
//!
//! ## Modules
//!
//! - [`trace`]: trace data model and the on-disk container
//! - [`synth`]: synthetic traces with planted conflict geometry and a toy decoder
//! - [`probe`]: linear and MLP probes, `.cpb` files
//! - [`train`]: weighted cross-entropy training with AdamW
//! - [`metrics`]: AUC, Recall@FPR, confusion matrices, SS/CR/CAC/CCI
//! - [`aggregate`]: Span-Max, sample-level aggregation, corpus profiles
//! - [`scan`]: per-layer probe curves and head activation ratios
//! - [`intervention`]: VCD, steering, probe-guided control, decode harness
//! - [`judge`]: claim verdict aggregation, voting, span alignment
//! - [`cli`]: command-line dispatch and the HTML report

pub mod aggregate;
pub mod cli;
pub mod error;
pub mod intervention;
pub mod judge;
pub mod metrics;
pub mod probe;
pub mod scan;
pub mod synth;
pub mod trace;
pub mod train;
mod util;

pub use error::{Error, Result};
pub use trace::{ConflictLabel, ObjectiveConflict, Span, Tensor3, Trace};
