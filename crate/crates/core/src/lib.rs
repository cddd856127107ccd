//! Dynamic class-aware prompt selection and prompt-guided feature focusing.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and small nn blocks.
//! * [`embedding`]: the category library, its embedding table and the
//!   on-disk fixture format.
//! * [`dcp`]: per-image prompt selection by iterative category filtering and
//!   average-linkage clustering.
//! * [`pff`]: the prompt-guided feature focuser adapter and its checkpoints.
//! * [`harness`]: a frozen mock backbone, a toy segmentation task, AdamW and
//!   the training/evaluation loop.
//! * [`gradcheck`], [`config`], [`cli`]: verification and batch entry points.

pub mod tensor;
pub mod embedding;
pub mod dcp;
pub mod pff;
pub mod harness;
pub mod gradcheck;
pub mod config;
pub mod cli;
