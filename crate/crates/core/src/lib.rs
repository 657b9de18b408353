//! Unsupervised video domain adaptation with a frozen spatial teacher.
//!
//! The pipeline has three stages:
//!
//! 1. masked teacher distillation on unlabeled target videos
//!    ([`objectives::umt_loss`], [`pipeline::run_stage1`]),
//! 2. supervised fine-tuning on labeled source videos
//!    ([`objectives::sft_loss`], [`pipeline::run_stage2`]),
//! 3. collaborative self-training where student and teacher jointly
//!    produce target pseudolabels ([`pseudolabel`], [`objectives::cst_loss`],
//!    [`pipeline::run_stage3`]).
//!
//! Everything runs on a small CPU autodiff core ([`tensor`]) so the whole
//! pipeline, including ablations, fits on a laptop.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io_util;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod pseudolabel;
pub mod sampling;
pub mod teacher;
pub mod tensor;
pub mod video;
pub mod vit;

pub use config::StageConfig;
pub use error::{Error, Result};
pub use masking::{AttentionMap, DisjointMaskSet, TokenMask};
pub use pipeline::{TeacherBundle, TrainState};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use video::{Domain, VideoClip};
pub use vit::{FeatureStack, StudentModel, ViTConfig};
