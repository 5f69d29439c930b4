//! Self-supervised pretraining for user behavior sequences.
//!
//! A student behavior encoder turns multi-ID behaviors into embeddings, which
//! are mean-pooled per day and fed to a causal transformer. A predictor maps
//! every position's output to the pooled teacher embedding of the following
//! prediction window. The teacher is an exponential moving average of the
//! student and never receives gradients.
//!
//! Everything runs on a small f64 reverse-mode autodiff engine in [`tensor`].

pub mod baselines;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod run;
pub mod seqmodel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
