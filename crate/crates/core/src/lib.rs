//! Nested variational sequence prediction on a toy world model, with the
//! single-level baselines it is compared against and exact checks of the
//! likelihood bounds behind it.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64` tensors.

pub mod autodiff;
pub mod baselines;
pub mod bounds;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod reference;
pub mod report;
pub mod training;
pub mod vae2;
pub mod worldmodel;

pub use autodiff::{GradCheckReport, Tape, Tensor, Var};
pub use baselines::{BaselineKind, BaselineModel};
pub use checkpoint::{train_model, Checkpoint, ModelKind, TrainedModel};
pub use error::{Error, Result};
pub use eval::{BestOfNCurve, DiversityStats, Predictor};
pub use nn::{MlpConfig, MlpParams, OutputActivation};
pub use optim::{AdamConfig, AdamState};
pub use report::{evaluate_record, EvalRecord, EvalSettings, ScatterItem};
pub use training::{LossBreakdown, TrainingHistory, Vae2Config};
pub use vae2::Vae2Model;
pub use worldmodel::{Dataset, SequenceSample, WorldConfig};
