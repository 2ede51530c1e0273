//! Two-stage sparse keypoint transformer: a coarse pass over large patches,
//! attention-guided promotion of the most relevant patches to finer tokens,
//! and a learned quality gate that lets confident samples exit early.

pub mod autodiff;
pub mod checkpoint;
pub mod coco;
pub mod composer;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flops;
pub mod image;
pub mod ledger;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod runconfig;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use autodiff::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use decoder::{GateDecision, HeatmapSet, Stage};
pub use error::{Error, Result};
pub use flops::{flops_estimate, FlopsBreakdown};
pub use image::ImageTensor;
pub use ledger::{AttentionLedger, SelectionResult};
pub use metrics::{GroundTruth, Keypoint, PoseEstimate};
pub use model::{Inference, Model};
pub use params::{Gradients, ParamId, ParamStore};
pub use runconfig::RunConfig;
pub use synth::{synth_sample, SynthSample};
pub use tensor::Tensor;
pub use tokenizer::{Region, TokenSequence};
pub use training::{LossReport, TrainConfig, Trainer};
