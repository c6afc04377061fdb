//! Multimodal machine translation with retrieved images, noise filters and
//! supplementary text. The numeric core is generic over [`Scalar`] (`f32` or
//! `f64`); the `*64` and `*32` aliases below pick one.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod filters;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod querygen;
pub mod retrieval;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use config::{parse_config, ExperimentConfig, Precision};
pub use corpus::{CorpusSplit, SentencePair, SplitName, Vocabulary};
pub use error::{Error, Result};
pub use evaluation::{bleu_corpus, BleuReport, NoiseStats, RunReport};
pub use experiment::{evaluate_checkpoint, run_experiment, RunManifest};
pub use model::{Condition, Model, SentenceVisual, Wiring};
pub use nn::ModelDims;
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Matrix;
pub use training::{train_model, TrainConfig, TrainedModel};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type ParamSet32 = ParamSet<f32>;
