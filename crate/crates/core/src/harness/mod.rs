//! Training, evaluation and benchmark generation.

pub mod batch;
pub mod config;
pub mod eval;
pub mod optim;
pub mod synth;
pub mod trainer;

pub use batch::{batch_composition, DomainBatch, JointBatch, JointSampler};
pub use config::{DomainConfig, Mode, TrainConfig};
pub use eval::{evaluate, evaluate_all, export_embeddings, mean_prediction_entropy, prediction_entropy, Split};
pub use optim::{poly_lr, Sgd};
pub use synth::{generate_synthetic_domains, Generator, SynthClass, SynthDomain, SynthSpec};
pub use trainer::{
    build_prototypes, cap_domains, domain_heads, fit_decoder, load_domains, prepare, pretrain, step_gradients,
    train_universal, LossLine, Prepared, RunDir, StepTerms, TrainOutcome, TrainSummary, UnsupSetup,
};
