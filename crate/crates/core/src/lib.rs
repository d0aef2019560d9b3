//! Langevin dynamics activation maximization.
//!
//! The crate contains a small CPU tensor library with hand-written layer
//! gradients, MNIST ingestion, a LeNet classifier and trainer, image-prior
//! regularizers, and the samplers that draw inputs which strongly activate a
//! chosen neuron.

pub mod adversarial;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod frame;
pub mod gradcheck;
pub mod gradsuite;
pub mod grid;
pub mod layers;
pub mod model;
pub mod optim;
pub mod probe;
pub mod reference;
pub mod regularizers;
pub mod sampler;
pub mod stats;
pub mod targets;
pub mod tensor;
pub mod train;

pub use adversarial::{AdversarialConfig, AdversarialLoop, Flow, OuterReport};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{load_mnist, LabeledDataset, Split};
pub use error::{LdamError, Result};
pub use frame::{FrameMessage, FrameParams};
pub use layers::{LayerSpec, Padding};
pub use model::{
    build_discriminator, build_lenet, Checkpoint, CheckpointMeta, ModelArch, NeuronRef, Stage,
};
pub use optim::RmsPropConfig;
pub use regularizers::{RegularizerKind, RegularizerSpec};
pub use sampler::{
    BurnInConfig, Chain, SamplerConfig, SamplerMode, SamplerState, StepInfo, StepSchedule,
};
pub use targets::{NeuronObjective, Objective};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainOutput};
