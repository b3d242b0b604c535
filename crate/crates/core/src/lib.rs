//! Probabilistic underwater image enhancement.
//!
//! A conditional variational autoencoder learns a distribution over enhanced
//! images. Latent draws set per-channel feature statistics through
//! probabilistic adaptive instance normalization (PAdaIN), and consensus
//! operators reduce a set of samples to a single output.

pub mod archive;
pub mod consensus;
pub mod datagen;
pub mod distributions;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod padain;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use consensus::{mc_estimate, mp_estimate, mp_mode, quality_select, SampleSet};
pub use distributions::{DiagonalGaussian, EnhancementDistribution, LatentSample};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use losses::{LossParts, LossWeights, PerceptualConfig};
pub use metrics::{MetricReport, MetricValues};
pub use network::{Branch, LatentNoise, Model, NetworkConfig, OutputRange, PriorContext};
pub use params::{ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
pub use trainer::{train, PairedDataset, ReferencePolicy, TrainConfig, TrainingRecord};
