//! A two-level probabilistic matcher with frozen random features, learnable
//! flow decoders and uncertainty heads, and hand-written gradients.

pub mod correlation;
pub mod features;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod train;

pub use correlation::{correlate, CorrelationMode, CorrelationVolume};
pub use features::{extract_features, FrozenFeatures};
pub use loss::{masked_multiscale_nll, LevelTarget};
pub use network::{
    backward, correlation_uncertainty_forward, forward, forward_cached, predict, DensePrediction, LevelGradient,
    LevelPrediction, ModelConfig, ModelWeights,
};
pub use tensor::Tensor;
pub use train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainReport, TrainSample};
