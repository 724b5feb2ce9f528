//! Residual denoising of grayscale images with a small convolutional
//! network, plus the machinery around it: noise synthesis, training,
//! whole-image inference, evaluation reports, and class-aware routing of
//! images to specialized models.
//!
//! The network predicts the corruption rather than the clean image: each
//! layer contributes a single-channel estimate of the remaining error, and
//! the output is the input plus the sum of those contributions. Everything
//! runs on the CPU in `f64`, deterministically for a fixed seed regardless
//! of thread count.
//!
//! Module map:
//!
//! - [`tensor`]: NHWC tensors, 3x3 convolutions (forward and backward),
//!   ReLU, mirror padding, center cropping.
//! - [`noise`]: seeded Gaussian/Poisson corruption and moment estimation.
//! - [`image_io`]: PNG/PGM loading and saving, range conversion.
//! - [`net`]: network configuration, initialization, forward/backward,
//!   model files, per-layer estimate visualization.
//! - [`train`]: patch sampling, masked loss, ADAM, the training loop.
//! - [`eval`]: whole-image denoising, PSNR, evaluation reports, gain
//!   profiles.
//! - [`router`]: image classifier and class-to-model routing.
//! - [`synth`]: deterministic synthetic imagery for demos and tests.
//! - [`cli`]: argument parsing for the `denoise` binary.

pub mod cli;
mod container;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod net;
pub mod noise;
pub mod router;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use eval::{BaselineScores, EvalReport};
pub use image_io::GrayImage;
pub use net::{Network, NetworkConfig, NetworkWeights};
pub use noise::{NoiseSpec, SeededRng};
pub use router::{Classifier, ClassifierConfig, ClassLabel, DenoiserRegistry};
pub use tensor::{ConvParams, Padding, Tensor};
pub use train::{AdamConfig, TrainConfig, TrainOutcome};
