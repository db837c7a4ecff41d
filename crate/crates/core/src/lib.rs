//! Cooperative PPO agents whose individual state values are diffused over
//! randomly sampled communication graphs and mixed into one total value.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure
//! computation: graph shift algebra, a small reverse-mode MLP substrate,
//! the stochastic graph neural network, the monotone value mixer, the PPO
//! losses, a deterministic mixed-autonomy traffic simulator and the
//! training loop. File formats and the command line live in the `svmix`
//! crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod sgnn;
pub mod traffic;
pub mod trainer;
pub mod vmix;

pub use error::{Error, Result};
pub use graph::{Graph, SamplerConfig, ShiftSample, ShiftVariant};
pub use linalg::Matrix;
pub use nn::{Activation, Adam, AdamConfig, MlpSpec, ParamStore};
pub use sgnn::{FilterBank, Readout, SgnnOutput};
pub use traffic::{ScenarioConfig, ScenarioKind, StepResult, World};
pub use trainer::{Model, ModelConfig, TrainConfig, Trainer};
pub use vmix::Mixer;
