//! Generative universal adversarial perturbations against a sinc-filter
//! speaker recognizer.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: `f64` tensors, a reverse-mode tape, Adam.
//! * [`corpus`]: WAV I/O, a synthetic multi-speaker corpus, slicing.
//! * [`victim`]: the sinc-filter classifier, its training and checkpoints.
//! * [`attacker`]: the noise-to-perturbation generator.
//! * [`objectives`]: hinge rewards, distortion and the UAP training loop.
//! * [`evaluation`]: SER/PTR/SNR/PESQ, baselines and sweeps.
//! * [`config`]: the resolved run configuration shared by the CLI.

pub mod attacker;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod victim;

mod error;

pub use attacker::{Generator, GeneratorConfig, NoiseVector, Perturbation};
pub use config::RunConfig;
pub use corpus::{CorpusIndex, Waveform};
pub use error::{Error, Result};
pub use evaluation::{AttackReport, Goal};
pub use numerics::Tensor;
pub use objectives::{AttackConfig, AttackMode, TrainLog};
pub use victim::{VictimConfig, VictimModel};
