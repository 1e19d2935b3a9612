//! Energy-based generative modeling of bridge facades.
//!
//! A small CNN maps a 48x192 grayscale image to a scalar energy. It is
//! trained with contrastive divergence against samples drawn by Langevin
//! dynamics from a replay buffer, on a procedurally rendered dataset of
//! eight three-span bridge types. A low-dimensional lab checks the sampler
//! against exactly normalized Boltzmann densities.

pub mod boltzmann;
pub mod bridge;
pub mod checkpoint;
pub mod gradcheck;
pub mod langevin;
pub mod net;
pub mod optim;
pub mod pgm;
pub mod replay;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use langevin::{latent_init, langevin_step, run_chain, EnergyLandscape, LangevinConfig, SampleError};
pub use net::{Arch, EnergyNet, NetError};
pub use replay::ReplayBuffer;
pub use tape::{Mode, Tape, Var};
pub use tensor::{Float, Tensor, TensorError};
pub use train::{TrainConfig, TrainError, TrainMetrics, Trainer};
