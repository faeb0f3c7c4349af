//! The change-detection network: primitives with exact gradients, the
//! encoder-decoder, training and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod net;
pub mod ops;
pub mod train;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint};
pub use net::{backward, forward, predict, Block, Direction, LayerSpec, Mode, NetworkConfig, NetworkParams};
pub use ops::{change_probability, l1_loss};
pub use train::{train, TrainConfig, TrainLog, TrainSample};
