//! Model files, array files, datasets, the two-context simulator and the
//! training loop.

pub mod dataset;
pub mod model;
pub mod npy;
pub mod sim;
pub mod train;

pub use dataset::Dataset;
pub use model::{parse_model, ActShape, LayerKind, LayerSpec, ModelSpec};
pub use npy::{load_array, save_array};
pub use sim::{ExecutionTrace, Mode, Schedule, SimConfig, Simulator};
pub use train::{train, TrainConfig, TrainReport};
