//! Grid navigation on synthetic crater terrain: map generation, expert
//! planning, and convolutional policies trained to imitate the planner.

pub mod canny;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod models;
pub mod nav;
pub mod oracle;
pub mod render;
pub mod tensor;
pub mod terrain;
pub mod train;

pub use error::{Error, Result};
pub use nav::{ActionId, Cell, NavState, NavWorld, StepResult, Terminal};
pub use oracle::{distance_field, optimal_action, sample_trajectory, value_iteration, DistanceField, ExpertTrajectory, ValueField};
pub use terrain::{encode_input, generate_terrain, InputEncoding, Raster, TerrainMap, TerrainParams};
pub use dataset::{build_dataset, Dataset, DatasetConfig, Split, Task};
pub use eval::{evaluate, EvalReport, OraclePolicy, Policy, RandomPolicy, StartMode};
pub use models::{Arch, ModelSpec, Network};
pub use train::{train, MetricsRecord, TrainConfig, TrainOutcome};
