pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod profile;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use config::{FpmConfig, LwamConfig, ModelConfig};
pub use cost::{CostReport, CostRow};
pub use error::{Error, Result};
pub use layers::Ctx;
pub use metrics::{ConfusionCounts, Metrics};
pub use model::Model;
pub use params::{Kind, ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
