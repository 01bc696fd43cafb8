//! Forecasting category flows between time steps with a differentiable
//! Sinkhorn layer, plus baselines, data handling and evaluation.

pub mod baselines;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod ot_layer;

pub use dataio::{FactionTimeline, FlowSeries, MarginalDistribution, TransportPlan};
pub use error::{Error, Result};
pub use linalg::Mat;
pub use ot_layer::{
    sinkhorn_backward, sinkhorn_forward, DoublyStochasticMatrix, PotentialMatrix, SinkhornConfig, SinkhornGradient,
};
