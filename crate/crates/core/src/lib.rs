//! Indoor electromagnetic field reconstruction with Gaussian processes.

pub mod cli;
pub mod error;
pub mod evalsel;
pub mod field_sim;
pub mod geometry;
pub mod gp;
pub mod hyper_opt;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod meanfn;
pub mod net;
pub mod optim;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Point = geometry::Point<f64>;
pub type Model = gp::TrainedModel<f64>;
pub type Kernel = kernels::KernelSpec<f64>;
pub type Mean = meanfn::MeanSpec<f64>;
pub type Dataset = field_sim::FieldDataset<f64>;
