//! Sparse-view CT reconstruction with metal in the field of view: fan-beam
//! projector, sample simulation, an unrolled dual-domain solver with learned
//! (optionally rotation-equivariant) proximal networks, training and evaluation.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod conv;
pub mod equivariant;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod linop;
pub mod metrics;
pub mod nn;
pub mod projector;
pub mod scalar;
pub mod simulate;
pub mod solver;
pub mod tensor_io;
pub mod train;

pub type Image64 = imaging::Image<f64>;
pub type Image32 = imaging::Image<f32>;
pub type Sinogram64 = projector::Sinogram<f64>;
pub type Sinogram32 = projector::Sinogram<f32>;
pub type Projector64 = projector::FanBeamProjector<f64>;
pub type Projector32 = projector::FanBeamProjector<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type SampleRecord64 = simulate::SampleRecord<f64>;
pub type SampleRecord32 = simulate::SampleRecord<f32>;
pub type SolverContext64 = solver::SolverContext<f64>;
