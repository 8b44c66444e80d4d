//! Kolmogorov-Arnold networks, Fourier KANs and MLPs as transistor compact
//! models.
//!
//! The crate covers the whole pipeline: a reverse-mode autodiff tape, B-spline
//! edge functions, an analytical FinFET-like surrogate that generates the
//! voltage-grid datasets, the three network families, their training
//! procedures, symbolic regression on trained KANs and the evaluation metrics.
//!
//! Numerical building blocks are generic over [`scalar::Scalar`] (`f32` or
//! `f64`); training, data and symbolic fitting run in `f64`, for which the
//! aliases below are provided.

pub mod config;
pub mod device;
pub mod diffengine;
pub mod evaluate;
pub mod functions;
pub mod linalg;
pub mod networks;
pub mod scalar;
pub mod splines;
pub mod symbolic;
pub mod training;

pub type Tape = diffengine::Tape<f64>;
pub type KnotVector = splines::KnotVector<f64>;
pub type SplineActivation = splines::SplineActivation<f64>;
pub type Network = networks::Network<f64>;
pub type KanLayer = networks::KanLayer<f64>;
pub type FourierLayer = networks::FourierLayer<f64>;
pub type DenseLayer = networks::DenseLayer<f64>;
pub type SparseOp = diffengine::SparseOp<f64>;
