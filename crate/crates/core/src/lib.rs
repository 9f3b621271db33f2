//! Radially symmetric numerics for L¹-critical aggregation-diffusion equations
//! `u_t + ∇·(u ∇(K ∗ u)) = Δu^m`.

pub mod closed_forms;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod fields;
pub mod geometry;
pub mod kernels;
pub mod quadrature;
pub mod solver;

pub use closed_forms::{BarenblattProfile, SimilarityFrame, StationaryProfile};
pub use entropy::EntropyReport;
pub use error::{Error, Result};
pub use fields::{DensityField, RadialGrid, RescaleMode};
pub use kernels::{InteractionKernel, KernelFamily, KernelSpec, LqNorm, RadialConvolutionOperator};
pub use solver::{simulate, DiagnosticsSeries, SolverConfig, TerminationStatus};
pub use experiment::{fit_rate, lambda_sweep, run_scenario, RateFit, ScenarioConfig, SweepResult};
