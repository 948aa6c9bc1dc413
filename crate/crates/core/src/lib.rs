//! Inertia distribution mapping from the arrival times of electromechanical
//! frequency disturbances at synchronised measurement stations.
//!
//! The pipeline runs
//! [`tdoa::compute_tdoas`] → [`event::validate_and_interpolate`] →
//! [`inertia::gradient_field`] → [`inertia::speed_field`] →
//! [`inertia::inertia_from_speed`], and [`simulator::simulate`] produces
//! synthetic station data with known inertia for checking it.

pub mod cli;
pub mod event;
pub mod field;
pub mod geo;
pub mod inertia;
pub mod ingest;
pub mod interp;
pub mod simulator;
pub mod tdoa;

pub use event::{validate_and_interpolate, EventEstimate};
pub use field::{GridSpec, ScalarField};
pub use geo::{degree_coefficients, haversine_distance_km, DegreeCoefficients, GeoPoint};
pub use inertia::{ContinuumParams, VectorField};
pub use ingest::{PmuTrace, StationMeta};
pub use interp::{evaluate_on_grid, evaluate_spline, fit_biharmonic_spline, SplineModel};
pub use simulator::{simulate, SimResult, SimScenario};
pub use tdoa::{DetectionConfig, Direction, StationTdoa, TdoaStatus};
