//! Melnikov functions and event-driven verification of limit cycles in
//! planar piecewise-smooth Hamiltonian systems.

pub mod bifurcation;
pub mod cli;
pub mod field;
pub mod melnikov;
pub mod ode;
pub mod orbit;
pub mod presets;
pub mod quad;
pub mod roots;
pub mod simulator;

pub use field::{Expression, ScalarField};

pub use orbit::{OrbitTrace, SectionPoint, Zone};
pub use melnikov::{MelnikovSample, PiecewiseSystem};
