//! The benchmark problems and their reference solutions.

mod burgers;
mod oscillator;
mod well;

pub use burgers::{
    burgers, burgers_convergence, burgers_reference, burgers_stability_bound, burgers_with_reference, BurgersField,
    FieldSurrogate,
    BurgersGrid, BurgersParams, Convergence,
};
pub use oscillator::{
    damped_oscillator, forced_oscillator, oscillator_reference, oscillator_rk4, OscillatorOracle, OscillatorParams,
};
pub use well::{quantum_well, quantum_well_at, well_eigenfunction, well_eigenvalues, WellParams};
