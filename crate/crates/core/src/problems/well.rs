use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{Anchor, Axis, Condition, Domain, LossWeights, Operator, Oracle, ProblemDef};

/// Infinite well on `[-half_width, half_width]` in units where
/// `-psi'' = E psi`, so the wavenumber is `sqrt(E)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellParams {
    pub half_width: f64,
    /// Candidate `sqrt(E)` values for scans, strictly increasing.
    pub grid: Vec<f64>,
    /// Eigenstates (1-based) used for training.
    pub states: Vec<usize>,
    /// Trapezoid points of the normalization anchor.
    pub anchor_points: usize,
    /// Loss weight of the normalization anchor.
    pub anchor_weight: f64,
}

impl Default for WellParams {
    fn default() -> Self {
        WellParams {
            half_width: 1.0,
            grid: (0..60).map(|i| 1.0 + 6.0 * i as f64 / 59.0).collect(),
            states: vec![2, 3],
            anchor_points: 64,
            anchor_weight: 1.0,
        }
    }
}

impl WellParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0) {
            return Err(Error::Invalid("well half-width must be positive".into()));
        }
        if self.grid.iter().any(|&g| !(g > 0.0)) || self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("energy grid must be positive and strictly increasing".into()));
        }
        if !(self.anchor_weight >= 0.0 && self.anchor_weight.is_finite()) {
            return Err(Error::Invalid("anchor weight must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `sqrt(E_n) = n pi / 2` for the unit half-width well.
pub fn well_eigenvalues(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("eigenstate index starts at 1".into()));
    }
    Ok(n as f64 * FRAC_PI_2)
}

/// Unit-norm eigenfunction `sin(n pi (x + 1) / 2)`.
pub fn well_eigenfunction(n: usize, x: f64) -> f64 {
    (n as f64 * FRAC_PI_2 * (x + 1.0)).sin()
}

/// Well problem over `(x, sqrt_e)` with `sqrt_e` drawn from `values`.
pub fn quantum_well_at(params: &WellParams, values: &[f64]) -> Result<ProblemDef> {
    params.validate()?;
    if values.is_empty() {
        return Err(Error::Invalid("no energies to train on".into()));
    }
    let a = params.half_width;
    let axis = if values.len() == 1 { Axis::Fixed(values[0]) } else { Axis::Choice(values.to_vec()) };
    let mut icbc = Vec::new();
    for &s in values {
        icbc.push(Condition::value(vec![-a, s], 0.0));
        icbc.push(Condition::value(vec![a, s], 0.0));
    }
    let anchor = Anchor::Normalization {
        axis: 0,
        lo: -a,
        hi: a,
        points: params.anchor_points,
        target: 1.0,
        at: values.iter().map(|&s| vec![0.0, s]).collect(),
    };
    let oracle: Arc<dyn Oracle> = Arc::new(move |p: &[f64]| (p[1] * (p[0] + a)).sin());
    Ok(ProblemDef {
        id: "quantum_well".into(),
        inputs: vec!["x".into(), "sqrt_e".into()],
        operator: Operator::Well,
        domain: Domain { axes: vec![Axis::Interval { lo: -a, hi: a }, axis] },
        icbc,
        data: vec![],
        anchor: Some(anchor),
        weights: LossWeights { anchor: params.anchor_weight, ..LossWeights::default() },
        reference: Some(oracle),
    })
}

/// Well problem trained on the configured eigenstates.
pub fn quantum_well(params: &WellParams) -> Result<ProblemDef> {
    let values = params.states.iter().map(|&n| well_eigenvalues(n)).collect::<Result<Vec<_>>>()?;
    quantum_well_at(params, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn eigenvalues() {
        assert!((well_eigenvalues(1).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!((well_eigenvalues(2).unwrap() - PI).abs() < 1e-15);
        assert!((well_eigenvalues(4).unwrap() - 2.0 * PI).abs() < 1e-15);
        assert!(well_eigenvalues(0).is_err());
    }

    #[test]
    fn parity_alternates() {
        for n in 1..=5 {
            for i in 0..=20 {
                let x = -1.0 + 0.1 * i as f64;
                let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
                assert!((well_eigenfunction(n, -x) - sign * well_eigenfunction(n, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_grid_shape() {
        let p = WellParams::default();
        assert_eq!(p.grid.len(), 60);
        assert_eq!((p.grid[0], p.grid[59]), (1.0, 7.0));
        p.validate().unwrap();
        let bad = WellParams { grid: vec![2.0, 1.0], ..p };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn problem_is_consistent() {
        let prob = quantum_well(&WellParams::default()).unwrap();
        prob.validate().unwrap();
        assert_eq!(prob.icbc.len(), 4);
    }
}
