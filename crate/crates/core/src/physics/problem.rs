use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Field, JetLayout, JetValue};
use crate::error::{Error, Result};

/// Sampling rule of one input axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Interval { lo: f64, hi: f64 },
    /// Uniform draw from a finite set.
    Choice(Vec<f64>),
    Fixed(f64),
}

impl Axis {
    pub fn contains(&self, v: f64) -> bool {
        match self {
            Axis::Interval { lo, hi } => (*lo..=*hi).contains(&v),
            Axis::Choice(vals) => vals.contains(&v),
            Axis::Fixed(x) => *x == v,
        }
    }
}

/// Axis-aligned box (with fixed or discrete axes allowed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub axes: Vec<Axis>,
}

impl Domain {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Domain { axes: vec![Axis::Interval { lo, hi }] }
    }

    pub fn boxed(bounds: &[(f64, f64)]) -> Self {
        Domain { axes: bounds.iter().map(|&(lo, hi)| Axis::Interval { lo, hi }).collect() }
    }

    pub fn arity(&self) -> usize {
        self.axes.len()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.arity() && self.axes.iter().zip(point).all(|(a, &v)| a.contains(v))
    }

    /// Stable identifier used to tag batches.
    pub fn id(&self) -> String {
        let parts: Vec<String> = self
            .axes
            .iter()
            .map(|a| match a {
                Axis::Interval { lo, hi } => format!("[{lo},{hi}]"),
                Axis::Choice(v) => format!("{v:?}"),
                Axis::Fixed(x) => format!("{{{x}}}"),
            })
            .collect();
        parts.join("x")
    }
}

/// What an initial/boundary condition constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Value,
    Derivative(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub point: Vec<f64>,
    pub target: f64,
    pub quantity: Quantity,
}

impl Condition {
    pub fn value(point: Vec<f64>, target: f64) -> Self {
        Condition { point, target, quantity: Quantity::Value }
    }

    pub fn derivative(point: Vec<f64>, axis: usize, target: f64) -> Self {
        Condition { point, target, quantity: Quantity::Derivative(axis) }
    }
}

/// Penalty keeping a solution away from the trivial zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// `(trapezoid integral of u^2 along axis - target)^2`, once per base
    /// point (its `axis` coordinate is ignored).
    Normalization { axis: usize, lo: f64, hi: f64, points: usize, target: f64, at: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub residual: f64,
    pub icbc: f64,
    pub data: f64,
    pub anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { residual: 1.0, icbc: 1.0, data: 1.0, anchor: 1.0 }
    }
}

/// Differential operator whose residual is driven to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Operator {
    /// `m u'' + gamma u' + k u - f0 sin(omega t)`, input `t`.
    Oscillator { m: f64, gamma: f64, k: f64, f0: f64, omega: f64 },
    /// `u_t + u u_x - k u_xx`, inputs `(x, t)`.
    Burgers { k: f64 },
    /// `-psi'' - s^2 psi`, inputs `(x, s)` with `s = sqrt(E)`.
    Well,
}

/// Output jet components and input coordinates, as reals or tape nodes.
#[derive(Debug, Clone)]
pub struct Jet<T> {
    pub layout: JetLayout,
    /// Indexed like [`JetLayout`] components.
    pub comps: Vec<T>,
    /// Input coordinates, one per axis.
    pub x: Vec<T>,
}

impl<T: Field> Jet<T> {
    pub fn u(&self) -> T {
        self.comps[0].clone()
    }

    /// First derivative along derivative slot `i`.
    pub fn d1(&self, i: usize) -> T {
        self.comps[self.layout.d1(i)].clone()
    }

    pub fn d2(&self, i: usize, j: usize) -> T {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.comps[self.layout.d2(i, j)].clone()
    }
}

impl Jet<f64> {
    pub fn from_value(jet: &JetValue, x: &[f64], wrt: &[usize]) -> Self {
        let layout = JetLayout::new(wrt.len(), 2);
        let mut comps = vec![0.0; layout.width()];
        comps[0] = jet.value;
        for (c, i) in layout.firsts() {
            comps[c] = jet.d1(wrt[i]);
        }
        for (c, i, j) in layout.seconds() {
            comps[c] = jet.d2(wrt[i], wrt[j]);
        }
        Jet { layout, comps, x: x.to_vec() }
    }
}

impl Operator {
    pub fn arity(&self) -> usize {
        match self {
            Operator::Oscillator { .. } => 1,
            Operator::Burgers { .. } | Operator::Well => 2,
        }
    }

    /// Input axes the residual differentiates along; slots follow this order.
    pub fn wrt(&self) -> Vec<usize> {
        match self {
            Operator::Oscillator { .. } | Operator::Well => vec![0],
            Operator::Burgers { .. } => vec![0, 1],
        }
    }

    pub fn residual<T: Field>(&self, j: &Jet<T>) -> T {
        match *self {
            Operator::Oscillator { m, gamma, k, f0, omega } => {
                let r = j.d2(0, 0) * m + j.d1(0) * gamma + j.u() * k;
                if f0 != 0.0 {
                    r - (j.x[0].clone() * omega).sin() * f0
                } else {
                    r
                }
            }
            Operator::Burgers { k } => j.d1(1) + j.u() * j.d1(0) - j.d2(0, 0) * k,
            Operator::Well => {
                let s = j.x[1].clone();
                -j.d2(0, 0) - s.clone() * s * j.u()
            }
        }
    }
}

/// Reference solution queried pointwise.
pub trait Oracle: Send + Sync {
    fn eval(&self, point: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Oracle for F {
    fn eval(&self, point: &[f64]) -> f64 {
        self(point)
    }
}

/// A differential equation with its conditions, data and reference.
#[derive(Clone)]
pub struct ProblemDef {
    pub id: String,
    pub inputs: Vec<String>,
    pub operator: Operator,
    pub domain: Domain,
    pub icbc: Vec<Condition>,
    pub data: Vec<(Vec<f64>, f64)>,
    pub anchor: Option<Anchor>,
    pub weights: LossWeights,
    pub reference: Option<Arc<dyn Oracle>>,
}

impl fmt::Debug for ProblemDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemDef")
            .field("id", &self.id)
            .field("operator", &self.operator)
            .field("domain", &self.domain)
            .field("icbc", &self.icbc.len())
            .field("data", &self.data.len())
            .field("reference", &self.reference.is_some())
            .finish()
    }
}

impl ProblemDef {
    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    /// Checks arities and that every condition lies in the domain closure.
    pub fn validate(&self) -> Result<()> {
        let d = self.arity();
        if self.operator.arity() != d || self.domain.arity() != d {
            return Err(Error::Invalid(format!("problem '{}' mixes arities", self.id)));
        }
        for c in &self.icbc {
            if let Quantity::Derivative(a) = c.quantity {
                if a >= d {
                    return Err(Error::Invalid(format!("derivative condition on axis {a} outside arity {d}")));
                }
            }
            if !self.domain.contains(&c.point) {
                return Err(Error::Invalid(format!("condition point {:?} outside the domain", c.point)));
            }
        }
        Ok(())
    }

    /// Sets the domain and rebuilds nothing else; callers adjust conditions.
    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn reference_at(&self, point: &[f64]) -> Option<f64> {
        self.reference.as_ref().map(|r| r.eval(point))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oscillator_residual_of_square() {
        // u = t^2 at t = 1: u'' + 0.1 u' + u = 2 + 0.2 + 1
        let op = Operator::Oscillator { m: 1.0, gamma: 0.1, k: 1.0, f0: 0.0, omega: 0.0 };
        let jet = Jet { layout: JetLayout::new(1, 2), comps: vec![1.0, 2.0, 2.0], x: vec![1.0] };
        assert!((op.residual(&jet) - 3.2).abs() < 1e-15);
    }

    #[test]
    fn domain_membership() {
        let d = Domain { axes: vec![Axis::Interval { lo: -1.0, hi: 1.0 }, Axis::Choice(vec![2.0, 3.0])] };
        assert!(d.contains(&[1.0, 3.0]));
        assert!(!d.contains(&[1.0, 2.5]));
        assert!(!d.contains(&[1.1, 2.0]));
    }
}
