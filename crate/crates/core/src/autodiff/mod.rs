//! Exact input derivatives up to order 2 and parameter gradients of losses
//! built from them.
//!
//! Input derivatives are carried forward as jets; parameter gradients come
//! from a reverse sweep over the jet computation recorded on a [`Tape`].

mod layout;
mod prim;
mod tape;

use std::collections::BTreeMap;
use std::ops::{Add, Mul, Neg, Sub};

pub use layout::{JetLayout, Shape};
pub use prim::Prim;
pub use tape::{AffineSpec, NodeId, Tape, Var};

use crate::error::{Error, Result};

/// Per-evaluation switches that alter a network's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EvalCtx<'a> {
    /// Softmax temperature for mixing layers in softmax mode.
    pub temperature: f64,
    /// One `units x points` keep/scale mask per dropout site, in layer order.
    pub dropout: Option<&'a [Vec<f64>]>,
}

impl Default for EvalCtx<'_> {
    fn default() -> Self {
        EvalCtx { temperature: 1.0, dropout: None }
    }
}

/// Anything that can record its forward pass on a tape: trained models and
/// hand-written test stubs alike.
pub trait Surrogate: Sync {
    fn arity(&self) -> usize;

    fn n_params(&self) -> usize;

    /// `input` has one unit per input axis; the result must have one unit.
    fn build<'t>(&self, tape: &'t Tape, input: Var<'t>, ctx: &EvalCtx<'_>) -> Result<Var<'t>>;

    /// Whether parameter `i` is live (not pruned).
    fn is_live(&self, _i: usize) -> bool {
        true
    }
}

/// Closure-backed surrogate, mostly for tests and oracle stubs. The closure
/// receives one node per input axis and one node per parameter.
pub struct FnSurrogate<F> {
    arity: usize,
    params: Vec<f64>,
    f: F,
}

impl<F> FnSurrogate<F>
where
    F: for<'t> Fn(&[Var<'t>], &[Var<'t>]) -> Var<'t> + Sync,
{
    pub fn new(arity: usize, params: Vec<f64>, f: F) -> Self {
        FnSurrogate { arity, params, f }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }
}

impl<F> Surrogate for FnSurrogate<F>
where
    F: for<'t> Fn(&[Var<'t>], &[Var<'t>]) -> Var<'t> + Sync,
{
    fn arity(&self) -> usize {
        self.arity
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn build<'t>(&self, tape: &'t Tape, input: Var<'t>, _ctx: &EvalCtx<'_>) -> Result<Var<'t>> {
        let xs: Vec<Var<'t>> = (0..self.arity).map(|i| input.unit(i)).collect();
        let ps: Vec<Var<'t>> = self.params.iter().enumerate().map(|(i, &v)| tape.param(i, v)).collect();
        let out = (self.f)(&xs, &ps);
        // constant stubs come back without the batch's point dimension
        let s = input.shape();
        if out.shape().points != s.points || out.shape().layout != s.layout {
            let zero = tape.leaf(Shape::new(1, s.layout, s.points), vec![0.0; s.width() * s.points]);
            return Ok(zero + out);
        }
        Ok(out)
    }
}

/// Network output at one point with exact input derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct JetValue {
    pub value: f64,
    pub d1: BTreeMap<usize, f64>,
    /// Symmetric: both `(i, j)` and `(j, i)` are present.
    pub d2: BTreeMap<(usize, usize), f64>,
}

impl JetValue {
    /// A seeded input variable: value `x`, unit derivative along itself.
    pub fn variable(axis: usize, x: f64) -> Self {
        JetValue { value: x, d1: BTreeMap::from([(axis, 1.0)]), d2: BTreeMap::new() }
    }

    pub fn d1(&self, axis: usize) -> f64 {
        self.d1.get(&axis).copied().unwrap_or(0.0)
    }

    pub fn d2(&self, a: usize, b: usize) -> f64 {
        self.d2.get(&(a, b)).copied().unwrap_or(0.0)
    }

    fn from_components(comps: &[f64], layout: JetLayout, wrt: &[usize]) -> Self {
        let mut jet = JetValue { value: comps[0], d1: BTreeMap::new(), d2: BTreeMap::new() };
        for (c, i) in layout.firsts() {
            jet.d1.insert(wrt[i], comps[c]);
        }
        for (c, i, j) in layout.seconds() {
            jet.d2.insert((wrt[i], wrt[j]), comps[c]);
            jet.d2.insert((wrt[j], wrt[i]), comps[c]);
        }
        jet
    }
}

/// Evaluates `net` at `point` with exact derivatives along `wrt` up to `order`.
pub fn eval_jet(net: &dyn Surrogate, point: &[f64], wrt: &[usize], order: usize) -> Result<JetValue> {
    if order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if point.len() != net.arity() {
        return Err(Error::Arity { expected: net.arity(), got: point.len() });
    }
    let mut seen = wrt.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != wrt.len() || wrt.iter().any(|&a| a >= point.len()) {
        return Err(Error::Invalid(format!("derivative axes {wrt:?} invalid for arity {}", point.len())));
    }
    let tape = Tape::new(net.n_params());
    let input = tape.input(point, point.len(), wrt, order);
    let out = net.build(&tape, input, &EvalCtx::default())?;
    let layout = out.shape().layout;
    let comps = out.values();
    if !comps[0].is_finite() {
        return Err(Error::NonFinite { context: format!("network output at {point:?}") });
    }
    Ok(JetValue::from_components(&comps, layout, wrt))
}

/// Gradient over live parameters, in canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub live: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamGradient {
    pub fn from_dense(net: &dyn Surrogate, dense: &[f64]) -> Self {
        let live: Vec<usize> = (0..net.n_params()).filter(|&i| net.is_live(i)).collect();
        let values = live.iter().map(|&i| dense[i]).collect();
        ParamGradient { live, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Full-length vector with zeros at masked slots.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&i, &g) in self.live.iter().zip(&self.values) {
            out[i] = g;
        }
        out
    }
}

/// Reverse accumulation of `d loss / d theta` for every live parameter of `net`.
pub fn grad_params(loss: Var<'_>, net: &dyn Surrogate) -> Result<ParamGradient> {
    let dense = loss.backward()?;
    Ok(ParamGradient::from_dense(net, &dense))
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` records a scalar function of the parameter nodes it is handed.
pub fn check_gradients<F>(f: F, x0: &[f64], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |x: &[f64]| -> Result<(f64, Tape)> {
        let tape = Tape::new(x.len());
        let value = {
            let params: Vec<Var<'_>> = x.iter().enumerate().map(|(i, &v)| tape.param(i, v)).collect();
            f(&tape, &params).scalar()
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("objective at {x:?}") });
        }
        Ok((value, tape))
    };
    let (_, tape) = eval(x0)?;
    let kink = tape.min_kink_distance();
    if kink < 10.0 * h {
        return Err(Error::Precondition(format!(
            "point lies {kink:e} from a kink; finite differences need at least {:e}",
            10.0 * h
        )));
    }
    let root = Var::last(&tape);
    let analytic = tape.backward(root)?;
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let fd = (eval(&xp)?.0 - eval(&xm)?.0) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}

/// Arithmetic shared by tape nodes and plain floats, so differential
/// operators are written once and evaluated either way.
pub trait Field:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
}

impl Field for f64 {
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
}

impl<'t> Field for Var<'t> {
    fn sin(&self) -> Self {
        Var::sin(self)
    }
    fn cos(&self) -> Self {
        Var::cos(self)
    }
}
