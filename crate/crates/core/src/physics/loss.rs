use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::problem::{Anchor, Axis, Domain, Jet, ProblemDef, Quantity};
use crate::autodiff::{EvalCtx, JetLayout, Surrogate, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Collocation points, row-major `n x arity`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    pub points: Vec<f64>,
    pub arity: usize,
    pub seed: u64,
    pub domain_id: String,
}

impl CollocationBatch {
    pub fn from_points(points: Vec<f64>, arity: usize) -> Self {
        CollocationBatch { points, arity, seed: 0, domain_id: String::from("explicit") }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.arity
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.arity..(i + 1) * self.arity]
    }
}

/// `n` i.i.d. uniform points over `domain`, deterministic per `seed`.
pub fn sample_collocation(domain: &Domain, n: usize, seed: u64) -> Result<CollocationBatch> {
    if n == 0 {
        return Err(Error::Invalid("collocation count must be at least 1".into()));
    }
    for axis in &domain.axes {
        match axis {
            Axis::Interval { lo, hi } if !(hi > lo) => {
                return Err(Error::Invalid(format!("degenerate sampling interval [{lo}, {hi}]")));
            }
            Axis::Choice(v) if v.is_empty() => return Err(Error::Invalid("empty choice axis".into())),
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n * domain.arity());
    for _ in 0..n {
        for axis in &domain.axes {
            points.push(match axis {
                Axis::Interval { lo, hi } => rng.gen_range(*lo..=*hi),
                Axis::Choice(v) => v[rng.gen_range(0..v.len())],
                Axis::Fixed(x) => *x,
            });
        }
    }
    Ok(CollocationBatch { points, arity: domain.arity(), seed, domain_id: domain.id() })
}

/// Unweighted loss components and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub residual: f64,
    pub icbc: f64,
    pub data: f64,
    pub anchor: f64,
    pub total: f64,
}

impl LossParts {
    /// Residual plus condition error, the model-selection criterion. The
    /// normalization anchor counts as a condition, otherwise a collapsed
    /// well solution would score best.
    pub fn residual_error(&self) -> f64 {
        self.residual + self.icbc + self.anchor
    }
}

fn check_arity(net: &dyn Surrogate, prob: &ProblemDef) -> Result<()> {
    if net.arity() != prob.arity() {
        return Err(Error::Arity { expected: prob.arity(), got: net.arity() });
    }
    Ok(())
}

/// Per-point residual node (one unit, plain values) for `points`.
fn residual_node<'t>(
    tape: &'t Tape,
    net: &dyn Surrogate,
    prob: &ProblemDef,
    points: &[f64],
    ctx: &EvalCtx<'_>,
) -> Result<Var<'t>> {
    let d = prob.arity();
    let wrt = prob.operator.wrt();
    let input = tape.input(points, d, &wrt, 2);
    let out = net.build(tape, input, ctx)?;
    let layout = out.shape().layout;
    let jet = Jet {
        layout,
        comps: (0..layout.width()).map(|c| out.component(c)).collect(),
        x: (0..d).map(|a| input.unit(a).component(0)).collect(),
    };
    let r = prob.operator.residual(&jet);
    if let Some(p) = tape.with_values(r, |v| v.iter().position(|x| !x.is_finite())) {
        return Err(Error::NonFinite { context: format!("residual at point {:?}", &points[p * d..(p + 1) * d]) });
    }
    Ok(r)
}

/// Plain residual values at `points` (row-major), without dropout.
pub fn residual_values(net: &dyn Surrogate, prob: &ProblemDef, points: &[f64]) -> Result<Vec<f64>> {
    check_arity(net, prob)?;
    let tape = Tape::new(net.n_params());
    Ok(residual_node(&tape, net, prob, points, &EvalCtx::default())?.values())
}

/// Mean squared residual over the batch.
pub fn residual_loss<'t>(
    tape: &'t Tape,
    net: &dyn Surrogate,
    prob: &ProblemDef,
    batch: &CollocationBatch,
    ctx: &EvalCtx<'_>,
) -> Result<Var<'t>> {
    check_arity(net, prob)?;
    if batch.is_empty() {
        return Err(Error::Precondition("empty collocation batch".into()));
    }
    Ok(residual_node(tape, net, prob, &batch.points, ctx)?.square().mean_points())
}

/// Sum over conditions of the squared mismatch.
pub fn icbc_loss<'t>(tape: &'t Tape, net: &dyn Surrogate, prob: &ProblemDef) -> Result<Var<'t>> {
    check_arity(net, prob)?;
    let d = prob.arity();
    if prob.icbc.is_empty() {
        return Ok(tape.constant(0.0));
    }
    let mut wrt: Vec<usize> = Vec::new();
    for c in &prob.icbc {
        if let Quantity::Derivative(a) = c.quantity {
            if a >= d {
                return Err(Error::Invalid(format!("derivative condition on axis {a} outside arity {d}")));
            }
            if !wrt.contains(&a) {
                wrt.push(a);
            }
        }
        if c.point.len() != d {
            return Err(Error::Arity { expected: d, got: c.point.len() });
        }
    }
    wrt.sort_unstable();
    let order = usize::from(!wrt.is_empty());
    let layout = JetLayout::new(wrt.len(), order);
    let points: Vec<f64> = prob.icbc.iter().flat_map(|c| c.point.iter().copied()).collect();
    let input = tape.input(&points, d, &wrt, order);
    let out = net.build(tape, input, &EvalCtx::default())?;
    let targets = tape.point_values(prob.icbc.iter().map(|c| c.target).collect());
    let comp_of = |q: Quantity| match q {
        Quantity::Value => 0,
        Quantity::Derivative(a) => layout.d1(wrt.iter().position(|&w| w == a).expect("axis collected")),
    };
    let mut comps: Vec<usize> = prob.icbc.iter().map(|c| comp_of(c.quantity)).collect();
    comps.sort_unstable();
    comps.dedup();
    let mut acc: Option<Var<'t>> = None;
    for c in comps {
        let select: Vec<f64> = prob.icbc.iter().map(|k| if comp_of(k.quantity) == c { 1.0 } else { 0.0 }).collect();
        let term = (out.component(c) - targets).square().mask(select).sum_points();
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    Ok(acc.expect("at least one condition"))
}

/// Mean squared error over supplied data; 0 when there is none.
pub fn data_loss<'t>(tape: &'t Tape, net: &dyn Surrogate, prob: &ProblemDef) -> Result<Var<'t>> {
    check_arity(net, prob)?;
    if prob.data.is_empty() {
        return Ok(tape.constant(0.0));
    }
    let d = prob.arity();
    let points: Vec<f64> = prob.data.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let input = tape.input(&points, d, &[], 0);
    let out = net.build(tape, input, &EvalCtx::default())?;
    let targets = tape.point_values(prob.data.iter().map(|(_, v)| *v).collect());
    Ok((out - targets).square().mean_points())
}

/// Trivial-solution guard; 0 when the problem has none.
pub fn anchor_loss<'t>(tape: &'t Tape, net: &dyn Surrogate, prob: &ProblemDef) -> Result<Var<'t>> {
    check_arity(net, prob)?;
    let Some(Anchor::Normalization { axis, lo, hi, points, target, at }) = &prob.anchor else {
        return Ok(tape.constant(0.0));
    };
    if *points < 2 || at.is_empty() {
        return Err(Error::Invalid("normalization anchor needs at least 2 points and one base point".into()));
    }
    let d = prob.arity();
    let n = *points;
    let h = (hi - lo) / (n - 1) as f64;
    let mut flat = Vec::with_capacity(n * at.len() * d);
    for base in at {
        for k in 0..n {
            let mut p = base.clone();
            p[*axis] = lo + h * k as f64;
            flat.extend(p);
        }
    }
    let input = tape.input(&flat, d, &[], 0);
    let sq = net.build(tape, input, &EvalCtx::default())?.square();
    let mut acc = tape.constant(0.0);
    for inst in 0..at.len() {
        let mut w = vec![0.0; n * at.len()];
        for k in 0..n {
            w[inst * n + k] = if k == 0 || k == n - 1 { h / 2.0 } else { h };
        }
        let integral = sq.mask(w).sum_points();
        acc = acc + (integral - *target).square();
    }
    Ok(acc)
}

/// Weighted sum of all loss terms, with their unweighted values.
pub fn total_loss<'t>(
    tape: &'t Tape,
    net: &dyn Surrogate,
    prob: &ProblemDef,
    batch: &CollocationBatch,
    ctx: &EvalCtx<'_>,
) -> Result<(Var<'t>, LossParts)> {
    let w = prob.weights;
    let r = residual_loss(tape, net, prob, batch, ctx)?;
    let c = icbc_loss(tape, net, prob)?;
    let d = data_loss(tape, net, prob)?;
    let a = anchor_loss(tape, net, prob)?;
    let total = r * w.residual + c * w.icbc + d * w.data + a * w.anchor;
    let parts = LossParts {
        residual: r.scalar(),
        icbc: c.scalar(),
        data: d.scalar(),
        anchor: a.scalar(),
        total: total.scalar(),
    };
    Ok((total, parts))
}

/// How [`loss_and_grad`] splits the residual over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOptions {
    pub exec: Exec,
    /// Collocation points per tape.
    pub chunk: usize,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { exec: Exec::default(), chunk: 128 }
    }
}

/// Total loss and its dense parameter gradient.
///
/// The residual is evaluated chunk by chunk on separate tapes (in parallel
/// when enabled) and reduced in chunk order, so the result does not depend
/// on the execution mode. `dropout` holds full-batch masks per site, laid
/// out `units x points`.
pub fn loss_and_grad(
    net: &dyn Surrogate,
    prob: &ProblemDef,
    batch: &CollocationBatch,
    temperature: f64,
    dropout: Option<&[Vec<f64>]>,
    opts: &LossOptions,
) -> Result<(LossParts, Vec<f64>)> {
    check_arity(net, prob)?;
    if batch.is_empty() {
        return Err(Error::Precondition("empty collocation batch".into()));
    }
    let n = batch.len();
    let d = batch.arity;
    let chunk = opts.chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let w = prob.weights;
    let scale = 1.0 / n as f64;

    let chunk_result = |c: usize| -> Result<(f64, Vec<f64>)> {
        let (start, end) = (c * chunk, ((c + 1) * chunk).min(n));
        let masks: Option<Vec<Vec<f64>>> = dropout.map(|sites| {
            sites
                .iter()
                .map(|m| {
                    let units = m.len() / n;
                    let mut out = Vec::with_capacity(units * (end - start));
                    for u in 0..units {
                        out.extend_from_slice(&m[u * n + start..u * n + end]);
                    }
                    out
                })
                .collect()
        });
        let ctx = EvalCtx { temperature, dropout: masks.as_deref() };
        let tape = Tape::new(net.n_params());
        let r = residual_node(&tape, net, prob, &batch.points[start * d..end * d], &ctx)?;
        let sum = r.square().sum_points();
        let value = sum.scalar();
        let grads = if w.residual != 0.0 { (sum * (w.residual * scale)).backward()? } else { vec![0.0; net.n_params()] };
        Ok((value, grads))
    };
    let results = opts.exec.map_range(n_chunks, chunk_result);

    let tape = Tape::new(net.n_params());
    let c = icbc_loss(&tape, net, prob)?;
    let dl = data_loss(&tape, net, prob)?;
    let a = anchor_loss(&tape, net, prob)?;
    let rest = c * w.icbc + dl * w.data + a * w.anchor;
    let mut grads = rest.backward()?;

    let mut residual = 0.0;
    for res in results {
        let (v, g) = res?;
        residual += v;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    residual *= scale;
    let parts = LossParts {
        residual,
        icbc: c.scalar(),
        data: dl.scalar(),
        anchor: a.scalar(),
        total: w.residual * residual + rest.scalar(),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite { context: "total loss".into() });
    }
    for (i, g) in grads.iter_mut().enumerate() {
        if !net.is_live(i) {
            *g = 0.0;
        }
    }
    Ok((parts, grads))
}

/// Loss components without gradients (no dropout).
pub fn evaluate_loss(net: &dyn Surrogate, prob: &ProblemDef, batch: &CollocationBatch, temperature: f64) -> Result<LossParts> {
    let tape = Tape::new(net.n_params());
    let ctx = EvalCtx { temperature, dropout: None };
    Ok(total_loss(&tape, net, prob, batch, &ctx)?.1)
}
