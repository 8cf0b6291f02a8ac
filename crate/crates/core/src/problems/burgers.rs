use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{EvalCtx, JetLayout, Shape, Surrogate, Tape, Var};
use crate::error::{Error, Result};
use crate::physics::{CollocationBatch, Condition, Domain, LossWeights, Operator, Oracle, ProblemDef};

/// Viscous Burgers on `[x_lo, x_hi] x [t_lo, t_hi]` with
/// `u(x, 0) = -amplitude sin(pi x)` and zero Dirichlet boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersParams {
    pub k: f64,
    pub x_lo: f64,
    pub x_hi: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub amplitude: f64,
    /// Initial-condition points on the x axis.
    pub n_ic: usize,
    /// Boundary points on each side.
    pub n_bc: usize,
}

impl Default for BurgersParams {
    fn default() -> Self {
        BurgersParams {
            k: 0.01 / std::f64::consts::PI,
            x_lo: -1.0,
            x_hi: 1.0,
            t_lo: 0.0,
            t_hi: 1.0,
            amplitude: 1.0,
            n_ic: 32,
            n_bc: 16,
        }
    }
}

impl BurgersParams {
    pub fn initial(&self, x: f64) -> f64 {
        -self.amplitude * (std::f64::consts::PI * x).sin()
    }

    fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0) || !(self.x_hi > self.x_lo) || !(self.t_hi > self.t_lo) {
            return Err(Error::Invalid(format!("invalid Burgers parameters {self:?}")));
        }
        Ok(())
    }
}

/// Burgers problem without a reference attached.
pub fn burgers(params: &BurgersParams) -> Result<ProblemDef> {
    params.validate()?;
    let p = *params;
    let grid = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![lo];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    };
    let mut icbc: Vec<Condition> =
        grid(p.x_lo, p.x_hi, p.n_ic).into_iter().map(|x| Condition::value(vec![x, p.t_lo], p.initial(x))).collect();
    for t in grid(p.t_lo, p.t_hi, p.n_bc) {
        icbc.push(Condition::value(vec![p.x_lo, t], 0.0));
        icbc.push(Condition::value(vec![p.x_hi, t], 0.0));
    }
    Ok(ProblemDef {
        id: "burgers".into(),
        inputs: vec!["x".into(), "t".into()],
        operator: Operator::Burgers { k: p.k },
        domain: Domain::boxed(&[(p.x_lo, p.x_hi), (p.t_lo, p.t_hi)]),
        icbc,
        data: vec![],
        anchor: None,
        weights: LossWeights::default(),
        reference: None,
    })
}

/// Resolution of the finite-difference reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersGrid {
    /// Spatial intervals.
    pub nx: usize,
    /// Time step; `None` picks 80% of the stability bound.
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Spacing of stored snapshots.
    pub dt_out: f64,
}

impl Default for BurgersGrid {
    fn default() -> Self {
        BurgersGrid { nx: 2048, dt: None, t_end: 2.0, dt_out: 0.01 }
    }
}

/// Largest RK4 step that keeps both the diffusive and advective central
/// difference spectra inside the stability region.
pub fn burgers_stability_bound(params: &BurgersParams, dx: f64) -> f64 {
    let umax = params.amplitude.abs().max(1e-12);
    let diffusive = 4.0 * params.k / (dx * dx);
    let advective = umax / dx;
    1.0 / (diffusive / 2.78 + advective / 2.82)
}

/// Reference field on a uniform grid, stored at snapshot times.
#[derive(Debug, Clone)]
pub struct BurgersField {
    pub x_lo: f64,
    pub dx: f64,
    pub nx: usize,
    pub dt_out: f64,
    /// `snapshots[j][i]` is `u(x_lo + i dx, j dt_out)`.
    pub snapshots: Vec<Vec<f64>>,
}

impl BurgersField {
    pub fn x(&self, i: usize) -> f64 {
        self.x_lo + self.dx * i as f64
    }

    pub fn t_end(&self) -> f64 {
        self.dt_out * (self.snapshots.len() - 1) as f64
    }

    /// Bilinear interpolation, clamped to the grid.
    pub fn sample(&self, x: f64, t: f64) -> f64 {
        let fx = ((x - self.x_lo) / self.dx).clamp(0.0, self.nx as f64);
        let ft = (t / self.dt_out).clamp(0.0, (self.snapshots.len() - 1) as f64);
        let (i, j) = ((fx.floor() as usize).min(self.nx - 1), (ft.floor() as usize).min(self.snapshots.len().saturating_sub(2)));
        let (ax, at) = (fx - i as f64, ft - j as f64);
        let row = |j: usize| {
            let s = &self.snapshots[j.min(self.snapshots.len() - 1)];
            s[i] * (1.0 - ax) + s[i + 1] * ax
        };
        if self.snapshots.len() == 1 {
            return row(0);
        }
        row(j) * (1.0 - at) + row(j + 1) * at
    }

    /// Interior grid nodes `(x_i, t_j)` with `0 < t_j < t_max`, every
    /// `x_stride`-th node and `t_stride`-th snapshot.
    pub fn node_batch(&self, x_stride: usize, t_stride: usize, t_max: f64) -> CollocationBatch {
        let mut pts = Vec::new();
        for j in (t_stride..self.snapshots.len() - 1).step_by(t_stride.max(1)) {
            let t = self.dt_out * j as f64;
            if t >= t_max {
                break;
            }
            for i in (x_stride..self.nx).step_by(x_stride.max(1)) {
                pts.extend([self.x(i), t]);
            }
        }
        CollocationBatch::from_points(pts, 2)
    }

    /// Writes `config_hash,x,t,u` rows, keeping every `stride`-th grid node.
    pub fn write_csv<W: Write>(&self, config_hash: &str, out: W, stride: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config_hash", "x", "t", "u"])?;
        for (j, snap) in self.snapshots.iter().enumerate() {
            let t = self.dt_out * j as f64;
            for i in (0..=self.nx).step_by(stride.max(1)) {
                w.write_record([config_hash.to_string(), format!("{}", self.x(i)), format!("{t}"), format!("{}", snap[i])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl Oracle for BurgersField {
    fn eval(&self, point: &[f64]) -> f64 {
        self.sample(point[0], point[1])
    }
}

/// Parameter-free surrogate serving the reference field, with input
/// derivatives taken by central differences at the grid spacing.
#[derive(Debug, Clone)]
pub struct FieldSurrogate {
    field: Arc<BurgersField>,
}

impl FieldSurrogate {
    pub fn new(field: Arc<BurgersField>) -> Self {
        FieldSurrogate { field }
    }

    fn jet(&self, x: f64, t: f64, axes: &[usize], layout: JetLayout) -> Vec<f64> {
        let f = &self.field;
        let h = [f.dx, f.dt_out];
        let at = |dx: f64, dt: f64| f.sample(x + dx, t + dt);
        let step = |axis: usize, s: f64| if axis == 0 { (s * h[0], 0.0) } else { (0.0, s * h[1]) };
        let mut out = vec![0.0; layout.width()];
        out[0] = at(0.0, 0.0);
        for (c, i) in layout.firsts() {
            let (a, b) = step(axes[i], 1.0);
            out[c] = (at(a, b) - at(-a, -b)) / (2.0 * h[axes[i]]);
        }
        for (c, i, j) in layout.seconds() {
            let (ai, aj) = (axes[i], axes[j]);
            out[c] = if ai == aj {
                let (a, b) = step(ai, 1.0);
                (at(a, b) - 2.0 * out[0] + at(-a, -b)) / (h[ai] * h[ai])
            } else {
                let (a1, b1) = step(ai, 1.0);
                let (a2, b2) = step(aj, 1.0);
                (at(a1 + a2, b1 + b2) - at(a1 - a2, b1 - b2) - at(a2 - a1, b2 - b1) + at(-a1 - a2, -b1 - b2))
                    / (4.0 * h[ai] * h[aj])
            };
        }
        out
    }
}

impl Surrogate for FieldSurrogate {
    fn arity(&self) -> usize {
        2
    }

    fn n_params(&self) -> usize {
        0
    }

    fn build<'t>(&self, tape: &'t Tape, input: Var<'t>, _ctx: &EvalCtx<'_>) -> crate::error::Result<Var<'t>> {
        let s = input.shape();
        let data = input.values();
        // recover which input axis each derivative slot was seeded along
        let axes: Vec<usize> = s
            .layout
            .firsts()
            .map(|(c, _)| (0..s.units).find(|&u| data[s.at(u, c, 0)] == 1.0).unwrap_or(0))
            .collect();
        let out_shape = Shape::new(1, s.layout, s.points);
        let mut out = vec![0.0; out_shape.len()];
        for p in 0..s.points {
            let jet = self.jet(data[s.at(0, 0, p)], data[s.at(1, 0, p)], &axes, s.layout);
            for (c, v) in jet.into_iter().enumerate() {
                out[out_shape.at(0, c, p)] = v;
            }
        }
        Ok(tape.leaf(out_shape, out))
    }
}

fn rhs(u: &[f64], k: f64, dx: f64, out: &mut [f64]) {
    let n = u.len();
    out[0] = 0.0;
    out[n - 1] = 0.0;
    let (c1, c2) = (1.0 / (2.0 * dx), k / (dx * dx));
    for i in 1..n - 1 {
        out[i] = -u[i] * (u[i + 1] - u[i - 1]) * c1 + (u[i + 1] - 2.0 * u[i] + u[i - 1]) * c2;
    }
}

/// Central differences in space, classical RK4 in time.
pub fn burgers_reference(params: &BurgersParams, grid: &BurgersGrid) -> Result<BurgersField> {
    params.validate()?;
    if grid.nx < 2 || !(grid.t_end >= 0.0) || !(grid.dt_out > 0.0) {
        return Err(Error::Invalid(format!("invalid reference grid {grid:?}")));
    }
    let dx = (params.x_hi - params.x_lo) / grid.nx as f64;
    let bound = burgers_stability_bound(params, dx);
    let dt = match grid.dt {
        Some(dt) if dt > bound => {
            return Err(Error::Unstable(format!("time step {dt:e} exceeds the RK4 stability bound {bound:e} at dx = {dx:e}")));
        }
        Some(dt) if !(dt > 0.0) => return Err(Error::Invalid(format!("time step must be positive, got {dt}"))),
        Some(dt) => dt,
        None => 0.8 * bound,
    };
    // whole number of steps per snapshot
    let per_out = (grid.dt_out / dt).ceil().max(1.0) as usize;
    let h = grid.dt_out / per_out as f64;
    let n_out = (grid.t_end / grid.dt_out).round() as usize;
    let n = grid.nx + 1;
    let mut u: Vec<f64> = (0..n).map(|i| params.initial(params.x_lo + dx * i as f64)).collect();
    u[0] = 0.0;
    u[n - 1] = 0.0;
    let mut snapshots = Vec::with_capacity(n_out + 1);
    snapshots.push((0..n).map(|i| params.initial(params.x_lo + dx * i as f64)).collect());
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for _ in 0..n_out {
        for _ in 0..per_out {
            rhs(&u, params.k, dx, &mut k1);
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * h * k1[i];
            }
            rhs(&tmp, params.k, dx, &mut k2);
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * h * k2[i];
            }
            rhs(&tmp, params.k, dx, &mut k3);
            for i in 0..n {
                tmp[i] = u[i] + h * k3[i];
            }
            rhs(&tmp, params.k, dx, &mut k4);
            for i in 0..n {
                u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if let Some(bad) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("Burgers reference at node {bad}") });
        }
        snapshots.push(u.clone());
    }
    Ok(BurgersField { x_lo: params.x_lo, dx, nx: grid.nx, dt_out: grid.dt_out, snapshots })
}

/// Burgers problem with its finite-difference reference attached.
pub fn burgers_with_reference(params: &BurgersParams, grid: &BurgersGrid) -> Result<(ProblemDef, Arc<BurgersField>)> {
    let field = Arc::new(burgers_reference(params, grid)?);
    let mut prob = burgers(params)?;
    prob.reference = Some(field.clone());
    Ok((prob, field))
}

/// Grid-refinement study at time `t`: max errors of the `nx` and `2 nx`
/// solutions on the coarse nodes against an `8 nx` run, and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub coarse_error: f64,
    pub fine_error: f64,
    pub ratio: f64,
}

pub fn burgers_convergence(params: &BurgersParams, nx: usize, t: f64) -> Result<Convergence> {
    let finest = 8 * nx;
    let dx = (params.x_hi - params.x_lo) / finest as f64;
    let dt = 0.8 * burgers_stability_bound(params, dx);
    let run = |m: usize| burgers_reference(params, &BurgersGrid { nx: m, dt: Some(dt), t_end: t, dt_out: t });
    let (a, b, r) = (run(nx)?, run(2 * nx)?, run(finest)?);
    let last = |f: &BurgersField| f.snapshots.last().expect("snapshot").clone();
    let (ua, ub, ur) = (last(&a), last(&b), last(&r));
    let mut ea: f64 = 0.0;
    let mut eb: f64 = 0.0;
    for i in 0..=nx {
        ea = ea.max((ua[i] - ur[8 * i]).abs());
        eb = eb.max((ub[2 * i] - ur[8 * i]).abs());
    }
    Ok(Convergence { coarse_error: ea, fine_error: eb, ratio: ea / eb })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_starts_at_initial_profile() {
        let p = BurgersParams::default();
        let f = burgers_reference(&p, &BurgersGrid { nx: 64, dt: None, t_end: 0.1, dt_out: 0.05 }).unwrap();
        for i in 0..=64 {
            assert_eq!(f.snapshots[0][i], p.initial(f.x(i)));
            assert_eq!(f.sample(f.x(i), 0.0), p.initial(f.x(i)));
        }
    }

    #[test]
    fn diffusion_shrinks_amplitude() {
        let p = BurgersParams { k: 0.5, ..Default::default() };
        let f = burgers_reference(&p, &BurgersGrid { nx: 128, dt: None, t_end: 1.0, dt_out: 0.1 }).unwrap();
        let max = |s: &Vec<f64>| s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max(f.snapshots.last().unwrap()) < max(&f.snapshots[0]));
    }

    #[test]
    fn unstable_step_rejected_with_bound() {
        let p = BurgersParams::default();
        let err = burgers_reference(&p, &BurgersGrid { nx: 256, dt: Some(0.5), t_end: 1.0, dt_out: 0.5 }).unwrap_err();
        assert!(matches!(err, Error::Unstable(_)));
        assert!(err.to_string().contains("bound"));
    }

    #[test]
    fn second_order_in_space() {
        let p = BurgersParams { k: 0.1, ..Default::default() };
        let c = burgers_convergence(&p, 32, 0.5).unwrap();
        assert!((3.5..=4.5).contains(&c.ratio), "{c:?}");
    }

    #[test]
    fn conditions_sit_on_the_boundary() {
        let prob = burgers(&BurgersParams::default()).unwrap();
        prob.validate().unwrap();
        assert_eq!(prob.icbc.len(), 32 + 2 * 16);
        assert!(prob.icbc.iter().all(|c| c.point[1] == 0.0 || c.point[0].abs() == 1.0));
    }

    #[test]
    fn csv_export_has_header() {
        let p = BurgersParams::default();
        let f = burgers_reference(&p, &BurgersGrid { nx: 16, dt: None, t_end: 0.02, dt_out: 0.01 }).unwrap();
        let mut buf = Vec::new();
        f.write_csv("h", &mut buf, 4).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("config_hash,x,t,u\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 5);
    }
}
