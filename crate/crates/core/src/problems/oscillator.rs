use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{Condition, Domain, LossWeights, Operator, Oracle, ProblemDef};

/// `m x'' + gamma x' + k x = f0 sin(omega t)`, `x(0) = x0`, `x'(0) = v0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatorParams {
    pub m: f64,
    pub gamma: f64,
    pub k: f64,
    pub f0: f64,
    pub omega: f64,
    pub x0: f64,
    pub v0: f64,
}

impl OscillatorParams {
    pub fn damped() -> Self {
        OscillatorParams { m: 1.0, gamma: 0.1, k: 1.0, f0: 0.0, omega: 0.0, x0: 1.0, v0: 0.0 }
    }

    pub fn forced() -> Self {
        OscillatorParams { f0: 1.0, omega: 0.9, ..Self::damped() }
    }

    fn operator(&self) -> Operator {
        Operator::Oscillator { m: self.m, gamma: self.gamma, k: self.k, f0: self.f0, omega: self.omega }
    }

    fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) {
            return Err(Error::Invalid(format!("oscillator mass must be positive, got {}", self.m)));
        }
        Ok(())
    }

    /// Steady-state coefficients `(a, b)` of `a sin(omega t) + b cos(omega t)`.
    pub fn particular(&self) -> (f64, f64) {
        if self.f0 == 0.0 {
            return (0.0, 0.0);
        }
        let p = self.k - self.m * self.omega * self.omega;
        let q = self.gamma * self.omega;
        let det = p * p + q * q;
        (self.f0 * p / det, -self.f0 * q / det)
    }

    /// Steady-state amplitude `f0 / sqrt((k - m w^2)^2 + (gamma w)^2)`.
    pub fn steady_amplitude(&self) -> f64 {
        let (a, b) = self.particular();
        a.hypot(b)
    }
}

fn oscillator_problem(id: &str, params: &OscillatorParams, t_max: f64) -> Result<ProblemDef> {
    params.validate()?;
    if !(t_max > 0.0) {
        return Err(Error::Invalid(format!("training horizon must be positive, got {t_max}")));
    }
    let oracle = OscillatorOracle::new(*params).ok().map(|o| Arc::new(o) as Arc<dyn Oracle>);
    Ok(ProblemDef {
        id: id.into(),
        inputs: vec!["t".into()],
        operator: params.operator(),
        domain: Domain::interval(0.0, t_max),
        icbc: vec![Condition::value(vec![0.0], params.x0), Condition::derivative(vec![0.0], 0, params.v0)],
        data: vec![],
        anchor: None,
        weights: LossWeights::default(),
        reference: oracle,
    })
}

/// Unforced oscillator trained on `[0, t_max]`.
pub fn damped_oscillator(params: &OscillatorParams, t_max: f64) -> Result<ProblemDef> {
    if params.f0 != 0.0 {
        return Err(Error::Precondition("damped oscillator takes no forcing".into()));
    }
    oscillator_problem("damped_oscillator", params, t_max)
}

/// Sinusoidally forced oscillator trained on `[0, t_max]`.
pub fn forced_oscillator(params: &OscillatorParams, t_max: f64) -> Result<ProblemDef> {
    if params.f0 == 0.0 {
        return Err(Error::Precondition("forced oscillator needs nonzero forcing".into()));
    }
    oscillator_problem("forced_oscillator", params, t_max)
}

/// Closed-form underdamped solution.
#[derive(Debug, Clone, Copy)]
pub struct OscillatorOracle {
    params: OscillatorParams,
    decay: f64,
    omega_d: f64,
    a: f64,
    b: f64,
    c_cos: f64,
    c_sin: f64,
}

impl OscillatorOracle {
    pub fn new(params: OscillatorParams) -> Result<Self> {
        params.validate()?;
        let OscillatorParams { m, gamma, k, omega, x0, v0, .. } = params;
        if gamma * gamma >= 4.0 * m * k {
            return Err(Error::Precondition("oscillator is not underdamped".into()));
        }
        let decay = gamma / (2.0 * m);
        let omega_d = (k / m - decay * decay).sqrt();
        let (a, b) = params.particular();
        // transient absorbs what the steady state leaves of the initial data
        let c_cos = x0 - b;
        let c_sin = (v0 - a * omega + decay * c_cos) / omega_d;
        Ok(OscillatorOracle { params, decay, omega_d, a, b, c_cos, c_sin })
    }

    pub fn at(&self, t: f64) -> f64 {
        let w = self.params.omega;
        let transient = (-self.decay * t).exp() * (self.c_cos * (self.omega_d * t).cos() + self.c_sin * (self.omega_d * t).sin());
        transient + self.a * (w * t).sin() + self.b * (w * t).cos()
    }
}

impl Oracle for OscillatorOracle {
    fn eval(&self, point: &[f64]) -> f64 {
        self.at(point[0])
    }
}

/// Closed-form solution at `t`; rejects overdamped parameters.
pub fn oscillator_reference(params: &OscillatorParams, t: f64) -> Result<f64> {
    Ok(OscillatorOracle::new(*params)?.at(t))
}

/// Classical RK4 integration of the oscillator from 0 to `t`.
pub fn oscillator_rk4(params: &OscillatorParams, t: f64, dt: f64) -> f64 {
    let OscillatorParams { m, gamma, k, f0, omega, x0, v0 } = *params;
    let accel = |t: f64, x: f64, v: f64| (f0 * (omega * t).sin() - gamma * v - k * x) / m;
    let steps = (t / dt).round() as usize;
    let h = if steps == 0 { 0.0 } else { t / steps as f64 };
    let (mut x, mut v) = (x0, v0);
    for i in 0..steps {
        let s = i as f64 * h;
        let (k1x, k1v) = (v, accel(s, x, v));
        let (k2x, k2v) = (v + 0.5 * h * k1v, accel(s + 0.5 * h, x + 0.5 * h * k1x, v + 0.5 * h * k1v));
        let (k3x, k3v) = (v + 0.5 * h * k2v, accel(s + 0.5 * h, x + 0.5 * h * k2x, v + 0.5 * h * k2v));
        let (k4x, k4v) = (v + h * k3v, accel(s + h, x + h * k3x, v + h * k3v));
        x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_starts_at_x0() {
        assert_eq!(oscillator_reference(&OscillatorParams::damped(), 0.0).unwrap(), 1.0);
        let f = OscillatorParams::forced();
        assert!((oscillator_reference(&f, 0.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn damped_decay_over_five_periods() {
        let t = 2.0 * std::f64::consts::PI * 5.0;
        let x = oscillator_reference(&OscillatorParams::damped(), t).unwrap();
        let env = (-0.05 * t).exp();
        assert!((x.abs() - env).abs() < 0.05 * env, "{x} vs {env}");
    }

    #[test]
    fn closed_form_matches_rk4() {
        for p in [OscillatorParams::damped(), OscillatorParams::forced()] {
            for &t in &[0.5, 3.7, 12.0, 29.9] {
                let a = oscillator_reference(&p, t).unwrap();
                let b = oscillator_rk4(&p, t, 1e-3);
                assert!((a - b).abs() < 1e-6, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rounded_closed_form_is_close() {
        let p = OscillatorParams::damped();
        for i in 0..=500 {
            let t = i as f64 * 0.1;
            let x = oscillator_reference(&p, t).unwrap();
            let approx = (t + std::f64::consts::FRAC_PI_2).sin() * (-0.05 * t).exp();
            assert!((x - approx).abs() <= 0.025 * (-0.05 * t).exp() * (1.0 + t), "t={t}");
        }
    }

    #[test]
    fn overdamped_rejected() {
        let p = OscillatorParams { gamma: 3.0, ..OscillatorParams::damped() };
        assert!(oscillator_reference(&p, 1.0).is_err());
    }

    #[test]
    fn resonance_amplitude() {
        let near = OscillatorParams::forced();
        let far = OscillatorParams { omega: 5.0, ..near };
        assert!(far.steady_amplitude() < near.steady_amplitude());
        let p = near.k - near.m * near.omega.powi(2);
        let expect = near.f0 / (p * p + (near.gamma * near.omega).powi(2)).sqrt();
        assert!((near.steady_amplitude() - expect).abs() < 1e-14);
    }

    #[test]
    fn constructors_check_forcing() {
        assert!(damped_oscillator(&OscillatorParams::forced(), 20.0).is_err());
        assert!(forced_oscillator(&OscillatorParams::damped(), 20.0).is_err());
        let p = damped_oscillator(&OscillatorParams::damped(), 20.0).unwrap();
        p.validate().unwrap();
    }
}
