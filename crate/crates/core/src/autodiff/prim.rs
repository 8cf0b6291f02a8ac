//! Elementwise scalar primitives with derivatives up to third order.
//!
//! Third derivatives are needed because the tape differentiates second-order
//! input jets with respect to parameters.

use serde::{Deserialize, Serialize};

/// Scalar function applied elementwise by [`Var::map`](super::Var::map).
///
/// Kink convention: `|x|` and `ReLU` have derivative 0 at `x = 0` and zero
/// second derivative everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Prim {
    Identity,
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    Relu,
    /// `exp(|x|)`
    ExpAbs,
    /// `exp(-|x|)`
    ExpNegAbs,
    /// `sqrt(|x|)`
    SqrtAbs,
    /// `ln(k + relu(x))`
    SafeLog(f64),
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Prim {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::Identity => "identity",
            Prim::Sin => "sin",
            Prim::Cos => "cos",
            Prim::Exp => "exp",
            Prim::Tanh => "tanh",
            Prim::Abs => "abs",
            Prim::Relu => "relu",
            Prim::ExpAbs => "exp_abs",
            Prim::ExpNegAbs => "exp_neg_abs",
            Prim::SqrtAbs => "sqrt_abs",
            Prim::SafeLog(_) => "safe_log",
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Prim::Identity => x,
            Prim::Sin => x.sin(),
            Prim::Cos => x.cos(),
            Prim::Exp => x.exp(),
            Prim::Tanh => x.tanh(),
            Prim::Abs => x.abs(),
            Prim::Relu => x.max(0.0),
            Prim::ExpAbs => x.abs().exp(),
            Prim::ExpNegAbs => (-x.abs()).exp(),
            Prim::SqrtAbs => x.abs().sqrt(),
            Prim::SafeLog(k) => (k + x.max(0.0)).ln(),
        }
    }

    /// Returns `[f, f', f'', f''']` at `x`.
    #[inline]
    pub fn derivs(&self, x: f64) -> [f64; 4] {
        match *self {
            Prim::Identity => [x, 1.0, 0.0, 0.0],
            Prim::Sin => {
                let (s, c) = x.sin_cos();
                [s, c, -s, -c]
            }
            Prim::Cos => {
                let (s, c) = x.sin_cos();
                [c, -s, -c, s]
            }
            Prim::Exp => {
                let e = x.exp();
                [e, e, e, e]
            }
            Prim::Tanh => {
                let t = x.tanh();
                let d = 1.0 - t * t;
                [t, d, -2.0 * t * d, d * (6.0 * t * t - 2.0)]
            }
            Prim::Abs => [x.abs(), sign(x), 0.0, 0.0],
            Prim::Relu => {
                if x > 0.0 {
                    [x, 1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 0.0, 0.0]
                }
            }
            Prim::ExpAbs => {
                let e = x.abs().exp();
                let s = sign(x);
                [e, e * s, e * s * s, e * s * s * s]
            }
            Prim::ExpNegAbs => {
                let e = (-x.abs()).exp();
                let s = sign(x);
                [e, -e * s, e * s * s, -e * s * s * s]
            }
            Prim::SqrtAbs => {
                let a = x.abs();
                // derivatives blow past f64 range this close to the kink
                if a < 1e-100 {
                    return [a.sqrt(), 0.0, 0.0, 0.0];
                }
                let r = a.sqrt();
                let s = sign(x);
                let h1 = 0.5 / r;
                let h2 = -0.25 / (a * r);
                let h3 = 0.375 / (a * a * r);
                [r, h1 * s, h2 * s * s, h3 * s * s * s]
            }
            Prim::SafeLog(k) => {
                if x > 0.0 {
                    let z = k + x;
                    let inv = 1.0 / z;
                    [z.ln(), inv, -inv * inv, 2.0 * inv * inv * inv]
                } else {
                    [k.ln(), 0.0, 0.0, 0.0]
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [Prim; 11] = [
        Prim::Identity,
        Prim::Sin,
        Prim::Cos,
        Prim::Exp,
        Prim::Tanh,
        Prim::Abs,
        Prim::Relu,
        Prim::ExpAbs,
        Prim::ExpNegAbs,
        Prim::SqrtAbs,
        Prim::SafeLog(0.01),
    ];

    #[test]
    fn derivative_table_matches_central_differences() {
        let h = 1e-5;
        for p in ALL {
            for &x in &[-2.3, -0.7, 0.4, 1.9] {
                let d = p.derivs(x);
                assert_eq!(d[0], p.value(x), "{p:?}");
                for order in 1..4 {
                    let fd = (p.derivs(x + h)[order - 1] - p.derivs(x - h)[order - 1]) / (2.0 * h);
                    let err = (fd - d[order]).abs() / d[order].abs().max(1.0);
                    assert!(err < 1e-6, "{p:?} order {order} at {x}: {fd} vs {}", d[order]);
                }
            }
        }
    }

    #[test]
    fn kinks_use_zero_derivative() {
        for p in [Prim::Abs, Prim::Relu, Prim::ExpAbs, Prim::ExpNegAbs, Prim::SqrtAbs] {
            assert_eq!(p.derivs(0.0)[1], 0.0, "{p:?}");
        }
        assert_eq!(Prim::SafeLog(0.01).derivs(0.0)[1], 0.0);
    }
}
