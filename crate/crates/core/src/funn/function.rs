use serde::{Deserialize, Serialize};

use crate::autodiff::Prim;

/// Default safeguard constant of [`FunctionKind::SafeLog`].
pub const SAFE_LOG_K: f64 = 0.01;

/// One of the seven activation functions a mixed-function neuron draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    Sin,
    Cos,
    ExpAbs,
    ExpNegAbs,
    /// `sqrt(|x|)`; the plain square root is undefined for negative inputs.
    Sqrt,
    /// `ln(k + relu(x))`
    SafeLog { k: f64 },
    Identity,
}

impl FunctionKind {
    /// The seven-function library in canonical order.
    pub fn library() -> Vec<FunctionKind> {
        Self::library_with_k(SAFE_LOG_K)
    }

    pub fn library_with_k(k: f64) -> Vec<FunctionKind> {
        vec![
            FunctionKind::Sin,
            FunctionKind::Cos,
            FunctionKind::ExpAbs,
            FunctionKind::ExpNegAbs,
            FunctionKind::Sqrt,
            FunctionKind::SafeLog { k },
            FunctionKind::Identity,
        ]
    }

    pub fn prim(&self) -> Prim {
        match *self {
            FunctionKind::Sin => Prim::Sin,
            FunctionKind::Cos => Prim::Cos,
            FunctionKind::ExpAbs => Prim::ExpAbs,
            FunctionKind::ExpNegAbs => Prim::ExpNegAbs,
            FunctionKind::Sqrt => Prim::SqrtAbs,
            FunctionKind::SafeLog { k } => Prim::SafeLog(k),
            FunctionKind::Identity => Prim::Identity,
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.prim().value(x)
    }

    /// `f(0) != 0`: the function contributes even when its input is pruned away.
    pub fn nonzero_at_origin(&self) -> bool {
        self.apply(0.0) != 0.0
    }

    pub fn name(&self) -> &'static str {
        match self {
            FunctionKind::Sin => "sin",
            FunctionKind::Cos => "cos",
            FunctionKind::ExpAbs => "exp_abs",
            FunctionKind::ExpNegAbs => "exp_neg_abs",
            FunctionKind::Sqrt => "sqrt",
            FunctionKind::SafeLog { .. } => "safe_log",
            FunctionKind::Identity => "identity",
        }
    }
}

pub fn apply_function(kind: FunctionKind, x: f64) -> f64 {
    kind.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        assert_eq!(apply_function(FunctionKind::Sin, 0.0), 0.0);
        let l = apply_function(FunctionKind::SafeLog { k: 0.01 }, -5.0);
        assert!((l - (-4.605170185988091)).abs() < 1e-12);
        let e = apply_function(FunctionKind::ExpNegAbs, -2.0);
        assert!((e - 0.1353352832366127).abs() < 1e-15);
        assert_eq!(apply_function(FunctionKind::Sqrt, -4.0), 2.0);
        assert_eq!(apply_function(FunctionKind::ExpAbs, -1.0), 1f64.exp());
    }

    #[test]
    fn library_has_seven_distinct_kinds() {
        let lib = FunctionKind::library();
        assert_eq!(lib.len(), 7);
        for (i, a) in lib.iter().enumerate() {
            for b in &lib[i + 1..] {
                assert_ne!(a.name(), b.name());
            }
        }
    }

    #[test]
    fn derivatives_finite_on_wide_range() {
        // ExpAbs overflows past |x| ~ 709, so it is checked on its own range.
        for kind in FunctionKind::library() {
            let bound = if kind == FunctionKind::ExpAbs { 700.0 } else { 1e6 };
            let n = 20001;
            for i in 0..n {
                let x = -bound + 2.0 * bound * i as f64 / (n - 1) as f64;
                let d = kind.prim().derivs(x);
                assert!(d[..3].iter().all(|v| v.is_finite()), "{kind:?} at {x}: {d:?}");
            }
            for x in [0.0, 1e-300, -1e-300, 1e-12, -1e-12] {
                let d = kind.prim().derivs(x);
                assert!(d.iter().all(|v| v.is_finite()), "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn serde_names() {
        #[derive(Serialize, Deserialize)]
        struct W {
            f: Vec<FunctionKind>,
        }
        let w: W = toml::from_str("f = [\"sin\", { safe_log = { k = 0.5 } }, \"exp_neg_abs\"]").unwrap();
        assert_eq!(w.f, vec![FunctionKind::Sin, FunctionKind::SafeLog { k: 0.5 }, FunctionKind::ExpNegAbs]);
    }
}
