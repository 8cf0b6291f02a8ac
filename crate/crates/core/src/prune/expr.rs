use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::funn::{FunctionKind, LayerSpec, Model, Term, Variant};
use crate::physics::{Axis, Domain};

/// Symbolic form of a network output.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Input by axis index.
    Var(usize),
    Add(Vec<Expr>),
    Mul(Vec<Expr>),
    Apply(FunctionKind, Box<Expr>),
}

impl Expr {
    pub fn constant(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Add(ts) => ts.iter().map(|t| t.eval(x)).sum(),
            Expr::Mul(fs) => fs.iter().map(|f| f.eval(x)).product(),
            Expr::Apply(k, a) => k.apply(a.eval(x)),
        }
    }

    /// Folds constants, flattens nested sums and products, and drops zero
    /// terms and unit factors. Constant factors lead a product; a constant
    /// term closes a sum.
    pub fn simplify(self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) => self,
            Expr::Apply(k, a) => match a.simplify() {
                Expr::Const(c) => Expr::Const(k.apply(c)),
                inner => Expr::Apply(k, Box::new(inner)),
            },
            Expr::Add(ts) => {
                let mut c = 0.0;
                let mut rest = Vec::new();
                for t in ts.into_iter().map(Expr::simplify) {
                    match t {
                        Expr::Const(v) => c += v,
                        Expr::Add(inner) => {
                            for u in inner {
                                match u {
                                    Expr::Const(v) => c += v,
                                    other => rest.push(other),
                                }
                            }
                        }
                        other => rest.push(other),
                    }
                }
                if c != 0.0 || rest.is_empty() {
                    rest.push(Expr::Const(c));
                }
                if rest.len() == 1 {
                    rest.pop().expect("one term")
                } else {
                    Expr::Add(rest)
                }
            }
            Expr::Mul(fs) => {
                let mut c = 1.0;
                let mut rest = Vec::new();
                for f in fs.into_iter().map(Expr::simplify) {
                    match f {
                        Expr::Const(v) => c *= v,
                        Expr::Mul(inner) => {
                            for u in inner {
                                match u {
                                    Expr::Const(v) => c *= v,
                                    other => rest.push(other),
                                }
                            }
                        }
                        other => rest.push(other),
                    }
                }
                if c == 0.0 || rest.is_empty() {
                    return Expr::Const(c);
                }
                if c != 1.0 {
                    rest.insert(0, Expr::Const(c));
                }
                if rest.len() == 1 {
                    rest.pop().expect("one factor")
                } else {
                    Expr::Mul(rest)
                }
            }
        }
    }
}

/// Composes the surviving terms of a mixed-function model into a tree.
pub fn extract_expression(model: &Model) -> Result<Expr> {
    if !matches!(model.spec.variant, Variant::MixFunn | Variant::Mix2Funn) {
        return Err(Error::Architecture(format!(
            "expression extraction supports mixed-function models, not {}",
            model.spec.variant.name()
        )));
    }
    let mut units: Vec<Expr> = (0..model.spec.arity())
        .map(|i| {
            let s = model.spec.scale_of(i);
            if s == 1.0 {
                Expr::Var(i)
            } else {
                Expr::Mul(vec![Expr::Const(s), Expr::Var(i)])
            }
        })
        .collect();
    for (l, layer) in model.spec.layers.iter().enumerate() {
        units = match layer {
            LayerSpec::Functions { functions } => units
                .into_iter()
                .enumerate()
                .map(|(u, s)| Expr::Apply(functions[u % functions.len()], Box::new(s)).simplify())
                .collect(),
            LayerSpec::Tanh => {
                return Err(Error::Architecture("tanh layers have no symbolic form here".into()));
            }
            _ => {
                let rows = model.weighted_terms(l).expect("weighted layer");
                let weights = model.effective_row_weights(l, model.meta.temperature)?;
                rows.iter()
                    .zip(&weights)
                    .map(|(row, w)| {
                        let terms = row
                            .iter()
                            .zip(w)
                            .filter(|(_, &v)| v != 0.0)
                            .map(|(&(_, t), &v)| match t {
                                Term::Bias => Expr::Const(v),
                                Term::Linear(i) => Expr::Mul(vec![Expr::Const(v), units[i].clone()]),
                                Term::Pair(i, j) => Expr::Mul(vec![Expr::Const(v), units[j].clone(), units[i].clone()]),
                            })
                            .collect();
                        Expr::Add(terms).simplify()
                    })
                    .collect()
            }
        };
    }
    Ok(units.pop().expect("single output unit"))
}

/// Largest `|expr(x) - model(x)|` over `n` uniform points of `domain`.
pub fn verify_expression(expr: &Expr, model: &Model, domain: &Domain, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = domain.arity();
    let mut pts = Vec::with_capacity(n * d);
    for _ in 0..n {
        for axis in &domain.axes {
            pts.push(match axis {
                Axis::Interval { lo, hi } => rng.gen_range(*lo..=*hi),
                Axis::Choice(v) => v[rng.gen_range(0..v.len())],
                Axis::Fixed(v) => *v,
            });
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    let out = model.forward_batch(&pts)?;
    Ok(out
        .iter()
        .enumerate()
        .map(|(k, y)| (expr.eval(&pts[k * d..(k + 1) * d]) - y).abs())
        .fold(0.0, f64::max))
}

fn number(c: f64, digits: usize) -> String {
    let s = format!("{c:.digits$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// Infix text with constants rounded to `digits` decimals. Display only.
pub fn render(expr: &Expr, names: &[String], digits: usize) -> String {
    let digits = digits.max(1);
    match expr {
        Expr::Const(c) => number(*c, digits),
        Expr::Var(i) => names.get(*i).cloned().unwrap_or_else(|| format!("x{i}")),
        Expr::Add(ts) => {
            let mut out = String::new();
            for (k, t) in ts.iter().enumerate() {
                let s = render(t, names, digits);
                if k == 0 {
                    out.push_str(&s);
                } else if let Some(neg) = s.strip_prefix('-') {
                    out.push_str(" - ");
                    out.push_str(neg);
                } else {
                    out.push_str(" + ");
                    out.push_str(&s);
                }
            }
            out
        }
        Expr::Mul(fs) => {
            let mut parts: Vec<String> = Vec::new();
            let mut k = 0;
            while k < fs.len() {
                // runs of an identical factor render as a power
                let mut run = 1;
                while k + run < fs.len() && fs[k + run] == fs[k] && !matches!(fs[k], Expr::Const(_)) {
                    run += 1;
                }
                let base = match &fs[k] {
                    Expr::Add(_) => format!("({})", render(&fs[k], names, digits)),
                    other => render(other, names, digits),
                };
                parts.push(if run > 1 { format!("{base}^{run}") } else { base });
                k += run;
            }
            if parts.first().is_some_and(|p| p == "-1") && parts.len() > 1 {
                return format!("-{}", parts[1..].join("·"));
            }
            parts.join("·")
        }
        Expr::Apply(kind, a) => {
            let inner = render(a, names, digits);
            match kind {
                FunctionKind::Sin => format!("sin({inner})"),
                FunctionKind::Cos => format!("cos({inner})"),
                FunctionKind::ExpAbs => format!("exp(|{inner}|)"),
                FunctionKind::ExpNegAbs => format!("exp(-|{inner}|)"),
                FunctionKind::Sqrt => format!("sqrt(|{inner}|)"),
                FunctionKind::SafeLog { k } => format!("log({} + relu({inner}))", number(*k, digits)),
                FunctionKind::Identity => match **a {
                    Expr::Add(_) => format!("({inner})"),
                    _ => inner,
                },
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funn::{build_model, ArchSpec, Head, Normalization, Wiring};

    fn names() -> Vec<String> {
        vec!["t".into()]
    }

    /// One Sin neuron with affine pre-activation and an affine head.
    fn sin_model(bias: f64, w: f64, mix: f64, head: (f64, f64)) -> Model {
        let spec = ArchSpec::mixed(
            Variant::MixFunn,
            &["t"],
            vec![FunctionKind::Sin],
            1,
            Wiring::Shared,
            Normalization::Raw,
            Head::Affine,
        )
        .unwrap();
        Model::from_params(spec, vec![bias, w, mix, head.0, head.1]).unwrap()
    }

    #[test]
    fn single_sine_renders() {
        let m = sin_model(1.0, 3.0, 2.0, (0.0, 1.0));
        let e = extract_expression(&m).unwrap();
        assert_eq!(render(&e, &names(), 3), "2·sin(3·t + 1)");
        assert!(verify_expression(&e, &m, &Domain::interval(0.0, 5.0), 1000, 1).unwrap() < 1e-12);
    }

    #[test]
    fn fully_masked_is_head_bias() {
        let mut m = sin_model(1.0, 3.0, 2.0, (0.7, 1.0));
        let i = m.mix_weight_indices()[0];
        m.mask[i] = false;
        let e = extract_expression(&m).unwrap();
        assert_eq!(e, Expr::Const(0.7));
        assert_eq!(verify_expression(&e, &m, &Domain::interval(0.0, 5.0), 100, 2).unwrap(), 0.0);
    }

    #[test]
    fn rounding_is_display_only() {
        assert_eq!(render(&Expr::Const(1.08532), &names(), 3), "1.085");
        assert_eq!(render(&Expr::Apply(FunctionKind::Identity, Box::new(Expr::Var(0))), &names(), 3), "t");
        let m = sin_model(0.123456, 1.234567, 0.987654, (0.0, 1.0));
        let e = extract_expression(&m).unwrap();
        let rounded = round_constants(&e, 3);
        assert!(verify_expression(&rounded, &m, &Domain::interval(0.0, 5.0), 200, 3).unwrap() > 0.0);
    }

    fn round_constants(e: &Expr, digits: i32) -> Expr {
        let f = 10f64.powi(digits);
        match e {
            Expr::Const(c) => Expr::Const((c * f).round() / f),
            Expr::Var(i) => Expr::Var(*i),
            Expr::Add(v) => Expr::Add(v.iter().map(|x| round_constants(x, digits)).collect()),
            Expr::Mul(v) => Expr::Mul(v.iter().map(|x| round_constants(x, digits)).collect()),
            Expr::Apply(k, a) => Expr::Apply(*k, Box::new(round_constants(a, digits))),
        }
    }

    /// Oscillator preset with a sine path and a decaying path multiplied in
    /// the quadratic head.
    fn product_model() -> Model {
        let mut m = build_model(&ArchSpec::oscillator_mix2funn(), 0).unwrap();
        m.params.iter_mut().for_each(|p| *p = 0.0);
        let slots = m.slots();
        // pre-activation units: [b, w, u] each; unit 0 feeds sin, unit 3 feeds exp(-|.|)
        let pre = slots[0].offset;
        m.params[pre..pre + 3].copy_from_slice(&[1.497, 1.006, 0.0]);
        m.params[pre + 9..pre + 12].copy_from_slice(&[0.13, 0.085, 0.0]);
        let mix = m.mix_weight_indices();
        m.params[mix[0]] = 1.0; // neuron 0, sin
        m.params[mix[7 + 3]] = 1.0; // neuron 1, exp_neg_abs
        // head: [b, w(5), u(15)], pair (1, 0) sits at 1 + 5 + 1
        let head = slots[3].offset;
        m.params[head + 7] = 1.085;
        for (i, p) in m.params.iter().enumerate() {
            if *p == 0.0 && mix.contains(&i) {
                m.mask[i] = false;
            }
        }
        m
    }

    #[test]
    fn product_of_paths() {
        let m = product_model();
        let e = extract_expression(&m).unwrap();
        assert_eq!(render(&e, &names(), 3), "1.085·sin(1.006·t + 1.497)·exp(-|0.085·t + 0.13|)");
        assert!(verify_expression(&e, &m, &Domain::interval(0.0, 20.0), 1000, 4).unwrap() < 1e-12);
    }

    #[test]
    fn sine_decay_product_nearly_solves_damped_oscillator() {
        use crate::physics::residual_values;
        use crate::problems::{damped_oscillator, OscillatorParams};
        let prob = damped_oscillator(&OscillatorParams::damped(), 20.0).unwrap();
        let pts: Vec<f64> = (0..2000).map(|i| 20.0 * i as f64 / 1999.0).collect();
        let r = residual_values(&product_model(), &prob, &pts).unwrap();
        let mse = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        assert!(mse < 0.05, "{mse}");
    }

    #[test]
    fn zero_factors_vanish() {
        let e = Expr::Add(vec![
            Expr::Mul(vec![Expr::Const(0.0), Expr::Apply(FunctionKind::Sin, Box::new(Expr::Var(0)))]),
            Expr::Mul(vec![Expr::Const(2.0), Expr::Mul(vec![Expr::Const(0.5), Expr::Var(0)])]),
            Expr::Const(0.0),
        ])
        .simplify();
        assert_eq!(e, Expr::Var(0));
        let neg = Expr::Add(vec![Expr::Var(0), Expr::Mul(vec![Expr::Const(-2.0), Expr::Var(0), Expr::Var(0)])]);
        assert_eq!(render(&neg, &names(), 2), "t - 2·t^2");
    }

    #[test]
    fn scaled_inputs_fold_into_constants() {
        let m = sin_model(1.0, 3.0, 2.0, (0.0, 1.0));
        let spec = m.spec.clone().with_input_scale(vec![0.5]).unwrap();
        let scaled = Model::from_params(spec, m.params.clone()).unwrap();
        let e = extract_expression(&scaled).unwrap();
        assert_eq!(render(&e, &names(), 3), "2·sin(1.5·t + 1)");
        assert!(verify_expression(&e, &scaled, &Domain::interval(0.0, 5.0), 500, 5).unwrap() < 1e-12);
    }

    #[test]
    fn mlp_rejected() {
        let m = build_model(&ArchSpec::mlp(&["t"], &[3]).unwrap(), 0).unwrap();
        assert!(extract_expression(&m).is_err());
    }
}
