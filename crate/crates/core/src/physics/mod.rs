//! Residual, condition, data and anchor losses of a differential problem,
//! and collocation sampling.

mod loss;
mod problem;

pub use loss::{
    anchor_loss, data_loss, evaluate_loss, icbc_loss, loss_and_grad, residual_loss, residual_values,
    sample_collocation, total_loss, CollocationBatch, LossOptions, LossParts,
};
pub use problem::{Anchor, Axis, Condition, Domain, Jet, LossWeights, Operator, Oracle, ProblemDef, Quantity};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{EvalCtx, FnSurrogate, Surrogate, Tape};
    use crate::exec::Exec;
    use crate::funn::{build_model, ArchSpec};

    fn damped() -> ProblemDef {
        ProblemDef {
            id: "damped".into(),
            inputs: vec!["t".into()],
            operator: Operator::Oscillator { m: 1.0, gamma: 0.1, k: 1.0, f0: 0.0, omega: 0.0 },
            domain: Domain::interval(0.0, 20.0),
            icbc: vec![Condition::value(vec![0.0], 1.0), Condition::derivative(vec![0.0], 0, 0.0)],
            data: vec![],
            anchor: None,
            weights: LossWeights::default(),
            reference: None,
        }
    }

    fn parts(net: &dyn Surrogate, prob: &ProblemDef, pts: Vec<f64>) -> LossParts {
        let tape = Tape::new(net.n_params());
        let batch = CollocationBatch::from_points(pts, prob.arity());
        total_loss(&tape, net, prob, &batch, &EvalCtx::default()).unwrap().1
    }

    fn exact() -> impl Surrogate {
        let wd = (1.0f64 - 0.0025).sqrt();
        let c = 0.05 / wd;
        FnSurrogate::new(1, vec![], move |x, _| {
            let t = x[0];
            (t * -0.05).exp() * ((t * wd).cos() + (t * wd).sin() * c)
        })
    }

    #[test]
    fn square_stub_residual() {
        let sq = FnSurrogate::new(1, vec![], |x, _| x[0] * x[0]);
        let p = parts(&sq, &damped(), vec![1.0]);
        assert!((p.residual - 10.24).abs() < 1e-12);
    }

    #[test]
    fn zero_model_losses() {
        let zero = FnSurrogate::new(1, vec![], |x, _| x[0] * 0.0);
        let p = parts(&zero, &damped(), vec![0.3, 4.0, 7.5]);
        assert_eq!(p.residual, 0.0);
        assert_eq!(p.icbc, 1.0);
        assert_eq!(p.data, 0.0);
    }

    #[test]
    fn exact_solution_annihilates() {
        let pts: Vec<f64> = (0..64).map(|i| i as f64 * 0.31).collect();
        let p = parts(&exact(), &damped(), pts);
        assert!(p.residual < 1e-10 && p.icbc < 1e-10 && p.total < 1e-9, "{p:?}");
    }

    #[test]
    fn data_loss_cases() {
        let one = FnSurrogate::new(1, vec![], |x, _| x[0] * 0.0 + 1.0);
        let mut prob = damped();
        prob.data = vec![(vec![0.0], 2.0)];
        let tape = Tape::new(0);
        assert_eq!(data_loss(&tape, &one, &prob).unwrap().scalar(), 1.0);
        prob.data = vec![(vec![0.5], 1.0)];
        assert_eq!(data_loss(&tape, &one, &prob).unwrap().scalar(), 0.0);
        prob.data.clear();
        assert_eq!(data_loss(&tape, &one, &prob).unwrap().scalar(), 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let sq = FnSurrogate::new(1, vec![], |x, _| x[0] * x[0]);
        let mut prob = damped();
        let p = parts(&sq, &prob, vec![1.0, 2.0]);
        assert!((p.total - (p.residual + p.icbc + p.data)).abs() < 1e-12);
        prob.weights.residual = 0.0;
        prob.weights.icbc = 2.0;
        let q = parts(&sq, &prob, vec![1.0, 2.0]);
        assert!((q.total - 2.0 * q.icbc).abs() < 1e-12);
    }

    #[test]
    fn derivative_condition_outside_arity() {
        let mut prob = damped();
        prob.icbc.push(Condition::derivative(vec![0.0], 3, 0.0));
        let tape = Tape::new(0);
        assert!(icbc_loss(&tape, &exact(), &prob).is_err());
        assert!(prob.validate().is_err());
    }

    #[test]
    fn sampling_properties() {
        let b = sample_collocation(&Domain::interval(0.0, 1.0), 1000, 3).unwrap();
        assert!(b.points.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean = b.points.iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05);
        assert_eq!(b, sample_collocation(&Domain::interval(0.0, 1.0), 1000, 3).unwrap());
        let d2 = Domain::boxed(&[(0.0, 1.0), (-1.0, 1.0)]);
        let b2 = sample_collocation(&d2, 200, 1).unwrap();
        assert!((0..b2.len()).all(|i| d2.contains(b2.point(i))));
        assert!(sample_collocation(&Domain::interval(1.0, 1.0), 10, 0).is_err());
        assert!(sample_collocation(&Domain::interval(0.0, 1.0), 0, 0).is_err());
    }

    #[test]
    fn chunked_gradient_matches_single_tape() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 8).unwrap();
        let prob = damped();
        let batch = sample_collocation(&Domain::interval(0.0, 3.0), 50, 2).unwrap();
        let tape = Tape::new(m.count_params());
        let (root, p) = total_loss(&tape, &m, &prob, &batch, &EvalCtx::default()).unwrap();
        let g = root.backward().unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let opts = LossOptions { exec, chunk: 16 };
            let (q, h) = loss_and_grad(&m, &prob, &batch, 1.0, None, &opts).unwrap();
            assert!((p.total - q.total).abs() < 1e-12 * p.total.max(1.0));
            for (a, b) in g.iter().zip(&h) {
                assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
        let seq = loss_and_grad(&m, &prob, &batch, 1.0, None, &LossOptions { exec: Exec::Sequential, chunk: 16 }).unwrap();
        let par = loss_and_grad(&m, &prob, &batch, 1.0, None, &LossOptions { exec: Exec::Parallel, chunk: 16 }).unwrap();
        assert_eq!(seq.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), par.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn losses_nonnegative_and_gradients_flow() {
        let prob = damped();
        for seed in 0..20 {
            let m = build_model(&ArchSpec::oscillator_mix2funn(), seed).unwrap();
            let batch = sample_collocation(&Domain::interval(0.0, 2.0), 32, seed).unwrap();
            let (p, g) = loss_and_grad(&m, &prob, &batch, 1.0, None, &LossOptions::default()).unwrap();
            assert!(p.residual >= 0.0 && p.icbc >= 0.0 && p.data >= 0.0 && p.anchor >= 0.0);
            assert!(g.iter().all(|v| v.is_finite()) && g.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn non_finite_residual_names_point() {
        let blow = FnSurrogate::new(1, vec![], |x, _| (x[0] * 1000.0).exp());
        let tape = Tape::new(0);
        let batch = CollocationBatch::from_points(vec![0.1, 2.0], 1);
        let err = residual_loss(&tape, &blow, &damped(), &batch, &EvalCtx::default()).unwrap_err().to_string();
        assert!(err.contains("[2.0]"), "{err}");
    }
}
