use serde::{Deserialize, Serialize};

use super::function::FunctionKind;
use crate::error::{Error, Result};

/// Number of distinct input pairs `(i, j)` with `j <= i` for arity `n`.
pub fn pair_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// `s = b + sum_i w_i x_i + sum_{j<=i} u_ij x_i x_j`, with the quadratic
/// weights stored row-major over the lower triangle of `x x^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderNeuron {
    pub bias: f64,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

impl SecondOrderNeuron {
    pub fn new(bias: f64, linear: Vec<f64>, quadratic: Vec<f64>) -> Result<Self> {
        if quadratic.len() != pair_count(linear.len()) {
            return Err(Error::Architecture(format!(
                "second-order neuron over {} inputs needs {} pair weights, got {}",
                linear.len(),
                pair_count(linear.len()),
                quadratic.len()
            )));
        }
        Ok(SecondOrderNeuron { bias, linear, quadratic })
    }

    /// Folds a full `n x n` interaction matrix (row-major) onto the lower
    /// triangle: `u_ij = U'_ij + U'_ji` off the diagonal, `u_ii = U'_ii`.
    pub fn from_full(bias: f64, linear: Vec<f64>, full: &[f64]) -> Result<Self> {
        let n = linear.len();
        if full.len() != n * n {
            return Err(Error::Architecture(format!("interaction matrix must be {n}x{n}")));
        }
        let mut quadratic = Vec::with_capacity(pair_count(n));
        for i in 0..n {
            for j in 0..=i {
                let u = if i == j { full[i * n + i] } else { full[i * n + j] + full[j * n + i] };
                quadratic.push(u);
            }
        }
        Self::new(bias, linear, quadratic)
    }

    pub fn arity(&self) -> usize {
        self.linear.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        second_order_forward(self, x)
    }
}

pub fn second_order_forward(neuron: &SecondOrderNeuron, x: &[f64]) -> Result<f64> {
    if x.len() != neuron.arity() {
        return Err(Error::Arity { expected: neuron.arity(), got: x.len() });
    }
    let mut s = neuron.bias;
    for (w, xi) in neuron.linear.iter().zip(x) {
        s += w * xi;
    }
    let mut k = 0;
    for i in 0..x.len() {
        for j in 0..=i {
            s += neuron.quadratic[k] * x[i] * x[j];
            k += 1;
        }
    }
    Ok(s)
}

/// Mixing-weight normalization of a mixed-function neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Raw,
    Softmax,
}

/// `w_i = exp(a_i / T) / sum_j exp(a_j / T)`, evaluated with the maximum
/// subtracted.
pub fn softmax_weights(alpha: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("softmax temperature must be positive, got {temperature}")));
    }
    if alpha.is_empty() {
        return Ok(Vec::new());
    }
    let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| ((a - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Input map feeding one function of a mixed-function neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PreActivation {
    SecondOrder(SecondOrderNeuron),
    Affine { bias: f64, weights: Vec<f64> },
}

impl PreActivation {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            PreActivation::SecondOrder(n) => n.forward(x),
            PreActivation::Affine { bias, weights } => {
                if x.len() != weights.len() {
                    return Err(Error::Arity { expected: weights.len(), got: x.len() });
                }
                Ok(bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            }
        }
    }
}

/// `a = sum_i w_i f_i(s_i)` with an independent pre-activation per function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedFunctionNeuron {
    pub functions: Vec<FunctionKind>,
    pub mix_weights: Vec<f64>,
    pub pre_activations: Vec<PreActivation>,
    pub normalization: Normalization,
}

impl MixedFunctionNeuron {
    pub fn effective_weights(&self, temperature: f64) -> Result<Vec<f64>> {
        match self.normalization {
            Normalization::Raw => Ok(self.mix_weights.clone()),
            Normalization::Softmax => softmax_weights(&self.mix_weights, temperature),
        }
    }
}

pub fn mixed_forward(neuron: &MixedFunctionNeuron, inputs: &[f64], temperature: f64) -> Result<f64> {
    let q = neuron.functions.len();
    if neuron.mix_weights.len() != q || neuron.pre_activations.len() != q {
        return Err(Error::Architecture(format!(
            "mixed neuron with {q} functions has {} weights and {} pre-activations",
            neuron.mix_weights.len(),
            neuron.pre_activations.len()
        )));
    }
    let w = neuron.effective_weights(temperature)?;
    let mut out = 0.0;
    for (i, (f, pre)) in neuron.functions.iter().zip(&neuron.pre_activations).enumerate() {
        let s = pre.eval(inputs)?;
        if !s.is_finite() {
            return Err(Error::NonFinite { context: format!("pre-activation of function {i} ({})", f.name()) });
        }
        out += w[i] * f.apply(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_leaves_bias() {
        let n = SecondOrderNeuron::new(0.5, vec![3.0, -1.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(n.forward(&[0.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn direct_evaluation() {
        let n = SecondOrderNeuron::new(0.0, vec![1.0, 1.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(n.forward(&[2.0, 3.0]).unwrap(), 24.0);
    }

    #[test]
    fn arity_mismatch_rejected() {
        let n = SecondOrderNeuron::new(0.0, vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(n.forward(&[1.0, 2.0]), Err(Error::Arity { .. })));
        assert!(SecondOrderNeuron::new(0.0, vec![1.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn folded_matches_full_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = 4;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let full: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = rng.gen_range(-1.0..1.0);
            let mut direct = b;
            for i in 0..n {
                direct += w[i] * x[i];
                for j in 0..n {
                    direct += full[i * n + j] * x[i] * x[j];
                }
            }
            let folded = SecondOrderNeuron::from_full(b, w, &full).unwrap().forward(&x).unwrap();
            assert!((folded - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_weights(&[5.0, 5.0], 0.3).unwrap(), vec![0.5, 0.5]);
        let w = softmax_weights(&[1.0, 0.0], 1.0).unwrap();
        assert!((w[0] - 0.7310585786300049).abs() < 1e-12 && (w[1] - 0.2689414213699951).abs() < 1e-12);
        let sharp = softmax_weights(&[1.0, 0.0], 0.01).unwrap();
        assert!((sharp[0] - 1.0).abs() < 1e-15 && sharp[1] < 1e-40);
        assert!(softmax_weights(&[1.0], 0.0).is_err());
        assert!(softmax_weights(&[1.0], -1.0).is_err());
        let big = softmax_weights(&[1000.0, 999.0], 1.0).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identity_pipeline() {
        let n = MixedFunctionNeuron {
            functions: vec![FunctionKind::Identity],
            mix_weights: vec![1.0],
            pre_activations: vec![PreActivation::Affine { bias: 0.0, weights: vec![1.0] }],
            normalization: Normalization::Raw,
        };
        assert_eq!(mixed_forward(&n, &[0.37], 1.0).unwrap(), 0.37);
    }

    #[test]
    fn uniform_softmax_averages() {
        // identity of constant pre-activations 1, 2, 3
        let pre = |c: f64| PreActivation::Affine { bias: c, weights: vec![0.0] };
        let n = MixedFunctionNeuron {
            functions: vec![FunctionKind::Identity; 3],
            mix_weights: vec![0.0; 3],
            pre_activations: vec![pre(1.0), pre(2.0), pre(3.0)],
            normalization: Normalization::Softmax,
        };
        assert!((mixed_forward(&n, &[9.0], 1.0).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_pre_activation_reports_index() {
        let n = MixedFunctionNeuron {
            functions: vec![FunctionKind::Sin, FunctionKind::Cos],
            mix_weights: vec![1.0, 1.0],
            pre_activations: vec![
                PreActivation::Affine { bias: 0.0, weights: vec![1.0] },
                PreActivation::Affine { bias: f64::NAN, weights: vec![1.0] },
            ],
            normalization: Normalization::Raw,
        };
        let err = mixed_forward(&n, &[1.0], 1.0).unwrap_err().to_string();
        assert!(err.contains("function 1"), "{err}");
    }
}
