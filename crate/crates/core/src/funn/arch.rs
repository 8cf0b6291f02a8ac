use serde::{Deserialize, Serialize};

use super::function::FunctionKind;
use super::neuron::{pair_count, Normalization};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "mixfunn")]
    MixFunn,
    #[serde(rename = "mix2funn")]
    Mix2Funn,
    MlpPinn,
    Hybrid,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::MixFunn => "mixfunn",
            Variant::Mix2Funn => "mix2funn",
            Variant::MlpPinn => "mlp_pinn",
            Variant::Hybrid => "hybrid",
        }
    }
}

/// How the neurons of a mixing layer see the function outputs before them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Every neuron mixes the same `Q` function outputs.
    #[default]
    Shared,
    /// Neuron `m` mixes its own block of `Q` outputs.
    Dedicated,
}

/// One stage of a sequential network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `y = b + W x` per unit; parameters `[b, w_1..w_N]` per unit (no `b`
    /// without bias).
    Affine { units: usize, bias: bool },
    /// Second-order neurons; parameters `[b, w_1..w_N, u_11, u_21, u_22, ..]`
    /// per unit.
    Quadratic { units: usize },
    Tanh,
    /// Unit `u` goes through `functions[u % Q]`. Dropout acts on the outputs.
    Functions { functions: Vec<FunctionKind> },
    /// Mixing weights `w[m, q]`, row-major.
    Mix { neurons: usize, functions: usize, wiring: Wiring, normalization: Normalization },
}

impl LayerSpec {
    pub fn out_units(&self, n_in: usize) -> usize {
        match self {
            LayerSpec::Affine { units, .. } | LayerSpec::Quadratic { units } => *units,
            LayerSpec::Tanh | LayerSpec::Functions { .. } => n_in,
            LayerSpec::Mix { neurons, .. } => *neurons,
        }
    }

    pub fn n_params(&self, n_in: usize) -> usize {
        match self {
            LayerSpec::Affine { units, bias } => units * (n_in + usize::from(*bias)),
            LayerSpec::Quadratic { units } => units * (1 + n_in + pair_count(n_in)),
            LayerSpec::Tanh | LayerSpec::Functions { .. } => 0,
            LayerSpec::Mix { neurons, functions, .. } => neurons * functions,
        }
    }

    fn validate(&self, n_in: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Architecture(m));
        match self {
            LayerSpec::Affine { units: 0, .. } | LayerSpec::Quadratic { units: 0 } => bad("layer with zero units".into()),
            LayerSpec::Functions { functions } if functions.is_empty() => bad("empty function library".into()),
            LayerSpec::Mix { neurons, functions, wiring, .. } => {
                if *neurons == 0 || *functions == 0 {
                    return bad("mixing layer needs at least one neuron and one function".into());
                }
                let need = match wiring {
                    Wiring::Shared => *functions,
                    Wiring::Dedicated => neurons * functions,
                };
                if n_in != need {
                    return bad(format!("mixing layer expects {need} function outputs, got {n_in}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Output head of the mixed-function presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Affine,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    pub inputs: Vec<String>,
    /// Fixed per-input factors applied before the first layer; empty means 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_scale: Vec<f64>,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    /// Checks dimensions and that the network ends in a single unit.
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Architecture("network needs at least one input".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Architecture("network has no layers".into()));
        }
        if !self.input_scale.is_empty() {
            if self.input_scale.len() != self.arity() {
                return Err(Error::Architecture(format!(
                    "{} input scales for {} inputs",
                    self.input_scale.len(),
                    self.arity()
                )));
            }
            if self.input_scale.iter().any(|s| !s.is_finite() || *s == 0.0) {
                return Err(Error::Architecture("input scales must be finite and nonzero".into()));
            }
        }
        let mut n = self.arity();
        for layer in &self.layers {
            layer.validate(n)?;
            n = layer.out_units(n);
        }
        if n != 1 {
            return Err(Error::Architecture(format!("network ends in {n} units, expected 1")));
        }
        Ok(())
    }

    /// Scale applied to input `i`.
    pub fn scale_of(&self, i: usize) -> f64 {
        self.input_scale.get(i).copied().unwrap_or(1.0)
    }

    pub fn with_input_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        self.input_scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn count_params(&self) -> usize {
        let mut n = self.arity();
        let mut total = 0;
        for layer in &self.layers {
            total += layer.n_params(n);
            n = layer.out_units(n);
        }
        total
    }

    /// Bank of `neurons` mixed-function neurons over `functions`, followed by
    /// a one-unit head. Pre-activations are second-order for
    /// [`Variant::Mix2Funn`] and affine for [`Variant::MixFunn`].
    pub fn mixed(
        variant: Variant,
        inputs: &[&str],
        functions: Vec<FunctionKind>,
        neurons: usize,
        wiring: Wiring,
        normalization: Normalization,
        head: Head,
    ) -> Result<Self> {
        let q = functions.len();
        let pre_units = match wiring {
            Wiring::Shared => q,
            Wiring::Dedicated => neurons * q,
        };
        let pre = match variant {
            Variant::Mix2Funn => LayerSpec::Quadratic { units: pre_units },
            Variant::MixFunn => LayerSpec::Affine { units: pre_units, bias: true },
            other => return Err(Error::Architecture(format!("{} is not a mixed-function variant", other.name()))),
        };
        let head = match head {
            Head::Affine => LayerSpec::Affine { units: 1, bias: true },
            Head::Quadratic => LayerSpec::Quadratic { units: 1 },
        };
        let spec = ArchSpec {
            variant,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            input_scale: vec![],
            layers: vec![
                pre,
                LayerSpec::Functions { functions },
                LayerSpec::Mix { neurons, functions: q, wiring, normalization },
                head,
            ],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Tanh MLP with the given hidden widths.
    pub fn mlp(inputs: &[&str], hidden: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        for &w in hidden {
            layers.push(LayerSpec::Affine { units: w, bias: true });
            layers.push(LayerSpec::Tanh);
        }
        layers.push(LayerSpec::Affine { units: 1, bias: true });
        let spec = ArchSpec {
            variant: Variant::MlpPinn,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            input_scale: vec![],
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Tanh MLP whose first hidden layer has second-order pre-activations.
    pub fn hybrid(inputs: &[&str], hidden: &[usize]) -> Result<Self> {
        let Some((&first, rest)) = hidden.split_first() else {
            return Err(Error::Architecture("hybrid network needs a hidden layer".into()));
        };
        let mut layers = vec![LayerSpec::Quadratic { units: first }, LayerSpec::Tanh];
        for &w in rest {
            layers.push(LayerSpec::Affine { units: w, bias: true });
            layers.push(LayerSpec::Tanh);
        }
        layers.push(LayerSpec::Affine { units: 1, bias: true });
        let spec = ArchSpec {
            variant: Variant::Hybrid,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            input_scale: vec![],
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 77 parameters, 35 of them mixing weights.
    pub fn oscillator_mix2funn() -> Self {
        Self::mixed(
            Variant::Mix2Funn,
            &["t"],
            FunctionKind::library(),
            5,
            Wiring::Shared,
            Normalization::Raw,
            Head::Quadratic,
        )
        .expect("preset is valid")
    }

    /// Two hidden layers of 256 tanh units.
    pub fn oscillator_mlp() -> Self {
        Self::mlp(&["t"], &[256, 256]).expect("preset is valid")
    }

    /// 59 parameters over `(x, t)`, 14 of them mixing weights.
    pub fn burgers_mix2funn() -> Self {
        Self::mixed(
            Variant::Mix2Funn,
            &["x", "t"],
            FunctionKind::library(),
            2,
            Wiring::Shared,
            Normalization::Raw,
            Head::Affine,
        )
        .expect("preset is valid")
    }

    /// Inputs `(x, sqrt_e)`.
    pub fn well_mix2funn() -> Self {
        Self::mixed(
            Variant::Mix2Funn,
            &["x", "sqrt_e"],
            FunctionKind::library(),
            3,
            Wiring::Shared,
            Normalization::Raw,
            Head::Quadratic,
        )
        .expect("preset is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oscillator_preset_counts() {
        let spec = ArchSpec::oscillator_mix2funn();
        assert_eq!(spec.count_params(), 77);
        let mix: usize = spec
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Mix { neurons, functions, .. } => neurons * functions,
                _ => 0,
            })
            .sum();
        assert_eq!(mix, 35);
    }

    #[test]
    fn mlp_preset_within_one_percent() {
        let n = ArchSpec::oscillator_mlp().count_params() as f64;
        assert!((n - 66_433.0).abs() / 66_433.0 < 0.01, "{n}");
    }

    #[test]
    fn dedicated_wiring_counts() {
        let spec = ArchSpec::mixed(
            Variant::MixFunn,
            &["t"],
            FunctionKind::library(),
            2,
            Wiring::Dedicated,
            Normalization::Softmax,
            Head::Affine,
        )
        .unwrap();
        // 14 affine pre-activations (2 each), 14 mix weights, 3 head
        assert_eq!(spec.count_params(), 28 + 14 + 3);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let spec = ArchSpec {
            variant: Variant::MlpPinn,
            inputs: vec!["t".into()],
            input_scale: vec![],
            layers: vec![LayerSpec::Affine { units: 3, bias: true }],
        };
        assert!(spec.validate().is_err());
        let spec = ArchSpec {
            variant: Variant::Mix2Funn,
            inputs: vec!["t".into()],
            input_scale: vec![],
            layers: vec![
                LayerSpec::Quadratic { units: 3 },
                LayerSpec::Mix { neurons: 1, functions: 7, wiring: Wiring::Shared, normalization: Normalization::Raw },
            ],
        };
        assert!(spec.validate().is_err());
        assert!(ArchSpec::mlp(&[], &[4]).is_err());
        assert!(ArchSpec::hybrid(&["x"], &[]).is_err());
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ArchSpec::burgers_mix2funn();
        let text = toml::to_string(&spec).unwrap();
        let back: ArchSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
    }
}
