use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, LayerSpec, Wiring};
use super::neuron::{pair_count, softmax_weights, Normalization};
use crate::autodiff::{AffineSpec, EvalCtx, Surrogate, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub problem: String,
    pub epoch: usize,
    /// Softmax temperature used for plain evaluation.
    pub temperature: f64,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta { seed: 0, problem: String::new(), epoch: 0, temperature: 1.0 }
    }
}

/// A network: architecture, flat parameter vector, pruning mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ArchSpec,
    pub params: Vec<f64>,
    /// `false` marks a pruned parameter, which acts as an exact zero.
    pub mask: Vec<bool>,
    pub meta: ModelMeta,
}

/// Input feeding one weight of a weighted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Bias,
    Linear(usize),
    /// Product of two input units, `j <= i`.
    Pair(usize, usize),
}

/// Per output unit, the `(parameter index, term)` pairs it sums.
pub type WeightedTerms = Vec<Vec<(usize, Term)>>;

/// Parameter offset and input width of every layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerSlot {
    pub offset: usize,
    pub n_in: usize,
}

/// Seeded parameter initialization: mixing weights `U[-1, 1]`, first- and
/// second-order weights `U[-1/sqrt(N), 1/sqrt(N)]`, biases 0.
pub fn build_model(spec: &ArchSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.count_params());
    let mut n = spec.arity();
    for layer in &spec.layers {
        let bound = 1.0 / (n as f64).sqrt();
        match layer {
            LayerSpec::Affine { units, bias } => {
                for _ in 0..*units {
                    if *bias {
                        params.push(0.0);
                    }
                    for _ in 0..n {
                        params.push(rng.gen_range(-bound..=bound));
                    }
                }
            }
            LayerSpec::Quadratic { units } => {
                for _ in 0..*units {
                    params.push(0.0);
                    for _ in 0..n + pair_count(n) {
                        params.push(rng.gen_range(-bound..=bound));
                    }
                }
            }
            LayerSpec::Mix { neurons, functions, .. } => {
                for _ in 0..neurons * functions {
                    params.push(rng.gen_range(-1.0..=1.0));
                }
            }
            LayerSpec::Tanh | LayerSpec::Functions { .. } => {}
        }
        n = layer.out_units(n);
    }
    debug_assert_eq!(params.len(), spec.count_params());
    let mask = vec![true; params.len()];
    Ok(Model { spec: spec.clone(), params, mask, meta: ModelMeta { seed, ..Default::default() } })
}

impl Model {
    /// Wraps explicit parameters, e.g. hand-set test models.
    pub fn from_params(spec: ArchSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.count_params() {
            return Err(Error::Architecture(format!(
                "architecture has {} parameters, got {}",
                spec.count_params(),
                params.len()
            )));
        }
        let mask = vec![true; params.len()];
        Ok(Model { spec, params, mask, meta: ModelMeta::default() })
    }

    pub fn count_params(&self) -> usize {
        self.params.len()
    }

    pub fn count_live(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn slots(&self) -> Vec<LayerSlot> {
        let mut out = Vec::with_capacity(self.spec.layers.len());
        let (mut offset, mut n) = (0, self.spec.arity());
        for layer in &self.spec.layers {
            out.push(LayerSlot { offset, n_in: n });
            offset += layer.n_params(n);
            n = layer.out_units(n);
        }
        out
    }

    /// Canonical indices of all mixing weights.
    pub fn mix_weight_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (layer, slot) in self.spec.layers.iter().zip(self.slots()) {
            if let LayerSpec::Mix { .. } = layer {
                out.extend(slot.offset..slot.offset + layer.n_params(slot.n_in));
            }
        }
        out
    }

    /// Stored value if live, else 0.
    pub fn effective_param(&self, i: usize) -> f64 {
        if self.mask[i] {
            self.params[i]
        } else {
            0.0
        }
    }

    /// Weight structure of layer `index`; `None` for elementwise layers.
    pub fn weighted_terms(&self, index: usize) -> Option<WeightedTerms> {
        let layer = &self.spec.layers[index];
        let LayerSlot { offset, n_in } = self.slots()[index];
        let pairs = || {
            let mut v = Vec::with_capacity(pair_count(n_in));
            for i in 0..n_in {
                for j in 0..=i {
                    v.push(Term::Pair(i, j));
                }
            }
            v
        };
        match layer {
            LayerSpec::Affine { units, bias } => {
                let stride = n_in + usize::from(*bias);
                Some(
                    (0..*units)
                        .map(|u| {
                            let base = offset + u * stride;
                            let mut terms = Vec::with_capacity(stride);
                            if *bias {
                                terms.push((base, Term::Bias));
                            }
                            let b = usize::from(*bias);
                            terms.extend((0..n_in).map(|i| (base + b + i, Term::Linear(i))));
                            terms
                        })
                        .collect(),
                )
            }
            LayerSpec::Quadratic { units } => {
                let stride = 1 + n_in + pair_count(n_in);
                let pt = pairs();
                Some(
                    (0..*units)
                        .map(|u| {
                            let base = offset + u * stride;
                            let mut terms = vec![(base, Term::Bias)];
                            terms.extend((0..n_in).map(|i| (base + 1 + i, Term::Linear(i))));
                            terms.extend(pt.iter().enumerate().map(|(k, &t)| (base + 1 + n_in + k, t)));
                            terms
                        })
                        .collect(),
                )
            }
            LayerSpec::Mix { neurons, functions, wiring, .. } => Some(
                (0..*neurons)
                    .map(|m| {
                        (0..*functions)
                            .map(|q| {
                                let col = match wiring {
                                    Wiring::Shared => q,
                                    Wiring::Dedicated => m * functions + q,
                                };
                                (offset + m * functions + q, Term::Linear(col))
                            })
                            .collect()
                    })
                    .collect(),
            ),
            LayerSpec::Tanh | LayerSpec::Functions { .. } => None,
        }
    }

    /// Effective weights of every row of layer `index`, honoring the mask
    /// and softmax normalization at temperature `t`.
    pub fn effective_row_weights(&self, index: usize, t: f64) -> Result<Vec<Vec<f64>>> {
        let terms = self.weighted_terms(index).expect("weighted layer");
        let softmax = matches!(self.spec.layers[index], LayerSpec::Mix { normalization: Normalization::Softmax, .. });
        terms
            .iter()
            .map(|row| {
                if !softmax {
                    return Ok(row.iter().map(|&(p, _)| self.effective_param(p)).collect());
                }
                let live: Vec<f64> = row.iter().filter(|(p, _)| self.mask[*p]).map(|&(p, _)| self.params[p]).collect();
                let sm = softmax_weights(&live, t)?;
                let mut it = sm.into_iter();
                Ok(row.iter().map(|(p, _)| if self.mask[*p] { it.next().unwrap_or(0.0) } else { 0.0 }).collect())
            })
            .collect()
    }

    /// Number of units entering each dropout site, in layer order.
    pub fn dropout_sites(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .zip(self.slots())
            .filter(|(l, _)| matches!(l, LayerSpec::Functions { .. }))
            .map(|(_, s)| s.n_in)
            .collect()
    }

    /// Flags of parameters that are live, reachable from the output, and not
    /// multiplied by an input that is identically zero.
    pub fn effective_mask(&self) -> Vec<bool> {
        let n_layers = self.spec.layers.len();
        let slots = self.slots();
        let terms: Vec<Option<WeightedTerms>> = (0..n_layers).map(|i| self.weighted_terms(i)).collect();
        let term_zero = |z: &[bool], t: Term| match t {
            Term::Bias => false,
            Term::Linear(i) => z[i],
            Term::Pair(i, j) => z[i] || z[j],
        };
        // zeros[l] flags identically-zero inputs of layer l
        let mut zeros = vec![vec![false; self.spec.arity()]];
        for (l, layer) in self.spec.layers.iter().enumerate() {
            let z = &zeros[l];
            let next: Vec<bool> = match (&terms[l], layer) {
                (Some(rows), _) => rows
                    .iter()
                    .map(|row| row.iter().all(|&(p, t)| !self.mask[p] || term_zero(z, t)))
                    .collect(),
                (None, LayerSpec::Functions { functions }) => {
                    (0..slots[l].n_in).map(|u| z[u] && !functions[u % functions.len()].nonzero_at_origin()).collect()
                }
                (None, _) => z.clone(),
            };
            zeros.push(next);
        }
        let mut effective = vec![false; self.params.len()];
        let mut need = vec![true];
        for l in (0..n_layers).rev() {
            let z = &zeros[l];
            let mut need_in = vec![false; slots[l].n_in];
            match &terms[l] {
                Some(rows) => {
                    for (u, row) in rows.iter().enumerate() {
                        if !need[u] || zeros[l + 1][u] {
                            continue;
                        }
                        for &(p, t) in row {
                            if !self.mask[p] || term_zero(z, t) {
                                continue;
                            }
                            effective[p] = true;
                            match t {
                                Term::Bias => {}
                                Term::Linear(i) => need_in[i] = true,
                                Term::Pair(i, j) => {
                                    need_in[i] = true;
                                    need_in[j] = true;
                                }
                            }
                        }
                    }
                }
                None => need_in.copy_from_slice(&need),
            }
            need = need_in;
        }
        effective
    }

    pub fn count_effective_params(&self) -> usize {
        self.effective_mask().iter().filter(|&&e| e).count()
    }

    /// Records the network on `tape` for a batch input (one unit per axis).
    pub fn record<'t>(&self, _tape: &'t Tape, input: Var<'t>, ctx: &EvalCtx<'_>) -> Result<Var<'t>> {
        let mut x = input;
        if !self.spec.input_scale.is_empty() {
            let d = self.spec.arity();
            let mut weights = vec![0.0; d * d];
            for i in 0..d {
                weights[i * d + i] = self.spec.scale_of(i);
            }
            x = x.affine(AffineSpec {
                out_units: d,
                weights,
                weight_src: vec![None; d * d],
                bias: None,
                softmax_temperature: None,
            });
        }
        let mut site = 0;
        for (l, layer) in self.spec.layers.iter().enumerate() {
            x = match layer {
                LayerSpec::Tanh => x.tanh(),
                LayerSpec::Functions { functions } => {
                    let prims: Vec<_> = functions.iter().map(|f| f.prim()).collect();
                    let y = x.map(&prims);
                    match ctx.dropout {
                        Some(masks) => {
                            let m = masks.get(site).ok_or_else(|| {
                                Error::Invalid(format!("no dropout mask supplied for site {site}"))
                            })?;
                            site += 1;
                            y.mask(m.clone())
                        }
                        None => y,
                    }
                }
                LayerSpec::Affine { .. } | LayerSpec::Quadratic { .. } | LayerSpec::Mix { .. } => {
                    let spec = self.affine_spec(l, ctx.temperature)?;
                    let z = if matches!(layer, LayerSpec::Quadratic { .. }) { x.concat(x.pairs()) } else { x };
                    z.affine(spec)
                }
            };
        }
        Ok(x)
    }

    fn affine_spec(&self, l: usize, temperature: f64) -> Result<AffineSpec> {
        let rows = self.weighted_terms(l).expect("weighted layer");
        let eff = self.effective_row_weights(l, temperature)?;
        let n_in = self.slots()[l].n_in;
        let layer = &self.spec.layers[l];
        let width = match layer {
            LayerSpec::Quadratic { .. } => n_in + pair_count(n_in),
            _ => n_in,
        };
        let col = |t: Term| match t {
            Term::Bias => None,
            Term::Linear(i) => Some(i),
            Term::Pair(i, j) => Some(n_in + i * (i + 1) / 2 + j),
        };
        let has_bias = rows.first().is_some_and(|r| r.iter().any(|(_, t)| *t == Term::Bias));
        let mut weights = vec![0.0; rows.len() * width];
        let mut weight_src = vec![None; rows.len() * width];
        let mut bias = vec![0.0; if has_bias { rows.len() } else { 0 }];
        let mut bias_src = vec![None; bias.len()];
        for (u, (row, w)) in rows.iter().zip(&eff).enumerate() {
            for (&(p, t), &v) in row.iter().zip(w) {
                let src = self.mask[p].then_some(p);
                match col(t) {
                    None => {
                        bias[u] = v;
                        bias_src[u] = src;
                    }
                    Some(c) => {
                        weights[u * width + c] = v;
                        weight_src[u * width + c] = src;
                    }
                }
            }
        }
        let softmax_temperature = match layer {
            LayerSpec::Mix { normalization: Normalization::Softmax, .. } => Some(temperature),
            _ => None,
        };
        Ok(AffineSpec {
            out_units: rows.len(),
            weights,
            weight_src,
            bias: has_bias.then_some((bias, bias_src)),
            softmax_temperature,
        })
    }

    /// Evaluation context at the stored temperature, without dropout.
    pub fn eval_ctx(&self) -> EvalCtx<'static> {
        EvalCtx { temperature: self.meta.temperature, dropout: None }
    }

    /// Plain evaluation at one point.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        Ok(self.forward_batch(input)?[0])
    }

    /// Plain evaluation at many points, row-major `n x arity`.
    pub fn forward_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch_with(points, &self.eval_ctx())
    }

    pub fn forward_batch_with(&self, points: &[f64], ctx: &EvalCtx<'_>) -> Result<Vec<f64>> {
        let d = self.spec.arity();
        if points.is_empty() || points.len() % d != 0 {
            return Err(Error::Arity { expected: d, got: points.len() % d.max(1) });
        }
        let tape = Tape::new(self.params.len());
        let x = tape.input(points, d, &[], 0);
        let out = self.record(&tape, x, ctx)?.values();
        if let Some(p) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("network output at {:?}", &points[p * d..(p + 1) * d]) });
        }
        Ok(out)
    }
}

impl Surrogate for Model {
    fn arity(&self) -> usize {
        self.spec.arity()
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn build<'t>(&self, tape: &'t Tape, input: Var<'t>, ctx: &EvalCtx<'_>) -> Result<Var<'t>> {
        self.record(tape, input, ctx)
    }

    fn is_live(&self, i: usize) -> bool {
        self.mask[i]
    }
}
