//! Adam training loop with dropout on mixed-function outputs and softmax
//! temperature annealing.

mod adam;
mod schedule;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use schedule::{anneal_temperature, Decay, TemperatureConfig, TemperatureSchedule};

use crate::error::{Error, Result};
use crate::funn::{Model, Variant};
use crate::physics::{loss_and_grad, sample_collocation, CollocationBatch, LossOptions, LossParts, ProblemDef};

/// Per-unit keep mask for inverted dropout: `0` with probability `p`, else
/// `1 / (1 - p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut impl Rng) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Inverted dropout on unit outputs. Identity outside training.
pub fn apply_dropout(values: &[f64], p: f64, training: bool, rng: &mut impl Rng) -> Vec<f64> {
    if !training || p <= 0.0 {
        return values.to_vec();
    }
    let mask = dropout_mask(values.len(), p, rng);
    values.iter().zip(mask).map(|(v, m)| v * m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollocationPolicy {
    pub points: usize,
    /// Draw fresh points every epoch; otherwise reuse the first draw.
    pub resample: bool,
}

impl Default for CollocationPolicy {
    fn default() -> Self {
        CollocationPolicy { points: 512, resample: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub temperature: TemperatureConfig,
    pub seed: u64,
    pub collocation: CollocationPolicy,
    /// Epochs between checkpoint callbacks, 0 for none.
    pub checkpoint_every: usize,
    pub loss: LossOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            adam: AdamConfig::default(),
            dropout: 0.1,
            temperature: TemperatureConfig::default(),
            seed: 0,
            collocation: CollocationPolicy::default(),
            checkpoint_every: 0,
            loss: LossOptions::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for a variant: the MLP baseline runs at `lr = 0.01` without dropout.
    pub fn for_variant(variant: Variant) -> Self {
        let mut cfg = TrainConfig::default();
        if matches!(variant, Variant::MlpPinn | Variant::Hybrid) {
            cfg.adam.lr = 0.01;
            cfg.dropout = 0.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout probability must lie in [0, 1), got {}", self.dropout)));
        }
        if self.collocation.points == 0 {
            return Err(Error::Invalid("collocation needs at least one point".into()));
        }
        self.temperature.schedule(self.epochs).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub residual: f64,
    pub icbc: f64,
    pub data: f64,
    pub anchor: f64,
    pub total: f64,
    pub temperature: f64,
    /// Seconds since training started. Not part of history equality.
    #[serde(skip)]
    pub wall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub params: Vec<f64>,
    pub epoch: usize,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Lowest-loss parameters seen so far.
    pub best: Option<Snapshot>,
    pub final_params: Vec<f64>,
    /// Reason training stopped early.
    pub failure: Option<String>,
}

impl TrainHistory {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Records compared without wall-clock times.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        let strip = |h: &TrainHistory| -> Vec<EpochRecord> {
            h.records.iter().map(|r| EpochRecord { wall: 0.0, ..r.clone() }).collect()
        };
        strip(self) == strip(other) && self.best == other.best && self.final_params == other.final_params
    }

    /// CSV with one row per epoch, tagged with `config_hash`.
    pub fn write_csv<W: std::io::Write>(&self, config_hash: &str, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["config_hash", "epoch", "residual", "icbc", "data", "anchor", "total", "temperature"])?;
        for r in &self.records {
            out.write_record([
                config_hash.to_string(),
                r.epoch.to_string(),
                r.residual.to_string(),
                r.icbc.to_string(),
                r.data.to_string(),
                r.anchor.to_string(),
                r.total.to_string(),
                r.temperature.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Trains `model` and returns it holding the best-so-far parameters.
///
/// Each epoch evaluates the loss at the current parameters (with fresh
/// dropout masks and the annealed temperature), records it, then takes one
/// Adam step. A non-finite loss or gradient stops training and sets
/// [`TrainHistory::failure`].
pub fn train(model: &Model, prob: &ProblemDef, cfg: &TrainConfig) -> Result<(Model, TrainHistory)> {
    train_with(model, prob, cfg, |_, _| Ok(()))
}

/// [`train`] with a callback fired every `cfg.checkpoint_every` epochs.
pub fn train_with<F>(model: &Model, prob: &ProblemDef, cfg: &TrainConfig, mut on_checkpoint: F) -> Result<(Model, TrainHistory)>
where
    F: FnMut(&Model, usize) -> Result<()>,
{
    cfg.validate()?;
    prob.validate()?;
    if model.spec.arity() != prob.arity() {
        return Err(Error::Arity { expected: prob.arity(), got: model.spec.arity() });
    }
    let schedule = cfg.temperature.schedule(cfg.epochs)?;
    let mut net = model.clone();
    let mut state = AdamState::new(net.params.len());
    let mut history = TrainHistory { final_params: net.params.clone(), ..Default::default() };

    let mut colloc_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    colloc_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);

    let sites = net.dropout_sites();
    let n = cfg.collocation.points;
    let mut batch: Option<CollocationBatch> = None;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        if batch.is_none() || cfg.collocation.resample {
            batch = Some(sample_collocation(&prob.domain, n, colloc_rng.gen())?);
        }
        let batch_ref = batch.as_ref().expect("batch drawn above");
        let t = anneal_temperature(epoch, &schedule)?;
        let masks: Vec<Vec<f64>> = sites.iter().map(|&units| dropout_mask(units * n, cfg.dropout, &mut drop_rng)).collect();
        let dropout = (cfg.dropout > 0.0 && !masks.is_empty()).then_some(masks.as_slice());

        let (parts, grads) = match loss_and_grad(&net, prob, batch_ref, t, dropout, &cfg.loss) {
            Ok(v) => v,
            Err(Error::NonFinite { context }) => {
                history.failure = Some(format!("epoch {epoch}: non-finite {context}"));
                break;
            }
            Err(e) => return Err(e),
        };
        history.records.push(record(epoch, &parts, t, start.elapsed().as_secs_f64()));
        if history.best.as_ref().is_none_or(|b| parts.total < b.total) {
            history.best = Some(Snapshot { params: net.params.clone(), epoch, total: parts.total });
        }
        if let Err(e) = adam_step(&mut net.params, &grads, &net.mask, &mut state, &cfg.adam) {
            history.failure = Some(format!("epoch {epoch}: {e}"));
            break;
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            net.meta.epoch = model.meta.epoch + epoch + 1;
            on_checkpoint(&net, epoch + 1)?;
        }
    }

    history.final_params = net.params.clone();
    let mut best = net;
    if let Some(b) = &history.best {
        best.params = b.params.clone();
        best.meta.epoch = model.meta.epoch + b.epoch;
        best.meta.temperature = anneal_temperature(b.epoch, &schedule)?;
    }
    Ok((best, history))
}

fn record(epoch: usize, p: &LossParts, temperature: f64, wall: f64) -> EpochRecord {
    EpochRecord {
        epoch,
        residual: p.residual,
        icbc: p.icbc,
        data: p.data,
        anchor: p.anchor,
        total: p.total,
        temperature,
        wall,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funn::{build_model, ArchSpec};
    use crate::problems::{damped_oscillator, OscillatorParams};

    #[test]
    fn dropout_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(apply_dropout(&v, 0.0, true, &mut rng), v);
        assert_eq!(apply_dropout(&v, 0.7, false, &mut rng), v);
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = apply_dropout(&vec![1.0; 100_000], 0.5, true, &mut rng);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, collocation: CollocationPolicy { points: 32, resample: true }, ..Default::default() }
    }

    #[test]
    fn zero_epochs_leave_model_alone() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 3).unwrap();
        let prob = damped_oscillator(&OscillatorParams::damped(), 20.0).unwrap();
        let (out, h) = train(&m, &prob, &small_cfg(0)).unwrap();
        assert_eq!(out, m);
        assert!(h.records.is_empty() && h.best.is_none());
    }

    #[test]
    fn training_is_deterministic_and_tracks_best() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 4).unwrap();
        let prob = damped_oscillator(&OscillatorParams::damped(), 2.0).unwrap();
        let cfg = small_cfg(30);
        let (a, ha) = train(&m, &prob, &cfg).unwrap();
        let (b, hb) = train(&m, &prob, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ha.same_trajectory(&hb));
        let best = ha.best.as_ref().unwrap();
        let min = ha.records.iter().map(|r| r.total).fold(f64::INFINITY, f64::min);
        assert_eq!(best.total, min);
        assert_eq!(a.params, best.params);
    }

    #[test]
    fn execution_mode_does_not_change_the_result() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 4).unwrap();
        let prob = damped_oscillator(&OscillatorParams::damped(), 2.0).unwrap();
        let mut cfg = small_cfg(20);
        cfg.loss.chunk = 8;
        cfg.loss.exec = crate::exec::Exec::Sequential;
        let (a, _) = train(&m, &prob, &cfg).unwrap();
        cfg.loss.exec = crate::exec::Exec::Parallel;
        let (b, _) = train(&m, &prob, &cfg).unwrap();
        assert!(a.params.iter().zip(&b.params).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn masked_parameters_never_move() {
        let mut m = build_model(&ArchSpec::oscillator_mix2funn(), 5).unwrap();
        let idx = m.mix_weight_indices();
        for &i in &idx[..10] {
            m.mask[i] = false;
        }
        let prob = damped_oscillator(&OscillatorParams::damped(), 2.0).unwrap();
        let (_, h) = train(&m, &prob, &small_cfg(10)).unwrap();
        for &i in &idx[..10] {
            assert_eq!(h.final_params[i], m.params[i]);
        }
    }

    #[test]
    fn loss_goes_down_on_short_horizon() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 6).unwrap();
        let prob = damped_oscillator(&OscillatorParams::damped(), 2.0).unwrap();
        let cfg = TrainConfig { dropout: 0.0, ..small_cfg(200) };
        let (_, h) = train(&m, &prob, &cfg).unwrap();
        assert!(!h.failed(), "{:?}", h.failure);
        assert!(h.best.unwrap().total < 0.5 * h.records[0].total);
    }

    #[test]
    fn bad_config_rejected() {
        let m = build_model(&ArchSpec::oscillator_mix2funn(), 7).unwrap();
        let prob = damped_oscillator(&OscillatorParams::damped(), 2.0).unwrap();
        let cfg = TrainConfig { dropout: 1.0, ..small_cfg(1) };
        assert!(train(&m, &prob, &cfg).is_err());
    }
}
