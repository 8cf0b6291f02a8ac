//! Global magnitude pruning of mixing weights and symbolic extraction of
//! pruned models.

mod expr;

use serde::{Deserialize, Serialize};

pub use expr::{extract_expression, render, verify_expression, Expr};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::funn::{LayerSpec, Model};
use crate::physics::{evaluate_loss, CollocationBatch, ProblemDef};
use crate::train::{train, TrainConfig};

/// Outcome of pruning one model at one ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub ratio: f64,
    /// Mixing weights removed by this ratio.
    pub removed: usize,
    pub mask: Vec<bool>,
    pub params_before: usize,
    pub params_after: usize,
    pub effective: usize,
    /// Residual plus condition loss, after fine-tuning when requested.
    pub residual_error: Option<f64>,
}

impl PruneReport {
    /// Copy of `model` carrying this report's mask.
    pub fn apply(&self, model: &Model) -> Model {
        let mut m = model.clone();
        m.mask = self.mask.clone();
        m
    }
}

/// Number of mixing weights a ratio removes out of `k`.
///
/// A small tolerance keeps ratios such as `34/35` from losing a unit to
/// floating-point rounding.
pub fn prune_count(ratio: f64, k: usize) -> usize {
    ((ratio * k as f64 + 1e-9).floor() as usize).min(k)
}

/// Masks the `floor(ratio * K)` smallest-magnitude mixing weights (ties by
/// index), then masks pre-activation parameters that no longer reach the
/// output.
///
/// Already-masked weights count as magnitude zero, so they go first.
pub fn magnitude_prune(model: &Model, ratio: f64) -> Result<PruneReport> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("pruning ratio must lie in [0, 1], got {ratio}")));
    }
    let idx = model.mix_weight_indices();
    if idx.is_empty() {
        return Err(Error::Precondition("model has no mixing weights to prune".into()));
    }
    let removed = prune_count(ratio, idx.len());
    let mut order: Vec<usize> = idx.clone();
    order.sort_by(|&a, &b| {
        model.effective_param(a).abs().total_cmp(&model.effective_param(b).abs()).then(a.cmp(&b))
    });
    let mut pruned = model.clone();
    for &i in &order[..removed] {
        pruned.mask[i] = false;
    }
    let reach = pruned.effective_mask();
    for range in pre_activation_ranges(&pruned) {
        for i in range {
            pruned.mask[i] &= reach[i];
        }
    }
    Ok(PruneReport {
        ratio,
        removed,
        params_before: model.count_live(),
        params_after: pruned.count_live(),
        effective: pruned.count_effective_params(),
        mask: pruned.mask,
        residual_error: None,
    })
}

/// Parameter ranges of layers that feed a function bank.
fn pre_activation_ranges(model: &Model) -> Vec<std::ops::Range<usize>> {
    let slots = model.slots();
    let layers = &model.spec.layers;
    (0..layers.len().saturating_sub(1))
        .filter(|&l| matches!(layers[l + 1], LayerSpec::Functions { .. }))
        .map(|l| slots[l].offset..slots[l].offset + layers[l].n_params(slots[l].n_in))
        .collect()
}

/// Residual plus condition loss at the model's own temperature.
pub fn residual_error(model: &Model, prob: &ProblemDef, batch: &CollocationBatch) -> Result<f64> {
    Ok(evaluate_loss(model, prob, batch, model.meta.temperature)?.residual_error())
}

/// Prunes a trained model at each ratio, optionally fine-tuning each copy
/// (keeping its best snapshot), and scores it on `batch`.
pub fn prune_sweep(
    model: &Model,
    prob: &ProblemDef,
    ratios: &[f64],
    fine_tune: Option<&TrainConfig>,
    batch: &CollocationBatch,
    exec: Exec,
) -> Result<Vec<(PruneReport, Model)>> {
    exec.map(ratios, |&r| prune_and_tune(model, prob, r, fine_tune, batch)).into_iter().collect()
}

fn prune_and_tune(
    model: &Model,
    prob: &ProblemDef,
    ratio: f64,
    fine_tune: Option<&TrainConfig>,
    batch: &CollocationBatch,
) -> Result<(PruneReport, Model)> {
    let mut report = magnitude_prune(model, ratio)?;
    let mut pruned = report.apply(model);
    if let Some(cfg) = fine_tune {
        pruned = train(&pruned, prob, cfg)?.0;
    }
    report.residual_error = Some(residual_error(&pruned, prob, batch)?);
    Ok((report, pruned))
}

/// Prunes in stages, fine-tuning after each, e.g. `[0.8, 0.9]`.
pub fn iterative_prune(
    model: &Model,
    prob: &ProblemDef,
    schedule: &[f64],
    fine_tune: Option<&TrainConfig>,
    batch: &CollocationBatch,
) -> Result<Vec<(PruneReport, Model)>> {
    let mut current = model.clone();
    let mut out = Vec::with_capacity(schedule.len());
    for &ratio in schedule {
        let (report, next) = prune_and_tune(&current, prob, ratio, fine_tune, batch)?;
        current = next.clone();
        out.push((report, next));
    }
    Ok(out)
}

/// Writes reports as `ratio,removed,params_before,params_after,effective,residual_error`.
pub fn write_reports_csv<W: std::io::Write>(reports: &[PruneReport], config_hash: &str, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config_hash", "ratio", "removed", "params_before", "params_after", "effective", "residual_error"])?;
    for r in reports {
        out.write_record([
            config_hash.to_string(),
            r.ratio.to_string(),
            r.removed.to_string(),
            r.params_before.to_string(),
            r.params_after.to_string(),
            r.effective.to_string(),
            r.residual_error.map_or(String::new(), |e| e.to_string()),
        ])?;
    }
    out.flush()?;
    Ok(())
}
