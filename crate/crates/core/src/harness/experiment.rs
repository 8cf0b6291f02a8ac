use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{ExperimentConfig, ProblemId};
use crate::error::{Error, Result};
use crate::funn::{build_model, Model};
use crate::physics::{evaluate_loss, Axis, CollocationBatch, Domain, ProblemDef};
use crate::train::{train, TrainHistory};

/// Uniform grid with about `n` points: intervals get `ceil(n^(1/k))` points
/// each (endpoints included), choice axes contribute every value.
pub fn uniform_grid(domain: &Domain, n: usize) -> CollocationBatch {
    let k = domain.axes.iter().filter(|a| matches!(a, Axis::Interval { .. })).count().max(1);
    let per = ((n.max(1) as f64).powf(1.0 / k as f64).ceil() as usize).max(1);
    let axes: Vec<Vec<f64>> = domain
        .axes
        .iter()
        .map(|a| match a {
            Axis::Interval { lo, hi } if per == 1 => vec![0.5 * (lo + hi)],
            Axis::Interval { lo, hi } => (0..per).map(|i| lo + (hi - lo) * i as f64 / (per - 1) as f64).collect(),
            Axis::Choice(v) => v.clone(),
            Axis::Fixed(x) => vec![*x],
        })
        .collect();
    let mut points = Vec::new();
    let mut idx = vec![0usize; axes.len()];
    'outer: loop {
        for (a, &i) in axes.iter().zip(&idx) {
            points.push(a[i]);
        }
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                continue 'outer;
            }
            idx[d] = 0;
        }
        break;
    }
    let mut b = CollocationBatch::from_points(points, domain.arity());
    b.domain_id = domain.id();
    b
}

/// Mean squared error of `model` against `prob`'s reference on `grid`.
///
/// For the well the eigenfunction sign is arbitrary, so the smaller of the
/// errors against `+psi` and `-psi` is taken per energy.
pub fn reference_mse(model: &Model, prob: &ProblemDef, grid: &CollocationBatch, sign_free: bool) -> Result<f64> {
    let u = match model.forward_batch(&grid.points) {
        Ok(u) => u,
        Err(Error::NonFinite { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let mut groups: Vec<(f64, f64, f64, usize)> = Vec::new(); // key, err+, err-, count
    for (i, &ui) in u.iter().enumerate() {
        let p = grid.point(i);
        let r = prob
            .reference_at(p)
            .ok_or_else(|| Error::Precondition(format!("{} has no reference solution", prob.id)))?;
        let key = if sign_free { p[p.len() - 1] } else { 0.0 };
        let g = match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g,
            None => {
                groups.push((key, 0.0, 0.0, 0));
                groups.last_mut().expect("just pushed")
            }
        };
        g.1 += (ui - r).powi(2);
        g.2 += (ui + r).powi(2);
        g.3 += 1;
    }
    let total: f64 = groups.iter().map(|g| if sign_free { g.1.min(g.2) } else { g.1 }).sum();
    Ok(total / u.len() as f64)
}

/// One seed's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub params: usize,
    pub train_error: f64,
    pub test_error: f64,
    pub residual_error: f64,
    pub best_epoch: usize,
    /// Seconds; written to the timing log, not the metrics CSV.
    #[serde(skip)]
    pub wall_time: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, sample standard deviation, min and max.
pub fn stats(values: &[f64]) -> Stats {
    let n = values.len() as f64;
    if values.is_empty() {
        return Stats { mean: f64::NAN, std: f64::NAN, min: f64::NAN, max: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Stats {
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Index of the run with the lowest residual error; failed runs never win.
pub fn select_best(rows: &[MetricsRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| !r.failed && r.residual_error.is_finite())
        .min_by(|a, b| a.1.residual_error.total_cmp(&b.1.residual_error).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// Writes per-seed rows followed by `mean` and `std` rows over the runs that
/// did not fail.
pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], config_hash: &str, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "config_hash",
        "run_id",
        "seed",
        "variant",
        "params",
        "train_error",
        "test_error",
        "residual_error",
        "best_epoch",
        "failed",
    ])?;
    for r in rows {
        out.write_record([
            config_hash.to_string(),
            r.run_id.clone(),
            r.seed.to_string(),
            r.variant.clone(),
            r.params.to_string(),
            r.train_error.to_string(),
            r.test_error.to_string(),
            r.residual_error.to_string(),
            r.best_epoch.to_string(),
            r.failed.to_string(),
        ])?;
    }
    let ok: Vec<&MetricsRow> = rows.iter().filter(|r| !r.failed).collect();
    let col = |f: fn(&MetricsRow) -> f64| stats(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    let cols = [col(|r| r.train_error), col(|r| r.test_error), col(|r| r.residual_error)];
    let variant = rows.first().map_or(String::new(), |r| r.variant.clone());
    let params = rows.first().map_or(String::new(), |r| r.params.to_string());
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let v: Vec<String> = cols.iter().map(|s| if pick == 0 { s.mean } else { s.std }.to_string()).collect();
        out.write_record([
            config_hash.to_string(),
            label.to_string(),
            String::new(),
            variant.clone(),
            params.clone(),
            v[0].clone(),
            v[1].clone(),
            v[2].clone(),
            String::new(),
            String::new(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
    pub models: Vec<Option<Model>>,
    pub histories: Vec<Option<TrainHistory>>,
    /// Index into `rows` of the lowest residual error.
    pub best: Option<usize>,
}

impl ExperimentOutcome {
    pub fn best_model(&self) -> Option<&Model> {
        self.best.and_then(|i| self.models[i].as_ref())
    }
}

/// Trained model and its metrics against a problem and test domain.
pub(crate) struct Scored {
    pub row: MetricsRow,
    pub model: Option<Model>,
    pub history: Option<TrainHistory>,
}

pub(crate) fn train_and_score(
    cfg: &ExperimentConfig,
    prob: &ProblemDef,
    test: &ProblemDef,
    seed: u64,
    run_id: String,
) -> Result<Scored> {
    let spec = cfg.arch()?;
    let mut model = build_model(&spec, seed)?;
    model.meta.problem = cfg.problem.name().into();
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let start = Instant::now();
    let mut row = MetricsRow {
        run_id,
        seed,
        variant: spec.variant.name().into(),
        params: spec.count_params(),
        train_error: f64::NAN,
        test_error: f64::NAN,
        residual_error: f64::NAN,
        best_epoch: 0,
        wall_time: 0.0,
        failed: true,
    };
    let (trained, history) = match train(&model, prob, &tc) {
        Ok(v) => v,
        Err(_) => {
            row.wall_time = start.elapsed().as_secs_f64();
            return Ok(Scored { row, model: None, history: None });
        }
    };
    row.wall_time = start.elapsed().as_secs_f64();
    row.failed = history.failed() || history.best.is_none();
    row.best_epoch = history.best.as_ref().map_or(0, |b| b.epoch);
    let e = score(cfg, &trained, prob, test)?;
    row.train_error = e.train_error;
    row.test_error = e.test_error;
    row.residual_error = e.residual_error;
    Ok(Scored { row, model: Some(trained), history: Some(history) })
}

/// Errors of one model against a config's problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train_error: f64,
    pub test_error: f64,
    pub residual_error: f64,
}

fn score(cfg: &ExperimentConfig, model: &Model, prob: &ProblemDef, test: &ProblemDef) -> Result<Evaluation> {
    let sign_free = cfg.problem == ProblemId::QuantumWell;
    let train_error = reference_mse(model, prob, &uniform_grid(&prob.domain, cfg.eval.points), sign_free)?;
    let test_error = reference_mse(model, test, &uniform_grid(&test.domain, cfg.eval.points), sign_free)?;
    let grid = uniform_grid(&prob.domain, cfg.eval.residual_points);
    let residual_error = match evaluate_loss(model, prob, &grid, model.meta.temperature) {
        Ok(p) => p.residual_error(),
        Err(Error::NonFinite { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(Evaluation { train_error, test_error, residual_error })
}

/// Scores a trained model on the config's train and test regions.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &Model) -> Result<Evaluation> {
    if model.spec.arity() != cfg.problem.inputs().len() {
        return Err(Error::Arity { expected: cfg.problem.inputs().len(), got: model.spec.arity() });
    }
    let (prob, _) = cfg.problem_def()?;
    let test = test_problem(cfg, &prob)?;
    score(cfg, model, &prob, &test)
}

/// Problem used for test errors: the training problem moved to the test domain.
pub(crate) fn test_problem(cfg: &ExperimentConfig, prob: &ProblemDef) -> Result<ProblemDef> {
    let domain = cfg.test_domain()?;
    if cfg.problem == ProblemId::QuantumWell {
        let Axis::Choice(values) = &domain.axes[1] else { unreachable!("well test domain has a choice axis") };
        return cfg.well_at(values).map(|p| p.with_domain(domain.clone()));
    }
    Ok(prob.clone().with_domain(domain))
}

/// Trains one model per seed and scores it. With `out`, writes
/// `metrics.csv`, `timing.csv`, `config.toml`, and per seed a history,
/// checkpoint and solution curve.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (prob, _) = cfg.problem_def()?;
    let test = test_problem(cfg, &prob)?;
    let hash = cfg.hash();
    let exec = cfg.train.loss.exec;
    let results = exec.map(&cfg.seeds, |&seed| train_and_score(cfg, &prob, &test, seed, format!("seed{seed}")));
    let scored = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<MetricsRow> = scored.iter().map(|s| s.row.clone()).collect();
    let best = select_best(&rows);
    let outcome = ExperimentOutcome {
        config_hash: hash.clone(),
        rows,
        best,
        models: scored.iter().map(|s| s.model.clone()).collect(),
        histories: scored.into_iter().map(|s| s.history).collect(),
    };
    if let Some(dir) = out {
        write_artifacts(cfg, &outcome, &prob, &test, dir)?;
    }
    Ok(outcome)
}

fn write_artifacts(cfg: &ExperimentConfig, o: &ExperimentOutcome, prob: &ProblemDef, test: &ProblemDef, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    write_metrics_csv(&o.rows, &o.config_hash, fs::File::create(dir.join("metrics.csv"))?)?;
    let mut timing = csv::Writer::from_path(dir.join("timing.csv"))?;
    timing.write_record(["run_id", "wall_seconds"])?;
    for r in &o.rows {
        timing.write_record([r.run_id.clone(), format!("{:.3}", r.wall_time)])?;
    }
    timing.flush()?;
    for ((row, model), history) in o.rows.iter().zip(&o.models).zip(&o.histories) {
        if let Some(h) = history {
            h.write_csv(&o.config_hash, fs::File::create(dir.join(format!("history_{}.csv", row.run_id)))?)?;
        }
        if let Some(m) = model {
            save_checkpoint(m, &dir.join(format!("checkpoint_{}.toml", row.run_id)))?;
            let f = fs::File::create(dir.join(format!("solution_{}.csv", row.run_id)))?;
            write_solution_csv(m, &[prob, test], cfg.eval.points, &o.config_hash, f)?;
        }
    }
    if let Some(b) = o.best {
        fs::write(dir.join("best.txt"), format!("{}\n", o.rows[b].run_id))?;
    }
    Ok(())
}

/// Model and reference on uniform grids of each problem's domain.
pub fn write_solution_csv<W: std::io::Write>(
    model: &Model,
    probs: &[&ProblemDef],
    n: usize,
    config_hash: &str,
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["config_hash".to_string(), "region".to_string()];
    header.extend(model.spec.inputs.iter().cloned());
    header.extend(["u".to_string(), "reference".to_string()]);
    out.write_record(&header)?;
    for (k, prob) in probs.iter().enumerate() {
        let grid = uniform_grid(&prob.domain, n);
        let u = model.forward_batch(&grid.points).unwrap_or_else(|_| vec![f64::NAN; grid.len()]);
        for (i, ui) in u.iter().enumerate() {
            let p = grid.point(i);
            let mut rec = vec![config_hash.to_string(), if k == 0 { "train" } else { "test" }.to_string()];
            rec.extend(p.iter().map(|v| v.to_string()));
            rec.push(ui.to_string());
            rec.push(prob.reference_at(p).map_or(String::new(), |r| r.to_string()));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `CE(t_j) = sum_{i <= j} (u(t_i) - u_true(t_i))^2` along `grid`.
pub fn cumulative_error(model: &Model, oracle: &dyn Fn(f64) -> f64, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let u = model.forward_batch(grid)?;
    let mut acc = 0.0;
    Ok(grid
        .iter()
        .zip(u)
        .map(|(&t, ui)| {
            acc += (ui - oracle(t)).powi(2);
            (t, acc)
        })
        .collect())
}

pub fn write_cumulative_csv<W: std::io::Write>(ce: &[(f64, f64)], config_hash: &str, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config_hash", "t", "cumulative_error"])?;
    for (t, c) in ce {
        out.write_record([config_hash.to_string(), t.to_string(), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
