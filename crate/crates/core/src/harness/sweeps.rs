use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{ExperimentConfig, ProblemId};
use super::experiment::{run_experiment, stats, uniform_grid};
use crate::error::{Error, Result};
use crate::funn::{build_model, Model, Variant};
use crate::physics::{evaluate_loss, CollocationBatch, Domain};
use crate::problems::{well_eigenfunction, well_eigenvalues, OscillatorOracle};
use crate::prune::{
    extract_expression, iterative_prune, prune_sweep, render, verify_expression, write_reports_csv, Expr, PruneReport,
};
use crate::train::train;

fn sub(out: Option<&Path>, name: &str) -> Option<std::path::PathBuf> {
    out.map(|d| d.join(name))
}

fn sha_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest of a grid's coordinates.
pub fn grid_hash(grid: &CollocationBatch) -> String {
    let bytes: Vec<u8> = grid.points.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    sha_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSizeRow {
    pub t_max: f64,
    pub mean_test: f64,
    pub min_test: f64,
    pub max_test: f64,
    pub test_grid: String,
}

/// One experiment per `T_max` on `[0, T_max]`, all scored on the same fixed
/// test interval. The configured input scale is stretched with the window,
/// so every run sees its training interval mapped onto the same range.
pub fn data_size_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<DataSizeRow>> {
    if !matches!(cfg.problem, ProblemId::DampedOscillator | ProblemId::ForcedOscillator) {
        return Err(Error::Precondition("the data-size sweep runs on an oscillator".into()));
    }
    let test = cfg.sweep.data_size_test;
    let base = cfg.domains.train[0][1];
    let mut rows = Vec::new();
    for &t_max in &cfg.sweep.t_max {
        let mut c = cfg.clone();
        c.domains.train = vec![[0.0, t_max]];
        for s in &mut c.model.input_scale {
            *s *= base / t_max;
        }
        c.domains.test = vec![test];
        let o = run_experiment(&c, sub(out, &format!("tmax_{t_max}")).as_deref())?;
        let tests: Vec<f64> = o.rows.iter().filter(|r| !r.failed).map(|r| r.test_error).collect();
        let s = stats(&tests);
        let grid = uniform_grid(&Domain::interval(test[0], test[1]), c.eval.points);
        rows.push(DataSizeRow { t_max, mean_test: s.mean, min_test: s.min, max_test: s.max, test_grid: grid_hash(&grid) });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("data_size.csv"))?;
        w.write_record(["config_hash", "t_max", "mean_test_error", "min_test_error", "max_test_error", "test_grid_hash"])?;
        let h = cfg.hash();
        for r in &rows {
            w.write_record([
                h.clone(),
                r.t_max.to_string(),
                r.mean_test.to_string(),
                r.min_test.to_string(),
                r.max_test.to_string(),
                r.test_grid.clone(),
            ])?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCountRow {
    pub variant: String,
    pub params: usize,
    pub train_mean: f64,
    pub train_min: f64,
    pub train_max: f64,
    pub test_mean: f64,
    pub test_min: f64,
    pub test_max: f64,
}

/// Every variant at every target size, seeds aggregated per cell.
pub fn param_count_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<ParamCountRow>> {
    if cfg.problem != ProblemId::Burgers {
        return Err(Error::Precondition("the parameter-count sweep runs on Burgers".into()));
    }
    let inputs = cfg.problem.inputs();
    let mut rows = Vec::new();
    for &variant in &cfg.sweep.variants {
        if !matches!(variant, Variant::MlpPinn | Variant::Mix2Funn | Variant::Hybrid) {
            return Err(Error::Config(format!("{} is not part of the size sweep", variant.name())));
        }
        for &size in &cfg.sweep.sizes {
            let mut c = cfg.clone().with_variant(variant);
            c.model = c.model.sized(inputs, size)?;
            let params = c.arch()?.count_params();
            let o = run_experiment(&c, sub(out, &format!("{}_{params}", variant.name())).as_deref())?;
            let ok: Vec<_> = o.rows.iter().filter(|r| !r.failed).collect();
            let tr = stats(&ok.iter().map(|r| r.train_error).collect::<Vec<_>>());
            let te = stats(&ok.iter().map(|r| r.test_error).collect::<Vec<_>>());
            rows.push(ParamCountRow {
                variant: variant.name().into(),
                params,
                train_mean: tr.mean,
                train_min: tr.min,
                train_max: tr.max,
                test_mean: te.mean,
                test_min: te.min,
                test_max: te.max,
            });
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("param_count.csv"))?;
        w.write_record([
            "config_hash",
            "variant",
            "params",
            "train_mean",
            "train_min",
            "train_max",
            "test_mean",
            "test_min",
            "test_max",
        ])?;
        let h = cfg.hash();
        for r in &rows {
            w.write_record([
                h.clone(),
                r.variant.clone(),
                r.params.to_string(),
                r.train_mean.to_string(),
                r.train_min.to_string(),
                r.train_max.to_string(),
                r.test_mean.to_string(),
                r.test_min.to_string(),
                r.test_max.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub sqrt_e: f64,
    /// Lowest training loss seen during the run.
    pub lowest_loss: f64,
    /// Loss of the kept model on a fixed grid, without dropout.
    pub eval_loss: f64,
}

/// Local minimum of a scanned curve, refined by a parabola through its
/// neighbors in log-loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub grid_index: usize,
    pub sqrt_e: f64,
    pub refined: f64,
    pub loss: f64,
}

/// Interior points lower than both neighbors whose flanking maxima (up to
/// the next lower point on each side) are at least `prominence` times their
/// value.
pub fn find_minima(xs: &[f64], ys: &[f64], prominence: f64) -> Vec<Minimum> {
    let mut out = Vec::new();
    for i in 1..xs.len().saturating_sub(1) {
        let (a, b, c) = (ys[i - 1], ys[i], ys[i + 1]);
        if !(b < a && b <= c) {
            continue;
        }
        let flank = |range: &mut dyn Iterator<Item = usize>| {
            let mut hi = b;
            for k in range {
                if ys[k] < b {
                    break;
                }
                hi = hi.max(ys[k]);
            }
            hi
        };
        let left = flank(&mut (0..i).rev());
        let right = flank(&mut (i + 1..ys.len()));
        if left.min(right) < prominence * b {
            continue;
        }
        let (la, lb, lc) = (a.max(1e-300).ln(), b.max(1e-300).ln(), c.max(1e-300).ln());
        let (x0, x1, x2) = (xs[i - 1], xs[i], xs[i + 1]);
        let d1 = (lb - la) / (x1 - x0);
        let d2 = (lc - lb) / (x2 - x1);
        let curv = (d2 - d1) / (0.5 * (x2 - x0));
        let refined = if curv > 0.0 {
            // vertex of the parabola through the three points
            let slope_mid = d1 + curv * (x1 - 0.5 * (x0 + x1));
            (x1 - slope_mid / curv).clamp(x0, x2)
        } else {
            x1
        };
        out.push(Minimum { grid_index: i, sqrt_e: x1, refined, loss: b });
    }
    out
}

/// Fresh model per candidate `sqrt(E)`, trained with that value held fixed.
pub fn energy_scan(cfg: &ExperimentConfig, grid: &[f64], out: Option<&Path>) -> Result<(Vec<EnergyRow>, Vec<Minimum>)> {
    if cfg.problem != ProblemId::QuantumWell {
        return Err(Error::Precondition("the energy scan runs on the quantum well".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("energy grid must be strictly increasing".into()));
    }
    let seed = cfg.seeds[0];
    let spec = cfg.arch()?;
    let mut tc = cfg.train.clone();
    tc.epochs = cfg.sweep.scan_epochs;
    tc.seed = seed;
    let exec = cfg.train.loss.exec;
    let rows = exec
        .map(grid, |&s| -> Result<EnergyRow> {
            let prob = cfg.well_at(&[s])?;
            let eval = uniform_grid(&prob.domain, cfg.eval.points);
            let mut row = EnergyRow { sqrt_e: s, lowest_loss: f64::INFINITY, eval_loss: f64::INFINITY };
            for r in 0..cfg.sweep.scan_restarts.max(1) as u64 {
                let mut tc = tc.clone();
                tc.seed = seed.wrapping_add(r);
                let model = build_model(&spec, tc.seed)?;
                let (best, h) = train(&model, &prob, &tc)?;
                let lowest = h.best.as_ref().map_or(f64::INFINITY, |b| b.total);
                if lowest < row.lowest_loss {
                    row.lowest_loss = lowest;
                    row.eval_loss =
                        evaluate_loss(&best, &prob, &eval, best.meta.temperature).map_or(f64::INFINITY, |p| p.total);
                }
            }
            Ok(row)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.sqrt_e).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.lowest_loss).collect();
    let minima = find_minima(&xs, &ys, cfg.sweep.minima_prominence);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let h = cfg.hash();
        let mut w = csv::Writer::from_path(dir.join("energy_scan.csv"))?;
        w.write_record(["config_hash", "sqrt_e", "lowest_loss", "eval_loss"])?;
        for r in &rows {
            w.write_record([h.clone(), r.sqrt_e.to_string(), r.lowest_loss.to_string(), r.eval_loss.to_string()])?;
        }
        w.flush()?;
        write_minima(&minima, &h, &dir.join("energy_minima.csv"))?;
    }
    Ok((rows, minima))
}

fn write_minima(minima: &[Minimum], hash: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config_hash", "grid_index", "sqrt_e", "refined_sqrt_e", "loss"])?;
    for m in minima {
        w.write_record([
            hash.to_string(),
            m.grid_index.to_string(),
            m.sqrt_e.to_string(),
            m.refined.to_string(),
            m.loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Residual plus boundary loss of one trained model across `grid`, on
/// `n_x` uniform positions, without retraining.
pub fn loss_vs_energy(cfg: &ExperimentConfig, model: &Model, grid: &[f64], n_x: usize) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&s| {
            let prob = cfg.well_at(&[s])?;
            let pts = uniform_grid(&prob.domain, n_x);
            let p = evaluate_loss(model, &prob, &pts, model.meta.temperature)?;
            Ok((s, p.residual_error()))
        })
        .collect()
}

pub fn write_loss_vs_energy(rows: &[(f64, f64)], minima: &[Minimum], hash: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("loss_vs_energy.csv"))?;
    w.write_record(["config_hash", "sqrt_e", "loss"])?;
    for (s, l) in rows {
        w.write_record([hash.to_string(), s.to_string(), l.to_string()])?;
    }
    w.flush()?;
    write_minima(minima, hash, &dir.join("loss_vs_energy_minima.csv"))
}

/// One pruned model with its extracted expression, when extraction applies.
#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub report: PruneReport,
    pub model: Model,
    pub expression: Option<Expr>,
    /// Max deviation between expression and model over 1000 random points.
    pub deviation: Option<f64>,
}

/// Prunes `base` at every configured ratio (or through the iterative
/// schedule when one is set), fine-tunes each copy, and extracts its
/// expression.
pub fn prune_experiment(cfg: &ExperimentConfig, base: &Model, out: Option<&Path>) -> Result<Vec<PrunedModel>> {
    let (prob, _) = cfg.problem_def()?;
    let grid = uniform_grid(&prob.domain, cfg.eval.residual_points);
    let mut tc = cfg.train.clone();
    tc.epochs = cfg.sweep.fine_tune_epochs;
    tc.seed = base.meta.seed;
    let fine_tune = (tc.epochs > 0).then_some(&tc);
    let pruned = if cfg.sweep.iterative.is_empty() {
        prune_sweep(base, &prob, &cfg.sweep.ratios, fine_tune, &grid, cfg.train.loss.exec)?
    } else {
        iterative_prune(base, &prob, &cfg.sweep.iterative, fine_tune, &grid)?
    };
    let mut results = Vec::with_capacity(pruned.len());
    for (report, model) in pruned {
        let (expression, deviation) = match extract_expression(&model) {
            Ok(e) => {
                let d = verify_expression(&e, &model, &prob.domain, 1000, base.meta.seed)?;
                (Some(e), Some(d))
            }
            Err(Error::Architecture(_)) => (None, None),
            Err(e) => return Err(e),
        };
        results.push(PrunedModel { report, model, expression, deviation });
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let h = cfg.hash();
        let reports: Vec<PruneReport> = results.iter().map(|r| r.report.clone()).collect();
        write_reports_csv(&reports, &h, fs::File::create(dir.join("prune.csv"))?)?;
        let names = base.spec.inputs.clone();
        let mut text = String::new();
        for (i, r) in results.iter().enumerate() {
            save_checkpoint(&r.model, &dir.join(format!("pruned_{i}.toml")))?;
            if let (Some(e), Some(d)) = (&r.expression, r.deviation) {
                let line = format!("ratio {}: u = {}  (max deviation {d:.3e})\n", r.report.ratio, render(e, &names, 4));
                fs::write(dir.join(format!("pruned_{i}.txt")), &line)?;
                text.push_str(&line);
            }
        }
        fs::write(dir.join("expressions.txt"), text)?;
    }
    Ok(results)
}

/// Writes the configured problem's reference solution as plot-ready CSV.
///
/// Oscillators: `t,u` on train and test domains. Burgers: the full
/// finite-difference field. Well: the first four eigenfunctions.
pub fn oracle_export(cfg: &ExperimentConfig, dir: &Path) -> Result<std::path::PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let h = cfg.hash();
    let n = cfg.eval.points;
    match cfg.problem {
        ProblemId::DampedOscillator | ProblemId::ForcedOscillator => {
            let oracle = OscillatorOracle::new(cfg.oscillator)?;
            let path = dir.join("oscillator_reference.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["config_hash", "region", "t", "u"])?;
            for (region, d) in [("train", &cfg.domains.train[0]), ("test", &cfg.domains.test[0])] {
                for i in 0..n {
                    let t = d[0] + (d[1] - d[0]) * i as f64 / (n - 1).max(1) as f64;
                    w.write_record([h.clone(), region.into(), t.to_string(), oracle.at(t).to_string()])?;
                }
            }
            w.flush()?;
            Ok(path)
        }
        ProblemId::Burgers => {
            let (_, field) = cfg.problem_def()?;
            let field = field.ok_or_else(|| Error::Precondition("Burgers problem carries no reference field".into()))?;
            let path = dir.join("burgers_reference.csv");
            let stride = (field.nx / 256).max(1);
            field.write_csv(&h, fs::File::create(&path)?, stride)?;
            Ok(path)
        }
        ProblemId::QuantumWell => {
            let path = dir.join("well_reference.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["config_hash", "state", "sqrt_e", "x", "psi"])?;
            for state in 1..=4 {
                let s = well_eigenvalues(state)?;
                for i in 0..n {
                    let x = -1.0 + 2.0 * i as f64 / (n - 1).max(1) as f64;
                    w.write_record([h.clone(), state.to_string(), s.to_string(), x.to_string(), well_eigenfunction(state, x).to_string()])?;
                }
            }
            w.flush()?;
            Ok(path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funn::ArchSpec;
    use std::f64::consts::PI;

    #[test]
    fn minima_of_a_sampled_well() {
        let xs: Vec<f64> = (0..60).map(|i| 1.0 + 6.0 * i as f64 / 59.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 1e-4 + (x * 2.0).sin().powi(2)).collect();
        let m = find_minima(&xs, &ys, 10.0);
        assert_eq!(m.len(), 4);
        for (mi, n) in m.iter().zip(1..) {
            let target = n as f64 * PI / 2.0;
            assert!((mi.refined - target).abs() < 0.02 * target, "{mi:?}");
        }
    }

    #[test]
    fn shallow_dips_are_not_minima() {
        let xs: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let ys = [1.0, 0.9, 1.0, 0.5, 1e-3, 0.5, 1.0, 0.999, 1.0];
        let m = find_minima(&xs, &ys, 10.0);
        assert_eq!(m.iter().map(|m| m.grid_index).collect::<Vec<_>>(), vec![4]);
        assert_eq!(find_minima(&xs, &ys, 1.0).len(), 3);
    }

    #[test]
    fn zero_stub_gives_flat_curve() {
        let cfg = ExperimentConfig::preset(ProblemId::QuantumWell);
        let spec = ArchSpec::mlp(&["x", "sqrt_e"], &[2]).unwrap();
        let n = spec.count_params();
        let zero = Model::from_params(spec, vec![0.0; n]).unwrap();
        let grid: Vec<f64> = (0..10).map(|i| 1.0 + 0.5 * i as f64).collect();
        let rows = loss_vs_energy(&cfg, &zero, &grid, 32).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.1 == rows[0].1));
    }

    #[test]
    fn sweeps_check_their_problem() {
        let cfg = ExperimentConfig::preset(ProblemId::Burgers);
        assert!(data_size_sweep(&cfg, None).is_err());
        assert!(energy_scan(&cfg, &[1.0, 2.0], None).is_err());
        let osc = ExperimentConfig::preset(ProblemId::DampedOscillator);
        assert!(param_count_sweep(&osc, None).is_err());
    }

    #[test]
    fn oracle_exports_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::preset(ProblemId::DampedOscillator);
        cfg.eval.points = 8;
        let p = oracle_export(&cfg, dir.path()).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert!(text.starts_with("config_hash,region,t,u\n"));
        assert_eq!(text.lines().count(), 17);
        let cfg = ExperimentConfig::preset(ProblemId::QuantumWell);
        let text = fs::read_to_string(oracle_export(&cfg, dir.path()).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * cfg.eval.points);
    }

    #[test]
    fn prune_experiment_verifies_each_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::preset(ProblemId::DampedOscillator);
        cfg.sweep.fine_tune_epochs = 2;
        cfg.train.collocation.points = 16;
        cfg.eval.residual_points = 32;
        let mut base = build_model(&cfg.arch().unwrap(), 3).unwrap();
        // untrained exponential paths overflow the absolute tolerance
        base.params.iter_mut().for_each(|p| *p *= 0.1);
        let res = prune_experiment(&cfg, &base, Some(dir.path())).unwrap();
        assert_eq!(res.len(), cfg.sweep.ratios.len());
        assert_eq!(res.last().unwrap().model.mix_weight_indices().iter().filter(|&&i| res.last().unwrap().model.mask[i]).count(), 1);
        let devs: Vec<f64> = res.iter().map(|r| r.deviation.unwrap()).collect();
        assert!(devs.iter().all(|&d| d < 1e-9), "{devs:?}");
        let csv = fs::read_to_string(dir.path().join("prune.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + res.len());
        assert!(dir.path().join("expressions.txt").exists());
    }

    #[test]
    fn tiny_data_size_sweep_has_one_row_per_tmax() {
        let mut cfg = ExperimentConfig::preset(ProblemId::DampedOscillator);
        cfg.seeds = vec![0, 1];
        cfg.train.epochs = 3;
        cfg.train.collocation.points = 16;
        cfg.sweep.t_max = vec![10.0, 20.0, 40.0];
        cfg.eval.points = 32;
        let rows = data_size_sweep(&cfg, None).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.test_grid == rows[0].test_grid));
        assert!(rows.iter().all(|r| r.min_test <= r.mean_test && r.mean_test <= r.max_test));
    }
}
