use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::funn::{ArchSpec, FunctionKind, Head, Normalization, Variant, Wiring};
use crate::physics::{Axis, Domain, ProblemDef};
use crate::problems::{
    burgers_with_reference, damped_oscillator, forced_oscillator, quantum_well, quantum_well_at, well_eigenvalues,
    BurgersField, BurgersGrid, BurgersParams, OscillatorParams, WellParams,
};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    DampedOscillator,
    ForcedOscillator,
    Burgers,
    QuantumWell,
}

impl ProblemId {
    pub fn name(self) -> &'static str {
        match self {
            ProblemId::DampedOscillator => "damped_oscillator",
            ProblemId::ForcedOscillator => "forced_oscillator",
            ProblemId::Burgers => "burgers",
            ProblemId::QuantumWell => "quantum_well",
        }
    }

    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            ProblemId::DampedOscillator | ProblemId::ForcedOscillator => &["t"],
            ProblemId::Burgers => &["x", "t"],
            ProblemId::QuantumWell => &["x", "sqrt_e"],
        }
    }
}

/// Architecture choices; turned into an [`ArchSpec`] per problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Mixed-function neurons (mixed variants).
    pub neurons: usize,
    /// Hidden widths (MLP and hybrid).
    pub hidden: Vec<usize>,
    pub wiring: Wiring,
    pub normalization: Normalization,
    pub head: Head,
    pub functions: Vec<FunctionKind>,
    /// Fixed input factors; empty for none.
    pub input_scale: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Mix2Funn,
            neurons: 5,
            hidden: vec![256, 256],
            wiring: Wiring::Shared,
            normalization: Normalization::Raw,
            head: Head::Quadratic,
            functions: FunctionKind::library(),
            input_scale: vec![],
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, inputs: &[&str]) -> Result<ArchSpec> {
        let spec = match self.variant {
            Variant::MixFunn | Variant::Mix2Funn => ArchSpec::mixed(
                self.variant,
                inputs,
                self.functions.clone(),
                self.neurons,
                self.wiring,
                self.normalization,
                self.head,
            )?,
            Variant::MlpPinn => ArchSpec::mlp(inputs, &self.hidden)?,
            Variant::Hybrid => ArchSpec::hybrid(inputs, &self.hidden)?,
        };
        if self.input_scale.is_empty() {
            Ok(spec)
        } else {
            spec.with_input_scale(self.input_scale.clone())
        }
    }

    /// Resizes toward `target` parameters: neurons for mixed variants, equal
    /// widths for the MLP, the first width for the hybrid.
    pub fn sized(&self, inputs: &[&str], target: usize) -> Result<ModelConfig> {
        let mut best: Option<(usize, ModelConfig)> = None;
        for n in 1..=512 {
            let mut c = self.clone();
            match self.variant {
                Variant::MixFunn | Variant::Mix2Funn => c.neurons = n,
                Variant::MlpPinn => c.hidden = vec![n; self.hidden.len().max(1)],
                Variant::Hybrid => {
                    let mut h = self.hidden.clone();
                    if h.is_empty() {
                        h.push(n);
                    } else {
                        h[0] = n;
                    }
                    c.hidden = h;
                }
            }
            let count = c.arch(inputs)?.count_params();
            let gap = count.abs_diff(target);
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, c));
            }
            if count > target {
                break;
            }
        }
        Ok(best.expect("at least one size tried").1)
    }
}

/// Train and test regions. Intervals are per input axis; for the well the
/// energy axis comes from the listed states instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub train: Vec<[f64; 2]>,
    pub test: Vec<[f64; 2]>,
    /// Well eigenstates held out for the test error.
    pub test_states: Vec<usize>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig { train: vec![[0.0, 20.0]], test: vec![[20.0, 50.0]], test_states: vec![1, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Uniform points per test or train error grid.
    pub points: usize,
    /// Uniform points of the residual-error grid.
    pub residual_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { points: 512, residual_points: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl EnergyGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.n <= 1 {
            return vec![self.lo];
        }
        (0..self.n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64).collect()
    }
}

impl Default for EnergyGrid {
    fn default() -> Self {
        EnergyGrid { lo: 1.0, hi: 7.0, n: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub t_max: Vec<f64>,
    /// Fixed test interval of the data-size sweep.
    pub data_size_test: [f64; 2],
    pub variants: Vec<Variant>,
    /// Target parameter counts of the size sweep.
    pub sizes: Vec<usize>,
    pub ratios: Vec<f64>,
    pub fine_tune_epochs: usize,
    /// Staged ratios for iterative pruning; empty for one-shot.
    pub iterative: Vec<f64>,
    pub energies: EnergyGrid,
    pub scan_epochs: usize,
    /// Trainings per candidate; the lowest loss is kept.
    pub scan_restarts: usize,
    /// Minimum depth of a reported minimum, as a ratio to the lower of its
    /// two flanking maxima.
    pub minima_prominence: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            t_max: vec![10.0, 20.0, 40.0, 60.0, 80.0],
            data_size_test: [80.0, 150.0],
            variants: vec![Variant::MlpPinn, Variant::Mix2Funn, Variant::Hybrid],
            sizes: vec![56, 73, 150, 353],
            ratios: vec![0.0, 0.2, 0.4, 0.6, 0.8, 34.0 / 35.0],
            fine_tune_epochs: 1000,
            iterative: vec![],
            energies: EnergyGrid::default(),
            scan_epochs: 2000,
            scan_restarts: 2,
            minima_prominence: 10.0,
        }
    }
}

/// Everything one experiment needs. Unset fields take the problem preset's
/// value, see [`ExperimentConfig::preset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemId,
    pub seeds: Vec<u64>,
    /// Artifact directory; not part of the config hash.
    pub output: PathBuf,
    pub oscillator: OscillatorParams,
    pub burgers: BurgersParams,
    pub burgers_grid: BurgersGrid,
    pub well: WellParams,
    pub domains: DomainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Problem defaults, Mix2Funn model.
    pub fn preset(problem: ProblemId) -> Self {
        let mut cfg = ExperimentConfig {
            name: problem.name().into(),
            problem,
            seeds: vec![0, 1, 2, 3, 4],
            output: PathBuf::from("runs").join(problem.name()),
            oscillator: OscillatorParams::damped(),
            burgers: BurgersParams::default(),
            burgers_grid: BurgersGrid::default(),
            well: WellParams::default(),
            domains: DomainConfig::default(),
            model: ModelConfig { input_scale: vec![0.25], ..Default::default() },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        };
        match problem {
            ProblemId::DampedOscillator => {}
            ProblemId::ForcedOscillator => cfg.oscillator = OscillatorParams::forced(),
            ProblemId::Burgers => {
                cfg.domains.train = vec![[-1.0, 1.0], [0.0, 1.0]];
                cfg.domains.test = vec![[-1.0, 1.0], [1.0, 2.0]];
                cfg.model = ModelConfig { neurons: 2, head: Head::Affine, hidden: vec![16, 16], ..Default::default() };
                cfg.train.collocation.points = 2048;
                cfg.sweep.iterative = vec![0.8, 0.9];
            }
            ProblemId::QuantumWell => {
                cfg.domains.train = vec![[-1.0, 1.0]];
                cfg.domains.test = vec![[-1.0, 1.0]];
                cfg.model = ModelConfig {
                    neurons: 3,
                    functions: vec![FunctionKind::Sin, FunctionKind::Cos, FunctionKind::Identity],
                    input_scale: vec![1.0, 0.5],
                    ..Default::default()
                };
                cfg.well.anchor_weight = 10.0;
                cfg.train.dropout = 0.0;
            }
        }
        cfg
    }

    /// Switches the model to `variant` with that variant's defaults.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.model.variant = variant;
        if matches!(variant, Variant::MlpPinn | Variant::Hybrid) {
            let t = TrainConfig::for_variant(variant);
            self.train.adam.lr = t.adam.lr;
            self.train.dropout = t.dropout;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.train.validate()?;
        let n = self.problem.inputs().len();
        let want = if self.problem == ProblemId::QuantumWell { 1 } else { n };
        if self.domains.train.len() != want || self.domains.test.len() != want {
            return Err(Error::Config(format!("{} expects {want} domain interval(s)", self.problem.name())));
        }
        for iv in self.domains.train.iter().chain(&self.domains.test) {
            if !(iv[1] > iv[0]) {
                return Err(Error::Config(format!("empty interval {iv:?}")));
            }
        }
        // the test region may touch the train region but not overlap its interior
        if matches!(self.problem, ProblemId::DampedOscillator | ProblemId::ForcedOscillator | ProblemId::Burgers) {
            let last = want - 1;
            let (tr, te) = (self.domains.train[last], self.domains.test[last]);
            if te[0] < tr[1] && tr[0] < te[1] {
                return Err(Error::Config(format!("test interval {te:?} overlaps train interval {tr:?}")));
            }
        }
        self.model.arch(self.problem.inputs())?;
        Ok(())
    }

    /// Training problem, plus the Burgers reference field when relevant.
    pub fn problem_def(&self) -> Result<(ProblemDef, Option<Arc<BurgersField>>)> {
        let tr = &self.domains.train;
        Ok(match self.problem {
            ProblemId::DampedOscillator | ProblemId::ForcedOscillator => {
                let build = if self.problem == ProblemId::DampedOscillator { damped_oscillator } else { forced_oscillator };
                let p = build(&self.oscillator, tr[0][1])?;
                (p.with_domain(Domain::boxed(&[(tr[0][0], tr[0][1])])), None)
            }
            ProblemId::Burgers => {
                let params = BurgersParams { x_lo: tr[0][0], x_hi: tr[0][1], t_lo: tr[1][0], t_hi: tr[1][1], ..self.burgers };
                let mut grid = self.burgers_grid;
                grid.t_end = grid.t_end.max(self.domains.test[1][1]);
                let (p, field) = burgers_with_reference(&params, &grid)?;
                (p, Some(field))
            }
            ProblemId::QuantumWell => (quantum_well(&self.well)?, None),
        })
    }

    /// Domain of the test error.
    pub fn test_domain(&self) -> Result<Domain> {
        let te = &self.domains.test;
        Ok(match self.problem {
            ProblemId::QuantumWell => {
                let values = self.domains.test_states.iter().map(|&n| well_eigenvalues(n)).collect::<Result<Vec<_>>>()?;
                if values.is_empty() {
                    return Err(Error::Config("no test states for the well".into()));
                }
                Domain { axes: vec![Axis::Interval { lo: te[0][0], hi: te[0][1] }, Axis::Choice(values)] }
            }
            _ => Domain::boxed(&te.iter().map(|iv| (iv[0], iv[1])).collect::<Vec<_>>()),
        })
    }

    /// Well problem at explicit `sqrt(E)` values.
    pub fn well_at(&self, values: &[f64]) -> Result<ProblemDef> {
        quantum_well_at(&self.well, values)
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        self.model.arch(self.problem.inputs())
    }

    /// Short digest of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let text = toml::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config document over its problem preset, then applies
    /// `key.path=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let problem: ProblemId = match user.get("problem") {
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(format!("problem: {}", e.message())))?,
            None => return Err(Error::Config("config needs a `problem` entry".into())),
        };
        let mut base = ExperimentConfig::preset(problem);
        if let Some(v) = user.get("model").and_then(|m| m.get("variant")) {
            let variant: Variant =
                v.clone().try_into().map_err(|e: toml::de::Error| Error::Config(format!("model.variant: {}", e.message())))?;
            base = base.with_variant(variant);
        }
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `table`; the value is read as TOML, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut node = table;
    for p in parts {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {spec:?}: {p} is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [ProblemId::DampedOscillator, ProblemId::ForcedOscillator, ProblemId::Burgers, ProblemId::QuantumWell] {
            ExperimentConfig::preset(p).validate().unwrap();
        }
        assert_eq!(ExperimentConfig::preset(ProblemId::DampedOscillator).arch().unwrap().count_params(), 77);
        assert_eq!(ExperimentConfig::preset(ProblemId::Burgers).arch().unwrap().count_params(), 59);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = ExperimentConfig::preset(ProblemId::DampedOscillator);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[]).unwrap(), cfg);
        let o = vec!["train.epochs=50".to_string(), "seeds=[7]".into(), "name=quick".into()];
        let c = ExperimentConfig::from_toml_str("problem = \"damped_oscillator\"", &o).unwrap();
        assert_eq!((c.train.epochs, c.seeds.clone(), c.name.as_str()), (50, vec![7], "quick"));
    }

    #[test]
    fn variant_switch_picks_its_defaults() {
        let c = ExperimentConfig::from_toml_str("problem = \"damped_oscillator\"\n[model]\nvariant = \"mlp_pinn\"", &[])
            .unwrap();
        assert_eq!((c.train.adam.lr, c.train.dropout), (0.01, 0.0));
        assert_eq!(c.arch().unwrap().count_params(), 66_561);
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = ExperimentConfig::preset(ProblemId::Burgers);
        let mut b = a.clone();
        b.output = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(ExperimentConfig::from_toml_str("seeds = []", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("problem = \"damped_oscillator\"\nseeds = []", &[]).is_err());
        let overlap = ["domains.test=[[10.0, 30.0]]".to_string()];
        assert!(ExperimentConfig::from_toml_str("problem = \"damped_oscillator\"", &overlap).is_err());
        assert!(ExperimentConfig::from_toml_str("problem = \"damped_oscillator\"", &["bogus".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("problem = \"nope\"", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("problem = \"damped_oscillator\"", &["train.epoch=3".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("problem = \"burgers\"\ntypo = 1", &[]).is_err());
    }

    #[test]
    fn sizing_hits_targets() {
        let inputs = ProblemId::Burgers.inputs();
        let base = ExperimentConfig::preset(ProblemId::Burgers).model;
        let mix = base.sized(inputs, 56).unwrap();
        assert_eq!(mix.arch(inputs).unwrap().count_params(), 59);
        let mlp = ModelConfig { variant: Variant::MlpPinn, ..base.clone() }.sized(inputs, 353).unwrap();
        let n = mlp.arch(inputs).unwrap().count_params();
        assert!(n.abs_diff(353) < 25, "{n}");
    }
}
