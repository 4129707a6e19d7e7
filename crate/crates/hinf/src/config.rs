//! Experiment configuration, JSON with a versioned schema.
//!
//! Matrices are row-major nested arrays. `system` and `cost` may instead be
//! `{"file": "..."}`, resolved relative to the config file.

use std::fs;
use std::path::{Path, PathBuf};

use hinf_core::exact_pi::{self, PiConfig};
use hinf_core::game::{self, CostSpec, Gains, SystemModel};
use hinf_core::robust::{DisturbanceMode, DisturbanceSpec, DEFAULT_DECAY_RATE};
use hinf_core::simulate::{self, ExplorationSignal, SimConfig};
use hinf_core::{problems, robust};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field(field: &str, message: impl ToString) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "exact")]
    Exact,
    #[serde(rename = "model_free")]
    ModelFree,
    #[serde(rename = "robust")]
    Robust,
    #[serde(rename = "reproduce_example_1")]
    ReproduceExample1,
    #[serde(rename = "reproduce_example_2")]
    ReproduceExample2,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Exact => "exact",
            Mode::ModelFree => "model_free",
            Mode::Robust => "robust",
            Mode::ReproduceExample1 => "reproduce_example_1",
            Mode::ReproduceExample2 => "reproduce_example_2",
        }
    }

    pub fn needs_data(self) -> bool {
        matches!(
            self,
            Mode::ModelFree | Mode::ReproduceExample1 | Mode::ReproduceExample2
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    File { file: String },
    Inline(T),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemMatrices {
    pub a: Rows,
    pub b1: Rows,
    pub b2: Rows,
    pub c: Rows,
    pub d: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub q: Rows,
    pub r: Rows,
    pub gamma: f64,
}

fn default_eps() -> f64 {
    exact_pi::DEFAULT_EPS
}
fn default_max_inner() -> usize {
    exact_pi::DEFAULT_MAX_INNER
}
fn default_max_outer() -> usize {
    exact_pi::DEFAULT_MAX_OUTER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiSection {
    #[serde(default = "default_eps")]
    pub eps_inner: f64,
    #[serde(default = "default_eps")]
    pub eps_outer: f64,
    #[serde(default = "default_max_inner")]
    pub max_inner: usize,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    /// Stabilizing control gain, also the behavior policy for data collection.
    pub initial_lu: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_pu: Option<Rows>,
}

fn default_amplitude() -> f64 {
    simulate::DEFAULT_AMPLITUDE
}
fn default_frequency() -> f64 {
    simulate::DEFAULT_FREQUENCY
}
fn default_lambda() -> f64 {
    simulate::DEFAULT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationSection {
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    #[serde(default = "default_lambda")]
    pub lambda_u: f64,
    #[serde(default = "default_lambda")]
    pub lambda_v: f64,
}

impl Default for ExplorationSection {
    fn default() -> Self {
        Self {
            amplitude: default_amplitude(),
            frequency: default_frequency(),
            lambda_u: default_lambda(),
            lambda_v: default_lambda(),
        }
    }
}

fn default_substeps() -> usize {
    simulate::DEFAULT_SUBSTEPS
}
fn default_paths() -> usize {
    simulate::DEFAULT_PATHS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub horizon: f64,
    pub intervals: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub exploration: ExplorationSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    ConstantRandom,
    Decaying,
    PerIterationRandom,
}

impl From<DisturbanceKind> for DisturbanceMode {
    fn from(k: DisturbanceKind) -> Self {
        match k {
            DisturbanceKind::Zero => DisturbanceMode::Zero,
            DisturbanceKind::ConstantRandom => DisturbanceMode::ConstantRandom,
            DisturbanceKind::Decaying => DisturbanceMode::Decaying,
            DisturbanceKind::PerIterationRandom => DisturbanceMode::PerIterationRandom,
        }
    }
}

fn default_decay() -> f64 {
    DEFAULT_DECAY_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub mode: DisturbanceKind,
    /// Frobenius norms of the injected `Delta M`.
    pub magnitudes: Vec<f64>,
    #[serde(default = "default_decay")]
    pub decay_rate: f64,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub mode: Mode,
    pub system: Source<SystemMatrices>,
    pub cost: Source<CostWeights>,
    pub pi: PiSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceSection>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

/// Command-line overrides applied before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: Option<usize>,
    pub substeps: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        Self::from_json(&text, path)
    }

    /// Replaces file references by their contents.
    pub fn resolve_files(&mut self, base: &Path) -> Result<(), ConfigError> {
        if let Source::File { file } = &self.system {
            let path = base.join(file);
            let m: SystemMatrices = serde_json::from_str(&read(&path)?)
                .map_err(|source| ConfigError::Parse { path, source })?;
            self.system = Source::Inline(m);
        }
        if let Source::File { file } = &self.cost {
            let path = base.join(file);
            let c: CostWeights = serde_json::from_str(&read(&path)?)
                .map_err(|source| ConfigError::Parse { path, source })?;
            self.cost = Source::Inline(c);
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seeds = vec![seed];
        }
        if let Some(out) = &o.out {
            self.output_dir = Some(out.to_string_lossy().into_owned());
        }
        if let Some(sim) = self.sim.as_mut() {
            if let Some(h) = o.paths {
                sim.paths = h;
            }
            if let Some(g) = o.substeps {
                sim.substeps = g;
            }
        }
    }

    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// The config without `output_dir`, which does not affect results.
    pub fn canonical(&self) -> Self {
        Self {
            output_dir: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Simulation settings without a seed.
#[derive(Debug, Clone)]
pub struct SimSettings {
    pub horizon: f64,
    pub intervals: usize,
    pub substeps: usize,
    pub paths: usize,
    pub x0: DVector<f64>,
    pub exploration: ExplorationSignal,
}

impl SimSettings {
    pub fn with_seed(&self, seed: u64) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            intervals: self.intervals,
            substeps: self.substeps,
            paths: self.paths,
            x0: self.x0.clone(),
            seed,
            exploration: self.exploration.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DisturbanceSettings {
    pub mode: DisturbanceMode,
    pub magnitudes: Vec<f64>,
    pub decay_rate: f64,
}

impl DisturbanceSettings {
    pub fn spec(&self, magnitude: f64, seed: u64) -> DisturbanceSpec {
        let mut s = DisturbanceSpec::new(self.mode, magnitude, seed);
        s.decay_rate = self.decay_rate;
        s
    }
}

/// A validated experiment. `system` is optional so that the learning phase
/// can be run on a copy without the model.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub mode: Mode,
    pub system: Option<SystemModel>,
    pub cost: CostSpec,
    pub pi: PiConfig,
    pub sim: Option<SimSettings>,
    pub disturbance: Option<DisturbanceSettings>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Experiment {
    pub fn without_system(&self) -> Self {
        Self {
            system: None,
            ..self.clone()
        }
    }
}

pub fn matrix(rows: &Rows, name: &str) -> Result<DMatrix<f64>, ConfigError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(field(name, "matrix must be non-empty"));
    }
    if let Some(i) = rows.iter().position(|row| row.len() != c) {
        return Err(field(
            name,
            format!("row {i} has {} entries, expected {c}", rows[i].len()),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(field(name, "entries must be finite"));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

pub fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn inline<'a, T>(s: &'a Source<T>, name: &str) -> Result<&'a T, ConfigError> {
    match s {
        Source::Inline(t) => Ok(t),
        Source::File { file } => Err(field(name, format!("unresolved file reference {file}"))),
    }
}

/// Checks the whole config; nothing is simulated or iterated.
pub fn validate(cfg: &ExperimentConfig) -> Result<Experiment, ConfigError> {
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(field(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", cfg.schema_version),
        ));
    }
    if cfg.name.is_empty()
        || !cfg
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(field("name", "must be non-empty and use only [A-Za-z0-9_-]"));
    }

    let s = inline(&cfg.system, "system")?;
    let system = SystemModel::new(
        matrix(&s.a, "system.a")?,
        matrix(&s.b1, "system.b1")?,
        matrix(&s.b2, "system.b2")?,
        matrix(&s.c, "system.c")?,
        matrix(&s.d, "system.d")?,
    )
    .map_err(|e| field("system", e))?;
    let (n, m1, m2) = (system.n(), system.m1(), system.m2());

    let c = inline(&cfg.cost, "cost")?;
    let cost = CostSpec::new(matrix(&c.q, "cost.q")?, matrix(&c.r, "cost.r")?, c.gamma)
        .map_err(|e| field("cost", e))?;
    cost.check_against(&system).map_err(|e| field("cost", e))?;

    let mut pi = PiConfig::new(matrix(&cfg.pi.initial_lu, "pi.initial_lu")?);
    pi.eps_inner = cfg.pi.eps_inner;
    pi.eps_outer = cfg.pi.eps_outer;
    pi.max_inner = cfg.pi.max_inner;
    pi.max_outer = cfg.pi.max_outer;
    pi.initial_pu = cfg
        .pi
        .initial_pu
        .as_ref()
        .map(|p| matrix(p, "pi.initial_pu"))
        .transpose()?;
    pi.validate(n, m1).map_err(|e| field("pi", e))?;
    let behavior = Gains::new(pi.initial_lu.clone(), DMatrix::zeros(m2, n));
    let check = game::is_stabilizer(&behavior, &system).map_err(|e| field("pi.initial_lu", e))?;
    if !check.stable {
        return Err(field(
            "pi.initial_lu",
            format!(
                "(Lu, 0) is not mean-square stabilizing (abscissa {:e})",
                check.abscissa
            ),
        ));
    }

    let sim = match &cfg.sim {
        Some(sim) => Some(sim_settings(sim, &system, &cost, &pi.initial_lu)?),
        None if cfg.mode.needs_data() => {
            return Err(field("sim", format!("required for mode {}", cfg.mode.as_str())))
        }
        None => None,
    };

    let disturbance = match &cfg.disturbance {
        Some(d) => Some(disturbance_settings(d)?),
        None if cfg.mode == Mode::Robust => {
            return Err(field("disturbance", "required for mode robust"))
        }
        None => None,
    };

    if cfg.seeds.is_empty() {
        return Err(field("seeds", "at least one seed is required"));
    }

    Ok(Experiment {
        name: cfg.name.clone(),
        mode: cfg.mode,
        system: Some(system),
        cost,
        pi,
        sim,
        disturbance,
        seeds: cfg.seeds.clone(),
        output_dir: PathBuf::from(cfg.output_dir.as_deref().unwrap_or("out")),
    })
}

fn sim_settings(
    sim: &SimSection,
    system: &SystemModel,
    cost: &CostSpec,
    behavior_lu: &DMatrix<f64>,
) -> Result<SimSettings, ConfigError> {
    let e = &sim.exploration;
    let exploration = ExplorationSignal::standard(
        cost,
        system.m2(),
        e.amplitude,
        e.frequency,
        e.lambda_u,
        e.lambda_v,
    )
    .map_err(|err| field("sim.exploration", err))?;
    if sim.x0.len() != system.n() {
        return Err(field(
            "sim.x0",
            format!("has {} entries, expected {}", sim.x0.len(), system.n()),
        ));
    }
    let settings = SimSettings {
        horizon: sim.horizon,
        intervals: sim.intervals,
        substeps: sim.substeps,
        paths: sim.paths,
        x0: DVector::from_vec(sim.x0.clone()),
        exploration,
    };
    simulate::check_collection(system, behavior_lu, &settings.with_seed(0))
        .map_err(|err| field("sim", err))?;
    Ok(settings)
}

fn disturbance_settings(d: &DisturbanceSection) -> Result<DisturbanceSettings, ConfigError> {
    if d.magnitudes.is_empty() {
        return Err(field("disturbance.magnitudes", "at least one magnitude is required"));
    }
    let settings = DisturbanceSettings {
        mode: d.mode.into(),
        magnitudes: d.magnitudes.clone(),
        decay_rate: d.decay_rate,
    };
    for (i, &m) in d.magnitudes.iter().enumerate() {
        settings
            .spec(m, 0)
            .validate()
            .map_err(|e| field(&format!("disturbance.magnitudes[{i}]"), e))?;
    }
    Ok(settings)
}

/// A config read from disk, resolved, overridden and validated.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub experiment: Experiment,
    pub hash: String,
}

pub fn prepare(path: &Path, overrides: &Overrides) -> Result<Prepared, ConfigError> {
    let mut config = ExperimentConfig::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.resolve_files(base)?;
    prepare_config(config, overrides)
}

pub fn prepare_config(
    mut config: ExperimentConfig,
    overrides: &Overrides,
) -> Result<Prepared, ConfigError> {
    config.apply(overrides);
    let experiment = validate(&config)?;
    let hash = config.hash();
    Ok(Prepared {
        config,
        experiment,
        hash,
    })
}

fn example_config(p: &problems::Problem, mode: Mode) -> ExperimentConfig {
    let sys = &p.system;
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: p.name.to_string(),
        mode,
        system: Source::Inline(SystemMatrices {
            a: rows(sys.a()),
            b1: rows(sys.b1()),
            b2: rows(sys.b2()),
            c: rows(sys.c()),
            d: rows(sys.d()),
        }),
        cost: Source::Inline(CostWeights {
            q: rows(p.cost.q()),
            r: rows(p.cost.r()),
            gamma: p.cost.gamma(),
        }),
        pi: PiSection {
            eps_inner: default_eps(),
            eps_outer: default_eps(),
            max_inner: default_max_inner(),
            max_outer: default_max_outer(),
            initial_lu: rows(&p.initial_lu),
            initial_pu: None,
        },
        sim: Some(SimSection {
            horizon: p.horizon,
            intervals: p.intervals,
            substeps: default_substeps(),
            paths: default_paths(),
            x0: p.x0.iter().copied().collect(),
            exploration: ExplorationSection::default(),
        }),
        disturbance: None,
        seeds: vec![0, 1, 2, 3, 4],
        output_dir: None,
    }
}

/// The two benchmark games as reproduction configs.
pub fn builtin_examples() -> Vec<ExperimentConfig> {
    vec![
        example_config(&problems::example_1(), Mode::ReproduceExample1),
        example_config(&problems::example_2(), Mode::ReproduceExample2),
    ]
}

/// Example 1 set up for the disturbance envelope.
pub fn robust_example() -> ExperimentConfig {
    let mut cfg = example_config(&problems::example_1(), Mode::Robust);
    cfg.name = "example_1_robust".into();
    cfg.sim = None;
    cfg.disturbance = Some(DisturbanceSection {
        mode: DisturbanceKind::ConstantRandom,
        magnitudes: vec![1e-4, 1e-3, 1e-2],
        decay_rate: robust::DEFAULT_DECAY_RATE,
    });
    cfg.seeds = (0..10).collect();
    cfg
}
