//! Configuration-driven experiment runner.
//!
//! A run reads a TOML file, executes one of `weak-order`, `ergodic`,
//! `structure` or `simulate`, and writes a CSV whose first line records the
//! artifact version, the SHA-256 of the configuration text and the master
//! seed. Keys are listed in the README; unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::analysis::{self, ErgodicReport, ReferenceQuadrature, TestFunction, WeakOrderReport};
use crate::error::{Error, Result};
use crate::genfun::gf2_step_via_augmented;
use crate::integrators::{gf2_jacobian, simulate, Scheme};
use crate::mc::{GaussianIncrements, SeedPlan};
use crate::models::{DoubleWell, LangevinModel, LinearOscillator, PhaseState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    WeakOrder,
    Ergodic,
    Structure,
    Simulate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::WeakOrder => "weak-order",
            Command::Ergodic => "ergodic",
            Command::Structure => "structure",
            Command::Simulate => "simulate",
        }
    }

    fn file_name(self) -> &'static str {
        match self {
            Command::WeakOrder => "weak_order.csv",
            Command::Ergodic => "ergodic.csv",
            Command::Structure => "structure.csv",
            Command::Simulate => "trajectory.csv",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak-order" => Ok(Command::WeakOrder),
            "ergodic" => Ok(Command::Ergodic),
            "structure" => Ok(Command::Structure),
            "simulate" => Ok(Command::Simulate),
            other => Err(Error::Argument(format!("unknown command `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelConfig {
    Linear { a: f64, v: f64, sigma: f64 },
    DoubleWell { v: f64, beta: f64 },
}

impl ModelConfig {
    pub fn build(&self) -> Result<LangevinModel> {
        match *self {
            ModelConfig::Linear { a, v, sigma } => LinearOscillator { a, v, sigma }.model(),
            ModelConfig::DoubleWell { v, beta } => DoubleWell { v, beta }.model(),
        }
    }
}

/// Which expectation machinery an experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineChoice {
    /// Deterministic for linear models, Monte Carlo otherwise.
    Auto,
    Deterministic,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub t_end: Option<f64>,
    pub step_sizes: Vec<f64>,
    pub h: Option<f64>,
    pub test_functions: Vec<TestFunction>,
    pub initial: Option<PhaseState>,
    pub initials: Vec<(String, PhaseState)>,
    pub pipeline: PipelineChoice,
    pub scheme: Scheme,
    pub n_steps: Option<usize>,
    pub record_every: usize,
    pub trials: usize,
    pub step_range: (f64, f64),
    pub volume_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSection {
    pub realizations: u64,
    pub master_seed: u64,
    pub refine: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSection {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
    pub hermite_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub experiment: ExperimentSection,
    pub mc: McSection,
    pub quadrature: QuadratureSection,
    pub output: OutputSection,
    /// Hex SHA-256 of the configuration text.
    pub config_sha256: String,
}

/// Pulls typed values out of a TOML table, recording every problem instead
/// of stopping at the first.
struct Reader<'a> {
    errors: &'a mut Vec<String>,
    section: &'static str,
    table: Table,
}

impl<'a> Reader<'a> {
    fn new(root: &mut Table, section: &'static str, errors: &'a mut Vec<String>) -> Self {
        let table = match root.remove(section) {
            Some(Value::Table(t)) => t,
            Some(_) => {
                errors.push(format!("{section}: must be a table"));
                Table::new()
            }
            None => Table::new(),
        };
        Reader { errors, section, table }
    }

    fn key(&self, k: &str) -> String {
        format!("{}.{}", self.section, k)
    }

    fn bad(&mut self, k: &str, what: &str) {
        let key = self.key(k);
        self.errors.push(format!("{key}: {what}"));
    }

    fn float(&mut self, k: &str) -> Option<f64> {
        match self.table.remove(k)? {
            Value::Float(x) => Some(x),
            Value::Integer(i) => Some(i as f64),
            _ => {
                self.bad(k, "expected a number");
                None
            }
        }
    }

    fn uint(&mut self, k: &str) -> Option<u64> {
        match self.table.remove(k)? {
            Value::Integer(i) if i >= 0 => Some(i as u64),
            _ => {
                self.bad(k, "expected a non-negative integer");
                None
            }
        }
    }

    fn string(&mut self, k: &str) -> Option<String> {
        match self.table.remove(k)? {
            Value::String(s) => Some(s),
            _ => {
                self.bad(k, "expected a string");
                None
            }
        }
    }

    fn floats(&mut self, k: &str) -> Option<Vec<f64>> {
        let v = self.table.remove(k)?;
        let parsed = match &v {
            Value::Array(a) => a
                .iter()
                .map(|x| match x {
                    Value::Float(f) => Some(*f),
                    Value::Integer(i) => Some(*i as f64),
                    _ => None,
                })
                .collect::<Option<Vec<f64>>>(),
            _ => None,
        };
        if parsed.is_none() {
            self.bad(k, "expected an array of numbers");
        }
        parsed
    }

    fn strings(&mut self, k: &str) -> Option<Vec<String>> {
        let v = self.table.remove(k)?;
        let parsed = match &v {
            Value::Array(a) => a.iter().map(|x| x.as_str().map(str::to_owned)).collect::<Option<Vec<_>>>(),
            _ => None,
        };
        if parsed.is_none() {
            self.bad(k, "expected an array of strings");
        }
        parsed
    }

    fn float_rows(&mut self, k: &str) -> Option<Vec<Vec<f64>>> {
        let v = self.table.remove(k)?;
        let parsed = match &v {
            Value::Array(rows) => rows
                .iter()
                .map(|r| match r {
                    Value::Array(a) => a
                        .iter()
                        .map(|x| match x {
                            Value::Float(f) => Some(*f),
                            Value::Integer(i) => Some(*i as f64),
                            _ => None,
                        })
                        .collect::<Option<Vec<f64>>>(),
                    _ => None,
                })
                .collect::<Option<Vec<_>>>(),
            _ => None,
        };
        if parsed.is_none() {
            self.bad(k, "expected an array of number arrays");
        }
        parsed
    }

    fn finish(self) {
        for k in self.table.keys() {
            self.errors.push(format!("{}.{}: unknown key", self.section, k));
        }
    }
}

fn state_from(values: &[f64], d: usize) -> Option<PhaseState> {
    (values.len() == 2 * d).then(|| PhaseState { p: values[..d].to_vec(), q: values[d..].to_vec() })
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![format!("parse error: {e}")]))?;
        let mut errors = Vec::new();

        let mut r = Reader::new(&mut root, "model", &mut errors);
        let kind = r.string("kind");
        let v = r.float("v");
        let model = match kind.as_deref() {
            Some("linear") => {
                let a = r.float("a");
                let sigma = r.float("sigma");
                match (a, v, sigma) {
                    (Some(a), Some(v), Some(sigma)) => Some(ModelConfig::Linear { a, v, sigma }),
                    _ => {
                        for (k, x) in [("a", a), ("v", v), ("sigma", sigma)] {
                            if x.is_none() {
                                r.bad(k, "required for kind = \"linear\"");
                            }
                        }
                        None
                    }
                }
            }
            Some("double_well") => {
                let beta = r.float("beta");
                match (v, beta) {
                    (Some(v), Some(beta)) => Some(ModelConfig::DoubleWell { v, beta }),
                    _ => {
                        for (k, x) in [("v", v), ("beta", beta)] {
                            if x.is_none() {
                                r.bad(k, "required for kind = \"double_well\"");
                            }
                        }
                        None
                    }
                }
            }
            Some(other) => {
                r.bad("kind", &format!("unknown model kind `{other}` (expected linear or double_well)"));
                None
            }
            None => {
                r.bad("kind", "required");
                None
            }
        };
        r.finish();
        let model = model.and_then(|m| match m.build() {
            Ok(_) => Some(m),
            Err(e) => {
                errors.push(format!("model: {e}"));
                None
            }
        });
        let d = 1;

        let mut r = Reader::new(&mut root, "experiment", &mut errors);
        let t_end = r.float("t_end");
        let step_sizes = r.floats("step_sizes").unwrap_or_default();
        let h = r.float("h");
        let test_functions = r
            .strings("test_functions")
            .map(|names| {
                names
                    .iter()
                    .filter_map(|n| match n.parse::<TestFunction>() {
                        Ok(f) => Some(f),
                        Err(e) => {
                            r.bad("test_functions", &e.to_string());
                            None
                        }
                    })
                    .collect()
            })
            .unwrap_or_else(|| TestFunction::ALL.to_vec());
        let initial = r.floats("initial").and_then(|v| {
            let s = state_from(&v, d);
            if s.is_none() {
                r.bad("initial", &format!("expected {} entries (p then q)", 2 * d));
            }
            s
        });
        let rows = r.float_rows("initials").unwrap_or_default();
        let labels = r.strings("initial_labels");
        let mut initials = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            match state_from(row, d) {
                Some(s) => initials.push((format!("initial({})", i + 1), s)),
                None => r.bad("initials", &format!("row {} must have {} entries (p then q)", i + 1, 2 * d)),
            }
        }
        if let Some(labels) = labels {
            if labels.len() != rows.len() {
                r.bad("initial_labels", "must have one label per row of initials");
            } else {
                for (slot, l) in initials.iter_mut().zip(labels) {
                    slot.0 = l;
                }
            }
        }
        let pipeline = match r.string("pipeline").as_deref() {
            None | Some("auto") => PipelineChoice::Auto,
            Some("deterministic") => PipelineChoice::Deterministic,
            Some("mc") => PipelineChoice::MonteCarlo,
            Some(other) => {
                r.bad("pipeline", &format!("unknown pipeline `{other}` (expected auto, deterministic or mc)"));
                PipelineChoice::Auto
            }
        };
        let scheme = match r.string("scheme") {
            None => Scheme::Gf2,
            Some(s) => s.parse().unwrap_or_else(|e: Error| {
                r.bad("scheme", &e.to_string());
                Scheme::Gf2
            }),
        };
        let n_steps = r.uint("n_steps").map(|n| n as usize);
        let record_every = r.uint("record_every").unwrap_or(1) as usize;
        let trials = r.uint("trials").unwrap_or(100) as usize;
        let step_range = match r.floats("step_range") {
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(_) => {
                r.bad("step_range", "expected [min, max]");
                (1e-3, 0.25)
            }
            None => (1e-3, 0.25),
        };
        let volume_steps = r.uint("volume_steps").unwrap_or(64) as usize;
        r.finish();

        let mut r = Reader::new(&mut root, "mc", &mut errors);
        let mc = McSection {
            realizations: r.uint("realizations").unwrap_or(100_000),
            master_seed: r.uint("master_seed").unwrap_or(1),
            refine: r.uint("refine").unwrap_or(16) as usize,
        };
        r.finish();

        let mut r = Reader::new(&mut root, "quadrature", &mut errors);
        let (lo, hi) = match r.floats("box") {
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(_) => {
                r.bad("box", "expected [lo, hi]");
                (-10.0, 10.0)
            }
            None => (-10.0, 10.0),
        };
        let quadrature = QuadratureSection {
            lo,
            hi,
            nodes: r.uint("nodes").unwrap_or(200) as usize,
            hermite_nodes: r.uint("hermite_nodes").unwrap_or(64) as usize,
        };
        r.finish();

        let mut r = Reader::new(&mut root, "output", &mut errors);
        let output = OutputSection {
            directory: PathBuf::from(r.string("directory").unwrap_or_else(|| "out".into())),
            prefix: r.string("prefix").unwrap_or_default(),
        };
        r.finish();

        for k in root.keys() {
            errors.push(format!("{k}: unknown section"));
        }

        let experiment = ExperimentSection {
            t_end,
            step_sizes,
            h,
            test_functions,
            initial,
            initials,
            pipeline,
            scheme,
            n_steps,
            record_every,
            trials,
            step_range,
            volume_steps,
        };
        check_values(&experiment, &mc, &quadrature, &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(ExperimentConfig {
            model: model.expect("model errors are reported above"),
            experiment,
            mc,
            quadrature,
            output,
            config_sha256: sha256_hex(text.as_bytes()),
        })
    }

    /// Checks the keys a command needs, reporting all that are missing.
    pub fn validate_for(&self, command: Command) -> Result<()> {
        let e = &self.experiment;
        let mut errors = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errors.push(msg.to_string());
            }
        };
        match command {
            Command::WeakOrder => {
                need(e.t_end.is_some(), "experiment.t_end: required for weak-order");
                need(e.step_sizes.len() >= 2, "experiment.step_sizes: weak-order needs at least two step sizes");
                need(e.initial.is_some(), "experiment.initial: required for weak-order");
                if e.pipeline == PipelineChoice::Deterministic {
                    need(matches!(self.model, ModelConfig::Linear { .. }), "experiment.pipeline: deterministic pipeline needs a linear model");
                }
                need(self.mc.refine >= 2, "mc.refine: must be at least 2");
            }
            Command::Ergodic => {
                need(e.t_end.is_some(), "experiment.t_end: required for ergodic");
                need(e.h.is_some(), "experiment.h: required for ergodic");
                need(!e.initials.is_empty(), "experiment.initials: required for ergodic");
                if e.pipeline == PipelineChoice::Deterministic {
                    need(matches!(self.model, ModelConfig::Linear { .. }), "experiment.pipeline: deterministic pipeline needs a linear model");
                }
                if let (Some(t), Some(h)) = (e.t_end, e.h) {
                    need(crate::mc::step_count(t, h).is_ok(), "experiment.t_end: must be an integer multiple of experiment.h");
                }
            }
            Command::Structure => {
                need(e.trials >= 1, "experiment.trials: must be at least 1");
                need(e.volume_steps >= 1, "experiment.volume_steps: must be at least 1");
            }
            Command::Simulate => {
                need(e.h.is_some(), "experiment.h: required for simulate");
                need(e.n_steps.is_some(), "experiment.n_steps: required for simulate");
                need(e.initial.is_some(), "experiment.initial: required for simulate");
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }
}

fn check_values(e: &ExperimentSection, mc: &McSection, q: &QuadratureSection, errors: &mut Vec<String>) {
    let positive = |x: f64| x > 0.0 && x.is_finite();
    if let Some(t) = e.t_end {
        if !positive(t) {
            errors.push(format!("experiment.t_end: must be positive, got {t}"));
        }
    }
    if let Some(h) = e.h {
        if !positive(h) {
            errors.push(format!("experiment.h: must be positive, got {h}"));
        }
    }
    if e.step_sizes.iter().any(|&h| !positive(h)) {
        errors.push("experiment.step_sizes: all step sizes must be positive".into());
    }
    let mut sorted = e.step_sizes.clone();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        errors.push("experiment.step_sizes: step sizes must be distinct".into());
    }
    if let Some(t) = e.t_end {
        for &h in &e.step_sizes {
            if positive(h) && crate::mc::step_count(t, h).is_err() {
                errors.push(format!("experiment.step_sizes: t_end = {t} is not a multiple of {h}"));
            }
        }
    }
    if e.test_functions.is_empty() {
        errors.push("experiment.test_functions: must not be empty".into());
    }
    for (label, s) in &e.initials {
        if !s.is_finite() {
            errors.push(format!("experiment.initials: {label} is not finite"));
        }
    }
    if e.initial.as_ref().is_some_and(|s| !s.is_finite()) {
        errors.push("experiment.initial: not finite".into());
    }
    if e.record_every == 0 {
        errors.push("experiment.record_every: must be at least 1".into());
    }
    let (a, b) = e.step_range;
    if !(positive(a) && a <= b && b.is_finite()) {
        errors.push("experiment.step_range: need 0 < min <= max".into());
    }
    if mc.realizations < 2 {
        errors.push("mc.realizations: must be at least 2".into());
    }
    if mc.refine < 1 {
        errors.push("mc.refine: must be at least 1".into());
    }
    if !(q.lo < q.hi) || !q.lo.is_finite() || !q.hi.is_finite() {
        errors.push("quadrature.box: need lo < hi".into());
    }
    if q.nodes < 2 {
        errors.push("quadrature.nodes: must be at least 2".into());
    }
    if q.hermite_nodes < 1 {
        errors.push("quadrature.hermite_nodes: must be at least 1".into());
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub realizations: Option<u64>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(dir) = &o.out {
            self.output.directory = dir.clone();
        }
        if let Some(seed) = o.seed {
            self.mc.master_seed = seed;
        }
        if let Some(n) = o.realizations {
            if n < 2 {
                return Err(Error::Config(vec!["--realizations: must be at least 2".into()]));
            }
            self.mc.realizations = n;
        }
        Ok(())
    }
}

/// Caps the global worker pool from `LANGEVIN_GF_THREADS` (`0` or unset
/// means one worker per core).
pub fn configure_threads() -> Result<()> {
    let n = match std::env::var("LANGEVIN_GF_THREADS") {
        Ok(s) if !s.trim().is_empty() => s
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Argument(format!("LANGEVIN_GF_THREADS must be a non-negative integer, got `{s}`")))?,
        _ => 0,
    };
    // A pool that already exists (e.g. inside a test harness) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

struct Csv {
    text: String,
}

impl Csv {
    fn new(cfg: &ExperimentConfig, command: Command) -> Self {
        let text = format!(
            "# langevin-gf {VERSION} command={} config_sha256={} master_seed={}\n",
            command.name(),
            cfg.config_sha256,
            cfg.mc.master_seed
        );
        Csv { text }
    }

    fn line(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }
}

fn use_deterministic(cfg: &ExperimentConfig) -> bool {
    match cfg.experiment.pipeline {
        PipelineChoice::Deterministic => true,
        PipelineChoice::MonteCarlo => false,
        PipelineChoice::Auto => matches!(cfg.model, ModelConfig::Linear { .. }),
    }
}

/// Runs `command` and returns the paths written.
pub fn run(cfg: &ExperimentConfig, command: Command) -> Result<Vec<PathBuf>> {
    cfg.validate_for(command)?;
    let model = cfg.model.build()?;
    let text = match command {
        Command::WeakOrder => weak_order_csv(cfg, &model)?,
        Command::Ergodic => ergodic_csv(cfg, &model)?,
        Command::Structure => structure_csv(cfg, &model)?,
        Command::Simulate => simulate_csv(cfg, &model)?,
    };
    std::fs::create_dir_all(&cfg.output.directory)?;
    let path = cfg.output.directory.join(format!("{}{}", cfg.output.prefix, command.file_name()));
    std::fs::write(&path, text)?;
    Ok(vec![path])
}

/// Weak-error reports, one per configured test function.
pub fn weak_order_reports(cfg: &ExperimentConfig, model: &LangevinModel) -> Result<Vec<(TestFunction, WeakOrderReport)>> {
    let e = &cfg.experiment;
    let z0 = e.initial.clone().ok_or_else(|| Error::Config(vec!["experiment.initial: required".into()]))?;
    let t = e.t_end.unwrap_or(0.0);
    let plan = SeedPlan::new(cfg.mc.master_seed);
    e.test_functions
        .iter()
        .map(|&f| {
            let psi = move |z: &PhaseState| f.eval(z);
            let report = if use_deterministic(cfg) {
                analysis::weak_order_linear(model, &psi, &z0, &e.step_sizes, t, cfg.quadrature.hermite_nodes)?
            } else {
                analysis::weak_order_mc(model, &psi, &z0, &e.step_sizes, t, cfg.mc.realizations, cfg.mc.refine, &plan)?
            };
            Ok((f, report))
        })
        .collect()
}

fn weak_order_csv(cfg: &ExperimentConfig, model: &LangevinModel) -> Result<String> {
    let reports = weak_order_reports(cfg, model)?;
    let mut csv = Csv::new(cfg, Command::WeakOrder);
    csv.line(&["h", "psi", "error", "std_error_or_0", "pipeline"].map(String::from));
    for (f, r) in &reports {
        for p in &r.points {
            let label = if p.censored { "mc_censored" } else { p.pipeline.label() };
            csv.line(&[fmt_f(p.h), f.name().into(), fmt_f(p.error), fmt_f(p.pipeline.std_error()), label.into()]);
        }
    }
    csv.line(&["psi", "slope", "intercept"].map(String::from));
    for (f, r) in &reports {
        csv.line(&[f.name().into(), fmt_f(r.slope), fmt_f(r.intercept)]);
    }
    Ok(csv.text)
}

pub fn ergodic_report(cfg: &ExperimentConfig, model: &LangevinModel) -> Result<ErgodicReport> {
    let e = &cfg.experiment;
    let quad = ReferenceQuadrature { lo: cfg.quadrature.lo, hi: cfg.quadrature.hi, nodes: cfg.quadrature.nodes };
    let (h, t) = (e.h.unwrap_or(0.0), e.t_end.unwrap_or(0.0));
    if use_deterministic(cfg) {
        analysis::ergodic_linear(model, &e.test_functions, &e.initials, h, t, cfg.quadrature.hermite_nodes, quad)
    } else {
        analysis::ergodic_mc(model, &e.test_functions, &e.initials, h, t, cfg.mc.realizations, &SeedPlan::new(cfg.mc.master_seed), quad)
    }
}

fn ergodic_csv(cfg: &ExperimentConfig, model: &LangevinModel) -> Result<String> {
    let report = ergodic_report(cfg, model)?;
    let every = cfg.experiment.record_every;
    let mut csv = Csv::new(cfg, Command::Ergodic);
    csv.line(&["t", "initial_label", "psi", "running_average", "reference"].map(String::from));
    for s in &report.series {
        let reference = fmt_f(report.reference(s.psi));
        let n = s.running_average.len();
        for (k, avg) in s.running_average.iter().enumerate() {
            let step = k + 1;
            if step % every == 0 || step == n {
                csv.line(&[fmt_f(step as f64 * report.h), s.initial_label.clone(), s.psi.name().into(), fmt_f(*avg), reference.clone()]);
            }
        }
    }
    Ok(csv.text)
}

/// One row of the structure check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureRow {
    pub h: f64,
    pub conformal_defect: f64,
    pub volume_rel_error: f64,
    pub genfun_equiv_maxdiff: f64,
}

/// Random structure trials: one-step conformal defect, relative error of the
/// `volume_steps`-step Jacobian determinant against `e^{-v t d}`, and the gap
/// between the direct and augmented-coordinate steps.
pub fn structure_rows(cfg: &ExperimentConfig, model: &LangevinModel) -> Result<Vec<StructureRow>> {
    let e = &cfg.experiment;
    let plan = SeedPlan::new(cfg.mc.master_seed);
    let d = model.dim();
    let m = model.noise_dim();
    let v = model.friction();
    let (lo, hi) = e.step_range;
    (0..e.trials)
        .map(|trial| {
            let mut rng = plan.rng(trial as u64);
            let h = (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp();
            let mut z = PhaseState {
                p: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                q: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            };
            let draw = |rng: &mut crate::mc::TrajectoryRng| -> Vec<f64> { (0..m).map(|_| h.sqrt() * crate::mc::standard_normal(rng)).collect() };
            let dw = draw(&mut rng);
            let t_n = h * rng.random_range(0..8u32) as f64;

            let j = gf2_jacobian(model, &z, h, &dw)?;
            let defect = analysis::conformal_defect(&j, v, h)?;
            let direct = crate::integrators::gf2_step(model, &z, h, &dw)?;
            let (via, _) = gf2_step_via_augmented(model, &z, t_n, h, &dw)?;
            let equiv = direct.p.iter().zip(&via.p).chain(direct.q.iter().zip(&via.q)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

            // Accumulate log|det| to avoid underflow on long products.
            let mut log_det = 0.0;
            let mut inc = dw;
            for _ in 0..e.volume_steps {
                let jk = gf2_jacobian(model, &z, h, &inc)?;
                log_det += jk.determinant().abs().ln();
                z = crate::integrators::gf2_step(model, &z, h, &inc)?;
                inc = draw(&mut rng);
            }
            let expected = -v * h * e.volume_steps as f64 * d as f64;
            let volume_rel_error = (log_det - expected).exp_m1().abs();
            Ok(StructureRow { h, conformal_defect: defect, volume_rel_error, genfun_equiv_maxdiff: equiv })
        })
        .collect()
}

fn structure_csv(cfg: &ExperimentConfig, model: &LangevinModel) -> Result<String> {
    let rows = structure_rows(cfg, model)?;
    let mut csv = Csv::new(cfg, Command::Structure);
    csv.line(&["trial", "h", "conformal_defect", "volume_rel_error", "genfun_equiv_maxdiff"].map(String::from));
    for (i, r) in rows.iter().enumerate() {
        csv.line(&[i.to_string(), fmt_f(r.h), fmt_f(r.conformal_defect), fmt_f(r.volume_rel_error), fmt_f(r.genfun_equiv_maxdiff)]);
    }
    Ok(csv.text)
}

fn simulate_csv(cfg: &ExperimentConfig, model: &LangevinModel) -> Result<String> {
    let e = &cfg.experiment;
    let z0 = e.initial.clone().expect("validated");
    let h = e.h.expect("validated");
    let plan = SeedPlan::new(cfg.mc.master_seed);
    let mut noise = GaussianIncrements::new(plan.derive_seed(0), model.noise_dim(), h);
    let traj = simulate(model, e.scheme, &z0, h, e.n_steps.expect("validated"), &mut noise)?;
    let d = model.dim();
    let mut csv = Csv::new(cfg, Command::Simulate);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("p_{i}")));
    header.extend((1..=d).map(|i| format!("q_{i}")));
    csv.line(&header);
    for (t, z) in traj.times.iter().zip(&traj.states) {
        let mut row = vec![fmt_f(*t)];
        row.extend(z.p.iter().chain(&z.q).map(|x| fmt_f(*x)));
        csv.line(&row);
    }
    Ok(csv.text)
}
