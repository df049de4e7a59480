//! Experiment configuration: a flat `section.key = value` text format.
//!
//! Floats are echoed with Rust's shortest round-trip formatting, so a written
//! config re-reads to bit-identical values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::blocking::BlockingPattern;
use crate::bounds::BoxBounds;
use crate::controller::{ControlSetup, ControllerConfig, ControllerMode};
use crate::dynamics::{vdp_model, StateVector};
use crate::objective::CostSpec;
use crate::ocp::ConstraintSet;
use crate::parallel::Execution;
use crate::solver::SolverConfig;
use crate::terminal::{calibrate_pi, design_terminal, TerminalIngredients};
use crate::{Error, Result};

/// Level of the terminal set: a fixed value or the result of calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PiSetting {
    Given(f64),
    Calibrate,
}

impl fmt::Display for PiSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PiSetting::Given(pi) => write!(f, "{pi}"),
            PiSetting::Calibrate => f.write_str("calibrate"),
        }
    }
}

/// Blocking pattern as configured: `M` uniform blocks or explicit block lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternSpec {
    Uniform(usize),
    Lengths(Vec<usize>),
}

impl PatternSpec {
    pub fn build(&self, horizon: usize) -> Result<BlockingPattern> {
        match self {
            PatternSpec::Uniform(m) => BlockingPattern::uniform(horizon, *m),
            PatternSpec::Lengths(lengths) => {
                let pattern = BlockingPattern::from_lengths(lengths.clone())?;
                if pattern.horizon() != horizon {
                    return Err(Error::Config(format!(
                        "block lengths sum to {} but the horizon is {horizon}",
                        pattern.horizon()
                    )));
                }
                Ok(pattern)
            }
        }
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternSpec::Uniform(m) => write!(f, "{m}"),
            PatternSpec::Lengths(l) => write!(f, "lengths:{}", join(l)),
        }
    }
}

impl FromStr for PatternSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("lengths:") {
            Some(rest) => Ok(PatternSpec::Lengths(parse_list(rest)?)),
            None => Ok(PatternSpec::Uniform(parse_value(s)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub ts: f64,
    pub q: Vec<f64>,
    pub r: f64,
    pub rho: f64,
    pub pi: PiSetting,
    /// Sample count of the terminal-set certificate (and of each calibration probe).
    pub samples: usize,
    pub state_bound: f64,
    pub input_bound: f64,
    pub horizon: usize,
    pub pattern: PatternSpec,
    pub mode: ControllerMode,
    pub iterations: usize,
    pub eta: f64,
    pub x0: Vec<f64>,
    pub steps: usize,
}

pub const PRESETS: [&str; 7] = ["t0", "t1", "t2", "t3", "t4", "t5", "t6"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            ts: 0.03125,
            q: vec![1.0, 0.1],
            r: 0.1,
            rho: 1.001,
            pi: PiSetting::Given(0.4856),
            samples: 10_000,
            state_bound: 1.0,
            input_bound: 1.0,
            horizon: 80,
            pattern: PatternSpec::Uniform(2),
            mode: ControllerMode::Offset,
            iterations: 3,
            eta: 0.0,
            x0: vec![-0.3, 0.4],
            steps: 200,
        }
    }
}

impl ExperimentConfig {
    /// The defaults with one experiment of the matrix applied.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            preset: Some(name.to_string()),
            ..Self::default()
        };
        let (mode, blocks, iterations, steps) = match name {
            // first open-loop prediction only
            "t0" => (ControllerMode::PlainBlocked, 2, 50, 0),
            "t1" => (ControllerMode::PlainBlocked, 2, 50, base.steps),
            "t2" => (ControllerMode::BufferedFallback, 2, 50, base.steps),
            "t3" => (ControllerMode::Offset, 2, 0, base.steps),
            "t4" => (ControllerMode::Offset, 2, 3, base.steps),
            "t5" => (ControllerMode::BufferedFallback, 80, 50, base.steps),
            "t6" => (ControllerMode::Offset, 16, 3, base.steps),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected t0..t6)"
                )))
            }
        };
        Ok(Self {
            mode,
            pattern: PatternSpec::Uniform(blocks),
            iterations,
            steps,
            ..base
        })
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "preset" => self.preset = Some(value.to_string()),
            "model.ts" => self.ts = parse_value(value)?,
            "cost.q" => self.q = parse_list(value)?,
            "cost.r" => self.r = parse_value(value)?,
            "terminal.rho" => self.rho = parse_value(value)?,
            "terminal.pi" => {
                self.pi = if value == "calibrate" {
                    PiSetting::Calibrate
                } else {
                    PiSetting::Given(parse_value(value)?)
                }
            }
            "terminal.samples" => self.samples = parse_value(value)?,
            "constraints.state_bound" => self.state_bound = parse_value(value)?,
            "constraints.input_bound" => self.input_bound = parse_value(value)?,
            "horizon.n" => self.horizon = parse_value(value)?,
            "blocking.pattern" => self.pattern = value.parse()?,
            "controller.mode" => self.mode = value.parse()?,
            "solver.iterations" => self.iterations = parse_value(value)?,
            "solver.eta" => self.eta = parse_value(value)?,
            "sim.x0" => self.x0 = parse_list(value)?,
            "sim.steps" => self.steps = parse_value(value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a config file; a `preset` line must come first and seeds the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            if key.trim() == "preset" {
                config = Self::preset(value.trim())?;
                continue;
            }
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Static checks that do not need any computation.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("model.ts", self.ts)?;
        positive("cost.r", self.r)?;
        positive("terminal.rho", self.rho)?;
        positive("constraints.state_bound", self.state_bound)?;
        positive("constraints.input_bound", self.input_bound)?;
        if let PiSetting::Given(pi) = self.pi {
            positive("terminal.pi", pi)?;
        }
        if self.q.len() != 2 || self.q.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "cost.q must list two positive weights".into(),
            ));
        }
        if self.x0.len() != 2 || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "sim.x0 must list two finite coordinates".into(),
            ));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config("solver.eta must be nonnegative".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("terminal.samples must be positive".into()));
        }
        self.pattern.build(self.horizon)?;
        Ok(())
    }

    pub fn initial_state(&self) -> StateVector {
        DVector::from_column_slice(&self.x0)
    }

    pub fn base_cost(&self) -> Result<CostSpec> {
        CostSpec::diagonal(&self.q, self.r, 1, DMatrix::identity(2, 2))
    }

    pub fn state_box(&self) -> Result<BoxBounds> {
        BoxBounds::symmetric(2, self.state_bound)
    }

    pub fn input_box(&self) -> Result<BoxBounds> {
        BoxBounds::symmetric(1, self.input_bound)
    }

    /// Designs the terminal ingredients, calibrating `π` when requested.
    pub fn terminal(&self) -> Result<TerminalIngredients> {
        let model = vdp_model(self.ts)?;
        let cost = self.base_cost()?;
        match self.pi {
            PiSetting::Given(pi) => design_terminal(&model, &cost, self.rho, pi),
            PiSetting::Calibrate => {
                let probe = design_terminal(&model, &cost, self.rho, 1.0)?;
                let cal = calibrate_pi(
                    &model,
                    &cost,
                    &probe.p,
                    &probe.k,
                    self.rho,
                    &self.state_box()?,
                    &self.input_box()?,
                    self.samples,
                    1e-6,
                    Execution::default(),
                )?;
                probe.with_level(cal.pi)
            }
        }
    }

    pub fn setup(&self) -> Result<ControlSetup> {
        self.validate()?;
        let model = vdp_model(self.ts)?;
        let ing = self.terminal()?;
        let cost = self.base_cost()?.with_terminal(ing.p.clone())?;
        let cons = ConstraintSet::new(self.state_box()?, self.input_box()?, ing.terminal_set())?;
        ControlSetup::new(model, cost, ing, cons, self.horizon)
    }

    pub fn controller(&self) -> Result<ControllerConfig> {
        let config = ControllerConfig {
            mode: self.mode,
            pattern: self.pattern.build(self.horizon)?,
            solver: SolverConfig::with_iterations(self.iterations),
            eta: self.eta,
        };
        config.validate(self.horizon)?;
        Ok(config)
    }

    /// The fully resolved assignments, one per line, in a fixed order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        if let Some(p) = &self.preset {
            m.insert("preset", p.clone());
        }
        m.insert("model.ts", self.ts.to_string());
        m.insert("cost.q", join(&self.q));
        m.insert("cost.r", self.r.to_string());
        m.insert("terminal.rho", self.rho.to_string());
        m.insert("terminal.pi", self.pi.to_string());
        m.insert("terminal.samples", self.samples.to_string());
        m.insert("constraints.state_bound", self.state_bound.to_string());
        m.insert("constraints.input_bound", self.input_bound.to_string());
        m.insert("horizon.n", self.horizon.to_string());
        m.insert("blocking.pattern", self.pattern.to_string());
        m.insert("controller.mode", self.mode.as_str().to_string());
        m.insert("solver.iterations", self.iterations.to_string());
        m.insert("solver.eta", self.eta.to_string());
        m.insert("sim.x0", join(&self.x0));
        m.insert("sim.steps", self.steps.to_string());
        m
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let entries = self.entries();
        // the preset line must precede the overrides it seeds
        if let Some(p) = entries.get("preset") {
            writeln!(f, "preset = {p}")?;
        }
        for (k, v) in entries.iter().filter(|(k, _)| **k != "preset") {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

fn parse_value<T: FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {s:?}")))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(parse_value).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
