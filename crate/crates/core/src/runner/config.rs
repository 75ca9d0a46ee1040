use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distsim::ExecMode;
use crate::error::{Error, Result};
use crate::optim::{MesoConfig, Method, Schedule, StatePolicy};
use crate::projection::ProjectionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Regression,
    ToyLm,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Regression => "regression",
            Task::ToyLm => "toy-lm",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "toy-lm" => Ok(Task::ToyLm),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceChoice {
    Gradient,
    Sketch,
}

/// Everything a run needs. Parsed from `key = value` lines; every key has a
/// default and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Regression input and output widths.
    pub input_dim: usize,
    pub output_dim: usize,
    pub noise: f64,
    /// Toy-lm alphabet size and transition sharpness.
    pub vocab: usize,
    pub temperature: f64,
    /// Seeds the task itself (teacher or transition table), so runs with
    /// different `seed`s share one problem.
    pub task_seed: u64,
    pub method: Method,
    pub r: usize,
    pub k_freq: usize,
    pub alpha: f64,
    /// `None` picks the default for the projection kind.
    pub state_policy: Option<StatePolicy>,
    pub lr: f64,
    pub warmup: usize,
    pub refresh_warmup: usize,
    pub cosine: bool,
    pub side_auto: bool,
    pub refresh_source: SourceChoice,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub log_every: usize,
    pub workers: usize,
    pub exec: ExecMode,
    pub record_wall_time: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::ToyLm,
            hidden: vec![64, 64],
            input_dim: 64,
            output_dim: 32,
            noise: 0.1,
            vocab: 32,
            temperature: 2.0,
            task_seed: 1234,
            method: Method::Meso(ProjectionKind::TopR),
            r: 16,
            k_freq: 50,
            alpha: 0.25,
            state_policy: None,
            lr: 0.04,
            warmup: 50,
            refresh_warmup: 10,
            cosine: true,
            side_auto: true,
            refresh_source: SourceChoice::Gradient,
            seed: 0,
            steps: 2000,
            batch: 64,
            log_every: 50,
            workers: 1,
            exec: ExecMode::Sequential,
            record_wall_time: false,
            out: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 27] = [
    "task",
    "hidden",
    "input_dim",
    "output_dim",
    "noise",
    "vocab",
    "temperature",
    "task_seed",
    "method",
    "r",
    "k_freq",
    "alpha",
    "state_policy",
    "lr",
    "warmup",
    "refresh_warmup",
    "cosine",
    "side_auto",
    "refresh_source",
    "seed",
    "steps",
    "batch",
    "log_every",
    "workers",
    "exec",
    "record_wall_time",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = value.parse()?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse::<usize>(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "input_dim" => self.input_dim = parse(key, value)?,
            "output_dim" => self.output_dim = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "vocab" => self.vocab = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "task_seed" => self.task_seed = parse(key, value)?,
            "method" => self.method = value.parse()?,
            "r" => self.r = parse(key, value)?,
            "k_freq" => self.k_freq = if value == "inf" { usize::MAX } else { parse(key, value)? },
            "alpha" => self.alpha = parse(key, value)?,
            "state_policy" => self.state_policy = if value == "auto" { None } else { Some(value.parse()?) },
            "lr" => self.lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "refresh_warmup" => self.refresh_warmup = parse(key, value)?,
            "cosine" => self.cosine = parse_bool(key, value)?,
            "side_auto" => self.side_auto = parse_bool(key, value)?,
            "refresh_source" => {
                self.refresh_source = match value {
                    "gradient" => SourceChoice::Gradient,
                    "sketch" => SourceChoice::Sketch,
                    other => return Err(Error::Config(format!("unknown refresh_source {other:?}"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "exec" => {
                self.exec = match value {
                    "sequential" => ExecMode::Sequential,
                    "threaded" => ExecMode::Threaded,
                    other => return Err(Error::Config(format!("unknown exec mode {other:?}"))),
                }
            }
            "record_wall_time" => self.record_wall_time = parse_bool(key, value)?,
            "out" => {
                self.out = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.r == 0 {
            return bad("r must be at least 1");
        }
        if self.k_freq == 0 {
            return bad("k_freq must be at least 1");
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.hidden.contains(&0) || self.input_dim == 0 || self.output_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if !(self.noise >= 0.0) || !(self.temperature > 0.0) {
            return bad("noise must be nonnegative and temperature positive");
        }
        Ok(())
    }

    /// Flat `key = value` text; parsing it gives back the same config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let k_freq = if self.k_freq == usize::MAX {
            "inf".to_string()
        } else {
            self.k_freq.to_string()
        };
        let rows: Vec<(&str, String)> = vec![
            ("task", self.task.name().into()),
            ("hidden", hidden.join(",")),
            ("input_dim", self.input_dim.to_string()),
            ("output_dim", self.output_dim.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("vocab", self.vocab.to_string()),
            ("temperature", format!("{:?}", self.temperature)),
            ("task_seed", self.task_seed.to_string()),
            ("method", self.method.name().into()),
            ("r", self.r.to_string()),
            ("k_freq", k_freq),
            ("alpha", format!("{:?}", self.alpha)),
            ("state_policy", self.state_policy.map_or("auto", |p| p.name()).into()),
            ("lr", format!("{:?}", self.lr)),
            ("warmup", self.warmup.to_string()),
            ("refresh_warmup", self.refresh_warmup.to_string()),
            ("cosine", self.cosine.to_string()),
            ("side_auto", self.side_auto.to_string()),
            (
                "refresh_source",
                match self.refresh_source {
                    SourceChoice::Gradient => "gradient",
                    SourceChoice::Sketch => "sketch",
                }
                .into(),
            ),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("log_every", self.log_every.to_string()),
            ("workers", self.workers.to_string()),
            (
                "exec",
                match self.exec {
                    ExecMode::Sequential => "sequential",
                    ExecMode::Threaded => "threaded",
                }
                .into(),
            ),
            ("record_wall_time", self.record_wall_time.to_string()),
            (
                "out",
                self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ];
        for (k, v) in rows {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Optimizer settings derived from this run.
    pub fn meso_config(&self) -> MesoConfig {
        let kind = match self.method {
            Method::Meso(k) => k,
            Method::LoRA | Method::ReLoRA => ProjectionKind::TopR,
        };
        let mut m = MesoConfig::new(kind, self.r);
        m.k_freq = self.k_freq;
        m.alpha = self.alpha;
        if let Some(p) = self.state_policy {
            m.state_policy = p;
        }
        m.side_auto = self.side_auto;
        m.schedule = Schedule::cosine(
            self.lr,
            self.warmup,
            if self.cosine { self.steps } else { 0 },
            self.refresh_warmup,
        );
        m
    }

    /// Layer widths from input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let (inp, out) = match self.task {
            Task::Regression => (self.input_dim, self.output_dim),
            Task::ToyLm => (2 * self.vocab, self.vocab),
        };
        let mut dims = vec![inp];
        dims.extend(&self.hidden);
        dims.push(out);
        dims
    }
}
