use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distsim::{CommLog, DistSim};
use crate::error::{Error, Result};
use crate::linalg::RngState;
use crate::model::{model_entries, save_checkpoint, TinyModel};
use crate::optim::{MatrixOptimizer, Method, RefreshSource, Trainer};
use crate::projection::coverage_fraction;

use super::config::{RunConfig, SourceChoice};
use super::tasks::{build_model, TaskData, DATA_STREAM};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const COMM_FILE: &str = "comm.jsonl";

/// One logged point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Training batch loss at this step.
    pub loss: f64,
    /// Evaluation loss after this step's update.
    pub eval_loss: f64,
    pub lr: f64,
    /// Cumulative weight-side FLOPs (gradient, optimizer, update).
    pub flops: u64,
    /// Cumulative floats sent per worker.
    pub comm_floats: usize,
    /// Mean fraction of rows selected at least once, over layers.
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    /// Training loss at every step.
    pub losses: Vec<f64>,
    pub final_eval: f64,
    pub model: TinyModel,
    pub comm: Option<CommLog>,
}

fn mean_coverage<'a>(opts: impl Iterator<Item = &'a MatrixOptimizer>) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for o in opts {
        count += 1;
        total += if o.kind().is_sparse() && !o.selections().is_empty() {
            coverage_fraction(o.selections(), o.oriented_dims().0)
        } else {
            1.0
        };
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

struct Logger<'a> {
    cfg: &'a RunConfig,
    start: Instant,
    records: Vec<MetricsRecord>,
    losses: Vec<f64>,
}

impl<'a> Logger<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Logger {
            cfg,
            start: Instant::now(),
            records: Vec::new(),
            losses: Vec::with_capacity(cfg.steps),
        }
    }

    /// Record one step; `point` is only evaluated on logged steps.
    fn step(
        &mut self,
        step: usize,
        loss: f64,
        point: impl FnOnce() -> Result<(f64, f64, u64, usize, f64)>,
    ) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(step));
        }
        self.losses.push(loss);
        let last = step + 1 == self.cfg.steps;
        if step.is_multiple_of(self.cfg.log_every) || last {
            let (eval_loss, lr, flops, comm_floats, coverage) = point()?;
            if !eval_loss.is_finite() {
                return Err(Error::NonFinite(step));
            }
            self.records.push(MetricsRecord {
                step,
                loss,
                eval_loss,
                lr,
                flops,
                comm_floats,
                coverage,
                wall_seconds: self.cfg.record_wall_time.then(|| self.start.elapsed().as_secs_f64()),
            });
        }
        Ok(())
    }
}

/// Single-replica training run.
pub fn run_train(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let task = TaskData::new(cfg)?;
    let model = build_model(cfg, &task)?;
    let mut trainer = Trainer::new(model, cfg.method, cfg.meso_config(), cfg.seed)?;
    if cfg.refresh_source == SourceChoice::Sketch {
        trainer = trainer.with_source(RefreshSource::Sketch);
    }
    let mut data_rng = RngState::with_stream(cfg.seed, DATA_STREAM);
    let mut log = Logger::new(cfg);
    let mut flops = 0u64;
    for step in 0..cfg.steps {
        let (x, targets) = task.sample(&mut data_rng, cfg.batch)?;
        let stats = trainer.step(&x, &targets)?;
        flops += stats.weight_ops.table_flops();
        log.step(step, stats.loss, || {
            Ok((
                task.eval_loss(trainer.model())?,
                stats.lr,
                flops,
                0,
                mean_coverage(trainer.optimizers().into_iter()),
            ))
        })?;
    }
    let final_eval = task.eval_loss(trainer.model())?;
    Ok(RunOutcome {
        records: log.records,
        losses: log.losses,
        final_eval,
        model: trainer.into_model(),
        comm: None,
    })
}

/// Simulated data-parallel run with `cfg.workers` replicas, each drawing its
/// own batch of `cfg.batch` examples.
pub fn run_dist(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let Method::Meso(_) = cfg.method else {
        return Err(Error::Config("dist-sim supports projection methods only".into()));
    };
    let task = TaskData::new(cfg)?;
    let model = build_model(cfg, &task)?;
    let mut sim = DistSim::new(model, cfg.meso_config(), cfg.workers, cfg.seed, cfg.exec)?;
    let mut data_rngs: Vec<RngState> = (0..cfg.workers as u64)
        .map(|w| RngState::with_stream(cfg.seed, DATA_STREAM + w))
        .collect();
    let mut log = Logger::new(cfg);
    let mut comm = 0usize;
    for step in 0..cfg.steps {
        let shards = data_rngs
            .iter_mut()
            .map(|rng| task.sample(rng, cfg.batch))
            .collect::<Result<Vec<_>>>()?;
        let stats = sim.step(&shards)?;
        comm += stats.floats_per_worker;
        log.step(step, stats.loss, || {
            Ok((task.eval_loss(sim.model())?, stats.lr, 0, comm, 1.0))
        })?;
    }
    let final_eval = task.eval_loss(sim.model())?;
    Ok(RunOutcome {
        records: log.records,
        losses: log.losses,
        final_eval,
        model: sim.model().clone(),
        comm: Some(sim.log().clone()),
    })
}

/// JSON header line carrying the fully resolved configuration.
pub fn config_header(cfg: &RunConfig) -> String {
    let map: serde_json::Map<String, serde_json::Value> = cfg
        .to_kv()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.to_string())))
        .collect();
    serde_json::json!({ "config": map }).to_string()
}

pub fn metrics_jsonl(cfg: &RunConfig, records: &[MetricsRecord]) -> Result<String> {
    let mut s = config_header(cfg);
    s.push('\n');
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

/// Parse a metrics file back into its config and records.
pub fn read_metrics(text: &str) -> Result<(RunConfig, Vec<MetricsRecord>)> {
    let mut lines = text.lines();
    let header: serde_json::Value =
        serde_json::from_str(lines.next().unwrap_or("")).map_err(|e| Error::Io(format!("metrics header: {e}")))?;
    let map = header
        .get("config")
        .and_then(|c| c.as_object())
        .ok_or_else(|| Error::Io("metrics header lacks config".into()))?;
    let mut kv = String::new();
    for (k, v) in map {
        kv.push_str(&format!("{k} = {}\n", v.as_str().unwrap_or("")));
    }
    let cfg = RunConfig::parse(&kv)?;
    let records = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Io(format!("metrics record: {e}"))))
        .collect::<Result<_>>()?;
    Ok((cfg, records))
}

/// Write metrics, the final checkpoint and, for distributed runs, the
/// communication log into `dir`.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(METRICS_FILE))?;
    f.write_all(metrics_jsonl(cfg, &out.records)?.as_bytes())?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &model_entries(&out.model))?;
    if let Some(comm) = &out.comm {
        comm.write_jsonl(&dir.join(COMM_FILE))?;
    }
    Ok(())
}
