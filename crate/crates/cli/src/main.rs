use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grass::cost::{CostMethod, CostQuery, LlamaConfig};
use grass::distsim::ExecMode;
use grass::runner::{
    median_by_value, run_dist, run_suite, run_sweep, sweep_csv, sweep_table, write_outputs, RunConfig, Suite,
    SweepKind, VerifyOptions, COMM_FILE, METRICS_FILE,
};
use grass::Error;

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "GRASS_OUT_DIR";
const DEFAULT_OUT: &str = "grass-out";

#[derive(Parser)]
#[command(
    name = "grass",
    version,
    about = "Structured-sparse subspace optimizer: verification, training and cost tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run property suites and report measured values against their bounds.
    Verify {
        /// unbiasedness, variance, topr, alg-equivalence, fused, cost, dist or all
        #[arg(default_value = "all")]
        suite: String,
        /// Negative control: use a wrong with-replacement scale.
        #[arg(long)]
        corrupt_rho: bool,
    },
    /// Train on a synthetic task; writes metrics and a final checkpoint.
    Train(RunArgs),
    /// Train over a grid of one setting and tabulate final losses.
    Sweep {
        /// rank, frequency or sampling
        kind: String,
        /// Comma-separated grid; defaults to a grid around the base config.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print analytic per-matrix costs or a LLaMA-style memory estimate.
    Cost {
        #[arg(long, default_value_t = 512)]
        m: u64,
        #[arg(long, default_value_t = 512)]
        n: u64,
        #[arg(long, default_value_t = 128)]
        r: u64,
        #[arg(long, default_value_t = 1)]
        b: u64,
        /// Comma-separated methods; defaults to all.
        #[arg(long)]
        method: Option<String>,
        /// Model preset (60m, 350m, 1b, 7b, 13b) for a memory estimate.
        #[arg(long)]
        preset: Option<String>,
        /// Emit JSON lines instead of an aligned table.
        #[arg(long)]
        json: bool,
    },
    /// Simulated data-parallel training; writes metrics and the comm log.
    DistSim {
        /// Number of workers.
        #[arg(short = 'p', long)]
        workers: Option<usize>,
        /// Run workers on threads instead of sequentially.
        #[arg(long)]
        threaded: bool,
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    r: Option<usize>,
    /// Refresh interval; `inf` never refreshes after the first step.
    #[arg(long)]
    k_freq: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Output directory; falls back to the config, then $GRASS_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> grass::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let flags: [(&str, Option<String>); 10] = [
            ("task", self.task.clone()),
            ("method", self.method.clone()),
            ("r", self.r.map(|v| v.to_string())),
            ("k_freq", self.k_freq.clone()),
            ("alpha", self.alpha.map(|v| format!("{v:?}"))),
            ("lr", self.lr.map(|v| format!("{v:?}"))),
            ("seed", self.seed.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if cfg.out.is_none() {
            let dir = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from);
            cfg.out = Some(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> &Path {
    cfg.out.as_deref().unwrap_or(Path::new(DEFAULT_OUT))
}

/// Verification failures are not errors: the command reports and exits 1.
enum Outcome {
    Ok,
    Failed,
}

fn verify(suite: &str, corrupt_rho: bool) -> grass::Result<Outcome> {
    let opts = VerifyOptions { corrupt_rho };
    let mut all_pass = true;
    for s in Suite::parse_selector(suite)? {
        for check in run_suite(s, opts)? {
            all_pass &= check.pass();
            println!("{check}");
        }
    }
    Ok(if all_pass { Outcome::Ok } else { Outcome::Failed })
}

fn train(args: &RunArgs) -> grass::Result<Outcome> {
    let cfg = args.resolve()?;
    let out = grass::runner::run_train(&cfg)?;
    let dir = out_dir(&cfg);
    write_outputs(dir, &cfg, &out)?;
    let floor = grass::runner::TaskData::new(&cfg)?.loss_floor();
    println!(
        "{} on {} for {} steps: final eval loss {:.6} (floor {:.6})",
        cfg.method,
        cfg.task.name(),
        cfg.steps,
        out.final_eval,
        floor
    );
    println!("wrote {}", dir.join(METRICS_FILE).display());
    Ok(Outcome::Ok)
}

fn sweep(kind: &str, values: Option<&str>, seeds: &str, args: &RunArgs) -> grass::Result<Outcome> {
    let kind: SweepKind = kind.parse()?;
    let base = args.resolve()?;
    let values: Vec<String> = match values {
        Some(v) => v
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None => kind.default_values(&base),
    };
    let seeds: Vec<u64> = seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
        .collect::<grass::Result<_>>()?;
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let rows = run_sweep(&base, kind, &values, &seeds)?;
    let table = sweep_table(&rows);
    print!("{table}");
    println!("median final loss by {}:", kind.key());
    for (v, med) in median_by_value(&rows) {
        println!("  {v:>14} {med:.6}");
    }
    if kind == SweepKind::Rank {
        let pairs = grass::runner::rank_tradeoffs(&rows);
        if pairs.is_empty() {
            println!("no rank pair where the lower rank at full budget beats the higher rank at half budget");
        }
        for (lo, hi) in pairs {
            println!(
                "r={lo} for {} steps beats r={hi} for {} steps",
                base.steps,
                base.steps / 2
            );
        }
    }
    let dir = out_dir(&base);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("sweep-{}.csv", kind.name())), sweep_csv(&rows))?;
    fs::write(dir.join(format!("sweep-{}.txt", kind.name())), table)?;
    Ok(Outcome::Ok)
}

fn parse_methods(list: Option<&str>) -> grass::Result<Vec<CostMethod>> {
    match list {
        None => Ok(CostMethod::ALL.to_vec()),
        Some(s) => s
            .split(',')
            .map(|m| {
                m.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown method {m:?}")))
            })
            .collect(),
    }
}

fn cost(
    m: u64,
    n: u64,
    r: u64,
    b: u64,
    method: Option<&str>,
    preset: Option<&str>,
    json: bool,
) -> grass::Result<Outcome> {
    let methods = parse_methods(method)?;
    match preset {
        Some(name) => {
            let cfg =
                LlamaConfig::preset(name.trim_start_matches("llama")).map_err(|e| Error::Config(e.to_string()))?;
            if json {
                print!("{}", grass::runner::memory_json(&cfg, &methods)?);
            } else {
                print!("{}", grass::runner::memory_table(&cfg, &methods)?);
            }
        }
        None => {
            let q = CostQuery::new(CostMethod::Grass, m, n, r, b);
            q.validate().map_err(|e| Error::Config(e.to_string()))?;
            if json {
                print!("{}", grass::runner::cost_json_lines(&q, &methods)?);
            } else {
                print!("{}", grass::runner::cost_table(&q, &methods)?);
            }
        }
    }
    Ok(Outcome::Ok)
}

fn dist_sim(workers: Option<usize>, threaded: bool, args: &RunArgs) -> grass::Result<Outcome> {
    let mut cfg = args.resolve()?;
    if let Some(p) = workers {
        cfg.workers = p;
    }
    if threaded {
        cfg.exec = ExecMode::Threaded;
    }
    cfg.validate()?;
    let out = run_dist(&cfg)?;
    let dir = out_dir(&cfg);
    write_outputs(dir, &cfg, &out)?;
    let total = out.comm.as_ref().map_or(0, |c| c.total_floats());
    println!(
        "{} workers, {} steps: final eval loss {:.6}, {} floats sent per worker",
        cfg.workers, cfg.steps, out.final_eval, total
    );
    println!(
        "wrote {} and {}",
        dir.join(METRICS_FILE).display(),
        dir.join(COMM_FILE).display()
    );
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify { suite, corrupt_rho } => verify(suite, *corrupt_rho),
        Command::Train(args) => train(args),
        Command::Sweep {
            kind,
            values,
            seeds,
            run,
        } => sweep(kind, values.as_deref(), seeds, run),
        Command::Cost {
            m,
            n,
            r,
            b,
            method,
            preset,
            json,
        } => cost(*m, *n, *r, *b, method.as_deref(), preset.as_deref(), *json),
        Command::DistSim { workers, threaded, run } => dist_sim(*workers, *threaded, run),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::InvalidInput(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
