use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use grass::distsim::{CommLog, CommOp};
use grass::runner::{read_metrics, MetricsRecord};

fn grass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grass"))
        .args(args)
        .env_remove("GRASS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn metrics(dir: &Path) -> Vec<MetricsRecord> {
    read_metrics(&fs::read_to_string(dir.join("metrics.jsonl")).unwrap())
        .unwrap()
        .1
}

const SMALL: [&str; 8] = [
    "--steps",
    "40",
    "--set",
    "hidden=16",
    "--set",
    "log_every=5",
    "--set",
    "vocab=8",
];

#[test]
fn verify_reports_and_sets_exit_code() {
    let o = grass(&["verify", "unbiasedness"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("unbiasedness: max deviation from identity"));
    assert!(text.trim_end().ends_with("< 1.000e-10: PASS"));

    let o = grass(&["verify", "unbiasedness", "--corrupt-rho"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains(">= 1.000e-10: FAIL"));

    assert_eq!(grass(&["verify", "nonsense"]).status.code(), Some(2));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        grass(&["train", "--set", "bogus=1", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(
        grass(&["train", "--method", "nope", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(grass(&["train", "--alpha", "-1", "--out", out]).status.code(), Some(2));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "r = 4\nunknown_key = 3\n").unwrap();
    let o = grass(&["train", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));
    assert_eq!(grass(&["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn train_is_byte_reproducible_with_config_header() {
    let a = tempfile::tempdir().unwrap();
    let run = || {
        let mut args = vec!["train", "--seed", "3", "--out", a.path().to_str().unwrap()];
        args.extend(SMALL);
        assert_eq!(grass(&args).status.code(), Some(0));
        (
            fs::read(a.path().join("metrics.jsonl")).unwrap(),
            fs::read(a.path().join("checkpoint.txt")).unwrap(),
        )
    };
    let (ma, ca) = run();
    let (mb, cb) = run();
    assert_eq!(ma, mb);
    assert_eq!(ca, cb);
    let text = String::from_utf8(ma).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.contains("\"seed\":\"3\"") && header.contains("\"hidden\":\"16\""));
    let records = metrics(a.path());
    assert_eq!(records.len(), 9);
    assert!(records.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "steps = 7\nr = 2\nseed = 5\nhidden = 8\nvocab = 4\nlog_every = 1\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = grass(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let (resolved, records) = read_metrics(&fs::read_to_string(out.join("metrics.jsonl")).unwrap()).unwrap();
    assert_eq!((resolved.steps, resolved.r, resolved.seed), (7, 2, 6));
    assert_eq!(records.len(), 7);
}

#[test]
fn env_var_sets_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend(SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_grass"))
        .args(&args)
        .env("GRASS_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("metrics.jsonl").exists());
    assert!(dir.path().join("checkpoint.txt").exists());
}

#[test]
fn full_rank_and_all_rows_selection_give_identical_losses() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let common = [
        "--task",
        "regression",
        "--steps",
        "60",
        "--alpha",
        "1",
        "--k-freq",
        "inf",
        "--set",
        "hidden=",
        "--set",
        "log_every=1",
    ];
    let mut full = vec!["train", "--method", "full", "--out", a.path().to_str().unwrap()];
    full.extend(common);
    // the layer is 32 x 64, so 32 rows is every row on the smaller side
    let mut topr = vec![
        "train",
        "--method",
        "topr",
        "--r",
        "32",
        "--out",
        b.path().to_str().unwrap(),
    ];
    topr.extend(common);
    assert_eq!(grass(&full).status.code(), Some(0));
    assert_eq!(grass(&topr).status.code(), Some(0));
    let la: Vec<f64> = metrics(a.path()).iter().map(|r| r.loss).collect();
    let lb: Vec<f64> = metrics(b.path()).iter().map(|r| r.loss).collect();
    assert_eq!(la.len(), 60);
    assert_eq!(la, lb);
}

#[test]
fn dist_sim_with_one_worker_equals_train() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut train = vec![
        "train",
        "--set",
        "refresh_source=sketch",
        "--out",
        a.path().to_str().unwrap(),
    ];
    train.extend(SMALL);
    let mut dist = vec![
        "dist-sim",
        "-p",
        "1",
        "--set",
        "refresh_source=sketch",
        "--out",
        b.path().to_str().unwrap(),
    ];
    dist.extend(SMALL);
    assert_eq!(grass(&train).status.code(), Some(0));
    assert_eq!(grass(&dist).status.code(), Some(0));
    let (ma, mb) = (metrics(a.path()), metrics(b.path()));
    assert_eq!(ma.len(), mb.len());
    for (x, y) in ma.iter().zip(&mb) {
        assert_eq!((x.step, x.loss, x.eval_loss, x.lr), (y.step, y.loss, y.eval_loss, y.lr));
    }
    assert_eq!(
        fs::read(a.path().join("checkpoint.txt")).unwrap(),
        fs::read(b.path().join("checkpoint.txt")).unwrap()
    );
}

#[test]
fn dist_sim_comm_log_follows_volume_law() {
    let dir = tempfile::tempdir().unwrap();
    // toy-lm with one hidden layer of 16: layers 16x16 and 8x16 (vocab 8)
    let o = grass(&[
        "dist-sim",
        "-p",
        "4",
        "--threaded",
        "--steps",
        "20",
        "--k-freq",
        "10",
        "--r",
        "4",
        "--set",
        "hidden=16",
        "--set",
        "vocab=8",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let log = CommLog::from_jsonl(&fs::read_to_string(dir.path().join("comm.jsonl")).unwrap()).unwrap();
    let regular: usize = [(16, 16), (8, 16)].iter().map(|&(_, n)| 4 * n).sum();
    for step in (1..20).filter(|s| s % 10 != 0) {
        assert_eq!(log.floats_at(step), regular, "step {step}");
    }
    // refresh: column norms n, sketch m x r and compressed gradient r x n per layer
    let refresh: usize = [(16, 16), (8, 16)].iter().map(|&(m, n)| n + m * 4 + 4 * n).sum();
    assert_eq!(log.floats_at(0), refresh);
    assert_eq!(log.floats_at(10), refresh);
    assert_eq!(log.total_floats(), 18 * regular + 2 * refresh);
    assert!(log.records().iter().any(|r| r.op == CommOp::ColumnNorms));
    let last = metrics(dir.path()).last().unwrap().comm_floats;
    assert_eq!(last, log.total_floats());
}

#[test]
fn cost_reports_preset_and_table() {
    let o = grass(&["cost", "--preset", "llama13b", "--method", "grass"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for want in ["24825.79", "2461.72", "312.50"] {
        assert!(text.contains(want), "{want} missing from\n{text}");
    }
    let o = grass(&[
        "cost",
        "--m",
        "512",
        "--n",
        "512",
        "--r",
        "128",
        "--json",
        "--method",
        "grass,full",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["opt_mem"], 131_328);
    assert_eq!(lines[1]["opt_mem"], 524_288);
    assert_eq!(grass(&["cost", "--method", "sgd"]).status.code(), Some(2));
    assert_eq!(grass(&["cost", "--preset", "3b"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_tidy_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep",
        "rank",
        "--values",
        "2,4",
        "--seeds",
        "0,1",
        "--out",
        dir.path().to_str().unwrap(),
    ];
    args.extend(SMALL);
    let o = grass(&args);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("sweep-rank.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kind,value,seed,final_loss,half_loss");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("rank,2,0,"));
    assert!(dir.path().join("sweep-rank.txt").exists());
    let mut empty = vec!["sweep", "rank", "--values", "", "--out", dir.path().to_str().unwrap()];
    empty.extend(SMALL);
    assert_eq!(grass(&empty).status.code(), Some(2));
}
