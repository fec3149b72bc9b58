use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stackelberg::datasets;
use stackelberg::environments::{mc_return, mean_std};
use stackelberg::experiments::{cell_seed, cmd_diagnose, cmd_eval, cmd_regret_sweep, cmd_train, fit_loglog_slope, Settings, OUT_DIR_VAR};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackelberg")).args(args).env(OUT_DIR_VAR, dir).output().unwrap()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_string_lossy().into_owned();
    let mut args = vec!["gen-data", "--env", "sim2d", "--out", &path];
    args.extend_from_slice(extra);
    let out = run(dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn data_rows(path: &str) -> usize {
    datasets::load(Path::new(path)).unwrap().len()
}

#[test]
fn gen_data_writes_requested_rows_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.csv", &["--n", "1500", "--seed", "7"]);
    let b = gen(dir.path(), "b.csv", &["--n", "1500", "--seed", "7"]);
    assert_eq!(data_rows(&a), 1500);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let header = fs::read_to_string(&a).unwrap().lines().next().unwrap().to_string();
    assert!(header.contains("config_hash="), "{header}");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["gen-data", "--env", "sim2d", "--n", "0"]).status.code(), Some(2));
    assert_eq!(run(d, &["gen-data", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(run(d, &["gen-data", "--env", "nowhere"]).status.code(), Some(2));
    assert_eq!(run(d, &["train", "--data", "/nonexistent/data.csv"]).status.code(), Some(3));
    let garbage = d.join("garbage.csv");
    fs::write(&garbage, "not a dataset\n1,2\n").unwrap();
    assert_eq!(run(d, &["train", "--data", garbage.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# generation\nenv = sim2d\nn = 10\nseed = 3\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let from_file = gen(dir.path(), "f.csv", &["--config", cfg]);
    assert_eq!(data_rows(&from_file), 10);
    let overridden = gen(dir.path(), "o.csv", &["--config", cfg, "--n", "20"]);
    assert_eq!(data_rows(&overridden), 20);
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "n 10\n").unwrap();
    assert_eq!(run(dir.path(), &["gen-data", "--config", bad.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn provenance_hash_tracks_settings_but_not_paths() {
    let resolve = |s: Settings| {
        s.get::<usize>("n", 1500).unwrap();
        s.get_untracked("out", "data.csv");
        s.provenance("gen-data").unwrap()
    };
    let a = resolve(Settings::new().with("n", "10").with("out", "x.csv"));
    let b = resolve(Settings::new().with("n", "10").with("out", "y.csv"));
    let c = resolve(Settings::new().with("n", "11"));
    assert!(Settings::new().with("typo", "1").provenance("gen-data").is_err());
    assert_eq!(a.hash, b.hash);
    assert_ne!(a.hash, c.hash);
    assert!(a.lines().contains("# n = 10"));
}

#[test]
fn train_smoke_run_reduces_the_total_derivative() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csv", &["--n", "1500", "--seed", "1"]);
    let s = Settings::new().with("data", &data).with("out_dir", dir.path().to_str().unwrap());
    let out = cmd_train(&s, &mut Vec::new()).unwrap();
    assert_eq!(out.trace_records, 20_000 / 100);
    let trace = fs::read_to_string(&out.trace).unwrap();
    assert!(trace.starts_with(&format!("# config_hash={}", out.provenance.hash)));
    let dj: Vec<f64> = trace.lines().skip(2).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(dj.len(), 200);
    assert!(dj[dj.len() - 1] < dj[0], "{} -> {}", dj[0], dj[dj.len() - 1]);
    assert!(fs::read_to_string(&out.params).unwrap().contains(&out.provenance.hash));
    assert!(fs::read_to_string(&out.dse).unwrap().contains("is_dse"));
}

#[test]
fn zero_lambda_trains_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csv", &["--n", "300", "--seed", "2"]);
    let out = run(dir.path(), &["train", "--data", &data, "--lambda", "0", "--iterations", "200", "--dse-rows", "100"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pessimism is disabled"));
}

#[test]
fn eval_rows_and_independent_monte_carlo() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csv", &["--n", "500", "--seed", "4"]);
    let s = Settings::new().with("policy", "behavior").with("data", &data).with("out_dir", dir.path().to_str().unwrap());
    let (table, path) = cmd_eval(&s, &mut Vec::new()).unwrap();
    let returns = table.values("mc_return");
    assert_eq!(returns.len(), 50);
    assert_eq!(table.values("mc_return_se").len(), 50);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert!(text.starts_with("experiment_id,config_hash,seed,metric,value\n"));

    // independent run on seeds the command never used
    let loaded = datasets::load(Path::new(&data)).unwrap();
    let env = loaded.env().unwrap();
    let map = env.feature_map(2).unwrap();
    let (m_ind, sd_ind) = mc_return(&env, &map, &loaded.behavior().unwrap(), env.gamma, 5000, env.eval_horizon(), 999_999).unwrap();
    let (m_cmd, sd_seeds) = mean_std(&returns);
    let se = ((sd_ind * sd_ind) / 5000.0 + (sd_seeds * sd_seeds) / 50.0).sqrt();
    assert!((m_cmd - m_ind).abs() <= 3.0 * se, "{m_cmd} vs {m_ind} (se {se})");

    let (again, _) = cmd_eval(&s, &mut Vec::new()).unwrap();
    assert_eq!(again.to_csv(), table.to_csv());
}

#[test]
fn eval_rejects_mismatched_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = gen(d, "sim.csv", &["--n", "200", "--seed", "1"]);
    let cart = d.join("cart.csv").to_string_lossy().into_owned();
    assert!(run(d, &["gen-data", "--env", "cartpole", "--n", "200", "--out", &cart]).status.success());
    assert!(run(d, &["train", "--data", &sim, "--iterations", "50", "--dse-rows", "50", "--name", "m"]).status.success());
    let params = d.join("m_params.txt");
    let out = run(d, &["eval", "--policy", params.to_str().unwrap(), "--data", &cart, "--seeds", "2", "--episodes", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diagnose_reports_six_metrics_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.csv", &["--n", "600", "--seed", "5", "--alpha", "5.0"]);
    let s = Settings::new().with("data", &data).with("rollouts", "1500").with("out_dir", dir.path().to_str().unwrap());
    let (table, _) = cmd_diagnose(&s, &mut Vec::new()).unwrap();
    let mut metrics: Vec<&str> = table.rows.iter().map(|r| r.metric.as_str()).collect();
    metrics.sort_unstable();
    assert_eq!(metrics, ["follower_grad_norm", "is_dse", "kappa", "kernel_bandwidth", "leader_grad_norm", "rcn"]);
    let (again, _) = cmd_diagnose(&s, &mut Vec::new()).unwrap();
    assert_eq!(again.to_csv(), table.to_csv());
}

#[test]
fn slope_fit_recovers_the_exponent() {
    let ns = [500.0, 1000.0, 2000.0, 4000.0, 8000.0];
    let y: Vec<f64> = ns.iter().map(|n: &f64| n.powf(-1.0 / 3.0)).collect();
    assert!((fit_loglog_slope(&ns, &y).unwrap() + 1.0 / 3.0).abs() < 1e-6);
    assert!(fit_loglog_slope(&ns, &[0.0; 5]).is_err());
}

#[test]
fn cell_seeds_are_distinct() {
    let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| cell_seed(42, i)).collect();
    assert_eq!(seeds.len(), 1000);
}

#[test]
fn oracle_sweep_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let s = Settings::new()
        .with("oracle", "true")
        .with("ns", "500,1000")
        .with("sigma0s", "1")
        .with("seeds", "2")
        .with("out_dir", dir.path().to_str().unwrap());
    let out = cmd_regret_sweep(&s, &mut Vec::new()).unwrap();
    let regrets = out.table.values("regret");
    assert_eq!(regrets.len(), 4);
    assert!(regrets.iter().all(|r| *r <= 1e-10));
    assert!(out.summaries.iter().all(|s| s.slope.is_none()));
}

#[test]
fn sweep_output_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let base = Settings::new()
        .with("ns", "200,400")
        .with("sigma0s", "0.5,2")
        .with("seeds", "2")
        .with("iterations", "60")
        .with("out_dir", dir.path().to_str().unwrap());
    let one = cmd_regret_sweep(&base.clone().with("threads", "1").with("out", dir.path().join("one.csv").to_str().unwrap()), &mut Vec::new()).unwrap();
    let four = cmd_regret_sweep(&base.with("threads", "4").with("out", dir.path().join("four.csv").to_str().unwrap()), &mut Vec::new()).unwrap();
    assert_eq!(fs::read(&one.path).unwrap(), fs::read(&four.path).unwrap());
    assert_eq!(one.cells, 8);
}
