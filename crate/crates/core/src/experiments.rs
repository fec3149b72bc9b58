//! Command implementations behind the `stackelberg` binary.
//!
//! Every command reads its parameters from [`Settings`] (a config file
//! overlaid by flags), records the resolved values, hashes them, and embeds the
//! hash in every file it writes. Output locations and thread counts are not
//! part of the hash, so identical flags give byte-identical files wherever they
//! are written.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::datasets::{self, coverage_label, splitmix64, BehaviorSpec, OfflineDataset};
use crate::environments::{exact_regret_quadratic, mc_returns, mean_std, quadratic_optimal_policy, EnvSpec};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, GaussianLinearPolicy, LinearQ, Policy, SoftmaxPolicy};
use crate::gradients::SolverConfig;
use crate::kernel::{median_bandwidth, KernelSpec};
use crate::learner::{dse_check, train, DseReport, DseTolerances, LearnerConfig, PolicyGame, Schedules, TrainTrace};
use crate::objectives::Problem;

/// Environment variable naming the default output directory.
pub const OUT_DIR_VAR: &str = "STACKELBERG_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "out";
/// Regret grid used by `regret-sweep` unless overridden.
pub const SWEEP_NS: &str = "500,1000,2000,4000,8000";
pub const SWEEP_SIGMAS: &str = "0.5,1,2";
/// Share of failed cells at which a sweep is declared failed.
pub const SWEEP_FAILURE_LIMIT: f64 = 0.2;
/// Regrets at or below this level make a log-log fit meaningless.
pub const DEGENERATE_REGRET: f64 = 1e-10;
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

// ---------------------------------------------------------------------------
// settings

/// Key-value parameters with file-then-flag precedence.
///
/// Getters record the value they resolve (including defaults); [`Settings::provenance`]
/// then rejects unknown keys and hashes the record.
#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
    untracked: RefCell<BTreeMap<String, String>>,
}

/// Resolved parameters and their hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub entries: Vec<(String, String)>,
    pub hash: String,
}

impl Provenance {
    pub fn lines(&self) -> String {
        let mut out = format!("# config_hash = {}\n", self.hash);
        for (k, v) in &self.entries {
            writeln!(out, "# {k} = {v}").unwrap();
        }
        out
    }
}

/// Keys naming input files; their contents, not their paths, enter the hash.
const INPUT_KEYS: [&str; 2] = ["data", "policy"];

fn hex(bytes: &[u8], take: usize) -> String {
    bytes.iter().take(take).map(|b| format!("{b:02x}")).collect()
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut s = Settings::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got '{line}'") })?;
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_config(&fs::read_to_string(path)?)
    }

    /// Sets (or overrides) a key.
    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(normalize_key(key), value.to_string());
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.set(key, value);
        self
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
        raw.trim().parse().map_err(|_| Error::Input(format!("invalid value '{raw}' for {key}")))
    }

    pub fn get<T: FromStr + ToString>(&self, key: &str, default: T) -> Result<T> {
        let v = match self.values.get(key) {
            Some(raw) => Self::parse(key, raw)?,
            None => default,
        };
        self.resolved.borrow_mut().insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn get_opt<T: FromStr + ToString>(&self, key: &str) -> Result<Option<T>> {
        let v = self.values.get(key).map(|raw| Self::parse::<T>(key, raw)).transpose()?;
        let shown = v.as_ref().map_or_else(|| "none".to_string(), T::to_string);
        self.resolved.borrow_mut().insert(key.to_string(), shown);
        Ok(v)
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.resolved.borrow_mut().insert(key.to_string(), v.clone());
        v
    }

    pub fn require(&self, key: &str) -> Result<String> {
        let v = self.values.get(key).cloned().ok_or_else(|| Error::Input(format!("missing required parameter '{key}'")))?;
        self.resolved.borrow_mut().insert(key.to_string(), v.clone());
        Ok(v)
    }

    pub fn get_list<T: FromStr>(&self, key: &str, default: &str) -> Result<Vec<T>> {
        let raw = self.get_str(key, default);
        raw.split(',').filter(|t| !t.trim().is_empty()).map(|t| Self::parse(key, t)).collect()
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        let v = match self.values.get(key).map(|s| s.trim().to_ascii_lowercase()) {
            None => default,
            Some(s) if ["1", "true", "yes", "on"].contains(&s.as_str()) => true,
            Some(s) if ["0", "false", "no", "off"].contains(&s.as_str()) => false,
            Some(s) => return Err(Error::Input(format!("invalid boolean '{s}' for {key}"))),
        };
        self.resolved.borrow_mut().insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Settings::get_str`] but excluded from the config hash.
    pub fn get_untracked(&self, key: &str, default: &str) -> String {
        let v = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.untracked.borrow_mut().insert(key.to_string(), v.clone());
        v
    }

    fn out_dir(&self) -> PathBuf {
        let default = std::env::var(OUT_DIR_VAR).unwrap_or_else(|_| DEFAULT_OUT_DIR.to_string());
        PathBuf::from(self.get_untracked("out_dir", &default))
    }

    /// Rejects keys no getter asked for and hashes the resolved values, with input
    /// files replaced by their content digest.
    pub fn provenance(&self, command: &str) -> Result<Provenance> {
        let resolved = self.resolved.borrow();
        let untracked = self.untracked.borrow();
        let unknown: Vec<&str> = self
            .values
            .keys()
            .filter(|k| !resolved.contains_key(*k) && !untracked.contains_key(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Input(format!("unknown parameter(s) for {command}: {}", unknown.join(", "))));
        }
        let mut hashed = vec![("command".to_string(), command.to_string())];
        let mut shown = Vec::new();
        for (k, v) in resolved.iter() {
            // input files count by content, so moving them leaves the hash alone
            match INPUT_KEYS.contains(&k.as_str()).then(|| fs::read(v).ok()).flatten() {
                Some(bytes) => {
                    hashed.push((format!("{k}_sha256"), hex(&Sha256::digest(&bytes), 32)));
                    shown.push((k.clone(), v.clone()));
                }
                None => hashed.push((k.clone(), v.clone())),
            }
        }
        let mut hasher = Sha256::new();
        for (k, v) in &hashed {
            hasher.update(format!("{k}={v}\n").as_bytes());
        }
        let hash = hex(&hasher.finalize(), 8);
        hashed.extend(shown);
        Ok(Provenance { entries: hashed, hash })
    }
}

// ---------------------------------------------------------------------------
// result tables

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment_id: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(config_hash: &str) -> Self {
        ResultTable { config_hash: config_hash.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, experiment_id: &str, seed: u64, metric: &str, value: f64) {
        self.rows.push(ResultRow { experiment_id: experiment_id.into(), seed, metric: metric.into(), value });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment_id,config_hash,seed,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.experiment_id, self.config_hash, r.seed, r.metric, r.value).unwrap();
        }
        out
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }

    pub fn value(&self, experiment_id: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.experiment_id == experiment_id && r.metric == metric).map(|r| r.value)
    }

    /// Per-metric count, mean and standard error.
    pub fn summary(&self) -> String {
        let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.experiment_id.as_str(), r.metric.as_str())).or_default().push(r.value);
        }
        let mut out = String::new();
        for ((id, metric), vals) in groups {
            if vals.len() == 1 {
                writeln!(out, "{id:<40} {metric:<22} {:.6}", vals[0]).unwrap();
            } else {
                let (m, s) = mean_std(&vals);
                writeln!(out, "{id:<40} {metric:<22} {m:.6} ± {:.6} (n={})", s / (vals.len() as f64).sqrt(), vals.len())
                    .unwrap();
            }
        }
        out
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// trained-parameter artifacts

/// Trained policy and value parameters with everything needed to rebuild the
/// learning problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub env: String,
    pub env_seed: u64,
    pub degree: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub bandwidth: f64,
    pub policy: Policy,
    pub q: LinearQ,
    pub config_hash: String,
}

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Artifact {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# stackelberg parameters\n");
        let kv = |out: &mut String, k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv(&mut out, "config_hash", self.config_hash.clone());
        kv(&mut out, "env", self.env.clone());
        kv(&mut out, "env_seed", self.env_seed.to_string());
        kv(&mut out, "degree", self.degree.to_string());
        kv(&mut out, "gamma", self.gamma.to_string());
        kv(&mut out, "lambda", self.lambda.to_string());
        kv(&mut out, "bandwidth", self.bandwidth.to_string());
        match &self.policy {
            Policy::Softmax(p) => {
                kv(&mut out, "policy", "softmax".into());
                kv(&mut out, "c_omega", p.c_omega.to_string());
                kv(&mut out, "omega", join(p.omega.iter().cloned()));
            }
            Policy::Gaussian(p) => {
                kv(&mut out, "policy", "gaussian".into());
                kv(&mut out, "c_omega", p.c_omega.to_string());
                kv(&mut out, "mean_rows", p.mean.nrows().to_string());
                kv(&mut out, "mean_cols", p.mean.ncols().to_string());
                kv(&mut out, "mean", join(p.mean.transpose().iter().cloned()));
                kv(&mut out, "log_std", join(p.log_std.iter().cloned()));
                kv(&mut out, "action_samples", p.crn.len().to_string());
            }
        }
        kv(&mut out, "c_theta", self.q.c_theta.to_string());
        kv(&mut out, "v_max", self.q.v_max.to_string());
        kv(&mut out, "theta", join(self.q.theta.iter().cloned()));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key=value, got '{line}'") })?;
            map.insert(k.to_string(), (i + 1, v.to_string()));
        }
        let get = |k: &str| -> Result<(usize, &str)> {
            map.get(k).map(|(l, v)| (*l, v.as_str())).ok_or_else(|| Error::Schema(format!("artifact is missing '{k}'")))
        };
        fn num<T: FromStr>((line, v): (usize, &str), what: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Parse { line, msg: format!("cannot parse {what} from '{v}'") })
        }
        fn vec((line, v): (usize, &str), what: &str) -> Result<Vec<f64>> {
            v.split(',')
                .map(|t| t.trim().parse().map_err(|_| Error::Parse { line, msg: format!("cannot parse {what} entry '{t}'") }))
                .collect()
        }
        let c_omega: f64 = num(get("c_omega")?, "c_omega")?;
        let policy = match get("policy")?.1 {
            "softmax" => Policy::Softmax(SoftmaxPolicy::new(DVector::from_vec(vec(get("omega")?, "omega")?), c_omega)),
            "gaussian" => {
                let rows: usize = num(get("mean_rows")?, "mean_rows")?;
                let cols: usize = num(get("mean_cols")?, "mean_cols")?;
                let mean = vec(get("mean")?, "mean")?;
                let log_std = vec(get("log_std")?, "log_std")?;
                if mean.len() != rows * cols || log_std.len() != rows {
                    return Err(Error::Schema("gaussian policy dimensions do not match".into()));
                }
                let samples: usize = num(get("action_samples")?, "action_samples")?;
                let mut g = GaussianLinearPolicy::new(DMatrix::from_row_slice(rows, cols, &mean), DVector::from_vec(log_std), c_omega);
                let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(0);
                g.refresh_crn(&mut rng, samples.max(1));
                Policy::Gaussian(g)
            }
            other => return Err(Error::Schema(format!("unknown policy kind '{other}'"))),
        };
        let art = Artifact {
            env: get("env")?.1.to_string(),
            env_seed: num(get("env_seed")?, "env_seed")?,
            degree: num(get("degree")?, "degree")?,
            gamma: num(get("gamma")?, "gamma")?,
            lambda: num(get("lambda")?, "lambda")?,
            bandwidth: num(get("bandwidth")?, "bandwidth")?,
            policy,
            q: LinearQ {
                theta: DVector::from_vec(vec(get("theta")?, "theta")?),
                c_theta: num(get("c_theta")?, "c_theta")?,
                v_max: num(get("v_max")?, "v_max")?,
            },
            config_hash: get("config_hash")?.1.to_string(),
        };
        let env = EnvSpec::by_name(&art.env, art.env_seed).map_err(|e| Error::Schema(e.to_string()))?;
        let map = env.feature_map(art.degree).map_err(|e| Error::Schema(e.to_string()))?;
        if art.q.theta.len() != map.dim() || !policy_matches(&art.policy, &env, &map) {
            return Err(Error::Schema(format!("artifact parameters do not match the {} feature map", art.env)));
        }
        Ok(art)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::by_name(&self.env, self.env_seed)
    }
}

fn policy_matches(policy: &Policy, env: &EnvSpec, map: &FeatureMap) -> bool {
    match policy {
        Policy::Softmax(p) => env.action_space().is_discrete() && p.omega.len() == map.dim(),
        Policy::Gaussian(p) => {
            !env.action_space().is_discrete() && p.mean.shape() == (env.action_space().dim(), env.state_dim())
        }
    }
}

// ---------------------------------------------------------------------------
// shared pieces

fn env_from_settings(s: &Settings) -> Result<EnvSpec> {
    let name = s.get_str("env", "sim2d");
    let env_seed: u64 = s.get("env_seed", 0)?;
    EnvSpec::by_name(&name, env_seed)
}

/// `None` selects the median heuristic.
fn bandwidth_from(s: &Settings) -> Result<Option<f64>> {
    let raw = s.get_str("bandwidth", "median");
    if raw == "median" {
        Ok(None)
    } else {
        Settings::parse("bandwidth", &raw).map(Some)
    }
}

fn kernel_for(bandwidth: Option<f64>, data: &OfflineDataset, map: &FeatureMap, seed: u64) -> Result<KernelSpec> {
    let bw = match bandwidth {
        Some(bw) => bw,
        None => {
            let pts: Vec<_> = data.transitions.iter().map(|t| map.eval(&t.s, &t.a)).collect();
            median_bandwidth(&pts, seed)?
        }
    };
    KernelSpec::rbf(bw)
}

fn solver_from(s: &Settings) -> Result<SolverConfig> {
    let raw = s.get_str("beta", "auto");
    let solver = if raw == "auto" { SolverConfig::default() } else { SolverConfig::fixed(Settings::parse("beta", &raw)?) };
    Ok(SolverConfig { solve_tol: s.get("solve_tol", solver.solve_tol)?, ..solver })
}

/// Learner settings shared by `train` and `regret-sweep`.
struct LearnerSettings {
    config: LearnerConfig,
    lambda_rule: bool,
    init: String,
    policy_std: f64,
    degree: usize,
    dse_rows: usize,
    bandwidth: Option<f64>,
}

fn learner_from(s: &Settings, defaults: &LearnerConfig, init: &str) -> Result<LearnerSettings> {
    let schedules = Schedules {
        c1: s.get("c1", defaults.schedules.c1)?,
        a1: s.get("a1", defaults.schedules.a1)?,
        c2: s.get("c2", defaults.schedules.c2)?,
        a2: s.get("a2", defaults.schedules.a2)?,
    };
    let iterations = s.get("iterations", defaults.iterations)?;
    let config = LearnerConfig {
        lambda: s.get("lambda", defaults.lambda)?,
        gamma: s.get("gamma", defaults.gamma)?,
        schedules,
        iterations,
        batch_size: s.get("batch", defaults.batch_size)?,
        seed: s.get("seed", defaults.seed)?,
        eval_every: s.get("eval_every", defaults.eval_every.min(iterations))?,
        solver: solver_from(s)?,
        c_theta: s.get_opt("c_theta")?,
        c_omega: s.get("c_omega", defaults.c_omega)?,
        action_samples: s.get("action_samples", defaults.action_samples)?,
    };
    config.validate()?;
    let out = LearnerSettings {
        config,
        lambda_rule: s.get_bool("lambda_rule", false)?,
        init: s.get_str("init", init),
        policy_std: s.get("policy_std", 0.0)?,
        degree: s.get("degree", 2)?,
        dse_rows: s.get("dse_rows", 1000)?,
        bandwidth: bandwidth_from(s)?,
    };
    if !["zero", "behavior"].contains(&out.init.as_str()) {
        return Err(Error::Input(format!("init must be 'zero' or 'behavior', got '{}'", out.init)));
    }
    if !(out.policy_std >= 0.0) {
        return Err(Error::Input("policy_std must be ≥ 0".into()));
    }
    Ok(out)
}

/// Starting policy: zero parameters, or the dataset's behavior policy.
fn initial_policy(data: &OfflineDataset, env: &EnvSpec, map: &FeatureMap, ls: &LearnerSettings) -> Result<Policy> {
    let c_omega = ls.config.c_omega;
    Ok(match (&data.meta.behavior, ls.init.as_str()) {
        (BehaviorSpec::Softmax { .. }, "zero") => Policy::Softmax(SoftmaxPolicy::new(DVector::zeros(map.dim()), c_omega)),
        (BehaviorSpec::Softmax { .. }, _) => match data.behavior()? {
            Policy::Softmax(b) => Policy::Softmax(SoftmaxPolicy { c_omega, ..b }),
            other => other,
        },
        (BehaviorSpec::Gaussian { .. }, init) => {
            let (na, ns) = (env.action_space().dim(), env.state_dim());
            let mean = match (init, data.behavior()?) {
                ("behavior", Policy::Gaussian(b)) => b.mean,
                _ => DMatrix::zeros(na, ns),
            };
            let log_std = DVector::from_element(na, ls.policy_std.ln());
            let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(ls.config.seed);
            let samples = if ls.policy_std == 0.0 { 1 } else { ls.config.action_samples };
            Policy::Gaussian(GaussianLinearPolicy::new(mean, log_std, c_omega).with_crn(&mut rng, samples))
        }
    })
}

fn check_data_env(data: &OfflineDataset) -> Result<(EnvSpec, bool)> {
    let env = data.env()?;
    let discrete = env.action_space().is_discrete();
    Ok((env, discrete))
}

struct TrainRun {
    artifact: Artifact,
    trace: TrainTrace,
    lambda: f64,
}

fn run_training(data: &OfflineDataset, ls: &LearnerSettings, hash: &str) -> Result<TrainRun> {
    let (env, discrete) = check_data_env(data)?;
    let map = env.feature_map(ls.degree)?;
    let kernel = kernel_for(ls.bandwidth, data, &map, ls.config.seed)?;
    let mut config = ls.config;
    if ls.lambda_rule {
        config.lambda = LearnerConfig::lambda_rule(config.lambda, data.len());
    }
    if !discrete && ls.policy_std == 0.0 {
        config.action_samples = 1;
    }
    let policy0 = initial_policy(data, &env, &map, ls)?;
    let c_theta = config.c_theta.unwrap_or(env.v_max());
    let q0 = LinearQ::zeros(map.dim(), c_theta, env.v_max());
    let out = train(&data.transitions, &data.initial_states.states, &map, kernel, policy0, q0, &config)?;
    let artifact = Artifact {
        env: env.name().to_string(),
        env_seed: env.seed(),
        degree: ls.degree,
        gamma: config.gamma,
        lambda: config.lambda,
        bandwidth: kernel.bandwidth().unwrap_or(f64::NAN),
        policy: out.policy,
        q: out.q,
        config_hash: hash.to_string(),
    };
    Ok(TrainRun { artifact, trace: out.trace, lambda: config.lambda })
}

/// Full-batch equilibrium check of trained parameters on (a prefix of) the data.
pub fn artifact_dse(art: &Artifact, data: &OfflineDataset, rows: usize, solver: SolverConfig) -> Result<DseReport> {
    let env = art.env_spec()?;
    let map = env.feature_map(art.degree)?;
    let batch = &data.transitions[..rows.min(data.len()).max(2.min(data.len()))];
    let problem = Problem {
        map: &map,
        kernel: KernelSpec::rbf(art.bandwidth)?,
        gamma: art.gamma,
        lambda: art.lambda,
        init: &data.initial_states.states,
    };
    let game = PolicyGame { problem, batch, policy: art.policy.clone(), q: art.q.clone(), solver };
    dse_check(&game, &art.policy.params(), &art.q.theta, &DseTolerances::default())
}

fn dse_table(report: &DseReport, hash: &str, id: &str, seed: u64) -> ResultTable {
    let mut t = ResultTable::new(hash);
    t.push(id, seed, "grad_norm_leader", report.grad_norm_leader);
    t.push(id, seed, "grad_norm_follower", report.grad_norm_follower);
    t.push(id, seed, "leader_curvature_max_eig", report.leader_curvature_max_eig);
    t.push(id, seed, "follower_hessian_min_eig", report.follower_hessian_min_eig);
    t.push(id, seed, "is_dse", if report.is_dse { 1.0 } else { 0.0 });
    t
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub path: PathBuf,
    pub n: usize,
    pub coverage: &'static str,
    pub seed: u64,
    pub provenance: Provenance,
}

pub fn cmd_gen_data(s: &Settings, log: &mut dyn Write) -> Result<GenDataOutput> {
    let env = env_from_settings(s)?;
    let n: usize = s.get("n", 1500)?;
    let seed: u64 = s.get("seed", 0)?;
    let behavior = if env.action_space().is_discrete() {
        let alpha: f64 = s.get("alpha", 1.0)?;
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
        }
        BehaviorSpec::Softmax { alpha, fqi_rounds: s.get("fqi_rounds", 3)?, degree: s.get("degree", 2)? }
    } else {
        let sigma0: f64 = s.get("sigma0", 1.0)?;
        if !(sigma0 >= 0.0) || !sigma0.is_finite() {
            return Err(Error::Input(format!("sigma0 must be ≥ 0, got {sigma0}")));
        }
        BehaviorSpec::Gaussian { sigma0 }
    };
    if n == 0 {
        return Err(Error::Input("n must be ≥ 1".into()));
    }
    let default_path = s.out_dir().join(format!("data_{}_n{n}_s{seed}.csv", env.name()));
    let path = PathBuf::from(s.get_untracked("out", &default_path.to_string_lossy()));
    let provenance = s.provenance("gen-data")?;
    log.write_all(provenance.lines().as_bytes())?;

    let data = datasets::generate(&env, &behavior, n, seed)?;
    let text = datasets::to_text(&data)?;
    let text = match text.split_once('\n') {
        Some((header, rest)) => format!("{header} config_hash={}\n{rest}", provenance.hash),
        None => text,
    };
    write_file(&path, &text)?;
    let coverage = coverage_label(&behavior);
    writeln!(log, "wrote {} transitions to {} (coverage {coverage}, seed {seed})", data.len(), path.display())?;
    Ok(GenDataOutput { path, n: data.len(), coverage, seed, provenance })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone)]
pub struct TrainOutputFiles {
    pub params: PathBuf,
    pub trace: PathBuf,
    pub dse: PathBuf,
    pub report: DseReport,
    pub trace_records: usize,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

pub fn cmd_train(s: &Settings, log: &mut dyn Write) -> Result<TrainOutputFiles> {
    let data_path = PathBuf::from(s.require("data")?);
    let ls = learner_from(s, &LearnerConfig::default(), "zero")?;
    let out_dir = s.out_dir();
    let name = s.get_untracked("name", "train");
    let provenance = s.provenance("train")?;
    log.write_all(provenance.lines().as_bytes())?;
    let mut warnings = Vec::new();
    if ls.config.lambda == 0.0 {
        warnings.push("lambda = 0: pessimism is disabled, the follower only tracks the initial value".to_string());
    }
    for w in &warnings {
        writeln!(log, "warning: {w}")?;
    }

    let data = datasets::load(&data_path)?;
    let run = run_training(&data, &ls, &provenance.hash)?;
    let report = artifact_dse(&run.artifact, &data, ls.dse_rows, ls.config.solver)?;

    let params = out_dir.join(format!("{name}_params.txt"));
    let trace = out_dir.join(format!("{name}_trace.csv"));
    let dse = out_dir.join(format!("{name}_dse.csv"));
    write_file(&params, &run.artifact.to_text())?;
    write_file(&trace, &format!("# config_hash={}\n{}", provenance.hash, run.trace.to_csv()))?;
    write_file(&dse, &dse_table(&report, &provenance.hash, "train", ls.config.seed).to_csv())?;
    if let (Some(first), Some(last)) = (run.trace.records.first(), run.trace.records.last()) {
        writeln!(
            log,
            "lambda {} | |DJ| {:.4e} -> {:.4e} | leader value {:.4} | is_dse {}",
            run.lambda, first.total_dj_norm, last.total_dj_norm, last.leader_value, report.is_dse
        )?;
    }
    writeln!(log, "wrote {}, {}, {}", params.display(), trace.display(), dse.display())?;
    Ok(TrainOutputFiles {
        params,
        trace,
        dse,
        report,
        trace_records: run.trace.records.len(),
        warnings,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(s: &Settings, log: &mut dyn Write) -> Result<(ResultTable, PathBuf)> {
    let source = s.require("policy")?;
    let seeds: usize = s.get("seeds", 50)?;
    let episodes: usize = s.get("episodes", 100)?;
    let base_seed: u64 = s.get("seed", 0)?;
    let horizon: Option<usize> = s.get_opt("horizon")?;
    let data_path: Option<String> = s.get_opt("data")?;
    let out_default = s.out_dir().join("eval.csv");
    let path = PathBuf::from(s.get_untracked("out", &out_default.to_string_lossy()));
    if seeds == 0 || episodes == 0 {
        return Err(Error::Input("seeds and episodes must be ≥ 1".into()));
    }
    let provenance = s.provenance("eval")?;
    log.write_all(provenance.lines().as_bytes())?;

    let data = data_path.map(|p| datasets::load(Path::new(&p))).transpose()?;
    let (env, map, policy, id) = if source == "behavior" {
        let data = data.as_ref().ok_or_else(|| Error::Input("policy=behavior needs data=<dataset>".into()))?;
        let env = data.env()?;
        let degree = match data.meta.behavior {
            BehaviorSpec::Softmax { degree, .. } => degree,
            BehaviorSpec::Gaussian { .. } => 2,
        };
        (env.clone(), env.feature_map(degree)?, data.behavior()?, "eval/behavior")
    } else {
        let art = Artifact::load(Path::new(&source))?;
        let env = art.env_spec()?;
        if let Some(d) = &data {
            if d.meta.env != art.env || d.meta.env_seed != art.env_seed {
                return Err(Error::Schema(format!(
                    "artifact was trained on {} (seed {}) but the dataset is {} (seed {})",
                    art.env, art.env_seed, d.meta.env, d.meta.env_seed
                )));
            }
        }
        (env.clone(), env.feature_map(art.degree)?, art.policy, "eval/trained")
    };
    let horizon = horizon.unwrap_or_else(|| env.eval_horizon());
    let mut table = ResultTable::new(&provenance.hash);
    for i in 0..seeds {
        let seed = base_seed.wrapping_add(i as u64);
        let returns = mc_returns(&env, &map, &policy, env.gamma, episodes, horizon, seed)?;
        let (mean, sd) = mean_std(&returns);
        table.push(id, seed, "mc_return", mean);
        table.push(id, seed, "mc_return_se", sd / (episodes as f64).sqrt());
    }
    write_file(&path, &table.to_csv())?;
    log.write_all(table.summary().as_bytes())?;
    writeln!(log, "wrote {}", path.display())?;
    Ok((table, path))
}

// ---------------------------------------------------------------------------
// regret sweep

/// Seed of sweep cell `index`: the `index`-th output of a splitmix64 stream
/// started at `master`.
pub fn cell_seed(master: u64, index: usize) -> u64 {
    splitmix64(master.wrapping_add((index as u64).wrapping_mul(GOLDEN_GAMMA)))
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("slope fit needs at least two paired points".into()));
    }
    if y.iter().any(|v| !(*v > DEGENERATE_REGRET)) || x.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numeric("slope fit refused: regrets are degenerate (≤ 1e-10 or non-finite)".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("slope fit refused: all sample sizes are equal".into()));
    }
    Ok(sxy / sxx)
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSummary {
    pub sigma0: f64,
    pub medians: Vec<(usize, f64)>,
    /// `None` when the fit was refused.
    pub slope: Option<f64>,
    pub strictly_decreasing: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub table: ResultTable,
    pub path: PathBuf,
    pub summaries: Vec<SigmaSummary>,
    pub failures: usize,
    pub cells: usize,
}

struct Cell {
    sigma0: f64,
    n: usize,
    seed: u64,
}

fn sweep_cell(env: &EnvSpec, cell: &Cell, ls: &LearnerSettings, oracle: bool, hash: &str) -> Result<f64> {
    if oracle {
        return exact_regret_quadratic(env, &quadratic_optimal_policy(env)?);
    }
    let data = datasets::generate(env, &BehaviorSpec::Gaussian { sigma0: cell.sigma0 }, cell.n, cell.seed)?;
    let mut cell_ls = LearnerSettings { config: ls.config, init: ls.init.clone(), ..*ls };
    cell_ls.config.seed = cell.seed;
    let run = run_training(&data, &cell_ls, hash)?;
    match &run.artifact.policy {
        Policy::Gaussian(g) => exact_regret_quadratic(env, g),
        Policy::Softmax(_) => Err(Error::Unsupported("regret sweep needs a Gaussian policy".into())),
    }
}

pub fn cmd_regret_sweep(s: &Settings, log: &mut dyn Write) -> Result<SweepOutput> {
    let env = EnvSpec::by_name("quadratic", s.get("env_seed", 0)?)?;
    let ns: Vec<usize> = s.get_list("ns", SWEEP_NS)?;
    let sigmas: Vec<f64> = s.get_list("sigma0s", SWEEP_SIGMAS)?;
    let per_cell: usize = s.get("seeds", 5)?;
    let master: u64 = s.get("master_seed", 0)?;
    let oracle = s.get_bool("oracle", false)?;
    let defaults = LearnerConfig { iterations: 2000, schedules: Schedules { c1: 1e-4, ..Schedules::default() }, ..LearnerConfig::default() };
    let ls = learner_from(s, &defaults, "zero")?;
    let threads: usize = Settings::parse("threads", &s.get_untracked("threads", "0"))?;
    let out_default = s.out_dir().join("regret_sweep.csv");
    let path = PathBuf::from(s.get_untracked("out", &out_default.to_string_lossy()));
    if ns.is_empty() || sigmas.is_empty() || per_cell == 0 {
        return Err(Error::Input("regret sweep needs non-empty ns, sigma0s and seeds ≥ 1".into()));
    }
    if ns.iter().any(|&n| n < ls.config.batch_size) {
        return Err(Error::Input(format!("every n must be ≥ the minibatch size {}", ls.config.batch_size)));
    }
    if sigmas.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Input("sigma0 values must be ≥ 0".into()));
    }
    let provenance = s.provenance("regret-sweep")?;
    log.write_all(provenance.lines().as_bytes())?;

    let mut cells = Vec::new();
    for &sigma0 in &sigmas {
        for &n in &ns {
            for _ in 0..per_cell {
                let seed = cell_seed(master, cells.len());
                cells.push(Cell { sigma0, n, seed });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Input(format!("cannot build thread pool: {e}")))?;
    let results: Vec<Result<f64>> =
        pool.install(|| cells.par_iter().map(|c| sweep_cell(&env, c, &ls, oracle, &provenance.hash)).collect());

    let mut table = ResultTable::new(&provenance.hash);
    let mut failures = 0;
    for (cell, res) in cells.iter().zip(&results) {
        let id = format!("regret-sweep/sigma0={}/n={}", cell.sigma0, cell.n);
        match res {
            Ok(r) => table.push(&id, cell.seed, "regret", *r),
            Err(e) => {
                failures += 1;
                writeln!(log, "cell {id} seed {} failed: {e}", cell.seed)?;
                table.push(&id, cell.seed, "failed", 1.0);
            }
        }
    }
    if failures as f64 >= SWEEP_FAILURE_LIMIT * cells.len() as f64 {
        write_file(&path, &table.to_csv())?;
        return Err(Error::Numeric(format!("regret sweep failed: {failures} of {} cells failed", cells.len())));
    }

    let mut summaries = Vec::new();
    for &sigma0 in &sigmas {
        let mut medians = Vec::new();
        for &n in &ns {
            let mut vals: Vec<f64> = cells
                .iter()
                .zip(&results)
                .filter(|(c, _)| c.sigma0 == sigma0 && c.n == n)
                .filter_map(|(_, r)| r.as_ref().ok().copied())
                .collect();
            if vals.is_empty() {
                continue;
            }
            let m = median_of(&mut vals);
            table.push(&format!("regret-sweep/sigma0={sigma0}/n={n}"), master, "median_regret", m);
            medians.push((n, m));
        }
        let xs: Vec<f64> = medians.iter().map(|(n, _)| *n as f64).collect();
        let ys: Vec<f64> = medians.iter().map(|(_, m)| *m).collect();
        let id = format!("regret-sweep/sigma0={sigma0}");
        let slope = match fit_loglog_slope(&xs, &ys) {
            Ok(v) => {
                table.push(&id, master, "slope", v);
                Some(v)
            }
            Err(e) => {
                writeln!(log, "sigma0 = {sigma0}: {e}")?;
                None
            }
        };
        let strictly_decreasing = ys.windows(2).all(|w| w[1] < w[0]);
        table.push(&id, master, "median_strictly_decreasing", if strictly_decreasing { 1.0 } else { 0.0 });
        summaries.push(SigmaSummary { sigma0, medians, slope, strictly_decreasing });
    }
    write_file(&path, &table.to_csv())?;
    for sm in &summaries {
        let meds: Vec<String> = sm.medians.iter().map(|(n, m)| format!("n={n}: {m:.4e}")).collect();
        let slope = sm.slope.map_or("refused".to_string(), |v| format!("{v:.4}"));
        writeln!(log, "sigma0 = {}: slope {slope}, decreasing {} | {}", sm.sigma0, sm.strictly_decreasing, meds.join(", "))?;
    }
    writeln!(log, "wrote {} ({failures} failed cells of {})", path.display(), cells.len())?;
    Ok(SweepOutput { table, path, summaries, failures, cells: cells.len() })
}

// ---------------------------------------------------------------------------
// diagnose

pub fn cmd_diagnose(s: &Settings, log: &mut dyn Write) -> Result<(ResultTable, PathBuf)> {
    let data_path = s.require("data")?;
    let source = s.get_str("policy", "behavior");
    let rollouts: usize = s.get("rollouts", 2000)?;
    let seed: u64 = s.get("seed", 0)?;
    let rows: usize = s.get("dse_rows", 1000)?;
    let solver = solver_from(s)?;
    let out_default = s.out_dir().join("diagnose.csv");
    let path = PathBuf::from(s.get_untracked("out", &out_default.to_string_lossy()));
    let provenance = s.provenance("diagnose")?;
    log.write_all(provenance.lines().as_bytes())?;

    let data = datasets::load(Path::new(&data_path))?;
    let env = data.env()?;
    let art = if source == "behavior" {
        let degree = match data.meta.behavior {
            BehaviorSpec::Softmax { degree, .. } => degree,
            BehaviorSpec::Gaussian { .. } => 2,
        };
        let map = env.feature_map(degree)?;
        let pts: Vec<_> = data.transitions.iter().map(|t| map.eval(&t.s, &t.a)).collect();
        Artifact {
            env: env.name().to_string(),
            env_seed: env.seed(),
            degree,
            gamma: env.gamma,
            lambda: LearnerConfig::default().lambda,
            bandwidth: median_bandwidth(&pts, seed)?,
            policy: data.behavior()?,
            q: LinearQ::zeros(map.dim(), env.v_max(), env.v_max()),
            config_hash: provenance.hash.clone(),
        }
    } else {
        let art = Artifact::load(Path::new(&source))?;
        if data.meta.env != art.env || data.meta.env_seed != art.env_seed {
            return Err(Error::Schema(format!("artifact was trained on {} but the dataset is {}", art.env, data.meta.env)));
        }
        art
    };
    let map = env.feature_map(art.degree)?;
    let coverage = datasets::relative_condition_number(&data, &art.policy, &env, rollouts, &map, seed)?;
    let report = artifact_dse(&art, &data, rows, solver)?;
    let mut table = ResultTable::new(&provenance.hash);
    let id = "diagnose";
    table.push(id, seed, "rcn", coverage.rcn);
    table.push(id, seed, "kappa", coverage.kappa);
    table.push(id, seed, "kernel_bandwidth", art.bandwidth);
    table.push(id, seed, "leader_grad_norm", report.grad_norm_leader);
    table.push(id, seed, "follower_grad_norm", report.grad_norm_follower);
    table.push(id, seed, "is_dse", if report.is_dse { 1.0 } else { 0.0 });
    write_file(&path, &table.to_csv())?;
    log.write_all(table.summary().as_bytes())?;
    writeln!(log, "wrote {}", path.display())?;
    Ok((table, path))
}
