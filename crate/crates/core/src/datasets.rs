//! Behavior policies, offline dataset generation and persistence, and the
//! relative condition number coverage diagnostic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::environments::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::features::{Action, ActionSpace, FeatureMap, GaussianLinearPolicy, Policy, SoftmaxPolicy};

/// Number of initial-state draws stored with every dataset.
pub const DEFAULT_INITIAL_STATES: usize = 64;
/// Uniform-policy transitions collected per fitted-Q round.
pub const FQI_TRANSITIONS_PER_ROUND: usize = 500;
pub const FQI_RIDGE: f64 = 1e-3;
const RCN_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Absorbing termination: the next state is not bootstrapped.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialStateSet {
    pub states: Vec<Vec<f64>>,
}

impl InitialStateSet {
    pub fn draw(env: &EnvSpec, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Input("initial state set needs M ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(InitialStateSet { states: (0..m).map(|_| env.initial_state(&mut rng)).collect() })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// How the behavior policy of a dataset was built.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorSpec {
    /// Softmax of a fitted-Q estimate at temperature `alpha`.
    Softmax { alpha: f64, fqi_rounds: usize, degree: usize },
    /// `a = Ws + σ₀ z` on the quadratic environment.
    Gaussian { sigma0: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub env: String,
    pub env_seed: u64,
    pub behavior: BehaviorSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub initial_states: InitialStateSet,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn env(&self) -> Result<EnvSpec> {
        EnvSpec::by_name(&self.meta.env, self.meta.env_seed)
    }

    /// Rebuilds the behavior policy from the stored metadata.
    pub fn behavior(&self) -> Result<Policy> {
        let env = self.env()?;
        behavior_from_spec(&env, &self.meta.behavior, self.meta.seed)
    }
}

/// Coverage label used by the experiment driver.
pub fn coverage_label(behavior: &BehaviorSpec) -> &'static str {
    match behavior {
        BehaviorSpec::Softmax { alpha, .. } if *alpha < 0.5 => "poor",
        BehaviorSpec::Softmax { alpha, .. } if *alpha < 2.5 => "medium",
        BehaviorSpec::Softmax { .. } => "well",
        BehaviorSpec::Gaussian { sigma0 } if *sigma0 < 0.75 => "poor",
        BehaviorSpec::Gaussian { sigma0 } if *sigma0 < 1.5 => "medium",
        BehaviorSpec::Gaussian { .. } => "well",
    }
}

/// Linear fitted-Q iteration on uniform-policy data.
///
/// Each round refits `θ` by ridge regression onto
/// `r + γ (1 − done) max_a ⟨φ(s′,a), θ⟩`.
pub fn fitted_q(env: &EnvSpec, map: &FeatureMap, rounds: usize, seed: u64) -> Result<DVector<f64>> {
    let ActionSpace::Discrete(n_actions) = map.action_space() else {
        return Err(Error::Unsupported("fitted-Q iteration needs a discrete action space".into()));
    };
    let n_actions = *n_actions;
    let p = map.dim();
    if rounds == 0 {
        return Ok(DVector::zeros(p));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rounds * FQI_TRANSITIONS_PER_ROUND;
    let mut data = Vec::with_capacity(total);
    let mut s = env.initial_state(&mut rng);
    let mut t = 0;
    while data.len() < total {
        let a = Action::Discrete(rng.random_range(0..n_actions));
        let out = env.step(&s, &a, &mut rng);
        data.push(Transition { s: s.clone(), a, r: out.reward, s_next: out.next.clone(), done: out.terminal });
        t += 1;
        if out.terminal || t >= env.horizon {
            s = env.initial_state(&mut rng);
            t = 0;
        } else {
            s = out.next;
        }
    }

    let mut x = DMatrix::zeros(total, p);
    for (i, tr) in data.iter().enumerate() {
        x.row_mut(i).copy_from(&map.eval(&tr.s, &tr.a).transpose());
    }
    let next_feats: Vec<Vec<DVector<f64>>> = data
        .iter()
        .map(|tr| (0..n_actions).map(|b| map.eval(&tr.s_next, &Action::Discrete(b))).collect())
        .collect();
    let mut gram = x.transpose() * &x;
    for i in 0..p {
        gram[(i, i)] += FQI_RIDGE;
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("fitted-Q normal equations are not positive definite".into()))?;
    let mut theta = DVector::zeros(p);
    for _ in 0..rounds {
        let y = DVector::from_fn(total, |i, _| {
            let tr = &data[i];
            if tr.done {
                tr.r
            } else {
                let best = next_feats[i].iter().map(|f| f.dot(&theta)).fold(f64::NEG_INFINITY, f64::max);
                tr.r + env.gamma * best
            }
        });
        theta = chol.solve(&(x.transpose() * y));
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("fitted-Q iterate is not finite".into()));
        }
    }
    Ok(theta)
}

/// `π_b(a|s) ∝ exp(q̂(s,a)/α)` with `q̂` from [`fitted_q`].
pub fn behavior_softmax(env: &EnvSpec, map: &FeatureMap, alpha: f64, fqi_rounds: usize, seed: u64) -> Result<Policy> {
    if !env.action_space().is_discrete() {
        return Err(Error::Unsupported("softmax behavior needs a discrete action space".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Input(format!("temperature must be positive and finite, got {alpha}")));
    }
    let theta = fitted_q(env, map, fqi_rounds, seed)?;
    Ok(softmax_of_q(&theta, alpha))
}

pub fn softmax_of_q(theta: &DVector<f64>, alpha: f64) -> Policy {
    let omega = theta / alpha;
    let c_omega = omega.norm().max(100.0);
    Policy::Softmax(SoftmaxPolicy::new(omega, c_omega))
}

/// `a = Ws + σ₀ z`, `z ∼ N(0, I)`.
pub fn behavior_gaussian(env: &EnvSpec, sigma0: f64) -> Result<GaussianLinearPolicy> {
    let EnvKind::QuadraticReward { w, .. } = &env.kind else {
        return Err(Error::Unsupported("Gaussian behavior is defined for the quadratic environment".into()));
    };
    if !(sigma0 >= 0.0) || !sigma0.is_finite() {
        return Err(Error::Input(format!("sigma0 must be ≥ 0, got {sigma0}")));
    }
    Ok(GaussianLinearPolicy::new(w.clone(), DVector::from_element(w.nrows(), sigma0.ln()), 100.0))
}

pub fn behavior_from_spec(env: &EnvSpec, spec: &BehaviorSpec, seed: u64) -> Result<Policy> {
    match spec {
        BehaviorSpec::Softmax { alpha, fqi_rounds, degree } => {
            let map = env.feature_map(*degree)?;
            behavior_softmax(env, &map, *alpha, *fqi_rounds, seed)
        }
        BehaviorSpec::Gaussian { sigma0 } => Ok(Policy::Gaussian(behavior_gaussian(env, *sigma0)?)),
    }
}

/// SplitMix64 step; used to derive independent sub-seeds from one seed.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rolls out the behavior policy until exactly `n` transitions are collected
/// (the last episode is truncated), then draws the initial-state set.
pub fn generate(env: &EnvSpec, behavior: &BehaviorSpec, n: usize, seed: u64) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(Error::Input("dataset size must be ≥ 1".into()));
    }
    let policy = behavior_from_spec(env, behavior, seed)?;
    let map = match behavior {
        BehaviorSpec::Softmax { degree, .. } => env.feature_map(*degree)?,
        BehaviorSpec::Gaussian { .. } => env.feature_map(1)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut transitions = Vec::with_capacity(n);
    let mut state = env.reset(&mut rng);
    while transitions.len() < n {
        let s = state.state.clone();
        let a = policy.sample(&map, &s, &mut rng);
        let out = env.advance(&mut state, &a, &mut rng);
        transitions.push(Transition { s, a, r: out.reward, s_next: out.next, done: out.terminal });
        if state.done {
            state = env.reset(&mut rng);
        }
    }
    let initial_states = InitialStateSet::draw(env, DEFAULT_INITIAL_STATES, splitmix64(splitmix64(seed)))?;
    Ok(OfflineDataset {
        transitions,
        initial_states,
        meta: DatasetMeta { env: env.name().to_string(), env_seed: env.seed(), behavior: behavior.clone(), seed },
    })
}

fn action_width(env: &EnvSpec) -> usize {
    match env.action_space() {
        ActionSpace::Discrete(_) => 1,
        ActionSpace::Box { low, .. } => low.len(),
    }
}

/// Serializes a dataset: one `key=value` header line, one comma-separated row
/// `s…, a…, r, s′…, done` per transition, then one `init,` row per initial state.
pub fn to_text(data: &OfflineDataset) -> Result<String> {
    let env = data.env()?;
    let ds = env.state_dim();
    let aw = action_width(&env);
    let mut out = String::new();
    write!(
        out,
        "env={} env_seed={} state_dim={} action_dim={} n={} m_init={} seed={}",
        data.meta.env,
        data.meta.env_seed,
        ds,
        aw,
        data.transitions.len(),
        data.initial_states.len(),
        data.meta.seed
    )
    .unwrap();
    match &data.meta.behavior {
        BehaviorSpec::Softmax { alpha, fqi_rounds, degree } => {
            write!(out, " behavior=softmax alpha={alpha} fqi_rounds={fqi_rounds} degree={degree}").unwrap()
        }
        BehaviorSpec::Gaussian { sigma0 } => write!(out, " behavior=gaussian sigma0={sigma0}").unwrap(),
    }
    out.push('\n');
    let mut fields: Vec<String> = Vec::with_capacity(2 * ds + aw + 2);
    for t in &data.transitions {
        fields.clear();
        fields.extend(t.s.iter().map(|v| v.to_string()));
        match &t.a {
            Action::Discrete(i) => fields.push(i.to_string()),
            Action::Continuous(v) => fields.extend(v.iter().map(|x| x.to_string())),
        }
        fields.push(t.r.to_string());
        fields.extend(t.s_next.iter().map(|v| v.to_string()));
        fields.push(if t.done { "1" } else { "0" }.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    for s in &data.initial_states.states {
        out.push_str("init,");
        out.push_str(&s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn save(data: &OfflineDataset, path: &Path) -> Result<()> {
    fs::write(path, to_text(data)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<OfflineDataset> {
    from_text(&fs::read_to_string(path)?)
}

fn header_value<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("header is missing '{key}'") })
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse { line, msg: format!("cannot parse {what} from '{s}'") })
}

pub fn from_text(text: &str) -> Result<OfflineDataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty dataset file".into() })?;
    let pairs: Vec<(String, String)> = header
        .split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("malformed header entry '{kv}'") })
        })
        .collect::<Result<_>>()?;
    let h = |k: &str| header_value(&pairs, k);
    let env_name = h("env")?.to_string();
    let env_seed: u64 = parse_num(h("env_seed")?, 1, "env_seed")?;
    let ds: usize = parse_num(h("state_dim")?, 1, "state_dim")?;
    let aw: usize = parse_num(h("action_dim")?, 1, "action_dim")?;
    let n: usize = parse_num(h("n")?, 1, "n")?;
    let m_init: usize = parse_num(h("m_init")?, 1, "m_init")?;
    let seed: u64 = parse_num(h("seed")?, 1, "seed")?;
    let behavior = match h("behavior")? {
        "softmax" => BehaviorSpec::Softmax {
            alpha: parse_num(h("alpha")?, 1, "alpha")?,
            fqi_rounds: parse_num(h("fqi_rounds")?, 1, "fqi_rounds")?,
            degree: parse_num(h("degree")?, 1, "degree")?,
        },
        "gaussian" => BehaviorSpec::Gaussian { sigma0: parse_num(h("sigma0")?, 1, "sigma0")? },
        other => return Err(Error::Parse { line: 1, msg: format!("unknown behavior '{other}'") }),
    };
    let env = EnvSpec::by_name(&env_name, env_seed).map_err(|e| Error::Schema(e.to_string()))?;
    if env.state_dim() != ds || action_width(&env) != aw {
        return Err(Error::Schema(format!(
            "header dimensions ({ds}, {aw}) do not match environment {env_name} ({}, {})",
            env.state_dim(),
            action_width(&env)
        )));
    }
    let discrete = env.action_space().is_discrete();
    let width = 2 * ds + aw + 2;

    let mut transitions = Vec::with_capacity(n);
    let mut initial = Vec::with_capacity(m_init);
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols[0] == "init" {
            if cols.len() - 1 != ds {
                return Err(Error::Schema(format!(
                    "line {lineno}: expected {ds} initial-state columns, found {}",
                    cols.len() - 1
                )));
            }
            let s = cols[1..].iter().map(|c| parse_num(c, lineno, "state")).collect::<Result<Vec<f64>>>()?;
            initial.push(s);
            continue;
        }
        if cols.len() != width {
            return Err(Error::Schema(format!("line {lineno}: expected {width} columns, found {}", cols.len())));
        }
        let nums = cols.iter().map(|c| parse_num(c, lineno, "value")).collect::<Result<Vec<f64>>>()?;
        let s = nums[..ds].to_vec();
        let a = if discrete {
            let v = nums[ds];
            if v < 0.0 || v.fract() != 0.0 || v as usize >= env.action_space().dim() {
                return Err(Error::Parse { line: lineno, msg: format!("invalid discrete action {v}") });
            }
            Action::Discrete(v as usize)
        } else {
            Action::Continuous(nums[ds..ds + aw].to_vec())
        };
        let r = nums[ds + aw];
        let s_next = nums[ds + aw + 1..2 * ds + aw + 1].to_vec();
        let done = match nums[width - 1] {
            0.0 => false,
            1.0 => true,
            v => return Err(Error::Parse { line: lineno, msg: format!("done flag must be 0 or 1, got {v}") }),
        };
        transitions.push(Transition { s, a, r, s_next, done });
    }
    if transitions.len() != n {
        return Err(Error::Schema(format!("header declares n={n}, file has {} transition rows", transitions.len())));
    }
    if initial.len() != m_init {
        return Err(Error::Schema(format!(
            "header declares m_init={m_init}, file has {} initial-state rows",
            initial.len()
        )));
    }
    if n == 0 || m_init == 0 {
        return Err(Error::Schema("dataset needs n ≥ 1 and m_init ≥ 1".into()));
    }
    Ok(OfflineDataset {
        transitions,
        initial_states: InitialStateSet { states: initial },
        meta: DatasetMeta { env: env_name, env_seed, behavior, seed },
    })
}

/// Relative condition number and the trace `κ = tr Σ_μ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageReport {
    pub rcn: f64,
    pub kappa: f64,
}

/// Largest generalized eigenvalue of `(Σ_π, Σ_μ + 1e-8 I)`.
pub fn rcn_from_covariances(sigma_pi: &DMatrix<f64>, sigma_mu: &DMatrix<f64>) -> Result<f64> {
    let p = sigma_mu.nrows();
    if sigma_pi.shape() != (p, p) || sigma_mu.ncols() != p {
        return Err(Error::Input("covariance matrices must be square and of equal size".into()));
    }
    if sigma_mu.trace() <= 1e-14 {
        return Err(Error::Numeric("data feature covariance is numerically zero (degenerate data)".into()));
    }
    let reg = sigma_mu + DMatrix::identity(p, p) * RCN_JITTER;
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Numeric("data feature covariance is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("cannot invert Cholesky factor".into()))?;
    let mut c = &linv * sigma_pi * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    Ok(c.symmetric_eigenvalues().max())
}

/// `Σ_μ = (1/n) Σ φ(s_i,a_i) φ(s_i,a_i)ᵀ`.
pub fn data_covariance(data: &OfflineDataset, map: &FeatureMap) -> DMatrix<f64> {
    let p = map.dim();
    let mut cov = DMatrix::zeros(p, p);
    for t in &data.transitions {
        let f = map.eval(&t.s, &t.a);
        cov.ger(1.0, &f, &f, 1.0);
    }
    cov / data.len() as f64
}

/// `Σ_π` under the normalized discounted visitation of `target`: each rollout
/// runs a geometric number of steps `T ∼ Geom(1 − γ)` and records `(s_T, a_T)`.
/// An episode that terminates first records its last pair.
pub fn visitation_covariance(
    env: &EnvSpec,
    map: &FeatureMap,
    target: &Policy,
    rollouts: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if rollouts == 0 {
        return Err(Error::Input("need at least one rollout".into()));
    }
    let geom = Geometric::new(1.0 - env.gamma).map_err(|e| Error::Input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = map.dim();
    let mut cov = DMatrix::zeros(p, p);
    for _ in 0..rollouts {
        let stop = geom.sample(&mut rng);
        let mut s = env.initial_state(&mut rng);
        let mut t = 0u64;
        let f = loop {
            let a = target.sample(map, &s, &mut rng);
            if t == stop {
                break map.eval(&s, &a);
            }
            let out = env.step(&s, &a, &mut rng);
            if out.terminal {
                break map.eval(&s, &a);
            }
            s = out.next;
            t += 1;
        };
        cov.ger(1.0, &f, &f, 1.0);
    }
    Ok(cov / rollouts as f64)
}

pub fn relative_condition_number(
    data: &OfflineDataset,
    target: &Policy,
    env: &EnvSpec,
    rollouts: usize,
    map: &FeatureMap,
    seed: u64,
) -> Result<CoverageReport> {
    let sigma_mu = data_covariance(data, map);
    let sigma_pi = visitation_covariance(env, map, target, rollouts, seed)?;
    Ok(CoverageReport { rcn: rcn_from_covariances(&sigma_pi, &sigma_mu)?, kappa: sigma_mu.trace() })
}
