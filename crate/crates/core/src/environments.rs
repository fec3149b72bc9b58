//! Synthetic environments: the 2-D nonlinear system, cart-pole with a shaped
//! reward, and the one-step quadratic-reward problem with a known optimum.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{Action, ActionSpace, FeatureMap, GaussianLinearPolicy, Policy};

/// Saturation level of the `s₁s₂` interaction in [`sim2d_step`].
pub const SIM2D_INTERACTION_CLIP: f64 = 1.0;
const SIM2D_NOISE_STD: f64 = 0.5;

pub const CARTPOLE_X_CLIP: f64 = 2.4;
pub const CARTPOLE_THETA_CLIP: f64 = 12.0 * std::f64::consts::PI / 180.0;

/// Quadratic-reward problem dimensions.
pub const QUAD_STATE_DIM: usize = 6;
pub const QUAD_ACTION_DIM: usize = 5;
pub const QUAD_STATE_HIGH: f64 = 1.5;
const QUAD_ACTION_LOW: f64 = -10.0;
const QUAD_ACTION_HIGH: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub enum EnvKind {
    Sim2d,
    CartPole,
    QuadraticReward { w: DMatrix<f64>, m: DMatrix<f64>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub gamma: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: Vec<f64>,
    pub reward: f64,
    /// Absorbing termination (no bootstrapping past this transition).
    pub terminal: bool,
}

/// Per-episode state of a running environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub state: Vec<f64>,
    pub t: usize,
    pub done: bool,
}

impl EnvSpec {
    pub fn sim2d() -> Self {
        EnvSpec { kind: EnvKind::Sim2d, gamma: 0.95, horizon: 100 }
    }

    pub fn cartpole() -> Self {
        EnvSpec { kind: EnvKind::CartPole, gamma: 0.95, horizon: 200 }
    }

    /// Draws `W` (entries uniform on (0,1)) and `M = −M₀ᵀM₀` from `seed`.
    pub fn quadratic_reward(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(QUAD_ACTION_DIM, QUAD_STATE_DIM, |_, _| rng.random::<f64>());
        let m0 = DMatrix::from_fn(QUAD_ACTION_DIM, QUAD_ACTION_DIM, |_, _| StandardNormal.sample(&mut rng));
        let m = -(m0.transpose() * &m0);
        let max_eig = m.clone().symmetric_eigenvalues().max();
        if !(max_eig < 0.0) {
            return Err(Error::Numeric(format!("reward matrix not negative definite (max eig {max_eig:e})")));
        }
        Ok(EnvSpec { kind: EnvKind::QuadraticReward { w, m, seed }, gamma: 0.95, horizon: 1 })
    }

    /// Rebuilds an environment from its name; `seed` is used by `quadratic` only.
    pub fn by_name(name: &str, seed: u64) -> Result<Self> {
        match name {
            "sim2d" => Ok(Self::sim2d()),
            "cartpole" => Ok(Self::cartpole()),
            "quadratic" => Self::quadratic_reward(seed),
            other => Err(Error::Input(format!("unknown environment '{other}' (sim2d, cartpole, quadratic)"))),
        }
    }

    /// Seed of the environment's own randomness (the quadratic reward matrices).
    pub fn seed(&self) -> u64 {
        match self.kind {
            EnvKind::QuadraticReward { seed, .. } => seed,
            _ => 0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EnvKind::Sim2d => "sim2d",
            EnvKind::CartPole => "cartpole",
            EnvKind::QuadraticReward { .. } => "quadratic",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::Sim2d => 2,
            EnvKind::CartPole => 4,
            EnvKind::QuadraticReward { .. } => QUAD_STATE_DIM,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.kind {
            EnvKind::Sim2d | EnvKind::CartPole => ActionSpace::Discrete(2),
            EnvKind::QuadraticReward { .. } => ActionSpace::Box {
                low: vec![QUAD_ACTION_LOW; QUAD_ACTION_DIM],
                high: vec![QUAD_ACTION_HIGH; QUAD_ACTION_DIM],
            },
        }
    }

    /// Declared state box used to normalize features.
    pub fn state_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self.kind {
            EnvKind::Sim2d => (vec![-6.0; 2], vec![6.0; 2]),
            EnvKind::CartPole => (
                vec![-CARTPOLE_X_CLIP, -3.0, -CARTPOLE_THETA_CLIP, -3.5],
                vec![CARTPOLE_X_CLIP, 3.0, CARTPOLE_THETA_CLIP, 3.5],
            ),
            EnvKind::QuadraticReward { .. } => (vec![0.0; QUAD_STATE_DIM], vec![QUAD_STATE_HIGH; QUAD_STATE_DIM]),
        }
    }

    /// Bound on |reward| used for value ranges and evaluation horizons.
    pub fn r_max(&self) -> f64 {
        match self.kind {
            EnvKind::Sim2d => 50.0,
            EnvKind::CartPole => 3.0,
            EnvKind::QuadraticReward { .. } => 1000.0,
        }
    }

    /// `V_max`, the default radius of the value class.
    pub fn v_max(&self) -> f64 {
        match self.kind {
            EnvKind::QuadraticReward { .. } => self.r_max(),
            _ => self.r_max() / (1.0 - self.gamma),
        }
    }

    pub fn feature_map(&self, degree: usize) -> Result<FeatureMap> {
        let (lo, hi) = self.state_bounds();
        FeatureMap::polynomial(degree, lo, hi, self.action_space())
    }

    /// Horizon `T` with `γ^T · r_max < 1e-3`, capped by episode termination rules.
    pub fn eval_horizon(&self) -> usize {
        match self.kind {
            EnvKind::QuadraticReward { .. } => 1,
            EnvKind::CartPole => self.horizon,
            EnvKind::Sim2d => ((1e-3 / self.r_max()).ln() / self.gamma.ln()).ceil() as usize,
        }
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::Sim2d => {
                let n = Normal::new(0.0, SIM2D_NOISE_STD).unwrap();
                vec![n.sample(rng), n.sample(rng)]
            }
            EnvKind::CartPole => (0..4).map(|_| rng.random_range(-0.05..0.05)).collect(),
            EnvKind::QuadraticReward { .. } => {
                (0..QUAD_STATE_DIM).map(|_| rng.random::<f64>() * QUAD_STATE_HIGH).collect()
            }
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, s: &[f64], a: &Action, rng: &mut R) -> StepOutcome {
        match (&self.kind, a) {
            (EnvKind::Sim2d, Action::Discrete(i)) => {
                let z0: f64 = StandardNormal.sample(rng);
                let z1: f64 = StandardNormal.sample(rng);
                let noise = [SIM2D_NOISE_STD * z0, SIM2D_NOISE_STD * z1];
                let (next, reward) = sim2d_step(s, *i, noise);
                StepOutcome { next, reward, terminal: false }
            }
            (EnvKind::CartPole, Action::Discrete(i)) => {
                let (next, reward, done) = cartpole_step(s, *i);
                StepOutcome { next, reward, terminal: done }
            }
            (EnvKind::QuadraticReward { w, m, .. }, Action::Continuous(act)) => {
                let eps: f64 = StandardNormal.sample(rng);
                let reward = quadratic_mean_reward(w, m, s, act) + eps;
                StepOutcome { next: s.to_vec(), reward, terminal: true }
            }
            _ => panic!("action {a:?} does not match environment {}", self.name()),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        EnvState { state: self.initial_state(rng), t: 0, done: false }
    }

    /// Advances a running episode; `done` is set on termination or at the horizon.
    pub fn advance<R: Rng + ?Sized>(&self, st: &mut EnvState, a: &Action, rng: &mut R) -> StepOutcome {
        let out = self.step(&st.state, a, rng);
        st.state = out.next.clone();
        st.t += 1;
        st.done = out.terminal || st.t >= self.horizon;
        out
    }
}

/// One transition of the 2-D system given the noise draw.
///
/// `s' = diag(0.75(2a−1), 0.75(1−2a)) s + clamp(s₁s₂, ±1)·(1, 1) + ε`,
/// `r = 2s'₁ + s'₂ − (2a−1)/4 + 0.75‖s'‖³`.
pub fn sim2d_step(s: &[f64], a: usize, noise: [f64; 2]) -> (Vec<f64>, f64) {
    let sign = 2.0 * a as f64 - 1.0;
    let inter = (s[0] * s[1]).clamp(-SIM2D_INTERACTION_CLIP, SIM2D_INTERACTION_CLIP);
    let next = vec![
        0.75 * sign * s[0] + inter + noise[0],
        -0.75 * sign * s[1] + inter + noise[1],
    ];
    (next.clone(), sim2d_reward(&next, a))
}

pub fn sim2d_reward(next: &[f64], a: usize) -> f64 {
    let sq = next[0] * next[0] + next[1] * next[1];
    2.0 * next[0] + next[1] - 0.25 * (2.0 * a as f64 - 1.0) + 0.75 * sq.powf(1.5)
}

/// Shaped cart-pole reward `|2 − x/x_clip|·|2 − θ/θ_clip| − 1`.
pub fn cartpole_reward(s: &[f64]) -> f64 {
    (2.0 - s[0] / CARTPOLE_X_CLIP).abs() * (2.0 - s[2] / CARTPOLE_THETA_CLIP).abs() - 1.0
}

pub fn cartpole_out_of_bounds(s: &[f64]) -> bool {
    s[0].abs() >= CARTPOLE_X_CLIP || s[2].abs() >= CARTPOLE_THETA_CLIP
}

/// Classic cart-pole Euler step; reward and termination are evaluated on the
/// next state.
pub fn cartpole_step(s: &[f64], a: usize) -> (Vec<f64>, f64, bool) {
    const GRAVITY: f64 = 9.8;
    const MASS_CART: f64 = 1.0;
    const MASS_POLE: f64 = 0.1;
    const HALF_LENGTH: f64 = 0.5;
    const FORCE: f64 = 10.0;
    const TAU: f64 = 0.02;
    let total = MASS_CART + MASS_POLE;
    let pml = MASS_POLE * HALF_LENGTH;

    let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
    let force = if a == 1 { FORCE } else { -FORCE };
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pml * theta_dot * theta_dot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    let next = vec![
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ];
    let r = cartpole_reward(&next);
    let done = cartpole_out_of_bounds(&next);
    (next, r, done)
}

/// `(a − Ws)ᵀ M (a − Ws)`.
pub fn quadratic_mean_reward(w: &DMatrix<f64>, m: &DMatrix<f64>, s: &[f64], a: &[f64]) -> f64 {
    let d = DVector::from_column_slice(a) - w * DVector::from_column_slice(s);
    (d.transpose() * m * &d)[(0, 0)]
}

/// `E[s sᵀ]` for `s` uniform on `[0, 1.5]^p`.
pub fn quadratic_state_second_moment() -> DMatrix<f64> {
    let mean = 0.5 * QUAD_STATE_HIGH;
    let var = QUAD_STATE_HIGH * QUAD_STATE_HIGH / 12.0;
    DMatrix::from_fn(QUAD_STATE_DIM, QUAD_STATE_DIM, |i, j| mean * mean + if i == j { var } else { 0.0 })
}

/// The analytic optimum `a = Ws` as a zero-variance Gaussian policy.
pub fn quadratic_optimal_policy(env: &EnvSpec) -> Result<GaussianLinearPolicy> {
    let EnvKind::QuadraticReward { w, .. } = &env.kind else {
        return Err(Error::Unsupported("optimal policy is only known for the quadratic environment".into()));
    };
    Ok(GaussianLinearPolicy::new(w.clone(), DVector::from_element(QUAD_ACTION_DIM, f64::NEG_INFINITY), 100.0))
}

/// Exact regret against `a = Ws`:
/// `E_s[−(μ(s) − Ws)ᵀ M (μ(s) − Ws)] − tr(M Σ)`, with the state expectation in
/// closed form since `μ` is linear.
pub fn exact_regret_quadratic(env: &EnvSpec, policy: &GaussianLinearPolicy) -> Result<f64> {
    let EnvKind::QuadraticReward { w, m, .. } = &env.kind else {
        return Err(Error::Unsupported("exact regret needs the quadratic environment".into()));
    };
    if policy.mean.shape() != w.shape() {
        return Err(Error::Schema(format!(
            "policy mean is {:?}, environment expects {:?}",
            policy.mean.shape(),
            w.shape()
        )));
    }
    let d = &policy.mean - w;
    let s2 = quadratic_state_second_moment();
    let neg_m = -m;
    let mean_part = (d.transpose() * neg_m * &d * s2).trace();
    let var_part: f64 = (0..QUAD_ACTION_DIM).map(|i| -m[(i, i)] * (2.0 * policy.log_std[i]).exp()).sum();
    Ok((mean_part + var_part).max(0.0))
}

/// Monte Carlo estimate of the discounted return; returns (mean, std) over episodes.
pub fn mc_return(
    env: &EnvSpec,
    map: &FeatureMap,
    policy: &Policy,
    gamma: f64,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let returns = mc_returns(env, map, policy, gamma, episodes, horizon, seed)?;
    Ok(mean_std(&returns))
}

/// Per-episode discounted returns.
pub fn mc_returns(
    env: &EnvSpec,
    map: &FeatureMap,
    policy: &Policy,
    gamma: f64,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::Input("mc_return needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.initial_state(&mut rng);
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let a = policy.sample(map, &s, &mut rng);
            let o = env.step(&s, &a, &mut rng);
            ret += disc * o.reward;
            disc *= gamma;
            s = o.next;
            if o.terminal {
                break;
            }
        }
        if !ret.is_finite() {
            return Err(Error::Numeric("non-finite return".into()));
        }
        out.push(ret);
    }
    Ok(out)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
