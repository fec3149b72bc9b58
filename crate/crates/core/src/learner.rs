//! Two-timescale leader-follower updates, equilibrium diagnostics and the
//! analytic quadratic test games.

use std::time::Instant;

use nalgebra::{Complex, DMatrix, DVector};
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::Transition;
use crate::error::{Error, Result};
use crate::features::{project_ball, FeatureMap, LinearQ, Policy, DEFAULT_ACTION_SAMPLES};
use crate::gradients::{default_beta, gradient_bundle, grad_q_l, hess_q_l, SolverConfig};
use crate::kernel::KernelSpec;
use crate::objectives::{follower_loss, leader_value, Problem};

/// Divergence threshold for iterates.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Power-law step sizes `γ_{1,k} = c₁/(1+k)^{a₁}`, `γ_{2,k} = c₂/(1+k)^{a₂}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub c1: f64,
    pub a1: f64,
    pub c2: f64,
    pub a2: f64,
}

impl Default for Schedules {
    fn default() -> Self {
        Schedules { c1: 0.5, a1: 0.9, c2: 1.0, a2: 0.6 }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Input(format!("step scales must be positive, got c1={} c2={}", self.c1, self.c2)));
        }
        let in_range = |a: f64| a > 0.5 && a <= 1.0;
        if !in_range(self.a1) || !in_range(self.a2) {
            return Err(Error::Input(format!("exponents must lie in (0.5, 1], got a1={} a2={}", self.a1, self.a2)));
        }
        if !(self.a1 > self.a2) {
            return Err(Error::Input(format!(
                "the leader must run on the slower timescale: need a1 > a2, got a1={} a2={}",
                self.a1, self.a2
            )));
        }
        Ok(())
    }

    pub fn at(&self, k: usize) -> (f64, f64) {
        let base = 1.0 + k as f64;
        (self.c1 / base.powf(self.a1), self.c2 / base.powf(self.a2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnerConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub schedules: Schedules,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub solver: SolverConfig,
    /// Radius of the value ball; `None` uses the value range of the data's environment.
    pub c_theta: Option<f64>,
    pub c_omega: f64,
    /// Common-random-number draws per iteration for Gaussian policies.
    pub action_samples: usize,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            lambda: 0.1,
            gamma: 0.95,
            schedules: Schedules::default(),
            iterations: 20_000,
            batch_size: 128,
            seed: 0,
            eval_every: 100,
            solver: SolverConfig::default(),
            c_theta: None,
            c_omega: 100.0,
            action_samples: DEFAULT_ACTION_SAMPLES,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedules.validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Input(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Input(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.iterations == 0 || self.eval_every == 0 {
            return Err(Error::Input("iterations and eval_every must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Input(format!("minibatch size must be ≥ 2, got {}", self.batch_size)));
        }
        if matches!(self.solver.beta, Some(b) if !(b >= 0.0)) {
            return Err(Error::Input("beta must be ≥ 0".into()));
        }
        if !(self.c_omega > 0.0) || matches!(self.c_theta, Some(c) if !(c > 0.0)) {
            return Err(Error::Input("ball radii must be positive".into()));
        }
        if self.action_samples == 0 {
            return Err(Error::Input("action_samples must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Pessimism weight growing as `n^{2/3}`, anchored so that `n = 1500`
    /// gives `lambda0`.
    pub fn lambda_rule(lambda0: f64, n: usize) -> f64 {
        lambda0 * (n as f64 / 1500.0).powf(2.0 / 3.0)
    }
}

pub fn step_sizes(k: usize, config: &LearnerConfig) -> (f64, f64) {
    config.schedules.at(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub leader_value: f64,
    /// Follower loss on the iteration's minibatch.
    pub follower_loss: f64,
    pub total_dj_norm: f64,
    pub grad_q_l_norm: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    /// Comma-separated table; wall time is left out so files are reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,leader_value,follower_loss,total_dj_norm,grad_q_l_norm,gamma1,gamma2\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.k, r.leader_value, r.follower_loss, r.total_dj_norm, r.grad_q_l_norm, r.gamma1, r.gamma2
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: Policy,
    pub q: LinearQ,
    pub trace: TrainTrace,
}

/// The stochastic leader-follower loop.
///
/// Each step draws a minibatch without replacement, ascends the policy along
/// the estimated total derivative with `γ₁`, descends the value along its
/// follower gradient with `γ₂`, and projects both onto their balls.
#[allow(clippy::too_many_arguments)]
pub fn train(
    transitions: &[Transition],
    init: &[Vec<f64>],
    map: &FeatureMap,
    kernel: KernelSpec,
    policy0: Policy,
    q0: LinearQ,
    config: &LearnerConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let n = transitions.len();
    if n < config.batch_size {
        return Err(Error::Input(format!("dataset has {n} transitions, fewer than the minibatch size {}", config.batch_size)));
    }
    if init.is_empty() {
        return Err(Error::Input("need at least one initial state".into()));
    }
    if policy0.param_dim() == 0 || q0.theta.len() != map.dim() {
        return Err(Error::Input("parameter dimensions do not match the feature map".into()));
    }
    let pb = Problem { map, kernel, gamma: config.gamma, lambda: config.lambda, init };
    let c_theta = config.c_theta.unwrap_or(q0.c_theta);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = policy0;
    let mut q = LinearQ { c_theta, ..q0 };
    let mut omega = project_ball(&policy.params(), config.c_omega)?;
    policy = policy.with_params(&omega);
    q.theta = project_ball(&q.theta, c_theta)?;
    let mut trace = TrainTrace::default();
    let start = Instant::now();
    let mut batch = Vec::with_capacity(config.batch_size);

    for k in 1..=config.iterations {
        let fail = |e: Error| Error::Step { step: k, source: Box::new(e) };
        if let Policy::Gaussian(g) = &mut policy {
            g.refresh_crn(&mut rng, config.action_samples);
        }
        batch.clear();
        if n == config.batch_size {
            batch.extend(transitions.iter().cloned());
        } else {
            let mut idx = sample(&mut rng, n, config.batch_size).into_vec();
            idx.sort_unstable();
            batch.extend(idx.into_iter().map(|i| transitions[i].clone()));
        }
        let g = gradient_bundle(&q, &policy, &batch, &pb, &config.solver).map_err(fail)?;
        let (g1, g2) = step_sizes(k - 1, config);
        if k % config.eval_every == 0 {
            let loss = follower_loss(&q, &policy, &batch, &pb).map_err(fail)?;
            trace.records.push(TraceRecord {
                k,
                leader_value: leader_value(&q, map, &policy, init),
                follower_loss: loss,
                total_dj_norm: g.total_dj.norm(),
                grad_q_l_norm: g.d_q_l.norm(),
                gamma1: g1,
                gamma2: g2,
                wall_secs: start.elapsed().as_secs_f64(),
            });
        }
        omega = project_ball(&(&omega + &g.total_dj * g1), config.c_omega).map_err(fail)?;
        q.theta = project_ball(&(&q.theta - &g.d_q_l * g2), c_theta).map_err(fail)?;
        policy = policy.with_params(&omega);
    }
    Ok(TrainOutput { policy, q, trace })
}

/// A two-player game in which the leader ascends its total derivative and the
/// follower descends its own objective.
pub trait StackelbergGame {
    fn leader_dim(&self) -> usize;
    fn follower_dim(&self) -> usize;
    /// Leader total derivative at `(x₁, x₂)`.
    fn total_derivative(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>>;
    /// `D₂ f₂`.
    fn follower_gradient(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>>;
    /// `D²₂ f₂`.
    fn follower_hessian(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// `D₂₁ f₂` (follower_dim × leader_dim).
    fn follower_cross(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DseReport {
    pub grad_norm_leader: f64,
    pub grad_norm_follower: f64,
    /// Largest eigenvalue of the symmetrized leader curvature along the
    /// follower's response; negative at a leader maximum.
    pub leader_curvature_max_eig: f64,
    pub follower_hessian_min_eig: f64,
    pub is_dse: bool,
    pub j_s_eigenvalues: Vec<Complex<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DseTolerances {
    pub fd_step: f64,
    pub tol_g: f64,
    pub tol_c: f64,
}

impl Default for DseTolerances {
    fn default() -> Self {
        DseTolerances { fd_step: 1e-5, tol_g: 1e-4, tol_c: 1e-6 }
    }
}

/// Differential Stackelberg check with a maximizing leader: small gradients,
/// `D₁(DJ) − D₂(DJ)(D²₂f₂)⁻¹D₂₁f₂ ≺ 0` and `D²₂f₂ ≻ 0`. Leader second-order blocks come from central
/// differences of the total derivative.
pub fn dse_check<G: StackelbergGame + ?Sized>(
    game: &G,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    tol: &DseTolerances,
) -> Result<DseReport> {
    let (m1, m2) = (game.leader_dim(), game.follower_dim());
    let g1 = game.total_derivative(x1, x2)?;
    let g2 = game.follower_gradient(x1, x2)?;
    let h = tol.fd_step;
    let mut d11 = DMatrix::zeros(m1, m1);
    for j in 0..m1 {
        let mut p = x1.clone();
        p[j] += h;
        let mut m = x1.clone();
        m[j] -= h;
        let col = (game.total_derivative(&p, x2)? - game.total_derivative(&m, x2)?) / (2.0 * h);
        d11.set_column(j, &col);
    }
    let mut d12 = DMatrix::zeros(m1, m2);
    for j in 0..m2 {
        let mut p = x2.clone();
        p[j] += h;
        let mut m = x2.clone();
        m[j] -= h;
        let col = (game.total_derivative(x1, &p)? - game.total_derivative(x1, &m)?) / (2.0 * h);
        d12.set_column(j, &col);
    }
    if d11.iter().chain(d12.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite finite-difference estimate in dse_check".into()));
    }
    let hf = game.follower_hessian(x1, x2)?;
    let d21 = game.follower_cross(x1, x2)?;
    // curvature of the leader along the follower's response: D₁₁ − D₁₂ (D²₂f₂)⁻¹ D₂₁
    let beta = default_beta(&hf);
    let response = hf
        .clone()
        .cholesky()
        .or_else(|| (&hf + DMatrix::identity(m2, m2) * beta).cholesky())
        .ok_or_else(|| Error::Numeric("follower Hessian is not positive definite".into()))?
        .solve(&d21);
    let schur = &d11 - &d12 * response;
    let sym = (&schur + schur.transpose()) * 0.5;
    let leader_curvature_max_eig = sym.symmetric_eigenvalues().max();
    let follower_hessian_min_eig = ((&hf + hf.transpose()) * 0.5).symmetric_eigenvalues().min();
    let mut js = DMatrix::zeros(m1 + m2, m1 + m2);
    js.view_mut((0, 0), (m1, m1)).copy_from(&d11);
    js.view_mut((0, m1), (m1, m2)).copy_from(&d12);
    js.view_mut((m1, 0), (m2, m1)).copy_from(&d21);
    js.view_mut((m1, m1), (m2, m2)).copy_from(&hf);
    let j_s_eigenvalues = js.complex_eigenvalues().iter().cloned().collect();
    let grad_norm_leader = g1.norm();
    let grad_norm_follower = g2.norm();
    let is_dse = grad_norm_leader <= tol.tol_g
        && grad_norm_follower <= tol.tol_g
        && leader_curvature_max_eig <= -tol.tol_c
        && follower_hessian_min_eig >= tol.tol_c;
    Ok(DseReport {
        grad_norm_leader,
        grad_norm_follower,
        leader_curvature_max_eig,
        follower_hessian_min_eig,
        is_dse,
        j_s_eigenvalues,
    })
}

/// The offline policy-learning game on a fixed (full) batch: `x₁ = ω`, `x₂ = θ`.
pub struct PolicyGame<'a> {
    pub problem: Problem<'a>,
    pub batch: &'a [Transition],
    pub policy: Policy,
    pub q: LinearQ,
    pub solver: SolverConfig,
}

impl PolicyGame<'_> {
    fn at(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> (Policy, LinearQ) {
        (self.policy.with_params(x1), LinearQ { theta: x2.clone(), ..self.q.clone() })
    }
}

impl StackelbergGame for PolicyGame<'_> {
    fn leader_dim(&self) -> usize {
        self.policy.param_dim()
    }

    fn follower_dim(&self) -> usize {
        self.q.theta.len()
    }

    fn total_derivative(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>> {
        let (p, q) = self.at(x1, x2);
        Ok(gradient_bundle(&q, &p, self.batch, &self.problem, &self.solver)?.total_dj)
    }

    fn follower_gradient(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>> {
        let (p, q) = self.at(x1, x2);
        grad_q_l(&q, &p, self.batch, &self.problem)
    }

    fn follower_hessian(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (p, q) = self.at(x1, x2);
        hess_q_l(&q, &p, self.batch, &self.problem)
    }

    fn follower_cross(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (p, q) = self.at(x1, x2);
        Ok(gradient_bundle(&q, &p, self.batch, &self.problem, &self.solver)?.cross_q_pi_l.transpose())
    }
}

/// Quadratic leader-follower game.
///
/// The leader maximizes
/// `f₁ = ½x₁ᵀA₁x₁ + x₁ᵀB₁x₂ + ½x₂ᵀC₁x₂ + l₁ᵀx₁ + l₂ᵀx₂`; the follower minimizes
/// `f₂ = ½x₂ᵀAx₂ + x₂ᵀBx₁ + a₂ᵀx₂` with `A ≻ 0`, so its best response is
/// `x₂*(x₁) = −A⁻¹(Bx₁ + a₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGame {
    pub a1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub l1: DVector<f64>,
    pub l2: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a2: DVector<f64>,
    a_inv: DMatrix<f64>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

fn sym_with_spectrum(eigs: &[f64], rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = random_orthogonal(eigs.len(), rng);
    let m = &q * DMatrix::from_diagonal(&DVector::from_column_slice(eigs)) * q.transpose();
    (&m + m.transpose()) * 0.5
}

impl QuadraticGame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a1: DMatrix<f64>,
        b1: DMatrix<f64>,
        c1: DMatrix<f64>,
        l1: DVector<f64>,
        l2: DVector<f64>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        a2: DVector<f64>,
    ) -> Result<Self> {
        let (m1, m2) = (a1.nrows(), a.nrows());
        let shapes_ok = a1.shape() == (m1, m1)
            && b1.shape() == (m1, m2)
            && c1.shape() == (m2, m2)
            && l1.len() == m1
            && l2.len() == m2
            && a.shape() == (m2, m2)
            && b.shape() == (m2, m1)
            && a2.len() == m2;
        if !shapes_ok {
            return Err(Error::Input("quadratic game blocks have inconsistent shapes".into()));
        }
        let min_eig = ((&a + a.transpose()) * 0.5).symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(Error::Input(format!("follower block must be positive definite (min eig {min_eig:e})")));
        }
        let a_inv = a.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| Error::Numeric("cannot invert follower block".into()))?;
        Ok(QuadraticGame { a1, b1, c1, l1, l2, a, b, a2, a_inv })
    }

    /// Game whose leader curvature along the best response is `h_eigs` and
    /// whose follower block has eigenvalues `follower_eigs`. Linear terms are
    /// random when `offset` is true and zero otherwise.
    pub fn with_spectra(h_eigs: &[f64], follower_eigs: &[f64], offset: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m1, m2) = (h_eigs.len(), follower_eigs.len());
        let scale1 = 1.0 / (m1 as f64).sqrt();
        let a = sym_with_spectrum(follower_eigs, &mut rng);
        let b = DMatrix::from_fn(m2, m1, |_, _| scale1 * gauss(&mut rng));
        let b1 = DMatrix::from_fn(m1, m2, |_, _| scale1 * gauss(&mut rng));
        let c1 = {
            let g = DMatrix::from_fn(m2, m2, |_, _| 0.5 * gauss(&mut rng));
            (&g + g.transpose()) * 0.5
        };
        let a_inv = a.clone().try_inverse().ok_or_else(|| Error::Numeric("singular follower block".into()))?;
        let r = -(&a_inv * &b);
        let target = sym_with_spectrum(h_eigs, &mut rng);
        let coupling = &b1 * &r + r.transpose() * b1.transpose() + r.transpose() * &c1 * &r;
        let a1 = target - coupling;
        let a1 = (&a1 + a1.transpose()) * 0.5;
        let mut lin = |d: usize| {
            if offset {
                DVector::from_fn(d, |_, _| 0.5 * gauss(&mut rng))
            } else {
                DVector::zeros(d)
            }
        };
        let (l1, l2, a2) = (lin(m1), lin(m2), lin(m2));
        Self::new(a1, b1, c1, l1, l2, a, b, a2)
    }

    /// Game with leader curvature in [−3, −1] and follower curvature in [0.5, 1.5].
    pub fn random_stable(m1: usize, m2: usize, seed: u64) -> Result<Self> {
        let spread = |lo: f64, hi: f64, m: usize| -> Vec<f64> {
            (0..m).map(|i| if m == 1 { lo } else { lo + (hi - lo) * i as f64 / (m - 1) as f64 }).collect()
        };
        Self::with_spectra(&spread(-3.0, -1.0, m1), &spread(0.5, 1.5, m2), true, seed)
    }

    /// Strict saddle at the origin: one positive leader curvature direction.
    pub fn strict_saddle(m1: usize, m2: usize, seed: u64) -> Result<Self> {
        let mut h = vec![-1.0; m1];
        h[0] = 1.0;
        let f: Vec<f64> = (0..m2).map(|i| 0.5 + i as f64 / m2.max(1) as f64).collect();
        Self::with_spectra(&h, &f, false, seed)
    }

    /// `R = −A⁻¹B`, the slope of the best response.
    pub fn response_slope(&self) -> DMatrix<f64> {
        -(&self.a_inv * &self.b)
    }

    pub fn best_response(&self, x1: &DVector<f64>) -> DVector<f64> {
        -(&self.a_inv * (&self.b * x1 + &self.a2))
    }

    /// `d²/dx₁² f₁(x₁, x₂*(x₁))`.
    pub fn leader_hessian(&self) -> DMatrix<f64> {
        let r = self.response_slope();
        &self.a1 + &self.b1 * &r + r.transpose() * self.b1.transpose() + r.transpose() * &self.c1 * &r
    }

    /// `f₁` evaluated along the best response.
    pub fn leader_value_along_response(&self, x1: &DVector<f64>) -> f64 {
        let x2 = self.best_response(x1);
        0.5 * x1.dot(&(&self.a1 * x1))
            + x1.dot(&(&self.b1 * &x2))
            + 0.5 * x2.dot(&(&self.c1 * &x2))
            + self.l1.dot(x1)
            + self.l2.dot(&x2)
    }

    /// Analytic equilibrium `(x₁*, x₂*)`; `None` if the leader curvature is singular.
    pub fn equilibrium(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let r = self.response_slope();
        let r0 = -(&self.a_inv * &self.a2);
        let lin = &self.b1 * &r0 + &self.l1 + r.transpose() * (&self.c1 * &r0 + &self.l2);
        let x1 = -self.leader_hessian().lu().solve(&lin)?;
        let x2 = self.best_response(&x1);
        Some((x1, x2))
    }

    fn d1f1(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        &self.a1 * x1 + &self.b1 * x2 + &self.l1
    }

    fn d2f1(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        self.b1.transpose() * x1 + &self.c1 * x2 + &self.l2
    }
}

impl StackelbergGame for QuadraticGame {
    fn leader_dim(&self) -> usize {
        self.a1.nrows()
    }

    fn follower_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `D₁f₁ − Bᵀ A⁻¹ D₂f₁`.
    fn total_derivative(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.d1f1(x1, x2) - self.b.transpose() * (&self.a_inv * self.d2f1(x1, x2)))
    }

    fn follower_gradient(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x2 + &self.b * x1 + &self.a2)
    }

    fn follower_hessian(&self, _: &DVector<f64>, _: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.a.clone())
    }

    fn follower_cross(&self, _: &DVector<f64>, _: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.b.clone())
    }
}

/// Iterates of the stochastic game dynamics, including the start.
#[derive(Debug, Clone, PartialEq)]
pub struct GameTrajectory {
    pub x1: Vec<DVector<f64>>,
    pub x2: Vec<DVector<f64>>,
}

impl GameTrajectory {
    pub fn last(&self) -> (&DVector<f64>, &DVector<f64>) {
        (self.x1.last().unwrap(), self.x2.last().unwrap())
    }

    /// Mean of the final `frac` of the iterates.
    pub fn tail_average(&self, frac: f64) -> (DVector<f64>, DVector<f64>) {
        let len = self.x1.len();
        let start = len - ((len as f64 * frac).ceil() as usize).clamp(1, len);
        let k = (len - start) as f64;
        let s1 = self.x1[start..].iter().fold(DVector::zeros(self.x1[0].len()), |acc, x| acc + x);
        let s2 = self.x2[start..].iter().fold(DVector::zeros(self.x2[0].len()), |acc, x| acc + x);
        (s1 / k, s2 / k)
    }
}

/// `x₁ ← x₁ + γ₁(DJ + w₁)`, `x₂ ← x₂ − γ₂(D₂f₂ + w₂)` with Gaussian noise of
/// standard deviation `noise_std` per coordinate.
pub fn run_stackelberg_dynamics<G: StackelbergGame + ?Sized>(
    game: &G,
    schedules: &Schedules,
    start: (DVector<f64>, DVector<f64>),
    iterations: usize,
    noise_std: f64,
    seed: u64,
) -> Result<GameTrajectory> {
    schedules.validate()?;
    if !(noise_std >= 0.0) {
        return Err(Error::Input(format!("noise_std must be ≥ 0, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x1, mut x2) = start;
    let mut traj = GameTrajectory { x1: vec![x1.clone()], x2: vec![x2.clone()] };
    traj.x1.reserve(iterations);
    traj.x2.reserve(iterations);
    for k in 0..iterations {
        let (g1, g2) = schedules.at(k);
        let mut d1 = game.total_derivative(&x1, &x2)?;
        let mut d2 = game.follower_gradient(&x1, &x2)?;
        if noise_std > 0.0 {
            d1.iter_mut().for_each(|v| *v += noise_std * gauss(&mut rng));
            d2.iter_mut().for_each(|v| *v += noise_std * gauss(&mut rng));
        }
        x1.axpy(g1, &d1, 1.0);
        x2.axpy(-g2, &d2, 1.0);
        let norm = (x1.norm_squared() + x2.norm_squared()).sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            let last = x1.iter().chain(x2.iter()).cloned().collect();
            return Err(Error::Divergence { step: k + 1, norm, last });
        }
        traj.x1.push(x1.clone());
        traj.x2.push(x2.clone());
    }
    Ok(traj)
}

/// Stochastic dynamics on a quadratic game using its analytic total derivative.
pub fn run_quadratic_game(
    game: &QuadraticGame,
    schedules: &Schedules,
    start: (DVector<f64>, DVector<f64>),
    iterations: usize,
    noise_std: f64,
    seed: u64,
) -> Result<GameTrajectory> {
    run_stackelberg_dynamics(game, schedules, start, iterations, noise_std, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_size_examples() {
        let cfg = LearnerConfig::default();
        assert_eq!(step_sizes(0, &cfg), (0.5, 1.0));
        let (g1, _) = step_sizes(99, &cfg);
        assert!((g1 - 0.5 / 100f64.powf(0.9)).abs() < 1e-15);
        let (a, b) = step_sizes(1_000_000, &cfg);
        assert!(a / b < 10f64.powf(-(0.9 - 0.6) * 6.0 + 1.0));
    }

    #[test]
    fn ratio_strictly_decreasing() {
        let s = Schedules::default();
        let mut prev = f64::INFINITY;
        for k in 0..10_000 {
            let (a, b) = s.at(k);
            assert!(a / b < prev);
            prev = a / b;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedules { a1: 0.6, a2: 0.9, ..Schedules::default() }.validate().is_err());
        assert!(Schedules { a1: 0.5, ..Schedules::default() }.validate().is_err());
        assert!(Schedules { a1: 1.1, ..Schedules::default() }.validate().is_err());
        assert!(Schedules { c2: 0.0, ..Schedules::default() }.validate().is_err());
        assert!(Schedules::default().validate().is_ok());
    }

    #[test]
    fn total_derivative_is_gradient_along_best_response() {
        for seed in 0..5 {
            let g = QuadraticGame::random_stable(3, 4, seed).unwrap();
            let x1 = DVector::from_fn(3, |i, _| 0.3 * i as f64 - 0.2);
            let x2 = g.best_response(&x1);
            let td = g.total_derivative(&x1, &x2).unwrap();
            let h = 1e-4;
            for j in 0..3 {
                let mut p = x1.clone();
                p[j] += h;
                let mut m = x1.clone();
                m[j] -= h;
                let fd = (g.leader_value_along_response(&p) - g.leader_value_along_response(&m)) / (2.0 * h);
                assert!((fd - td[j]).abs() <= 1e-8 * td[j].abs().max(1.0), "{fd} vs {}", td[j]);
            }
        }
    }

    #[test]
    fn designed_spectra() {
        let g = QuadraticGame::random_stable(3, 2, 1).unwrap();
        let e = g.leader_hessian().symmetric_eigenvalues();
        let mut e: Vec<f64> = e.iter().cloned().collect();
        e.sort_by(f64::total_cmp);
        assert!((e[0] + 3.0).abs() < 1e-10 && (e[2] + 1.0).abs() < 1e-10);
        let s = QuadraticGame::strict_saddle(2, 2, 1).unwrap();
        let (x1, x2) = s.equilibrium().unwrap();
        assert!(x1.norm() < 1e-14 && x2.norm() < 1e-14);
        assert!(s.leader_hessian().symmetric_eigenvalues().max() > 0.5);
    }

    #[test]
    fn fixed_point_without_noise() {
        let g = QuadraticGame::random_stable(2, 3, 4).unwrap();
        let (x1, x2) = g.equilibrium().unwrap();
        let traj = run_quadratic_game(&g, &Schedules::default(), (x1.clone(), x2.clone()), 1000, 0.0, 0).unwrap();
        let (a, b) = traj.last();
        assert!((a - &x1).norm() < 1e-12 && (b - &x2).norm() < 1e-12);
    }

    #[test]
    fn dse_at_equilibrium_and_elsewhere() {
        let g = QuadraticGame::random_stable(2, 3, 5).unwrap();
        let (x1, x2) = g.equilibrium().unwrap();
        let tol = DseTolerances::default();
        let r = dse_check(&g, &x1, &x2, &tol).unwrap();
        assert!(r.is_dse, "{r:?}");
        assert!(r.grad_norm_leader <= 1e-6 && r.grad_norm_follower <= 1e-6);
        assert_eq!(r.j_s_eigenvalues.len(), 5);
        let off = dse_check(&g, &(&x1 + DVector::from_element(2, 0.5)), &x2, &tol).unwrap();
        assert!(!off.is_dse && off.grad_norm_leader > tol.tol_g);
        let s = QuadraticGame::strict_saddle(2, 2, 5).unwrap();
        let z1 = DVector::zeros(2);
        let z2 = DVector::zeros(2);
        let r = dse_check(&s, &z1, &z2, &tol).unwrap();
        assert!(r.grad_norm_leader < 1e-12 && r.grad_norm_follower < 1e-12);
        assert!(!r.is_dse && r.leader_curvature_max_eig > 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let g = QuadraticGame::with_spectra(&[5.0], &[1.0], true, 2).unwrap();
        let s = Schedules { c1: 1.0, a1: 0.9, c2: 1.0, a2: 0.6 };
        let err = run_quadratic_game(&g, &s, (DVector::from_element(1, 1.0), DVector::zeros(1)), 100_000, 0.0, 0)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
