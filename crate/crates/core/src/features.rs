//! Feature maps and the linear value / policy classes built on top of them.
//!
//! Every feature vector is normalized so that `‖φ(s,a)‖₂ ≤ 1` on the declared
//! domain. States (and continuous actions) are clamped to their declared box
//! and mapped affinely onto `[-1, 1]` before the basis is evaluated.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Largest supported discrete action set.
pub const MAX_DISCRETE_ACTIONS: usize = 32;

/// Number of common-random-number draws used for continuous-action expectations.
pub const DEFAULT_ACTION_SAMPLES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn discrete(n: usize) -> Result<Self> {
        if !(2..=MAX_DISCRETE_ACTIONS).contains(&n) {
            return Err(Error::Input(format!(
                "discrete action count must be in [2, {MAX_DISCRETE_ACTIONS}], got {n}"
            )));
        }
        Ok(ActionSpace::Discrete(n))
    }

    pub fn boxed(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.is_empty() || low.len() != high.len() {
            return Err(Error::Input("box bounds must be nonempty and equal length".into()));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h)) {
            return Err(Error::Input("box lower bounds must be < upper bounds".into()));
        }
        Ok(ActionSpace::Box { low, high })
    }

    /// Number of discrete actions, or the dimension of a continuous action.
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Polynomial { degree: usize },
    RandomFourier { count: usize, bandwidth: f64, seed: u64 },
}

#[derive(Debug, Clone)]
enum Basis {
    /// Multi-indices of all monomials of total degree ≤ d, graded order.
    Monomials(Vec<Vec<u32>>),
    /// Frequencies and phases of cos(w·z + b).
    Fourier { freqs: Vec<Vec<f64>>, phases: Vec<f64> },
}

/// Normalized feature map `φ(s, a) ∈ R^p`.
///
/// Discrete action spaces use a block one-hot layout: `|A|` blocks of a state
/// basis, only block `a` nonzero. Continuous action spaces evaluate the basis
/// on the concatenated input `(s, a)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    kind: FeatureKind,
    state_dim: usize,
    action_space: ActionSpace,
    state_low: Vec<f64>,
    state_high: Vec<f64>,
    basis: Basis,
    block_dim: usize,
    output_dim: usize,
    scale: f64,
}

fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(dim: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim {
            out.push(prefix.clone());
            return;
        }
        for e in (0..=left).rev() {
            prefix.push(e);
            rec(dim, left - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        let mut level = Vec::new();
        let mut prefix = Vec::with_capacity(dim);
        rec(dim, total, &mut prefix, &mut level);
        level.retain(|e| e.iter().sum::<u32>() == total);
        out.extend(level);
    }
    out
}

impl FeatureMap {
    pub fn polynomial(
        degree: usize,
        state_low: Vec<f64>,
        state_high: Vec<f64>,
        action_space: ActionSpace,
    ) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Input("polynomial degree must be ≥ 1".into()));
        }
        Self::build(FeatureKind::Polynomial { degree }, state_low, state_high, action_space)
    }

    pub fn random_fourier(
        count: usize,
        bandwidth: f64,
        seed: u64,
        state_low: Vec<f64>,
        state_high: Vec<f64>,
        action_space: ActionSpace,
    ) -> Result<Self> {
        if count == 0 || !(bandwidth > 0.0) {
            return Err(Error::Input("random Fourier features need count ≥ 1 and bandwidth > 0".into()));
        }
        Self::build(
            FeatureKind::RandomFourier { count, bandwidth, seed },
            state_low,
            state_high,
            action_space,
        )
    }

    fn build(
        kind: FeatureKind,
        state_low: Vec<f64>,
        state_high: Vec<f64>,
        action_space: ActionSpace,
    ) -> Result<Self> {
        let state_dim = state_low.len();
        if state_dim == 0 || state_high.len() != state_dim {
            return Err(Error::Input("state box must be nonempty with matching bounds".into()));
        }
        if state_low.iter().zip(&state_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Input("state box lower bounds must be < upper bounds".into()));
        }
        // Re-validate through the constructors.
        let action_space = match action_space {
            ActionSpace::Discrete(n) => ActionSpace::discrete(n)?,
            ActionSpace::Box { low, high } => ActionSpace::boxed(low, high)?,
        };
        let input_dim = match &action_space {
            ActionSpace::Discrete(_) => state_dim,
            ActionSpace::Box { low, .. } => state_dim + low.len(),
        };
        let (basis, block_dim, scale) = match &kind {
            FeatureKind::Polynomial { degree } => {
                let exps = monomial_exponents(input_dim, *degree);
                let b = exps.len();
                // Every monomial is bounded by 1 on [-1, 1]^d with equality at the corners.
                (Basis::Monomials(exps), b, (b as f64).sqrt())
            }
            FeatureKind::RandomFourier { count, bandwidth, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let freqs = (0..*count)
                    .map(|_| {
                        (0..input_dim)
                            .map(|_| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                z / bandwidth
                            })
                            .collect()
                    })
                    .collect();
                let phases = (0..*count)
                    .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                    .collect();
                (Basis::Fourier { freqs, phases }, *count, (*count as f64).sqrt())
            }
        };
        let output_dim = match &action_space {
            ActionSpace::Discrete(n) => n * block_dim,
            ActionSpace::Box { .. } => block_dim,
        };
        Ok(FeatureMap {
            kind,
            state_dim,
            action_space,
            state_low,
            state_high,
            basis,
            block_dim,
            output_dim,
            scale,
        })
    }

    pub fn kind(&self) -> &FeatureKind {
        &self.kind
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    pub fn dim(&self) -> usize {
        self.output_dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn state_bounds(&self) -> (&[f64], &[f64]) {
        (&self.state_low, &self.state_high)
    }

    fn check(&self, s: &[f64], a: &Action) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::Input(format!(
                "state has dimension {}, expected {}",
                s.len(),
                self.state_dim
            )));
        }
        match (&self.action_space, a) {
            (ActionSpace::Discrete(n), Action::Discrete(i)) if i < n => Ok(()),
            (ActionSpace::Box { low, .. }, Action::Continuous(v)) if v.len() == low.len() => Ok(()),
            _ => Err(Error::Input(format!("action {a:?} outside {:?}", self.action_space))),
        }
    }

    /// Feature vector with domain checks.
    pub fn features(&self, s: &[f64], a: &Action) -> Result<DVector<f64>> {
        self.check(s, a)?;
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite state".into()));
        }
        Ok(self.eval(s, a))
    }

    /// Feature vector without domain checks; callers guarantee dimensions.
    pub fn eval(&self, s: &[f64], a: &Action) -> DVector<f64> {
        let mut out = DVector::zeros(self.output_dim);
        match a {
            Action::Discrete(i) => {
                let z = self.normalize_state(s);
                let off = i * self.block_dim;
                self.basis_into(&z, &mut out.as_mut_slice()[off..off + self.block_dim]);
            }
            Action::Continuous(v) => {
                let z = self.normalize_joint(s, v).0;
                self.basis_into(&z, out.as_mut_slice());
            }
        }
        out /= self.scale;
        out
    }

    /// Jacobian `∂φ(s,a)/∂a` (p × action_dim) for continuous actions.
    /// Clamped coordinates have zero derivative.
    pub fn action_jacobian(&self, s: &[f64], a: &[f64]) -> DMatrix<f64> {
        let ActionSpace::Box { low, high } = &self.action_space else {
            panic!("action_jacobian called on a discrete feature map");
        };
        let (z, inside) = self.normalize_joint(s, a);
        let ds = self.state_dim;
        let mut jac = DMatrix::zeros(self.output_dim, a.len());
        for r in 0..a.len() {
            if !inside[r] {
                continue;
            }
            let dz = 2.0 / (high[r] - low[r]) / self.scale;
            let k = ds + r;
            match &self.basis {
                Basis::Monomials(exps) => {
                    for (j, e) in exps.iter().enumerate() {
                        if e[k] == 0 {
                            continue;
                        }
                        let mut v = e[k] as f64;
                        for (m, &em) in e.iter().enumerate() {
                            let pow = if m == k { em - 1 } else { em };
                            v *= z[m].powi(pow as i32);
                        }
                        jac[(j, r)] = v * dz;
                    }
                }
                Basis::Fourier { freqs, phases } => {
                    for (j, (w, b)) in freqs.iter().zip(phases).enumerate() {
                        let arg: f64 = w.iter().zip(&z).map(|(wi, zi)| wi * zi).sum::<f64>() + b;
                        jac[(j, r)] = -arg.sin() * w[k] * dz;
                    }
                }
            }
        }
        jac
    }

    fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_low.iter().zip(&self.state_high))
            .map(|(x, (l, h))| (2.0 * x.clamp(*l, *h) - l - h) / (h - l))
            .collect()
    }

    fn normalize_joint(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let ActionSpace::Box { low, high } = &self.action_space else {
            unreachable!("continuous action on a discrete feature map");
        };
        let mut z = self.normalize_state(s);
        let mut inside = Vec::with_capacity(a.len());
        for ((x, l), h) in a.iter().zip(low).zip(high) {
            inside.push(*x > *l && *x < *h);
            z.push((2.0 * x.clamp(*l, *h) - l - h) / (h - l));
        }
        (z, inside)
    }

    fn basis_into(&self, z: &[f64], out: &mut [f64]) {
        match &self.basis {
            Basis::Monomials(exps) => {
                for (o, e) in out.iter_mut().zip(exps) {
                    *o = e
                        .iter()
                        .zip(z)
                        .filter(|(p, _)| **p > 0)
                        .map(|(p, x)| x.powi(*p as i32))
                        .product();
                }
            }
            Basis::Fourier { freqs, phases } => {
                for ((o, w), b) in out.iter_mut().zip(freqs).zip(phases) {
                    let arg: f64 = w.iter().zip(z).map(|(wi, zi)| wi * zi).sum::<f64>() + b;
                    *o = arg.cos();
                }
            }
        }
    }
}

/// Euclidean projection onto the ball of the given radius.
pub fn project_ball(v: &DVector<f64>, radius: f64) -> Result<DVector<f64>> {
    if !(radius > 0.0) {
        return Err(Error::Input(format!("projection radius must be > 0, got {radius}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite entry in projected vector".into()));
    }
    let norm = v.norm();
    // a rescaled vector may land a few ulps outside; leave it alone so the
    // projection is idempotent
    if norm <= radius * (1.0 + 4.0 * f64::EPSILON) {
        Ok(v.clone())
    } else {
        Ok(v * (radius / norm))
    }
}

/// Linear action-value function `q(s,a) = ⟨φ(s,a), θ⟩` with `‖θ‖ ≤ c_theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQ {
    pub theta: DVector<f64>,
    pub c_theta: f64,
    pub v_max: f64,
}

impl LinearQ {
    pub fn zeros(dim: usize, c_theta: f64, v_max: f64) -> Self {
        LinearQ { theta: DVector::zeros(dim), c_theta, v_max }
    }

    pub fn value(&self, map: &FeatureMap, s: &[f64], a: &Action) -> f64 {
        map.eval(s, a).dot(&self.theta)
    }

    /// `E_{a∼π(·|s)}[q(s, a)]`.
    pub fn expected(&self, map: &FeatureMap, policy: &Policy, s: &[f64]) -> f64 {
        policy.mean_features(map, s).dot(&self.theta)
    }

    pub fn projected(&self) -> Result<Self> {
        Ok(LinearQ { theta: project_ball(&self.theta, self.c_theta)?, ..self.clone() })
    }
}

/// `q_value` in free-function form.
pub fn q_value(q: &LinearQ, map: &FeatureMap, s: &[f64], a: &Action) -> f64 {
    q.value(map, s, a)
}

pub fn q_expected(q: &LinearQ, map: &FeatureMap, policy: &Policy, s: &[f64]) -> f64 {
    q.expected(map, policy, s)
}

/// Softmax policy `π(a|s) ∝ exp⟨φ(s,a), ω⟩` over a discrete action set.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    pub omega: DVector<f64>,
    pub c_omega: f64,
}

impl SoftmaxPolicy {
    pub fn new(omega: DVector<f64>, c_omega: f64) -> Self {
        SoftmaxPolicy { omega, c_omega }
    }

    fn n_actions(map: &FeatureMap) -> Result<usize> {
        match map.action_space() {
            ActionSpace::Discrete(n) => Ok(*n),
            ActionSpace::Box { .. } => {
                Err(Error::Unsupported("softmax policy requires a discrete action space".into()))
            }
        }
    }

    /// Action probabilities, computed with max-subtraction.
    pub fn probs(&self, map: &FeatureMap, s: &[f64]) -> Result<Vec<f64>> {
        let n = Self::n_actions(map)?;
        let feats: Vec<_> = (0..n).map(|a| map.eval(s, &Action::Discrete(a))).collect();
        Ok(self.probs_from(&feats))
    }

    fn probs_from(&self, feats: &[DVector<f64>]) -> Vec<f64> {
        let logits: Vec<f64> = feats.iter().map(|f| f.dot(&self.omega)).collect();
        softmax(&logits)
    }

    /// `∇_ω log π(a|s) = φ(s,a) − Σ_b π(b|s) φ(s,b)`.
    pub fn score(&self, map: &FeatureMap, s: &[f64], a: usize) -> Result<DVector<f64>> {
        let n = Self::n_actions(map)?;
        if a >= n {
            return Err(Error::Input(format!("action {a} out of range")));
        }
        let feats: Vec<_> = (0..n).map(|b| map.eval(s, &Action::Discrete(b))).collect();
        let probs = self.probs_from(&feats);
        let mut mean = DVector::zeros(map.dim());
        for (p, f) in probs.iter().zip(&feats) {
            mean.axpy(*p, f, 1.0);
        }
        Ok(&feats[a] - mean)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gaussian policy with mean linear in the raw state and a fixed diagonal
/// covariance. Expectations over actions are taken over a fixed set of
/// standard-normal draws (common random numbers), so they are smooth in the
/// mean parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearPolicy {
    /// `|A| × p_s` mean matrix.
    pub mean: DMatrix<f64>,
    pub log_std: DVector<f64>,
    pub c_omega: f64,
    /// Standard-normal draws, each of length `|A|`.
    pub crn: Vec<DVector<f64>>,
}

impl GaussianLinearPolicy {
    pub fn new(mean: DMatrix<f64>, log_std: DVector<f64>, c_omega: f64) -> Self {
        GaussianLinearPolicy { mean, log_std, c_omega, crn: Vec::new() }
    }

    pub fn with_crn<R: Rng + ?Sized>(mut self, rng: &mut R, count: usize) -> Self {
        self.refresh_crn(rng, count);
        self
    }

    pub fn refresh_crn<R: Rng + ?Sized>(&mut self, rng: &mut R, count: usize) {
        let d = self.mean.nrows();
        self.crn = (0..count)
            .map(|_| DVector::from_fn(d, |_, _| StandardNormal.sample(rng)))
            .collect();
    }

    pub fn action_mean(&self, s: &[f64]) -> DVector<f64> {
        &self.mean * DVector::from_column_slice(s)
    }

    pub fn std(&self) -> DVector<f64> {
        self.log_std.map(f64::exp)
    }

    /// Density of an (unclipped) action.
    pub fn density(&self, s: &[f64], a: &[f64]) -> f64 {
        let mu = self.action_mean(s);
        let mut log_p = 0.0;
        for i in 0..a.len() {
            let sd = self.log_std[i].exp();
            let z = (a[i] - mu[i]) / sd;
            log_p += -0.5 * z * z - sd.ln() - 0.5 * (std::f64::consts::TAU).ln();
        }
        log_p.exp()
    }

    fn crn_actions(&self, s: &[f64]) -> Vec<Vec<f64>> {
        let mu = self.action_mean(s);
        let sd = self.std();
        self.crn
            .iter()
            .map(|z| mu.iter().zip(sd.iter()).zip(z.iter()).map(|((m, d), e)| m + d * e).collect())
            .collect()
    }
}

/// Either policy class, with a flat parameter vector `ω` for the leader.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Softmax(SoftmaxPolicy),
    Gaussian(GaussianLinearPolicy),
}

impl Policy {
    pub fn param_dim(&self) -> usize {
        match self {
            Policy::Softmax(p) => p.omega.len(),
            Policy::Gaussian(p) => p.mean.len(),
        }
    }

    pub fn params(&self) -> DVector<f64> {
        match self {
            Policy::Softmax(p) => p.omega.clone(),
            // row-major: index r * p_s + c
            Policy::Gaussian(p) => DVector::from_iterator(p.mean.len(), p.mean.transpose().iter().cloned()),
        }
    }

    pub fn with_params(&self, omega: &DVector<f64>) -> Policy {
        match self {
            Policy::Softmax(p) => Policy::Softmax(SoftmaxPolicy { omega: omega.clone(), ..p.clone() }),
            Policy::Gaussian(p) => {
                let (r, c) = p.mean.shape();
                Policy::Gaussian(GaussianLinearPolicy {
                    mean: DMatrix::from_row_slice(r, c, omega.as_slice()),
                    ..p.clone()
                })
            }
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            Policy::Softmax(p) => p.c_omega,
            Policy::Gaussian(p) => p.c_omega,
        }
    }

    /// Expected feature vector `φ̄(s, π) = E_{a∼π(·|s)} φ(s, a)`.
    pub fn mean_features(&self, map: &FeatureMap, s: &[f64]) -> DVector<f64> {
        match self {
            Policy::Softmax(p) => {
                let n = map.action_space().dim();
                let feats: Vec<_> = (0..n).map(|a| map.eval(s, &Action::Discrete(a))).collect();
                let probs = p.probs_from(&feats);
                let mut mean = DVector::zeros(map.dim());
                for (pr, f) in probs.iter().zip(&feats) {
                    mean.axpy(*pr, f, 1.0);
                }
                mean
            }
            Policy::Gaussian(p) => {
                let acts = p.crn_actions(s);
                let mut mean = DVector::zeros(map.dim());
                for a in acts {
                    mean += map.eval(s, &Action::Continuous(a));
                }
                mean / p.crn.len().max(1) as f64
            }
        }
    }

    /// `φ̄(s, π)` together with its Jacobian in `ω` (p × param_dim).
    pub fn mean_features_jacobian(&self, map: &FeatureMap, s: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            Policy::Softmax(p) => {
                let n = map.action_space().dim();
                let feats: Vec<_> = (0..n).map(|a| map.eval(s, &Action::Discrete(a))).collect();
                let probs = p.probs_from(&feats);
                let mut mean = DVector::zeros(map.dim());
                for (pr, f) in probs.iter().zip(&feats) {
                    mean.axpy(*pr, f, 1.0);
                }
                // Σ_a π_a φ_a (φ_a − φ̄)ᵀ
                let mut jac = DMatrix::zeros(map.dim(), map.dim());
                for (pr, f) in probs.iter().zip(&feats) {
                    let centered = f - &mean;
                    jac.ger(*pr, f, &centered, 1.0);
                }
                (mean, jac)
            }
            Policy::Gaussian(p) => {
                let (na, ps) = p.mean.shape();
                let m = p.crn.len().max(1) as f64;
                let mut mean = DVector::zeros(map.dim());
                let mut dphi = DMatrix::zeros(map.dim(), na);
                for a in p.crn_actions(s) {
                    mean += map.eval(s, &Action::Continuous(a.clone()));
                    dphi += map.action_jacobian(s, &a);
                }
                mean /= m;
                dphi /= m;
                let mut jac = DMatrix::zeros(map.dim(), na * ps);
                for r in 0..na {
                    for c in 0..ps {
                        jac.column_mut(r * ps + c).axpy(s[c], &dphi.column(r), 0.0);
                    }
                }
                (mean, jac)
            }
        }
    }

    /// Draws an action; continuous actions are clipped to the box.
    pub fn sample<R: Rng + ?Sized>(&self, map: &FeatureMap, s: &[f64], rng: &mut R) -> Action {
        match self {
            Policy::Softmax(p) => {
                let probs = p.probs(map, s).expect("softmax policy on discrete map");
                Action::Discrete(sample_categorical(&probs, rng))
            }
            Policy::Gaussian(p) => {
                let mu = p.action_mean(s);
                let sd = p.std();
                let ActionSpace::Box { low, high } = map.action_space() else {
                    panic!("gaussian policy on a discrete feature map");
                };
                let a = (0..mu.len())
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(rng);
                        (mu[i] + sd[i] * z).clamp(low[i], high[i])
                    })
                    .collect();
                Action::Continuous(a)
            }
        }
    }

    /// Refreshes the common random numbers of a Gaussian policy; no-op otherwise.
    pub fn refresh_crn<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if let Policy::Gaussian(p) = self {
            let m = if p.crn.is_empty() { DEFAULT_ACTION_SAMPLES } else { p.crn.len() };
            p.refresh_crn(rng, m);
        }
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn sim_map(degree: usize) -> FeatureMap {
        FeatureMap::polynomial(degree, vec![-3.0, -3.0], vec![3.0, 3.0], ActionSpace::Discrete(2)).unwrap()
    }

    #[test]
    fn monomial_count_matches_binomial() {
        // C(d + k, k)
        assert_eq!(monomial_exponents(2, 2).len(), 6);
        assert_eq!(monomial_exponents(4, 2).len(), 15);
        assert_eq!(monomial_exponents(11, 2).len(), 78);
        assert_eq!(monomial_exponents(3, 3).len(), 20);
    }

    #[test]
    fn zero_state_degree_one_has_only_bias_entries() {
        let map = sim_map(1);
        let f = map.features(&[0.0, 0.0], &Action::Discrete(0)).unwrap();
        // block 0 = [1, s1, s2], block 1 = zeros
        let nonzero: Vec<usize> = (0..f.len()).filter(|&i| f[i] != 0.0).collect();
        assert_eq!(nonzero, vec![0]);
    }

    #[test]
    fn degree_two_monomials_by_hand() {
        // On the box [-1, 1]² the affine normalization is the identity.
        let map = FeatureMap::polynomial(2, vec![-1.0, -1.0], vec![1.0, 1.0], ActionSpace::Discrete(2)).unwrap();
        let f = map.features(&[1.0, 1.0], &Action::Discrete(1)).unwrap();
        // graded order: 1 | s1, s2 | s1², s1 s2, s2²; all equal to 1 at (1,1)
        let expected = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        for (i, e) in expected.iter().enumerate() {
            assert!(close(f[i], e / 6f64.sqrt(), 1e-15), "entry {i}");
        }
        assert!(close(f.norm(), 1.0, 1e-14));

        let g = map.features(&[0.5, -0.25], &Action::Discrete(0)).unwrap() * 6f64.sqrt();
        let hand = [1.0, 0.5, -0.25, 0.25, -0.125, 0.0625];
        for (i, h) in hand.iter().enumerate() {
            assert!(close(g[i], *h, 1e-14));
        }
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let map = sim_map(2);
        assert!(matches!(map.features(&[0.0], &Action::Discrete(0)), Err(Error::Input(_))));
        assert!(matches!(map.features(&[0.0, 0.0], &Action::Discrete(2)), Err(Error::Input(_))));
        assert!(matches!(
            map.features(&[0.0, 0.0], &Action::Continuous(vec![0.0])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn action_space_validation() {
        assert!(ActionSpace::discrete(1).is_err());
        assert!(ActionSpace::discrete(33).is_err());
        assert!(ActionSpace::boxed(vec![0.0], vec![0.0]).is_err());
        assert!(ActionSpace::boxed(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn q_value_basis_and_zero() {
        let map = sim_map(2);
        let s = [0.3, -1.2];
        let a = Action::Discrete(1);
        let f = map.eval(&s, &a);
        assert_eq!(LinearQ::zeros(map.dim(), 1.0, 1.0).value(&map, &s, &a), 0.0);
        for i in 0..map.dim() {
            let mut q = LinearQ::zeros(map.dim(), 1.0, 1.0);
            q.theta[i] = 1.0;
            assert_eq!(q.value(&map, &s, &a), f[i]);
        }
    }

    #[test]
    fn q_expected_uniform_and_point_mass() {
        let map = FeatureMap::polynomial(1, vec![-1.0], vec![1.0], ActionSpace::Discrete(2)).unwrap();
        // q(s,0) = 1, q(s,1) = 3 at s = 0 via the bias entries
        let scale = map.scale();
        let mut theta = DVector::zeros(4);
        theta[0] = 1.0 * scale;
        theta[2] = 3.0 * scale;
        let q = LinearQ { theta, c_theta: 10.0, v_max: 10.0 };
        let uniform = Policy::Softmax(SoftmaxPolicy::new(DVector::zeros(4), 100.0));
        assert!(close(q.expected(&map, &uniform, &[0.0]), 2.0, 1e-14));
        let mut omega = DVector::zeros(4);
        omega[2] = 1e4;
        let point = Policy::Softmax(SoftmaxPolicy::new(omega, 1e5));
        assert!(close(q.expected(&map, &point, &[0.0]), 3.0, 1e-12));
    }

    #[test]
    fn zero_omega_is_uniform() {
        let map = sim_map(2);
        let p = SoftmaxPolicy::new(DVector::zeros(map.dim()), 100.0);
        let probs = p.probs(&map, &[0.7, -2.0]).unwrap();
        assert_eq!(probs, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_continuous_space() {
        let map = FeatureMap::polynomial(
            1,
            vec![0.0],
            vec![1.0],
            ActionSpace::Box { low: vec![-1.0], high: vec![1.0] },
        )
        .unwrap();
        let p = SoftmaxPolicy::new(DVector::zeros(map.dim()), 1.0);
        assert!(matches!(p.probs(&map, &[0.5]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn shift_invariance_of_softmax() {
        // A feature identical across actions adds the same logit to every action.
        let logits = [0.3, -1.7, 2.2];
        let shifted: Vec<f64> = logits.iter().map(|l| l + 41.5).collect();
        let a = softmax(&logits);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn score_at_zero_omega_two_actions() {
        let map = sim_map(2);
        let p = SoftmaxPolicy::new(DVector::zeros(map.dim()), 100.0);
        let s = [1.1, -0.4];
        let f0 = map.eval(&s, &Action::Discrete(0));
        let f1 = map.eval(&s, &Action::Discrete(1));
        let expected = &f1 - (&f0 + &f1) * 0.5;
        let got = p.score(&map, &s, 1).unwrap();
        assert!((got - expected).norm() < 1e-15);
    }

    #[test]
    fn score_matches_finite_difference_of_log_prob() {
        let map = sim_map(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let omega = DVector::from_fn(map.dim(), |_, _| rng.random_range(-3.0..3.0));
            let s = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let p = SoftmaxPolicy::new(omega.clone(), 100.0);
            for a in 0..2 {
                let score = p.score(&map, &s, a).unwrap();
                let h = 1e-6;
                for i in 0..map.dim() {
                    let mut plus = omega.clone();
                    plus[i] += h;
                    let mut minus = omega.clone();
                    minus[i] -= h;
                    let lp = SoftmaxPolicy::new(plus, 100.0).probs(&map, &s).unwrap()[a].ln();
                    let lm = SoftmaxPolicy::new(minus, 100.0).probs(&map, &s).unwrap()[a].ln();
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - score[i]).abs() <= 1e-5 * score[i].abs().max(1e-3), "{fd} vs {}", score[i]);
                }
            }
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let map = sim_map(2);
        let mut omega = DVector::zeros(map.dim());
        omega[0] = 100.0 * map.scale();
        let p = SoftmaxPolicy::new(omega.clone(), 1e3);
        let probs = p.probs(&map, &[0.0, 0.0]).unwrap();
        assert!(probs.iter().all(|x| x.is_finite()));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let sc = p.score(&map, &[0.0, 0.0], 1).unwrap();
        assert!(sc.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn project_ball_examples() {
        let v = DVector::from_vec(vec![3.0, 4.0]);
        let p = project_ball(&v, 1.0).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(project_ball(&v, 10.0).unwrap(), v);
        assert!(project_ball(&v, 0.0).is_err());
        let bad = DVector::from_vec(vec![f64::NAN, 1.0]);
        assert!(matches!(project_ball(&bad, 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn gaussian_mean_feature_jacobian_matches_fd() {
        let space = ActionSpace::Box { low: vec![-5.0, -5.0], high: vec![5.0, 5.0] };
        let map = FeatureMap::polynomial(2, vec![0.0; 3], vec![1.5; 3], space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let pol = Policy::Gaussian(
            GaussianLinearPolicy::new(mean, DVector::from_element(2, -1.0), 100.0).with_crn(&mut rng, 8),
        );
        let s = [0.4, 1.2, 0.9];
        let (_, jac) = pol.mean_features_jacobian(&map, &s);
        let w = pol.params();
        let h = 1e-6;
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (pol.with_params(&wp).mean_features(&map, &s) - pol.with_params(&wm).mean_features(&map, &s))
                / (2.0 * h);
            assert!((fd - jac.column(j)).norm() < 1e-7, "column {j}");
        }
    }

    #[test]
    fn random_fourier_is_normalized_and_deterministic() {
        let map = FeatureMap::random_fourier(50, 0.7, 9, vec![-1.0; 2], vec![1.0; 2], ActionSpace::Discrete(3)).unwrap();
        let again = FeatureMap::random_fourier(50, 0.7, 9, vec![-1.0; 2], vec![1.0; 2], ActionSpace::Discrete(3)).unwrap();
        let f = map.eval(&[0.2, -0.9], &Action::Discrete(2));
        assert!(f.norm() <= 1.0);
        assert_eq!(f, again.eval(&[0.2, -0.9], &Action::Discrete(2)));
    }
}
