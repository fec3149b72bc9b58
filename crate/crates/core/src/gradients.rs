//! First- and second-order derivatives of the leader and follower objectives
//! for a linear value function, and the regularized total derivative.
//!
//! Notation for a batch of `n` transitions:
//! `φ_i = φ(s_i, a_i)`, `φ̄′_i = E_{a∼π(·|s′_i)} φ(s′_i, a)` (zero when absorbing),
//! `J′_i = ∂φ̄′_i/∂ω`, `u_i = γ φ̄′_i − φ_i`, `Δ_i = r_i + ⟨u_i, θ⟩`,
//! `w_i = Σ_{j≠i} K_ij Δ_j`, `c = mean_m φ̄(s⁰_m)`, `J_c = ∂c/∂ω`.
//! The kernel `K` already carries the factor `C_K²`.

use nalgebra::{DMatrix, DVector};

use crate::datasets::Transition;
use crate::error::{Error, Result};
use crate::features::{LinearQ, Policy};
use crate::kernel::gram;
use crate::objectives::Problem;

/// Smallest admissible eigenvalue of `H + βI`.
pub const MIN_EIGENVALUE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_pi_j: DVector<f64>,
    pub d_q_j: DVector<f64>,
    pub d_q_l: DVector<f64>,
    pub hess_q_l: DMatrix<f64>,
    pub d_pi_l: DVector<f64>,
    /// Rows index `ω`, columns index `θ`.
    pub cross_q_pi_l: DMatrix<f64>,
    pub total_dj: DVector<f64>,
    /// Tikhonov level used for `total_dj`.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// `None` selects `1e-3 · tr(H)/p + 1e-8` per call.
    pub beta: Option<f64>,
    pub solve_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { beta: None, solve_tol: 1e-8 }
    }
}

impl SolverConfig {
    pub fn fixed(beta: f64) -> Self {
        SolverConfig { beta: Some(beta), ..Self::default() }
    }

    pub fn beta_for(&self, h: &DMatrix<f64>) -> f64 {
        self.beta.unwrap_or_else(|| default_beta(h))
    }
}

pub fn default_beta(h: &DMatrix<f64>) -> f64 {
    1e-3 * h.trace() / h.nrows() as f64 + 1e-8
}

/// Initial-state terms `c` and `J_c`.
struct InitTerms {
    c: DVector<f64>,
    jc: DMatrix<f64>,
}

fn init_terms(policy: &Policy, pb: &Problem) -> InitTerms {
    let p = pb.map.dim();
    let d = policy.param_dim();
    let mut c = DVector::zeros(p);
    let mut jc = DMatrix::zeros(p, d);
    for s in pb.init {
        let (f, j) = policy.mean_features_jacobian(pb.map, s);
        c += f;
        jc += j;
    }
    let m = pb.init.len() as f64;
    InitTerms { c: c / m, jc: jc / m }
}

fn init_mean(policy: &Policy, pb: &Problem) -> DVector<f64> {
    let mut c = DVector::zeros(pb.map.dim());
    for s in pb.init {
        c += policy.mean_features(pb.map, s);
    }
    c / pb.init.len() as f64
}

/// Per-batch quantities.
struct BatchTerms {
    n: usize,
    /// `n × p`, row `i` is `u_iᵀ`.
    u: DMatrix<f64>,
    /// `C_K² K` without its diagonal.
    k_off: DMatrix<f64>,
    /// Full `C_K² K`.
    k: DMatrix<f64>,
    delta: DVector<f64>,
    w: DVector<f64>,
    /// `J′_i`, `None` for absorbing transitions.
    jac_next: Vec<Option<DMatrix<f64>>>,
}

fn batch_terms(q: &LinearQ, policy: &Policy, batch: &[Transition], pb: &Problem, with_jac: bool) -> Result<BatchTerms> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Input(format!("gradient estimates need n ≥ 2, got {n}")));
    }
    let p = pb.map.dim();
    let mut u = DMatrix::zeros(n, p);
    let mut points = Vec::with_capacity(n);
    let mut jac_next = Vec::with_capacity(n);
    for (i, t) in batch.iter().enumerate() {
        let phi = pb.map.eval(&t.s, &t.a);
        let mut ui = -&phi;
        if t.done {
            jac_next.push(None);
        } else if with_jac {
            let (fbar, j) = policy.mean_features_jacobian(pb.map, &t.s_next);
            ui.axpy(pb.gamma, &fbar, 1.0);
            jac_next.push(Some(j));
        } else {
            ui.axpy(pb.gamma, &policy.mean_features(pb.map, &t.s_next), 1.0);
            jac_next.push(None);
        }
        u.row_mut(i).copy_from(&ui.transpose());
        points.push(phi);
    }
    let ck2 = pb.kernel.c_k * pb.kernel.c_k;
    let k = gram(&pb.kernel, &points) * ck2;
    let mut k_off = k.clone();
    k_off.fill_diagonal(0.0);
    let r = DVector::from_iterator(n, batch.iter().map(|t| t.r));
    let delta = r + &u * &q.theta;
    let w = &k_off * &delta;
    Ok(BatchTerms { n, u, k_off, k, delta, w, jac_next })
}

fn n_u(n: usize) -> f64 {
    1.0 / (n * (n - 1)) as f64
}

/// `D_π J = J_cᵀ θ`, i.e. the average of `Σ_a π(a|s⁰) score(s⁰,a) q(s⁰,a)`
/// (reparameterized for Gaussian policies).
pub fn grad_pi_j(q: &LinearQ, policy: &Policy, pb: &Problem) -> DVector<f64> {
    init_terms(policy, pb).jc.transpose() * &q.theta
}

/// `D_q J = c`.
pub fn grad_q_j(policy: &Policy, pb: &Problem) -> DVector<f64> {
    init_mean(policy, pb)
}

/// `D_q 𝓛 = c + 2λ N_U Σ_i u_i w_i`.
pub fn grad_q_l(q: &LinearQ, policy: &Policy, batch: &[Transition], pb: &Problem) -> Result<DVector<f64>> {
    let bt = batch_terms(q, policy, batch, pb, false)?;
    Ok(grad_q_l_from(&init_mean(policy, pb), &bt, pb.lambda))
}

fn grad_q_l_from(c: &DVector<f64>, bt: &BatchTerms, lambda: f64) -> DVector<f64> {
    c + bt.u.transpose() * &bt.w * (2.0 * lambda * n_u(bt.n))
}

/// `D²_q 𝓛 ≈ (2λ/n²) Uᵀ K U` (diagonal pairs included, so the estimate is PSD).
pub fn hess_q_l(q: &LinearQ, policy: &Policy, batch: &[Transition], pb: &Problem) -> Result<DMatrix<f64>> {
    let bt = batch_terms(q, policy, batch, pb, false)?;
    Ok(hess_from(&bt, pb.lambda))
}

fn hess_from(bt: &BatchTerms, lambda: f64) -> DMatrix<f64> {
    let n = bt.n as f64;
    let h = bt.u.transpose() * &bt.k * &bt.u * (2.0 * lambda / (n * n));
    (&h + h.transpose()) * 0.5
}

/// `D_π 𝓛 = J_cᵀθ + 2λ N_U γ Σ_i (J′_iᵀθ) w_i`.
pub fn grad_pi_l(q: &LinearQ, policy: &Policy, batch: &[Transition], pb: &Problem) -> Result<DVector<f64>> {
    let it = init_terms(policy, pb);
    let bt = batch_terms(q, policy, batch, pb, true)?;
    Ok(grad_pi_l_from(q, &it, &bt, pb))
}

fn grad_pi_l_from(q: &LinearQ, it: &InitTerms, bt: &BatchTerms, pb: &Problem) -> DVector<f64> {
    let mut g = it.jc.transpose() * &q.theta;
    let scale = 2.0 * pb.lambda * n_u(bt.n) * pb.gamma;
    for (i, j) in bt.jac_next.iter().enumerate() {
        if let Some(j) = j {
            g.gemv_tr(scale * bt.w[i], j, &q.theta, 1.0);
        }
    }
    g
}

/// `D_θ(D_π 𝓛)`, a `d_ω × p` matrix:
/// `J_cᵀ + 2λ N_U γ Σ_i [w_i J′_iᵀ + (J′_iᵀθ)(Σ_{j≠i} K_ij u_j)ᵀ]`.
pub fn cross_grad(q: &LinearQ, policy: &Policy, batch: &[Transition], pb: &Problem) -> Result<DMatrix<f64>> {
    let it = init_terms(policy, pb);
    let bt = batch_terms(q, policy, batch, pb, true)?;
    Ok(cross_from(q, &it, &bt, pb))
}

fn cross_from(q: &LinearQ, it: &InitTerms, bt: &BatchTerms, pb: &Problem) -> DMatrix<f64> {
    let mut cross = it.jc.transpose();
    if pb.lambda == 0.0 || bt.jac_next.iter().all(Option::is_none) {
        return cross;
    }
    let scale = 2.0 * pb.lambda * n_u(bt.n) * pb.gamma;
    let v = &bt.k_off * &bt.u;
    for (i, j) in bt.jac_next.iter().enumerate() {
        if let Some(j) = j {
            cross += j.transpose() * (scale * bt.w[i]);
            let jt_theta = j.tr_mul(&q.theta);
            cross.ger(scale, &jt_theta, &v.row(i).transpose(), 1.0);
        }
    }
    cross
}

/// Solves `(H + βI) x = v` by Cholesky factorization.
pub fn regularized_solve(h: &DMatrix<f64>, beta: f64, v: &DVector<f64>, solve_tol: f64) -> Result<DVector<f64>> {
    let p = h.nrows();
    if h.ncols() != p || v.len() != p {
        return Err(Error::Input("regularized_solve: dimension mismatch".into()));
    }
    if !(beta >= 0.0) {
        return Err(Error::Input(format!("beta must be ≥ 0, got {beta}")));
    }
    let mut a = h.clone();
    for i in 0..p {
        a[(i, i)] += beta;
    }
    let singular = |a: &DMatrix<f64>| Error::Singular { min_eig: a.clone().symmetric_eigenvalues().min(), beta };
    let Some(chol) = a.clone().cholesky() else {
        return Err(singular(&a));
    };
    if chol.l_dirty().diagonal().iter().any(|d| d * d <= MIN_EIGENVALUE) {
        return Err(singular(&a));
    }
    let x = chol.solve(v);
    let resid = (&a * &x - v).norm();
    if !(resid <= solve_tol * v.norm().max(f64::MIN_POSITIVE)) {
        return Err(singular(&a));
    }
    Ok(x)
}

/// `DJ = D_π J − D_{q,π}𝓛 (D²_q𝓛 + βI)⁻¹ D_q J`.
pub fn total_derivative(
    q: &LinearQ,
    policy: &Policy,
    batch: &[Transition],
    pb: &Problem,
    solver: &SolverConfig,
) -> Result<DVector<f64>> {
    Ok(gradient_bundle(q, policy, batch, pb, solver)?.total_dj)
}

pub fn total_from_parts(
    d_pi_j: &DVector<f64>,
    cross: &DMatrix<f64>,
    hess: &DMatrix<f64>,
    d_q_j: &DVector<f64>,
    beta: f64,
    solve_tol: f64,
) -> Result<DVector<f64>> {
    let x = regularized_solve(hess, beta, d_q_j, solve_tol)?;
    Ok(d_pi_j - cross * x)
}

/// All derivatives on one batch, sharing the intermediate terms.
pub fn gradient_bundle(
    q: &LinearQ,
    policy: &Policy,
    batch: &[Transition],
    pb: &Problem,
    solver: &SolverConfig,
) -> Result<GradientBundle> {
    let it = init_terms(policy, pb);
    let bt = batch_terms(q, policy, batch, pb, true)?;
    let d_pi_j = it.jc.transpose() * &q.theta;
    let d_q_j = it.c.clone();
    let d_q_l = grad_q_l_from(&it.c, &bt, pb.lambda);
    let hess_q_l = hess_from(&bt, pb.lambda);
    let d_pi_l = grad_pi_l_from(q, &it, &bt, pb);
    let cross_q_pi_l = cross_from(q, &it, &bt, pb);
    let beta = solver.beta_for(&hess_q_l);
    let total_dj = total_from_parts(&d_pi_j, &cross_q_pi_l, &hess_q_l, &d_q_j, beta, solver.solve_tol)?;
    let finite = [&d_pi_j, &d_q_j, &d_q_l, &d_pi_l, &total_dj].iter().all(|v| v.iter().all(|x| x.is_finite()))
        && hess_q_l.iter().chain(cross_q_pi_l.iter()).all(|x| x.is_finite());
    if !finite {
        return Err(Error::Numeric("non-finite gradient entry".into()));
    }
    Ok(GradientBundle { d_pi_j, d_q_j, d_q_l, hess_q_l, d_pi_l, cross_q_pi_l, total_dj, beta })
}

/// Residual vector `Δ` of a batch, exposed for diagnostics.
pub fn batch_residuals(q: &LinearQ, policy: &Policy, batch: &[Transition], pb: &Problem) -> Result<DVector<f64>> {
    Ok(batch_terms(q, policy, batch, pb, false)?.delta)
}
