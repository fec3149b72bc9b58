//! Leader value, kernel Bellman loss and follower loss.

use nalgebra::{DMatrix, DVector};

use crate::datasets::Transition;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, LinearQ, Policy};
use crate::kernel::{gram, KernelSpec};

/// Fixed ingredients shared by the objectives and their derivatives.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub map: &'a FeatureMap,
    pub kernel: KernelSpec,
    pub gamma: f64,
    pub lambda: f64,
    pub init: &'a [Vec<f64>],
}

/// Residuals of a batch with the points they are paired on.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanResidualBatch {
    pub residuals: Vec<f64>,
    pub points: Vec<DVector<f64>>,
}

/// `Δ = r + γ q(s′, π) − q(s, a)`; absorbing transitions drop the bootstrap.
pub fn bellman_residual(q: &LinearQ, map: &FeatureMap, policy: &Policy, t: &Transition, gamma: f64) -> f64 {
    let next = if t.done { 0.0 } else { q.expected(map, policy, &t.s_next) };
    t.r + gamma * next - q.value(map, &t.s, &t.a)
}

pub fn residual_batch(
    q: &LinearQ,
    map: &FeatureMap,
    policy: &Policy,
    batch: &[Transition],
    gamma: f64,
) -> BellmanResidualBatch {
    BellmanResidualBatch {
        residuals: batch.iter().map(|t| bellman_residual(q, map, policy, t, gamma)).collect(),
        points: batch.iter().map(|t| map.eval(&t.s, &t.a)).collect(),
    }
}

/// `(1/(n(n−1))) Σ_{i≠j} Δ_i K_ij Δ_j`.
///
/// Pair terms are summed in sorted order so the value does not depend on the
/// order of the rows.
pub fn u_statistic(delta: &[f64], k: &DMatrix<f64>) -> Result<f64> {
    let n = delta.len();
    if n < 2 {
        return Err(Error::Input(format!("U-statistic needs n ≥ 2, got {n}")));
    }
    let mut terms = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            terms.push(k[(i, j)] * (delta[i] * delta[j]));
        }
    }
    terms.sort_unstable_by(|a, b| a.total_cmp(b));
    let sum: f64 = terms.iter().sum();
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

/// Kernel Bellman loss `C_K² · U_n(Δ K Δ)`.
pub fn kernel_bellman_loss(
    q: &LinearQ,
    map: &FeatureMap,
    policy: &Policy,
    batch: &[Transition],
    spec: &KernelSpec,
    gamma: f64,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Input(format!("kernel Bellman loss needs n ≥ 2, got {}", batch.len())));
    }
    let rb = residual_batch(q, map, policy, batch, gamma);
    let k = gram(spec, &rb.points);
    Ok(spec.c_k * spec.c_k * u_statistic(&rb.residuals, &k)?)
}

/// `J(π, q) = (1/M) Σ_m q(s⁰_m, π)`.
pub fn leader_value(q: &LinearQ, map: &FeatureMap, policy: &Policy, init: &[Vec<f64>]) -> f64 {
    let total: f64 = init.iter().map(|s| q.expected(map, policy, s)).sum();
    total / init.len() as f64
}

/// `J(π, q) + λ · kernel_bellman_loss`.
pub fn follower_loss(q: &LinearQ, policy: &Policy, batch: &[Transition], pb: &Problem) -> Result<f64> {
    if pb.lambda < 0.0 {
        return Err(Error::Input(format!("lambda must be ≥ 0, got {}", pb.lambda)));
    }
    let loss = kernel_bellman_loss(q, pb.map, policy, batch, &pb.kernel, pb.gamma)?;
    Ok(leader_value(q, pb.map, policy, pb.init) + pb.lambda * loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Action, ActionSpace, SoftmaxPolicy};

    fn map() -> FeatureMap {
        FeatureMap::polynomial(2, vec![-2.0; 2], vec![2.0; 2], ActionSpace::Discrete(2)).unwrap()
    }

    fn transition(s: [f64; 2], a: usize, r: f64, s2: [f64; 2], done: bool) -> Transition {
        Transition { s: s.to_vec(), a: Action::Discrete(a), r, s_next: s2.to_vec(), done }
    }

    #[test]
    fn residual_special_cases() {
        let m = map();
        let pol = Policy::Softmax(SoftmaxPolicy::new(DVector::zeros(m.dim()), 100.0));
        let t = transition([0.5, -0.3], 1, 2.5, [1.0, 1.0], false);
        let zero = LinearQ::zeros(m.dim(), 10.0, 10.0);
        assert_eq!(bellman_residual(&zero, &m, &pol, &t, 0.9), 2.5);
        let q = LinearQ { theta: DVector::from_fn(m.dim(), |i, _| i as f64 * 0.3 - 1.0), c_theta: 10.0, v_max: 10.0 };
        let expected = 2.5 - q.value(&m, &t.s, &t.a);
        assert!((bellman_residual(&q, &m, &pol, &t, 0.0) - expected).abs() < 1e-15);
        let terminal = Transition { done: true, ..t };
        assert!((bellman_residual(&q, &m, &pol, &terminal, 0.9) - expected).abs() < 1e-15);
    }

    #[test]
    fn two_point_u_statistic() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert_eq!(u_statistic(&[1.0, 2.0], &k).unwrap(), 1.0);
        assert!(u_statistic(&[1.0], &DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn constant_residuals_with_flat_kernel() {
        let m = map();
        let pol = Policy::Softmax(SoftmaxPolicy::new(DVector::zeros(m.dim()), 100.0));
        let batch: Vec<_> = (0..6).map(|i| transition([i as f64 * 0.2, -0.1], i % 2, 1.5, [0.0, 0.0], true)).collect();
        let spec = KernelSpec::rbf(1e9).unwrap();
        let zero = LinearQ::zeros(m.dim(), 1.0, 1.0);
        let v = kernel_bellman_loss(&zero, &m, &pol, &batch, &spec, 0.95).unwrap();
        assert!((v - 2.25).abs() < 1e-9);
    }

    #[test]
    fn leader_and_follower_compose() {
        let m = map();
        let pol = Policy::Softmax(SoftmaxPolicy::new(DVector::from_fn(m.dim(), |i, _| (i as f64).sin()), 100.0));
        let q = LinearQ { theta: DVector::from_fn(m.dim(), |i, _| (i as f64).cos()), c_theta: 10.0, v_max: 10.0 };
        let init = vec![vec![0.1, 0.2], vec![-1.0, 0.7], vec![1.5, -1.5]];
        let direct: f64 = init.iter().map(|s| q.expected(&m, &pol, s)).sum::<f64>() / 3.0;
        assert!((leader_value(&q, &m, &pol, &init) - direct).abs() < 1e-12);
        assert_eq!(leader_value(&LinearQ::zeros(m.dim(), 1.0, 1.0), &m, &pol, &init), 0.0);

        let batch: Vec<_> = (0..5)
            .map(|i| transition([i as f64 * 0.3 - 0.6, 0.4], i % 2, i as f64, [0.2, i as f64 * 0.1], i == 4))
            .collect();
        let spec = KernelSpec::rbf(0.7).unwrap();
        let pb = Problem { map: &m, kernel: spec, gamma: 0.9, lambda: 0.0, init: &init };
        assert_eq!(follower_loss(&q, &pol, &batch, &pb).unwrap(), leader_value(&q, &m, &pol, &init));
        let pb = Problem { lambda: 0.3, ..pb };
        let composed = leader_value(&q, &m, &pol, &init) + 0.3 * kernel_bellman_loss(&q, &m, &pol, &batch, &spec, 0.9).unwrap();
        assert!((follower_loss(&q, &pol, &batch, &pb).unwrap() - composed).abs() < 1e-12);
    }
}
