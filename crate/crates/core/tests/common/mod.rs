//! Shared fixtures for the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stackelberg::datasets::Transition;
use stackelberg::features::{Action, ActionSpace, FeatureMap, GaussianLinearPolicy, LinearQ, Policy, SoftmaxPolicy};
use stackelberg::kernel::{median_bandwidth, KernelSpec};
use stackelberg::objectives::Problem;

pub struct Instance {
    pub map: FeatureMap,
    pub policy: Policy,
    pub q: LinearQ,
    pub batch: Vec<Transition>,
    pub init: Vec<Vec<f64>>,
    pub kernel: KernelSpec,
    pub gamma: f64,
    pub lambda: f64,
}

impl Instance {
    pub fn problem(&self) -> Problem<'_> {
        Problem { map: &self.map, kernel: self.kernel, gamma: self.gamma, lambda: self.lambda, init: &self.init }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}

fn state(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-0.9..0.9)).collect()
}

fn finish(mut rng: ChaCha8Rng, map: FeatureMap, policy: Policy, n: usize, ds: usize, action: impl Fn(&mut ChaCha8Rng) -> Action) -> Instance {
    let batch: Vec<Transition> = (0..n)
        .map(|_| Transition {
            s: state(&mut rng, ds),
            a: action(&mut rng),
            r: rng.random_range(-1.0..1.0),
            s_next: state(&mut rng, ds),
            done: rng.random::<f64>() < 0.2,
        })
        .collect();
    let init = (0..4).map(|_| state(&mut rng, ds)).collect();
    let points: Vec<_> = batch.iter().map(|t| map.eval(&t.s, &t.a)).collect();
    let bw = median_bandwidth(&points, 0).unwrap();
    let p = map.dim();
    let q = LinearQ { theta: random_vec(&mut rng, p, 2.0), c_theta: 100.0, v_max: 100.0 };
    Instance {
        map,
        policy,
        q,
        batch,
        init,
        kernel: KernelSpec::rbf(bw).unwrap(),
        gamma: 0.9,
        lambda: rng.random_range(0.1..1.0),
    }
}

/// Softmax policy, two actions, three state coordinates, `p = 8`.
pub fn softmax_instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = FeatureMap::polynomial(1, vec![-1.0; 3], vec![1.0; 3], ActionSpace::Discrete(2)).unwrap();
    let policy = Policy::Softmax(SoftmaxPolicy::new(random_vec(&mut rng, map.dim(), 3.0), 100.0));
    finish(rng, map, policy, n, 3, |r| Action::Discrete(r.random_range(0..2)))
}

/// Gaussian policy, two action coordinates, three state coordinates, `p = 8`
/// random Fourier features.
pub fn gaussian_instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = ActionSpace::Box { low: vec![-3.0; 2], high: vec![3.0; 2] };
    let map = FeatureMap::random_fourier(8, 1.0, seed, vec![-1.0; 3], vec![1.0; 3], space).unwrap();
    let mean = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-0.5..0.5));
    let g = GaussianLinearPolicy::new(mean, DVector::from_element(2, -1.0), 100.0).with_crn(&mut rng, 8);
    finish(rng, map, Policy::Gaussian(g), n, 3, |r| Action::Continuous(vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]))
}

/// Central difference of a scalar function of a vector.
pub fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut p = x.clone();
        p[i] += h;
        let mut m = x.clone();
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

/// Central-difference Jacobian (`out × x.len()`) of a vector function.
pub fn fd_jac(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Norm-wise relative error with an absolute floor.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Follower loss with the pairwise average taken over all `n²` pairs,
/// written out directly as a double loop.
pub fn v_statistic_follower_loss(inst: &Instance, theta: &DVector<f64>) -> f64 {
    let q = LinearQ { theta: theta.clone(), ..inst.q.clone() };
    let n = inst.batch.len();
    let delta: Vec<f64> = inst
        .batch
        .iter()
        .map(|t| {
            let next = if t.done { 0.0 } else { q.expected(&inst.map, &inst.policy, &t.s_next) };
            t.r + inst.gamma * next - q.value(&inst.map, &t.s, &t.a)
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let zi = inst.map.eval(&inst.batch[i].s, &inst.batch[i].a);
        for j in 0..n {
            let zj = inst.map.eval(&inst.batch[j].s, &inst.batch[j].a);
            total += delta[i] * inst.kernel.eval(&zi, &zj) * delta[j];
        }
    }
    let value: f64 =
        inst.init.iter().map(|s| q.expected(&inst.map, &inst.policy, s)).sum::<f64>() / inst.init.len() as f64;
    value + inst.lambda * inst.kernel.c_k * inst.kernel.c_k * total / (n * n) as f64
}

/// Relative error of every analytic derivative against its finite-difference
/// counterpart on one instance.
pub fn gradient_errors(inst: &Instance) -> Vec<(&'static str, f64)> {
    use stackelberg::gradients::{gradient_bundle, SolverConfig};
    use stackelberg::objectives::{follower_loss, leader_value};

    let pb = inst.problem();
    let h = 1e-5;
    let omega = inst.policy.params();
    let theta = inst.q.theta.clone();
    let with_theta = |t: &DVector<f64>| LinearQ { theta: t.clone(), ..inst.q.clone() };
    let bundle = gradient_bundle(&inst.q, &inst.policy, &inst.batch, &pb, &SolverConfig::default()).unwrap();

    let j_of_omega = |w: &DVector<f64>| leader_value(&inst.q, &inst.map, &inst.policy.with_params(w), &inst.init);
    let fd_pi_j = fd_grad(j_of_omega, &omega, h);
    let j_of_theta = |t: &DVector<f64>| leader_value(&with_theta(t), &inst.map, &inst.policy, &inst.init);
    let fd_q_j = fd_grad(j_of_theta, &theta, 1.0);
    let l_of_theta = |t: &DVector<f64>| follower_loss(&with_theta(t), &inst.policy, &inst.batch, &pb).unwrap();
    // the loss is quadratic in θ, so a unit central step is exact
    let fd_q_l = fd_grad(l_of_theta, &theta, 1.0);
    let grad_pi_l_fd = |t: &DVector<f64>| {
        let q = with_theta(t);
        fd_grad(|w| follower_loss(&q, &inst.policy.with_params(w), &inst.batch, &pb).unwrap(), &omega, h)
    };
    let fd_pi_l = grad_pi_l_fd(&theta);
    // rows ω, columns θ
    let fd_cross = fd_jac(grad_pi_l_fd, &theta, 1.0);
    let fd_hess = fd_jac(|t| fd_grad(|s| v_statistic_follower_loss(inst, s), t, 1.0), &theta, 1.0);

    let p = theta.len();
    let reg = &fd_hess + DMatrix::identity(p, p) * bundle.beta;
    let fd_total = &fd_pi_j - &fd_cross * (reg.try_inverse().unwrap() * &fd_q_j);

    vec![
        ("grad_pi_J", rel_err(bundle.d_pi_j.as_slice(), fd_pi_j.as_slice())),
        ("grad_q_J", rel_err(bundle.d_q_j.as_slice(), fd_q_j.as_slice())),
        ("grad_q_L", rel_err(bundle.d_q_l.as_slice(), fd_q_l.as_slice())),
        ("hess_q_L", rel_err(bundle.hess_q_l.as_slice(), fd_hess.as_slice())),
        ("grad_pi_L", rel_err(bundle.d_pi_l.as_slice(), fd_pi_l.as_slice())),
        ("cross_grad", rel_err(bundle.cross_q_pi_l.as_slice(), fd_cross.as_slice())),
        ("total_derivative", rel_err(bundle.total_dj.as_slice(), fd_total.as_slice())),
    ]
}

/// Three-state, two-action MDP on the states `x ∈ {0, 0.5, 1}`; degree-2
/// polynomial features make the six `(s, a)` pairs linearly independent.
pub struct Tabular {
    pub map: FeatureMap,
    pub states: [f64; 3],
    /// `p[a][s][s′]`.
    pub p: [[[f64; 3]; 3]; 2],
    /// Mean reward `r̄(s, a)`; observed rewards are `r̄ ± 0.5` with equal odds.
    pub r: [[f64; 2]; 3],
    /// Data distribution over `(s, a)`.
    pub mu: [[f64; 2]; 3],
    pub gamma: f64,
}

pub const TABULAR_NOISE: [f64; 2] = [-0.5, 0.5];

impl Tabular {
    pub fn new() -> Self {
        Tabular {
            map: FeatureMap::polynomial(2, vec![0.0], vec![1.0], ActionSpace::Discrete(2)).unwrap(),
            states: [0.0, 0.5, 1.0],
            p: [
                [[0.7, 0.2, 0.1], [0.3, 0.4, 0.3], [0.1, 0.1, 0.8]],
                [[0.1, 0.6, 0.3], [0.5, 0.0, 0.5], [0.2, 0.3, 0.5]],
            ],
            r: [[1.0, -0.5], [0.0, 2.0], [-1.0, 0.5]],
            mu: [[0.25, 0.1], [0.15, 0.2], [0.05, 0.25]],
            gamma: 0.9,
        }
    }

    pub fn state(&self, i: usize) -> Vec<f64> {
        vec![self.states[i]]
    }

    pub fn probs(&self, policy: &Policy, i: usize) -> [f64; 2] {
        let Policy::Softmax(sp) = policy else { panic!("tabular MDP uses softmax policies") };
        let p = sp.probs(&self.map, &self.state(i)).unwrap();
        [p[0], p[1]]
    }

    /// Exact `q^π` from `(I − γ P^π) q = r̄`, indexed `2s + a`.
    pub fn q_pi(&self, policy: &Policy) -> DVector<f64> {
        let mut m = DMatrix::identity(6, 6);
        for s in 0..3 {
            for a in 0..2 {
                for s2 in 0..3 {
                    let pi = self.probs(policy, s2);
                    for a2 in 0..2 {
                        m[(2 * s + a, 2 * s2 + a2)] -= self.gamma * self.p[a][s][s2] * pi[a2];
                    }
                }
            }
        }
        let r = DVector::from_fn(6, |i, _| self.r[i / 2][i % 2]);
        m.lu().solve(&r).unwrap()
    }

    /// θ with `⟨φ(s, a), θ⟩ = q[2s + a]` on all six pairs.
    pub fn theta_for(&self, q: &DVector<f64>) -> DVector<f64> {
        let phi = DMatrix::from_fn(6, self.map.dim(), |i, j| self.map.eval(&self.state(i / 2), &Action::Discrete(i % 2))[j]);
        phi.lu().solve(q).unwrap()
    }

    /// Draw one transition from `μ` and the dynamics.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Transition {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = (2, 1);
        'outer: for s in 0..3 {
            for a in 0..2 {
                acc += self.mu[s][a];
                if u < acc {
                    pick = (s, a);
                    break 'outer;
                }
            }
        }
        let (s, a) = pick;
        let v: f64 = rng.random();
        let row = self.p[a][s];
        let s2 = if v < row[0] { 0 } else if v < row[0] + row[1] { 1 } else { 2 };
        let noise = TABULAR_NOISE[rng.random_range(0..2)];
        Transition { s: self.state(s), a: Action::Discrete(a), r: self.r[s][a] + noise, s_next: self.state(s2), done: false }
    }

    /// Exact population value of the kernel Bellman loss
    /// `Σ_{z,z′} μ(z)μ(z′) K(z,z′) Δ̄(z)Δ̄(z′)` for an RBF kernel, with the
    /// conditional mean residual `Δ̄` enumerated over next states and noise.
    pub fn population_loss(&self, theta: &DVector<f64>, policy: &Policy, bandwidth: f64) -> f64 {
        let feat = |s: usize, a: usize| self.map.eval(&self.state(s), &Action::Discrete(a));
        let q = |s: usize, a: usize| feat(s, a).dot(theta);
        let mut mean_delta = [[0.0; 2]; 3];
        for s in 0..3 {
            for a in 0..2 {
                let mut e = 0.0;
                for s2 in 0..3 {
                    let pi = self.probs(policy, s2);
                    let v_next = pi[0] * q(s2, 0) + pi[1] * q(s2, 1);
                    for noise in TABULAR_NOISE {
                        e += self.p[a][s][s2] * 0.5 * (self.r[s][a] + noise + self.gamma * v_next - q(s, a));
                    }
                }
                mean_delta[s][a] = e;
            }
        }
        let mut total = 0.0;
        for (s, a) in (0..3).flat_map(|s| (0..2).map(move |a| (s, a))) {
            for (t, b) in (0..3).flat_map(|s| (0..2).map(move |a| (s, a))) {
                let d2 = (feat(s, a) - feat(t, b)).norm_squared();
                let k = (-d2 / (2.0 * bandwidth * bandwidth)).exp();
                total += self.mu[s][a] * self.mu[t][b] * k * mean_delta[s][a] * mean_delta[t][b];
            }
        }
        total
    }
}

/// Uniform-radius random start in the unit ball of `R^{m1+m2}`, split into
/// leader and follower parts.
pub fn unit_ball_start(seed: u64, m1: usize, m2: usize) -> (DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let v: DVector<f64> = DVector::from_fn(m1 + m2, |_, _| rng.random_range(-1.0..1.0));
    let r: f64 = rng.random();
    let v = &v / v.norm() * r;
    (v.rows(0, m1).into_owned(), v.rows(m1, m2).into_owned())
}

/// Euclidean distance of `(a1, a2)` to `(b1, b2)`.
pub fn joint_dist(a1: &DVector<f64>, a2: &DVector<f64>, b1: &DVector<f64>, b2: &DVector<f64>) -> f64 {
    ((a1 - b1).norm_squared() + (a2 - b2).norm_squared()).sqrt()
}
