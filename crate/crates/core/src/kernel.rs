//! Positive-definite kernels over featurized state-action pairs.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Cap on the number of points used by [`median_bandwidth`].
pub const MEDIAN_SUBSAMPLE: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Rbf { bandwidth: f64 },
    Linear,
}

/// Kernel `K` together with the radius `C_K` of the RKHS ball it defines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub c_k: f64,
}

impl KernelSpec {
    pub fn rbf(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::Input(format!("rbf bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KernelSpec { kind: KernelKind::Rbf { bandwidth }, c_k: 1.0 })
    }

    pub fn linear() -> Self {
        KernelSpec { kind: KernelKind::Linear, c_k: 1.0 }
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self.kind {
            KernelKind::Rbf { bandwidth } => Some(bandwidth),
            KernelKind::Linear => None,
        }
    }

    /// Kernel value without finiteness checks.
    #[inline]
    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        match self.kind {
            KernelKind::Rbf { bandwidth } => {
                let d2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelKind::Linear => x.dot(y),
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, z1: &DVector<f64>, z2: &DVector<f64>) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Input("kernel arguments differ in dimension".into()));
    }
    if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite kernel argument".into()));
    }
    Ok(spec.eval(z1, z2))
}

/// Gram matrix `G_ij = K(z_i, z_j)`.
pub fn gram(spec: &KernelSpec, points: &[DVector<f64>]) -> DMatrix<f64> {
    let n = points.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = spec.eval(&points[i], &points[i]);
        for j in 0..i {
            let v = spec.eval(&points[i], &points[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Median pairwise Euclidean distance between feature vectors.
///
/// At most [`MEDIAN_SUBSAMPLE`] points are used, chosen by `seed`. Falls back to
/// the mean distance when the median is zero, and to 1 when that is zero too.
pub fn median_bandwidth(points: &[DVector<f64>], seed: u64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Input(format!("median bandwidth needs ≥ 2 points, got {}", points.len())));
    }
    let chosen: Vec<&DVector<f64>> = if points.len() > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, points.len(), MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &points[i]).collect()
    } else {
        points.iter().collect()
    };
    let mut dists = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for i in 0..chosen.len() {
        for j in 0..i {
            dists.push((chosen[i] - chosen[j]).norm());
        }
    }
    let median = median(&mut dists);
    if median > 0.0 {
        return Ok(median);
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    Ok(if mean > 0.0 { mean } else { 1.0 })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
