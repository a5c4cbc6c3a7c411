//! Kernels and squared maximum-mean-discrepancy estimators.
//!
//! Two kernels are enough for everything downstream: the quadratic kernel
//! ⟨u,v⟩², whose population MMD² is exactly the Frobenius distance between
//! second-moment matrices, and a multi-scale RBF — a weighted sum of
//! Gaussians whose bandwidths follow a geometric progression around an
//! adaptive base σ₀ (the mean pairwise squared distance of the pooled
//! samples).
//!
//! Both the unbiased U-statistic (diagonal terms excluded; can go negative)
//! and the biased V-statistic (full double sum; always ≥ 0) are provided.

use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmdError {
    #[error("U-statistic needs at least 2 points per set, got {0}")]
    TooFewPoints(usize),
    #[error("sample sets must have equal sizes: {0} vs {1}")]
    UnequalSizes(usize, usize),
    #[error("kernel weights sum to {0}, expected 1")]
    BadWeights(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Quadratic,
    MultiScaleRbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BandwidthMode {
    /// σ₀ = mean pairwise squared distance over the pooled evaluation batch.
    Adaptive,
    /// σ₀ pinned, for deterministic unit tests.
    Fixed(f64),
}

/// Kernel choice plus its multi-scale structure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Number of bandwidth levels L (RBF only).
    pub levels: usize,
    /// Per-level weights w_l ≥ 0, Σ w_l = 1.
    pub weights: Vec<f64>,
    pub bandwidth: BandwidthMode,
}

impl KernelSpec {
    pub fn quadratic() -> Self {
        KernelSpec {
            kind: KernelKind::Quadratic,
            levels: 1,
            weights: vec![1.0],
            bandwidth: BandwidthMode::Fixed(1.0),
        }
    }

    /// Multi-scale RBF with L uniform weights and adaptive base bandwidth.
    pub fn multi_scale_rbf(levels: usize) -> Self {
        KernelSpec {
            kind: KernelKind::MultiScaleRbf,
            levels,
            weights: vec![1.0 / levels as f64; levels],
            bandwidth: BandwidthMode::Adaptive,
        }
    }

    pub fn validate(&self) -> Result<(), MmdError> {
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 || self.weights.len() != self.levels || self.levels == 0 {
            return Err(MmdError::BadWeights(s));
        }
        Ok(())
    }

    /// Bandwidth of level l ∈ 1..=L: σ_l = σ₀·2^{l − ⌈L/2⌉}.
    pub fn level_bandwidth(&self, sigma0: f64, l: usize) -> f64 {
        let shift = l as i32 - (self.levels as i32 + 1) / 2;
        sigma0 * (shift as f64).exp2()
    }
}

/// Evaluate the kernel on a pair of points.
pub fn kernel_eval(spec: &KernelSpec, u: &[f64], v: &[f64], sigma0: f64) -> f64 {
    match spec.kind {
        KernelKind::Quadratic => {
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            dot * dot
        }
        KernelKind::MultiScaleRbf => {
            let r2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            (1..=spec.levels)
                .map(|l| spec.weights[l - 1] * (-r2 / spec.level_bandwidth(sigma0, l)).exp())
                .sum()
        }
    }
}

/// Adaptive base bandwidth: mean pairwise squared distance over the pooled
/// rows of both matrices, (1/(N(N−1)))·Σ_{i≠j}‖zᵢ−zⱼ‖². Returns the value and
/// a degeneracy flag; all-coincident points fall back to σ₀ = 1.
pub fn adaptive_base_bandwidth(pred: &Mat, truth: &Mat) -> (f64, bool) {
    let n_total = pred.rows() + truth.rows();
    assert!(n_total >= 2, "pooled set needs at least 2 points");
    let row = |i: usize| -> &[f64] {
        if i < pred.rows() {
            pred.row(i)
        } else {
            truth.row(i - pred.rows())
        }
    };
    let mut sum = 0.0;
    for i in 0..n_total {
        for j in (i + 1)..n_total {
            let r2: f64 = row(i)
                .iter()
                .zip(row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sum += 2.0 * r2; // ordered pairs count each unordered pair twice
        }
    }
    let sigma0 = sum / (n_total * (n_total - 1)) as f64;
    if sigma0 > 0.0 {
        (sigma0, false)
    } else {
        (1.0, true)
    }
}

/// Resolve σ₀ for an evaluation batch per the spec's bandwidth mode.
pub fn resolve_bandwidth(spec: &KernelSpec, x: &Mat, y: &Mat) -> f64 {
    match spec.bandwidth {
        BandwidthMode::Fixed(s) => s,
        BandwidthMode::Adaptive => adaptive_base_bandwidth(x, y).0,
    }
}

/// Unbiased U-statistic estimator of MMD²:
/// (1/(m(m−1)))·Σ_{i≠j} [k(xᵢ,xⱼ) + k(yᵢ,yⱼ) − k(xᵢ,yⱼ) − k(xⱼ,yᵢ)].
/// Diagonal terms are excluded, so the estimate can be negative.
pub fn mmd2_u(x: &Mat, y: &Mat, spec: &KernelSpec, sigma0: f64) -> Result<f64, MmdError> {
    let m = x.rows();
    if y.rows() != m {
        return Err(MmdError::UnequalSizes(m, y.rows()));
    }
    if m < 2 {
        return Err(MmdError::TooFewPoints(m));
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            sum += kernel_eval(spec, x.row(i), x.row(j), sigma0)
                + kernel_eval(spec, y.row(i), y.row(j), sigma0)
                - kernel_eval(spec, x.row(i), y.row(j), sigma0)
                - kernel_eval(spec, x.row(j), y.row(i), sigma0);
        }
    }
    Ok(sum / (m * (m - 1)) as f64)
}

/// Biased V-statistic: full double sums including i=j. Always ≥ 0.
pub fn mmd2_biased(x: &Mat, y: &Mat, spec: &KernelSpec, sigma0: f64) -> f64 {
    let (m, n) = (x.rows(), y.rows());
    assert!(m >= 1 && n >= 1, "sets must be nonempty");
    let mut sxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            sxx += kernel_eval(spec, x.row(i), x.row(j), sigma0);
        }
    }
    let mut syy = 0.0;
    for i in 0..n {
        for j in 0..n {
            syy += kernel_eval(spec, y.row(i), y.row(j), sigma0);
        }
    }
    let mut sxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            sxy += kernel_eval(spec, x.row(i), y.row(j), sigma0);
        }
    }
    sxx / (m * m) as f64 + syy / (n * n) as f64 - 2.0 * sxy / (m * n) as f64
}

/// Closed moment form of the quadratic-kernel MMD²: the squared Frobenius
/// distance between the empirical second-moment matrices (1/m)Σxxᵀ.
pub fn quadratic_mmd2_closed(x: &Mat, y: &Mat) -> f64 {
    let second_moment = |s: &Mat| -> Mat {
        let (n, d) = (s.rows(), s.cols());
        let mut m = Mat::zeros(d, d);
        for row in 0..n {
            let r = s.row(row);
            for i in 0..d {
                for j in 0..d {
                    let v = m.get(i, j) + r[i] * r[j];
                    m.set(i, j, v);
                }
            }
        }
        m.scale(1.0 / n as f64)
    };
    second_moment(x).sub(&second_moment(y)).frob_sq()
}
