//! Linear self-attention model for in-context Gaussian transport.
//!
//! The model is θ = (Q, φ) with φ(y) = ψ(Wy) applied componentwise, ψ a
//! shallow ReLU network. Conditioning on n target samples produces the
//! in-context matrix
//!
//! ```text
//! A = Q · (1/n) Σᵢ φ(yᵢ)φ(yᵢ)ᵀ · Qᵀ
//! ```
//!
//! and the per-task objective is evaluated with the query expectation in
//! closed form: E_{x∼N(0,I)}‖Ax − x‖² = tr(A²) + d − 2·tr(A), plus the
//! penalty λ‖A² − Σ_n‖²_F against the second-moment matrix of a held-out
//! half of the samples. No Monte Carlo anywhere in the loss.
//!
//! [`oracle_params`] builds the explicit construction that recovers the
//! transport matrix Σ^{1/2}: Q* = (π/2)^{1/4}·U, W* = Uᵀ, and ψ* a ReLU
//! interpolant of the extended square root g_sq(z) = sign(z)√|z|. The
//! (π/2)^{1/4} factor cancels the folded-normal moment E|z| = σ√(2/π), so
//! the feature covariance lands on Λ^{1/2} exactly in population.

use crate::autodiff::{AutodiffError, Tape};
use crate::linalg::SymMatrix;
use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParametricError {
    #[error("loss needs an even sample count, got {0}")]
    OddSampleCount(usize),
    #[error("path norm {required:.3} exceeds the configured capacity M = {cap:.3}")]
    CapacityExceeded { required: f64, cap: f64 },
    #[error("grid-sup error {0:.3e} still above tolerance after {1} knot doublings")]
    InterpolationStalled(f64, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Componentwise feature map φ(y) = ψ(Wy), ψ(z) = Σ c_k·relu(w_k z + b_k).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureNet {
    /// d×d inner matrix W.
    pub inner: Mat,
    /// Shallow ReLU units (c_k, w_k, b_k).
    pub units: Vec<(f64, f64, f64)>,
    /// Capacity bound M on the path norm Σ|c_k|(|w_k|+|b_k|).
    pub capacity: f64,
}

impl FeatureNet {
    pub fn path_norm(&self) -> f64 {
        self.units.iter().map(|&(c, w, b)| c.abs() * (w.abs() + b.abs())).sum()
    }

    /// ψ applied to a scalar.
    pub fn psi(&self, z: f64) -> f64 {
        self.units
            .iter()
            .map(|&(c, w, b)| c * (w * z + b).max(0.0))
            .sum()
    }

    /// ψ applied in place to every entry of a matrix.
    fn psi_apply(&self, m: &mut Mat) {
        for z in m.data_mut() {
            let x = *z;
            let mut acc = 0.0;
            for &(c, w, b) in &self.units {
                let a = w * x + b;
                if a > 0.0 {
                    acc += c * a;
                }
            }
            *z = acc;
        }
    }
}

/// Full parameter set θ = (Q, φ) plus its norm budget and penalty weight.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParametricParams {
    /// d×d attention matrix with ‖Q‖_F ≤ c_theta.
    pub q: Mat,
    pub feature: FeatureNet,
    pub lambda: f64,
    pub c_theta: f64,
}

impl ParametricParams {
    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    /// Flatten as [Q row-major, W row-major, (c,w,b) per unit] for the optimizer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.q.data().len() + 3 * self.feature.units.len());
        v.extend_from_slice(self.q.data());
        v.extend_from_slice(self.feature.inner.data());
        for &(c, w, b) in &self.feature.units {
            v.extend_from_slice(&[c, w, b]);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let d2 = self.q.data().len();
        assert_eq!(flat.len(), 2 * d2 + 3 * self.feature.units.len());
        self.q.data_mut().copy_from_slice(&flat[..d2]);
        self.feature.inner.data_mut().copy_from_slice(&flat[d2..2 * d2]);
        for (k, u) in self.feature.units.iter_mut().enumerate() {
            let off = 2 * d2 + 3 * k;
            *u = (flat[off], flat[off + 1], flat[off + 2]);
        }
    }

    /// Project back into the constrained class: scale Q down to ‖Q‖_F ≤ C_Θ
    /// and the output weights down to path norm ≤ M.
    pub fn project(&mut self) {
        let qn = self.q.frob_sq().sqrt();
        if qn > self.c_theta {
            self.q = self.q.scale(self.c_theta / qn);
        }
        let pn = self.feature.path_norm();
        if pn > self.feature.capacity {
            let f = self.feature.capacity / pn;
            for u in self.feature.units.iter_mut() {
                u.0 *= f;
            }
        }
    }

    /// Small random initialization around the identity; `scale` sets the
    /// output-weight magnitude.
    pub fn init(
        dim: usize,
        units: usize,
        lambda: f64,
        c_theta: f64,
        capacity: f64,
        rng: &mut crate::rng::StreamRng,
        scale: f64,
    ) -> Self {
        let q = Mat::identity(dim).scale(c_theta / (dim as f64).sqrt());
        let inner = Mat::identity(dim);
        let units = (0..units)
            .map(|k| {
                // alternate unit orientation so ψ can represent odd shapes
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                (scale * rng.normal(), sign, rng.uniform(-1.0, 1.0))
            })
            .collect();
        ParametricParams { q, feature: FeatureNet { inner, units, capacity }, lambda, c_theta }
    }
}

/// Feature matrix Φ = ψ(W·Yᵀ), columns are φ(yᵢ); samples are rows of `targets`.
fn feature_columns(params: &ParametricParams, targets: &Mat) -> Mat {
    let mut z = params.feature.inner.matmul(&targets.transpose());
    params.feature.psi_apply(&mut z);
    z
}

/// In-context matrix A = Q·(1/n)Σφ(yᵢ)φ(yᵢ)ᵀ·Qᵀ, symmetrized.
pub fn forward_matrix(params: &ParametricParams, targets: &Mat) -> SymMatrix {
    let n = targets.rows();
    assert!(n >= 1, "forward_matrix needs at least one sample");
    let phi = feature_columns(params, targets);
    let b = params.q.matmul(&phi);
    let a = b.matmul(&b.transpose()).scale(1.0 / n as f64);
    SymMatrix::symmetrize(&a)
}

/// Apply the in-context map to one query point.
pub fn predict(params: &ParametricParams, targets: &Mat, query: &[f64]) -> Vec<f64> {
    let a = forward_matrix(params, targets);
    let d = query.len();
    (0..d)
        .map(|i| (0..d).map(|k| a.get(i, k) * query[k]).sum())
        .collect()
}

/// Empirical second-moment matrix (1/n)Σ yᵢyᵢᵀ of sample rows.
pub fn second_moment(samples: &Mat) -> SymMatrix {
    let (n, d) = (samples.rows(), samples.cols());
    let mut m = vec![0.0; d * d];
    for row in 0..n {
        let r = samples.row(row);
        for i in 0..d {
            for j in 0..=i {
                m[i * d + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            let v = m[i * d + j] / n as f64;
            m[i * d + j] = v;
            m[j * d + i] = v;
        }
    }
    SymMatrix::new(d, m).expect("second moment is symmetric")
}

fn split_halves(samples: &Mat) -> Result<(Mat, Mat), ParametricError> {
    let total = samples.rows();
    if total % 2 != 0 || total == 0 {
        return Err(ParametricError::OddSampleCount(total));
    }
    let n = total / 2;
    let d = samples.cols();
    let first = Mat::from_vec(n, d, samples.data()[..n * d].to_vec());
    let second = Mat::from_vec(n, d, samples.data()[n * d..].to_vec());
    Ok((first, second))
}

/// Per-task loss with the query expectation in closed form:
/// tr(A²) + d − 2·tr(A) + λ‖A² − Σ_n‖²_F. The first n rows build A, the
/// last n rows build Σ_n.
pub fn loss(params: &ParametricParams, samples: &Mat) -> Result<f64, ParametricError> {
    let (build, held_out) = split_halves(samples)?;
    let d = samples.cols() as f64;
    let a = forward_matrix(params, &build).to_mat();
    let sigma_n = second_moment(&held_out).to_mat();
    let a2 = a.matmul(&a);
    let value =
        a.frob_sq() + d - 2.0 * a.trace() + params.lambda * a2.sub(&sigma_n).frob_sq();
    Ok(value)
}

/// Mean loss over a batch of (2n)-sample tasks.
pub fn empirical_risk(
    params: &ParametricParams,
    task_samples: &[Mat],
) -> Result<f64, ParametricError> {
    assert!(!task_samples.is_empty(), "empirical risk over an empty task set");
    let mut acc = 0.0;
    for s in task_samples {
        acc += loss(params, s)?;
    }
    Ok(acc / task_samples.len() as f64)
}

/// Gradient of [`loss`] with respect to every parameter.
#[derive(Clone, Debug)]
pub struct ParametricGrads {
    pub q: Mat,
    pub inner: Mat,
    pub units: Vec<(f64, f64, f64)>,
}

impl ParametricGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.q.data().len() + 3 * self.units.len());
        v.extend_from_slice(self.q.data());
        v.extend_from_slice(self.inner.data());
        for &(c, w, b) in &self.units {
            v.extend_from_slice(&[c, w, b]);
        }
        v
    }
}

/// Reverse-mode gradient of the closed-form loss; the tape re-derives the
/// same value as [`loss`], which is asserted in tests.
pub fn grad_loss(
    params: &ParametricParams,
    samples: &Mat,
) -> Result<(f64, ParametricGrads), ParametricError> {
    let (build, held_out) = split_halves(samples)?;
    let n = build.rows();
    let d = samples.cols();

    let mut t = Tape::new();
    let q = t.leaf(params.q.clone());
    let w = t.leaf(params.feature.inner.clone());
    let yt = t.constant(build.transpose());
    let z = t.matmul(w, yt)?;

    // ψ(Z) as a sum of per-unit ReLU responses, each unit differentiable
    let mut unit_nodes = Vec::with_capacity(params.feature.units.len());
    let mut phi = None;
    for &(c, wk, bk) in &params.feature.units {
        let cn = t.leaf(Mat::from_vec(1, 1, vec![c]));
        let wn = t.leaf(Mat::from_vec(1, 1, vec![wk]));
        let bn = t.leaf(Mat::from_vec(1, 1, vec![bk]));
        let pre = t.scale_node(z, wn)?;
        let pre = t.add_scalar_node(pre, bn)?;
        let act = t.relu(pre);
        let term = t.scale_node(act, cn)?;
        phi = Some(match phi {
            None => term,
            Some(acc) => t.add(acc, term)?,
        });
        unit_nodes.push((cn, wn, bn));
    }
    let phi = phi.expect("feature net has at least one unit");

    let b = t.matmul(q, phi)?;
    let bt = t.transpose(b);
    let bbt = t.matmul(b, bt)?;
    let a = t.scale(bbt, 1.0 / n as f64);

    let tr_a2 = t.frob_sq(a); // tr(A²) = ‖A‖²_F for symmetric A
    let tr_a = t.trace(a)?;
    let neg2tr = t.scale(tr_a, -2.0);
    let fit = t.add(tr_a2, neg2tr)?;
    let fit = t.add_scalar(fit, d as f64);

    let a2 = t.matmul(a, a)?;
    let sn = t.constant(second_moment(&held_out).to_mat());
    let diff = t.sub(a2, sn)?;
    let pen_raw = t.frob_sq(diff);
    let pen = t.scale(pen_raw, params.lambda);
    let total = t.add(fit, pen)?;

    t.backward(total)?;
    let grads = ParametricGrads {
        q: t.grad(q),
        inner: t.grad(w),
        units: unit_nodes
            .iter()
            .map(|&(cn, wn, bn)| {
                (t.grad(cn).get(0, 0), t.grad(wn).get(0, 0), t.grad(bn).get(0, 0))
            })
            .collect(),
    };
    Ok((t.value(total).get(0, 0), grads))
}

/// Extended square root g_sq(z) = sign(z)·√|z|.
pub fn g_sq(z: f64) -> f64 {
    z.signum() * z.abs().sqrt()
}

/// Smoothed square root: equals g_sq outside [−ε, ε], linear z/√ε inside.
pub fn g_eps(z: f64, eps: f64) -> f64 {
    if z.abs() <= eps {
        z / eps.sqrt()
    } else {
        g_sq(z)
    }
}

/// Diagnostics from [`build_gsq_network`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GsqBuildReport {
    pub knots: usize,
    pub units: usize,
    pub path_norm: f64,
    pub grid_sup_error: f64,
}

const GSQ_VERIFY_GRID: usize = 10_000;
const GSQ_MAX_DOUBLINGS: usize = 12;

/// ReLU realization of a uniform-knot piecewise-linear interpolant of
/// g_eps on [−r, r], built odd (ψ(0) = 0 exactly) and refined by knot
/// doubling until the sup error against g_sq on a 10⁴-point grid is ≤ ε.
///
/// The smoothing parameter of the interpolated g_eps is ε_int = min(ε, 2ε²),
/// keeping the smoothing error √ε_int/4 ≈ 0.354·ε inside the budget; the
/// measured path norm therefore grows like 1/ε rather than the
/// non-constructive 1/√ε existence bound.
pub fn build_gsq_network(
    eps: f64,
    r: f64,
    max_path_norm: Option<f64>,
) -> Result<(Vec<(f64, f64, f64)>, GsqBuildReport), ParametricError> {
    assert!(eps > 0.0 && eps < r, "need 0 < ε < r");
    let eps_int = eps.min(2.0 * eps * eps);

    let mut knots = ((4.0 * r / eps).ceil() as usize).max(2);
    for _ in 0..=GSQ_MAX_DOUBLINGS {
        let units = interpolant_units(eps_int, r, knots);
        let net = FeatureNet { inner: Mat::identity(1), units: units.clone(), capacity: f64::MAX };
        let mut sup: f64 = 0.0;
        for g in 0..GSQ_VERIFY_GRID {
            let z = -r + 2.0 * r * g as f64 / (GSQ_VERIFY_GRID - 1) as f64;
            sup = sup.max((net.psi(z) - g_sq(z)).abs());
        }
        if sup <= eps {
            let path_norm = net.path_norm();
            if let Some(cap) = max_path_norm {
                if path_norm > cap {
                    return Err(ParametricError::CapacityExceeded { required: path_norm, cap });
                }
            }
            let report = GsqBuildReport {
                knots,
                units: units.len(),
                path_norm,
                grid_sup_error: sup,
            };
            return Ok((units, report));
        }
        knots *= 2;
    }
    Err(ParametricError::InterpolationStalled(eps, GSQ_MAX_DOUBLINGS))
}

/// Odd piecewise-linear interpolant of g_eps through K uniform knots on (0, r],
/// as ReLU units: slope s₁ through the origin plus slope changes at ±t_k.
fn interpolant_units(eps_int: f64, r: f64, knots: usize) -> Vec<(f64, f64, f64)> {
    let h = r / knots as f64;
    let value = |k: usize| g_eps(k as f64 * h, eps_int);
    let slope = |k: usize| (value(k) - value(k - 1)) / h; // slope on (t_{k-1}, t_k)

    let mut units = Vec::with_capacity(2 * knots);
    let s1 = slope(1);
    units.push((s1, 1.0, 0.0));
    units.push((-s1, -1.0, 0.0));
    for k in 1..knots {
        let alpha = slope(k + 1) - slope(k);
        if alpha == 0.0 {
            continue;
        }
        let tk = k as f64 * h;
        units.push((alpha, 1.0, -tk));
        units.push((-alpha, -1.0, -tk));
    }
    units
}

/// The explicit construction recovering Σ^{1/2} in-context: Q* = (π/2)^{1/4}·U,
/// W* = Uᵀ, ψ* the g_sq interpolant. C_Θ is set to ‖Q*‖_F and M to the
/// measured path norm, so the returned parameters satisfy their own class
/// constraints.
pub fn oracle_params(
    frame: &Mat,
    eps: f64,
    r: f64,
    lambda: f64,
) -> Result<(ParametricParams, GsqBuildReport), ParametricError> {
    let d = frame.rows();
    let scale = (std::f64::consts::PI / 2.0).powf(0.25);
    let (units, report) = build_gsq_network(eps, r, None)?;
    let capacity = report.path_norm;
    let params = ParametricParams {
        q: frame.scale(scale),
        feature: FeatureNet { inner: frame.transpose(), units, capacity },
        lambda,
        c_theta: scale * (d as f64).sqrt(),
    };
    Ok((params, report))
}
