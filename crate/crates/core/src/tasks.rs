//! Gaussian transport task distributions and their closed-form oracles.
//!
//! A task is a pair of measures (N(0,I), N(μ,Σ)); the four families vary the
//! target mean or covariance spectrum. Because both measures are Gaussian the
//! optimal map and the transport cost are available exactly — the map is
//! x ↦ Σ^{1/2}x + μ and the squared cost against the identity source is
//! Σᵢ(1−σᵢ)² with σᵢ the singular values of Σ^{1/2} — which gives every model
//! in this crate a ground truth to be measured against.

use crate::linalg::SymMatrix;
use crate::mat::Mat;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("degenerate interval: lo {0} > hi {1}")]
    DegenerateInterval(f64, f64),
    #[error("eig_interval [{0}, {1}] escapes the spectrum bounds [{2}, {3}]")]
    IntervalOutOfBounds(f64, f64, f64, f64),
    #[error("frame is not orthogonal (‖UᵀU − I‖ = {0:.3e})")]
    FrameNotOrthogonal(f64),
    #[error("family {0:?} requires field {1}")]
    MissingField(TaskFamilyKind, &'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskFamilyKind {
    /// μ ~ Unif(mean_box), Σ = I.
    MeanShift,
    /// μ = 0, Σ = diag(σ₁²..σ_d²), σᵢ² ~ Unif(eig_interval) independently.
    DiagCov,
    /// μ = 0, Σ = σ²I with a single σ² ~ Unif(eig_interval).
    IsoCov,
    /// μ = 0, Σ = U·diag(σ²)·Uᵀ with a fixed frame U.
    CommonFrame,
}

/// Distribution over transport tasks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskFamilySpec {
    pub kind: TaskFamilyKind,
    pub dim: usize,
    /// Per-coordinate (lo, hi) for the target mean (MeanShift only).
    pub mean_box: Option<Vec<(f64, f64)>>,
    /// (lo, hi) for the covariance eigenvalues σ² (covariance families).
    pub eig_interval: Option<(f64, f64)>,
    /// Fixed orthogonal frame (CommonFrame only).
    pub frame: Option<Mat>,
    /// Admissible spectrum bounds 0 < σ²_min ≤ σ²_max < ∞.
    pub sigma2_min: f64,
    pub sigma2_max: f64,
}

impl TaskFamilySpec {
    pub fn mean_shift(dim: usize, lo: f64, hi: f64) -> Self {
        TaskFamilySpec {
            kind: TaskFamilyKind::MeanShift,
            dim,
            mean_box: Some(vec![(lo, hi); dim]),
            eig_interval: None,
            frame: None,
            sigma2_min: 1.0,
            sigma2_max: 1.0,
        }
    }

    pub fn diag_cov(dim: usize, lo: f64, hi: f64) -> Self {
        TaskFamilySpec {
            kind: TaskFamilyKind::DiagCov,
            dim,
            mean_box: None,
            eig_interval: Some((lo, hi)),
            frame: None,
            sigma2_min: lo,
            sigma2_max: hi,
        }
    }

    pub fn iso_cov(dim: usize, lo: f64, hi: f64) -> Self {
        TaskFamilySpec { kind: TaskFamilyKind::IsoCov, ..Self::diag_cov(dim, lo, hi) }
    }

    pub fn common_frame(frame: Mat, lo: f64, hi: f64) -> Self {
        let dim = frame.rows();
        TaskFamilySpec {
            kind: TaskFamilyKind::CommonFrame,
            frame: Some(frame),
            ..Self::diag_cov(dim, lo, hi)
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if let Some(ms) = &self.mean_box {
            for &(lo, hi) in ms {
                if lo > hi {
                    return Err(TaskError::DegenerateInterval(lo, hi));
                }
            }
        }
        if let Some((lo, hi)) = self.eig_interval {
            if lo > hi {
                return Err(TaskError::DegenerateInterval(lo, hi));
            }
            if lo < self.sigma2_min || hi > self.sigma2_max {
                return Err(TaskError::IntervalOutOfBounds(
                    lo,
                    hi,
                    self.sigma2_min,
                    self.sigma2_max,
                ));
            }
        }
        match self.kind {
            TaskFamilyKind::MeanShift if self.mean_box.is_none() => {
                return Err(TaskError::MissingField(self.kind, "mean_box"));
            }
            TaskFamilyKind::DiagCov | TaskFamilyKind::IsoCov | TaskFamilyKind::CommonFrame
                if self.eig_interval.is_none() =>
            {
                return Err(TaskError::MissingField(self.kind, "eig_interval"));
            }
            _ => {}
        }
        if let Some(u) = &self.frame {
            let dev = u
                .transpose()
                .matmul(u)
                .sub(&Mat::identity(u.rows()))
                .frob_sq()
                .sqrt();
            if dev > 1e-10 {
                return Err(TaskError::FrameNotOrthogonal(dev));
            }
        } else if self.kind == TaskFamilyKind::CommonFrame {
            return Err(TaskError::MissingField(self.kind, "frame"));
        }
        Ok(())
    }
}

/// One transport task: source N(0,I), target N(mean, cov).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianTask {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    /// Orthogonal eigen-frame of cov; column k pairs with eigenvalues[k].
    pub frame: Mat,
    /// Covariance eigenvalues σ² (not their square roots).
    pub eigenvalues: Vec<f64>,
    /// Index of this task within its sampling stream.
    pub seed_id: u64,
}

/// Few-shot conditioning data: ordered sample sets from both measures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prompt {
    /// s×d draws from the source measure.
    pub source_samples: Mat,
    /// s×d draws from the target measure.
    pub target_samples: Mat,
    pub task_ref: u64,
}

/// Draw one task from the family. Consumes the stream deterministically.
pub fn sample_task(
    spec: &TaskFamilySpec,
    seed_id: u64,
    rng: &mut StreamRng,
) -> Result<GaussianTask, TaskError> {
    spec.validate()?;
    let d = spec.dim;
    let (mean, frame, eigenvalues) = match spec.kind {
        TaskFamilyKind::MeanShift => {
            let mbox = spec.mean_box.as_ref().unwrap();
            let mean: Vec<f64> = mbox.iter().map(|&(lo, hi)| rng.uniform(lo, hi)).collect();
            (mean, Mat::identity(d), vec![1.0; d])
        }
        TaskFamilyKind::DiagCov => {
            let (lo, hi) = spec.eig_interval.unwrap();
            let eigs: Vec<f64> = (0..d).map(|_| rng.uniform(lo, hi)).collect();
            (vec![0.0; d], Mat::identity(d), eigs)
        }
        TaskFamilyKind::IsoCov => {
            let (lo, hi) = spec.eig_interval.unwrap();
            let s2 = rng.uniform(lo, hi);
            (vec![0.0; d], Mat::identity(d), vec![s2; d])
        }
        TaskFamilyKind::CommonFrame => {
            let (lo, hi) = spec.eig_interval.unwrap();
            let eigs: Vec<f64> = (0..d).map(|_| rng.uniform(lo, hi)).collect();
            (vec![0.0; d], spec.frame.clone().unwrap(), eigs)
        }
    };
    let cov = SymMatrix::from_frame(&frame, &eigenvalues);
    Ok(GaussianTask { mean, cov, frame, eigenvalues, seed_id })
}

/// count×d draws from the task's target measure: mean + U·diag(σ)·z with
/// standard-normal z (Box–Muller inside [`StreamRng::normal`]).
pub fn sample_points(task: &GaussianTask, count: usize, rng: &mut StreamRng) -> Mat {
    let d = task.mean.len();
    let sig: Vec<f64> = task.eigenvalues.iter().map(|l| l.sqrt()).collect();
    let mut out = Mat::zeros(count, d);
    let mut z = vec![0.0; d];
    for row in 0..count {
        for zk in z.iter_mut() {
            *zk = rng.normal();
        }
        for i in 0..d {
            let mut x = task.mean[i];
            for k in 0..d {
                x += task.frame.get(i, k) * sig[k] * z[k];
            }
            out.set(row, i, x);
        }
    }
    out
}

/// count×d draws from the source measure N(0,I).
pub fn sample_source_points(dim: usize, count: usize, rng: &mut StreamRng) -> Mat {
    let mut out = Mat::zeros(count, dim);
    for row in 0..count {
        for i in 0..dim {
            out.set(row, i, rng.normal());
        }
    }
    out
}

/// Draw a prompt of `s` samples from each measure for this task.
pub fn sample_prompt(task: &GaussianTask, s: usize, rng: &mut StreamRng) -> Prompt {
    let d = task.mean.len();
    let source_samples = sample_source_points(d, s, rng);
    let target_samples = sample_points(task, s, rng);
    Prompt { source_samples, target_samples, task_ref: task.seed_id }
}

/// Closed-form optimal map from N(0,I) to the task target: x ↦ M·x + offset
/// with M = Σ^{1/2}.
pub fn ot_map_oracle(task: &GaussianTask) -> (SymMatrix, Vec<f64>) {
    let roots: Vec<f64> = task.eigenvalues.iter().map(|l| l.sqrt()).collect();
    let sqrt_cov = SymMatrix::from_frame(&task.frame, &roots);
    (sqrt_cov, task.mean.clone())
}

/// Squared 2-Wasserstein distance from N(0,I) to the centered task target:
/// Σᵢ (1 − σᵢ)², σᵢ = sqrt of the i-th covariance eigenvalue.
pub fn w2_identity_to_gaussian(task: &GaussianTask) -> f64 {
    assert!(
        task.mean.iter().all(|&m| m == 0.0),
        "transport-cost oracle requires a centered task"
    );
    task.eigenvalues.iter().map(|l| (1.0 - l.sqrt()).powi(2)).sum()
}

/// Empirical mean and covariance of row samples; used by Monte-Carlo checks.
pub fn empirical_moments(samples: &Mat) -> (Vec<f64>, SymMatrix) {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for i in 0..d {
            mean[i] += samples.get(row, i);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in 0..n {
        for i in 0..d {
            let xi = samples.get(row, i) - mean[i];
            for j in 0..d {
                cov[i * d + j] += xi * (samples.get(row, j) - mean[j]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= n as f64;
    }
    (mean, SymMatrix::new(d, cov).expect("empirical covariance is symmetric"))
}
