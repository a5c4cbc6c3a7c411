//! Brute-force oracles for the closed-form objective and scaling-law fits.
//!
//! In the eigen-frame of the target covariance the matrix objective
//! ‖A − I‖²_F + λ‖A² − Σ‖²_F decouples into scalar surrogates
//! h(x) = x² − 2x + λ(x² − σᵢ²)², one per eigenvalue, so the global matrix
//! minimum equals d + Σᵢ min hᵢ. The minimizers are found by dense grid
//! search refined with Newton iterations — robustness over quartic-root
//! algebra. On top of these oracles sit Monte-Carlo estimators for the
//! excess loss and transport-map error of trained parameters, and the
//! least-squares fitter for the a·n^{−1/2} + b·n^{−1} + c error curve.

use crate::linalg::{self, LinalgError};
use crate::mat::Mat;
use crate::parametric::{self, ParametricError, ParametricParams};
use crate::rng::StreamRng;
use crate::tasks::{sample_points, ot_map_oracle, GaussianTask};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("task must be centered for transport-cost oracles")]
    NotCentered,
    #[error("scaling fit needs at least 4 points with 3 distinct prompt lengths, got {points} points / {distinct} distinct")]
    TooFewPoints { points: usize, distinct: usize },
    #[error("scaling fit design is rank deficient: {0}")]
    RankDeficient(#[from] LinalgError),
    #[error(transparent)]
    Parametric(#[from] ParametricError),
}

/// One scalar coordinate of the decoupled objective.
#[derive(Clone, Copy, Debug)]
pub struct SurrogateSpec {
    /// σᵢ, the square root of a covariance eigenvalue; must be positive.
    pub sigma: f64,
    /// Penalty weight λ ≥ 0.
    pub lambda: f64,
}

impl SurrogateSpec {
    pub fn new(sigma: f64, lambda: f64) -> Self {
        assert!(sigma > 0.0, "surrogate sigma must be positive");
        assert!(lambda >= 0.0, "surrogate lambda must be non-negative");
        SurrogateSpec { sigma, lambda }
    }
}

/// h(x) = x² − 2x + λ(x² − σ²)².
pub fn h_value(x: f64, spec: &SurrogateSpec) -> f64 {
    let q = x * x - spec.sigma * spec.sigma;
    x * x - 2.0 * x + spec.lambda * q * q
}

fn h_prime(x: f64, spec: &SurrogateSpec) -> f64 {
    2.0 * x - 2.0 + 4.0 * spec.lambda * x * (x * x - spec.sigma * spec.sigma)
}

fn h_second(x: f64, spec: &SurrogateSpec) -> f64 {
    2.0 + 4.0 * spec.lambda * (3.0 * x * x - spec.sigma * spec.sigma)
}

/// Search interval upper end: the minimizer lies within |1−σ|/σ² of σ for
/// large λ, and within the λ=0 minimizer x=1 otherwise; the +1 is slack.
fn h_search_hi(spec: &SurrogateSpec) -> f64 {
    let s = spec.sigma;
    s + (1.0 - s).abs() / (s * s) + 1.0
}

const H_GRID_POINTS: usize = 100_000;
const H_NEWTON_ITERS: usize = 50;
const H_PRIME_TOL: f64 = 1e-10;

/// Global minimum of h over x ≥ 0 (which equals the minimum over ℝ, since
/// h(x) < h(−x) for x > 0): a 10⁵-point grid sweep picks the basin, then 50
/// Newton iterations on h′ polish the argmin.
pub fn h_min_bruteforce(spec: &SurrogateSpec) -> (f64, f64) {
    let hi = h_search_hi(spec);
    let mut best_x = 0.0;
    let mut best_v = h_value(0.0, spec);
    for i in 1..=H_GRID_POINTS {
        let x = hi * i as f64 / H_GRID_POINTS as f64;
        let v = h_value(x, spec);
        if v < best_v {
            best_v = v;
            best_x = x;
        }
    }
    let mut x = best_x;
    for _ in 0..H_NEWTON_ITERS {
        let d1 = h_prime(x, spec);
        if d1.abs() <= H_PRIME_TOL {
            break;
        }
        let d2 = h_second(x, spec);
        if d2 <= 0.0 {
            break; // left the convex basin; keep the grid point
        }
        x = (x - d1 / d2).clamp(0.0, hi);
    }
    let v = h_value(x, spec);
    if v < best_v {
        (x, v)
    } else {
        (best_x, best_v)
    }
}

/// Σᵢ min hᵢ over the task's eigenvalue square roots.
pub fn h_min_sum(sigmas: &[f64], lambda: f64) -> f64 {
    sigmas
        .iter()
        .map(|&s| h_min_bruteforce(&SurrogateSpec::new(s, lambda)).1)
        .sum()
}

/// Global minimum of the matrix objective min_A ‖A−I‖²_F + λ‖A²−Σ‖²_F,
/// which equals d + Σᵢ min hᵢ by the eigen-coordinate decomposition
/// tr(A²) + d − 2tr(A) = Σᵢ(aᵢ² − 2aᵢ) + d. Converges to W₂²(N(0,I), task)
/// at rate O(1/λ).
pub fn f_min(task: &GaussianTask, lambda: f64) -> Result<f64, TheoryError> {
    if task.mean.iter().any(|&m| m != 0.0) {
        return Err(TheoryError::NotCentered);
    }
    let sigmas: Vec<f64> = task.eigenvalues.iter().map(|l| l.sqrt()).collect();
    Ok(task.mean.len() as f64 + h_min_sum(&sigmas, lambda))
}

/// Monte-Carlo excess loss with its two terms kept separate.
///
/// `risk` is the mean per-task objective of `params` on fresh prompts of
/// length `n_test` (2·n_test samples: half build A, half build Σ_n);
/// `reference` is the task-mean of the oracle minimum f_min. The true
/// "min over all measurable maps" is unobservable, so the reference
/// substitutes the oracle value, which carries an O(λ/n) bias from using
/// Σ_n instead of Σ.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExcessLossReport {
    pub risk: f64,
    pub reference: f64,
    pub excess: f64,
}

pub fn excess_loss_estimate(
    params: &ParametricParams,
    tasks: &[GaussianTask],
    n_test: usize,
    rng: &mut StreamRng,
) -> Result<ExcessLossReport, TheoryError> {
    assert!(!tasks.is_empty(), "excess loss over an empty task set");
    let mut risk = 0.0;
    let mut reference = 0.0;
    for task in tasks {
        let samples = sample_points(task, 2 * n_test, rng);
        risk += parametric::loss(params, &samples)?;
        reference += f_min(task, params.lambda)?;
    }
    let m = tasks.len() as f64;
    let (risk, reference) = (risk / m, reference / m);
    Ok(ExcessLossReport { risk, reference, excess: risk - reference })
}

/// Mean over tasks of ‖A_{n,θ} − Σ^{1/2}‖²_F with fresh prompts of length
/// `n_test`.
pub fn transport_map_error(
    params: &ParametricParams,
    tasks: &[GaussianTask],
    n_test: usize,
    rng: &mut StreamRng,
) -> f64 {
    assert!(!tasks.is_empty(), "map error over an empty task set");
    let mut acc = 0.0;
    for task in tasks {
        let samples = sample_points(task, n_test, rng);
        let a = parametric::forward_matrix(params, &samples).to_mat();
        let (sqrt_cov, _) = ot_map_oracle(task);
        acc += a.sub(&sqrt_cov.to_mat()).frob_sq();
    }
    acc / tasks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorKind {
    ExcessLoss,
    MapError,
}

/// One measured point of an error-vs-prompt-length curve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub error: f64,
    pub kind: ErrorKind,
}

/// Least-squares fit of error(n) = a·n^{−1/2} + b·n^{−1} + c.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r2: f64,
}

/// Ordinary least squares on design columns (n^{−1/2}, n^{−1}, 1) via the
/// normal equations; R² = 1 − SS_res/SS_tot.
pub fn fit_scaling_law(points: &[ScalingPoint]) -> Result<FitResult, TheoryError> {
    let mut ns: Vec<usize> = points.iter().map(|p| p.n).collect();
    ns.sort_unstable();
    ns.dedup();
    if points.len() < 4 || ns.len() < 3 {
        return Err(TheoryError::TooFewPoints { points: points.len(), distinct: ns.len() });
    }
    let mut xtx = Mat::zeros(3, 3);
    let mut xty = [0.0; 3];
    for p in points {
        assert!(p.n >= 1, "prompt length must be at least 1");
        let nf = p.n as f64;
        let row = [nf.powf(-0.5), 1.0 / nf, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                xtx.set(i, j, xtx.get(i, j) + row[i] * row[j]);
            }
            xty[i] += row[i] * p.error;
        }
    }
    let beta = linalg::solve(&xtx, &xty)?;
    let mean_y = points.iter().map(|p| p.error).sum::<f64>() / points.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for p in points {
        let nf = p.n as f64;
        let pred = beta[0] * nf.powf(-0.5) + beta[1] / nf + beta[2];
        ss_res += (p.error - pred).powi(2);
        ss_tot += (p.error - mean_y).powi(2);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(FitResult { a: beta[0], b: beta[1], c: beta[2], r2 })
}

/// Least squares over the theoretically admissible family a, b ≥ 0 (c free).
///
/// The unconstrained coefficients on the near-collinear columns n^{−1/2} and
/// n^{−1} carry sign noise when the true curve has a vanishing coefficient,
/// so rate validation uses this constrained fit: active-set over the two
/// sign constraints — try the unconstrained solution, then each boundary
/// (a=0, b=0, a=b=0) and keep the feasible fit with the smallest residual.
pub fn fit_scaling_law_nonneg(points: &[ScalingPoint]) -> Result<FitResult, TheoryError> {
    let full = fit_scaling_law(points)?;
    if full.a >= 0.0 && full.b >= 0.0 {
        return Ok(full);
    }
    let m = points.len() as f64;
    let mean_y = points.iter().map(|p| p.error).sum::<f64>() / m;
    let ss_tot: f64 = points.iter().map(|p| (p.error - mean_y).powi(2)).sum();
    let score = |a: f64, b: f64, c: f64| -> FitResult {
        let ss_res: f64 = points
            .iter()
            .map(|p| {
                let nf = p.n as f64;
                (p.error - a * nf.powf(-0.5) - b / nf - c).powi(2)
            })
            .sum();
        let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
        FitResult { a, b, c, r2 }
    };
    // single-column least squares of error on (col, 1)
    let one_col = |col: &dyn Fn(f64) -> f64| -> (f64, f64) {
        let (mut sxx, mut sx, mut sxy, mut sy) = (0.0, 0.0, 0.0, 0.0);
        for p in points {
            let x = col(p.n as f64);
            sxx += x * x;
            sx += x;
            sxy += x * p.error;
            sy += p.error;
        }
        let det = sxx * m - sx * sx;
        let coef = (sxy * m - sx * sy) / det;
        let c = (sy - coef * sx) / m;
        (coef, c)
    };
    let mut best: Option<FitResult> = None;
    let (b0, c0) = one_col(&|n| 1.0 / n);
    if b0 >= 0.0 {
        best = Some(score(0.0, b0, c0));
    }
    let (a1, c1) = one_col(&|n: f64| n.powf(-0.5));
    if a1 >= 0.0 {
        let cand = score(a1, 0.0, c1);
        if best.as_ref().map_or(true, |f| cand.r2 > f.r2) {
            best = Some(cand);
        }
    }
    let flat = score(0.0, 0.0, mean_y);
    Ok(best.unwrap_or(flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use crate::parametric::FeatureNet;
    use crate::tasks::{w2_identity_to_gaussian, TaskFamilySpec};

    fn diag_task(eigs: &[f64]) -> GaussianTask {
        let d = eigs.len();
        GaussianTask {
            mean: vec![0.0; d],
            cov: SymMatrix::from_frame(&Mat::identity(d), eigs),
            frame: Mat::identity(d),
            eigenvalues: eigs.to_vec(),
            seed_id: 0,
        }
    }

    /// Q=I, W=I, ψ(z)=relu(z)−relu(−z)=z, so A = Σ_n exactly.
    fn identity_forcing_params(dim: usize, lambda: f64) -> ParametricParams {
        ParametricParams {
            q: Mat::identity(dim),
            feature: FeatureNet {
                inner: Mat::identity(dim),
                units: vec![(1.0, 1.0, 0.0), (-1.0, -1.0, 0.0)],
                capacity: 2.0,
            },
            lambda,
            c_theta: (dim as f64).sqrt(),
        }
    }

    #[test]
    fn h_value_special_points() {
        for lambda in [0.0, 1.0, 1e4] {
            let s = SurrogateSpec::new(1.0, lambda);
            assert_eq!(h_value(1.0, &s), -1.0);
        }
        let s = SurrogateSpec::new(1.7, 3.0);
        assert!((h_value(0.0, &s) - 3.0 * 1.7f64.powi(4)).abs() < 1e-12);
    }

    #[test]
    fn h_value_matches_expanded_polynomial() {
        let mut rng = StreamRng::new(1, &[1]);
        for _ in 0..200 {
            let x = rng.uniform(-3.0, 3.0);
            let sigma = rng.uniform(0.2, 3.0);
            let lambda = rng.uniform(0.0, 100.0);
            let s2 = sigma * sigma;
            let expanded =
                x * x - 2.0 * x + lambda * (x.powi(4) - 2.0 * s2 * x * x + s2 * s2);
            let got = h_value(x, &SurrogateSpec::new(sigma, lambda));
            assert!((got - expanded).abs() <= 1e-9 * (1.0 + expanded.abs()));
        }
    }

    #[test]
    fn h_min_sigma_one_is_stationary() {
        for lambda in [0.5, 10.0, 1e4] {
            let (a, v) = h_min_bruteforce(&SurrogateSpec::new(1.0, lambda));
            assert!((a - 1.0).abs() < 1e-9, "λ={lambda}: argmin {a}");
            assert!((v + 1.0).abs() < 1e-12, "λ={lambda}: value {v}");
        }
    }

    #[test]
    fn h_min_matches_fine_grid_oracle() {
        let spec = SurrogateSpec::new(2.0, 10.0);
        let (a, v) = h_min_bruteforce(&spec);
        let hi = h_search_hi(&spec);
        let fine = 10_000_000usize;
        let mut best = (0.0, h_value(0.0, &spec));
        for i in 1..=fine {
            let x = hi * i as f64 / fine as f64;
            let hv = h_value(x, &spec);
            if hv < best.1 {
                best = (x, hv);
            }
        }
        assert!((v - best.1).abs() < 1e-10, "value {v} vs fine-grid {}", best.1);
        assert!((a - best.0).abs() < 2.0 * hi / fine as f64, "argmin {a} vs {}", best.0);
        assert!(h_prime(a, &spec).abs() < 1e-10);
    }

    #[test]
    fn argmin_approaches_sigma_at_the_analytic_rate() {
        for sigma in [0.5, 2.0] {
            for lambda in [10.0, 100.0, 1000.0, 10_000.0] {
                let (a, _) = h_min_bruteforce(&SurrogateSpec::new(sigma, lambda));
                let bound = (1.0 - sigma).abs() / (sigma * sigma * lambda);
                assert!(
                    (a - sigma).abs() <= bound * 1.0000001,
                    "σ={sigma}, λ={lambda}: |a−σ| = {} > {bound}",
                    (a - sigma).abs()
                );
            }
        }
    }

    #[test]
    fn f_min_identity_covariance_is_zero() {
        let task = diag_task(&[1.0, 1.0, 1.0]);
        let f = f_min(&task, 50.0).unwrap();
        assert!(f.abs() < 1e-12, "f_min = {f}");
        assert!((h_min_sum(&[1.0, 1.0, 1.0], 50.0) + 3.0).abs() < 1e-12);
        assert_eq!(w2_identity_to_gaussian(&task), 0.0);
    }

    #[test]
    fn f_min_rejects_uncentered_tasks() {
        let mut task = diag_task(&[1.0, 2.0]);
        task.mean = vec![5.0, 0.0];
        assert!(matches!(f_min(&task, 10.0), Err(TheoryError::NotCentered)));
    }

    #[test]
    fn f_min_converges_to_transport_cost_at_rate_one_over_lambda() {
        let task = diag_task(&[2.0, 3.0]);
        let w2 = w2_identity_to_gaussian(&task);
        let mut scaled = Vec::new();
        for lambda in [100.0, 1000.0, 10_000.0] {
            let f = f_min(&task, lambda).unwrap();
            scaled.push(lambda * (f - w2).abs());
        }
        let max = scaled.iter().cloned().fold(0.0f64, f64::max);
        let min = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            max / min < 3.0,
            "λ·|f_min − W₂²| not stable across decades: {scaled:?}"
        );
    }

    /// Direct minimization over symmetric 2×2 A by Nelder–Mead must agree
    /// with the decoupled surrogate minimum.
    #[test]
    fn f_min_matches_full_matrix_nelder_mead() {
        let task = diag_task(&[2.0, 3.0]);
        let lambda = 10.0;
        let objective = |p: &[f64; 3]| {
            let a = Mat::from_vec(2, 2, vec![p[0], p[1], p[1], p[2]]);
            let sigma = task.cov.to_mat();
            let i = Mat::identity(2);
            a.sub(&i).frob_sq() + lambda * a.matmul(&a).sub(&sigma).frob_sq()
        };
        // standard Nelder–Mead (reflection 1, expansion 2, contraction ½, shrink ½)
        let mut simplex: Vec<[f64; 3]> = vec![
            [1.3, 0.1, 1.6],
            [1.6, 0.0, 1.7],
            [1.4, -0.1, 1.8],
            [1.5, 0.05, 1.9],
        ];
        for _ in 0..2000 {
            simplex.sort_by(|a, b| objective(a).partial_cmp(&objective(b)).unwrap());
            let centroid = {
                let mut c = [0.0; 3];
                for p in &simplex[..3] {
                    for k in 0..3 {
                        c[k] += p[k] / 3.0;
                    }
                }
                c
            };
            let worst = simplex[3];
            let shifted = |t: f64| {
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = centroid[k] + t * (centroid[k] - worst[k]);
                }
                p
            };
            let refl = shifted(1.0);
            let fr = objective(&refl);
            if fr < objective(&simplex[0]) {
                let exp = shifted(2.0);
                simplex[3] = if objective(&exp) < fr { exp } else { refl };
            } else if fr < objective(&simplex[2]) {
                simplex[3] = refl;
            } else {
                let con = shifted(-0.5);
                if objective(&con) < objective(&worst) {
                    simplex[3] = con;
                } else {
                    for i in 1..4 {
                        for k in 0..3 {
                            simplex[i][k] = simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k]);
                        }
                    }
                }
            }
        }
        simplex.sort_by(|a, b| objective(a).partial_cmp(&objective(b)).unwrap());
        let direct = objective(&simplex[0]);
        let oracle = f_min(&task, lambda).unwrap();
        assert!(
            (direct - oracle).abs() < 1e-4,
            "Nelder–Mead {direct} vs surrogate oracle {oracle}"
        );
    }

    #[test]
    fn surrogate_sum_is_a_global_lower_bound() {
        let task = diag_task(&[2.0, 3.0]);
        let lambda = 25.0;
        let floor = f_min(&task, lambda).unwrap();
        let sigma = task.cov.to_mat();
        let i2 = Mat::identity(2);
        let mut rng = StreamRng::new(3, &[7]);
        for _ in 0..100 {
            let (x, y, z) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            let a = Mat::from_vec(2, 2, vec![x, y, y, z]);
            let f = a.sub(&i2).frob_sq() + lambda * a.matmul(&a).sub(&sigma).frob_sq();
            assert!(f >= floor - 1e-12, "f(A) = {f} below floor {floor}");
        }
    }

    #[test]
    fn stability_bound_for_near_minimizers_in_the_eigen_frame() {
        let eigs: [f64; 2] = [2.0, 3.0];
        let sigma_min_sq = 2.0;
        let sigmas: Vec<f64> = eigs.iter().map(|l| l.sqrt()).collect();
        // task constant: worst-case squared minimizer offset scale
        let c_task = sigmas
            .iter()
            .map(|&s| ((1.0 - s).abs() / (s * s)).powi(2))
            .fold(0.0f64, f64::max);
        let d = eigs.len() as f64;
        for lambda in [100.0, 1000.0] {
            let mins: Vec<(f64, f64)> = sigmas
                .iter()
                .map(|&s| h_min_bruteforce(&SurrogateSpec::new(s, lambda)))
                .collect();
            let mut rng = StreamRng::new(lambda as u64, &[11]);
            for _ in 0..50 {
                let perturbed: Vec<f64> = mins
                    .iter()
                    .map(|&(a, _)| a + 0.05 / lambda.sqrt() * rng.normal())
                    .collect();
                let gap: f64 = perturbed
                    .iter()
                    .zip(&mins)
                    .zip(&sigmas)
                    .map(|((&x, &(_, v)), &s)| h_value(x, &SurrogateSpec::new(s, lambda)) - v)
                    .sum();
                let map_err_sq: f64 = perturbed
                    .iter()
                    .zip(&sigmas)
                    .map(|(&x, &s)| (x - s).powi(2))
                    .sum();
                let bound = gap / (1.0 + 2.0 * lambda * sigma_min_sq)
                    + 2.0 * d * c_task / (lambda * lambda);
                assert!(
                    map_err_sq <= bound,
                    "λ={lambda}: ‖A−Σ^½‖² = {map_err_sq} exceeds bound {bound}"
                );
            }
        }
    }

    #[test]
    fn excess_loss_near_zero_for_identity_params_on_identity_tasks() {
        let params = identity_forcing_params(2, 0.0);
        let tasks: Vec<GaussianTask> = (0..4).map(|_| diag_task(&[1.0, 1.0])).collect();
        let mut rng = StreamRng::new(5, &[2]);
        let report = excess_loss_estimate(&params, &tasks, 2000, &mut rng).unwrap();
        assert!((report.reference - 0.0).abs() < 1e-12);
        assert!(report.excess.abs() < 0.05, "excess {}", report.excess);
    }

    #[test]
    fn excess_loss_matches_direct_recomputation() {
        let params = identity_forcing_params(2, 7.0);
        let spec = TaskFamilySpec::diag_cov(2, 1.0, 3.0);
        let mut rng = StreamRng::new(9, &[4]);
        let tasks: Vec<GaussianTask> =
            (0..3).map(|i| crate::tasks::sample_task(&spec, i, &mut rng).unwrap()).collect();
        let mut rng_a = StreamRng::new(42, &[1]);
        let report = excess_loss_estimate(&params, &tasks, 50, &mut rng_a).unwrap();

        let mut rng_b = StreamRng::new(42, &[1]);
        let mut risk = 0.0;
        let mut reference = 0.0;
        for t in &tasks {
            let samples = sample_points(t, 100, &mut rng_b);
            risk += parametric::loss(&params, &samples).unwrap();
            reference += f_min(t, 7.0).unwrap();
        }
        assert!((report.risk - risk / 3.0).abs() < 1e-12);
        assert!((report.reference - reference / 3.0).abs() < 1e-12);
        assert!((report.excess - (risk - reference) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_params_map_error_recovers_sqrt_covariance_norm() {
        let mut params = identity_forcing_params(2, 1.0);
        params.q = Mat::zeros(2, 2);
        let task = diag_task(&[2.0, 3.0]);
        let mut rng = StreamRng::new(6, &[3]);
        let err = transport_map_error(&params, &[task.clone()], 100, &mut rng);
        let expected = ot_map_oracle(&task).0.to_mat().frob_sq();
        assert!((err - expected).abs() < 1e-12, "{err} vs {expected}");
    }

    #[test]
    fn map_error_decreases_with_prompt_length_for_identity_params() {
        // A = Σ_n, so ‖A − Σ^{1/2}‖² is dominated by ‖Σ − Σ^{1/2}‖² plus an
        // O(1/n) sampling term; compare against near-identity Σ where the
        // bias is small and the trend over n is visible.
        let params = identity_forcing_params(2, 1.0);
        let task = diag_task(&[1.01, 0.99]);
        let mut errs = Vec::new();
        for (i, n) in [500usize, 1500, 5000].iter().enumerate() {
            let mut rng = StreamRng::new(20, &[i as u64]);
            let tasks: Vec<GaussianTask> = vec![task.clone(); 40];
            errs.push(transport_map_error(&params, &tasks, *n, &mut rng));
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "not decreasing: {errs:?}");
    }

    #[test]
    fn exact_synthetic_scaling_fit_is_recovered() {
        let points: Vec<ScalingPoint> = [50usize, 100, 200, 400, 800, 1600]
            .iter()
            .map(|&n| {
                let nf = n as f64;
                ScalingPoint {
                    n,
                    error: 1.0 / nf.sqrt() + 2.0 / nf + 0.5,
                    kind: ErrorKind::ExcessLoss,
                }
            })
            .collect();
        let fit = fit_scaling_law(&points).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-10);
        assert!((fit.b - 2.0).abs() < 1e-10);
        assert!((fit.c - 0.5).abs() < 1e-10);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonneg_fit_matches_unconstrained_when_feasible() {
        let points: Vec<ScalingPoint> = [50usize, 100, 200, 400, 800]
            .iter()
            .map(|&n| {
                let nf = n as f64;
                ScalingPoint {
                    n,
                    error: 3.0 / nf.sqrt() + 1.0 / nf + 0.2,
                    kind: ErrorKind::MapError,
                }
            })
            .collect();
        let full = fit_scaling_law(&points).unwrap();
        let nn = fit_scaling_law_nonneg(&points).unwrap();
        assert!((full.a - nn.a).abs() < 1e-12);
        assert!((full.b - nn.b).abs() < 1e-12);
    }

    #[test]
    fn nonneg_fit_zeroes_the_missing_rate_term() {
        // data is exactly c + b/n; the unconstrained fit may assign the
        // n^{-1/2} column either sign under noise, the constrained one must
        // return a = 0 with the 1/n coefficient recovered
        let mut rng = StreamRng::new(13, &[1]);
        let points: Vec<ScalingPoint> = [500usize, 1000, 2000, 4000, 5000]
            .iter()
            .flat_map(|&n| {
                let mut local = Vec::new();
                for _ in 0..10 {
                    let nf = n as f64;
                    local.push(ScalingPoint {
                        n,
                        error: 10.0 / nf + 0.02 + 1e-4 * rng.normal() - 5e-3 / nf.sqrt(),
                        kind: ErrorKind::MapError,
                    });
                }
                local
            })
            .collect();
        let nn = fit_scaling_law_nonneg(&points).unwrap();
        assert!(nn.a >= 0.0 && nn.b >= 0.0);
        assert!((nn.b - 10.0).abs() < 1.0, "b = {}", nn.b);
        assert!(nn.r2 > 0.95, "r2 = {}", nn.r2);
    }

    #[test]
    fn degenerate_scaling_designs_are_rejected() {
        let p = |n: usize| ScalingPoint { n, error: 1.0, kind: ErrorKind::MapError };
        assert!(matches!(
            fit_scaling_law(&[p(10), p(20), p(30)]),
            Err(TheoryError::TooFewPoints { points: 3, distinct: 3 })
        ));
        assert!(matches!(
            fit_scaling_law(&[p(10), p(10), p(20), p(20)]),
            Err(TheoryError::TooFewPoints { points: 4, distinct: 2 })
        ));
    }
}
