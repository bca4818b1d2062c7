//! The Bures-Wasserstein (BW) loss between centered Gaussians, in covariance
//! space and in function space (through the factorization `Sigma = W W^T`),
//! together with its tau-perturbation, gradients, the variational/polar form,
//! the perturbation gap bound and the modified deficiency margin.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matcore::{
    self, polar_orthogonal, random_orthogonal, spectral_decompose, Mat, PsdMatrix, SymEig, Vector,
};

/// Below this floor the spectrum of `S Sigma S` counts as a rank drop and the
/// unperturbed gradient is declared unavailable rather than returned huge.
pub const GRAD_FLOOR: f64 = 1e-12;
/// Allowed negative round-off in trace differences before clamping to zero.
pub const NEG_CLAMP: f64 = 1e-10;
/// Relative eigenvalue-gap threshold under which a spectrum counts as
/// non-distinct for the closed-form critical-point constructions.
pub const DISTINCT_TOL: f64 = 1e-10;

/// Target covariance `Sigma0` with cached eigenpairs, the perturbation
/// parameter `tau` (0 means unperturbed) and derived constants.
#[derive(Debug, Clone)]
pub struct Target {
    sigma0: PsdMatrix,
    tau: f64,
    sqrt_sigma0: Mat,
    inv_sqrt_sigma0: Option<Mat>,
    sigma_min_sqrt: f64,
    trace_sigma0: f64,
    full_rank: bool,
    distinct: bool,
}

impl Target {
    pub fn new(sigma0: Mat, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(CoreError::Input(format!("tau must be finite and >= 0, got {tau}")));
        }
        let sigma0 = PsdMatrix::new(sigma0)?;
        let eig = sigma0.eig();
        let lmax = eig.lambda_max();
        let lmin = eig.lambda_min();
        let full_rank = lmin > 1e-12 * lmax.max(1e-300);
        let mut min_gap = f64::INFINITY;
        for j in 1..eig.eigvals.len() {
            min_gap = min_gap.min(eig.eigvals[j - 1] - eig.eigvals[j]);
        }
        let distinct = full_rank && (eig.eigvals.len() < 2 || min_gap > DISTINCT_TOL * lmax);
        let sqrt_sigma0 = sigma0.sqrt();
        let inv_sqrt_sigma0 = full_rank.then(|| sigma0.pow(-0.5));
        Ok(Self {
            sigma_min_sqrt: lmin.max(0.0).sqrt(),
            trace_sigma0: sigma0.trace(),
            sqrt_sigma0,
            inv_sqrt_sigma0,
            full_rank,
            distinct,
            sigma0,
            tau,
        })
    }

    /// Target from eigenpairs `Sigma0 = Omega diag(lambda) Omega^T`.
    pub fn from_spectrum(omega: Mat, lambda: Vector, tau: f64) -> Result<Self> {
        let n = lambda.len();
        if omega.nrows() != n || omega.ncols() != n {
            return Err(CoreError::Input("eigenbasis/eigenvalue shapes disagree".into()));
        }
        let sigma0 = &omega * Mat::from_diagonal(&lambda) * omega.transpose();
        Self::new(sigma0, tau)
    }

    /// Zipf-spectrum target: `lambda_j = (n / j) * lambda_min` with a seeded
    /// Haar-orthogonal eigenbasis.
    pub fn zipf(n: usize, lambda_min: f64, seed: u64, tau: f64) -> Result<Self> {
        if n == 0 || !(lambda_min > 0.0) {
            return Err(CoreError::Input("zipf target needs n >= 1 and lambda_min > 0".into()));
        }
        let omega = random_orthogonal(n, seed);
        let lambda = Vector::from_fn(n, |j, _| (n as f64) / ((j + 1) as f64) * lambda_min);
        Self::from_spectrum(omega, lambda, tau)
    }

    pub fn n(&self) -> usize {
        self.sigma0.n()
    }

    pub fn sigma0(&self) -> &PsdMatrix {
        &self.sigma0
    }

    pub fn eig(&self) -> &SymEig {
        self.sigma0.eig()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let mut t = self.clone();
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(CoreError::Input(format!("tau must be finite and >= 0, got {tau}")));
        }
        t.tau = tau;
        Ok(t)
    }

    pub fn sqrt_sigma0(&self) -> &Mat {
        &self.sqrt_sigma0
    }

    pub fn inv_sqrt_sigma0(&self) -> Option<&Mat> {
        self.inv_sqrt_sigma0.as_ref()
    }

    /// `sigma_min(Sigma0^{1/2}) = sqrt(lambda_min)`.
    pub fn sigma_min_sqrt(&self) -> f64 {
        self.sigma_min_sqrt
    }

    pub fn trace_sigma0(&self) -> f64 {
        self.trace_sigma0
    }

    pub fn lambda_min(&self) -> f64 {
        self.sigma0.lambda_min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.sigma0.lambda_max()
    }

    pub fn is_full_rank(&self) -> bool {
        self.full_rank
    }

    pub fn has_distinct_spectrum(&self) -> bool {
        self.distinct
    }
}

/// JSON document for persisting a target (eigenbasis row-major).
#[derive(Debug, Serialize, Deserialize)]
pub struct TargetDoc {
    pub n: usize,
    pub lambda: Vec<f64>,
    /// Row-major n x n eigenbasis.
    pub omega: Vec<f64>,
}

impl TargetDoc {
    pub fn from_target(t: &Target) -> Self {
        let eig = t.eig();
        let n = t.n();
        let mut omega = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                omega.push(eig.eigvecs[(i, j)]);
            }
        }
        Self {
            n,
            lambda: eig.eigvals.iter().copied().collect(),
            omega,
        }
    }

    pub fn to_target(&self, tau: f64) -> Result<Target> {
        if self.omega.len() != self.n * self.n || self.lambda.len() != self.n {
            return Err(CoreError::Input("target document has inconsistent dimensions".into()));
        }
        let omega = Mat::from_fn(self.n, self.n, |i, j| self.omega[i * self.n + j]);
        Target::from_spectrum(omega, Vector::from_vec(self.lambda.clone()), tau)
    }
}

/// A loss value with (optionally) its function-space gradient.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    /// `None` when the argument spectrum fell below [`GRAD_FLOOR`] in the
    /// unperturbed case.
    pub gradient: Option<Mat>,
    /// `lambda_min(Sigma0^{1/2} Sigma_tau Sigma0^{1/2})`, diagnostic.
    pub min_eig_arg: f64,
}

impl LossEval {
    pub fn grad(&self) -> Result<&Mat> {
        self.gradient.as_ref().ok_or(CoreError::Singularity {
            lambda_min: self.min_eig_arg,
            floor: GRAD_FLOOR,
        })
    }
}

/// Trace of the principal square root from a descending eigenvalue list.
/// Eigenvalues that are zero up to round-off (relative to the largest) are
/// clamped before the square root: sqrt(1e-15) would otherwise inject 1e-8
/// errors at rank-deficient arguments.
fn trace_sqrt(eigvals: &Vector) -> f64 {
    let floor = matcore::PSD_CLAMP_TOL * eigvals[0].max(0.0);
    eigvals
        .iter()
        .map(|&q| if q <= floor { 0.0 } else { q.sqrt() })
        .sum()
}

fn clamp_value(raw: f64) -> Result<f64> {
    if raw < -NEG_CLAMP {
        return Err(CoreError::Internal(format!(
            "squared distance evaluated to {raw:.3e} < -{NEG_CLAMP:.0e}"
        )));
    }
    Ok(raw.max(0.0))
}

/// Squared BW distance computed from a plain symmetric PSD `sigma`.
fn bw_squared_raw(sigma: &Mat, target: &Target) -> Result<f64> {
    let s = target.sqrt_sigma0();
    let a = matcore::sym_part(&(s * sigma * s));
    let eig = spectral_decompose(&a)?;
    let cross = trace_sqrt(&eig.eigvals);
    let value = clamp_value(sigma.trace() + target.trace_sigma0() - 2.0 * cross)?;
    debug_assert!(
        value + 1e-9 * (1.0 + value.abs()) >= 0.5 * sigma.trace() - target.trace_sigma0(),
        "trace floor violated"
    );
    Ok(value)
}

/// Squared BW distance `tr(Sigma + Sigma0 - 2 (Sigma0^{1/2} Sigma Sigma0^{1/2})^{1/2})`.
pub fn bw_squared(sigma: &PsdMatrix, target: &Target) -> Result<f64> {
    bw_squared_raw(sigma.mat(), target)
}

/// Variational form: minimizes `||Sigma^{1/2} - Sigma0^{1/2} U||_F^2` over
/// orthogonal `U`; the minimizer is the orthogonal polar factor of
/// `Sigma0^{1/2} Sigma^{1/2}`. Returns `(value, u_bar)`.
pub fn bw_variational(sigma: &PsdMatrix, target: &Target) -> Result<(f64, Mat)> {
    let sqrt_sigma = sigma.sqrt();
    let u_bar = polar_orthogonal(&(target.sqrt_sigma0() * &sqrt_sigma))?;
    let diff = &sqrt_sigma - target.sqrt_sigma0() * &u_bar;
    Ok((diff.norm_squared(), u_bar))
}

/// Function-space loss `L1(W) = B^2(W W^T, Sigma0)` with gradient
/// `2W - 2 S (S W W^T S)^{-1/2} S W`, `S = Sigma0^{1/2}`. The gradient is
/// unavailable when the spectrum of `S W W^T S` drops below [`GRAD_FLOOR`].
pub fn loss_fn(w: &Mat, target: &Target) -> Result<LossEval> {
    loss_eval_at(w, target, 0.0)
}

/// Perturbed function-space loss `L1_tau(W) = B^2(W W^T + tau I, Sigma0)`;
/// requires `target.tau() > 0` and always carries a gradient.
pub fn loss_fn_tau(w: &Mat, target: &Target) -> Result<LossEval> {
    if !(target.tau() > 0.0) {
        return Err(CoreError::Input("loss_fn_tau requires tau > 0".into()));
    }
    loss_eval_at(w, target, target.tau())
}

/// Loss actually being optimized for this target: `L1_tau` when `tau > 0`,
/// otherwise `L1`.
pub fn loss_eval(w: &Mat, target: &Target) -> Result<LossEval> {
    loss_eval_at(w, target, target.tau())
}

fn loss_eval_at(w: &Mat, target: &Target, tau: f64) -> Result<LossEval> {
    let n = target.n();
    if w.nrows() != n {
        return Err(CoreError::Input(format!(
            "W has {} rows, target dimension is {}",
            w.nrows(),
            n
        )));
    }
    let mut sigma = w * w.transpose();
    for i in 0..n {
        sigma[(i, i)] += tau;
    }
    let s = target.sqrt_sigma0();
    let a = matcore::sym_part(&(s * &sigma * s));
    let eig = spectral_decompose(&a)?;
    let min_eig_arg = eig.lambda_min();
    let cross = trace_sqrt(&eig.eigvals);
    let value = clamp_value(sigma.trace() + target.trace_sigma0() - 2.0 * cross)?;
    debug_assert!(
        value + 1e-9 * (1.0 + value.abs()) >= 0.5 * sigma.trace() - target.trace_sigma0(),
        "trace floor violated"
    );
    let gradient = if min_eig_arg >= GRAD_FLOOR {
        let inv_sqrt_a = eig.map(|q| 1.0 / q.sqrt());
        Some(w * 2.0 - s * inv_sqrt_a * s * w * 2.0)
    } else {
        None
    };
    Ok(LossEval {
        value,
        gradient,
        min_eig_arg,
    })
}

/// Covariance-space gradient `I - S (S Sigma S)^{-1/2} S`, `S = Sigma0^{1/2}`.
pub fn grad_cov(sigma: &PsdMatrix, target: &Target) -> Result<Mat> {
    grad_cov_raw(sigma.mat(), target)
}

pub(crate) fn grad_cov_raw(sigma: &Mat, target: &Target) -> Result<Mat> {
    let s = target.sqrt_sigma0();
    let a = matcore::sym_part(&(s * sigma * s));
    let eig = spectral_decompose(&a)?;
    let lmin = eig.lambda_min();
    if lmin < GRAD_FLOOR {
        return Err(CoreError::Singularity {
            lambda_min: lmin,
            floor: GRAD_FLOOR,
        });
    }
    let inv_sqrt_a = eig.map(|q| 1.0 / q.sqrt());
    let n = target.n();
    Ok(matcore::sym_part(&(Mat::identity(n, n) - s * inv_sqrt_a * s)))
}

/// Closed-form bound on the perturbation gap `|L1_tau - L1|`:
/// `n sqrt(tau) (sqrt(tau) + 2 lambda_max(Sigma0^{1/2}) / lambda_min(Sigma0^{1/2}))`.
pub fn gap_bound(target: &Target, tau: f64, n: usize) -> Result<f64> {
    if !target.is_full_rank() {
        return Err(CoreError::Rank("gap bound requires a full-rank target".into()));
    }
    if tau == 0.0 {
        return Ok(0.0);
    }
    let lmax_sqrt = target.lambda_max().sqrt();
    let lmin_sqrt = target.sigma_min_sqrt();
    Ok(n as f64 * tau.sqrt() * (tau.sqrt() + 2.0 * lmax_sqrt / lmin_sqrt))
}

/// Modified deficiency margin
/// `c = sigma_min(Sigma0^{1/2}) - min_U ||(W W^T)^{1/2} - Sigma0^{1/2} U||_F`;
/// a positive value certifies the margin. Exact via the polar factor.
pub fn mdm_margin(w: &Mat, target: &Target) -> Result<f64> {
    let sigma = PsdMatrix::new(w * w.transpose())?;
    let (value, _) = bw_variational(&sigma, target)?;
    Ok(target.sigma_min_sqrt() - value.max(0.0).sqrt())
}

/// Lower bound `B^2(Sigma, Sigma0) >= tr(Sigma)/2 - tr(Sigma0)` (with a small
/// round-off slack); also asserted in debug builds on every loss evaluation.
pub fn trace_floor(sigma: &PsdMatrix, target: &Target) -> Result<bool> {
    let value = bw_squared(sigma, target)?;
    Ok(value + 1e-9 * (1.0 + value.abs()) >= 0.5 * sigma.trace() - target.trace_sigma0())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{random_orthogonal, sym_part};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_pd(n: usize, seed: u64) -> Mat {
        let a = random_mat(n, n, seed);
        &a * a.transpose() + Mat::identity(n, n) * 0.3
    }

    fn diag_target(d: &[f64], tau: f64) -> Target {
        Target::new(Mat::from_diagonal(&Vector::from_vec(d.to_vec())), tau).unwrap()
    }

    #[test]
    fn bw_zero_on_equal_arguments() {
        let t = diag_target(&[1.0, 2.0, 3.0], 0.0);
        let sigma = PsdMatrix::new(t.sigma0().mat().clone()).unwrap();
        assert!(bw_squared(&sigma, &t).unwrap() < 1e-12);
    }

    #[test]
    fn bw_known_value_identity_vs_diag12() {
        let t = diag_target(&[1.0, 2.0], 0.0);
        let sigma = PsdMatrix::new(Mat::identity(2, 2)).unwrap();
        let v = bw_squared(&sigma, &t).unwrap();
        let expect = (2.0f64.sqrt() - 1.0).powi(2);
        assert!((v - expect).abs() < 1e-12, "got {v}, want {expect}");
    }

    #[test]
    fn bw_hellinger_reduction_commuting() {
        let t = diag_target(&[1.0], 0.0);
        let sigma = PsdMatrix::new(Mat::from_vec(1, 1, vec![4.0])).unwrap();
        assert!((bw_squared(&sigma, &t).unwrap() - 1.0).abs() < 1e-12);
        // Simultaneously diagonalizable pair in a rotated basis.
        let q = random_orthogonal(4, 5);
        let d1 = Vector::from_vec(vec![4.0, 2.0, 1.0, 0.5]);
        let d0 = Vector::from_vec(vec![1.0, 3.0, 2.0, 0.25]);
        let sigma = PsdMatrix::new(&q * Mat::from_diagonal(&d1) * q.transpose()).unwrap();
        let t = Target::new(&q * Mat::from_diagonal(&d0) * q.transpose(), 0.0).unwrap();
        let direct = bw_squared(&sigma, &t).unwrap();
        let hell: f64 = d1
            .iter()
            .zip(d0.iter())
            .map(|(&a, &b)| (a.sqrt() - b.sqrt()).powi(2))
            .sum();
        assert!((direct - hell).abs() < 1e-10);
    }

    #[test]
    fn bw_symmetry_and_metric_axioms() {
        for seed in 0..30 {
            let a = random_pd(5, 2 * seed);
            let b = random_pd(5, 2 * seed + 1);
            let c = random_pd(5, 1000 + seed);
            let ta = Target::new(a.clone(), 0.0).unwrap();
            let tb = Target::new(b.clone(), 0.0).unwrap();
            let tc = Target::new(c.clone(), 0.0).unwrap();
            let pa = PsdMatrix::new(a.clone()).unwrap();
            let pb = PsdMatrix::new(b.clone()).unwrap();
            let dab = bw_squared(&pa, &tb).unwrap();
            let dba = bw_squared(&pb, &ta).unwrap();
            assert!((dab - dba).abs() <= 1e-9 * (1.0 + dab.abs()));
            assert!(dab >= 0.0);
            let d_ab = dab.sqrt();
            let d_ac = bw_squared(&pa, &tc).unwrap().sqrt();
            let d_cb = bw_squared(&PsdMatrix::new(c).unwrap(), &tb).unwrap().sqrt();
            assert!(d_ab <= d_ac + d_cb + 1e-9);
        }
    }

    #[test]
    fn bw_unitary_invariance() {
        for seed in 0..20 {
            let a = random_pd(5, 3000 + seed);
            let b = random_pd(5, 4000 + seed);
            let q = random_orthogonal(5, 5000 + seed);
            let base = bw_squared(&PsdMatrix::new(a.clone()).unwrap(), &Target::new(b.clone(), 0.0).unwrap()).unwrap();
            let rot = bw_squared(
                &PsdMatrix::new(&q * &a * q.transpose()).unwrap(),
                &Target::new(&q * &b * q.transpose(), 0.0).unwrap(),
            )
            .unwrap();
            assert!((base - rot).abs() <= 1e-9 * (1.0 + base.abs()));
        }
    }

    #[test]
    fn bw_translation_non_invariance_witness() {
        // Sigma = I2, Sigma0 = diag(1,2), T = I2.
        let before = bw_squared(
            &PsdMatrix::new(Mat::identity(2, 2)).unwrap(),
            &diag_target(&[1.0, 2.0], 0.0),
        )
        .unwrap();
        let after = bw_squared(
            &PsdMatrix::new(Mat::identity(2, 2) * 2.0).unwrap(),
            &diag_target(&[2.0, 3.0], 0.0),
        )
        .unwrap();
        let expect = (3.0f64.sqrt() - 2.0f64.sqrt()).powi(2) - (2.0f64.sqrt() - 1.0).powi(2);
        assert!(((after - before) - expect).abs() < 1e-12);
        assert!(expect.abs() > 1e-3);
    }

    #[test]
    fn bw_sqrt_space_translation_witness() {
        // Square-root-space witness: roots A = [[1,1],[1,2]], B = diag(1,2),
        // shifted by T = I2; the defect of B^2(A^2, B^2) is about 0.121229.
        let a = Mat::from_vec(2, 2, vec![1.0, 1.0, 1.0, 2.0]);
        let b = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0]));
        let e0 = bw_squared(
            &PsdMatrix::new(&a * &a).unwrap(),
            &Target::new(&b * &b, 0.0).unwrap(),
        )
        .unwrap();
        let a1 = &a + Mat::identity(2, 2);
        let b1 = &b + Mat::identity(2, 2);
        let e1 = bw_squared(
            &PsdMatrix::new(&a1 * &a1).unwrap(),
            &Target::new(&b1 * &b1, 0.0).unwrap(),
        )
        .unwrap();
        assert!(((e1 - e0) - 0.121229).abs() < 1e-5, "defect {}", e1 - e0);
    }

    #[test]
    fn variational_agrees_with_trace_form() {
        let t = diag_target(&[1.0, 2.0], 0.0);
        let (v, u) = bw_variational(&PsdMatrix::new(t.sigma0().mat().clone()).unwrap(), &t).unwrap();
        assert!(v < 1e-12);
        assert!((u - Mat::identity(2, 2)).norm() < 1e-9);

        let (v, _) = bw_variational(&PsdMatrix::new(Mat::identity(2, 2)).unwrap(), &t).unwrap();
        assert!((v - (2.0f64.sqrt() - 1.0).powi(2)).abs() < 1e-9);

        for seed in 0..50 {
            let a = random_pd(5, 7000 + seed);
            let b = random_pd(5, 8000 + seed);
            let t = Target::new(b, 0.0).unwrap();
            let p = PsdMatrix::new(a).unwrap();
            let direct = bw_squared(&p, &t).unwrap();
            let (varf, u) = bw_variational(&p, &t).unwrap();
            assert!((direct - varf).abs() <= 1e-9 * (1.0 + direct));
            assert!((u.transpose() * &u - Mat::identity(5, 5)).norm() < 1e-10);
        }
    }

    #[test]
    fn loss_fn_zero_at_target_factor() {
        let t = diag_target(&[1.0, 2.0, 3.0], 0.0);
        let w = t.sigma0().sqrt();
        let e = loss_fn(&w, &t).unwrap();
        assert!(e.value < 1e-12);
        assert!(e.grad().unwrap().norm() < 1e-7);
    }

    fn fd_grad(f: &dyn Fn(&Mat) -> f64, w: &Mat) -> Mat {
        let h = 1e-5 * (1.0 + w.norm());
        let mut g = Mat::zeros(w.nrows(), w.ncols());
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[(i, j)] += h;
                wm[(i, j)] -= h;
                g[(i, j)] = (f(&wp) - f(&wm)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn loss_fn_gradient_matches_finite_differences() {
        let t = Target::new(random_pd(4, 1), 0.0).unwrap();
        for seed in 0..5 {
            let w = random_mat(4, 4, 9000 + seed) + Mat::identity(4, 4);
            let e = loss_fn(&w, &t).unwrap();
            let g = e.grad().unwrap();
            let fd = fd_grad(&|x| loss_fn(x, &t).unwrap().value, &w);
            assert!((g - &fd).norm() <= 1e-6 * (1.0 + g.norm()), "fd mismatch");
        }
    }

    #[test]
    fn loss_fn_gradient_norm_identity() {
        for seed in 0..100 {
            let n = 2 + (seed as usize) % 5;
            let t = Target::new(random_pd(n, 10_000 + seed), 0.0).unwrap();
            let w = random_mat(n, n + 1, 20_000 + seed);
            let e = loss_fn(&w, &t).unwrap();
            if e.value < 1e-10 {
                continue;
            }
            let g = e.grad().unwrap();
            let ratio = g.norm_squared() / (4.0 * e.value);
            assert!((ratio - 1.0).abs() <= 1e-8, "ratio {ratio}");
        }
    }

    #[test]
    fn loss_fn_gradient_unavailable_on_rank_drop() {
        let t = diag_target(&[1.0, 2.0], 0.0);
        let w = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]); // rank 1
        let e = loss_fn(&w, &t).unwrap();
        assert!(e.gradient.is_none());
        assert!(matches!(e.grad(), Err(CoreError::Singularity { .. })));
    }

    #[test]
    fn loss_fn_tau_zero_matrix_value() {
        let lambda = [3.0, 2.0, 0.5];
        let tau = 0.25;
        let t = diag_target(&lambda, tau);
        let e = loss_fn_tau(&Mat::zeros(3, 3), &t).unwrap();
        let expect: f64 = lambda.iter().map(|&l| (l.sqrt() - tau.sqrt()).powi(2)).sum();
        assert!((e.value - expect).abs() < 1e-12);
        assert!(e.gradient.is_some());
    }

    #[test]
    fn loss_fn_tau_gradient_matches_finite_differences() {
        let t = Target::new(random_pd(4, 2), 0.1).unwrap();
        for seed in 0..5 {
            let w = random_mat(4, 4, 30_000 + seed);
            let e = loss_fn_tau(&w, &t).unwrap();
            let g = e.grad().unwrap();
            let fd = fd_grad(&|x| loss_fn_tau(x, &t).unwrap().value, &w);
            assert!((g - &fd).norm() <= 1e-6 * (1.0 + g.norm()));
        }
    }

    #[test]
    fn loss_fn_tau_limit_matches_unperturbed() {
        let t0 = Target::new(random_pd(4, 3), 0.0).unwrap();
        let tt = t0.with_tau(1e-10).unwrap();
        let w = random_mat(4, 4, 40_000) + Mat::identity(4, 4) * 2.0;
        let a = loss_fn(&w, &t0).unwrap().value;
        let b = loss_fn_tau(&w, &tt).unwrap().value;
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn grad_cov_zero_at_target_and_chain_rule() {
        let t = Target::new(random_pd(4, 4), 0.1).unwrap();
        let at_target = grad_cov(&PsdMatrix::new(t.sigma0().mat().clone()).unwrap(), &t).unwrap();
        assert!(at_target.norm() < 1e-9);

        let w = random_mat(4, 4, 50_000);
        let sigma_tau = &w * w.transpose() + Mat::identity(4, 4) * t.tau();
        let g_cov = grad_cov(&PsdMatrix::new(sigma_tau).unwrap(), &t).unwrap();
        let g_fn = loss_fn_tau(&w, &t).unwrap().gradient.unwrap();
        assert!((&g_cov * &w * 2.0 - &g_fn).norm() < 1e-10 * (1.0 + g_fn.norm()));
    }

    #[test]
    fn grad_cov_matches_finite_differences() {
        let t = Target::new(random_pd(4, 5), 0.0).unwrap();
        let sigma = random_pd(4, 60_000);
        let g = grad_cov(&PsdMatrix::new(sigma.clone()).unwrap(), &t).unwrap();
        // Directional FD along random symmetric directions.
        let h = 1e-5 * (1.0 + sigma.norm());
        for seed in 0..10 {
            let v = sym_part(&random_mat(4, 4, 70_000 + seed));
            let v = &v / v.norm();
            let fp = bw_squared_raw(&(&sigma + &v * h), &t).unwrap();
            let fm = bw_squared_raw(&(&sigma - &v * h), &t).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let dir = (g.transpose() * &v).trace();
            assert!((fd - dir).abs() <= 1e-5 * (1.0 + dir.abs()));
        }
    }

    #[test]
    fn gap_bound_examples_and_property() {
        let t = Target::new(Mat::identity(2, 2), 0.0).unwrap();
        assert_eq!(gap_bound(&t, 0.0, 2).unwrap(), 0.0);
        let b = gap_bound(&t, 0.01, 2).unwrap();
        assert!((b - 0.42).abs() < 1e-12);

        let t0 = Target::new(random_pd(4, 6), 0.0).unwrap();
        for seed in 0..100 {
            let w = random_mat(4, 4, 80_000 + seed);
            let tau = 10f64.powf(-6.0 + 6.0 * (seed as f64) / 100.0);
            let tt = t0.with_tau(tau).unwrap();
            let lt = loss_fn_tau(&w, &tt).unwrap().value;
            let l0 = loss_fn(&w, &t0).unwrap().value;
            let bound = gap_bound(&t0, tau, 4).unwrap();
            assert!((lt - l0).abs() <= bound, "gap {} > bound {}", (lt - l0).abs(), bound);
        }
    }

    #[test]
    fn gap_bound_rejects_rank_deficient_target() {
        let t = diag_target(&[1.0, 0.0], 0.0);
        assert!(matches!(gap_bound(&t, 0.1, 2), Err(CoreError::Rank(_))));
    }

    #[test]
    fn mdm_margin_examples() {
        let t = Target::new(random_pd(4, 7), 0.0).unwrap();
        let w = t.sigma0().sqrt();
        let c = mdm_margin(&w, &t).unwrap();
        assert!((c - t.sigma_min_sqrt()).abs() < 1e-8);

        let t = Target::new(Mat::identity(2, 2), 0.0).unwrap();
        let c = mdm_margin(&Mat::zeros(2, 2), &t).unwrap();
        assert!((c - (1.0 - 2.0f64.sqrt())).abs() < 1e-12);
        assert!(c < 0.0);
    }

    #[test]
    fn trace_floor_holds() {
        let t = Target::new(Mat::identity(2, 2), 0.0).unwrap();
        let sigma = PsdMatrix::new(Mat::identity(2, 2) * 9.0).unwrap();
        let v = bw_squared(&sigma, &t).unwrap();
        assert!((v - 8.0).abs() < 1e-12);
        assert!(trace_floor(&sigma, &t).unwrap());
        for seed in 0..100 {
            let sigma = PsdMatrix::new(random_pd(4, 90_000 + seed)).unwrap();
            let t = Target::new(random_pd(4, 95_000 + seed), 0.0).unwrap();
            assert!(trace_floor(&sigma, &t).unwrap());
        }
    }

    #[test]
    fn target_doc_roundtrip() {
        let t = Target::zipf(5, 0.5, 3, 0.1).unwrap();
        let doc = TargetDoc::from_target(&t);
        let json = serde_json::to_string(&doc).unwrap();
        let doc2: TargetDoc = serde_json::from_str(&json).unwrap();
        let t2 = doc2.to_target(0.1).unwrap();
        assert!((t.sigma0().mat() - t2.sigma0().mat()).norm() < 1e-12);
        // Zipf spectrum: lambda_j = (n/j) lambda_min.
        assert!((t.eig().eigvals[0] - 2.5).abs() < 1e-12);
        assert!((t.eig().eigvals[4] - 0.5).abs() < 1e-12);
    }
}
