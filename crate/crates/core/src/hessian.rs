//! Exact Hessian matrices of the Frobenius and Bures-Wasserstein losses in
//! covariance space, function space (through the factorization `Sigma =
//! W W^T`) and parameter space (per-layer blocks), plus condition-number
//! reports and finite-difference validation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bwloss::{self, Target, GRAD_FLOOR};
use crate::error::{CoreError, Result};
use crate::matcore::{self, commutation, kron, spectral_decompose, Mat, PsdMatrix, Vector};
use crate::network::NetParams;

/// Dense parameter-space assembly refuses dimensions beyond this.
pub const PARAM_DIM_LIMIT: usize = 5000;

/// Which vectorized coordinates a Hessian lives over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessSpace {
    /// Over `vec(Sigma)`, dimension `n^2`.
    Covariance,
    /// Over `vec(W)` of the end-to-end factor, dimension `n * d0`.
    Function,
    /// Over the stacked `vec(W_j)`, dimension `sum_j d_j d_{j-1}`.
    Parameter,
}

/// Which loss the Hessian differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `0.5 || Sigma + tau I - Sigma0 ||_F^2`.
    Frobenius,
    /// The (tau-perturbed) squared Bures-Wasserstein distance.
    BwTau,
}

/// Symmetric Hessian over vectorized coordinates.
#[derive(Debug, Clone)]
pub struct HessianMatrix {
    mat: Mat,
    space: HessSpace,
    loss_kind: LossKind,
}

impl HessianMatrix {
    fn new(mat: Mat, space: HessSpace, loss_kind: LossKind) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(CoreError::Input("Hessian must be square".into()));
        }
        let scale = mat.norm().max(1.0);
        let asym = (&mat - mat.transpose()).norm() / scale;
        if asym > 1e-8 {
            return Err(CoreError::Internal(format!(
                "Hessian asymmetric beyond round-off: relative residual {asym:.3e}"
            )));
        }
        Ok(Self {
            mat: matcore::sym_part(&mat),
            space,
            loss_kind,
        })
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn space(&self) -> HessSpace {
        self.space
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Result<Vector> {
        Ok(spectral_decompose(&self.mat)?.eigvals)
    }

    pub fn quad_form(&self, v: &Vector) -> f64 {
        (v.transpose() * &self.mat * v)[(0, 0)]
    }
}

/// Condition diagnostics of a symmetric Hessian.
#[derive(Debug, Clone, Copy)]
pub struct ConditionReport {
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Smallest eigenvalue magnitude above `zero_tol`.
    pub lambda_min_abs_nonzero: f64,
    /// `lambda_max / lambda_min` (signed).
    pub kappa_rel: f64,
    /// `lambda_max / lambda_min_abs_nonzero`.
    pub kappa_abs: f64,
    pub zero_tol: f64,
}

/// Hessian of the Frobenius covariance loss: the identity on `vec(Sigma)`.
pub fn hess_cov_frobenius(sigma: &PsdMatrix, target: &Target) -> Result<HessianMatrix> {
    let n = target.n();
    if sigma.n() != n {
        return Err(CoreError::Input("sigma / target dimension mismatch".into()));
    }
    HessianMatrix::new(Mat::identity(n * n, n * n), HessSpace::Covariance, LossKind::Frobenius)
}

/// Gradient of the Frobenius covariance loss, `Sigma + tau I - Sigma0`.
pub fn grad_cov_frobenius(sigma: &PsdMatrix, target: &Target) -> Mat {
    sigma.mat() + Mat::identity(sigma.n(), sigma.n()) * target.tau() - target.sigma0().mat()
}

/// Hessian of the (perturbed) BW covariance loss at `Sigma`, evaluated at
/// `Sigma_tau = Sigma + tau I`. Built from the Hadamard decomposition of
/// `P_ij = (sqrt(q_i) + sqrt(q_j))^{-1}` for the spectrum `q` of
/// `S Sigma_tau S`, `S = Sigma0^{1/2}`: the Hessian is
/// `sum_k sigma_k B_k (x) B_k` with `B_k = S Gamma Q^{-1/2} Diag(u_k) Gamma^T S`.
pub fn hess_cov_bw(sigma: &PsdMatrix, target: &Target) -> Result<HessianMatrix> {
    let n = target.n();
    if sigma.n() != n {
        return Err(CoreError::Input("sigma / target dimension mismatch".into()));
    }
    let s = target.sqrt_sigma0();
    let sigma_tau = sigma.mat() + Mat::identity(n, n) * target.tau();
    let a = matcore::sym_part(&(s * &sigma_tau * s));
    let eig = spectral_decompose(&a)?;
    let q_min = eig.lambda_min();
    if q_min < GRAD_FLOOR {
        return Err(CoreError::Singularity {
            lambda_min: q_min,
            floor: GRAD_FLOOR,
        });
    }
    let gamma = &eig.eigvecs;
    // P is symmetric with positive entries; keep the signed spectrum of its
    // eigendecomposition (P is generally indefinite).
    let p = Mat::from_fn(n, n, |i, j| 1.0 / (eig.eigvals[i].sqrt() + eig.eigvals[j].sqrt()));
    let p_eig = spectral_decompose(&p)?;
    let q_inv_sqrt = Mat::from_diagonal(&eig.eigvals.map(|q| 1.0 / q.sqrt()));
    let left = s * gamma * q_inv_sqrt;
    let mut h = Mat::zeros(n * n, n * n);
    for k in 0..n {
        let u = p_eig.eigvecs.column(k);
        let b = matcore::sym_part(&(&left * Mat::from_diagonal(&u.clone_owned()) * gamma.transpose() * s));
        h += kron(&b, &b) * p_eig.eigvals[k];
    }
    HessianMatrix::new(h, HessSpace::Covariance, LossKind::BwTau)
}

/// Covariance gradient of the selected loss kind, evaluated at
/// `Sigma_tau = Sigma + tau I`.
fn grad_cov_of(sigma_tau: &Mat, target: &Target, kind: LossKind) -> Result<Mat> {
    match kind {
        LossKind::Frobenius => Ok(sigma_tau - target.sigma0().mat()),
        LossKind::BwTau => {
            let psd = PsdMatrix::new(sigma_tau.clone())?;
            bwloss::grad_cov(&psd, target)
        }
    }
}

fn hess_cov_of(sigma: &PsdMatrix, target: &Target, kind: LossKind) -> Result<HessianMatrix> {
    match kind {
        LossKind::Frobenius => hess_cov_frobenius(sigma, target),
        LossKind::BwTau => hess_cov_bw(sigma, target),
    }
}

/// Scalar value of the selected covariance loss as a function of the
/// end-to-end factor `W` (with the target's `tau` applied).
pub fn loss_fn_scalar(w: &Mat, target: &Target, kind: LossKind) -> Result<f64> {
    let n = target.n();
    let sigma_tau = matcore::sym_part(&(w * w.transpose())) + Mat::identity(n, n) * target.tau();
    match kind {
        LossKind::Frobenius => Ok(0.5 * (&sigma_tau - target.sigma0().mat()).norm_squared()),
        LossKind::BwTau => bwloss::loss_eval(w, target).map(|e| e.value),
    }
}

/// Function-space gradient of the selected loss with respect to `W`:
/// `2 grad_f(Sigma_tau) W`.
pub fn grad_fn(w: &Mat, target: &Target, kind: LossKind) -> Result<Mat> {
    let n = target.n();
    let sigma_tau = matcore::sym_part(&(w * w.transpose())) + Mat::identity(n, n) * target.tau();
    Ok(grad_cov_of(&sigma_tau, target, kind)? * 2.0 * w)
}

/// Function-space Hessian of `W -> f(W W^T + tau I)` over `vec(W)`:
/// `J^T Hf J + 2 I_d (x) grad_f(Sigma_tau)` with
/// `J = (I + K_n)(W (x) I_n)`.
pub fn hess_fn(w: &Mat, target: &Target, kind: LossKind) -> Result<HessianMatrix> {
    let n = target.n();
    if w.nrows() != n {
        return Err(CoreError::Input("W must have as many rows as the target dimension".into()));
    }
    let d = w.ncols();
    let sigma = PsdMatrix::new(matcore::sym_part(&(w * w.transpose())))?;
    let sigma_tau = sigma.mat() + Mat::identity(n, n) * target.tau();
    let hf = hess_cov_of(&sigma, target, kind)?;
    let gf = grad_cov_of(&sigma_tau, target, kind)?;
    let j = (Mat::identity(n * n, n * n) + commutation(n, n)) * kron(w, &Mat::identity(n, n));
    let h = j.transpose() * hf.mat() * &j + kron(&Mat::identity(d, d), &(gf * 2.0));
    HessianMatrix::new(h, HessSpace::Function, kind)
}

/// Parameter-space Hessian of the composed loss over the stacked layers.
/// Block `(i, j)` is `R_i^T Hfn R_j` with `R_i = W_{i-1:1}^T (x) W_{N:i+1}`,
/// plus for `i < j` the curvature of the product map contracted with the
/// function-space gradient.
pub fn hess_param(params: &NetParams, target: &Target, kind: LossKind) -> Result<HessianMatrix> {
    let dims = params.dims();
    let depth = params.depth();
    let m: usize = (0..depth).map(|i| dims[i + 1] * dims[i]).sum();
    if m > PARAM_DIM_LIMIT {
        return Err(CoreError::DimensionLimit {
            dim: m,
            limit: PARAM_DIM_LIMIT,
        });
    }
    let w = params.compose();
    let hfn = hess_fn(&w, target, kind)?;
    let g = grad_fn(&w, target, kind)?;
    let prefixes = params.prefixes(); // prefixes[i] = W_{i:1}, prefixes[0] = I
    let suffixes = params.suffixes(); // suffixes[i] = W_{N:i+1}, suffixes[N] = I
    let r: Vec<Mat> = (0..depth)
        .map(|i| kron(&prefixes[i].transpose(), &suffixes[i + 1]))
        .collect();
    let offsets: Vec<usize> = std::iter::once(0)
        .chain((0..depth).scan(0, |acc, i| {
            *acc += dims[i + 1] * dims[i];
            Some(*acc)
        }))
        .collect();

    let mut h = Mat::zeros(m, m);
    for i in 0..depth {
        for j in i..depth {
            let mut block = r[i].transpose() * hfn.mat() * &r[j];
            if i < j {
                // Interior product W_{j:i+2} (layers i+2 ..= j, 1-indexed
                // i+1 .. j here 0-indexed), identity when j = i + 1.
                let mut interior = Mat::identity(dims[i + 1], dims[i + 1]);
                for layer in params.layers().iter().take(j).skip(i + 1) {
                    interior = layer * interior;
                }
                let outer = &prefixes[i] * g.transpose() * &suffixes[j + 1];
                block += kron(&outer, &interior.transpose()) * commutation(dims[j + 1], dims[j]);
            }
            let (ri, rj) = (offsets[i], offsets[j]);
            h.view_mut((ri, rj), (block.nrows(), block.ncols())).copy_from(&block);
            if i < j {
                h.view_mut((rj, ri), (block.ncols(), block.nrows()))
                    .copy_from(&block.transpose());
            }
        }
    }
    HessianMatrix::new(h, HessSpace::Parameter, kind)
}

/// Condition numbers of a Hessian. `zero_tol` defaults to
/// `1e-8 * |lambda_max|`.
pub fn condition_report(h: &HessianMatrix, zero_tol: Option<f64>) -> Result<ConditionReport> {
    let eigvals = h.eigenvalues()?;
    let lambda_max = eigvals[0];
    let lambda_min = eigvals[eigvals.len() - 1];
    let zero_tol = zero_tol.unwrap_or(1e-8 * lambda_max.abs());
    let lambda_min_abs_nonzero = eigvals
        .iter()
        .map(|l| l.abs())
        .filter(|a| *a > zero_tol)
        .fold(f64::INFINITY, f64::min);
    if !lambda_min_abs_nonzero.is_finite() {
        return Err(CoreError::Rank(
            "all Hessian eigenvalues fall below the zero tolerance".into(),
        ));
    }
    Ok(ConditionReport {
        lambda_max,
        lambda_min,
        lambda_min_abs_nonzero,
        kappa_rel: lambda_max / lambda_min,
        kappa_abs: lambda_max / lambda_min_abs_nonzero,
        zero_tol,
    })
}

/// Compare the quadratic form of `h` against central second differences of
/// `loss_fn` at `point` over `trials` random unit directions; returns the
/// maximum relative error. Covariance-space directions are symmetrized so
/// that perturbed points stay in the domain of the loss.
pub fn fd_quadratic_check<F>(
    loss_fn: F,
    point: &Vector,
    h: &HessianMatrix,
    trials: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Vector) -> Result<f64>,
{
    if point.len() != h.dim() {
        return Err(CoreError::Input("point / Hessian dimension mismatch".into()));
    }
    // A relatively coarse step keeps cancellation roundoff (~eps*|f|/step^2)
    // small; the Richardson extrapolation below removes the truncation term.
    let step = 1e-3 * (1.0 + point.norm());
    let f0 = loss_fn(point)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let mut v = Vector::from_fn(point.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        if h.space() == HessSpace::Covariance {
            let n = (point.len() as f64).sqrt().round() as usize;
            let vm = matcore::sym_part(&matcore::unvec(&v, n, n));
            v = matcore::vec_mat(&vm);
        }
        v /= v.norm();
        let quad = h.quad_form(&v);
        // Central second difference at two step sizes with Richardson
        // extrapolation, which cancels the O(step^2) truncation term.
        let diff2 = |s: f64| -> Result<f64> {
            let fp = loss_fn(&(point + &v * s))?;
            let fm = loss_fn(&(point - &v * s))?;
            Ok((fp - 2.0 * f0 + fm) / (s * s))
        };
        let coarse = diff2(step)?;
        let fine = diff2(0.5 * step)?;
        let fd = (4.0 * fine - coarse) / 3.0;
        let err = (quad - fd).abs() / quad.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Restriction of a covariance-space Hessian to the subspace of symmetric
/// matrices, in the orthonormal basis `e_ii`, `(e_ij + e_ji)/sqrt(2)`.
pub fn symmetric_restriction(h: &HessianMatrix) -> Result<Mat> {
    if h.space() != HessSpace::Covariance {
        return Err(CoreError::Input(
            "symmetric restriction only applies to covariance-space Hessians".into(),
        ));
    }
    let n = (h.dim() as f64).sqrt().round() as usize;
    let k = n * (n + 1) / 2;
    let mut basis = Mat::zeros(n * n, k);
    let mut col = 0;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..n {
        for j in i..n {
            if i == j {
                basis[(i + i * n, col)] = 1.0;
            } else {
                basis[(j + i * n, col)] = inv_sqrt2;
                basis[(i + j * n, col)] = inv_sqrt2;
            }
            col += 1;
        }
    }
    Ok(matcore::sym_part(&(basis.transpose() * h.mat() * basis)))
}
