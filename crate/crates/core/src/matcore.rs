//! Dense matrix kernels used by every other module: spectral decomposition,
//! PSD square roots, thin SVD, polar factors, Kronecker/vec/commutation
//! utilities and seeded Haar-orthogonal sampling.
//!
//! All square roots go through the symmetric eigendecomposition rather than a
//! Newton-Schulz iteration: the matrices here are small (n up to a few
//! hundred) and the downstream formulas are spectral anyway, so robustness
//! wins over speed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative symmetry tolerance for inputs that are supposed to be symmetric.
pub const SYM_TOL: f64 = 1e-10;
/// Relative numerical-rank tolerance for thin SVDs: sigma_i > RANK_TOL * sigma_1.
pub const RANK_TOL: f64 = 1e-10;
/// Relative clamp tolerance for eigenvalues of nominally-PSD matrices.
pub const PSD_CLAMP_TOL: f64 = 1e-12;

pub fn sym_part(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

fn check_finite(a: &Mat) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Input("matrix has non-finite entries".into()))
    }
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Orthogonal matrix; column j is the eigenvector for `eigvals[j]`.
    pub eigvecs: Mat,
    /// Eigenvalues, descending.
    pub eigvals: Vector,
}

impl SymEig {
    /// Omega f(Lambda) Omega^T.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        let d = self.eigvals.map(f);
        &self.eigvecs * Mat::from_diagonal(&d) * self.eigvecs.transpose()
    }

    pub fn reconstruct(&self) -> Mat {
        self.map(|x| x)
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigvals[0]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigvals[self.eigvals.len() - 1]
    }
}

/// Decompose a symmetric matrix. The input is symmetrized first; asymmetry
/// beyond `SYM_TOL` (relative) is rejected. Deterministic: eigenvalues are
/// sorted descending (ties kept in solver order) and each eigenvector has its
/// first nonzero component made positive.
pub fn spectral_decompose(s: &Mat) -> Result<SymEig> {
    check_finite(s)?;
    if s.nrows() != s.ncols() {
        return Err(CoreError::Input(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.norm();
    let asym = (s - s.transpose()).norm();
    if asym > SYM_TOL * scale.max(1e-300) {
        return Err(CoreError::Input(format!(
            "matrix is not symmetric: relative asymmetry {:.3e}",
            asym / scale
        )));
    }
    let se = sym_part(s).symmetric_eigen();
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut eigvals = Vector::zeros(n);
    let mut eigvecs = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigvals[dst] = se.eigenvalues[src];
        let col = se.eigenvectors.column(src);
        let flip = col.iter().find(|&&x| x != 0.0).map_or(1.0, |&x| x.signum());
        eigvecs.column_mut(dst).copy_from(&(col * flip));
    }
    Ok(SymEig { eigvecs, eigvals })
}

/// Symmetric PSD matrix with its spectral decomposition cached.
#[derive(Debug, Clone)]
pub struct PsdMatrix {
    mat: Mat,
    eig: SymEig,
}

impl PsdMatrix {
    /// Validates PSD-ness up to round-off: eigenvalues in
    /// `[-clamp_tol, 0)` with `clamp_tol = PSD_CLAMP_TOL * lambda_max` are
    /// clamped to zero, anything more negative is an error.
    pub fn new(mat: Mat) -> Result<Self> {
        let mut eig = spectral_decompose(&mat)?;
        let lmax = eig.lambda_max().max(0.0);
        let clamp_tol = PSD_CLAMP_TOL * lmax;
        let lmin = eig.lambda_min();
        if lmin < -clamp_tol {
            return Err(CoreError::NotPsd {
                lambda_min: lmin,
                tol: clamp_tol,
            });
        }
        for v in eig.eigvals.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(Self {
            mat: sym_part(&mat),
            eig,
        })
    }

    pub fn from_eig(eig: SymEig) -> Self {
        Self {
            mat: eig.reconstruct(),
            eig,
        }
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn eig(&self) -> &SymEig {
        &self.eig
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn sqrt(&self) -> Mat {
        self.eig.map(f64::sqrt)
    }

    pub fn pow(&self, p: f64) -> Mat {
        // For positive powers, eigenvalues that are zero up to round-off are
        // clamped before exponentiation: (1e-15)^{1/3} would otherwise turn
        // numerical zeros into 1e-5-sized noise.
        if p == 0.0 {
            return Mat::identity(self.n(), self.n());
        }
        let zero_floor = if p > 0.0 {
            PSD_CLAMP_TOL * self.lambda_max().max(0.0)
        } else {
            0.0
        };
        self.eig
            .map(|x| if x <= zero_floor { 0.0 } else { x.powf(p) })
    }

    pub fn lambda_min(&self) -> f64 {
        self.eig.lambda_min()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eig.lambda_max()
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }
}

/// Principal square root of a PSD matrix.
pub fn sqrtm_psd(s: &Mat) -> Result<Mat> {
    Ok(PsdMatrix::new(s.clone())?.sqrt())
}

/// Inverse square root of a positive definite matrix whose spectrum stays
/// above `floor`.
pub fn invsqrtm_pd(s: &Mat, floor: f64) -> Result<Mat> {
    let eig = spectral_decompose(s)?;
    let lmin = eig.lambda_min();
    if lmin < floor {
        return Err(CoreError::Singularity {
            lambda_min: lmin,
            floor,
        });
    }
    Ok(eig.map(|x| 1.0 / x.sqrt()))
}

/// Thin SVD truncated at the numerical rank.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    /// n x k, orthonormal columns.
    pub left: Mat,
    /// k positive singular values, descending.
    pub singvals: Vector,
    /// m x k, orthonormal columns.
    pub right: Mat,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.singvals.len()
    }

    pub fn reconstruct(&self) -> Mat {
        &self.left * Mat::from_diagonal(&self.singvals) * self.right.transpose()
    }
}

/// One-sided Jacobi SVD of a tall matrix (`m >= n`). Returns `(u, sigma, v)`
/// with `a = u * diag(sigma) * v^T`, `sigma` descending, `v` orthogonal
/// `n x n`, and the columns of `u` orthonormal wherever the corresponding
/// singular value is nonzero (zero-singular-value columns of `u` are zero).
///
/// Jacobi rotations converge to full working accuracy on rank-deficient
/// inputs, where bidiagonalization-based iterations can stall with O(1e-3)
/// errors in the singular values.
fn jacobi_svd_tall(a: &Mat) -> (Mat, Vector, Mat) {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut u = a.clone();
    let mut v = Mat::identity(n, n);
    let eps = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = Vector::zeros(n);
    for j in 0..n {
        sigma[j] = u.column(j).norm();
        if sigma[j] > 0.0 {
            u.column_mut(j).scale_mut(1.0 / sigma[j]);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).unwrap().then(x.cmp(&y)));
    let u_sorted = Mat::from_fn(m, n, |i, j| u[(i, order[j])]);
    let v_sorted = Mat::from_fn(n, n, |i, j| v[(i, order[j])]);
    let s_sorted = Vector::from_fn(n, |j, _| sigma[order[j]]);
    (u_sorted, s_sorted, v_sorted)
}

/// Thin SVD of `a` with numerical rank `k = #{sigma_i > rank_tol * sigma_1}`.
/// `rank_tol` defaults to [`RANK_TOL`]. Sign convention: the
/// largest-magnitude component of each left singular vector is positive.
pub fn thin_svd(a: &Mat, rank_tol: Option<f64>) -> Result<ThinSvd> {
    check_finite(a)?;
    let rank_tol = rank_tol.unwrap_or(RANK_TOL);
    let transposed = a.nrows() < a.ncols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (wu, s, wv) = jacobi_svd_tall(&work);
    let (u, v) = if transposed { (wv, wu) } else { (wu, wv) };
    let smax = if s.is_empty() { 0.0 } else { s[0] };
    let k = s.iter().take_while(|&&x| x > rank_tol * smax).count();
    let mut left = Mat::zeros(a.nrows(), k);
    let mut right = Mat::zeros(a.ncols(), k);
    let mut singvals = Vector::zeros(k);
    for j in 0..k {
        singvals[j] = s[j];
        let ucol = u.column(j);
        let mut best = 0usize;
        for (i, x) in ucol.iter().enumerate() {
            if x.abs() > ucol[best].abs() {
                best = i;
            }
        }
        let flip = if ucol[best] < 0.0 { -1.0 } else { 1.0 };
        left.column_mut(j).copy_from(&(ucol * flip));
        right.column_mut(j).copy_from(&(v.column(j) * flip));
    }
    Ok(ThinSvd {
        left,
        singvals,
        right,
    })
}

/// Orthogonal polar factor of a square matrix: for a full SVD `A = U S V^T`
/// returns `U V^T`, so that `A = P * result` with `P` symmetric PSD. For
/// singular `A` the factor is not unique; the null directions are completed
/// with an arbitrary orthonormal basis.
pub fn polar_orthogonal(a: &Mat) -> Result<Mat> {
    check_finite(a)?;
    if a.nrows() != a.ncols() {
        return Err(CoreError::Input(format!(
            "polar factor needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let (mut u, s, v) = jacobi_svd_tall(a);
    let smax = if s.is_empty() { 0.0 } else { s[0] };
    let k = s.iter().take_while(|&&x| x > RANK_TOL * smax).count();
    // Complete the zero-singular-value columns of u to an orthonormal basis
    // by Gram-Schmidt against the columns already fixed.
    let mut filled = k;
    for cand in 0..n {
        if filled == n {
            break;
        }
        let mut col = Vector::zeros(n);
        col[cand] = 1.0;
        for j in 0..filled {
            let proj = u.column(j).dot(&col);
            col -= u.column(j) * proj;
        }
        let norm = col.norm();
        if norm < 1e-8 {
            continue;
        }
        col /= norm;
        // Second Gram-Schmidt pass for full orthogonality after the rescale.
        for j in 0..filled {
            let proj = u.column(j).dot(&col);
            col -= u.column(j) * proj;
        }
        col /= col.norm();
        u.column_mut(filled).copy_from(&col);
        filled += 1;
    }
    if filled < n {
        return Err(CoreError::Internal(
            "orthonormal completion of polar factor failed".into(),
        ));
    }
    Ok(u * v.transpose())
}

/// Haar-distributed random orthogonal matrix: QR of an i.i.d. standard
/// Gaussian matrix with the R-diagonal sign correction. Deterministic per
/// seed.
pub fn random_orthogonal(n: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_orthogonal_with(n, &mut rng)
}

pub fn random_orthogonal_with(n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let g = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// First `cols` columns of a Haar-orthogonal `rows x rows` matrix.
pub fn random_semi_orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
    if cols > rows {
        return Err(CoreError::Input(format!(
            "semi-orthogonal factor needs cols <= rows, got {}x{}",
            rows, cols
        )));
    }
    let q = random_orthogonal_with(rows, rng);
    Ok(q.columns(0, cols).into_owned())
}

/// Kronecker product.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Column-major vectorization.
pub fn vec_mat(a: &Mat) -> Vector {
    Vector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_mat`].
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}

/// Commutation matrix `K_{pq}` with `K_{pq} vec(X) = vec(X^T)` for `X` p x q.
pub fn commutation(p: usize, q: usize) -> Mat {
    let mut k = Mat::zeros(p * q, p * q);
    for i in 0..p {
        for j in 0..q {
            k[(j + i * q, i + j * p)] = 1.0;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_sym(n: usize, seed: u64) -> Mat {
        sym_part(&random_mat(n, n, seed))
    }

    #[test]
    fn spectral_diagonal_sorted() {
        let e = spectral_decompose(&Mat::from_diagonal(&Vector::from_vec(vec![2.0, 5.0]))).unwrap();
        assert_eq!(e.eigvals.as_slice(), &[5.0, 2.0]);
        // Permutation of the identity.
        assert!((e.eigvecs.map(|x| x.abs()) - Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0])).norm() < 1e-14);
    }

    #[test]
    fn spectral_identity() {
        let e = spectral_decompose(&Mat::identity(4, 4)).unwrap();
        assert!(e.eigvals.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn spectral_reconstruction_and_determinism() {
        for seed in 0..20 {
            let s = random_sym(6, seed);
            let e = spectral_decompose(&s).unwrap();
            assert!((e.reconstruct() - &s).norm() <= 1e-12 * s.norm().max(1.0));
            assert!((e.eigvecs.transpose() * &e.eigvecs - Mat::identity(6, 6)).norm() < 1e-12);
            let e2 = spectral_decompose(&s).unwrap();
            assert_eq!(e.eigvecs.as_slice(), e2.eigvecs.as_slice());
            assert_eq!(e.eigvals.as_slice(), e2.eigvals.as_slice());
            for j in 1..6 {
                assert!(e.eigvals[j - 1] >= e.eigvals[j]);
            }
        }
    }

    #[test]
    fn spectral_rejects_nonfinite_and_asymmetric() {
        let mut s = Mat::identity(2, 2);
        s[(0, 0)] = f64::NAN;
        assert!(matches!(spectral_decompose(&s), Err(CoreError::Input(_))));
        let a = Mat::from_vec(2, 2, vec![1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(spectral_decompose(&a), Err(CoreError::Input(_))));
    }

    #[test]
    fn sqrtm_examples() {
        let s = sqrtm_psd(&Mat::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]))).unwrap();
        assert!((s - Mat::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]))).norm() < 1e-12);
        let i = sqrtm_psd(&Mat::identity(3, 3)).unwrap();
        assert!((i - Mat::identity(3, 3)).norm() < 1e-14);
        // Root of [[2,6],[6,20]] squares back to the input.
        let m = Mat::from_vec(2, 2, vec![2.0, 6.0, 6.0, 20.0]);
        let r = sqrtm_psd(&m).unwrap();
        assert!((&r * &r - &m).norm() <= 1e-10 * m.norm());
    }

    #[test]
    fn sqrtm_rejects_indefinite() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(sqrtm_psd(&m), Err(CoreError::NotPsd { .. })));
    }

    #[test]
    fn sqrtm_squares_back_on_random_psd() {
        for seed in 0..20 {
            let a = random_mat(5, 5, 100 + seed);
            let s = &a * a.transpose();
            let r = sqrtm_psd(&s).unwrap();
            assert!((&r * &r - &s).norm() <= 1e-10 * s.norm().max(1.0));
        }
    }

    #[test]
    fn invsqrtm_examples() {
        let s = invsqrtm_pd(&Mat::from_diagonal(&Vector::from_vec(vec![4.0, 9.0])), 1e-12).unwrap();
        assert!((s - Mat::from_diagonal(&Vector::from_vec(vec![0.5, 1.0 / 3.0]))).norm() < 1e-12);
        for seed in 0..10 {
            let a = random_mat(5, 5, 200 + seed);
            let s = &a * a.transpose() + Mat::identity(5, 5);
            let inv = invsqrtm_pd(&s, 1e-12).unwrap();
            let sq = sqrtm_psd(&s).unwrap();
            assert!((inv * sq - Mat::identity(5, 5)).norm() < 1e-10);
        }
        let tiny = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 1e-14]));
        assert!(matches!(
            invsqrtm_pd(&tiny, 1e-12),
            Err(CoreError::Singularity { .. })
        ));
    }

    #[test]
    fn thin_svd_examples() {
        let t = thin_svd(&Mat::identity(3, 3), None).unwrap();
        assert_eq!(t.rank(), 3);
        assert!(t.singvals.iter().all(|&s| (s - 1.0).abs() < 1e-14));

        let u = Vector::from_vec(vec![0.6, 0.8]);
        let v = Vector::from_vec(vec![1.0, 0.0, 0.0]);
        let a = &u * v.transpose();
        let t = thin_svd(&a, None).unwrap();
        assert_eq!(t.rank(), 1);
        assert!((t.singvals[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn thin_svd_reconstruction_random() {
        for seed in 0..20 {
            let a = random_mat(4, 6, 300 + seed);
            let t = thin_svd(&a, None).unwrap();
            assert!((t.reconstruct() - &a).norm() <= 1e-12 * a.norm());
            let k = t.rank();
            assert!((t.left.transpose() * &t.left - Mat::identity(k, k)).norm() < 1e-12);
            assert!((t.right.transpose() * &t.right - Mat::identity(k, k)).norm() < 1e-12);
            for j in 1..k {
                assert!(t.singvals[j - 1] >= t.singvals[j]);
            }
        }
    }

    #[test]
    fn polar_examples() {
        let q = random_orthogonal(4, 7);
        let p = polar_orthogonal(&q).unwrap();
        assert!((p - &q).norm() < 1e-12);

        let d = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        assert!((polar_orthogonal(&d).unwrap() - Mat::identity(2, 2)).norm() < 1e-12);

        let rot = random_orthogonal(3, 11);
        let a = &rot * Mat::from_diagonal(&Vector::from_vec(vec![2.0, 3.0, 5.0]));
        // A = P * R with P = A R^T PSD; here R should recover the rotation.
        let r = polar_orthogonal(&a).unwrap();
        assert!((&r - &rot).norm() < 1e-10);
        let p = &a * r.transpose();
        assert!((sym_part(&p) - &p).norm() < 1e-10);
        assert!(spectral_decompose(&sym_part(&p)).unwrap().lambda_min() > 0.0);
    }

    #[test]
    fn random_orthogonal_props() {
        assert!((random_orthogonal(1, 0)[(0, 0)].abs() - 1.0).abs() < 1e-14);
        let a = random_orthogonal(5, 42);
        let b = random_orthogonal(5, 42);
        assert_eq!(a.as_slice(), b.as_slice());
        assert!((a.transpose() * &a - Mat::identity(5, 5)).norm() < 1e-12);
    }

    #[test]
    fn random_orthogonal_haar_first_entry_centered() {
        // Monte-Carlo check of Haar symmetry: E[Q_11] = 0, Var = 1/n.
        let samples = 1000;
        let n = 20;
        let mean: f64 = (0..samples)
            .map(|s| random_orthogonal(n, 10_000 + s as u64)[(0, 0)])
            .sum::<f64>()
            / samples as f64;
        let _ = n;
        assert!(mean.abs() < 3.0 / (samples as f64).sqrt());
    }

    #[test]
    fn kron_vec_commutation_identities() {
        assert_eq!(commutation(1, 1), Mat::identity(1, 1));
        assert_eq!(kron(&Mat::identity(2, 2), &Mat::identity(3, 3)), Mat::identity(6, 6));
        for seed in 0..100 {
            let p = 2 + (seed as usize) % 4;
            let q = 2 + (seed as usize / 4) % 4;
            let x = random_mat(p, q, 400 + seed);
            let k = commutation(p, q);
            assert!((&k * vec_mat(&x) - vec_mat(&x.transpose())).norm() < 1e-13);

            let a = random_mat(3, p, 500 + seed);
            let c = random_mat(q, 3, 600 + seed);
            let lhs = vec_mat(&(&a * &x * &c));
            let rhs = kron(&c.transpose(), &a) * vec_mat(&x);
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn unvec_roundtrip() {
        let a = random_mat(3, 5, 900);
        assert_eq!(unvec(&vec_mat(&a), 3, 5), a);
    }
}
