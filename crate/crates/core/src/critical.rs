//! Closed-form critical points and minimizers of the function-space BW loss
//! (and its tau-perturbation) on fixed-rank manifolds, their loss values,
//! restricted gradients, subset enumeration, and the best rank-k
//! approximation of the target covariance.

use itertools::Itertools;

use crate::bwloss::{Target, DISTINCT_TOL};
use crate::error::{CoreError, Result};
use crate::matcore::{random_orthogonal, thin_svd, Mat, PsdMatrix};
#[cfg(test)]
use crate::matcore::Vector;

/// Hard cap for subset enumeration: C(n, k) stays manageable for n <= 20.
pub const ENUM_LIMIT: usize = 20;

/// A constructed critical point of the rank-restricted loss.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    /// Selected eigenvalue indices (0-based, ascending).
    pub index_set: Vec<usize>,
    pub rank: usize,
    /// m x k semi-orthogonal right factor.
    pub right_factor: Mat,
    /// Constructed n x m matrix.
    pub w: Mat,
    /// Closed-form loss value at `w`.
    pub loss_value: f64,
    /// Whether the tau-perturbed family was used.
    pub perturbed: bool,
}

fn check_distinct(target: &Target) -> Result<()> {
    if target.has_distinct_spectrum() {
        return Ok(());
    }
    let eig = &target.eig().eigvals;
    let mut gap = f64::INFINITY;
    for j in 1..eig.len() {
        gap = gap.min(eig[j - 1] - eig[j]);
    }
    gap = gap.min(eig[eig.len() - 1]); // positivity counts too
    Err(CoreError::NonDistinctSpectrum {
        gap,
        tol: DISTINCT_TOL * eig[0],
    })
}

/// Closed-form loss value of the critical point selecting `index_set`.
fn closed_form_value(target: &Target, index_set: &[usize], perturbed: bool) -> f64 {
    let lambda = &target.eig().eigvals;
    let tau = if perturbed { target.tau() } else { 0.0 };
    (0..lambda.len())
        .filter(|i| !index_set.contains(i))
        .map(|i| {
            if perturbed {
                (lambda[i].sqrt() - tau.sqrt()).powi(2)
            } else {
                lambda[i]
            }
        })
        .sum()
}

/// Build the rank-k critical point selecting the eigenvalue indices
/// `index_set`: `W* = Omega_J Lbar_J^{1/2} V^T` (unperturbed) or
/// `W* = Omega_J (Lbar_J - tau I)^{1/2} V^T` (perturbed, requires
/// `tau <= lambda_j` for every selected j). `v` must be m x k with
/// orthonormal columns.
pub fn make_critical(
    target: &Target,
    index_set: &[usize],
    v: &Mat,
    perturbed: bool,
) -> Result<CriticalPoint> {
    check_distinct(target)?;
    let n = target.n();
    let mut idx = index_set.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if idx.len() != index_set.len() || idx.iter().any(|&i| i >= n) {
        return Err(CoreError::Input("index set must be distinct indices below n".into()));
    }
    let k = idx.len();
    if v.ncols() != k {
        return Err(CoreError::Input(format!(
            "right factor has {} columns, index set selects {}",
            v.ncols(),
            k
        )));
    }
    if (v.transpose() * v - Mat::identity(k, k)).norm() > 1e-12 * (1.0 + k as f64) {
        return Err(CoreError::Input("right factor columns are not orthonormal".into()));
    }
    let eig = target.eig();
    let tau = if perturbed { target.tau() } else { 0.0 };
    if perturbed {
        if let Some(&jmin) = idx.iter().min_by(|&&a, &&b| {
            eig.eigvals[a].partial_cmp(&eig.eigvals[b]).unwrap()
        }) {
            let lmin = eig.eigvals[jmin];
            if tau > lmin + 1e-12 * (1.0 + lmin) {
                return Err(CoreError::TauTooLarge {
                    tau,
                    lambda_min: lmin,
                });
            }
        }
    }
    let mut scaled = Mat::zeros(n, k);
    for (col, &j) in idx.iter().enumerate() {
        let s = (eig.eigvals[j] - tau).max(0.0).sqrt();
        scaled.column_mut(col).copy_from(&(eig.eigvecs.column(j) * s));
    }
    let w = &scaled * v.transpose();
    Ok(CriticalPoint {
        loss_value: closed_form_value(target, &idx, perturbed),
        index_set: idx,
        rank: k,
        right_factor: v.clone(),
        w,
        perturbed,
    })
}

/// Gradient of the loss restricted to the rank-k manifold:
/// `2W - 2 Sigma0^{1/2} U V^T` with `U S V^T` the thin SVD of
/// `Sigma0^{1/2} W`. When `expected_rank` is given, a mismatch with the
/// numerical rank of `W` is an error.
pub fn restricted_gradient(w: &Mat, target: &Target, expected_rank: Option<usize>) -> Result<Mat> {
    let sw = target.sqrt_sigma0() * w;
    let svd = thin_svd(&sw, None)?;
    if let Some(k) = expected_rank {
        if svd.rank() != k {
            return Err(CoreError::Rank(format!(
                "numerical rank {} does not match declared rank {}",
                svd.rank(),
                k
            )));
        }
    }
    Ok(w * 2.0 - target.sqrt_sigma0() * &svd.left * svd.right.transpose() * 2.0)
}

/// All C(n, k) index sets with their closed-form loss values, sorted
/// ascending by value (ties broken lexicographically). The first entry is
/// `[0..k]` when the spectrum is distinct.
pub fn enumerate_critical_values(
    target: &Target,
    k: usize,
    perturbed: bool,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let n = target.n();
    if n > ENUM_LIMIT {
        return Err(CoreError::CombinatorialLimit { n, limit: ENUM_LIMIT });
    }
    if k > n {
        return Err(CoreError::Input(format!("k = {k} exceeds n = {n}")));
    }
    check_distinct(target)?;
    let mut out: Vec<(Vec<usize>, f64)> = (0..n)
        .combinations(k)
        .map(|idx| {
            let value = closed_form_value(target, &idx, perturbed);
            (idx, value)
        })
        .collect();
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Global minimizer over the rank-k manifold (`index_set = [0..k]`) together
/// with its covariance `W W^T` (plus `tau I` in the perturbed family). The
/// right factor defaults to the first k columns of a seeded Haar-orthogonal
/// m x m matrix.
pub fn best_rank_k(
    target: &Target,
    m: usize,
    k: usize,
    perturbed: bool,
    seed: u64,
) -> Result<(CriticalPoint, PsdMatrix)> {
    if k > m || k > target.n() {
        return Err(CoreError::Input(format!(
            "k = {} exceeds a dimension (n = {}, m = {})",
            k,
            target.n(),
            m
        )));
    }
    let v = random_orthogonal(m, seed).columns(0, k).into_owned();
    let idx: Vec<usize> = (0..k).collect();
    let cp = make_critical(target, &idx, &v, perturbed)?;
    let mut cov = &cp.w * cp.w.transpose();
    if perturbed {
        let tau = target.tau();
        for i in 0..target.n() {
            cov[(i, i)] += tau;
        }
    }
    Ok((cp, PsdMatrix::new(cov)?))
}

/// Write an enumeration table as CSV (`index_set` joined with `;`).
pub fn critical_values_csv(rows: &[(Vec<usize>, f64)]) -> String {
    let mut s = String::from("index_set,value\n");
    for (idx, value) in rows {
        let set = idx.iter().map(|i| i.to_string()).join(";");
        s.push_str(&format!("{},{:.16e}\n", set, value));
    }
    s
}
