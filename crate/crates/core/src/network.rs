//! Deep linear network parametrization `W = W_N ... W_1`, per-layer
//! gradients, balanced initialization and balancedness diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matcore::{self, random_semi_orthogonal, thin_svd, Mat, Vector};

/// Layer weights `W_1 ... W_N` with `W_j` of shape `d_j x d_{j-1}`.
#[derive(Debug, Clone)]
pub struct NetParams {
    layers: Vec<Mat>,
    dims: Vec<usize>,
}

/// Per-interface balancedness residuals `||W_j W_j^T - W_{j+1}^T W_{j+1}||_F`.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

impl NetParams {
    pub fn new(layers: Vec<Mat>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CoreError::Input("a network needs at least one layer".into()));
        }
        let mut dims = Vec::with_capacity(layers.len() + 1);
        dims.push(layers[0].ncols());
        for (j, w) in layers.iter().enumerate() {
            if j > 0 && w.ncols() != dims[j] {
                return Err(CoreError::Input(format!(
                    "layer {} has {} columns but layer {} has {} rows",
                    j + 1,
                    w.ncols(),
                    j,
                    dims[j]
                )));
            }
            dims.push(w.nrows());
        }
        Ok(Self { layers, dims })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Mat] {
        &mut self.layers
    }

    /// End-to-end matrix `W_N ... W_1`.
    pub fn compose(&self) -> Mat {
        let mut w = self.layers[0].clone();
        for layer in &self.layers[1..] {
            w = layer * w;
        }
        w
    }

    /// `W_{j:1}` for j = 0..N (index 0 is the d_0 identity).
    pub(crate) fn prefixes(&self) -> Vec<Mat> {
        let n = self.depth();
        let mut out = Vec::with_capacity(n + 1);
        out.push(Mat::identity(self.dims[0], self.dims[0]));
        for j in 0..n {
            out.push(&self.layers[j] * &out[j]);
        }
        out
    }

    /// `W_{N:j}` for j = 1..N+1 stored at index j-1 ... use `suffixes()[j-1]`;
    /// the last entry is the d_N identity (`W_{N:N+1}`).
    pub(crate) fn suffixes(&self) -> Vec<Mat> {
        let n = self.depth();
        let dn = self.dims[n];
        let mut out = vec![Mat::identity(dn, dn); n + 1];
        for j in (0..n).rev() {
            out[j] = &out[j + 1] * &self.layers[j];
        }
        out
    }

    /// Per-layer gradients of the composed loss:
    /// `grad_j = W_{N:j+1}^T * end_grad * W_{j-1:1}^T`, with the empty-product
    /// boundary convention.
    pub fn layer_gradients(&self, end_grad: &Mat) -> Result<Vec<Mat>> {
        let n = self.depth();
        if end_grad.nrows() != self.dims[n] || end_grad.ncols() != self.dims[0] {
            return Err(CoreError::Input(format!(
                "end-to-end gradient is {}x{}, expected {}x{}",
                end_grad.nrows(),
                end_grad.ncols(),
                self.dims[n],
                self.dims[0]
            )));
        }
        let prefixes = self.prefixes();
        let suffixes = self.suffixes();
        Ok((0..n)
            .map(|j| suffixes[j + 1].transpose() * end_grad * prefixes[j].transpose())
            .collect())
    }

    pub fn balance_report(&self) -> BalanceReport {
        let residuals: Vec<f64> = self
            .layers
            .windows(2)
            .map(|w| (&w[0] * w[0].transpose() - w[1].transpose() * &w[1]).norm())
            .collect();
        let max_residual = residuals.iter().cloned().fold(0.0, f64::max);
        BalanceReport {
            residuals,
            max_residual,
        }
    }

    /// End-to-end velocity induced by per-layer gradient flow:
    /// `-sum_j W_{N:j+1} W_{N:j+1}^T * end_grad * W_{j-1:1}^T W_{j-1:1}`.
    pub fn end_to_end_velocity(&self, end_grad: &Mat) -> Result<Mat> {
        let n = self.depth();
        if end_grad.nrows() != self.dims[n] || end_grad.ncols() != self.dims[0] {
            return Err(CoreError::Input("end-to-end gradient shape mismatch".into()));
        }
        let prefixes = self.prefixes();
        let suffixes = self.suffixes();
        let mut v = Mat::zeros(self.dims[n], self.dims[0]);
        for j in 0..n {
            let s = &suffixes[j + 1];
            let p = &prefixes[j];
            v -= s * s.transpose() * end_grad * p.transpose() * p;
        }
        Ok(v)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|w| w.nrows() * w.ncols()).sum()
    }

    /// Column-major, layer-major flattening (for the integrator state).
    pub fn flatten(&self) -> Vector {
        let mut v = Vec::with_capacity(self.param_count());
        for w in &self.layers {
            v.extend_from_slice(w.as_slice());
        }
        Vector::from_vec(v)
    }

    pub fn unflatten_like(&self, v: &Vector) -> Result<Self> {
        if v.len() != self.param_count() {
            return Err(CoreError::Input("flattened parameter length mismatch".into()));
        }
        let mut layers = Vec::with_capacity(self.depth());
        let mut off = 0;
        for w in &self.layers {
            let len = w.nrows() * w.ncols();
            layers.push(Mat::from_column_slice(
                w.nrows(),
                w.ncols(),
                &v.as_slice()[off..off + len],
            ));
            off += len;
        }
        NetParams::new(layers)
    }
}

/// JSON checkpoint document: dims header plus layer-major, row-major arrays.
#[derive(Debug, Serialize, Deserialize)]
pub struct NetParamsDoc {
    pub dims: Vec<usize>,
    pub layers: Vec<Vec<f64>>,
}

impl NetParamsDoc {
    pub fn from_params(p: &NetParams) -> Self {
        let layers = p
            .layers()
            .iter()
            .map(|w| {
                let mut rows = Vec::with_capacity(w.nrows() * w.ncols());
                for i in 0..w.nrows() {
                    for j in 0..w.ncols() {
                        rows.push(w[(i, j)]);
                    }
                }
                rows
            })
            .collect();
        Self {
            dims: p.dims().to_vec(),
            layers,
        }
    }

    pub fn to_params(&self) -> Result<NetParams> {
        if self.dims.len() != self.layers.len() + 1 {
            return Err(CoreError::Input("dims header does not match layer count".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (j, data) in self.layers.iter().enumerate() {
            let (rows, cols) = (self.dims[j + 1], self.dims[j]);
            if data.len() != rows * cols {
                return Err(CoreError::Input(format!("layer {} has wrong element count", j + 1)));
            }
            layers.push(Mat::from_fn(rows, cols, |i, k| data[i * cols + k]));
        }
        NetParams::new(layers)
    }
}

/// Exactly balanced factorization of `end_to_end` into `dims.len() - 1`
/// layers: thin SVD `U S V^T`, N-th roots of `S` interleaved with seeded
/// random semi-orthogonal factors `P_j`, so that the tuple composes back to
/// `end_to_end` and satisfies the balancedness equations exactly (up to
/// round-off).
pub fn balanced_init(end_to_end: &Mat, dims: &[usize], seed: u64) -> Result<NetParams> {
    let n = dims.len().checked_sub(1).filter(|&n| n >= 1).ok_or_else(|| {
        CoreError::Input("dims must list at least two widths (one layer)".into())
    })?;
    if dims[0] != end_to_end.ncols() || dims[n] != end_to_end.nrows() {
        return Err(CoreError::Input(format!(
            "end-to-end matrix is {}x{} but dims ask for {}x{}",
            end_to_end.nrows(),
            end_to_end.ncols(),
            dims[n],
            dims[0]
        )));
    }
    if n == 1 {
        return NetParams::new(vec![end_to_end.clone()]);
    }
    let svd = thin_svd(end_to_end, None)?;
    let r = svd.rank();
    if let Some(&bottleneck) = dims.iter().find(|&&d| d < r) {
        return Err(CoreError::Rank(format!(
            "end-to-end rank {} exceeds bottleneck width {}",
            r, bottleneck
        )));
    }
    let root = Mat::from_diagonal(&svd.singvals.map(|s| s.powf(1.0 / n as f64)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // P_j (j = 2..N) is a d_{j-1} x r semi-orthogonal factor.
    let p: Vec<Mat> = (2..=n)
        .map(|j| random_semi_orthogonal(dims[j - 1], r, &mut rng))
        .collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(n);
    layers.push(&p[0] * &root * svd.right.transpose());
    for j in 2..n {
        layers.push(&p[j - 1] * &root * p[j - 2].transpose());
    }
    layers.push(&svd.left * &root * p[n - 2].transpose());
    NetParams::new(layers)
}

/// Balanced end-to-end velocity formula
/// `-sum_j (W W^T)^{(N-j)/N} * end_grad * (W^T W)^{(j-1)/N}`; only valid for
/// balanced tuples, used as a cross-check oracle.
pub fn balanced_velocity(w: &Mat, depth: usize, end_grad: &Mat) -> Result<Mat> {
    let n = depth as f64;
    let wwt = matcore::PsdMatrix::new(w * w.transpose())?;
    let wtw = matcore::PsdMatrix::new(w.transpose() * w)?;
    let mut v = Mat::zeros(w.nrows(), w.ncols());
    for j in 1..=depth {
        v -= wwt.pow((depth - j) as f64 / n) * end_grad * wtw.pow((j - 1) as f64 / n);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bwloss::{loss_fn_tau, Target};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn compose_examples() {
        let p = NetParams::new(vec![Mat::identity(3, 3); 4]).unwrap();
        assert_eq!(p.compose(), Mat::identity(3, 3));

        let p = NetParams::new(vec![
            Mat::from_diagonal(&Vector::from_vec(vec![3.0, 3.0])),
            Mat::from_diagonal(&Vector::from_vec(vec![2.0, 2.0])),
        ])
        .unwrap();
        assert_eq!(p.compose(), Mat::identity(2, 2) * 6.0);
    }

    #[test]
    fn compose_matches_folds() {
        let layers = vec![random_mat(4, 3, 1), random_mat(5, 4, 2), random_mat(2, 5, 3)];
        let p = NetParams::new(layers.clone()).unwrap();
        let left = &layers[2] * (&layers[1] * &layers[0]);
        let right = (&layers[2] * &layers[1]) * &layers[0];
        assert!((p.compose() - &left).norm() < 1e-13);
        assert!((p.compose() - &right).norm() < 1e-13);
    }

    #[test]
    fn rejects_incompatible_chain() {
        assert!(NetParams::new(vec![random_mat(3, 2, 1), random_mat(4, 4, 2)]).is_err());
        assert!(NetParams::new(vec![]).is_err());
    }

    #[test]
    fn layer_gradients_trivial_cases() {
        let w = random_mat(3, 4, 10);
        let p = NetParams::new(vec![w.clone()]).unwrap();
        let g = random_mat(3, 4, 11);
        let grads = p.layer_gradients(&g).unwrap();
        assert_eq!(grads.len(), 1);
        assert!((&grads[0] - &g).norm() < 1e-15);

        let p = NetParams::new(vec![random_mat(4, 3, 12), random_mat(3, 4, 13)]).unwrap();
        let zeros = Mat::zeros(3, 3);
        for gj in p.layer_gradients(&zeros).unwrap() {
            assert_eq!(gj.norm(), 0.0);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let t = Target::new(
            {
                let a = random_mat(3, 3, 20);
                &a * a.transpose() + Mat::identity(3, 3) * 0.5
            },
            0.1,
        )
        .unwrap();
        let p = NetParams::new(vec![
            random_mat(4, 3, 21),
            random_mat(4, 4, 22),
            random_mat(3, 4, 23),
        ])
        .unwrap();
        let end_grad = loss_fn_tau(&p.compose(), &t).unwrap().gradient.unwrap();
        let grads = p.layer_gradients(&end_grad).unwrap();
        let loss_of = |p: &NetParams| loss_fn_tau(&p.compose(), &t).unwrap().value;
        let h = 1e-5;
        for (j, gj) in grads.iter().enumerate() {
            let w = &p.layers()[j];
            for i in 0..w.nrows() {
                for k in 0..w.ncols() {
                    let mut pp = p.clone();
                    pp.layers_mut()[j][(i, k)] += h;
                    let mut pm = p.clone();
                    pm.layers_mut()[j][(i, k)] -= h;
                    let fd = (loss_of(&pp) - loss_of(&pm)) / (2.0 * h);
                    assert!(
                        (fd - gj[(i, k)]).abs() <= 1e-5 * (1.0 + gj[(i, k)].abs()),
                        "layer {} entry ({},{}): fd {} vs {}",
                        j,
                        i,
                        k,
                        fd,
                        gj[(i, k)]
                    );
                }
            }
        }
    }

    #[test]
    fn balanced_init_single_layer_and_identity() {
        let w = random_mat(3, 4, 30);
        let p = balanced_init(&w, &[4, 3], 0).unwrap();
        assert!((p.compose() - &w).norm() < 1e-15);

        let p = balanced_init(&Mat::identity(2, 2), &[2, 2, 2, 2], 1).unwrap();
        assert!((p.compose() - Mat::identity(2, 2)).norm() < 1e-10);
        assert!(p.balance_report().max_residual <= 1e-9);
    }

    #[test]
    fn balanced_init_random_nets() {
        for seed in 0..10 {
            let w = random_mat(4, 5, 40 + seed);
            let dims = [5, 6, 4, 7, 4];
            let p = balanced_init(&w, &dims, seed).unwrap();
            assert_eq!(p.dims(), &dims);
            assert!((p.compose() - &w).norm() <= 1e-9 * (1.0 + w.norm()));
            assert!(p.balance_report().max_residual <= 1e-9);
        }
    }

    #[test]
    fn balanced_init_rejects_bottleneck_below_rank() {
        let w = random_mat(4, 4, 50); // rank 4 a.s.
        assert!(matches!(
            balanced_init(&w, &[4, 3, 4], 0),
            Err(CoreError::Rank(_))
        ));
    }

    #[test]
    fn balance_report_scalar_example() {
        let p = NetParams::new(vec![
            Mat::from_vec(1, 1, vec![1.0]),
            Mat::from_vec(1, 1, vec![2.0]),
        ])
        .unwrap();
        let r = p.balance_report();
        assert_eq!(r.residuals.len(), 1);
        assert!((r.residuals[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn balance_residual_grows_continuously() {
        let w = random_mat(3, 3, 60);
        let p0 = balanced_init(&w, &[3, 3, 3], 7).unwrap();
        let dir = random_mat(3, 3, 61);
        let mut last = 0.0;
        for k in 1..=5 {
            let delta = 1e-3 * k as f64;
            let mut p = p0.clone();
            p.layers_mut()[1] += &dir * delta;
            let r = p.balance_report().max_residual;
            assert!(r > last);
            assert!(r < 1.0); // stays small for small perturbations
            last = r;
        }
    }

    #[test]
    fn velocity_trivial_cases() {
        let w = random_mat(3, 4, 70);
        let p = NetParams::new(vec![w.clone()]).unwrap();
        let g = random_mat(3, 4, 71);
        assert!((p.end_to_end_velocity(&g).unwrap() + &g).norm() < 1e-14);

        let p = NetParams::new(vec![random_mat(4, 3, 72), random_mat(3, 4, 73)]).unwrap();
        let z = Mat::zeros(3, 3);
        assert_eq!(p.end_to_end_velocity(&z).unwrap().norm(), 0.0);
    }

    #[test]
    fn velocity_formulas_agree_on_balanced_nets() {
        for seed in 0..5 {
            let w = random_mat(3, 5, 80 + seed);
            let p = balanced_init(&w, &[5, 4, 4, 3], 90 + seed).unwrap();
            let g = random_mat(3, 5, 100 + seed);
            let v1 = p.end_to_end_velocity(&g).unwrap();
            let v2 = balanced_velocity(&p.compose(), 3, &g).unwrap();
            assert!((&v1 - &v2).norm() <= 1e-8 * (1.0 + v1.norm()), "{}", (&v1 - &v2).norm());
        }
    }

    #[test]
    fn json_roundtrip_and_flatten() {
        let p = NetParams::new(vec![random_mat(4, 3, 110), random_mat(2, 4, 111)]).unwrap();
        let doc = NetParamsDoc::from_params(&p);
        let json = serde_json::to_string(&doc).unwrap();
        let p2: NetParams = serde_json::from_str::<NetParamsDoc>(&json)
            .unwrap()
            .to_params()
            .unwrap();
        for (a, b) in p.layers().iter().zip(p2.layers()) {
            assert_eq!(a, b);
        }
        let flat = p.flatten();
        let p3 = p.unflatten_like(&flat).unwrap();
        for (a, b) in p.layers().iter().zip(p3.layers()) {
            assert_eq!(a, b);
        }
    }
}
