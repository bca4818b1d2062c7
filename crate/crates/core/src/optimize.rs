//! Gradient descent and gradient-flow integration of the composed loss over
//! the layer parameters, certified convergence constants (step-size bound,
//! iteration bound, flow rate) and empirical rate estimation.

use std::io::Write as IoWrite;

use crate::bwloss::{self, Target};
use crate::error::{CoreError, Result};
use crate::matcore::{thin_svd, Vector};
use crate::network::NetParams;

/// Gradient-descent configuration.
#[derive(Debug, Clone)]
pub struct GdConfig {
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once the loss drops to this value.
    pub target_loss: f64,
    /// Full trajectory samples are recorded every this many iterations
    /// (the first and last iterations are always recorded).
    pub record_every: usize,
}

/// Gradient-flow configuration. The integrator is an adaptive embedded
/// Runge-Kutta 4(5) pair (Dormand-Prince); `tol` bounds the local error per
/// step.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub t_end: f64,
    pub tol: f64,
    /// Record a sample every this many accepted steps.
    pub record_every: usize,
    /// Optional early stop once the loss drops to this value.
    pub target_loss: Option<f64>,
    pub max_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            tol: 1e-8,
            record_every: 1,
            target_loss: None,
            max_steps: 2_000_000,
        }
    }
}

/// One recorded trajectory point.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub index: usize,
    /// Flow time, or the iteration count for gradient descent.
    pub t: f64,
    pub loss: f64,
    /// Squared Frobenius norm of the function-space gradient.
    pub grad_norm_sq: f64,
    /// Smallest singular value of the end-to-end matrix.
    pub sigma_min: f64,
    pub balance_residual: f64,
    pub w_norm: f64,
}

/// Recorded run. `loss_history` always holds the loss of every iteration /
/// accepted step (cheap), `samples` the full diagnostics on the recording
/// grid.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub loss_history: Vec<f64>,
}

impl Trajectory {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    /// CSV export, 17 significant digits.
    pub fn write_csv<W: IoWrite>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "index,t,loss,grad_norm_sq,sigma_min,balance_residual,w_norm")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                s.index, s.t, s.loss, s.grad_norm_sq, s.sigma_min, s.balance_residual, s.w_norm
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

fn sample_of(params: &NetParams, target: &Target, index: usize, t: f64) -> Result<Sample> {
    let w = params.compose();
    let eval = bwloss::loss_eval(&w, target)?;
    let grad_norm_sq = eval.gradient.as_ref().map_or(f64::NAN, |g| g.norm_squared());
    let svd = thin_svd(&w, Some(0.0))?;
    let sigma_min = if svd.rank() < w.nrows().min(w.ncols()) {
        0.0
    } else {
        svd.singvals[svd.rank() - 1]
    };
    Ok(Sample {
        index,
        t,
        loss: eval.value,
        grad_norm_sq,
        sigma_min,
        balance_residual: params.balance_report().max_residual,
        w_norm: w.norm(),
    })
}

/// Full-batch gradient descent: all layers updated simultaneously each
/// iteration. Stops at `target_loss` or `max_iters`; errors out on rank drop
/// (tau = 0) or divergence beyond 1e3 x the initial loss.
pub fn gd_run(params0: &NetParams, target: &Target, cfg: &GdConfig) -> Result<(NetParams, Trajectory)> {
    if !(cfg.eta > 0.0) || !(cfg.target_loss > 0.0) {
        return Err(CoreError::Input("gd_run needs eta > 0 and target_loss > 0".into()));
    }
    let record_every = cfg.record_every.max(1);
    let mut params = params0.clone();
    let mut traj = Trajectory::default();
    let mut initial_loss = f64::NAN;
    let mut iter = 0usize;
    loop {
        let w = params.compose();
        let eval = bwloss::loss_eval(&w, target)?;
        let loss = eval.value;
        if iter == 0 {
            initial_loss = loss;
        }
        if !loss.is_finite() || loss > 1e3 * initial_loss.max(f64::MIN_POSITIVE) {
            return Err(CoreError::Divergence {
                loss,
                initial: initial_loss,
                factor: 1e3,
            });
        }
        traj.loss_history.push(loss);
        let done = loss <= cfg.target_loss || iter >= cfg.max_iters;
        if iter % record_every == 0 || done {
            traj.samples.push(sample_of(&params, target, iter, iter as f64)?);
        }
        if done {
            break;
        }
        let end_grad = eval.grad()?;
        let grads = params.layer_gradients(end_grad)?;
        for (layer, g) in params.layers_mut().iter_mut().zip(&grads) {
            *layer -= g * cfg.eta;
        }
        iter += 1;
    }
    Ok((params, traj))
}

// Dormand-Prince 5(4) coefficients (the vector field is autonomous, so the
// stage abscissae are not needed).
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Gradient flow over the stacked layer parameters, integrated with an
/// adaptive Dormand-Prince 5(4) pair. Local error per step is kept at or
/// below `cfg.tol` (mixed absolute/relative, per component).
pub fn flow_run(params0: &NetParams, target: &Target, cfg: &FlowConfig) -> Result<(NetParams, Trajectory)> {
    if !(cfg.t_end > 0.0) || !(cfg.tol > 0.0) {
        return Err(CoreError::Input("flow_run needs t_end > 0 and tol > 0".into()));
    }
    let record_every = cfg.record_every.max(1);
    let rhs = |y: &Vector| -> Result<(Vector, f64)> {
        let p = params0.unflatten_like(y)?;
        let eval = bwloss::loss_eval(&p.compose(), target)?;
        let grads = p.layer_gradients(eval.grad()?)?;
        let mut v = Vec::with_capacity(y.len());
        for g in &grads {
            v.extend(g.iter().map(|x| -x));
        }
        Ok((Vector::from_vec(v), eval.value))
    };

    let mut y = params0.flatten();
    let mut t = 0.0f64;
    let mut traj = Trajectory::default();
    let (mut k1, loss0) = rhs(&y)?;
    traj.loss_history.push(loss0);
    traj.samples.push(sample_of(params0, target, 0, 0.0)?);

    let mut h = (cfg.t_end / 100.0).min(0.1 / (1.0 + k1.norm()));
    let mut accepted = 0usize;
    let mut steps = 0usize;
    let dim = y.len();
    let mut ks: Vec<Vector> = vec![Vector::zeros(dim); 7];

    while t < cfg.t_end {
        if steps >= cfg.max_steps {
            return Err(CoreError::InsufficientData(format!(
                "flow integration exceeded {} steps at t = {t:.3e}",
                cfg.max_steps
            )));
        }
        steps += 1;
        if t + h > cfg.t_end {
            h = cfg.t_end - t;
        }
        if h < 1e-14 * cfg.t_end {
            return Err(CoreError::StepSizeUnderflow { t, h });
        }
        ks[0] = k1.clone();
        let mut failed = false;
        for stage in 1..7 {
            let mut arg = y.clone();
            for (j, kj) in ks.iter().enumerate().take(stage) {
                let a = DP_A[stage][j];
                if a != 0.0 {
                    arg += kj * (a * h);
                }
            }
            match rhs(&arg) {
                Ok((k, _)) => ks[stage] = k,
                Err(CoreError::Singularity { .. }) => {
                    // Stage landed in a singular region; retry smaller.
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed {
            h *= 0.25;
            continue;
        }
        let mut y5 = y.clone();
        let mut err = Vector::zeros(dim);
        for (j, kj) in ks.iter().enumerate() {
            if DP_B5[j] != 0.0 {
                y5 += kj * (DP_B5[j] * h);
            }
            let db = DP_B5[j] - DP_B4[j];
            if db != 0.0 {
                err += kj * (db * h);
            }
        }
        // RMS of the per-component error against tol * (1 + |y|).
        let mut acc = 0.0;
        for i in 0..dim {
            let sc = cfg.tol * (1.0 + y[i].abs().max(y5[i].abs()));
            acc += (err[i] / sc).powi(2);
        }
        let err_norm = (acc / dim as f64).sqrt();
        if err_norm <= 1.0 {
            t += h;
            y = y5;
            // FSAL property of Dormand-Prince: k7 at (t, y5) equals k1 of
            // the next step.
            k1 = ks[6].clone();
            accepted += 1;
            let p = params0.unflatten_like(&y)?;
            let loss = bwloss::loss_eval(&p.compose(), target)?.value;
            traj.loss_history.push(loss);
            let reached = cfg.target_loss.is_some_and(|tl| loss <= tl);
            if accepted % record_every == 0 || t >= cfg.t_end || reached {
                traj.samples.push(sample_of(&p, target, accepted, t)?);
            }
            if reached {
                break;
            }
        }
        let factor = if err_norm > 0.0 {
            (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h *= factor;
    }
    let params = params0.unflatten_like(&y)?;
    if traj.samples.last().map(|s| s.index) != Some(accepted) {
        traj.samples.push(sample_of(&params, target, accepted, t)?);
    }
    Ok((params, traj))
}

/// Certified constants for a balanced initialization with a positive
/// modified deficiency margin.
#[derive(Debug, Clone)]
pub struct CertifiedConstants {
    /// Modified deficiency margin.
    pub c: f64,
    /// Norm bound `M = sqrt(2 (L(0) + tr Sigma0))`.
    pub m_bound: f64,
    /// Smoothness-type constant entering the step-size bound.
    pub delta: f64,
    /// Largest certified step size.
    pub eta_max: f64,
    /// Strong-convexity constant `K` (uses `tau`, or `c^2` when `tau = 0`).
    pub k_conv: f64,
    /// `C = 2 (L(0) + tr Sigma0)`.
    pub c_big: f64,
    /// Certified exponential rate of the gradient flow.
    pub flow_rate: f64,
    /// Initial loss (the loss actually being optimized).
    pub initial_loss: f64,
    pub depth: usize,
}

impl CertifiedConstants {
    /// `ceil(log(L(0)/eps) / (2 eta N c^{2(N-1)/N}))` with `eta = eta_max`.
    pub fn iter_bound(&self, eps: f64) -> usize {
        self.iter_bound_at(self.eta_max, eps)
    }

    pub fn iter_bound_at(&self, eta: f64, eps: f64) -> usize {
        if eps >= self.initial_loss {
            return 0;
        }
        let n = self.depth as f64;
        let denom = 2.0 * eta * n * self.c.powf(2.0 * (n - 1.0) / n);
        ((self.initial_loss / eps).ln() / denom).ceil() as usize
    }

    /// Certified per-iteration contraction factor at step size `eta`.
    pub fn contraction_factor(&self, eta: f64) -> f64 {
        let n = self.depth as f64;
        1.0 - 2.0 * eta * n * self.c.powf(2.0 * (n - 1.0) / n)
    }
}

/// Evaluate the certified constants at an initialization. Fails with
/// `MdmFailed` when the margin is not positive.
pub fn certified_constants(params0: &NetParams, target: &Target) -> Result<CertifiedConstants> {
    let w0 = params0.compose();
    let eval = bwloss::loss_eval(&w0, target)?;
    let l0 = eval.value;
    let c = bwloss::mdm_margin(&w0, target)?;
    if !(c > 0.0) {
        return Err(CoreError::MdmFailed { margin: c });
    }
    let depth = params0.depth();
    let n = depth as f64;
    let tr = target.trace_sigma0();
    let m = (2.0 * (l0 + tr)).sqrt();
    let sqrt_fro = tr.sqrt(); // ||Sigma0^{1/2}||_F
    let delta = 2f64.powi(depth as i32 + 1) / c.powf(2.0 * n) * n * n * m.powf((4.0 * n - 3.0) / n)
        * target.lambda_max().sqrt()
        + 8.0 * n * (n - 1.0) * m.powf((3.0 * n - 4.0) / n) * (m.powf(1.0 / n) + sqrt_fro);
    let c_pow = c.powf(2.0 * (n - 1.0) / n);
    let mut eta_max = (n * c_pow / (2.0 * delta)).min(1.0 / (4.0 * n * c_pow));
    if l0 > 0.0 {
        eta_max = eta_max.min(c * c / (8.0 * m * l0.sqrt()));
    }
    let c_big = 2.0 * (l0 + tr);
    let k_num = if target.tau() > 0.0 { target.tau() } else { c * c };
    let k_conv = (k_num * target.lambda_min()).sqrt() / (2.0 * c_big * c_big);
    let flow_rate = 8.0 * n * c.powf(2.0 * (2.0 * n - 1.0) / n) * k_conv;
    Ok(CertifiedConstants {
        c,
        m_bound: m,
        delta,
        eta_max,
        k_conv,
        c_big,
        flow_rate,
        initial_loss: l0,
        depth,
    })
}

/// Ordinary-least-squares slope of `log(loss - optimum)` against time over
/// the last `(1 - trim_fraction)` of the usable samples. Returns
/// `(slope, r_squared)`.
pub fn estimate_rate(traj: &Trajectory, optimum: f64, trim_fraction: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&trim_fraction) {
        return Err(CoreError::Input("trim_fraction must lie in [0, 1)".into()));
    }
    let pts: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .filter(|s| s.loss > optimum + 1e-14)
        .map(|s| (s.t, (s.loss - optimum).ln()))
        .collect();
    if pts.len() < 10 {
        return Err(CoreError::InsufficientData(format!(
            "only {} samples above the optimum, need at least 10",
            pts.len()
        )));
    }
    let start = ((pts.len() as f64) * trim_fraction).floor() as usize;
    let pts = &pts[start.min(pts.len() - 2)..];
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(CoreError::InsufficientData("degenerate time axis".into()));
    }
    let slope = sxy / sxx;
    let syy: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, r2))
}
