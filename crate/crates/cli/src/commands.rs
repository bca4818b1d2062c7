//! Implementations of the CLI subcommands. Every command is deterministic
//! given its (config, seed) pair and emits a run manifest next to its
//! outputs.

use std::fmt::Write as FmtWrite;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use bwnet_core::bwloss::{self, Target, TargetDoc};
use bwnet_core::critical;
use bwnet_core::hessian::{self, LossKind};
use bwnet_core::matcore::{self, Mat, PsdMatrix};
use bwnet_core::network::{balanced_init, NetParams, NetParamsDoc};
use bwnet_core::optimize::{self, FlowConfig, GdConfig, Sample, Trajectory};
use bwnet_core::CoreError;

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::ManifestBuilder;
use crate::svg::{line_plot, Series};

/// Fixed smallest eigenvalue reproducing sigma_min(Sigma0^{1/2}) ~ 0.7078.
const DEFAULT_LAMBDA_MIN: f64 = 0.7078 * 0.7078;

fn out_dir(cfg: &Config) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(cfg.get("out").unwrap_or("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_target(cfg: &Config, tau: f64) -> Result<Target, CliError> {
    match cfg.get("target") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read target {path}: {e}")))?;
            let doc: TargetDoc = serde_json::from_str(&text)?;
            Ok(doc.to_target(tau)?)
        }
        None => {
            let n = cfg.get_usize("n", 20)?;
            let lambda_min = cfg.get_f64("lambda_min", DEFAULT_LAMBDA_MIN)?;
            let seed = cfg.get_u64("seed", 0)?;
            Ok(Target::zipf(n, lambda_min, seed, tau)?)
        }
    }
}

fn load_params(cfg: &Config) -> Result<NetParams, CliError> {
    let path = cfg
        .get("params")
        .ok_or_else(|| CliError::Input("missing `params` (checkpoint JSON path)".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read params {path}: {e}")))?;
    let doc: NetParamsDoc = serde_json::from_str(&text)?;
    Ok(doc.to_params()?)
}

/// `target`: generate a Zipf-spectrum target and persist its spectral data.
pub fn cmd_target(cfg: &Config) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let n = cfg.get_usize("n", 20)?;
    let lambda_min = cfg.get_f64("lambda_min", DEFAULT_LAMBDA_MIN)?;
    let seed = cfg.get_u64("seed", 0)?;
    let target = Target::zipf(n, lambda_min, seed, 0.0)?;
    let mut manifest = ManifestBuilder::new("target", cfg, seed);

    let path = dir.join("target.json");
    std::fs::write(&path, serde_json::to_string_pretty(&TargetDoc::from_target(&target))?)?;
    manifest.add_output(&path);
    manifest.add_metric("lambda_min", target.lambda_min());
    manifest.add_metric("lambda_max", target.lambda_max());
    manifest.add_metric("sigma_min_sqrt", target.sigma_min_sqrt());
    manifest.write(&dir)?;
    println!("wrote {} (n = {n}, lambda_min = {lambda_min})", path.display());
    Ok(())
}

/// `init`: balanced network at `Sigma(0) = (Sigma0 - tau I) + Gamma D Gamma^T`
/// with a verified positive deficiency margin.
pub fn cmd_init(cfg: &Config) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let tau = cfg.get_f64("tau", 0.1)?;
    let depth = cfg.get_usize("depth", 3)?;
    let scale = cfg.get_f64("perturb_scale", 0.01)?;
    let seed = cfg.get_u64("seed", 0)?;
    let target = load_target(cfg, tau)?;
    let n = target.n();
    if tau >= target.lambda_min() {
        return Err(CliError::Input(format!(
            "tau = {tau} must stay below lambda_min(Sigma0) = {}",
            target.lambda_min()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = matcore::random_orthogonal_with(n, &mut rng);
    let d = Mat::from_diagonal(&bwnet_core::Vector::from_fn(n, |_, _| {
        scale * rng.random_range(0.0..1.0)
    }));
    let sigma_init = target.sigma0().mat() - Mat::identity(n, n) * tau
        + matcore::sym_part(&(&gamma * d * gamma.transpose()));
    let w0 = PsdMatrix::new(sigma_init)?.sqrt();

    let margin = bwloss::mdm_margin(&w0, &target)?;
    if margin <= 0.0 {
        return Err(CoreError::MdmFailed { margin }.into());
    }
    let params = balanced_init(&w0, &vec![n; depth + 1], seed.wrapping_add(1))?;

    let mut manifest = ManifestBuilder::new("init", cfg, seed);
    let path = dir.join("params.json");
    std::fs::write(&path, serde_json::to_string_pretty(&NetParamsDoc::from_params(&params))?)?;
    manifest.add_output(&path);
    manifest.add_metric("margin", margin);
    manifest.add_metric("balance_residual", params.balance_report().max_residual);
    manifest.add_metric(
        "initial_loss",
        bwloss::loss_eval(&params.compose(), &target)?.value,
    );
    manifest.write(&dir)?;
    println!("wrote {} (margin = {margin:.6})", path.display());
    Ok(())
}

/// `train`: run gradient descent or gradient flow and persist the
/// trajectory plus final checkpoint.
pub fn cmd_train(cfg: &Config) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let tau = cfg.get_f64("tau", 0.1)?;
    let seed = cfg.get_u64("seed", 0)?;
    let target = load_target(cfg, tau)?;
    let params = load_params(cfg)?;
    let mode = cfg.get("mode").unwrap_or("flow");
    let record_every = cfg.get_usize("record_every", 1)?;
    let target_loss = cfg.get_f64("target_loss", 1e-10)?;

    let (final_params, traj) = match mode {
        "flow" => {
            let flow = FlowConfig {
                t_end: cfg.get_f64("t_end", 20.0)?,
                tol: cfg.get_f64("tol", 1e-8)?,
                record_every,
                target_loss: Some(target_loss),
                max_steps: cfg.get_usize("max_steps", 2_000_000)?,
            };
            optimize::flow_run(&params, &target, &flow)?
        }
        "gd" => {
            let eta = match cfg.get("eta") {
                None | Some("auto") => {
                    let consts = optimize::certified_constants(&params, &target)?;
                    consts.eta_max
                }
                Some(v) => v
                    .parse()
                    .map_err(|_| CliError::Input(format!("invalid eta `{v}`")))?,
            };
            let gd = GdConfig {
                eta,
                max_iters: cfg.get_usize("iters", 1_000_000)?,
                target_loss,
                record_every: record_every.max(1),
            };
            optimize::gd_run(&params, &target, &gd)?
        }
        other => return Err(CliError::Input(format!("unknown mode `{other}` (gd|flow)"))),
    };

    let mut manifest = ManifestBuilder::new("train", cfg, seed);
    let csv_path = dir.join("trajectory.csv");
    std::fs::write(&csv_path, traj.to_csv_string())?;
    manifest.add_output(&csv_path);
    let params_path = dir.join("params_final.json");
    std::fs::write(
        &params_path,
        serde_json::to_string_pretty(&NetParamsDoc::from_params(&final_params))?,
    )?;
    manifest.add_output(&params_path);
    if let Some(final_loss) = traj.final_loss() {
        manifest.add_metric("final_loss", final_loss);
    }
    manifest.add_metric("samples", traj.samples.len() as f64);
    manifest.write(&dir)?;
    println!(
        "wrote {} ({} samples, final loss {:.3e})",
        csv_path.display(),
        traj.samples.len(),
        traj.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

struct SweepCell {
    depth: usize,
    lambda_min: f64,
    slope: f64,
    r2: f64,
}

fn sweep_cell(
    n: usize,
    depth: usize,
    lambda_min: f64,
    tau: f64,
    seed: u64,
    t_end: f64,
    trim: f64,
) -> Result<SweepCell, CliError> {
    let target = Target::zipf(n, lambda_min, seed, tau)?;
    let shift = PsdMatrix::new(target.sigma0().mat() - Mat::identity(n, n) * tau)?;
    let w0 = shift.sqrt() * 0.9;
    let params = balanced_init(&w0, &vec![n; depth + 1], seed.wrapping_add(1))?;
    // Tolerance well below the stopping loss keeps the integrator noise
    // floor out of the fitted tail.
    let flow = FlowConfig {
        t_end,
        tol: 1e-10,
        record_every: 1,
        target_loss: Some(1e-12),
        max_steps: 2_000_000,
    };
    let (_, traj) = optimize::flow_run(&params, &target, &flow)?;
    let (slope, r2) = optimize::estimate_rate(&traj, 0.0, trim)?;
    Ok(SweepCell {
        depth,
        lambda_min,
        slope,
        r2,
    })
}

/// Synthetic test mode: inject an exact exponential and recover its rate.
fn synthetic_cell(depth: usize, lambda_min: f64, slope: f64, trim: f64) -> Result<SweepCell, CliError> {
    let mut traj = Trajectory::default();
    for i in 0..200 {
        let t = i as f64 * 0.05;
        traj.samples.push(Sample {
            index: i,
            t,
            loss: (slope * t).exp(),
            grad_norm_sq: 0.0,
            sigma_min: 0.0,
            balance_residual: 0.0,
            w_norm: 0.0,
        });
    }
    let (fit, r2) = optimize::estimate_rate(&traj, 0.0, trim)?;
    Ok(SweepCell {
        depth,
        lambda_min,
        slope: fit,
        r2,
    })
}

/// `sweep-rate`: empirical convergence rates over a (depth, lambda_min)
/// grid; emits a slopes CSV and a slope-vs-depth SVG.
pub fn cmd_sweep_rate(cfg: &Config) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let n = cfg.get_usize("n", 20)?;
    let tau = cfg.get_f64("tau", 0.1)?;
    let seed = cfg.get_u64("seed", 0)?;
    let t_end = cfg.get_f64("t_end", 20.0)?;
    let trim = cfg.get_f64("trim_fraction", 0.5)?;
    let depths = cfg.get_list_usize("depths", &[2, 3, 4, 5])?;
    let grid = cfg.get_list_f64("lambda_min_grid", &[DEFAULT_LAMBDA_MIN])?;
    let synthetic = cfg.get("synthetic") == Some("true");
    let synthetic_slope = cfg.get_f64("synthetic_slope", -3.0)?;

    let cells: Vec<(usize, f64)> = depths
        .iter()
        .flat_map(|&d| grid.iter().map(move |&l| (d, l)))
        .collect();
    let mut results = cells
        .par_iter()
        .map(|&(depth, lambda_min)| {
            if synthetic {
                synthetic_cell(depth, lambda_min, synthetic_slope, trim)
            } else {
                sweep_cell(n, depth, lambda_min, tau, seed, t_end, trim)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| {
        a.depth
            .cmp(&b.depth)
            .then(a.lambda_min.partial_cmp(&b.lambda_min).unwrap())
    });

    let mut csv = String::from("depth,sigma_min_sqrt,slope,r2\n");
    for c in &results {
        writeln!(
            csv,
            "{},{:.16e},{:.16e},{:.16e}",
            c.depth,
            c.lambda_min.sqrt(),
            c.slope,
            c.r2
        )
        .expect("write to String cannot fail");
    }
    let csv_path = dir.join("slopes.csv");
    std::fs::write(&csv_path, &csv)?;

    let series: Vec<Series> = grid
        .iter()
        .map(|&l| Series {
            label: format!("sigma_min = {:.3}", l.sqrt()),
            points: results
                .iter()
                .filter(|c| c.lambda_min == l)
                .map(|c| (c.depth as f64, c.slope))
                .collect(),
        })
        .collect();
    let svg_path = dir.join("slopes.svg");
    std::fs::write(
        &svg_path,
        line_plot("empirical convergence rate", "depth", "slope", &series),
    )?;

    let mut manifest = ManifestBuilder::new("sweep-rate", cfg, seed);
    manifest.add_output(&csv_path);
    manifest.add_output(&svg_path);
    manifest.add_metric("cells", results.len() as f64);
    manifest.write(&dir)?;
    println!("wrote {} ({} cells)", csv_path.display(), results.len());
    Ok(())
}

/// `critical`: closed-form critical values for every rank-k index set, with
/// verified restricted-gradient norms.
pub fn cmd_critical(cfg: &Config) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let tau = cfg.get_f64("tau", 0.1)?;
    let seed = cfg.get_u64("seed", 0)?;
    let target = load_target(cfg, tau)?;
    let n = target.n();
    let k = cfg.get_usize("k", n)?;
    let basis = matcore::random_orthogonal(n, seed).columns(0, k).into_owned();

    let plain = critical::enumerate_critical_values(&target, k, false)?;
    let perturbed: std::collections::BTreeMap<Vec<usize>, f64> = if target.tau() > 0.0 {
        critical::enumerate_critical_values(&target, k, true)
            .map(|rows| rows.into_iter().collect())
            .unwrap_or_default()
    } else {
        Default::default()
    };

    let mut csv = String::from("index_set,value,value_perturbed,grad_norm\n");
    for (idx, value) in &plain {
        let cp = critical::make_critical(&target, idx, &basis, false)?;
        let grad_norm = critical::restricted_gradient(&cp.w, &target, Some(k))?.norm();
        let set = idx
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("+");
        let pert = perturbed
            .get(idx)
            .map_or_else(|| "nan".to_string(), |v| format!("{v:.16e}"));
        writeln!(csv, "{set},{value:.16e},{pert},{grad_norm:.16e}")
            .expect("write to String cannot fail");
    }
    let csv_path = dir.join("critical.csv");
    std::fs::write(&csv_path, &csv)?;

    let mut manifest = ManifestBuilder::new("critical", cfg, seed);
    manifest.add_output(&csv_path);
    manifest.add_metric("rows", plain.len() as f64);
    manifest.write(&dir)?;
    println!("wrote {} ({} index sets)", csv_path.display(), plain.len());
    Ok(())
}

/// `hessian-study`: condition numbers of both parameter Hessians at the
/// first saddles of decreasing rank, averaged over seeded targets.
pub fn cmd_hessian_study(cfg: &Config) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let n = cfg.get_usize("n", 8)?;
    let depth = cfg.get_usize("depth", 3)?;
    let tau = cfg.get_f64("tau", 0.1)?;
    let seed = cfg.get_u64("seed", 0)?;
    let num_seeds = cfg.get_u64("seeds", 7)?;
    let num_indices = cfg.get_usize("indices", 5)?.min(n);

    struct Cell {
        index: usize,
        kind: LossKind,
        loss: f64,
        lambda_max: f64,
        kappa_rel: f64,
        kappa_abs: f64,
    }

    let cells: Vec<(usize, u64)> = (0..num_indices)
        .flat_map(|i| (0..num_seeds).map(move |s| (i, s)))
        .collect();
    let raw = cells
        .par_iter()
        .map(|&(i, s)| -> Result<Vec<Cell>, CliError> {
            let k = n - i;
            let target = Target::zipf(n, 0.4 + 0.05 * s as f64, seed.wrapping_add(s), tau)?;
            let v = matcore::random_orthogonal(n, seed.wrapping_add(100 + s))
                .columns(0, k)
                .into_owned();
            let idx: Vec<usize> = (0..k).collect();
            let cp = critical::make_critical(&target, &idx, &v, true)?;
            let lift = balanced_init(&cp.w, &vec![n; depth + 1], seed.wrapping_add(200 + s))?;
            let mut out = Vec::with_capacity(2);
            for kind in [LossKind::BwTau, LossKind::Frobenius] {
                let h = hessian::hess_param(&lift, &target, kind)?;
                let rep = hessian::condition_report(&h, None)?;
                let loss = hessian::loss_fn_scalar(&lift.compose(), &target, kind)?;
                out.push(Cell {
                    index: i,
                    kind,
                    loss,
                    lambda_max: rep.lambda_max,
                    kappa_rel: rep.kappa_rel,
                    kappa_abs: rep.kappa_abs,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let flat: Vec<Cell> = raw.into_iter().flatten().collect();

    let mut csv =
        String::from("index,loss_kind,loss,lambda_max,kappa_rel,kappa_abs,kappa_abs_std\n");
    let mut series_points: std::collections::BTreeMap<&str, Vec<(f64, f64)>> = Default::default();
    for i in 0..num_indices {
        for kind in [LossKind::BwTau, LossKind::Frobenius] {
            let group: Vec<&Cell> = flat
                .iter()
                .filter(|c| c.index == i && c.kind == kind)
                .collect();
            let m = group.len() as f64;
            let mean = |f: fn(&Cell) -> f64| group.iter().map(|c| f(c)).sum::<f64>() / m;
            let kappa_mean = mean(|c| c.kappa_abs);
            let kappa_std = (group
                .iter()
                .map(|c| (c.kappa_abs - kappa_mean).powi(2))
                .sum::<f64>()
                / m)
                .sqrt();
            let name = match kind {
                LossKind::BwTau => "bw_tau",
                LossKind::Frobenius => "frobenius",
            };
            writeln!(
                csv,
                "{i},{name},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                mean(|c| c.loss),
                mean(|c| c.lambda_max),
                mean(|c| c.kappa_rel),
                kappa_mean,
                kappa_std
            )
            .expect("write to String cannot fail");
            series_points.entry(name).or_default().push((i as f64, kappa_mean));
        }
    }
    let csv_path = dir.join("hessian_study.csv");
    std::fs::write(&csv_path, &csv)?;

    let series: Vec<Series> = series_points
        .into_iter()
        .map(|(label, points)| Series {
            label: label.to_string(),
            points,
        })
        .collect();
    let svg_path = dir.join("hessian_study.svg");
    std::fs::write(
        &svg_path,
        line_plot(
            "parameter Hessian conditioning",
            "critical point index",
            "mean kappa_abs",
            &series,
        ),
    )?;

    let mut manifest = ManifestBuilder::new("hessian-study", cfg, seed);
    manifest.add_output(&csv_path);
    manifest.add_output(&svg_path);
    manifest.write(&dir)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
