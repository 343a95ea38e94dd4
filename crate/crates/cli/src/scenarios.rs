//! Scenario runners: resolve parameters (flag, then config, then default),
//! compute, write the CSV and print the summary.

use std::path::{Path, PathBuf};

use gauss_squeeze::collective::{
    collective_series, limit_var_pt, limit_var_xt, oracle_var_pt, oracle_var_xt_steady, steady_seed,
    uncorrected_var_pt, Quadrature,
};
use gauss_squeeze::filter::{continuum_probe_covariance, oracle_vmax, oracle_vmin, scan_detuning, FilterParams};
use gauss_squeeze::magnetometry::{
    effective_delay, equivalent_squeezing, estimate_variance, oracle_var_b, run_ensemble, MagnetometryParams, Probe,
};
use gauss_squeeze::numerics::linspace;
use gauss_squeeze::opo::{oracle_intracavity, simulate_intracavity, MeasuredQuadrature, OpoParams};
use gauss_squeeze::{Execution, Table};

use crate::config::Config;
use crate::{
    CliError, CollectiveArgs, Common, FilterScanArgs, MagnetArgs, MagnetometryArgs, MonteCarloArgs, OpoArgs,
    OpoVariancesArgs, ProbeKind, TimeArgs,
};

const OPO_KEYS: &[&str] = &["gamma", "g", "tau", "out"];
const TIME_KEYS: &[&str] = &["t_max", "dt_out"];
const MAGNET_KEYS: &[&str] = &["kappa_sq", "mu", "var_b0", "r"];

fn keys(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn default_gamma() -> f64 {
    OpoParams::figure_defaults().gamma
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

/// Γ and g, with `g = 0.2 Γ` unless given.
fn opo_rates(cfg: &Config, a: &OpoArgs) -> Result<(f64, f64), CliError> {
    let gamma = cfg.pick("gamma", a.gamma)?.unwrap_or_else(default_gamma);
    let g = cfg.pick("g", a.g)?.unwrap_or(0.2 * gamma);
    Ok((gamma, g))
}

fn out_path(cfg: &Config, common: &Common, scenario: &str) -> Result<PathBuf, CliError> {
    let out: Option<String> = cfg.pick("out", common.out.as_ref().map(|p| p.display().to_string()))?;
    Ok(PathBuf::from(out.unwrap_or_else(|| format!("{scenario}.csv"))))
}

fn times(cfg: &Config, a: &TimeArgs, t_max_default: f64, dt_default: impl Fn(f64) -> f64) -> Result<(f64, f64), CliError> {
    let t_max = positive("t_max", cfg.pick("t_max", a.t_max)?.unwrap_or(t_max_default))?;
    let dt = positive("dt_out", cfg.pick("dt_out", a.dt_out)?.unwrap_or_else(|| dt_default(t_max)))?;
    Ok((t_max, dt))
}

fn stride(dt_out: f64, tau: f64) -> usize {
    ((dt_out / tau).round() as usize).max(1)
}

fn finish(table: &Table, path: &Path, summary: &[String]) -> Result<(), CliError> {
    table
        .write_csv_file(path)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
    println!("wrote {} rows to {}", table.len(), path.display());
    for line in summary {
        println!("{line}");
    }
    Ok(())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn opo_variances(a: &OpoVariancesArgs) -> Result<(), CliError> {
    let cfg = Config::maybe_load(a.common.config.as_deref())?;
    cfg.check_keys(&keys(&[OPO_KEYS, TIME_KEYS]))?;
    let (gamma, g) = opo_rates(&cfg, &a.opo)?;
    let tau = cfg.pick("tau", a.common.tau)?.unwrap_or(1e-3 / gamma);
    let params = OpoParams::new(gamma, g, tau)?;
    let (t_max, dt) = times(&cfg, &a.time, 20.0 / gamma, |_| 0.1 / gamma)?;
    let path = out_path(&cfg, &a.common, "opo-variances")?;

    let k = stride(dt, tau);
    let unc = simulate_intracavity(&params, t_max, MeasuredQuadrature::None, k)?;
    let cond = simulate_intracavity(&params, t_max, MeasuredQuadrature::P, k)?;

    let mut table = Table::new(["t", "var_xc_uncond", "var_pc_uncond", "var_pc_cond", "purity"]);
    let mut oracle = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..unc.times.len() {
        let t = unc.times[i];
        table.push_row(vec![t, unc.var_x[i], unc.var_p[i], cond.var_p[i], cond.purity[i]])?;
        let (ox, op) = oracle_intracavity(&params, t, MeasuredQuadrature::None);
        oracle[0].push(ox);
        oracle[1].push(op);
        oracle[2].push(oracle_intracavity(&params, t, MeasuredQuadrature::P).1);
    }
    let last = table.len() - 1;
    let summary = vec![
        format!("max |sim - oracle| var_xc_uncond: {:.3e}", max_abs_diff(&unc.var_x, &oracle[0])),
        format!("max |sim - oracle| var_pc_uncond: {:.3e}", max_abs_diff(&unc.var_p, &oracle[1])),
        format!("max |sim - oracle| var_pc_cond: {:.3e}", max_abs_diff(&cond.var_p, &oracle[2])),
        format!("final var_pc_cond: {:.9} (oracle {:.9})", cond.var_p[last], oracle[2][last]),
    ];
    finish(&table, &path, &summary)
}

pub fn collective(a: &CollectiveArgs) -> Result<(), CliError> {
    let cfg = Config::maybe_load(a.common.config.as_deref())?;
    cfg.check_keys(&keys(&[OPO_KEYS, TIME_KEYS, &["show_paper_eq58"]]))?;
    let (gamma, g) = opo_rates(&cfg, &a.opo)?;
    let tau = cfg.pick("tau", a.common.tau)?.unwrap_or(1e-3 / gamma);
    let params = OpoParams::new(gamma, g, tau)?;
    let (t_max, dt) = times(&cfg, &a.time, 10.0 / gamma, |_| 0.1 / gamma)?;
    let show_eq58 = a.show_paper_eq58 || cfg.pick("show_paper_eq58", None::<bool>)?.unwrap_or(false);
    let path = out_path(&cfg, &a.common, "collective")?;

    let n = (t_max / tau).round() as usize;
    let k = stride(dt, tau);
    let xs = collective_series(&params, Quadrature::X, steady_seed(&params, Quadrature::X), n, k)?;
    let ps = collective_series(&params, Quadrature::P, steady_seed(&params, Quadrature::P), n, k)?;

    let mut columns = vec!["T", "var_xT", "var_pT", "var_xT_oracle", "var_pT_oracle"];
    if show_eq58 {
        columns.push("var_pT_eq58");
    }
    let mut table = Table::new(columns);
    let (mut dx, mut dp): (f64, f64) = (0.0, 0.0);
    for ((t, vx), (_, vp)) in xs.iter().zip(&ps) {
        let ox = oracle_var_xt_steady(&params, *t);
        let op = oracle_var_pt(&params, *t);
        dx = dx.max((vx - ox).abs());
        dp = dp.max((vp - op).abs());
        let mut row = vec![*t, *vx, *vp, ox, op];
        if show_eq58 {
            row.push(uncorrected_var_pt(&params, *t));
        }
        table.push_row(row)?;
    }
    let summary = vec![
        format!("segments: {n}"),
        format!("max |sim - oracle| var_xT: {dx:.3e}"),
        format!("max |sim - oracle| var_pT: {dp:.3e}"),
        format!("T -> inf limits: var_xT {:.9}, var_pT {:.9}", limit_var_xt(&params), limit_var_pt(&params)),
    ];
    finish(&table, &path, &summary)
}

pub fn filter_scan(a: &FilterScanArgs) -> Result<(), CliError> {
    let cfg = Config::maybe_load(a.common.config.as_deref())?;
    cfg.check_keys(&keys(&[OPO_KEYS, &["gamma2", "delta_min", "delta_max", "delta_steps"]]))?;
    let (gamma1, g) = opo_rates(&cfg, &a.opo)?;
    let gamma2 = cfg.pick("gamma2", a.gamma2)?.unwrap_or(gamma1);
    let tau = cfg.pick("tau", a.common.tau)?.unwrap_or(1e-3 / gamma1);
    let lo = cfg.pick("delta_min", a.delta_min)?.unwrap_or(-5.0 * gamma1);
    let hi = cfg.pick("delta_max", a.delta_max)?.unwrap_or(5.0 * gamma1);
    let steps = cfg.pick("delta_steps", a.delta_steps)?.unwrap_or(101);
    if lo.is_nan() || hi.is_nan() || lo > hi || steps == 0 {
        return Err(CliError::Invalid(format!(
            "detuning grid needs delta_min <= delta_max and at least one step, got [{lo}, {hi}] with {steps}"
        )));
    }
    let params = FilterParams { gamma1, g, gamma2, delta: 0.0, tau };
    params.validate()?;
    let path = out_path(&cfg, &a.common, "filter-scan")?;

    let grid = linspace(lo, hi, steps);
    let scan = scan_detuning(&params, &grid, Execution::Parallel)?;
    let mut table = Table::new(["delta", "v_min", "v_max"]);
    let mut worst: f64 = 0.0;
    for (i, &d) in grid.iter().enumerate() {
        table.push_row(vec![d, scan.v_min[i], scan.v_max[i]])?;
        let c = continuum_probe_covariance(&params.with_delta(d))?;
        worst = worst.max((c.v_min - scan.v_min[i]).abs()).max((c.v_max - scan.v_max[i]).abs());
    }
    let mut summary = vec![format!("max |sim - continuum| over grid: {worst:.3e}")];
    if let Some(i) = grid.iter().position(|&d| d == 0.0) {
        let (omin, omax) = (oracle_vmin(gamma1, g, gamma2), oracle_vmax(gamma1, g, gamma2));
        summary.push(format!(
            "max |sim - oracle| at delta=0: {:.3e} (V_min {:.9}, V_max {:.9})",
            (scan.v_min[i] - omin).abs().max((scan.v_max[i] - omax).abs()),
            scan.v_min[i],
            scan.v_max[i]
        ));
    }
    finish(&table, &path, &summary)
}

struct MagnetSetup {
    kappa_sq: f64,
    mu: f64,
    var_b0: f64,
    r: f64,
    opo: OpoParams,
}

fn magnet_setup(cfg: &Config, m: &MagnetArgs, o: &OpoArgs) -> Result<MagnetSetup, CliError> {
    let (gamma, g) = opo_rates(cfg, o)?;
    let opo = OpoParams { gamma, g, tau: 1e-3 / gamma };
    opo.validate_rates()?;
    Ok(MagnetSetup {
        kappa_sq: cfg.pick("kappa_sq", m.kappa_sq)?.unwrap_or(1.83e6),
        mu: cfg.pick("mu", m.mu)?.unwrap_or(8.79e4),
        var_b0: cfg.pick("var_b0", m.var_b0)?.unwrap_or(1.0),
        r: cfg.pick("r", m.r)?.unwrap_or_else(|| equivalent_squeezing(&opo)),
        opo,
    })
}

impl MagnetSetup {
    fn params(&self, probe: Probe, tau: f64) -> Result<MagnetometryParams, CliError> {
        let p = MagnetometryParams { kappa_sq: self.kappa_sq, mu: self.mu, var_b0: self.var_b0, probe, tau };
        p.validate()?;
        Ok(p)
    }
}

pub fn magnetometry(a: &MagnetometryArgs) -> Result<(), CliError> {
    let cfg = Config::maybe_load(a.common.config.as_deref())?;
    cfg.check_keys(&keys(&[OPO_KEYS, TIME_KEYS, MAGNET_KEYS]))?;
    let setup = magnet_setup(&cfg, &a.magnet, &a.opo)?;
    let tau = cfg.pick("tau", a.common.tau)?.unwrap_or(setup.opo.tau);
    let (t_max, dt) = times(&cfg, &a.time, 1e-5, |t| t / 100.0)?;
    let path = out_path(&cfg, &a.common, "magnetometry")?;

    let steps = (t_max / dt).round().max(1.0) as usize;
    let grid = linspace(0.0, t_max, steps + 1);
    let coherent = setup.params(Probe::Coherent, tau)?;
    let squeezed = setup.params(Probe::Squeezed { r: setup.r }, tau)?;
    let opo = setup.params(Probe::Opo(setup.opo), tau)?;
    let vc = estimate_variance(&coherent, &grid)?.var_b;
    let vs = estimate_variance(&squeezed, &grid)?.var_b;
    let vo = estimate_variance(&opo, &grid)?.var_b;

    let mut table = Table::new(["t", "var_coherent", "var_opo", "var_squeezed"]);
    let (mut dc, mut ds): (f64, f64) = (0.0, 0.0);
    for (i, &t) in grid.iter().enumerate() {
        table.push_row(vec![t, vc[i], vo[i], vs[i]])?;
        dc = dc.max((vc[i] - oracle_var_b(&coherent, t)?).abs());
        ds = ds.max((vs[i] - oracle_var_b(&squeezed, t)?).abs());
    }
    let summary = vec![
        format!("max |sim - oracle| var_coherent: {dc:.3e}"),
        format!("max |sim - oracle| var_squeezed (r = {:.6}): {ds:.3e}", setup.r),
        format!("opo delay 16g(3G+4g)/((G-4g)(G+4g)^2): {:.6e} s", effective_delay(&setup.opo)?),
        format!("final var_B: coherent {:.6e}, opo {:.6e}, squeezed {:.6e}", vc[steps], vo[steps], vs[steps]),
    ];
    finish(&table, &path, &summary)
}

pub fn montecarlo(a: &MonteCarloArgs) -> Result<(), CliError> {
    let cfg = Config::maybe_load(a.common.config.as_deref())?;
    cfg.check_keys(&keys(&[OPO_KEYS, TIME_KEYS, MAGNET_KEYS, &["probe", "true_b", "seed", "trajectories"]]))?;
    let setup = magnet_setup(&cfg, &a.magnet, &a.opo)?;
    let kind = cfg.pick("probe", a.probe)?.unwrap_or(ProbeKind::Coherent);
    let probe = match kind {
        ProbeKind::Coherent => Probe::Coherent,
        ProbeKind::Squeezed => Probe::Squeezed { r: setup.r },
        ProbeKind::Opo => Probe::Opo(setup.opo),
    };
    let default_tau = match kind {
        ProbeKind::Opo => setup.opo.tau,
        _ => 1e-2 / setup.kappa_sq.max(f64::MIN_POSITIVE),
    };
    let tau = cfg.pick("tau", a.common.tau)?.unwrap_or(default_tau);
    let params = setup.params(probe, tau)?;
    let (t_max, dt) = times(&cfg, &a.time, 1e-4, |t| t / 5.0)?;
    let true_b = cfg.pick("true_b", a.true_b)?.unwrap_or(1.0);
    let seed = cfg.pick("seed", a.seed)?.unwrap_or(1);
    let trajectories = cfg.pick("trajectories", a.trajectories)?.unwrap_or(1000);
    let path = out_path(&cfg, &a.common, "montecarlo")?;

    let steps = (t_max / dt).round().max(1.0) as usize;
    let grid = linspace(0.0, t_max, steps + 1);
    let s = run_ensemble(&params, true_b, &grid, seed, trajectories, Execution::Parallel)?;
    let mut table = Table::new(["t", "var_b", "mse", "mse_std_error", "bias"]);
    let mut worst_z: f64 = 0.0;
    for (i, &t) in grid.iter().enumerate() {
        table.push_row(vec![t, s.var_b[i], s.mse[i], s.mse_std_error[i], s.bias[i]])?;
        if s.mse_std_error[i] > 0.0 {
            worst_z = worst_z.max((s.mse[i] - s.var_b[i]).abs() / s.mse_std_error[i]);
        }
    }
    let summary = vec![
        format!("trajectories: {trajectories}, seed {seed}, true_B {true_b} pT"),
        format!("max |mse - var_B|: {:.3e}", max_abs_diff(&s.mse, &s.var_b)),
        format!("max |mse - var_B| in standard errors: {worst_z:.2}"),
    ];
    finish(&table, &path, &summary)
}
