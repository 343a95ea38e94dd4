use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gauss-squeeze"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Vec<f64> {
    let j = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[j]).collect()
}

#[test]
fn opo_variances_reach_the_conditioned_steady_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");
    let o = run(&["opo-variances", "--gamma", "1", "--g", "0.2", "--t-max", "40", "--dt-out", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["t", "var_xc_uncond", "var_pc_uncond", "var_pc_cond", "purity"]);
    assert_eq!(rows.len(), 41);
    let last = rows.last().unwrap();
    assert!((last[0] - 40.0).abs() < 1e-9);
    assert!((last[3] - 0.1).abs() < 1e-3, "{}", last[3]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("max |sim - oracle| var_pc_cond"), "{stdout}");
}

#[test]
fn invalid_gain_exits_2_with_the_stability_condition() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");
    let o = run(&["collective", "--gamma", "1", "--g", "0.3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("4g < Γ"));
    assert!(!out.exists());

    assert_eq!(run(&["collective", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["filter-scan", "--gamma2", "-1", "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let o = run(&["filter-scan", "--delta-steps", "3", "--out", "/nonexistent-dir/x.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn collective_optionally_shows_uncorrected_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.csv");
    let base = ["collective", "--gamma", "1", "--g", "0.2", "--t-max", "2", "--dt-out", "0.5", "--out", out.to_str().unwrap()];
    assert!(run(&base).status.success());
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["T", "var_xT", "var_pT", "var_xT_oracle", "var_pT_oracle"]);
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!((r[1] - r[3]).abs() < 1e-2 && (r[2] - r[4]).abs() < 1e-2);
    }

    let mut with = base.to_vec();
    with.push("--show-paper-eq58");
    assert!(run(&with).status.success());
    let (header, _) = read_csv(&out);
    assert_eq!(header.last().unwrap(), "var_pT_eq58");
}

#[test]
fn filter_scan_is_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.csv");
    let o = run(&[
        "filter-scan", "--gamma", "1", "--g", "0.2", "--gamma2", "0.5", "--delta-min", "-2", "--delta-max", "2",
        "--delta-steps", "9", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["delta", "v_min", "v_max"]);
    let (vmin, vmax) = (column(&header, &rows, "v_min"), column(&header, &rows, "v_max"));
    for i in 0..rows.len() {
        let j = rows.len() - 1 - i;
        assert_eq!(vmin[i], vmin[j]);
        assert_eq!(vmax[i], vmax[j]);
    }
}

#[test]
fn magnetometry_orders_the_probes_at_long_times() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = run(&["magnetometry", "--dt-out", "1e-6", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["t", "var_coherent", "var_opo", "var_squeezed"]);
    let last = rows.last().unwrap();
    assert!(last[1] >= last[2] && last[2] >= last[3], "{last:?}");
    assert_eq!(rows[0][1..], [1.0, 1.0, 1.0]);
}

#[test]
fn montecarlo_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    let args = |seed: &str, out: &Path| {
        run(&[
            "montecarlo", "--kappa-sq", "1", "--mu", "1", "--tau", "0.01", "--t-max", "2", "--trajectories", "300",
            "--seed", seed, "--out", out.to_str().unwrap(),
        ])
    };
    assert!(args("5", &a).status.success());
    assert!(args("5", &b).status.success());
    assert!(args("6", &c).status.success());
    let (ta, tb, tc) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
    let (header, rows) = read_csv(&a);
    assert_eq!(header, ["t", "var_b", "mse", "mse_std_error", "bias"]);
    assert_eq!(column(&header, &rows, "var_b"), column(&read_csv(&c).0, &read_csv(&c).1, "var_b"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.ini");
    let out = dir.path().join("s.csv");
    std::fs::write(
        &cfg,
        format!(
            "scenario = filter-scan\nout = {}\n\n[physics]\ngamma = 1\ng = 0.2\ngamma2 = 1\n\n[numerics]\ndelta_min = -1\ndelta_max = 1\ndelta_steps = 3\n",
            out.display()
        ),
    )
    .unwrap();

    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out);
    assert_eq!(rows.len(), 3);
    assert!((rows[1][2] - 7.16666667).abs() < 1e-6);

    let o = run(&["filter-scan", "--config", cfg.to_str().unwrap(), "--delta-steps", "5"]);
    assert!(o.status.success());
    assert_eq!(read_csv(&out).1.len(), 5);

    std::fs::write(&cfg, "scenario = filter-scan\n[physics]\ngama = 1\n").unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gama"));
}

#[test]
fn thread_cap_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let args = ["filter-scan", "--delta-steps", "5", "--out", out.to_str().unwrap()];
    let ok = bin().args(args).env("GAUSS_SQUEEZE_THREADS", "1").output().unwrap();
    assert!(ok.status.success());
    let bad = bin().args(args).env("GAUSS_SQUEEZE_THREADS", "zero").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
