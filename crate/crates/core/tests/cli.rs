use std::path::Path;
use std::process::Command;

fn mmf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmf"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("{body}\noutput.dir = {}\n", dir.join("out").display())).unwrap();
    path
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn short_standard_run_conserves_mass_and_snapshots_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        write_config(dir.path(), "run.cfg", "run.mode = standard\ntime.duration = 60\noutput.snapshot_interval = 30");
    let status = mmf().args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert!(status.success());
    let out = dir.path().join("out");
    let diag = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let mass = column(&diag, "mass_perturbation");
    assert_eq!(mass.len(), 31);
    let scale = mass[0].abs();
    assert!(mass.iter().all(|m| (m - mass[0]).abs() <= 1e-10 * scale));
    assert!(column(&diag, "kinetic_energy").iter().all(|k| k.is_finite() && *k > 0.0));

    for k in 0..3 {
        assert!(out.join(format!("snapshot_{k:05}.txt")).exists());
        assert!(out.join(format!("snapshot_{k:05}.txt.meta")).exists());
    }
    let same = mmf()
        .arg("diff-snapshots")
        .arg(out.join("snapshot_00002.txt"))
        .arg(out.join("snapshot_00002.txt"))
        .status()
        .unwrap();
    assert!(same.success());
    let differ = mmf()
        .arg("diff-snapshots")
        .arg(out.join("snapshot_00000.txt"))
        .arg(out.join("snapshot_00002.txt"))
        .status()
        .unwrap();
    assert_eq!(differ.code(), Some(1));
}

#[test]
fn analyze_writes_cost_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cost.cfg", "cost.r_t = 10\ncost.r_x = 10\ncost.r_z = 1");
    let out = mmf().args(["analyze", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("intensity"));
    let csv = std::fs::read_to_string(dir.path().join("out/cost_report.csv")).unwrap();
    assert!(csv.starts_with("n_p,"));
}

#[test]
fn bad_configs_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "unknown.cfg", "mesh.warp = 3");
    let dup = write_config(dir.path(), "dup.cfg", "time.dt = 1\ntime.dt = 2");
    let bad_mode = write_config(dir.path(), "mode.cfg", "run.mode = hybrid");
    for cfg in [&unknown, &dup, &bad_mode] {
        let out = mmf().args(["run", "--config"]).arg(cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{}", cfg.display());
        assert!(String::from_utf8(out.stderr).unwrap().contains("configuration error"));
    }
    let missing = mmf().args(["run", "--config"]).arg(dir.path().join("none.cfg")).status().unwrap();
    assert_eq!(missing.code(), Some(2));
}
