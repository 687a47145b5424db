use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rebate-lab"));
    c.env_remove("REBATE_LAB_OUT");
    c
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic_prices.csv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const QUICK: &str = "\
[model]
T = 1.0
n_steps = 5
substeps = 160

[train]
iterations = 1
batch_size = 4

[evaluation]
paths = 8
";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{extra}{QUICK}")).unwrap();
    path
}

#[test]
fn calibrate_prints_estimates() {
    let out = bin().arg("calibrate").arg(fixture()).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert!(text.contains("P0_star = 186.73"), "{text}");
    assert!(text.contains("sigma = "));
}

#[test]
fn calibrate_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    let mut body = String::from("Date,Close\n");
    for i in 0..40 {
        body.push_str(&format!(
            "2023-01-{:02},{}\n",
            i % 28 + 1,
            if i == 5 { "x" } else { "100" }
        ));
    }
    fs::write(&path, body).unwrap();
    let out = bin().arg("calibrate").arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 7"));
}

#[test]
fn run_writes_outputs_to_flag_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "output_dir = \"from_config\"\n");
    let target = dir.path().join("from_flag");
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--output")
        .arg(&target)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "manifest.json",
        "comparison.csv",
        "z_series.csv",
        "loss_history.csv",
    ] {
        assert!(target.join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("from_config").exists());
    assert!(stdout(&out).contains("spread_sq"));
}

#[test]
fn environment_sets_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let target = dir.path().join("env_out");
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--no-trajectories")
        .env("REBATE_LAB_OUT", &target)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(target.join("comparison.csv").exists());
    assert!(!target.join("z_series.csv").exists());
}

#[test]
fn sweep_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = |name: &str, seed: &str| {
        let target = dir.path().join(name);
        let out = bin()
            .args(["sweep", cfg.to_str().unwrap(), "--seed", seed, "--output"])
            .arg(&target)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        fs::read(target.join("fee_sweep.csv")).unwrap()
    };
    let a = run("a", "3");
    assert_eq!(a, run("b", "3"));
    assert_ne!(a, run("c", "4"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("d,rho,rho_se,spread_sq,fee_revenue,penalty_active,failed\n"));
    assert_eq!(text.lines().count(), 14);
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "colour = \"blue\"\n");
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("-o")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn quick_verify_passes() {
    let out = bin().args(["verify", "--quick"]).output().unwrap();
    let text = stdout(&out);
    assert!(out.status.success(), "{text}");
    assert_eq!(
        text.lines().filter(|l| l.starts_with("PASS")).count(),
        6,
        "{text}"
    );
}
