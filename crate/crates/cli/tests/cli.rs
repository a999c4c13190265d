use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
target = "standard_normal"
seeds = [3]

[loss]
kind = "separate_control"

[sde]
n = 16
steps = 4

[net]
hidden = 6
depth = 1

[train]
epochs = 2
updates_per_batch = 1

[pretrain]
steps = 3
batch = 16

[eval]
n = 64
metric_points = 16
histogram_bins = 8
"#;

fn sbsampler(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbsampler"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_tiny(dir: &Path, extra: &[&str]) -> Output {
    let cfg = write_config(dir, TINY);
    let out = dir.join("runs");
    let mut args = vec!["run", cfg.as_str(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    sbsampler(&args)
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_tiny(tmp.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("runs/standard_normal_separate_control_seed3");
    for f in [
        "report.json",
        "metrics.csv",
        "history.csv",
        "samples.csv",
        "histogram_0.csv",
        "histogram_1.csv",
        "phi.ckpt",
        "psi.ckpt",
        "timing.json",
        "config.toml",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(!dir.join(".lock").exists());
    let hist = fs::read_to_string(dir.join("histogram_0.csv")).unwrap();
    let mass: f64 = hist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((mass - 1.0).abs() < 1e-12);
    let samples = fs::read_to_string(dir.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("x0,x1,log_weight"));
}

#[test]
fn rerun_reproduces_the_report_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("runs/standard_normal_separate_control_seed3");
    assert!(run_tiny(tmp.path(), &[]).status.success());
    let first = fs::read(dir.join("report.json")).unwrap();
    let first_samples = fs::read(dir.join("samples.csv")).unwrap();
    assert!(run_tiny(tmp.path(), &[]).status.success());
    assert_eq!(first, fs::read(dir.join("report.json")).unwrap());
    assert_eq!(first_samples, fs::read(dir.join("samples.csv")).unwrap());
}

#[test]
fn overrides_select_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_tiny(tmp.path(), &["--loss", "td", "--seed", "5", "--lambda", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report =
        fs::read_to_string(tmp.path().join("runs/standard_normal_td_seed5/report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["config"]["loss"]["lambda"], 0.5);
    assert_eq!(v["config"]["seed"], 5);
}

#[test]
fn invalid_loss_kind_in_file_exits_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("separate_control", "bogus"));
    let o = sbsampler(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("kind"), "{err}");
}

#[test]
fn invalid_loss_kind_on_command_line_exits_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = sbsampler(&["run", &cfg, "--loss", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--loss"));
}

#[test]
fn unknown_key_and_bad_value_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{TINY}\n[extra]\nx = 1\n"));
    let o = sbsampler(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("extra"));

    let cfg = write_config(tmp.path(), TINY);
    let o = sbsampler(&["run", &cfg, "--lambda", "-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
}

#[test]
fn locked_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("runs/standard_normal_separate_control_seed3");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".lock"), "1").unwrap();
    let o = run_tiny(tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn dry_run_prints_a_loadable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = sbsampler(&["run", &cfg, "--dry-run", "--target", "gmm9"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("target = \"gmm9\""));
    let again = write_config(tmp.path(), &text);
    let o = sbsampler(&["run", &again, "--dry-run"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), text);
}

#[test]
fn compare_tabulates_reports() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_tiny(tmp.path(), &[]).status.success());
    assert!(run_tiny(tmp.path(), &["--loss", "pinn"]).status.success());
    let runs = tmp.path().join("runs");
    let a = runs.join("standard_normal_separate_control_seed3");
    let b = runs.join("standard_normal_pinn_seed3/report.json");
    let csv = tmp.path().join("table.csv");
    let o = sbsampler(&[
        "compare",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("neg_log_z"));
    assert!(table.contains("standard_normal"));
    let pinn = table.lines().position(|l| l.starts_with("pinn")).unwrap();
    let sc = table.lines().position(|l| l.starts_with("separate_control")).unwrap();
    assert!(pinn < sc);
    let rows = fs::read_to_string(csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + 5 * 2);
}

#[test]
fn compare_rejects_a_single_report_and_mismatched_dims() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_tiny(tmp.path(), &[]).status.success());
    let dir = tmp.path().join("runs/standard_normal_separate_control_seed3");
    let o = sbsampler(&["compare", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    v["metrics"]["weighted_mean"] = serde_json::json!([0.0, 0.0, 0.0]);
    let other = tmp.path().join("other.json");
    fs::write(&other, v.to_string()).unwrap();
    let o = sbsampler(&["compare", dir.to_str().unwrap(), other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimensions"));
}

#[test]
fn compare_flags_double_well_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run_tiny(tmp.path(), &[]).status.success());
    let dir = tmp.path().join("runs/standard_normal_separate_control_seed3");
    let base: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let write = |name: &str, kind: &str, nlz: f64| {
        let mut v = base.clone();
        v["target"] = "double_well".into();
        v["config"]["loss"]["kind"] = kind.into();
        v["metrics"]["neg_log_z"] = nlz.into();
        let p = tmp.path().join(name);
        fs::write(&p, v.to_string()).unwrap();
        p.to_str().unwrap().to_string()
    };
    let kinds = ["pinn", "variance", "td", "separate_control"];
    let good: Vec<String> = kinds
        .iter()
        .enumerate()
        .map(|(i, k)| write(&format!("g{i}.json"), k, if *k == "pinn" { 12.0 } else { 1.7 }))
        .collect();
    let mut args = vec!["compare"];
    args.extend(good.iter().map(String::as_str));
    let table = String::from_utf8(sbsampler(&args).stdout).unwrap();
    assert!(!table.contains("FLAG"));
    let first = table.lines().take_while(|l| !l.is_empty()).count();
    assert_eq!(first, 2 + 4);

    let bad = [write("b0.json", "pinn", 1.0), write("b1.json", "separate_control", 2.0)];
    let table = String::from_utf8(sbsampler(&["compare", &bad[0], &bad[1]]).stdout).unwrap();
    assert!(table.contains("FLAG"));
}

#[test]
fn bundled_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let o = sbsampler(&["run", p.to_str().unwrap(), "--dry-run"]);
        assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
        seen += 1;
    }
    assert!(seen >= 4);
}
