use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gginv_cli::report::canonical;
use tempfile::TempDir;

fn gginv(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("exp.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gginv"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .env_remove("GGINV_SEED")
        .env_remove("GGINV_JOBS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rows(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join("out/records.csv")).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let dir = TempDir::new().unwrap();
    let o = gginv(dir.path(), &["gg-check"], "family = pd\nzeta = 1.5\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zeta = 1.5"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn validate_reports_ok_or_every_diagnostic() {
    let dir = TempDir::new().unwrap();
    let o = gginv(dir.path(), &["validate"], "kind = gg-check\nn = 2\n");
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");

    let o = gginv(dir.path(), &["validate"], "kind = gg-check\nfunction = r12\nfunction = wobble\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown function id 'wobble'"), "{}", stderr(&o));

    let o = gginv(dir.path(), &["validate"], "kind = gg-check\nn = 1\n");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n >= 2"), "{}", stderr(&o));

    let o = gginv(dir.path(), &["validate"], "kind = gg-check\nn = 1\nfunction = wobble\nfrobnicate = 1\n");
    assert_eq!(stderr(&o).lines().count(), 3, "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn constant_function_gg_check_passes_with_zero_residuals() {
    let dir = TempDir::new().unwrap();
    let o = gginv(dir.path(), &["gg-check"], "function = one\nouter = 50\n");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = rows(dir.path());
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert_eq!(r[8], "0.0");
        assert_eq!(r[11], "pass");
    }
}

#[test]
fn negative_control_deletion_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = gginv(
        dir.path(),
        &["delete-check"],
        "family = negative-control\nfunction = r12\nn = 2\ns = 1\n",
    );
    assert_eq!(o.status.code(), Some(1));
    let rows = rows(dir.path());
    let diff: f64 = rows[0][8].parse().unwrap();
    assert!((diff - 0.2133).abs() < 0.005, "{diff}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["suite_verdict"], "reject");
    assert_eq!(report["checks"][0]["reports"][0]["retries"].as_u64().map(|r| r > 0), Some(true));
}

#[test]
fn seed_flag_and_environment_override_the_config() {
    let dir = TempDir::new().unwrap();
    let cfg = "function = r12\nn = 2\nt = 1\nouter = 20\nseed = 3\n";
    let run = |extra: &[&str], env: Option<&str>| {
        let path = dir.path().join("exp.cfg");
        fs::write(&path, cfg).unwrap();
        let mut c = Command::new(env!("CARGO_BIN_EXE_gginv"));
        c.arg("tilt-check").args(extra).arg("--config").arg(&path).arg("--out").arg(dir.path().join("out"));
        c.env_remove("GGINV_SEED");
        if let Some(seed) = env {
            c.env("GGINV_SEED", seed);
        }
        assert_eq!(c.output().unwrap().status.code(), Some(0));
        rows(dir.path())[0][12].clone()
    };
    assert_eq!(run(&[], None), "3/1");
    assert_eq!(run(&[], Some("7")), "7/1");
    assert_eq!(run(&["--seed", "9"], Some("7")), "9/1");
}

#[test]
fn time_limit_aborts_with_exit_3() {
    let dir = TempDir::new().unwrap();
    let o = gginv(dir.path(), &["tilt-check"], "time_limit = 0.000000001\nouter = 5000\n");
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("time limit"), "{}", stderr(&o));
}

#[test]
fn bad_flags_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(gginv(dir.path(), &["no-such-kind"], "").status.code(), Some(2));
    assert_eq!(gginv(dir.path(), &["gg-check", "--jobs", "0"], "").status.code(), Some(2));
    assert_eq!(gginv(dir.path(), &["gg-check", "--level", "1.5"], "").status.code(), Some(2));
}

#[test]
fn single_check_matches_its_suite_section() {
    let dir = TempDir::new().unwrap();
    let cfg = "outer = 30\ninner = 20\nsamples = 1000\nfunction = r12\nn = 2\n";
    assert_eq!(gginv(dir.path(), &["suite"], cfg).status.code(), Some(0));
    let suite = rows(dir.path());
    assert_eq!(gginv(dir.path(), &["delete-check"], cfg).status.code(), Some(0));
    let single = rows(dir.path());
    let from_suite: Vec<_> = suite.into_iter().filter(|r| r[0].starts_with("delete:")).collect();
    assert_eq!(from_suite, single);
}

#[test]
fn reruns_are_identical_after_canonicalization() {
    let dir = TempDir::new().unwrap();
    let cfg = "outer = 20\ninner = 10\nsamples = 1000\n";
    let mut reports = Vec::new();
    for jobs in ["1", "3"] {
        assert_eq!(gginv(dir.path(), &["suite", "--jobs", jobs], cfg).status.code(), Some(0));
        reports.push(fs::read_to_string(dir.path().join("out/report.json")).unwrap());
    }
    assert_ne!(reports[0], reports[1]);
    assert_eq!(canonical(&reports[0]).unwrap(), canonical(&reports[1]).unwrap());
}
