use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rcrl_harness::experiment::RunSummary;
use rcrl_harness::output;

fn rcrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcrl"))
        .args(args)
        .env_remove("RCRL_SEED")
        .output()
        .expect("binary runs")
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

#[test]
fn zero_episodes_give_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"name": "empty", "environment": "bridgecross", "max_episodes": 0}"#,
    );
    let out = dir.path().join("out");
    let res = rcrl(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let episodes = fs::read_to_string(out.join("episodes.csv")).unwrap();
    assert_eq!(episodes, "episode,repeat,outcome,steps,reward,safety_mode_entries\n");
    let steps = fs::read_to_string(out.join("steps_to_win.csv")).unwrap();
    assert_eq!(steps, "episode,repeat,steps,outcome\n");
    let summary = output::read_summary(&out.join("summary.json")).unwrap();
    assert_eq!(summary.aggregate.total_episodes, 0);
    assert!(summary.visitation.iter().all(|c| c.count == 0));
}

#[test]
fn bad_config_exits_with_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"name": "bad", "environment": "bridgecross", "phi_max": "low"}"#);
    let res = rcrl(&["run", "--config", &config, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("phi_max"));

    let res = rcrl(&[
        "run",
        "--config",
        configs().join("pacman_m3.json").to_str().unwrap(),
        "--override",
        "m=4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.json");
    fs::write(&suite, r#"{"checks": ["moments"], "moments": {"num_samples": 100}}"#).unwrap();
    let res = rcrl(&["validate", "--suite", suite.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    // an impossible tolerance fails the check itself
    fs::write(&suite, r#"{"checks": ["theorem1"], "theorem1": {"replications": 50, "variance_window": [5.0, 6.0]}}"#)
        .unwrap();
    let res = rcrl(&["validate", "--suite", suite.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("FAIL"));

    fs::write(&suite, r#"{"matrix": {"instances": 20}}"#).unwrap();
    let report = dir.path().join("report.json");
    let res = rcrl(&[
        "validate",
        "--suite",
        suite.to_str().unwrap(),
        "--only",
        "matrix",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    assert_eq!(String::from_utf8_lossy(&res.stdout).lines().count(), 1);
    assert!(fs::read_to_string(report).unwrap().contains("\"passed\": true"));
}

#[test]
fn outputs_round_trip_and_conserve_visits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = rcrl(&[
        "run",
        "--config",
        configs().join("table1_prior2_phi033.json").to_str().unwrap(),
        "--override",
        "max_episodes=30",
        "--override",
        "num_repeats=2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary: RunSummary = output::read_summary(&out.join("summary.json")).unwrap();

    let rows = output::read_episodes(&out.join("episodes.csv")).unwrap();
    let by_repeat = output::episodes_by_repeat(&rows);
    assert_eq!(by_repeat.len(), 2);
    for (r, eps) in summary.repeats.iter().zip(&by_repeat) {
        assert_eq!(&r.episodes, eps);
    }
    let steps = output::read_steps_to_win(&out.join("steps_to_win.csv")).unwrap();
    assert_eq!(steps.len(), 60);
    for (s, e) in steps.iter().zip(&rows) {
        let expected = if e.outcome == rcrl_core::agent::Outcome::Success { e.steps } else { 400 };
        assert_eq!(s.steps, expected);
    }
    let visits = output::read_visitation(&out.join("visitation.csv")).unwrap();
    assert_eq!(visits.len(), 400);
    let total: u64 = visits.iter().map(|c| c.count).sum();
    assert_eq!(total, rows.iter().map(|e| e.steps as u64).sum::<u64>());
    let agg = &summary.aggregate;
    assert_eq!(agg.successes + agg.failures + agg.timeouts, agg.total_episodes);

    // export from the summary reproduces the same files
    let again = dir.path().join("again");
    let res = rcrl(&[
        "export",
        "--summary",
        out.join("summary.json").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    for f in ["episodes.csv", "steps_to_win.csv", "visitation.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_variable_overrides_base_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"name": "s", "environment": "pacman", "m": 2, "max_episodes": 5, "base_seed": 1}"#,
    );
    let run = |seed: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_rcrl"));
        cmd.args(["run", "--config", &config, "--out", out.to_str().unwrap()]);
        match seed {
            Some(s) => cmd.env("RCRL_SEED", s),
            None => cmd.env_remove("RCRL_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        output::read_summary(&out.join("summary.json")).unwrap()
    };
    assert_eq!(run(None, "a").repeats[0].seed, 1);
    assert_eq!(run(Some("42"), "b").repeats[0].seed, 42);
}

#[test]
fn traces_are_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"name": "t", "environment": "bridgecross", "max_episodes": 2, "max_steps": 10, "trace_level": "steps"}"#,
    );
    let out = dir.path().join("out");
    assert!(rcrl(&["run", "--config", &config, "--out", out.to_str().unwrap()]).status.success());
    let trace = fs::read_to_string(out.join("trace_0.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(first["episode"], 1);
    assert!(first["risks"].as_array().unwrap().len() == 5);
}

#[test]
fn describe_env_reports_shortest_crossing() {
    let res = rcrl(&["describe-env", "--layout", "bridgecross"]);
    assert!(res.status.success());
    let v: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(v["states"], 400);
    assert_eq!(v["shortest_path_to_goal"], 22);
    let res = rcrl(&["describe-env", "--layout", "/nonexistent/layout.txt"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn shipped_configs_parse() {
    let mut n = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let config = rcrl_harness::ExperimentConfig::load(&path, &[]).unwrap();
        config.build_environment().unwrap();
        n += 1;
    }
    assert_eq!(n, 20);
    let strict = rcrl_harness::ExperimentConfig::load(&configs().join("table1_prior3_strict.json"), &[]).unwrap();
    assert_eq!(strict.phi_max, 0.0033);
    assert_eq!(strict.max_episodes, 500);
    assert_eq!(strict.num_repeats, 10);
}
