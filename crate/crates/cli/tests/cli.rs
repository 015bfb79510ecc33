use std::path::Path;
use std::process::{Command, Output};

fn crowdctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdctl")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SIM: &str = "n_tasks = 12\nrates_per_hour = [12.0, 14.4, 16.8, 19.2, 21.6, 24.0]\n";

fn experiment(dir: &Path, controllers: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    let text = format!("controllers = [{controllers}]\ndeadlines_minutes = [30.0, 60.0]\nseeds = 2\n{extra}\n[sim]\n{SIM}");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_lists_subcommands() {
    let out = crowdctl(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["plan", "simulate", "replay", "report", "policy", "episode"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn simulate_writes_a_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), "\"adaptive\", \"static-1\", \"gao-1\"", "");
    let out_dir = dir.path().join("out");
    let out = crowdctl(&["-j", "1", "simulate", "--config", arg(&cfg), "--out", arg(&out_dir), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "runs.csv", "utility_vs_deadline.csv", "accuracy_vs_deadline.csv", "cost_vs_deadline.csv", "avg_pay_vs_deadline.csv", "tracking.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let runs = std::fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 3 * 2 * 2);
    assert!(runs.lines().nth(1).unwrap().split(',').nth(3) == Some("5"));

    // `report` regenerates the same plot data from report.json
    let again = dir.path().join("again");
    let out = crowdctl(&["report", "--input", arg(&out_dir.join("report.json")), "--out", arg(&again)]);
    assert!(out.status.success());
    for f in ["utility_vs_deadline.csv", "tracking.csv"] {
        assert_eq!(std::fs::read(out_dir.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn plan_then_inspect_and_episode_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), "\"adaptive\", \"static-2\"", "");
    let plans = dir.path().join("plans");
    let out = crowdctl(&["plan", "--config", arg(&cfg), "--plan-cache", arg(&plans)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("built"));
    let out = crowdctl(&["plan", "--config", arg(&cfg), "--plan-cache", arg(&plans)]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("up to date"));

    let csv = dir.path().join("policy.csv");
    let out = crowdctl(&["policy", "inspect", "--plan", arg(&plans.join("scale-1")), "--out", arg(&csv)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("nu_bar,theta,tau,pay,action,value"));
    assert!(text.lines().count() > 1);

    let sim = dir.path().join("sim.toml");
    std::fs::write(&sim, format!("seed = 3\ndeadline_minutes = 60.0\n{SIM}")).unwrap();
    let ep = dir.path().join("episode");
    let out = crowdctl(&["episode", "--config", arg(&sim), "--controller", "static-2", "--out", arg(&ep)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["result.json", "epochs.csv", "trace.csv", "gold.csv"] {
        assert!(ep.join(f).exists(), "{f}");
    }

    let rep = dir.path().join("replayed");
    let out = crowdctl(&[
        "replay",
        "--config",
        arg(&cfg),
        "--plan-cache",
        arg(&plans),
        "--trace",
        arg(&ep.join("trace.csv")),
        "--gold",
        arg(&ep.join("gold.csv")),
        "--out",
        arg(&rep),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(rep.join("report.json").exists());
}

#[test]
fn failed_cells_give_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    std::fs::write(&trace, "timestamp_sec,task_id,worker_id,label,pay_level\n10,0,0,1,0\n").unwrap();
    // 3 gold labels for a 12-task batch
    let gold = dir.path().join("gold.csv");
    std::fs::write(&gold, "task_id,label\n0,1\n1,0\n2,1\n").unwrap();
    let cfg = experiment(dir.path(), "\"static-1\"", "");
    let out = crowdctl(&[
        "replay",
        "--config",
        arg(&cfg),
        "--trace",
        arg(&trace),
        "--gold",
        arg(&gold),
        "--out",
        arg(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failed"));
    assert!(dir.path().join("r/report.json").exists());
}

#[test]
fn bad_input_gives_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), "\"static-9x\"", "");
    let out = crowdctl(&["simulate", "--config", arg(&cfg), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("static-9x"));
    let out = crowdctl(&["simulate", "--config", arg(&dir.path().join("missing.toml")), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = experiment(dir.path(), "\"static-1\"", "");
    let out = crowdctl(&["simulate", "--config", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "no output directory given");
}
