use std::fs;
use std::process::{Command, Output};

fn bsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsde")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn list_shows_every_experiment() {
    let out = bsde(&["list"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1 + 9);
    assert!(text.contains("american_d1") && text.contains("11.098"));
    assert!(text.contains("qg_d50_corr") && text.contains("6.78"));
    assert!(text.contains("call_spread_d30") && text.contains("none"));
}

#[test]
fn zero_iterations_write_the_initial_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    let out = bsde(&[
        "run", "--experiment", "bergman_call_d1", "--iters", "0", "--valid-size", "64", "-q", "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,y0,runtime_s");
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2..].iter().all(|l| l.starts_with('#')));
    assert!(text.contains("# status=completed"));
    assert!(text.contains("# oracle=8.467"));
    assert!(text.contains("# provenance=closed-form"));
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let out = bsde(&["run", "--experiment", "nope", "-q"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn missing_experiment_is_a_usage_error() {
    assert_eq!(bsde(&["run", "-q"]).status.code(), Some(2));
}

#[test]
fn divergence_keeps_partial_history() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let out = bsde(&[
        "run", "--experiment", "bergman_call_d1", "--learning-rate", "1e12", "--iters", "50", "--n-time", "5",
        "--batch-size", "32", "--valid-size", "32", "-q", "--out", path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,loss,y0,runtime_s\n0,"));
    assert!(text.contains("# status=diverged step="));
}

#[test]
fn compare_writes_both_tracks() {
    let out = bsde(&["compare", "--experiment", "call_spread_d1", "--iters", "0", "--valid-size", "64", "-q"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("track,step,loss,y0,runtime_s"));
    let tracks: Vec<_> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(tracks, ["ae", "no_ae"]);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("from_config.csv");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# short run\nexperiment = call_spread_d1\nuse-ae = false\niters = 3\ndisplay_stride = 1\nvalid_size = 64\nbatch_size = 32\nout = {}\n",
            csv.display()
        ),
    )
    .unwrap();
    let out = bsde(&["run", "--config", cfg.to_str().unwrap(), "--iters", "2", "-q"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let steps: Vec<_> = text.lines().skip(1).filter(|l| !l.starts_with('#')).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2"]);
    assert!(text.contains("# oracle=2.96"));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "experiment = bergman_call_d1\nwarp_speed = 9\n").unwrap();
    let out = bsde(&["run", "--config", cfg.to_str().unwrap(), "-q"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
