use std::path::Path;
use std::process::{Command, Output};

fn ske2grid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ske2grid")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_dataset(dir: &Path) {
    let o = ske2grid(dir, &["gen-data", "--per-class", "8", "--frames", "8", "--classes", "3", "--out-dir", "d"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn value_after<'a>(text: &'a str, key: &str) -> &'a str {
    let line = text.lines().find(|l| l.contains(key)).unwrap_or_else(|| panic!("no `{key}` in {text}"));
    line.split_whitespace().skip_while(|w| *w != key).nth(1).unwrap()
}

#[test]
fn bad_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), "[train]\nmomentum = \"high\"\n").unwrap();
    let o = ske2grid(dir.path(), &["train", "--config", "cfg.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.momentum"));

    let o = ske2grid(dir.path(), &["train", "--grid", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = ske2grid(dir.path(), &["eval", "--checkpoint", "missing.sk2g"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ske2grid(dir.path(), &["gradcheck", "--instances", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("all 20 cases passed"));
}

#[test]
fn pls_writes_one_checkpoint_per_stage_and_eval_matches() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let o = ske2grid(
        dir.path(),
        &["pls", "--dataset", "d/dataset.skds", "--stages", "5x5,6x6,7x7", "--epochs", "1", "--out-dir", "p"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for k in 1..=3 {
        assert!(dir.path().join(format!("p/stage{k}.sk2g")).exists());
        assert!(dir.path().join(format!("p/stage{k}_metrics.csv")).exists());
    }
    let trained: f64 = value_after(&stdout(&o), "top-1").trim_end_matches('%').parse().unwrap();

    let o = ske2grid(dir.path(), &["eval", "--checkpoint", "p/model.sk2g", "--dataset", "d/dataset.skds", "--out-dir", "p"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated: f64 = value_after(&stdout(&o), "top-1").parse().unwrap();
    assert!((100.0 * evaluated - trained).abs() < 0.01);
    let confusion = std::fs::read_to_string(dir.path().join("p/confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 4);
}

#[test]
fn git_only_switches_are_embedded_in_the_checkpoint_config() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let o = ske2grid(
        dir.path(),
        &["train", "--dataset", "d/dataset.skds", "--git-mode", "surjective", "--no-upt", "--epochs", "1", "--out-dir", "g"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = std::fs::read_to_string(dir.path().join("g/config.toml")).unwrap();
    assert!(cfg.contains("use_upt = false") && cfg.contains("git_mode = \"surjective\""));
}

#[test]
fn viz_layout_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let o = ske2grid(dir.path(), &["train", "--dataset", "d/dataset.skds", "--epochs", "1", "--out-dir", "t"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for format in ["csv", "dot", "svg"] {
        let a = ske2grid(dir.path(), &["viz-layout", "--checkpoint", "t/model.sk2g", "--format", format]);
        let b = ske2grid(dir.path(), &["viz-layout", "--checkpoint", "t/model.sk2g", "--format", format]);
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout);
    }
    let csv = ske2grid(dir.path(), &["viz-layout", "--checkpoint", "t/model.sk2g"]);
    assert_eq!(stdout(&csv).lines().filter(|l| !l.starts_with('#')).count(), 1 + 25);
}

#[test]
fn single_arm_ablation_matches_eval_of_its_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    let o = ske2grid(
        dir.path(),
        &["ablate", "--dataset", "d/dataset.skds", "--arms", "git+upt", "--seeds", "3", "--epochs", "1", "--out-dir", "a"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = std::fs::read_to_string(dir.path().join("a/ablation_runs.csv")).unwrap();
    let top1: f64 = runs.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();

    let o = ske2grid(
        dir.path(),
        &["eval", "--checkpoint", "a/git+upt/seed3/model.sk2g", "--dataset", "d/dataset.skds", "--out-dir", "e"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated: f64 = value_after(&stdout(&o), "top-1").parse().unwrap();
    assert!((evaluated - top1).abs() < 1e-12, "{evaluated} vs {top1}");
}
