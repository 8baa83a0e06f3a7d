use std::path::Path;
use std::process::{Command, Output};

use kf_minset::pipeline::{DatasetSource, FileSource, PoseFormat, RunConfig};
use kf_minset::sampling::SamplerMethod;
use kf_minset::synthworld::{TrajectoryKind, WorldConfig};

fn kf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kf-minset")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn results(b: &[u8]) -> String {
    let t = text(b);
    t[t.find("[summary]").expect("report has a summary")..].to_owned()
}

fn write_config(dir: &Path) -> String {
    let world = WorldConfig {
        seed: 3,
        trajectory: TrajectoryKind::Circle { radius: 15.0, laps: 2 },
        ..Default::default()
    };
    let mut cfg = RunConfig::synthetic(world, vec![SamplerMethod::All, SamplerMethod::Msa]);
    cfg.record_wall_time = false;
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(kf(&["--help"]).status.code(), Some(0));
    assert_eq!(kf(&[]).status.code(), Some(1));
    assert_eq!(kf(&["run-batch"]).status.code(), Some(1));
    assert_eq!(kf(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = kf(&["run-batch", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o.stderr));

    let cfg = write_config(dir.path());
    let o = kf(&["run-batch", "--config", &cfg, "--method", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
    let o = kf(&["sample", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1), "staged commands need an output directory");
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let o = kf(&["run-batch", "--config", dir.path().join("bad.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::synthetic(WorldConfig::default(), vec![SamplerMethod::All]);
    cfg.dataset = DatasetSource::Files(FileSource {
        poses: dir.path().join("missing.kitti"),
        format: PoseFormat::Kitti,
        odometry: None,
        descriptors: dir.path().join("missing.kfd"),
        channels: None,
        frame_period: 0.1,
    });
    let path = dir.path().join("files.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    let o = kf(&["run-batch", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("missing.kitti"));
}

#[test]
fn synth_then_staged_run_matches_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path());
    let data = dir.path().join("data");
    let o = kf(&["synth", "--config", &cfg_path, "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    for f in ["dataset.json", "descriptors.kfd", "gt.kitti", "odom.kitti", "loop_pairs.csv"] {
        assert!(data.join(f).exists(), "{f} missing");
    }

    let source: DatasetSource = serde_json::from_str(&std::fs::read_to_string(data.join("dataset.json")).unwrap()).unwrap();
    let mut files_cfg = RunConfig::load(Path::new(&cfg_path)).unwrap();
    files_cfg.dataset = source;
    let files_path = dir.path().join("files.json");
    std::fs::write(&files_path, files_cfg.to_json()).unwrap();
    let files_path = files_path.to_str().unwrap();

    let batch = kf(&["run-batch", "--config", files_path]);
    assert_eq!(batch.status.code(), Some(0), "{}", text(&batch.stderr));
    let synthetic = kf(&["run-batch", "--config", &cfg_path]);
    // only the [run] metadata may differ between the two dataset sources
    assert_eq!(results(&batch.stdout), results(&synthetic.stdout));

    let staged = dir.path().join("staged");
    let staged = staged.to_str().unwrap();
    for cmd in ["sample", "loops", "pgo"] {
        let o = kf(&[cmd, "--config", files_path, "--out", staged]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", text(&o.stderr));
    }
    let eval = kf(&["eval", "--config", files_path, "--out", staged]);
    assert_eq!(eval.status.code(), Some(0), "{}", text(&eval.stderr));
    assert_eq!(text(&eval.stdout), text(&batch.stdout));
    assert!(text(&eval.stdout).contains("msa"));
}

#[test]
fn seed_and_method_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = kf(&["run-batch", "--config", &cfg, "--method", "msa"]);
    let b = kf(&["run-batch", "--config", &cfg, "--method", "msa", "--seed", "3"]);
    let c = kf(&["run-batch", "--config", &cfg, "--method", "msa", "--seed", "4"]);
    assert_eq!(a.status.code(), Some(0), "{}", text(&a.stderr));
    assert_eq!(text(&a.stdout), text(&b.stdout));
    assert_ne!(text(&a.stdout), text(&c.stdout));
    assert!(!text(&a.stdout).lines().any(|l| l.starts_with("all ")));
}
