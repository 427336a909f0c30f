use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use affect_core::dataset::{load_dataset, SplitSpec};
use affect_core::harness::{Run, RunConfig, RunManifest};
use affect_core::Error;

fn smoke(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.synth.n_clips = 8;
    cfg.synth.frames_range = (12, 16);
    cfg.selector.channels = [4, 8, 8, 16];
    cfg.selector.steps = 20;
    cfg.model.channels = [4, 4, 8, 8, 16];
    cfg.model.fc = [16, 8];
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}

fn mtimes(root: &Path) -> BTreeMap<PathBuf, SystemTime> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path, entry.metadata().unwrap().modified().unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_artifacts_and_idempotence() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(smoke(3), tmp.path(), false).unwrap();

    assert!(matches!(
        run.keyframes(),
        Err(Error::MissingArtifact(_)) | Err(Error::Io { .. })
    ));
    let first = run.all().unwrap();
    assert!(first.iter().all(|r| !r.skipped));

    let index = load_dataset(&run.dataset_root()).unwrap();
    let split = SplitSpec::load(&run.split_path()).unwrap();
    for clip in &index.clips {
        let kf = run.keyframe_manifest(&clip.clip_id).unwrap();
        assert_eq!(kf.selected.len(), 10);
        assert!(kf.selected.iter().all(|&i| i < clip.len()));
        for k in 0..10 {
            assert!(run
                .flow_path(&clip.clip_id, affect_core::preprocess::Region::Eyes, k)
                .is_file());
            assert!(run
                .flow_path(&clip.clip_id, affect_core::preprocess::Region::Mouth, k)
                .is_file());
        }
    }
    let report = run.load_report().unwrap();
    assert_eq!(report.per_clip.len(), split.test_ids.len());
    let plots = std::fs::read_dir(run.eval_dir().join("plots"))
        .unwrap()
        .count();
    assert_eq!(plots, 2 * split.test_ids.len());

    let batches = std::fs::read_to_string(run.model_dir().join("batches.csv")).unwrap();
    let selector =
        std::fs::read_to_string(run.keyframes_dir().join("selector_batches.csv")).unwrap();
    for id in &split.test_ids {
        assert!(!batches.contains(id.as_str()));
        assert!(!selector.contains(id.as_str()));
    }
    let loss_rows = std::fs::read_to_string(run.model_dir().join("loss.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    assert_eq!(loss_rows, batches.lines().count() - 1);

    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap())
            .unwrap();
    for stage in [
        "synth",
        "split",
        "preprocess",
        "keyframes",
        "flow",
        "train",
        "eval",
    ] {
        assert!(manifest.timings.contains_key(stage), "{stage}");
        for p in &manifest.artifacts[stage] {
            assert!(tmp.path().join(p).exists(), "{}", p.display());
        }
    }

    let before = mtimes(tmp.path());
    let second = run.all().unwrap();
    assert!(second.iter().all(|r| r.skipped));
    assert_eq!(mtimes(tmp.path()), before);
    let text = run.report().unwrap();
    assert!(text.contains("CCC"));
}

#[test]
fn corrupt_frame_names_the_clip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(smoke(4), tmp.path(), false).unwrap();
    run.synth().unwrap();
    let index = load_dataset(&run.dataset_root()).unwrap();
    let victim = &index.clips[2];
    std::fs::write(&victim.frames[3], b"not a png").unwrap();
    let err = run.preprocess().unwrap_err().to_string();
    assert!(err.contains(&victim.clip_id), "{err}");
    assert!(!err.contains(&index.clips[0].clip_id), "{err}");
}

#[test]
fn eval_without_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::new(smoke(5), tmp.path(), false).unwrap();
    assert!(run.eval().is_err());
    assert!(run.report().is_err());
}
