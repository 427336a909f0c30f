use affect_core::dataset::{
    generate_synthetic_dataset, load_dataset, make_split, mouth_curvature_measure, LabelMode,
    SyntheticConfig,
};
use affect_core::preprocess::{preprocess_frame, PreprocessConfig};
use affect_core::Error;

fn small(mode: LabelMode) -> SyntheticConfig {
    SyntheticConfig {
        n_clips: 4,
        frames_range: (8, 12),
        seed: 5,
        mode,
        ..Default::default()
    }
}

#[test]
fn generated_clips_load_and_match_truth() {
    let dir = tempfile::tempdir().unwrap();
    let ds =
        generate_synthetic_dataset(&small(LabelMode::RandomWalk { step_prob: 0.5 }), dir.path())
            .unwrap();
    assert_eq!(ds.index.clips.len(), 4);
    for (clip, truth) in ds.index.clips.iter().zip(&ds.truth) {
        assert_eq!(clip.clip_id, truth.clip_id);
        assert!((8..=12).contains(&clip.len()));
        for (f, ann) in clip.annotations.iter().enumerate() {
            assert_eq!((ann.valence, ann.arousal), truth.labels[f]);
            assert_eq!(ann.landmarks, truth.landmarks[f]);
        }
        for w in truth.labels.windows(2) {
            assert!((w[1].0 - w[0].0).abs() <= 1 && (w[1].1 - w[0].1).abs() <= 1);
        }
    }
    let again = load_dataset(dir.path()).unwrap();
    assert_eq!(again, ds.index);
}

#[test]
fn generation_is_seed_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small(LabelMode::RandomWalk { step_prob: 0.5 });
    let da = generate_synthetic_dataset(&cfg, a.path()).unwrap();
    let db = generate_synthetic_dataset(&cfg, b.path()).unwrap();
    assert_eq!(da.truth, db.truth);
    for (ca, cb) in da.index.clips.iter().zip(&db.index.clips) {
        for (fa, fb) in ca.frames.iter().zip(&cb.frames) {
            assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
        }
    }
}

#[test]
fn signal_window_clips_have_constant_labels() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(
        &small(LabelMode::SignalWindow { fraction: 0.4 }),
        dir.path(),
    )
    .unwrap();
    for t in &ds.truth {
        let (s, e) = t.signal_window.unwrap();
        assert!(e > s && e <= t.labels.len());
        assert!(t.labels.iter().all(|&l| l == t.labels[0]));
        let neutral =
            mouth_curvature_measure(&t.landmarks[if s > 0 { 0 } else { t.labels.len() - 1 }]);
        assert!(neutral.abs() < 0.05);
    }
}

#[test]
fn preprocessing_generated_frames() {
    let dir = tempfile::tempdir().unwrap();
    let ds =
        generate_synthetic_dataset(&small(LabelMode::RandomWalk { step_prob: 0.5 }), dir.path())
            .unwrap();
    let clip = &ds.index.clips[0];
    let frame = image::open(&clip.frames[0]).unwrap().to_rgb8();
    let crops = preprocess_frame(
        &frame,
        &clip.annotations[0].landmarks,
        &PreprocessConfig::default(),
    )
    .unwrap();
    for c in [&crops.face, &crops.eyes, &crops.mouth] {
        assert_eq!(c.image.dimensions(), (96, 96));
    }
}

#[test]
fn malformed_clips_name_the_clip() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&small(LabelMode::RandomWalk { step_prob: 0.5 }), dir.path())
        .unwrap();
    std::fs::remove_file(dir.path().join("clip_0002/annotations.json")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::MissingAnnotations { clip_id, .. }) => assert_eq!(clip_id, "clip_0002"),
        other => panic!("unexpected {other:?}"),
    }
    std::fs::remove_file(dir.path().join("clip_0002/frame_00000.png")).unwrap();
    std::fs::write(
        dir.path().join("clip_0002/annotations.json"),
        "{\"fps\":30,\"frames\":{}}",
    )
    .unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn split_covers_generated_ids() {
    let dir = tempfile::tempdir().unwrap();
    let ds =
        generate_synthetic_dataset(&small(LabelMode::RandomWalk { step_prob: 0.5 }), dir.path())
            .unwrap();
    let s = make_split(&ds.index, 0.25, 3).unwrap();
    assert_eq!((s.train_ids.len(), s.test_ids.len()), (3, 1));
}
