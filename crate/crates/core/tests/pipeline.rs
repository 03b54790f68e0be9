//! Dataset on disk -> training -> checkpoint -> long-clip removal -> benchmark report.

use candle_core::{DType, Device};
use erasure_core::denoiser::{load_checkpoint, DiTConfig, DiffusionRemover};
use erasure_core::evalbench::{run_benchmark, EvalConfig};
use erasure_core::kgp::remove_long;
use erasure_core::relation::{encode_teacher, save_external_features, FrozenPatchEncoder};
use erasure_core::synthdata::{make_dataset, SpecDistribution};
use erasure_core::trainer::{load_training_set, train, TeacherSource, TrainConfig};
use erasure_core::video::{load_clip, load_mask, save_clip, ClipManifest, ManifestEntry};

fn tiny_dit() -> DiTConfig {
    DiTConfig {
        vision_patch: 4,
        vision_dim: 8,
        ..DiTConfig::with_depth(1, 16, 2, 4)
    }
}

#[test]
fn dataset_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let written = make_dataset(3, &SpecDistribution::new(4, (16, 16)), 5, dir.path()).unwrap();
    let loaded = ClipManifest::load(dir.path().join("manifest.json")).unwrap();
    loaded.validate().unwrap();
    assert_eq!(loaded.entries.len(), 3);
    for (w, l) in written.entries.iter().zip(&loaded.entries) {
        assert_eq!(w.clip_id(), l.clip_id());
        let (v, _) = load_clip(&l.input).unwrap();
        assert_eq!(v.dims(), (4, 16, 16));
        assert_eq!(load_mask(&l.mask).unwrap().dims(), (4, 16, 16));
    }
    // Same seed, same files.
    let again = tempfile::tempdir().unwrap();
    make_dataset(3, &SpecDistribution::new(4, (16, 16)), 5, again.path()).unwrap();
    let a = std::fs::read(dir.path().join("clip_00001/gt/frame_00002.png")).unwrap();
    let b = std::fs::read(again.path().join("clip_00001/gt/frame_00002.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn external_teacher_features_match_in_process_encoder() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(2, &SpecDistribution::shadows(2, (16, 16)), 8, dir.path()).unwrap();
    let manifest = ClipManifest::load(dir.path().join("manifest.json")).unwrap();
    let enc = FrozenPatchEncoder::new(4, 8, 1).unwrap();
    let feats = dir.path().join("features");
    for e in &manifest.entries {
        let (v, _) = load_clip(&e.input).unwrap();
        save_external_features(&feats, &e.clip_id(), &encode_teacher(&enc, &v).unwrap()).unwrap();
    }
    let a = load_training_set(&manifest, &TeacherSource::Encoder(&enc)).unwrap();
    let b = load_training_set(&manifest, &TeacherSource::External(feats)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let d = (x.teacher.data() - y.teacher.data())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-6);
    }
}

#[test]
fn train_checkpoint_remove_and_score() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(2, &SpecDistribution::shadows(5, (16, 16)), 2, dir.path()).unwrap();
    let manifest = ClipManifest::load(dir.path().join("manifest.json")).unwrap();
    let enc = FrozenPatchEncoder::new(4, 8, 3).unwrap();
    let data = load_training_set(&manifest, &TeacherSource::Encoder(&enc)).unwrap();

    let ckpt = dir.path().join("model.safetensors");
    let log = dir.path().join("metrics.jsonl");
    let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
    let outcome = train(&data, &tiny_dit(), &cfg, &ckpt, Some(&log)).unwrap();
    assert_eq!(outcome.metrics.len(), 3);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);

    let loaded = load_checkpoint(&ckpt, DType::F32, &Device::Cpu).unwrap();
    assert_eq!(loaded.step, Some(3));
    let (model, _vs) = loaded.into_model().unwrap();
    let remover = DiffusionRemover::new(model, 2);

    // A window of 3 forces keyframe propagation on 5-frame clips.
    let pred_dir = dir.path().join("pred");
    let mut entries = Vec::new();
    for e in &manifest.entries {
        let (v, _) = load_clip(&e.input).unwrap();
        let m = load_mask(&e.mask).unwrap();
        let out = remove_long(&remover, &v, &m, 3, 11).unwrap();
        assert_eq!(out.dims(), v.dims());
        assert_eq!(out, remove_long(&remover, &v, &m, 3, 11).unwrap());
        let target = pred_dir.join(e.clip_id());
        save_clip(&out, &target).unwrap();
        entries.push(ManifestEntry {
            id: Some(e.clip_id()),
            input: target,
            gt: None,
            mask: e.mask.clone(),
            frames: out.frames(),
        });
    }
    let report = run_benchmark(&ClipManifest::new(entries), &manifest, &EvalConfig::default()).unwrap();
    assert_eq!(report.per_clip.len(), 2);
    assert!(report.aggregate.psnr > 0.0 && report.aggregate.psnr <= 99.0);
    assert!(report.aggregate.ssim <= 1.0);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert!(json["aggregate"]["lpips"].is_null());
}
