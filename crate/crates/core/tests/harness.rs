use saccade::data::{gen_shapes, shapes_splits};
use saccade::harness::{
    compare, emit_heatmap_pgm, evaluate, evaluate_batched, run_experiment, train_loop, Checkpoint, CompareReport,
    DatasetConfig, DatasetKind, ExperimentConfig, LoopSettings, ModelKind, RunPaths, SelectorOptions,
};
use saccade::optim::AdamConfig;
use saccade::rollout::HeatMap;
use saccade::san::Stage;
use saccade::vit::{self, PeMode, ViTConfig};
use saccade::{Rng, Tensor};

fn tiny_vit(classes: usize) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: classes,
        pe_mode: PeMode::Sinusoidal,
        dropout: 0.0,
    }
}

fn tiny(model: ModelKind, name: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(model);
    c.name = name.into();
    c.dataset = DatasetConfig {
        kind: DatasetKind::Shapes,
        image_size: 16,
        n_train: 120,
        n_test: 40,
        seed: 3,
    };
    c.vit = tiny_vit(3);
    c.k = 4;
    c.selector = SelectorOptions {
        stages: vec![Stage { channels: 4, blocks: 1 }],
        stem_stride: 2,
        pos_weight: 1.0,
    };
    c.max_epochs = 2;
    c.batch_size = 16;
    c.targets = c.targets.map(|_| "sel/targets.sact".into());
    c.teacher_checkpoint = c.teacher_checkpoint.map(|_| "teach/checkpoint.sanw".into());
    c.selector_checkpoint = c.selector_checkpoint.map(|_| "sel/checkpoint.sanw".into());
    c
}

#[test]
fn tiny_vit_memorises_a_small_set() {
    let cfg = tiny_vit(3);
    let images = gen_shapes(64, 8, 16);
    let params = vit::init_params(&cfg, &mut Rng::new(1)).unwrap();
    let px: Vec<&Tensor<f32>> = images.iter().map(|r| &r.pixels).collect();
    let train_acc = |p: &saccade::params::ParamSet| -> saccade::Result<f64> {
        let z = vit::predict_logits(&px, p, &cfg)?;
        let hits = z
            .data()
            .chunks(3)
            .zip(&images)
            .filter(|(row, r)| saccade::rollout::topk_indices(row, 1).unwrap()[0] == r.label)
            .count();
        Ok(hits as f64 / images.len() as f64)
    };
    let settings = LoopSettings {
        batch_size: 16,
        max_epochs: 60,
        patience: 60,
        seed: 2,
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
    };
    let out = train_loop(
        params,
        images.len(),
        settings,
        "train_accuracy",
        None,
        |tape, bound, batch, _| {
            let b: Vec<&Tensor<f32>> = batch.iter().map(|&i| &images[i].pixels).collect();
            let y: Vec<usize> = batch.iter().map(|&i| images[i].label).collect();
            let o = vit::forward_batch(tape, bound, &cfg, &b, None)?;
            tape.cross_entropy(o.logits, &y)
        },
        train_acc,
    )
    .unwrap();
    assert_eq!(out.best_metric, 1.0, "best {} at epoch {}", out.best_metric, out.best_epoch);
}

#[test]
fn untrained_hundred_class_model_is_near_chance() {
    let mut cfg = tiny(ModelKind::TeacherVit, "t");
    cfg.vit = ViTConfig { num_classes: 100, ..tiny_vit(100) };
    let params = vit::init_params(&cfg.vit, &mut Rng::new(4)).unwrap();
    let mut rng = Rng::new(5);
    let images: Vec<_> = (0..2000u32)
        .map(|id| saccade::data::ImageRecord {
            pixels: Tensor::new(vec![3, 16, 16], (0..768).map(|_| rng.uniform() as f32).collect()).unwrap(),
            label: (rng.uniform() * 100.0) as usize % 100,
            id,
            mask: None,
        })
        .collect();
    let acc = evaluate(&Checkpoint::new(params, cfg), &images, None).unwrap().accuracy.unwrap();
    assert!(acc < 0.035, "{acc}");
}

#[test]
fn evaluation_does_not_depend_on_batch_size() {
    let cfg = tiny(ModelKind::TeacherVit, "t");
    let params = vit::init_params(&cfg.vit, &mut Rng::new(6)).unwrap();
    let ckpt = Checkpoint::new(params, cfg);
    let images = gen_shapes(37, 9, 16);
    let a = evaluate_batched(&ckpt, &images, None, 1).unwrap();
    for b in [5, 37, 64] {
        assert_eq!(evaluate_batched(&ckpt, &images, None, b).unwrap(), a);
    }
}

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ModelKind::SimpleVit, "s");
    let params = vit::init_params(&cfg.vit, &mut Rng::new(7)).unwrap();
    let ckpt = Checkpoint::new(params, cfg);
    let path = dir.path().join("c.sanw");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.config, ckpt.config);
    for (name, t) in ckpt.params.iter() {
        let u = back.params.get(name).unwrap();
        assert_eq!(u.shape(), t.shape());
        assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
}

#[test]
fn pgm_file_has_header_plus_one_byte_per_patch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.pgm");
    let h = HeatMap::new((0..64).map(|i| i as f64).collect()).unwrap();
    emit_heatmap_pgm(&h, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), b"P5\n8 8\n255\n".len() + 64);
    assert_eq!(*bytes.last().unwrap(), 255);
}

#[test]
fn early_stopping_fires_after_patience() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ModelKind::TeacherVit, "t");
    cfg.max_epochs = 40;
    cfg.early_stop_patience = 1;
    cfg.optimizer.lr = 0.0;
    let data = shapes_splits(60, 20, 1, 16);
    let paths = RunPaths {
        base_dir: dir.path().into(),
        out_dir: dir.path().join("t"),
    };
    let r = run_experiment(&cfg, &data, &paths).unwrap();
    assert!(r.summary.stopped_early);
    assert_eq!(r.summary.epochs_run, 2);
    assert_eq!(r.summary.best_epoch, 1);
    let lines = std::fs::read_to_string(paths.history()).unwrap();
    assert_eq!(lines.lines().count(), 2);
}

fn tiny_pipeline() -> Vec<ExperimentConfig> {
    vec![
        tiny(ModelKind::TeacherVit, "teach"),
        tiny(ModelKind::Selector, "sel"),
        tiny(ModelKind::Sanvit, "student"),
        tiny(ModelKind::SimpleVit, "base"),
    ]
}

#[test]
fn compare_writes_report_with_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let report = compare(&tiny_pipeline(), None, dir.path()).unwrap();
    assert_eq!(report.baseline.as_deref(), Some("base"));
    assert_eq!(report.rows.len(), 4);
    for name in ["teach", "sel", "student", "base"] {
        for f in ["checkpoint.sanw", "history.jsonl", "summary.json"] {
            assert!(dir.path().join(name).join(f).is_file(), "{name}/{f}");
        }
    }
    assert!(dir.path().join("sel/targets.sact").is_file());
    let sel = &report.rows[1];
    assert!(sel.test_accuracy.is_none() && sel.overlap_at_k.is_some() && sel.transformer_flop_ratio.is_none());
    let student = &report.rows[2];
    assert_eq!(student.seq_len, 5);
    assert!(student.transformer_flop_ratio.unwrap() < 1.0);
    assert_eq!(report.rows[3].flop_ratio, Some(1.0));

    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let parsed: CompareReport = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, report);
    let table = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("student")).count(), 1);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    compare(&tiny_pipeline(), None, a.path()).unwrap();
    compare(&tiny_pipeline(), None, b.path()).unwrap();
    for name in ["teach", "sel", "student", "base"] {
        let ha = std::fs::read(a.path().join(name).join("history.jsonl")).unwrap();
        let hb = std::fs::read(b.path().join(name).join("history.jsonl")).unwrap();
        assert!(!ha.is_empty());
        assert_eq!(ha, hb, "{name}");
        let ca = std::fs::read(a.path().join(name).join("checkpoint.sanw")).unwrap();
        let cb = std::fs::read(b.path().join(name).join("checkpoint.sanw")).unwrap();
        assert_eq!(ca, cb, "{name}");
    }
}

#[test]
fn compare_rejects_duplicate_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfgs = vec![tiny(ModelKind::TeacherVit, "x"), tiny(ModelKind::SimpleVit, "x")];
    let err = compare(&cfgs, None, dir.path()).unwrap_err().to_string();
    assert!(err.contains("duplicate"), "{err}");
}

#[test]
fn config_json_round_trips_and_fills_defaults() {
    for m in [ModelKind::TeacherVit, ModelKind::Selector, ModelKind::Sanvit, ModelKind::SimpleVit] {
        let c = ExperimentConfig::desk(m);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }
    let minimal = r#"{"name":"m","dataset":{"kind":"shapes"},"model":"teacher_vit",
        "vit":{"image_size":16,"patch_size":4,"dim":16,"depth":1,"heads":2,"mlp_ratio":2,
        "num_classes":3,"pe_mode":"sinusoidal","dropout":0.0}}"#;
    let c = ExperimentConfig::from_json(minimal).unwrap();
    assert_eq!((c.k, c.batch_size, c.max_epochs, c.early_stop_patience), (8, 32, 30, 10));
    assert!(ExperimentConfig::from_json(&minimal.replace("\"heads\":2", "\"heads\":3")).is_err());
}
