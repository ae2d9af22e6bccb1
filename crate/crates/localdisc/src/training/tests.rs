use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use super::*;
use crate::core_math::ClusterProbMap;
use crate::data_pipeline::{AugmentConfig, ReferenceMaskSet, SourceKind};
use crate::losses::Stage;
use crate::networks::{Backbone, BackboneConfig, Mode, ParamStore};

// ---------------------------------------------------------------------------
// Fixtures

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        width_scale: 0.125,
        embedding_dim: 8,
        cluster_count: 4,
        ..BackboneConfig::default()
    }
}

fn small_stage(stage: Stage, seed: u64) -> StageConfig {
    let mut cfg = match stage {
        Stage::Pretrain => StageConfig::pretrain(seed),
        Stage::Ld => StageConfig::local_discrimination(seed),
        Stage::Prior => StageConfig::prior(seed),
        Stage::Finetune => unreachable!("finetune uses its own config"),
    };
    cfg.backbone = small_backbone();
    cfg.augment.out_size = 32;
    cfg.groups_per_batch = 2;
    cfg.mixups_per_batch = 1;
    cfg.max_epochs = 2;
    cfg.val_fraction = 0.0;
    cfg.plateau_patience = 0;
    cfg
}

fn noise_images(n: usize, size: usize, seed: u64) -> Vec<Array3<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Array3::from_shape_fn((3, size, size), |_| rng.gen::<f32>()))
        .collect()
}

/// Images with a bright square on a dark background, so structure losses
/// have something to latch onto.
fn square_images(n: usize, size: usize, seed: u64) -> Vec<Array3<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let side = size / 3 + rng.gen_range(0..size / 6);
            let y0 = rng.gen_range(0..size - side);
            let x0 = rng.gen_range(0..size - side);
            Array3::from_shape_fn((3, size, size), |(_, y, x)| {
                if y >= y0 && y < y0 + side && x >= x0 && x < x0 + side {
                    0.9
                } else {
                    0.1
                }
            })
        })
        .collect()
}

fn square_mask(size: usize, y0: usize, x0: usize, side: usize) -> Array2<f32> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        if y >= y0 && y < y0 + side && x >= x0 && x < x0 + side {
            1.0
        } else {
            0.0
        }
    })
}

fn assert_tensor_maps_identical(
    what: &str,
    a: &IndexMap<String, ArrayD<f32>>,
    b: &IndexMap<String, ArrayD<f32>>,
) {
    assert_eq!(a.len(), b.len(), "{what}: entry counts differ");
    for (name, va) in a {
        let vb = b.get(name).unwrap_or_else(|| panic!("{what}: missing {name}"));
        assert_eq!(va.shape(), vb.shape(), "{what}: shape of {name}");
        for (x, y) in va.iter().zip(vb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{what}: bits of {name} differ");
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[test]
fn adam_matches_hand_computed_steps() {
    let mut store = ParamStore::<f64>::new();
    store.add_param("w", ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let mut adam = Adam::<f64>::new();
    let mut grads = IndexMap::new();
    grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[1]), 0.5));

    // Reference: textbook update on a scalar, same constants.
    let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64, 0.5f64);
    let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=2i32 {
        m = m * b1 + g * (1.0 - b1);
        v = v * b2 + g * g * (1.0 - b2);
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
    }

    adam.step(&mut store, &grads, lr).unwrap();
    adam.step(&mut store, &grads, lr).unwrap();
    let got = store.param("w")[0];
    assert!((got - p).abs() < 1e-15, "got {got}, reference {p}");
    // Human-checkable anchor: constant gradient makes both bias-corrected
    // moments exact, so each step moves by lr * 0.5 / (0.5 + eps).
    assert!((got - 0.800000004).abs() < 1e-9, "got {got}");

    let slot = adam.slots().next().unwrap().1;
    assert_eq!(slot.step, 2);
    assert!((slot.m[0] - m).abs() < 1e-15);
    assert!((slot.v[0] - v).abs() < 1e-15);
}

#[test]
fn adam_refuses_non_finite_gradients_before_touching_state() {
    let mut store = ParamStore::<f32>::new();
    store.add_param("w", ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
    let mut adam = Adam::<f32>::new();
    let mut grads = IndexMap::new();
    grads.insert(
        "w".to_string(),
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.1f32, f32::NAN]).unwrap(),
    );
    assert!(adam.step(&mut store, &grads, 1e-3).is_err());
    assert_eq!(store.param("w")[0], 1.0, "parameter must be untouched");
    assert_eq!(adam.slot_count(), 0, "no slot may be created");
}

#[test]
fn adam_leaves_absent_parameters_untouched() {
    let mut store = ParamStore::<f64>::new();
    store.add_param("a", ArrayD::from_elem(IxDyn(&[1]), 1.0));
    store.add_param("b", ArrayD::from_elem(IxDyn(&[1]), 2.0));
    let mut adam = Adam::<f64>::new();
    let mut grads = IndexMap::new();
    grads.insert("a".to_string(), ArrayD::from_elem(IxDyn(&[1]), 1.0));
    adam.step(&mut store, &grads, 0.1).unwrap();
    assert_ne!(store.param("a")[0], 1.0);
    assert_eq!(store.param("b")[0], 2.0);
}

// ---------------------------------------------------------------------------
// Plateau schedule

#[test]
fn plateau_schedule_matches_reference_traces() {
    let lr0 = 1e-3;
    assert_eq!(plateau_lr_schedule(&[1.0, 0.9, 0.8], 3, 0.5, lr0), lr0);
    assert_eq!(plateau_lr_schedule(&[1.0, 1.0, 1.0, 1.0], 3, 0.5, lr0), lr0 * 0.5);
    assert_eq!(
        plateau_lr_schedule(&[1.0, 1.1, 1.05, 1.2, 1.1, 1.15, 1.3], 3, 0.5, lr0),
        lr0 * 0.25
    );
    // Patience zero disables the schedule entirely.
    assert_eq!(plateau_lr_schedule(&[1.0, 1.0, 1.0, 1.0], 0, 0.5, lr0), lr0);
}

#[test]
fn plateau_counter_resets_on_improvement_and_after_each_cut() {
    let mut s = PlateauScheduler::new(1.0, 2, 0.5);
    s.observe(1.0); // sets best
    s.observe(1.0); // bad 1
    s.observe(0.5); // improvement resets the counter
    s.observe(0.6); // bad 1
    assert_eq!(s.lr(), 1.0);
    s.observe(0.6); // bad 2 -> cut, counter resets
    assert_eq!(s.lr(), 0.5);
    s.observe(0.6); // bad 1 again, no immediate second cut
    assert_eq!(s.lr(), 0.5);
    s.observe(0.7); // bad 2 -> second cut
    assert_eq!(s.lr(), 0.25);

    // Snapshot carries lr, best, and the counter.
    let snap = s.snapshot();
    let restored = PlateauScheduler::restore(&snap, 2, 0.5);
    assert_eq!(restored.lr(), s.lr());
    assert_eq!(restored.snapshot().best, snap.best);
    assert_eq!(restored.snapshot().bad_epochs, snap.bad_epochs);
}

// ---------------------------------------------------------------------------
// Checkpoint format

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let backbone = Backbone::new(small_backbone()).unwrap();
    let mut store = ParamStore::<f32>::new();
    backbone.register(&mut store, &mut ChaCha8Rng::seed_from_u64(7));

    // Populate optimizer state with a real step on two parameters.
    let mut adam = Adam::<f32>::new();
    let mut grads = IndexMap::new();
    for name in store.param_names().take(2).map(str::to_string).collect::<Vec<_>>() {
        grads.insert(name.clone(), ArrayD::from_elem(store.param(&name).raw_dim(), 0.01f32));
    }
    adam.step(&mut store, &grads, 1e-3).unwrap();

    let mut rng = TrainRng::new(99);
    let _: u64 = rng.chacha().gen(); // advance the stream off its origin
    let sched = SchedSnapshot {
        lr: 5e-4,
        best: Some(0.25),
        bad_epochs: 2,
    };

    let ck = Checkpoint::capture(
        Stage::Ld,
        17,
        "deadbeef",
        &[&store],
        &[&adam],
        &rng,
        Some(sched),
    );
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();

    assert_eq!(back.stage, Stage::Ld);
    assert_eq!(back.epoch, 17);
    assert_eq!(back.config_hash, "deadbeef");
    assert_eq!(back.rng.seed, ck.rng.seed);
    assert_eq!(back.rng.word_pos(), ck.rng.word_pos());
    let s = back.sched.as_ref().unwrap();
    assert_eq!(s.lr, 5e-4);
    assert_eq!(s.best, Some(0.25));
    assert_eq!(s.bad_epochs, 2);

    assert_tensor_maps_identical("params", &ck.params, &back.params);
    assert_tensor_maps_identical("buffers", &ck.buffers, &back.buffers);
    assert_eq!(back.opt.len(), ck.opt.len());
    for (name, slot) in &ck.opt {
        let b = &back.opt[name];
        assert_eq!(b.step, slot.step);
        for (x, y) in slot.m.iter().zip(b.m.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in slot.v.iter().zip(b.v.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    // The restored stream continues exactly where the captured one would.
    let mut a = TrainRng::restore(&back.rng);
    let mut b = rng;
    assert_eq!(a.chacha().gen::<u64>(), b.chacha().gen::<u64>());
}

#[test]
fn checkpoint_rejects_other_precision_and_garbage() {
    let mut store = ParamStore::<f32>::new();
    store.add_param("w", ArrayD::from_elem(IxDyn(&[2]), 0.5f32));
    let ck = Checkpoint::capture(
        Stage::Pretrain,
        0,
        "h",
        &[&store],
        &[&Adam::new()],
        &TrainRng::new(0),
        None,
    );
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    assert!(Checkpoint::<f64>::load(&path).is_err(), "f64 load of f32 file");

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(Checkpoint::<f32>::load(&garbage).is_err());
}

#[test]
fn checkpoint_apply_all_requires_full_parameter_coverage() {
    let backbone = Backbone::new(small_backbone()).unwrap();
    let mut store = ParamStore::<f32>::new();
    backbone.register(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
    let mut partial = ParamStore::<f32>::new();
    partial.add_param("encoder.b1.c1.weight", store.param("encoder.b1.c1.weight").clone());
    let ck = Checkpoint::capture(
        Stage::Pretrain,
        0,
        "h",
        &[&partial],
        &[&Adam::new()],
        &TrainRng::new(0),
        None,
    );
    assert!(ck.apply_all(&mut store).is_err());
    assert_eq!(ck.apply_to(&mut store).unwrap(), 1);
}

// ---------------------------------------------------------------------------
// Metrics

#[test]
fn metrics_round_trip_and_optional_fields() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let mut w = MetricsWriter::new(Some(&path)).unwrap();
    let mut components = BTreeMap::new();
    components.insert("pd".to_string(), 1.5);
    components.insert("mixup".to_string(), 0.5);
    w.push(EpochRecord {
        stage: "pretrain".into(),
        epoch: 0,
        components: components.clone(),
        total: 2.0,
        lr: 1e-3,
        lr_d: None,
        val_loss: Some(1.9),
        wall_time_s: 0.1,
    })
    .unwrap();
    w.push(EpochRecord {
        stage: "prior".into(),
        epoch: 1,
        components,
        total: 2.0,
        lr: 1e-3,
        lr_d: Some(2e-4),
        val_loss: None,
        wall_time_s: 0.2,
    })
    .unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(!lines[0].contains("lr_d"), "absent optional field must be omitted");
    assert!(lines[1].contains("lr_d"));

    let back = read_metrics(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].stage, "pretrain");
    assert_eq!(back[0].val_loss, Some(1.9));
    assert_eq!(back[1].lr_d, Some(2e-4));
    assert_eq!(back[1].val_loss, None);
    assert_eq!(back[0].components["pd"], 1.5);
}

#[test]
fn config_hash_is_stable_and_sensitive() {
    let a = small_stage(Stage::Pretrain, 0);
    let mut b = small_stage(Stage::Pretrain, 0);
    assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    b.lr = 2e-3;
    assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
}

#[test]
fn mix_seed_separates_coordinates() {
    assert_ne!(mix_seed(1, 2, 3), mix_seed(1, 2, 4));
    assert_ne!(mix_seed(1, 2, 3), mix_seed(1, 3, 2));
    assert_ne!(mix_seed(1, 2, 3), mix_seed(2, 1, 3));
    assert_eq!(mix_seed(1, 2, 3), mix_seed(1, 2, 3));
}

// ---------------------------------------------------------------------------
// Pretraining runner

#[test]
fn pretrain_writes_one_record_per_epoch_and_a_checkpoint() {
    let images = noise_images(8, 32, 11);
    let mut cfg = small_stage(Stage::Pretrain, 5);
    cfg.groups_per_batch = 4;
    cfg.mixups_per_batch = 2;
    cfg.val_fraction = 0.1;
    cfg.plateau_patience = 3;
    cfg.max_epochs = 2;

    let dir = tempdir().unwrap();
    let metrics_path = dir.path().join("metrics.jsonl");
    let sink = TrainSink {
        metrics_path: Some(&metrics_path),
        diverged_path: None,
    };
    let run = run_patch_pretrain::<f32>(&cfg, &images, &sink).unwrap();

    assert_eq!(run.records.len(), 2, "exactly one record per epoch");
    for (i, r) in run.records.iter().enumerate() {
        assert_eq!(r.stage, "pretrain");
        assert_eq!(r.epoch, i);
        assert_eq!(r.lr, 1e-3);
        assert!(r.components.contains_key("pd"));
        assert!(r.components.contains_key("mixup"));
        assert!(!r.components.contains_key("ld"), "pretraining has no clustering terms");
        assert!(r.total.is_finite());
        assert!(r.val_loss.unwrap().is_finite(), "patience > 0 trains with validation");
        assert!(r.wall_time_s > 0.0);
        assert!(r.lr_d.is_none());
    }

    let on_disk = read_metrics(&metrics_path).unwrap();
    assert_eq!(on_disk.len(), 2);
    assert_eq!(on_disk[1].epoch, 1);

    let ck = &run.checkpoint;
    assert_eq!(ck.stage, Stage::Pretrain);
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.config_hash, config_hash(&cfg).unwrap());
    assert!(ck.params.keys().any(|k| k.starts_with("encoder.")));
    assert!(ck.params.keys().any(|k| k.starts_with("head.emb")));
    assert!(!ck.buffers.is_empty(), "running statistics belong in the checkpoint");
    assert!(!ck.opt.is_empty(), "optimizer state belongs in the checkpoint");
}

#[test]
fn pretrain_loss_decreases_on_a_small_set() {
    let images = square_images(8, 32, 3);
    let mut cfg = small_stage(Stage::Pretrain, 1);
    cfg.groups_per_batch = 4;
    cfg.mixups_per_batch = 2;
    cfg.max_epochs = 10;
    let sink = TrainSink::default();
    let run = run_patch_pretrain::<f32>(&cfg, &images, &sink).unwrap();
    assert_eq!(run.records.len(), 10);
    let first = run.records.first().unwrap().total;
    let last = run.records.last().unwrap().total;
    assert!(
        last < first,
        "total should drop over 10 epochs: first {first}, last {last}"
    );
}

#[test]
fn lr_halves_after_three_flat_epochs() {
    // One image, identity views, and a step size far below f32 resolution:
    // the observed loss is bit-identical every epoch, so the plateau counter
    // must fire exactly at its patience.
    let images = noise_images(1, 32, 2);
    let mut cfg = small_stage(Stage::Pretrain, 8);
    cfg.augment = AugmentConfig::identity(32);
    cfg.groups_per_batch = 1;
    cfg.mixups_per_batch = 0;
    cfg.lr = 1e-30;
    cfg.plateau_patience = 3;
    cfg.val_fraction = 0.0; // no held-out image: the schedule watches the training total
    cfg.max_epochs = 5;
    let run = run_patch_pretrain::<f32>(&cfg, &images, &TrainSink::default()).unwrap();

    let totals: Vec<f64> = run.records.iter().map(|r| r.total).collect();
    assert!(
        totals.windows(2).take(3).all(|w| w[0] == w[1]),
        "frozen parameters must repeat the loss exactly, got {totals:?}"
    );
    let lrs: Vec<f64> = run.records.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[..4], [1e-30, 1e-30, 1e-30, 1e-30]);
    assert_eq!(lrs[4], 0.5e-30, "the fifth epoch runs at the halved rate");
}

#[test]
fn epoch_zero_is_deterministic_across_runs() {
    let images = noise_images(6, 32, 21);
    let mut cfg = small_stage(Stage::Pretrain, 33);
    cfg.max_epochs = 1;
    cfg.val_fraction = 0.25;
    cfg.plateau_patience = 1;
    let a = run_patch_pretrain::<f32>(&cfg, &images, &TrainSink::default()).unwrap();
    let b = run_patch_pretrain::<f32>(&cfg, &images, &TrainSink::default()).unwrap();
    let (ra, rb) = (&a.records[0], &b.records[0]);
    assert_eq!(ra.total, rb.total);
    assert_eq!(ra.val_loss, rb.val_loss);
    assert_eq!(ra.components, rb.components);
    assert_tensor_maps_identical("params", &a.checkpoint.params, &b.checkpoint.params);
    assert_tensor_maps_identical("buffers", &a.checkpoint.buffers, &b.checkpoint.buffers);
}

#[test]
fn divergence_aborts_within_a_step_and_leaves_a_diagnostic() {
    let images = noise_images(4, 32, 17);
    let mut cfg = small_stage(Stage::Pretrain, 0);
    cfg.lr = 1e300; // one update throws the parameters to infinity
    cfg.max_epochs = 3;
    let dir = tempdir().unwrap();
    let metrics_path = dir.path().join("metrics.jsonl");
    let diverged_path = dir.path().join("diverged.ckpt");
    let sink = TrainSink {
        metrics_path: Some(&metrics_path),
        diverged_path: Some(&diverged_path),
    };
    let err = run_patch_pretrain::<f32>(&cfg, &images, &sink).unwrap_err();
    match err {
        Error::Diverged { stage, .. } => assert_eq!(stage, "pretrain"),
        other => panic!("expected divergence, got {other}"),
    }
    assert!(diverged_path.exists(), "diagnostic checkpoint must be written");
    let ck = Checkpoint::<f32>::load(&diverged_path).unwrap();
    assert_eq!(ck.stage, Stage::Pretrain);
    // The run aborted before finishing an epoch, so no record was logged.
    assert!(read_metrics(&metrics_path).unwrap().is_empty());
}

// ---------------------------------------------------------------------------
// Joint stage

fn tiny_pretrain_checkpoint(images: &[Array3<f32>], seed: u64) -> Checkpoint<f32> {
    let mut cfg = small_stage(Stage::Pretrain, seed);
    cfg.max_epochs = 1;
    run_patch_pretrain::<f32>(&cfg, images, &TrainSink::default())
        .unwrap()
        .checkpoint
}

#[test]
fn joint_training_resumes_bit_compatibly() {
    let images = noise_images(4, 32, 40);
    let init = tiny_pretrain_checkpoint(&images, 40);

    let mut cfg = small_stage(Stage::Ld, 41);
    cfg.max_epochs = 2;
    let straight = run_local_discrimination::<f32>(&cfg, &images, &init, &TrainSink::default())
        .unwrap();

    let mut cfg_half = cfg.clone();
    cfg_half.max_epochs = 1;
    let halfway = run_local_discrimination::<f32>(&cfg_half, &images, &init, &TrainSink::default())
        .unwrap();
    assert_eq!(halfway.checkpoint.stage, Stage::Ld);
    assert_eq!(halfway.checkpoint.epoch, 1);
    let resumed =
        run_local_discrimination::<f32>(&cfg, &images, &halfway.checkpoint, &TrainSink::default())
            .unwrap();

    assert_eq!(straight.records.len(), 2);
    assert_eq!(resumed.records.len(), 1, "resume trains only the remaining epoch");
    assert_eq!(resumed.records[0].epoch, 1);
    assert_eq!(
        straight.records[1].total, resumed.records[0].total,
        "the resumed epoch must replay the straight run exactly"
    );
    assert_tensor_maps_identical(
        "params",
        &straight.checkpoint.params,
        &resumed.checkpoint.params,
    );
    assert_tensor_maps_identical(
        "buffers",
        &straight.checkpoint.buffers,
        &resumed.checkpoint.buffers,
    );
    assert_eq!(
        straight.checkpoint.rng.word_pos(),
        resumed.checkpoint.rng.word_pos(),
        "random stream positions must agree"
    );
    for (name, slot) in &straight.checkpoint.opt {
        let r = &resumed.checkpoint.opt[name];
        assert_eq!(slot.step, r.step, "optimizer step count of {name}");
        for (x, y) in slot.m.iter().zip(r.m.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "optimizer m of {name}");
        }
    }
}

#[test]
fn joint_stage_logs_all_components_and_keeps_cluster_maps_valid() {
    let images = square_images(4, 32, 50);
    let init = tiny_pretrain_checkpoint(&images, 50);
    let mut cfg = small_stage(Stage::Ld, 51);
    cfg.max_epochs = 2;
    let run = run_local_discrimination::<f32>(&cfg, &images, &init, &TrainSink::default())
        .unwrap();

    for r in &run.records {
        assert_eq!(r.stage, "ld");
        for key in ["pd", "mixup", "ld", "entropy", "area"] {
            let v = r.components[key];
            assert!(v.is_finite(), "component {key} must be finite, got {v}");
        }
        // The logged total is exactly the weighted sum of the logged parts.
        let w = &cfg.weights;
        let expect = w.w_pd * r.components["pd"]
            + w.w_mixup * r.components["mixup"]
            + w.w_ld * r.components["ld"]
            + w.w_entropy * r.components["entropy"]
            + w.w_area * r.components["area"];
        assert_eq!(r.total, expect, "no hidden terms in the total");
    }

    // After training, the clustering head still emits a valid probability map.
    let backbone = Backbone::new(cfg.backbone.clone()).unwrap();
    let mut store = ParamStore::<f32>::new();
    backbone.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    run.checkpoint.apply_all(&mut store).unwrap();
    let g = crate::autodiff::Graph::new();
    let ctx = store.bind_filtered(&g, Mode::Eval, |_| false);
    let views: Vec<&Array3<f32>> = images.iter().collect();
    let x = {
        let mut out = ndarray::Array4::<f32>::zeros((views.len(), 3, 32, 32));
        for (i, img) in views.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(img);
        }
        out.into_dyn()
    };
    let net_out = backbone.forward(&ctx, g.constant(x)).unwrap();
    let r4: ndarray::Array4<f32> = net_out
        .clustering
        .value()
        .as_ref()
        .clone()
        .into_dimensionality()
        .unwrap();
    ClusterProbMap::new(r4).expect("cluster probabilities must stay valid");
}

#[test]
fn joint_stage_rejects_single_cluster_and_wrong_init_stage() {
    let images = noise_images(2, 32, 60);
    let init = tiny_pretrain_checkpoint(&images, 60);

    let mut bad = small_stage(Stage::Ld, 61);
    bad.backbone.cluster_count = 1;
    let err = run_local_discrimination::<f32>(&bad, &images, &init, &TrainSink::default())
        .unwrap_err();
    assert!(
        err.to_string().contains("cluster_count"),
        "unexpected error: {err}"
    );

    let cfg = small_stage(Stage::Ld, 61);
    let mut wrong_stage = init.clone();
    wrong_stage.stage = Stage::Finetune;
    let err =
        run_local_discrimination::<f32>(&cfg, &images, &wrong_stage, &TrainSink::default())
            .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "unexpected error: {err}");
}

// ---------------------------------------------------------------------------
// Adversarial stage

fn reference_squares(k: usize, size: usize, samples: usize) -> ReferenceMaskSet {
    let names: Vec<String> = (0..k).map(|i| format!("structure_{i}")).collect();
    let masks: Vec<Array3<f32>> = (0..samples)
        .map(|s| {
            Array3::from_shape_fn((k, size, size), |(c, y, x)| {
                let side = size / 3;
                let off = (s + 2 * c) % (size - side);
                if y >= off && y < off + side && x >= off && x < off + side {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    ReferenceMaskSet::new(names, masks, SourceKind::Simulated).unwrap()
}

fn tiny_ld_checkpoint(images: &[Array3<f32>], seed: u64) -> Checkpoint<f32> {
    let init = tiny_pretrain_checkpoint(images, seed);
    let mut cfg = small_stage(Stage::Ld, seed);
    cfg.max_epochs = 1;
    run_local_discrimination::<f32>(&cfg, images, &init, &TrainSink::default())
        .unwrap()
        .checkpoint
}

#[test]
fn adversarial_stage_trains_and_logs_discriminator_loss() {
    let images = square_images(2, 64, 70);
    let init = tiny_ld_checkpoint(&images, 70);
    let refs = reference_squares(2, 64, 3);
    let prior = PriorSpec {
        structure_names: refs.structure_names.clone(),
        cluster_channels: BTreeMap::from([
            ("structure_0".to_string(), 1),
            ("structure_1".to_string(), 3),
        ]),
        source_kind: SourceKind::Simulated,
        warm_start: false,
    };
    let mut cfg = small_stage(Stage::Prior, 71);
    cfg.augment.out_size = 64;
    cfg.max_epochs = 2;
    let run =
        run_prior_guided::<f32>(&cfg, &images, &prior, &refs, &init, &TrainSink::default())
            .unwrap();
    assert_eq!(run.records.len(), 2);
    for r in &run.records {
        assert_eq!(r.stage, "prior");
        assert_eq!(r.lr_d, Some(cfg.disc_lr));
        for key in ["pd", "mixup", "ld", "entropy", "area", "adv", "disc"] {
            assert!(r.components[key].is_finite(), "{key} must be logged");
        }
        // The generator total weighs adv in; the discriminator loss is
        // tracked alongside but is not part of the total.
        let w = &cfg.weights;
        let expect = w.w_pd * r.components["pd"]
            + w.w_mixup * r.components["mixup"]
            + w.w_ld * r.components["ld"]
            + w.w_entropy * r.components["entropy"]
            + w.w_area * r.components["area"]
            + w.w_adv * r.components["adv"];
        assert_eq!(r.total, expect);
    }
    assert!(run.checkpoint.params.keys().any(|k| k.starts_with("disc.")));
    assert_eq!(run.checkpoint.stage, Stage::Prior);
}

#[test]
fn discriminator_fits_a_frozen_generator_monotonically() {
    // Freeze the representation in effect (a step size below f32 resolution)
    // and keep the batch constant: the discriminator sees the same real/fake
    // pair every epoch, so its loss must fall strictly for five epochs.
    let images = square_images(2, 64, 80);
    let init = tiny_ld_checkpoint(&images, 80);
    let refs = ReferenceMaskSet::new(
        vec!["s".into()],
        vec![Array3::from_shape_fn((1, 64, 64), |(_, y, x)| {
            if (16..48).contains(&y) && (16..48).contains(&x) {
                1.0
            } else {
                0.0
            }
        })],
        SourceKind::Simulated,
    )
    .unwrap();
    let prior = PriorSpec {
        structure_names: vec!["s".into()],
        cluster_channels: BTreeMap::from([("s".to_string(), 2)]),
        source_kind: SourceKind::Simulated,
        warm_start: false,
    };
    let mut cfg = small_stage(Stage::Prior, 81);
    cfg.augment = AugmentConfig::identity(64);
    cfg.mixups_per_batch = 0;
    cfg.lr = 1e-30;
    cfg.disc_lr = 2e-4;
    cfg.max_epochs = 5;
    let run =
        run_prior_guided::<f32>(&cfg, &images, &prior, &refs, &init, &TrainSink::default())
            .unwrap();
    let d: Vec<f64> = run.records.iter().map(|r| r.components["disc"]).collect();
    for w in d.windows(2) {
        assert!(w[1] < w[0], "discriminator loss must fall each epoch: {d:?}");
    }
}

#[test]
fn adversarial_stage_validates_prior_and_reference_order() {
    let images = square_images(2, 64, 90);
    let init = tiny_ld_checkpoint(&images, 90);
    let refs = reference_squares(2, 64, 2);
    let mut cfg = small_stage(Stage::Prior, 91);
    cfg.augment.out_size = 64;
    cfg.max_epochs = 1;

    // Same structures, different order: the channel convention breaks.
    let swapped = PriorSpec {
        structure_names: vec![
            refs.structure_names[1].clone(),
            refs.structure_names[0].clone(),
        ],
        cluster_channels: BTreeMap::from([
            (refs.structure_names[1].clone(), 0),
            (refs.structure_names[0].clone(), 1),
        ]),
        source_kind: SourceKind::Simulated,
        warm_start: false,
    };
    let err = run_prior_guided::<f32>(&cfg, &images, &swapped, &refs, &init, &TrainSink::default())
        .unwrap_err();
    assert!(
        err.to_string().contains("order"),
        "mismatched order must be named: {err}"
    );

    // Duplicate channel assignment.
    let dup = PriorSpec {
        structure_names: refs.structure_names.clone(),
        cluster_channels: BTreeMap::from([
            (refs.structure_names[0].clone(), 1),
            (refs.structure_names[1].clone(), 1),
        ]),
        source_kind: SourceKind::Simulated,
        warm_start: false,
    };
    assert!(
        run_prior_guided::<f32>(&cfg, &images, &dup, &refs, &init, &TrainSink::default()).is_err()
    );

    // More structures than cluster channels.
    let crowded = PriorSpec {
        structure_names: (0..5).map(|i| format!("s{i}")).collect(),
        cluster_channels: (0..5).map(|i| (format!("s{i}"), i)).collect(),
        source_kind: SourceKind::Simulated,
        warm_start: false,
    };
    assert!(crowded.validate(cfg.backbone.cluster_count).is_err());
}

#[test]
fn adversarial_resume_is_bit_compatible() {
    let images = square_images(2, 64, 95);
    let init = tiny_ld_checkpoint(&images, 95);
    let refs = reference_squares(1, 64, 2);
    let prior = PriorSpec {
        structure_names: refs.structure_names.clone(),
        cluster_channels: BTreeMap::from([(refs.structure_names[0].clone(), 0)]),
        source_kind: SourceKind::Simulated,
        warm_start: false,
    };
    let mut cfg = small_stage(Stage::Prior, 96);
    cfg.augment.out_size = 64;
    cfg.max_epochs = 2;
    let straight =
        run_prior_guided::<f32>(&cfg, &images, &prior, &refs, &init, &TrainSink::default())
            .unwrap();

    let mut cfg_half = cfg.clone();
    cfg_half.max_epochs = 1;
    let halfway =
        run_prior_guided::<f32>(&cfg_half, &images, &prior, &refs, &init, &TrainSink::default())
            .unwrap();
    let resumed = run_prior_guided::<f32>(
        &cfg,
        &images,
        &prior,
        &refs,
        &halfway.checkpoint,
        &TrainSink::default(),
    )
    .unwrap();
    assert_tensor_maps_identical(
        "params",
        &straight.checkpoint.params,
        &resumed.checkpoint.params,
    );
    assert_eq!(straight.records[1].total, resumed.records[0].total);
    assert_eq!(
        straight.records[1].components["disc"],
        resumed.records[0].components["disc"]
    );
}

// ---------------------------------------------------------------------------
// Fine-tuning

fn labeled_squares(n: usize, size: usize, seed: u64) -> Vec<(Array3<f32>, Array2<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let side = size / 3;
            let y0 = rng.gen_range(0..size - side);
            let x0 = rng.gen_range(0..size - side);
            let mask = square_mask(size, y0, x0, side);
            let img = Array3::from_shape_fn((3, size, size), |(_, y, x)| {
                0.1 + 0.8 * mask[[y, x]]
            });
            (img, mask)
        })
        .collect()
}

#[test]
fn finetune_smoke_runs_both_phases_and_logs_dice() {
    let train = labeled_squares(4, 32, 7);
    let eval_set = labeled_squares(2, 32, 8);
    let mut cfg = FinetuneConfig::new(9);
    cfg.backbone = small_backbone();
    cfg.frozen_epochs = 1;
    cfg.full_epochs = 1;
    cfg.batch_size = 2;
    let dir = tempdir().unwrap();
    let metrics_path = dir.path().join("metrics.jsonl");
    let sink = TrainSink {
        metrics_path: Some(&metrics_path),
        diverged_path: None,
    };
    let run = run_finetune::<f32>(&cfg, None, &train, &eval_set, &sink).unwrap();
    assert_eq!(run.records.len(), 2);
    assert_eq!(run.records[0].lr, cfg.frozen_lr);
    assert_eq!(run.records[1].lr, cfg.full_lr);
    for r in &run.records {
        assert_eq!(r.stage, "finetune");
        assert!(r.components["dice"].is_finite());
        let ed = r.components["eval_dice"];
        assert!((0.0..=1.0).contains(&ed), "eval dice must be a Dice score, got {ed}");
    }
    assert_eq!(read_metrics(&metrics_path).unwrap().len(), 2);
    assert_eq!(run.checkpoint.stage, Stage::Finetune);
    assert!(run.checkpoint.params.keys().any(|k| k.starts_with("seg.")));
    assert!(run.checkpoint.params.keys().any(|k| k.starts_with("encoder.")));
}

#[test]
fn frozen_phase_leaves_encoder_bit_identical() {
    let train = labeled_squares(4, 32, 17);
    let mut cfg = FinetuneConfig::new(19);
    cfg.backbone = small_backbone();
    cfg.frozen_epochs = 2;
    cfg.full_epochs = 0;
    cfg.batch_size = 2;

    // Reconstruct the runner's deterministic initialization.
    let backbone = Backbone::new(cfg.backbone.clone()).unwrap();
    let mut fresh = ParamStore::<f32>::new();
    backbone.register(
        &mut fresh,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 0)),
    );

    let run = run_finetune::<f32>(&cfg, None, &train, &[], &TrainSink::default()).unwrap();
    let mut enc_params = 0;
    for (name, initial) in fresh.iter_params() {
        if Backbone::is_encoder_param(name) {
            enc_params += 1;
            let after = &run.checkpoint.params[name];
            for (x, y) in initial.iter().zip(after.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "frozen encoder param {name} moved");
            }
        }
    }
    assert!(enc_params > 0);
    for (name, initial) in fresh.iter_buffers() {
        if Backbone::is_encoder_param(name) {
            let after = &run.checkpoint.buffers[name];
            for (x, y) in initial.iter().zip(after.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "frozen encoder buffer {name} drifted");
            }
        }
    }
    // The decoder must actually have learned.
    let seg_moved = run
        .checkpoint
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("seg."))
        .any(|(k, v)| {
            let init_rng = &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 1));
            let seg = crate::networks::SegmentationDecoder::new(
                cfg.decoder.clone(),
                backbone.bottom_channels(),
            )
            .unwrap();
            let mut s = ParamStore::<f32>::new();
            seg.register(&mut s, init_rng);
            s.param(k).iter().zip(v.iter()).any(|(a, b)| a != b)
        });
    assert!(seg_moved, "the segmentation decoder should train in the frozen phase");

    // With a full phase, the encoder does move.
    let mut cfg2 = cfg.clone();
    cfg2.frozen_epochs = 0;
    cfg2.full_epochs = 2;
    let run2 = run_finetune::<f32>(&cfg2, None, &train, &[], &TrainSink::default()).unwrap();
    let moved = fresh.iter_params().any(|(name, initial)| {
        Backbone::is_encoder_param(name)
            && initial
                .iter()
                .zip(run2.checkpoint.params[name].iter())
                .any(|(a, b)| a != b)
    });
    assert!(moved, "the unfrozen phase must update the encoder");
}

#[test]
fn finetune_accepts_a_joint_checkpoint_and_rejects_bad_masks() {
    let images = noise_images(2, 32, 30);
    let init = tiny_ld_checkpoint(&images, 30);
    let train = labeled_squares(2, 32, 31);
    let mut cfg = FinetuneConfig::new(32);
    cfg.backbone = small_backbone();
    cfg.frozen_epochs = 1;
    cfg.full_epochs = 0;
    cfg.batch_size = 2;
    let run = run_finetune::<f32>(&cfg, Some(&init), &train, &[], &TrainSink::default()).unwrap();
    for name in init.params.keys().filter(|k| Backbone::is_encoder_param(k)) {
        let a = &init.params[name];
        let b = &run.checkpoint.params[name];
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{name} must carry over and stay frozen");
        }
    }

    let mut bad = labeled_squares(2, 32, 33);
    bad[0].1[[0, 0]] = 0.5;
    assert!(run_finetune::<f32>(&cfg, None, &bad, &[], &TrainSink::default()).is_err());

    let wrong_size: Vec<(Array3<f32>, Array2<f32>)> = vec![(
        Array3::zeros((3, 48, 48)),
        Array2::zeros((48, 48)),
    )];
    assert!(run_finetune::<f32>(&cfg, None, &wrong_size, &[], &TrainSink::default()).is_err());
}
