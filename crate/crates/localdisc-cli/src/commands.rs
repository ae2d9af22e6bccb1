//! Subcommand implementations: dataset synthesis, the three unsupervised
//! training stages, downstream fine-tuning, and checkpoint evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use localdisc::data_pipeline::{
    generate_ellipse_reference, generate_synthetic_dataset, load_dataset, load_image,
    load_reference_masks, save_image, EllipsePriors, SyntheticDataset, SyntheticSceneSpec,
};
use localdisc::evaluation::{
    argmax_cluster_masks, binarize, dsc, fovea_center_distance, mask_centroid,
    match_clusters_to_structures, overlay_mask, SegmentationReport, StructureScore,
};
use localdisc::losses::Stage;
use localdisc::networks::{Backbone, ParamStore, SegmentationDecoder};
use localdisc::training::{
    predict_cluster_probs, predict_segmentation, run_finetune, run_local_discrimination,
    run_patch_pretrain, run_prior_guided, Checkpoint, EpochRecord, TrainSink,
};
use localdisc::{Error, Result};

use crate::config;
use crate::manifest::{prepare_out, RunManifest};
use crate::{EvalArgs, FinetuneArgs, LdArgs, PretrainArgs, PriorArgs, SynthDataArgs};

/// Inference batch size used by evaluation.
const EVAL_BATCH: usize = 16;

/// Distinct overlay colors, cycled per structure.
const PALETTE: [[f32; 3]; 5] = [
    [0.95, 0.35, 0.20],
    [0.25, 0.80, 0.35],
    [0.25, 0.50, 1.00],
    [0.95, 0.80, 0.20],
    [0.80, 0.30, 0.90],
];

// ---------------------------------------------------------------------------
// Shared plumbing

/// Load every PNG under `dir/images` (dataset layout) or directly under
/// `dir`, in sorted name order.
fn load_images(dir: &Path) -> Result<Vec<Array3<f32>>> {
    let images_dir = if dir.join("images").is_dir() {
        dir.join("images")
    } else {
        dir.to_path_buf()
    };
    let entries = fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset {
            path: images_dir,
            why: "no .png images found".into(),
        });
    }
    names
        .iter()
        .map(|name| load_image(&images_dir.join(name)))
        .collect()
}

fn train_sink_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("metrics.jsonl"), out.join("diverged.ckpt"))
}

fn print_run_summary(stage: &str, records: &[EpochRecord], out: &Path) {
    if let Some(last) = records.last() {
        let val = last
            .val_loss
            .map(|v| format!(", val {v:.4}"))
            .unwrap_or_default();
        println!(
            "{stage}: {} epochs, final total {:.4}{val}",
            records.len(),
            last.total
        );
    }
    println!("checkpoint: {}", out.join("checkpoint.ckpt").display());
    println!("metrics:    {}", out.join("metrics.jsonl").display());
}

/// Stack the ground-truth masks of each requested structure as (N,H,W),
/// aligned with the dataset order.
fn structure_stacks(
    ds: &SyntheticDataset,
    names: &[String],
) -> Result<Vec<(String, Array3<f32>)>> {
    let (_, h, w) = ds.images[0].dim();
    names
        .iter()
        .map(|name| {
            let k = ds
                .structure_names
                .iter()
                .position(|s| s == name)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "structure '{name}' is not in the dataset (available: {})",
                        ds.structure_names.join(", ")
                    ))
                })?;
            let mut gt = Array3::<f32>::zeros((ds.len(), h, w));
            for (i, m) in ds.masks.iter().enumerate() {
                gt.index_axis_mut(Axis(0), i).assign(&m.index_axis(Axis(0), k));
            }
            Ok((name.clone(), gt))
        })
        .collect()
}

/// Every image and mask must share one square geometry for batching.
fn check_uniform(ds: &SyntheticDataset) -> Result<()> {
    let dim = ds.images[0].dim();
    for (i, img) in ds.images.iter().enumerate() {
        if img.dim() != dim {
            return Err(Error::invalid(
                "dataset",
                format!("image {i} has shape {:?}, image 0 has {:?}", img.dim(), dim),
            ));
        }
    }
    for (i, m) in ds.masks.iter().enumerate() {
        if m.dim().1 != dim.1 || m.dim().2 != dim.2 {
            return Err(Error::invalid(
                "dataset",
                format!("mask {i} is {:?}, images are {:?}", m.dim(), dim),
            ));
        }
    }
    Ok(())
}

/// Labeled (image, structure mask) pairs for fine-tuning.
fn load_labeled(dir: &Path, structure: &str) -> Result<Vec<(Array3<f32>, Array2<f32>)>> {
    let ds = load_dataset(dir)?;
    check_uniform(&ds)?;
    let k = ds
        .structure_names
        .iter()
        .position(|s| s == structure)
        .ok_or_else(|| {
            Error::Config(format!(
                "structure '{structure}' is not in the dataset at '{}' (available: {})",
                dir.display(),
                ds.structure_names.join(", ")
            ))
        })?;
    Ok(ds
        .images
        .into_iter()
        .zip(ds.masks.iter())
        .map(|(img, m)| (img, m.index_axis(Axis(0), k).to_owned()))
        .collect())
}

/// Rebuild a backbone and load a checkpoint's weights into it.
fn backbone_from(
    cfg: localdisc::networks::BackboneConfig,
    ck: &Checkpoint<f32>,
) -> Result<(Backbone, ParamStore<f32>)> {
    let backbone = Backbone::new(cfg)?;
    let mut store = ParamStore::new();
    backbone.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
    ck.apply_all(&mut store)?;
    Ok((backbone, store))
}

// ---------------------------------------------------------------------------
// synth-data

pub fn synth_data(args: &SynthDataArgs) -> Result<()> {
    let mut spec = config::load_scene_spec(args.spec.as_deref())?;
    if let Some(seed) = args.seed {
        spec.rng_seed = seed;
    }
    if args.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    prepare_out(&args.out, args.force)?;
    RunManifest::new("synth-data", args.spec.as_deref(), Some(spec.rng_seed), &args.out)?
        .write(&args.out)?;

    let ds = generate_synthetic_dataset(&spec, args.count)?;
    ds.write(&args.out)?;
    println!(
        "wrote {} images and {}-structure masks to {}",
        ds.len(),
        ds.structure_names.len(),
        args.out.display()
    );

    if args.refs > 0 {
        write_simulated_refs(&spec, args.refs, &args.refs_structures, &args.out)?;
        println!(
            "wrote {} simulated reference masks per structure ({}) to {}",
            args.refs,
            args.refs_structures.join(", "),
            args.out.join("refs").display()
        );
    }
    Ok(())
}

/// Simulated reference masks: ellipses drawn from the same placement and
/// size priors the scenes use, but sampled independently of any image.
fn write_simulated_refs(
    spec: &SyntheticSceneSpec,
    count: usize,
    structures: &[String],
    out: &Path,
) -> Result<()> {
    let s = spec.image_size as f64;
    let px = spec.image_size as f64 / 64.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ 0x5EED_u64);
    for structure in structures {
        let (axes, center_of): (
            (f64, f64),
            Box<dyn Fn(&mut ChaCha8Rng) -> (f64, f64)>,
        ) = match structure.as_str() {
            "disk" => (
                spec.disk_axes,
                Box::new(move |rng: &mut ChaCha8Rng| {
                    let side = if rng.gen_bool(0.5) { 0.26 } else { 0.74 };
                    (
                        s * rng.gen_range(0.38..0.62),
                        s * (side + rng.gen_range(-0.06..0.06)),
                    )
                }),
            ),
            "blob" => (
                spec.blob_axes,
                Box::new(move |rng: &mut ChaCha8Rng| {
                    (s * rng.gen_range(0.25..0.75), s * rng.gen_range(0.25..0.75))
                }),
            ),
            other => {
                return Err(Error::Config(format!(
                    "no simulated reference shape is defined for structure '{other}'; \
                     supported: disk, blob"
                )))
            }
        };
        let dir = out.join("refs").join(structure);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let priors = EllipsePriors {
            axes: (axes.0 * px, axes.1 * px),
            axis_jitter: spec.axis_jitter,
            max_rotation: 0.6,
        };
        for i in 0..count {
            let mask = generate_ellipse_reference(
                center_of(&mut rng),
                &priors,
                spec.image_size,
                &mut rng,
            )?;
            let as3 = mask.insert_axis(Axis(0));
            save_image(&dir.join(format!("ref_{i:05}.png")), &as3)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training stages

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = config::load_stage_config(&args.common.config, Stage::Pretrain)?;
    let images = load_images(&args.common.data)?;
    let out = &args.common.out;
    prepare_out(out, args.common.force)?;
    RunManifest::new("pretrain", Some(&args.common.config), Some(cfg.seed), out)?.write(out)?;

    let (metrics, diverged) = train_sink_paths(out);
    let sink = TrainSink {
        metrics_path: Some(&metrics),
        diverged_path: Some(&diverged),
    };
    let art = run_patch_pretrain::<f32>(&cfg, &images, &sink)?;
    art.checkpoint.save(&out.join("checkpoint.ckpt"))?;
    print_run_summary("pretrain", &art.records, out);
    Ok(())
}

pub fn train_ld(args: &LdArgs) -> Result<()> {
    let cfg = config::load_stage_config(&args.common.config, Stage::Ld)?;
    let images = load_images(&args.common.data)?;
    let init = Checkpoint::<f32>::load(&args.init)?;
    let out = &args.common.out;
    prepare_out(out, args.common.force)?;
    RunManifest::new("train-ld", Some(&args.common.config), Some(cfg.seed), out)?.write(out)?;

    let (metrics, diverged) = train_sink_paths(out);
    let sink = TrainSink {
        metrics_path: Some(&metrics),
        diverged_path: Some(&diverged),
    };
    let art = run_local_discrimination::<f32>(&cfg, &images, &init, &sink)?;
    art.checkpoint.save(&out.join("checkpoint.ckpt"))?;
    print_run_summary("train-ld", &art.records, out);
    Ok(())
}

pub fn train_prior(args: &PriorArgs) -> Result<()> {
    let cfg = config::load_stage_config(&args.common.config, Stage::Prior)?;
    let prior = config::load_prior_spec(&args.common.config, cfg.backbone.cluster_count)?;
    let refs = load_reference_masks(
        &args.refs,
        &prior.structure_names,
        cfg.augment.out_size,
        prior.source_kind,
    )?;
    for warning in &refs.warnings {
        eprintln!("warning: {warning}");
    }
    let images = load_images(&args.common.data)?;
    let init = Checkpoint::<f32>::load(&args.init)?;
    let out = &args.common.out;
    prepare_out(out, args.common.force)?;
    RunManifest::new("train-prior", Some(&args.common.config), Some(cfg.seed), out)?.write(out)?;

    let (metrics, diverged) = train_sink_paths(out);
    let sink = TrainSink {
        metrics_path: Some(&metrics),
        diverged_path: Some(&diverged),
    };
    let art = run_prior_guided::<f32>(&cfg, &images, &prior, &refs, &init, &sink)?;
    art.checkpoint.save(&out.join("checkpoint.ckpt"))?;
    print_run_summary("train-prior", &art.records, out);
    Ok(())
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    let ft = config::load_finetune_config(&args.common.config)?;
    if args.init.is_none() && !args.random_init {
        return Err(Error::Config(
            "fine-tuning initializes the encoder from an earlier checkpoint; pass \
             --init <checkpoint> from `train-ld` or `train-prior`, or --random-init \
             for a from-scratch baseline"
                .into(),
        ));
    }
    let init = match &args.init {
        Some(p) => Some(Checkpoint::<f32>::load(p)?),
        None => None,
    };
    let train = load_labeled(&args.common.data, &ft.structure)?;
    let eval_set = match &args.eval_data {
        Some(dir) => load_labeled(dir, &ft.structure)?,
        None => Vec::new(),
    };
    let out = &args.common.out;
    prepare_out(out, args.common.force)?;
    RunManifest::new("finetune", Some(&args.common.config), Some(ft.train.seed), out)?
        .write(out)?;

    let (metrics, diverged) = train_sink_paths(out);
    let sink = TrainSink {
        metrics_path: Some(&metrics),
        diverged_path: Some(&diverged),
    };
    let art = run_finetune::<f32>(&ft.train, init.as_ref(), &train, &eval_set, &sink)?;
    art.checkpoint.save(&out.join("checkpoint.ckpt"))?;
    print_run_summary("finetune", &art.records, out);
    if let Some(last) = art.records.last() {
        if let Some(ed) = last.components.get("eval_dice") {
            println!("held-out dice: {ed:.4}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (backbone_cfg, decoder_cfg) = config::load_network_configs(&args.config)?;
    let ds = load_dataset(&args.data)?;
    check_uniform(&ds)?;
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;

    let structures: Vec<String> = match &args.structures {
        Some(list) => list.clone(),
        None => ds
            .structure_names
            .iter()
            .filter(|s| s.as_str() != "background")
            .cloned()
            .collect(),
    };
    if structures.is_empty() {
        return Err(Error::Config("no structures to score".into()));
    }
    let stacks = structure_stacks(&ds, &structures)?;

    prepare_out(&args.out, args.force)?;
    RunManifest::new("eval", Some(&args.config), None, &args.out)?.write(&args.out)?;

    let (report, overlays) = match ck.stage {
        Stage::Ld | Stage::Prior => eval_cluster(&ds, &stacks, backbone_cfg, &ck)?,
        Stage::Finetune => eval_finetuned(&ds, &stacks, backbone_cfg, decoder_cfg, &ck)?,
        Stage::Pretrain => {
            return Err(Error::Config(
                "the pretraining stage has no segmentation output to score; evaluate a \
                 checkpoint from train-ld, train-prior, or finetune"
                    .into(),
            ))
        }
    };

    let json_path = args.out.join("report.json");
    fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    let table = report.to_table();
    let table_path = args.out.join("report.txt");
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;

    let overlay_dir = args.out.join("overlays");
    fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    for (i, overlay) in overlays.iter().enumerate() {
        save_image(&overlay_dir.join(format!("overlay_{i:05}.png")), overlay)?;
    }

    print!("{table}");
    println!("report:   {}", json_path.display());
    println!("overlays: {}", overlay_dir.display());
    Ok(())
}

/// Mean centroid distance between predictions and ground truth, plus how
/// many nonempty targets had an empty prediction.
fn centroid_stats(
    preds: &[Array2<f32>],
    gt: &Array3<f32>,
) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut missing = 0usize;
    for (i, pred) in preds.iter().enumerate() {
        let gt_i = gt.index_axis(Axis(0), i).to_owned();
        let Some(center) = mask_centroid(&gt_i) else {
            continue;
        };
        match fovea_center_distance(pred, center) {
            Some(d) => {
                sum += d;
                count += 1;
            }
            None => missing += 1,
        }
    }
    ((count > 0).then(|| sum / count as f64), missing)
}

fn eval_cluster(
    ds: &SyntheticDataset,
    stacks: &[(String, Array3<f32>)],
    backbone_cfg: localdisc::networks::BackboneConfig,
    ck: &Checkpoint<f32>,
) -> Result<(SegmentationReport, Vec<Array3<f32>>)> {
    let (backbone, store) = backbone_from(backbone_cfg, ck)?;
    let probs = predict_cluster_probs(&backbone, &store, &ds.images, EVAL_BATCH)?;
    let matched = match_clusters_to_structures(&probs, stacks)?;

    let (_, _, h, w) = probs.dim();
    let channel_masks = argmax_cluster_masks(&probs);
    let mut scores = Vec::with_capacity(stacks.len());
    let mut per_structure_preds: Vec<Vec<Array2<f32>>> = Vec::with_capacity(stacks.len());
    for (name, gt) in stacks {
        let ch = matched.assignment[name];
        let preds: Vec<Array2<f32>> = (0..ds.len())
            .map(|i| {
                channel_masks
                    .index_axis(Axis(0), ch)
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape((h, w))
                    .expect("argmax mask row reshapes to (H,W)")
            })
            .collect();
        let (center_distance, missing) = centroid_stats(&preds, gt);
        scores.push(StructureScore {
            structure: name.clone(),
            cluster: Some(ch),
            dsc: matched.per_structure_dsc[name],
            center_distance,
            missing_predictions: missing,
        });
        per_structure_preds.push(preds);
    }

    let overlays = make_overlays(&ds.images, &per_structure_preds)?;
    let report = SegmentationReport::new(ck.stage.name(), 0.5, ds.len(), scores)?;
    Ok((report, overlays))
}

fn eval_finetuned(
    ds: &SyntheticDataset,
    stacks: &[(String, Array3<f32>)],
    backbone_cfg: localdisc::networks::BackboneConfig,
    decoder_cfg: localdisc::networks::SegmentationDecoderConfig,
    ck: &Checkpoint<f32>,
) -> Result<(SegmentationReport, Vec<Array3<f32>>)> {
    if stacks.len() != 1 {
        return Err(Error::Config(format!(
            "a fine-tuned checkpoint predicts one structure; pass --structures <name> \
             (got {})",
            stacks.len()
        )));
    }
    let (name, gt) = &stacks[0];
    let backbone = Backbone::new(backbone_cfg)?;
    let mut store_b = ParamStore::new();
    backbone.register(&mut store_b, &mut ChaCha8Rng::seed_from_u64(0));
    ck.apply_all(&mut store_b)?;
    let decoder = SegmentationDecoder::new(decoder_cfg, backbone.bottom_channels())?;
    let mut store_s = ParamStore::new();
    decoder.register(&mut store_s, &mut ChaCha8Rng::seed_from_u64(1));
    ck.apply_all(&mut store_s)?;

    let prob = predict_segmentation(&backbone, &store_b, &decoder, &store_s, &ds.images, EVAL_BATCH)?;
    let preds: Vec<Array2<f32>> = (0..ds.len())
        .map(|i| binarize(&prob.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned(), 0.5))
        .collect();

    let mut dice_sum = 0.0;
    for (i, pred) in preds.iter().enumerate() {
        dice_sum += dsc(pred, &gt.index_axis(Axis(0), i).to_owned())?;
    }
    let (center_distance, missing) = centroid_stats(&preds, gt);
    let scores = vec![StructureScore {
        structure: name.clone(),
        cluster: None,
        dsc: dice_sum / ds.len() as f64,
        center_distance,
        missing_predictions: missing,
    }];
    let overlays = make_overlays(&ds.images, &[preds])?;
    let report = SegmentationReport::new(ck.stage.name(), 0.5, ds.len(), scores)?;
    Ok((report, overlays))
}

/// One overlay per image, blending every structure's prediction in its
/// palette color.
fn make_overlays(
    images: &[Array3<f32>],
    per_structure_preds: &[Vec<Array2<f32>>],
) -> Result<Vec<Array3<f32>>> {
    let mut overlays = Vec::with_capacity(images.len());
    for (i, image) in images.iter().enumerate() {
        let mut canvas = image.clone();
        for (k, preds) in per_structure_preds.iter().enumerate() {
            canvas = overlay_mask(&canvas, &preds[i], PALETTE[k % PALETTE.len()], 0.45)?;
        }
        overlays.push(canvas);
    }
    Ok(overlays)
}
