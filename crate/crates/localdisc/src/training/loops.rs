//! Stage runners: patch-discrimination pretraining, joint local
//! discrimination, prior-guided adversarial clustering, and two-phase
//! downstream fine-tuning.
//!
//! Each batch is one eagerly evaluated graph: the two augmented views and the
//! mixup images go through the network together (shared batch statistics),
//! the stage objective is assembled from the shared loss components, and the
//! collected gradients drive one optimizer step. The adversarial stage adds a
//! discriminator step per generator step, on detached pseudo segmentations
//! and an equally sized sample of reference masks.

use std::collections::BTreeMap;
use std::time::Instant;

use indexmap::IndexMap;
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::metrics::{EpochRecord, MetricsWriter};
use super::optimizer::Adam;
use super::schedule::PlateauScheduler;
use super::{
    config_hash, mix_seed, FinetuneConfig, PriorSpec, RunArtifacts, StageConfig, TrainRng,
    TrainSink, INIT_SALT, PLATEAU_FACTOR, SPLIT_SALT, VAL_SALT,
};
use crate::autodiff::{Gradients, Graph, Scalar, Tensor};
use crate::core_math::{diff, ClusterProbMap, NORM_EPS};
use crate::data_pipeline::{augment_pair, make_mixup, AugmentConfig, ReferenceMaskSet};
use crate::error::{Error, Result};
use crate::evaluation::{binarize, dsc, match_clusters_to_structures};
use crate::losses::{
    flatten_patches, loss_adversarial, loss_area, loss_dice, loss_discriminator, loss_entropy,
    loss_ld, loss_mixup, loss_pd, mixup_target, stage_total, Stage, StageLosses,
};
use crate::networks::{
    Backbone, Discriminator, DiscriminatorConfig, ForwardCtx, Mode, ParamStore,
    SegmentationDecoder,
};

// ---------------------------------------------------------------------------
// Shared helpers

fn array3_to<F: Scalar>(a: &Array3<f32>) -> Array3<F> {
    a.mapv(|v| F::of_f64(v as f64))
}

/// Stack images into an (N,3,S,S) batch in the requested precision.
pub(crate) fn to_batch<F: Scalar>(images: &[&Array3<f32>]) -> ArrayD<F> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<F>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&array3_to(img));
    }
    out.into_dyn()
}

/// Pool an embedding map into unit patch vectors: (N,D,H,W) → (N·G·G, D).
fn patch_features<'g, F: Scalar>(emb: Tensor<'g, F>, grid: usize) -> Tensor<'g, F> {
    let pooled = emb.adaptive_avg_pool(grid);
    let unit = diff::l2_normalize(pooled, 1, F::of_f64(NORM_EPS));
    flatten_patches(unit)
}

/// Pick cluster channels out of an (N,M,H,W) map, in the given order,
/// as a differentiable (N,K,H,W) tensor.
fn select_channels<'g, F: Scalar>(r: Tensor<'g, F>, channels: &[usize]) -> Tensor<'g, F> {
    let s = r.shape();
    let (n, m, h, w) = (s[0], s[1], s[2], s[3]);
    let k = channels.len();
    let mut sel = Array2::<F>::zeros((m, k));
    for (j, &c) in channels.iter().enumerate() {
        sel[[c, j]] = F::one();
    }
    let selector = r.graph().constant(sel.into_dyn());
    r.permute(&[0, 2, 3, 1])
        .reshape(&[n * h * w, m])
        .matmul(selector)
        .reshape(&[n, h, w, k])
        .permute(&[0, 3, 1, 2])
}

/// Deterministic train/validation split over dataset indices.
fn split_validation(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if n < 2 || frac <= 0.0 {
        return ((0..n).collect(), Vec::new());
    }
    let count = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, SPLIT_SALT, n as u64)));
    let mut val = idx[..count].to_vec();
    let mut train = idx[count..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Split an index order into batches of `per_batch` sources, dropping the
/// remainder; a dataset smaller than one batch trains as a single batch.
fn plan_batches(order: &[usize], per_batch: usize) -> Vec<Vec<usize>> {
    if order.is_empty() {
        return Vec::new();
    }
    if order.len() < per_batch {
        return vec![order.to_vec()];
    }
    order
        .chunks_exact(per_batch)
        .map(|c| c.to_vec())
        .collect()
}

fn collect_grads<F: Scalar>(
    grads: &mut Gradients<F>,
    bound: &IndexMap<String, Tensor<'_, F>>,
) -> IndexMap<String, ArrayD<F>> {
    let mut out = IndexMap::new();
    for (name, t) in bound {
        if t.requires_grad() {
            if let Some(g) = grads.take(*t) {
                out.insert(name.clone(), g);
            }
        }
    }
    out
}

fn diverged(stage: Stage, epoch: usize, why: impl Into<String>) -> Error {
    Error::Diverged {
        stage: stage.name().to_string(),
        epoch,
        why: why.into(),
    }
}

/// The logged stage total: the weighted sum of logged component means,
/// accumulated in f64 so the record is exactly self-consistent.
fn weighted_total(stage: Stage, weights: &crate::losses::LossWeights, comps: &BTreeMap<String, f64>) -> f64 {
    let get = |k: &str| comps.get(k).copied().unwrap_or(0.0);
    let mut total = weights.w_pd * get("pd") + weights.w_mixup * get("mixup");
    if stage != Stage::Pretrain {
        total += weights.w_ld * get("ld")
            + weights.w_entropy * get("entropy")
            + weights.w_area * get("area");
    }
    if stage == Stage::Prior {
        total += weights.w_adv * get("adv");
    }
    total
}

// ---------------------------------------------------------------------------
// Batch assembly and the stage forward pass

struct StageBatch<F: Scalar> {
    /// (2N+K, 3, S, S): N first views, N second views, K mixup images.
    x: ArrayD<F>,
    n_groups: usize,
    lambdas: Vec<f64>,
    parents: Vec<(usize, usize)>,
}

fn assemble_batch<F: Scalar>(
    cfg: &StageConfig,
    images: &[Array3<f32>],
    chunk: &[usize],
    aug_key: u64,
    mix_rng: &mut ChaCha8Rng,
) -> Result<StageBatch<F>> {
    let groups = chunk
        .iter()
        .map(|&i| augment_pair(&images[i], i, mix_seed(cfg.seed, aug_key, i as u64), &cfg.augment))
        .collect::<Result<Vec<_>>>()?;
    let mixups = if cfg.mixups_per_batch > 0 && groups.len() >= 2 {
        make_mixup(&groups, cfg.mixups_per_batch, mix_rng)?
    } else {
        Vec::new()
    };
    let s = cfg.augment.out_size;
    let n = groups.len();
    let k = mixups.len();
    let mut x = Array4::<F>::zeros((2 * n + k, 3, s, s));
    for (i, gr) in groups.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&array3_to(&gr.view_a));
        x.index_axis_mut(Axis(0), n + i).assign(&array3_to(&gr.view_b));
    }
    for (j, mx) in mixups.iter().enumerate() {
        x.index_axis_mut(Axis(0), 2 * n + j).assign(&array3_to(&mx.image));
    }
    Ok(StageBatch {
        x: x.into_dyn(),
        n_groups: n,
        lambdas: mixups.iter().map(|m| m.lambda).collect(),
        parents: mixups.iter().map(|m| m.parent_ids).collect(),
    })
}

struct StageEval<'g, F: Scalar> {
    total: Tensor<'g, F>,
    parts: Vec<(&'static str, Tensor<'g, F>)>,
    /// Selected pseudo-segmentation channels of the first views, kept for the
    /// discriminator step.
    fake: Option<Tensor<'g, F>>,
}

fn stage_forward<'g, F: Scalar>(
    g: &'g Graph<F>,
    backbone: &Backbone,
    ctx: &ForwardCtx<'g, '_, F>,
    batch: &StageBatch<F>,
    cfg: &StageConfig,
    adversary: Option<(&Discriminator, &ForwardCtx<'g, '_, F>, &[usize])>,
) -> Result<StageEval<'g, F>> {
    let n = batch.n_groups;
    let k = batch.lambdas.len();
    let gg = cfg.patch_grid * cfg.patch_grid;
    let eps = F::of_f64(NORM_EPS);

    let x = g.constant(batch.x.clone());
    let out = backbone.forward(ctx, x)?;

    let emb_a = out.embedding.slice_axis(0, 0, n);
    let emb_b = out.embedding.slice_axis(0, n, 2 * n);
    let s = patch_features(emb_a, cfg.patch_grid);
    let s_hat = patch_features(emb_b, cfg.patch_grid);
    let pd = loss_pd(s, s_hat, cfg.temperature);

    let mix = if k > 0 {
        let emb_m = out.embedding.slice_axis(0, 2 * n, 2 * n + k);
        let s_tilde = patch_features(emb_m, cfg.patch_grid);
        let mut sa_parts = Vec::with_capacity(k);
        let mut sb_parts = Vec::with_capacity(k);
        let mut lam_rows = Vec::with_capacity(k * gg);
        for (j, &(pa, pb)) in batch.parents.iter().enumerate() {
            sa_parts.push(s.slice_axis(0, pa * gg, (pa + 1) * gg));
            sb_parts.push(s.slice_axis(0, pb * gg, (pb + 1) * gg));
            lam_rows.extend(std::iter::repeat(F::of_f64(batch.lambdas[j])).take(gg));
        }
        let s_a = g.concat(&sa_parts, 0);
        let s_b = g.concat(&sb_parts, 0);
        let z = mixup_target(s_a, s_b, &lam_rows, eps);
        loss_mixup(z, s_tilde, cfg.temperature)
    } else {
        // A too-small validation batch cannot interpolate; the term is zero.
        g.scalar(F::zero())
    };

    let mut parts = vec![("pd", pd), ("mixup", mix)];
    let mut losses = StageLosses {
        pd: Some(pd),
        mixup: Some(mix),
        ..Default::default()
    };

    if cfg.stage != Stage::Pretrain {
        let r_views = out.clustering.slice_axis(0, 0, 2 * n);
        let v_views = out.embedding.slice_axis(0, 0, 2 * n);
        let ld = loss_ld(r_views, v_views, eps)?;
        let ent = loss_entropy(r_views);
        let area = loss_area(r_views);
        losses.ld = Some(ld);
        losses.entropy = Some(ent);
        losses.area = Some(area);
        parts.push(("ld", ld));
        parts.push(("entropy", ent));
        parts.push(("area", area));
    }

    let mut fake = None;
    if let Some((disc, ctx_d, channels)) = adversary {
        let r_a = out.clustering.slice_axis(0, 0, n);
        let sel = select_channels(r_a, channels);
        let d_fake = disc.forward(ctx_d, sel)?;
        let adv = loss_adversarial(d_fake);
        losses.adv = Some(adv);
        parts.push(("adv", adv));
        fake = Some(sel);
    }

    let total = stage_total(&losses, &cfg.weights, cfg.stage)?;
    Ok(StageEval { total, parts, fake })
}

// ---------------------------------------------------------------------------
// Unsupervised stage driver

struct DiscState<F: Scalar> {
    disc: Discriminator,
    store: ParamStore<F>,
    adam: Adam<F>,
    channels: Vec<usize>,
}

struct StageState<'r, F: Scalar> {
    backbone: Backbone,
    store: ParamStore<F>,
    adam: Adam<F>,
    disc: Option<DiscState<F>>,
    refs: Option<&'r ReferenceMaskSet>,
    rng: TrainRng,
    sched: PlateauScheduler,
    start_epoch: usize,
}

fn sample_reference_batch<F: Scalar>(
    refs: &ReferenceMaskSet,
    n: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ArrayD<F>> {
    let k = refs.structure_names.len();
    let mut out = Array4::<F>::zeros((n, k, size, size));
    for i in 0..n {
        let j = rng.gen_range(0..refs.masks.len());
        let m = &refs.masks[j];
        if m.dim() != (k, size, size) {
            return Err(Error::invalid(
                "reference masks",
                format!(
                    "sample {j} has shape {:?}, expected ({k}, {size}, {size})",
                    m.dim()
                ),
            ));
        }
        out.index_axis_mut(Axis(0), i).assign(&array3_to(m));
    }
    Ok(out.into_dyn())
}

/// One training batch: generator step, then (adversarial stage) one
/// discriminator step on the detached pseudo segmentations.
fn train_batch<F: Scalar>(
    cfg: &StageConfig,
    images: &[Array3<f32>],
    chunk: &[usize],
    epoch: usize,
    lr: f64,
    st: &mut StageState<'_, F>,
) -> Result<BTreeMap<String, f64>> {
    let batch = assemble_batch::<F>(cfg, images, chunk, epoch as u64, st.rng.chacha())?;
    let mut comps = BTreeMap::new();

    let (grad_map, stat_updates, fake_value) = {
        let g = Graph::new();
        let ctx = st.store.bind(&g, Mode::Train);
        let eval = match &st.disc {
            Some(d) => {
                let ctx_d = d.store.bind_filtered(&g, Mode::Eval, |_| false);
                stage_forward(&g, &st.backbone, &ctx, &batch, cfg, Some((&d.disc, &ctx_d, &d.channels)))?
            }
            None => stage_forward(&g, &st.backbone, &ctx, &batch, cfg, None)?,
        };
        let total_v = eval.total.scalar_value().as_f64();
        if !total_v.is_finite() {
            return Err(diverged(cfg.stage, epoch, format!("training loss is {total_v}")));
        }
        for (name, t) in &eval.parts {
            comps.insert(name.to_string(), t.scalar_value().as_f64());
        }
        let mut grads = g.backward(eval.total);
        let grad_map = collect_grads(&mut grads, ctx.bound());
        let stat_updates = ctx.take_stat_updates();
        let fake_value = eval.fake.map(|t| t.value().as_ref().clone());
        (grad_map, stat_updates, fake_value)
    };

    st.adam
        .step(&mut st.store, &grad_map, lr)
        .map_err(|e| diverged(cfg.stage, epoch, e.to_string()))?;
    for (name, v) in stat_updates {
        st.store.set_buffer(&name, v)?;
    }

    if let (Some(d), Some(fake)) = (st.disc.as_mut(), fake_value) {
        let refs = st
            .refs
            .expect("adversarial stage always carries reference masks");
        let n = batch.n_groups;
        let real = sample_reference_batch::<F>(refs, n, cfg.augment.out_size, st.rng.chacha())?;
        let (dgrads, dloss) = {
            let g = Graph::new();
            let ctx = d.store.bind(&g, Mode::Train);
            let d_real = d.disc.forward(&ctx, g.constant(real))?;
            let d_fake = d.disc.forward(&ctx, g.constant(fake))?;
            let dl = loss_discriminator(d_real, d_fake);
            let v = dl.scalar_value().as_f64();
            if !v.is_finite() {
                return Err(diverged(cfg.stage, epoch, format!("discriminator loss is {v}")));
            }
            let mut grads = g.backward(dl);
            (collect_grads(&mut grads, ctx.bound()), v)
        };
        d.adam
            .step(&mut d.store, &dgrads, cfg.disc_lr)
            .map_err(|e| diverged(cfg.stage, epoch, e.to_string()))?;
        comps.insert("disc".to_string(), dloss);
    }

    Ok(comps)
}

/// Frozen-weights pass over the validation split; returns the mean stage
/// total. Validation augmentation and mixup are fixed across epochs so the
/// signal is comparable.
fn validation_loss<F: Scalar>(
    cfg: &StageConfig,
    images: &[Array3<f32>],
    val_idx: &[usize],
    st: &StageState<'_, F>,
) -> Result<f64> {
    let chunks = plan_batches(val_idx, cfg.groups_per_batch);
    let mut sum = 0.0;
    let mut batches = 0usize;
    for (bi, chunk) in chunks.iter().enumerate() {
        let mut mix_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, VAL_SALT, bi as u64));
        let batch = assemble_batch::<F>(cfg, images, chunk, VAL_SALT, &mut mix_rng)?;
        let g = Graph::new();
        let ctx = st.store.bind_filtered(&g, Mode::Eval, |_| false);
        let eval = match &st.disc {
            Some(d) => {
                let ctx_d = d.store.bind_filtered(&g, Mode::Eval, |_| false);
                stage_forward(&g, &st.backbone, &ctx, &batch, cfg, Some((&d.disc, &ctx_d, &d.channels)))?
            }
            None => stage_forward(&g, &st.backbone, &ctx, &batch, cfg, None)?,
        };
        sum += eval.total.scalar_value().as_f64();
        batches += 1;
    }
    Ok(sum / batches as f64)
}

fn capture_state<F: Scalar>(
    cfg: &StageConfig,
    st: &StageState<'_, F>,
    epoch: usize,
    hash: &str,
) -> Checkpoint<F> {
    let mut stores: Vec<&ParamStore<F>> = vec![&st.store];
    let mut adams: Vec<&Adam<F>> = vec![&st.adam];
    if let Some(d) = &st.disc {
        stores.push(&d.store);
        adams.push(&d.adam);
    }
    Checkpoint::capture(
        cfg.stage,
        epoch,
        hash,
        &stores,
        &adams,
        &st.rng,
        Some(st.sched.snapshot()),
    )
}

fn drive_stage<F: Scalar>(
    cfg: &StageConfig,
    images: &[Array3<f32>],
    mut st: StageState<'_, F>,
    sink: &TrainSink,
    hash: &str,
) -> Result<RunArtifacts<F>> {
    if images.is_empty() {
        return Err(Error::invalid("dataset", "no training images"));
    }
    let (train_idx, val_idx) = split_validation(images.len(), cfg.val_fraction, cfg.seed);
    let mut metrics = MetricsWriter::new(sink.metrics_path)?;

    for epoch in st.start_epoch..cfg.max_epochs {
        let t0 = Instant::now();
        let lr = st.sched.lr();
        let mut order = train_idx.clone();
        order.shuffle(st.rng.chacha());

        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut batches = 0usize;
        for chunk in plan_batches(&order, cfg.groups_per_batch) {
            match train_batch(cfg, images, &chunk, epoch, lr, &mut st) {
                Ok(comps) => {
                    for (k, v) in comps {
                        *sums.entry(k).or_insert(0.0) += v;
                    }
                    batches += 1;
                }
                Err(e) => {
                    if matches!(e, Error::Diverged { .. }) {
                        if let Some(p) = sink.diverged_path {
                            let _ = capture_state(cfg, &st, epoch, hash).save(p);
                        }
                    }
                    return Err(e);
                }
            }
        }
        let components: BTreeMap<String, f64> = sums
            .into_iter()
            .map(|(k, v)| (k, v / batches as f64))
            .collect();
        let total = weighted_total(cfg.stage, &cfg.weights, &components);

        let val_loss = if cfg.plateau_patience > 0 && !val_idx.is_empty() {
            Some(validation_loss(cfg, images, &val_idx, &st)?)
        } else {
            None
        };
        st.sched.observe(val_loss.unwrap_or(total));

        metrics.push(EpochRecord {
            stage: cfg.stage.name().to_string(),
            epoch,
            components,
            total,
            lr,
            lr_d: (cfg.stage == Stage::Prior).then_some(cfg.disc_lr),
            val_loss,
            wall_time_s: t0.elapsed().as_secs_f64(),
        })?;
    }

    let checkpoint = capture_state(cfg, &st, cfg.max_epochs, hash);
    Ok(RunArtifacts {
        checkpoint,
        records: metrics.into_records(),
    })
}

// ---------------------------------------------------------------------------
// Stage entry points

/// Stage 1: jointly pretrain the backbone and the embedding branch with the
/// patch and mixup discrimination objectives.
pub fn run_patch_pretrain<F: Scalar>(
    cfg: &StageConfig,
    images: &[Array3<f32>],
    sink: &TrainSink,
) -> Result<RunArtifacts<F>> {
    cfg.validate_for(Stage::Pretrain)?;
    let hash = config_hash(cfg)?;
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let mut store = ParamStore::new();
    backbone.register(
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 0)),
    );
    let st = StageState {
        backbone,
        store,
        adam: Adam::new(),
        disc: None,
        refs: None,
        rng: TrainRng::new(cfg.seed),
        sched: PlateauScheduler::new(cfg.lr, cfg.plateau_patience, PLATEAU_FACTOR),
        start_epoch: 0,
    };
    drive_stage(cfg, images, st, sink, &hash)
}

/// Stage 2: optimize the full local-discrimination objective over both
/// branches, starting from a pretraining checkpoint (or resuming an
/// interrupted run of this stage).
pub fn run_local_discrimination<F: Scalar>(
    cfg: &StageConfig,
    images: &[Array3<f32>],
    init: &Checkpoint<F>,
    sink: &TrainSink,
) -> Result<RunArtifacts<F>> {
    cfg.validate_for(Stage::Ld)?;
    let hash = config_hash(cfg)?;
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let mut store = ParamStore::new();
    backbone.register(
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 0)),
    );
    init.apply_all(&mut store)?;
    let st = match init.stage {
        Stage::Pretrain => StageState {
            backbone,
            store,
            adam: Adam::new(),
            disc: None,
            refs: None,
            rng: TrainRng::new(cfg.seed),
            sched: PlateauScheduler::new(cfg.lr, cfg.plateau_patience, PLATEAU_FACTOR),
            start_epoch: 0,
        },
        Stage::Ld => StageState {
            backbone,
            store,
            adam: init.restore_adam(|_| true),
            disc: None,
            refs: None,
            rng: TrainRng::restore(&init.rng),
            sched: init
                .sched
                .as_ref()
                .map(|s| PlateauScheduler::restore(s, cfg.plateau_patience, PLATEAU_FACTOR))
                .unwrap_or_else(|| PlateauScheduler::new(cfg.lr, cfg.plateau_patience, PLATEAU_FACTOR)),
            start_epoch: init.epoch,
        },
        other => {
            return Err(Error::Config(format!(
                "joint training initializes from a pretraining checkpoint, got stage '{other}'"
            )))
        }
    };
    drive_stage(cfg, images, st, sink, &hash)
}

/// Stage 3: alternate generator and discriminator updates so the assigned
/// cluster channels imitate the reference mask distribution.
pub fn run_prior_guided<F: Scalar>(
    cfg: &StageConfig,
    images: &[Array3<f32>],
    prior: &PriorSpec,
    refs: &ReferenceMaskSet,
    init: &Checkpoint<F>,
    sink: &TrainSink,
) -> Result<RunArtifacts<F>> {
    cfg.validate_for(Stage::Prior)?;
    let m = cfg.backbone.cluster_count;
    prior.validate(m)?;
    if refs.structure_names != prior.structure_names {
        return Err(Error::invalid(
            "reference masks",
            format!(
                "reference structures {:?} do not match the prior's {:?}; channel order must agree",
                refs.structure_names, prior.structure_names
            ),
        ));
    }
    if refs.masks.is_empty() {
        return Err(Error::invalid("reference masks", "no reference samples"));
    }

    let hash = config_hash(cfg)?;
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let mut store = ParamStore::new();
    backbone.register(
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 0)),
    );
    init.apply_all(&mut store)?;

    let disc_cfg = DiscriminatorConfig {
        input_channels: prior.structure_names.len(),
        ..DiscriminatorConfig::default()
    };
    let disc = Discriminator::new(disc_cfg)?;
    let mut disc_store = ParamStore::new();
    disc.register(
        &mut disc_store,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 1)),
    );

    // Warm start re-probes the current network, so it only applies to a
    // fresh run; a resumed run must carry its resolved assignment.
    if prior.warm_start && init.stage == Stage::Prior {
        return Err(Error::Config(
            "resuming adversarial training needs explicit cluster_channels; \
             warm start only applies to a fresh run"
                .into(),
        ));
    }
    let assignment = if prior.warm_start {
        warm_start_assignment(&backbone, &store, cfg, images, refs)?
    } else {
        prior.cluster_channels.clone()
    };
    let channels: Vec<usize> = prior
        .structure_names
        .iter()
        .map(|name| {
            assignment.get(name).copied().ok_or_else(|| {
                Error::Config(format!("no cluster channel assigned for structure '{name}'"))
            })
        })
        .collect::<Result<_>>()?;
    for &c in &channels {
        if c >= m {
            return Err(Error::Config(format!(
                "assigned channel {c} exceeds cluster count {m}"
            )));
        }
    }

    let (adam, adam_d, rng, sched, start_epoch) = match init.stage {
        Stage::Ld => (
            Adam::new(),
            Adam::new(),
            TrainRng::new(cfg.seed),
            PlateauScheduler::new(cfg.lr, cfg.plateau_patience, PLATEAU_FACTOR),
            0,
        ),
        Stage::Prior => {
            init.apply_all(&mut disc_store)?;
            (
                init.restore_adam(|n| !Discriminator::is_param(n)),
                init.restore_adam(Discriminator::is_param),
                TrainRng::restore(&init.rng),
                init.sched
                    .as_ref()
                    .map(|s| PlateauScheduler::restore(s, cfg.plateau_patience, PLATEAU_FACTOR))
                    .unwrap_or_else(|| {
                        PlateauScheduler::new(cfg.lr, cfg.plateau_patience, PLATEAU_FACTOR)
                    }),
                init.epoch,
            )
        }
        other => {
            return Err(Error::Config(format!(
                "adversarial training initializes from a joint-stage checkpoint, got '{other}'"
            )))
        }
    };

    let st = StageState {
        backbone,
        store,
        adam,
        disc: Some(DiscState {
            disc,
            store: disc_store,
            adam: adam_d,
            channels,
        }),
        refs: Some(refs),
        rng,
        sched,
        start_epoch,
    };
    drive_stage(cfg, images, st, sink, &hash)
}

/// Heuristic channel assignment: score every cluster channel's argmax mask
/// against each structure's mean reference mask on a small probe batch and
/// take the best injective match.
pub fn warm_start_assignment<F: Scalar>(
    backbone: &Backbone,
    store: &ParamStore<F>,
    cfg: &StageConfig,
    images: &[Array3<f32>],
    refs: &ReferenceMaskSet,
) -> Result<BTreeMap<String, usize>> {
    if images.is_empty() {
        return Err(Error::invalid("dataset", "no images to probe"));
    }
    let s = cfg.augment.out_size;
    let ident = AugmentConfig::identity(s);
    let probe_count = images.len().min(16);
    let probe: Vec<Array3<f32>> = (0..probe_count)
        .map(|i| Ok(augment_pair(&images[i], i, 0, &ident)?.view_a))
        .collect::<Result<_>>()?;
    let refs_views: Vec<&Array3<f32>> = probe.iter().collect();
    let x = to_batch::<F>(&refs_views);

    let g = Graph::new();
    let ctx = store.bind_filtered(&g, Mode::Eval, |_| false);
    let out = backbone.forward(&ctx, g.constant(x))?;
    let r_val: Array4<F> = out
        .clustering
        .value()
        .as_ref()
        .clone()
        .into_dimensionality()
        .expect("clustering map is 4-d");
    let rmap = ClusterProbMap::new(r_val)?;

    let structures: Vec<(String, Array3<f32>)> = refs
        .structure_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut mean = Array2::<f32>::zeros((s, s));
            for sample in &refs.masks {
                mean += &sample.index_axis(Axis(0), k);
            }
            mean /= refs.masks.len() as f32;
            let proto = mean.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let rep = Array3::from_shape_fn((probe_count, s, s), |(_, y, x)| proto[[y, x]]);
            (name.clone(), rep)
        })
        .collect();
    let matched = match_clusters_to_structures(&rmap, &structures)?;
    Ok(matched.assignment)
}

// ---------------------------------------------------------------------------
// Downstream fine-tuning

fn check_labeled_set(set: &[(Array3<f32>, Array2<f32>)], what: &str) -> Result<Option<usize>> {
    let mut size = None;
    for (i, (img, mask)) in set.iter().enumerate() {
        let (c, h, w) = img.dim();
        if c != 3 || h == 0 || h % 32 != 0 || h != w {
            return Err(Error::invalid(
                what,
                format!("image {i} must be square (3,S,S) with S a multiple of 32, got {:?}", img.dim()),
            ));
        }
        if mask.dim() != (h, w) {
            return Err(Error::invalid(
                what,
                format!("mask {i} shape {:?} does not match image ({h},{w})", mask.dim()),
            ));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(what, format!("mask {i} is not binary")));
        }
        match size {
            None => size = Some(h),
            Some(s) if s != h => {
                return Err(Error::invalid(what, "all images must share one size"))
            }
            _ => {}
        }
    }
    Ok(size)
}

fn finetune_batch_tensors<F: Scalar>(
    set: &[(Array3<f32>, Array2<f32>)],
    idxs: &[usize],
) -> (ArrayD<F>, ArrayD<F>) {
    let images: Vec<&Array3<f32>> = idxs.iter().map(|&i| &set[i].0).collect();
    let x = to_batch::<F>(&images);
    let (_, h, w) = set[idxs[0]].0.dim();
    let mut y = Array4::<F>::zeros((idxs.len(), 1, h, w));
    for (bi, &i) in idxs.iter().enumerate() {
        y.index_axis_mut(Axis(0), bi)
            .index_axis_move(Axis(0), 0)
            .assign(&set[i].1.mapv(|v| F::of_f64(v as f64)));
    }
    (x, y.into_dyn())
}

fn finetune_eval_dice<F: Scalar>(
    backbone: &Backbone,
    store_b: &ParamStore<F>,
    seg: &SegmentationDecoder,
    store_s: &ParamStore<F>,
    set: &[(Array3<f32>, Array2<f32>)],
    batch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let idxs: Vec<usize> = (0..set.len()).collect();
    for chunk in idxs.chunks(batch) {
        let (x, _) = finetune_batch_tensors::<F>(set, chunk);
        let g = Graph::new();
        let ctx_enc = store_b.bind_filtered(&g, Mode::Eval, |_| false);
        let ctx_dec = store_s.bind_filtered(&g, Mode::Eval, |_| false);
        let (_, bottom) = backbone.encode(&ctx_enc, g.constant(x))?;
        let pred = seg.forward(&ctx_dec, bottom)?;
        let pv = pred.value();
        for (bi, &i) in chunk.iter().enumerate() {
            let (h, w) = set[i].1.dim();
            let p2 = Array2::from_shape_fn((h, w), |(y, x)| pv[[bi, 0, y, x]].as_f64() as f32);
            sum += dsc(&binarize(&p2, 0.5), &set[i].1)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Downstream transfer: train a plain upsampling decoder on encoder features,
/// first with the encoder frozen, then end-to-end at a lower rate, optimizing
/// the Dice loss. `eval_set` (optional) adds a per-epoch held-out Dice score
/// to the metrics.
pub fn run_finetune<F: Scalar>(
    cfg: &FinetuneConfig,
    encoder_init: Option<&Checkpoint<F>>,
    train: &[(Array3<f32>, Array2<f32>)],
    eval_set: &[(Array3<f32>, Array2<f32>)],
    sink: &TrainSink,
) -> Result<RunArtifacts<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("dataset", "no labeled training pairs"));
    }
    check_labeled_set(train, "labeled training set")?;
    check_labeled_set(eval_set, "evaluation set")?;

    let hash = config_hash(cfg)?;
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let mut store_b = ParamStore::new();
    backbone.register(
        &mut store_b,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 0)),
    );
    if let Some(ck) = encoder_init {
        for name in store_b
            .param_names()
            .map(str::to_string)
            .collect::<Vec<_>>()
        {
            if Backbone::is_encoder_param(&name) && !ck.params.contains_key(&name) {
                return Err(Error::Config(format!(
                    "encoder initialization is missing parameter '{name}'"
                )));
            }
        }
        ck.apply_to(&mut store_b)?;
    }
    let seg = SegmentationDecoder::new(cfg.decoder.clone(), backbone.bottom_channels())?;
    let mut store_s = ParamStore::new();
    seg.register(
        &mut store_s,
        &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, INIT_SALT, 1)),
    );

    let mut adam_enc = Adam::new();
    let mut adam_dec = Adam::new();
    let mut rng = TrainRng::new(cfg.seed);
    let mut metrics = MetricsWriter::new(sink.metrics_path)?;
    let total_epochs = cfg.frozen_epochs + cfg.full_epochs;

    for epoch in 0..total_epochs {
        let t0 = Instant::now();
        let frozen = epoch < cfg.frozen_epochs;
        let lr = if frozen { cfg.frozen_lr } else { cfg.full_lr };

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng.chacha());

        let mut dice_sum = 0.0;
        let mut batches = 0usize;
        for chunk in plan_batches(&order, cfg.batch_size) {
            let (x, y) = finetune_batch_tensors::<F>(train, &chunk);
            type StepOut<F> = (
                f64,
                IndexMap<String, ArrayD<F>>,
                IndexMap<String, ArrayD<F>>,
                Vec<(bool, String, ArrayD<F>)>,
            );
            let step = (|| -> Result<StepOut<F>> {
                let g = Graph::new();
                let ctx_enc = store_b.bind_filtered(
                    &g,
                    if frozen { Mode::Eval } else { Mode::Train },
                    |name| !frozen && Backbone::is_encoder_param(name),
                );
                let ctx_dec = store_s.bind(&g, Mode::Train);
                let (_, bottom) = backbone.encode(&ctx_enc, g.constant(x))?;
                let pred = seg.forward(&ctx_dec, bottom)?;
                let dl = loss_dice(pred, g.constant(y));
                let v = dl.scalar_value().as_f64();
                if !v.is_finite() {
                    return Err(diverged(Stage::Finetune, epoch, format!("dice loss is {v}")));
                }
                let mut grads = g.backward(dl);
                let ge = collect_grads(&mut grads, ctx_enc.bound());
                let gd = collect_grads(&mut grads, ctx_dec.bound());
                let stats: Vec<(bool, String, ArrayD<F>)> = ctx_enc
                    .take_stat_updates()
                    .into_iter()
                    .map(|(n, v)| (true, n, v))
                    .chain(
                        ctx_dec
                            .take_stat_updates()
                            .into_iter()
                            .map(|(n, v)| (false, n, v)),
                    )
                    .collect();
                Ok((v, ge, gd, stats))
            })();
            let (v, ge, gd, stats) = match step {
                Ok(ok) => ok,
                Err(e) => {
                    if matches!(e, Error::Diverged { .. }) {
                        if let Some(p) = sink.diverged_path {
                            let ck = Checkpoint::capture(
                                Stage::Finetune,
                                epoch,
                                &hash,
                                &[&store_b, &store_s],
                                &[&adam_enc, &adam_dec],
                                &rng,
                                None,
                            );
                            let _ = ck.save(p);
                        }
                    }
                    return Err(e);
                }
            };
            adam_enc
                .step(&mut store_b, &ge, lr)
                .map_err(|e| diverged(Stage::Finetune, epoch, e.to_string()))?;
            adam_dec
                .step(&mut store_s, &gd, lr)
                .map_err(|e| diverged(Stage::Finetune, epoch, e.to_string()))?;
            for (is_enc, name, v) in stats {
                if is_enc {
                    store_b.set_buffer(&name, v)?;
                } else {
                    store_s.set_buffer(&name, v)?;
                }
            }
            dice_sum += v;
            batches += 1;
        }

        let mut components = BTreeMap::new();
        let dice_mean = dice_sum / batches as f64;
        components.insert("dice".to_string(), dice_mean);
        if !eval_set.is_empty() {
            let ed = finetune_eval_dice(&backbone, &store_b, &seg, &store_s, eval_set, cfg.batch_size)?;
            components.insert("eval_dice".to_string(), ed);
        }
        metrics.push(EpochRecord {
            stage: Stage::Finetune.name().to_string(),
            epoch,
            components,
            total: dice_mean,
            lr,
            lr_d: None,
            val_loss: None,
            wall_time_s: t0.elapsed().as_secs_f64(),
        })?;
    }

    let checkpoint = Checkpoint::capture(
        Stage::Finetune,
        total_epochs,
        &hash,
        &[&store_b, &store_s],
        &[&adam_enc, &adam_dec],
        &rng,
        None,
    );
    Ok(RunArtifacts {
        checkpoint,
        records: metrics.into_records(),
    })
}
