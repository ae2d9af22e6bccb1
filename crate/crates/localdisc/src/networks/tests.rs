use ndarray::{Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::core_math::{ClusterProbMap, EmbeddingMap};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_images(seed: u64, n: usize, c: usize, h: usize, w: usize) -> ArrayD<f32> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(&[n, c, h, w]), |_| r.gen_range(0.0..1.0))
}

fn default_backbone() -> (Backbone, ParamStore<f32>) {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let mut ps = ParamStore::new();
    bb.register(&mut ps, &mut rng(7));
    (bb, ps)
}

#[test]
fn backbone_outputs_are_normalized_maps() {
    let (bb, ps) = default_backbone();
    let g = Graph::<f32>::new();
    let ctx = ps.bind(&g, Mode::Train);
    let x = g.constant(random_images(1, 2, 3, 64, 64));
    let out = bb.forward(&ctx, x).unwrap();

    assert_eq!(out.embedding.shape(), &[2, 32, 64, 64]);
    assert_eq!(out.clustering.shape(), &[2, 8, 64, 64]);
    // The newtype constructors re-check unit norms and distribution rows.
    let e4 = out.embedding.value().as_ref().clone().into_dimensionality().unwrap();
    EmbeddingMap::<f32>::new(e4).unwrap();
    let c4: Array4<f32> =
        out.clustering.value().as_ref().clone().into_dimensionality().unwrap();
    ClusterProbMap::<f32>::new(c4.clone()).unwrap();
    // Softplus keeps assignments strictly positive.
    assert!(c4.iter().all(|&p| p > 0.0));
}

#[test]
fn backbone_widths_follow_quarter_vgg() {
    let (_, ps) = default_backbone();
    assert_eq!(ps.param("encoder.b1.c1.weight").shape(), &[16, 3, 3, 3]);
    assert_eq!(ps.param("encoder.b2.c2.weight").shape(), &[32, 32, 3, 3]);
    assert_eq!(ps.param("encoder.b3.c3.weight").shape(), &[64, 64, 3, 3]);
    assert_eq!(ps.param("encoder.b5.c3.weight").shape(), &[128, 128, 3, 3]);
    // First decoder stage consumes bottom + deepest skip.
    assert_eq!(ps.param("decoder.d1.c1.weight").shape(), &[128, 256, 3, 3]);
    assert_eq!(ps.param("decoder.d4.c2.weight").shape(), &[32, 32, 3, 3]);
    // Heads read half-resolution width plus the block-1 skip.
    assert_eq!(ps.param("head.emb.c1.weight").shape(), &[32, 48, 3, 3]);
    assert_eq!(ps.param("head.emb.c2.weight").shape(), &[32, 32, 3, 3]);
    assert_eq!(ps.param("head.clu.c2.weight").shape(), &[8, 8, 3, 3]);
}

#[test]
fn backbone_full_scale_recovers_vgg16_widths() {
    let cfg = BackboneConfig {
        width_scale: 1.0,
        ..Default::default()
    };
    let bb = Backbone::new(cfg).unwrap();
    let mut ps = ParamStore::<f32>::new();
    bb.register(&mut ps, &mut rng(0));
    assert_eq!(ps.param("encoder.b1.c1.weight").shape(), &[64, 3, 3, 3]);
    assert_eq!(ps.param("encoder.b4.c1.weight").shape(), &[512, 256, 3, 3]);
    assert_eq!(bb.bottom_channels(), 512);
}

#[test]
fn backbone_rejects_bad_inputs() {
    let (bb, ps) = default_backbone();
    let g = Graph::<f32>::new();
    let ctx = ps.bind(&g, Mode::Eval);
    let odd = g.constant(random_images(2, 1, 3, 48, 64));
    assert!(bb.forward(&ctx, odd).is_err(), "48 is not a multiple of 32");
    let wrong_c = g.constant(random_images(3, 1, 4, 64, 64));
    assert!(bb.forward(&ctx, wrong_c).is_err());
}

#[test]
fn backbone_config_validation() {
    for bad in [
        BackboneConfig {
            decoder_blocks: 3,
            ..Default::default()
        },
        BackboneConfig {
            cluster_count: 1,
            ..Default::default()
        },
        BackboneConfig {
            width_scale: 0.0,
            ..Default::default()
        },
        BackboneConfig {
            embedding_dim: 0,
            ..Default::default()
        },
    ] {
        assert!(Backbone::new(bad).is_err());
    }
}

#[test]
fn registration_is_seed_deterministic() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let mut a = ParamStore::<f32>::new();
    let mut b = ParamStore::<f32>::new();
    let mut c = ParamStore::<f32>::new();
    bb.register(&mut a, &mut rng(11));
    bb.register(&mut b, &mut rng(11));
    bb.register(&mut c, &mut rng(12));
    let names: Vec<_> = a.param_names().map(str::to_owned).collect();
    assert_eq!(names, b.param_names().map(str::to_owned).collect::<Vec<_>>());
    for n in &names {
        assert_eq!(a.param(n), b.param(n), "seed 11 must reproduce '{n}'");
    }
    assert!(
        names.iter().any(|n| a.param(n) != c.param(n)),
        "different seeds must differ somewhere"
    );
}

#[test]
fn gradients_reach_every_trainable_parameter() {
    let (bb, ps) = default_backbone();
    let g = Graph::<f32>::new();
    let ctx = ps.bind(&g, Mode::Train);
    let x = g.constant(random_images(4, 1, 3, 32, 32));
    let out = bb.forward(&ctx, x).unwrap();
    let loss = out.embedding.sum() + out.clustering.sum();
    let mut grads = g.backward(loss);
    for (name, t) in ctx.bound() {
        let gr = grads
            .take(*t)
            .unwrap_or_else(|| panic!("no gradient for '{name}'"));
        assert!(
            gr.iter().all(|v| v.is_finite()),
            "non-finite gradient in '{name}'"
        );
    }
}

#[test]
fn encoder_norm_flag_swaps_norm_for_bias() {
    let cfg = BackboneConfig {
        encoder_norm: false,
        ..Default::default()
    };
    let bb = Backbone::new(cfg).unwrap();
    let mut ps = ParamStore::<f32>::new();
    bb.register(&mut ps, &mut rng(5));
    assert!(ps.contains_param("encoder.b1.c1.bias"));
    assert!(!ps.contains_param("encoder.b1.c1.bn.gamma"));
    // Decoder normalization is unaffected by the encoder flag.
    assert!(ps.contains_param("decoder.d1.c1.bn.gamma"));

    let g = Graph::<f32>::new();
    let ctx = ps.bind(&g, Mode::Train);
    let x = g.constant(random_images(6, 1, 3, 32, 32));
    bb.forward(&ctx, x).unwrap();
}

#[test]
fn bind_filtered_freezes_selected_parameters() {
    let (bb, ps) = default_backbone();
    let g = Graph::<f32>::new();
    let ctx = ps.bind_filtered(&g, Mode::Train, |name| !Backbone::is_encoder_param(name));
    let x = g.constant(random_images(8, 1, 3, 32, 32));
    let out = bb.forward(&ctx, x).unwrap();
    let mut grads = g.backward(out.embedding.sum() + out.clustering.sum());
    for (name, t) in ctx.bound() {
        let got = grads.take(*t);
        if Backbone::is_encoder_param(name) {
            assert!(got.is_none(), "frozen '{name}' received a gradient");
        } else {
            assert!(got.is_some(), "trainable '{name}' missing a gradient");
        }
    }
}

#[test]
fn train_mode_updates_every_running_statistic_once() {
    let (bb, ps) = default_backbone();
    let g = Graph::<f32>::new();
    let ctx = ps.bind(&g, Mode::Train);
    let x = g.constant(random_images(9, 1, 3, 32, 32));
    bb.forward(&ctx, x).unwrap();
    let updates = ctx.take_stat_updates();
    assert_eq!(updates.len(), ps.iter_buffers().count());

    let g2 = Graph::<f32>::new();
    let ctx2 = ps.bind(&g2, Mode::Eval);
    let x2 = g2.constant(random_images(9, 1, 3, 32, 32));
    bb.forward(&ctx2, x2).unwrap();
    assert!(ctx2.take_stat_updates().is_empty());
}

#[test]
fn running_statistics_blend_with_momentum() {
    // Identity 3x3 conv (center tap 1) so the normalized values are exactly
    // the input statistics.
    let spec = ConvSpec::same("only", 1, 1, true, Act::None);
    let mut ps = ParamStore::<f64>::new();
    spec.register(&mut ps, &mut rng(1));
    let mut w = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
    w[[0, 0, 1, 1]] = 1.0;
    ps.set_param("only.weight", w).unwrap();

    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let g = Graph::<f64>::new();
    let ctx = ps.bind(&g, Mode::Train);
    let y_train = spec.apply(&ctx, g.constant(x.clone()));
    for (name, value) in ctx.take_stat_updates() {
        ps.set_buffer(&name, value).unwrap();
    }
    // Batch mean 2.5 and biased variance 1.25, blended at momentum 0.1
    // into the (0, 1) initial state.
    assert!((ps.buffer("only.bn.mean")[[0]] - 0.25).abs() < 1e-12);
    assert!((ps.buffer("only.bn.var")[[0]] - 1.025).abs() < 1e-12);

    // With running stats pinned to the batch stats, eval equals train.
    ps.set_buffer("only.bn.mean", ArrayD::from_elem(IxDyn(&[1]), 2.5)).unwrap();
    ps.set_buffer("only.bn.var", ArrayD::from_elem(IxDyn(&[1]), 1.25)).unwrap();
    let g2 = Graph::<f64>::new();
    let ctx2 = ps.bind(&g2, Mode::Eval);
    let y_eval = spec.apply(&ctx2, g2.constant(x));
    let (a, b) = (y_train.value(), y_eval.value());
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn store_guards_shapes_and_duplicates() {
    let (_, mut ps) = default_backbone();
    let bad = ArrayD::<f32>::zeros(IxDyn(&[2, 2]));
    assert!(ps.set_param("encoder.b1.c1.weight", bad.clone()).is_err());
    assert!(ps.set_param("no.such.name", bad).is_err());
    let ok = ArrayD::<f32>::zeros(IxDyn(&[16, 3, 3, 3]));
    ps.set_param("encoder.b1.c1.weight", ok).unwrap();
    assert_eq!(ps.param("encoder.b1.c1.weight")[[0, 0, 0, 0]], 0.0);
}

#[test]
fn discriminator_scores_are_probabilities() {
    let disc = Discriminator::new(DiscriminatorConfig::default()).unwrap();
    let mut ps = ParamStore::<f32>::new();
    disc.register(&mut ps, &mut rng(3));
    // 64 final channels over a 2x2 fold: 256 features into the tail.
    assert_eq!(ps.param("disc.fc1.weight").shape(), &[256, 32]);
    assert_eq!(ps.param("disc.fc2.weight").shape(), &[32, 1]);

    let g = Graph::<f32>::new();
    let ctx = ps.bind(&g, Mode::Train);
    let x = g.constant(random_images(10, 3, 1, 64, 64));
    let scores = disc.forward(&ctx, x).unwrap();
    assert_eq!(scores.shape(), &[3]);
    assert!(scores.value().iter().all(|&p| p > 0.0 && p < 1.0));

    let bad = g.constant(random_images(11, 1, 2, 64, 64));
    assert!(disc.forward(&ctx, bad).is_err());
}

#[test]
fn discriminator_config_validation() {
    let mut cfg = DiscriminatorConfig::default();
    cfg.fc_channels = vec![32, 2];
    assert!(Discriminator::new(cfg).is_err());
    let mut cfg = DiscriminatorConfig::default();
    cfg.conv_channels.truncate(3);
    assert!(Discriminator::new(cfg).is_err());
}

#[test]
fn segmentation_decoder_restores_full_resolution() {
    let dec = SegmentationDecoder::new(SegmentationDecoderConfig::default(), 128).unwrap();
    let mut ps = ParamStore::<f32>::new();
    dec.register(&mut ps, &mut rng(4));
    let g = Graph::<f32>::new();
    let ctx = ps.bind(&g, Mode::Train);
    let bottom = g.constant(random_images(12, 1, 128, 2, 2));
    let probs = dec.forward(&ctx, bottom).unwrap();
    assert_eq!(probs.shape(), &[1, 1, 64, 64]);
    assert!(probs.value().iter().all(|&p| p > 0.0 && p < 1.0));

    let wrong = g.constant(random_images(13, 1, 64, 2, 2));
    assert!(dec.forward(&ctx, wrong).is_err());
}

#[test]
fn backbone_and_decoder_compose_for_transfer() {
    let (bb, mut ps) = default_backbone();
    let dec =
        SegmentationDecoder::new(SegmentationDecoderConfig::default(), bb.bottom_channels())
            .unwrap();
    dec.register(&mut ps, &mut rng(14));
    let g = Graph::<f32>::new();
    // Frozen-encoder phase: only decoder parameters learn.
    let ctx = ps.bind_filtered(&g, Mode::Train, SegmentationDecoder::is_param);
    let x = g.constant(random_images(15, 2, 3, 64, 64));
    let (_, bottom) = bb.encode(&ctx, x).unwrap();
    let probs = dec.forward(&ctx, bottom).unwrap();
    assert_eq!(probs.shape(), &[2, 1, 64, 64]);
    let mut grads = g.backward(probs.sum());
    for (name, t) in ctx.bound() {
        assert_eq!(
            grads.take(*t).is_some(),
            SegmentationDecoder::is_param(name),
            "freeze mismatch at '{name}'"
        );
    }
}
