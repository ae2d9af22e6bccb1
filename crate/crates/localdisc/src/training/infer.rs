//! Frozen-weight inference: run trained networks over a set of images
//! without gradients, batch by batch. Shared by the CLI and evaluation.

use ndarray::{Array3, Array4, Axis};

use super::loops::to_batch;
use crate::autodiff::{Graph, Scalar};
use crate::core_math::ClusterProbMap;
use crate::error::{Error, Result};
use crate::networks::{Backbone, Mode, ParamStore, SegmentationDecoder};

/// Check that `images` form one batchable set: non-empty, 3-channel,
/// square, uniform size, side a multiple of 32. Returns (count, side).
fn check_images(images: &[Array3<f32>]) -> Result<(usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("inference input", "no images given"))?;
    let (c, h, w) = first.dim();
    if c != 3 || h != w || h % 32 != 0 {
        return Err(Error::invalid(
            "inference input",
            format!("images must be (3,S,S) with S a multiple of 32, got ({c},{h},{w})"),
        ));
    }
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::invalid(
                "inference input",
                format!("image {i} has shape {:?}, expected ({c},{h},{w})", img.dim()),
            ));
        }
    }
    Ok((images.len(), h))
}

/// Cluster-assignment maps for `images` under frozen weights, shape
/// (N, M, S, S), computed in eval mode `batch` images at a time.
pub fn predict_cluster_probs<F: Scalar>(
    backbone: &Backbone,
    store: &ParamStore<F>,
    images: &[Array3<f32>],
    batch: usize,
) -> Result<ClusterProbMap<F>> {
    let (n, side) = check_images(images)?;
    if batch == 0 {
        return Err(Error::invalid("inference input", "batch must be at least 1"));
    }
    let m = backbone.config().cluster_count;
    let mut out = Array4::<F>::zeros((n, m, side, side));
    let mut done = 0usize;
    for chunk in images.chunks(batch) {
        let refs: Vec<&Array3<f32>> = chunk.iter().collect();
        let g = Graph::<F>::new();
        let ctx = store.bind_filtered(&g, Mode::Eval, |_| false);
        let net = backbone.forward(&ctx, g.constant(to_batch(&refs)))?;
        let r = net.clustering.value();
        for (i, row) in r.axis_iter(Axis(0)).enumerate() {
            out.index_axis_mut(Axis(0), done + i).assign(&row);
        }
        done += chunk.len();
    }
    ClusterProbMap::new(out)
}

/// Foreground probabilities from a fine-tuned encoder + segmentation
/// decoder, shape (N, 1, S, S), computed in eval mode.
pub fn predict_segmentation<F: Scalar>(
    backbone: &Backbone,
    encoder_store: &ParamStore<F>,
    decoder: &SegmentationDecoder,
    decoder_store: &ParamStore<F>,
    images: &[Array3<f32>],
    batch: usize,
) -> Result<Array4<f32>> {
    let (n, side) = check_images(images)?;
    if batch == 0 {
        return Err(Error::invalid("inference input", "batch must be at least 1"));
    }
    let mut out = Array4::<f32>::zeros((n, 1, side, side));
    let mut done = 0usize;
    for chunk in images.chunks(batch) {
        let refs: Vec<&Array3<f32>> = chunk.iter().collect();
        let g = Graph::<F>::new();
        let ctx_enc = encoder_store.bind_filtered(&g, Mode::Eval, |_| false);
        let ctx_dec = decoder_store.bind_filtered(&g, Mode::Eval, |_| false);
        let (_, bottom) = backbone.encode(&ctx_enc, g.constant(to_batch(&refs)))?;
        let pred = decoder.forward(&ctx_dec, bottom)?;
        let v = pred.value();
        for (i, row) in v.axis_iter(Axis(0)).enumerate() {
            out.index_axis_mut(Axis(0), done + i)
                .assign(&row.mapv(|x| x.as_f64() as f32));
        }
        done += chunk.len();
    }
    Ok(out)
}
