//! Convolution, pooling, resampling, and batch normalization ops.
//!
//! Convolutions run as im2col + GEMM per image, parallelized over the batch.
//! The column buffer is recomputed in the backward pass instead of being
//! stored; activations dominate memory and the rebuild is a small fraction of
//! the GEMM cost.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayViewMut2, Axis, Ix1, Ix4, IxDyn, Zip};
use rayon::prelude::*;

use super::{Node, NodeId, Op, Scalar, Tensor};

/// Per-channel statistics captured by a training-mode batch norm.
pub struct BatchNormStats<F: Scalar> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
    pub istd: Array1<F>,
}

/// Output spatial shape of a stride-1 convolution.
pub fn conv2d_shape(input: &[usize], weight: &[usize], pad: usize) -> (usize, usize) {
    let (h, w) = (input[2], input[3]);
    let k = weight[2];
    (h + 2 * pad - k + 1, w + 2 * pad - k + 1)
}

fn im2col<F: Scalar>(
    x: &[F],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    col: &mut [F],
) {
    let zero = F::zero();
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let rowbuf = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(ow as isize)).max(0) as usize;
                for oy in 0..oh {
                    let iy = oy as isize + dy;
                    let dst = &mut rowbuf[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || x0 >= x1 {
                        dst.fill(zero);
                        continue;
                    }
                    dst[..x0].fill(zero);
                    dst[x1..].fill(zero);
                    let src_base = (c * h + iy as usize) * w;
                    let s0 = (x0 as isize + dx) as usize;
                    let s1 = (x1 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&x[src_base + s0..src_base + s1]);
                }
            }
        }
    }
}

/// Scatter-add of a column buffer back onto the (padded) input gradient.
fn col2im_add<F: Scalar>(
    col: &[F],
    (cin, h, w): (usize, usize, usize),
    k: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dx_img: &mut [F],
) {
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let rowbuf = &col[row * oh * ow..(row + 1) * oh * ow];
                let dy = ky as isize - pad as isize;
                let dxo = kx as isize - pad as isize;
                let x0 = (-dxo).max(0) as usize;
                let x1 = ((w as isize - dxo).min(ow as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &rowbuf[oy * ow + x0..oy * ow + x1];
                    let dst_base = (c * h + iy as usize) * w;
                    let d0 = (x0 as isize + dxo) as usize;
                    let dst = &mut dx_img[dst_base + d0..dst_base + d0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

impl<'g, F: Scalar> Tensor<'g, F> {
    /// 2-D convolution, stride 1. `x`: (N,Cin,H,W), `w`: (Cout,Cin,K,K),
    /// `b`: (Cout,).
    pub fn conv2d(self, w: Tensor<'g, F>, b: Option<Tensor<'g, F>>, pad: usize) -> Self {
        let xv = self.value();
        let wv = w.value();
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIKK");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, cin, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let (oh, ow) = conv2d_shape(xs, ws, pad);
        let wmat = wv
            .view()
            .into_shape((cout, cin * k * k))
            .expect("weight reshape");
        let bias: Option<Array1<F>> = b.map(|t| {
            t.value()
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias must be 1-D")
                .to_owned()
        });

        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, cout, oh, ow]));
        {
            let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
            let mut out4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            let mut slots: Vec<(usize, ArrayViewMut2<F>)> = out4
                .outer_iter_mut()
                .enumerate()
                .map(|(i, img)| {
                    (
                        i,
                        img.into_shape((cout, oh * ow)).expect("output reshape"),
                    )
                })
                .collect();
            slots.par_iter_mut().for_each(|(i, out_mat)| {
                let xi = x4.index_axis(Axis(0), *i);
                let x_sl = xi.to_slice().expect("contiguous image");
                let mut col = Array2::<F>::zeros((cin * k * k, oh * ow));
                im2col(
                    x_sl,
                    (cin, h, w_in),
                    k,
                    pad,
                    (oh, ow),
                    col.as_slice_mut().unwrap(),
                );
                ndarray::linalg::general_mat_mul(
                    F::one(),
                    &wmat,
                    &col,
                    F::zero(),
                    &mut out_mat.view_mut(),
                );
                if let Some(bias) = &bias {
                    for (mut row, &bc) in out_mat.outer_iter_mut().zip(bias.iter()) {
                        row.mapv_inplace(|v| v + bc);
                    }
                }
            });
        }
        let req =
            self.requires_grad() || w.requires_grad() || b.map(|t| t.requires_grad()).unwrap_or(false);
        self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|t| t.id),
                pad,
            },
            req,
        )
    }

    /// 2x2 max pooling with stride 2. Requires even H and W.
    pub fn maxpool2(self) -> Self {
        let xv = self.value();
        let xs = xv.shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let x_sl = xv.as_slice().expect("contiguous input");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, oh, ow]));
        let out_sl = out.as_slice_mut().unwrap();
        let mut argmax = vec![0u32; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &x_sl[nc * h * w..(nc + 1) * h * w];
            let out_plane = &mut out_sl[nc * oh * ow..(nc + 1) * oh * ow];
            let idx_plane = &mut argmax[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = (oy * 2, ox * 2);
                    let mut best = plane[y * w + x];
                    let mut best_i = (y * w + x) as u32;
                    for (ddy, ddx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (y + ddy) * w + x + ddx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i as u32;
                        }
                    }
                    out_plane[oy * ow + ox] = best;
                    idx_plane[oy * ow + ox] = best_i;
                }
            }
        }
        self.graph.push(
            out,
            Op::MaxPool2(self.id, Rc::new(argmax)),
            self.requires_grad(),
        )
    }

    /// Bilinear 2x upsampling (half-pixel centers, edges clamped).
    pub fn upsample_bilinear2(self) -> Self {
        let xv = self.value();
        let xs = xv.shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let ytab = bilinear_taps::<F>(h, oh);
        let xtab = bilinear_taps::<F>(w, ow);
        let x_sl = xv.as_slice().expect("contiguous input");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, oh, ow]));
        let out_sl = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let plane = &x_sl[nc * h * w..(nc + 1) * h * w];
            let out_plane = &mut out_sl[nc * oh * ow..(nc + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
                let r0 = &plane[y0 * w..y0 * w + w];
                let r1 = &plane[y1 * w..y1 * w + w];
                let dst = &mut out_plane[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, fx)) in xtab.iter().enumerate() {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                    let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                    dst[ox] = top + (bot - top) * fy;
                }
            }
        }
        self.graph
            .push(out, Op::UpsampleBilinear2(self.id), self.requires_grad())
    }

    /// Adaptive average pooling onto a `grid` x `grid` output.
    /// Cell k spans [floor(k*H/G), ceil((k+1)*H/G)).
    pub fn adaptive_avg_pool(self, grid: usize) -> Self {
        let xv = self.value();
        let xs = xv.shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert!(grid >= 1 && grid <= h && grid <= w, "pool grid exceeds input");
        let x_sl = xv.as_slice().expect("contiguous input");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, grid, grid]));
        let out_sl = out.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let plane = &x_sl[nc * h * w..(nc + 1) * h * w];
            let out_plane = &mut out_sl[nc * grid * grid..(nc + 1) * grid * grid];
            for gy in 0..grid {
                let (y0, y1) = pool_span(gy, h, grid);
                for gx in 0..grid {
                    let (x0, x1) = pool_span(gx, w, grid);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += plane[y * w + x];
                        }
                    }
                    let count = F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    out_plane[gy * grid + gx] = acc / count;
                }
            }
        }
        self.graph
            .push(out, Op::AdaptiveAvgPool(self.id, grid), self.requires_grad())
    }

    /// Training-mode batch normalization over (N,H,W) per channel.
    /// Returns the normalized output and the batch statistics.
    pub fn batch_norm_train(
        self,
        gamma: Tensor<'g, F>,
        beta: Tensor<'g, F>,
        eps: F,
    ) -> (Self, Rc<BatchNormStats<F>>) {
        let xv = self.value();
        let xs = xv.shape();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let count = F::from_usize(n * h * w).unwrap();
        let gv = gamma.value();
        let bv = beta.value();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();

        let mut mean = Array1::<F>::zeros(c);
        let mut var = Array1::<F>::zeros(c);
        let mut istd = Array1::<F>::zeros(c);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = ArrayD::<F>::zeros(IxDyn(xs));
        let mut out4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ch in 0..c {
            let xc = x4.index_axis(Axis(1), ch);
            let mut acc = F::zero();
            for &v in xc.iter() {
                acc += v;
            }
            let mu = acc / count;
            let mut vacc = F::zero();
            for &v in xc.iter() {
                let d = v - mu;
                vacc += d * d;
            }
            let va = vacc / count;
            let is = F::one() / (va + eps).sqrt();
            mean[ch] = mu;
            var[ch] = va;
            istd[ch] = is;
            let (gc, bc) = (g1[ch], b1[ch]);
            let mut oc = out4.index_axis_mut(Axis(1), ch);
            Zip::from(&mut oc).and(&xc).for_each(|o, &v| {
                *o = gc * (v - mu) * is + bc;
            });
        }
        let stats = Rc::new(BatchNormStats { mean, var, istd });
        let req = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let t = self.graph.push(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                saved: Rc::clone(&stats),
            },
            req,
        );
        (t, stats)
    }

    /// Inference-mode batch normalization from running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Tensor<'g, F>,
        beta: Tensor<'g, F>,
        running_mean: &Array1<F>,
        running_var: &Array1<F>,
        eps: F,
    ) -> Self {
        let c = running_mean.len();
        let g = self.graph;
        let shape = [1, c, 1, 1];
        let rinv = running_var.mapv(|v| F::one() / (v + eps).sqrt());
        let rm = g.constant(running_mean.clone().into_dyn().into_shape(IxDyn(&shape)).unwrap());
        let ri = g.constant(rinv.into_dyn().into_shape(IxDyn(&shape)).unwrap());
        let gamma4 = gamma.reshape(&shape);
        let beta4 = beta.reshape(&shape);
        (self - rm) * ri * gamma4 + beta4
    }

    /// Fully connected layer: x (N,I) . w (I,O) + b (O,).
    pub fn linear(self, w: Tensor<'g, F>, b: Tensor<'g, F>) -> Self {
        let o = b.value().len();
        self.matmul(w) + b.reshape(&[1, o])
    }
}

fn pool_span(idx: usize, len: usize, grid: usize) -> (usize, usize) {
    let start = idx * len / grid;
    let end = ((idx + 1) * len).div_ceil(grid);
    (start, end.min(len))
}

/// (lower index, upper index, upper weight) per output position for a
/// half-pixel-centered bilinear resample.
fn bilinear_taps<F: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, F)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let frac = src - i0 as f64;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, F::of_f64(frac))
        })
        .collect()
}

type Accum<F> = dyn Fn(&[Node<F>], &mut [Option<ArrayD<F>>], NodeId, ArrayD<F>);

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<ArrayD<F>>],
    grad: &ArrayD<F>,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    pad: usize,
    accum: &Accum<F>,
) {
    let xv = &nodes[x].value;
    let wv = &nodes[w].value;
    let xs = xv.shape();
    let ws = wv.shape();
    let (n, cin, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let gs = grad.shape();
    let (oh, ow) = (gs[2], gs[3]);
    let need_x = nodes[x].requires_grad;
    let need_w = nodes[w].requires_grad;

    if let Some(b) = b {
        if nodes[b].requires_grad {
            let db = grad.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            accum(nodes, grads, b, db.into_dyn());
        }
    }
    if !need_x && !need_w {
        return;
    }

    let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
    let wmat = wv.view().into_shape((cout, cin * k * k)).unwrap();

    let per_image: Vec<(Option<Array2<F>>, Option<ArrayD<F>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x4.index_axis(Axis(0), i);
            let x_sl = xi.to_slice().expect("contiguous image");
            let gi = g4.index_axis(Axis(0), i);
            let g_mat = gi.into_shape((cout, oh * ow)).expect("grad reshape");
            let mut col = Array2::<F>::zeros((cin * k * k, oh * ow));
            im2col(
                x_sl,
                (cin, h, w_in),
                k,
                pad,
                (oh, ow),
                col.as_slice_mut().unwrap(),
            );
            let dw = need_w.then(|| g_mat.dot(&col.t()));
            let dx = need_x.then(|| {
                let dcol = wmat.t().dot(&g_mat);
                let mut dxi = ArrayD::<F>::zeros(IxDyn(&[cin, h, w_in]));
                col2im_add(
                    dcol.as_slice().unwrap(),
                    (cin, h, w_in),
                    k,
                    pad,
                    (oh, ow),
                    dxi.as_slice_mut().unwrap(),
                );
                dxi
            });
            (dw, dx)
        })
        .collect();

    if need_w {
        let mut dw = Array2::<F>::zeros((cout, cin * k * k));
        for (dwi, _) in &per_image {
            dw += dwi.as_ref().unwrap();
        }
        accum(
            nodes,
            grads,
            w,
            dw.into_dyn().into_shape(IxDyn(ws)).unwrap(),
        );
    }
    if need_x {
        let mut dx = ArrayD::<F>::zeros(IxDyn(xs));
        let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
        for (i, (_, dxi)) in per_image.into_iter().enumerate() {
            dx4.index_axis_mut(Axis(0), i)
                .assign(&dxi.unwrap().into_dimensionality::<ndarray::Ix3>().unwrap());
        }
        accum(nodes, grads, x, dx);
    }
}

pub(crate) fn maxpool2_backward<F: Scalar>(
    grad: &ArrayD<F>,
    input: &ArrayD<F>,
    argmax: &[u32],
) -> ArrayD<F> {
    let xs = input.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = ArrayD::<F>::zeros(IxDyn(xs));
    let dx_sl = dx.as_slice_mut().unwrap();
    let g_sl = grad.as_slice().expect("contiguous grad");
    for nc in 0..n * c {
        let gp = &g_sl[nc * oh * ow..(nc + 1) * oh * ow];
        let ip = &argmax[nc * oh * ow..(nc + 1) * oh * ow];
        let dp = &mut dx_sl[nc * h * w..(nc + 1) * h * w];
        for (g, &i) in gp.iter().zip(ip) {
            dp[i as usize] += *g;
        }
    }
    dx
}

pub(crate) fn upsample_bilinear2_backward<F: Scalar>(
    grad: &ArrayD<F>,
    input_shape: &[usize],
) -> ArrayD<F> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (oh, ow) = (2 * h, 2 * w);
    let ytab = bilinear_taps::<F>(h, oh);
    let xtab = bilinear_taps::<F>(w, ow);
    let mut dx = ArrayD::<F>::zeros(IxDyn(input_shape));
    let dx_sl = dx.as_slice_mut().unwrap();
    let g_sl = grad.as_slice().expect("contiguous grad");
    let one = F::one();
    for nc in 0..n * c {
        let gp = &g_sl[nc * oh * ow..(nc + 1) * oh * ow];
        let dp = &mut dx_sl[nc * h * w..(nc + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ytab.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtab.iter().enumerate() {
                let g = gp[oy * ow + ox];
                dp[y0 * w + x0] += g * (one - fy) * (one - fx);
                dp[y0 * w + x1] += g * (one - fy) * fx;
                dp[y1 * w + x0] += g * fy * (one - fx);
                dp[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

pub(crate) fn adaptive_avg_pool_backward<F: Scalar>(
    grad: &ArrayD<F>,
    input_shape: &[usize],
    grid: usize,
) -> ArrayD<F> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let mut dx = ArrayD::<F>::zeros(IxDyn(input_shape));
    let dx_sl = dx.as_slice_mut().unwrap();
    let g_sl = grad.as_slice().expect("contiguous grad");
    for nc in 0..n * c {
        let gp = &g_sl[nc * grid * grid..(nc + 1) * grid * grid];
        let dp = &mut dx_sl[nc * h * w..(nc + 1) * h * w];
        for gy in 0..grid {
            let (y0, y1) = pool_span(gy, h, grid);
            for gx in 0..grid {
                let (x0, x1) = pool_span(gx, w, grid);
                let share = gp[gy * grid + gx]
                    / F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for y in y0..y1 {
                    for x in x0..x1 {
                        dp[y * w + x] += share;
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<ArrayD<F>>],
    grad: &ArrayD<F>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    saved: &BatchNormStats<F>,
    accum: &Accum<F>,
) {
    let xv = &nodes[x].value;
    let xs = xv.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let count = F::from_usize(n * h * w).unwrap();
    let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
    let gv = nodes[gamma].value.view().into_dimensionality::<Ix1>().unwrap();

    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    let need_x = nodes[x].requires_grad;
    let mut dx = need_x.then(|| ArrayD::<F>::zeros(IxDyn(xs)));

    for ch in 0..c {
        let xc = x4.index_axis(Axis(1), ch);
        let gc = g4.index_axis(Axis(1), ch);
        let (mu, is) = (saved.mean[ch], saved.istd[ch]);
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        Zip::from(&gc).and(&xc).for_each(|&g, &v| {
            sum_g += g;
            sum_gx += g * (v - mu) * is;
        });
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;
        if let Some(dx) = dx.as_mut() {
            let mean_g = sum_g / count;
            let mean_gx = sum_gx / count;
            let gam = gv[ch];
            let mut dxc = dx
                .view_mut()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .index_axis_move(Axis(1), ch);
            Zip::from(&mut dxc).and(&gc).and(&xc).for_each(|d, &g, &v| {
                let xhat = (v - mu) * is;
                *d = gam * is * (g - mean_g - xhat * mean_gx);
            });
        }
    }
    accum(nodes, grads, gamma, dgamma.into_dyn());
    accum(nodes, grads, beta, dbeta.into_dyn());
    if let Some(dx) = dx {
        accum(nodes, grads, x, dx);
    }
}
