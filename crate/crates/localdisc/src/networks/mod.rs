//! Network architectures: the two-headed segmentation backbone, the mask
//! discriminator, and the downstream segmentation decoder.
//!
//! Parameters live in a [`ParamStore`] keyed by module path. A forward pass
//! binds them onto an autodiff graph through a [`ForwardCtx`], which also
//! collects batch-norm running-statistic updates to apply after the step.

mod backbone;
mod discriminator;
mod segmentation;
#[cfg(test)]
mod tests;

pub use backbone::{Backbone, BackboneConfig, NetworkOutput};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use segmentation::{SegmentationDecoder, SegmentationDecoderConfig};

use std::cell::RefCell;

use indexmap::IndexMap;
use ndarray::{Array1, ArrayD, Ix1, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistic blend factor: new = (1-m)*old + m*batch.
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a forward pass uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named tensors of a model: trainable parameters plus non-trainable
/// buffers (batch-norm running statistics). Iteration order is insertion
/// order, which registration keeps deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    params: IndexMap<String, ArrayD<F>>,
    buffers: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub(crate) fn add_param(&mut self, name: &str, value: ArrayD<F>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    pub(crate) fn add_buffer(&mut self, name: &str, value: ArrayD<F>) {
        let prev = self.buffers.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate buffer '{name}'");
    }

    pub fn param(&self, name: &str) -> &ArrayD<F> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn buffer(&self, name: &str) -> &ArrayD<F> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer '{name}'"))
    }

    pub fn contains_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid("parameter", format!("unknown name '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::invalid(
                "parameter",
                format!("shape {:?} != {:?} for '{name}'", value.shape(), slot.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: ArrayD<F>) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid("buffer", format!("unknown name '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::invalid(
                "buffer",
                format!("shape {:?} != {:?} for '{name}'", value.shape(), slot.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Bind every parameter onto `g` as a trainable leaf.
    pub fn bind<'g, 's>(&'s self, g: &'g Graph<F>, mode: Mode) -> ForwardCtx<'g, 's, F> {
        self.bind_filtered(g, mode, |_| true)
    }

    /// Bind parameters, marking only those `trainable` accepts as requiring
    /// gradients. Frozen parameters still enter the forward pass.
    pub fn bind_filtered<'g, 's>(
        &'s self,
        g: &'g Graph<F>,
        mode: Mode,
        trainable: impl Fn(&str) -> bool,
    ) -> ForwardCtx<'g, 's, F> {
        let mut bound = IndexMap::with_capacity(self.params.len());
        for (name, value) in &self.params {
            let t = if trainable(name) {
                g.param(value.clone())
            } else {
                g.constant(value.clone())
            };
            bound.insert(name.clone(), t);
        }
        ForwardCtx {
            g,
            bound,
            store: self,
            mode,
            stat_updates: RefCell::new(Vec::new()),
        }
    }
}

/// One model invocation: graph handle, bound parameters, and the running
/// statistics gathered along the way.
pub struct ForwardCtx<'g, 's, F: Scalar> {
    pub g: &'g Graph<F>,
    bound: IndexMap<String, Tensor<'g, F>>,
    store: &'s ParamStore<F>,
    pub mode: Mode,
    stat_updates: RefCell<Vec<(String, ArrayD<F>)>>,
}

impl<'g, F: Scalar> ForwardCtx<'g, '_, F> {
    /// Bound tensor of a parameter; panics on unknown names since those are
    /// registration bugs, not runtime conditions.
    pub fn p(&self, name: &str) -> Tensor<'g, F> {
        *self
            .bound
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn bound(&self) -> &IndexMap<String, Tensor<'g, F>> {
        &self.bound
    }

    fn buffer1(&self, name: &str) -> Array1<F> {
        self.store
            .buffer(name)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d buffer")
            .to_owned()
    }

    fn note_stats(&self, name: &str, batch: &Array1<F>) {
        let old = self.buffer1(name);
        let m = F::of_f64(BN_MOMENTUM);
        let blended = (&old * (F::one() - m) + batch * m).into_dyn();
        self.stat_updates.borrow_mut().push((name.to_string(), blended));
    }

    /// Running-statistic writes collected during the forward pass, to be
    /// applied to the store once the step is done.
    pub fn take_stat_updates(&self) -> Vec<(String, ArrayD<F>)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }
}

/// Activation applied after a conv or linear layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Act {
    Relu,
    Leaky(f64),
    None,
}

impl Act {
    fn gain(self) -> f64 {
        match self {
            Act::Relu => std::f64::consts::SQRT_2,
            Act::Leaky(slope) => (2.0 / (1.0 + slope * slope)).sqrt(),
            Act::None => 1.0,
        }
    }

    fn apply<'g, F: Scalar>(self, x: Tensor<'g, F>) -> Tensor<'g, F> {
        match self {
            Act::Relu => x.relu(),
            Act::Leaky(slope) => x.leaky_relu(F::of_f64(slope)),
            Act::None => x,
        }
    }
}

/// Uniform He initialization: U(-b, b) with b = gain * sqrt(3 / fan_in).
/// Samples are drawn in f64 so all precisions see identical values.
fn he_uniform<F: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> ArrayD<F> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let mut flat = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape.iter().product::<usize>() {
        flat.push(F::of_f64(rng.gen_range(-bound..bound)));
    }
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("init shape")
}

/// A square conv layer with optional batch norm and activation. The same
/// description drives both parameter registration and the forward pass, so
/// names can never drift apart.
#[derive(Debug, Clone)]
pub(crate) struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub pad: usize,
    pub norm: bool,
    pub act: Act,
}

impl ConvSpec {
    /// 3x3 same-size conv, the workhorse of every block.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, norm: bool, act: Act) -> Self {
        ConvSpec {
            name: name.into(),
            cin,
            cout,
            kernel: 3,
            pad: 1,
            norm,
            act,
        }
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let fan_in = self.cin * self.kernel * self.kernel;
        let w = he_uniform::<F>(
            rng,
            &[self.cout, self.cin, self.kernel, self.kernel],
            fan_in,
            self.act.gain(),
        );
        ps.add_param(&format!("{}.weight", self.name), w);
        if self.norm {
            ps.add_param(
                &format!("{}.bn.gamma", self.name),
                ArrayD::from_elem(IxDyn(&[self.cout]), F::one()),
            );
            ps.add_param(
                &format!("{}.bn.beta", self.name),
                ArrayD::zeros(IxDyn(&[self.cout])),
            );
            ps.add_buffer(
                &format!("{}.bn.mean", self.name),
                ArrayD::zeros(IxDyn(&[self.cout])),
            );
            ps.add_buffer(
                &format!("{}.bn.var", self.name),
                ArrayD::from_elem(IxDyn(&[self.cout]), F::one()),
            );
        } else {
            ps.add_param(
                &format!("{}.bias", self.name),
                ArrayD::zeros(IxDyn(&[self.cout])),
            );
        }
    }

    pub fn apply<'g, F: Scalar>(
        &self,
        ctx: &ForwardCtx<'g, '_, F>,
        x: Tensor<'g, F>,
    ) -> Tensor<'g, F> {
        let w = ctx.p(&format!("{}.weight", self.name));
        let y = if self.norm {
            let y = x.conv2d(w, None, self.pad);
            let gamma = ctx.p(&format!("{}.bn.gamma", self.name));
            let beta = ctx.p(&format!("{}.bn.beta", self.name));
            match ctx.mode {
                Mode::Train => {
                    let (out, stats) = y.batch_norm_train(gamma, beta, F::of_f64(BN_EPS));
                    ctx.note_stats(&format!("{}.bn.mean", self.name), &stats.mean);
                    ctx.note_stats(&format!("{}.bn.var", self.name), &stats.var);
                    out
                }
                Mode::Eval => {
                    let mean = ctx.buffer1(&format!("{}.bn.mean", self.name));
                    let var = ctx.buffer1(&format!("{}.bn.var", self.name));
                    y.batch_norm_eval(gamma, beta, &mean, &var, F::of_f64(BN_EPS))
                }
            }
        } else {
            let b = ctx.p(&format!("{}.bias", self.name));
            x.conv2d(w, Some(b), self.pad)
        };
        self.act.apply(y)
    }
}

/// A fully connected layer with bias.
#[derive(Debug, Clone)]
pub(crate) struct LinearSpec {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
    pub act: Act,
}

impl LinearSpec {
    pub fn register<F: Scalar>(&self, ps: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let w = he_uniform::<F>(rng, &[self.fin, self.fout], self.fin, self.act.gain());
        ps.add_param(&format!("{}.weight", self.name), w);
        ps.add_param(
            &format!("{}.bias", self.name),
            ArrayD::zeros(IxDyn(&[self.fout])),
        );
    }

    pub fn apply<'g, F: Scalar>(
        &self,
        ctx: &ForwardCtx<'g, '_, F>,
        x: Tensor<'g, F>,
    ) -> Tensor<'g, F> {
        let w = ctx.p(&format!("{}.weight", self.name));
        let b = ctx.p(&format!("{}.bias", self.name));
        self.act.apply(x.linear(w, b))
    }
}
