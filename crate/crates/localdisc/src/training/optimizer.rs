//! Adaptive moment estimation with bias correction, keyed by parameter name.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::networks::ParamStore;

/// Moment accumulators of one parameter.
#[derive(Debug, Clone)]
pub struct AdamSlot<F> {
    pub step: u64,
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
}

/// Adam with per-parameter state and no weight decay. Parameters absent from
/// a step's gradient map are left untouched, so freezing is expressed purely
/// by which gradients arrive.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: IndexMap<String, AdamSlot<F>>,
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Self::with_coefficients(0.9, 0.999, 1e-8)
    }

    pub fn with_coefficients(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            slots: IndexMap::new(),
        }
    }

    /// Apply one update to every parameter in `grads`, reading and writing
    /// the store by name. A non-finite gradient is refused before any state
    /// changes so callers can abort with the parameters intact.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &IndexMap<String, ArrayD<F>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(
                    "gradient",
                    format!("non-finite gradient for '{name}'"),
                ));
            }
        }
        let b1 = F::of_f64(self.beta1);
        let b2 = F::of_f64(self.beta2);
        let one = F::one();
        for (name, g) in grads {
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                step: 0,
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
            });
            slot.step += 1;
            slot.m.zip_mut_with(g, |m, &gv| *m = *m * b1 + gv * (one - b1));
            slot.v
                .zip_mut_with(g, |v, &gv| *v = *v * b2 + gv * gv * (one - b2));
            let t = slot.step.min(i32::MAX as u64) as i32;
            let c1 = F::of_f64(1.0 - self.beta1.powi(t));
            let c2 = F::of_f64(1.0 - self.beta2.powi(t));
            let lr_f = F::of_f64(lr);
            let eps_f = F::of_f64(self.eps);
            let mut p = store.param(name).clone();
            ndarray::Zip::from(&mut p)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    *p = *p - lr_f * (m / c1) / ((v / c2).sqrt() + eps_f);
                });
            store.set_param(name, p)?;
        }
        Ok(())
    }

    pub fn slots(&self) -> impl Iterator<Item = (&str, &AdamSlot<F>)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn insert_slot(&mut self, name: String, slot: AdamSlot<F>) {
        self.slots.insert(name, slot);
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}
