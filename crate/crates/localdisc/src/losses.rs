//! Differentiable training objectives: local-discrimination clustering,
//! entropy and area regularizers, patch discrimination with mixup, the
//! adversarial pair, soft Dice, and the per-stage weighted totals.
//!
//! All functions build onto an autodiff graph and return scalar tensors
//! unless stated otherwise. Probabilities are clamped to [1e-7, 1-1e-7]
//! inside every logarithm.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::core_math::diff;
use crate::error::{Error, Result};

/// Floor for probabilities inside logs.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the total training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pd: f64,
    pub w_mixup: f64,
    pub w_ld: f64,
    pub w_entropy: f64,
    pub w_area: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_pd: 1.0,
            w_mixup: 1.0,
            w_ld: 10.0,
            w_entropy: 1.0,
            w_area: 5.0,
            w_adv: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_pd,
            self.w_mixup,
            self.w_ld,
            self.w_entropy,
            self.w_area,
            self.w_adv,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Softmax temperature for patch discrimination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("temperature", format!("tau = {tau}, need > 0")));
        }
        Ok(Temperature(tau))
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature(0.1)
    }
}

/// Training stages, in protocol order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Ld,
    Prior,
    Finetune,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Ld => "ld",
            Stage::Prior => "prior",
            Stage::Finetune => "finetune",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "ld" => Ok(Stage::Ld),
            "prior" => Ok(Stage::Prior),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::invalid("stage", format!("unknown stage '{other}'"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Component losses available when composing a stage total.
pub struct StageLosses<'g, F: Scalar> {
    pub pd: Option<Tensor<'g, F>>,
    pub mixup: Option<Tensor<'g, F>>,
    pub ld: Option<Tensor<'g, F>>,
    pub entropy: Option<Tensor<'g, F>>,
    pub area: Option<Tensor<'g, F>>,
    pub adv: Option<Tensor<'g, F>>,
}

impl<F: Scalar> Default for StageLosses<'_, F> {
    fn default() -> Self {
        StageLosses {
            pd: None,
            mixup: None,
            ld: None,
            entropy: None,
            area: None,
            adv: None,
        }
    }
}

/// Soft-assignment-weighted cluster centers projected to the unit sphere.
///
/// `r`: (N,M,H,W) cluster probabilities; `v`: (N,D,H,W) unit embeddings.
/// Returns (M,D); a cluster with zero total mass yields a zero row.
pub fn compute_cluster_centers<'g, F: Scalar>(
    r: Tensor<'g, F>,
    v: Tensor<'g, F>,
    eps: F,
) -> Tensor<'g, F> {
    let rs = r.shape();
    let vs = v.shape();
    let (n, m, h, w) = (rs[0], rs[1], rs[2], rs[3]);
    let d = vs[1];
    assert_eq!(
        (rs[0], rs[2], rs[3]),
        (vs[0], vs[2], vs[3]),
        "cluster map and embedding map must share (N,H,W)"
    );
    let r_mat = r.permute(&[1, 0, 2, 3]).reshape(&[m, n * h * w]);
    let v_mat = v.permute(&[0, 2, 3, 1]).reshape(&[n * h * w, d]);
    let t = r_mat.matmul(v_mat);
    diff::l2_normalize(t, 1, eps)
}

/// Local discrimination objective: pull pixels toward their soft-assigned
/// cluster centers, push distinct centers apart.
pub fn loss_ld<'g, F: Scalar>(
    r: Tensor<'g, F>,
    v: Tensor<'g, F>,
    eps: F,
) -> Result<Tensor<'g, F>> {
    let rs = r.shape();
    let vs = v.shape();
    let (n, m, h, w) = (rs[0], rs[1], rs[2], rs[3]);
    let d = vs[1];
    if m < 2 {
        return Err(Error::Config(format!(
            "local discrimination needs at least 2 clusters, got {m}"
        )));
    }
    let c = compute_cluster_centers(r, v, eps); // (M,D)

    // Per-pixel similarity to every center: (NHW,D)x(D,M) -> (N,M,H,W).
    let v_mat = v.permute(&[0, 2, 3, 1]).reshape(&[n * h * w, d]);
    let sim = v_mat
        .matmul(c.permute(&[1, 0]))
        .reshape(&[n, h, w, m])
        .permute(&[0, 3, 1, 2]);
    let compact = (r * sim)
        .sum()
        .scale(-F::one() / F::from_usize(m * n * h * w).unwrap());

    // Off-diagonal mean of the center Gram matrix; the diagonal equals the
    // squared row norms, so subtracting them leaves exactly the m!=n terms.
    let gram_sum = c.matmul(c.permute(&[1, 0])).sum();
    let diag_sum = (c * c).sum();
    let separate = (gram_sum - diag_sum).scale(F::one() / F::from_usize(m * m - m).unwrap());

    Ok(compact + separate)
}

/// Mean per-pixel assignment entropy in bits, scaled by 1/M.
pub fn loss_entropy<F: Scalar>(r: Tensor<'_, F>) -> Tensor<'_, F> {
    let rs = r.shape();
    let (n, m, h, w) = (rs[0], rs[1], rs[2], rs[3]);
    let inv_ln2 = F::of_f64(1.0 / std::f64::consts::LN_2);
    // r * log2(max(r, eps)): exact 0 at r = 0, finite slope at the floor.
    let log2r = r.clamp_min(F::of_f64(PROB_EPS)).ln().scale(inv_ln2);
    (r * log2r)
        .sum()
        .scale(-F::one() / F::from_usize(m * n * h * w).unwrap())
}

/// Hinge on soft cluster areas: clusters smaller than HW/(4M) are penalized.
pub fn loss_area<F: Scalar>(r: Tensor<'_, F>) -> Tensor<'_, F> {
    let rs = r.shape();
    let (n, m, h, w) = (rs[0], rs[1], rs[2], rs[3]);
    let threshold = F::of_f64((h * w) as f64 / (4 * m) as f64);
    let areas = r.sum_axes(&[2, 3]); // (N,M,1,1)
    (-areas)
        .add_scalar(threshold)
        .relu()
        .sum()
        .scale(F::one() / F::from_usize(n * m).unwrap())
}

/// Flatten a patch embedding tensor (N,D,G,G) into rows (N*G*G, D).
pub fn flatten_patches<F: Scalar>(s: Tensor<'_, F>) -> Tensor<'_, F> {
    let ss = s.shape();
    let (n, d, gh, gw) = (ss[0], ss[1], ss[2], ss[3]);
    s.permute(&[0, 2, 3, 1]).reshape(&[n * gh * gw, d])
}

/// Row softmax with the usual detached-max shift; the shift is constant per
/// row so values and gradients are those of the plain softmax.
fn softmax_rows<F: Scalar>(logits: Tensor<'_, F>) -> Tensor<'_, F> {
    let v = logits.value();
    let rows = v.shape()[0];
    let mut maxes = ArrayD::<F>::zeros(IxDyn(&[rows, 1]));
    for (i, row) in v.outer_iter().enumerate() {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        maxes[[i, 0]] = m;
    }
    let shift = logits.graph().constant(maxes);
    let e = (logits - shift).exp();
    let denom = e.sum_axes(&[1]);
    e / denom
}

/// Probability of each key patch given one query embedding.
///
/// `s`: (P,D) unit rows over all first-view patches; `s_hat`: (D,) unit
/// query. Returns (P,) summing to 1.
pub fn patch_prob<'g, F: Scalar>(
    s: Tensor<'g, F>,
    s_hat: Tensor<'g, F>,
    tau: Temperature,
) -> Tensor<'g, F> {
    let p = s.shape()[0];
    let d = s_hat.shape()[0];
    let logits = s
        .matmul(s_hat.reshape(&[d, 1]))
        .scale(F::of_f64(1.0 / tau.get()))
        .reshape(&[1, p]);
    softmax_rows(logits).reshape(&[p])
}

/// Shared core of the patch and mixup discrimination objectives.
///
/// Rows of `keys` define the softmax support; row q of `queries` asks which
/// key it matches, with ground truth q. J_p sums the aligned negative log
/// probability and the log one-minus terms from every other query row.
fn paired_discrimination_loss<'g, F: Scalar>(
    keys: Tensor<'g, F>,
    queries: Tensor<'g, F>,
    tau: Temperature,
) -> Tensor<'g, F> {
    let p = keys.shape()[0];
    assert_eq!(
        keys.shape(),
        queries.shape(),
        "keys and queries must align per patch"
    );
    // q[q_row, k] = P(key k | query q_row)
    let logits = queries
        .matmul(keys.permute(&[1, 0]))
        .scale(F::of_f64(1.0 / tau.get()));
    let q = softmax_rows(logits);
    let g = keys.graph();
    let eye = g.constant(Array2::<F>::eye(p).into_dyn());
    let ones = g.constant(ArrayD::from_elem(IxDyn(&[p, p]), F::one()));
    let eps = F::of_f64(PROB_EPS);

    let aligned = (q.clamp_min(eps).ln() * eye).sum();
    let rejected = ((ones - q).clamp_min(eps).ln() * (ones - eye)).sum();
    -aligned - rejected
}

/// Patch discrimination objective over aligned augmented views.
///
/// `s`: (P,D) first-view patch embeddings (softmax support); `s_hat`: (P,D)
/// second-view embeddings, row i matching patch i.
pub fn loss_pd<'g, F: Scalar>(
    s: Tensor<'g, F>,
    s_hat: Tensor<'g, F>,
    tau: Temperature,
) -> Tensor<'g, F> {
    paired_discrimination_loss(s, s_hat, tau)
}

/// Interpolated patch targets on the unit sphere: normalize(lambda*a + (1-lambda)*b).
///
/// `lambdas[i]` applies to row i. An antipodal pair at lambda = 0.5 yields a
/// zero row under the eps convention; callers drop such rows.
pub fn mixup_target<'g, F: Scalar>(
    s_a: Tensor<'g, F>,
    s_b: Tensor<'g, F>,
    lambdas: &[F],
    eps: F,
) -> Tensor<'g, F> {
    let k = s_a.shape()[0];
    assert_eq!(k, lambdas.len(), "one lambda per mixed row");
    let g = s_a.graph();
    let lam = g.constant(
        ArrayD::from_shape_vec(IxDyn(&[k, 1]), lambdas.to_vec()).expect("lambda column"),
    );
    let one_minus = g.constant(ArrayD::from_shape_vec(
        IxDyn(&[k, 1]),
        lambdas.iter().map(|l| F::one() - *l).collect(),
    )
    .expect("lambda column"));
    let z = s_a * lam + s_b * one_minus;
    diff::l2_normalize(z, 1, eps)
}

/// Mixup discrimination objective: mixed-image embeddings must match their
/// interpolated targets. Same structure as [`loss_pd`] with `z` as keys.
pub fn loss_mixup<'g, F: Scalar>(
    z: Tensor<'g, F>,
    s_tilde: Tensor<'g, F>,
    tau: Temperature,
) -> Tensor<'g, F> {
    paired_discrimination_loss(z, s_tilde, tau)
}

/// Mean binary cross entropy (natural log) with clamped predictions.
///
/// `y_hat`: predicted probabilities; `y`: targets in {0,1}, same shape.
pub fn loss_bce<'g, F: Scalar>(y_hat: Tensor<'g, F>, y: Tensor<'g, F>) -> Tensor<'g, F> {
    let eps = F::of_f64(PROB_EPS);
    let p = y_hat.clamp(eps, F::one() - eps);
    let g = y_hat.graph();
    let ones = g.constant(ArrayD::from_elem(IxDyn(&y.shape()), F::one()));
    let term = y * p.ln() + (ones - y) * (ones - p).ln();
    -term.mean()
}

/// Discriminator objective: real references toward 1, pseudo maps toward 0.
pub fn loss_discriminator<'g, F: Scalar>(
    d_real: Tensor<'g, F>,
    d_fake: Tensor<'g, F>,
) -> Tensor<'g, F> {
    let g = d_real.graph();
    let ones = g.constant(ArrayD::from_elem(IxDyn(&d_real.shape()), F::one()));
    let zeros = g.constant(ArrayD::from_elem(IxDyn(&d_fake.shape()), F::zero()));
    loss_bce(d_real, ones) + loss_bce(d_fake, zeros)
}

/// Generator-side adversarial objective: pseudo maps toward 1.
pub fn loss_adversarial<F: Scalar>(d_fake: Tensor<'_, F>) -> Tensor<'_, F> {
    let g = d_fake.graph();
    let ones = g.constant(ArrayD::from_elem(IxDyn(&d_fake.shape()), F::one()));
    loss_bce(d_fake, ones)
}

/// One minus soft Dice overlap with smoothing 1; lower is better, range [0,1).
pub fn loss_dice<'g, F: Scalar>(p: Tensor<'g, F>, g_mask: Tensor<'g, F>) -> Tensor<'g, F> {
    assert_eq!(p.shape(), g_mask.shape(), "prediction/mask shape mismatch");
    let smooth = F::one();
    let inter = (p * g_mask).sum();
    let num = inter.scale(F::of_f64(2.0)).add_scalar(smooth);
    let den = (p.sum() + g_mask.sum()).add_scalar(smooth);
    (-(num / den)).add_scalar(F::one())
}

/// Weighted stage total. Errors if a component the stage requires is absent.
pub fn stage_total<'g, F: Scalar>(
    losses: &StageLosses<'g, F>,
    weights: &LossWeights,
    stage: Stage,
) -> Result<Tensor<'g, F>> {
    let need = |part: Option<Tensor<'g, F>>, name: &str| {
        part.ok_or_else(|| {
            Error::invalid("stage total", format!("stage '{stage}' needs loss component '{name}'"))
        })
    };
    let pretrain_part = |l: &StageLosses<'g, F>| -> Result<Tensor<'g, F>> {
        Ok(need(l.pd, "pd")?.scale(F::of_f64(weights.w_pd))
            + need(l.mixup, "mixup")?.scale(F::of_f64(weights.w_mixup)))
    };
    let ld_part = |l: &StageLosses<'g, F>| -> Result<Tensor<'g, F>> {
        Ok(pretrain_part(l)?
            + need(l.ld, "ld")?.scale(F::of_f64(weights.w_ld))
            + need(l.entropy, "entropy")?.scale(F::of_f64(weights.w_entropy))
            + need(l.area, "area")?.scale(F::of_f64(weights.w_area)))
    };
    match stage {
        Stage::Pretrain => pretrain_part(losses),
        Stage::Ld => ld_part(losses),
        Stage::Prior => {
            Ok(ld_part(losses)? + need(losses.adv, "adv")?.scale(F::of_f64(weights.w_adv)))
        }
        Stage::Finetune => Err(Error::invalid(
            "stage total",
            "finetune optimizes the Dice loss directly, not a weighted total",
        )),
    }
}
