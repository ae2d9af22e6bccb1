//! Scoring utilities: Dice overlap, cluster-to-structure matching for
//! unsupervised outputs, center-distance for fuzzy structures, and report
//! rendering (JSON + plain-text table + overlay images).

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::core_math::ClusterProbMap;
use crate::error::{Error, Result};

/// Dice-Sørensen coefficient between two binary masks of equal shape:
/// `2|P∩G| / (|P|+|G|)`, defined as 1 when both masks are empty.
pub fn dsc(pred: &Array2<f32>, gt: &Array2<f32>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::invalid(
            "dsc masks",
            format!("shape mismatch: {:?} vs {:?}", pred.dim(), gt.dim()),
        ));
    }
    for (name, m) in [("pred", pred), ("gt", gt)] {
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("dsc masks", format!("{name} is not binary")));
        }
    }
    let inter: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p * g) as f64)
        .sum();
    let total = pred.sum() as f64 + gt.sum() as f64;
    if total == 0.0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter / total)
    }
}

/// Threshold a probability map into a {0,1} mask; entries `>= threshold`
/// become foreground.
pub fn binarize(prob: &Array2<f32>, threshold: f32) -> Array2<f32> {
    prob.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Per-pixel argmax over the cluster axis, returning one binary mask per
/// cluster channel with shape (N, M, H, W). Ties go to the lowest channel.
pub fn argmax_cluster_masks<F: Scalar>(r: &ClusterProbMap<F>) -> Array3<f32> {
    let (n, m, h, w) = r.dim();
    let v = r.values();
    // Packed as (M, N*H*W) rows of {0,1} for cheap per-channel access.
    let mut masks = Array3::<f32>::zeros((m, n, h * w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = v[[i, 0, y, x]];
                for c in 1..m {
                    let vv = v[[i, c, y, x]];
                    if vv > best_v {
                        best_v = vv;
                        best = c;
                    }
                }
                masks[[best, i, y * w + x]] = 1.0;
            }
        }
    }
    masks
}

/// The result of matching cluster channels to named structures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterMatch {
    /// structure name → assigned cluster channel (injective).
    pub assignment: BTreeMap<String, usize>,
    /// structure name → batch-aggregated Dice of the assigned channel.
    pub per_structure_dsc: BTreeMap<String, f64>,
    /// Mean of the per-structure Dice values.
    pub mean_dsc: f64,
}

/// Find the one-to-one assignment of cluster channels to structures that
/// maximizes total Dice, by exhaustive search (intended for M ≤ 8).
///
/// `structures` pairs each name with its ground-truth masks of shape
/// (N, H, W), aligned with the batch in `r`. Dice is aggregated over the
/// whole batch (all pixels pooled) before matching.
pub fn match_clusters_to_structures<F: Scalar>(
    r: &ClusterProbMap<F>,
    structures: &[(String, Array3<f32>)],
) -> Result<ClusterMatch> {
    let (n, m, h, w) = r.dim();
    let k = structures.len();
    if k == 0 {
        return Err(Error::invalid("structures", "no ground-truth structures given"));
    }
    if k > m {
        return Err(Error::invalid(
            "structures",
            format!("{k} structures but only {m} cluster channels"),
        ));
    }
    for (name, gt) in structures {
        if gt.dim() != (n, h, w) {
            return Err(Error::invalid(
                "structures",
                format!(
                    "'{name}' masks have shape {:?}, expected ({n}, {h}, {w})",
                    gt.dim()
                ),
            ));
        }
        if gt.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("structures", format!("'{name}' is not binary")));
        }
    }

    let masks = argmax_cluster_masks(r);
    // Batch-aggregated Dice table: structure k × channel m.
    let mut table = vec![vec![0.0f64; m]; k];
    for (ki, (_, gt)) in structures.iter().enumerate() {
        let gt_sum: f64 = gt.iter().map(|&v| v as f64).sum();
        for mi in 0..m {
            let ch = masks.index_axis(Axis(0), mi);
            let inter: f64 = ch
                .iter()
                .zip(gt.iter())
                .map(|(&p, &g)| (p * g) as f64)
                .sum();
            let total = ch.sum() as f64 + gt_sum;
            table[ki][mi] = if total == 0.0 { 1.0 } else { 2.0 * inter / total };
        }
    }

    // Exhaustive injective assignment maximizing total Dice.
    let mut best_total = f64::NEG_INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut current = vec![0usize; k];
    search(&table, 0, 0u32, 0.0, &mut current, &mut best_total, &mut best);

    let mut assignment = BTreeMap::new();
    let mut per = BTreeMap::new();
    for (ki, (name, _)) in structures.iter().enumerate() {
        assignment.insert(name.clone(), best[ki]);
        per.insert(name.clone(), table[ki][best[ki]]);
    }
    let mean = per.values().sum::<f64>() / k as f64;
    Ok(ClusterMatch {
        assignment,
        per_structure_dsc: per,
        mean_dsc: mean,
    })
}

fn search(
    table: &[Vec<f64>],
    k: usize,
    used: u32,
    acc: f64,
    current: &mut Vec<usize>,
    best_total: &mut f64,
    best: &mut Vec<usize>,
) {
    if k == table.len() {
        if acc > *best_total {
            *best_total = acc;
            *best = current.clone();
        }
        return;
    }
    for m in 0..table[k].len() {
        if used & (1 << m) != 0 {
            continue;
        }
        current[k] = m;
        search(table, k + 1, used | (1 << m), acc + table[k][m], current, best_total, best);
    }
}

/// Centroid of the foreground pixels of a binary mask, as (row, col).
/// Returns `None` for an empty mask.
pub fn mask_centroid(mask: &Array2<f32>) -> Option<(f64, f64)> {
    let mut count = 0.0f64;
    let mut ry = 0.0f64;
    let mut rx = 0.0f64;
    for ((y, x), &v) in mask.indexed_iter() {
        if v > 0.0 {
            count += 1.0;
            ry += y as f64;
            rx += x as f64;
        }
    }
    if count == 0.0 {
        None
    } else {
        Some((ry / count, rx / count))
    }
}

/// Euclidean distance in pixels between the predicted mask's centroid and a
/// known center. An empty prediction has no centroid and yields `None`; the
/// caller counts such misses separately.
pub fn fovea_center_distance(pred: &Array2<f32>, gt_center: (f64, f64)) -> Option<f64> {
    let (cy, cx) = mask_centroid(pred)?;
    let dy = cy - gt_center.0;
    let dx = cx - gt_center.1;
    Some((dy * dy + dx * dx).sqrt())
}

/// Per-structure scores for a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureScore {
    pub structure: String,
    /// Cluster channel matched to this structure, when scoring cluster maps.
    pub cluster: Option<usize>,
    pub dsc: f64,
    /// Mean centroid distance in pixels, when a center is applicable.
    pub center_distance: Option<f64>,
    /// Number of samples whose prediction was empty (excluded from the mean).
    pub missing_predictions: usize,
}

/// Evaluation summary: JSON-serializable and renderable as a table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub stage: String,
    pub threshold: f64,
    pub samples: usize,
    pub structures: Vec<StructureScore>,
    pub mean_dsc: f64,
}

impl SegmentationReport {
    pub fn new(stage: &str, threshold: f64, samples: usize, structures: Vec<StructureScore>) -> Result<Self> {
        for s in &structures {
            if !(0.0..=1.0).contains(&s.dsc) {
                return Err(Error::invalid(
                    "report",
                    format!("dsc {} for '{}' outside [0,1]", s.dsc, s.structure),
                ));
            }
        }
        let mean_dsc = if structures.is_empty() {
            0.0
        } else {
            structures.iter().map(|s| s.dsc).sum::<f64>() / structures.len() as f64
        };
        Ok(Self {
            stage: stage.to_string(),
            threshold,
            samples,
            structures,
            mean_dsc,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Fixed-width table for terminal output.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "stage: {}   samples: {}   threshold: {:.2}\n",
            self.stage, self.samples, self.threshold
        ));
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>14} {:>8}\n",
            "structure", "cluster", "dsc", "center_dist", "missing"
        ));
        for s in &self.structures {
            let cluster = s.cluster.map_or("-".to_string(), |c| c.to_string());
            let dist = s
                .center_distance
                .map_or("-".to_string(), |d| format!("{d:.2}"));
            out.push_str(&format!(
                "{:<16} {:>8} {:>8.4} {:>14} {:>8}\n",
                s.structure, cluster, s.dsc, dist, s.missing_predictions
            ));
        }
        out.push_str(&format!("mean dsc: {:.4}\n", self.mean_dsc));
        out
    }
}

/// Alpha-blend a binary mask onto an RGB image for visual inspection.
/// Foreground pixels move toward `color` by `alpha`; background is untouched.
pub fn overlay_mask(
    image: &Array3<f32>,
    mask: &Array2<f32>,
    color: [f32; 3],
    alpha: f32,
) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::invalid("overlay image", "expected 3 channels"));
    }
    if mask.dim() != (h, w) {
        return Err(Error::invalid(
            "overlay mask",
            format!("mask {:?} does not match image ({h}, {w})", mask.dim()),
        ));
    }
    let a = alpha.clamp(0.0, 1.0);
    let mut out = image.clone();
    for ((y, x), &m) in mask.indexed_iter() {
        if m > 0.0 {
            for ch in 0..3 {
                let v = out[[ch, y, x]];
                out[[ch, y, x]] = (v * (1.0 - a) + color[ch] * a).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}
