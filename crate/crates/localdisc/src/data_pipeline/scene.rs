//! Synthetic anatomical scenes: a textured background, one bright disk,
//! dark curvilinear strokes fanning out of it, and a small dark blob, in
//! the spirit of fundus geometry but entirely procedural. Ground-truth
//! masks partition every image and are used for evaluation only.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structure channel order of every synthetic mask tensor.
pub const STRUCTURE_NAMES: [&str; 4] = ["background", "disk", "strokes", "blob"];

const LABEL_BACKGROUND: u8 = 0;
const LABEL_DISK: u8 = 1;
const LABEL_STROKES: u8 = 2;
const LABEL_BLOB: u8 = 3;

/// Mean RGB of each structure; luminances are well separated so the
/// structures are discriminable by local appearance.
const COLOR_BACKGROUND: [f32; 3] = [0.62, 0.30, 0.15];
const COLOR_DISK: [f32; 3] = [0.93, 0.82, 0.55];
const COLOR_STROKES: [f32; 3] = [0.42, 0.12, 0.10];
const COLOR_BLOB: [f32; 3] = [0.20, 0.07, 0.09];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Base seed; image i uses rng_seed XOR i.
    pub rng_seed: u64,
    /// Mean semi-axes of the bright disk, in pixels at size 64; larger
    /// images scale them proportionally.
    pub disk_axes: (f64, f64),
    /// Mean semi-axes of the small blob.
    pub blob_axes: (f64, f64),
    /// Relative jitter applied to all semi-axes.
    pub axis_jitter: f64,
    /// Inclusive range of stroke counts.
    pub stroke_count: (usize, usize),
    /// Stroke thickness in pixels at size 64.
    pub stroke_width: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            image_size: 64,
            rng_seed: 0,
            disk_axes: (9.0, 7.0),
            blob_axes: (5.5, 4.5),
            axis_jitter: 0.15,
            stroke_count: (3, 5),
            stroke_width: 1.8,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        let s = self.image_size as f64;
        for (name, (a, b)) in [("disk_axes", self.disk_axes), ("blob_axes", self.blob_axes)] {
            if !(a > 0.0 && b > 0.0 && a < s / 2.0 && b < s / 2.0) {
                return Err(Error::Config(format!(
                    "{name} must be positive and fit the image, got ({a}, {b})"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.axis_jitter) {
            return Err(Error::Config(format!(
                "axis_jitter must be in [0,1), got {}",
                self.axis_jitter
            )));
        }
        if self.stroke_count.0 < 1 || self.stroke_count.0 > self.stroke_count.1 {
            return Err(Error::Config(format!(
                "stroke_count must satisfy 1 <= lo <= hi, got {:?}",
                self.stroke_count
            )));
        }
        if !(self.stroke_width > 0.0) {
            return Err(Error::Config("stroke_width must be positive".into()));
        }
        Ok(())
    }

    /// Pixel scale relative to the reference 64 px frame.
    fn px(&self) -> f64 {
        self.image_size as f64 / 64.0
    }
}

/// Approximate structure centers of one scene, (row, col) in pixels. These
/// anchor the simulated reference masks; they are priors, not ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub disk_center: (f64, f64),
    pub blob_center: (f64, f64),
}

/// In-memory synthetic dataset: images, partitioning ground-truth masks,
/// and the geometric layout each scene was built from.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<Array3<f32>>,
    /// Per image: (4,S,S) binary channels ordered as [`STRUCTURE_NAMES`].
    pub masks: Vec<Array3<f32>>,
    pub layouts: Vec<SceneLayout>,
    pub structure_names: Vec<String>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Generate `n_images` scenes. Image i depends only on (spec, i), so the
/// dataset is reproducible and extendable without shifting earlier scenes.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSceneSpec,
    n_images: usize,
) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(n_images);
    let mut masks = Vec::with_capacity(n_images);
    let mut layouts = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed ^ i as u64);
        let scene = generate_scene(spec, &mut rng)?;
        images.push(scene.0);
        masks.push(scene.1);
        layouts.push(scene.2);
    }
    Ok(SyntheticDataset {
        images,
        masks,
        layouts,
        structure_names: STRUCTURE_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Minimum pixel share each structure must reach.
const MIN_STRUCTURE_FRACTION: f64 = 0.01;
const MAX_SCENE_ATTEMPTS: usize = 256;

fn generate_scene(
    spec: &SyntheticSceneSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f32>, Array3<f32>, SceneLayout)> {
    let s = spec.image_size;
    let min_pixels = ((s * s) as f64 * MIN_STRUCTURE_FRACTION).ceil() as usize;
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let (labels, layout) = sample_geometry(spec, rng);
        let mut counts = [0usize; 4];
        for &l in labels.iter() {
            counts[l as usize] += 1;
        }
        if counts.iter().all(|&c| c >= min_pixels) {
            let image = paint_scene(spec, &labels, rng);
            let mut mask = Array3::zeros((4, s, s));
            for y in 0..s {
                for x in 0..s {
                    mask[[labels[[y, x]] as usize, y, x]] = 1.0;
                }
            }
            return Ok((image, mask, layout));
        }
    }
    Err(Error::Config(format!(
        "scene geometry cannot give every structure {MIN_STRUCTURE_FRACTION:.0}% of pixels; \
         enlarge the structures or the image"
    )))
}

fn sample_geometry(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> (Array2<u8>, SceneLayout) {
    let s = spec.image_size as f64;
    let px = spec.px();
    let mut labels = Array2::from_elem(
        (spec.image_size, spec.image_size),
        LABEL_BACKGROUND,
    );

    // The disk sits in the left or right third, like an optic disk.
    let side = if rng.gen_bool(0.5) { 0.26 } else { 0.74 };
    let disk_c = (
        s * rng.gen_range(0.38..0.62),
        s * (side + rng.gen_range(-0.06..0.06)),
    );
    let jitter = |rng: &mut ChaCha8Rng, v: f64| {
        if spec.axis_jitter == 0.0 {
            v
        } else {
            v * (1.0 + rng.gen_range(-spec.axis_jitter..spec.axis_jitter))
        }
    };
    let da = jitter(rng, spec.disk_axes.0 * px);
    let db = jitter(rng, spec.disk_axes.1 * px);
    let dth = rng.gen_range(-0.6..0.6);
    paint_ellipse(&mut labels, disk_c, (da, db), dth, LABEL_DISK);

    // Strokes fan out of the disk like vessels.
    let n_strokes = rng.gen_range(spec.stroke_count.0..=spec.stroke_count.1);
    for k in 0..n_strokes {
        let base = 2.0 * std::f64::consts::PI * (k as f64 / n_strokes as f64);
        let angle = base + rng.gen_range(-0.5..0.5);
        let len = s * rng.gen_range(0.40..0.72);
        let end = (
            (disk_c.0 + len * angle.sin()).clamp(2.0, s - 3.0),
            (disk_c.1 + len * angle.cos()).clamp(2.0, s - 3.0),
        );
        let mid = (
            (disk_c.0 + end.0) / 2.0 + s * rng.gen_range(-0.12..0.12),
            (disk_c.1 + end.1) / 2.0 + s * rng.gen_range(-0.12..0.12),
        );
        paint_stroke(
            &mut labels,
            disk_c,
            mid,
            end,
            spec.stroke_width * px,
            LABEL_STROKES,
        );
    }

    // The blob lies toward the opposite side at mid-height, like a fovea,
    // painted last so crossing strokes cannot erase it.
    let toward = if side < 0.5 { 1.0 } else { -1.0 };
    let blob_c = (
        (disk_c.0 + s * rng.gen_range(-0.10..0.10)).clamp(s * 0.18, s * 0.82),
        (disk_c.1 + toward * s * rng.gen_range(0.28..0.42)).clamp(s * 0.18, s * 0.82),
    );
    let ba = jitter(rng, spec.blob_axes.0 * px);
    let bb = jitter(rng, spec.blob_axes.1 * px);
    let bth = rng.gen_range(-0.6..0.6);
    paint_ellipse(&mut labels, blob_c, (ba, bb), bth, LABEL_BLOB);

    (
        labels,
        SceneLayout {
            disk_center: disk_c,
            blob_center: blob_c,
        },
    )
}

fn paint_scene(
    spec: &SyntheticSceneSpec,
    labels: &Array2<u8>,
    rng: &mut ChaCha8Rng,
) -> Array3<f32> {
    let s = spec.image_size;
    let field = value_noise(rng, s, 8);
    let mut image = Array3::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let color = match labels[[y, x]] {
                LABEL_DISK => COLOR_DISK,
                LABEL_STROKES => COLOR_STROKES,
                LABEL_BLOB => COLOR_BLOB,
                _ => COLOR_BACKGROUND,
            };
            // Smooth shading plus fine grain, scaled with the base color so
            // dark structures stay dark.
            let shade = 1.0 + 0.12 * field[[y, x]];
            for c in 0..3 {
                let grain = rng.gen_range(-0.015..0.015f32);
                image[[c, y, x]] = (color[c] * shade + grain).clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Smooth noise in [-1,1]: bilinear interpolation of a coarse random grid.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Array2<f32> {
    let grid = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.gen_range(-1.0..1.0f32));
    let mut out = Array2::zeros((size, size));
    let scale = cells as f32 / size as f32;
    for y in 0..size {
        let fy = y as f32 * scale;
        let gy = (fy as usize).min(cells - 1);
        let wy = fy - gy as f32;
        for x in 0..size {
            let fx = x as f32 * scale;
            let gx = (fx as usize).min(cells - 1);
            let wx = fx - gx as f32;
            let top = grid[[gy, gx]] * (1.0 - wx) + grid[[gy, gx + 1]] * wx;
            let bot = grid[[gy + 1, gx]] * (1.0 - wx) + grid[[gy + 1, gx + 1]] * wx;
            out[[y, x]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

fn paint_ellipse(
    labels: &mut Array2<u8>,
    center: (f64, f64),
    semi_axes: (f64, f64),
    theta: f64,
    label: u8,
) {
    let (h, w) = labels.dim();
    let (cy, cx) = center;
    let (a, b) = semi_axes;
    let (sin, cos) = theta.sin_cos();
    // Scan only the bounding box of the rotated ellipse.
    let r = a.max(b) + 1.0;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    for y in y0..=y1.min(h - 1) {
        for x in x0..=x1.min(w - 1) {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            if u * u + v * v <= 1.0 {
                labels[[y, x]] = label;
            }
        }
    }
}

/// Quadratic Bezier swept with a round brush.
fn paint_stroke(
    labels: &mut Array2<u8>,
    p0: (f64, f64),
    p1: (f64, f64),
    p2: (f64, f64),
    width: f64,
    label: u8,
) {
    let (h, w) = labels.dim();
    let chord = ((p2.0 - p0.0).hypot(p2.1 - p0.1)).max(1.0);
    let steps = (chord * 3.0).ceil() as usize;
    let radius = width / 2.0;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let omt = 1.0 - t;
        let y = omt * omt * p0.0 + 2.0 * omt * t * p1.0 + t * t * p2.0;
        let x = omt * omt * p0.1 + 2.0 * omt * t * p1.1 + t * t * p2.1;
        let yl = ((y - radius).floor().max(0.0)) as usize;
        let yh = (((y + radius).ceil()) as usize).min(h.saturating_sub(1));
        let xl = ((x - radius).floor().max(0.0)) as usize;
        let xh = (((x + radius).ceil()) as usize).min(w.saturating_sub(1));
        for py in yl..=yh.min(h - 1) {
            for px in xl..=xh.min(w - 1) {
                let d = (py as f64 - y).hypot(px as f64 - x);
                if d <= radius {
                    labels[[py, px]] = label;
                }
            }
        }
    }
}

/// Shape priors of a simulated reference ellipse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsePriors {
    /// Mean semi-axes in pixels.
    pub axes: (f64, f64),
    /// Relative jitter on each semi-axis.
    pub axis_jitter: f64,
    /// Orientation drawn from [-max_rotation, max_rotation] radians.
    pub max_rotation: f64,
}

/// Rasterize a filled reference ellipse near an anchor center, with axes
/// and orientation jittered per the priors.
pub fn generate_ellipse_reference(
    center: (f64, f64),
    priors: &EllipsePriors,
    image_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let s = image_size as f64;
    if !(center.0 >= 0.0 && center.0 < s && center.1 >= 0.0 && center.1 < s) {
        return Err(Error::invalid(
            "reference ellipse",
            format!("center {center:?} outside a {image_size} px image"),
        ));
    }
    if !(priors.axes.0 > 0.0 && priors.axes.1 > 0.0) {
        return Err(Error::invalid("reference ellipse", "axes must be positive"));
    }
    if !(0.0..1.0).contains(&priors.axis_jitter) {
        return Err(Error::invalid(
            "reference ellipse",
            format!("axis_jitter must be in [0,1), got {}", priors.axis_jitter),
        ));
    }
    let mut draw = |half: f64| {
        if half == 0.0 {
            0.0
        } else {
            rng.gen_range(-half..half)
        }
    };
    let a = priors.axes.0 * (1.0 + draw(priors.axis_jitter));
    let b = priors.axes.1 * (1.0 + draw(priors.axis_jitter));
    let theta = draw(priors.max_rotation);
    let mut labels = Array2::from_elem((image_size, image_size), 0u8);
    paint_ellipse(&mut labels, center, (a, b), theta, 1);
    Ok(labels.mapv(|l| l as f32))
}
