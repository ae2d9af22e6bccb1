//! PNG import/export: dataset directories, single images, and reference
//! mask trees. Layout: `images/*.png` for scenes, `masks/<structure>/*.png`
//! for filename-matched ground truth, 8-bit, {0,255} for masks.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use super::augment::resize_nearest;
use super::scene::{SceneLayout, SyntheticDataset};
use super::{ReferenceMaskSet, SourceKind};
use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a (3,H,W) or (1,H,W) image in [0,1] as an 8-bit PNG.
pub fn save_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    let err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    match c {
        3 => {
            let mut img = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            to_u8(image[[0, y, x]]),
                            to_u8(image[[1, y, x]]),
                            to_u8(image[[2, y, x]]),
                        ]),
                    );
                }
            }
            img.save(path).map_err(err)
        }
        1 => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([to_u8(image[[0, y, x]])]));
                }
            }
            img.save(path).map_err(err)
        }
        other => Err(Error::invalid(
            "image tensor",
            format!("cannot save {other}-channel data as PNG"),
        )),
    }
}

/// Load a PNG as (3,H,W) in [0,1]; grayscale inputs are replicated to RGB.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn load_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f32 / 255.0;
    }
    Ok(out)
}

/// Sorted .png file names directly inside `dir`.
fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn scene_file_name(i: usize) -> String {
    format!("scene_{i:05}.png")
}

impl SyntheticDataset {
    /// Write the dataset under `dir`: `images/`, `masks/<structure>/`, and
    /// `layouts.json` with the anchor geometry.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for name in &self.structure_names {
            let d = dir.join("masks").join(name);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (i, image) in self.images.iter().enumerate() {
            save_image(&images_dir.join(scene_file_name(i)), image)?;
            for (k, name) in self.structure_names.iter().enumerate() {
                let channel = self.masks[i]
                    .index_axis(ndarray::Axis(0), k)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0));
                save_image(
                    &dir.join("masks").join(name).join(scene_file_name(i)),
                    &channel,
                )?;
            }
        }
        let layouts = serde_json::to_string_pretty(&self.layouts)
            .map_err(|e| Error::Serde(e.to_string()))?;
        let layout_path = dir.join("layouts.json");
        fs::write(&layout_path, layouts).map_err(|e| Error::io(&layout_path, e))?;
        let order = serde_json::to_string_pretty(&self.structure_names)
            .map_err(|e| Error::Serde(e.to_string()))?;
        let order_path = dir.join("structures.json");
        fs::write(&order_path, order).map_err(|e| Error::io(&order_path, e))
    }
}

/// Load a dataset written by [`SyntheticDataset::write`]. Masks are
/// binarized at 0.5; mask files must mirror the image file names.
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let images_dir = dir.join("images");
    let names = png_names(&images_dir)?;
    if names.is_empty() {
        return Err(Error::Dataset {
            path: images_dir,
            why: "no .png images found".into(),
        });
    }
    let order_path = dir.join("structures.json");
    let structure_names: Vec<String> = if order_path.is_file() {
        let text = fs::read_to_string(&order_path).map_err(|e| Error::io(&order_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?
    } else {
        // Fall back to the mask directory names in sorted order.
        let masks_dir = dir.join("masks");
        let mut dirs = Vec::new();
        for entry in fs::read_dir(&masks_dir).map_err(|e| Error::io(&masks_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&masks_dir, e))?;
            if entry.path().is_dir() {
                dirs.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        dirs.sort();
        dirs
    };
    if structure_names.is_empty() {
        return Err(Error::Dataset {
            path: dir.join("masks"),
            why: "no structure directories".into(),
        });
    }

    let mut images = Vec::with_capacity(names.len());
    let mut masks = Vec::with_capacity(names.len());
    for name in &names {
        let image = load_image(&images_dir.join(name))?;
        let (_, h, w) = image.dim();
        let mut mask = Array3::zeros((structure_names.len(), h, w));
        for (k, structure) in structure_names.iter().enumerate() {
            let path = dir.join("masks").join(structure).join(name);
            let gray = load_gray(&path)?;
            if gray.dim() != (h, w) {
                return Err(Error::Dataset {
                    path,
                    why: format!("mask is {:?}, image is {:?}", gray.dim(), (h, w)),
                });
            }
            for y in 0..h {
                for x in 0..w {
                    mask[[k, y, x]] = if gray[[y, x]] > 0.5 { 1.0 } else { 0.0 };
                }
            }
        }
        images.push(image);
        masks.push(mask);
    }

    let layout_path = dir.join("layouts.json");
    let layouts: Vec<SceneLayout> = if layout_path.is_file() {
        let text = fs::read_to_string(&layout_path).map_err(|e| Error::io(&layout_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?
    } else {
        Vec::new()
    };

    Ok(SyntheticDataset {
        images,
        masks,
        layouts,
        structure_names,
    })
}

/// Load unpaired reference masks from `dir/<structure>/*.png`, binarize at
/// 0.5, and resize to `target_size` with nearest-neighbor. Each structure
/// must contribute the same number of files; file k of every structure
/// forms sample k.
pub fn load_reference_masks(
    dir: &Path,
    structure_names: &[String],
    target_size: usize,
    source_kind: SourceKind,
) -> Result<ReferenceMaskSet> {
    if structure_names.is_empty() {
        return Err(Error::invalid("reference masks", "no structures requested"));
    }
    if target_size == 0 {
        return Err(Error::invalid("reference masks", "target_size must be positive"));
    }
    let mut warnings = Vec::new();
    let mut per_structure: Vec<Vec<Array2<f32>>> = Vec::with_capacity(structure_names.len());
    let mut counts: Vec<(String, usize)> = Vec::new();
    for structure in structure_names {
        let sdir: PathBuf = dir.join(structure);
        if !sdir.is_dir() {
            return Err(Error::Dataset {
                path: sdir,
                why: format!("missing directory for structure '{structure}'"),
            });
        }
        let names = png_names(&sdir)?;
        if names.is_empty() {
            return Err(Error::Dataset {
                path: sdir,
                why: format!("no masks for structure '{structure}'"),
            });
        }
        let mut loaded = Vec::with_capacity(names.len());
        let mut nonbinary = false;
        for name in &names {
            let gray = load_gray(&sdir.join(name))?;
            // 8-bit binary files land exactly on 0 or 255.
            if gray.iter().any(|&v| v > 0.002 && v < 0.998) {
                nonbinary = true;
            }
            let (h, w) = gray.dim();
            let as3 = gray.insert_axis(ndarray::Axis(0));
            let resized = if (h, w) == (target_size, target_size) {
                as3
            } else {
                resize_nearest(&as3, target_size, target_size)
            };
            loaded.push(
                resized
                    .index_axis_move(ndarray::Axis(0), 0)
                    .mapv(|v| if v > 0.5 { 1.0 } else { 0.0 }),
            );
        }
        if nonbinary {
            warnings.push(format!(
                "structure '{structure}': non-binary mask values thresholded at 0.5"
            ));
        }
        counts.push((structure.clone(), loaded.len()));
        per_structure.push(loaded);
    }
    let n = counts[0].1;
    if counts.iter().any(|(_, c)| *c != n) {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            why: format!("structures have unequal mask counts: {counts:?}"),
        });
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut sample = Array3::zeros((structure_names.len(), target_size, target_size));
        for (k, pool) in per_structure.iter().enumerate() {
            sample
                .index_axis_mut(ndarray::Axis(0), k)
                .assign(&pool[i]);
        }
        samples.push(sample);
    }
    let mut set = ReferenceMaskSet::new(structure_names.to_vec(), samples, source_kind)?;
    set.warnings = warnings;
    Ok(set)
}
