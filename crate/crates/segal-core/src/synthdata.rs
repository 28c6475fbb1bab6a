//! Procedural multi-class segmentation scenes: colored rectangles and
//! ellipses over a background, with per-pixel color noise.
//!
//! Scenes are a pure function of `(seed, params)`. Two foreground classes
//! get deliberately close colors so that, under noise, the model sees a
//! genuinely confusable pair.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, SceneParams};
use crate::error::{CoreError, Result};
use crate::seeding;

/// Label value marking pixels without a usable label.
pub const IGNORE_LABEL: u8 = 255;

/// An RGB image with values in `[0, 1]`, row-major `[y][x][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl SceneImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        SceneImage {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.width + x) * 3 + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + ch] = v;
    }
}

/// Per-pixel class labels, row-major, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

impl GroundTruthMap {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}

/// One image of a materialized dataset.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub id: String,
    pub image: SceneImage,
    pub gt: GroundTruthMap,
}

/// An in-memory dataset with disjoint train and validation splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
}

/// Which split an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Manifest entry for one image; `seed` alone reproduces its content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

/// Everything needed to regenerate a dataset bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    /// Retry counter folded into per-image seeds when class coverage failed.
    pub salt: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub params: SceneParams,
    pub images: Vec<ImageEntry>,
}

/// Class colors: gray background, evenly spaced hues, and the last two
/// foreground classes pushed close together in RGB.
pub fn class_palette(num_classes: usize) -> Vec<[f64; 3]> {
    let mut palette = Vec::with_capacity(num_classes);
    palette.push([0.18, 0.18, 0.18]);
    let fg = num_classes - 1;
    for i in 0..fg {
        let hue = i as f64 / fg as f64;
        palette.push(hsv_to_rgb(hue, 0.65, 0.85));
    }
    if fg >= 2 {
        // Confusable pair: last class sits a small offset from its neighbor.
        let base = palette[num_classes - 2];
        palette[num_classes - 1] = [
            (base[0] + 0.07).clamp(0.0, 1.0),
            (base[1] + 0.07).clamp(0.0, 1.0),
            (base[2] - 0.05).clamp(0.0, 1.0),
        ];
    }
    palette
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let sector = h6 as usize % 6;
    let f = h6 - libm::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    class: u8,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Shape {
    #[inline]
    fn contains(&self, y: f64, x: f64) -> bool {
        match self.kind {
            ShapeKind::Rect => {
                libm::fabs(y - self.cy) <= self.ry && libm::fabs(x - self.cx) <= self.rx
            }
            ShapeKind::Ellipse => {
                let dy = (y - self.cy) / self.ry;
                let dx = (x - self.cx) / self.rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Generate one scene and its labels as a pure function of `(seed, params)`.
///
/// Shapes are drawn back-to-front in a seeded shuffle order, so later
/// shapes occlude earlier ones; the image is the class color of each
/// pixel's label plus clipped Gaussian noise.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<(SceneImage, GroundTruthMap)> {
    params.validate()?;
    let (h, w, c) = (params.height, params.width, params.num_classes);
    let mut rng = seeding::stream_from(seed);

    let min_side = h.min(w) as f64;
    let mut shapes: Vec<Shape> = Vec::new();
    for class in 1..c {
        for _ in 0..params.shapes_per_class {
            let kind = if rng.random::<bool>() {
                ShapeKind::Rect
            } else {
                ShapeKind::Ellipse
            };
            shapes.push(Shape {
                kind,
                class: class as u8,
                cy: rng.random_range(0.15..0.85) * h as f64,
                cx: rng.random_range(0.15..0.85) * w as f64,
                ry: rng.random_range(0.08..0.22) * min_side,
                rx: rng.random_range(0.08..0.22) * min_side,
            });
        }
    }
    shapes.shuffle(&mut rng);

    let mut labels = vec![0u8; h * w];
    for shape in &shapes {
        let y0 = libm::floor(shape.cy - shape.ry).max(0.0) as usize;
        let y1 = ((libm::ceil(shape.cy + shape.ry) as usize) + 1).min(h);
        let x0 = libm::floor(shape.cx - shape.rx).max(0.0) as usize;
        let x1 = ((libm::ceil(shape.cx + shape.rx) as usize) + 1).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * w + x] = shape.class;
                }
            }
        }
    }

    let palette = class_palette(c);
    let mut image = SceneImage::zeros(h, w);
    if params.color_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.color_noise_sigma)
            .map_err(|_| CoreError::config("invalid color_noise_sigma"))?;
        for (px, label) in labels.iter().enumerate() {
            let color = palette[*label as usize];
            for ch in 0..3 {
                let v = color[ch] + noise.sample(&mut rng);
                image.pixels[px * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
    } else {
        for (px, label) in labels.iter().enumerate() {
            let color = palette[*label as usize];
            image.pixels[px * 3..px * 3 + 3].copy_from_slice(&color);
        }
    }

    let gt = GroundTruthMap {
        height: h,
        width: w,
        num_classes: c,
        labels,
    };
    Ok((image, gt))
}

/// Pixel counts per class over a set of label maps.
pub fn class_histogram(maps: &[&GroundTruthMap], num_classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; num_classes];
    for map in maps {
        for &label in &map.labels {
            if (label as usize) < num_classes {
                hist[label as usize] += 1;
            }
        }
    }
    hist
}

const MIN_CLASS_FREQUENCY: f64 = 0.01;
const MAX_COVERAGE_RETRIES: u64 = 16;

/// Build a manifest whose dataset satisfies the >= 1% per-class pixel
/// frequency requirement, retrying with a salted seed when it does not.
pub fn build_manifest(master_seed: u64, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    let params = cfg.scene_params();
    params.validate()?;
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(CoreError::config("n_train and n_val must be >= 1"));
    }

    for salt in 0..MAX_COVERAGE_RETRIES {
        let effective = seeding::sub_seed(master_seed, "dataset", salt);
        let manifest = manifest_with_seeds(master_seed, salt, effective, cfg, &params);
        let dataset = generate_from_manifest(&manifest)?;
        let maps: Vec<&GroundTruthMap> = dataset
            .train
            .iter()
            .chain(dataset.val.iter())
            .map(|r| &r.gt)
            .collect();
        let hist = class_histogram(&maps, params.num_classes);
        let total: u64 = hist.iter().sum();
        let ok = hist
            .iter()
            .all(|&n| (n as f64) >= MIN_CLASS_FREQUENCY * total as f64);
        if ok {
            return Ok(manifest);
        }
    }
    Err(CoreError::config(
        "could not reach 1% per-class pixel coverage; raise shapes_per_class",
    ))
}

fn manifest_with_seeds(
    master_seed: u64,
    salt: u64,
    effective_seed: u64,
    cfg: &DatasetConfig,
    params: &SceneParams,
) -> DatasetManifest {
    let mut images = Vec::with_capacity(cfg.n_train + cfg.n_val);
    for i in 0..cfg.n_train {
        images.push(ImageEntry {
            id: format!("train_{i:04}"),
            split: Split::Train,
            seed: seeding::image_seed(effective_seed, i as u64),
        });
    }
    for i in 0..cfg.n_val {
        images.push(ImageEntry {
            id: format!("val_{i:04}"),
            split: Split::Val,
            seed: seeding::image_seed(effective_seed, (cfg.n_train + i) as u64),
        });
    }
    DatasetManifest {
        master_seed,
        salt,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        params: params.clone(),
        images,
    }
}

/// Materialize every image listed in a manifest. Bit-identical for equal
/// manifests regardless of generation order.
pub fn generate_from_manifest(manifest: &DatasetManifest) -> Result<Dataset> {
    let mut train = Vec::with_capacity(manifest.n_train);
    let mut val = Vec::with_capacity(manifest.n_val);
    for entry in &manifest.images {
        let (image, gt) = generate_scene(entry.seed, &manifest.params)?;
        let record = SceneRecord {
            id: entry.id.clone(),
            image,
            gt,
        };
        match entry.split {
            Split::Train => train.push(record),
            Split::Val => val.push(record),
        }
    }
    Ok(Dataset {
        num_classes: manifest.params.num_classes,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SceneParams {
        SceneParams {
            height: 64,
            width: 64,
            num_classes: 6,
            shapes_per_class: 2,
            color_noise_sigma: 0.05,
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let (img_a, gt_a) = generate_scene(7, &params()).unwrap();
        let (img_b, gt_b) = generate_scene(7, &params()).unwrap();
        assert_eq!(img_a, img_b);
        assert_eq!(gt_a, gt_b);
    }

    #[test]
    fn different_seeds_differ() {
        let (img_a, _) = generate_scene(7, &params()).unwrap();
        let (img_b, _) = generate_scene(8, &params()).unwrap();
        assert_ne!(img_a, img_b);
    }

    #[test]
    fn zero_density_is_pure_background() {
        let mut p = params();
        p.shapes_per_class = 0;
        let (_, gt) = generate_scene(7, &p).unwrap();
        assert!(gt.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let (img, _) = generate_scene(123, &params()).unwrap();
        assert!(img.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_tiny_dimensions() {
        let mut p = params();
        p.height = 16;
        assert!(generate_scene(1, &p).is_err());
    }

    #[test]
    fn rejects_class_counts_out_of_range() {
        let mut p = params();
        p.num_classes = 1;
        assert!(generate_scene(1, &p).is_err());
        p.num_classes = 40;
        assert!(generate_scene(1, &p).is_err());
    }

    #[test]
    fn dataset_meets_class_coverage() {
        let cfg = DatasetConfig {
            dir: "unused".into(),
            n_train: 120,
            n_val: 30,
            height: 64,
            width: 64,
            num_classes: 6,
            shapes_per_class: 2,
            color_noise_sigma: 0.05,
        };
        let manifest = build_manifest(7, &cfg).unwrap();
        let dataset = generate_from_manifest(&manifest).unwrap();
        assert_eq!(dataset.train.len(), 120);
        assert_eq!(dataset.val.len(), 30);
        let maps: Vec<&GroundTruthMap> = dataset
            .train
            .iter()
            .chain(dataset.val.iter())
            .map(|r| &r.gt)
            .collect();
        let hist = class_histogram(&maps, 6);
        let total: u64 = hist.iter().sum();
        for (class, &count) in hist.iter().enumerate() {
            assert!(
                count as f64 >= 0.01 * total as f64,
                "class {class} below 1%: {count}/{total}"
            );
        }
    }

    #[test]
    fn manifest_regeneration_is_bit_identical() {
        let cfg = DatasetConfig {
            dir: "unused".into(),
            n_train: 4,
            n_val: 2,
            height: 32,
            width: 32,
            num_classes: 4,
            shapes_per_class: 2,
            color_noise_sigma: 0.05,
        };
        let manifest = build_manifest(3, &cfg).unwrap();
        let a = generate_from_manifest(&manifest).unwrap();
        let b = generate_from_manifest(&manifest).unwrap();
        for (ra, rb) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(ra.image, rb.image);
            assert_eq!(ra.gt, rb.gt);
        }
    }

    #[test]
    fn different_master_seeds_change_content() {
        let cfg = DatasetConfig {
            dir: "unused".into(),
            n_train: 3,
            n_val: 1,
            height: 32,
            width: 32,
            num_classes: 4,
            shapes_per_class: 2,
            color_noise_sigma: 0.05,
        };
        let a = generate_from_manifest(&build_manifest(3, &cfg).unwrap()).unwrap();
        let b = generate_from_manifest(&build_manifest(4, &cfg).unwrap()).unwrap();
        assert!(a
            .train
            .iter()
            .zip(b.train.iter())
            .any(|(ra, rb)| ra.image != rb.image));
    }

    #[test]
    fn train_and_val_ids_are_disjoint() {
        let cfg = DatasetConfig {
            dir: "unused".into(),
            n_train: 5,
            n_val: 5,
            height: 32,
            width: 32,
            num_classes: 3,
            shapes_per_class: 1,
            color_noise_sigma: 0.02,
        };
        let manifest = build_manifest(1, &cfg).unwrap();
        let train_ids: alloc::collections::BTreeSet<_> = manifest
            .images
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| e.id.clone())
            .collect();
        let val_ids: alloc::collections::BTreeSet<_> = manifest
            .images
            .iter()
            .filter(|e| e.split == Split::Val)
            .map(|e| e.id.clone())
            .collect();
        assert!(train_ids.is_disjoint(&val_ids));
    }
}
