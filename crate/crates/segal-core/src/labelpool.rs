//! Dataset-wide per-pixel label provenance: who labeled what, pseudo-label
//! assignment, oracle reveals of queried regions and budget accounting.
//!
//! Human labels (ground truth and queried regions) are permanent; pseudo
//! labels are recomputed from scratch whenever new predictions arrive.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::losses::PixelLabelMask;
use crate::segmodel::ProbMap;
use crate::synthdata::{Dataset, IGNORE_LABEL};

/// Where a pixel's effective label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Provenance {
    Unlabeled = 0,
    Gt = 1,
    Queried = 2,
    Pseudo = 3,
}

impl Provenance {
    pub fn from_u8(v: u8) -> Option<Provenance> {
        match v {
            0 => Some(Provenance::Unlabeled),
            1 => Some(Provenance::Gt),
            2 => Some(Provenance::Queried),
            3 => Some(Provenance::Pseudo),
            _ => None,
        }
    }
}

/// Provenance and effective labels for one training image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePool {
    pub provenance: Vec<u8>,
    pub labels: Vec<u8>,
}

/// Label state of the whole training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPool {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    images: Vec<ImagePool>,
    labeled_images: Vec<bool>,
}

/// Snapshot of the labeling budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetLedger {
    pub human_pixels: u64,
    pub pseudo_pixels: u64,
    pub total_pixels: u64,
    pub human_fraction: f64,
    pub pseudo_fraction: f64,
}

impl LabelPool {
    /// Initialize with `round(fraction * n_train)` fully labeled images
    /// chosen by a seeded shuffle; everything else starts unlabeled.
    pub fn init(dataset: &Dataset, fraction: f64, seed: u64) -> Result<LabelPool> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(CoreError::config("labeled fraction must be in (0, 1)"));
        }
        let n = dataset.train.len();
        if n == 0 {
            return Err(CoreError::config("dataset has no training images"));
        }
        let k = libm::round(fraction * n as f64) as usize;
        if k == 0 {
            return Err(CoreError::config(format!(
                "labeled fraction {fraction} selects zero of {n} images"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = crate::seeding::stream_from(seed);
        order.shuffle(&mut rng);

        let first = &dataset.train[0];
        let (h, w) = (first.gt.height, first.gt.width);
        let mut labeled_images = vec![false; n];
        for &idx in order.iter().take(k) {
            labeled_images[idx] = true;
        }
        let images = dataset
            .train
            .iter()
            .enumerate()
            .map(|(i, record)| {
                if labeled_images[i] {
                    ImagePool {
                        provenance: vec![Provenance::Gt as u8; h * w],
                        labels: record.gt.labels.clone(),
                    }
                } else {
                    ImagePool {
                        provenance: vec![Provenance::Unlabeled as u8; h * w],
                        labels: vec![IGNORE_LABEL; h * w],
                    }
                }
            })
            .collect();
        Ok(LabelPool {
            height: h,
            width: w,
            num_classes: dataset.num_classes,
            images,
            labeled_images,
        })
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn is_initially_labeled(&self, image: usize) -> bool {
        self.labeled_images[image]
    }

    /// Indices of the unlabeled-pool images, ascending.
    pub fn unlabeled_images(&self) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| !self.labeled_images[i])
            .collect()
    }

    pub fn labeled_image_ids(&self) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&i| self.labeled_images[i])
            .collect()
    }

    pub fn image(&self, idx: usize) -> &ImagePool {
        &self.images[idx]
    }

    /// Refresh pseudo-labels of one unlabeled-pool image from fresh
    /// predictions. Confident pixels become pseudo-labeled with the
    /// argmax class (ties to the lowest index); the rest revert to
    /// unlabeled. Human labels are never touched.
    pub fn assign_pseudo_image(
        &mut self,
        image: usize,
        probs: &ProbMap,
        threshold: f64,
    ) -> Result<()> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(CoreError::config("pseudo threshold must be in (0, 1)"));
        }
        if self.labeled_images[image] {
            return Err(CoreError::logic(format!(
                "image {image} is in the initially labeled pool"
            )));
        }
        if probs.height != self.height || probs.width != self.width {
            return Err(CoreError::logic("probability map does not match pool geometry"));
        }
        let pool = &mut self.images[image];
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                match Provenance::from_u8(pool.provenance[p]) {
                    Some(Provenance::Gt) | Some(Provenance::Queried) => continue,
                    _ => {}
                }
                let (class, conf) = probs.argmax_pixel(y, x);
                if conf > threshold {
                    pool.provenance[p] = Provenance::Pseudo as u8;
                    pool.labels[p] = class;
                } else {
                    pool.provenance[p] = Provenance::Unlabeled as u8;
                    pool.labels[p] = IGNORE_LABEL;
                }
            }
        }
        Ok(())
    }

    /// Reveal oracle labels inside the given `R x R` tiles, marking every
    /// pixel queried. Tiles must address unlabeled-pool images and lie
    /// inside the image grid. Revealing the same tile twice is a no-op.
    pub fn reveal_regions(
        &mut self,
        dataset: &Dataset,
        regions: &[(usize, usize, usize)],
        region_size: usize,
    ) -> Result<()> {
        let tiles_y = self.height / region_size;
        let tiles_x = self.width / region_size;
        for &(image, tr, tc) in regions {
            if image >= self.images.len() {
                return Err(CoreError::logic(format!("image {image} out of range")));
            }
            if self.labeled_images[image] {
                return Err(CoreError::logic(format!(
                    "cannot query region in initially labeled image {image}"
                )));
            }
            if tr >= tiles_y || tc >= tiles_x {
                return Err(CoreError::logic(format!(
                    "tile ({tr}, {tc}) outside the {tiles_y}x{tiles_x} grid"
                )));
            }
            let gt = &dataset.train[image].gt;
            let pool = &mut self.images[image];
            for y in tr * region_size..(tr + 1) * region_size {
                for x in tc * region_size..(tc + 1) * region_size {
                    let p = y * self.width + x;
                    pool.provenance[p] = Provenance::Queried as u8;
                    pool.labels[p] = gt.labels[p];
                }
            }
        }
        Ok(())
    }

    /// Exact recount of the budget from the provenance maps.
    pub fn ledger(&self) -> BudgetLedger {
        let mut human = 0u64;
        let mut pseudo = 0u64;
        let mut total = 0u64;
        for image in &self.images {
            for &p in &image.provenance {
                total += 1;
                match Provenance::from_u8(p) {
                    Some(Provenance::Gt) | Some(Provenance::Queried) => human += 1,
                    Some(Provenance::Pseudo) => pseudo += 1,
                    _ => {}
                }
            }
        }
        BudgetLedger {
            human_pixels: human,
            pseudo_pixels: pseudo,
            total_pixels: total,
            human_fraction: human as f64 / total as f64,
            pseudo_fraction: pseudo as f64 / total as f64,
        }
    }

    /// Fraction of pseudo-labeled pixels matching the oracle; `None` when
    /// no pixel is pseudo-labeled.
    pub fn pseudo_precision(&self, dataset: &Dataset) -> Option<f64> {
        let mut correct = 0u64;
        let mut count = 0u64;
        for (i, image) in self.images.iter().enumerate() {
            let gt = &dataset.train[i].gt;
            for (p, &prov) in image.provenance.iter().enumerate() {
                if prov == Provenance::Pseudo as u8 {
                    count += 1;
                    if image.labels[p] == gt.labels[p] {
                        correct += 1;
                    }
                }
            }
        }
        (count > 0).then(|| correct as f64 / count as f64)
    }

    /// Supervision mask of human labels (ground truth or queried).
    pub fn human_mask(&self, image: usize) -> PixelLabelMask {
        self.mask_where(image, |p| {
            p == Provenance::Gt as u8 || p == Provenance::Queried as u8
        })
    }

    /// Supervision mask for unlabeled-pool training (pseudo or queried).
    pub fn pseudo_mask(&self, image: usize) -> PixelLabelMask {
        self.mask_where(image, |p| {
            p == Provenance::Pseudo as u8 || p == Provenance::Queried as u8
        })
    }

    fn mask_where(&self, image: usize, keep: impl Fn(u8) -> bool) -> PixelLabelMask {
        let pool = &self.images[image];
        let labels = pool
            .provenance
            .iter()
            .zip(pool.labels.iter())
            .map(|(&prov, &label)| if keep(prov) { label } else { IGNORE_LABEL })
            .collect();
        PixelLabelMask::new(self.height, self.width, labels)
    }

    /// True when any unlabeled-pool image carries usable supervision.
    pub fn has_unlabeled_supervision(&self) -> bool {
        self.images.iter().enumerate().any(|(i, image)| {
            !self.labeled_images[i]
                && image.provenance.iter().any(|&p| {
                    p == Provenance::Pseudo as u8 || p == Provenance::Queried as u8
                })
        })
    }
}
