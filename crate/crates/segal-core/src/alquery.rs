//! Entropy scoring over a region grid and per-image selection of the
//! highest-entropy tiles to query. Fully deterministic: ties break on the
//! row-major tile index.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::labelpool::{LabelPool, Provenance};
use crate::segmodel::ProbMap;

/// Per-pixel prediction entropy, natural log, with `0 ln 0 = 0`.
pub fn pixel_entropy(probs: &ProbMap) -> Vec<f64> {
    let c = probs.num_classes;
    let mut out = vec![0.0; probs.height * probs.width];
    for (p, e) in out.iter_mut().enumerate() {
        let row = &probs.data[p * c..(p + 1) * c];
        let mut h = 0.0;
        for &v in row {
            if v > 0.0 {
                h -= v * libm::log(v);
            }
        }
        *e = h;
    }
    out
}

/// Non-overlapping `R x R` tiling of one image with per-tile entropy
/// scores and query eligibility.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub region_size: usize,
    pub tiles_y: usize,
    pub tiles_x: usize,
    /// Mean entropy per tile; ineligible tiles carry `-inf`.
    pub scores: Vec<f64>,
    /// A tile is eligible while it still contains a human-unlabeled pixel.
    pub eligible: Vec<bool>,
}

impl RegionGrid {
    pub fn num_tiles(&self) -> usize {
        self.tiles_y * self.tiles_x
    }
}

/// Build the grid for one image, deriving eligibility from provenance:
/// a tile stays eligible while any pixel is neither ground truth nor
/// already queried.
pub fn build_grid(pool: &LabelPool, image: usize, region_size: usize) -> Result<RegionGrid> {
    if region_size == 0 || pool.height % region_size != 0 || pool.width % region_size != 0 {
        return Err(CoreError::config(
            "image dimensions must be divisible by the region size",
        ));
    }
    let tiles_y = pool.height / region_size;
    let tiles_x = pool.width / region_size;
    let prov = &pool.image(image).provenance;
    let mut eligible = vec![false; tiles_y * tiles_x];
    for (t, slot) in eligible.iter_mut().enumerate() {
        let ty = t / tiles_x;
        let tx = t % tiles_x;
        'scan: for y in ty * region_size..(ty + 1) * region_size {
            for x in tx * region_size..(tx + 1) * region_size {
                let p = prov[y * pool.width + x];
                if p != Provenance::Gt as u8 && p != Provenance::Queried as u8 {
                    *slot = true;
                    break 'scan;
                }
            }
        }
    }
    Ok(RegionGrid {
        region_size,
        tiles_y,
        tiles_x,
        scores: vec![f64::NEG_INFINITY; tiles_y * tiles_x],
        eligible,
    })
}

/// Fill tile scores with the mean entropy over every pixel of the tile;
/// ineligible tiles keep `-inf`.
pub fn score_regions(entropy: &[f64], width: usize, grid: &mut RegionGrid) {
    let r = grid.region_size;
    let inv_area = 1.0 / (r * r) as f64;
    for t in 0..grid.num_tiles() {
        if !grid.eligible[t] {
            grid.scores[t] = f64::NEG_INFINITY;
            continue;
        }
        let ty = t / grid.tiles_x;
        let tx = t % grid.tiles_x;
        let mut sum = 0.0;
        for y in ty * r..(ty + 1) * r {
            for x in tx * r..(tx + 1) * r {
                sum += entropy[y * width + x];
            }
        }
        grid.scores[t] = sum * inv_area;
    }
}

/// One selected query region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionQuery {
    pub image: usize,
    pub tile_row: usize,
    pub tile_col: usize,
    pub score: f64,
}

/// For every image independently, pick the `budget` highest-scoring
/// eligible tiles (ties to the lower row-major index); images with fewer
/// eligible tiles contribute all of them.
pub fn select_regions(grids: &[(usize, RegionGrid)], budget: usize) -> Result<Vec<RegionQuery>> {
    if budget == 0 {
        return Err(CoreError::config("per-image budget must be >= 1"));
    }
    let mut selected = Vec::new();
    for (image, grid) in grids {
        let mut order: Vec<usize> = (0..grid.num_tiles()).filter(|&t| grid.eligible[t]).collect();
        order.sort_unstable_by(|&a, &b| {
            grid.scores[b]
                .partial_cmp(&grid.scores[a])
                .expect("scores are never NaN")
                .then(a.cmp(&b))
        });
        for &t in order.iter().take(budget) {
            selected.push(RegionQuery {
                image: *image,
                tile_row: t / grid.tiles_x,
                tile_col: t % grid.tiles_x,
                score: grid.scores[t],
            });
        }
    }
    Ok(selected)
}
