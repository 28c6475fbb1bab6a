//! Weak and strong data augmentation applied jointly to an image and its
//! label map.
//!
//! Weak: random rescale (nearest-neighbor, so pixel colors are moved but
//! never altered) cropped or padded back to the original size, then a
//! coin-flip horizontal flip. Strong: weak plus Gaussian blur, color
//! jitter and CutOut. Padded and cut-out pixels get the ignore label.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::synthdata::{SceneImage, IGNORE_LABEL};

/// Augmentation strength.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugMode {
    Weak,
    Strong,
}

/// Mirror image and labels left-right. Applying it twice is the identity.
pub fn hflip(image: &mut SceneImage, labels: &mut [u8]) {
    let (h, w) = (image.height, image.width);
    for y in 0..h {
        for x in 0..w / 2 {
            let xr = w - 1 - x;
            for ch in 0..3 {
                image.pixels.swap((y * w + x) * 3 + ch, (y * w + xr) * 3 + ch);
            }
            labels.swap(y * w + x, y * w + xr);
        }
    }
}

/// Nearest-neighbor resize of image and labels to `(out_h, out_w)`.
pub fn resize_nearest(
    image: &SceneImage,
    labels: &[u8],
    out_h: usize,
    out_w: usize,
) -> (SceneImage, Vec<u8>) {
    let (h, w) = (image.height, image.width);
    let mut out_img = SceneImage::zeros(out_h, out_w);
    let mut out_labels = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
            for ch in 0..3 {
                out_img.pixels[(y * out_w + x) * 3 + ch] = image.pixels[(sy * w + sx) * 3 + ch];
            }
            out_labels[y * out_w + x] = labels[sy * w + sx];
        }
    }
    (out_img, out_labels)
}

/// Crop (when larger) or pad (when smaller) each axis to `(h, w)` at the
/// given offsets: a crop offset selects the window inside the source, a
/// pad offset places the source inside the output. Padding is zero for
/// the image and ignore for the labels.
pub fn crop_or_pad(
    image: &SceneImage,
    labels: &[u8],
    h: usize,
    w: usize,
    off_y: usize,
    off_x: usize,
) -> (SceneImage, Vec<u8>) {
    let (ih, iw) = (image.height, image.width);
    let src_coord = |dst: usize, src_len: usize, dst_len: usize, off: usize| -> Option<usize> {
        if src_len >= dst_len {
            Some(dst + off)
        } else {
            dst.checked_sub(off).filter(|&v| v < src_len)
        }
    };
    let mut out_img = SceneImage::zeros(h, w);
    let mut out_labels = vec![IGNORE_LABEL; h * w];
    for y in 0..h {
        let Some(sy) = src_coord(y, ih, h, off_y).filter(|&v| v < ih) else {
            continue;
        };
        for x in 0..w {
            let Some(sx) = src_coord(x, iw, w, off_x).filter(|&v| v < iw) else {
                continue;
            };
            for ch in 0..3 {
                out_img.pixels[(y * w + x) * 3 + ch] = image.pixels[(sy * iw + sx) * 3 + ch];
            }
            out_labels[y * w + x] = labels[sy * iw + sx];
        }
    }
    (out_img, out_labels)
}

/// Separable Gaussian blur with replicated edges; labels untouched.
pub fn gaussian_blur(image: &mut SceneImage, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = libm::ceil(2.0 * sigma) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = libm::exp(-0.5 * d * d / (sigma * sigma));
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }

    let (h, w) = (image.height, image.width);
    let mut tmp = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = (x + i).saturating_sub(radius).min(w - 1);
                    acc += k * image.pixels[(y * w + sx) * 3 + ch];
                }
                tmp[(y * w + x) * 3 + ch] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = (y + i).saturating_sub(radius).min(h - 1);
                    acc += k * tmp[(sy * w + x) * 3 + ch];
                }
                image.pixels[(y * w + x) * 3 + ch] = acc;
            }
        }
    }
}

/// Brightness, contrast and saturation scaling, clipped to `[0, 1]`.
pub fn color_jitter(image: &mut SceneImage, brightness: f64, contrast: f64, saturation: f64) {
    for v in &mut image.pixels {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let mean = image.pixels.iter().sum::<f64>() / image.pixels.len() as f64;
    for v in &mut image.pixels {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    let n = image.height * image.width;
    for p in 0..n {
        let r = image.pixels[p * 3];
        let g = image.pixels[p * 3 + 1];
        let b = image.pixels[p * 3 + 2];
        let gray = 0.299 * r + 0.587 * g + 0.114 * b;
        for ch in 0..3 {
            let v = image.pixels[p * 3 + ch];
            image.pixels[p * 3 + ch] = (gray + (v - gray) * saturation).clamp(0.0, 1.0);
        }
    }
}

/// Zero a square of the image and mark its labels ignore.
pub fn cutout(image: &mut SceneImage, labels: &mut [u8], top: usize, left: usize, side: usize) {
    let (h, w) = (image.height, image.width);
    for y in top..(top + side).min(h) {
        for x in left..(left + side).min(w) {
            for ch in 0..3 {
                image.pixels[(y * w + x) * 3 + ch] = 0.0;
            }
            labels[y * w + x] = IGNORE_LABEL;
        }
    }
}

/// Apply one augmentation draw to an image/label pair.
pub fn augment(
    image: &SceneImage,
    labels: &[u8],
    mode: AugMode,
    rng: &mut ChaCha8Rng,
) -> (SceneImage, Vec<u8>) {
    let (h, w) = (image.height, image.width);

    // Random rescale, then fit back to the original size.
    let scale: f64 = rng.random_range(0.75..1.25);
    let new_h = (libm::round(h as f64 * scale) as usize).max(1);
    let new_w = (libm::round(w as f64 * scale) as usize).max(1);
    let (scaled_img, scaled_labels) = resize_nearest(image, labels, new_h, new_w);
    let off_y = random_offset(new_h.abs_diff(h), rng);
    let off_x = random_offset(new_w.abs_diff(w), rng);
    let (mut img, mut labs) = crop_or_pad(&scaled_img, &scaled_labels, h, w, off_y, off_x);

    if rng.random::<bool>() {
        hflip(&mut img, &mut labs);
    }

    if mode == AugMode::Strong {
        if rng.random::<bool>() {
            let sigma = rng.random_range(0.3..1.2);
            gaussian_blur(&mut img, sigma);
        }
        let brightness = rng.random_range(0.7..1.3);
        let contrast = rng.random_range(0.7..1.3);
        let saturation = rng.random_range(0.7..1.3);
        color_jitter(&mut img, brightness, contrast, saturation);

        let side = (h.min(w) / 4).max(1);
        let top = random_offset(h - side, rng);
        let left = random_offset(w - side, rng);
        cutout(&mut img, &mut labs, top, left, side);
    }
    (img, labs)
}

fn random_offset(range: usize, rng: &mut ChaCha8Rng) -> usize {
    if range == 0 {
        0
    } else {
        rng.random_range(0..=range)
    }
}
