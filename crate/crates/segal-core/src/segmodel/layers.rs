//! Differentiable primitives: 3x3/1x1 convolution, 2x2 average pooling,
//! SiLU, inverted dropout, bilinear upsampling and per-pixel L2
//! normalization. Forward and backward are hand-written and paired; the
//! gradient-check tests hold them together.

use alloc::vec;
use alloc::vec::Vec;

/// Channel-major feature tensor, contiguous as `[c][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Chw {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Chw {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[oc][ic][3][3]`.
pub fn conv3x3_forward(input: &Chw, weight: &[f64], bias: &[f64], oc: usize) -> Chw {
    let (ic, h, w) = (input.c, input.h, input.w);
    debug_assert_eq!(weight.len(), oc * ic * 9);
    let mut out = Chw::zeros(oc, h, w);
    for o in 0..oc {
        out.plane_mut(o).fill(bias[o]);
        for i in 0..ic {
            let kernel = &weight[(o * ic + i) * 9..(o * ic + i) * 9 + 9];
            gather_conv3(input.plane(i), out.plane_mut(o), kernel, h, w);
        }
    }
    out
}

/// Accumulate one (input plane, kernel) pair into an output plane.
#[inline]
fn gather_conv3(ip: &[f64], op: &mut [f64], kernel: &[f64], h: usize, w: usize) {
    for y in 0..h {
        let orow = &mut op[y * w..(y + 1) * w];
        for dy in 0..3usize {
            let sy = y + dy;
            if sy < 1 || sy > h {
                continue;
            }
            let irow = &ip[(sy - 1) * w..sy * w];
            let (k0, k1, k2) = (kernel[dy * 3], kernel[dy * 3 + 1], kernel[dy * 3 + 2]);
            if w == 1 {
                orow[0] += k1 * irow[0];
                continue;
            }
            orow[0] += k1 * irow[0] + k2 * irow[1];
            for x in 1..w - 1 {
                orow[x] += k0 * irow[x - 1] + k1 * irow[x] + k2 * irow[x + 1];
            }
            orow[w - 1] += k0 * irow[w - 2] + k1 * irow[w - 1];
        }
    }
}

/// Backward of [`conv3x3_forward`]: gradients for input, weight and bias.
pub fn conv3x3_backward(
    input: &Chw,
    weight: &[f64],
    oc: usize,
    grad_out: &Chw,
) -> (Chw, Vec<f64>, Vec<f64>) {
    let (ic, h, w) = (input.c, input.h, input.w);
    let mut grad_in = Chw::zeros(ic, h, w);
    let mut grad_w = vec![0.0; oc * ic * 9];
    let mut grad_b = vec![0.0; oc];

    for o in 0..oc {
        let gout = grad_out.plane(o);
        grad_b[o] += gout.iter().sum::<f64>();
        for i in 0..ic {
            // grad wrt input: correlation of grad_out with the 180-degree
            // rotated kernel, same border handling as the forward gather.
            let kernel = &weight[(o * ic + i) * 9..(o * ic + i) * 9 + 9];
            let rotated = [
                kernel[8], kernel[7], kernel[6], kernel[5], kernel[4], kernel[3], kernel[2],
                kernel[1], kernel[0],
            ];
            gather_conv3(gout, grad_in.plane_mut(i), &rotated, h, w);

            // grad wrt weight: shifted dot products of grad_out and input.
            let ip = input.plane(i);
            let gw = &mut grad_w[(o * ic + i) * 9..(o * ic + i) * 9 + 9];
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let grow = &gout[y * w..(y + 1) * w];
                        let irow = &ip[(sy - 1) * w..sy * w];
                        let (x0, x1) = match dx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w - 1),
                        };
                        for x in x0..x1 {
                            acc += grow[x] * irow[x + dx - 1];
                        }
                    }
                    gw[dy * 3 + dx] += acc;
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

/// 1x1 convolution. `weight` is `[oc][ic]`.
pub fn conv1x1_forward(input: &Chw, weight: &[f64], bias: &[f64], oc: usize) -> Chw {
    let (ic, h, w) = (input.c, input.h, input.w);
    let hw = h * w;
    let mut out = Chw::zeros(oc, h, w);
    for o in 0..oc {
        let op = out.plane_mut(o);
        op.fill(bias[o]);
        for i in 0..ic {
            let k = weight[o * ic + i];
            let ip = &input.data[i * hw..(i + 1) * hw];
            for (ov, iv) in op.iter_mut().zip(ip.iter()) {
                *ov += k * iv;
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &Chw,
    weight: &[f64],
    oc: usize,
    grad_out: &Chw,
) -> (Chw, Vec<f64>, Vec<f64>) {
    let (ic, h, w) = (input.c, input.h, input.w);
    let hw = h * w;
    let mut grad_in = Chw::zeros(ic, h, w);
    let mut grad_w = vec![0.0; oc * ic];
    let mut grad_b = vec![0.0; oc];
    for o in 0..oc {
        let gout = grad_out.plane(o);
        grad_b[o] += gout.iter().sum::<f64>();
        for i in 0..ic {
            let ip = &input.data[i * hw..(i + 1) * hw];
            let gi = &mut grad_in.data[i * hw..(i + 1) * hw];
            let k = weight[o * ic + i];
            let mut acc = 0.0;
            for x in 0..hw {
                acc += gout[x] * ip[x];
                gi[x] += k * gout[x];
            }
            grad_w[o * ic + i] += acc;
        }
    }
    (grad_in, grad_w, grad_b)
}

/// 2x2 average pooling, stride 2. Requires even height and width.
pub fn avgpool2_forward(input: &Chw) -> Chw {
    let (c, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Chw::zeros(c, oh, ow);
    for ch in 0..c {
        let ip = input.plane(ch);
        let op = out.plane_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * w + 2 * x;
                op[y * ow + x] = 0.25 * (ip[base] + ip[base + 1] + ip[base + w] + ip[base + w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(grad_out: &Chw, in_h: usize, in_w: usize) -> Chw {
    let c = grad_out.c;
    let (oh, ow) = (grad_out.h, grad_out.w);
    let mut grad_in = Chw::zeros(c, in_h, in_w);
    for ch in 0..c {
        let gout = grad_out.plane(ch);
        let gin = grad_in.plane_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * gout[y * ow + x];
                let base = 2 * y * in_w + 2 * x;
                gin[base] += g;
                gin[base + 1] += g;
                gin[base + in_w] += g;
                gin[base + in_w + 1] += g;
            }
        }
    }
    grad_in
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// SiLU activation; smooth everywhere, which keeps finite-difference
/// gradient checks clean.
#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_map(input: &Chw) -> Chw {
    let mut out = input.clone();
    for v in &mut out.data {
        *v = silu(*v);
    }
    out
}

/// Bilinear index/weight table for one axis: `(lo, hi, frac)` per output
/// coordinate, half-pixel-center convention with edge clamping.
pub fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample(input: &Chw, out_h: usize, out_w: usize) -> Chw {
    let (c, h, w) = (input.c, input.h, input.w);
    let ys = bilinear_axis(out_h, h);
    let xs = bilinear_axis(out_w, w);
    let mut out = Chw::zeros(c, out_h, out_w);
    for ch in 0..c {
        let ip = input.plane(ch);
        let op = out.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &ip[y0 * w..(y0 + 1) * w];
            let r1 = &ip[y1 * w..(y1 + 1) * w];
            let orow = &mut op[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                orow[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_upsample_backward(grad_out: &Chw, in_h: usize, in_w: usize) -> Chw {
    let c = grad_out.c;
    let (oh, ow) = (grad_out.h, grad_out.w);
    let ys = bilinear_axis(oh, in_h);
    let xs = bilinear_axis(ow, in_w);
    let mut grad_in = Chw::zeros(c, in_h, in_w);
    for ch in 0..c {
        let gout = grad_out.plane(ch);
        let gin = grad_in.plane_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let grow = &gout[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = grow[ox];
                gin[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gin[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                gin[y1 * in_w + x0] += g * fy * (1.0 - fx);
                gin[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    grad_in
}

/// Small constant inside the norm keeps the gradient bounded for
/// near-zero vectors; the unit-norm contract still holds to < 1e-9.
pub const NORM_EPS: f64 = 1e-12;

/// Normalize each `dim`-vector of a pixel-major buffer to unit length.
/// Returns the stabilized norms for the backward pass.
pub fn l2_normalize_rows(data: &mut [f64], dim: usize) -> Vec<f64> {
    let n = data.len() / dim;
    let mut norms = Vec::with_capacity(n);
    for p in 0..n {
        let row = &mut data[p * dim..(p + 1) * dim];
        let sq: f64 = row.iter().map(|v| v * v).sum();
        let norm = libm::sqrt(sq + NORM_EPS);
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    norms
}

/// Backward of [`l2_normalize_rows`]: `unit` is the normalized output.
pub fn l2_normalize_backward(unit: &[f64], norms: &[f64], grad_unit: &[f64], dim: usize) -> Vec<f64> {
    let mut grad_raw = vec![0.0; grad_unit.len()];
    for p in 0..norms.len() {
        let u = &unit[p * dim..(p + 1) * dim];
        let g = &grad_unit[p * dim..(p + 1) * dim];
        let dot: f64 = u.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let inv = 1.0 / norms[p];
        let gr = &mut grad_raw[p * dim..(p + 1) * dim];
        for k in 0..dim {
            gr[k] = (g[k] - u[k] * dot) * inv;
        }
    }
    grad_raw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        crate::seeding::stream_from(42)
    }

    fn random_chw(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Chw {
        let mut t = Chw::zeros(c, h, w);
        for v in &mut t.data {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn conv3x3_matches_naive_reference() {
        let mut r = rng();
        let input = random_chw(2, 5, 4, &mut r);
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|_| r.random_range(-1.0..1.0)).collect();
        let bias = [0.3, -0.2, 0.05];
        let out = conv3x3_forward(&input, &weight, &bias, 3);
        for o in 0..3 {
            for y in 0..5usize {
                for x in 0..4usize {
                    let mut acc = bias[o];
                    for i in 0..2 {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                let sx = x as isize + dx as isize - 1;
                                if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                    continue;
                                }
                                acc += weight[((o * 2 + i) * 9) + dy * 3 + dx]
                                    * input.plane(i)[sy as usize * 4 + sx as usize];
                            }
                        }
                    }
                    let got = out.plane(o)[y * 4 + x];
                    assert!((got - acc).abs() < 1e-12, "mismatch at {o},{y},{x}");
                }
            }
        }
    }

    /// Finite differences through a scalar functional of each layer.
    fn fd_check<F>(f: F, x0: &mut Vec<f64>, analytic: &[f64], eps: f64, tol: f64)
    where
        F: Fn(&[f64]) -> f64,
    {
        for i in 0..x0.len() {
            let orig = x0[i];
            x0[i] = orig + eps;
            let fp = f(x0);
            x0[i] = orig - eps;
            let fm = f(x0);
            x0[i] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let denom = num.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (num - analytic[i]).abs() / denom < tol,
                "grad {i}: analytic {} vs numeric {num}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let mut r = rng();
        let input = random_chw(2, 4, 3, &mut r);
        let weight: Vec<f64> = (0..2 * 2 * 9).map(|_| r.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = vec![0.1, -0.4];
        // Scalar functional: weighted sum of outputs.
        let coeffs: Vec<f64> = (0..2 * 4 * 3).map(|_| r.random_range(-1.0..1.0)).collect();

        let scalar = |inp: &[f64], wt: &[f64], b: &[f64]| {
            let t = Chw {
                c: 2,
                h: 4,
                w: 3,
                data: inp.to_vec(),
            };
            let out = conv3x3_forward(&t, wt, b, 2);
            out.data.iter().zip(coeffs.iter()).map(|(a, c)| a * c).sum::<f64>()
        };

        let grad_out = Chw {
            c: 2,
            h: 4,
            w: 3,
            data: coeffs.clone(),
        };
        let (gin, gw, gb) = conv3x3_backward(&input, &weight, 2, &grad_out);

        let mut inp = input.data.clone();
        let w2 = weight.clone();
        let b2 = bias.clone();
        fd_check(|x| scalar(x, &w2, &b2), &mut inp, &gin.data, 1e-5, 1e-6);
        let i2 = input.data.clone();
        let mut wt = weight.clone();
        fd_check(|x| scalar(&i2, x, &b2), &mut wt, &gw, 1e-5, 1e-6);
        let mut bb = bias.clone();
        fd_check(|x| scalar(&i2, &w2, x), &mut bb, &gb, 1e-5, 1e-6);
    }

    #[test]
    fn pool_and_upsample_are_transposes() {
        // <A x, y> == <x, A^T y> for linear maps.
        let mut r = rng();
        let x = random_chw(2, 6, 6, &mut r);
        let y = random_chw(2, 3, 3, &mut r);
        let ax = avgpool2_forward(&x);
        let aty = avgpool2_backward(&y, 6, 6);
        let lhs: f64 = ax.data.iter().zip(y.data.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(aty.data.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let up = bilinear_upsample(&x, 12, 12);
        let z = random_chw(2, 12, 12, &mut r);
        let down = bilinear_upsample_backward(&z, 6, 6);
        let lhs: f64 = up.data.iter().zip(z.data.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(down.data.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_produces_unit_rows_and_correct_gradient() {
        let mut r = rng();
        let dim = 5;
        let mut data: Vec<f64> = (0..4 * dim).map(|_| r.random_range(-2.0..2.0)).collect();
        let raw = data.clone();
        let norms = l2_normalize_rows(&mut data, dim);
        for p in 0..4 {
            let sq: f64 = data[p * dim..(p + 1) * dim].iter().map(|v| v * v).sum();
            assert!((libm::sqrt(sq) - 1.0).abs() < 1e-9);
        }
        let coeffs: Vec<f64> = (0..4 * dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let grad_raw = l2_normalize_backward(&data, &norms, &coeffs, dim);
        let scalar = |x: &[f64]| {
            let mut d = x.to_vec();
            l2_normalize_rows(&mut d, dim);
            d.iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut x0 = raw;
        fd_check(scalar, &mut x0, &grad_raw, 1e-6, 1e-5);
    }
}
