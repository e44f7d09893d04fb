//! Bilinear x2 upsampling (half-pixel centers) and 2-D max pooling.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Source taps `(i0, i1, frac)` for each output index along one axis of a
/// x2 upsample with `align_corners = false`.
fn taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (taps(h), taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    out.par_chunks_mut((ho * wo).max(1)).enumerate().for_each(|(p, op)| {
        let xp = &x[p * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let top = xp[y0 * w + x0] * gx + xp[y0 * w + x1] * fx;
                let bot = xp[y1 * w + x0] * gx + xp[y1 * w + x1] * fx;
                op[oy * wo + ox] = top * gy + bot * fy;
            }
        }
    });
    out
}

pub fn upsample2x_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (taps(h), taps(w));
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    gx.par_chunks_mut((h * w).max(1)).enumerate().for_each(|(p, gp)| {
        let go = &g[p * ho * wo..][..ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gxw) = (T::of(fx), T::of(1.0 - fx));
                let v = go[oy * wo + ox];
                gp[y0 * w + x0] = gp[y0 * w + x0] + v * gy * gxw;
                gp[y0 * w + x1] = gp[y0 * w + x1] + v * gy * fx;
                gp[y1 * w + x0] = gp[y1 * w + x0] + v * fy * gxw;
                gp[y1 * w + x1] = gp[y1 * w + x1] + v * fy * fx;
            }
        }
    });
    gx
}

/// Non-padded max pooling; returns values and the flat argmax of each window.
pub fn max_pool2d<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, ho, wo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let out = upsample2x(&[2.5f64; 12], 1, 3, 4);
        assert_eq!(out.len(), 48);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn half_pixel_weights() {
        // ramp [0, 1]: sources at -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped); both rows equal
        let out = upsample2x(&[0.0f64, 1.0], 1, 1, 2);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = [1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 1.0, 3.0, 8.0];
        let (out, arg, ho, wo) = max_pool2d(&x, 1, 4, 4, 2, 2);
        assert_eq!((ho, wo), (2, 2));
        assert_eq!(out, vec![5.0, 9.0, 1.0, 8.0]);
        assert_eq!(arg, vec![1, 6, 12, 15]);
    }
}
