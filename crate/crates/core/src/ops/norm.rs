//! Batch normalization over `[N, C, H, W]` and layer normalization over the last axis.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Per-channel statistics of a batch: `(mean, biased variance)`.
pub fn batch_stats<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let slices = || (0..n).map(move |b| &x[(b * c + ch) * plane..][..plane]);
            let sum = slices().fold(T::zero(), |a, s| s.iter().fold(a, |a, &v| a + v));
            let mean = sum / count;
            let sq = slices().fold(T::zero(), |a, s| {
                s.iter().fold(a, |a, &v| {
                    let d = v - mean;
                    a + d * d
                })
            });
            (mean, sq / count)
        })
        .unzip()
}

/// `y = gamma * (x - mean) * invstd + beta`.
pub fn batch_norm_apply<T: Scalar>(
    x: &[T],
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    plane: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, yp)| {
        let ch = idx % c;
        let scale = gamma[ch] * invstd[ch];
        let shift = beta[ch] - mean[ch] * scale;
        for (o, &v) in yp.iter_mut().zip(&x[idx * plane..][..plane]) {
            *o = v * scale + shift;
        }
    });
    y
}

/// Gradients `(gx, ggamma, gbeta)`. In training mode the batch statistics
/// depend on `x`; in inference mode they are constants.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    mean: &[T],
    invstd: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    plane: usize,
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let (ggamma, gbeta): (Vec<T>, Vec<T>) = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut gg = T::zero();
            let mut gb = T::zero();
            for b in 0..n {
                let o = (b * c + ch) * plane;
                for (&gv, &xv) in g[o..o + plane].iter().zip(&x[o..o + plane]) {
                    gg = gg + gv * (xv - mean[ch]) * invstd[ch];
                    gb = gb + gv;
                }
            }
            (gg, gb)
        })
        .unzip();
    let mut gx = vec![T::zero(); x.len()];
    gx.par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, gxp)| {
        let ch = idx % c;
        let o = idx * plane;
        let k = gamma[ch] * invstd[ch];
        for ((d, &gv), &xv) in gxp.iter_mut().zip(&g[o..o + plane]).zip(&x[o..o + plane]) {
            *d = if train {
                let xhat = (xv - mean[ch]) * invstd[ch];
                k * (gv - gbeta[ch] / count - xhat * ggamma[ch] / count)
            } else {
                k * gv
            };
        }
    });
    (gx, ggamma, gbeta)
}

/// Returns `(y, mean, rstd)` per row.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d.max(1);
    let dn = T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); rows];
    let mut rstds = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..][..d];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let rstd = T::one() / (var + T::of(eps)).sqrt();
        for j in 0..d {
            y[r * d + j] = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (y, means, rstds)
}

pub fn layer_norm_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    mean: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d.max(1);
    let dn = T::of(d as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    for r in 0..rows {
        let (xr, gr) = (&x[r * d..][..d], &g[r * d..][..d]);
        let mut sum_gh = T::zero();
        let mut sum_ghx = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mean[r]) * rstd[r];
            let gh = gr[j] * gamma[j];
            sum_gh = sum_gh + gh;
            sum_ghx = sum_ghx + gh * xhat;
            gg[j] = gg[j] + gr[j] * xhat;
            gb[j] = gb[j] + gr[j];
        }
        for j in 0..d {
            let xhat = (xr[j] - mean[r]) * rstd[r];
            gx[r * d + j] = rstd[r] * (gr[j] * gamma[j] - sum_gh / dn - xhat * sum_ghx / dn);
        }
    }
    (gx, gg, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_batch_has_unit_moments() {
        let (n, c, plane) = (3, 2, 5);
        let x: Vec<f64> = (0..n * c * plane).map(|i| ((i * 37 % 11) as f64) * 0.7 - 2.0).collect();
        let (mean, var) = batch_stats(&x, n, c, plane);
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + 1e-5).sqrt()).collect();
        let y = batch_norm_apply(&x, &mean, &invstd, &[1.0, 1.0], &[0.0, 0.0], c, plane);
        let (m2, v2) = batch_stats(&y, n, c, plane);
        for ch in 0..c {
            assert!(m2[ch].abs() < 1e-5);
            assert!((v2[ch] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 14.0];
        let (y, _, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 4, 0.0);
        for r in 0..2 {
            let row = &y[r * 4..][..4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
