//! Batched matrix products and the dense (linear) layer kernel.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// `c[b] = a[b] @ rhs[b]` for `a: [batch, m, k]`, `rhs: [batch, k, n]`.
pub fn bmm<T: Scalar>(a: &[T], rhs: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    c.par_chunks_mut(n.max(1)).enumerate().for_each(|(row, crow)| {
        let b = row / m.max(1);
        let arow = &a[row * k..][..k];
        let rb = &rhs[b * k * n..][..k * n];
        for (kk, &av) in arow.iter().enumerate() {
            for (cv, &bv) in crow.iter_mut().zip(&rb[kk * n..][..n]) {
                *cv = *cv + av * bv;
            }
        }
    });
    c
}

/// Gradients of [`bmm`]: returns `(gout @ rhs^T, a^T @ gout)`.
pub fn bmm_backward<T: Scalar>(
    gout: &[T],
    a: &[T],
    rhs: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); batch * m * k];
    ga.par_chunks_mut(k.max(1)).enumerate().for_each(|(row, garow)| {
        let b = row / m.max(1);
        let grow = &gout[row * n..][..n];
        let rb = &rhs[b * k * n..][..k * n];
        for (kk, gv) in garow.iter_mut().enumerate() {
            *gv = dot(grow, &rb[kk * n..][..n]);
        }
    });
    let mut gb = vec![T::zero(); batch * k * n];
    gb.par_chunks_mut(n.max(1)).enumerate().for_each(|(row, gbrow)| {
        let (b, kk) = (row / k.max(1), row % k.max(1));
        for i in 0..m {
            let av = a[(b * m + i) * k + kk];
            let grow = &gout[(b * m + i) * n..][..n];
            for (d, &gv) in gbrow.iter_mut().zip(grow) {
                *d = *d + av * gv;
            }
        }
    });
    (ga, gb)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y[r] = w @ x[r] + bias` for `x: [rows, inp]`, `w: [out, inp]`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    y.par_chunks_mut(out.max(1)).enumerate().for_each(|(r, yrow)| {
        let xrow = &x[r * inp..][..inp];
        for (o, yv) in yrow.iter_mut().enumerate() {
            let b = bias.map_or(T::zero(), |b| b[o]);
            *yv = b + dot(xrow, &w[o * inp..][..inp]);
        }
    });
    y
}

/// Gradients of [`linear`]: `(gx, gw, gbias)`.
pub fn linear_backward<T: Scalar>(
    gy: &[T],
    x: &[T],
    w: &[T],
    rows: usize,
    inp: usize,
    out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); rows * inp];
    gx.par_chunks_mut(inp.max(1)).enumerate().for_each(|(r, gxrow)| {
        for (o, &g) in gy[r * out..][..out].iter().enumerate() {
            for (d, &wv) in gxrow.iter_mut().zip(&w[o * inp..][..inp]) {
                *d = *d + g * wv;
            }
        }
    });
    let mut gw = vec![T::zero(); out * inp];
    gw.par_chunks_mut(inp.max(1)).enumerate().for_each(|(o, gwrow)| {
        for r in 0..rows {
            let g = gy[r * out + o];
            for (d, &xv) in gwrow.iter_mut().zip(&x[r * inp..][..inp]) {
                *d = *d + g * xv;
            }
        }
    });
    let gb = (0..out).map(|o| (0..rows).fold(T::zero(), |a, r| a + gy[r * out + o])).collect();
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_product() {
        let c = bmm(&[1.0f64; 6], &[1.0; 6], 1, 2, 3, 2);
        assert_eq!(c, vec![3.0; 4]);
    }

    #[test]
    fn batched_product_uses_matching_slices() {
        // batch 0: identity; batch 1: 2*identity
        let a = [1.0f64, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0];
        assert_eq!(bmm(&a, &b, 2, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn linear_matches_manual() {
        let x = [1.0f64, 2.0];
        let w = [1.0, 1.0, 0.5, -1.0, 3.0, 0.0];
        let y = linear(&x, &w, Some(&[0.0, 1.0, -1.0]), 1, 2, 3);
        assert_eq!(y, vec![3.0, -0.5, 2.0]);
    }
}
