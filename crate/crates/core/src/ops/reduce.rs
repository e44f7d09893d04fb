//! Axis reductions (mean, LP pooling) and softmax.

use crate::error::{Error, Result};
use crate::ops::shape::{expand, fold_to_shape, reduce_to_shape, split_at_axis};
use crate::tensor::{numel, Scalar};

/// Shape after reducing `axes` with kept (extent-1) dimensions.
pub fn reduced_shape(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut out = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::shape(op, format!("axis {a} out of range for rank {}", shape.len())));
        }
        if shape[a] == 0 {
            return Err(Error::shape(op, format!("axis {a} has extent 0")));
        }
        out[a] = 1;
    }
    Ok(out)
}

pub fn mean<T: Scalar>(x: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    let n = T::of((numel(shape) / numel(out).max(1)) as f64);
    reduce_to_shape(x, shape, out).into_iter().map(|v| v / n).collect()
}

pub fn mean_backward<T: Scalar>(g: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    let n = T::of((numel(shape) / numel(out).max(1)) as f64);
    let g: Vec<T> = g.iter().map(|&v| v / n).collect();
    expand(&g, out, shape)
}

/// Generalized mean `(mean |x|^p)^(1/p)` over the reduced axes.
///
/// `p = 1` and `p = 2` take exact closed paths; other `p` rescale by the
/// per-slot maximum so large exponents do not overflow.
pub fn lp_pool<T: Scalar>(x: &[T], shape: &[usize], out: &[usize], p: f64) -> Vec<T> {
    let n = T::of((numel(shape) / numel(out).max(1)) as f64);
    if p == 1.0 {
        let abs: Vec<T> = x.iter().map(|v| v.abs()).collect();
        return reduce_to_shape(&abs, shape, out).into_iter().map(|v| v / n).collect();
    }
    if p == 2.0 {
        let sq: Vec<T> = x.iter().map(|&v| v * v).collect();
        return reduce_to_shape(&sq, shape, out).into_iter().map(|v| (v / n).sqrt()).collect();
    }
    let pt = T::of(p);
    let maxes = fold_to_shape(x, shape, out, T::zero(), |m, v| m.max(v.abs()));
    let m_full = expand(&maxes, out, shape);
    let scaled: Vec<T> = x
        .iter()
        .zip(&m_full)
        .map(|(&v, &m)| if m > T::zero() { (v.abs() / m).powf(pt) } else { T::zero() })
        .collect();
    reduce_to_shape(&scaled, shape, out)
        .into_iter()
        .zip(maxes)
        .map(|(s, m)| m * (s / n).powf(T::one() / pt))
        .collect()
}

/// `d out / d x_i = sign(x_i) (|x_i| / out)^(p-1) / n`; zero where `out == 0`.
pub fn lp_pool_backward<T: Scalar>(g: &[T], x: &[T], y: &[T], shape: &[usize], out: &[usize], p: f64) -> Vec<T> {
    let n = T::of((numel(shape) / numel(out).max(1)) as f64);
    let gy = expand(g, out, shape);
    let yy = expand(y, out, shape);
    x.iter()
        .zip(gy.iter().zip(&yy))
        .map(|(&xv, (&gv, &yv))| {
            if yv <= T::zero() || xv == T::zero() {
                return T::zero();
            }
            let sign = xv.signum();
            let factor = if p == 1.0 {
                T::one()
            } else if p == 2.0 {
                xv.abs() / yv
            } else {
                (xv.abs() / yv).powf(T::of(p - 1.0))
            };
            gv * sign * factor / n
        })
        .collect()
}

pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, inner) = split_at_axis(shape, axis);
    let len = shape[axis];
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - m).exp();
                out[at(k)] = e;
                sum = sum + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    out
}

/// `gx = y * (g - sum(g * y))` along the axis.
pub fn softmax_backward<T: Scalar>(g: &[T], y: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, inner) = split_at_axis(shape, axis);
    let len = shape[axis];
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dotp = (0..len).fold(T::zero(), |a, k| a + g[at(k)] * y[at(k)]);
            for k in 0..len {
                gx[at(k)] = y[at(k)] * (g[at(k)] - dotp);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lp_closed_forms() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(lp_pool(&x, &[4], &[1], 1.0), vec![2.5]);
        let y = lp_pool(&[3.0f64, 4.0], &[2], &[1], 2.0)[0];
        assert!((y - (12.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lp_general_p_agrees_with_direct_formula() {
        let x = [0.5f64, 1.5, 2.0, 0.1];
        let direct = (x.iter().map(|v| v.powf(3.0)).sum::<f64>() / 4.0).powf(1.0 / 3.0);
        let got = lp_pool(&x, &[4], &[1], 3.0)[0];
        assert!((got - direct).abs() < 1e-14, "{got} vs {direct}");
    }

    #[test]
    fn lp_p64_tends_to_max() {
        // mean-normalized: 4 * (1/4)^(1/64) plus negligible terms
        let y = lp_pool(&[1.0f64, 2.0, 3.0, 4.0], &[4], &[1], 64.0)[0];
        let expected = 4.0 * (1.0f64 + 0.75f64.powi(64) + 0.5f64.powi(64) + 0.25f64.powi(64)).powf(1.0 / 64.0) / 4.0f64.powf(1.0 / 64.0);
        assert!((y - expected).abs() < 1e-12, "{y} vs {expected}");
        assert!((y - 3.914288).abs() < 1e-6);
        assert!(y < 4.0 && y > lp_pool(&[1.0f64, 2.0, 3.0, 4.0], &[4], &[1], 32.0)[0]);
    }

    #[test]
    fn lp_huge_p_does_not_overflow() {
        let y = lp_pool(&[1.0f64, 2.0, 3.0, 4.0], &[4], &[1], 1000.0)[0];
        assert!(y.is_finite() && (4.0 - y).abs() < 1e-2, "{y}");
    }

    #[test]
    fn lp_over_channel_axis() {
        // [1, 2, 1, 2]: reduce channel axis 1
        let x = [1.0f64, 3.0, 3.0, 5.0];
        let y = lp_pool(&x, &[1, 2, 1, 2], &[1, 1, 1, 2], 1.0);
        assert_eq!(y, vec![2.0, 4.0]);
    }

    #[test]
    fn softmax_rows() {
        let y = softmax(&[0.0f64, 0.0, 0.0], &[3], 0);
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&[1000.0f64, 0.0], &[2], 0);
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1] < 1e-300 && y[1] >= 0.0);
    }

    #[test]
    fn softmax_inner_axis() {
        // shape [2, 2], softmax over axis 0 (columns)
        let y = softmax(&[0.0f64, 1.0, 0.0, 1.0], &[2, 2], 0);
        for v in y {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }
}
