//! Broadcasting, axis permutation and concatenation.

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar};

/// Result shape of broadcasting equal-rank operands (each extent equal or 1).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank {} vs rank {} ({a:?} vs {b:?})", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("dim {i}: {x} vs {y} ({a:?} vs {b:?})"))),
        })
        .collect()
}

/// Strides of `src` viewed under `out`, with 0 on broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    src.iter().zip(out).zip(s).map(|((&d, &o), st)| if d == o { st } else { 0 }).collect()
}

/// Walks the rows (all axes but the last) of `out`, handing each row's base
/// offsets in every operand to `f`.
fn for_each_row(out: &[usize], operand_strides: &[Vec<usize>], mut f: impl FnMut(usize, &[usize])) {
    let rank = out.len();
    if rank == 0 {
        f(0, &vec![0; operand_strides.len()]);
        return;
    }
    let rows = numel(&out[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = vec![0usize; operand_strides.len()];
    for row in 0..rows {
        f(row, &base);
        // odometer increment over the leading axes
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            for (b, s) in base.iter_mut().zip(operand_strides) {
                *b += s[ax];
            }
            if idx[ax] < out[ax] {
                break;
            }
            for (b, s) in base.iter_mut().zip(operand_strides) {
                *b -= s[ax] * out[ax];
            }
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out);
    let sb = broadcast_strides(b_shape, out);
    let last = *out.last().unwrap_or(&1);
    let (la, lb) = (*sa.last().unwrap_or(&0), *sb.last().unwrap_or(&0));
    let mut res = vec![T::zero(); numel(out)];
    for_each_row(out, &[sa, sb], |row, base| {
        let dst = &mut res[row * last..][..last];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(a[base[0] + j * la], b[base[1] + j * lb]);
        }
    });
    res
}

/// Sums `g` (shaped `out`) down to `target`, the pre-broadcast operand shape.
pub fn reduce_to_shape<T: Scalar>(g: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return g.to_vec();
    }
    fold_to_shape(g, out, target, T::zero(), |acc, v| acc + v)
}

/// Folds every element of `g` (shaped `out`) into its broadcast source slot in `target`.
pub fn fold_to_shape<T: Scalar>(g: &[T], out: &[usize], target: &[usize], init: T, f: impl Fn(T, T) -> T) -> Vec<T> {
    let st = broadcast_strides(target, out);
    let last = *out.last().unwrap_or(&1);
    let lt = *st.last().unwrap_or(&0);
    let mut res = vec![init; numel(target)];
    for_each_row(out, &[st], |row, base| {
        let src = &g[row * last..][..last];
        for (j, &v) in src.iter().enumerate() {
            let o = base[0] + j * lt;
            res[o] = f(res[o], v);
        }
    });
    res
}

/// Repeats `x` along its extent-1 axes to fill `out`.
pub fn expand<T: Scalar>(x: &[T], shape: &[usize], out: &[usize]) -> Vec<T> {
    let sx = broadcast_strides(shape, out);
    let last = *out.last().unwrap_or(&1);
    let lx = *sx.last().unwrap_or(&0);
    let mut res = vec![T::zero(); numel(out)];
    for_each_row(out, &[sx], |row, base| {
        for (j, d) in res[row * last..][..last].iter_mut().enumerate() {
            *d = x[base[0] + j * lx];
        }
    });
    res
}

pub fn check_expand(shape: &[usize], out: &[usize]) -> Result<()> {
    if shape.len() != out.len() {
        return Err(Error::shape("expand", format!("rank {} vs {}", shape.len(), out.len())));
    }
    for (i, (&s, &o)) in shape.iter().zip(out).enumerate() {
        if s != o && s != 1 {
            return Err(Error::shape("expand", format!("dim {i}: cannot expand {s} to {o}")));
        }
    }
    Ok(())
}

pub fn permuted_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

/// `out[i_0..i_r] = x[i_{perm^-1}]`, i.e. output axis `k` is input axis `perm[k]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let sx = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
    let last = *out.last().unwrap_or(&1);
    let ls = *src_strides.last().unwrap_or(&0);
    let mut res = vec![T::zero(); x.len()];
    for_each_row(&out, &[src_strides], |row, base| {
        for (j, d) in res[row * last..][..last].iter_mut().enumerate() {
            *d = x[base[0] + j * ls];
        }
    });
    res
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, inner)` sizes around `axis`.
pub fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.len() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {}", first.len())));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        if s.len() != first.len() {
            return Err(Error::shape("concat", format!("rank mismatch {s:?} vs {first:?}")));
        }
        for (i, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
            if i != axis && a != b {
                return Err(Error::shape("concat", format!("dim {i}: {a} vs {b}")));
            }
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

pub fn concat<T: Scalar>(parts: &[(&[T], &[usize])], axis: usize) -> Vec<T> {
    let (outer, inner) = split_at_axis(parts[0].1, axis);
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    let mut res = Vec::with_capacity(total);
    for o in 0..outer {
        for (data, shape) in parts {
            let chunk = shape[axis] * inner;
            res.extend_from_slice(&data[o * chunk..][..chunk]);
        }
    }
    res
}

/// Splits a concatenated gradient back into per-input pieces.
pub fn concat_backward<T: Scalar>(g: &[T], shapes: &[Vec<usize>], axis: usize) -> Vec<Vec<T>> {
    let (outer, inner) = split_at_axis(&shapes[0], axis);
    let mut res: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (r, s) in res.iter_mut().zip(shapes) {
            let chunk = s[axis] * inner;
            r.extend_from_slice(&g[pos..pos + chunk]);
            pos += chunk;
        }
    }
    res
}
