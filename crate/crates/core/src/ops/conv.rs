//! Direct 2-D cross-correlation with stride, padding, dilation and groups.
//!
//! Every output element is accumulated by exactly one task in a fixed
//! `(input channel, ky, kx)` order, so results are bit-identical regardless of
//! how many worker threads run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec { stride, padding, dilation, groups }
    }

    /// Stride-`stride` conv whose padding keeps `H' = ceil(H / stride)` for odd kernels.
    pub fn same(kernel: usize, stride: usize, dilation: usize, groups: usize) -> Self {
        ConvSpec { stride, padding: dilation * (kernel - 1) / 2, dilation, groups }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 0, 1, 1)
    }
}

/// Output extent of one spatial axis, or `None` when the window does not fit.
pub fn conv_out_len(input: usize, kernel: usize, spec: &ConvSpec) -> Option<usize> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if padded < span || spec.stride == 0 {
        return None;
    }
    Some((padded - span) / spec.stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], spec: ConvSpec) -> Result<Self> {
        const OP: &str = "conv2d";
        if x.len() != 4 {
            return Err(Error::shape(OP, format!("input must be rank 4 [N,C,H,W], got {x:?}")));
        }
        if weight.len() != 4 {
            return Err(Error::shape(OP, format!("weight must be rank 4, got {weight:?}")));
        }
        if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidParameter(format!("conv2d: {spec:?}")));
        }
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_pg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if cin % spec.groups != 0 {
            return Err(Error::shape(OP, format!("input channels {cin} not divisible by groups {}", spec.groups)));
        }
        if cout % spec.groups != 0 {
            return Err(Error::shape(OP, format!("output channels {cout} not divisible by groups {}", spec.groups)));
        }
        if cin / spec.groups != cin_pg {
            return Err(Error::shape(
                OP,
                format!("weight dim 1 is {cin_pg}, expected input channels / groups = {}", cin / spec.groups),
            ));
        }
        let ho = conv_out_len(h, kh, &spec)
            .ok_or_else(|| Error::DegenerateOutput { op: OP, detail: format!("output height < 1 for H={h}") })?;
        let wo = conv_out_len(w, kw, &spec)
            .ok_or_else(|| Error::DegenerateOutput { op: OP, detail: format!("output width < 1 for W={w}") })?;
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, ho, wo, spec })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.spec.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.spec.groups
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.cin_per_group() * self.kh * self.kw * self.ho * self.wo) as u64
    }

    fn offset(&self, k: usize) -> isize {
        (k * self.spec.dilation) as isize - self.spec.padding as isize
    }
}

/// Output indices `o` in `[lo, hi)` with `o * stride + offset` inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out_len);
    (lo, (hi as usize).clamp(lo, out_len))
}

pub fn forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    let s = g.spec.stride;
    out.par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, op)| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        let grp = co / cout_pg;
        if let Some(b) = bias {
            op.fill(b[co]);
        }
        for cil in 0..cin_pg {
            let ci = grp * cin_pg + cil;
            let xp = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let oy_off = g.offset(ky);
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, s, oy_off);
                for kx in 0..g.kw {
                    let wv = weight[((co * cin_pg + cil) * g.kh + ky) * g.kw + kx];
                    let ox_off = g.offset(kx);
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, s, ox_off);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s) as isize + oy_off;
                        let xrow = &xp[iy as usize * g.w..][..g.w];
                        let orow = &mut op[oy * g.wo..][..g.wo];
                        if s == 1 {
                            let start = (ox_lo as isize + ox_off) as usize;
                            let src = &xrow[start..start + (ox_hi - ox_lo)];
                            for (o, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                                let ix = ((ox * s) as isize + ox_off) as usize;
                                *o = *o + wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn backward_input<T: Scalar>(gout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gx = vec![T::zero(); g.n * g.cin * plane_in];
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    let s = g.spec.stride;
    gx.par_chunks_mut(plane_in.max(1)).enumerate().for_each(|(idx, gp)| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        let (grp, cil) = (ci / cin_pg, ci % cin_pg);
        for co in grp * cout_pg..(grp + 1) * cout_pg {
            let go = &gout[(n * g.cout + co) * plane_out..][..plane_out];
            for ky in 0..g.kh {
                let oy_off = g.offset(ky);
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, s, oy_off);
                for kx in 0..g.kw {
                    let wv = weight[((co * cin_pg + cil) * g.kh + ky) * g.kw + kx];
                    let ox_off = g.offset(kx);
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, s, ox_off);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * s) as isize + oy_off) as usize;
                        let grow = &go[oy * g.wo..][..g.wo];
                        let xrow = &mut gp[iy * g.w..][..g.w];
                        if s == 1 {
                            let start = (ox_lo as isize + ox_off) as usize;
                            let dst = &mut xrow[start..start + (ox_hi - ox_lo)];
                            for (d, &gv) in dst.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *d = *d + wv * gv;
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                                let ix = ((ox * s) as isize + ox_off) as usize;
                                xrow[ix] = xrow[ix] + wv * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub fn backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
    let per_co = cin_pg * g.kh * g.kw;
    let plane_out = g.ho * g.wo;
    let s = g.spec.stride;
    let mut gw = vec![T::zero(); g.cout * per_co];
    gw.par_chunks_mut(per_co.max(1)).enumerate().for_each(|(co, gwc)| {
        let grp = co / cout_pg;
        for cil in 0..cin_pg {
            let ci = grp * cin_pg + cil;
            for ky in 0..g.kh {
                let oy_off = g.offset(ky);
                let (oy_lo, oy_hi) = valid_range(g.ho, g.h, s, oy_off);
                for kx in 0..g.kw {
                    let ox_off = g.offset(kx);
                    let (ox_lo, ox_hi) = valid_range(g.wo, g.w, s, ox_off);
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let go = &gout[(n * g.cout + co) * plane_out..][..plane_out];
                        let xp = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + oy_off) as usize;
                            let grow = &go[oy * g.wo..][..g.wo];
                            let xrow = &xp[iy * g.w..][..g.w];
                            if s == 1 && ox_lo < ox_hi {
                                let start = (ox_lo as isize + ox_off) as usize;
                                for (&gv, &xv) in grow[ox_lo..ox_hi].iter().zip(&xrow[start..]) {
                                    acc = acc + gv * xv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate().take(ox_hi).skip(ox_lo) {
                                    let ix = ((ox * s) as isize + ox_off) as usize;
                                    acc = acc + gv * xrow[ix];
                                }
                            }
                        }
                    }
                    gwc[(cil * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

pub fn backward_bias<T: Scalar>(gout: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    (0..g.cout)
        .map(|co| {
            (0..g.n).fold(T::zero(), |acc, n| {
                gout[(n * g.cout + co) * plane..][..plane].iter().fold(acc, |a, &v| a + v)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook seven-deep loop, used as the reference.
    fn naive(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
        let (cin_pg, cout_pg) = (g.cin_per_group(), g.cout_per_group());
        for n in 0..g.n {
            for co in 0..g.cout {
                let grp = co / cout_pg;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for cil in 0..cin_pg {
                            let ci = grp * cin_pg + cil;
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.spec.stride + ky * g.spec.dilation) as isize
                                        - g.spec.padding as isize;
                                    let ix = (ox * g.spec.stride + kx * g.spec.dilation) as isize
                                        - g.spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = w[((co * cin_pg + cil) * g.kh + ky) * g.kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64, len: usize) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn all_ones_sum() {
        let g = ConvGeom::new(&[1, 1, 3, 3], &[1, 1, 3, 3], ConvSpec::default()).unwrap();
        let out = forward(&[1.0f64; 9], &[1.0; 9], None, &g);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn identity_kernel_with_padding() {
        let mut w = [0.0f64; 9];
        w[4] = 1.0;
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let g = ConvGeom::new(&[1, 1, 3, 3], &[1, 1, 3, 3], ConvSpec::new(1, 1, 1, 1)).unwrap();
        assert_eq!(forward(&x, &w, None, &g), x);
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [
            ([2, 4, 7, 6], [6, 4, 3, 3], ConvSpec::new(1, 1, 1, 1)),
            ([1, 4, 9, 9], [4, 1, 3, 3], ConvSpec::new(2, 1, 1, 4)),
            ([1, 6, 8, 7], [6, 3, 3, 3], ConvSpec::new(1, 2, 2, 2)),
            ([2, 3, 11, 10], [5, 3, 3, 3], ConvSpec::new(2, 6, 6, 1)),
            ([1, 5, 6, 6], [7, 5, 1, 1], ConvSpec::new(1, 0, 1, 1)),
            ([1, 2, 5, 5], [2, 2, 3, 3], ConvSpec::new(3, 18, 18, 1)),
        ];
        for (i, (xs, ws, spec)) in cases.into_iter().enumerate() {
            let g = ConvGeom::new(&xs, &ws, spec).unwrap();
            let x = lcg(i as u64, xs.iter().product());
            let w = lcg(100 + i as u64, ws.iter().product());
            let b = lcg(200 + i as u64, ws[0]);
            let got = forward(&x, &w, Some(&b), &g);
            let want = naive(&x, &w, Some(&b), &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    /// Backward kernels are adjoint to the forward map: <gout, J dx> == <J^T gout, dx>.
    #[test]
    fn backward_is_adjoint() {
        let cases = [
            ([1, 4, 9, 9], [4, 1, 3, 3], ConvSpec::new(2, 1, 1, 4)),
            ([2, 3, 7, 8], [4, 3, 3, 3], ConvSpec::new(1, 2, 2, 1)),
        ];
        for (i, (xs, ws, spec)) in cases.into_iter().enumerate() {
            let g = ConvGeom::new(&xs, &ws, spec).unwrap();
            let x = lcg(i as u64, xs.iter().product());
            let w = lcg(10 + i as u64, ws.iter().product());
            let gout = lcg(20 + i as u64, g.n * g.cout * g.ho * g.wo);
            let y = forward(&x, &w, None, &g);
            let gx = backward_input(&gout, &w, &g);
            let gw = backward_weight(&gout, &x, &g);
            let lhs: f64 = y.iter().zip(&gout).map(|(a, b)| a * b).sum();
            let via_x: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9, "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-9, "{lhs} vs {via_w}");
        }
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let err = ConvGeom::new(&[1, 3, 8, 8], &[4, 3, 3, 3], ConvSpec::new(1, 0, 1, 2)).unwrap_err();
        assert!(err.to_string().contains("input channels 3"), "{err}");
        let err = ConvGeom::new(&[1, 4, 8, 8], &[4, 3, 3, 3], ConvSpec::default()).unwrap_err();
        assert!(err.to_string().contains("weight dim 1"), "{err}");
        let err = ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], ConvSpec::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateOutput { .. }), "{err}");
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(5, 5, 1, -1), (1, 5));
        assert_eq!(valid_range(5, 5, 1, 1), (0, 4));
        assert_eq!(valid_range(3, 5, 2, -1), (1, 3));
        assert_eq!(valid_range(4, 4, 1, -18), (4, 4));
        assert_eq!(valid_range(4, 4, 1, 18), (0, 0));
    }
}
