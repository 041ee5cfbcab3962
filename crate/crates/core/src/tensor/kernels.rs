//! Raw compute kernels on flat buffers. Shapes are validated by the caller.

use super::Real;

/// `c (+)= op(a)·op(b)` where `op(a)` is `[m,k]` and `op(b)` is `[k,n]`.
///
/// With `a_t` the buffer `a` holds `[k,m]`; with `b_t` the buffer `b` holds `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    // SAFETY: lengths asserted above; strides describe the stated layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How `conv2d` fills samples outside the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zeros,
    /// Mirror about the edge sample, excluding it (`-1 → 1`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index for padded coordinate `i` along an axis of length `n`,
    /// or `None` for a zero sample.
    fn source(&self, i: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        if (0..n).contains(&i) {
            return Some(i as usize);
        }
        match self.padding {
            Padding::Zeros => None,
            Padding::Reflect => Some(if i < 0 { -i } else { 2 * (n - 1) - i } as usize),
        }
    }
}

/// Unfolds `[C,H,W]` into `[C·kh·kw, Ho·Wo]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.source((oy * g.stride + ki) as isize - g.pad as isize, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        *v = match g.source((ox * g.stride + kj) as isize - g.pad as isize, g.w) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let Some(iy) = g.source((oy * g.stride + ki) as isize - g.pad as isize, g.h) else {
                        continue;
                    };
                    let base = (c * g.h + iy) * g.w;
                    for ox in 0..g.wo {
                        if let Some(ix) = g.source((ox * g.stride + kj) as isize - g.pad as isize, g.w) {
                            let d = &mut dx[base + ix];
                            *d = *d + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let hw = g.ho * g.wo;
    let ck = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); g.o * hw];
    for (o, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(b[o]);
    }
    if g.is_pointwise() {
        gemm(g.o, ck, hw, w, false, x, false, &mut out, true);
    } else {
        let mut cols = vec![T::zero(); ck * hw];
        im2col(g, x, &mut cols);
        gemm(g.o, ck, hw, w, false, &cols, false, &mut out, true);
    }
    out
}

/// Returns `(dx, dw, db)`; any of them may be skipped via the `want_*` flags.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let hw = g.ho * g.wo;
    let ck = g.c * g.kh * g.kw;
    let db = dy.chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
    let pointwise = g.is_pointwise();
    let cols_owned;
    let cols: &[T] = if pointwise {
        x
    } else if want_dw {
        let mut c = vec![T::zero(); ck * hw];
        im2col(g, x, &mut c);
        cols_owned = c;
        &cols_owned
    } else {
        &[]
    };
    let dw = want_dw.then(|| {
        let mut dw = vec![T::zero(); g.o * ck];
        gemm(g.o, hw, ck, dy, false, cols, true, &mut dw, false);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); ck * hw];
        gemm(ck, g.o, hw, w, true, dy, false, &mut dcols, false);
        if pointwise {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.c * g.h * g.w];
            col2im(g, &dcols, &mut dx);
            dx
        }
    });
    (dx, dw, db)
}

/// Per-group statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Real>(
    x: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let cg = c / groups;
    let n = cg * hw;
    let nf = T::of(n as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for grp in 0..groups {
        let span = grp * n..(grp + 1) * n;
        let xs = &x[span.clone()];
        let mean = xs.iter().copied().sum::<T>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (o, &v) in xhat[span].iter_mut().zip(xs) {
            *o = (v - mean) * r;
        }
    }
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        let span = ch * hw..(ch + 1) * hw;
        for (o, &v) in y[span.clone()].iter_mut().zip(&xhat[span]) {
            *o = gamma[ch] * v + beta[ch];
        }
    }
    (y, GroupStats { xhat, rstd })
}

pub fn group_norm_backward<T: Real>(
    dy: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = c / groups;
    let n = cg * hw;
    let nf = T::of(n as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let span = ch * hw..(ch + 1) * hw;
        let mut sg = T::zero();
        let mut sb = T::zero();
        for ((d, &g), &xh) in dxhat[span.clone()]
            .iter_mut()
            .zip(&dy[span.clone()])
            .zip(&stats.xhat[span])
        {
            sg = sg + g * xh;
            sb = sb + g;
            *d = g * gamma[ch];
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
    }
    let mut dx = vec![T::zero(); dy.len()];
    for grp in 0..groups {
        let span = grp * n..(grp + 1) * n;
        let dxh = &dxhat[span.clone()];
        let xh = &stats.xhat[span.clone()];
        let s1: T = dxh.iter().copied().sum();
        let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let r = stats.rstd[grp];
        for ((o, &d), &h) in dx[span].iter_mut().zip(dxh).zip(xh) {
            *o = r / nf * (nf * d - s1 - h * s2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Source taps for one axis of a 2× half-pixel-centred bilinear upsample.
pub fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample2x_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = &dy[ch * ho * wo..(ch + 1) * ho * wo];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let v = g[oy * wo + ox];
                d[y0 * w + x0] = d[y0 * w + x0] + v * wy0 * wx0;
                d[y0 * w + x1] = d[y0 * w + x1] + v * wy0 * wx1;
                d[y1 * w + x0] = d[y1 * w + x0] + v * wy1 * wx0;
                d[y1 * w + x1] = d[y1 * w + x1] + v * wy1 * wx1;
            }
        }
    }
    dx
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
