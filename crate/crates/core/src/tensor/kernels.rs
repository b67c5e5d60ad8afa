//! Slice-level compute kernels shared by the tape's forward and backward passes.

use super::Scalar;

/// `out (+)= a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (+)= a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out (+)= a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
}

/// Grouped 2-D cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.c_out * plane];
    for co in 0..g.c_out {
        let grp = co / cout_g;
        let o = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((co * cin_g + cil) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = &xp[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *ov += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let plane = g.oh * g.ow;
    if let Some(gb) = gb {
        for co in 0..g.c_out {
            gb[co] += gout[co * plane..(co + 1) * plane]
                .iter()
                .fold(T::zero(), |a, &b| a + b);
        }
    }
    for co in 0..g.c_out {
        let grp = co / cout_g;
        let go = &gout[co * plane..(co + 1) * plane];
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let xoff = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((co * cin_g + cil) * g.kh + ky) * g.kw + kx;
                    let wv = w[widx];
                    let mut acc = T::zero();
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let rowoff = xoff + iy as usize * g.w;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let gv = go[oy * g.ow + ox];
                            let xi = rowoff + ix as usize;
                            acc += gv * x[xi];
                            if let Some(gx) = gx.as_deref_mut() {
                                gx[xi] += gv * wv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Returns pooled values and, per output, the flat input index of the
/// window maximum (first occurrence wins). Padding never wins.
pub fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let n = g.c * g.oh * g.ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = T::neg_infinity();
                let mut bi = usize::MAX;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = (c * g.h + iy as usize) * g.w + ix as usize;
                        if bi == usize::MAX || x[idx] > best {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (out, arg)
}

/// Mean over each window; padded cells count as zeros in the divisor.
pub fn avg_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let inv = T::one() / T::lit((g.k * g.k) as f64);
    let mut out = Vec::with_capacity(g.c * g.oh * g.ow);
    for c in 0..g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        acc += x[(c * g.h + iy as usize) * g.w + ix as usize];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(g: &PoolGeom, gout: &[T], gx: &mut [T]) {
    let inv = T::one() / T::lit((g.k * g.k) as f64);
    let mut o = 0;
    for c in 0..g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = gout[o] * inv;
                o += 1;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        gx[(c * g.h + iy as usize) * g.w + ix as usize] += gv;
                    }
                }
            }
        }
    }
}

pub fn upsample_nearest<T: Scalar>(c: usize, h: usize, w: usize, f: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let row = &x[(ch * h + oy / f) * w..(ch * h + oy / f + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Scalar>(
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    gout: &[T],
    gx: &mut [T],
) {
    let (oh, ow) = (h * f, w * f);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                gx[(ch * h + oy / f) * w + ox / f] += gout[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3×4
        let mut nn = vec![0.0; 8];
        gemm_nn(2, 3, 4, &a, &b, &mut nn);
        let bt = transpose(3, 4, &b);
        let mut nt = vec![0.0; 8];
        gemm_nt(2, 3, 4, &a, &bt, &mut nt);
        let at = transpose(2, 3, &a);
        let mut tn = vec![0.0; 8];
        gemm_tn(2, 3, 4, &at, &b, &mut tn);
        assert_eq!(nn, nt);
        assert_eq!(nn, tn);
    }
}
