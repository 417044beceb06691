//! Slice-level numeric kernels behind the differentiable ops.

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dGeom {
    /// Output positions `o` whose tap `k` reads an in-bounds input sample:
    /// `0 <= o*stride + k - pad < len_in`.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        // o*stride + k - pad <= len_in - 1
        let top = self.len_in + self.pad;
        let hi = if top < k + 1 {
            0
        } else {
            ((top - k - 1) / self.stride + 1).min(self.len_out)
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(
    g: &Conv1dGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let k_len = g.kernel;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let orow = &mut out[(b * g.c_out + co) * g.len_out..][..g.len_out];
            let b0 = bias.map_or(T::zero(), |bs| bs[co]);
            orow.iter_mut().for_each(|v| *v = b0);
            for ci in 0..g.c_in {
                let xrow = &x[(b * g.c_in + ci) * g.len_in..][..g.len_in];
                let wrow = &w[(co * g.c_in + ci) * k_len..][..k_len];
                for (k, &wv) in wrow.iter().enumerate() {
                    let (lo, hi) = g.valid_range(k);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride + k - g.pad;
                    if g.stride == 1 {
                        let xs = &xrow[start..start + (hi - lo)];
                        for (o, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                    } else {
                        for (o, xv) in orow[lo..hi]
                            .iter_mut()
                            .zip(xrow[start..].iter().step_by(g.stride))
                        {
                            *o += wv * *xv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for an upstream `dy`.
pub(crate) fn conv1d_backward<T: Scalar>(
    g: &Conv1dGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let k_len = g.kernel;
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let dyrow = &dy[(b * g.c_out + co) * g.len_out..][..g.len_out];
            if let Some(db) = db.as_deref_mut() {
                db[co] += dyrow.iter().fold(T::zero(), |a, &v| a + v);
            }
            for ci in 0..g.c_in {
                let xoff = (b * g.c_in + ci) * g.len_in;
                let woff = (co * g.c_in + ci) * k_len;
                for k in 0..k_len {
                    let (lo, hi) = g.valid_range(k);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride + k - g.pad;
                    let dys = &dyrow[lo..hi];
                    if let Some(dw) = dw.as_deref_mut() {
                        let xrow = &x[xoff..xoff + g.len_in];
                        let acc = if g.stride == 1 {
                            dys.iter()
                                .zip(&xrow[start..start + (hi - lo)])
                                .fold(T::zero(), |a, (&d, &xv)| a + d * xv)
                        } else {
                            dys.iter()
                                .zip(xrow[start..].iter().step_by(g.stride))
                                .fold(T::zero(), |a, (&d, &xv)| a + d * xv)
                        };
                        dw[woff + k] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[woff + k];
                        let dxrow = &mut dx[xoff..xoff + g.len_in];
                        if g.stride == 1 {
                            for (d, &u) in dxrow[start..start + (hi - lo)].iter_mut().zip(dys) {
                                *d += wv * u;
                            }
                        } else {
                            for (d, &u) in dxrow[start..].iter_mut().step_by(g.stride).zip(dys) {
                                *d += wv * u;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
