//! Raw compute kernels shared by the autodiff tape and the inference path.
//!
//! All kernels take row-major slices. The matmul uses an i-k-j loop order so
//! the inner loop is a contiguous axpy that autovectorizes.

use crate::tensor::Scalar;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// da[m,k] += dy[m,n] * b[k,n]^T
pub fn matmul_grad_a<T: Scalar>(dy: &[T], b: &[T], m: usize, k: usize, n: usize, da: &mut [T]) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(da.len(), m * k);
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (dv, bv) in dy_row.iter().zip(b_row.iter()) {
                acc = acc + *dv * *bv;
            }
            da_row[p] = da_row[p] + acc;
        }
    }
}

/// db[k,n] += a[m,k]^T * dy[m,n]
pub fn matmul_grad_b<T: Scalar>(a: &[T], dy: &[T], m: usize, k: usize, n: usize, db: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let dy_row = &dy[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (dbv, &dv) in db_row.iter_mut().zip(dy_row.iter()) {
                *dbv = *dbv + a_ip * dv;
            }
        }
    }
}

/// Valid-padding cross-correlation geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Patch length per output position: c_in * kh * kw.
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Output positions per image.
    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// x[batch, c_in, h, w] -> cols[batch * h_out * w_out, c_in * kh * kw]
///
/// Column order within a patch is (c_in, kh, kw) row-major, which matches the
/// [n_in, a, n_out] weight layout flattened to [c_in * a, c_out].
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let patch = g.patch();
    debug_assert_eq!(cols.len(), g.batch * g.positions() * patch);
    let img = g.c_in * g.h * g.w;
    let mut row = 0;
    for b in 0..g.batch {
        let xb = &x[b * img..(b + 1) * img];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                let iy0 = oy * g.stride;
                let ix0 = ox * g.stride;
                let mut di = 0;
                for c in 0..g.c_in {
                    let plane = &xb[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let src = &plane[(iy0 + ky) * g.w + ix0..(iy0 + ky) * g.w + ix0 + g.kw];
                        dst[di..di + g.kw].copy_from_slice(src);
                        di += g.kw;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input image gradient.
pub fn col2im_add<T: Scalar>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    debug_assert_eq!(dx.len(), g.batch * g.c_in * g.h * g.w);
    let img = g.c_in * g.h * g.w;
    let mut row = 0;
    for b in 0..g.batch {
        let dxb = &mut dx[b * img..(b + 1) * img];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let src = &dcols[row * patch..(row + 1) * patch];
                let iy0 = oy * g.stride;
                let ix0 = ox * g.stride;
                let mut si = 0;
                for c in 0..g.c_in {
                    let plane = &mut dxb[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let dst =
                            &mut plane[(iy0 + ky) * g.w + ix0..(iy0 + ky) * g.w + ix0 + g.kw];
                        for (d, s) in dst.iter_mut().zip(&src[si..si + g.kw]) {
                            *d = *d + *s;
                        }
                        si += g.kw;
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2x2 max pooling with stride 2; records the argmax flat index per output
/// cell for the backward pass. Extents must be even.
pub fn maxpool2<T: Scalar>(
    x: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    argmax: &mut [usize],
) {
    let ho = h / 2;
    let wo = w / 2;
    debug_assert_eq!(out.len(), batch * c * ho * wo);
    let mut oi = 0;
    for bc in 0..batch * c {
        let plane = &x[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (2 * oy) * w + 2 * ox;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                out[oi] = plane[best];
                argmax[oi] = bc * h * w + best;
                oi += 1;
            }
        }
    }
}
