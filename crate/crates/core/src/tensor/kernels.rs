//! Raw compute kernels behind the conv/deconv ops.
//!
//! Every kernel accumulates each output element in a fixed serial order, so
//! results are bit-identical regardless of how callers parallelize over
//! independent output regions.

use super::Elem;

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub fn gemm_nn<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + aik * *bj;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T` (dot products of rows).
pub fn gemm_nt<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in a_row.iter().zip(b_row) {
                acc = acc + *av * *bv;
            }
            c_row[j] = c_row[j] + acc;
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`.
pub fn gemm_tn<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a_row[i];
            if aki == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + aki * *bj;
            }
        }
    }
}

/// Geometry of one convolution plane mapping.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unpacks image patches into a `[C*kh*kw, oh*ow]` matrix (zero padding).
pub fn im2col<T: Elem>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(x.len(), g.channels * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * cols;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let out_row = row + oy * g.ow;
                    if iy < 0 || iy >= g.h as isize {
                        col[out_row..out_row + g.ow].fill(T::zero());
                        continue;
                    }
                    let src_row = iy as usize * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        col[out_row + ox] = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            plane[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-accumulates a column matrix back into an image (adjoint of
/// [`im2col`]). `x` must be zero-initialized by the caller.
pub fn col2im<T: Elem>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    debug_assert_eq!(x.len(), g.channels * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * cols;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * g.w;
                    let src_row = row + oy * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let idx = dst_row + ix as usize;
                            plane[idx] = plane[idx] + col[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}
