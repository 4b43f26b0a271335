//! Dense kernels. Inner loops are written over contiguous slices so they
//! vectorize; reductions use eight partial sums for the same reason.

use crate::scalar::Scalar;

#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    s + (pairs[0] + pairs[2]) + (pairs[1] + pairs[3])
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], ci);
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let bp = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != T::zero() {
                axpy(av, bp, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// 2-D convolution geometry for one `[C, H, W]` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad.0 - self.k_h) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad.1 - self.k_w) / self.stride.1 + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfolds one sample into `[C·KH·KW, OH·OW]`.
    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        for c in 0..self.in_c {
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (c * self.k_h + ky) * self.k_w + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy as usize >= self.in_h {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.in_h + iy as usize) * self.in_w..][..self.in_w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                            *d = if ix < 0 || ix as usize >= self.in_w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates columns back into `dx`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let p = oh * ow;
        for c in 0..self.in_c {
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (c * self.k_h + ky) * self.k_w + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride.0 + ky) as isize - self.pad.0 as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride.1 + kx) as isize - self.pad.1 as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dx[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
