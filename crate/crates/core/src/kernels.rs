//! Raw dense kernels behind the differentiable operations.
//!
//! Everything here works on flat row-major slices and runs its reductions in
//! a fixed order, so repeated calls on identical inputs are bitwise identical.

use crate::tensor::Scalar;

/// `out (+)= a · b` with `a: [m, k]`, `b: [k, n]`.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T], acc: bool) {
    if !acc {
        out[..m * n].fill(T::zero());
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out (+)= a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T], acc: bool) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |s, (&x, &y)| s + x * y);
            let o = &mut out[i * n + j];
            *o = if acc { *o + dot } else { dot };
        }
    }
}

/// `out (+)= aᵀ · b` with `a: [k, m]`, `b: [k, n]`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T], acc: bool) {
    if !acc {
        out[..m * n].fill(T::zero());
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Geometry of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one sample `[C, H, W]` into columns `[C·kh·kw, OH·OW]`.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let r = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy < 0
                            || ix < 0
                            || iy >= g.height as isize
                            || ix >= g.width as isize
                        {
                            T::zero()
                        } else {
                            plane[iy as usize * g.width + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto one sample `[C, H, W]` (accumulating).
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let r = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let d = &mut plane[iy as usize * g.width + ix as usize];
                        *d = *d + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation; returns `[N, O, OH, OW]` values.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let (r, p) = (g.patch_len(), g.positions());
    let sample_in = g.in_channels * g.height * g.width;
    let sample_out = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * sample_out];
    let mut col = vec![T::zero(); r * p];
    for n in 0..g.batch {
        im2col(g, &x[n * sample_in..(n + 1) * sample_in], &mut col);
        gemm_nn(
            g.out_channels,
            r,
            p,
            kernel,
            &col,
            &mut out[n * sample_out..(n + 1) * sample_out],
            false,
        );
    }
    out
}

/// Adjoints of the cross-correlation with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (r, p) = (g.patch_len(), g.positions());
    let sample_in = g.in_channels * g.height * g.width;
    let sample_out = g.out_channels * p;
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * sample_in]);
    let mut dk = need_dk.then(|| vec![T::zero(); g.out_channels * r]);
    let mut col = vec![T::zero(); r * p];
    for n in 0..g.batch {
        let dy = &dout[n * sample_out..(n + 1) * sample_out];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[n * sample_in..(n + 1) * sample_in], &mut col);
            gemm_nt(g.out_channels, p, r, dy, &col, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm_tn(r, g.out_channels, p, kernel, dy, &mut col, false);
            col2im(g, &col, &mut dx[n * sample_in..(n + 1) * sample_in]);
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut nn = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut nn, false);
        assert_eq!(nn, [58.0, 64.0, 139.0, 154.0]);

        // bᵀ stored as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut nt, false);
        assert_eq!(nt, nn);

        // aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut tn, false);
        assert_eq!(tn, nn);
    }

    #[test]
    fn padded_strided_conv_matches_direct_sum() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 2,
            height: 5,
            width: 4,
            out_channels: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let out = conv2d_forward(&g, &x, &k);
        let (oh, ow) = (g.out_h(), g.out_w());
        assert_eq!((oh, ow), (3, 2));
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    s += x[((n * 2 + c) * 5 + iy as usize) * 4 + ix as usize]
                                        * k[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        assert_eq!(out[((n * 3 + o) * oh + oy) * ow + ox], s);
                    }
                }
            }
        }
    }
}
