//! Raw numeric kernels behind the tape ops.
//!
//! All kernels are deterministic: parallelism only splits work over disjoint
//! output slabs, never over reduction order.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Work below this many output elements stays single-threaded.
const PAR_THRESHOLD: usize = 16 * 1024;

/// C[m,n] += A[m,k] * B[k,n] on contiguous row-major slices.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * n..p * n + n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * *bj;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// C[m,n] += A[m,k] * B[k,n]^T, i.e. B given as [n,k].
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b_t: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b_t.len(), n * k);
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..i * k + k];
        for (j, cj) in row.iter_mut().enumerate() {
            let brow = &b_t[j * k..j * k + k];
            let mut s = T::ZERO;
            for (x, y) in arow.iter().zip(brow) {
                s += *x * *y;
            }
            *cj += s;
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n].
pub fn matmul_at_acc<T: Scalar>(a_t: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a_t.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let aip = a_t[p * m + i];
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * n..p * n + n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * *bj;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// Valid cross-correlation.
/// x: [b, cin, h, w], k: [cout, cin, kh, kw] -> out [b, cout, oh, ow].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_valid<T: Scalar>(
    x: &[T],
    k: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> Vec<T> {
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let mut out = vec![T::ZERO; b * cout * oh * ow];
    let plane = |bi: usize, co: usize, dst: &mut [T]| {
        let xb = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
        for ci in 0..cin {
            let xp = &xb[ci * h * w..(ci + 1) * h * w];
            let kp = &k[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kp[ky * kw + kx];
                    if wv == T::ZERO {
                        continue;
                    }
                    for oy in 0..oh {
                        let src = &xp[(oy * sh + ky) * w + kx..];
                        let drow = &mut dst[oy * ow..oy * ow + ow];
                        if sw == 1 {
                            for (d, s) in drow.iter_mut().zip(src.iter()) {
                                *d += wv * *s;
                            }
                        } else {
                            for ox in 0..ow {
                                drow[ox] += wv * src[ox * sw];
                            }
                        }
                    }
                }
            }
        }
    };
    if b * cout * oh * ow >= PAR_THRESHOLD && b * cout > 1 {
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(i, dst)| {
            plane(i / cout, i % cout, dst);
        });
    } else {
        for (i, dst) in out.chunks_mut(oh * ow).enumerate() {
            plane(i / cout, i % cout, dst);
        }
    }
    out
}

/// Gradient of `conv2d_valid` w.r.t. the input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_valid_grad_x<T: Scalar>(
    dy: &[T],
    k: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> Vec<T> {
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let mut dx = vec![T::ZERO; b * cin * h * w];
    let plane = |bi: usize, ci: usize, dst: &mut [T]| {
        for co in 0..cout {
            let dyp = &dy[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            let kp = &k[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kp[ky * kw + kx];
                    if wv == T::ZERO {
                        continue;
                    }
                    for oy in 0..oh {
                        let g = &dyp[oy * ow..oy * ow + ow];
                        let base = (oy * sh + ky) * w + kx;
                        for (ox, gv) in g.iter().enumerate() {
                            dst[base + ox * sw] += wv * *gv;
                        }
                    }
                }
            }
        }
    };
    if b * cin * h * w >= PAR_THRESHOLD && b * cin > 1 {
        dx.par_chunks_mut(h * w).enumerate().for_each(|(i, dst)| {
            plane(i / cin, i % cin, dst);
        });
    } else {
        for (i, dst) in dx.chunks_mut(h * w).enumerate() {
            plane(i / cin, i % cin, dst);
        }
    }
    dx
}

/// Gradient of `conv2d_valid` w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_valid_grad_k<T: Scalar>(
    dy: &[T],
    x: &[T],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> Vec<T> {
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let mut dk = vec![T::ZERO; cout * cin * kh * kw];
    let tap = |co: usize, ci: usize, dst: &mut [T]| {
        for ky in 0..kh {
            for kx in 0..kw {
                let mut s = T::ZERO;
                for bi in 0..b {
                    let dyp = &dy[(bi * cout + co) * oh * ow..];
                    let xp = &x[(bi * cin + ci) * h * w..];
                    for oy in 0..oh {
                        let g = &dyp[oy * ow..oy * ow + ow];
                        let base = (oy * sh + ky) * w + kx;
                        for (ox, gv) in g.iter().enumerate() {
                            s += *gv * xp[base + ox * sw];
                        }
                    }
                }
                dst[ky * kw + kx] = s;
            }
        }
    };
    if cout * cin * kh * kw * oh * ow >= PAR_THRESHOLD && cout * cin > 1 {
        dk.par_chunks_mut(kh * kw).enumerate().for_each(|(i, dst)| {
            tap(i / cin, i % cin, dst);
        });
    } else {
        for (i, dst) in dk.chunks_mut(kh * kw).enumerate() {
            tap(i / cin, i % cin, dst);
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // A 2x3, B 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5f64, -1.0, 2.0, 0.0, 1.0, 3.0];
        let mut c0 = [0.0f64; 4];
        matmul_acc(&a, &b, &mut c0, 2, 3, 2);

        // B^T is 2x3
        let bt = [0.5f64, 2.0, 1.0, -1.0, 0.0, 3.0];
        let mut c1 = [0.0f64; 4];
        matmul_bt_acc(&a, &bt, &mut c1, 2, 3, 2);

        // A^T is 3x2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0f64; 4];
        matmul_at_acc(&at, &b, &mut c2, 2, 3, 2);

        assert_eq!(c0, [7.5, 8.0, 18.0, 14.0]);
        assert_eq!(c0, c1);
        assert_eq!(c0, c2);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of value 1 reproduces each channel
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let k = [1.0f64, 0.0, 0.0, 1.0]; // [2,2,1,1] identity across channels
        let y = conv2d_valid(&x, &k, 1, 2, 3, 4, 2, 1, 1, 1, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride_two() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect(); // 1x1x4x4
        let k = [1.0f64]; // 1x1x1x1
        let y = conv2d_valid(&x, &k, 1, 1, 4, 4, 1, 1, 1, 2, 2);
        assert_eq!(y, vec![0.0, 2.0, 8.0, 10.0]);
    }
}
