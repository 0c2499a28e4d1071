//! Dense f64 kernels behind the layer implementations.
//!
//! Everything is row-major. The three matmul variants cover forward passes
//! (`a_bt`: rows dotted with rows), input gradients (`a_b`), and weight
//! gradients (`at_b`). Inner loops run over contiguous slices with row/rank
//! blocking so the compiler can vectorize them and the blocked operand is
//! reused from registers or L1 instead of being re-streamed.

/// Dot product with 8 independent partial sums, so the reduction pipelines
/// and vectorizes instead of serializing on one accumulator.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (ca, cb) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = 0.0;
    for v in acc {
        s += v;
    }
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        s += x * y;
    }
    s
}

/// c = a (m x k) * b^T where b is (n x k); c is (m x n).
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            cr[j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c += a (m x k) * b^T where b is (n x k); c is (m x n).
pub fn matmul_a_bt_accum(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            cr[j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c = a (m x k) * b (k x n); c is (m x n). Blocks four rows of `a` so each
/// sweep of `b` feeds four output rows.
pub fn matmul_a_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        c0.fill(0.0);
        c1.fill(0.0);
        c2.fill(0.0);
        c3.fill(0.0);
        for kk in 0..k {
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            let br = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                let bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let cr = &mut c[i * n..(i + 1) * n];
        cr.fill(0.0);
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in cr.iter_mut().zip(br) {
                *cv += aik * bv;
            }
        }
        i += 1;
    }
}

/// c += a^T * b where a is (k x m) and b is (k x n); c is (m x n). Blocks
/// four ranks of k per sweep of `c`, so `c` is touched k/4 times instead of
/// k times.
pub fn matmul_at_b_accum(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut kk = 0;
    while kk + 4 <= k {
        let b0 = &b[kk * n..(kk + 1) * n];
        let b1 = &b[(kk + 1) * n..(kk + 2) * n];
        let b2 = &b[(kk + 2) * n..(kk + 3) * n];
        let b3 = &b[(kk + 3) * n..(kk + 4) * n];
        for i in 0..m {
            let a0 = a[kk * m + i];
            let a1 = a[(kk + 1) * m + i];
            let a2 = a[(kk + 2) * m + i];
            let a3 = a[(kk + 3) * m + i];
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let cr = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                cr[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        kk += 4;
    }
    while kk < k {
        let br = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            let cr = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in cr.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
        kk += 1;
    }
}

/// Adds `bias` (length n) to each row of `c` (m x n).
pub fn add_bias_rows(c: &mut [f64], bias: &[f64], m: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(bias.len(), n);
    for i in 0..m {
        for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(bias) {
            *cv += bv;
        }
    }
}

/// bias_grad += column sums of g (m x n).
pub fn bias_grad_accum(g: &[f64], bias_grad: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for (bg, gv) in bias_grad.iter_mut().zip(&g[i * n..(i + 1) * n]) {
            *bg += gv;
        }
    }
}

/// Expands one image (ch x h x w) into columns: output is (ch*ks*ks) x
/// (oh*ow), column p holding the receptive field of output pixel p.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    col: &mut [f64],
    ch: usize,
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    debug_assert_eq!(img.len(), ch * h * w);
    debug_assert_eq!(col.len(), ch * ks * ks * oh * ow);
    let patch = oh * ow;
    for c in 0..ch {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &mut col[((c * ks + ky) * ks + kx) * patch..][..patch];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    let src = &plane[iy * w..];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox * stride + kx];
                    }
                }
            }
        }
    }
}

/// Scatters column gradients back into an image gradient (accumulating).
#[allow(clippy::too_many_arguments)]
pub fn col2im_accum(
    col: &[f64],
    img: &mut [f64],
    ch: usize,
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let patch = oh * ow;
    for c in 0..ch {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &col[((c * ks + ky) * ks + kx) * patch..][..patch];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    let dst = &mut plane[iy * w..];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, s) in src.iter().enumerate() {
                        dst[ox * stride + kx] += s;
                    }
                }
            }
        }
    }
}
