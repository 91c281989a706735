//! Raw numeric kernels shared by the tape's forward and backward passes.
//!
//! Everything here works on flat row-major slices; shape checking happens in
//! the tape before these are called.

/// `c = op(a) · op(b) + beta · c`, with `op(a)` of size `m × k` and `op(b)`
/// of size `k × n`. A transposed operand is stored row-major in its
/// untransposed layout (`k × m` for `a`, `n × k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above pin each buffer to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (it is `&mut`).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `c × h × w` image into `(c·9) × (h·w)` columns for a 3×3
/// kernel with unit stride and one pixel of zero padding.
pub(crate) fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = valid_range(kx, w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    // output x reads input x + kx - 1
                    dst[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - 1..x_hi + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`]: folds column gradients back onto the image.
pub(crate) fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let (x_lo, x_hi) = valid_range(kx, w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    for (d, s) in dst[x_lo + kx - 1..x_hi + kx - 1]
                        .iter_mut()
                        .zip(&src[x_lo..x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Output columns `[lo, hi)` whose kernel tap `kx` lands inside the row.
fn valid_range(kx: usize, w: usize) -> (usize, usize) {
    match kx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

/// Same-padded 3×3 cross-correlation: `[cin, h, w] → [cout, h, w]`.
pub(crate) fn conv3_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let hw = h * w;
    let cols = im2col3(x, cin, h, w);
    let mut out = vec![0.0; cout * hw];
    for (co, &b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(b);
    }
    gemm(cout, cin * 9, hw, kernel, false, &cols, false, 1.0, &mut out);
    out
}

/// Gradients of [`conv3_forward`] with respect to input, kernel and bias.
pub(crate) struct Conv3Grads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    grad_out: &[f64],
    need_input: bool,
) -> Conv3Grads {
    let hw = h * w;
    let cols = im2col3(x, cin, h, w);
    let mut kernel_grad = vec![0.0; cout * cin * 9];
    gemm(cout, hw, cin * 9, grad_out, false, &cols, true, 0.0, &mut kernel_grad);
    let bias = grad_out.chunks(hw).map(|row| row.iter().sum()).collect();
    let input = if need_input {
        let mut dcols = vec![0.0; cin * 9 * hw];
        gemm(cin * 9, cout, hw, kernel, true, grad_out, false, 0.0, &mut dcols);
        col2im3(&dcols, cin, h, w)
    } else {
        Vec::new()
    };
    Conv3Grads {
        input,
        kernel: kernel_grad,
        bias,
    }
}

/// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Returns the pooled values and, per output, the flat input index that won.
/// Ties go to the first element in row-major order.
pub(crate) fn maxpool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            let r0 = base + 2 * oy * w;
            let r1 = r0 + w;
            for ox in 0..ow {
                let candidates = [r0 + 2 * ox, r0 + 2 * ox + 1, r1 + 2 * ox, r1 + 2 * ox + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Numerically stable in-place softmax of one contiguous slice.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(v)` with max subtraction.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
