//! Numeric kernels behind the tape operations: matrix products, convolution
//! lowering (im2col / col2im) and instance normalization.

use std::cell::RefCell;

/// Spatial output size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub fn conv_transpose_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    ((input - 1) * stride + kernel).checked_sub(2 * padding)
}

/// Strides of a row-major `rows x cols` matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn rm(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn rm_t(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a @ b + beta * c`, with `c` row-major.
pub(crate) fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64], beta: f64) {
    assert_eq!(av.cols, bv.rows);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == 0.0 { 0.0 } else { *v * beta };
        }
        return;
    }
    // SAFETY: the views describe in-bounds strided layouts of `a`, `b`, `c`
    // (checked by the callers' shape validation and the asserts above).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reused buffer of `len` values with unspecified contents;
/// `f` must overwrite it before reading (e.g. `gemm` with `beta = 0`).
fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Lowers `[N, C, H, W]` into `[C*k*k, N*Ho*Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut col = Vec::with_capacity(g.col_rows() * cols);
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let (lo, hi) = valid_range(g.out_w, g.width, g.stride, kj, g.padding);
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + c) * plane..][..plane];
                    for oi in 0..g.out_h {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.height as isize || lo >= hi {
                            col.resize(col.len() + g.out_w, 0.0);
                            continue;
                        }
                        let src_row = &src[ii as usize * g.width..][..g.width];
                        col.resize(col.len() + lo, 0.0);
                        let first = lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            col.extend_from_slice(&src_row[first..first + (hi - lo)]);
                        } else {
                            col.extend((0..hi - lo).map(|t| src_row[first + t * g.stride]));
                        }
                        col.resize(col.len() + g.out_w - hi, 0.0);
                    }
                }
            }
        }
    }
    debug_assert_eq!(col.len(), g.col_rows() * cols);
    col
}

/// Output columns `lo..hi` whose input column `o * stride + k - padding`
/// falls inside `0..width`.
fn valid_range(out_w: usize, width: usize, stride: usize, k: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    // Largest o with o * stride + k <= width - 1 + padding.
    let hi = if k > width - 1 + padding {
        0
    } else {
        ((width - 1 + padding - k) / stride + 1).min(out_w)
    };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters `[C*k*k, N*Ho*Wo]` back into `[N, C, H, W]`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut x = vec![0.0; g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let (lo, hi) = valid_range(g.out_w, g.width, g.stride, kj, g.padding);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.padding;
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.channels + c) * plane..][..plane];
                    for oi in 0..g.out_h {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        let s = &src[n * out_plane + oi * g.out_w..][lo..hi];
                        let d = &mut dst[ii as usize * g.width..][..g.width];
                        if g.stride == 1 {
                            for (a, b) in d[first..first + (hi - lo)].iter_mut().zip(s) {
                                *a += b;
                            }
                        } else {
                            for (t, b) in s.iter().enumerate() {
                                d[first + t * g.stride] += b;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, P]` -> `[C, N*P]`.
pub(crate) fn batch_to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for b in 0..n {
            out.extend_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, N*P]` -> `[N, C, P]`.
pub(crate) fn channel_to_batch_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            out.extend_from_slice(&x[ch * n * p + b * p..][..p]);
        }
    }
    out
}

/// Forward convolution. `weight` is `[O, C, k, k]`, `bias` is `[O]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let col = im2col(x, g);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out_cm = vec![0.0; out_channels * cols];
    gemm(
        weight,
        MatView::rm(out_channels, rows),
        &col,
        MatView::rm(rows, cols),
        &mut out_cm,
        0.0,
    );
    let p = g.out_h * g.out_w;
    let mut out = channel_to_batch_major(&out_cm, g.batch, out_channels, p);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.batch, out_channels, p);
    }
    out
}

pub(crate) fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, p: usize) {
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            for v in &mut out[(b * c + ch) * p..][..p] {
                *v += bv;
            }
        }
    }
}

pub(crate) fn channel_bias_grad(grad: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut gb = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in gb.iter_mut().enumerate() {
            *acc += grad[(b * c + ch) * p..][..p].iter().sum::<f64>();
        }
    }
    gb
}

/// Gradients of a convolution with respect to input and weight.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    out_channels: usize,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let p = g.out_h * g.out_w;
    let gout_cm = batch_to_channel_major(grad_out, g.batch, out_channels, p);
    let gw = need_weight.then(|| {
        let col = im2col(x, g);
        let mut gw = vec![0.0; out_channels * rows];
        gemm(
            &gout_cm,
            MatView::rm(out_channels, cols),
            &col,
            MatView::rm_t(rows, cols),
            &mut gw,
            0.0,
        );
        gw
    });
    let gx = need_input.then(|| {
        with_scratch(rows * cols, |gcol| {
            gemm(
                weight,
                MatView::rm_t(out_channels, rows),
                &gout_cm,
                MatView::rm(out_channels, cols),
                gcol,
                0.0,
            );
            col2im(gcol, g)
        })
    });
    (gx, gw)
}

/// Transposed convolution. `weight` is `[C_in, C_out, k, k]`; `g` describes the
/// adjoint convolution from the output `[N, C_out, Ho, Wo]` back to the input
/// `[N, C_in, H, W]` (so `g.out_h == H`).
pub(crate) fn conv_transpose_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    in_channels: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let p_in = g.out_h * g.out_w;
    let x_cm = batch_to_channel_major(x, g.batch, in_channels, p_in);
    let mut out = with_scratch(rows * cols, |col| {
        gemm(
            weight,
            MatView::rm_t(in_channels, rows),
            &x_cm,
            MatView::rm(in_channels, cols),
            col,
            0.0,
        );
        col2im(col, g)
    });
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.batch, g.channels, g.height * g.width);
    }
    out
}

pub(crate) fn conv_transpose_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    in_channels: usize,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let p_in = g.out_h * g.out_w;
    let gcol = im2col(grad_out, g);
    let gx = need_input.then(|| {
        let mut gx_cm = vec![0.0; in_channels * cols];
        gemm(
            weight,
            MatView::rm(in_channels, rows),
            &gcol,
            MatView::rm(rows, cols),
            &mut gx_cm,
            0.0,
        );
        channel_to_batch_major(&gx_cm, g.batch, in_channels, p_in)
    });
    let gw = need_weight.then(|| {
        let x_cm = batch_to_channel_major(x, g.batch, in_channels, p_in);
        let mut gw = vec![0.0; in_channels * rows];
        gemm(
            &x_cm,
            MatView::rm(in_channels, cols),
            &gcol,
            MatView::rm_t(rows, cols),
            &mut gw,
            0.0,
        );
        gw
    });
    (gx, gw)
}

/// Per-(sample, channel) normalization over `p` spatial positions. Returns the
/// normalized values and the per-group inverse standard deviations.
pub(crate) fn instance_norm_forward(x: &[f64], groups: usize, p: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for gi in 0..groups {
        let src = &x[gi * p..][..p];
        let mean = src.iter().sum::<f64>() / p as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[gi] = is;
        for (o, v) in out[gi * p..][..p].iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
    }
    (out, inv_std)
}

pub(crate) fn instance_norm_backward(y: &[f64], inv_std: &[f64], grad: &[f64], p: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for (gi, &is) in inv_std.iter().enumerate() {
        let ys = &y[gi * p..][..p];
        let gs = &grad[gi * p..][..p];
        let mean_g = gs.iter().sum::<f64>() / p as f64;
        let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / p as f64;
        for ((o, &gv), &yv) in gx[gi * p..][..p].iter_mut().zip(gs).zip(ys) {
            *o = is * (gv - mean_g - yv * mean_gy);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom, o: usize) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * o * g.out_h * g.out_w];
        for n in 0..g.batch {
            for oc in 0..o {
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.channels {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                                    let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                                    if ii < 0 || jj < 0 || ii >= g.height as isize || jj >= g.width as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.channels + c) * g.height + ii as usize) * g.width + jj as usize]
                                        * w[((oc * g.channels + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                        out[((n * o + oc) * g.out_h + oi) * g.out_w + oj] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        let g = ConvGeom {
            batch: 2,
            channels: 3,
            height: 6,
            width: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..2 * 3 * 36).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.5).collect();
        let fast = conv2d_forward(&x, &w, None, 4, &g);
        let slow = naive_conv(&x, &w, &g, 4);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 1,
            channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
            out_h: 3,
            out_w: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn lowering_agrees_across_geometries() {
        for (h, w, k, stride, padding) in [
            (5, 7, 3, 1, 1),
            (6, 6, 3, 2, 1),
            (7, 5, 3, 2, 0),
            (8, 8, 4, 2, 1),
            (4, 4, 3, 1, 2),
            (9, 6, 4, 1, 0),
        ] {
            let g = ConvGeom {
                batch: 2,
                channels: 2,
                height: h,
                width: w,
                kernel: k,
                stride,
                padding,
                out_h: conv_out_size(h, k, stride, padding).unwrap(),
                out_w: conv_out_size(w, k, stride, padding).unwrap(),
            };
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| (i as f64 * 0.71).sin()).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|i| (i as f64 * 0.23).cos()).collect();
            let fast = conv2d_forward(&x, &wt, None, 3, &g);
            let slow = naive_conv(&x, &wt, &g, 3);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{h}x{w} k{k} s{stride} p{padding}");
            }
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.13).sin()).collect();
            let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{h}x{w} k{k} s{stride} p{padding}");
        }
    }

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(conv_out_size(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_size(8, 3, 1, 1), Some(8));
        assert_eq!(conv_transpose_out_size(8, 4, 2, 1), Some(16));
    }
}
