//! Raw compute kernels shared by the tape and the tape-free inference path.
//!
//! Convolutions are lowered to a matrix product over unfolded input windows
//! (im2col). All matrices are row-major.

/// Problem size of a valid-padding, stride-1 2-D convolution over
/// `(batch, width, height, channels)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub width: usize,
    pub height: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub filters: usize,
}

impl ConvDims {
    pub fn out_width(&self) -> usize {
        self.width - self.kernel + 1
    }

    pub fn out_height(&self) -> usize {
        self.height - self.kernel + 1
    }

    /// Number of output positions over the whole batch.
    pub fn positions(&self) -> usize {
        self.batch * self.out_width() * self.out_height()
    }

    /// Length of one unfolded window.
    pub fn window(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// `c = a·b + beta·c` where `a` is `m×k` (or its transpose when `ta`), `b` is
/// `k×n` (or its transpose when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], d: &ConvDims) -> Vec<f64> {
    let (ow, oh, win) = (d.out_width(), d.out_height(), d.window());
    let row_len = d.kernel * d.in_channels;
    let mut cols = vec![0.0; d.positions() * win];
    let mut p = 0;
    for n in 0..d.batch {
        let base = n * d.width * d.height * d.in_channels;
        for x in 0..ow {
            for y in 0..oh {
                let dst = &mut cols[p * win..(p + 1) * win];
                for dx in 0..d.kernel {
                    let src = base + ((x + dx) * d.height + y) * d.in_channels;
                    dst[dx * row_len..(dx + 1) * row_len]
                        .copy_from_slice(&input[src..src + row_len]);
                }
                p += 1;
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: &ConvDims, grad_input: &mut [f64]) {
    let (ow, oh, win) = (d.out_width(), d.out_height(), d.window());
    let row_len = d.kernel * d.in_channels;
    let mut p = 0;
    for n in 0..d.batch {
        let base = n * d.width * d.height * d.in_channels;
        for x in 0..ow {
            for y in 0..oh {
                let src = &cols[p * win..(p + 1) * win];
                for dx in 0..d.kernel {
                    let dst = base + ((x + dx) * d.height + y) * d.in_channels;
                    for (g, s) in grad_input[dst..dst + row_len]
                        .iter_mut()
                        .zip(&src[dx * row_len..(dx + 1) * row_len])
                    {
                        *g += s;
                    }
                }
                p += 1;
            }
        }
    }
}

/// Forward convolution. `kernel` is laid out `(k, k, in_channels, filters)`.
pub fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let cols = im2col(input, d);
    let positions = d.positions();
    let mut out = Vec::with_capacity(positions * d.filters);
    for _ in 0..positions {
        out.extend_from_slice(bias);
    }
    gemm(positions, d.window(), d.filters, &cols, false, kernel, false, 1.0, &mut out);
    out
}

/// Accumulates convolution gradients. `grad_input` is only computed when
/// requested.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: Option<&mut [f64]>,
) {
    let positions = d.positions();
    let cols = im2col(input, d);
    gemm(d.window(), positions, d.filters, &cols, true, grad_out, false, 1.0, grad_kernel);
    for row in grad_out.chunks_exact(d.filters) {
        for (g, v) in grad_bias.iter_mut().zip(row) {
            *g += v;
        }
    }
    if let Some(grad_input) = grad_input {
        let mut dcols = vec![0.0; positions * d.window()];
        gemm(positions, d.filters, d.window(), grad_out, false, kernel, true, 0.0, &mut dcols);
        col2im(&dcols, d, grad_input);
    }
}

/// `out[b, j] = Σ_i input[b, i]·weights[i, j] + bias[j]`.
pub fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64], batch: usize) -> Vec<f64> {
    let m = bias.len();
    let n = input.len() / batch;
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(batch, n, m, input, false, weights, false, 1.0, &mut out);
    out
}

pub fn dense_backward(
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    batch: usize,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    grad_input: Option<&mut [f64]>,
) {
    let m = grad_bias.len();
    let n = input.len() / batch;
    gemm(n, batch, m, input, true, grad_out, false, 1.0, grad_weights);
    for row in grad_out.chunks_exact(m) {
        for (g, v) in grad_bias.iter_mut().zip(row) {
            *g += v;
        }
    }
    if let Some(grad_input) = grad_input {
        gemm(batch, m, n, grad_out, false, weights, true, 1.0, grad_input);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let d = ConvDims {
            batch: 1,
            width: 3,
            height: 2,
            in_channels: 1,
            kernel: 1,
            filters: 1,
        };
        let input = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(conv2d_forward(&input, &[1.0], &[0.0], &d), input.to_vec());
    }
}
