//! Batched convolution kernels (im2col + GEMM) shared by the forward
//! and backward passes of the autodiff graph.

use crate::tensor::{gemm, MatRef, Real};

/// Geometry of a square-kernel 2-D convolution over one `[C, H, W]` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn valid(&self) -> bool {
        self.height + 2 * self.pad >= self.kernel && self.width + 2 * self.pad >= self.kernel
    }
}

/// Output size of a transposed convolution.
pub(crate) fn transposed_out(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

#[cfg(test)]
pub(crate) fn im2col<F: Real>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    im2col_strided(x, g, cols, g.col_cols(), 0);
}

/// `im2col` into a wider column matrix: row `r` of this sample starts at
/// `cols[r * ld + offset]`.
pub(crate) fn im2col_strided<F: Real>(x: &[F], g: &ConvGeom, cols: &mut [F], ld: usize, offset: usize) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld + offset..row * ld + offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { F::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back onto a `[C, H, W]` buffer (adjoint of `im2col`).
#[cfg(test)]
pub(crate) fn col2im<F: Real>(cols: &[F], g: &ConvGeom, x: &mut [F]) {
    col2im_strided(cols, g, x, g.col_cols(), 0);
}

pub(crate) fn col2im_strided<F: Real>(cols: &[F], g: &ConvGeom, x: &mut [F], ld: usize, offset: usize) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld + offset..row * ld + offset + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on elements of one column buffer; batches are processed in
/// chunks of samples that fit.
const COL_BUDGET: usize = 1 << 22;

/// Samples per chunk for a column matrix with `rows x per_sample` entries per
/// sample.
pub(crate) fn chunk_len(rows: usize, per_sample: usize, n: usize) -> usize {
    (COL_BUDGET / (rows * per_sample).max(1)).clamp(1, n.max(1))
}

/// `[N, C, M]` (sample-major) to `[C, N*M]` (channel-major).
pub(crate) fn to_channel_major<F: Real>(src: &[F], n: usize, c: usize, m: usize, dst: &mut [F]) {
    for i in 0..n {
        for ch in 0..c {
            dst[ch * n * m + i * m..ch * n * m + (i + 1) * m].copy_from_slice(&src[(i * c + ch) * m..(i * c + ch + 1) * m]);
        }
    }
}

/// `[C, N*M]` to `[N, C, M]`.
pub(crate) fn to_sample_major<F: Real>(src: &[F], n: usize, c: usize, m: usize, dst: &mut [F]) {
    for i in 0..n {
        for ch in 0..c {
            dst[(i * c + ch) * m..(i * c + ch + 1) * m].copy_from_slice(&src[ch * n * m + i * m..ch * n * m + (i + 1) * m]);
        }
    }
}

/// Batched forward convolution of `n` samples laid out `[N, C, H, W]`.
pub(crate) fn conv_forward_batch<F: Real>(
    x: &[F],
    n: usize,
    g: &ConvGeom,
    weight: &[F],
    bias: Option<&[F]>,
    cout: usize,
    out: &mut [F],
) {
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let in_stride = g.channels * g.height * g.width;
    let chunk = chunk_len(rows, hw, n);
    let mut cols = vec![F::zero(); rows * chunk * hw];
    let mut res = vec![F::zero(); cout * chunk * hw];
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let ld = len * hw;
        for i in 0..len {
            im2col_strided(&x[(start + i) * in_stride..(start + i + 1) * in_stride], g, &mut cols, ld, i * hw);
        }
        gemm(MatRef::new(weight, cout, rows), MatRef::new(&cols[..rows * ld], rows, ld), &mut res[..cout * ld], false);
        to_sample_major(&res[..cout * ld], len, cout, hw, &mut out[start * cout * hw..(start + len) * cout * hw]);
        start += len;
    }
    if let Some(b) = bias {
        add_channel_bias(out, n, b, hw);
    }
}

/// Batched transposed convolution. `g` is the geometry of the adjoint
/// convolution: `g.channels/height/width` describe the *output* plane and
/// `g.col_cols()` equals the input spatial size. Weight layout `[Cin, Cout, k, k]`.
pub(crate) fn conv_transpose_forward_batch<F: Real>(
    x: &[F],
    n: usize,
    g: &ConvGeom,
    weight: &[F],
    bias: Option<&[F]>,
    cin: usize,
    out: &mut [F],
) {
    let (rows, hw_in) = (g.col_rows(), g.col_cols());
    let out_stride = g.channels * g.height * g.width;
    let chunk = chunk_len(rows, hw_in, n);
    let mut xm = vec![F::zero(); cin * chunk * hw_in];
    let mut cols = vec![F::zero(); rows * chunk * hw_in];
    out[..n * out_stride].fill(F::zero());
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let ld = len * hw_in;
        to_channel_major(&x[start * cin * hw_in..(start + len) * cin * hw_in], len, cin, hw_in, &mut xm);
        gemm(MatRef::t(weight, cin, rows), MatRef::new(&xm[..cin * ld], cin, ld), &mut cols[..rows * ld], false);
        for i in 0..len {
            col2im_strided(&cols, g, &mut out[(start + i) * out_stride..(start + i + 1) * out_stride], ld, i * hw_in);
        }
        start += len;
    }
    if let Some(b) = bias {
        add_channel_bias(out, n, b, g.height * g.width);
    }
}

fn add_channel_bias<F: Real>(out: &mut [F], n: usize, bias: &[F], hw: usize) {
    let c = bias.len();
    for i in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            for v in &mut out[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                *v += bv;
            }
        }
    }
}
