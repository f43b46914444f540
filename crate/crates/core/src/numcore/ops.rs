//! Slice-level kernels behind the graph operations. Everything here is
//! single-threaded and allocation-order deterministic.

use super::tensor::{contiguous_strides, Real};
use crate::error::{Error, Result};

/// Logistic function evaluated without overflow for large |x|.
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be positive".into()));
        }
        let (b, ci, h, w) = (input[0], input[1], input[2], input[3]);
        let (co, kci, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if ci != kci {
            return Err(Error::dim(format!(
                "conv2d input has {ci} channels but kernel expects {kci}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            batch: b,
            in_channels: ci,
            out_channels: co,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Real>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    match g.source(oy, ky, g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = g.source(ox, kx, g.width).map_or(T::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_channels * n;
    let mut out = vec![T::zero(); g.batch * out_plane];
    let mut cols = vec![T::zero(); rows * n];
    for b in 0..g.batch {
        im2col(g, &input[b * in_plane..(b + 1) * in_plane], &mut cols);
        T::gemm(
            g.out_channels,
            rows,
            n,
            T::one(),
            kernel,
            rows as isize,
            1,
            &cols,
            n as isize,
            1,
            T::zero(),
            &mut out[b * out_plane..(b + 1) * out_plane],
            n as isize,
            1,
        );
    }
    out
}

/// Returns `(d_input, d_kernel)`; each is computed only when requested.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let in_plane = g.in_channels * g.height * g.width;
    let out_plane = g.out_channels * n;
    let mut d_input = want_input.then(|| vec![T::zero(); g.batch * in_plane]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); kernel.len()]);
    let mut cols = vec![T::zero(); rows * n];
    for b in 0..g.batch {
        let go = &grad_out[b * out_plane..(b + 1) * out_plane];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[b * in_plane..(b + 1) * in_plane], &mut cols);
            // dK += dOut (Co x n) * cols^T (n x rows)
            T::gemm(
                g.out_channels,
                n,
                rows,
                T::one(),
                go,
                n as isize,
                1,
                &cols,
                1,
                n as isize,
                T::one(),
                dk,
                rows as isize,
                1,
            );
        }
        if let Some(di) = d_input.as_mut() {
            // dcols = K^T (rows x Co) * dOut (Co x n)
            T::gemm(
                rows,
                g.out_channels,
                n,
                T::one(),
                kernel,
                1,
                rows as isize,
                go,
                n as isize,
                1,
                T::zero(),
                &mut cols,
                n as isize,
                1,
            );
            col2im(g, &cols, &mut di[b * in_plane..(b + 1) * in_plane]);
        }
    }
    (d_input, d_kernel)
}

/// 2x2 average pooling with stride 2; a trailing odd row/column forms a
/// partial window averaged over its valid cells.
pub fn downsample2_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0], shape[1], shape[2].div_ceil(2), shape[3].div_ceil(2)]
}

fn window_cells(o: usize, extent: usize) -> std::ops::Range<usize> {
    2 * o..(2 * o + 2).min(extent)
}

pub fn downsample2_forward<T: Real>(shape: &[usize], input: &[T]) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                let mut count = 0usize;
                for y in window_cells(oy, h) {
                    for x in window_cells(ox, w) {
                        acc += src[y * w + x].as_f64();
                        count += 1;
                    }
                }
                out[(p * oh + oy) * ow + ox] = T::from_f64(acc / count as f64);
            }
        }
    }
    out
}

pub fn downsample2_backward<T: Real>(shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut grad = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let ys = window_cells(oy, h);
                let xs = window_cells(ox, w);
                let share = grad_out[(p * oh + oy) * ow + ox]
                    / T::from_f64((ys.len() * xs.len()) as f64);
                for y in ys {
                    for x in xs.clone() {
                        grad[p * h * w + y * w + x] = grad[p * h * w + y * w + x] + share;
                    }
                }
            }
        }
    }
    grad
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    /// (B,C,H,W) -> (B,C,1,1)
    SpatialAvg,
    /// (B,C,H,W) -> (B,1,H,W)
    ChannelAvg,
    /// (B,C,H,W) -> (B,C)
    GlobalAvg,
}

impl PoolMode {
    pub fn output_shape(self, shape: &[usize]) -> Result<Vec<usize>> {
        if shape.len() != 4 {
            return Err(Error::dim(format!("pooling expects rank 4, got {shape:?}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        Ok(match self {
            PoolMode::SpatialAvg => vec![b, c, 1, 1],
            PoolMode::ChannelAvg => vec![b, 1, h, w],
            PoolMode::GlobalAvg => vec![b, c],
        })
    }
}

pub fn pool_forward<T: Real>(mode: PoolMode, shape: &[usize], input: &[T]) -> Vec<T> {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    match mode {
        PoolMode::SpatialAvg | PoolMode::GlobalAvg => input
            .chunks_exact(hw)
            .map(|plane| T::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
            .collect(),
        PoolMode::ChannelAvg => {
            let mut out = Vec::with_capacity(b * hw);
            for bi in 0..b {
                let sample = &input[bi * c * hw..(bi + 1) * c * hw];
                for i in 0..hw {
                    let acc: f64 = (0..c).map(|ci| sample[ci * hw + i].as_f64()).sum();
                    out.push(T::from_f64(acc / c as f64));
                }
            }
            out
        }
    }
}

pub fn pool_backward<T: Real>(mode: PoolMode, shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut grad = vec![T::zero(); b * c * hw];
    match mode {
        PoolMode::SpatialAvg | PoolMode::GlobalAvg => {
            let inv = T::from_f64(1.0 / hw as f64);
            for (plane, &g) in grad.chunks_exact_mut(hw).zip(grad_out) {
                plane.fill(g * inv);
            }
        }
        PoolMode::ChannelAvg => {
            let inv = T::from_f64(1.0 / c as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let dst = &mut grad[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for (d, &g) in dst.iter_mut().zip(&grad_out[bi * hw..(bi + 1) * hw]) {
                        *d = g * inv;
                    }
                }
            }
        }
    }
    grad
}

/// `out[b,n] = sum_c weight[n,c] * input[b,c]`, accumulated in f64.
pub fn linear_forward<T: Real>(batch: usize, inner: usize, outer: usize, input: &[T], weight: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * outer);
    for b in 0..batch {
        let x = &input[b * inner..(b + 1) * inner];
        for n in 0..outer {
            let w = &weight[n * inner..(n + 1) * inner];
            let acc: f64 = x.iter().zip(w).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            out.push(T::from_f64(acc));
        }
    }
    out
}

pub fn linear_backward<T: Real>(
    batch: usize,
    inner: usize,
    outer: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut d_input = vec![T::zero(); batch * inner];
    let mut d_weight = vec![T::zero(); outer * inner];
    for b in 0..batch {
        for c in 0..inner {
            let acc: f64 = (0..outer)
                .map(|n| grad_out[b * outer + n].as_f64() * weight[n * inner + c].as_f64())
                .sum();
            d_input[b * inner + c] = T::from_f64(acc);
        }
    }
    for n in 0..outer {
        for c in 0..inner {
            let acc: f64 = (0..batch)
                .map(|b| grad_out[b * outer + n].as_f64() * input[b * inner + c].as_f64())
                .sum();
            d_weight[n * inner + c] = T::from_f64(acc);
        }
    }
    (d_input, d_weight)
}

/// Output shape of a same-rank broadcast; size-1 axes expand, nothing else changes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}: rank differs")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For each flat output index, the flat index into an operand of `shape`.
pub fn broadcast_indices(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if out == shape {
        return (0..numel).collect();
    }
    let src_strides = contiguous_strides(shape);
    let strides: Vec<usize> = shape
        .iter()
        .zip(&src_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut idx = vec![0usize; out.len()];
    let mut result = Vec::with_capacity(numel);
    let mut flat = 0usize;
    for _ in 0..numel {
        result.push(flat);
        for axis in (0..out.len()).rev() {
            idx[axis] += 1;
            flat += strides[axis];
            if idx[axis] < out[axis] {
                break;
            }
            flat -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    result
}

/// Sum `grad` (laid out over the broadcast output) back onto an operand.
pub fn reduce_broadcast<T: Real>(grad: &[T], map: &[usize], len: usize) -> Vec<T> {
    if map.len() == len {
        // identity map when shapes agree
        return grad.to_vec();
    }
    let mut acc = vec![0.0f64; len];
    for (g, &i) in grad.iter().zip(map) {
        acc[i] += g.as_f64();
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// Zero-padded 1-d convolution along the channel axis of a (B, C) view.
pub fn channel_conv_forward<T: Real>(batch: usize, channels: usize, input: &[T], kernel: &[T]) -> Vec<T> {
    let half = (kernel.len() / 2) as isize;
    let mut out = Vec::with_capacity(batch * channels);
    for b in 0..batch {
        let x = &input[b * channels..(b + 1) * channels];
        for c in 0..channels {
            let mut acc = 0.0f64;
            for (j, &k) in kernel.iter().enumerate() {
                let src = c as isize + j as isize - half;
                if src >= 0 && (src as usize) < channels {
                    acc += k.as_f64() * x[src as usize].as_f64();
                }
            }
            out.push(T::from_f64(acc));
        }
    }
    out
}

pub fn channel_conv_backward<T: Real>(
    batch: usize,
    channels: usize,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let half = (kernel.len() / 2) as isize;
    let mut d_input = vec![0.0f64; batch * channels];
    let mut d_kernel = vec![0.0f64; kernel.len()];
    for b in 0..batch {
        for c in 0..channels {
            let g = grad_out[b * channels + c].as_f64();
            for (j, &k) in kernel.iter().enumerate() {
                let src = c as isize + j as isize - half;
                if src >= 0 && (src as usize) < channels {
                    let s = b * channels + src as usize;
                    d_input[s] += g * k.as_f64();
                    d_kernel[j] += g * input[s].as_f64();
                }
            }
        }
    }
    (
        d_input.into_iter().map(T::from_f64).collect(),
        d_kernel.into_iter().map(T::from_f64).collect(),
    )
}
