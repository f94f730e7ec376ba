//! Layer catalog and the per-layer forward / transposed-derivative kernels.
//!
//! Activations are flat `f64` buffers in row-major order. Spatial layers use
//! `[channels, height, width]`; dense layers take rank-1 inputs. Cotangents
//! carry a trailing batch axis of `t` independent targets, laid out
//! `[element][target]`, so one backward sweep serves many output channels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rescale-rule threshold: below this |Δinput| the local gradient is used.
pub const RESCALE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    weight: Tensor,
    bias: Tensor,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2d {
    pub window: [usize; 2],
    pub stride: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    weight: Tensor,
    bias: Tensor,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    MaxPool2d(Pool2d),
    AvgPool2d(Pool2d),
    GlobalAvgPool,
    Flatten,
    Dense(Dense),
}

fn expect_shape(what: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::WeightCountMismatch(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn positive(what: &str, dims: [usize; 2]) -> Result<()> {
    if dims[0] == 0 || dims[1] == 0 {
        return Err(Error::Shape(format!("{what} {dims:?} must be >= 1")));
    }
    Ok(())
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Shape("conv2d channel counts must be >= 1".into()));
        }
        positive("conv2d kernel", kernel)?;
        positive("conv2d stride", stride)?;
        expect_shape(
            "conv2d weight",
            &weight,
            &[out_channels, in_channels, kernel[0], kernel[1]],
        )?;
        expect_shape("conv2d bias", &bias, &[out_channels])?;
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            w: weight.to_f64(),
            b: bias.to_f64(),
            weight,
            bias,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("dense dimensions must be >= 1".into()));
        }
        expect_shape("dense weight", &weight, &[out_dim, in_dim])?;
        expect_shape("dense bias", &bias, &[out_dim])?;
        Ok(Self {
            in_dim,
            out_dim,
            w: weight.to_f64(),
            b: bias.to_f64(),
            weight,
            bias,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub(crate) fn weights_f64(&self) -> &[f64] {
        &self.w
    }

    pub(crate) fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter()
                    .zip(input)
                    .fold(self.b[o], |acc, (&w, &x)| acc + w * x)
            })
            .collect()
    }
}

fn spatial(shape: &[usize], kind: &str) -> Result<[usize; 3]> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Shape(format!(
            "{kind} expects a [channels, height, width] input, got {shape:?}"
        ))),
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::GlobalAvgPool => "globalavgpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    /// Static shape check: the output shape this layer produces for `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(conv) => {
                let [c, h, w] = spatial(input, "conv2d")?;
                if c != conv.in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {} input channels, got {c}",
                        conv.in_channels
                    )));
                }
                let (ph, pw) = (h + 2 * conv.padding[0], w + 2 * conv.padding[1]);
                if conv.kernel[0] > ph || conv.kernel[1] > pw {
                    return Err(Error::Shape(format!(
                        "conv2d kernel {:?} does not fit padded input {ph}x{pw}",
                        conv.kernel
                    )));
                }
                Ok(vec![
                    conv.out_channels,
                    (ph - conv.kernel[0]) / conv.stride[0] + 1,
                    (pw - conv.kernel[1]) / conv.stride[1] + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d(pool) | Layer::AvgPool2d(pool) => {
                let [c, h, w] = spatial(input, self.kind())?;
                positive("pool window", pool.window)?;
                positive("pool stride", pool.stride)?;
                if pool.window[0] > h || pool.window[1] > w {
                    return Err(Error::Shape(format!(
                        "pool window {:?} does not fit input {h}x{w}",
                        pool.window
                    )));
                }
                Ok(vec![
                    c,
                    (h - pool.window[0]) / pool.stride[0] + 1,
                    (w - pool.window[1]) / pool.stride[1] + 1,
                ])
            }
            Layer::GlobalAvgPool => {
                let [c, _, _] = spatial(input, "globalavgpool")?;
                Ok(vec![c])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense(dense) => match input {
                &[n] if n == dense.in_dim => Ok(vec![dense.out_dim]),
                _ => Err(Error::Shape(format!(
                    "dense expects input [{}], got {input:?}",
                    dense.in_dim
                ))),
            },
        }
    }

    pub(crate) fn forward(&self, input: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
        match self {
            Layer::Conv2d(conv) => conv_forward(conv, input, in_shape, out_shape),
            Layer::Relu => input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Layer::MaxPool2d(pool) => {
                let mut out = Vec::with_capacity(out_shape.iter().product());
                for_each_window(pool, in_shape, out_shape, |cells| {
                    out.push(input[argmax(input, cells.iter().copied())]);
                });
                out
            }
            Layer::AvgPool2d(pool) => {
                let scale = 1.0 / (pool.window[0] * pool.window[1]) as f64;
                let mut out = Vec::with_capacity(out_shape.iter().product());
                for_each_window(pool, in_shape, out_shape, |cells| {
                    out.push(cells.iter().fold(0.0, |acc, &i| acc + input[i]) * scale);
                });
                out
            }
            Layer::GlobalAvgPool => {
                let plane = in_shape[1] * in_shape[2];
                let scale = 1.0 / plane as f64;
                input
                    .chunks_exact(plane)
                    .map(|ch| ch.iter().sum::<f64>() * scale)
                    .collect()
            }
            Layer::Flatten => input.to_vec(),
            Layer::Dense(dense) => dense.apply(input),
        }
    }

    /// Pulls a batched cotangent from this layer's output back to its input.
    ///
    /// With `reference` set, nonlinearities use the DeepLIFT Rescale rule
    /// against the reference activations instead of the local derivative.
    pub(crate) fn backward(&self, site: &Site<'_>, grad_out: &[f64], t: usize) -> Vec<f64> {
        let in_len: usize = site.in_shape.iter().product();
        let mut grad_in = vec![0.0; in_len * t];
        match self {
            Layer::Conv2d(conv) => conv_backward(conv, site, grad_out, &mut grad_in, t),
            Layer::Relu => {
                for (i, (gi, go)) in grad_in
                    .chunks_exact_mut(t)
                    .zip(grad_out.chunks_exact(t))
                    .enumerate()
                {
                    let x = site.x_in[i];
                    let scale = match site.reference {
                        None => relu_slope(x),
                        Some((r_in, r_out)) => {
                            let d_in = x - r_in[i];
                            if d_in.abs() < RESCALE_EPSILON {
                                relu_slope(x)
                            } else {
                                (site.x_out[i] - r_out[i]) / d_in
                            }
                        }
                    };
                    if scale != 0.0 {
                        for (a, &g) in gi.iter_mut().zip(go) {
                            *a = scale * g;
                        }
                    }
                }
            }
            Layer::MaxPool2d(pool) => {
                let mut o = 0;
                for_each_window(pool, site.in_shape, site.out_shape, |cells| {
                    let a = argmax(site.x_in, cells.iter().copied());
                    let scale = match site.reference {
                        None => 1.0,
                        Some((r_in, r_out)) => {
                            let d_in = site.x_in[a] - r_in[a];
                            if d_in.abs() < RESCALE_EPSILON {
                                1.0
                            } else {
                                (site.x_out[o] - r_out[o]) / d_in
                            }
                        }
                    };
                    axpy(&mut grad_in[a * t..(a + 1) * t], scale, &grad_out[o * t..(o + 1) * t]);
                    o += 1;
                });
            }
            Layer::AvgPool2d(pool) => {
                let scale = 1.0 / (pool.window[0] * pool.window[1]) as f64;
                let mut o = 0;
                for_each_window(pool, site.in_shape, site.out_shape, |cells| {
                    let go = &grad_out[o * t..(o + 1) * t];
                    for &i in cells {
                        axpy(&mut grad_in[i * t..(i + 1) * t], scale, go);
                    }
                    o += 1;
                });
            }
            Layer::GlobalAvgPool => {
                let plane = site.in_shape[1] * site.in_shape[2];
                let scale = 1.0 / plane as f64;
                for (c, block) in grad_in.chunks_exact_mut(plane * t).enumerate() {
                    let go = &grad_out[c * t..(c + 1) * t];
                    for gi in block.chunks_exact_mut(t) {
                        axpy(gi, scale, go);
                    }
                }
            }
            Layer::Flatten => grad_in.copy_from_slice(grad_out),
            Layer::Dense(dense) => {
                for (o, go) in grad_out.chunks_exact(t).enumerate() {
                    let row = &dense.w[o * dense.in_dim..(o + 1) * dense.in_dim];
                    for (gi, &w) in grad_in.chunks_exact_mut(t).zip(row) {
                        axpy(gi, w, go);
                    }
                }
            }
        }
        grad_in
    }
}

/// Everything a backward kernel needs to know about one traced layer application.
pub(crate) struct Site<'a> {
    pub in_shape: &'a [usize],
    pub out_shape: &'a [usize],
    pub x_in: &'a [f64],
    pub x_out: &'a [f64],
    /// Reference (baseline) input and output activations for the Rescale rule.
    pub reference: Option<(&'a [f64], &'a [f64])>,
}

fn relu_slope(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// First maximum in row-major window order.
pub(crate) fn argmax(values: &[f64], mut cells: impl Iterator<Item = usize>) -> usize {
    let mut best = cells.next().expect("pool window is non-empty");
    for i in cells {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Visits each pooling window in output order, yielding its flat input indices.
pub(crate) fn for_each_window(
    pool: &Pool2d,
    in_shape: &[usize],
    out_shape: &[usize],
    mut visit: impl FnMut(&[usize]),
) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let [wh, ww] = pool.window;
    let [sh, sw] = pool.stride;
    let mut cells = vec![0; wh * ww];
    for c in 0..out_shape[0] {
        for oy in 0..out_shape[1] {
            for ox in 0..out_shape[2] {
                let (y0, x0) = (oy * sh, ox * sw);
                for dy in 0..wh {
                    let row = (c * h + y0 + dy) * w + x0;
                    for dx in 0..ww {
                        cells[dy * ww + dx] = row + dx;
                    }
                }
                visit(&cells);
            }
        }
    }
}

/// Output indices `o` in `0..out_len` whose input coordinate `o*stride + k - pad`
/// lands inside `0..in_len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

/// `acc[i] += w[k] * src[offsets[k] + i]` for each tap `k` in order.
fn accumulate_taps(acc: &mut [f64], w: &[f64], src: &[f64], offsets: &[usize]) {
    let n = acc.len();
    if let (Ok(w), Ok(o)) = (<&[f64; 9]>::try_from(w), <&[usize; 9]>::try_from(offsets)) {
        let s: [&[f64]; 9] = std::array::from_fn(|k| &src[o[k]..o[k] + n]);
        let [s0, s1, s2, s3, s4, s5, s6, s7, s8] = s;
        for i in 0..n {
            let mut v = acc[i];
            v += w[0] * s0[i];
            v += w[1] * s1[i];
            v += w[2] * s2[i];
            v += w[3] * s3[i];
            v += w[4] * s4[i];
            v += w[5] * s5[i];
            v += w[6] * s6[i];
            v += w[7] * s7[i];
            v += w[8] * s8[i];
            acc[i] = v;
        }
        return;
    }
    for (&wk, &off) in w.iter().zip(offsets) {
        axpy(acc, wk, &src[off..off + n]);
    }
}

/// Zero-padded copy of a `[c, h, w]` buffer with row pitch `w + 2 pw`.
///
/// `slack` extra zero cells at the end let shifted reads run past the last row.
fn pad_planes(src: &[f64], c: usize, h: usize, w: usize, ph: usize, pw: usize, slack: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * ph, w + 2 * pw);
    let mut out = vec![0.0; c * hp * wp + slack];
    for ch in 0..c {
        for y in 0..h {
            let from = (ch * h + y) * w;
            let to = (ch * hp + y + ph) * wp + pw;
            out[to..to + w].copy_from_slice(&src[from..from + w]);
        }
    }
    out
}

/// Stride-1 convolution on a padded plane: with row pitch `wp`, tap (ky, kx)
/// is a single shifted axpy over the whole output grid. Columns `ow..wp` of
/// each output row are scratch and dropped.
fn conv_forward_s1(conv: &Conv2d, input: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let (ih, iw) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let [kh, kw] = conv.kernel;
    let [ph, pw] = conv.padding;
    let (hp, wp) = (ih + 2 * ph, iw + 2 * pw);
    let padded = pad_planes(input, conv.in_channels, ih, iw, ph, pw, kw);
    let n = oh * wp;
    let offsets: Vec<usize> = (0..kh).flat_map(|ky| (0..kw).map(move |kx| ky * wp + kx)).collect();
    let mut grid = vec![0.0; n];
    let mut out = vec![0.0; conv.out_channels * oh * ow];
    for (oc, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        grid.fill(conv.b[oc]);
        for ic in 0..conv.in_channels {
            let src = &padded[ic * hp * wp..];
            let base = (oc * conv.in_channels + ic) * kh * kw;
            accumulate_taps(&mut grid, &conv.w[base..base + kh * kw], src, &offsets);
        }
        for oy in 0..oh {
            plane[oy * ow..(oy + 1) * ow].copy_from_slice(&grid[oy * wp..oy * wp + ow]);
        }
    }
    out
}

fn conv_forward(conv: &Conv2d, input: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if conv.stride == [1, 1] {
        return conv_forward_s1(conv, input, in_shape, out_shape);
    }
    let (ih, iw) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let [kh, kw] = conv.kernel;
    let [sh, sw] = conv.stride;
    let [ph, pw] = conv.padding;
    let mut out = vec![0.0; conv.out_channels * oh * ow];
    for (oc, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(conv.b[oc]);
        for ic in 0..conv.in_channels {
            let src = &input[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, ih, sh, ky, ph);
                for kx in 0..kw {
                    let wgt = conv.w[((oc * conv.in_channels + ic) * kh + ky) * kw + kx];
                    let (x_lo, x_hi) = valid_range(ow, iw, sw, kx, pw);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * sh + ky - ph;
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        let row = &src[iy * iw..(iy + 1) * iw];
                        if sw == 1 {
                            let ix0 = x_lo + kx - pw;
                            axpy(&mut dst[x_lo..x_hi], wgt, &row[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for ox in x_lo..x_hi {
                                dst[ox] += wgt * row[ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Transpose of [`conv_forward_s1`] for a batched cotangent.
fn conv_backward_s1(conv: &Conv2d, site: &Site<'_>, grad_out: &[f64], grad_in: &mut [f64], t: usize) {
    let (ih, iw) = (site.in_shape[1], site.in_shape[2]);
    let (oh, ow) = (site.out_shape[1], site.out_shape[2]);
    let [kh, kw] = conv.kernel;
    let [ph, pw] = conv.padding;
    let (hp, wp) = (ih + 2 * ph, iw + 2 * pw);
    let n = oh * wp * t;
    let plane_len = hp * wp * t;
    let offsets: Vec<usize> = (0..kh).flat_map(|ky| (0..kw).map(move |kx| (ky * wp + kx) * t)).collect();
    let reach = offsets[offsets.len() - 1];
    let back: Vec<usize> = offsets.iter().map(|&o| reach - o).collect();
    // Gather form of the transposed stencil: the output grid sits at `reach`
    // inside a zero-filled buffer so every shifted read stays in bounds.
    let mut grid = vec![0.0; reach + plane_len.max(n)];
    let mut padded = vec![0.0; conv.in_channels * plane_len];
    for oc in 0..conv.out_channels {
        let g_plane = &grad_out[oc * oh * ow * t..(oc + 1) * oh * ow * t];
        if g_plane.iter().all(|&g| g == 0.0) {
            continue;
        }
        for oy in 0..oh {
            let at = reach + oy * wp * t;
            grid[at..at + ow * t].copy_from_slice(&g_plane[oy * ow * t..(oy + 1) * ow * t]);
        }
        for (ic, dst) in padded.chunks_exact_mut(plane_len).enumerate() {
            let base = (oc * conv.in_channels + ic) * kh * kw;
            accumulate_taps(dst, &conv.w[base..base + kh * kw], &grid, &back);
        }
    }
    for ic in 0..conv.in_channels {
        for y in 0..ih {
            let from = ic * plane_len + ((y + ph) * wp + pw) * t;
            let to = ((ic * ih + y) * iw) * t;
            grad_in[to..to + iw * t].copy_from_slice(&padded[from..from + iw * t]);
        }
    }
}

fn conv_backward(conv: &Conv2d, site: &Site<'_>, grad_out: &[f64], grad_in: &mut [f64], t: usize) {
    if conv.stride == [1, 1] {
        return conv_backward_s1(conv, site, grad_out, grad_in, t);
    }
    let (ih, iw) = (site.in_shape[1], site.in_shape[2]);
    let (oh, ow) = (site.out_shape[1], site.out_shape[2]);
    let [kh, kw] = conv.kernel;
    let [sh, sw] = conv.stride;
    let [ph, pw] = conv.padding;
    for oc in 0..conv.out_channels {
        let g_plane = &grad_out[oc * oh * ow * t..(oc + 1) * oh * ow * t];
        if g_plane.iter().all(|&g| g == 0.0) {
            continue;
        }
        for ic in 0..conv.in_channels {
            let dst_plane = &mut grad_in[ic * ih * iw * t..(ic + 1) * ih * iw * t];
            for ky in 0..kh {
                let (y_lo, y_hi) = valid_range(oh, ih, sh, ky, ph);
                for kx in 0..kw {
                    let wgt = conv.w[((oc * conv.in_channels + ic) * kh + ky) * kw + kx];
                    let (x_lo, x_hi) = valid_range(ow, iw, sw, kx, pw);
                    if x_lo >= x_hi || wgt == 0.0 {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * sh + ky - ph;
                        let g_row = &g_plane[oy * ow * t..(oy + 1) * ow * t];
                        let d_row = &mut dst_plane[iy * iw * t..(iy + 1) * iw * t];
                        if sw == 1 {
                            let ix0 = x_lo + kx - pw;
                            let n = (x_hi - x_lo) * t;
                            axpy(&mut d_row[ix0 * t..ix0 * t + n], wgt, &g_row[x_lo * t..x_lo * t + n]);
                        } else {
                            for ox in x_lo..x_hi {
                                let ix = ox * sw + kx - pw;
                                axpy(&mut d_row[ix * t..(ix + 1) * t], wgt, &g_row[ox * t..(ox + 1) * t]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2], w: Vec<f32>) -> Conv2d {
        let weight = Tensor::from_vec(&[1, 1, kernel[0], kernel[1]], w).unwrap();
        Conv2d::new(1, 1, kernel, stride, padding, weight, Tensor::zeros(&[1]).unwrap()).unwrap()
    }

    /// Direct definition of cross-correlation with zero padding.
    fn naive_conv(c: &Conv2d, x: &[f64], ih: usize, iw: usize) -> Vec<f64> {
        let oh = (ih + 2 * c.padding[0] - c.kernel[0]) / c.stride[0] + 1;
        let ow = (iw + 2 * c.padding[1] - c.kernel[1]) / c.stride[1] + 1;
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = c.b[0];
                for ky in 0..c.kernel[0] {
                    for kx in 0..c.kernel[1] {
                        let iy = (oy * c.stride[0] + ky) as isize - c.padding[0] as isize;
                        let ix = (ox * c.stride[1] + kx) as isize - c.padding[1] as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < ih && (ix as usize) < iw {
                            acc += c.w[ky * c.kernel[1] + kx] * x[iy as usize * iw + ix as usize];
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        let x: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..6).map(|i| i as f32 * 0.5 - 1.0).collect();
        for stride in [[1, 1], [2, 1], [1, 3], [2, 2]] {
            for padding in [[0, 0], [1, 1], [2, 0]] {
                let c = conv([2, 3], stride, padding, w.clone());
                let layer = Layer::Conv2d(c.clone());
                let out_shape = layer.output_shape(&[1, 5, 7]).unwrap();
                let got = layer.forward(&x, &[1, 5, 7], &out_shape);
                let want = naive_conv(&c, &x, 5, 7);
                assert_eq!(got.len(), want.len());
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "stride {stride:?} pad {padding:?}");
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_transpose_of_forward() {
        // <J x, g> == <x, J^T g> for the linear part (bias zero).
        let x: Vec<f64> = (0..35).map(|i| (i as f64 * 0.91).cos()).collect();
        let w: Vec<f32> = (0..6).map(|i| 0.3 * i as f32 - 0.7).collect();
        for stride in [[1, 1], [2, 2]] {
            let c = conv([2, 3], stride, [1, 1], w.clone());
            let layer = Layer::Conv2d(c);
            let out_shape = layer.output_shape(&[1, 5, 7]).unwrap();
            let y = layer.forward(&x, &[1, 5, 7], &out_shape);
            let g: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 0.13).sin()).collect();
            let site = Site {
                in_shape: &[1, 5, 7],
                out_shape: &out_shape,
                x_in: &x,
                x_out: &y,
                reference: None,
            };
            let gx = layer.backward(&site, &g, 1);
            let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_routes_to_first_max() {
        let pool = Pool2d { window: [2, 2], stride: [2, 2] };
        let layer = Layer::MaxPool2d(pool);
        let x = vec![1.0, 3.0, 3.0, 0.0];
        let y = layer.forward(&x, &[1, 2, 2], &[1, 1, 1]);
        assert_eq!(y, vec![3.0]);
        let site = Site {
            in_shape: &[1, 2, 2],
            out_shape: &[1, 1, 1],
            x_in: &x,
            x_out: &y,
            reference: None,
        };
        assert_eq!(layer.backward(&site, &[1.0], 1), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_rescale_uses_ratio_and_falls_back() {
        let layer = Layer::Relu;
        let x = vec![2.0, -1.0, 0.5];
        let y = layer.forward(&x, &[3], &[3]);
        let r = vec![-2.0, -1.0 + 1e-9, 0.5];
        let ry = layer.forward(&r, &[3], &[3]);
        let site = Site {
            in_shape: &[3],
            out_shape: &[3],
            x_in: &x,
            x_out: &y,
            reference: Some((&r, &ry)),
        };
        let m = layer.backward(&site, &[1.0, 1.0, 1.0], 1);
        assert_eq!(m, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let bad = Conv2d::new(
            1,
            1,
            [3, 3],
            [1, 1],
            [0, 0],
            Tensor::zeros(&[1, 1, 5, 5]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        );
        assert!(matches!(bad, Err(Error::WeightCountMismatch(_))));
        let c = conv([3, 3], [1, 1], [0, 0], vec![0.0; 9]);
        assert!(Layer::Conv2d(c).output_shape(&[1, 2, 5]).is_err());
        let pool = Layer::AvgPool2d(Pool2d { window: [2, 2], stride: [0, 1] });
        assert!(pool.output_shape(&[1, 4, 4]).is_err());
        assert!(Layer::GlobalAvgPool.output_shape(&[4]).is_err());
    }
}
