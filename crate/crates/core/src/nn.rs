//! Minimal tensor and layer toolkit with explicit backward passes.
//!
//! All learnable parameters of a network live in one flat `f32` buffer
//! described by a [`ParamLayout`]; gradients use a buffer of the same
//! layout. Layers hold [`ParamRange`]s into it, so optimizer updates,
//! gradient accumulation and checkpointing all work on plain slices.

use alloc::{string::String, vec, vec::Vec};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major `C x H x W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                context: "feature map",
                expected: channels * height * width,
                found: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Spatial crop of all channels.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> FeatureMap {
        assert!(row + h <= self.height && col + w <= self.width, "crop out of bounds");
        let mut out = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in row..row + h {
                out.extend_from_slice(&p[y * self.width + col..y * self.width + col + w]);
            }
        }
        FeatureMap {
            channels: self.channels,
            height: h,
            width: w,
            data: out,
        }
    }

    /// Inverse of [`crop`](Self::crop): embeds `self` into a zero map.
    pub fn embed(&self, height: usize, width: usize, row: usize, col: usize) -> FeatureMap {
        assert!(row + self.height <= height && col + self.width <= width, "embed out of bounds");
        let mut out = FeatureMap::zeros(self.channels, height, width);
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..self.height {
                let d = (row + y) * width + col;
                dst[d..d + self.width].copy_from_slice(&src[y * self.width..(y + 1) * self.width]);
            }
        }
        out
    }
}

/// Location of one named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn of<'a>(&self, buf: &'a [f32]) -> &'a [f32] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, buf: &'a mut [f32]) -> &'a mut [f32] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub len: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: &str, shape: &[usize]) -> ParamRange {
        let len = shape.iter().product();
        let range = ParamRange { offset: self.len, len };
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
        });
        self.len += len;
        range
    }

    pub fn get(&self, name: &str) -> Option<ParamRange> {
        self.specs.iter().find(|s| s.name == name).map(|s| ParamRange {
            offset: s.offset,
            len: s.shape.iter().product(),
        })
    }
}

/// `C = alpha * A * B + beta * C` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the bounds above cover every element the kernel touches and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
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

/// Row-major `[cin*9][h*w]` patch matrix for a 3x3 kernel with unit zero padding.
fn im2col3(input: &[f32], cin: usize, h: usize, w: usize, cols: &mut Vec<f32>) {
    let hw = h * w;
    cols.clear();
    cols.resize(cin * 9 * hw, 0.0);
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w.saturating_sub(1) } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for x in x0..x1 {
                        dst[x] = src[x + kx - 1];
                    }
                }
            }
        }
    }
}

fn col2im3_add(cols: &[f32], cin: usize, h: usize, w: usize, out: &mut [f32]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w.saturating_sub(1) } else { w };
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for x in x0..x1 {
                        dst[x + kx - 1] += src[x];
                    }
                }
            }
        }
    }
}

/// 2-D convolution, stride 1, kernel 1x1 or 3x3 with size-preserving zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: ParamRange,
    pub bias: ParamRange,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let weight = layout.push(&alloc::format!("{name}.weight"), &[cout, cin, kernel, kernel]);
        let bias = layout.push(&alloc::format!("{name}.bias"), &[cout]);
        Self {
            cin,
            cout,
            kernel,
            weight,
            bias,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and bias.
    pub fn init<R: Rng>(&self, params: &mut [f32], rng: &mut R) {
        let bound = 1.0 / libm::sqrtf(self.fan_in() as f32);
        for v in self.weight.of_mut(params) {
            *v = rng.random_range(-bound..bound);
        }
        for v in self.bias.of_mut(params) {
            *v = rng.random_range(-bound..bound);
        }
    }

    /// Reads the first `cin` channels of `input` (`h x w` planes) and
    /// overwrites `out` (`cout x h x w`).
    pub fn forward_into(&self, params: &[f32], input: &[f32], h: usize, w: usize, out: &mut [f32]) {
        let hw = h * w;
        let out = &mut out[..self.cout * hw];
        let bias = self.bias.of(params);
        for (o, &b) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(b);
        }
        let weight = self.weight.of(params);
        let k = self.fan_in();
        if self.kernel == 1 {
            gemm(self.cout, k, hw, weight, (k, 1), &input[..k * hw], (hw, 1), 1.0, out);
        } else {
            let mut cols = Vec::new();
            im2col3(input, self.cin, h, w, &mut cols);
            gemm(self.cout, k, hw, weight, (k, 1), &cols, (hw, 1), 1.0, out);
        }
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> FeatureMap {
        assert!(x.channels >= self.cin, "conv input has too few channels");
        let mut out = FeatureMap::zeros(self.cout, x.height, x.width);
        self.forward_into(params, &x.data, x.height, x.width, &mut out.data);
        out
    }

    /// Accumulates parameter gradients into `grads` and, when given, the
    /// input gradient into the first `cin` channels of `dinput`.
    pub fn backward(
        &self,
        params: &[f32],
        grads: &mut [f32],
        input: &[f32],
        h: usize,
        w: usize,
        dout: &[f32],
        dinput: Option<&mut [f32]>,
    ) {
        let hw = h * w;
        let k = self.fan_in();
        let dout = &dout[..self.cout * hw];
        for (o, g) in self.bias.of_mut(grads).iter_mut().enumerate() {
            *g += dout[o * hw..(o + 1) * hw].iter().sum::<f32>();
        }
        let weight = self.weight.of(params);
        if self.kernel == 1 {
            let cols = &input[..k * hw];
            gemm(self.cout, hw, k, dout, (hw, 1), cols, (1, hw), 1.0, self.weight.of_mut(grads));
            if let Some(dx) = dinput {
                gemm(k, self.cout, hw, weight, (1, k), dout, (hw, 1), 1.0, &mut dx[..k * hw]);
            }
        } else {
            let mut cols = Vec::new();
            im2col3(input, self.cin, h, w, &mut cols);
            gemm(self.cout, hw, k, dout, (hw, 1), &cols, (1, hw), 1.0, self.weight.of_mut(grads));
            if let Some(dx) = dinput {
                gemm(k, self.cout, hw, weight, (1, k), dout, (hw, 1), 0.0, &mut cols);
                col2im3_add(&cols, self.cin, h, w, dx);
            }
        }
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the post-activation value was not positive.
pub fn relu_backward_inplace(activated: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Normalization over channels, independently at each pixel, with a
/// learnable per-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelNorm {
    pub channels: usize,
    pub gamma: ParamRange,
    pub beta: ParamRange,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelNormTape {
    pub normalized: FeatureMap,
    pub inv_std: Vec<f32>,
}

impl PixelNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: layout.push(&alloc::format!("{name}.gamma"), &[channels]),
            beta: layout.push(&alloc::format!("{name}.beta"), &[channels]),
            eps: 1e-5,
        }
    }

    pub fn init(&self, params: &mut [f32]) {
        self.gamma.of_mut(params).fill(1.0);
        self.beta.of_mut(params).fill(0.0);
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> (FeatureMap, PixelNormTape) {
        let c = self.channels;
        let hw = x.pixels();
        let mut mean = vec![0.0f32; hw];
        let mut var = vec![0.0f32; hw];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(x.plane(ch)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= c as f32;
        }
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(x.plane(ch)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|s| 1.0 / libm::sqrtf(s / c as f32 + self.eps)).collect();
        let mut normalized = FeatureMap::zeros(c, x.height, x.width);
        let mut out = FeatureMap::zeros(c, x.height, x.width);
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        for ch in 0..c {
            let src = x.plane(ch);
            let nrm = normalized.plane_mut(ch);
            for p in 0..hw {
                nrm[p] = (src[p] - mean[p]) * inv_std[p];
            }
            let dst = out.plane_mut(ch);
            for p in 0..hw {
                dst[p] = gamma[ch] * nrm[p] + beta[ch];
            }
        }
        (out, PixelNormTape { normalized, inv_std })
    }

    pub fn backward(&self, params: &[f32], grads: &mut [f32], tape: &PixelNormTape, dy: &FeatureMap) -> FeatureMap {
        let c = self.channels;
        let hw = dy.pixels();
        let gamma = self.gamma.of(params);
        {
            let dg = self.gamma.of_mut(grads);
            for ch in 0..c {
                dg[ch] += dy.plane(ch).iter().zip(tape.normalized.plane(ch)).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        {
            let db = self.beta.of_mut(grads);
            for ch in 0..c {
                db[ch] += dy.plane(ch).iter().sum::<f32>();
            }
        }
        let mut sum_d = vec![0.0f32; hw];
        let mut sum_dx = vec![0.0f32; hw];
        for ch in 0..c {
            let g = dy.plane(ch);
            let n = tape.normalized.plane(ch);
            for p in 0..hw {
                let d = g[p] * gamma[ch];
                sum_d[p] += d;
                sum_dx[p] += d * n[p];
            }
        }
        let mut dx = FeatureMap::zeros(c, dy.height, dy.width);
        let cf = c as f32;
        for ch in 0..c {
            let g = dy.plane(ch);
            let n = tape.normalized.plane(ch);
            let out = dx.plane_mut(ch);
            for p in 0..hw {
                let d = g[p] * gamma[ch];
                out[p] = tape.inv_std[p] / cf * (cf * d - sum_d[p] - n[p] * sum_dx[p]);
            }
        }
        dx
    }
}

/// Maps `f` over `items`, in parallel when the `std` feature is on. Output
/// order always matches input order.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "std")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "std"))]
    {
        items.iter().map(f).collect()
    }
}
