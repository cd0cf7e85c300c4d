//! Progressive x2 sub-pixel upsampling and the per-pixel height MLP.

use alloc::{format, vec::Vec};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, FeatureMap, ParamLayout};

/// `(r^2 C) x H x W -> C x rH x rW`. Input channel `c*r^2 + i*r + j` lands
/// at offset `(i, j)` of every `r x r` output block of channel `c`.
pub fn pixel_shuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    let rr = r * r;
    if r == 0 || x.channels % rr != 0 {
        return Err(Error::Shape {
            context: "pixel shuffle channels",
            expected: rr,
            found: x.channels,
        });
    }
    let c_out = x.channels / rr;
    let (h, w) = (x.height, x.width);
    let (oh, ow) = (h * r, w * r);
    let mut out = FeatureMap::zeros(c_out, oh, ow);
    for c in 0..c_out {
        for i in 0..r {
            for j in 0..r {
                let src = x.plane(c * rr + i * r + j);
                let dst = out.plane_mut(c);
                for y in 0..h {
                    let row = (y * r + i) * ow;
                    for xx in 0..w {
                        dst[row + xx * r + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint, so it carries gradients back.
pub fn pixel_unshuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 || x.height % r != 0 || x.width % r != 0 {
        return Err(Error::Shape {
            context: "pixel unshuffle spatial size",
            expected: r,
            found: x.height,
        });
    }
    let rr = r * r;
    let (h, w) = (x.height / r, x.width / r);
    let mut out = FeatureMap::zeros(x.channels * rr, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        for i in 0..r {
            for j in 0..r {
                let dst = out.plane_mut(c * rr + i * r + j);
                for y in 0..h {
                    let row = (y * r + i) * x.width;
                    for xx in 0..w {
                        dst[y * w + xx] = src[row + xx * r + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

fn max_abs(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
}

fn add_relative_noise<R: Rng>(weights: &mut [f32], noise_scale: f32, rng: &mut R) {
    if noise_scale <= 0.0 {
        return;
    }
    let amp = noise_scale * max_abs(weights);
    if amp == 0.0 {
        return;
    }
    for v in weights.iter_mut() {
        *v += amp * rng.random_range(-1.0f32..1.0);
    }
}

/// Checkerboard-free sub-pixel initialization: every kernel of a sub-pixel
/// group (`r^2` consecutive output channels) is a copy of the group's first
/// kernel, then i.i.d. uniform noise of amplitude
/// `noise_scale * max|w|` is added. `weights` is `cout x fan_in`.
pub fn init_subpixel_weights<R: Rng>(weights: &mut [f32], fan_in: usize, r: usize, noise_scale: f32, rng: &mut R) -> Result<()> {
    let rr = r * r;
    let cout = weights.len() / fan_in.max(1);
    if fan_in == 0 || weights.len() % fan_in != 0 || cout % rr != 0 {
        return Err(Error::Shape {
            context: "sub-pixel output channels",
            expected: rr,
            found: cout,
        });
    }
    for g in 0..cout / rr {
        let base = g * rr * fan_in;
        let (head, tail) = weights[base..base + rr * fan_in].split_at_mut(fan_in);
        for k in tail.chunks_exact_mut(fan_in) {
            k.copy_from_slice(head);
        }
    }
    add_relative_noise(weights, noise_scale, rng);
    Ok(())
}

/// 3x3 kernel initialized as a centered 1x1 kernel (plus relative noise).
/// A pointwise map keeps block-constant inputs block-constant, so together
/// with [`init_subpixel_weights`] the whole upsampling path starts out as a
/// nearest-neighbour upsampler of a coarse-grid computation.
pub fn init_center_tap<R: Rng>(conv: &Conv2d, params: &mut [f32], noise_scale: f32, rng: &mut R) {
    assert_eq!(conv.kernel, 3);
    let bound = 1.0 / libm::sqrtf(conv.cin as f32);
    {
        let w = conv.weight.of_mut(params);
        w.fill(0.0);
        for k in w.chunks_exact_mut(9) {
            k[4] = rng.random_range(-bound..bound);
        }
        add_relative_noise(w, noise_scale, rng);
    }
    for b in conv.bias.of_mut(params) {
        *b = rng.random_range(-bound..bound);
    }
}

/// `log2(r)` blocks of `conv3x3(F -> 4F) -> shuffle(2)`, then
/// `conv3x3(F -> F) -> ReLU`. Absent when `r = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperRes {
    pub factor: usize,
    pub feat: usize,
    pub blocks: Vec<Conv2d>,
    pub final_conv: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct SuperResTape {
    block_inputs: Vec<FeatureMap>,
    final_input: Option<FeatureMap>,
    output: FeatureMap,
}

impl SuperRes {
    pub fn new(layout: &mut ParamLayout, feat: usize, factor: usize) -> Self {
        assert!(factor.is_power_of_two(), "factor must be a power of two");
        let steps = factor.trailing_zeros() as usize;
        let blocks = (0..steps)
            .map(|i| Conv2d::new(layout, &format!("sr.block{i}"), feat, 4 * feat, 3))
            .collect();
        let final_conv = (steps > 0).then(|| Conv2d::new(layout, "sr.final", feat, feat, 3));
        Self {
            factor,
            feat,
            blocks,
            final_conv,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut [f32], noise_scale: f32, rng: &mut R) -> Result<()> {
        for (i, conv) in self.blocks.iter().enumerate() {
            if i == 0 {
                conv.init(params, rng);
            } else {
                init_center_tap(conv, params, 0.0, rng);
            }
            init_subpixel_weights(conv.weight.of_mut(params), conv.fan_in(), 2, noise_scale, rng)?;
            init_subpixel_weights(conv.bias.of_mut(params), 1, 2, 0.0, rng)?;
        }
        if let Some(conv) = &self.final_conv {
            init_center_tap(conv, params, noise_scale, rng);
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> Result<(FeatureMap, SuperResTape)> {
        if x.channels != self.feat {
            return Err(Error::Shape {
                context: "super-resolution input channels",
                expected: self.feat,
                found: x.channels,
            });
        }
        let mut cur = x.clone();
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let y = conv.forward(params, &cur);
            block_inputs.push(core::mem::replace(&mut cur, pixel_shuffle(&y, 2)?));
        }
        let final_input = match &self.final_conv {
            Some(conv) => {
                let mut y = conv.forward(params, &cur);
                relu_inplace(&mut y.data);
                Some(core::mem::replace(&mut cur, y))
            }
            None => None,
        };
        Ok((
            cur.clone(),
            SuperResTape {
                block_inputs,
                final_input,
                output: cur,
            },
        ))
    }

    pub fn backward(&self, params: &[f32], grads: &mut [f32], tape: &SuperResTape, dout: &FeatureMap) -> FeatureMap {
        let mut d = dout.clone();
        if let (Some(conv), Some(input)) = (&self.final_conv, &tape.final_input) {
            relu_backward_inplace(&tape.output.data, &mut d.data);
            let mut dx = FeatureMap::zeros(input.channels, input.height, input.width);
            conv.backward(params, grads, &input.data, input.height, input.width, &d.data, Some(&mut dx.data));
            d = dx;
        }
        for (conv, input) in self.blocks.iter().zip(&tape.block_inputs).rev() {
            let dy = pixel_unshuffle(&d, 2).expect("shape fixed by forward");
            let mut dx = FeatureMap::zeros(input.channels, input.height, input.width);
            conv.backward(params, grads, &input.data, input.height, input.width, &dy.data, Some(&mut dx.data));
            d = dx;
        }
        d
    }
}

/// Per-pixel MLP as 1x1 convolutions: `sizes[0] -> ... -> sizes[n-1] -> 1`,
/// ReLU between layers, linear output, no clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightHead {
    pub layers: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct HeadTape {
    inputs: Vec<FeatureMap>,
}

impl HeightHead {
    pub fn new(layout: &mut ParamLayout, sizes: &[usize]) -> Self {
        let mut widths = sizes.to_vec();
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(layout, &format!("head.fc{i}"), w[0], w[1], 1))
            .collect();
        Self { layers }
    }

    pub fn init<R: Rng>(&self, params: &mut [f32], rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> (FeatureMap, HeadTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(params, &cur);
            if i < last {
                relu_inplace(&mut y.data);
            }
            inputs.push(core::mem::replace(&mut cur, y));
        }
        (cur, HeadTape { inputs })
    }

    pub fn backward(&self, params: &[f32], grads: &mut [f32], tape: &HeadTape, dout: &FeatureMap) -> FeatureMap {
        let mut d = dout.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[i];
            let mut dx = FeatureMap::zeros(input.channels, input.height, input.width);
            layer.backward(params, grads, &input.data, input.height, input.width, &d.data, Some(&mut dx.data));
            if i > 0 {
                // input of layer i is the ReLU output of layer i-1
                relu_backward_inplace(&input.data, &mut dx.data);
            }
            d = dx;
        }
        d
    }
}

#[cfg(test)]
fn group_spread(weights: &[f32], fan_in: usize, r: usize) -> f32 {
    let rr = r * r;
    let mut worst = 0.0f32;
    for g in weights.chunks_exact(rr * fan_in) {
        for k in 0..fan_in {
            let vals: Vec<f32> = (0..rr).map(|m| g[m * fan_in + k]).collect();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            worst = worst.max(hi - lo);
        }
    }
    worst
}
