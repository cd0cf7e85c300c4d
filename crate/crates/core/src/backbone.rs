//! Per-acquisition spatio-spectral feature extractor: shallow convolutions,
//! residual dense blocks and global feature fusion, without an upsampler.
//!
//! Every timestep goes through the same weights; nothing mixes time.

use alloc::{format, vec, vec::Vec};
use rand::Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, FeatureMap, ParamLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDenseBlock {
    pub layers: Vec<Conv2d>,
    pub local_fusion: Conv2d,
    feat: usize,
    growth: usize,
}

impl ResidualDenseBlock {
    fn new(layout: &mut ParamLayout, name: &str, feat: usize, growth: usize, n_layers: usize) -> Self {
        let layers = (0..n_layers)
            .map(|l| Conv2d::new(layout, &format!("{name}.layer{l}"), feat + l * growth, growth, 3))
            .collect();
        let fused = feat + n_layers * growth;
        let local_fusion = Conv2d::new(layout, &format!("{name}.fusion"), fused, feat, 1);
        assert_eq!(local_fusion.cin, feat + n_layers * growth);
        Self {
            layers,
            local_fusion,
            feat,
            growth,
        }
    }

    pub fn dense_channels(&self) -> usize {
        self.feat + self.layers.len() * self.growth
    }

    /// Returns the block output and the dense buffer (input followed by
    /// every post-ReLU layer output).
    fn forward(&self, params: &[f32], input: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
        let hw = h * w;
        let mut dense = vec![0.0; self.dense_channels() * hw];
        dense[..self.feat * hw].copy_from_slice(&input[..self.feat * hw]);
        for (l, layer) in self.layers.iter().enumerate() {
            let start = (self.feat + l * self.growth) * hw;
            let (prefix, rest) = dense.split_at_mut(start);
            let out = &mut rest[..self.growth * hw];
            layer.forward_into(params, prefix, h, w, out);
            relu_inplace(out);
        }
        let mut out = vec![0.0; self.feat * hw];
        self.local_fusion.forward_into(params, &dense, h, w, &mut out);
        for (o, &x) in out.iter_mut().zip(input) {
            *o += x;
        }
        (out, dense)
    }

    /// Gradient with respect to the block input.
    fn backward(&self, params: &[f32], grads: &mut [f32], dense: &[f32], h: usize, w: usize, dout: &[f32]) -> Vec<f32> {
        let hw = h * w;
        let mut ddense = vec![0.0; self.dense_channels() * hw];
        self.local_fusion
            .backward(params, grads, dense, h, w, dout, Some(&mut ddense));
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let start = (self.feat + l * self.growth) * hw;
            let (dprefix, drest) = ddense.split_at_mut(start);
            let dlayer = &mut drest[..self.growth * hw];
            relu_backward_inplace(&dense[start..start + self.growth * hw], dlayer);
            layer.backward(params, grads, &dense[..start], h, w, dlayer, Some(dprefix));
        }
        let mut dinput = ddense;
        dinput.truncate(self.feat * hw);
        for (d, &g) in dinput.iter_mut().zip(dout) {
            *d += g;
        }
        dinput
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub shallow1: Conv2d,
    pub shallow2: Conv2d,
    pub blocks: Vec<ResidualDenseBlock>,
    pub global_fusion: Conv2d,
    pub global_conv: Conv2d,
}

/// Activations kept for the backward pass of one timestep.
#[derive(Debug, Clone)]
pub struct BackboneTape {
    input: FeatureMap,
    shallow1: Vec<f32>,
    dense: Vec<Vec<f32>>,
    block_outputs: Vec<f32>,
    fused: Vec<f32>,
}

impl Backbone {
    pub fn new(layout: &mut ParamLayout, cfg: &BackboneConfig) -> Self {
        let f = cfg.feat_dim;
        let shallow1 = Conv2d::new(layout, "backbone.sfe1", cfg.in_channels, f, 3);
        let shallow2 = Conv2d::new(layout, "backbone.sfe2", f, f, 3);
        let blocks = (0..cfg.n_blocks)
            .map(|b| ResidualDenseBlock::new(layout, &format!("backbone.rdb{b}"), f, cfg.growth, cfg.layers_per_block))
            .collect();
        let global_fusion = Conv2d::new(layout, "backbone.gff1", cfg.n_blocks * f, f, 1);
        let global_conv = Conv2d::new(layout, "backbone.gff2", f, f, 3);
        Self {
            cfg: cfg.clone(),
            shallow1,
            shallow2,
            blocks,
            global_fusion,
            global_conv,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut [f32], rng: &mut R) {
        self.shallow1.init(params, rng);
        self.shallow2.init(params, rng);
        for b in &self.blocks {
            for l in &b.layers {
                l.init(params, rng);
            }
            b.local_fusion.init(params, rng);
        }
        self.global_fusion.init(params, rng);
        self.global_conv.init(params, rng);
    }

    /// Features of one acquisition, `feat_dim x H x W`.
    pub fn forward(&self, params: &[f32], x: &FeatureMap) -> Result<(FeatureMap, BackboneTape)> {
        if x.channels != self.cfg.in_channels {
            return Err(Error::Shape {
                context: "backbone input channels",
                expected: self.cfg.in_channels,
                found: x.channels,
            });
        }
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let f = self.cfg.feat_dim;
        let mut shallow1 = vec![0.0; f * hw];
        self.shallow1.forward_into(params, &x.data, h, w, &mut shallow1);
        let mut shallow2 = vec![0.0; f * hw];
        self.shallow2.forward_into(params, &shallow1, h, w, &mut shallow2);

        let mut block_outputs = vec![0.0; self.blocks.len() * f * hw];
        let mut dense = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let (out, buf) = if b == 0 {
                block.forward(params, &shallow2, h, w)
            } else {
                block.forward(params, &block_outputs[(b - 1) * f * hw..b * f * hw], h, w)
            };
            block_outputs[b * f * hw..(b + 1) * f * hw].copy_from_slice(&out);
            dense.push(buf);
        }
        let mut fused = vec![0.0; f * hw];
        self.global_fusion
            .forward_into(params, &block_outputs, h, w, &mut fused);
        let mut out = vec![0.0; f * hw];
        self.global_conv.forward_into(params, &fused, h, w, &mut out);
        for (o, &s) in out.iter_mut().zip(&shallow1) {
            *o += s;
        }
        let tape = BackboneTape {
            input: x.clone(),
            shallow1,
            dense,
            block_outputs,
            fused,
        };
        Ok((FeatureMap::from_vec(f, h, w, out)?, tape))
    }

    /// Inference-only forward.
    pub fn infer(&self, params: &[f32], x: &FeatureMap) -> Result<FeatureMap> {
        self.forward(params, x).map(|(y, _)| y)
    }

    pub fn backward(&self, params: &[f32], grads: &mut [f32], tape: &BackboneTape, dout: &FeatureMap) {
        let (h, w) = (dout.height, dout.width);
        let hw = h * w;
        let f = self.cfg.feat_dim;
        let mut dshallow1 = dout.data.clone();
        let mut dfused = vec![0.0; f * hw];
        self.global_conv
            .backward(params, grads, &tape.fused, h, w, &dout.data, Some(&mut dfused));
        let mut dblocks = vec![0.0; self.blocks.len() * f * hw];
        self.global_fusion
            .backward(params, grads, &tape.block_outputs, h, w, &dfused, Some(&mut dblocks));
        let mut carry = vec![0.0; f * hw];
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let mut dy = dblocks[b * f * hw..(b + 1) * f * hw].to_vec();
            for (d, c) in dy.iter_mut().zip(&carry) {
                *d += c;
            }
            carry = block.backward(params, grads, &tape.dense[b], h, w, &dy);
        }
        self.shallow2
            .backward(params, grads, &tape.shallow1, h, w, &carry, Some(&mut dshallow1));
        self.shallow1
            .backward(params, grads, &tape.input.data, h, w, &dshallow1, None);
    }
}
