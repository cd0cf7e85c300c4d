//! Per-pixel multi-head temporal attention whose query comes from the
//! encoded LiDAR acquisition date.
//!
//! For each pixel and head `h` (a contiguous chunk of `head_dim` channels):
//!
//! ```text
//! f~_t  = f_t + p_t
//! q     = W_Q e_L                   (shared projection, split per head)
//! s_t   = (W_K f~_t) . q_h / sqrt(head_dim)
//! a     = softmax over non-padded t
//! out_h = W_V sum_t a_t f~_t
//! ```
//!
//! Heads are concatenated, projected by a 1x1 convolution and normalized
//! per pixel. `(W_K f~) . q = f~ . (W_K^T q)`, so keys are never
//! materialized.

use alloc::{vec, vec::Vec};
use rand::Rng;

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeatureMap, ParamLayout, ParamRange, PixelNorm, PixelNormTape};

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFusion {
    pub cfg: AttentionConfig,
    /// Input feature / encoding width.
    pub dim: usize,
    pub w_query: ParamRange,
    pub w_key: ParamRange,
    pub w_value: ParamRange,
    pub out_proj: Conv2d,
    pub norm: PixelNorm,
}

/// Result of one fusion pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// `feat_out x H x W`.
    pub fused: FeatureMap,
    /// `heads x T x H x W` attention weights, zero on padded timesteps.
    pub attn: Vec<f32>,
    pub timesteps: usize,
}

impl FusionOutput {
    pub fn weights(&self, head: usize, t: usize) -> &[f32] {
        let hw = self.fused.pixels();
        let start = (head * self.timesteps + t) * hw;
        &self.attn[start..start + hw]
    }
}

#[derive(Debug, Clone)]
pub struct FusionTape {
    valid: Vec<usize>,
    /// Date-augmented features of the valid timesteps, `dim x hw` each.
    augmented: Vec<Vec<f32>>,
    query: Vec<f32>,
    key_eff: Vec<f32>,
    lidar_encoding: Vec<f32>,
    /// Attention-weighted features before the value projection, `dim x hw`.
    pooled: Vec<f32>,
    heads_out: FeatureMap,
    norm: PixelNormTape,
    height: usize,
    width: usize,
}

impl TemporalFusion {
    pub fn new(layout: &mut ParamLayout, cfg: &AttentionConfig, dim: usize) -> Self {
        let hd = cfg.head_dim;
        assert_eq!(cfg.heads * hd, dim, "heads x head_dim must equal the feature width");
        let w_query = layout.push("temporal.w_query", &[cfg.heads * hd, dim]);
        let w_key = layout.push("temporal.w_key", &[cfg.heads, hd, hd]);
        let w_value = layout.push("temporal.w_value", &[cfg.heads, hd, hd]);
        let out_proj = Conv2d::new(layout, "temporal.out_proj", dim, cfg.feat_out, 1);
        let norm = PixelNorm::new(layout, "temporal.norm", cfg.feat_out);
        Self {
            cfg: cfg.clone(),
            dim,
            w_query,
            w_key,
            w_value,
            out_proj,
            norm,
        }
    }

    pub fn init<R: Rng>(&self, params: &mut [f32], rng: &mut R) {
        let b = 1.0 / libm::sqrtf(self.dim as f32);
        for v in self.w_query.of_mut(params) {
            *v = rng.random_range(-b..b);
        }
        let b = 1.0 / libm::sqrtf(self.cfg.head_dim as f32);
        for v in self.w_key.of_mut(params) {
            *v = rng.random_range(-b..b);
        }
        for v in self.w_value.of_mut(params) {
            *v = rng.random_range(-b..b);
        }
        self.out_proj.init(params, rng);
        self.norm.init(params);
    }

    /// Temporal query `W_Q e_L` (all heads concatenated).
    pub fn query(&self, params: &[f32], lidar_encoding: &[f32]) -> Vec<f32> {
        let wq = self.w_query.of(params);
        (0..self.cfg.heads * self.cfg.head_dim)
            .map(|r| {
                wq[r * self.dim..(r + 1) * self.dim]
                    .iter()
                    .zip(lidar_encoding)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn key_eff(&self, params: &[f32], query: &[f32]) -> Vec<f32> {
        let hd = self.cfg.head_dim;
        let wk = self.w_key.of(params);
        let mut k = vec![0.0; self.dim];
        for h in 0..self.cfg.heads {
            for i in 0..hd {
                k[h * hd + i] = (0..hd).map(|j| wk[(h * hd + i) * hd + j] * query[h * hd + j]).sum();
            }
        }
        k
    }

    pub fn fuse(
        &self,
        params: &[f32],
        features: &[FeatureMap],
        encodings: &[Vec<f32>],
        lidar_encoding: &[f32],
        pad_mask: &[bool],
    ) -> Result<(FusionOutput, FusionTape)> {
        let t_total = features.len();
        if encodings.len() != t_total || pad_mask.len() != t_total {
            return Err(Error::Shape {
                context: "timesteps (features / encodings / pad mask)",
                expected: t_total,
                found: if encodings.len() != t_total { encodings.len() } else { pad_mask.len() },
            });
        }
        let valid: Vec<usize> = (0..t_total).filter(|&t| !pad_mask[t]).collect();
        let Some(&first) = valid.first() else {
            return Err(Error::AllPadded);
        };
        if lidar_encoding.len() != self.dim {
            return Err(Error::Shape {
                context: "lidar encoding",
                expected: self.dim,
                found: lidar_encoding.len(),
            });
        }
        let (h, w) = (features[first].height, features[first].width);
        let hw = h * w;
        for &t in &valid {
            let f = &features[t];
            if f.channels != self.dim || f.height != h || f.width != w {
                return Err(Error::Shape {
                    context: "temporal features",
                    expected: self.dim * hw,
                    found: f.data.len(),
                });
            }
            if encodings[t].len() != self.dim {
                return Err(Error::Shape {
                    context: "date encoding",
                    expected: self.dim,
                    found: encodings[t].len(),
                });
            }
        }

        let hd = self.cfg.head_dim;
        let heads = self.cfg.heads;
        let scale = 1.0 / libm::sqrtf(hd as f32);
        let augmented: Vec<Vec<f32>> = valid
            .iter()
            .map(|&t| {
                let mut a = features[t].data.clone();
                for c in 0..self.dim {
                    let p = encodings[t][c];
                    for v in &mut a[c * hw..(c + 1) * hw] {
                        *v += p;
                    }
                }
                a
            })
            .collect();
        let query = self.query(params, lidar_encoding);
        let key_eff = self.key_eff(params, &query);

        let nv = valid.len();
        let mut attn = vec![0.0f32; heads * t_total * hw];
        let mut pooled = vec![0.0f32; self.dim * hw];
        let mut logits = vec![0.0f32; nv * hw];
        for head in 0..heads {
            logits.fill(0.0);
            for (vi, aug) in augmented.iter().enumerate() {
                let row = &mut logits[vi * hw..(vi + 1) * hw];
                for i in 0..hd {
                    let c = head * hd + i;
                    let k = key_eff[c] * scale;
                    for (l, &v) in row.iter_mut().zip(&aug[c * hw..(c + 1) * hw]) {
                        *l += k * v;
                    }
                }
            }
            // masked softmax: padded logits are -inf and never enter the sum
            for p in 0..hw {
                let mut m = f32::NEG_INFINITY;
                for vi in 0..nv {
                    m = m.max(logits[vi * hw + p]);
                }
                let mut sum = 0.0f32;
                for vi in 0..nv {
                    let e = libm::expf(logits[vi * hw + p] - m);
                    logits[vi * hw + p] = e;
                    sum += e;
                }
                for (vi, &t) in valid.iter().enumerate() {
                    attn[(head * t_total + t) * hw + p] = logits[vi * hw + p] / sum;
                }
            }
            for (vi, &t) in valid.iter().enumerate() {
                let a = &attn[(head * t_total + t) * hw..(head * t_total + t + 1) * hw];
                let aug = &augmented[vi];
                for i in 0..hd {
                    let c = head * hd + i;
                    for ((z, &x), &wt) in pooled[c * hw..(c + 1) * hw].iter_mut().zip(&aug[c * hw..(c + 1) * hw]).zip(a) {
                        *z += wt * x;
                    }
                }
            }
        }

        let wv = self.w_value.of(params);
        let mut heads_out = FeatureMap::zeros(self.dim, h, w);
        for head in 0..heads {
            for i in 0..hd {
                let out = heads_out.plane_mut(head * hd + i);
                for j in 0..hd {
                    let wij = wv[(head * hd + i) * hd + j];
                    let z = &pooled[(head * hd + j) * hw..(head * hd + j + 1) * hw];
                    for (o, &zv) in out.iter_mut().zip(z) {
                        *o += wij * zv;
                    }
                }
            }
        }
        let projected = self.out_proj.forward(params, &heads_out);
        let (fused, norm_tape) = self.norm.forward(params, &projected);
        let tape = FusionTape {
            valid,
            augmented,
            query,
            key_eff,
            lidar_encoding: lidar_encoding.to_vec(),
            pooled,
            heads_out,
            norm: norm_tape,
            height: h,
            width: w,
        };
        Ok((
            FusionOutput {
                fused,
                attn,
                timesteps: t_total,
            },
            tape,
        ))
    }

    /// Returns one gradient map per input timestep (zeros for padded ones).
    pub fn backward(
        &self,
        params: &[f32],
        grads: &mut [f32],
        tape: &FusionTape,
        output: &FusionOutput,
        dfused: &FeatureMap,
    ) -> Vec<FeatureMap> {
        let (h, w) = (tape.height, tape.width);
        let hw = h * w;
        let hd = self.cfg.head_dim;
        let heads = self.cfg.heads;
        let t_total = output.timesteps;
        let scale = 1.0 / libm::sqrtf(hd as f32);

        let dproj = self.norm.backward(params, grads, &tape.norm, dfused);
        let mut dheads = FeatureMap::zeros(self.dim, h, w);
        self.out_proj.backward(
            params,
            grads,
            &tape.heads_out.data,
            h,
            w,
            &dproj.data,
            Some(&mut dheads.data),
        );

        // value projection
        let mut dpooled = vec![0.0f32; self.dim * hw];
        {
            let wv = self.w_value.of(params);
            let mut dwv = vec![0.0f32; wv.len()];
            for head in 0..heads {
                for i in 0..hd {
                    let d = dheads.plane(head * hd + i);
                    for j in 0..hd {
                        let z = &tape.pooled[(head * hd + j) * hw..(head * hd + j + 1) * hw];
                        dwv[(head * hd + i) * hd + j] += d.iter().zip(z).map(|(a, b)| a * b).sum::<f32>();
                        let wij = wv[(head * hd + i) * hd + j];
                        for (dz, &dv) in dpooled[(head * hd + j) * hw..(head * hd + j + 1) * hw].iter_mut().zip(d) {
                            *dz += wij * dv;
                        }
                    }
                }
            }
            for (g, d) in self.w_value.of_mut(grads).iter_mut().zip(dwv) {
                *g += d;
            }
        }

        let nv = tape.valid.len();
        let mut daug: Vec<Vec<f32>> = vec![vec![0.0; self.dim * hw]; nv];
        let mut dkey = vec![0.0f32; self.dim];
        let mut dalpha = vec![0.0f32; nv * hw];
        for head in 0..heads {
            dalpha.fill(0.0);
            for (vi, &t) in tape.valid.iter().enumerate() {
                let a = output.weights(head, t);
                let aug = &tape.augmented[vi];
                let da = &mut dalpha[vi * hw..(vi + 1) * hw];
                for i in 0..hd {
                    let c = head * hd + i;
                    let dz = &dpooled[c * hw..(c + 1) * hw];
                    let x = &aug[c * hw..(c + 1) * hw];
                    let dx = &mut daug[vi][c * hw..(c + 1) * hw];
                    for p in 0..hw {
                        da[p] += dz[p] * x[p];
                        dx[p] += a[p] * dz[p];
                    }
                }
            }
            // softmax backward, in place: dalpha -> dlogits
            for p in 0..hw {
                let mut dot = 0.0f32;
                for (vi, &t) in tape.valid.iter().enumerate() {
                    dot += output.weights(head, t)[p] * dalpha[vi * hw + p];
                }
                for (vi, &t) in tape.valid.iter().enumerate() {
                    let a = output.weights(head, t)[p];
                    dalpha[vi * hw + p] = a * (dalpha[vi * hw + p] - dot);
                }
            }
            for vi in 0..nv {
                let ds = &dalpha[vi * hw..(vi + 1) * hw];
                let aug = &tape.augmented[vi];
                for i in 0..hd {
                    let c = head * hd + i;
                    let k = tape.key_eff[c] * scale;
                    let x = &aug[c * hw..(c + 1) * hw];
                    dkey[c] += scale * ds.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
                    for (dx, &d) in daug[vi][c * hw..(c + 1) * hw].iter_mut().zip(ds) {
                        *dx += k * d;
                    }
                }
            }
        }

        // key_eff = W_K q ; q = W_Q e
        let wk = self.w_key.of(params).to_vec();
        let mut dquery = vec![0.0f32; self.dim];
        {
            let gk = self.w_key.of_mut(grads);
            for head in 0..heads {
                for i in 0..hd {
                    let d = dkey[head * hd + i];
                    for j in 0..hd {
                        gk[(head * hd + i) * hd + j] += d * tape.query[head * hd + j];
                        dquery[head * hd + j] += wk[(head * hd + i) * hd + j] * d;
                    }
                }
            }
        }
        {
            let gq = self.w_query.of_mut(grads);
            for (r, &dq) in dquery.iter().enumerate() {
                for (c, &e) in tape.lidar_encoding.iter().enumerate() {
                    gq[r * self.dim + c] += dq * e;
                }
            }
        }

        let mut out: Vec<FeatureMap> = (0..t_total).map(|_| FeatureMap::zeros(self.dim, h, w)).collect();
        for (vi, &t) in tape.valid.iter().enumerate() {
            out[t].data = core::mem::take(&mut daug[vi]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::positional_encoding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AttentionConfig {
        AttentionConfig {
            heads: 2,
            head_dim: 3,
            feat_out: 4,
            tau: 365.0,
        }
    }

    fn build(seed: u64) -> (TemporalFusion, Vec<f32>) {
        let mut layout = ParamLayout::default();
        let tf = TemporalFusion::new(&mut layout, &cfg(), 6);
        let mut p = vec![0.0; layout.len];
        tf.init(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        (tf, p)
    }

    fn random_maps(rng: &mut ChaCha8Rng, t: usize, c: usize, h: usize, w: usize) -> Vec<FeatureMap> {
        (0..t)
            .map(|_| FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    fn enc(doys: &[i32]) -> Vec<Vec<f32>> {
        doys.iter().map(|&d| positional_encoding(d, 6, 365.0).unwrap().0).collect()
    }

    #[test]
    fn single_timestep_gets_full_weight() {
        let (tf, p) = build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_maps(&mut rng, 1, 6, 3, 3);
        let e = positional_encoding(0, 6, 365.0).unwrap().0;
        let (out, _) = tf.fuse(&p, &f, &enc(&[150]), &e, &[false]).unwrap();
        assert!(out.attn.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (tf, p) = build(1);
        let f: Vec<_> = (0..4).map(|_| FeatureMap::from_vec(6, 2, 2, vec![0.3; 24]).unwrap()).collect();
        let e = positional_encoding(10, 6, 365.0).unwrap().0;
        let (out, _) = tf
            .fuse(&p, &f, &enc(&[150, 150, 150, 150]), &e, &[false, false, false, true])
            .unwrap();
        for head in 0..2 {
            for t in 0..3 {
                for &a in out.weights(head, t) {
                    assert!((a - 1.0 / 3.0).abs() < 1e-6);
                }
            }
            assert!(out.weights(head, 3).iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn padded_entries_get_zero_weight_and_rest_sums_to_one() {
        let (tf, p) = build(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_maps(&mut rng, 12, 6, 3, 2);
        let mut mask = [false; 12];
        mask[2] = true;
        mask[7] = true;
        mask[11] = true;
        let doys: Vec<i32> = (0..12).map(|i| 130 + 12 * i).collect();
        let e = positional_encoding(-20, 6, 365.0).unwrap().0;
        let (out, _) = tf.fuse(&p, &f, &enc(&doys), &e, &mask).unwrap();
        for head in 0..2 {
            for px in 0..6 {
                let mut s = 0.0;
                for (t, &padded) in mask.iter().enumerate() {
                    let a = out.weights(head, t)[px];
                    if padded {
                        assert_eq!(a, 0.0);
                    }
                    s += a;
                }
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn all_padded_is_an_error() {
        let (tf, p) = build(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_maps(&mut rng, 2, 6, 2, 2);
        let e = positional_encoding(0, 6, 365.0).unwrap().0;
        assert_eq!(tf.fuse(&p, &f, &enc(&[1, 2]), &e, &[true, true]).unwrap_err(), Error::AllPadded);
    }

    #[test]
    fn query_depends_on_lidar_date() {
        let (tf, p) = build(5);
        let a = tf.query(&p, &positional_encoding(-30, 6, 365.0).unwrap().0);
        let b = tf.query(&p, &positional_encoding(40, 6, 365.0).unwrap().0);
        let d: f32 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (tf, p) = build(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_maps(&mut rng, 4, 6, 2, 3);
        let dy = random_maps(&mut rng, 1, 4, 2, 3).pop().unwrap();
        let encs = enc(&[140, 170, 200, 230]);
        let e = positional_encoding(25, 6, 365.0).unwrap().0;
        let mask = [false, false, true, false];
        let loss = |p: &[f32], f: &[FeatureMap]| -> f64 {
            let (o, _) = tf.fuse(p, f, &encs, &e, &mask).unwrap();
            o.fused.data.iter().zip(&dy.data).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let (out, tape) = tf.fuse(&p, &f, &encs, &e, &mask).unwrap();
        let mut g = vec![0.0; p.len()];
        let df = tf.backward(&p, &mut g, &tape, &out, &dy);
        let h = 1e-2f32;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let up = loss(&pp, &f);
            pp[i] -= 2.0 * h;
            let dn = loss(&pp, &f);
            let fd = (up - dn) / (2.0 * f64::from(h));
            assert!((fd - f64::from(g[i])).abs() < 5e-3 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for t in 0..4 {
            for i in 0..f[t].data.len() {
                let mut ff = f.clone();
                ff[t].data[i] += h;
                let up = loss(&p, &ff);
                ff[t].data[i] -= 2.0 * h;
                let dn = loss(&p, &ff);
                let fd = (up - dn) / (2.0 * f64::from(h));
                assert!((fd - f64::from(df[t].data[i])).abs() < 5e-3 * (1.0 + fd.abs()));
            }
        }
    }
}
