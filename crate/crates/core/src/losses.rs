//! Training objectives with analytic gradients with respect to the prediction.
//!
//! Every loss is reduced patch-first: a mean within each patch, then a mean
//! over the patches that have at least one valid term. Invalid pixels never
//! enter a sum, so perturbing them changes nothing, bit for bit.

use alloc::{vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{Error, Result};

/// One prediction / reference pair on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPatch {
    pub height: usize,
    pub width: usize,
    pub pred: Vec<f64>,
    pub target: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LossPatch {
    pub fn new(height: usize, width: usize, pred: Vec<f64>, target: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        for (len, what) in [(pred.len(), "loss prediction"), (target.len(), "loss target"), (valid.len(), "loss mask")] {
            if len != n {
                return Err(Error::Shape {
                    context: what,
                    expected: n,
                    found: len,
                });
            }
        }
        Ok(Self {
            height,
            width,
            pred,
            target,
            valid,
        })
    }

    fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-patch gradients of a batch loss with respect to `pred`.
pub type BatchGrad = Vec<Vec<f64>>;

fn zero_grads(batch: &[LossPatch]) -> BatchGrad {
    batch.iter().map(|p| vec![0.0; p.pred.len()]).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error, averaged within each patch and then across patches.
pub fn patch_balanced_mae(batch: &[LossPatch]) -> Result<f64> {
    mae_impl(batch, None)
}

pub fn patch_balanced_mae_grad(batch: &[LossPatch]) -> Result<(f64, BatchGrad)> {
    let mut g = zero_grads(batch);
    let v = mae_impl(batch, Some(&mut g))?;
    Ok((v, g))
}

fn mae_impl(batch: &[LossPatch], mut grad: Option<&mut BatchGrad>) -> Result<f64> {
    let counts: Vec<usize> = batch.iter().map(LossPatch::n_valid).collect();
    let used = counts.iter().filter(|&&n| n > 0).count();
    if used == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut total = 0.0;
    for (b, p) in batch.iter().enumerate() {
        let n = counts[b];
        if n == 0 {
            continue;
        }
        let mut s = 0.0;
        for i in 0..p.pred.len() {
            if p.valid[i] {
                s += (p.pred[i] - p.target[i]).abs();
            }
        }
        total += s / n as f64;
        if let Some(g) = grad.as_deref_mut() {
            let scale = 1.0 / (n as f64 * used as f64);
            for i in 0..p.pred.len() {
                if p.valid[i] {
                    g[b][i] = sign(p.pred[i] - p.target[i]) * scale;
                }
            }
        }
    }
    Ok(total / used as f64)
}

/// Backward differences. `dx` is `H x (W-1)` with
/// `dx[i][j-1] = X[i][j] - X[i][j-1]`; `dy` is `(H-1) x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGradients {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

pub fn gradients(img: &[f64], height: usize, width: usize) -> Result<ImageGradients> {
    if img.len() != height * width {
        return Err(Error::Shape {
            context: "gradient input",
            expected: height * width,
            found: img.len(),
        });
    }
    let mut dx = Vec::with_capacity(height * width.saturating_sub(1));
    for i in 0..height {
        for j in 1..width {
            dx.push(img[i * width + j] - img[i * width + j - 1]);
        }
    }
    let mut dy = Vec::with_capacity(height.saturating_sub(1) * width);
    for i in 1..height {
        for j in 0..width {
            dy.push(img[i * width + j] - img[(i - 1) * width + j]);
        }
    }
    Ok(ImageGradients { dx, dy })
}

/// One difference direction of a patch: index pairs `(current, previous)`
/// over positions where both pixels are valid.
fn valid_pairs(p: &LossPatch, horizontal: bool) -> Vec<(usize, usize)> {
    let (h, w) = (p.height, p.width);
    let mut out = Vec::new();
    if horizontal {
        for i in 0..h {
            for j in 1..w {
                let (a, b) = (i * w + j, i * w + j - 1);
                if p.valid[a] && p.valid[b] {
                    out.push((a, b));
                }
            }
        }
    } else {
        for i in 1..h {
            for j in 0..w {
                let (a, b) = (i * w + j, (i - 1) * w + j);
                if p.valid[a] && p.valid[b] {
                    out.push((a, b));
                }
            }
        }
    }
    out
}

/// Gradient-magnitude weights `lambda_min + (1 - lambda_min) |dY| / max|dY|`,
/// with the ratio taken as 0 when the target is flat.
pub fn wgdl_weights(target_abs_grad: &[f64], lambda_min: f64) -> Vec<f64> {
    let max = target_abs_grad.iter().fold(0.0f64, |m, &v| m.max(v));
    target_abs_grad
        .iter()
        .map(|&g| if max > 0.0 { lambda_min + (1.0 - lambda_min) * g / max } else { lambda_min })
        .collect()
}

/// Weighted gradient-difference loss.
pub fn wgdl(batch: &[LossPatch], lambda_min: f64, exponent: u32) -> Result<f64> {
    wgdl_impl(batch, lambda_min, exponent, None)
}

pub fn wgdl_grad(batch: &[LossPatch], lambda_min: f64, exponent: u32) -> Result<(f64, BatchGrad)> {
    let mut g = zero_grads(batch);
    let v = wgdl_impl(batch, lambda_min, exponent, Some(&mut g))?;
    Ok((v, g))
}

/// Unweighted gradient-difference loss, written out independently of
/// [`wgdl`]: mean of `||dX| - |dY||^e` per direction, halved sum of the two,
/// then patch-balanced.
pub fn gdl(batch: &[LossPatch], exponent: u32) -> Result<f64> {
    check_exponent(exponent)?;
    let mut total = 0.0;
    let mut used = 0usize;
    for p in batch {
        let mut dirs = [0.0f64; 2];
        let mut any = false;
        for (k, horizontal) in [true, false].into_iter().enumerate() {
            let pairs = valid_pairs(p, horizontal);
            if pairs.is_empty() {
                continue;
            }
            any = true;
            let s: f64 = pairs
                .iter()
                .map(|&(a, b)| {
                    let d = ((p.pred[a] - p.pred[b]).abs() - (p.target[a] - p.target[b]).abs()).abs();
                    powi(d, exponent)
                })
                .sum();
            dirs[k] = s / pairs.len() as f64;
        }
        if any {
            total += (dirs[0] + dirs[1]) / 2.0;
            used += 1;
        }
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}

fn check_exponent(e: u32) -> Result<()> {
    if e == 1 || e == 2 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(alloc::format!("gradient loss exponent must be 1 or 2, got {e}")))
    }
}

fn powi(x: f64, e: u32) -> f64 {
    if e == 1 {
        x
    } else {
        x * x
    }
}

fn wgdl_impl(batch: &[LossPatch], lambda_min: f64, exponent: u32, mut grad: Option<&mut BatchGrad>) -> Result<f64> {
    check_exponent(exponent)?;
    if !(lambda_min > 0.0 && lambda_min <= 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("lambda_min must lie in (0, 1], got {lambda_min}")));
    }
    let pairs: Vec<[Vec<(usize, usize)>; 2]> = batch.iter().map(|p| [valid_pairs(p, true), valid_pairs(p, false)]).collect();
    let used = pairs.iter().filter(|d| !d[0].is_empty() || !d[1].is_empty()).count();
    if used == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (b, p) in batch.iter().enumerate() {
        let mut value = 0.0;
        let mut any = false;
        for dir in &pairs[b] {
            if dir.is_empty() {
                continue;
            }
            any = true;
            let ty: Vec<f64> = dir.iter().map(|&(a, c)| (p.target[a] - p.target[c]).abs()).collect();
            let weights = wgdl_weights(&ty, lambda_min);
            let k = dir.len() as f64;
            let mut s = 0.0;
            for (n, &(a, c)) in dir.iter().enumerate() {
                let gx = p.pred[a] - p.pred[c];
                let u = gx.abs() - ty[n];
                s += weights[n] * powi(u.abs(), exponent);
                if let Some(g) = grad.as_deref_mut() {
                    let du = if exponent == 1 { sign(u) } else { 2.0 * u };
                    let d = weights[n] * du * sign(gx) / (2.0 * k * used as f64);
                    g[b][a] += d;
                    g[b][c] -= d;
                }
            }
            value += s / k;
        }
        if any {
            total += value / 2.0;
        }
    }
    Ok(total / used as f64)
}

/// Loss value and its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub height: f64,
    pub wgdl: f64,
}

/// `w_height * MAE + w_wgdl * WGDL`.
pub fn total_loss(batch: &[LossPatch], cfg: &LossConfig) -> Result<LossValue> {
    let height = patch_balanced_mae(batch)?;
    let w = wgdl(batch, cfg.lambda_min, cfg.gdl_exponent.power())?;
    Ok(LossValue {
        total: cfg.height_weight * height + cfg.wgdl_weight * w,
        height,
        wgdl: w,
    })
}

pub fn total_loss_grad(batch: &[LossPatch], cfg: &LossConfig) -> Result<(LossValue, BatchGrad)> {
    let (height, gh) = patch_balanced_mae_grad(batch)?;
    let (w, gw) = wgdl_grad(batch, cfg.lambda_min, cfg.gdl_exponent.power())?;
    let grads = gh
        .into_iter()
        .zip(gw)
        .map(|(a, b)| a.iter().zip(&b).map(|(x, y)| cfg.height_weight * x + cfg.wgdl_weight * y).collect())
        .collect();
    Ok((
        LossValue {
            total: cfg.height_weight * height + cfg.wgdl_weight * w,
            height,
            wgdl: w,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GdlExponent;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patch(h: usize, w: usize, pred: Vec<f64>, target: Vec<f64>) -> LossPatch {
        let n = h * w;
        LossPatch::new(h, w, pred, target, vec![true; n]).unwrap()
    }

    fn random_patch(rng: &mut ChaCha8Rng, h: usize, w: usize, masked: f64) -> LossPatch {
        let n = h * w;
        LossPatch::new(
            h,
            w,
            (0..n).map(|_| rng.random_range(0.0..30.0)).collect(),
            (0..n).map(|_| rng.random_range(0.0..30.0)).collect(),
            (0..n).map(|_| rng.random::<f64>() >= masked).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mae_examples() {
        let p = patch(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(patch_balanced_mae(&[p]).unwrap(), 0.0);

        let t = vec![3.0; 9];
        let p = patch(3, 3, t.iter().map(|v| v + 0.5).collect(), t);
        assert_eq!(patch_balanced_mae(&[p]).unwrap(), 0.5);

        let a = patch(10, 10, vec![1.0; 100], vec![0.0; 100]);
        let b = patch(100, 100, vec![3.0; 10_000], vec![0.0; 10_000]);
        let v = patch_balanced_mae(&[a, b]).unwrap();
        assert!((v - 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn mae_skips_empty_patches_and_rejects_empty_batches() {
        let a = patch(2, 2, vec![1.0; 4], vec![0.0; 4]);
        let mut b = patch(2, 2, vec![9.0; 4], vec![0.0; 4]);
        b.valid = vec![false; 4];
        assert_eq!(patch_balanced_mae(&[a, b.clone()]).unwrap(), 1.0);
        assert_eq!(patch_balanced_mae(&[b]), Err(Error::NoValidPixels));
    }

    #[test]
    fn gradient_examples() {
        let g = gradients(&[0.0, 1.0, 3.0], 1, 3).unwrap();
        assert_eq!(g.dx, vec![1.0, 2.0]);
        assert!(g.dy.is_empty());
        let g = gradients(&[5.0; 12], 3, 4).unwrap();
        assert!(g.dx.iter().chain(&g.dy).all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let g = gradients(&img, 5, 5).unwrap();
        let at = |i: usize, j: usize| img[i * 5 + j];
        let mut n = 0;
        for i in 0..5 {
            for j in 1..5 {
                assert_eq!(g.dx[n], at(i, j) - at(i, j - 1));
                n += 1;
            }
        }
        let mut n = 0;
        for i in 1..5 {
            for j in 0..5 {
                assert_eq!(g.dy[n], at(i, j) - at(i - 1, j));
                n += 1;
            }
        }
    }

    #[test]
    fn wgdl_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_patch(&mut rng, 6, 6, 0.2);
        p.pred = p.target.clone();
        assert_eq!(wgdl(&[p], 0.1, 2).unwrap(), 0.0);
    }

    #[test]
    fn wgdl_flat_target_uses_floor_weight() {
        // 3x3 constant target, one horizontal step of 2 in the prediction
        let mut pred = vec![0.0; 9];
        pred[2] = 2.0;
        let p = patch(3, 3, pred, vec![4.0; 9]);
        // x-direction: 6 positions, one term 0.1 * 4; y-direction: 6 positions, one term 0.1 * 4
        let expected = (0.1 * 4.0 / 6.0 + 0.1 * 4.0 / 6.0) / 2.0;
        let v = wgdl(&[p], 0.1, 2).unwrap();
        assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
    }

    #[test]
    fn wgdl_weights_scale_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..10.0)).collect();
        let w1 = wgdl_weights(&g, 0.1);
        let w2 = wgdl_weights(&g.iter().map(|v| v * 7.5).collect::<Vec<_>>(), 0.1);
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-14);
            assert!((0.1..=1.0).contains(a));
        }
        let imax = g.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
        assert_eq!(w1[imax], 1.0);
    }

    #[test]
    fn unit_floor_equals_plain_gdl() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for e in [1, 2] {
            let batch = [random_patch(&mut rng, 7, 5, 0.3), random_patch(&mut rng, 4, 9, 0.3)];
            assert_eq!(wgdl(&batch, 1.0, e).unwrap(), gdl(&batch, e).unwrap());
        }
    }

    #[test]
    fn total_loss_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = [random_patch(&mut rng, 5, 5, 0.3), random_patch(&mut rng, 5, 5, 0.3)];
        let mut cfg = LossConfig {
            wgdl_weight: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(total_loss(&batch, &cfg).unwrap().total, patch_balanced_mae(&batch).unwrap());
        cfg.wgdl_weight = 1.0;
        cfg.height_weight = 0.0;
        cfg.gdl_exponent = GdlExponent::L1;
        assert_eq!(total_loss(&batch, &cfg).unwrap().total, wgdl(&batch, cfg.lambda_min, 1).unwrap());
        let mut same = batch.clone();
        for p in &mut same {
            p.pred = p.target.clone();
        }
        assert_eq!(total_loss(&same, &LossConfig::default()).unwrap().total, 0.0);
    }

    #[test]
    fn grads_vanish_on_invalid_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = [random_patch(&mut rng, 8, 8, 0.4), random_patch(&mut rng, 8, 8, 0.4)];
        let (_, g) = total_loss_grad(&batch, &LossConfig::default()).unwrap();
        for (p, gp) in batch.iter().zip(&g) {
            for (v, d) in p.valid.iter().zip(gp) {
                if !v {
                    assert_eq!(*d, 0.0);
                }
            }
        }
    }

    #[test]
    fn bad_exponent_and_floor_rejected() {
        let p = patch(2, 2, vec![0.0; 4], vec![0.0; 4]);
        assert!(wgdl(&[p.clone()], 0.1, 3).is_err());
        assert!(wgdl(&[p], 0.0, 2).is_err());
    }
}
