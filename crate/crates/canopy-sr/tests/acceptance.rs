//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use canopy_core::config::{
    AttentionConfig, BackboneConfig, GdlExponent, HeadConfig, LossConfig, ModelConfig, Resolution, SamplerConfig,
    SrConfig, TrainConfig,
};
use canopy_core::datamodel::{rasterize_p95, Extent, LidarPoint, PointClass, PointCloudSample};
use canopy_core::datapipe::{generate_synthetic, ChannelStats, SynthConfig};
use canopy_core::encoders::positional_encoding;
use canopy_core::losses::{patch_balanced_mae, patch_balanced_mae_grad, total_loss, total_loss_grad, wgdl, wgdl_grad, LossPatch};
use canopy_core::metrics::{basic_metrics, bin_errors, fap, HEIGHT_BIN_EDGES};
use canopy_core::model::ModelInput;
use canopy_core::nn::{FeatureMap, ParamLayout};
use canopy_core::optim::lr_schedule;
use canopy_core::resample::{bicubic_upsample, box_downsample};
use canopy_core::superres::{pixel_shuffle, pixel_unshuffle, HeightHead, SuperRes};
use canopy_core::temporal::TemporalFusion;
use canopy_core::trainer::{Scene, Trainer};
use canopy_core::CanopyModel;
use canopy_sr::predict::ModelPredictor;
use canopy_sr::runconfig::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1 and 2

/// Random 2-patch batch of 12x12 maps with at least 30% of pixels masked.
/// Residuals, prediction gradients and gradient differences are kept at
/// least `gap` away from the kinks of |.|.
fn loss_batch(rng: &mut ChaCha8Rng, gap: f64) -> Vec<LossPatch> {
    const N: usize = 12;
    loop {
        let batch: Vec<LossPatch> = (0..2)
            .map(|_| {
                let target: Vec<f64> = (0..N * N).map(|_| rng.random_range(1.5..30.0)).collect();
                let pred: Vec<f64> = target
                    .iter()
                    .map(|&t| {
                        let d = rng.random_range(0.2..2.0);
                        if rng.random_bool(0.5) { t + d } else { t - d }
                    })
                    .collect();
                let valid: Vec<bool> = (0..N * N).map(|_| rng.random_bool(0.55)).collect();
                LossPatch::new(N, N, pred, target, valid).unwrap()
            })
            .collect();
        let masked = batch.iter().flat_map(|p| &p.valid).filter(|v| !**v).count();
        if (masked as f64) < 0.3 * (2 * N * N) as f64 {
            continue;
        }
        let away = batch.iter().all(|p| {
            let mut ok = true;
            for y in 0..N {
                for x in 0..N {
                    let i = y * N + x;
                    for j in [(x > 0).then(|| i - 1), (y > 0).then(|| i - N)].into_iter().flatten() {
                        if p.valid[i] && p.valid[j] {
                            let gx = p.pred[i] - p.pred[j];
                            let gy = p.target[i] - p.target[j];
                            ok &= gx.abs() > gap && (gx.abs() - gy.abs()).abs() > gap;
                        }
                    }
                }
            }
            ok
        });
        if away {
            return batch;
        }
    }
}

fn max_rel_error(batch: &[LossPatch], analytic: &[Vec<f64>], f: &dyn Fn(&[LossPatch]) -> f64) -> f64 {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    for b in 0..batch.len() {
        for i in 0..batch[b].pred.len() {
            let mut up = batch.to_vec();
            up[b].pred[i] += H;
            let mut dn = batch.to_vec();
            dn[b].pred[i] -= H;
            let (fu, fdn) = (f(&up), f(&dn));
            let fd = (fu - fdn) / (2.0 * H);
            let a = analytic[b][i];
            if a == 0.0 {
                // exact cancellation: the quotient can only show rounding of the loss values
                let roundoff = 4.0 * f64::EPSILON * fu.abs().max(fdn.abs()) / (2.0 * H);
                if fd.abs() > roundoff {
                    return f64::INFINITY;
                }
                continue;
            }
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()));
        }
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let batch = loss_batch(&mut rng, 1e-3);
        let (_, g) = patch_balanced_mae_grad(&batch).unwrap();
        worst = worst.max(max_rel_error(&batch, &g, &|b| patch_balanced_mae(b).unwrap()));
        for lambda in [0.1, 1.0] {
            for exponent in [1u32, 2] {
                let (_, g) = wgdl_grad(&batch, lambda, exponent).unwrap();
                worst = worst.max(max_rel_error(&batch, &g, &|b| wgdl(b, lambda, exponent).unwrap()));
            }
        }
        for (exp, hw, ww) in [(GdlExponent::L2, 1.0, 1.0), (GdlExponent::L1, 0.7, 1.3)] {
            let cfg = LossConfig {
                height_weight: hw,
                wgdl_weight: ww,
                lambda_min: 0.1,
                gdl_exponent: exp,
            };
            let (_, g) = total_loss_grad(&batch, &cfg).unwrap();
            worst = worst.max(max_rel_error(&batch, &g, &|b| total_loss(b, &cfg).unwrap().total));
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.2e} over 20 batches"))
}

fn criterion_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = LossConfig::default();
    for trial in 0..100 {
        let batch = loss_batch(&mut rng, 0.0);
        let (base, base_grad) = total_loss_grad(&batch, &cfg).unwrap();
        let b = rng.random_range(0..2);
        let invalid: Vec<usize> = (0..batch[b].valid.len()).filter(|&i| !batch[b].valid[i]).collect();
        let i = invalid[rng.random_range(0..invalid.len())];
        let mut moved = batch.clone();
        let delta = rng.random_range(-1e3..1e3);
        if trial % 2 == 0 {
            moved[b].pred[i] += delta;
        } else {
            moved[b].target[i] += delta;
        }
        let (v, grad) = total_loss_grad(&moved, &cfg).unwrap();
        ensure(v.total.to_bits() == base.total.to_bits(), || {
            format!("trial {trial}: loss moved {} -> {}", base.total, v.total)
        })?;
        for (p, (ga, gb)) in grad.iter().zip(&base_grad).enumerate() {
            for k in 0..ga.len() {
                if batch[p].valid[k] {
                    ensure(ga[k].to_bits() == gb[k].to_bits(), || format!("trial {trial}: gradient moved"))?;
                }
            }
        }
    }
    Ok("100 perturbations of masked pixels left loss and valid gradients bit-identical".into())
}

// ---------------------------------------------------------------- 3

fn random_maps(rng: &mut ChaCha8Rng, t: usize, c: usize, h: usize, w: usize) -> Vec<FeatureMap> {
    (0..t)
        .map(|_| FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

fn small_model_config(feat: usize, factor: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            n_blocks: 2,
            layers_per_block: 2,
            growth: 8,
            feat_dim: feat,
            ..BackboneConfig::default()
        },
        attention: AttentionConfig {
            heads: 2,
            head_dim: feat / 2,
            feat_out: feat,
            tau: 365.0,
        },
        sr: SrConfig {
            factor,
            init_noise_scale: 1e-4,
        },
        head: HeadConfig {
            mlp_sizes: vec![feat, 2 * feat, feat],
        },
    }
}

fn criterion_attention() -> Outcome {
    let cfg = AttentionConfig::default();
    let dim = cfg.heads * cfg.head_dim;
    let mut layout = ParamLayout::default();
    let tf = TemporalFusion::new(&mut layout, &cfg, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = vec![0.0f32; layout.len];
    tf.init(&mut params, &mut rng);
    let (t, h, w) = (12usize, 5usize, 4usize);
    let feats = random_maps(&mut rng, t, dim, h, w);
    let doys: Vec<i32> = (0..t as i32).map(|i| 125 + 14 * i).collect();
    let enc: Vec<Vec<f32>> = doys.iter().map(|&d| positional_encoding(d - 1, dim, 365.0).unwrap().0).collect();
    let lidar = positional_encoding(-12, dim, 365.0).unwrap().0;
    let mut mask = vec![false; t];
    for i in [1, 6, 10] {
        mask[i] = true;
    }

    let (out, _) = tf.fuse(&params, &feats, &enc, &lidar, &mask).unwrap();
    let mut worst_sum = 0.0f64;
    for head in 0..cfg.heads {
        for px in 0..h * w {
            let mut s = 0.0f64;
            for ti in 0..t {
                let a = out.weights(head, ti)[px];
                ensure(!mask[ti] || a == 0.0, || format!("padded timestep {ti} has weight {a}"))?;
                s += f64::from(a);
            }
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
    }
    ensure(worst_sum <= 1e-6, || format!("weights sum off by {worst_sum:.2e}"))?;

    // padding invariance: valid entries only vs. valid + arbitrary padding
    let keep: Vec<usize> = (0..t).filter(|&i| !mask[i]).collect();
    let f_valid: Vec<FeatureMap> = keep.iter().map(|&i| feats[i].clone()).collect();
    let e_valid: Vec<Vec<f32>> = keep.iter().map(|&i| enc[i].clone()).collect();
    let (compact, _) = tf.fuse(&params, &f_valid, &e_valid, &lidar, &vec![false; keep.len()]).unwrap();
    let pad_diff = max_abs_diff(&compact.fused.data, &out.fused.data);
    ensure(pad_diff <= 1e-6, || format!("padding changed fused output by {pad_diff:.2e}"))?;

    // joint permutation
    let mut perm: Vec<usize> = (0..t).collect();
    for i in (1..t).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let f_p: Vec<FeatureMap> = perm.iter().map(|&i| feats[i].clone()).collect();
    let e_p: Vec<Vec<f32>> = perm.iter().map(|&i| enc[i].clone()).collect();
    let m_p: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
    let (permuted, _) = tf.fuse(&params, &f_p, &e_p, &lidar, &m_p).unwrap();
    let perm_diff = max_abs_diff(&permuted.fused.data, &out.fused.data);
    ensure(perm_diff <= 1e-6, || format!("permutation changed fused output by {perm_diff:.2e}"))?;

    // end to end: padded frames with garbage content through the whole model
    let model = CanopyModel::new(&small_model_config(8, 2)).unwrap();
    let p = model.init_params(&mut rng);
    let frames = random_maps(&mut rng, 5, model.cfg.backbone.in_channels, 6, 6);
    let s2 = vec![130u16, 160, 190, 220, 250];
    let base = ModelInput {
        frames: frames.clone(),
        s2_doys: s2.clone(),
        lidar_doy: 182,
        pad_mask: vec![false; 5],
    };
    let mut padded = base.clone();
    padded.frames.extend(random_maps(&mut rng, 3, model.cfg.backbone.in_channels, 6, 6));
    padded.s2_doys.extend([300, 17, 250]);
    padded.pad_mask.extend([true; 3]);
    let (a, _) = model.forward(&p, &base).unwrap();
    let (b, _) = model.forward(&p, &padded).unwrap();
    let e2e = max_abs_diff(&a.fusion.fused.data, &b.fusion.fused.data);
    ensure(e2e <= 1e-6, || format!("end-to-end padding changed fused output by {e2e:.2e}"))?;

    Ok(format!(
        "sum error {worst_sum:.1e}, padding {pad_diff:.1e}, permutation {perm_diff:.1e}, end-to-end padding {e2e:.1e}"
    ))
}

// ---------------------------------------------------------------- 4 and 5

/// Inverse shuffle written directly from the channel-grouping rule.
fn unshuffle_oracle(x: &FeatureMap, r: usize) -> FeatureMap {
    let (h, w) = (x.height / r, x.width / r);
    let mut out = FeatureMap::zeros(x.channels * r * r, h, w);
    for c in 0..x.channels {
        for i in 0..r {
            for j in 0..r {
                let g = c * r * r + i * r + j;
                for y in 0..h {
                    for xx in 0..w {
                        out.data[(g * h + y) * w + xx] = x.data[(c * x.height + y * r + i) * x.width + xx * r + j];
                    }
                }
            }
        }
    }
    out
}

fn criterion_pixel_shuffle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    for r in [2usize, 4] {
        for _ in 0..25 {
            let c = rng.random_range(1..4) * r * r;
            let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
            let x = random_maps(&mut rng, 1, c, h, w).pop().unwrap();
            let y = pixel_shuffle(&x, r).unwrap();
            ensure(unshuffle_oracle(&y, r) == x, || format!("oracle inverse failed for r={r} {c}x{h}x{w}"))?;
            ensure(pixel_unshuffle(&y, r).unwrap() == x, || format!("unshuffle(shuffle) failed for r={r}"))?;
            ensure(pixel_shuffle(&pixel_unshuffle(&y, r).unwrap(), r).unwrap() == y, || {
                format!("shuffle(unshuffle) failed for r={r}")
            })?;
            cases += 1;
        }
    }
    Ok(format!("{cases} random shapes round-trip exactly"))
}

fn block_spread(map: &FeatureMap, r: usize) -> f64 {
    let scale = map.data.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for c in 0..map.channels {
        let plane = map.plane(c);
        for by in 0..map.height / r {
            for bx in 0..map.width / r {
                let v0 = plane[by * r * map.width + bx * r];
                for i in 0..r {
                    for j in 0..r {
                        let v = plane[(by * r + i) * map.width + bx * r + j];
                        worst = worst.max(f64::from((v - v0).abs() / scale));
                    }
                }
            }
        }
    }
    worst
}

fn criterion_checkerboard() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feat = 16;
    let mut worst = 0.0f64;
    for r in [2usize, 4] {
        let mut layout = ParamLayout::default();
        let sr = SuperRes::new(&mut layout, feat, r);
        let head = HeightHead::new(&mut layout, &[feat, 2 * feat, feat]);
        for trial in 0..10 {
            let mut params = vec![0.0f32; layout.len];
            sr.init(&mut params, 0.0, &mut rng).unwrap();
            head.init(&mut params, &mut rng);
            let x = random_maps(&mut rng, 1, feat, 5 + trial % 3, 4 + trial % 2).pop().unwrap();
            let (up, _) = sr.forward(&params, &x).unwrap();
            let (heights, _) = head.forward(&params, &up);
            worst = worst.max(block_spread(&up, r)).max(block_spread(&heights, r));
        }
    }
    ensure(worst <= 1e-6, || format!("relative spread inside blocks {worst:.2e}"))?;
    Ok(format!("max relative spread within r x r blocks {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn criterion_overfit() -> Outcome {
    let data: Vec<Scene> = (0..8)
        .map(|i| {
            let (patch, reference) = generate_synthetic(&SynthConfig {
                size: 12,
                margin: 4,
                resolution: 2.5,
                crown_density: 6.0,
                radius_base: 14.0,
                radius_slope: 0.3,
                height_min: 8.0,
                height_max: 30.0,
                noise_std: 0.002,
                crop_parcels: 1,
                seed: 1000 + i,
                ..SynthConfig::default()
            })
            .unwrap();
            Scene { patch, reference }
        })
        .collect();
    let stats = ChannelStats::compute(&data.iter().map(|s| &s.patch).collect::<Vec<_>>()).unwrap();
    let trainer = Trainer::new(
        &small_model_config(16, 4),
        LossConfig::default(),
        TrainConfig {
            lr: 2e-3,
            cycle_len: 2000,
            batch_size: 8,
            accum_steps: 1,
            max_steps: 2000,
            ..TrainConfig::default()
        },
        SamplerConfig {
            window: 12,
            margin: 4,
            ..SamplerConfig::default()
        },
        stats,
    )
    .unwrap();
    let mut state = trainer.init_state();
    let start = Instant::now();
    for _ in 0..2000 {
        trainer.train_step(&mut state, &data).unwrap();
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mae = trainer.evaluate(&state.params, &data).unwrap().metrics.mae;
    let summary = format!("training MAE {mae:.3} m after 2000 steps in {elapsed:.0} s");
    ensure(mae < 0.5 && elapsed < 1200.0, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 7

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + b.abs())
}

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(1.5..40.0)).collect();
    let pred: Vec<f64> = target.iter().map(|t| t + rng.random_range(-6.0..6.0)).collect();
    let valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    let m = basic_metrics(&pred, &target, &valid).unwrap();
    let idx: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    let k = idx.len() as f64;
    let mae = idx.iter().map(|&i| (pred[i] - target[i]).abs()).sum::<f64>() / k;
    let rmse = (idx.iter().map(|&i| (pred[i] - target[i]).powi(2)).sum::<f64>() / k).sqrt();
    let bias = idx.iter().map(|&i| pred[i] - target[i]).sum::<f64>() / k;
    let rmae = idx.iter().map(|&i| (pred[i] - target[i]).abs() / target[i]).sum::<f64>() / k;
    let mean_t = idx.iter().map(|&i| target[i]).sum::<f64>() / k;
    let ss_tot: f64 = idx.iter().map(|&i| (target[i] - mean_t).powi(2)).sum();
    let ss_res: f64 = idx.iter().map(|&i| (pred[i] - target[i]).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    ensure(m.count as usize == idx.len(), || "count".into())?;
    for (name, got, want) in [("mae", m.mae, mae), ("rmse", m.rmse, rmse), ("bias", m.bias, bias), ("rmae", m.rmae, rmae), ("r2", m.r2.unwrap(), r2)] {
        ensure(close(got, want), || format!("{name}: {got} vs {want}"))?;
    }

    let bins = bin_errors(&pred, &target, &valid).unwrap();
    ensure(bins.len() == HEIGHT_BIN_EDGES.len(), || "bin count".into())?;
    for (b, bin) in bins.iter().enumerate() {
        let lo = HEIGHT_BIN_EDGES[b];
        let hi = HEIGHT_BIN_EDGES.get(b + 1).copied().unwrap_or(f64::INFINITY);
        let mut errs: Vec<f64> = idx
            .iter()
            .filter(|&&i| target[i] >= lo && target[i] < hi)
            .map(|&i| pred[i] - target[i])
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ensure(bin.count == errs.len(), || format!("bin {b} count"))?;
        ensure(close(bin.fraction, errs.len() as f64 / k), || format!("bin {b} fraction"))?;
        let st = bin.stats.unwrap();
        let (q1, med, q3) = (quantile(&errs, 0.25), quantile(&errs, 0.5), quantile(&errs, 0.75));
        let iqr = q3 - q1;
        let wlo = *errs.iter().find(|&&e| e >= q1 - 1.5 * iqr).unwrap();
        let whi = *errs.iter().rev().find(|&&e| e <= q3 + 1.5 * iqr).unwrap();
        for (name, got, want) in [("q1", st.q1, q1), ("median", st.median, med), ("q3", st.q3, q3), ("whisker_lo", st.whisker_lo, wlo), ("whisker_hi", st.whisker_hi, whi)] {
            ensure(close(got, want), || format!("bin {b} {name}: {got} vs {want}"))?;
        }
    }

    // p95 gridding against a per-pixel brute force
    for trial in 0..5 {
        let res = [1.0, 2.5, 5.0][trial % 3];
        let (nx, ny) = (6usize, 5usize);
        let ext = Extent {
            x_min: 100.0,
            y_min: 200.0,
            x_max: 100.0 + nx as f64 * res,
            y_max: 200.0 + ny as f64 * res,
        };
        let classes = [PointClass::Vegetation, PointClass::Vegetation, PointClass::Ground, PointClass::Building, PointClass::Other];
        let points: Vec<LidarPoint> = (0..1500)
            .map(|_| LidarPoint {
                x: rng.random_range(ext.x_min - res..ext.x_max + res),
                y: rng.random_range(ext.y_min - res..ext.y_max + res),
                z: rng.random_range(0.0..25.0) * rng.random_range(0.0..1.0f64),
                class: classes[rng.random_range(0..classes.len())],
            })
            .collect();
        let parcel = (ext.x_min + res * 0.3, ext.y_min + res * 1.2, ext.x_min + res * 3.7, ext.y_min + res * 3.9);
        let cloud = PointCloudSample {
            points: points.clone(),
            crop_parcels: vec![vec![(parcel.0, parcel.1), (parcel.2, parcel.1), (parcel.2, parcel.3), (parcel.0, parcel.3)]],
        };
        let r = rasterize_p95(&cloud, res, ext, 180, "EPSG:2154").unwrap();
        for row in 0..ny {
            for col in 0..nx {
                let (x0, y1) = (ext.x_min + col as f64 * res, ext.y_max - row as f64 * res);
                let mut zs: Vec<f64> = points
                    .iter()
                    .filter(|p| p.class == PointClass::Vegetation && p.x >= x0 && p.x < x0 + res && p.y <= y1 && p.y > y1 - res)
                    .map(|p| p.z)
                    .collect();
                zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let (cx, cy) = (x0 + res / 2.0, y1 - res / 2.0);
                let in_parcel = cx > parcel.0 && cx < parcel.2 && cy > parcel.1 && cy < parcel.3;
                let want = if zs.is_empty() { None } else { Some(quantile(&zs, 0.95)) }
                    .filter(|&h| h >= 1.5 && !(in_parcel && h < 5.0));
                let i = row * nx + col;
                let got = r.valid_mask[i].then_some(r.heights[i]);
                ensure(got == want, || format!("trial {trial} pixel ({row},{col}): {got:?} vs {want:?}"))?;
            }
        }
    }
    Ok("metrics and bins within 1e-9 on 1e4 samples; p95 grids exact on 5 point clouds".into())
}

// ---------------------------------------------------------------- 8

fn criterion_fap() -> Outcome {
    let mut checked = 0;
    for seed in 0..4 {
        let (_, reference) = generate_synthetic(&SynthConfig {
            size: 16,
            margin: 1,
            resolution: 2.5,
            candidate_dates: 14,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let n = reference.height;
        let img = &reference.heights;
        let low = box_downsample(img, n, n).unwrap();
        let up = bicubic_upsample(&low, n / 2, n / 2, 2).unwrap();
        let a = fap(img, n, n).unwrap();
        let b = fap(&up, n, n).unwrap();
        for k in 0..a.freq.len() {
            if a.freq[k] > 0.5 {
                ensure(b.values[k] <= a.values[k], || {
                    format!("seed {seed}: bin f={:.3} resampled {} > original {}", a.freq[k], b.values[k], a.values[k])
                })?;
                checked += 1;
            }
        }
        ensure(fap(img, n, n).unwrap() == a, || "identical inputs gave different profiles".into())?;
    }
    Ok(format!("{checked} high-frequency bins attenuated; repeat profiles identical"))
}

// ---------------------------------------------------------------- 9

fn criterion_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let l0 = lr_schedule(0, &cfg);
    let l1 = lr_schedule(cfg.cycle_len, &cfg);
    ensure(l0 == 1e-3 && l1 == 2.5e-4, || format!("lr(0) = {l0}, lr(cycle start 1) = {l1}"))?;
    Ok(format!("lr(0) = {l0}, lr(start of cycle 1) = {l1}"))
}

// ---------------------------------------------------------------- 10

fn criterion_tiling() -> Outcome {
    let (patch, _) = generate_synthetic(&SynthConfig {
        size: 24,
        margin: 4,
        resolution: 5.0,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = small_model_config(8, 2);
    let model = CanopyModel::new(&cfg).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(8));
    let predictor = ModelPredictor {
        model,
        params,
        stats: ChannelStats::compute(&[&patch]).unwrap(),
        sampler: SamplerConfig {
            window: 24,
            margin: 4,
            ..SamplerConfig::default()
        },
        tile: None,
    };
    let halo = predictor.halo();
    ensure(halo + 10 < patch.height, || format!("halo {halo} too large for a meaningful split"))?;
    let whole = predictor.predict_whole(&patch, 182).unwrap();
    let tiled = predictor.predict_tiled(&patch, 182, 10).unwrap();
    let diff = whole.data.iter().zip(&tiled.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(diff <= 1e-4, || format!("max abs difference {diff:.2e} m"))?;
    Ok(format!("max abs difference {diff:.1e} m on a {}x{} patch, tile 10, halo {halo}", patch.height, patch.width))
}

// ---------------------------------------------------------------- 11

fn lookup<'a>(v: &'a toml::Value, path: &str) -> Option<&'a toml::Value> {
    path.split('.').try_fold(v, |v, k| v.get(k))
}

fn criterion_hyperparameters() -> Outcome {
    let table: [(Resolution, [(&str, &str); 18]); 3] = [
        (Resolution::M10, row("10", "4", "1")),
        (Resolution::M5, row("5", "5", "2")),
        (Resolution::M2_5, row("2.5", "5", "4")),
    ];
    fn row(res: &'static str, blocks: &'static str, factor: &'static str) -> [(&'static str, &'static str); 18] {
        [
            ("resolution", res),
            ("model.backbone.n_blocks", blocks),
            ("model.backbone.layers_per_block", blocks),
            ("model.backbone.growth", "24"),
            ("model.backbone.feat_dim", "64"),
            ("model.backbone.in_channels", "17"),
            ("model.attention.heads", "4"),
            ("model.attention.head_dim", "16"),
            ("model.attention.feat_out", "64"),
            ("model.attention.tau", "365"),
            ("model.sr.factor", factor),
            ("model.head.mlp_sizes", "[64, 128, 64]"),
            ("sampler.t_max", "12"),
            ("sampler.t_min", "5"),
            ("sampler.window", "64"),
            ("train.lr", "0.001"),
            ("train.restart_decay", "0.25"),
            ("train.effective_batch", "128"),
        ]
    }
    let mut checked = 0;
    for (res, expected) in table {
        let cfg = RunConfig::for_resolution(res);
        cfg.validate().map_err(|e| e.to_string())?;
        let dump: toml::Value = toml::from_str(&cfg.to_toml_string()).map_err(|e| e.to_string())?;
        for (key, want) in expected {
            let got = if key == "train.effective_batch" {
                let b = lookup(&dump, "train.batch_size").and_then(toml::Value::as_integer);
                let a = lookup(&dump, "train.accum_steps").and_then(toml::Value::as_integer);
                b.zip(a).map(|(b, a)| (b * a).to_string())
            } else {
                lookup(&dump, key).map(|v| match v {
                    toml::Value::Float(f) => f.to_string(),
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
            };
            ensure(got.as_deref() == Some(want), || format!("{res:?} {key}: {got:?}, expected {want}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} frozen values match the config dumps of all three resolutions"))
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("loss gradients vs finite differences", criterion_gradients),
        ("masked pixels have no influence", criterion_masking),
        ("attention invariants", criterion_attention),
        ("pixel shuffle bijection", criterion_pixel_shuffle),
        ("checkerboard-free initialization", criterion_checkerboard),
        ("overfit 8 synthetic patches", criterion_overfit),
        ("metric and gridding oracles", criterion_oracles),
        ("FAP sanity", criterion_fap),
        ("learning-rate schedule", criterion_schedule),
        ("tiled vs whole-patch inference", criterion_tiling),
        ("hyperparameter audit", criterion_hyperparameters),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  {:>2}. {name}: {msg} [{secs:.1} s]", i + 1),
            Err(msg) => {
                println!("FAIL  {:>2}. {name}: {msg} [{secs:.1} s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
