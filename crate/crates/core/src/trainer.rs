//! Training loop with gradient accumulation, validation and early stopping.
//!
//! Every random choice (scene, window position, acquisitions) is drawn
//! from one ChaCha stream owned by [`TrainState`], so a run restored from a
//! checkpoint continues exactly where the original would have gone.

use alloc::{format, vec, vec::Vec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, ModelConfig, SamplerConfig, SamplingStrategy, TrainConfig};
use crate::datamodel::{ReferenceRaster, SitsPatch};
use crate::datapipe::{choose_window, extract_window, model_input, pad_series, sample_timesteps, ChannelStats, WindowMode};
use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_grad, LossPatch, LossValue};
use crate::metrics::{BasicMetrics, MetricAccumulator};
use crate::model::{crop_border, CanopyModel, ModelInput};
use crate::nn::{par_map, FeatureMap};
use crate::optim::{lr_schedule, Adam};

/// An image series and the reference raster it is trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub patch: SitsPatch,
    pub reference: ReferenceRaster,
}

/// A window ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub input: ModelInput,
    pub height: usize,
    pub width: usize,
    pub target: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos((u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo));
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f32>,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub best_val_mae: Option<f64>,
    pub stale_rounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub height_loss: f64,
    pub wgdl_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: LossValue,
    pub metrics: BasicMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome {
    pub steps: u64,
    pub stopped_early: bool,
    pub best_val_mae: Option<f64>,
}

/// Hooks called by [`Trainer::fit`].
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) {}
    /// Called after the best-so-far bookkeeping; `improved` is true when
    /// this round set a new best validation MAE.
    fn on_validation(&mut self, _trainer: &Trainer, _state: &TrainState, _summary: &EvalSummary, _improved: bool) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _trainer: &Trainer, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: CanopyModel,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub stats: ChannelStats,
}

impl Trainer {
    pub fn new(model: &ModelConfig, loss: LossConfig, train: TrainConfig, sampler: SamplerConfig, stats: ChannelStats) -> Result<Self> {
        loss.validate()?;
        train.validate()?;
        sampler.validate()?;
        stats.validate()?;
        Ok(Self {
            model: CanopyModel::new(model)?,
            loss,
            train,
            sampler,
            stats,
        })
    }

    /// Fresh parameters and optimizer state from `train.seed`.
    pub fn init_state(&self) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let params = self.model.init_params(&mut rng);
        TrainState {
            adam: Adam::new(params.len(), &self.train),
            params,
            step: 0,
            rng,
            best_val_mae: None,
            stale_rounds: 0,
        }
    }

    pub fn prepare<R: Rng>(&self, scene: &Scene, mode: WindowMode, strategy: SamplingStrategy, rng: &mut R) -> Result<Prepared> {
        let pos = choose_window(&scene.patch, &scene.reference, &self.sampler, mode, rng)?;
        let s = extract_window(&scene.patch, &scene.reference, pos, &self.sampler)?;
        let side = self.sampler.window * self.model.factor();
        if s.reference.height != side || s.reference.width != side {
            return Err(Error::Shape {
                context: "reference window vs model output (resolution mismatch?)",
                expected: side,
                found: s.reference.height,
            });
        }
        let idx = sample_timesteps(s.input.len(), &self.sampler, strategy, rng)?;
        let input = model_input(&s.input.select(&idx), &self.stats, s.reference.lidar_date)?;
        Ok(Prepared {
            input,
            height: side,
            width: side,
            target: s.reference.heights,
            valid: s.reference.valid_mask,
        })
    }

    /// `size` training windows drawn with replacement from `data`.
    pub fn sample_batch<R: Rng>(&self, data: &[Scene], size: usize, rng: &mut R) -> Result<Vec<Prepared>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        (0..size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                self.prepare(&data[i], WindowMode::Train, SamplingStrategy::Random, rng)
            })
            .collect()
    }

    fn border(&self) -> usize {
        self.sampler.margin * self.model.factor()
    }

    fn predict_batch(&self, params: &[f32], batch: &[Prepared]) -> Result<Vec<FeatureMap>> {
        let mut inputs: Vec<ModelInput> = batch.iter().map(|p| p.input.clone()).collect();
        pad_series(&mut inputs);
        let border = self.border();
        par_map(&inputs, |x| {
            let (out, _) = self.model.forward(params, x)?;
            crop_border(&out.heights, border)
        })
        .into_iter()
        .collect()
    }

    fn loss_patches(batch: &[Prepared], preds: &[FeatureMap]) -> Result<Vec<LossPatch>> {
        batch
            .iter()
            .zip(preds)
            .map(|(b, p)| {
                LossPatch::new(
                    b.height,
                    b.width,
                    p.data.iter().map(|&v| f64::from(v)).collect(),
                    b.target.clone(),
                    b.valid.clone(),
                )
            })
            .collect()
    }

    /// Loss of one micro-batch and its gradient with respect to every
    /// parameter.
    pub fn batch_gradient(&self, params: &[f32], batch: &[Prepared]) -> Result<(LossValue, Vec<f32>)> {
        let mut inputs: Vec<ModelInput> = batch.iter().map(|p| p.input.clone()).collect();
        pad_series(&mut inputs);
        let border = self.border();
        let passes: Vec<_> = par_map(&inputs, |x| self.model.forward(params, x))
            .into_iter()
            .collect::<Result<_>>()?;
        let preds: Vec<FeatureMap> = passes
            .iter()
            .map(|(out, _)| crop_border(&out.heights, border))
            .collect::<Result<_>>()?;
        let patches = Self::loss_patches(batch, &preds)?;
        let (value, dpatch) = total_loss_grad(&patches, &self.loss)?;
        if !value.total.is_finite() {
            return Ok((value, vec![0.0; params.len()]));
        }
        let jobs: Vec<usize> = (0..batch.len()).collect();
        let partial = par_map(&jobs, |&i| {
            let (out, tape) = &passes[i];
            let core = FeatureMap::from_vec(1, batch[i].height, batch[i].width, dpatch[i].iter().map(|&g| g as f32).collect())
                .expect("gradient has the core shape");
            let full = core.embed(out.heights.height, out.heights.width, border, border);
            let mut g = vec![0.0f32; params.len()];
            self.model.backward(params, &mut g, out, tape, &full);
            g
        });
        let mut grads = vec![0.0f32; params.len()];
        for g in partial {
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((value, grads))
    }

    /// Averaged gradient of `accum_steps` micro-batches drawn from `rng`.
    pub fn accumulated_gradient(&self, state: &mut TrainState, data: &[Scene]) -> Result<(LossValue, Vec<f32>)> {
        let accum = self.train.accum_steps;
        let mut grads = vec![0.0f32; state.params.len()];
        let mut sum = LossValue {
            total: 0.0,
            height: 0.0,
            wgdl: 0.0,
        };
        for _ in 0..accum {
            let batch = self.sample_batch(data, self.train.batch_size, &mut state.rng)?;
            let (v, g) = self.batch_gradient(&state.params, &batch)?;
            if !v.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    detail: format!(
                        "height {} wgdl {} lr {}; parameter norm {}",
                        v.height,
                        v.wgdl,
                        lr_schedule(state.step, &self.train),
                        libm::sqrt(state.params.iter().map(|&p| f64::from(p) * f64::from(p)).sum::<f64>())
                    ),
                });
            }
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
            sum.total += v.total;
            sum.height += v.height;
            sum.wgdl += v.wgdl;
        }
        let inv = 1.0 / accum as f32;
        for g in &mut grads {
            *g *= inv;
        }
        let n = accum as f64;
        Ok((
            LossValue {
                total: sum.total / n,
                height: sum.height / n,
                wgdl: sum.wgdl / n,
            },
            grads,
        ))
    }

    /// One optimizer update.
    pub fn train_step(&self, state: &mut TrainState, data: &[Scene]) -> Result<StepLog> {
        let (value, grads) = self.accumulated_gradient(state, data)?;
        let lr = lr_schedule(state.step, &self.train);
        state.adam.step(&mut state.params, &grads, lr);
        state.step += 1;
        Ok(StepLog {
            step: state.step,
            lr,
            loss: value.total,
            height_loss: value.height,
            wgdl_loss: value.wgdl,
        })
    }

    /// Deterministic evaluation: centered windows, equal-range acquisitions.
    pub fn evaluate(&self, params: &[f32], data: &[Scene]) -> Result<EvalSummary> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut acc = MetricAccumulator::default();
        let mut patches = Vec::with_capacity(data.len());
        for chunk in data.chunks(self.train.batch_size.max(1)) {
            let batch: Vec<Prepared> = chunk
                .iter()
                .map(|s| self.prepare(s, WindowMode::Validation, SamplingStrategy::EqualRange, &mut rng))
                .collect::<Result<_>>()?;
            let preds = self.predict_batch(params, &batch)?;
            for p in Self::loss_patches(&batch, &preds)? {
                acc.extend(&p.pred, &p.target, &p.valid)?;
                patches.push(p);
            }
        }
        Ok(EvalSummary {
            loss: total_loss(&patches, &self.loss)?,
            metrics: acc.finish()?,
        })
    }

    pub fn fit(&self, state: &mut TrainState, train: &[Scene], val: &[Scene], observer: &mut dyn TrainObserver) -> Result<FitOutcome> {
        let mut stopped_early = false;
        while state.step < self.train.max_steps {
            let log = self.train_step(state, train)?;
            observer.on_step(&log);
            let every = |n: u64| n > 0 && state.step % n == 0;
            if every(self.train.validate_every) && !val.is_empty() {
                let summary = self.evaluate(&state.params, val)?;
                let mae = summary.metrics.mae;
                let improved = state.best_val_mae.is_none_or(|b| mae < b);
                if improved {
                    state.best_val_mae = Some(mae);
                    state.stale_rounds = 0;
                } else {
                    state.stale_rounds += 1;
                }
                observer.on_validation(self, state, &summary, improved)?;
            }
            if every(self.train.checkpoint_every) {
                observer.on_checkpoint(self, state)?;
            }
            if self.train.patience > 0 && state.stale_rounds >= self.train.patience {
                stopped_early = true;
                break;
            }
        }
        Ok(FitOutcome {
            steps: state.step,
            stopped_early,
            best_val_mae: state.best_val_mae,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AttentionConfig, BackboneConfig, HeadConfig, SrConfig};
    use crate::datapipe::{generate_synthetic, SynthConfig};

    fn tiny_model(factor: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                n_blocks: 1,
                layers_per_block: 2,
                growth: 4,
                feat_dim: 8,
                ..BackboneConfig::default()
            },
            attention: AttentionConfig {
                heads: 2,
                head_dim: 4,
                feat_out: 8,
                tau: 365.0,
            },
            sr: SrConfig {
                factor,
                init_noise_scale: 1e-4,
            },
            head: HeadConfig { mlp_sizes: vec![8, 8] },
        }
    }

    fn scenes(n: usize, resolution: f64) -> Vec<Scene> {
        (0..n)
            .map(|i| {
                let (patch, reference) = generate_synthetic(&SynthConfig {
                    size: 10,
                    margin: 3,
                    resolution,
                    seed: 100 + i as u64,
                    ..SynthConfig::default()
                })
                .unwrap();
                Scene { patch, reference }
            })
            .collect()
    }

    fn trainer(factor: usize, data: &[Scene], batch: usize, accum: usize) -> Trainer {
        let stats = ChannelStats::compute(&data.iter().map(|s| &s.patch).collect::<Vec<_>>()).unwrap();
        Trainer::new(
            &tiny_model(factor),
            LossConfig::default(),
            TrainConfig {
                batch_size: batch,
                accum_steps: accum,
                max_steps: 3,
                cycle_len: 10,
                ..TrainConfig::default()
            },
            SamplerConfig {
                window: 8,
                margin: 2,
                t_max: 6,
                ..SamplerConfig::default()
            },
            stats,
        )
        .unwrap()
    }

    #[test]
    fn runs_are_deterministic() {
        let data = scenes(3, 5.0);
        let t = trainer(2, &data, 2, 2);
        let run = || {
            let mut s = t.init_state();
            (0..3).map(|_| t.train_step(&mut s, &data).unwrap().loss).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn accumulation_matches_one_large_batch() {
        let data = scenes(4, 10.0);
        let t4 = trainer(1, &data, 2, 4);
        let t1 = trainer(1, &data, 8, 1);
        let mut s4 = t4.init_state();
        let mut s1 = t1.init_state();
        assert_eq!(s4.params, s1.params);
        let (_, g4) = t4.accumulated_gradient(&mut s4.clone(), &data).unwrap();
        let (_, g1) = t1.accumulated_gradient(&mut s1.clone(), &data).unwrap();
        let scale = g1.iter().fold(0.0f32, |m, g| m.max(g.abs()));
        for (a, b) in g4.iter().zip(&g1) {
            assert!((a - b).abs() <= 1e-5 * scale.max(1.0), "{a} vs {b}");
        }
        t4.train_step(&mut s4, &data).unwrap();
        t1.train_step(&mut s1, &data).unwrap();
        for (a, b) in s4.params.iter().zip(&s1.params) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_model_loss_is_mean_target() {
        let data = scenes(2, 10.0);
        let mut t = trainer(1, &data, 2, 1);
        t.loss.wgdl_weight = 0.0;
        let zero = vec![0.0f32; t.model.num_params()];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = t.sample_batch(&data, 2, &mut rng).unwrap();
        let (v, _) = t.batch_gradient(&zero, &batch).unwrap();
        let per_patch: Vec<f64> = batch
            .iter()
            .filter(|b| b.valid.iter().any(|&v| v))
            .map(|b| {
                let (s, n) = b.target.iter().zip(&b.valid).filter(|(_, &v)| v).fold((0.0, 0), |(s, n), (t, _)| (s + t, n + 1));
                s / n as f64
            })
            .collect();
        let expected = per_patch.iter().sum::<f64>() / per_patch.len() as f64;
        assert!((v.total - expected).abs() < 1e-12);
    }

    #[test]
    fn resume_from_captured_state_is_exact() {
        let data = scenes(2, 5.0);
        let t = trainer(2, &data, 2, 1);
        let mut a = t.init_state();
        for _ in 0..2 {
            t.train_step(&mut a, &data).unwrap();
        }
        let snapshot = (a.params.clone(), a.adam.clone(), a.step, RngState::capture(&a.rng));
        let mut b = TrainState {
            params: snapshot.0,
            adam: snapshot.1,
            step: snapshot.2,
            rng: snapshot.3.restore(),
            best_val_mae: None,
            stale_rounds: 0,
        };
        let la: Vec<f64> = (0..2).map(|_| t.train_step(&mut a, &data).unwrap().loss).collect();
        let lb: Vec<f64> = (0..2).map(|_| t.train_step(&mut b, &data).unwrap().loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn evaluation_is_deterministic_and_fit_stops() {
        let data = scenes(2, 10.0);
        let mut t = trainer(1, &data, 2, 1);
        let s = t.init_state();
        assert_eq!(t.evaluate(&s.params, &data).unwrap(), t.evaluate(&s.params, &data).unwrap());
        t.train.validate_every = 1;
        t.train.max_steps = 4;
        let mut s = t.init_state();
        let out = t.fit(&mut s, &data, &data, &mut ()).unwrap();
        assert_eq!(out.steps, 4);
        assert!(out.best_val_mae.is_some());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = scenes(1, 10.0);
        let t = trainer(1, &data, 1, 1);
        let mut s = t.init_state();
        s.params.iter_mut().for_each(|p| *p = f32::NAN);
        assert!(matches!(t.train_step(&mut s, &data), Err(Error::NonFiniteLoss { step: 0, .. })));
    }
}
