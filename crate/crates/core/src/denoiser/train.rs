//! Training loop: per-example noise-matrix sampling, forward noising, noise
//! prediction, masked MSE, and AdamW with linear warmup then cosine decay.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise_with_rng, masked_mse_loss, NoiseMatrix};
use crate::record::ScenarioRecord;
use crate::scene::{fit_stats_scenes, normalize, ChannelStats, MapSet, SceneTensor, CHANNELS};
use crate::{Error, Result};

use super::checkpoint::{checkpoint_bytes, checkpoint_from_bytes, Checkpoint};
use super::model::{DenoiserModel, ModelConfig};
use super::params::{AdamW, GradBuffer};

/// How noise matrices are drawn during training. Probabilities are
/// normalized; the three patterns mirror the masks seen at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePolicy {
    /// Fully independent per-token levels, uniform in [1/M, 1].
    pub independent: f64,
    /// History and current frames clean (level 0), the rest independent.
    pub history_clean: f64,
    /// History clean plus random per-agent goal tokens at level 0.
    pub history_goals_clean: f64,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        NoisePolicy {
            independent: 0.5,
            history_clean: 0.25,
            history_goals_clean: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub policy: NoisePolicy,
    /// Fraction of the corpus held out for validation loss.
    pub val_fraction: f64,
    /// Validation loss cadence in steps (0 disables).
    pub eval_every: usize,
    /// Global gradient-norm clip (0 disables).
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 8,
            weight_decay: 0.01,
            seed: 0,
            policy: NoisePolicy::default(),
            val_fraction: 0.05,
            eval_every: 200,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val fraction must be in [0, 1)"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let total = self.total_steps.max(self.warmup_steps + 1);
        let progress = (step - self.warmup_steps) as f64
            / (total - self.warmup_steps).max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutput {
    /// Model reloaded from its own checkpoint bytes, so the returned weights
    /// are exactly what the persisted artifact holds.
    pub checkpoint: Checkpoint,
    pub bytes: Vec<u8>,
    pub events: Vec<TrainEvent>,
    pub stats: ChannelStats,
}

struct Example {
    scene_norm: SceneTensor,
    map: MapSet,
    conditioned_frames: usize,
}

fn prepare(records: &[ScenarioRecord]) -> Result<(Vec<Example>, ChannelStats)> {
    let mut scenes = Vec::with_capacity(records.len());
    for r in records {
        scenes.push((r.to_scene()?, r.to_map()?, r.meta.conditioned_frames()));
    }
    let stats = fit_stats_scenes(scenes.iter().map(|(s, _, _)| s))?;
    let examples = scenes
        .into_iter()
        .map(|(scene, map, cond)| {
            Ok(Example {
                scene_norm: normalize(&scene, &stats)?,
                map,
                conditioned_frames: cond,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((examples, stats))
}

fn sample_noise_matrix(
    example: &Example,
    policy: &NoisePolicy,
    grid: usize,
    rng: &mut impl Rng,
) -> NoiseMatrix {
    let (a, t) = example.scene_norm.valid.dim();
    let eps0 = 1.0 / grid as f64;
    let total = policy.independent + policy.history_clean + policy.history_goals_clean;
    let draw: f64 = rng.random::<f64>() * total;
    let mode = if draw < policy.independent {
        0
    } else if draw < policy.independent + policy.history_clean {
        1
    } else {
        2
    };
    let mut levels = Array2::zeros((a, t));
    for ai in 0..a {
        for ti in 0..t {
            levels[[ai, ti]] = eps0 + rng.random::<f64>() * (1.0 - eps0);
        }
    }
    if mode >= 1 {
        for ai in 0..a {
            for ti in 0..example.conditioned_frames.min(t) {
                levels[[ai, ti]] = 0.0;
            }
        }
    }
    if mode == 2 {
        for ai in 0..a {
            if rng.random::<f64>() < 0.5 && example.conditioned_frames < t {
                let span = t - example.conditioned_frames;
                let goal = example.conditioned_frames + rng.random_range(0..span);
                levels[[ai, goal]] = 0.0;
            }
        }
    }
    NoiseMatrix::new(levels).expect("constructed levels are in range")
}

/// Loss and gradient for one example. `scale` multiplies the gradient
/// (1 / batch size).
fn example_pass(
    model: &DenoiserModel,
    example: &Example,
    k: &NoiseMatrix,
    noise_seed: u64,
    scale: f64,
    grads: Option<&mut GradBuffer>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let (noisy, eps_true) = add_noise_with_rng(&example.scene_norm, k, &mut rng)?;
    let weight = k.levels().mapv(|v| v > 0.0);
    let (eps_pred, cache) = model.forward_cached(&noisy, k, &example.map)?;
    let loss = masked_mse_loss(&eps_pred, &eps_true, &example.scene_norm.valid, &weight)?;
    if let Some(g) = grads {
        let (a, t) = example.scene_norm.valid.dim();
        let mut count = 0usize;
        for ai in 0..a {
            for ti in 0..t {
                if example.scene_norm.valid[[ai, ti]] && weight[[ai, ti]] {
                    count += 1;
                }
            }
        }
        if count > 0 {
            let mut d_eps = ndarray::Array3::zeros((a, t, CHANNELS));
            let norm = scale * 2.0 / (CHANNELS as f64 * count as f64);
            for ai in 0..a {
                for ti in 0..t {
                    if !(example.scene_norm.valid[[ai, ti]] && weight[[ai, ti]]) {
                        continue;
                    }
                    for c in 0..CHANNELS {
                        d_eps[[ai, ti, c]] =
                            norm * (eps_pred[[ai, ti, c]] - eps_true[[ai, ti, c]]);
                    }
                }
            }
            model.backward(&cache, &d_eps, g);
        }
    }
    Ok(loss.value)
}

fn validation_loss(model: &DenoiserModel, examples: &[Example], cfg: &TrainConfig) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            // Fixed seeds so the validation loss is comparable across steps.
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7a11).wrapping_add(i as u64));
            let k = sample_noise_matrix(ex, &cfg.policy, model.cfg.grid, &mut rng);
            example_pass(model, ex, &k, cfg.seed.wrapping_add(0xcc00 + i as u64), 1.0, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains a fresh model on the corpus and returns the persisted checkpoint.
pub fn train(
    records: &[ScenarioRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> Result<TrainOutput> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let (examples, stats) = prepare(records)?;

    let val_count = ((examples.len() as f64) * train_cfg.val_fraction).floor() as usize;
    let (val_set, train_set) = examples.split_at(val_count);
    let train_set: Vec<&Example> = train_set.iter().collect();
    if train_set.is_empty() {
        return Err(Error::invalid("no training examples after validation split"));
    }

    let mut model = DenoiserModel::new(model_cfg, stats.clone(), train_cfg.seed)?;
    let mut opt = AdamW::new(&model.params, train_cfg.lr, train_cfg.weight_decay);
    let mut events = Vec::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(1));
    let mut divergent_run = 0usize;

    for step in 0..train_cfg.total_steps {
        // Deterministic batch assembly.
        let batch: Vec<usize> = (0..train_cfg.batch_size)
            .map(|_| order_rng.random_range(0..train_set.len()))
            .collect();
        let scale = 1.0 / batch.len() as f64;

        // Per-item passes run in parallel; gradients merge in batch order so
        // the result is independent of scheduling.
        let chunk = batch.len().div_ceil(rayon::current_num_threads().max(1));
        let parts: Vec<Result<(f64, GradBuffer)>> = batch
            .par_chunks(chunk.max(1))
            .enumerate()
            .map(|(ci, idxs)| {
                let mut g = GradBuffer::zeros_like(&model.params);
                let mut loss_sum = 0.0;
                for (j, &idx) in idxs.iter().enumerate() {
                    let item_ord = ci * chunk.max(1) + j;
                    let mut krng = ChaCha8Rng::seed_from_u64(
                        train_cfg
                            .seed
                            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                            .wrapping_add((step as u64) << 20)
                            .wrapping_add(item_ord as u64),
                    );
                    let k = sample_noise_matrix(
                        train_set[idx],
                        &train_cfg.policy,
                        model.cfg.grid,
                        &mut krng,
                    );
                    let noise_seed = train_cfg
                        .seed
                        .wrapping_add(0xabcd_0000)
                        .wrapping_add((step as u64) << 20)
                        .wrapping_add(item_ord as u64);
                    loss_sum +=
                        example_pass(&model, train_set[idx], &k, noise_seed, scale, Some(&mut g))?;
                }
                Ok((loss_sum, g))
            })
            .collect();

        let mut grads = GradBuffer::zeros_like(&model.params);
        let mut loss_sum = 0.0;
        for part in parts {
            let (l, g) = part?;
            loss_sum += l;
            grads.accumulate(&g);
        }
        let train_loss = loss_sum / batch.len() as f64;

        if train_cfg.clip_norm > 0.0 {
            let norm = grads.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > train_cfg.clip_norm {
                grads.scale(train_cfg.clip_norm / norm);
            }
        }

        if !train_loss.is_finite() || train_loss > 1e3 {
            divergent_run += 1;
            if divergent_run >= 100 {
                return Err(Error::Diverged {
                    step,
                    loss: train_loss,
                });
            }
        } else {
            divergent_run = 0;
        }

        let lr = train_cfg.lr_at(step);
        opt.step(&mut model.params, &grads, lr)?;

        let record_event = train_cfg.eval_every > 0
            && (step % train_cfg.eval_every == 0 || step + 1 == train_cfg.total_steps);
        if record_event {
            let val_loss = if val_set.is_empty() {
                None
            } else {
                Some(validation_loss(&model, val_set, &train_cfg)?)
            };
            events.push(TrainEvent {
                step,
                lr,
                train_loss,
                val_loss,
            });
        }
    }

    // Persist and reload so the returned model is exactly the artifact.
    let bytes = checkpoint_bytes(&model, Some(&train_cfg));
    let checkpoint = checkpoint_from_bytes(&bytes)?;
    Ok(TrainOutput {
        checkpoint,
        bytes,
        events,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_records(n: usize) -> Vec<ScenarioRecord> {
        use crate::record::{AgentRecord, AgentState, LaneRecord, ScenarioMeta};
        use crate::scene::LaneKind;
        (0..n)
            .map(|i| {
                let meta = ScenarioMeta {
                    dt_s: 0.5,
                    history_frames: 2,
                    current_frames: 1,
                    future_frames: 6,
                    range_m: 104.0,
                };
                let total = meta.total_frames();
                let speed = 4.0 + i as f64;
                ScenarioRecord {
                    meta,
                    agents: vec![AgentRecord {
                        id: format!("a{i}"),
                        kind: "vehicle".into(),
                        length_m: 4.5,
                        width_m: 2.0,
                        states: (0..total)
                            .map(|t| {
                                Some(AgentState {
                                    x: t as f64 * speed * 0.5,
                                    y: i as f64,
                                    heading_rad: 0.0,
                                    vx: speed,
                                    vy: 0.0,
                                })
                            })
                            .collect(),
                    }],
                    lanes: vec![LaneRecord {
                        kind: LaneKind::Driving,
                        points: (0..12).map(|p| [p as f64 * 5.0, i as f64]).collect(),
                    }],
                }
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let records = tiny_records(4);
        let cfg = TrainConfig {
            total_steps: 0,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let out = train(&records, ModelConfig::miniature(), cfg.clone()).unwrap();
        // A fresh model with the same seed and stats equals the checkpoint
        // after the mandatory f32 round trip.
        let fresh = DenoiserModel::new(ModelConfig::miniature(), out.stats.clone(), cfg.seed).unwrap();
        let fresh_bytes = checkpoint_bytes(&fresh, None);
        let fresh_reloaded = checkpoint_from_bytes(&fresh_bytes).unwrap().model;
        assert_eq!(out.checkpoint.model.params.data(), fresh_reloaded.params.data());
    }

    #[test]
    fn initial_loss_is_about_one_per_channel() {
        // Zero-initialized output projection predicts 0 against unit normal
        // noise, so the masked loss starts near 1.
        let records = tiny_records(8);
        let (examples, _) = prepare(&records).unwrap();
        let model = DenoiserModel::new(ModelConfig::miniature(), ChannelStats::identity(), 5).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for (i, ex) in examples.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let k = sample_noise_matrix(ex, &NoisePolicy::default(), 32, &mut rng);
            total += example_pass(&model, ex, &k, i as u64, 1.0, None).unwrap();
            n += 1;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.15, "initial loss {mean}");
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(60) < 1.0);
        assert!(cfg.lr_at(109) < cfg.lr_at(60));
    }
}
