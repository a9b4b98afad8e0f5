//! The pluggable noise predictor: a learned spatio-temporal attention model
//! plus an exact oracle used by the sampling harness and tests.

mod checkpoint;
mod model;
mod net;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{DenoiserModel, ModelConfig, INPUT_FEATURES, MAP_POINT_FEATURES};
pub use params::{AdamW, GradBuffer, Init, ParamBuilder, ParamStore};
pub use train::{train, NoisePolicy, TrainConfig, TrainEvent, TrainOutput};

use ndarray::Array3;

use crate::diffusion::{NoiseMatrix, NoiseSchedule};
use crate::scene::{MapSet, SceneTensor, CHANNELS};
use crate::{Error, Result};

/// Extra inputs to a prediction besides the noisy scene and its levels.
pub struct PredictContext<'a> {
    pub map: &'a MapSet,
    /// Absolute index of the window's first frame. The learned model is
    /// translation-invariant and ignores it; the oracle uses it to address
    /// ground truth when predicting on a sliding window.
    pub frame_offset: usize,
}

impl<'a> PredictContext<'a> {
    pub fn new(map: &'a MapSet) -> Self {
        PredictContext {
            map,
            frame_offset: 0,
        }
    }
}

/// A noise predictor. Output at invalid tokens is unspecified and ignored
/// by all consumers.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        noisy: &SceneTensor,
        levels: &NoiseMatrix,
        ctx: &PredictContext<'_>,
    ) -> Result<Array3<f64>>;
}

impl Denoiser for DenoiserModel {
    fn predict(
        &self,
        noisy: &SceneTensor,
        levels: &NoiseMatrix,
        ctx: &PredictContext<'_>,
    ) -> Result<Array3<f64>> {
        let (eps, _) = self.forward_cached(noisy, levels, ctx.map)?;
        Ok(eps)
    }
}

/// Exact noise predictor computed algebraically from ground truth:
/// `eps = (x_t - alpha(k) x0) / sigma(k)`. With it, any monotone schedule
/// reproduces the ground truth exactly, which is the master property the
/// sampling harness is tested against.
pub struct OracleDenoiser {
    /// Normalized ground-truth states, absolute frame indexing.
    pub scene0: Array3<f64>,
    /// True noise recorded by `add_noise`, if available; consulted where
    /// sigma(k) is singular (k ~ 0).
    pub eps_true: Option<Array3<f64>>,
    pub schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(scene0_normalized: &SceneTensor) -> Self {
        OracleDenoiser {
            scene0: scene0_normalized.states.clone(),
            eps_true: None,
            schedule: NoiseSchedule::standard(),
        }
    }

    pub fn with_true_eps(mut self, eps: Array3<f64>) -> Self {
        self.eps_true = Some(eps);
        self
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(
        &self,
        noisy: &SceneTensor,
        levels: &NoiseMatrix,
        ctx: &PredictContext<'_>,
    ) -> Result<Array3<f64>> {
        let (a, t) = noisy.valid.dim();
        let gt_frames = self.scene0.dim().1;
        if ctx.frame_offset + t > gt_frames {
            return Err(Error::invalid(format!(
                "oracle ground truth covers {gt_frames} frames; window [{}, {}) requested",
                ctx.frame_offset,
                ctx.frame_offset + t
            )));
        }
        if self.scene0.dim().0 != a {
            return Err(Error::invalid("oracle ground truth agent count mismatch"));
        }
        let mut eps = Array3::zeros((a, t, CHANNELS));
        for ai in 0..a {
            for ti in 0..t {
                if !noisy.valid[[ai, ti]] {
                    continue;
                }
                let gt_t = ctx.frame_offset + ti;
                let k = levels.get(ai, ti);
                let sigma = self.schedule.sigma(k);
                let alpha = self.schedule.alpha(k);
                if sigma > 1e-6 {
                    for c in 0..CHANNELS {
                        eps[[ai, ti, c]] = (noisy.states[[ai, ti, c]]
                            - alpha * self.scene0[[ai, gt_t, c]])
                            / sigma;
                    }
                } else if let Some(true_eps) = &self.eps_true {
                    for c in 0..CHANNELS {
                        eps[[ai, ti, c]] = true_eps[[ai, gt_t, c]];
                    }
                }
            }
        }
        Ok(eps)
    }
}

#[cfg(test)]
mod oracle_tests {
    use super::*;
    use crate::diffusion::{add_noise, reverse_step};
    use crate::scene::SceneTensor;

    fn scene(a: usize, t: usize) -> SceneTensor {
        let mut s = SceneTensor::zeros(a, t);
        s.valid.fill(true);
        let mut v = -0.8;
        for x in s.states.iter_mut() {
            *x = v;
            v = (v * 1.31 + 0.57) % 1.5;
        }
        s
    }

    #[test]
    fn oracle_recovers_known_noise() {
        let s0 = scene(2, 4);
        let k = NoiseMatrix::filled(2, 4, 0.7).unwrap();
        let (noisy, eps) = add_noise(&s0, &k, 5).unwrap();
        let oracle = OracleDenoiser::new(&s0);
        let empty = MapSet::empty();
        let ctx = PredictContext::new(&empty);
        let pred = oracle.predict(&noisy, &k, &ctx).unwrap();
        for (p, e) in pred.iter().zip(eps.iter()) {
            assert!((p - e).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_at_unit_level_returns_state() {
        let s0 = scene(1, 2);
        let k = NoiseMatrix::filled(1, 2, 1.0).unwrap();
        let (noisy, _) = add_noise(&s0, &k, 9).unwrap();
        let oracle = OracleDenoiser::new(&s0);
        let empty = MapSet::empty();
        let ctx = PredictContext::new(&empty);
        let pred = oracle.predict(&noisy, &k, &ctx).unwrap();
        // alpha(1) = 0, sigma(1) = 1, so eps_hat = x_t exactly.
        for (p, x) in pred.iter().zip(noisy.states.iter()) {
            assert_eq!(p, x);
        }
    }

    #[test]
    fn oracle_with_reverse_steps_recovers_ground_truth() {
        // Monotone descent through several levels ends at x0.
        let s0 = scene(3, 5);
        let schedule = NoiseSchedule::standard();
        let ones = NoiseMatrix::filled(3, 5, 1.0).unwrap();
        let (mut current, _) = add_noise(&s0, &ones, 17).unwrap();
        let oracle = OracleDenoiser::new(&s0);
        let empty = MapSet::empty();
        let ctx = PredictContext::new(&empty);
        let levels = [1.0, 0.75, 0.5, 0.25, 0.125, 0.0];
        let mut carry = Array3::zeros((3, 5, CHANNELS));
        for w in levels.windows(2) {
            let k_now = NoiseMatrix::filled(3, 5, w[0]).unwrap();
            let k_next = NoiseMatrix::filled(3, 5, w[1]).unwrap();
            let eps_hat = oracle.predict(&current, &k_now, &ctx).unwrap();
            let out = reverse_step(&current, &k_now, &k_next, &eps_hat, &carry, &schedule, None)
                .unwrap();
            current = out.scene;
            carry = out.x0_estimate;
        }
        for (got, want) in current.states.iter().zip(s0.states.iter()) {
            assert!((got - want).abs() < 1e-7);
        }
    }
}
