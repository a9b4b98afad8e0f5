//! The chunk lifecycle runner: per step, apply arriving overrides, denoise,
//! advance every token to its next scheduled level, and pop tokens whose
//! noise reaches zero.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::denoiser::{Denoiser, PredictContext};
use crate::diffusion::{reverse_step, NoiseMatrix, NoiseSchedule};
use crate::guidance::{apply_guidance, GuidanceConfig};
use crate::scene::{denormalize, normalize, ChannelStats, MapSet, SceneTensor, CHANNELS};
use crate::{Error, Result};

use super::{ScheduleMatrix, Strategy};

/// External replacement of a token's state mid-run. The state is given in
/// normalized units; its noise level is clamped to zero on application.
#[derive(Clone, Copy, Debug)]
pub struct Override {
    pub agent: usize,
    pub frame: usize,
    pub state: [f64; CHANNELS],
    /// 1-based sampling step at which the override arrives.
    pub arrival_step: usize,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StepTrace {
    pub m: usize,
    pub in_flight: usize,
    pub pops: Vec<(usize, usize)>,
    pub overrides_applied: usize,
    pub overrides_rejected: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub steps: Vec<StepTrace>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("trace serialization cannot fail"));
            out.push('\n');
        }
        out
    }

    pub fn total_pops(&self) -> usize {
        self.steps.iter().map(|s| s.pops.len()).sum()
    }

    /// First step index at or after `m` that records a pop.
    pub fn first_pop_at_or_after(&self, m: usize) -> Option<usize> {
        self.steps
            .iter()
            .filter(|s| s.m >= m && !s.pops.is_empty())
            .map(|s| s.m)
            .next()
    }

    /// The step at which a particular token popped.
    pub fn pop_step_of(&self, agent: usize, frame: usize) -> Option<usize> {
        self.steps
            .iter()
            .find(|s| s.pops.iter().any(|&(a, f)| a == agent && f == frame))
            .map(|s| s.m)
    }
}

/// Guidance context for a run: the corrective operators act in metric
/// space, so the runner needs the normalization statistics.
#[derive(Clone, Copy)]
pub struct GuidanceRun<'a> {
    pub config: &'a GuidanceConfig,
    pub stats: &'a ChannelStats,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub guidance: Option<GuidanceRun<'a>>,
}

pub struct RunOutcome {
    /// Final scene in normalized units.
    pub scene: SceneTensor,
    pub trace: Trace,
}

/// Prepares the initial state for a run: conditioned tokens keep their
/// (normalized) values from `conditioned_scene`, generated tokens start as
/// standard-normal noise, invalid tokens stay zero.
pub fn init_scene(
    conditioned_scene: &SceneTensor,
    schedule: &ScheduleMatrix,
    seed: u64,
) -> Result<SceneTensor> {
    let (a, t) = conditioned_scene.valid.dim();
    if a != schedule.layout.agents || t != schedule.layout.total_frames() {
        return Err(Error::invalid(format!(
            "scene shape ({a}, {t}) does not match schedule layout"
        )));
    }
    let initial = schedule.initial_levels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = conditioned_scene.clone();
    for ai in 0..a {
        for ti in 0..t {
            if !scene.valid[[ai, ti]] {
                for c in 0..CHANNELS {
                    scene.states[[ai, ti, c]] = 0.0;
                }
                continue;
            }
            if initial.get(ai, ti) >= 1.0 {
                for c in 0..CHANNELS {
                    scene.states[[ai, ti, c]] = StandardNormal.sample(&mut rng);
                }
            }
        }
    }
    Ok(scene)
}

/// Applies guidance to a clean-state estimate (normalized units):
/// denormalize, correct positions, renormalize. Conditioned and invalid
/// tokens never move.
pub(crate) fn guide_clean_estimate(
    x0: &mut Array3<f64>,
    valid: &Array2<bool>,
    conditioned: &Array2<bool>,
    map: &MapSet,
    guidance: &GuidanceRun<'_>,
) -> Result<()> {
    let scene_norm = SceneTensor {
        states: x0.clone(),
        valid: valid.clone(),
    };
    let mut metric = denormalize(&scene_norm, guidance.stats)?;
    apply_guidance(&mut metric, map, guidance.config, conditioned)?;
    let back = normalize(&metric, guidance.stats)?;
    // Denormalize re-projects heading channels; keep guidance strictly
    // positional by copying back only the position channels.
    for ai in 0..x0.dim().0 {
        for ti in 0..x0.dim().1 {
            if valid[[ai, ti]] && !conditioned[[ai, ti]] {
                x0[[ai, ti, 0]] = back.states[[ai, ti, 0]];
                x0[[ai, ti, 1]] = back.states[[ai, ti, 1]];
            }
        }
    }
    Ok(())
}

/// Runs a schedule to completion.
///
/// Per step `m`: (1) apply overrides arriving at `m` — the token state is
/// overwritten and its level forced to zero for the rest of the run;
/// (2) predict noise at the current levels; (3) reverse step to the slice-m
/// levels (applying guidance to the clean estimate when configured);
/// (4) record pops. Full-sequence runs reject every mid-run override, as do
/// overrides targeting tokens that already reached zero.
pub fn run(
    schedule: &ScheduleMatrix,
    denoiser: &dyn Denoiser,
    scene_init: &SceneTensor,
    map: &MapSet,
    overrides: &[Override],
    opts: &RunOptions<'_>,
) -> Result<RunOutcome> {
    let (a, t) = scene_init.valid.dim();
    if a != schedule.layout.agents || t != schedule.layout.total_frames() {
        return Err(Error::invalid("scene shape does not match schedule layout"));
    }
    let noise_schedule = NoiseSchedule::standard();
    let mut scene = scene_init.clone();
    let mut levels = schedule.initial_levels().levels().clone();
    let mut forced_zero = Array2::from_elem((a, t), false);
    let mut carry = Array3::zeros((a, t, CHANNELS));
    let mut trace = Trace::default();
    let ctx = PredictContext::new(map);

    for m in 1..=schedule.steps() {
        let levels_start = levels.clone();
        let mut applied = 0;
        let mut rejected = 0;
        for ov in overrides.iter().filter(|o| o.arrival_step == m) {
            let in_range = ov.agent < a && ov.frame < t && scene.valid[[ov.agent, ov.frame]];
            let already_zero = in_range && levels[[ov.agent, ov.frame]] == 0.0;
            if !in_range || already_zero || schedule.strategy == Strategy::Full {
                rejected += 1;
                continue;
            }
            for c in 0..CHANNELS {
                scene.states[[ov.agent, ov.frame, c]] = ov.state[c];
            }
            levels[[ov.agent, ov.frame]] = 0.0;
            forced_zero[[ov.agent, ov.frame]] = true;
            applied += 1;
        }

        let k_now = NoiseMatrix::new(levels.clone())?;
        let mut next = schedule.slice(m).clone();
        for ai in 0..a {
            for ti in 0..t {
                if forced_zero[[ai, ti]] {
                    next[[ai, ti]] = 0.0;
                }
            }
        }
        let k_next = NoiseMatrix::new(next.clone())?;

        let eps_hat = denoiser.predict(&scene, &k_now, &ctx)?;

        let outcome = if let Some(guidance) = &opts.guidance {
            let conditioned = k_now.levels().mapv(|v| v == 0.0);
            let valid = scene.valid.clone();
            let mut hook = |x0: &mut Array3<f64>| {
                // Errors inside the hook surface as non-finite values and
                // are caught by the finiteness checks downstream.
                let _ = guide_clean_estimate(x0, &valid, &conditioned, map, guidance);
            };
            reverse_step(
                &scene,
                &k_now,
                &k_next,
                &eps_hat,
                &carry,
                &noise_schedule,
                Some(&mut hook),
            )?
        } else {
            reverse_step(
                &scene,
                &k_now,
                &k_next,
                &eps_hat,
                &carry,
                &noise_schedule,
                None,
            )?
        };
        scene = outcome.scene;
        carry = outcome.x0_estimate;

        let mut pops = Vec::new();
        let mut in_flight = 0;
        for ai in 0..a {
            for ti in 0..t {
                if !scene.valid[[ai, ti]] {
                    continue;
                }
                let before = levels_start[[ai, ti]];
                let after = next[[ai, ti]];
                if before > 0.0 && after == 0.0 {
                    pops.push((ai, ti));
                }
                if after > 0.0 && after < 1.0 {
                    in_flight += 1;
                }
            }
        }
        levels = next;
        trace.steps.push(StepTrace {
            m,
            in_flight,
            pops,
            overrides_applied: applied,
            overrides_rejected: rejected,
        });
    }

    debug_assert!(levels.iter().all(|v| *v == 0.0));
    Ok(RunOutcome { scene, trace })
}
