//! Persistent pipelined sampling over an unbounded horizon.
//!
//! The chunk rolls forward with the world: every admitted frame descends
//! `1/M` per scheduler step, one frame is admitted per `spf` steps (`spf =
//! ceil(M / F)` so the in-flight set always fits the window), and the
//! oldest in-flight frame pops every `spf` steps. A world iteration
//! therefore costs `spf` scheduler steps instead of a full re-run, which is
//! what gives pipelined schedules their reaction-time advantage.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Denoiser, PredictContext};
use crate::diffusion::{reverse_step, NoiseMatrix, NoiseSchedule};
use crate::scene::{MapSet, SceneTensor, CHANNELS};
use crate::{Error, Result};

use super::run::{guide_clean_estimate, GuidanceRun, StepTrace, Trace};
use super::Strategy;

#[derive(Clone, Copy, Debug)]
pub struct StreamConfig {
    /// Pyramidal or autoregressive; full-sequence cannot stream and
    /// trapezoidal needs a terminal frame, so both are rejected.
    pub strategy: Strategy,
    pub grid: usize,
    /// Conditioned frames at the head of the window (history + current).
    pub conditioned: usize,
    /// Generated frames in the window (F).
    pub generated: usize,
    pub noise_seed: u64,
}

impl StreamConfig {
    /// Scheduler steps per emitted frame.
    pub fn steps_per_frame(&self) -> usize {
        match self.strategy {
            Strategy::Pyramidal => self.grid.div_ceil(self.generated),
            Strategy::Autoregressive => self.grid,
            Strategy::Full | Strategy::Trapezoidal => 0,
        }
    }
}

/// One emitted frame: per-agent states (normalized) plus validity.
pub struct EmittedFrame {
    pub abs_frame: usize,
    pub states: Vec<[f64; CHANNELS]>,
    pub valid: Vec<bool>,
}

pub struct StreamingSampler<'a> {
    denoiser: &'a dyn Denoiser,
    map: &'a MapSet,
    guidance: Option<GuidanceRun<'a>>,
    cfg: StreamConfig,
    agents: usize,
    /// Absolute frame index of window column 0.
    base: usize,
    window: SceneTensor,
    levels: Array2<f64>,
    forced_zero: Array2<bool>,
    carry: Array3<f64>,
    /// Global scheduler step counter.
    step: usize,
    /// Count of frames emitted so far (global future index of the last pop).
    emitted: usize,
    rng: ChaCha8Rng,
    noise_schedule: NoiseSchedule,
    pub trace: Trace,
    pending: Vec<(usize, usize, [f64; CHANNELS])>,
}

impl<'a> StreamingSampler<'a> {
    /// `initial` is the normalized window: conditioned frames hold clean
    /// states, generated frames may hold anything (they are re-drawn as
    /// noise here).
    pub fn new(
        denoiser: &'a dyn Denoiser,
        map: &'a MapSet,
        guidance: Option<GuidanceRun<'a>>,
        cfg: StreamConfig,
        initial: &SceneTensor,
    ) -> Result<Self> {
        if !matches!(cfg.strategy, Strategy::Pyramidal | Strategy::Autoregressive) {
            return Err(Error::invalid(
                "streaming requires a pipelined strategy (pyramidal or autoregressive)",
            ));
        }
        let (agents, total) = initial.valid.dim();
        if total != cfg.conditioned + cfg.generated {
            return Err(Error::invalid(format!(
                "window has {total} frames, config wants {}",
                cfg.conditioned + cfg.generated
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        let mut window = initial.clone();
        window.zero_invalid();
        for ai in 0..agents {
            for ti in cfg.conditioned..total {
                if window.valid[[ai, ti]] {
                    for c in 0..CHANNELS {
                        window.states[[ai, ti, c]] = StandardNormal.sample(&mut rng);
                    }
                }
            }
        }
        let mut levels = Array2::zeros((agents, total));
        for ai in 0..agents {
            for ti in cfg.conditioned..total {
                levels[[ai, ti]] = 1.0;
            }
        }
        Ok(StreamingSampler {
            denoiser,
            map,
            guidance,
            cfg,
            agents,
            base: 0,
            window,
            levels,
            forced_zero: Array2::from_elem((agents, total), false),
            carry: Array3::zeros((agents, total, CHANNELS)),
            step: 0,
            emitted: 0,
            rng,
            noise_schedule: NoiseSchedule::new(cfg.grid)?,
            trace: Trace::default(),
            pending: Vec::new(),
        })
    }

    /// Scheduler step at which global future frame `g` (1-based) pops.
    fn pop_step(&self, g: usize) -> usize {
        g * self.cfg.steps_per_frame() + self.cfg.grid
    }

    /// Target level of global future frame `g` after scheduler step `m`.
    fn level_after(&self, g: usize, m: usize) -> f64 {
        let admit = g * self.cfg.steps_per_frame();
        (1.0 - (m as f64 - admit as f64) / self.cfg.grid as f64).clamp(0.0, 1.0)
    }

    /// Absolute frame of global future index `g`.
    fn abs_frame(&self, g: usize) -> usize {
        self.cfg.conditioned - 1 + g
    }

    /// Queues a state override (normalized units) for the next scheduler
    /// step. Targets that already reached zero are rejected at application
    /// time and recorded in the trace.
    pub fn push_override(&mut self, agent: usize, abs_frame: usize, state: [f64; CHANNELS]) {
        self.pending.push((agent, abs_frame, state));
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn one_step(&mut self) -> Result<()> {
        let m = self.step + 1;
        let (a, t) = self.window.valid.dim();
        let levels_start = self.levels.clone();

        let mut applied = 0;
        let mut rejected = 0;
        let pending = std::mem::take(&mut self.pending);
        for (agent, abs_frame, state) in pending {
            let in_window = abs_frame >= self.base && abs_frame < self.base + t;
            if !in_window || agent >= a {
                rejected += 1;
                continue;
            }
            let col = abs_frame - self.base;
            if !self.window.valid[[agent, col]] || self.levels[[agent, col]] == 0.0 {
                rejected += 1;
                continue;
            }
            for c in 0..CHANNELS {
                self.window.states[[agent, col, c]] = state[c];
            }
            self.levels[[agent, col]] = 0.0;
            self.forced_zero[[agent, col]] = true;
            applied += 1;
        }

        let k_now = NoiseMatrix::new(self.levels.clone())?;
        let mut next = Array2::zeros((a, t));
        for ti in self.cfg.conditioned..t {
            let g = self.emitted + (ti - self.cfg.conditioned) + 1;
            let level = self.level_after(g, m);
            for ai in 0..a {
                next[[ai, ti]] = level;
            }
        }
        for ai in 0..a {
            for ti in 0..t {
                if self.forced_zero[[ai, ti]] {
                    next[[ai, ti]] = 0.0;
                }
                // A streaming step may not raise levels; freshly admitted
                // columns start at 1 so this only trims rounding.
                if next[[ai, ti]] > levels_start[[ai, ti]] {
                    next[[ai, ti]] = levels_start[[ai, ti]];
                }
            }
        }
        let k_next = NoiseMatrix::new(next.clone())?;

        let ctx = PredictContext {
            map: self.map,
            frame_offset: self.base,
        };
        let eps_hat = self.denoiser.predict(&self.window, &k_now, &ctx)?;

        let outcome = if let Some(guidance) = &self.guidance {
            let conditioned = k_now.levels().mapv(|v| v == 0.0);
            let valid = self.window.valid.clone();
            let map = self.map;
            let mut hook = |x0: &mut Array3<f64>| {
                let _ = guide_clean_estimate(x0, &valid, &conditioned, map, guidance);
            };
            reverse_step(
                &self.window,
                &k_now,
                &k_next,
                &eps_hat,
                &self.carry,
                &self.noise_schedule,
                Some(&mut hook),
            )?
        } else {
            reverse_step(
                &self.window,
                &k_now,
                &k_next,
                &eps_hat,
                &self.carry,
                &self.noise_schedule,
                None,
            )?
        };
        self.window = outcome.scene;
        self.carry = outcome.x0_estimate;

        let mut pops = Vec::new();
        let mut in_flight = 0;
        for ai in 0..a {
            for ti in 0..t {
                if !self.window.valid[[ai, ti]] {
                    continue;
                }
                if levels_start[[ai, ti]] > 0.0 && next[[ai, ti]] == 0.0 {
                    pops.push((ai, self.base + ti));
                }
                if next[[ai, ti]] > 0.0 && next[[ai, ti]] < 1.0 {
                    in_flight += 1;
                }
            }
        }
        self.levels = next;
        self.step = m;
        self.trace.steps.push(StepTrace {
            m,
            in_flight,
            pops,
            overrides_applied: applied,
            overrides_rejected: rejected,
        });
        Ok(())
    }

    /// Runs scheduler steps until the next frame pops, emits it, and slides
    /// the window one frame forward. Returns the emitted frame.
    pub fn advance_frame(&mut self) -> Result<EmittedFrame> {
        let g = self.emitted + 1;
        let target = self.pop_step(g);
        while self.step < target {
            self.one_step()?;
        }
        let col = self.abs_frame(g) - self.base;
        debug_assert!(self
            .levels
            .column(col)
            .iter()
            .zip(self.window.valid.column(col).iter())
            .all(|(l, v)| !*v || *l == 0.0));
        let states: Vec<[f64; CHANNELS]> = (0..self.agents)
            .map(|ai| {
                let mut s = [0.0; CHANNELS];
                for c in 0..CHANNELS {
                    s[c] = self.window.states[[ai, col, c]];
                }
                s
            })
            .collect();
        let valid: Vec<bool> = (0..self.agents)
            .map(|ai| self.window.valid[[ai, col]])
            .collect();
        let emitted = EmittedFrame {
            abs_frame: self.abs_frame(g),
            states,
            valid,
        };
        self.emitted = g;
        self.slide_window()?;
        Ok(emitted)
    }

    /// Drops the oldest column and appends a fresh noise column for the
    /// next future frame. Validity of the new column extends each agent's
    /// validity at the previous last frame.
    fn slide_window(&mut self) -> Result<()> {
        let (a, t) = self.window.valid.dim();
        let mut window = SceneTensor::zeros(a, t);
        let mut levels = Array2::zeros((a, t));
        let mut forced = Array2::from_elem((a, t), false);
        let mut carry = Array3::zeros((a, t, CHANNELS));
        for ai in 0..a {
            for ti in 0..t - 1 {
                window.valid[[ai, ti]] = self.window.valid[[ai, ti + 1]];
                for c in 0..CHANNELS {
                    window.states[[ai, ti, c]] = self.window.states[[ai, ti + 1, c]];
                    carry[[ai, ti, c]] = self.carry[[ai, ti + 1, c]];
                }
                levels[[ai, ti]] = self.levels[[ai, ti + 1]];
                forced[[ai, ti]] = self.forced_zero[[ai, ti + 1]];
            }
            let was_valid = self.window.valid[[ai, t - 1]];
            window.valid[[ai, t - 1]] = was_valid;
            if was_valid {
                for c in 0..CHANNELS {
                    window.states[[ai, t - 1, c]] = StandardNormal.sample(&mut self.rng);
                }
                levels[[ai, t - 1]] = 1.0;
            }
        }
        self.window = window;
        self.levels = levels;
        self.forced_zero = forced;
        self.carry = carry;
        self.base += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;
    use crate::scene::SceneTensor;

    /// With the oracle and ground truth covering the whole horizon, the
    /// streaming sampler reproduces the ground-truth frames it emits.
    #[test]
    fn streaming_oracle_reproduces_ground_truth() {
        let agents = 2;
        let conditioned = 3;
        let generated = 4;
        let horizon = 14;
        let mut gt = SceneTensor::zeros(agents, horizon);
        gt.valid.fill(true);
        let mut v = 0.3;
        for x in gt.states.iter_mut() {
            *x = v;
            v = (v * 1.37 + 0.41) % 1.0 - 0.5;
        }
        let oracle = OracleDenoiser::new(&gt);
        let map = MapSet::empty();
        let cfg = StreamConfig {
            strategy: Strategy::Pyramidal,
            grid: 8,
            conditioned,
            generated,
            noise_seed: 42,
        };
        let initial = {
            let mut w = SceneTensor::zeros(agents, conditioned + generated);
            w.valid.fill(true);
            for ai in 0..agents {
                for ti in 0..conditioned + generated {
                    for c in 0..CHANNELS {
                        w.states[[ai, ti, c]] = gt.states[[ai, ti, c]];
                    }
                }
            }
            w
        };
        let mut sampler = StreamingSampler::new(&oracle, &map, None, cfg, &initial).unwrap();
        let spf = cfg.steps_per_frame();
        assert_eq!(spf, 2);
        let mut last_steps = 0;
        for i in 0..5 {
            let frame = sampler.advance_frame().unwrap();
            assert_eq!(frame.abs_frame, conditioned + i);
            for ai in 0..agents {
                for c in 0..CHANNELS {
                    let want = gt.states[[ai, conditioned + i, c]];
                    let got = frame.states[ai][c];
                    assert!(
                        (got - want).abs() < 1e-7,
                        "frame {i}, agent {ai}, channel {c}: {got} vs {want}"
                    );
                }
            }
            let taken = sampler.steps_taken();
            if i > 0 {
                assert_eq!(taken - last_steps, spf, "steady state costs spf steps");
            }
            last_steps = taken;
        }
    }

    #[test]
    fn streaming_rejects_full_sequence() {
        let gt = SceneTensor::zeros(1, 5);
        let oracle = OracleDenoiser::new(&gt);
        let map = MapSet::empty();
        let cfg = StreamConfig {
            strategy: Strategy::Full,
            grid: 8,
            conditioned: 2,
            generated: 3,
            noise_seed: 0,
        };
        let initial = SceneTensor::zeros(1, 5);
        assert!(StreamingSampler::new(&oracle, &map, None, cfg, &initial).is_err());
    }
}
