//! Sampling-step schedules: when each token is admitted, denoised, and
//! popped.
//!
//! A schedule matrix stacks one noise matrix per sampling step; `slices[m-1]`
//! holds the target levels after step `m` (the implicit step-0 slice is the
//! initial state: level 1 at generated tokens, 0 at conditioned ones). Step
//! `m` therefore denoises from `slices[m-2]` (or the initial slice) down to
//! `slices[m-1]`, and a token pops at the first step whose slice shows it
//! at zero.

mod run;
mod stream;

pub use run::{init_scene, run, GuidanceRun, Override, RunOptions, RunOutcome, StepTrace, Trace};
pub use stream::{StreamConfig, StreamingSampler};

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseMatrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// All generated tokens share one level, descending together.
    Full,
    /// Frame by frame, each fully denoised before the next starts.
    Autoregressive,
    /// One new frame enters the chunk per step from the front.
    Pyramidal,
    /// Frames enter from both ends toward the middle, completing the path
    /// between history and a fixed goal.
    Trapezoidal,
}

impl Strategy {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "full" => Ok(Strategy::Full),
            "ar" | "autoregressive" => Ok(Strategy::Autoregressive),
            "pyramidal" => Ok(Strategy::Pyramidal),
            "trapezoidal" => Ok(Strategy::Trapezoidal),
            other => Err(Error::invalid(format!("unknown schedule strategy `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Autoregressive => "ar",
            Strategy::Pyramidal => "pyramidal",
            Strategy::Trapezoidal => "trapezoidal",
        }
    }
}

/// Partition of the window: `conditioned` leading frames (history +
/// current) are level 0 throughout; the remaining `generated` frames are
/// produced by the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub agents: usize,
    pub conditioned: usize,
    pub generated: usize,
}

impl FrameLayout {
    pub fn total_frames(&self) -> usize {
        self.conditioned + self.generated
    }
}

/// Tokens held at level 0 in every slice (optional goals), addressed as
/// (agent, absolute frame).
pub type GoalSet = BTreeSet<(usize, usize)>;

#[derive(Clone, Debug)]
pub struct ScheduleMatrix {
    pub strategy: Strategy,
    pub layout: FrameLayout,
    /// Descending level ladder each token walks from 1 to 0.
    pub ladder: Vec<f64>,
    pub goals: GoalSet,
    slices: Vec<Array2<f64>>,
}

/// Per-frame ladder index after step `m` for generated frame `tau` in
/// `1..=F` (the same formula at `m = 0` yields the initial state). The
/// token's level is `ladder[index]`.
fn ladder_index(strategy: Strategy, tau: usize, m: usize, f: usize, r: usize) -> usize {
    let idx = match strategy {
        Strategy::Full => m as i64,
        Strategy::Autoregressive => m as i64 - ((tau - 1) * r) as i64,
        Strategy::Pyramidal => m as i64 - tau as i64,
        Strategy::Trapezoidal => {
            let e = tau.min(f + 1 - tau);
            m as i64 - e as i64
        }
    };
    idx.clamp(0, r as i64) as usize
}

fn total_steps(strategy: Strategy, f: usize, r: usize) -> usize {
    match strategy {
        Strategy::Full => r,
        Strategy::Autoregressive => f * r,
        Strategy::Pyramidal => f + r,
        Strategy::Trapezoidal => f.div_ceil(2) + r,
    }
}

/// Builds a schedule on the full `grid`-step ladder `{1, (M-1)/M, .., 0}`.
pub fn build_schedule(
    strategy: Strategy,
    layout: FrameLayout,
    grid: usize,
    goals: &GoalSet,
) -> Result<ScheduleMatrix> {
    if grid < 1 {
        return Err(Error::invalid("grid must be at least 1"));
    }
    let ladder: Vec<f64> = (0..=grid)
        .map(|j| (grid - j) as f64 / grid as f64)
        .collect();
    build_schedule_with_ladder(strategy, layout, &ladder, goals)
}

/// Builds the schedule for one window on an arbitrary descending level
/// ladder from 1 to 0 (step skipping passes a subsampled ladder). Goals are
/// pinned at level 0 in every slice regardless of strategy; so are all
/// conditioned frames.
pub fn build_schedule_with_ladder(
    strategy: Strategy,
    layout: FrameLayout,
    ladder: &[f64],
    goals: &GoalSet,
) -> Result<ScheduleMatrix> {
    if layout.generated < 1 {
        return Err(Error::invalid("schedule needs at least one generated frame"));
    }
    if layout.agents < 1 {
        return Err(Error::invalid("schedule needs at least one agent"));
    }
    if ladder.len() < 2 || ladder[0] != 1.0 || *ladder.last().unwrap() != 0.0 {
        return Err(Error::invalid("ladder must descend from 1 to 0"));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("ladder must be strictly descending"));
    }
    for &(agent, frame) in goals {
        if agent >= layout.agents || frame >= layout.total_frames() {
            return Err(Error::invalid(format!(
                "goal token ({agent}, {frame}) outside the window"
            )));
        }
    }
    let f = layout.generated;
    let r = ladder.len() - 1;
    let steps = total_steps(strategy, f, r);
    let mut slices = Vec::with_capacity(steps);
    for m in 1..=steps {
        let mut slice = Array2::zeros((layout.agents, layout.total_frames()));
        for tau in 1..=f {
            let level = ladder[ladder_index(strategy, tau, m, f, r)];
            let frame = layout.conditioned + tau - 1;
            for a in 0..layout.agents {
                slice[[a, frame]] = level;
            }
        }
        for &(agent, frame) in goals {
            slice[[agent, frame]] = 0.0;
        }
        slices.push(slice);
    }
    debug_assert!(slices.last().unwrap().iter().all(|v| *v == 0.0));
    Ok(ScheduleMatrix {
        strategy,
        layout,
        ladder: ladder.to_vec(),
        goals: goals.clone(),
        slices,
    })
}

impl ScheduleMatrix {
    /// Number of sampling steps M_s.
    pub fn steps(&self) -> usize {
        self.slices.len()
    }

    /// Target levels after step `m` (1-based).
    pub fn slice(&self, m: usize) -> &Array2<f64> {
        &self.slices[m - 1]
    }

    /// Levels before the first step.
    pub fn initial_levels(&self) -> NoiseMatrix {
        let mut levels = Array2::zeros((self.layout.agents, self.layout.total_frames()));
        let f = self.layout.generated;
        let r = self.ladder.len() - 1;
        for tau in 1..=f {
            let level = self.ladder[ladder_index(self.strategy, tau, 0, f, r)];
            let frame = self.layout.conditioned + tau - 1;
            for a in 0..self.layout.agents {
                levels[[a, frame]] = level;
            }
        }
        for &(agent, frame) in &self.goals {
            levels[[agent, frame]] = 0.0;
        }
        NoiseMatrix::new(levels).expect("schedule levels are in range")
    }

    /// The step at which a token reaches level 0, or None for tokens
    /// conditioned from the start.
    pub fn pop_step(&self, agent: usize, frame: usize) -> Option<usize> {
        if frame < self.layout.conditioned || self.goals.contains(&(agent, frame)) {
            return None;
        }
        let mut prev = self.initial_levels().get(agent, frame);
        for m in 1..=self.steps() {
            let level = self.slice(m)[[agent, frame]];
            if prev > 0.0 && level == 0.0 {
                return Some(m);
            }
            prev = level;
        }
        None
    }

    /// All pop steps of the schedule, ascending.
    pub fn pop_timetable(&self) -> Vec<(usize, usize, usize)> {
        let mut pops = Vec::new();
        for a in 0..self.layout.agents {
            for frame in 0..self.layout.total_frames() {
                if let Some(m) = self.pop_step(a, frame) {
                    pops.push((m, a, frame));
                }
            }
        }
        pops.sort_unstable();
        pops
    }
}

/// Sampling steps from an override's arrival until the first pop that can
/// reflect it. Full-sequence schedules reject mid-run overrides and are
/// charged a complete restart (M_s steps). A pop in the arrival step itself
/// still costs that one step of denoising.
pub fn reaction_latency(schedule: &ScheduleMatrix, override_step: usize) -> usize {
    if schedule.strategy == Strategy::Full {
        return schedule.steps();
    }
    let pops = schedule.pop_timetable();
    match pops.iter().map(|&(m, _, _)| m).find(|&m| m >= override_step) {
        Some(p) => (p - override_step).max(1),
        None => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(agents: usize, f: usize) -> FrameLayout {
        FrameLayout {
            agents,
            conditioned: 5,
            generated: f,
        }
    }

    #[test]
    fn step_counts_match_reference_table() {
        let goals = GoalSet::new();
        let cases = [
            (Strategy::Full, 32),
            (Strategy::Autoregressive, 512),
            (Strategy::Pyramidal, 48),
            (Strategy::Trapezoidal, 40),
        ];
        for (strategy, want) in cases {
            let s = build_schedule(strategy, layout(2, 16), 32, &goals).unwrap();
            assert_eq!(s.steps(), want, "{strategy:?}");
        }
    }

    #[test]
    fn pyramidal_single_frame_is_grid_plus_one() {
        let s = build_schedule(Strategy::Pyramidal, layout(1, 1), 32, &GoalSet::new()).unwrap();
        assert_eq!(s.steps(), 33);
    }

    #[test]
    fn slices_are_monotone_and_end_at_zero() {
        for strategy in [
            Strategy::Full,
            Strategy::Autoregressive,
            Strategy::Pyramidal,
            Strategy::Trapezoidal,
        ] {
            let s = build_schedule(strategy, layout(2, 7), 8, &GoalSet::new()).unwrap();
            let mut prev = s.initial_levels().levels().clone();
            for m in 1..=s.steps() {
                let slice = s.slice(m);
                for (p, n) in prev.iter().zip(slice.iter()) {
                    assert!(n <= p, "{strategy:?} step {m}: {n} > {p}");
                }
                prev = slice.clone();
            }
            assert!(s.slice(s.steps()).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn conditioned_and_goal_tokens_zero_everywhere() {
        let mut goals = GoalSet::new();
        goals.insert((1, 9));
        let s = build_schedule(Strategy::Trapezoidal, layout(3, 6), 8, &goals).unwrap();
        assert_eq!(s.initial_levels().get(1, 9), 0.0);
        for m in 1..=s.steps() {
            let slice = s.slice(m);
            for a in 0..3 {
                for t in 0..5 {
                    assert_eq!(slice[[a, t]], 0.0);
                }
            }
            assert_eq!(slice[[1, 9]], 0.0);
        }
    }

    #[test]
    fn every_generated_token_pops_exactly_once() {
        for strategy in [
            Strategy::Full,
            Strategy::Autoregressive,
            Strategy::Pyramidal,
            Strategy::Trapezoidal,
        ] {
            let s = build_schedule(strategy, layout(2, 5), 6, &GoalSet::new()).unwrap();
            for a in 0..2 {
                for frame in 5..10 {
                    let pop = s.pop_step(a, frame).expect("generated token must pop");
                    // stays zero afterwards
                    for m in pop..=s.steps() {
                        assert_eq!(s.slice(m)[[a, frame]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn pyramidal_pops_in_frame_order() {
        let s = build_schedule(Strategy::Pyramidal, layout(1, 6), 8, &GoalSet::new()).unwrap();
        let pops = s.pop_timetable();
        let frames: Vec<usize> = pops.iter().map(|&(_, _, f)| f).collect();
        let mut sorted = frames.clone();
        sorted.sort_unstable();
        assert_eq!(frames, sorted);
        let steps: Vec<usize> = pops.iter().map(|&(m, _, _)| m).collect();
        for w in steps.windows(2) {
            assert_eq!(w[1] - w[0], 1);
        }
    }

    #[test]
    fn trapezoidal_pops_from_both_ends_inward() {
        let s = build_schedule(Strategy::Trapezoidal, layout(1, 6), 8, &GoalSet::new()).unwrap();
        // admission e = min(tau, 7 - tau): frames pop in pairs (1,6), (2,5), (3,4).
        let pops = s.pop_timetable();
        let by_step: Vec<(usize, usize)> = pops.iter().map(|&(m, _, f)| (m, f)).collect();
        assert_eq!(by_step[0].0, by_step[1].0);
        let first_pair: Vec<usize> = by_step[..2].iter().map(|&(_, f)| f).collect();
        assert_eq!(first_pair, vec![5, 10]); // window frames of tau = 1 and 6
    }

    #[test]
    fn full_sequence_latency_is_full_run() {
        let s = build_schedule(Strategy::Full, layout(1, 16), 32, &GoalSet::new()).unwrap();
        assert_eq!(reaction_latency(&s, 10), 32);
    }

    #[test]
    fn pipelined_latency_is_one_in_steady_state() {
        let s = build_schedule(Strategy::Pyramidal, layout(1, 16), 32, &GoalSet::new()).unwrap();
        // Pops run from step 33 to 48; an override inside that phase is
        // reflected within one step.
        assert_eq!(reaction_latency(&s, 40), 1);
        let s = build_schedule(Strategy::Trapezoidal, layout(1, 16), 32, &GoalSet::new()).unwrap();
        assert_eq!(reaction_latency(&s, 35), 1);
    }

    #[test]
    fn autoregressive_latency_bounded_by_grid() {
        let s =
            build_schedule(Strategy::Autoregressive, layout(1, 4), 32, &GoalSet::new()).unwrap();
        for m in 1..=s.steps() {
            assert!(reaction_latency(&s, m) <= 32);
        }
    }

    #[test]
    fn unknown_strategy_tag_rejected() {
        assert!(Strategy::parse("zigzag").is_err());
        assert_eq!(Strategy::parse("ar").unwrap(), Strategy::Autoregressive);
    }
}
