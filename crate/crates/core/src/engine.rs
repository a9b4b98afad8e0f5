//! High-level sampling API: scenario record in, generated record out.
//!
//! Free exploration conditions the history and current frames; conditioned
//! generation additionally pins per-agent goal tokens at level 0. Step
//! skipping runs the same schedule shapes on a subsampled level ladder.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::Denoiser;
use crate::diffusion::subsample_grid;
use crate::guidance::GuidanceConfig;
use crate::record::ScenarioRecord;
use crate::scene::{denormalize, normalize, ChannelStats};
use crate::scheduler::{
    build_schedule_with_ladder, init_scene, run, FrameLayout, GoalSet, GuidanceRun, RunOptions,
    ScheduleMatrix, Strategy, Trace,
};
use crate::{Error, Result};

/// A denoiser plus everything needed to run it on records.
pub struct SamplingEngine<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub stats: &'a ChannelStats,
    /// Full level-grid size M of the model.
    pub grid: usize,
}

#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub strategy: Strategy,
    /// Ladder steps; `grid` for the full ladder, less for step skipping.
    pub steps: usize,
    /// Fraction of agents that receive a goal token at their last valid
    /// future frame.
    pub goal_rate: f64,
    pub guidance: Option<GuidanceConfig>,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(strategy: Strategy, grid: usize, seed: u64) -> Self {
        SampleSpec {
            strategy,
            steps: grid,
            goal_rate: 0.0,
            guidance: None,
            seed,
        }
    }
}

pub struct SampleOutput {
    /// Generated scenario in metric units, same shape and metadata as the
    /// base record.
    pub record: ScenarioRecord,
    /// Goal tokens that were conditioned, as (agent index, frame).
    pub goals: Vec<(usize, usize)>,
    pub trace: Trace,
    pub steps: usize,
}

impl SamplingEngine<'_> {
    /// Draws per-agent goal tokens: with probability `goal_rate` an agent's
    /// last valid future frame is pinned to its ground-truth state.
    pub fn draw_goals(&self, record: &ScenarioRecord, spec: &SampleSpec) -> GoalSet {
        let mut goals = GoalSet::new();
        if spec.goal_rate <= 0.0 {
            return goals;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x60a1));
        let conditioned = record.meta.conditioned_frames();
        let total = record.meta.total_frames();
        for (ai, agent) in record.agents.iter().enumerate() {
            let last_valid = (conditioned..total).rev().find(|&t| agent.states[t].is_some());
            if let Some(frame) = last_valid {
                if rng.random::<f64>() < spec.goal_rate {
                    goals.insert((ai, frame));
                }
            }
        }
        goals
    }

    pub fn schedule_for(
        &self,
        record: &ScenarioRecord,
        spec: &SampleSpec,
        goals: &GoalSet,
    ) -> Result<ScheduleMatrix> {
        if spec.steps < 1 || spec.steps > self.grid {
            return Err(Error::invalid(format!(
                "steps must be in [1, {}], got {}",
                self.grid, spec.steps
            )));
        }
        let ladder = subsample_grid(self.grid, spec.steps)?;
        let layout = FrameLayout {
            agents: record.agents.len(),
            conditioned: record.meta.conditioned_frames(),
            generated: record.meta.future_frames,
        };
        build_schedule_with_ladder(spec.strategy, layout, &ladder, goals)
    }

    /// Regenerates the future of `base` under the given schedule strategy;
    /// history, current frame, and drawn goals are conditioned.
    pub fn sample_record(&self, base: &ScenarioRecord, spec: &SampleSpec) -> Result<SampleOutput> {
        let goals = self.draw_goals(base, spec);
        let schedule = self.schedule_for(base, spec, &goals)?;
        let scene_gt = base.to_scene()?;
        let map = base.to_map()?;
        let norm = normalize(&scene_gt, self.stats)?;
        let init = init_scene(&norm, &schedule, spec.seed.wrapping_add(0x1417))?;
        let opts = match &spec.guidance {
            Some(config) => RunOptions {
                guidance: Some(GuidanceRun {
                    config,
                    stats: self.stats,
                }),
            },
            None => RunOptions::default(),
        };
        let out = run(&schedule, self.denoiser, &init, &map, &[], &opts)?;
        let metric = denormalize(&out.scene, self.stats)?;
        let record = base.with_scene(&metric)?;
        Ok(SampleOutput {
            record,
            goals: goals.into_iter().collect(),
            trace: out.trace,
            steps: schedule.steps(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, TemplateMix};
    use crate::denoiser::OracleDenoiser;
    use crate::metrics;
    use crate::scene::fit_stats_scenes;
    use ndarray::Array2;

    #[test]
    fn oracle_engine_reproduces_records() {
        let corpus = generate_corpus(3, &TemplateMix::default(), 17).unwrap();
        let scenes: Vec<_> = corpus.iter().map(|r| r.to_scene().unwrap()).collect();
        let stats = fit_stats_scenes(scenes.iter()).unwrap();
        for (record, scene) in corpus.iter().zip(&scenes) {
            let norm = normalize(scene, &stats).unwrap();
            let oracle = OracleDenoiser::new(&norm);
            let engine = SamplingEngine {
                denoiser: &oracle,
                stats: &stats,
                grid: 16,
            };
            for strategy in [Strategy::Full, Strategy::Pyramidal, Strategy::Trapezoidal] {
                let spec = SampleSpec::new(strategy, 16, 5);
                let out = engine.sample_record(record, &spec).unwrap();
                let gen_scene = out.record.to_scene().unwrap();
                let cond = Array2::from_elem(
                    (scene.agents(), scene.frames()),
                    false,
                );
                let err = metrics::ade(&gen_scene, scene, &cond).unwrap();
                assert!(err < 1e-6, "{strategy:?}: ade {err}");
            }
        }
    }

    #[test]
    fn goal_rate_one_pins_every_agent() {
        let corpus = generate_corpus(1, &TemplateMix::default(), 23).unwrap();
        let record = &corpus[0];
        let scene = record.to_scene().unwrap();
        let stats = fit_stats_scenes([&scene]).unwrap();
        let norm = normalize(&scene, &stats).unwrap();
        let oracle = OracleDenoiser::new(&norm);
        let engine = SamplingEngine {
            denoiser: &oracle,
            stats: &stats,
            grid: 8,
        };
        let spec = SampleSpec {
            goal_rate: 1.0,
            ..SampleSpec::new(Strategy::Trapezoidal, 8, 9)
        };
        let goals = engine.draw_goals(record, &spec);
        assert_eq!(goals.len(), record.agents.len());
    }

    #[test]
    fn step_skipping_keeps_oracle_exact() {
        let corpus = generate_corpus(2, &TemplateMix::default(), 29).unwrap();
        for record in &corpus {
            let scene = record.to_scene().unwrap();
            let stats = fit_stats_scenes([&scene]).unwrap();
            let norm = normalize(&scene, &stats).unwrap();
            let oracle = OracleDenoiser::new(&norm);
            let engine = SamplingEngine {
                denoiser: &oracle,
                stats: &stats,
                grid: 32,
            };
            let spec = SampleSpec {
                steps: 18,
                ..SampleSpec::new(Strategy::Pyramidal, 32, 3)
            };
            let out = engine.sample_record(record, &spec).unwrap();
            assert_eq!(out.steps, record.meta.future_frames + 18);
            let gen_scene = out.record.to_scene().unwrap();
            let cond = Array2::from_elem((scene.agents(), scene.frames()), false);
            let err = metrics::ade(&gen_scene, &scene, &cond).unwrap();
            assert!(err < 1e-6, "ade {err}");
        }
    }
}
