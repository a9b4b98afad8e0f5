//! Synthetic scenario corpus generation for desk-scale training: procedural
//! lane templates, car-following longitudinal control with scripted
//! lane-change and stop events, plus attack synthesis and validity
//! filtering in the submodules.

mod attack;
mod behavior;

pub use attack::{
    attacker_pool, checklist, mixed_kind_name, pick_attack_goal, plan_mix, select_attacker,
    synthesize_attack, AttackOutcome, AttackSpec, ChecklistResult, ChecklistRule,
    ChecklistThresholds,
};
pub use behavior::{behavior_stats, Behavior, BehaviorStats};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::record::{AgentRecord, AgentState, LaneRecord, ScenarioMeta, ScenarioRecord};
use crate::scene::LaneKind;
use crate::{Error, Result};

/// Half of the spatial range covered by a template.
const HALF_RANGE: f64 = 52.0;
/// Lane centerline sampling interval in meters.
const POINT_SPACING: f64 = 2.0;

/// Procedural lane layout generators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MapTemplate {
    /// Parallel straight lanes along x.
    Straight { lanes: usize, lane_width: f64 },
    /// Concentric arcs (a left curve traversed along +x).
    Arc { radius: f64, lanes: usize, lane_width: f64 },
    /// Two perpendicular roads crossing at the origin.
    Crossing { lanes: usize, lane_width: f64 },
}

impl MapTemplate {
    pub fn validate(&self) -> Result<()> {
        let (lanes, width) = match *self {
            MapTemplate::Straight { lanes, lane_width } => (lanes, lane_width),
            MapTemplate::Arc {
                radius,
                lanes,
                lane_width,
            } => {
                if !(radius > 10.0) {
                    return Err(Error::invalid("arc radius must exceed 10 m"));
                }
                (lanes, lane_width)
            }
            MapTemplate::Crossing { lanes, lane_width } => (lanes, lane_width),
        };
        if lanes == 0 || !(width > 0.0) {
            return Err(Error::invalid("template needs lanes >= 1 and positive width"));
        }
        Ok(())
    }
}

/// One drivable path: sampled centerline points plus a parametrization by
/// arclength used by the traffic simulation.
#[derive(Clone, Debug)]
pub struct LanePath {
    pub kind: LaneKind,
    pub points: Vec<[f64; 2]>,
    /// Road group id: lane changes are allowed between adjacent lanes of
    /// the same group.
    pub group: usize,
    /// Index of this lane within its group.
    pub index_in_group: usize,
    geometry: LaneGeometry,
}

#[derive(Clone, Debug)]
enum LaneGeometry {
    /// y fixed, driving along +x.
    StraightX { y: f64 },
    /// x fixed, driving along +y.
    StraightY { x: f64 },
    /// Circle of radius r around (0, center_y), s = 0 at the origin-side
    /// point, driving counterclockwise.
    Arc { radius: f64, center_y: f64 },
}

impl LanePath {
    /// Position at arclength s (s = 0 at the range start).
    pub fn position(&self, s: f64) -> [f64; 2] {
        match self.geometry {
            LaneGeometry::StraightX { y } => [s - HALF_RANGE, y],
            LaneGeometry::StraightY { x } => [x, s - HALF_RANGE],
            LaneGeometry::Arc { radius, center_y } => {
                let phi = (s - HALF_RANGE) / radius;
                [radius * phi.sin(), center_y - radius * phi.cos()]
            }
        }
    }

    /// Unit tangent at arclength s.
    pub fn tangent(&self, s: f64) -> [f64; 2] {
        match self.geometry {
            LaneGeometry::StraightX { .. } => [1.0, 0.0],
            LaneGeometry::StraightY { .. } => [0.0, 1.0],
            LaneGeometry::Arc { radius, .. } => {
                let phi = (s - HALF_RANGE) / radius;
                [phi.cos(), phi.sin()]
            }
        }
    }

    /// Unit left normal at arclength s.
    pub fn normal(&self, s: f64) -> [f64; 2] {
        let t = self.tangent(s);
        [-t[1], t[0]]
    }

    pub fn length(&self) -> f64 {
        2.0 * HALF_RANGE
    }
}

/// Instantiates the lane paths of a template.
pub fn template_lanes(template: &MapTemplate) -> Result<Vec<LanePath>> {
    template.validate()?;
    let sample = |geom: &LaneGeometry| -> Vec<[f64; 2]> {
        let count = (2.0 * HALF_RANGE / POINT_SPACING) as usize + 1;
        (0..count)
            .map(|i| {
                let s = i as f64 * POINT_SPACING;
                match geom {
                    LaneGeometry::StraightX { y } => [s - HALF_RANGE, *y],
                    LaneGeometry::StraightY { x } => [*x, s - HALF_RANGE],
                    LaneGeometry::Arc { radius, center_y } => {
                        let phi = (s - HALF_RANGE) / radius;
                        [radius * phi.sin(), center_y - radius * phi.cos()]
                    }
                }
            })
            .collect()
    };
    let offsets = |lanes: usize, width: f64| -> Vec<f64> {
        (0..lanes)
            .map(|i| (i as f64 - (lanes as f64 - 1.0) / 2.0) * width)
            .collect()
    };
    let mut paths = Vec::new();
    match *template {
        MapTemplate::Straight { lanes, lane_width } => {
            for (idx, off) in offsets(lanes, lane_width).into_iter().enumerate() {
                let geometry = LaneGeometry::StraightX { y: off };
                paths.push(LanePath {
                    kind: LaneKind::Driving,
                    points: sample(&geometry),
                    group: 0,
                    index_in_group: idx,
                    geometry,
                });
            }
        }
        MapTemplate::Arc {
            radius,
            lanes,
            lane_width,
        } => {
            for (idx, off) in offsets(lanes, lane_width).into_iter().enumerate() {
                // Lane i sits at radius - offset so positive offsets are to
                // the left of the base arc.
                let geometry = LaneGeometry::Arc {
                    radius: radius - off,
                    center_y: radius,
                };
                paths.push(LanePath {
                    kind: LaneKind::Turn,
                    points: sample(&geometry),
                    group: 0,
                    index_in_group: idx,
                    geometry,
                });
            }
        }
        MapTemplate::Crossing { lanes, lane_width } => {
            for (idx, off) in offsets(lanes, lane_width).into_iter().enumerate() {
                let geometry = LaneGeometry::StraightX { y: off };
                paths.push(LanePath {
                    kind: LaneKind::Junction,
                    points: sample(&geometry),
                    group: 0,
                    index_in_group: idx,
                    geometry,
                });
            }
            for (idx, off) in offsets(lanes, lane_width).into_iter().enumerate() {
                let geometry = LaneGeometry::StraightY { x: off };
                paths.push(LanePath {
                    kind: LaneKind::Junction,
                    points: sample(&geometry),
                    group: 1,
                    index_in_group: idx,
                    geometry,
                });
            }
        }
    }
    Ok(paths)
}

/// Weights for drawing a template per scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix {
    pub straight: f64,
    pub arc: f64,
    pub crossing: f64,
}

impl Default for TemplateMix {
    fn default() -> Self {
        TemplateMix {
            straight: 0.4,
            arc: 0.35,
            crossing: 0.25,
        }
    }
}

/// Desired-speed / desired-gap car-following acceleration.
///
/// `a = a_max (1 - (v / v0)^4 - (s* / gap)^2)` with
/// `s* = s0 + v T + v dv / (2 sqrt(a_max b))`.
#[derive(Clone, Copy, Debug)]
pub struct CarFollowing {
    pub a_max: f64,
    pub brake: f64,
    pub min_gap: f64,
    pub headway: f64,
}

impl Default for CarFollowing {
    fn default() -> Self {
        CarFollowing {
            a_max: 1.5,
            brake: 2.0,
            min_gap: 2.0,
            headway: 1.5,
        }
    }
}

impl CarFollowing {
    pub fn accel(&self, v: f64, v_desired: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = if v_desired > 0.0 {
            self.a_max * (1.0 - (v / v_desired).powi(4))
        } else {
            -self.brake
        };
        let interaction = match leader {
            Some((gap, dv)) => {
                let gap = gap.max(0.1);
                let s_star = self.min_gap
                    + v * self.headway
                    + v * dv / (2.0 * (self.a_max * self.brake).sqrt());
                -self.a_max * (s_star.max(0.0) / gap).powi(2)
            }
            None => 0.0,
        };
        (free + interaction).clamp(-2.0 * self.brake, self.a_max)
    }
}

#[derive(Clone, Copy, Debug)]
enum Event {
    None,
    /// Desired speed drops to zero from `start` on.
    Stop { start: usize },
    /// Blend from the spawn lane to `target` over `duration` frames.
    LaneChange {
        start: usize,
        duration: usize,
        target: usize,
    },
}

struct SimAgent {
    lane: usize,
    s: f64,
    v: f64,
    v_desired: f64,
    length: f64,
    width: f64,
    event: Event,
    spawn_frame: usize,
}

impl SimAgent {
    /// Blend fraction and target lane at a frame (0 outside a change).
    fn change_state(&self, frame: usize) -> (usize, f64) {
        match self.event {
            Event::LaneChange {
                start,
                duration,
                target,
            } if frame >= start => {
                let frac = ((frame - start) as f64 / duration as f64).min(1.0);
                (target, frac)
            }
            _ => (self.lane, 0.0),
        }
    }

    /// Lane used for leader lookup (switches halfway through a change).
    fn lane_now(&self, frame: usize) -> usize {
        let (target, frac) = self.change_state(frame);
        if frac >= 0.5 {
            target
        } else {
            self.lane
        }
    }
}

/// Generates a deterministic corpus of procedural scenarios: 21 frames at
/// 0.5 s (4 history + 1 current + 16 future), 2 to 8 agents under
/// car-following control with scripted events, lanes from the drawn
/// template. Each scenario derives its own RNG stream from (seed, index).
pub fn generate_corpus(n: usize, mix: &TemplateMix, seed: u64) -> Result<Vec<ScenarioRecord>> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be >= 1"));
    }
    (0..n).map(|i| generate_scenario(mix, seed, i as u64)).collect()
}

pub fn generate_scenario(mix: &TemplateMix, seed: u64, index: u64) -> Result<ScenarioRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));

    let total_weight = mix.straight + mix.arc + mix.crossing;
    let draw = rng.random::<f64>() * total_weight;
    let template = if draw < mix.straight {
        MapTemplate::Straight {
            lanes: rng.random_range(2..=3),
            lane_width: 3.5,
        }
    } else if draw < mix.straight + mix.arc {
        MapTemplate::Arc {
            radius: rng.random_range(30.0..80.0),
            lanes: 2,
            lane_width: 3.5,
        }
    } else {
        MapTemplate::Crossing {
            lanes: 2,
            lane_width: 3.5,
        }
    };
    let lanes = template_lanes(&template)?;

    let meta = ScenarioMeta::standard();
    let total_frames = meta.total_frames();
    let dt = meta.dt_s;
    let idm = CarFollowing::default();

    // Spawn agents along lanes with safe initial gaps.
    let n_agents = rng.random_range(2..=8usize);
    let mut agents: Vec<SimAgent> = Vec::new();
    let mut per_lane_spawns: Vec<Vec<f64>> = vec![Vec::new(); lanes.len()];
    let duration_s = total_frames as f64 * dt;
    for ai in 0..n_agents {
        let lane = rng.random_range(0..lanes.len());
        let mut s = rng.random_range(5.0..lanes[lane].length() * 0.45);
        // Keep at least 18 m to anyone already on this lane.
        let mut tries = 0;
        while per_lane_spawns[lane].iter().any(|&o| (o - s).abs() < 18.0) && tries < 20 {
            s = rng.random_range(5.0..lanes[lane].length() * 0.45);
            tries += 1;
        }
        per_lane_spawns[lane].push(s);
        // Desired speed capped so the whole trajectory stays on the sampled
        // centerline extent.
        let v_cap = ((lanes[lane].length() - s - 6.0) / duration_s).max(3.0);
        let v_desired = rng.random_range(4.0..13.0f64.min(v_cap).max(4.5));
        // Straight-template scenarios stay strictly on their assigned
        // lanes (they are the clean car-following baseline); lane changes
        // come from the arc and crossing templates.
        let can_change = !matches!(template, MapTemplate::Straight { .. }) && {
            let group = lanes[lane].group;
            lanes
                .iter()
                .any(|l| l.group == group && l.index_in_group != lanes[lane].index_in_group)
        };
        let event_draw: f64 = rng.random();
        let event = if event_draw < 0.2 {
            Event::Stop {
                start: rng.random_range(2..7),
            }
        } else if event_draw < 0.45 && can_change {
            let dir: i64 = if rng.random::<bool>() { 1 } else { -1 };
            let group = lanes[lane].group;
            let idx = lanes[lane].index_in_group as i64;
            let target = lanes
                .iter()
                .position(|l| {
                    l.group == group
                        && (l.index_in_group as i64 == idx + dir
                            || l.index_in_group as i64 == idx - dir)
                })
                .unwrap_or(lane);
            Event::LaneChange {
                start: rng.random_range(2..6),
                duration: 6,
                target,
            }
        } else {
            Event::None
        };
        let spawn_frame = if ai > 0 && rng.random::<f64>() < 0.15 {
            rng.random_range(1..8)
        } else {
            0
        };
        agents.push(SimAgent {
            lane,
            s,
            v: v_desired * rng.random_range(0.7..1.0),
            v_desired,
            length: rng.random_range(4.0..5.2),
            width: rng.random_range(1.8..2.2),
            event,
            spawn_frame,
        });
    }

    // Simulate.
    let mut positions = vec![vec![[0.0f64; 2]; total_frames]; agents.len()];
    let mut lane_at = vec![vec![0usize; total_frames]; agents.len()];
    for frame in 0..total_frames {
        // Longitudinal update: leader = nearest agent ahead on the same lane.
        let snapshot: Vec<(usize, f64, f64, f64)> = agents
            .iter()
            .map(|a| (a.lane_now(frame), a.s, a.v, a.length))
            .collect();
        for (ai, agent) in agents.iter_mut().enumerate() {
            let v_desired = match agent.event {
                Event::Stop { start } if frame >= start => 0.0,
                _ => agent.v_desired,
            };
            let my_lane = agent.lane_now(frame);
            let leader = snapshot
                .iter()
                .enumerate()
                .filter(|&(oi, &(lane, s, _, _))| oi != ai && lane == my_lane && s > agent.s)
                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                .map(|(_, &(_, s, v, len))| {
                    let gap = s - agent.s - (len + agent.length) / 2.0;
                    (gap, agent.v - v)
                });
            let a = idm.accel(agent.v, v_desired, leader);
            agent.v = (agent.v + a * dt).max(0.0);
            agent.s += agent.v * dt;

            // Lateral blend between the spawn lane and the change target.
            let (target, frac) = agent.change_state(frame);
            let p_from = lanes[agent.lane].position(agent.s);
            let p_to = lanes[target].position(agent.s);
            // Cosine ease between lane centers.
            let w = 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
            positions[ai][frame] = [
                p_from[0] * (1.0 - w) + p_to[0] * w,
                p_from[1] * (1.0 - w) + p_to[1] * w,
            ];
            lane_at[ai][frame] = agent.lane_now(frame);
        }
    }

    // Emit records: heading and velocity from displacements.
    let mut agent_records = Vec::new();
    for (ai, agent) in agents.iter().enumerate() {
        let mut states: Vec<Option<AgentState>> = Vec::with_capacity(total_frames);
        let mut prev_heading = {
            let p0 = positions[ai][0];
            let p1 = positions[ai][1];
            (p1[1] - p0[1]).atan2(p1[0] - p0[0])
        };
        for frame in 0..total_frames {
            if frame < agent.spawn_frame {
                states.push(None);
                continue;
            }
            let p = positions[ai][frame];
            let (vx, vy) = if frame + 1 < total_frames {
                let q = positions[ai][frame + 1];
                ((q[0] - p[0]) / dt, (q[1] - p[1]) / dt)
            } else {
                let q = positions[ai][frame - 1];
                ((p[0] - q[0]) / dt, (p[1] - q[1]) / dt)
            };
            let speed = (vx * vx + vy * vy).sqrt();
            let heading = if speed > 0.05 {
                vy.atan2(vx)
            } else {
                prev_heading
            };
            prev_heading = heading;
            states.push(Some(AgentState {
                x: p[0],
                y: p[1],
                heading_rad: heading,
                vx,
                vy,
            }));
        }
        agent_records.push(AgentRecord {
            id: format!("a{ai}"),
            kind: "vehicle".into(),
            length_m: agent.length,
            width_m: agent.width,
            states,
        });
    }

    let lane_records = lanes
        .iter()
        .map(|l| LaneRecord {
            kind: l.kind,
            points: l.points.clone(),
        })
        .collect();

    let record = ScenarioRecord {
        meta,
        agents: agent_records,
        lanes: lane_records,
    };
    record.validate()?;
    Ok(record)
}
