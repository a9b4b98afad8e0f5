//! Goal-conditioned attack-scenario synthesis and the validity checklist
//! that filters the results.
//!
//! An attacker is drawn from the pool of agents near the ego vehicle, its
//! goal token is pinned to an ego future waypoint inside a sector along the
//! attacker's historical heading, and the scene is re-generated with the
//! trapezoidal schedule; the ego's own future is conditioned to its logged
//! trajectory so a reached goal guarantees contact. Candidates that fail
//! the checklist are retried until the pool is depleted.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::guidance::{boxes_overlap, GuidanceConfig, OrientedBox};
use crate::metrics::lane_distance;
use crate::record::ScenarioRecord;
use crate::scene::{chan, normalize, ChannelStats, SceneTensor};
use crate::scheduler::{build_schedule, init_scene, run, GoalSet, GuidanceRun, RunOptions, Strategy};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Candidate pool radius around the ego, meters.
    pub pool_radius: f64,
    /// Sector half-angle around the attacker's historical heading, radians.
    pub half_angle: f64,
    /// Sector radius = historical speed x horizon, seconds.
    pub horizon_s: f64,
    /// free : conditioned : attack scenario mix for batch generation.
    pub mix: [usize; 3],
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            pool_radius: 30.0,
            half_angle: std::f64::consts::FRAC_PI_6,
            horizon_s: 8.0,
            mix: [4, 4, 2],
        }
    }
}

/// Scenario-kind plan for a batch of `n` scenarios honoring the configured
/// mix within one scenario per category (largest-remainder rounding).
pub fn plan_mix(n: usize, mix: [usize; 3]) -> Vec<usize> {
    let total: usize = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|&m| n as f64 * m as f64 / total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap()
    });
    for &i in order.iter() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    let mut kinds = Vec::with_capacity(n);
    for (kind, &count) in counts.iter().enumerate() {
        kinds.extend(std::iter::repeat_n(kind, count));
    }
    kinds
}

fn agent_index(record: &ScenarioRecord, id: &str) -> Result<usize> {
    record
        .agents
        .iter()
        .position(|a| a.id == id)
        .ok_or_else(|| Error::invalid(format!("agent `{id}` not in record")))
}

/// Uniform random choice among non-ego agents within the pool radius of the
/// ego at the current frame, skipping `exclude`. None if the pool is empty.
pub fn select_attacker(
    record: &ScenarioRecord,
    ego_id: &str,
    spec: &AttackSpec,
    rng: &mut ChaCha8Rng,
    exclude: &BTreeSet<String>,
) -> Result<Option<String>> {
    let pool = attacker_pool(record, ego_id, spec)?;
    let pool: Vec<String> = pool.into_iter().filter(|id| !exclude.contains(id)).collect();
    if pool.is_empty() {
        return Ok(None);
    }
    let idx = rand::Rng::random_range(rng, 0..pool.len());
    Ok(Some(pool[idx].clone()))
}

/// All candidates within the pool radius at the current frame.
pub fn attacker_pool(
    record: &ScenarioRecord,
    ego_id: &str,
    spec: &AttackSpec,
) -> Result<Vec<String>> {
    let ego = agent_index(record, ego_id)?;
    let current = record.meta.conditioned_frames().saturating_sub(1);
    let Some(ego_state) = record.agents[ego].states[current] else {
        return Err(Error::invalid("ego has no state at the current frame"));
    };
    let mut pool = Vec::new();
    for agent in &record.agents {
        if agent.id == ego_id {
            continue;
        }
        if let Some(s) = agent.states[current] {
            let d = ((s.x - ego_state.x).powi(2) + (s.y - ego_state.y).powi(2)).sqrt();
            if d <= spec.pool_radius {
                pool.push(agent.id.clone());
            }
        }
    }
    Ok(pool)
}

/// Earliest ego future waypoint inside the attacker's heading sector, as
/// (frame, position). The sector apex sits at the attacker's current
/// position, its axis along the historical heading, radius = historical
/// speed x horizon. None when the sector is empty (including a
/// near-stationary attacker, whose radius collapses).
pub fn pick_attack_goal(
    record: &ScenarioRecord,
    attacker_id: &str,
    ego_id: &str,
    spec: &AttackSpec,
) -> Result<Option<(usize, [f64; 2])>> {
    let attacker = agent_index(record, attacker_id)?;
    let ego = agent_index(record, ego_id)?;
    let current = record.meta.conditioned_frames().saturating_sub(1);
    let states = &record.agents[attacker].states;
    let Some(now) = states[current] else {
        return Ok(None);
    };
    let first = (0..=current).find(|&t| states[t].is_some()).unwrap_or(current);
    let elapsed = (current - first) as f64 * record.meta.dt_s;
    let (speed, heading) = if elapsed > 0.0 {
        let p0 = states[first].unwrap();
        let dx = now.x - p0.x;
        let dy = now.y - p0.y;
        let dist = (dx * dx + dy * dy).sqrt();
        let speed = dist / elapsed;
        if speed > 0.1 {
            (speed, dy.atan2(dx))
        } else {
            // Heading from the nearest lane direction when the history
            // displacement is negligible.
            (speed, lane_heading_near(record, now.x, now.y).unwrap_or(now.heading_rad))
        }
    } else {
        (0.0, now.heading_rad)
    };
    let radius = speed * spec.horizon_s;
    if radius <= 0.1 {
        return Ok(None);
    }
    for t in record.meta.conditioned_frames()..record.meta.total_frames() {
        let Some(target) = record.agents[ego].states[t] else {
            continue;
        };
        let dx = target.x - now.x;
        let dy = target.y - now.y;
        let dist = (dx * dx + dy * dy).sqrt();
        if dist > radius || dist < 1e-9 {
            continue;
        }
        let angle = dy.atan2(dx);
        let mut diff = angle - heading;
        while diff > std::f64::consts::PI {
            diff -= std::f64::consts::TAU;
        }
        while diff < -std::f64::consts::PI {
            diff += std::f64::consts::TAU;
        }
        if diff.abs() <= spec.half_angle {
            return Ok(Some((t, [target.x, target.y])));
        }
    }
    Ok(None)
}

/// Local direction of the lane nearest to (x, y).
fn lane_heading_near(record: &ScenarioRecord, x: f64, y: f64) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for lane in &record.lanes {
        for w in lane.points.windows(2) {
            let mx = (w[0][0] + w[1][0]) / 2.0;
            let my = (w[0][1] + w[1][1]) / 2.0;
            let d = ((mx - x).powi(2) + (my - y).powi(2)).sqrt();
            let heading = (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, heading));
            }
        }
    }
    best.map(|(_, h)| h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChecklistRule {
    NoCollision,
    OffRoad,
    InPlaceUTurn,
    LateralShift,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistResult {
    pub passed: bool,
    pub failures: BTreeSet<ChecklistRule>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChecklistThresholds {
    /// Net heading change marking an in-place U-turn, degrees.
    pub u_turn_heading_deg: f64,
    /// Displacement below which the U-turn counts as in-place, meters.
    pub u_turn_displacement_m: f64,
    /// Lateral speed marking a physically implausible shift, m/s.
    pub lateral_speed: f64,
    /// Consecutive frames the lateral speed must persist.
    pub lateral_frames: usize,
    /// Off-road distance from the attacker's assigned centerline, meters.
    pub offroad_threshold: f64,
}

impl Default for ChecklistThresholds {
    fn default() -> Self {
        ChecklistThresholds {
            u_turn_heading_deg: 150.0,
            u_turn_displacement_m: 3.0,
            lateral_speed: 4.0,
            lateral_frames: 2,
            offroad_threshold: 2.0,
        }
    }
}

/// Validity filter over a generated attack scenario. Rules:
/// no_collision — attacker and ego boxes never overlap; off_road — the
/// attacker leaves its assigned centerline before first contact;
/// in_place_u_turn — net heading change beyond the threshold with almost no
/// displacement; lateral_shift — sustained lateral velocity no vehicle can
/// produce.
pub fn checklist(
    record: &ScenarioRecord,
    attacker_id: &str,
    ego_id: &str,
    thresholds: &ChecklistThresholds,
) -> Result<ChecklistResult> {
    let attacker = agent_index(record, attacker_id)?;
    let ego = agent_index(record, ego_id)?;
    let scene = record.to_scene()?;
    let map = record.to_map()?;
    let total = record.meta.total_frames();
    let mut failures = BTreeSet::new();

    // First attacker-ego contact, if any.
    let mut first_contact: Option<usize> = None;
    for t in 0..total {
        if scene.valid[[attacker, t]] && scene.valid[[ego, t]] {
            let ba = OrientedBox::from_token(&scene, attacker, t);
            let be = OrientedBox::from_token(&scene, ego, t);
            if boxes_overlap(&ba, &be) {
                first_contact = Some(t);
                break;
            }
        }
    }
    if first_contact.is_none() {
        failures.insert(ChecklistRule::NoCollision);
    }

    // Off-road before first contact, measured against the attacker's
    // assigned lane (nearest at its first valid frame).
    if let Some(first_valid) = (0..total).find(|&t| scene.valid[[attacker, t]]) {
        let x0 = scene.states[[attacker, first_valid, chan::X]];
        let y0 = scene.states[[attacker, first_valid, chan::Y]];
        if let Some((lane, _, _)) = map.nearest_point(x0, y0) {
            let horizon = first_contact.unwrap_or(total);
            for t in first_valid..horizon {
                if !scene.valid[[attacker, t]] {
                    continue;
                }
                let x = scene.states[[attacker, t, chan::X]];
                let y = scene.states[[attacker, t, chan::Y]];
                if lane_distance(&map, lane, x, y).is_none_or(|d| d > thresholds.offroad_threshold)
                {
                    failures.insert(ChecklistRule::OffRoad);
                    break;
                }
            }
        }
    }

    // Net heading change and displacement over the attacker's valid run.
    let valid_frames: Vec<usize> = (0..total).filter(|&t| scene.valid[[attacker, t]]).collect();
    if valid_frames.len() >= 2 {
        let mut net = 0.0;
        for w in valid_frames.windows(2) {
            let h0 = scene.states[[attacker, w[0], chan::SIN]]
                .atan2(scene.states[[attacker, w[0], chan::COS]]);
            let h1 = scene.states[[attacker, w[1], chan::SIN]]
                .atan2(scene.states[[attacker, w[1], chan::COS]]);
            let mut d = h1 - h0;
            while d > std::f64::consts::PI {
                d -= std::f64::consts::TAU;
            }
            while d < -std::f64::consts::PI {
                d += std::f64::consts::TAU;
            }
            net += d;
        }
        let first = *valid_frames.first().unwrap();
        let last = *valid_frames.last().unwrap();
        let disp = ((scene.states[[attacker, last, chan::X]]
            - scene.states[[attacker, first, chan::X]])
        .powi(2)
            + (scene.states[[attacker, last, chan::Y]]
                - scene.states[[attacker, first, chan::Y]])
            .powi(2))
        .sqrt();
        if net.abs().to_degrees() > thresholds.u_turn_heading_deg
            && disp < thresholds.u_turn_displacement_m
        {
            failures.insert(ChecklistRule::InPlaceUTurn);
        }

        // Sustained lateral velocity (perpendicular to heading).
        let mut streak = 0usize;
        for &t in &valid_frames {
            let sin = scene.states[[attacker, t, chan::SIN]];
            let cos = scene.states[[attacker, t, chan::COS]];
            let vx = scene.states[[attacker, t, chan::VX]];
            let vy = scene.states[[attacker, t, chan::VY]];
            let v_lat = -vx * sin + vy * cos;
            if v_lat.abs() > thresholds.lateral_speed {
                streak += 1;
                if streak >= thresholds.lateral_frames {
                    failures.insert(ChecklistRule::LateralShift);
                    break;
                }
            } else {
                streak = 0;
            }
        }
    }

    Ok(ChecklistResult {
        passed: failures.is_empty(),
        failures,
    })
}

pub enum AttackOutcome {
    /// A checklist-passing scenario, with the attacker that produced it.
    Success {
        record: ScenarioRecord,
        attacker_id: String,
        checklist: ChecklistResult,
    },
    /// Pool depleted without a passing scenario; the last rejected attempt
    /// is attached when one exists.
    Exhausted {
        last: Option<(ScenarioRecord, ChecklistResult)>,
    },
}

/// Synthesizes an attack scenario: pick an attacker from the pool, pin its
/// goal token to an ego waypoint, regenerate with the trapezoidal schedule
/// (ego future conditioned to the log so the contact is well-posed), then
/// filter with the checklist; iterate over the pool until success or
/// depletion.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_attack(
    record: &ScenarioRecord,
    denoiser: &dyn Denoiser,
    stats: &ChannelStats,
    grid: usize,
    ego_id: &str,
    spec: &AttackSpec,
    guidance: Option<&GuidanceConfig>,
    seed: u64,
) -> Result<AttackOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = attacker_pool(record, ego_id, spec)?;
    pool.shuffle(&mut rng);
    let ego = agent_index(record, ego_id)?;
    let thresholds = ChecklistThresholds::default();
    let mut last: Option<(ScenarioRecord, ChecklistResult)> = None;

    for attacker_id in pool {
        let attacker = agent_index(record, &attacker_id)?;
        let Some((goal_frame, goal_pos)) =
            pick_attack_goal(record, &attacker_id, ego_id, spec)?
        else {
            continue;
        };

        // Conditioned tokens: ego future (log replay) + the attacker goal.
        let mut goals = GoalSet::new();
        goals.insert((attacker, goal_frame));
        for t in record.meta.conditioned_frames()..record.meta.total_frames() {
            if record.agents[ego].states[t].is_some() {
                goals.insert((ego, t));
            }
        }

        // The goal token state: the ego waypoint position, approached along
        // the line from the attacker's current position, at the implied speed.
        let mut gt_scene = record.to_scene()?;
        let current = record.meta.conditioned_frames() - 1;
        let now = record.agents[attacker].states[current]
            .ok_or_else(|| Error::invalid("attacker missing at current frame"))?;
        let dx = goal_pos[0] - now.x;
        let dy = goal_pos[1] - now.y;
        let dist = (dx * dx + dy * dy).sqrt().max(1e-6);
        let travel_time = (goal_frame - current) as f64 * record.meta.dt_s;
        let speed = dist / travel_time.max(record.meta.dt_s);
        gt_scene.states[[attacker, goal_frame, chan::X]] = goal_pos[0];
        gt_scene.states[[attacker, goal_frame, chan::Y]] = goal_pos[1];
        gt_scene.states[[attacker, goal_frame, chan::SIN]] = dy / dist;
        gt_scene.states[[attacker, goal_frame, chan::COS]] = dx / dist;
        gt_scene.states[[attacker, goal_frame, chan::VX]] = speed * dx / dist;
        gt_scene.states[[attacker, goal_frame, chan::VY]] = speed * dy / dist;
        gt_scene.valid[[attacker, goal_frame]] = true;

        let layout = crate::scheduler::FrameLayout {
            agents: record.agents.len(),
            conditioned: record.meta.conditioned_frames(),
            generated: record.meta.future_frames,
        };
        let schedule = build_schedule(Strategy::Trapezoidal, layout, grid, &goals)?;
        let gt_norm = normalize(&gt_scene, stats)?;
        let init = init_scene(&gt_norm, &schedule, seed ^ 0x9c0f)?;
        let map = record.to_map()?;

        let exempt_config;
        let opts = match guidance {
            Some(config) => {
                let mut cfg = config.clone();
                cfg.collision_exempt.push((attacker, ego));
                exempt_config = cfg;
                RunOptions {
                    guidance: Some(GuidanceRun {
                        config: &exempt_config,
                        stats,
                    }),
                }
            }
            None => RunOptions::default(),
        };
        let out = run(&schedule, denoiser, &init, &map, &[], &opts)?;
        let final_scene = crate::scene::denormalize(&out.scene, stats)?;
        let candidate = restore_validity(record, &final_scene)?;
        let result = checklist(&candidate, &attacker_id, ego_id, &thresholds)?;
        if result.passed {
            return Ok(AttackOutcome::Success {
                record: candidate,
                attacker_id,
                checklist: result,
            });
        }
        last = Some((candidate, result));
    }
    Ok(AttackOutcome::Exhausted { last })
}

/// Rebuilds a record from a generated scene, keeping the base record's
/// validity pattern (generation may have densified the attacker's goal
/// frame, which stays).
fn restore_validity(base: &ScenarioRecord, scene: &SceneTensor) -> Result<ScenarioRecord> {
    base.with_scene(scene)
}

/// One full batch honoring the free : conditioned : attack mix.
pub fn mixed_kind_name(kind: usize) -> &'static str {
    match kind {
        0 => "free",
        1 => "conditioned",
        _ => "attack",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{AgentRecord, AgentState, LaneRecord, ScenarioMeta};
    use crate::scene::LaneKind;

    fn base_record(agent_tracks: Vec<Vec<[f64; 2]>>) -> ScenarioRecord {
        let meta = ScenarioMeta::standard();
        let total = meta.total_frames();
        let agents = agent_tracks
            .into_iter()
            .enumerate()
            .map(|(i, track)| {
                assert_eq!(track.len(), total);
                let states = (0..total)
                    .map(|t| {
                        let p = track[t];
                        let q = track[(t + 1).min(total - 1)];
                        let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                        let heading = if dx.abs() + dy.abs() > 1e-9 {
                            dy.atan2(dx)
                        } else {
                            0.0
                        };
                        Some(AgentState {
                            x: p[0],
                            y: p[1],
                            heading_rad: heading,
                            vx: dx / meta.dt_s,
                            vy: dy / meta.dt_s,
                        })
                    })
                    .collect();
                AgentRecord {
                    id: format!("a{i}"),
                    kind: "vehicle".into(),
                    length_m: 4.5,
                    width_m: 2.0,
                    states,
                }
            })
            .collect();
        ScenarioRecord {
            meta,
            agents,
            lanes: vec![LaneRecord {
                kind: LaneKind::Driving,
                points: (0..60).map(|i| [i as f64 * 2.0 - 20.0, 0.0]).collect(),
            }],
        }
    }

    fn straight_track(start: [f64; 2], v: [f64; 2], frames: usize, dt: f64) -> Vec<[f64; 2]> {
        (0..frames)
            .map(|t| [start[0] + v[0] * t as f64 * dt, start[1] + v[1] * t as f64 * dt])
            .collect()
    }

    #[test]
    fn single_neighbor_selected() {
        let r = base_record(vec![
            straight_track([0.0, 0.0], [5.0, 0.0], 21, 0.5),
            straight_track([10.0, 2.0], [5.0, 0.0], 21, 0.5),
        ]);
        let spec = AttackSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pick = select_attacker(&r, "a0", &spec, &mut rng, &BTreeSet::new()).unwrap();
        assert_eq!(pick.as_deref(), Some("a1"));
    }

    #[test]
    fn empty_pool_yields_none() {
        let r = base_record(vec![
            straight_track([0.0, 0.0], [5.0, 0.0], 21, 0.5),
            straight_track([500.0, 2.0], [5.0, 0.0], 21, 0.5),
        ]);
        let spec = AttackSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pick = select_attacker(&r, "a0", &spec, &mut rng, &BTreeSet::new()).unwrap();
        assert!(pick.is_none());
    }

    #[test]
    fn exclusion_visits_each_pool_member_once() {
        let tracks = vec![
            straight_track([0.0, 0.0], [5.0, 0.0], 21, 0.5),
            straight_track([8.0, 2.0], [5.0, 0.0], 21, 0.5),
            straight_track([-8.0, -2.0], [5.0, 0.0], 21, 0.5),
            straight_track([12.0, -3.0], [5.0, 0.0], 21, 0.5),
        ];
        let r = base_record(tracks);
        let spec = AttackSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen = BTreeSet::new();
        while let Some(pick) = select_attacker(&r, "a0", &spec, &mut rng, &seen).unwrap() {
            assert!(seen.insert(pick), "candidate repeated before depletion");
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn goal_ahead_in_sector_is_found() {
        // Attacker behind the ego, driving the same direction: the ego's
        // future waypoints lie inside the attacker's forward sector.
        let r = base_record(vec![
            straight_track([0.0, 0.0], [6.0, 0.0], 21, 0.5),
            straight_track([-12.0, 1.0], [6.0, 0.0], 21, 0.5),
        ]);
        let spec = AttackSpec::default();
        let goal = pick_attack_goal(&r, "a1", "a0", &spec).unwrap();
        let (frame, pos) = goal.expect("in-sector waypoint expected");
        assert!(frame >= r.meta.conditioned_frames());
        // earliest in-sector ego waypoint
        let ego_state = r.agents[0].states[frame].unwrap();
        assert_eq!(pos, [ego_state.x, ego_state.y]);
    }

    #[test]
    fn ego_behind_attacker_yields_none() {
        let r = base_record(vec![
            straight_track([30.0, 0.0], [4.0, 0.0], 21, 0.5), // ego, slower
            straight_track([60.0, 0.0], [6.0, 0.0], 21, 0.5), // attacker ahead of it
        ]);
        let spec = AttackSpec::default();
        // Ego waypoints are behind the attacker's heading sector.
        let goal = pick_attack_goal(&r, "a1", "a0", &spec).unwrap();
        assert!(goal.is_none());
    }

    #[test]
    fn stationary_attacker_yields_none() {
        let r = base_record(vec![
            straight_track([0.0, 0.0], [6.0, 0.0], 21, 0.5),
            straight_track([5.0, 2.0], [0.0, 0.0], 21, 0.5),
        ]);
        let spec = AttackSpec::default();
        assert!(pick_attack_goal(&r, "a1", "a0", &spec).unwrap().is_none());
    }

    #[test]
    fn checklist_flags_collision_free_record() {
        let r = base_record(vec![
            straight_track([0.0, 0.0], [6.0, 0.0], 21, 0.5),
            straight_track([0.0, 30.0], [6.0, 0.0], 21, 0.5),
        ]);
        let result = checklist(&r, "a1", "a0", &ChecklistThresholds::default()).unwrap();
        assert!(!result.passed);
        assert!(result.failures.contains(&ChecklistRule::NoCollision));
    }

    #[test]
    fn checklist_passes_clean_tbone() {
        // Attacker crosses the ego's path and makes contact mid-window
        // while staying near the vertical lane through x = 10.
        let meta = ScenarioMeta::standard();
        let total = meta.total_frames();
        let dt = meta.dt_s;
        let ego = straight_track([0.0, 0.0], [4.0, 0.0], total, dt);
        // Attacker crosses from the side, reaching y = 0 exactly when the
        // ego reaches x = 10 (frame 5).
        let attacker = straight_track([10.0, -10.0], [0.0, 4.0], total, dt);
        let mut r = base_record(vec![ego, attacker]);
        r.lanes.push(LaneRecord {
            kind: LaneKind::Driving,
            points: (0..40).map(|i| [10.0, i as f64 * 2.0 - 30.0]).collect(),
        });
        let result = checklist(&r, "a1", "a0", &ChecklistThresholds::default()).unwrap();
        assert!(result.passed, "failures: {:?}", result.failures);
    }

    #[test]
    fn checklist_flags_in_place_u_turn() {
        let meta = ScenarioMeta::standard();
        let total = meta.total_frames();
        // Attacker barely moves but its heading sweeps 180 degrees; it also
        // touches the ego so the collision rule is satisfied.
        let ego = straight_track([0.0, 0.0], [0.1, 0.0], total, meta.dt_s);
        let attacker = straight_track([1.0, 0.5], [0.05, 0.0], total, meta.dt_s);
        let mut r = base_record(vec![ego, attacker]);
        for (t, s) in r.agents[1].states.iter_mut().enumerate() {
            if let Some(state) = s {
                state.heading_rad = std::f64::consts::PI * t as f64 / (total - 1) as f64;
            }
        }
        let result = checklist(&r, "a1", "a0", &ChecklistThresholds::default()).unwrap();
        assert!(result.failures.contains(&ChecklistRule::InPlaceUTurn));
    }

    #[test]
    fn checklist_flags_sustained_lateral_shift() {
        let meta = ScenarioMeta::standard();
        let total = meta.total_frames();
        let ego = straight_track([0.0, 0.0], [4.0, 0.0], total, meta.dt_s);
        // Attacker overlaps the ego (so no_collision passes) but claims a
        // sustained 6 m/s sideways velocity.
        let attacker = straight_track([0.5, 0.5], [4.0, 0.0], total, meta.dt_s);
        let mut r = base_record(vec![ego, attacker]);
        for s in r.agents[1].states.iter_mut().flatten() {
            s.heading_rad = 0.0;
            s.vx = 4.0;
            s.vy = 6.0; // perpendicular to heading
        }
        let result = checklist(&r, "a1", "a0", &ChecklistThresholds::default()).unwrap();
        assert!(result.failures.contains(&ChecklistRule::LateralShift));
    }

    #[test]
    fn mix_plan_matches_ratio_within_one() {
        fn count_of(kinds: &[usize], k: usize) -> usize {
            kinds.iter().filter(|&&x| x == k).count()
        }
        let kinds = plan_mix(100, [4, 4, 2]);
        assert_eq!(count_of(&kinds, 0), 40);
        assert_eq!(count_of(&kinds, 1), 40);
        assert_eq!(count_of(&kinds, 2), 20);
        let kinds = plan_mix(53, [4, 4, 2]);
        assert_eq!(kinds.len(), 53);
        let exact = [53.0 * 0.4, 53.0 * 0.4, 53.0 * 0.2];
        for k in 0..3 {
            assert!((count_of(&kinds, k) as f64 - exact[k]).abs() <= 1.0);
        }
    }
}
