//! Scenario-quality metrics: average displacement error, off-road rate,
//! collision rate, and kinematic instability, plus the per-run report
//! object the CLI serializes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::guidance::{boxes_overlap, OrientedBox};
use crate::scene::{chan, MapSet, SceneTensor};

/// Lateral distance beyond which a vehicle counts as off its assigned
/// centerline.
pub const DEFAULT_LATERAL_THRESHOLD: f64 = 2.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean displacement error in meters over free (unconditioned) tokens.
    pub ade: Option<f64>,
    /// Off-road rate in percent of valid vehicles.
    pub r_road: Option<f64>,
    /// Collision rate in percent of valid vehicles.
    pub r_col: Option<f64>,
    /// Composite kinematic instability (plain average of the four
    /// acceleration/jerk magnitudes).
    pub m_k: Option<f64>,
    /// Sampling steps spent producing the scenario.
    pub steps: usize,
    /// Reaction latency in steps (schedule-dependent).
    pub react_steps: usize,
}

impl MetricReport {
    /// Plain mean over scenarios; absent fields are skipped per metric.
    pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
        fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
            let vals: Vec<f64> = values.flatten().collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        }
        let steps = if reports.is_empty() {
            0
        } else {
            reports.iter().map(|r| r.steps).sum::<usize>() / reports.len()
        };
        let react = if reports.is_empty() {
            0
        } else {
            reports.iter().map(|r| r.react_steps).sum::<usize>() / reports.len()
        };
        MetricReport {
            ade: mean_of(reports.iter().map(|r| r.ade)),
            r_road: mean_of(reports.iter().map(|r| r.r_road)),
            r_col: mean_of(reports.iter().map(|r| r.r_col)),
            m_k: mean_of(reports.iter().map(|r| r.m_k)),
            steps,
            react_steps: react,
        }
    }
}

/// Mean Euclidean position error over tokens valid in both scenes and not
/// conditioned. Returns None when no token qualifies.
pub fn ade(gen: &SceneTensor, gt: &SceneTensor, conditioned: &Array2<bool>) -> Option<f64> {
    let (a, t) = gen.valid.dim();
    if gt.valid.dim() != (a, t) || conditioned.dim() != (a, t) {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ai in 0..a {
        for ti in 0..t {
            if !(gen.valid[[ai, ti]] && gt.valid[[ai, ti]]) || conditioned[[ai, ti]] {
                continue;
            }
            let dx = gen.states[[ai, ti, chan::X]] - gt.states[[ai, ti, chan::X]];
            let dy = gen.states[[ai, ti, chan::Y]] - gt.states[[ai, ti, chan::Y]];
            sum += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// A vehicle is off-road if, at any valid timestep, its center strays
/// farther than `threshold` from the nearest point of its assigned
/// centerline; assignment is the nearest lane at the vehicle's first valid
/// frame. Rate in percent of valid vehicles; None with an empty map or no
/// valid vehicles.
pub fn offroad_rate(scene: &SceneTensor, map: &MapSet, threshold: f64) -> Option<f64> {
    if map.is_empty() {
        return None;
    }
    let (a, t) = scene.valid.dim();
    let mut vehicles = 0usize;
    let mut offenders = 0usize;
    for ai in 0..a {
        let Some(first) = (0..t).find(|&ti| scene.valid[[ai, ti]]) else {
            continue;
        };
        vehicles += 1;
        let x0 = scene.states[[ai, first, chan::X]];
        let y0 = scene.states[[ai, first, chan::Y]];
        let Some((lane, _, _)) = map.nearest_point(x0, y0) else {
            continue;
        };
        let off = (first..t).any(|ti| {
            if !scene.valid[[ai, ti]] {
                return false;
            }
            let x = scene.states[[ai, ti, chan::X]];
            let y = scene.states[[ai, ti, chan::Y]];
            lane_distance(map, lane, x, y).is_none_or(|d| d > threshold)
        });
        if off {
            offenders += 1;
        }
    }
    if vehicles == 0 {
        None
    } else {
        Some(100.0 * offenders as f64 / vehicles as f64)
    }
}

/// Distance from (x, y) to the nearest valid point of one lane.
pub fn lane_distance(map: &MapSet, lane: usize, x: f64, y: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    for n in 0..map.points_per_lane() {
        if !map.valid[[lane, n]] {
            continue;
        }
        let dx = map.lanes[[lane, n, 0]] - x;
        let dy = map.lanes[[lane, n, 1]] - y;
        let d = (dx * dx + dy * dy).sqrt();
        if best.is_none_or(|b| d < b) {
            best = Some(d);
        }
    }
    best
}

/// A vehicle counts once if its box overlaps any other vehicle's box at any
/// timestep where both are valid. Rate in percent of valid vehicles.
pub fn collision_rate(scene: &SceneTensor) -> Option<f64> {
    let (a, t) = scene.valid.dim();
    let mut valid_vehicle = vec![false; a];
    let mut collided = vec![false; a];
    for ai in 0..a {
        valid_vehicle[ai] = (0..t).any(|ti| scene.valid[[ai, ti]]);
    }
    for ti in 0..t {
        let boxes: Vec<Option<OrientedBox>> = (0..a)
            .map(|ai| scene.valid[[ai, ti]].then(|| OrientedBox::from_token(scene, ai, ti)))
            .collect();
        for i in 0..a {
            let Some(bi) = &boxes[i] else { continue };
            for j in (i + 1)..a {
                let Some(bj) = &boxes[j] else { continue };
                if boxes_overlap(bi, bj) {
                    collided[i] = true;
                    collided[j] = true;
                }
            }
        }
    }
    let vehicles = valid_vehicle.iter().filter(|v| **v).count();
    if vehicles == 0 {
        return None;
    }
    let offenders = collided.iter().filter(|c| **c).count();
    Some(100.0 * offenders as f64 / vehicles as f64)
}

/// Per-frame kinematic quantities for one maximal run of valid frames.
#[derive(Clone, Debug)]
pub struct KinematicProfile {
    /// Signed acceleration along the heading, per frame of the run.
    pub a_tan: Vec<f64>,
    /// Signed acceleration perpendicular to the heading.
    pub a_norm: Vec<f64>,
    /// Backward-difference jerk of each component (first frame has none).
    pub j_tan: Vec<f64>,
    pub j_norm: Vec<f64>,
}

/// Finite-difference kinematics of one agent over a maximal valid run
/// `[start, end)`. Acceleration uses the central second difference at
/// interior frames and one-sided stencils at the run ends; jerk is the
/// backward difference of consecutive acceleration samples, so a unit
/// acceleration step shows up as a single spike of `1/dt`.
pub fn kinematic_profile(
    scene: &SceneTensor,
    agent: usize,
    start: usize,
    end: usize,
    dt: f64,
) -> Option<KinematicProfile> {
    let n = end.saturating_sub(start);
    if n < 4 {
        return None;
    }
    let p = |ti: usize, c: usize| scene.states[[agent, start + ti, c]];
    let accel = |i: usize| -> (f64, f64) {
        if i == 0 {
            (
                (p(2, chan::X) - 2.0 * p(1, chan::X) + p(0, chan::X)) / (dt * dt),
                (p(2, chan::Y) - 2.0 * p(1, chan::Y) + p(0, chan::Y)) / (dt * dt),
            )
        } else if i == n - 1 {
            (
                (p(n - 1, chan::X) - 2.0 * p(n - 2, chan::X) + p(n - 3, chan::X)) / (dt * dt),
                (p(n - 1, chan::Y) - 2.0 * p(n - 2, chan::Y) + p(n - 3, chan::Y)) / (dt * dt),
            )
        } else {
            (
                (p(i + 1, chan::X) - 2.0 * p(i, chan::X) + p(i - 1, chan::X)) / (dt * dt),
                (p(i + 1, chan::Y) - 2.0 * p(i, chan::Y) + p(i - 1, chan::Y)) / (dt * dt),
            )
        }
    };
    let mut a_tan = Vec::with_capacity(n);
    let mut a_norm = Vec::with_capacity(n);
    for i in 0..n {
        let (ax, ay) = accel(i);
        let sin = p(i, chan::SIN);
        let cos = p(i, chan::COS);
        let norm = (sin * sin + cos * cos).sqrt().max(1e-9);
        let (hx, hy) = (cos / norm, sin / norm);
        a_tan.push(ax * hx + ay * hy);
        a_norm.push(-ax * hy + ay * hx);
    }
    let j_tan = (1..n).map(|i| (a_tan[i] - a_tan[i - 1]) / dt).collect();
    let j_norm = (1..n).map(|i| (a_norm[i] - a_norm[i - 1]) / dt).collect();
    Some(KinematicProfile {
        a_tan,
        a_norm,
        j_tan,
        j_norm,
    })
}

fn valid_runs(scene: &SceneTensor, agent: usize) -> Vec<(usize, usize)> {
    let t = scene.frames();
    let mut runs = Vec::new();
    let mut start = None;
    for ti in 0..=t {
        let v = ti < t && scene.valid[[agent, ti]];
        match (start, v) {
            (None, true) => start = Some(ti),
            (Some(s), false) => {
                runs.push((s, ti));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Composite instability: the plain average of mean |tangential accel|,
/// mean |normal accel|, mean |tangential jerk|, mean |normal jerk| over all
/// agents' valid runs of at least 4 frames. None if nothing qualifies.
pub fn instability(scene: &SceneTensor, dt: f64) -> Option<f64> {
    let mut at = Vec::new();
    let mut an = Vec::new();
    let mut jt = Vec::new();
    let mut jn = Vec::new();
    for agent in 0..scene.agents() {
        for (s, e) in valid_runs(scene, agent) {
            if let Some(prof) = kinematic_profile(scene, agent, s, e, dt) {
                at.extend(prof.a_tan.iter().map(|v| v.abs()));
                an.extend(prof.a_norm.iter().map(|v| v.abs()));
                jt.extend(prof.j_tan.iter().map(|v| v.abs()));
                jn.extend(prof.j_norm.iter().map(|v| v.abs()));
            }
        }
    }
    if at.is_empty() || jt.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((mean(&at) + mean(&an) + mean(&jt) + mean(&jn)) / 4.0)
}

/// Full report over one scenario (no GT comparison; ADE is left absent).
pub fn evaluate_scene(scene: &SceneTensor, map: &MapSet, dt: f64) -> MetricReport {
    MetricReport {
        ade: None,
        r_road: offroad_rate(scene, map, DEFAULT_LATERAL_THRESHOLD),
        r_col: collision_rate(scene),
        m_k: instability(scene, dt),
        steps: 0,
        react_steps: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn straight_scene(agents: usize, frames: usize, speed: f64, dt: f64) -> SceneTensor {
        let mut scene = SceneTensor::zeros(agents, frames);
        scene.valid.fill(true);
        for a in 0..agents {
            for t in 0..frames {
                scene.states[[a, t, chan::X]] = speed * t as f64 * dt;
                scene.states[[a, t, chan::Y]] = a as f64 * 4.0;
                scene.states[[a, t, chan::COS]] = 1.0;
                scene.states[[a, t, chan::VX]] = speed;
                scene.states[[a, t, chan::LEN]] = 4.5;
                scene.states[[a, t, chan::WID]] = 2.0;
            }
        }
        scene
    }

    #[test]
    fn ade_zero_for_identical_scenes() {
        let s = straight_scene(2, 6, 5.0, 0.5);
        let cond = Array2::from_elem((2, 6), false);
        assert_eq!(ade(&s, &s, &cond), Some(0.0));
    }

    #[test]
    fn ade_single_offset_token() {
        let gt = straight_scene(1, 5, 5.0, 0.5);
        let mut gen = gt.clone();
        gen.states[[0, 2, chan::X]] += 3.0;
        gen.states[[0, 2, chan::Y]] += 4.0;
        let mut cond = Array2::from_elem((1, 5), true);
        cond[[0, 2]] = false;
        assert!((ade(&gen, &gt, &cond).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ade_excludes_goal_tokens() {
        let gt = straight_scene(1, 5, 5.0, 0.5);
        let mut gen = gt.clone();
        gen.states[[0, 4, chan::X]] += 100.0;
        let mut cond = Array2::from_elem((1, 5), false);
        cond[[0, 4]] = true; // goal
        assert_eq!(ade(&gen, &gt, &cond), Some(0.0));
    }

    #[test]
    fn ade_swap_symmetric() {
        let gt = straight_scene(1, 5, 5.0, 0.5);
        let mut gen = gt.clone();
        gen.states[[0, 1, chan::X]] += 2.0;
        let cond = Array2::from_elem((1, 5), false);
        assert_eq!(ade(&gen, &gt, &cond), ade(&gt, &gen, &cond));
    }

    fn straight_map(y: f64) -> MapSet {
        let mut lanes = Array3::zeros((1, 30, 3));
        let valid = Array2::from_elem((1, 30), true);
        for n in 0..30 {
            lanes[[0, n, 0]] = n as f64 * 2.0 - 10.0;
            lanes[[0, n, 1]] = y;
        }
        MapSet { lanes, valid }
    }

    #[test]
    fn offroad_counts_any_timestep_departure() {
        let mut scene = straight_scene(4, 6, 5.0, 0.5);
        for a in 0..4 {
            for t in 0..6 {
                scene.states[[a, t, chan::Y]] = 0.0;
            }
        }
        // agent 2 departs 5 m laterally at a single frame: still counts
        scene.states[[2, 3, chan::Y]] = 5.0;
        let map = straight_map(0.0);
        let rate = offroad_rate(&scene, &map, 2.0).unwrap();
        assert!((rate - 25.0).abs() < 1e-12);
    }

    #[test]
    fn offroad_zero_when_glued_to_lane() {
        let mut scene = straight_scene(3, 6, 5.0, 0.5);
        for a in 0..3 {
            for t in 0..6 {
                scene.states[[a, t, chan::Y]] = 0.5;
            }
        }
        let map = straight_map(0.0);
        assert_eq!(offroad_rate(&scene, &map, 2.0), Some(0.0));
    }

    #[test]
    fn collision_rate_counts_vehicles_not_pairs() {
        // two overlapping among four -> 50 %
        let mut scene = straight_scene(4, 1, 0.0, 0.5);
        for a in 0..4 {
            scene.states[[a, 0, chan::Y]] = a as f64 * 20.0;
        }
        scene.states[[1, 0, chan::Y]] = scene.states[[0, 0, chan::Y]] + 1.0;
        assert!((collision_rate(&scene).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn collision_rate_three_way_pileup() {
        let mut scene = straight_scene(4, 1, 0.0, 0.5);
        for a in 0..4 {
            scene.states[[a, 0, chan::Y]] = a as f64 * 30.0;
        }
        // agents 0, 1, 2 pile up; agent 3 stays clear
        scene.states[[0, 0, chan::Y]] = 0.0;
        scene.states[[1, 0, chan::Y]] = 1.0;
        scene.states[[2, 0, chan::Y]] = 2.0;
        assert!((collision_rate(&scene).unwrap() - 75.0).abs() < 1e-12);
    }

    #[test]
    fn collision_rate_zero_when_separated() {
        let mut scene = straight_scene(3, 2, 5.0, 0.5);
        for a in 0..3 {
            for t in 0..2 {
                scene.states[[a, t, chan::Y]] = a as f64 * 50.0;
            }
        }
        assert_eq!(collision_rate(&scene), Some(0.0));
    }

    #[test]
    fn instability_zero_for_constant_velocity() {
        let scene = straight_scene(2, 8, 7.0, 0.5);
        let m = instability(&scene, 0.5).unwrap();
        assert!(m.abs() < 1e-9, "instability {m}");
    }

    #[test]
    fn instability_circular_motion_matches_analytics() {
        // Normal acceleration v^2/R, everything else ~ 0, so the composite
        // is ~ v^2/(4R); tolerance 2 %.
        let dt = 0.5;
        let r = 50.0;
        let v = 5.0;
        let omega = v / r;
        let frames = 21;
        let mut scene = SceneTensor::zeros(1, frames);
        scene.valid.fill(true);
        for t in 0..frames {
            let theta = omega * dt * t as f64;
            scene.states[[0, t, chan::X]] = r * theta.cos();
            scene.states[[0, t, chan::Y]] = r * theta.sin();
            // heading is the tangent direction
            let hx = -theta.sin();
            let hy = theta.cos();
            scene.states[[0, t, chan::SIN]] = hy;
            scene.states[[0, t, chan::COS]] = hx;
            scene.states[[0, t, chan::VX]] = v * hx;
            scene.states[[0, t, chan::VY]] = v * hy;
            scene.states[[0, t, chan::LEN]] = 4.5;
            scene.states[[0, t, chan::WID]] = 2.0;
        }
        let m = instability(&scene, dt).unwrap();
        let want = v * v / (4.0 * r);
        assert!(
            (m - want).abs() / want < 0.02,
            "composite {m} vs analytic {want}"
        );
    }

    #[test]
    fn instability_jerk_spike_at_acceleration_step() {
        // Constant velocity, then constant unit acceleration switched on so
        // the centered second difference steps cleanly 0 -> 1. The backward
        // jerk then spikes to 1/dt = 2 at the change frame, once.
        let dt = 0.5;
        let frames = 12;
        let c = 6;
        let v = 4.0;
        let mut scene = SceneTensor::zeros(1, frames);
        scene.valid.fill(true);
        let mut prev2 = 0.0;
        let mut prev1 = v * dt;
        for t in 0..frames {
            let x = match t {
                0 => 0.0,
                1 => prev1,
                _ => {
                    // Building p_t with accel a makes the centered second
                    // difference at frame t-1 equal a, so switch on at c+1
                    // to place the step at frame c.
                    let accel = if t <= c { 0.0 } else { 1.0 };
                    let x = 2.0 * prev1 - prev2 + accel * dt * dt;
                    prev2 = prev1;
                    prev1 = x;
                    x
                }
            };
            scene.states[[0, t, chan::X]] = x;
            scene.states[[0, t, chan::COS]] = 1.0;
            scene.states[[0, t, chan::LEN]] = 4.5;
            scene.states[[0, t, chan::WID]] = 2.0;
        }
        let prof = kinematic_profile(&scene, 0, 0, frames, dt).unwrap();
        assert!(prof.a_tan[c - 1].abs() < 1e-9);
        assert!((prof.a_tan[c] - 1.0).abs() < 1e-9);
        // j_tan[i - 1] is the backward difference at frame i
        let j_at_c = prof.j_tan[c - 1];
        assert!((j_at_c - 2.0).abs() < 1e-9, "jerk spike {j_at_c}");
        let spikes = prof.j_tan.iter().filter(|j| j.abs() > 1e-9).count();
        assert_eq!(spikes, 1);
    }

    #[test]
    fn short_trajectories_excluded() {
        let scene = straight_scene(1, 3, 5.0, 0.5);
        assert!(instability(&scene, 0.5).is_none());
    }

    #[test]
    fn rigid_transform_invariance() {
        let dt = 0.5;
        let mut scene = straight_scene(3, 8, 6.0, dt);
        // bend one trajectory so the metrics are non-trivial
        for t in 0..8 {
            scene.states[[1, t, chan::Y]] += 0.05 * (t as f64).powi(2);
        }
        let map = straight_map(0.0);
        let base_road = offroad_rate(&scene, &map, 2.0).unwrap();
        let base_col = collision_rate(&scene).unwrap();
        let base_mk = instability(&scene, dt).unwrap();

        let angle = 0.7f64;
        let (s, c) = angle.sin_cos();
        let (tx, ty) = (13.0, -4.0);
        let mut rot = scene.clone();
        for a in 0..3 {
            for t in 0..8 {
                let x = scene.states[[a, t, chan::X]];
                let y = scene.states[[a, t, chan::Y]];
                rot.states[[a, t, chan::X]] = c * x - s * y + tx;
                rot.states[[a, t, chan::Y]] = s * x + c * y + ty;
                let hs = scene.states[[a, t, chan::SIN]];
                let hc = scene.states[[a, t, chan::COS]];
                rot.states[[a, t, chan::SIN]] = s * hc + c * hs;
                rot.states[[a, t, chan::COS]] = c * hc - s * hs;
                let vx = scene.states[[a, t, chan::VX]];
                let vy = scene.states[[a, t, chan::VY]];
                rot.states[[a, t, chan::VX]] = c * vx - s * vy;
                rot.states[[a, t, chan::VY]] = s * vx + c * vy;
            }
        }
        let mut rot_map = map.clone();
        for n in 0..map.points_per_lane() {
            let x = map.lanes[[0, n, 0]];
            let y = map.lanes[[0, n, 1]];
            rot_map.lanes[[0, n, 0]] = c * x - s * y + tx;
            rot_map.lanes[[0, n, 1]] = s * x + c * y + ty;
        }
        assert_eq!(offroad_rate(&rot, &rot_map, 2.0).unwrap(), base_road);
        assert_eq!(collision_rate(&rot).unwrap(), base_col);
        assert!((instability(&rot, dt).unwrap() - base_mk).abs() < 1e-9);
    }
}
