//! Rule-based behavior labeling for corpus statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::record::ScenarioRecord;
use crate::scene::{chan, MapSet, SceneTensor};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Stop,
    UTurn,
    LeftTurn,
    RightTurn,
    LeftLaneChange,
    RightLaneChange,
    IntersectionPassing,
    Forward,
}

/// Percentages over agents, one exclusive label per agent (priority: stop,
/// U-turn, turns, lane changes, intersection passing, forward).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub percentages: BTreeMap<Behavior, f64>,
    pub agents: usize,
}

struct Rules {
    turn_min_deg: f64,
    turn_max_deg: f64,
    lane_change_heading_deg: f64,
    lane_width: f64,
    stop_speed: f64,
    intersection_radius: f64,
}

impl Default for Rules {
    fn default() -> Self {
        Rules {
            turn_min_deg: 60.0,
            turn_max_deg: 135.0,
            lane_change_heading_deg: 30.0,
            lane_width: 3.5,
            stop_speed: 0.5,
            intersection_radius: 6.0,
        }
    }
}

/// Geometric crossing points between lanes whose directions differ by more
/// than 45 degrees.
fn crossing_points(map: &MapSet) -> Vec<[f64; 2]> {
    let mut segments: Vec<(usize, [f64; 2], [f64; 2])> = Vec::new();
    for l in 0..map.num_lanes() {
        for n in 1..map.points_per_lane() {
            if map.valid[[l, n - 1]] && map.valid[[l, n]] {
                segments.push((
                    l,
                    [map.lanes[[l, n - 1, 0]], map.lanes[[l, n - 1, 1]]],
                    [map.lanes[[l, n, 0]], map.lanes[[l, n, 1]]],
                ));
            }
        }
    }
    let mut crossings = Vec::new();
    for (i, a) in segments.iter().enumerate() {
        for b in segments.iter().skip(i + 1) {
            if a.0 == b.0 {
                continue;
            }
            let da = [a.2[0] - a.1[0], a.2[1] - a.1[1]];
            let db = [b.2[0] - b.1[0], b.2[1] - b.1[1]];
            let cross = da[0] * db[1] - da[1] * db[0];
            let dot = da[0] * db[0] + da[1] * db[1];
            let angle = cross.atan2(dot).abs();
            if angle < std::f64::consts::FRAC_PI_4 || angle > std::f64::consts::PI * 0.75 {
                continue;
            }
            // segment intersection
            let denom = cross;
            if denom.abs() < 1e-12 {
                continue;
            }
            let qp = [b.1[0] - a.1[0], b.1[1] - a.1[1]];
            let t = (qp[0] * db[1] - qp[1] * db[0]) / denom;
            let u = (qp[0] * da[1] - qp[1] * da[0]) / denom;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                crossings.push([a.1[0] + t * da[0], a.1[1] + t * da[1]]);
            }
        }
    }
    crossings
}

fn wrap_angle(mut a: f64) -> f64 {
    while a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    while a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

fn label_agent(
    scene: &SceneTensor,
    map: &MapSet,
    crossings: &[[f64; 2]],
    agent: usize,
    rules: &Rules,
) -> Option<Behavior> {
    let t_total = scene.frames();
    let frames: Vec<usize> = (0..t_total).filter(|&t| scene.valid[[agent, t]]).collect();
    if frames.len() < 2 {
        return None;
    }
    let first = *frames.first().unwrap();
    let last = *frames.last().unwrap();

    let mean_speed = frames
        .iter()
        .map(|&t| {
            let vx = scene.states[[agent, t, chan::VX]];
            let vy = scene.states[[agent, t, chan::VY]];
            (vx * vx + vy * vy).sqrt()
        })
        .sum::<f64>()
        / frames.len() as f64;
    if mean_speed < rules.stop_speed {
        return Some(Behavior::Stop);
    }

    let mut net_heading = 0.0;
    for w in frames.windows(2) {
        let h0 = scene.states[[agent, w[0], chan::SIN]].atan2(scene.states[[agent, w[0], chan::COS]]);
        let h1 = scene.states[[agent, w[1], chan::SIN]].atan2(scene.states[[agent, w[1], chan::COS]]);
        net_heading += wrap_angle(h1 - h0);
    }
    let net_deg = net_heading.to_degrees();
    if net_deg.abs() > rules.turn_max_deg {
        return Some(Behavior::UTurn);
    }
    if net_deg.abs() >= rules.turn_min_deg {
        return Some(if net_deg > 0.0 {
            Behavior::LeftTurn
        } else {
            Behavior::RightTurn
        });
    }

    // Lateral displacement relative to the lane assigned at the first frame.
    if net_deg.abs() < rules.lane_change_heading_deg && !map.is_empty() {
        let x0 = scene.states[[agent, first, chan::X]];
        let y0 = scene.states[[agent, first, chan::Y]];
        if let Some((lane, point, _)) = map.nearest_point(x0, y0) {
            let xe = scene.states[[agent, last, chan::X]];
            let ye = scene.states[[agent, last, chan::Y]];
            let d_end = crate::metrics::lane_distance(map, lane, xe, ye).unwrap_or(0.0);
            if d_end > rules.lane_width * 0.8 {
                // Side of the departure, relative to the lane direction.
                let np = point.min(map.points_per_lane() - 2);
                let (lx0, ly0) = (map.lanes[[lane, np, 0]], map.lanes[[lane, np, 1]]);
                let (lx1, ly1) = (map.lanes[[lane, np + 1, 0]], map.lanes[[lane, np + 1, 1]]);
                let dir = [lx1 - lx0, ly1 - ly0];
                let rel = [xe - lx0, ye - ly0];
                let cross = dir[0] * rel[1] - dir[1] * rel[0];
                return Some(if cross > 0.0 {
                    Behavior::LeftLaneChange
                } else {
                    Behavior::RightLaneChange
                });
            }
        }
    }

    let passes_intersection = frames.iter().any(|&t| {
        let x = scene.states[[agent, t, chan::X]];
        let y = scene.states[[agent, t, chan::Y]];
        crossings
            .iter()
            .any(|c| ((c[0] - x).powi(2) + (c[1] - y).powi(2)).sqrt() < rules.intersection_radius)
    });
    if passes_intersection {
        return Some(Behavior::IntersectionPassing);
    }

    Some(Behavior::Forward)
}

/// Rule-based behavior distribution over a corpus, in percent of labeled
/// agents.
pub fn behavior_stats(corpus: &[ScenarioRecord]) -> Result<BehaviorStats> {
    let rules = Rules::default();
    let mut counts: BTreeMap<Behavior, usize> = BTreeMap::new();
    let mut total = 0usize;
    for record in corpus {
        let scene = record.to_scene()?;
        let map = record.to_map()?;
        let crossings = crossing_points(&map);
        for agent in 0..scene.agents() {
            if let Some(label) = label_agent(&scene, &map, &crossings, agent, &rules) {
                *counts.entry(label).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    let mut percentages = BTreeMap::new();
    for (label, count) in counts {
        percentages.insert(label, 100.0 * count as f64 / total.max(1) as f64);
    }
    Ok(BehaviorStats {
        percentages,
        agents: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, TemplateMix};
    use crate::record::{AgentRecord, AgentState, LaneRecord, ScenarioMeta, ScenarioRecord};
    use crate::scene::LaneKind;

    fn record_with_track(
        track: Vec<(f64, f64, f64)>,
        lanes: Vec<LaneRecord>,
    ) -> ScenarioRecord {
        let meta = ScenarioMeta::standard();
        assert_eq!(track.len(), meta.total_frames());
        let dt = meta.dt_s;
        let states = track
            .iter()
            .enumerate()
            .map(|(t, &(x, y, heading))| {
                let next = track.get(t + 1).copied().unwrap_or((x, y, heading));
                Some(AgentState {
                    x,
                    y,
                    heading_rad: heading,
                    vx: (next.0 - x) / dt,
                    vy: (next.1 - y) / dt,
                })
            })
            .collect();
        ScenarioRecord {
            meta,
            agents: vec![AgentRecord {
                id: "a0".into(),
                kind: "vehicle".into(),
                length_m: 4.5,
                width_m: 2.0,
                states,
            }],
            lanes,
        }
    }

    fn straight_lane(y: f64) -> LaneRecord {
        LaneRecord {
            kind: LaneKind::Driving,
            points: (0..60).map(|i| [i as f64 * 2.0 - 20.0, y]).collect(),
        }
    }

    #[test]
    fn all_straight_corpus_is_all_forward() {
        let track: Vec<(f64, f64, f64)> = (0..21).map(|t| (t as f64 * 3.0, 0.0, 0.0)).collect();
        let record = record_with_track(track, vec![straight_lane(0.0)]);
        let stats = behavior_stats(&[record]).unwrap();
        assert_eq!(stats.percentages.get(&Behavior::Forward), Some(&100.0));
    }

    #[test]
    fn stationary_agent_is_stop() {
        let track: Vec<(f64, f64, f64)> = (0..21).map(|_| (5.0, 0.0, 0.0)).collect();
        let record = record_with_track(track, vec![straight_lane(0.0)]);
        let stats = behavior_stats(&[record]).unwrap();
        assert_eq!(stats.percentages.get(&Behavior::Stop), Some(&100.0));
    }

    #[test]
    fn left_lane_change_detected() {
        // Straight motion with a single +3.5 m lateral displacement and a
        // tame heading envelope.
        let track: Vec<(f64, f64, f64)> = (0..21)
            .map(|t| {
                let x = t as f64 * 3.0;
                let frac = ((t as f64 - 6.0) / 6.0).clamp(0.0, 1.0);
                let w = 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
                (x, 3.5 * w, 0.0)
            })
            .collect();
        let record = record_with_track(track, vec![straight_lane(0.0), straight_lane(3.5)]);
        let stats = behavior_stats(&[record]).unwrap();
        assert_eq!(
            stats.percentages.get(&Behavior::LeftLaneChange),
            Some(&100.0),
            "stats: {:?}",
            stats.percentages
        );
    }

    #[test]
    fn u_turn_detected() {
        let track: Vec<(f64, f64, f64)> = (0..21)
            .map(|t| {
                let heading = std::f64::consts::PI * t as f64 / 20.0;
                (heading.sin() * 6.0, 6.0 - heading.cos() * 6.0, heading)
            })
            .collect();
        let record = record_with_track(track, vec![straight_lane(0.0)]);
        let stats = behavior_stats(&[record]).unwrap();
        assert_eq!(stats.percentages.get(&Behavior::UTurn), Some(&100.0));
    }

    #[test]
    fn crossing_corpus_yields_intersection_passings() {
        let mix = TemplateMix {
            straight: 0.0,
            arc: 0.0,
            crossing: 1.0,
        };
        let corpus = generate_corpus(12, &mix, 31).unwrap();
        let stats = behavior_stats(&corpus).unwrap();
        let pct = stats
            .percentages
            .get(&Behavior::IntersectionPassing)
            .copied()
            .unwrap_or(0.0);
        assert!(pct > 0.0, "expected intersection passings: {:?}", stats.percentages);
    }
}
