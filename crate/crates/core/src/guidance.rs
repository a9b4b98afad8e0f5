//! Behavior-alignment guidance: closed-form positional corrections applied
//! to the clean-state estimate inside each reverse step, in metric space.
//!
//! Three operators run in the fixed order collision -> comfort -> on_road,
//! each with `lambda = lambda_total / |enabled|`. Only position channels are
//! ever modified; conditioned (level-0) and invalid tokens never move.

use ndarray::Array2;

use crate::scene::{chan, MapSet, SceneTensor};
use crate::Result;

/// Which constraints are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnabledConstraints {
    pub collision: bool,
    pub comfort: bool,
    pub on_road: bool,
}

impl EnabledConstraints {
    pub fn all() -> Self {
        EnabledConstraints {
            collision: true,
            comfort: true,
            on_road: true,
        }
    }

    pub fn none() -> Self {
        EnabledConstraints {
            collision: false,
            comfort: false,
            on_road: false,
        }
    }

    pub fn count(&self) -> usize {
        self.collision as usize + self.comfort as usize + self.on_road as usize
    }
}

#[derive(Clone, Debug)]
pub struct GuidanceConfig {
    /// Total correction budget split evenly across active constraints.
    pub lambda_total: f64,
    /// On-road distance threshold in meters.
    pub d_th: f64,
    pub enabled: EnabledConstraints,
    /// Agent pairs exempt from collision separation (e.g. a designated
    /// attacker and its target, which are meant to collide).
    pub collision_exempt: Vec<(usize, usize)>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_total: 0.2,
            d_th: 2.0,
            enabled: EnabledConstraints::all(),
            collision_exempt: Vec::new(),
        }
    }
}

impl GuidanceConfig {
    /// Per-constraint coefficient: `lambda_total / |enabled|`.
    pub fn lambda_each(&self) -> f64 {
        let n = self.enabled.count();
        if n == 0 {
            0.0
        } else {
            self.lambda_total / n as f64
        }
    }

    fn is_exempt(&self, i: usize, j: usize) -> bool {
        self.collision_exempt
            .iter()
            .any(|&(a, b)| (a == i && b == j) || (a == j && b == i))
    }
}

/// A rotated rectangle: center, unit heading (sin, cos), half extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub sin_h: f64,
    pub cos_h: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl OrientedBox {
    /// Box of the token at (agent, frame); heading is renormalized.
    pub fn from_token(scene: &SceneTensor, agent: usize, frame: usize) -> OrientedBox {
        let s = scene.states[[agent, frame, chan::SIN]];
        let c = scene.states[[agent, frame, chan::COS]];
        let norm = (s * s + c * c).sqrt();
        let (sin_h, cos_h) = if norm > 1e-9 {
            (s / norm, c / norm)
        } else {
            (0.0, 1.0)
        };
        OrientedBox {
            cx: scene.states[[agent, frame, chan::X]],
            cy: scene.states[[agent, frame, chan::Y]],
            sin_h,
            cos_h,
            half_len: scene.states[[agent, frame, chan::LEN]].abs() / 2.0,
            half_wid: scene.states[[agent, frame, chan::WID]].abs() / 2.0,
        }
    }

    /// Longitudinal axis (direction of travel).
    pub fn axis_long(&self) -> (f64, f64) {
        (self.cos_h, self.sin_h)
    }

    /// Lateral axis.
    pub fn axis_lat(&self) -> (f64, f64) {
        (-self.sin_h, self.cos_h)
    }

    /// Half extent of the box projected onto a unit axis.
    fn projected_extent(&self, axis: (f64, f64)) -> f64 {
        let along = self.axis_long();
        let lat = self.axis_lat();
        self.half_len * (axis.0 * along.0 + axis.1 * along.1).abs()
            + self.half_wid * (axis.0 * lat.0 + axis.1 * lat.1).abs()
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (lx, ly) = self.axis_long();
        let (wx, wy) = self.axis_lat();
        let l = self.half_len;
        let w = self.half_wid;
        [
            (self.cx + l * lx + w * wx, self.cy + l * ly + w * wy),
            (self.cx + l * lx - w * wx, self.cy + l * ly - w * wy),
            (self.cx - l * lx - w * wx, self.cy - l * ly - w * wy),
            (self.cx - l * lx + w * wx, self.cy - l * ly + w * wy),
        ]
    }
}

/// Separating-axis intersection test over the four candidate axes of the two
/// rectangles. Touching boxes count as intersecting.
pub fn boxes_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let axes = [a.axis_long(), a.axis_lat(), b.axis_long(), b.axis_lat()];
    let dx = b.cx - a.cx;
    let dy = b.cy - a.cy;
    for axis in axes {
        let dist = (dx * axis.0 + dy * axis.1).abs();
        if dist > a.projected_extent(axis) + b.projected_extent(axis) {
            return false;
        }
    }
    true
}

/// Outcome of a guidance application; `empty_map` flags an on-road pass that
/// had to be skipped because no lane points were available.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GuidanceWarnings {
    pub empty_map: bool,
}

/// Pushes overlapping agents apart along their center-connecting line, per
/// timestep, all displacements computed from pre-update positions.
pub fn apply_collision(
    scene: &mut SceneTensor,
    frozen: &Array2<bool>,
    lambda: f64,
    config: &GuidanceConfig,
) {
    let (a, t) = scene.valid.dim();
    for ti in 0..t {
        let boxes: Vec<Option<OrientedBox>> = (0..a)
            .map(|ai| {
                if scene.valid[[ai, ti]] {
                    Some(OrientedBox::from_token(scene, ai, ti))
                } else {
                    None
                }
            })
            .collect();
        let mut push = vec![(0.0f64, 0.0f64); a];
        for i in 0..a {
            let Some(bi) = &boxes[i] else { continue };
            for j in (i + 1)..a {
                let Some(bj) = &boxes[j] else { continue };
                if config.is_exempt(i, j) || !boxes_overlap(bi, bj) {
                    continue;
                }
                let dx = bi.cx - bj.cx;
                let dy = bi.cy - bj.cy;
                let norm = (dx * dx + dy * dy).sqrt();
                let (ux, uy) = if norm >= 1e-9 {
                    (dx / norm, dy / norm)
                } else {
                    // Coincident centers: deterministic direction from the
                    // pair index.
                    let angle = std::f64::consts::TAU
                        * (((i * 31 + j * 17) % 360) as f64 / 360.0);
                    (angle.cos(), angle.sin())
                };
                push[i].0 += ux;
                push[i].1 += uy;
                push[j].0 -= ux;
                push[j].1 -= uy;
            }
        }
        for ai in 0..a {
            if !scene.valid[[ai, ti]] || frozen[[ai, ti]] {
                continue;
            }
            scene.states[[ai, ti, chan::X]] += lambda * push[ai].0;
            scene.states[[ai, ti, chan::Y]] += lambda * push[ai].1;
        }
    }
}

/// Smooths interior trajectory points by moving each toward the midpoint of
/// its neighbors: `x += lambda * (x_prev - 2 x + x_next) / 2`. Endpoints of
/// each valid run and frozen tokens pass through unchanged.
pub fn apply_comfort(scene: &mut SceneTensor, frozen: &Array2<bool>, lambda: f64) {
    let (a, t) = scene.valid.dim();
    if t < 3 {
        return;
    }
    for ai in 0..a {
        let mut deltas = vec![(0.0f64, 0.0f64); t];
        for ti in 1..t - 1 {
            if !(scene.valid[[ai, ti - 1]] && scene.valid[[ai, ti]] && scene.valid[[ai, ti + 1]]) {
                continue;
            }
            if frozen[[ai, ti]] {
                continue;
            }
            let half_dd = |c: usize| {
                0.5 * (scene.states[[ai, ti - 1, c]] - 2.0 * scene.states[[ai, ti, c]]
                    + scene.states[[ai, ti + 1, c]])
            };
            deltas[ti] = (lambda * half_dd(chan::X), lambda * half_dd(chan::Y));
        }
        for ti in 0..t {
            scene.states[[ai, ti, chan::X]] += deltas[ti].0;
            scene.states[[ai, ti, chan::Y]] += deltas[ti].1;
        }
    }
}

/// Pulls tokens farther than `d_th` from the nearest lane point toward it:
/// `x += lambda * (c - x)`.
pub fn apply_on_road(
    scene: &mut SceneTensor,
    frozen: &Array2<bool>,
    map: &MapSet,
    lambda: f64,
    d_th: f64,
) -> GuidanceWarnings {
    if map.is_empty() {
        return GuidanceWarnings { empty_map: true };
    }
    let (a, t) = scene.valid.dim();
    for ai in 0..a {
        for ti in 0..t {
            if !scene.valid[[ai, ti]] || frozen[[ai, ti]] {
                continue;
            }
            let x = scene.states[[ai, ti, chan::X]];
            let y = scene.states[[ai, ti, chan::Y]];
            let (l, n, dist) = map.nearest_point(x, y).expect("map is non-empty");
            if dist > d_th {
                let cx = map.lanes[[l, n, 0]];
                let cy = map.lanes[[l, n, 1]];
                scene.states[[ai, ti, chan::X]] = x + lambda * (cx - x);
                scene.states[[ai, ti, chan::Y]] = y + lambda * (cy - y);
            }
        }
    }
    GuidanceWarnings::default()
}

/// Applies all enabled operators in fixed order (collision -> comfort ->
/// on_road). `conditioned` marks level-0 tokens, which never move.
pub fn apply_guidance(
    scene: &mut SceneTensor,
    map: &MapSet,
    config: &GuidanceConfig,
    conditioned: &Array2<bool>,
) -> Result<GuidanceWarnings> {
    let lambda = config.lambda_each();
    let mut warnings = GuidanceWarnings::default();
    if config.enabled.count() == 0 || lambda == 0.0 {
        return Ok(warnings);
    }
    if config.enabled.collision {
        apply_collision(scene, conditioned, lambda, config);
    }
    if config.enabled.comfort {
        apply_comfort(scene, conditioned, lambda);
    }
    if config.enabled.on_road {
        let w = apply_on_road(scene, conditioned, map, lambda, config.d_th);
        warnings.empty_map |= w.empty_map;
    }
    Ok(warnings)
}
