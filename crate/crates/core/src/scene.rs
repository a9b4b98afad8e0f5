//! Tokenized scene representation and channel normalization.
//!
//! A scenario window is an agent tensor of shape `A x T x 8` plus a validity
//! mask. The eight denoised channels are fixed: position (x, y), heading as
//! (sin, cos), velocity (vx, vy), and box dimensions (length, width). Static
//! map context lives in [`MapSet`] as lane centerlines with a closed set of
//! type tags.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of denoised state channels per token.
pub const CHANNELS: usize = 8;

/// Channel indices into the last axis of [`SceneTensor::states`].
pub mod chan {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const SIN: usize = 2;
    pub const COS: usize = 3;
    pub const VX: usize = 4;
    pub const VY: usize = 5;
    pub const LEN: usize = 6;
    pub const WID: usize = 7;
}

/// Agent states over a scenario window plus per-token validity.
///
/// Invalid tokens are kept zero-filled so masked attention and masked losses
/// always see the same sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTensor {
    /// Shape `(agents, frames, CHANNELS)`.
    pub states: Array3<f64>,
    /// Shape `(agents, frames)`.
    pub valid: Array2<bool>,
}

impl SceneTensor {
    pub fn zeros(agents: usize, frames: usize) -> Self {
        SceneTensor {
            states: Array3::zeros((agents, frames, CHANNELS)),
            valid: Array2::from_elem((agents, frames), false),
        }
    }

    pub fn new(states: Array3<f64>, valid: Array2<bool>) -> Result<Self> {
        if states.dim().0 != valid.dim().0 || states.dim().1 != valid.dim().1 {
            return Err(Error::invalid(format!(
                "states shape {:?} does not match valid shape {:?}",
                states.dim(),
                valid.dim()
            )));
        }
        if states.dim().2 != CHANNELS {
            return Err(Error::invalid(format!(
                "expected {CHANNELS} channels, got {}",
                states.dim().2
            )));
        }
        Ok(SceneTensor { states, valid })
    }

    pub fn agents(&self) -> usize {
        self.states.dim().0
    }

    pub fn frames(&self) -> usize {
        self.states.dim().1
    }

    /// Rejects non-finite values on valid tokens.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for a in 0..self.agents() {
            for t in 0..self.frames() {
                if !self.valid[[a, t]] {
                    continue;
                }
                for c in 0..CHANNELS {
                    if !self.states[[a, t, c]].is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("{context}: agent {a}, frame {t}, channel {c}"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Zeroes every invalid token in place.
    pub fn zero_invalid(&mut self) {
        for a in 0..self.agents() {
            for t in 0..self.frames() {
                if !self.valid[[a, t]] {
                    for c in 0..CHANNELS {
                        self.states[[a, t, c]] = 0.0;
                    }
                }
            }
        }
    }
}

/// Closed enumeration of lane centerline kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Driving,
    Junction,
    Turn,
}

impl LaneKind {
    pub const COUNT: usize = 3;

    pub fn code(self) -> f64 {
        match self {
            LaneKind::Driving => 0.0,
            LaneKind::Junction => 1.0,
            LaneKind::Turn => 2.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        match code as i64 {
            0 => Ok(LaneKind::Driving),
            1 => Ok(LaneKind::Junction),
            2 => Ok(LaneKind::Turn),
            other => Err(Error::invalid(format!("unknown lane kind code {other}"))),
        }
    }
}

/// Lane centerlines as ordered point sequences, padded to a rectangular
/// `(lanes, points, 3)` tensor of (x, y, kind code) with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    pub lanes: Array3<f64>,
    pub valid: Array2<bool>,
}

impl MapSet {
    pub fn empty() -> Self {
        MapSet {
            lanes: Array3::zeros((0, 0, 3)),
            valid: Array2::from_elem((0, 0), false),
        }
    }

    pub fn num_lanes(&self) -> usize {
        self.lanes.dim().0
    }

    pub fn points_per_lane(&self) -> usize {
        self.lanes.dim().1
    }

    pub fn is_empty(&self) -> bool {
        !self.valid.iter().any(|v| *v)
    }

    /// Iterates valid points as (lane, point, x, y, kind code).
    pub fn valid_points(&self) -> impl Iterator<Item = (usize, usize, f64, f64, f64)> + '_ {
        let (l, n, _) = self.lanes.dim();
        (0..l).flat_map(move |li| {
            (0..n).filter_map(move |ni| {
                if self.valid[[li, ni]] {
                    Some((
                        li,
                        ni,
                        self.lanes[[li, ni, 0]],
                        self.lanes[[li, ni, 1]],
                        self.lanes[[li, ni, 2]],
                    ))
                } else {
                    None
                }
            })
        })
    }

    /// Nearest valid lane point to `(x, y)`; ties broken by lowest
    /// (lane, point) index. Returns (lane, point, distance).
    pub fn nearest_point(&self, x: f64, y: f64) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (l, n, px, py, _) in self.valid_points() {
            let d = ((px - x).powi(2) + (py - y).powi(2)).sqrt();
            match best {
                Some((_, _, bd)) if d >= bd => {}
                _ => best = Some((l, n, d)),
            }
        }
        best
    }

    /// Checks that consecutive valid points within each lane are distinct.
    pub fn validate(&self) -> Result<()> {
        for l in 0..self.num_lanes() {
            let mut prev: Option<(f64, f64)> = None;
            for n in 0..self.points_per_lane() {
                if !self.valid[[l, n]] {
                    prev = None;
                    continue;
                }
                let p = (self.lanes[[l, n, 0]], self.lanes[[l, n, 1]]);
                if !p.0.is_finite() || !p.1.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("map lane {l}, point {n}"),
                    });
                }
                if let Some(q) = prev {
                    let sep = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
                    if sep <= 1e-9 {
                        return Err(Error::parse(
                            format!("lane {l}, point {n}"),
                            "consecutive lane points coincide",
                        ));
                    }
                }
                prev = Some(p);
            }
        }
        Ok(())
    }
}

/// Per-channel normalization statistics. Standard deviations are floored at
/// [`ChannelStats::STD_FLOOR`] so degenerate channels stay invertible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl ChannelStats {
    pub const STD_FLOOR: f64 = 1e-6;

    /// Identity statistics (mean 0, std 1).
    pub fn identity() -> Self {
        ChannelStats {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..CHANNELS {
            if !(self.std[c] > 0.0) || !self.std[c].is_finite() || !self.mean[c].is_finite() {
                return Err(Error::invalid(format!(
                    "channel {c}: std must be finite and > 0, mean finite (mean={}, std={})",
                    self.mean[c], self.std[c]
                )));
            }
        }
        Ok(())
    }
}

/// Fits per-channel population statistics over the valid tokens of `scenes`.
pub fn fit_stats_scenes<'a>(scenes: impl IntoIterator<Item = &'a SceneTensor>) -> Result<ChannelStats> {
    let mut count = 0u64;
    let mut sum = [0.0f64; CHANNELS];
    let mut sumsq = [0.0f64; CHANNELS];
    for scene in scenes {
        scene.check_finite("fit_stats")?;
        for a in 0..scene.agents() {
            for t in 0..scene.frames() {
                if !scene.valid[[a, t]] {
                    continue;
                }
                count += 1;
                for c in 0..CHANNELS {
                    let v = scene.states[[a, t, c]];
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("fit_stats: no valid tokens in corpus"));
    }
    let n = count as f64;
    let mut mean = [0.0; CHANNELS];
    let mut std = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        mean[c] = sum[c] / n;
        let var = (sumsq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt().max(ChannelStats::STD_FLOOR);
    }
    Ok(ChannelStats { mean, std })
}

/// Maps each valid token's channel `c` to `(value - mean_c) / std_c`;
/// invalid tokens are zero-filled.
pub fn normalize(scene: &SceneTensor, stats: &ChannelStats) -> Result<SceneTensor> {
    stats.validate()?;
    scene.check_finite("normalize")?;
    let mut out = SceneTensor::zeros(scene.agents(), scene.frames());
    out.valid.assign(&scene.valid);
    for a in 0..scene.agents() {
        for t in 0..scene.frames() {
            if !scene.valid[[a, t]] {
                continue;
            }
            for c in 0..CHANNELS {
                out.states[[a, t, c]] = (scene.states[[a, t, c]] - stats.mean[c]) / stats.std[c];
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`normalize`] on valid tokens. Heading channels are
/// re-projected to the unit circle; a near-zero heading vector decodes to
/// (sin, cos) = (0, 1).
pub fn denormalize(scene: &SceneTensor, stats: &ChannelStats) -> Result<SceneTensor> {
    stats.validate()?;
    scene.check_finite("denormalize")?;
    let mut out = SceneTensor::zeros(scene.agents(), scene.frames());
    out.valid.assign(&scene.valid);
    for a in 0..scene.agents() {
        for t in 0..scene.frames() {
            if !scene.valid[[a, t]] {
                continue;
            }
            for c in 0..CHANNELS {
                out.states[[a, t, c]] = scene.states[[a, t, c]] * stats.std[c] + stats.mean[c];
            }
            let s = out.states[[a, t, chan::SIN]];
            let co = out.states[[a, t, chan::COS]];
            let norm = (s * s + co * co).sqrt();
            if norm > 1e-6 {
                out.states[[a, t, chan::SIN]] = s / norm;
                out.states[[a, t, chan::COS]] = co / norm;
            } else {
                out.states[[a, t, chan::SIN]] = 0.0;
                out.states[[a, t, chan::COS]] = 1.0;
            }
        }
    }
    Ok(out)
}
