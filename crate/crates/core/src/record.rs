//! Scenario record serialization.
//!
//! A scenario record is a UTF-8 JSON document:
//!
//! ```json
//! {
//!   "meta": {"dt_s": 0.5, "history_frames": 4, "current_frames": 1,
//!            "future_frames": 16, "range_m": 104.0},
//!   "agents": [{"id": "a0", "type": "vehicle", "length_m": 4.5, "width_m": 2.0,
//!               "states": [[x, y, heading_rad, vx, vy], null, ...]}],
//!   "lanes": [{"type": "driving", "points": [[x, y], ...]}]
//! }
//! ```
//!
//! Heading is stored as radians on disk and converted to (sin, cos) in
//! memory. Corpora are JSON-Lines containers, one scenario per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::scene::{chan, LaneKind, MapSet, SceneTensor, CHANNELS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub dt_s: f64,
    pub history_frames: usize,
    pub current_frames: usize,
    pub future_frames: usize,
    pub range_m: f64,
}

impl ScenarioMeta {
    /// Default window: 4 history + 1 current + 16 future frames at 0.5 s,
    /// 104 m spatial range.
    pub fn standard() -> Self {
        ScenarioMeta {
            dt_s: 0.5,
            history_frames: 4,
            current_frames: 1,
            future_frames: 16,
            range_m: 104.0,
        }
    }

    pub fn total_frames(&self) -> usize {
        self.history_frames + self.current_frames + self.future_frames
    }

    /// Frames conditioned during generation (history + current).
    pub fn conditioned_frames(&self) -> usize {
        self.history_frames + self.current_frames
    }
}

/// Per-frame agent state as stored on disk: (x, y, heading_rad, vx, vy).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 5]", try_from = "[f64; 5]")]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading_rad: f64,
    pub vx: f64,
    pub vy: f64,
}

impl From<AgentState> for [f64; 5] {
    fn from(s: AgentState) -> Self {
        [s.x, s.y, s.heading_rad, s.vx, s.vy]
    }
}

impl TryFrom<[f64; 5]> for AgentState {
    type Error = String;

    fn try_from(v: [f64; 5]) -> std::result::Result<Self, String> {
        Ok(AgentState {
            x: v[0],
            y: v[1],
            heading_rad: v[2],
            vx: v[3],
            vy: v[4],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: String,
    /// Opaque metadata; the engine carries it through unchanged.
    #[serde(rename = "type")]
    pub kind: String,
    pub length_m: f64,
    pub width_m: f64,
    /// One entry per frame; `null` marks the agent absent at that frame.
    pub states: Vec<Option<AgentState>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneRecord {
    #[serde(rename = "type")]
    pub kind: LaneKind,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub meta: ScenarioMeta,
    pub agents: Vec<AgentRecord>,
    pub lanes: Vec<LaneRecord>,
}

impl ScenarioRecord {
    /// Validates frame counts, finiteness, and lane geometry.
    pub fn validate(&self) -> Result<()> {
        let total = self.meta.total_frames();
        if !(self.meta.dt_s > 0.0) || !self.meta.dt_s.is_finite() {
            return Err(Error::parse("meta.dt_s", "dt must be finite and positive"));
        }
        for agent in &self.agents {
            if agent.states.len() != total {
                return Err(Error::parse(
                    format!("agent {}", agent.id),
                    format!("has {} frames, meta says {total}", agent.states.len()),
                ));
            }
            if !(agent.length_m > 0.0) || !(agent.width_m > 0.0) {
                return Err(Error::parse(
                    format!("agent {}", agent.id),
                    "length_m and width_m must be positive",
                ));
            }
            for (t, state) in agent.states.iter().enumerate() {
                if let Some(s) = state {
                    let vals = [s.x, s.y, s.heading_rad, s.vx, s.vy];
                    if vals.iter().any(|v| !v.is_finite()) {
                        return Err(Error::parse(
                            format!("agent {}, frame {t}", agent.id),
                            "non-finite state value",
                        ));
                    }
                }
            }
        }
        for (l, lane) in self.lanes.iter().enumerate() {
            for (n, p) in lane.points.iter().enumerate() {
                if !p[0].is_finite() || !p[1].is_finite() {
                    return Err(Error::parse(
                        format!("lane {l}, point {n}"),
                        "non-finite coordinate",
                    ));
                }
                if n > 0 {
                    let q = lane.points[n - 1];
                    let sep = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    if sep <= 1e-9 {
                        return Err(Error::parse(
                            format!("lane {l}, point {n}"),
                            "consecutive lane points coincide",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Converts the agent list to the in-memory tensor form. Heading radians
    /// become (sin, cos); agent dimensions are broadcast across frames.
    pub fn to_scene(&self) -> Result<SceneTensor> {
        self.validate()?;
        let a = self.agents.len();
        let t = self.meta.total_frames();
        let mut states = Array3::zeros((a, t, CHANNELS));
        let mut valid = Array2::from_elem((a, t), false);
        for (ai, agent) in self.agents.iter().enumerate() {
            for (ti, state) in agent.states.iter().enumerate() {
                if let Some(s) = state {
                    valid[[ai, ti]] = true;
                    states[[ai, ti, chan::X]] = s.x;
                    states[[ai, ti, chan::Y]] = s.y;
                    states[[ai, ti, chan::SIN]] = s.heading_rad.sin();
                    states[[ai, ti, chan::COS]] = s.heading_rad.cos();
                    states[[ai, ti, chan::VX]] = s.vx;
                    states[[ai, ti, chan::VY]] = s.vy;
                    states[[ai, ti, chan::LEN]] = agent.length_m;
                    states[[ai, ti, chan::WID]] = agent.width_m;
                }
            }
        }
        SceneTensor::new(states, valid)
    }

    /// Converts lanes to the padded map tensor.
    pub fn to_map(&self) -> Result<MapSet> {
        let l = self.lanes.len();
        let n = self.lanes.iter().map(|lane| lane.points.len()).max().unwrap_or(0);
        let mut lanes = Array3::zeros((l, n, 3));
        let mut valid = Array2::from_elem((l, n), false);
        for (li, lane) in self.lanes.iter().enumerate() {
            for (ni, p) in lane.points.iter().enumerate() {
                valid[[li, ni]] = true;
                lanes[[li, ni, 0]] = p[0];
                lanes[[li, ni, 1]] = p[1];
                lanes[[li, ni, 2]] = lane.kind.code();
            }
        }
        let map = MapSet { lanes, valid };
        map.validate()?;
        Ok(map)
    }

    /// Rebuilds a record from a metric-space scene tensor, reusing this
    /// record's meta, lane geometry, and agent metadata (ids, types, dims).
    pub fn with_scene(&self, scene: &SceneTensor) -> Result<ScenarioRecord> {
        if scene.agents() != self.agents.len() || scene.frames() != self.meta.total_frames() {
            return Err(Error::invalid(format!(
                "scene shape ({}, {}) does not match record ({}, {})",
                scene.agents(),
                scene.frames(),
                self.agents.len(),
                self.meta.total_frames()
            )));
        }
        let mut out = self.clone();
        for (ai, agent) in out.agents.iter_mut().enumerate() {
            for ti in 0..scene.frames() {
                agent.states[ti] = if scene.valid[[ai, ti]] {
                    Some(AgentState {
                        x: scene.states[[ai, ti, chan::X]],
                        y: scene.states[[ai, ti, chan::Y]],
                        heading_rad: scene.states[[ai, ti, chan::SIN]]
                            .atan2(scene.states[[ai, ti, chan::COS]]),
                        vx: scene.states[[ai, ti, chan::VX]],
                        vy: scene.states[[ai, ti, chan::VY]],
                    })
                } else {
                    None
                };
            }
        }
        Ok(out)
    }
}

/// Parses a scenario record from a JSON string.
pub fn parse_record(json: &str) -> Result<ScenarioRecord> {
    let record: ScenarioRecord = serde_json::from_str(json)
        .map_err(|e| Error::parse(format!("line {}, column {}", e.line(), e.column()), e.to_string()))?;
    record.validate()?;
    Ok(record)
}

/// Serializes a record to its canonical single-line JSON form.
pub fn record_to_json(record: &ScenarioRecord) -> String {
    serde_json::to_string(record).expect("record serialization cannot fail")
}

pub fn read_record(path: impl AsRef<Path>) -> Result<ScenarioRecord> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_record(&text)
}

pub fn write_record(path: impl AsRef<Path>, record: &ScenarioRecord) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(record_to_json(record).as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

/// Reads a JSON-Lines corpus, one scenario per line. Blank lines are skipped;
/// parse errors carry the 1-based line number.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<ScenarioRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(f);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}:{}: {location}", path.display(), i + 1),
                message,
            },
            other => other,
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[ScenarioRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for record in records {
        w.write_all(record_to_json(record).as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_record() -> ScenarioRecord {
        let meta = ScenarioMeta::standard();
        let total = meta.total_frames();
        let states = (0..total)
            .map(|t| {
                Some(AgentState {
                    x: t as f64 * 2.0,
                    y: 0.0,
                    heading_rad: 0.0,
                    vx: 4.0,
                    vy: 0.0,
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
            lanes: vec![LaneRecord {
                kind: LaneKind::Driving,
                points: (0..10).map(|i| [i as f64 * 5.0, 0.0]).collect(),
            }],
        }
    }

    #[test]
    fn minimal_record_parses() {
        let record = minimal_record();
        let json = record_to_json(&record);
        let parsed = parse_record(&json).unwrap();
        assert_eq!(parsed.agents.len(), 1);
        assert_eq!(parsed.lanes.len(), 1);
        let scene = parsed.to_scene().unwrap();
        assert_eq!(scene.agents(), 1);
        assert_eq!(scene.frames(), 21);
    }

    #[test]
    fn round_trip_is_identity() {
        let record = minimal_record();
        let parsed = parse_record(&record_to_json(&record)).unwrap();
        assert_eq!(parsed, record);
    }

    #[test]
    fn absent_frames_become_invalid_mask() {
        let mut record = minimal_record();
        for t in 0..4 {
            record.agents[0].states[t] = None;
        }
        let scene = record.to_scene().unwrap();
        for t in 0..4 {
            assert!(!scene.valid[[0, t]]);
        }
        assert!(scene.valid[[0, 4]]);
    }

    #[test]
    fn frame_count_mismatch_names_agent() {
        let mut record = minimal_record();
        record.agents[0].states.pop();
        let err = parse_record(&record_to_json(&record)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("agent a0"), "unexpected error: {msg}");
    }

    #[test]
    fn nan_coordinates_rejected() {
        let mut record = minimal_record();
        record.agents[0].states[3].as_mut().unwrap().x = f64::NAN;
        let json = record_to_json(&record);
        assert!(parse_record(&json).is_err());
    }

    #[test]
    fn heading_survives_tensor_conversion() {
        let mut record = minimal_record();
        record.agents[0].states[5].as_mut().unwrap().heading_rad = 0.927295218001612; // atan2(0.8, 0.6)
        let scene = record.to_scene().unwrap();
        assert!((scene.states[[0, 5, chan::SIN]] - 0.8).abs() < 1e-12);
        assert!((scene.states[[0, 5, chan::COS]] - 0.6).abs() < 1e-12);
        let rebuilt = record.with_scene(&scene).unwrap();
        let h = rebuilt.agents[0].states[5].unwrap().heading_rad;
        assert!((h - 0.927295218001612).abs() < 1e-12);
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let records = vec![minimal_record(), minimal_record()];
        write_corpus(&path, &records).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, records);
    }
}
