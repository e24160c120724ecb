//! Segment-structured replay with cross-episode stitching and action masks.
//!
//! Transitions stream into fixed-length segments. When an episode ends
//! before a segment is full, writing continues immediately with the next
//! episode's transitions, and the binary mask records validity: `mask = 1`
//! up to and including the first terminal transition of the segment, `0`
//! after it. Masked positions stay in storage (windows may straddle the
//! boundary) but contribute exactly zero to every target and loss.
//!
//! Sampling draws a stored segment uniformly, a start transition uniformly
//! over all `L` positions, and a raw length uniformly from
//! `{l_min..l_max}`, then truncates the window at the segment end. The
//! truncating scheme is what the window-statistics formulas in
//! [`crate::analysis`] describe, with segment positions `1..=L` there
//! corresponding to start transitions `0..L` here.

use ndarray::Array2;
use rand::Rng;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("transition shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot sample from an empty replay buffer")]
    Empty,
    #[error("window bounds must satisfy 1 <= l_min <= l_max <= {segment_length}, got [{l_min}, {l_max}]")]
    BadWindowBounds {
        l_min: usize,
        l_max: usize,
        segment_length: usize,
    },
    #[error("malformed segment table at line {line}: {msg}")]
    MalformedDump { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A committed fixed-length slice of experience, possibly spanning an
/// episode boundary.
#[derive(Debug, Clone)]
pub struct Segment {
    pub id: u64,
    /// `(L+1) x obs_dim`; row `t+1` is the state the row-`t` transition
    /// leads to (replaced by the next episode's start after a terminal).
    pub states: Array2<f64>,
    /// `L x act_dim`.
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// `1` through the first terminal transition, `0` afterwards.
    pub mask: Vec<u8>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// A sampled supervision window: `horizon` consecutive transitions starting
/// at transition `start` of one segment. Carries copies, not views.
#[derive(Debug, Clone)]
pub struct Window {
    pub segment_id: u64,
    pub start: usize,
    pub horizon: usize,
    /// `(horizon+1) x obs_dim`.
    pub states: Array2<f64>,
    /// `horizon x act_dim`.
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub mask: Vec<u8>,
}

/// FIFO ring of committed segments plus the one segment currently being
/// written.
pub struct ReplayBuffer {
    obs_dim: usize,
    act_dim: usize,
    segment_length: usize,
    capacity_segments: usize,
    storage: Vec<Segment>,
    write_cursor: usize,
    next_id: u64,
    // Open segment under construction.
    open_states: Array2<f64>,
    open_actions: Array2<f64>,
    open_rewards: Vec<f64>,
    open_dones: Vec<bool>,
    open_len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_segments: usize, segment_length: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity_segments > 0 && segment_length > 0);
        Self {
            obs_dim,
            act_dim,
            segment_length,
            capacity_segments,
            storage: Vec::new(),
            write_cursor: 0,
            next_id: 0,
            open_states: Array2::zeros((segment_length + 1, obs_dim)),
            open_actions: Array2::zeros((segment_length, act_dim)),
            open_rewards: vec![0.0; segment_length],
            open_dones: vec![false; segment_length],
            open_len: 0,
        }
    }

    pub fn segment_length(&self) -> usize {
        self.segment_length
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// Ids of all committed segments, oldest first is not guaranteed.
    pub fn stored_ids(&self) -> Vec<u64> {
        self.storage.iter().map(|s| s.id).collect()
    }

    pub fn segment_by_id(&self, id: u64) -> Option<&Segment> {
        self.storage.iter().find(|s| s.id == id)
    }

    /// Appends one transition to the open segment; returns the id of the
    /// committed segment when this append fills it.
    ///
    /// A terminal transition does not close the segment: the caller resets
    /// its environment and keeps appending, and the post-terminal entries
    /// are masked out at commit time.
    pub fn append_transition(
        &mut self,
        state: &[f64],
        action: &[f64],
        reward: f64,
        done: bool,
        next_state: &[f64],
    ) -> Result<Option<u64>, ReplayError> {
        if state.len() != self.obs_dim || next_state.len() != self.obs_dim {
            return Err(ReplayError::ShapeMismatch(format!(
                "state dim {} (expected {})",
                state.len(),
                self.obs_dim
            )));
        }
        if action.len() != self.act_dim {
            return Err(ReplayError::ShapeMismatch(format!(
                "action dim {} (expected {})",
                action.len(),
                self.act_dim
            )));
        }
        let t = self.open_len;
        // Writing the start state every time lets a new episode overwrite
        // the unused terminal state left by the previous one.
        self.open_states.row_mut(t).assign(&ndarray::aview1(state));
        self.open_states.row_mut(t + 1).assign(&ndarray::aview1(next_state));
        self.open_actions.row_mut(t).assign(&ndarray::aview1(action));
        self.open_rewards[t] = reward;
        self.open_dones[t] = done;
        self.open_len += 1;
        if self.open_len == self.segment_length {
            Ok(Some(self.commit_open()))
        } else {
            Ok(None)
        }
    }

    fn commit_open(&mut self) -> u64 {
        let first_done = self.open_dones.iter().position(|&d| d);
        let mask = (0..self.segment_length)
            .map(|t| match first_done {
                Some(fd) if t > fd => 0,
                _ => 1,
            })
            .collect();
        let segment = Segment {
            id: self.next_id,
            states: self.open_states.clone(),
            actions: self.open_actions.clone(),
            rewards: self.open_rewards.clone(),
            dones: self.open_dones.clone(),
            mask,
        };
        self.next_id += 1;
        self.open_len = 0;
        self.push_segment(segment)
    }

    fn push_segment(&mut self, segment: Segment) -> u64 {
        let id = segment.id;
        if self.storage.len() < self.capacity_segments {
            self.storage.push(segment);
        } else {
            self.storage[self.write_cursor] = segment;
            self.write_cursor = (self.write_cursor + 1) % self.capacity_segments;
        }
        id
    }

    /// Inserts a pre-built segment (test fixtures); reassigns its id.
    pub fn insert_segment(&mut self, mut segment: Segment) -> u64 {
        segment.id = self.next_id;
        self.next_id += 1;
        self.push_segment(segment)
    }

    /// Draws (segment index, start transition, truncated horizon) for one
    /// window, without copying data out.
    pub fn draw_window_index(
        &self,
        l_min: usize,
        l_max: usize,
        rng: &mut impl Rng,
    ) -> (usize, usize, usize) {
        let seg = rng.random_range(0..self.storage.len());
        let start = rng.random_range(0..self.segment_length);
        let raw = rng.random_range(l_min..=l_max);
        let horizon = raw.min(self.segment_length - start);
        (seg, start, horizon)
    }

    /// Samples `batch` supervision windows uniformly: segment uniform over
    /// storage, start uniform over positions, raw length uniform over
    /// `{l_min..l_max}`, truncated at the segment end.
    pub fn sample_windows(
        &self,
        batch: usize,
        l_min: usize,
        l_max: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Window>, ReplayError> {
        if self.storage.is_empty() {
            return Err(ReplayError::Empty);
        }
        if l_min == 0 || l_min > l_max || l_max > self.segment_length {
            return Err(ReplayError::BadWindowBounds {
                l_min,
                l_max,
                segment_length: self.segment_length,
            });
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (seg_idx, start, horizon) = self.draw_window_index(l_min, l_max, rng);
            let seg = &self.storage[seg_idx];
            out.push(Window {
                segment_id: seg.id,
                start,
                horizon,
                states: seg
                    .states
                    .slice(ndarray::s![start..start + horizon + 1, ..])
                    .to_owned(),
                actions: seg
                    .actions
                    .slice(ndarray::s![start..start + horizon, ..])
                    .to_owned(),
                rewards: seg.rewards[start..start + horizon].to_vec(),
                dones: seg.dones[start..start + horizon].to_vec(),
                mask: seg.mask[start..start + horizon].to_vec(),
            });
        }
        Ok(out)
    }
}

/// Writes segments as a plain text table, one line per segment: the states
/// row-major, then actions row-major, then rewards, dones, and mask, all
/// space-separated. The header line records `L obs_dim act_dim`.
pub fn dump_segments(mut w: impl Write, segments: &[&Segment]) -> Result<(), ReplayError> {
    let (l, obs_dim, act_dim) = match segments.first() {
        Some(s) => (s.len(), s.states.ncols(), s.actions.ncols()),
        None => (0, 0, 0),
    };
    writeln!(w, "segments {l} {obs_dim} {act_dim}")?;
    for seg in segments {
        let mut fields: Vec<String> = Vec::new();
        fields.extend(seg.states.iter().map(|v| v.to_string()));
        fields.extend(seg.actions.iter().map(|v| v.to_string()));
        fields.extend(seg.rewards.iter().map(|v| v.to_string()));
        fields.extend(seg.dones.iter().map(|d| u8::from(*d).to_string()));
        fields.extend(seg.mask.iter().map(|m| m.to_string()));
        writeln!(w, "{}", fields.join(" "))?;
    }
    Ok(())
}

/// Reads segments written by [`dump_segments`]; ids are assigned afresh.
pub fn restore_segments(r: impl BufRead) -> Result<Vec<Segment>, ReplayError> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines.next().ok_or(ReplayError::MalformedDump {
        line: 1,
        msg: "missing header".into(),
    })?;
    let header = header?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "segments" {
        return Err(ReplayError::MalformedDump {
            line: 1,
            msg: "expected `segments L obs_dim act_dim`".into(),
        });
    }
    let parse = |s: &str, line: usize| -> Result<usize, ReplayError> {
        s.parse().map_err(|_| ReplayError::MalformedDump {
            line,
            msg: format!("bad integer `{s}`"),
        })
    };
    let l = parse(parts[1], 1)?;
    let obs_dim = parse(parts[2], 1)?;
    let act_dim = parse(parts[3], 1)?;
    let expect = (l + 1) * obs_dim + l * act_dim + 3 * l;
    let mut segments = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| ReplayError::MalformedDump {
            line: lineno,
            msg: format!("bad number: {e}"),
        })?;
        if vals.len() != expect {
            return Err(ReplayError::MalformedDump {
                line: lineno,
                msg: format!("expected {expect} fields, got {}", vals.len()),
            });
        }
        let mut it = vals.into_iter();
        let states =
            Array2::from_shape_vec((l + 1, obs_dim), (&mut it).take((l + 1) * obs_dim).collect())
                .expect("shape checked");
        let actions = Array2::from_shape_vec((l, act_dim), (&mut it).take(l * act_dim).collect())
            .expect("shape checked");
        let rewards: Vec<f64> = (&mut it).take(l).collect();
        let dones: Vec<bool> = (&mut it).take(l).map(|v| v != 0.0).collect();
        let mask: Vec<u8> = (&mut it).take(l).map(|v| (v != 0.0) as u8).collect();
        segments.push(Segment {
            id: segments.len() as u64,
            states,
            actions,
            rewards,
            dones,
            mask,
        });
    }
    Ok(segments)
}
