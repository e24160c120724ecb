//! Target-critic schedules.
//!
//! Two mutually exclusive modes: the conventional Polyak average after every
//! critic update, and the target-free hard-freeze schedule — snapshot the
//! online critic at span boundaries, cache every bootstrap value computed
//! under that snapshot, and hold both fixed for the next `K` updates.

use std::collections::HashMap;

/// How the bootstrap critic tracks the online critic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetMode {
    SoftPolyak { tau: f64 },
    HardFreeze { k: usize },
}

/// Counter plus (in hard-freeze mode) the per-span bootstrap cache keyed by
/// (segment id, state row within the segment).
pub struct FreezeSchedule {
    pub mode: TargetMode,
    updates_done: u64,
    cache: HashMap<(u64, usize), f64>,
}

/// What the learner must do at the start of a critic update.
#[derive(Debug, PartialEq, Eq)]
pub enum SpanAction {
    /// Keep using the current target parameters (and cache).
    Continue,
    /// Span boundary: snapshot the online critic into the target and drop
    /// the cache (already cleared).
    Snapshot,
}

impl FreezeSchedule {
    pub fn new(mode: TargetMode) -> Self {
        match mode {
            TargetMode::SoftPolyak { tau } => assert!(tau > 0.0 && tau <= 1.0),
            TargetMode::HardFreeze { k } => assert!(k >= 1),
        }
        Self {
            mode,
            updates_done: 0,
            cache: HashMap::new(),
        }
    }

    pub fn updates_done(&self) -> u64 {
        self.updates_done
    }

    /// Called before computing targets for a critic update.
    pub fn begin_update(&mut self) -> SpanAction {
        match self.mode {
            TargetMode::SoftPolyak { .. } => SpanAction::Continue,
            TargetMode::HardFreeze { k } => {
                if self.updates_done % k as u64 == 0 {
                    self.cache.clear();
                    SpanAction::Snapshot
                } else {
                    SpanAction::Continue
                }
            }
        }
    }

    /// Called after the optimizer step; returns the Polyak weight to apply,
    /// if any, and advances the update counter.
    pub fn end_update(&mut self) -> Option<f64> {
        self.updates_done += 1;
        match self.mode {
            TargetMode::SoftPolyak { tau } => Some(tau),
            TargetMode::HardFreeze { .. } => None,
        }
    }

    /// Bootstrap value lookup; in soft mode nothing is ever cached (targets
    /// drift with every update), in hard mode values computed during a span
    /// are reused verbatim until the next snapshot.
    pub fn cached(&self, segment_id: u64, state_row: usize) -> Option<f64> {
        match self.mode {
            TargetMode::SoftPolyak { .. } => None,
            TargetMode::HardFreeze { .. } => self.cache.get(&(segment_id, state_row)).copied(),
        }
    }

    pub fn insert(&mut self, segment_id: u64, state_row: usize, value: f64) {
        if matches!(self.mode, TargetMode::HardFreeze { .. }) {
            self.cache.insert((segment_id, state_row), value);
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}
