//! Finite box `{0..=cap}^m` with a dense mixed-radix enumeration.

use serde::{Deserialize, Serialize};

use crate::model::TrafficState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncatedSpace {
    pub cap: u32,
    pub m: usize,
}

impl TruncatedSpace {
    pub fn new(cap: u32, m: usize) -> Self {
        assert!(m >= 1, "at least one server");
        TruncatedSpace { cap, m }
    }

    /// Number of states, `(cap + 1)^m`, or `None` on overflow.
    pub fn checked_len(cap: u32, m: usize) -> Option<usize> {
        let radix = usize::try_from(cap).ok()?.checked_add(1)?;
        (0..m).try_fold(1usize, |acc, _| acc.checked_mul(radix))
    }

    pub fn len(&self) -> usize {
        Self::checked_len(self.cap, self.m).expect("state space size overflows usize")
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: &TrafficState) -> bool {
        x.servers() == self.m && x.queues().iter().all(|&q| q <= self.cap)
    }

    /// Index of `x`; server 0 is the most significant digit.
    pub fn index(&self, x: &TrafficState) -> usize {
        debug_assert!(self.contains(x), "{x} outside box of cap {}", self.cap);
        let radix = self.cap as usize + 1;
        x.queues().iter().fold(0, |acc, &q| acc * radix + q as usize)
    }

    /// Index of `x` after clamping every coordinate to `cap`.
    pub fn index_clamped(&self, x: &TrafficState) -> usize {
        let radix = self.cap as usize + 1;
        x.queues().iter().fold(0, |acc, &q| acc * radix + q.min(self.cap) as usize)
    }

    pub fn state(&self, mut index: usize) -> TrafficState {
        let radix = self.cap as usize + 1;
        let mut q = vec![0u32; self.m];
        for slot in q.iter_mut().rev() {
            *slot = (index % radix) as u32;
            index /= radix;
        }
        TrafficState::new(q)
    }

    pub fn states(&self) -> impl Iterator<Item = TrafficState> + '_ {
        (0..self.len()).map(|k| self.state(k))
    }
}
