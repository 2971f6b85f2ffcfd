//! Time-based schedules embedded in the event-based family.
//!
//! The scheduled sensor listens first with `α = 0`, so it always fires; all
//! other sensors get `α = ∞` and never do.

use serde::{Deserialize, Serialize};

use super::{Decision, Queue, ScheduleError};

/// Repeating list of transmitters (zero-based sensor indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicTable(Vec<usize>);

impl PeriodicTable {
    pub fn new(table: Vec<usize>, n: usize) -> Result<Self, ScheduleError> {
        if table.is_empty() || table.iter().any(|&s| s >= n) {
            return Err(ScheduleError::InvalidTable(n));
        }
        Ok(Self(table))
    }

    pub fn entries(&self) -> &[usize] {
        &self.0
    }

    pub fn period(&self) -> usize {
        self.0.len()
    }

    pub fn scheduled(&self, k: u64) -> usize {
        self.0[(k % self.0.len() as u64) as usize]
    }
}

pub fn periodic_step(table: &PeriodicTable, n: usize, k: u64) -> Decision {
    let s = table.scheduled(k);
    let mut order = vec![s];
    order.extend((0..n).filter(|&i| i != s));
    let mut alphas = vec![f64::INFINITY; n];
    alphas[s] = 0.0;
    Decision {
        queue: Queue::new(order).expect("permutation by construction"),
        alphas,
    }
}
