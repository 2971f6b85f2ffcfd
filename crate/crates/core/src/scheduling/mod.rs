//! Channel resolution and the schedulers that drive it.
//!
//! Every slot the estimator broadcasts a priority queue and one trigger
//! intensity per sensor. Walking the queue, the first sensor whose trigger
//! fires takes the channel; if nobody before the last sensor fires, the last
//! one transmits unconditionally. Sensor indices are zero-based throughout.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::CovMaps;
use crate::mdp::MdpPolicy;
use crate::trigger::alpha_from_hat;

pub mod greedy;
pub mod periodic;

pub use greedy::{
    expected_one_step_cost, greedy_alphas, greedy_alphas_numeric, greedy_last_pair_alpha,
    greedy_order, GreedySettings, OneStepProblem,
};
pub use periodic::{periodic_step, PeriodicTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("queue {0:?} is not a permutation of 0..{1}")]
    InvalidQueue(Vec<usize>, usize),
    #[error("periodic table must be non-empty with entries below {0}")]
    InvalidTable(usize),
    #[error("expected {expected} per-sensor values, got {got}")]
    Arity { expected: usize, got: usize },
}

/// Priority order for one slot; position 0 listens first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Queue(Vec<usize>);

impl Queue {
    pub fn new(order: Vec<usize>) -> Result<Self, ScheduleError> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || seen[i] {
                return Err(ScheduleError::InvalidQueue(order, n));
            }
            seen[i] = true;
        }
        if n == 0 {
            return Err(ScheduleError::InvalidQueue(order, 0));
        }
        Ok(Self(order))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn order(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("queue is non-empty")
    }

    /// Position of every sensor in the queue.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.0.len()];
        for (p, &s) in self.0.iter().enumerate() {
            pos[s] = p;
        }
        pos
    }

    /// All permutations of `0..n` in lexicographic order.
    pub fn all(n: usize) -> Vec<Queue> {
        let mut out = Vec::new();
        let mut cur: Vec<usize> = (0..n).collect();
        loop {
            out.push(Queue(cur.clone()));
            // next lexicographic permutation
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                break;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
            cur.swap(i - 1, j);
            cur[i..].reverse();
        }
        out
    }
}

impl TryFrom<Vec<usize>> for Queue {
    type Error = ScheduleError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Queue::new(v)
    }
}

impl From<Queue> for Vec<usize> {
    fn from(q: Queue) -> Self {
        q.0
    }
}

/// Indicators of one slot, indexed by sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmissionOutcome {
    pub eta: Vec<bool>,
    pub mu: Vec<bool>,
    pub gamma: Vec<bool>,
    pub transmitter: usize,
}

/// Walks the queue: the first sensor with `η = 1` transmits, everybody after
/// it finds the channel busy. The last sensor ignores its own `η`.
pub fn resolve_channel(queue: &Queue, eta: &[bool]) -> TransmissionOutcome {
    let n = queue.len();
    assert_eq!(eta.len(), n, "one trigger draw per sensor");
    let mut mu = vec![false; n];
    let mut gamma = vec![false; n];
    let mut transmitter = None;
    for (pos, &s) in queue.order().iter().enumerate() {
        if transmitter.is_some() {
            continue;
        }
        mu[s] = true;
        if pos + 1 == n || eta[s] {
            gamma[s] = true;
            transmitter = Some(s);
        }
    }
    TransmissionOutcome {
        eta: eta.to_vec(),
        mu,
        gamma,
        transmitter: transmitter.expect("last sensor always transmits on a free channel"),
    }
}

/// Queue and trigger intensities for one slot. `alphas` is indexed by sensor.
/// The value of the last sensor in the queue is never read; builders that
/// have nothing better to put there use `0`, the intensity that matches
/// "transmit whenever the channel is free".
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub queue: Queue,
    pub alphas: Vec<f64>,
}

impl Decision {
    /// Builds a decision from normalized intensities given per queue position
    /// (length `n − 1`).
    pub fn from_position_hats(queue: Queue, hats: &[f64]) -> Self {
        let n = queue.len();
        debug_assert_eq!(hats.len(), n.saturating_sub(1));
        let mut alphas = vec![0.0; n];
        for (pos, &s) in queue.order().iter().enumerate().take(n - 1) {
            alphas[s] = alpha_from_hat(hats[pos].clamp(0.0, 1.0));
        }
        Self { queue, alphas }
    }
}

/// The three scheduler families.
#[derive(Debug, Clone)]
pub enum SchedulePolicy {
    /// Time-based: a repeating table of transmitters.
    Periodic(PeriodicTable),
    /// One-step lookahead recomputed every slot.
    Greedy(GreedySettings),
    /// Stationary policy of the discretized average-cost MDP.
    Mdp(Arc<MdpPolicy>),
}

impl SchedulePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulePolicy::Periodic(_) => "offline",
            SchedulePolicy::Greedy(_) => "greedy",
            SchedulePolicy::Mdp(_) => "mdp",
        }
    }

    /// Decision for slot `k` given the broadcast covariances `P_i(k−1)`.
    pub fn decide(&self, maps: &[CovMaps], states: &[DMatrix<f64>], k: u64) -> Decision {
        match self {
            SchedulePolicy::Periodic(table) => periodic_step(table, maps.len(), k),
            SchedulePolicy::Greedy(settings) => {
                let problem = OneStepProblem::new(maps, states);
                let queue = greedy_order(&problem);
                let hats = greedy_alphas(&queue, &problem, settings);
                Decision::from_position_hats(queue, &hats)
            }
            SchedulePolicy::Mdp(policy) => {
                let (queue, hats) = policy.step(states);
                Decision::from_position_hats(queue, &hats)
            }
        }
    }
}
