//! Greedy scheduler: every slot, pick the queue and trigger intensities that
//! minimize the expected total trace of the next covariances.
//!
//! The one-step cost only involves traces, so a slot is summarized by three
//! numbers per sensor: `Tr P̄`, `Tr h(P)` and the rank of `Σ = h(P) − P̄`.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Queue;
use crate::estimator::CovMaps;
use crate::model::symmetrize;
use crate::optimize::golden_section;
use crate::trigger::{beta_from_hat, numerical_rank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GreedySettings {
    /// Random starting points in addition to the all-0.5 start.
    pub restarts: usize,
    pub seed: u64,
    /// Bracket length at which golden-section search stops (on `α̂`).
    pub tol: f64,
    /// Sweeps stop once a full pass improves the cost by less than this.
    pub improvement_tol: f64,
    pub max_sweeps: usize,
    /// Use the exact minimizer when only two sensors share the channel.
    pub closed_form_pair: bool,
}

impl Default for GreedySettings {
    fn default() -> Self {
        Self {
            restarts: 3,
            seed: 0x5eed,
            tol: 1e-6,
            improvement_tol: 1e-9,
            max_sweeps: 200,
            closed_form_pair: true,
        }
    }
}

/// Per-sensor data of one greedy decision.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepProblem {
    pub tr_p_bar: Vec<f64>,
    pub tr_h: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl OneStepProblem {
    pub fn new(maps: &[CovMaps], states: &[DMatrix<f64>]) -> Self {
        assert_eq!(maps.len(), states.len());
        let mut tr_p_bar = Vec::with_capacity(maps.len());
        let mut tr_h = Vec::with_capacity(maps.len());
        let mut ranks = Vec::with_capacity(maps.len());
        for (m, p) in maps.iter().zip(states) {
            let hp = m.h(p);
            tr_p_bar.push(m.p_bar().trace());
            tr_h.push(hp.trace());
            ranks.push(numerical_rank(&symmetrize(&(hp - m.p_bar()))));
        }
        Self {
            tr_p_bar,
            tr_h,
            ranks,
        }
    }

    pub fn len(&self) -> usize {
        self.tr_p_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tr_p_bar.is_empty()
    }

    /// `Tr[h(P) − P̄]`.
    pub fn innovation(&self, i: usize) -> f64 {
        self.tr_h[i] - self.tr_p_bar[i]
    }
}

/// Sensors by decreasing `Tr[h(P) − P̄]`, ties broken by lower index.
pub fn greedy_order(problem: &OneStepProblem) -> Queue {
    if problem.ranks.windows(2).any(|w| w[0] != w[1]) {
        // routine in closed loop (a fresh sensor has rank dim y), so say it once
        static WARNED: AtomicBool = AtomicBool::new(false);
        if !WARNED.swap(true, Ordering::Relaxed) {
            warn!(
                "innovation ranks differ across sensors ({:?}); the trace ordering is only a heuristic here",
                problem.ranks
            );
        } else {
            debug!("unequal innovation ranks {:?}", problem.ranks);
        }
    }
    let mut order: Vec<usize> = (0..problem.len()).collect();
    order.sort_by(|&a, &b| {
        problem
            .innovation(b)
            .total_cmp(&problem.innovation(a))
            .then(a.cmp(&b))
    });
    Queue::new(order).expect("permutation by construction")
}

/// `Σ_i Tr E[P_i(k)]` for a queue and normalized intensities given per
/// queue position (the last position has none).
pub fn expected_one_step_cost(queue: &Queue, problem: &OneStepProblem, hats: &[f64]) -> f64 {
    let n = queue.len();
    debug_assert_eq!(hats.len(), n.saturating_sub(1));
    let mut free = 1.0;
    let mut cost = 0.0;
    for (pos, &s) in queue.order().iter().enumerate() {
        let (pb, h) = (problem.tr_p_bar[s], problem.tr_h[s]);
        if pos + 1 == n {
            cost += free * pb + (1.0 - free) * h;
            break;
        }
        let ah = hats[pos];
        let beta = beta_from_hat(ah, problem.ranks[s]);
        let held = (1.0 - ah) * pb + ah * h;
        cost += free * (1.0 - beta) * pb + free * beta * held + (1.0 - free) * h;
        free *= beta;
    }
    cost
}

/// Exact minimizer for the last pair of the queue: `min(1, ℓλ/(ℓ+2))` with
/// `λ` the ratio of the last sensor's innovation trace to the one before it
/// and `ℓ` the rank of the one before it.
pub fn greedy_last_pair_alpha(lambda: f64, ell: usize) -> f64 {
    let l = ell as f64;
    (l * lambda / (l + 2.0)).clamp(0.0, 1.0)
}

/// Greedy intensities for a given queue, one `α̂` per queue position except
/// the last.
pub fn greedy_alphas(
    queue: &Queue,
    problem: &OneStepProblem,
    settings: &GreedySettings,
) -> Vec<f64> {
    match queue.len() {
        1 => Vec::new(),
        2 if settings.closed_form_pair => {
            let (first, last) = (queue.order()[0], queue.order()[1]);
            let d_first = problem.innovation(first);
            let d_last = problem.innovation(last);
            let lambda = if d_first > 0.0 {
                d_last / d_first
            } else {
                f64::INFINITY
            };
            vec![greedy_last_pair_alpha(lambda, problem.ranks[first])]
        }
        _ => greedy_alphas_numeric(queue, problem, settings),
    }
}

/// Coordinate descent over `α̂ ∈ [0, 1]^{n−1}` with golden-section line
/// searches, from the all-0.5 point plus seeded random restarts.
pub fn greedy_alphas_numeric(
    queue: &Queue,
    problem: &OneStepProblem,
    settings: &GreedySettings,
) -> Vec<f64> {
    let m = queue.len().saturating_sub(1);
    if m == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut starts = vec![vec![0.5; m]];
    for _ in 0..settings.restarts {
        starts.push((0..m).map(|_| rng.random::<f64>()).collect());
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let (x, fx) = descend(queue, problem, settings, start);
        if best.as_ref().is_none_or(|(_, fb)| fx < *fb) {
            best = Some((x, fx));
        }
    }
    best.expect("at least one start").0
}

fn descend(
    queue: &Queue,
    problem: &OneStepProblem,
    settings: &GreedySettings,
    mut x: Vec<f64>,
) -> (Vec<f64>, f64) {
    let mut fx = expected_one_step_cost(queue, problem, &x);
    for _ in 0..settings.max_sweeps {
        let before = fx;
        for j in 0..x.len() {
            let mut trial = x.clone();
            let (xj, fj) = golden_section(
                |v| {
                    trial[j] = v;
                    expected_one_step_cost(queue, problem, &trial)
                },
                0.0,
                1.0,
                settings.tol,
            );
            if fj <= fx {
                x[j] = xj;
                fx = fj;
            }
        }
        if before - fx < settings.improvement_tol {
            break;
        }
    }
    (x, fx)
}
