//! Average-cost MDP over the remote covariances, discretized and solved by
//! relative value iteration.
//!
//! Every reachable covariance of sensor `i` is a convex combination of
//! `{h^j(P̄_i)}`, so a sensor state is stored as a coefficient vector over
//! `h^0(P̄), …, h^D(P̄)`. Resets, predictions and holds act exactly on these
//! vectors (mass that would move past depth `D` stays at `D`). New vectors
//! are snapped to an existing grid point of the same sensor when their traces
//! differ by at most `1/L` relative; otherwise they become a new point.
//! Joint states are tuples of per-sensor points reachable from `(P̄, …, P̄)`.
//!
//! Actions pair a priority queue with one `α̂` per non-last queue position,
//! drawn from a uniform grid on `[0, 1]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::CovMaps;
use crate::model::symmetrize;
use crate::scheduling::{greedy_order, OneStepProblem, Queue};
use crate::trigger::{beta_from_hat, numerical_rank};

pub const POLICY_FORMAT: &str = "eventsched-mdp-policy";
pub const POLICY_VERSION: u32 = 1;
/// Allowed deviation of a transition row sum from one.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("state grid exceeded the cap of {cap} states; use fewer quantization levels or a smaller depth")]
    StateCap { cap: usize },
    #[error("invalid grid settings: {0}")]
    Settings(String),
    #[error(
        "relative value iteration did not converge in {iterations} sweeps (last spans {tail:?})"
    )]
    NotConverged { iterations: usize, tail: Vec<f64> },
    #[error("transition row ({state}, {action}) sums to {sum}")]
    RowSum {
        state: usize,
        action: usize,
        sum: f64,
    },
    #[error("policy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("policy file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdpSettings {
    /// Deepest prediction power `D` kept in the coefficient vectors.
    pub depth: usize,
    /// Quantization levels `L`: snapping tolerance is `1/L` relative trace.
    pub levels: usize,
    /// Number of uniformly spaced `α̂` values in `[0, 1]`.
    pub alpha_grid: usize,
    pub state_cap: usize,
    /// Stop once the span of the Bellman residual drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Self-loop weight mixed into every sweep so periodic chains converge;
    /// `1` is plain relative value iteration.
    pub aperiodicity: f64,
}

impl Default for MdpSettings {
    fn default() -> Self {
        Self {
            depth: 8,
            levels: 32,
            alpha_grid: 10,
            state_cap: 20_000,
            tol: 1e-6,
            max_iter: 10_000,
            aperiodicity: 0.5,
        }
    }
}

impl MdpSettings {
    fn validate(&self) -> Result<(), MdpError> {
        if self.depth < 1 {
            return Err(MdpError::Settings("depth must be at least 1".into()));
        }
        if self.levels < 2 {
            return Err(MdpError::Settings("levels must be at least 2".into()));
        }
        if self.alpha_grid < 2 {
            return Err(MdpError::Settings(
                "alpha grid needs at least the two end points".into(),
            ));
        }
        if !(self.aperiodicity > 0.0 && self.aperiodicity <= 1.0) {
            return Err(MdpError::Settings("aperiodicity must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        (0..self.alpha_grid)
            .map(|i| i as f64 / (self.alpha_grid - 1) as f64)
            .collect()
    }
}

/// Finite MDP with sparse transition rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    /// `cost[s][a]`.
    pub cost: Vec<Vec<f64>>,
    /// `transitions[s][a]` = list of `(successor, probability)`.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
}

impl FiniteMdp {
    pub fn n_states(&self) -> usize {
        self.cost.len()
    }

    pub fn check_rows(&self) -> Result<(), MdpError> {
        for (s, rows) in self.transitions.iter().enumerate() {
            for (a, row) in rows.iter().enumerate() {
                let sum: f64 = row.iter().map(|(_, p)| p).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MdpError::RowSum {
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RviSolution {
    /// Chosen action per state.
    pub policy: Vec<usize>,
    pub average_cost: f64,
    pub relative_values: Vec<f64>,
    pub iterations: usize,
    pub final_span: f64,
}

fn bellman(mdp: &FiniteMdp, values: &[f64]) -> Vec<(f64, usize)> {
    (0..mdp.n_states())
        .into_par_iter()
        .map(|s| {
            let mut best = (f64::INFINITY, 0);
            for (a, row) in mdp.transitions[s].iter().enumerate() {
                let q = mdp.cost[s][a] + row.iter().map(|&(t, p)| p * values[t]).sum::<f64>();
                // strict improvement keeps the lowest index on ties
                if q < best.0 - 1e-12 * q.abs().max(1.0) {
                    best = (q, a);
                }
            }
            best
        })
        .collect()
}

/// Relative value iteration with reference state 0.
///
/// Each sweep computes `w = T h` and moves `h ← (1 − τ) h + τ (w − w(0))`
/// with `τ` = `aperiodicity`; the fixed point is the same as for plain
/// RVI. The average cost is the midpoint of the residual `w − h` range.
pub fn relative_value_iteration(
    mdp: &FiniteMdp,
    tol: f64,
    max_iter: usize,
    aperiodicity: f64,
) -> Result<RviSolution, MdpError> {
    let n = mdp.n_states();
    let mut h = vec![0.0; n];
    let mut spans = Vec::new();
    for it in 1..=max_iter {
        let w = bellman(mdp, &h);
        let (lo, hi) = w
            .iter()
            .zip(&h)
            .map(|((wv, _), hv)| wv - hv)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            });
        let span = hi - lo;
        spans.push(span);
        if span < tol {
            return Ok(RviSolution {
                policy: w.iter().map(|(_, a)| *a).collect(),
                average_cost: 0.5 * (lo + hi),
                relative_values: h,
                iterations: it,
                final_span: span,
            });
        }
        let w0 = w[0].0;
        for (hv, (wv, _)) in h.iter_mut().zip(&w) {
            *hv = (1.0 - aperiodicity) * *hv + aperiodicity * (wv - w0);
        }
    }
    let tail = spans[spans.len().saturating_sub(5)..].to_vec();
    Err(MdpError::NotConverged {
        iterations: max_iter,
        tail,
    })
}

/// Coefficient vectors of one sensor.
#[derive(Debug, Clone)]
pub struct SensorGrid {
    basis: Vec<DMatrix<f64>>,
    basis_traces: Vec<f64>,
    maps: CovMaps,
    pub coeffs: Vec<Vec<f64>>,
    pub traces: Vec<f64>,
    pub ranks: Vec<usize>,
    sorted: Vec<(f64, usize)>,
    levels: usize,
}

impl SensorGrid {
    fn new(maps: &CovMaps, depth: usize, levels: usize) -> Self {
        let mut basis = vec![maps.p_bar().clone()];
        for j in 1..=depth {
            let next = maps.h(&basis[j - 1]);
            basis.push(next);
        }
        let basis_traces = basis.iter().map(|b| b.trace()).collect();
        let mut g = Self {
            basis,
            basis_traces,
            maps: maps.clone(),
            coeffs: Vec::new(),
            traces: Vec::new(),
            ranks: Vec::new(),
            sorted: Vec::new(),
            levels,
        };
        let mut e0 = vec![0.0; depth + 1];
        e0[0] = 1.0;
        g.snap_or_insert(e0);
        g
    }

    fn depth(&self) -> usize {
        self.basis.len() - 1
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    fn trace_of(&self, c: &[f64]) -> f64 {
        c.iter().zip(&self.basis_traces).map(|(a, b)| a * b).sum()
    }

    fn matrix_of(&self, c: &[f64]) -> DMatrix<f64> {
        let d = self.maps.dim();
        c.iter()
            .zip(&self.basis)
            .fold(DMatrix::zeros(d, d), |acc, (w, b)| acc + b * *w)
    }

    fn reset(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.depth() + 1];
        c[0] = 1.0;
        c
    }

    fn predict(&self, c: &[f64]) -> Vec<f64> {
        let d = self.depth();
        let mut out = vec![0.0; d + 1];
        for (j, w) in c.iter().enumerate() {
            out[(j + 1).min(d)] += w;
        }
        out
    }

    fn hold(&self, c: &[f64], alpha_hat: f64) -> Vec<f64> {
        let mut out = self.predict(c);
        for w in out.iter_mut() {
            *w *= alpha_hat;
        }
        out[0] += 1.0 - alpha_hat;
        out
    }

    /// Index of the point nearest in trace, lowest index on ties.
    pub fn nearest(&self, trace: f64) -> usize {
        let pos = self.sorted.partition_point(|(t, _)| *t < trace);
        let mut best: Option<(f64, usize)> = None;
        // neighbors on both sides, widened to catch equal-trace duplicates
        let lo = pos.saturating_sub(2);
        let hi = (pos + 2).min(self.sorted.len());
        for &(t, idx) in &self.sorted[lo..hi] {
            let d = (t - trace).abs();
            match best {
                Some((bd, bi)) if d > bd || (d == bd && idx > bi) => {}
                _ => best = Some((d, idx)),
            }
        }
        best.expect("grid is never empty").1
    }

    fn snap_or_insert(&mut self, c: Vec<f64>) -> usize {
        let tr = self.trace_of(&c);
        if !self.sorted.is_empty() {
            let k = self.nearest(tr);
            if (tr - self.traces[k]).abs() <= self.traces[k] / self.levels as f64 {
                return k;
            }
        }
        let idx = self.coeffs.len();
        let m = self.matrix_of(&c);
        let sigma = symmetrize(&(self.maps.h(&m) - self.maps.p_bar()));
        self.ranks.push(numerical_rank(&sigma));
        self.coeffs.push(c);
        self.traces.push(tr);
        let pos = self.sorted.partition_point(|(t, i)| (*t, *i) < (tr, idx));
        self.sorted.insert(pos, (tr, idx));
        idx
    }
}

/// An action: queue plus one `α̂` per non-last position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// `None` means "greedy order of the current state".
    pub queue: Option<Queue>,
    pub hats: Vec<f64>,
}

/// Discretized model: grids, joint states, actions and kernel.
#[derive(Debug, Clone)]
pub struct MdpModel {
    pub settings: MdpSettings,
    pub grids: Vec<SensorGrid>,
    pub states: Vec<Vec<usize>>,
    pub actions: Vec<Action>,
    pub mdp: FiniteMdp,
    index: HashMap<Vec<usize>, usize>,
    maps: Vec<CovMaps>,
}

fn action_set(n: usize, settings: &MdpSettings) -> Vec<Action> {
    let vals = settings.alpha_values();
    let m = n.saturating_sub(1);
    let mut hat_vectors: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..m {
        hat_vectors = hat_vectors
            .into_iter()
            .flat_map(|v| {
                vals.iter().map(move |&a| {
                    let mut w = v.clone();
                    w.push(a);
                    w
                })
            })
            .collect();
    }
    let queues: Vec<Option<Queue>> = if n <= 3 {
        Queue::all(n).into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    let mut out = Vec::new();
    for q in &queues {
        for hats in &hat_vectors {
            out.push(Action {
                queue: q.clone(),
                hats: hats.clone(),
            });
        }
    }
    out
}

impl MdpModel {
    /// Builds the reachable grid by breadth-first closure from `(P̄, …, P̄)`
    /// together with the transition kernel.
    pub fn build(maps: &[CovMaps], settings: &MdpSettings) -> Result<Self, MdpError> {
        settings.validate()?;
        let n = maps.len();
        let grids = maps
            .iter()
            .map(|m| SensorGrid::new(m, settings.depth, settings.levels))
            .collect();
        let mut model = Self {
            settings: settings.clone(),
            grids,
            states: Vec::new(),
            actions: action_set(n, settings),
            mdp: FiniteMdp {
                cost: Vec::new(),
                transitions: Vec::new(),
            },
            index: HashMap::new(),
            maps: maps.to_vec(),
        };
        model.intern(vec![0; n])?;
        let mut next = 0;
        while next < model.states.len() {
            let rows: Vec<Vec<(usize, f64)>> = (0..model.actions.len())
                .map(|a| model.expand(next, a))
                .collect::<Result<_, _>>()?;
            let cost = model.stage_cost(next);
            model.mdp.cost.push(vec![cost; model.actions.len()]);
            model.mdp.transitions.push(rows);
            next += 1;
        }
        Ok(model)
    }

    fn intern(&mut self, tuple: Vec<usize>) -> Result<usize, MdpError> {
        if let Some(&i) = self.index.get(&tuple) {
            return Ok(i);
        }
        if self.states.len() >= self.settings.state_cap {
            return Err(MdpError::StateCap {
                cap: self.settings.state_cap,
            });
        }
        let i = self.states.len();
        self.index.insert(tuple.clone(), i);
        self.states.push(tuple);
        Ok(i)
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// `Σ_i Tr P_i` of a joint state.
    pub fn stage_cost(&self, state: usize) -> f64 {
        self.states[state]
            .iter()
            .enumerate()
            .map(|(i, &p)| self.grids[i].traces[p])
            .sum()
    }

    /// Queue an action resolves to in a given state.
    pub fn queue_for(&self, state: usize, action: usize) -> Queue {
        match &self.actions[action].queue {
            Some(q) => q.clone(),
            None => {
                let tuple = &self.states[state];
                let covs: Vec<DMatrix<f64>> = tuple
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| self.grids[i].matrix_of(&self.grids[i].coeffs[p]))
                    .collect();
                greedy_order(&OneStepProblem::new(&self.maps, &covs))
            }
        }
    }

    fn expand(&mut self, state: usize, action: usize) -> Result<Vec<(usize, f64)>, MdpError> {
        let tuple = self.states[state].clone();
        let queue = self.queue_for(state, action);
        let hats = self.actions[action].hats.clone();
        let n = queue.len();
        let order = queue.order();
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut free = 1.0;
        for m in 0..n {
            let s_m = order[m];
            let prob = if m + 1 == n {
                free
            } else {
                let beta = beta_from_hat(hats[m], self.grids[s_m].ranks[tuple[s_m]]);
                let p = free * (1.0 - beta);
                free *= beta;
                p
            };
            if prob <= 0.0 {
                continue;
            }
            let mut succ = vec![0; n];
            for (pos, &s) in order.iter().enumerate() {
                let g = &self.grids[s];
                let c = &g.coeffs[tuple[s]];
                let nc = match pos.cmp(&m) {
                    std::cmp::Ordering::Less => g.hold(c, hats[pos]),
                    std::cmp::Ordering::Equal => g.reset(),
                    std::cmp::Ordering::Greater => g.predict(c),
                };
                succ[s] = self.grids[s].snap_or_insert(nc);
            }
            let idx = self.intern(succ)?;
            match out.iter_mut().find(|(t, _)| *t == idx) {
                Some(e) => e.1 += prob,
                None => out.push((idx, prob)),
            }
        }
        Ok(out)
    }

    /// Successor distribution of `(state, action)`.
    pub fn transition_law(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.mdp.transitions[state][action]
    }

    pub fn state_index(&self, tuple: &[usize]) -> Option<usize> {
        self.index.get(tuple).copied()
    }

    pub fn solve(&self) -> Result<MdpPolicy, MdpError> {
        let sol = relative_value_iteration(
            &self.mdp,
            self.settings.tol,
            self.settings.max_iter,
            self.settings.aperiodicity,
        )?;
        Ok(MdpPolicy::from_solution(self, &sol))
    }
}

/// One grid point of a sensor as persisted in the policy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGridPoint {
    pub coeffs: Vec<f64>,
    pub trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub queue: Queue,
    pub alpha_hats: Vec<f64>,
}

/// Stationary policy over the discretized states, with everything needed to
/// apply it online.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpPolicy {
    pub format: String,
    pub version: u32,
    pub settings: MdpSettings,
    pub average_cost: f64,
    pub iterations: usize,
    pub grids: Vec<Vec<PolicyGridPoint>>,
    pub states: Vec<Vec<usize>>,
    pub actions: Vec<PolicyEntry>,
    pub relative_values: Vec<f64>,
    #[serde(skip)]
    index: HashMap<Vec<usize>, usize>,
    #[serde(skip)]
    sorted: Vec<Vec<(f64, usize)>>,
}

impl MdpPolicy {
    fn from_solution(model: &MdpModel, sol: &RviSolution) -> Self {
        let grids = model
            .grids
            .iter()
            .map(|g| {
                g.coeffs
                    .iter()
                    .zip(&g.traces)
                    .map(|(c, t)| PolicyGridPoint {
                        coeffs: c.clone(),
                        trace: *t,
                    })
                    .collect()
            })
            .collect();
        let actions = sol
            .policy
            .iter()
            .enumerate()
            .map(|(s, &a)| PolicyEntry {
                queue: model.queue_for(s, a),
                alpha_hats: model.actions[a].hats.clone(),
            })
            .collect();
        let mut p = Self {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            settings: model.settings.clone(),
            average_cost: sol.average_cost,
            iterations: sol.iterations,
            grids,
            states: model.states.clone(),
            actions,
            relative_values: sol.relative_values.clone(),
            index: HashMap::new(),
            sorted: Vec::new(),
        };
        p.rebuild_index();
        p
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .states
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.sorted = self
            .grids
            .iter()
            .map(|g| {
                let mut v: Vec<(f64, usize)> =
                    g.iter().enumerate().map(|(i, p)| (p.trace, i)).collect();
                v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                v
            })
            .collect();
    }

    pub fn n_sensors(&self) -> usize {
        self.grids.len()
    }

    fn nearest_point(&self, sensor: usize, trace: f64) -> usize {
        let sorted = &self.sorted[sensor];
        let pos = sorted.partition_point(|(t, _)| *t < trace);
        let lo = pos.saturating_sub(2);
        let hi = (pos + 2).min(sorted.len());
        let mut best: Option<(f64, usize)> = None;
        for &(t, idx) in &sorted[lo..hi] {
            let d = (t - trace).abs();
            match best {
                Some((bd, bi)) if d > bd || (d == bd && idx > bi) => {}
                _ => best = Some((d, idx)),
            }
        }
        best.expect("non-empty grid").1
    }

    /// Grid state nearest to the given covariances by summed trace distance.
    pub fn snap(&self, covs: &[DMatrix<f64>]) -> usize {
        let traces: Vec<f64> = covs.iter().map(|c| c.trace()).collect();
        let tuple: Vec<usize> = traces
            .iter()
            .enumerate()
            .map(|(i, &t)| self.nearest_point(i, t))
            .collect();
        if let Some(&s) = self.index.get(&tuple) {
            return s;
        }
        let mut best = (f64::INFINITY, 0);
        for (s, t) in self.states.iter().enumerate() {
            let d: f64 = t
                .iter()
                .enumerate()
                .map(|(i, &p)| (self.grids[i][p].trace - traces[i]).abs())
                .sum();
            if d < best.0 {
                best = (d, s);
            }
        }
        best.1
    }

    /// Online lookup: queue and `α̂` per non-last queue position.
    pub fn step(&self, covs: &[DMatrix<f64>]) -> (Queue, Vec<f64>) {
        let e = &self.actions[self.snap(covs)];
        (e.queue.clone(), e.alpha_hats.clone())
    }

    pub fn save_json(&self, path: &Path) -> Result<(), MdpError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        let mut p: MdpPolicy = serde_json::from_str(text)?;
        if p.format != POLICY_FORMAT {
            return Err(MdpError::Format(format!(
                "unexpected format tag {:?}",
                p.format
            )));
        }
        if p.version != POLICY_VERSION {
            return Err(MdpError::Format(format!(
                "unsupported version {}",
                p.version
            )));
        }
        if p.actions.len() != p.states.len() || p.states.is_empty() {
            return Err(MdpError::Format("one action per state required".into()));
        }
        p.rebuild_index();
        Ok(p)
    }

    pub fn load_json(path: &Path) -> Result<Self, MdpError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
