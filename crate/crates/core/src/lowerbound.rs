//! Relaxed-schedule lower bound on the optimal average cost.
//!
//! Dropping the one-transmission-per-slot constraint in favour of an average
//! rate budget `Σ_i ϱ_i ≤ 1` decouples the sensors. Each sensor then picks a
//! trigger sequence `β^0, β^1, …` (indexed by slots since its last
//! transmission) minimizing its own cost at rate `ϱ_i`; the best split of the
//! budget gives a bound no admissible schedule can beat.
//!
//! With `π^j = ϱ ∏_{ℓ<j} β^ℓ` the mass of "held for `j` slots", the sensor
//! cost is `Σ_j π^j Tr P^j` under `Σ_j π^j = 1`, where `P^0 = P̄` and
//! `P^{j+1} = t(P^j, α̂^j)` with `α̂^j = (β^j)^{2/r_j}`, `r_j` the rank of
//! `h(P^j) − P̄`. The sequence is truncated at `ℓ_max`: `β^{ℓ_max−1} = 0`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::CovMaps;
use crate::model::symmetrize;
use crate::optimize::golden_section;
use crate::scheduling::Queue;
use crate::trigger::numerical_rank;

pub const DEFAULT_ELL_MAX: usize = 20;
pub const DEFAULT_RATE_GRID: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowerBoundError {
    #[error("rate {rho} is infeasible with ell_max = {ell_max} (needs at least {min:.4}); increase ell_max")]
    Infeasible { rho: f64, ell_max: usize, min: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no feasible rate allocation on a grid of {0}")]
    NoAllocation(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubproblemSettings {
    /// Golden-section bracket tolerance on each `β`.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub max_sweeps: usize,
    pub improvement_tol: f64,
}

impl Default for SubproblemSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            restarts: 3,
            seed: 7,
            max_sweeps: 500,
            improvement_tol: 1e-10,
        }
    }
}

/// `P^j` for `j = 0..=ℓ_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldingCovariances {
    pub p: Vec<DMatrix<f64>>,
}

impl HoldingCovariances {
    pub fn traces(&self) -> Vec<f64> {
        self.p.iter().map(|m| m.trace()).collect()
    }
}

/// Rank of `h(P^j) − P̄` for `j = 0..len`.
///
/// With every earlier `α̂` positive the range of `h(P^j) − P̄` does not depend
/// on their values, so the ranks along `h^{j+1}(P̄)` apply to every
/// sequence that reaches depth `j`.
pub fn holding_ranks(maps: &CovMaps, len: usize) -> Vec<usize> {
    let mut x = maps.p_bar().clone();
    (0..len)
        .map(|_| {
            x = maps.h(&x);
            numerical_rank(&symmetrize(&(&x - maps.p_bar())))
        })
        .collect()
}

fn hold_hat(beta: f64, rank: usize) -> f64 {
    beta.clamp(0.0, 1.0).powf(2.0 / rank.max(1) as f64)
}

/// Holding covariances by the recursion `P^{j+1} = t(P^j, α̂^j)`.
pub fn holding_covariances(maps: &CovMaps, betas: &[f64], ranks: &[usize]) -> HoldingCovariances {
    let mut p = vec![maps.p_bar().clone()];
    for (&b, &r) in betas.iter().zip(ranks) {
        let next = maps.t_hat(p.last().unwrap(), hold_hat(b, r));
        p.push(next);
    }
    HoldingCovariances { p }
}

/// Same quantities written out as combinations of `h^s(P̄)`:
/// `P^j = ∏_{u<j} α̂^u h^j(P̄) + Σ_{s=1}^{j} (1 − α̂^{s−1}) ∏_{u=s}^{j−1} α̂^u h^{j−s}(P̄)`.
pub fn holding_covariances_closed_form(
    maps: &CovMaps,
    betas: &[f64],
    ranks: &[usize],
) -> HoldingCovariances {
    let hats: Vec<f64> = betas
        .iter()
        .zip(ranks)
        .map(|(&b, &r)| hold_hat(b, r))
        .collect();
    let powers: Vec<DMatrix<f64>> = (0..=betas.len()).map(|j| maps.h_iter_p_bar(j)).collect();
    let mut p = Vec::with_capacity(betas.len() + 1);
    for j in 0..=betas.len() {
        let lead: f64 = hats[..j].iter().product();
        let mut m = &powers[j] * lead;
        for s in 1..=j {
            let w = (1.0 - hats[s - 1]) * hats[s..j].iter().product::<f64>();
            m += &powers[j - s] * w;
        }
        p.push(m);
    }
    HoldingCovariances { p }
}

/// Trace-level description of one sensor: `T_m = Tr h^m(P̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTraces {
    pub t: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl SensorTraces {
    pub fn new(maps: &CovMaps, ell_max: usize) -> Self {
        let mut t = Vec::with_capacity(ell_max + 1);
        let mut x = maps.p_bar().clone();
        for _ in 0..=ell_max {
            t.push(x.trace());
            x = maps.h(&x);
        }
        Self {
            t,
            ranks: holding_ranks(maps, ell_max),
        }
    }

    fn ell_max(&self) -> usize {
        self.t.len() - 1
    }

    /// `Tr P^j` for `j = 0..=ℓ_max` under the given `β`.
    pub fn holding_traces(&self, betas: &[f64]) -> Vec<f64> {
        let m = self.t.len();
        // u[m'] = Tr h^{m'}(P^j), kept for the m' still needed
        let mut u = self.t.clone();
        let mut out = Vec::with_capacity(betas.len() + 1);
        out.push(u[0]);
        for (j, &b) in betas.iter().enumerate() {
            let a = hold_hat(b, self.ranks[j]);
            let keep = m - j - 1;
            for k in 0..keep {
                u[k] = (1.0 - a) * self.t[k] + a * u[k + 1];
            }
            out.push(u[0]);
        }
        out
    }

    /// `(cost, rate)` of a trigger sequence: rate `1 / (1 + Σ_j ∏_{ℓ≤j} β^ℓ)`,
    /// cost `rate · (Tr P^0 + Σ_j ∏_{ℓ≤j} β^ℓ Tr P^{j+1})`.
    pub fn evaluate(&self, betas: &[f64]) -> (f64, f64) {
        let tr = self.holding_traces(betas);
        let mut prod = 1.0;
        let mut num = tr[0];
        let mut den = 1.0;
        for (j, &b) in betas.iter().enumerate() {
            prod *= b;
            if prod == 0.0 {
                break;
            }
            num += prod * tr[j + 1];
            den += prod;
        }
        (num / den, 1.0 / den)
    }
}

/// Optimal trigger sequence of one sensor at rate `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSolution {
    pub rho: f64,
    pub betas: Vec<f64>,
    pub cost: f64,
}

/// `β^0` that restores `ϱ (1 + β^0 R) = 1` given the tail sum
/// `R = 1 + β^1 + β^1 β^2 + …`.
fn tail_sum(betas: &[f64]) -> f64 {
    let mut r = 1.0;
    let mut prod = 1.0;
    for &b in &betas[1..] {
        prod *= b;
        if prod == 0.0 {
            break;
        }
        r += prod;
    }
    r
}

fn lead_beta(rho: f64, betas: &[f64]) -> f64 {
    (1.0 / rho - 1.0) / tail_sum(betas)
}

/// Minimizes the sensor cost at rate `rho` over `β ∈ [0, 1]^{ℓ_max}` with
/// `β^{ℓ_max−1} = 0`.
///
/// `β^0` is eliminated through the rate equality; the remaining coordinates
/// are swept by golden-section search, each restricted to the interval that
/// keeps `β^0 ≤ 1`.
pub fn per_sensor_subproblem(
    traces: &SensorTraces,
    rho: f64,
    settings: &SubproblemSettings,
) -> Result<SensorSolution, LowerBoundError> {
    let ell_max = traces.ell_max();
    if ell_max == 0 {
        return Err(LowerBoundError::Argument(
            "ell_max must be at least 1".into(),
        ));
    }
    if !(rho > 0.0 && rho <= 1.0 + 1e-12) {
        return Err(LowerBoundError::Argument(format!(
            "rate {rho} outside (0, 1]"
        )));
    }
    let rho = rho.min(1.0);
    let min = 1.0 / ell_max as f64;
    if rho < min * (1.0 - 1e-12) {
        return Err(LowerBoundError::Infeasible { rho, ell_max, min });
    }
    if ell_max == 1 || rho >= 1.0 {
        let betas = vec![0.0; ell_max];
        return Ok(SensorSolution {
            rho,
            cost: traces.t[0],
            betas,
        });
    }
    let free = ell_max - 2; // β^1 ..= β^{ℓ_max−2}
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut starts: Vec<Vec<f64>> = vec![
        deterministic_start(rho, ell_max),
        geometric_start(rho, ell_max),
    ];
    for _ in 0..settings.restarts {
        let w: f64 = rng.random();
        let mut s: Vec<f64> = starts[0]
            .iter()
            .zip(&starts[1])
            .map(|(a, b)| w * a + (1.0 - w) * b)
            .collect();
        for v in s.iter_mut().skip(1).take(free) {
            *v = (*v + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
        }
        repair(rho, &mut s);
        starts.push(s);
    }
    let mut best: Option<SensorSolution> = None;
    for s in starts {
        let sol = descend(traces, rho, s, settings);
        if best.as_ref().is_none_or(|b| sol.cost < b.cost) {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Transmit every `⌈1/ϱ⌉` slots, with a fractional last hold.
fn deterministic_start(rho: f64, ell_max: usize) -> Vec<f64> {
    let mut betas = vec![0.0; ell_max];
    let mut remaining = 1.0 / rho - 1.0;
    for b in betas.iter_mut().take(ell_max - 1) {
        if remaining >= 1.0 {
            *b = 1.0;
            remaining -= 1.0;
        } else {
            // prod so far is 1, so β = remaining gives the exact sum
            *b = remaining.max(0.0);
            break;
        }
    }
    betas
}

/// Constant `β` on the first `ℓ_max − 1` slots.
fn geometric_start(rho: f64, ell_max: usize) -> Vec<f64> {
    let target = 1.0 / rho - 1.0;
    let sum = |b: f64| (1..ell_max).map(|j| b.powi(j as i32)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if sum(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut betas = vec![hi; ell_max];
    betas[ell_max - 1] = 0.0;
    repair(rho, &mut betas);
    betas
}

/// Raises tail coordinates until `β^0 ≤ 1`, then sets `β^0` from the rate.
fn repair(rho: f64, betas: &mut [f64]) {
    let n = betas.len();
    let mut j = 1;
    while lead_beta(rho, betas) > 1.0 && j + 1 < n {
        betas[j] = 1.0;
        j += 1;
    }
    betas[n - 1] = 0.0;
    betas[0] = lead_beta(rho, betas).min(1.0);
}

fn descend(
    traces: &SensorTraces,
    rho: f64,
    mut betas: Vec<f64>,
    settings: &SubproblemSettings,
) -> SensorSolution {
    let n = betas.len();
    let eval = |b: &mut Vec<f64>| {
        b[0] = lead_beta(rho, b).min(1.0);
        traces.evaluate(b).0
    };
    let mut fx = eval(&mut betas);
    for _ in 0..settings.max_sweeps {
        let before = fx;
        for j in 1..n - 1 {
            // tail sum is affine in β^j: R = c0 + c1 β^j
            let mut probe = betas.clone();
            probe[j] = 0.0;
            let c0 = tail_sum(&probe);
            probe[j] = 1.0;
            let c1 = tail_sum(&probe) - c0;
            let need = 1.0 / rho - 1.0;
            let lo = if c1 > 0.0 {
                ((need - c0) / c1).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut trial = betas.clone();
            let (bj, fj) = golden_section(
                |v| {
                    trial[j] = v;
                    eval(&mut trial)
                },
                lo,
                1.0,
                settings.tol,
            );
            if fj < fx {
                betas[j] = bj;
                fx = eval(&mut betas);
            }
        }
        if before - fx < settings.improvement_tol * fx.abs().max(1.0) {
            break;
        }
    }
    betas[0] = lead_beta(rho, &betas).min(1.0);
    let (cost, _) = traces.evaluate(&betas);
    SensorSolution { rho, betas, cost }
}

/// Bound, per-sensor allocations and trigger sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundSolution {
    pub sensors: Vec<SensorSolution>,
    pub total: f64,
    pub ell_max: usize,
    pub rate_grid: usize,
}

impl LowerBoundSolution {
    pub fn rates(&self) -> Vec<f64> {
        self.sensors.iter().map(|s| s.rho).collect()
    }
}

/// Best split of the rate budget on the grid `{k / G}`.
///
/// The per-sensor costs are tabulated once for every grid rate and combined
/// by an exact dynamic program over the budget.
pub fn lower_bound(
    maps: &[CovMaps],
    ell_max: usize,
    rate_grid: usize,
) -> Result<LowerBoundSolution, LowerBoundError> {
    lower_bound_with(maps, ell_max, rate_grid, &SubproblemSettings::default())
}

pub fn lower_bound_with(
    maps: &[CovMaps],
    ell_max: usize,
    rate_grid: usize,
    settings: &SubproblemSettings,
) -> Result<LowerBoundSolution, LowerBoundError> {
    let n = maps.len();
    if n == 0 {
        return Err(LowerBoundError::Argument("no systems".into()));
    }
    if ell_max == 0 || rate_grid == 0 {
        return Err(LowerBoundError::Argument(
            "ell_max and rate grid must be positive".into(),
        ));
    }
    if n == 1 {
        let tr = SensorTraces::new(&maps[0], ell_max);
        let s = per_sensor_subproblem(&tr, 1.0, settings)?;
        return Ok(LowerBoundSolution {
            total: s.cost,
            sensors: vec![s],
            ell_max,
            rate_grid,
        });
    }
    let g = rate_grid;
    let traces: Vec<SensorTraces> = maps.iter().map(|m| SensorTraces::new(m, ell_max)).collect();
    // curves[i][k] = sensor i at rate k / G (None when infeasible)
    let curves: Vec<Vec<Option<SensorSolution>>> = traces
        .iter()
        .map(|tr| {
            (0..=g)
                .into_par_iter()
                .map(|k| {
                    if k == 0 {
                        None
                    } else {
                        per_sensor_subproblem(tr, k as f64 / g as f64, settings).ok()
                    }
                })
                .collect()
        })
        .collect();
    // best[i][b] = min cost of sensors 0..=i using exactly b grid units
    let mut best = vec![vec![f64::INFINITY; g + 1]; n];
    let mut choice = vec![vec![0usize; g + 1]; n];
    for b in 1..=g {
        if let Some(s) = &curves[0][b] {
            best[0][b] = s.cost;
            choice[0][b] = b;
        }
    }
    for i in 1..n {
        for b in 1..=g {
            for k in 1..b {
                let Some(s) = &curves[i][k] else { continue };
                let v = best[i - 1][b - k] + s.cost;
                if v < best[i][b] {
                    best[i][b] = v;
                    choice[i][b] = k;
                }
            }
        }
    }
    let (mut b, total) = best[n - 1]
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |acc, (b, &v)| if v < acc.1 { (b, v) } else { acc },
        );
    if !total.is_finite() {
        return Err(LowerBoundError::NoAllocation(g));
    }
    let mut sensors = vec![None; n];
    for i in (0..n).rev() {
        let k = choice[i][b];
        sensors[i] = curves[i][k].clone();
        b -= k;
    }
    Ok(LowerBoundSolution {
        sensors: sensors.into_iter().map(|s| s.expect("allocated")).collect(),
        total,
        ell_max,
        rate_grid,
    })
}

/// Time-invariant queue: sensors by increasing rate, ties by index.
pub fn queue_heuristic_from_rates(rates: &[f64]) -> Queue {
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[a].total_cmp(&rates[b]).then(a.cmp(&b)));
    Queue::new(order).expect("permutation by construction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub scheduler: String,
    pub cost: f64,
    pub std_error: f64,
    /// `J − LB`, an upper bound on the distance to the optimal schedule.
    pub gap_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub lower_bound: f64,
    pub ell_max: usize,
    pub rate_grid: usize,
    pub rates: Vec<f64>,
    pub entries: Vec<GapEntry>,
}

impl GapReport {
    pub fn new(lb: &LowerBoundSolution) -> Self {
        Self {
            lower_bound: lb.total,
            ell_max: lb.ell_max,
            rate_grid: lb.rate_grid,
            rates: lb.rates(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, scheduler: &str, cost: f64, std_error: f64) {
        self.entries.push(GapEntry {
            scheduler: scheduler.into(),
            cost,
            std_error,
            gap_bound: cost - self.lower_bound,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scheduler,cost,std_error,gap_bound\n");
        for e in &self.entries {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                e.scheduler, e.cost, e.std_error, e.gap_bound
            )
            .unwrap();
        }
        writeln!(s, "lower_bound,{:.6},0.000000,0.000000", self.lower_bound).unwrap();
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("gap_report.json"),
            serde_json::to_string_pretty(self).map_err(std::io::Error::other)?,
        )?;
        fs::write(dir.join("gap_report.csv"), self.to_csv())
    }
}
