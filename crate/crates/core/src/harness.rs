//! Closed-loop Monte Carlo: plants, local filters, triggers, channel and the
//! remote estimator, driven by one of the schedulers.
//!
//! States are re-centred on the local estimate after every slot (see
//! [`run_episode`]), which keeps long runs of unstable plants finite.
//!
//! Every episode draws from independent ChaCha streams keyed by
//! `(seed, episode, sensor, purpose)`, so episodes can run in parallel and
//! still reproduce bit for bit.

use std::fmt::Write as _;
use std::io::{self, Write};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{remote_update, CovMaps, RemoteEstimate};
use crate::filtering::{
    local_filter_step, solve_dare, FilterError, LocalEstimate, SteadyStateFilter,
};
use crate::model::{symmetrize, SystemSet};
use crate::scheduling::{resolve_channel, SchedulePolicy};
use crate::trigger::draw_eta;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("system {index}: {source}")]
    Filter { index: usize, source: FilterError },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("at least one run is required")]
    ZeroRuns,
    #[error("policy is for {policy} sensors but the system set has {systems}")]
    PolicyArity { policy: usize, systems: usize },
}

#[derive(Clone, Copy)]
enum Purpose {
    Initial = 0,
    Process = 1,
    Measurement = 2,
    Trigger = 3,
}

fn stream(seed: u64, episode: u64, sensor: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((episode << 24) | ((sensor as u64) << 4) | purpose as u64);
    rng
}

/// Symmetric square root of the PSD part of `m`.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

fn gaussian(rng: &mut ChaCha8Rng, sqrt: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(sqrt.ncols(), |_, _| StandardNormal.sample(rng));
    sqrt * z
}

/// Solved systems shared by all episodes.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub systems: SystemSet,
    pub filters: Vec<SteadyStateFilter>,
    pub maps: Vec<CovMaps>,
    q_sqrt: Vec<DMatrix<f64>>,
    r_sqrt: Vec<DMatrix<f64>>,
    p_bar_sqrt: Vec<DMatrix<f64>>,
    prior_sqrt: Vec<DMatrix<f64>>,
}

impl Simulator {
    pub fn new(systems: SystemSet) -> Result<Self, HarnessError> {
        let filters = systems
            .iter()
            .enumerate()
            .map(|(index, s)| {
                solve_dare(s).map_err(|source| HarnessError::Filter { index, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let maps = systems
            .iter()
            .zip(&filters)
            .map(|(s, f)| CovMaps::new(s, f))
            .collect();
        let q_sqrt = systems.iter().map(|s| psd_sqrt(s.q())).collect();
        let r_sqrt = systems.iter().map(|s| psd_sqrt(s.r())).collect();
        let p_bar_sqrt = filters.iter().map(|f| psd_sqrt(&f.p_bar)).collect();
        // local estimate spread: the part of Π not explained by the filter error
        let prior_sqrt = systems
            .iter()
            .zip(&filters)
            .map(|(s, f)| psd_sqrt(&(s.pi0() - &f.p_bar)))
            .collect();
        Ok(Self {
            systems,
            filters,
            maps,
            q_sqrt,
            r_sqrt,
            p_bar_sqrt,
            prior_sqrt,
        })
    }

    pub fn n(&self) -> usize {
        self.systems.len()
    }

    /// `Σ_i Tr P̄_i`.
    pub fn steady_cost(&self) -> f64 {
        self.maps.iter().map(|m| m.p_bar().trace()).sum()
    }
}

/// One simulated run. Rows are slots `1..=T`, columns sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub seed: u64,
    pub episode: u64,
    /// `Tr P_i(k)` of the remote estimator.
    pub traces: Vec<Vec<f64>>,
    /// `‖x_i(k) − x̂_i(k)‖²`.
    pub sq_errors: Vec<Vec<f64>>,
    pub transmitters: Vec<usize>,
}

impl EpisodeResult {
    pub fn horizon(&self) -> usize {
        self.traces.len()
    }

    /// `(1/T) Σ_k Σ_i Tr P_i(k)`.
    pub fn cost(&self) -> f64 {
        self.traces
            .iter()
            .map(|r| r.iter().sum::<f64>())
            .sum::<f64>()
            / self.horizon() as f64
    }

    pub fn sensor_costs(&self) -> Vec<f64> {
        column_means(&self.traces)
    }

    pub fn sq_error_cost(&self) -> f64 {
        self.sq_errors
            .iter()
            .map(|r| r.iter().sum::<f64>())
            .sum::<f64>()
            / self.horizon() as f64
    }
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; n];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

/// Runs one episode of `horizon` slots.
///
/// At `k = 0` every sensor's estimate is delivered, so all remote
/// covariances start at `P̄`; slots `1..=horizon` are recorded.
pub fn run_episode(
    sim: &Simulator,
    policy: &SchedulePolicy,
    horizon: usize,
    seed: u64,
    episode: u64,
) -> EpisodeResult {
    let n = sim.n();
    let mut process: Vec<_> = (0..n)
        .map(|i| stream(seed, episode, i, Purpose::Process))
        .collect();
    let mut measure: Vec<_> = (0..n)
        .map(|i| stream(seed, episode, i, Purpose::Measurement))
        .collect();
    let mut trig: Vec<_> = (0..n)
        .map(|i| stream(seed, episode, i, Purpose::Trigger))
        .collect();

    let mut x = Vec::with_capacity(n);
    let mut local = Vec::with_capacity(n);
    let mut remote = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, episode, i, Purpose::Initial);
        let xl = gaussian(&mut rng, &sim.prior_sqrt[i]);
        let e = gaussian(&mut rng, &sim.p_bar_sqrt[i]);
        x.push(&xl + e);
        remote.push(RemoteEstimate::fresh(&sim.maps[i], xl.clone(), 0));
        local.push(LocalEstimate { x_hat: xl, k: 0 });
    }

    let mut traces = Vec::with_capacity(horizon);
    let mut sq_errors = Vec::with_capacity(horizon);
    let mut transmitters = Vec::with_capacity(horizon);
    for k in 1..=horizon as u64 {
        for i in 0..n {
            let sys = &sim.systems.systems()[i];
            x[i] = sys.a() * &x[i] + gaussian(&mut process[i], &sim.q_sqrt[i]);
            let y = sys.c() * &x[i] + gaussian(&mut measure[i], &sim.r_sqrt[i]);
            local[i] = local_filter_step(&sim.filters[i], &local[i], &y)
                .expect("dimensions fixed at construction");
        }
        let covs: Vec<DMatrix<f64>> = remote.iter().map(|r| r.p.clone()).collect();
        let decision = policy.decide(&sim.maps, &covs, k);
        let mut eta = vec![false; n];
        for i in 0..n {
            let maps = &sim.maps[i];
            let sigma = maps.sigma_pred(&remote[i].p).unwrap_or_else(|e| {
                warn!("sensor {i}, slot {k}: {e}");
                symmetrize(&(maps.h(&remote[i].p) - maps.p_bar()))
            });
            let eps = &local[i].x_hat - maps.a() * &remote[i].x_hat;
            eta[i] = draw_eta(&mut trig[i], &eps, decision.alphas[i], &sigma).eta;
        }
        let out = resolve_channel(&decision.queue, &eta);
        let mut tr_row = Vec::with_capacity(n);
        let mut err_row = Vec::with_capacity(n);
        for i in 0..n {
            let payload = out.gamma[i].then_some(&local[i].x_hat);
            remote[i] = remote_update(
                &sim.maps[i],
                &remote[i],
                out.gamma[i],
                out.mu[i],
                decision.alphas[i],
                payload,
            )
            .expect("channel outcome is consistent by construction");
            tr_row.push(remote[i].p.trace());
            err_row.push((&x[i] - &remote[i].x_hat).norm_squared());
            // The plants are unstable, so absolute states overflow within a
            // few hundred slots. Everything is linear, so shifting plant,
            // local and remote estimates by a common vector (carried forward
            // by A) leaves errors and triggers unchanged.
            let shift = local[i].x_hat.clone();
            x[i] -= &shift;
            local[i].x_hat -= &shift;
            remote[i].x_hat -= &shift;
        }
        traces.push(tr_row);
        sq_errors.push(err_row);
        transmitters.push(out.transmitter);
    }
    EpisodeResult {
        seed,
        episode,
        traces,
        sq_errors,
        transmitters,
    }
}

/// Runs episodes `0..runs` in parallel, returned in episode order.
pub fn run_episodes(
    sim: &Simulator,
    policy: &SchedulePolicy,
    horizon: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<EpisodeResult>, HarnessError> {
    check(sim, policy, horizon, runs)?;
    Ok((0..runs as u64)
        .into_par_iter()
        .map(|e| run_episode(sim, policy, horizon, seed, e))
        .collect())
}

fn check(
    sim: &Simulator,
    policy: &SchedulePolicy,
    horizon: usize,
    runs: usize,
) -> Result<(), HarnessError> {
    if horizon == 0 {
        return Err(HarnessError::ZeroHorizon);
    }
    if runs == 0 {
        return Err(HarnessError::ZeroRuns);
    }
    if let SchedulePolicy::Mdp(p) = policy {
        if p.n_sensors() != sim.n() {
            return Err(HarnessError::PolicyArity {
                policy: p.n_sensors(),
                systems: sim.n(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub scheduler: String,
    pub runs: usize,
    pub horizon: usize,
    pub seed: u64,
    pub mean_cost: f64,
    /// Standard error of the mean over episodes; `0` for a single run.
    pub std_error: f64,
    pub single_sample: bool,
    pub sensor_costs: Vec<f64>,
    /// Same average computed from sampled squared errors.
    pub mean_sq_error: f64,
}

pub fn summarize(scheduler: &str, episodes: &[EpisodeResult]) -> CostSummary {
    let runs = episodes.len();
    let costs: Vec<f64> = episodes.iter().map(|e| e.cost()).collect();
    let mean = costs.iter().sum::<f64>() / runs as f64;
    let std_error = if runs > 1 {
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        (var / runs as f64).sqrt()
    } else {
        0.0
    };
    let per: Vec<Vec<f64>> = episodes.iter().map(|e| e.sensor_costs()).collect();
    CostSummary {
        scheduler: scheduler.to_string(),
        runs,
        horizon: episodes.first().map_or(0, |e| e.horizon()),
        seed: episodes.first().map_or(0, |e| e.seed),
        mean_cost: mean,
        std_error,
        single_sample: runs == 1,
        sensor_costs: column_means(&per),
        mean_sq_error: episodes.iter().map(|e| e.sq_error_cost()).sum::<f64>() / runs as f64,
    }
}

/// Mean cost over `runs` episodes, reduced in episode order.
pub fn monte_carlo_cost(
    sim: &Simulator,
    policy: &SchedulePolicy,
    horizon: usize,
    runs: usize,
    seed: u64,
) -> Result<CostSummary, HarnessError> {
    Ok(summarize(
        policy.name(),
        &run_episodes(sim, policy, horizon, runs, seed)?,
    ))
}

pub const CSV_HEADER: &str = "episode,step,sensor,trace_p,sq_error,transmitted";

/// Per-step rows, sensors numbered from 1.
pub fn write_csv<W: Write>(mut w: W, episodes: &[EpisodeResult]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let mut line = String::new();
    for e in episodes {
        for (k, (tr, se)) in e.traces.iter().zip(&e.sq_errors).enumerate() {
            for i in 0..tr.len() {
                line.clear();
                let sent = u8::from(e.transmitters[k] == i);
                writeln!(
                    line,
                    "{},{},{},{},{},{}",
                    e.episode,
                    k + 1,
                    i + 1,
                    tr[i],
                    se[i],
                    sent
                )
                .unwrap();
                w.write_all(line.as_bytes())?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{two_process_example, LtiSystem};
    use crate::scheduling::{GreedySettings, PeriodicTable};

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn same_seed_same_episode() {
        let sim = Simulator::new(two_process_example()).unwrap();
        let p = SchedulePolicy::Greedy(GreedySettings::default());
        let a = run_episode(&sim, &p, 50, 11, 3);
        let b = run_episode(&sim, &p, 50, 11, 3);
        assert_eq!(a, b);
        let c = run_episode(&sim, &p, 50, 11, 4);
        assert_ne!(a.sq_errors, c.sq_errors);
    }

    #[test]
    fn single_sensor_always_fresh() {
        let sys = LtiSystem::without_prior(s(2.0), s(1.0), s(1.0), s(1.0)).unwrap();
        let sim = Simulator::new(SystemSet::new(vec![sys]).unwrap()).unwrap();
        let p = SchedulePolicy::Greedy(GreedySettings::default());
        let e = run_episode(&sim, &p, 100, 1, 0);
        let pb = sim.maps[0].p_bar().trace();
        assert!(e.transmitters.iter().all(|&t| t == 0));
        assert!(e.traces.iter().all(|r| r[0] == pb));
    }

    #[test]
    fn periodic_cycle_is_exact() {
        let sim = Simulator::new(two_process_example()).unwrap();
        let p = SchedulePolicy::Periodic(PeriodicTable::new(vec![1, 0, 0], 2).unwrap());
        let e = run_episode(&sim, &p, 30, 5, 0);
        let m = &sim.maps;
        for (k0, row) in e.traces.iter().enumerate() {
            let k = k0 + 1;
            // slots k ≡ 0 mod 3 serve sensor 2, the others sensor 1
            let expect1 = if k % 3 == 0 {
                m[0].h(m[0].p_bar()).trace()
            } else {
                m[0].p_bar().trace()
            };
            let since2 = k % 3;
            let expect2 = m[1].h_iter_p_bar(since2).trace();
            assert!((row[0] - expect1).abs() < 1e-9 * expect1);
            assert!(
                (row[1] - expect2).abs() < 1e-9 * expect2,
                "k={k}: {} vs {}",
                row[1],
                expect2
            );
        }
    }

    #[test]
    fn summary_single_run() {
        let sim = Simulator::new(two_process_example()).unwrap();
        let p = SchedulePolicy::Greedy(GreedySettings::default());
        let sum = monte_carlo_cost(&sim, &p, 20, 1, 0).unwrap();
        assert!(sum.single_sample);
        assert_eq!(sum.std_error, 0.0);
        assert!(matches!(
            monte_carlo_cost(&sim, &p, 0, 1, 0),
            Err(HarnessError::ZeroHorizon)
        ));
    }

    #[test]
    fn csv_layout() {
        let e = EpisodeResult {
            seed: 0,
            episode: 2,
            traces: vec![vec![1.5, 2.0]],
            sq_errors: vec![vec![0.25, 3.0]],
            transmitters: vec![1],
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &[e]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{CSV_HEADER}\n2,1,1,1.5,0.25,0\n2,1,2,2,3,1\n")
        );
    }
}
