//! Exit-gate criteria on the two-process example. Runs as a plain binary and
//! prints one PASS/FAIL line per criterion; the process fails if any does.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use eventsched::estimator::CovMaps;
use eventsched::harness::{
    monte_carlo_cost, psd_sqrt, run_episode, run_episodes, summarize, write_csv, Simulator,
};
use eventsched::lowerbound::lower_bound;
use eventsched::mdp::{MdpModel, MdpSettings};
use eventsched::model::{psd_leq, two_process_example, LtiSystem};
use eventsched::scheduling::{
    expected_one_step_cost, greedy_alphas, greedy_alphas_numeric, greedy_order, resolve_channel,
    GreedySettings, OneStepProblem, PeriodicTable, Queue, SchedulePolicy,
};
use eventsched::solve_dare;
use eventsched::trigger::{alpha_hat, draw_eta, numerical_rank};

const TARGET_OFFLINE: f64 = 92.64;
const TARGET_GREEDY: f64 = 52.05;
const TARGET_MDP: f64 = 55.23;
const TARGET_LB: f64 = 48.21;

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn example() -> Simulator {
    Simulator::new(two_process_example()).unwrap()
}

fn tr(m: &DMatrix<f64>) -> f64 {
    m.trace()
}

fn offline_closed_form(maps: &[CovMaps]) -> f64 {
    let (m1, m2) = (&maps[0], &maps[1]);
    (2.0 * tr(m1.p_bar())
        + tr(&m1.h_iter_p_bar(1))
        + tr(m2.p_bar())
        + tr(&m2.h_iter_p_bar(1))
        + tr(&m2.h_iter_p_bar(2)))
        / 3.0
}

fn offline_policy() -> SchedulePolicy {
    // s2, s1, s1 in zero-based indices
    SchedulePolicy::Periodic(PeriodicTable::new(vec![1, 0, 0], 2).unwrap())
}

/// Random covariance in the reachable hull of `{h^j(P̄)}`, `j ≤ depth`.
fn random_reachable(maps: &CovMaps, rng: &mut ChaCha8Rng, depth: usize) -> DMatrix<f64> {
    let w: Vec<f64> = (0..=depth).map(|_| rng.random::<f64>().powi(2)).collect();
    let s: f64 = w.iter().sum();
    (0..=depth).fold(DMatrix::zeros(maps.dim(), maps.dim()), |acc, j| {
        acc + maps.h_iter_p_bar(j) * (w[j] / s)
    })
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let sim = example();
    let closed = offline_closed_form(&sim.maps);
    let simulated = monte_carlo_cost(&sim, &offline_policy(), 999, 2, 1)
        .unwrap()
        .mean_cost;
    let elapsed = t.elapsed();
    let consistent = within(simulated, closed, 1e-9);
    Outcome {
        pass: within(closed, TARGET_OFFLINE, 0.02) && consistent && elapsed < Duration::from_secs(1),
        detail: format!(
            "closed-form J = {closed:.4}, simulated {simulated:.4} (target {TARGET_OFFLINE} ± 2%), {:.2}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_2() -> (Outcome, f64) {
    let t = Instant::now();
    let sim = example();
    let s = monte_carlo_cost(
        &sim,
        &SchedulePolicy::Greedy(GreedySettings::default()),
        1000,
        500,
        2,
    )
    .unwrap();
    let elapsed = t.elapsed();
    (
        Outcome {
            pass: within(s.mean_cost, TARGET_GREEDY, 0.10) && elapsed < Duration::from_secs(120),
            detail: format!(
                "J(greedy) = {:.4} ± {:.4} over 500 × 1000 (target {TARGET_GREEDY} ± 10%), {:.1}s",
                s.mean_cost,
                s.std_error,
                elapsed.as_secs_f64()
            ),
        },
        s.mean_cost,
    )
}

fn criterion_3() -> (Outcome, f64) {
    let t = Instant::now();
    let sim = example();
    let lb = lower_bound(&sim.maps, 20, 200).unwrap();
    let elapsed = t.elapsed();
    (
        Outcome {
            pass: within(lb.total, TARGET_LB, 0.05) && elapsed < Duration::from_secs(60),
            detail: format!(
                "LB = {:.4} at rates {:?} (target {TARGET_LB} ± 5%), {:.1}s",
                lb.total,
                lb.rates(),
                elapsed.as_secs_f64()
            ),
        },
        lb.total,
    )
}

fn criterion_4(lb: f64) -> Outcome {
    let sim = example();
    let j_offline = offline_closed_form(&sim.maps);
    let model = MdpModel::build(&sim.maps, &MdpSettings::default()).unwrap();
    let policy = model.solve().unwrap();
    let g = policy.average_cost;
    let simulated = monte_carlo_cost(&sim, &SchedulePolicy::Mdp(Arc::new(policy)), 10_000, 100, 4)
        .unwrap()
        .mean_cost;
    let in_bracket = lb <= g && g <= j_offline;
    let near_target = within(g, TARGET_MDP, 0.25);
    let consistent = within(simulated, g, 0.05);
    Outcome {
        pass: in_bracket && near_target && consistent,
        detail: format!(
            "g = {g:.4} on {} states; [LB, J_offline] = [{lb:.4}, {j_offline:.4}] {}; {TARGET_MDP} ± 25% {}; simulated {simulated:.4} within 5% {}",
            model.n_states(),
            ok(in_bracket),
            ok(near_target),
            ok(consistent)
        ),
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "violated"
    }
}

fn criterion_5() -> Outcome {
    let sim = example();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut failures = Vec::new();
    for (i, m) in sim.maps.iter().enumerate() {
        // Σ at the steady state and one slot after it
        for start in [m.p_bar().clone(), m.h(m.p_bar())] {
            let sigma = m.sigma_pred(&start).unwrap();
            let r = numerical_rank(&sigma);
            let root = psd_sqrt(&sigma);
            for alpha in [0.1, 1.0, 10.0] {
                let p = 1.0 - alpha_hat(alpha).powf(r as f64 / 2.0);
                let mut hits = 0usize;
                for _ in 0..n {
                    let z = DVector::from_fn(sigma.nrows(), |_, _| StandardNormal.sample(&mut rng));
                    let eps = &root * z;
                    hits += usize::from(draw_eta(&mut rng, &eps, alpha, &sigma).eta);
                }
                let emp = hits as f64 / n as f64;
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let z = (emp - p).abs() / se;
                worst = worst.max(z);
                cases += 1;
                if z > 3.0 {
                    failures.push(format!(
                        "sensor {} rank {r} α={alpha}: {emp:.4} vs {p:.4}",
                        i + 1
                    ));
                }
            }
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "{cases} cases, N = {n}, worst deviation {worst:.2} standard errors {failures:?}"
        ),
    }
}

fn criterion_6() -> Outcome {
    let sim = example();
    let eps = run_episodes(
        &sim,
        &SchedulePolicy::Greedy(GreedySettings::default()),
        200,
        500,
        6,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for i in 0..sim.n() {
        let mut samples: Vec<(f64, f64)> = eps
            .iter()
            .flat_map(|e| {
                e.traces
                    .iter()
                    .zip(&e.sq_errors)
                    .map(move |(t, s)| (t[i], s[i]))
            })
            .collect();
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        // equal-count bins of the predicted trace
        let bins = 5;
        let size = samples.len() / bins;
        for b in 0..bins {
            let chunk = &samples[b * size..if b + 1 == bins {
                samples.len()
            } else {
                (b + 1) * size
            }];
            let pred = chunk.iter().map(|s| s.0).sum::<f64>() / chunk.len() as f64;
            let emp = chunk.iter().map(|s| s.1).sum::<f64>() / chunk.len() as f64;
            let rel = (emp - pred).abs() / pred;
            worst = worst.max(rel);
            lines.push(format!("s{}b{}: {emp:.2}/{pred:.2}", i + 1, b + 1));
        }
    }
    Outcome {
        pass: worst <= 0.10,
        detail: format!(
            "500 × 200 greedy, worst binned deviation {:.2}% [{}]",
            100.0 * worst,
            lines.join(" ")
        ),
    }
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn grid_optimized_cost(queue: &Queue, p: &OneStepProblem, step: f64) -> f64 {
    let k = (1.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    let mut hats = [0.0; 2];
    for a in 0..=k {
        hats[0] = a as f64 * step;
        for b in 0..=k {
            hats[1] = b as f64 * step;
            best = best.min(expected_one_step_cost(queue, p, &hats));
        }
    }
    best
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    let mut worst_excess: f64 = 0.0;
    for inst in 0..50 {
        let mut maps = Vec::new();
        let mut states = Vec::new();
        for _ in 0..3 {
            let sys = LtiSystem::without_prior(
                scalar(rng.random_range(1.05..2.0)),
                scalar(rng.random_range(0.5..2.0)),
                scalar(rng.random_range(0.5..2.0)),
                scalar(rng.random_range(0.5..2.0)),
            )
            .unwrap();
            let m = CovMaps::new(&sys, &solve_dare(&sys).unwrap());
            states.push(random_reachable(&m, &mut rng, 3));
            maps.push(m);
        }
        let p = OneStepProblem::new(&maps, &states);
        assert!(p.ranks.iter().all(|&r| r == 1));
        let greedy = greedy_order(&p);
        let g = grid_optimized_cost(&greedy, &p, 1e-3);
        let best = Queue::all(3)
            .iter()
            .map(|q| grid_optimized_cost(q, &p, 1e-3))
            .fold(f64::INFINITY, f64::min);
        let excess = (g - best) / best;
        worst_excess = worst_excess.max(excess);
        if excess > 1e-12 {
            bad.push(inst);
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!("50 scalar instances, greedy queue optimal in all but {:?}, worst relative excess {worst_excess:.2e}", bad),
    }
}

fn criterion_8() -> Outcome {
    let sim = example();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mono = true;
    let mut sandwich_fail = 0;
    let mut checks = 0;
    for m in &sim.maps {
        let traces: Vec<f64> = (0..=10).map(|j| tr(&m.h_iter_p_bar(j))).collect();
        mono &= traces.windows(2).all(|w| w[1] >= w[0]);
        for _ in 0..100 {
            let x = random_reachable(m, &mut rng, 6);
            let hx = m.h(&x);
            for alpha in [0.0, 0.5, 1.0, 10.0, f64::INFINITY] {
                let t = m.t(&x, alpha);
                let scale = tr(&hx);
                checks += 1;
                if !(psd_leq(m.p_bar(), &t, 1e-10 * scale) && psd_leq(&t, &hx, 1e-10 * scale)) {
                    sandwich_fail += 1;
                }
            }
        }
    }
    Outcome {
        pass: mono && sandwich_fail == 0,
        detail: format!("h-iterate traces monotone: {mono}; P̄ ⪯ t(X,α) ⪯ h(X) violated in {sandwich_fail}/{checks}"),
    }
}

fn criterion_9() -> Outcome {
    // exactly one transmission, fuzzed
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut channel_ok = true;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=6);
        let all = Queue::all(n);
        let q = &all[rng.random_range(0..all.len())];
        let eta: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let out = resolve_channel(q, &eta);
        let pos = q.positions();
        channel_ok &= out.gamma.iter().filter(|g| **g).count() == 1;
        for s in 0..n {
            channel_ok &= out.mu[s] == (pos[s] <= pos[out.transmitter]);
            if s != q.last() {
                channel_ok &= out.gamma[s] == (out.mu[s] && eta[s]);
            }
        }
    }
    // transition rows
    let sim = example();
    let model = MdpModel::build(&sim.maps, &MdpSettings::default()).unwrap();
    let rows_ok = model.mdp.check_rows().is_ok();
    // seed determinism, including parallel reduction and CSV bytes
    let g = SchedulePolicy::Greedy(GreedySettings::default());
    let a = run_episodes(&sim, &g, 100, 8, 99).unwrap();
    let b = run_episodes(&sim, &g, 100, 8, 99).unwrap();
    let sequential: Vec<_> = (0..8).map(|e| run_episode(&sim, &g, 100, 99, e)).collect();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_csv(&mut ca, &a).unwrap();
    write_csv(&mut cb, &b).unwrap();
    let det_ok = a == b && a == sequential && ca == cb && summarize("g", &a) == summarize("g", &b);
    Outcome {
        pass: channel_ok && rows_ok && det_ok,
        detail: format!(
            "one transmission per slot over 10^4 fuzzed cases: {channel_ok}; {} transition rows sum to 1: {rows_ok}; bitwise-identical reruns: {det_ok}",
            model.n_states() * model.actions.len()
        ),
    }
}

fn criterion_10() -> Outcome {
    let sim = example();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let settings = GreedySettings::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let states: Vec<DMatrix<f64>> = sim
            .maps
            .iter()
            .map(|m| random_reachable(m, &mut rng, 4))
            .collect();
        let p = OneStepProblem::new(&sim.maps, &states);
        let q = greedy_order(&p);
        let closed = greedy_alphas(&q, &p, &settings)[0];
        let numeric = greedy_alphas_numeric(&q, &p, &settings)[0];
        worst = worst.max((closed - numeric).abs());
    }
    Outcome {
        pass: worst <= 1e-4,
        detail: format!("100 random two-sensor states, worst |Δα̂| = {worst:.2e}"),
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters: nothing to enumerate
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "offline periodic cost", criterion_1()));
    let (c2, _) = criterion_2();
    results.push((2, "greedy cost", c2));
    let (c3, lb) = criterion_3();
    results.push((3, "lower bound", c3));
    results.push((4, "MDP average cost", criterion_4(lb)));
    results.push((5, "trigger probabilities", criterion_5()));
    results.push((6, "estimator covariance consistency", criterion_6()));
    results.push((7, "greedy queue optimality", criterion_7()));
    results.push((8, "covariance ordering", criterion_8()));
    results.push((9, "structural invariants", criterion_9()));
    results.push((
        10,
        "closed-form vs numeric greedy intensity",
        criterion_10(),
    ));
    let mut failed = 0;
    for (i, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("criterion {i:>2} [{tag}] {name}: {}", o.detail);
    }
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed,
        failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
