use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use eventsched::config::{ExperimentConfig, SchedulerKind};
use eventsched::harness::{run_episodes, summarize, write_csv, CostSummary, Simulator};
use eventsched::lowerbound::{
    lower_bound, queue_heuristic_from_rates, GapReport, LowerBoundSolution,
};
use eventsched::mdp::{MdpModel, MdpPolicy};
use eventsched::model::validate_system;
use eventsched::scheduling::SchedulePolicy;

#[derive(Parser)]
#[command(
    name = "eventsched",
    version,
    about = "Event-based sensor scheduling over a shared channel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati equation of every system and print the validation report.
    Dare(Common),
    /// Monte Carlo run of one scheduler; writes per-step CSV and a JSON summary.
    Simulate(Common),
    /// Relaxed-rate lower bound and gap report.
    LowerBound(Common),
    /// Build the discretized MDP, solve it and store the policy.
    MdpTrain(Common),
    /// All schedulers and the lower bound side by side.
    Compare(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Offline,
    Greedy,
    Mdp,
}

impl From<SchedulerArg> for SchedulerKind {
    fn from(s: SchedulerArg) -> Self {
        match s {
            SchedulerArg::Offline => SchedulerKind::Offline,
            SchedulerArg::Greedy => SchedulerKind::Greedy,
            SchedulerArg::Mdp => SchedulerKind::Mdp,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(
        value_name = "CONFIG",
        required_unless_present = "config",
        conflicts_with = "config"
    )]
    config_path: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    scheduler: Option<SchedulerArg>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let path = self
            .config
            .as_ref()
            .or(self.config_path.as_ref())
            .expect("clap enforces one of them");
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(k) = self.scheduler {
            cfg.scheduler.kind = k.into();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Dare(c) => c.load().and_then(|cfg| dare(&cfg)),
        Command::Simulate(c) => c.load().and_then(|cfg| simulate(&cfg)),
        Command::LowerBound(c) => c.load().and_then(|cfg| lower_bound_cmd(&cfg)),
        Command::MdpTrain(c) => c.load().and_then(|cfg| mdp_train(&cfg).map(|_| ())),
        Command::Compare(c) => c.load().and_then(|cfg| compare(&cfg)),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn fmt_matrix(m: &eventsched::nalgebra::DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| {
            format!(
                "[{}]",
                r.iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn dare(cfg: &ExperimentConfig) -> Result<()> {
    let sim = Simulator::new(cfg.system_set()?)?;
    for (i, (sys, f)) in sim.systems.iter().zip(&sim.filters).enumerate() {
        let report = validate_system(sys);
        println!("system {}", i + 1);
        println!("  spectral radius {:.6}", report.spectral_radius);
        println!("  P_bar  {}", fmt_matrix(&f.p_bar));
        println!("  M_bar  {}", fmt_matrix(&f.m_bar));
        println!("  K_bar  {}", fmt_matrix(&f.k_bar));
        println!(
            "  Tr P_bar {:.6}  Tr h(P_bar) {:.6}",
            f.p_bar.trace(),
            sim.maps[i].h(&f.p_bar).trace()
        );
        println!(
            "  iterations {}  residual {:.3e}",
            f.iterations,
            f.residual(sys)
        );
        for w in &report.warnings {
            println!("  warning: {w}");
        }
        for e in &report.errors {
            println!("  error: {e}");
        }
    }
    Ok(())
}

fn policy_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.scheduler
        .policy_file
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("mdp_policy.json"))
}

fn mdp_train(cfg: &ExperimentConfig) -> Result<MdpPolicy> {
    let sim = Simulator::new(cfg.system_set()?)?;
    let model = MdpModel::build(&sim.maps, &cfg.mdp)?;
    model.mdp.check_rows()?;
    let policy = model.solve()?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let path = policy_path(cfg);
    policy
        .save_json(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("states {}", model.n_states());
    println!(
        "grid points per sensor {:?}",
        model.grids.iter().map(|g| g.len()).collect::<Vec<_>>()
    );
    println!("actions {}", model.actions.len());
    println!("iterations {}", policy.iterations);
    println!("average cost {:.4}", policy.average_cost);
    println!("policy {}", path.display());
    Ok(policy)
}

fn build_policy(cfg: &ExperimentConfig, kind: SchedulerKind) -> Result<SchedulePolicy> {
    Ok(match kind {
        SchedulerKind::Offline => SchedulePolicy::Periodic(cfg.periodic_table()?),
        SchedulerKind::Greedy => SchedulePolicy::Greedy(cfg.greedy.clone()),
        SchedulerKind::Mdp => {
            let path = policy_path(cfg);
            let policy = if path.exists() {
                info!("loading policy from {}", path.display());
                MdpPolicy::load_json(&path)
                    .with_context(|| format!("reading {}", path.display()))?
            } else {
                mdp_train(cfg)?
            };
            SchedulePolicy::Mdp(Arc::new(policy))
        }
    })
}

fn run_scheduler(
    cfg: &ExperimentConfig,
    sim: &Simulator,
    kind: SchedulerKind,
    write_trace: bool,
) -> Result<CostSummary> {
    let policy = build_policy(cfg, kind)?;
    let episodes = run_episodes(sim, &policy, cfg.horizon, cfg.runs, cfg.seed)?;
    let summary = summarize(kind.as_str(), &episodes);
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    if write_trace {
        let path = cfg.output_dir.join(format!("trace_{}.csv", kind.as_str()));
        let f = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        write_csv(BufWriter::new(f), &episodes)?;
    }
    let path = cfg
        .output_dir
        .join(format!("summary_{}.json", kind.as_str()));
    fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(summary)
}

fn print_summary(s: &CostSummary) {
    let se = if s.single_sample {
        "n/a (single run)".to_string()
    } else {
        format!("{:.4}", s.std_error)
    };
    println!(
        "{:<8} J = {:.4}  std err {}  per sensor {:?}  squared-error check {:.4}",
        s.scheduler,
        s.mean_cost,
        se,
        s.sensor_costs
            .iter()
            .map(|v| (v * 1e4).round() / 1e4)
            .collect::<Vec<_>>(),
        s.mean_sq_error
    );
}

fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let sim = Simulator::new(cfg.system_set()?)?;
    let s = run_scheduler(cfg, &sim, cfg.scheduler.kind, true)?;
    print_summary(&s);
    Ok(())
}

fn solve_lb(cfg: &ExperimentConfig, sim: &Simulator) -> Result<LowerBoundSolution> {
    let lb = lower_bound(
        &sim.maps,
        cfg.lower_bound.ell_max,
        cfg.lower_bound.rate_grid,
    )?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join("lower_bound.json"),
        serde_json::to_string_pretty(&lb)?,
    )?;
    println!(
        "lower bound {:.4} (ell_max {}, rate grid {}), rates {:?}, rate-ordered queue {:?}",
        lb.total,
        lb.ell_max,
        lb.rate_grid,
        lb.rates(),
        queue_heuristic_from_rates(&lb.rates())
            .order()
            .iter()
            .map(|i| i + 1)
            .collect::<Vec<_>>()
    );
    Ok(lb)
}

fn read_summary(dir: &Path, kind: SchedulerKind) -> Option<CostSummary> {
    let text = fs::read_to_string(dir.join(format!("summary_{}.json", kind.as_str()))).ok()?;
    serde_json::from_str(&text).ok()
}

fn lower_bound_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let sim = Simulator::new(cfg.system_set()?)?;
    let lb = solve_lb(cfg, &sim)?;
    let mut report = GapReport::new(&lb);
    for kind in [
        SchedulerKind::Offline,
        SchedulerKind::Greedy,
        SchedulerKind::Mdp,
    ] {
        if let Some(s) = read_summary(&cfg.output_dir, kind) {
            report.push(kind.as_str(), s.mean_cost, s.std_error);
        }
    }
    report.write(&cfg.output_dir)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn compare(cfg: &ExperimentConfig) -> Result<()> {
    let sim = Simulator::new(cfg.system_set()?)?;
    let lb = solve_lb(cfg, &sim)?;
    let mut report = GapReport::new(&lb);
    let mut kinds = vec![SchedulerKind::Greedy, SchedulerKind::Mdp];
    if cfg.scheduler.table.is_some() {
        kinds.insert(0, SchedulerKind::Offline);
    } else {
        warn!("no scheduler.table in the config; skipping the offline schedule");
    }
    for kind in kinds {
        let s = run_scheduler(cfg, &sim, kind, false)?;
        print_summary(&s);
        report.push(kind.as_str(), s.mean_cost, s.std_error);
    }
    report.write(&cfg.output_dir)?;
    let table = report.to_csv();
    fs::write(cfg.output_dir.join("compare.csv"), &table)?;
    print!("{table}");
    if report
        .entries
        .iter()
        .any(|e| e.cost + 3.0 * e.std_error < lb.total)
    {
        bail!("a simulated cost lies below the lower bound");
    }
    Ok(())
}
