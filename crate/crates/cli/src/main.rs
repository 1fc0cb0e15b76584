use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pbs_autoplan::bench::{bench_effectiveness, bench_efficiency, overall, write_bench_csv, Protocol};
use pbs_autoplan::episode::{run_episode, EpisodeConfig, InnerConfig, InnerOptimizer, Policy, RulePolicy};
use pbs_autoplan::init::init_objectives;
use pbs_autoplan::ppo::{ppo_train, PpoActor, PpoConfig, PpoPolicy};
use pbs_autoplan::global_seed;
use pbs_core::container::{list_problem_dirs, load_problem, load_spot_vector, save_problem, save_spot_vector};
use pbs_core::lbfgsb::{minimize, Bounds, LbfgsbOptions};
use pbs_core::phantom::{generate_problem, PhantomSampler, PhantomSpec};
use pbs_core::plan_eval::{plan_score, ClinicalGoalTable, ScoringOptions};
use pbs_core::trace::{Budget, RunTrace};
use pbs_l2o::checkpoint;
use pbs_l2o::meta::{train, MetaConfig};
use pbs_l2o::{l2o_minimize, L2ONetwork, L2OOptions};

#[derive(Parser)]
#[command(name = "pbsplan", version, about = "Proton PBS inverse planning with a learned optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom generation.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Run one inverse optimization.
    #[command(subcommand)]
    Optimize(OptimizeCmd),
    /// Meta-train the learned optimizer.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Score a spot vector against the clinical goals.
    Evaluate(EvaluateArgs),
    /// Planning episodes.
    #[command(subcommand)]
    Autoplan(AutoplanCmd),
    /// Compare the learned optimizer with L-BFGS-B.
    Bench(BenchArgs),
    /// Adjustment-policy training.
    #[command(subcommand)]
    Ppo(PpoCmd),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Write a problem container from a spec file, or from a sampled spec.
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(long)]
    trace: PathBuf,
    /// Optional output file for the final spot vector.
    #[arg(long)]
    mu_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OptimizeCmd {
    Lbfgsb(RunArgs),
    L2o {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    L2o {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long)]
    mu: PathBuf,
    #[arg(long)]
    goals: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Subcommand)]
enum AutoplanCmd {
    Run {
        #[arg(long)]
        problem: PathBuf,
        /// `rule` or a path to a policy checkpoint.
        #[arg(long, default_value = "rule")]
        policy: String,
        #[arg(long)]
        out: PathBuf,
        /// JSON object of structure name to predicted dose (Gy).
        #[arg(long)]
        d_predict: Option<PathBuf>,
        /// Learned-optimizer checkpoint; L-BFGS-B is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        #[arg(long, default_value_t = 4)]
        adjustments: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Effectiveness,
    Efficiency,
}

#[derive(Args)]
struct BenchArgs {
    kind: BenchKind,
    #[arg(long)]
    problems: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum PpoCmd {
    Train {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Policy JSON file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn load_problems(dir: &Path) -> Result<Vec<(String, Arc<pbs_core::PlanProblem>)>> {
    let dirs = list_problem_dirs(dir)?;
    if dirs.is_empty() {
        bail!("no problem containers under {}", dir.display());
    }
    dirs.into_iter()
        .map(|d| {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let p = load_problem(&d).with_context(|| format!("loading {}", d.display()))?;
            Ok((name, Arc::new(p)))
        })
        .collect()
}

fn finish_run(trace: &RunTrace, args: &RunArgs) -> Result<()> {
    trace.write_csv(&args.trace)?;
    if let Some(path) = &args.mu_out {
        save_spot_vector(&trace.final_x, path)?;
    }
    println!(
        "{} iterations, final loss {:.6}, {:.3} s, {:?}",
        trace.iterations(),
        trace.final_loss(),
        trace.seconds(),
        trace.termination
    );
    Ok(())
}

fn budget(args: &RunArgs) -> Budget {
    let b = Budget::iterations(args.max_iters);
    match args.max_seconds {
        Some(s) => b.with_max_seconds(s),
        None => b,
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Phantom(PhantomCmd::Generate { spec, seed, out }) => {
            let spec = match spec {
                Some(path) => PhantomSpec { seed, ..PhantomSpec::load(&path)? },
                None => PhantomSampler::default().sample(seed),
            };
            let problem = generate_problem(&spec)?;
            save_problem(&problem, &out)?;
            println!(
                "{} spots, {} voxels, {} objectives, {} nonzeros -> {}",
                problem.n_spots(),
                problem.n_voxels(),
                problem.n_objectives(),
                problem.matrix.nnz(),
                out.display()
            );
        }
        Command::Optimize(OptimizeCmd::Lbfgsb(args)) => {
            let problem = load_problem(&args.problem)?;
            let x0 = problem.default_start();
            let trace = minimize(&problem, &x0, &Bounds::for_problem(&problem), budget(&args), &LbfgsbOptions::default())?;
            finish_run(&trace, &args)?;
        }
        Command::Optimize(OptimizeCmd::L2o { run, checkpoint: ckpt }) => {
            let problem = Arc::new(load_problem(&run.problem)?);
            let net = checkpoint::load(&ckpt)?;
            let x0 = problem.default_start();
            let trace = l2o_minimize(problem, &net, &x0, budget(&run), &L2OOptions::default())?;
            finish_run(&trace, &run)?;
        }
        Command::Train(TrainCmd::L2o { problems, config, out }) => {
            let config: MetaConfig = read_json(config.as_deref())?;
            if let Ok(n) = std::env::var("L2O_THREADS") {
                let n: usize = n.parse().context("L2O_THREADS must be a positive integer")?;
                rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
            }
            let problems: Vec<_> = load_problems(&problems)?.into_iter().map(|(_, p)| p).collect();
            let outcome = train(&config, &problems, None, Some(&out))?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.meta_loss);
            println!(
                "{} outer steps, last meta-loss {last:.6}, {} skipped windows{}; checkpoint in {}",
                outcome.log.len(),
                outcome.skipped_windows,
                if outcome.completed { "" } else { ", stopped at the time limit" },
                out.display()
            );
        }
        Command::Evaluate(args) => {
            let problem = load_problem(&args.problem)?;
            let mu = load_spot_vector(&args.mu)?;
            let goals = match &args.goals {
                Some(p) => ClinicalGoalTable::load(p)?,
                None => ClinicalGoalTable::shipped(),
            };
            let report = plan_score(&problem, &mu, &goals, &ScoringOptions::default())?;
            std::fs::write(&args.report, report.to_csv()?)?;
            print!("{}", report.summary());
        }
        Command::Autoplan(AutoplanCmd::Run { problem, policy, out, d_predict, checkpoint: ckpt, max_iters, adjustments }) => {
            let problem = load_problem(&problem)?;
            let goals = ClinicalGoalTable::shipped();
            let predicted: BTreeMap<String, f64> = read_json(d_predict.as_deref())?;
            let params = init_objectives(&problem, &predicted, &goals)?;
            let optimizer = match &ckpt {
                Some(p) => InnerOptimizer::L2o(Arc::new(checkpoint::load(p)?)),
                None => InnerOptimizer::Lbfgsb,
            };
            let config = EpisodeConfig { inner: InnerConfig { optimizer, max_iters }, adjustments, ..Default::default() };
            let ppo;
            let mut rule = RulePolicy::default();
            let mut actor;
            let policy: &mut dyn Policy = if policy == "rule" {
                &mut rule
            } else {
                ppo = PpoPolicy::load(&policy)?;
                actor = PpoActor::deterministic(&ppo);
                &mut actor
            };
            let episode = run_episode(&problem, &params, policy, &goals, &config, None)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("episode.json"), serde_json::to_string_pretty(&episode)?)?;
            save_spot_vector(&episode.best_x, out.join("best_mu.f64"))?;
            let best = &episode.rounds[episode.best_round].report;
            std::fs::write(out.join("best_report.csv"), best.to_csv()?)?;
            for r in &episode.rounds {
                println!("round {}: score {:.4} reward {:+.4}{}", r.round, r.score, r.reward, if r.failed { " (failed)" } else { "" });
            }
            println!("best round {}", episode.best_round);
            print!("{}", best.summary());
        }
        Command::Bench(args) => {
            let net: L2ONetwork = checkpoint::load(&args.ckpt)?;
            let protocol = match args.kind {
                BenchKind::Effectiveness => Protocol::Effectiveness,
                BenchKind::Efficiency => Protocol::Efficiency,
            };
            let mut cases = Vec::new();
            for (name, problem) in load_problems(&args.problems)? {
                let run = match protocol {
                    Protocol::Effectiveness => bench_effectiveness(&name, problem, &net)?,
                    Protocol::Efficiency => bench_efficiency(&name, problem, &net)?,
                };
                let metric = run.case.metric.map_or_else(|| "failed".into(), |m| format!("{m:.2}%"));
                println!("{name}: {} {metric}", protocol.metric_name());
                cases.push(run.case);
            }
            write_bench_csv(&cases, protocol, &args.out)?;
            match overall(&cases) {
                Some(m) => println!("overall {} {m:.2}%", protocol.metric_name()),
                None => println!("overall {}: no successful cases", protocol.metric_name()),
            }
        }
        Command::Ppo(PpoCmd::Train { problems, config, out }) => {
            let mut config: PpoConfig = read_json(config.as_deref())?;
            config.seed = global_seed(config.seed)?;
            let goals = ClinicalGoalTable::shipped();
            let problems = load_problems(&problems)?
                .into_iter()
                .map(|(_, p)| Ok((p.clone(), init_objectives(&p, &BTreeMap::new(), &goals)?)))
                .collect::<Result<Vec<_>>>()?;
            let (policy, log) = ppo_train(&problems, &goals, &config)?;
            for row in &log {
                println!("iteration {}: mean reward {:+.5}, mean best score {:.4}", row.iteration, row.mean_reward, row.mean_best_score);
            }
            policy.save(&out)?;
        }
    }
    Ok(())
}
