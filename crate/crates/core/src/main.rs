use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use psiphi::agent::{EvalPoint, PsiPhiAgent};
use psiphi::demo::DemoSet;
use psiphi::harness::{self, ExperimentConfig, Manifest, Table};
use psiphi::itd::{run_itd, ItdLogRow};
use psiphi::nn::Checkpoint;
use psiphi::Error;

#[derive(Parser)]
#[command(name = "psiphi", version, about = "Successor-feature IRL and RL experiments on gridworlds")]
struct Cli {
    /// TOML config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out soft-optimal demonstrators and save the demo file.
    GenDemos {
        /// Demonstrator tasks, e.g. R G; defaults to the IRL experiment's.
        #[arg(long, num_args = 1..)]
        tasks: Vec<String>,
    },
    /// Inverse TD learning on a demo file (or freshly generated demos).
    TrainItd {
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Full learner on one ego task, with demonstrations.
    TrainPsiphi {
        #[arg(long, default_value = "R")]
        task: String,
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Recovered-reward quality against ground truth and behaviour cloning.
    EvalIrl,
    /// Held-out action prediction with and without ego RL.
    EvalImitation,
    /// Few-shot transfer table and the acceleration curves.
    EvalTransfer,
    /// Exact checks of the generalisation bound, the value-error lemma and
    /// policy invariance of recovered rewards.
    CheckBounds,
    /// Per-dimension cumulant grids of a checkpoint.
    DumpCumulants {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recovered-reward quality against the cumulant dimension.
    SweepDim {
        #[arg(long, num_args = 1..)]
        dims: Vec<usize>,
    },
}

enum Failure {
    Config(String),
    Invariant(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Other(other.to_string()),
        }
    }
}

type Run = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let mut c = ExperimentConfig::default();
            c.sync();
            Ok(c)
        }
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant violated: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn finish(cli: &Cli, name: &str, config: &ExperimentConfig, tables: Vec<(String, Table)>) -> Run {
    let mut files = Vec::new();
    for (file, t) in &tables {
        t.save(&cli.out.join(file))?;
        files.push(file.clone());
    }
    Manifest::new(name, config, cli.seed, files).write(&cli.out, config)?;
    Ok(())
}

fn load_or_generate(cli: &Cli, config: &ExperimentConfig, path: &Option<PathBuf>, names: &[String]) -> Result<DemoSet, Failure> {
    match path {
        Some(p) => Ok(DemoSet::load(p)?),
        None => Ok(config.demos_for(&config.grid()?, names, cli.seed)?),
    }
}

fn curve(points: &[EvalPoint], seed: u64) -> Table {
    let mut t = Table::new(&["env_steps", "episodes", "mean_return", "normalized_return", "seed"]);
    for p in points {
        t.push(p.csv_row(seed).split(',').map(str::to_string).collect());
    }
    t
}

fn run(cli: &Cli, config: &ExperimentConfig) -> Run {
    let spec = config.grid()?;
    let seed = cli.seed;
    match &cli.command {
        Command::GenDemos { tasks } => {
            let names = if tasks.is_empty() { config.irl.demo_tasks.clone() } else { tasks.clone() };
            let demos = config.demos_for(&spec, &names, seed)?;
            std::fs::create_dir_all(&cli.out).map_err(Error::from)?;
            demos.save(&cli.out.join("demos.jsonl"))?;
            let mut t = Table::new(&["agent", "task", "trajectories", "steps"]);
            for (k, name) in names.iter().enumerate() {
                let own = demos.for_agent(k + 1);
                t.push(vec![(k + 1).to_string(), name.clone(), own.trajectories.len().to_string(), own.n_steps().to_string()]);
            }
            finish(cli, "gen-demos", config, vec![("demo_summary.csv".into(), t)])?;
            add_file(&cli.out, "demos.jsonl")
        }
        Command::TrainItd { demos } => {
            let demos = load_or_generate(cli, config, demos, &config.irl.demo_tasks)?;
            let arch = config.arch(&spec, config.agent.d, demos.n_agents);
            let (params, log) = run_itd(&demos, arch, &config.itd, harness::derive(seed, 2))?;
            let mut t = Table {
                header: ItdLogRow::csv_header(demos.n_agents).split(',').map(str::to_string).collect(),
                rows: Vec::new(),
            };
            for r in &log {
                t.push(r.csv_row(demos.n_agents).split(',').map(str::to_string).collect());
            }
            std::fs::create_dir_all(&cli.out).map_err(Error::from)?;
            Checkpoint {
                step: log.len() as u64,
                params: params.clone(),
                target: None,
                optimizers: Vec::new(),
                seeds: Vec::new(),
            }
            .save(&cli.out.join("itd.ckpt"))?;
            finish(cli, "train-itd", config, vec![("itd_log.csv".into(), t)])?;
            add_file(&cli.out, "itd.ckpt")
        }
        Command::TrainPsiphi { task, demos } => {
            let demos = load_or_generate(cli, config, demos, &config.acceleration.demo_tasks)?;
            let task = harness::parse_task(task)?;
            let (agent, evals): (PsiPhiAgent, _) =
                harness::pretrain(&spec, config, &demos, &task, config.agent.total_steps, seed)?;
            std::fs::create_dir_all(&cli.out).map_err(Error::from)?;
            agent.checkpoint().save(&cli.out.join("psiphi.ckpt"))?;
            finish(cli, "train-psiphi", config, vec![("eval.csv".into(), curve(&evals, seed))])?;
            add_file(&cli.out, "psiphi.ckpt")
        }
        Command::EvalIrl => {
            let mut rows = Vec::new();
            for &s in &seeds(&config.irl.seeds, seed) {
                rows.extend(harness::eval_irl(&spec, config, s)?);
            }
            for m in ["itd", "ground_truth", "bc_pooled", "bc_per_agent"] {
                let v = harness::per_seed(&rows, m);
                eprintln!("{m}: median normalized return {:.3} over {} seeds", harness::median(&v), v.len());
            }
            finish(cli, "eval-irl", config, vec![("irl.csv".into(), harness::IrlRow::table(&rows))])
        }
        Command::EvalImitation => {
            let mut rows = Vec::new();
            for &s in &seeds(&config.imitation.seeds, seed) {
                rows.extend(harness::eval_imitation(&spec, config, s)?);
            }
            finish(cli, "eval-imitation", config, vec![("imitation.csv".into(), harness::imitation_table(&rows))])
        }
        Command::EvalTransfer => {
            let mut few = Vec::new();
            let mut curves = Vec::new();
            for &s in &seeds(&config.transfer.seeds, seed) {
                few.extend(harness::eval_few_shot(&spec, config, s)?);
            }
            for &s in &seeds(&config.acceleration.seeds, seed) {
                curves.extend(harness::eval_acceleration(&spec, config, s)?);
            }
            eprint!("{}", harness::transfer_summary(&few));
            finish(
                cli,
                "eval-transfer",
                config,
                vec![
                    ("few_shot.csv".into(), harness::transfer_table(&few)),
                    ("acceleration.csv".into(), harness::curve_table(&curves)),
                ],
            )
        }
        Command::CheckBounds => {
            let report = harness::check_theorems(&config.theorems, seed)?;
            let tables = report.tables().into_iter().map(|(n, t)| (n.to_string(), t)).collect();
            finish(cli, "check-bounds", config, tables)?;
            let (b, l) = (report.bound_violations(), report.lemma_violations());
            let i = report.invariance_failures(config.theorems.invariance.threshold);
            eprintln!("bound violations {b}, lemma violations {l}, invariance failures {i}");
            if b + l + i > 0 {
                return Err(Failure::Invariant(format!("{b} bound, {l} lemma and {i} invariance failures")));
            }
            Ok(())
        }
        Command::DumpCumulants { checkpoint } => {
            let ck = Checkpoint::load(checkpoint)?;
            let grids = harness::dump_cumulants(&ck.params, &spec)?;
            let tables = harness::cumulant_tables(&grids)
                .into_iter()
                .enumerate()
                .map(|(i, t)| (format!("phi_{i}.csv"), t))
                .collect();
            finish(cli, "dump-cumulants", config, tables)
        }
        Command::SweepDim { dims } => {
            let dims = if dims.is_empty() { config.sweep.dims.clone() } else { dims.clone() };
            let rows = harness::sweep_cumulant_dim(&spec, config, &dims, &seeds(&config.sweep.seeds, seed))?;
            finish(cli, "sweep-dim", config, vec![("sweep.csv".into(), harness::sweep_table(&rows))])
        }
    }
}

/// Config seeds offset by `--seed`, so distinct invocations stay independent.
fn seeds(list: &[u64], offset: u64) -> Vec<u64> {
    list.iter().map(|s| s.wrapping_add(offset)).collect()
}

/// Records an extra artefact in the manifest written by `finish`.
fn add_file(dir: &Path, name: &str) -> Run {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(Error::from)?;
    let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Failure::Other(e.to_string()))?;
    m.files.push(name.to_string());
    std::fs::write(&path, serde_json::to_string_pretty(&m).map_err(|e| Failure::Other(e.to_string()))? + "\n").map_err(Error::from)?;
    Ok(())
}
