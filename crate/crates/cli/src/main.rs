use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use platformer_meta::bench::{self, Algorithm, RunConfig};

#[derive(Parser)]
#[command(name = "pmeta", version, about = "Train, evaluate and benchmark agents on generated platformer levels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and save its checkpoint and training metrics.
    Train(Common),
    /// Evaluate a saved checkpoint, or the random baseline, greedily.
    Eval(Common),
    /// Run the seeded multi-run benchmark and export the results.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// reptile, ppo, dqn, random, or `all` for bench.
    #[arg(long)]
    algo: Option<String>,
    /// Run seed for train, master seed for bench, sampling seed for eval.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training budget in episodes.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Checkpoint to evaluate; defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    /// Loads the config file and applies the flag overrides. `all` is
    /// returned separately because it is not a single algorithm.
    fn resolve(&self) -> Result<(RunConfig, bool)> {
        let mut config = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let mut all = false;
        match self.algo.as_deref() {
            Some("all") => all = true,
            Some(a) => config.algorithm = a.parse()?,
            None => {}
        }
        if let Some(s) = self.seed {
            config.master_seed = s;
        }
        if let Some(b) = self.budget {
            config.budget = b;
        }
        if let Some(r) = self.runs {
            config.num_runs = r;
        }
        config.validate()?;
        Ok((config, all))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(args: &Common) -> Result<()> {
    let (config, all) = args.resolve()?;
    if all || config.algorithm == Algorithm::Random {
        bail!("train needs one of reptile, ppo or dqn");
    }
    let (net, metrics) = bench::train(&config, 0, config.master_seed)?;
    let net = net.expect("trained algorithms return a network");
    create_dir(&args.out)?;
    net.save(&args.out.join("checkpoint.json"))?;
    metrics.write(&args.out.join(bench::METRICS_FILE))?;
    fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    let last = metrics.records.last().map_or(0, |r| r.distance);
    println!(
        "trained {} for {} episodes (last training distance {last}); wrote {}",
        config.algorithm,
        metrics.len(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: &Common) -> Result<()> {
    let (config, all) = args.resolve()?;
    if all {
        bail!("eval takes a single algorithm");
    }
    let net = match config.algorithm {
        Algorithm::Random => None,
        _ => {
            let path = args.checkpoint.clone().unwrap_or_else(|| args.out.join("checkpoint.json"));
            Some(bench::load_network(&config, &path).with_context(|| format!("loading {}", path.display()))?)
        }
    };
    let e = bench::evaluate(&config, 0, config.master_seed, net.as_ref())?;
    let report = serde_json::json!({
        "algorithm": config.algorithm,
        "episodes": e.episodes.len(),
        "avg_reward": e.avg_reward,
        "avg_distance": e.avg_distance,
        "avg_moves": e.avg_moves,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench_cmd(args: &Common) -> Result<()> {
    let (config, all) = args.resolve()?;
    let result = if all {
        bench::run_comparison(&config, &Algorithm::ALL)?
    } else {
        bench::run_benchmark(&config)?
    };
    bench::export_results(&result.records, &args.out)?;
    print!("{}", result.summary);
    let ranking: Vec<&str> = result.summary.ranking.iter().map(|a| a.name()).collect();
    println!("ranking by distance: {}", ranking.join(" > "));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
