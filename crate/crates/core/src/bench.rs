//! Seeded multi-run benchmarks: train each run to a fixed episode budget,
//! evaluate greedily under the shared caps, and export per-step traces and a
//! mean ± stdev summary.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dqn::{train_dqn, DqnConfig};
use crate::env::{EnvFactory, Environment, LevelSet, ObsConfig};
use crate::episode::{run_episode, EndReason, Episode, EpisodeLimits};
use crate::error::{Error, Result};
use crate::metrics::{EpisodeRecord, MetricsLog};
use crate::policy::{NetworkConfig, PolicyNetwork};
use crate::ppo::{train_ppo, PpoConfig};
use crate::reptile::{train_reptile, ReptileConfig};

pub use crate::episode::detect_stagnation_death;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reptile,
    Ppo,
    Dqn,
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Reptile, Algorithm::Ppo, Algorithm::Dqn, Algorithm::Random];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Reptile => "reptile",
            Algorithm::Ppo => "ppo",
            Algorithm::Dqn => "dqn",
            Algorithm::Random => "random",
        }
    }

    /// Whether the trained network carries a value head.
    pub fn value_head(self, config: &RunConfig) -> bool {
        match self {
            Algorithm::Reptile => config.reptile.use_baseline,
            Algorithm::Ppo => true,
            Algorithm::Dqn | Algorithm::Random => false,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub num_runs: usize,
    pub max_moves: u64,
    pub max_distance: i64,
    pub stagnation_threshold: usize,
    /// Training levels, one task each.
    pub level_seeds: Vec<u64>,
    /// Evaluation levels.
    pub eval_seeds: Vec<u64>,
    pub difficulty: u32,
    pub level_width: usize,
    /// Offsets every level seed by the run index.
    pub per_run_levels: bool,
    /// Training budget in episodes.
    pub budget: usize,
    pub master_seed: u64,
    pub eval_episodes: usize,
    pub obs: ObsConfig,
    pub reptile: ReptileConfig,
    pub ppo: PpoConfig,
    pub dqn: DqnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Reptile,
            num_runs: 10,
            max_moves: 5000,
            max_distance: 5000,
            stagnation_threshold: 100,
            level_seeds: vec![0],
            eval_seeds: vec![0],
            difficulty: 1,
            level_width: crate::env::level::DEFAULT_WIDTH,
            per_run_levels: false,
            budget: 200,
            master_seed: 0,
            eval_episodes: 1,
            obs: ObsConfig::default(),
            reptile: ReptileConfig::default(),
            ppo: PpoConfig::default(),
            dqn: DqnConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_runs == 0 {
            return bad("num_runs must be at least 1");
        }
        if self.max_moves == 0 || self.max_distance <= 0 || self.stagnation_threshold == 0 {
            return bad("move, distance and stagnation thresholds must be positive");
        }
        if self.level_seeds.is_empty() || self.eval_seeds.is_empty() {
            return bad("level_seeds and eval_seeds must not be empty");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1");
        }
        Ok(())
    }

    /// The caps applied to every training and evaluation episode.
    pub fn limits(&self) -> EpisodeLimits {
        EpisodeLimits {
            max_moves: self.max_moves,
            max_distance: Some(self.max_distance),
            stagnation: Some(self.stagnation_threshold),
        }
    }

    fn seeds_for_run(&self, seeds: &[u64], run: usize) -> Vec<u64> {
        let offset = if self.per_run_levels { run as u64 } else { 0 };
        seeds.iter().map(|s| s.wrapping_add(offset)).collect()
    }

    pub fn training_levels(&self, run: usize) -> Result<LevelSet> {
        let seeds = self.seeds_for_run(&self.level_seeds, run);
        Ok(LevelSet::generate(&seeds, self.difficulty, self.level_width, self.obs)?)
    }

    pub fn eval_levels(&self, run: usize) -> Result<LevelSet> {
        let seeds = self.seeds_for_run(&self.eval_seeds, run);
        Ok(LevelSet::generate(&seeds, self.difficulty, self.level_width, self.obs)?)
    }

    /// Per-run seeds drawn from the master seed.
    pub fn run_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        (0..self.num_runs).map(|_| rng.gen()).collect()
    }
}

/// How evaluation picks actions.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Greedy(&'a PolicyNetwork),
    UniformRandom,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub avg_reward: f64,
    pub avg_distance: f64,
    pub avg_moves: f64,
    pub episodes: Vec<Episode>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn stdev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Plays `episodes_per_level` episodes on every level and averages total
/// reward, final distance and moves over all of them.
pub fn evaluate_policy<F: EnvFactory>(
    policy: Policy<'_>,
    levels: &F,
    episodes_per_level: usize,
    limits: &EpisodeLimits,
    rng: &mut ChaCha8Rng,
) -> Result<Evaluation> {
    let mut episodes = Vec::new();
    for task in 0..levels.num_tasks() {
        let mut env = levels.make(task);
        let actions = env.num_actions();
        for _ in 0..episodes_per_level {
            let ep = run_episode(&mut env, limits, |o| match policy {
                Policy::Greedy(net) => Ok(net.select_greedy(o)?),
                Policy::UniformRandom => Ok(rng.gen_range(0..actions)),
            })?;
            episodes.push(ep);
        }
    }
    if episodes.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let rewards: Vec<f64> = episodes.iter().map(|e| e.total_reward).collect();
    let distances: Vec<f64> = episodes.iter().map(|e| e.final_distance() as f64).collect();
    let moves: Vec<f64> = episodes.iter().map(|e| e.moves() as f64).collect();
    Ok(Evaluation {
        avg_reward: mean(&rewards),
        avg_distance: mean(&distances),
        avg_moves: mean(&moves),
        episodes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeathCause {
    Pit,
    Stagnation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeathEvent {
    /// Evaluation episode index.
    pub episode: usize,
    pub step: u64,
    pub cause: DeathCause,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPoint {
    #[serde(rename = "move")]
    pub step: u64,
    pub distance: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Distance after every move of the first evaluation episode, starting
    /// with the reset position at move 0.
    pub steps: Vec<StepPoint>,
    pub deaths: Vec<DeathEvent>,
    /// Total reward of every evaluation episode.
    pub episode_rewards: Vec<f64>,
    pub final_moves: u64,
    pub final_distance: i64,
    pub avg_reward: f64,
    pub avg_distance: f64,
    pub avg_moves: f64,
    #[serde(skip)]
    pub training: MetricsLog,
}

impl RunRecord {
    fn from_evaluation(run: usize, algorithm: Algorithm, seed: u64, eval: &Evaluation, training: MetricsLog) -> Self {
        let first = &eval.episodes[0];
        let steps: Vec<StepPoint> = first
            .trace
            .iter()
            .enumerate()
            .map(|(i, &d)| StepPoint {
                step: i as u64,
                distance: d,
            })
            .collect();
        let deaths = eval
            .episodes
            .iter()
            .enumerate()
            .filter_map(|(i, ep)| {
                let cause = match ep.end {
                    EndReason::Pit => DeathCause::Pit,
                    EndReason::Stagnation => DeathCause::Stagnation,
                    _ => return None,
                };
                Some(DeathEvent {
                    episode: i,
                    step: ep.moves(),
                    cause,
                })
            })
            .collect();
        let last = *steps.last().expect("trace holds the reset distance");
        Self {
            run,
            algorithm,
            seed,
            steps,
            deaths,
            episode_rewards: eval.episodes.iter().map(|e| e.total_reward).collect(),
            final_moves: last.step,
            final_distance: last.distance,
            avg_reward: eval.avg_reward,
            avg_distance: eval.avg_distance,
            avg_moves: eval.avg_moves,
            training,
        }
    }
}

/// Trains `config.algorithm` on the run's training levels and returns the
/// network with its training metrics. `None` for the random baseline.
pub fn train(config: &RunConfig, run: usize, seed: u64) -> Result<(Option<PolicyNetwork>, MetricsLog)> {
    let levels = config.training_levels(run)?;
    let limits = config.limits();
    Ok(match config.algorithm {
        Algorithm::Reptile => {
            let cfg = ReptileConfig {
                episode_budget: Some(config.budget),
                limits,
                ..config.reptile.clone()
            };
            let out = train_reptile(&levels, &cfg, seed)?;
            (Some(out.network), out.metrics)
        }
        Algorithm::Ppo => {
            let cfg = PpoConfig {
                episodes: config.budget,
                limits,
                ..config.ppo.clone()
            };
            let out = train_ppo(&levels, &cfg, seed)?;
            (Some(out.network), out.metrics)
        }
        Algorithm::Dqn => {
            let cfg = DqnConfig {
                episodes: config.budget,
                limits,
                ..config.dqn.clone()
            };
            let out = train_dqn(&levels, &cfg, seed)?;
            (Some(out.network), out.metrics)
        }
        Algorithm::Random => (None, MetricsLog::new()),
    })
}

/// Evaluates a trained network, or the uniform random policy when `net` is
/// `None`.
pub fn evaluate(config: &RunConfig, run: usize, seed: u64, net: Option<&PolicyNetwork>) -> Result<Evaluation> {
    let levels = config.eval_levels(run)?;
    let policy = net.map_or(Policy::UniformRandom, Policy::Greedy);
    // evaluation draws come from their own stream so training length does not shift them
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_5EED);
    evaluate_policy(policy, &levels, config.eval_episodes, &config.limits(), &mut rng)
}

/// Architecture of the network `config.algorithm` trains on these levels.
pub fn network_config(config: &RunConfig) -> Result<NetworkConfig> {
    let arch = match config.algorithm {
        Algorithm::Reptile => config.reptile.arch,
        Algorithm::Ppo => config.ppo.arch,
        Algorithm::Dqn => config.dqn.arch,
        Algorithm::Random => return Err(Error::Config("the random baseline has no network".into())),
    };
    let env = config.eval_levels(0)?.make(0);
    Ok(NetworkConfig::from_arch(
        env.observation_shape(),
        env.num_actions(),
        arch,
        config.algorithm.value_head(config),
    ))
}

/// Rebuilds a trained network from a checkpoint file.
pub fn load_network(config: &RunConfig, path: &Path) -> Result<PolicyNetwork> {
    let mut net = PolicyNetwork::new(network_config(config)?, &mut ChaCha8Rng::seed_from_u64(0))?;
    net.load(path)?;
    Ok(net)
}

fn run_one(config: &RunConfig, run: usize, seed: u64) -> Result<RunRecord> {
    let (net, training) = train(config, run, seed)?;
    let eval = evaluate(config, run, seed, net.as_ref())?;
    Ok(RunRecord::from_evaluation(run, config.algorithm, seed, &eval, training))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub algorithm: Algorithm,
    pub runs: usize,
    pub distance_mean: f64,
    pub distance_stdev: f64,
    pub moves_mean: f64,
    pub moves_stdev: f64,
    pub reward_mean: f64,
    pub pit_deaths: usize,
    pub stagnation_deaths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithms: Vec<AlgorithmSummary>,
    /// Algorithms ordered by mean evaluation distance, best first.
    pub ranking: Vec<Algorithm>,
}

/// Groups records by algorithm in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let mut order: Vec<Algorithm> = Vec::new();
    for r in records {
        if !order.contains(&r.algorithm) {
            order.push(r.algorithm);
        }
    }
    let algorithms: Vec<AlgorithmSummary> = order
        .iter()
        .map(|&a| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.algorithm == a).collect();
            let dist: Vec<f64> = rs.iter().map(|r| r.avg_distance).collect();
            let moves: Vec<f64> = rs.iter().map(|r| r.avg_moves).collect();
            let rewards: Vec<f64> = rs.iter().map(|r| r.avg_reward).collect();
            let count = |c: DeathCause| rs.iter().flat_map(|r| &r.deaths).filter(|d| d.cause == c).count();
            AlgorithmSummary {
                algorithm: a,
                runs: rs.len(),
                distance_mean: mean(&dist),
                distance_stdev: stdev(&dist),
                moves_mean: mean(&moves),
                moves_stdev: stdev(&moves),
                reward_mean: mean(&rewards),
                pit_deaths: count(DeathCause::Pit),
                stagnation_deaths: count(DeathCause::Stagnation),
            }
        })
        .collect();
    let mut ranking: Vec<&AlgorithmSummary> = algorithms.iter().collect();
    ranking.sort_by(|a, b| b.distance_mean.total_cmp(&a.distance_mean));
    Summary {
        ranking: ranking.iter().map(|s| s.algorithm).collect(),
        algorithms,
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>4} {:>22} {:>22}", "algo", "runs", "distance", "moves")?;
        for s in &self.algorithms {
            writeln!(
                f,
                "{:<8} {:>4} {:>22} {:>22}",
                s.algorithm.name(),
                s.runs,
                format!("{:.1} ± {:.1}", s.distance_mean, s.distance_stdev),
                format!("{:.1} ± {:.1}", s.moves_mean, s.moves_stdev),
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

/// Runs `config.num_runs` independent seeded runs in index order. A failing
/// run aborts the benchmark.
pub fn run_benchmark(config: &RunConfig) -> Result<BenchmarkResult> {
    config.validate()?;
    let records = config
        .run_seeds()
        .into_iter()
        .enumerate()
        .map(|(run, seed)| {
            run_one(config, run, seed).map_err(|e| Error::Run {
                run,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records);
    Ok(BenchmarkResult { records, summary })
}

/// Runs the benchmark once per algorithm with otherwise identical settings.
pub fn run_comparison(config: &RunConfig, algorithms: &[Algorithm]) -> Result<BenchmarkResult> {
    let mut records = Vec::new();
    for &algorithm in algorithms {
        let cfg = RunConfig {
            algorithm,
            ..config.clone()
        };
        records.extend(run_benchmark(&cfg)?.records);
    }
    let summary = summarize(&records);
    Ok(BenchmarkResult { records, summary })
}

pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVES_FILE: &str = "curves.json";
pub const RUNS_FILE: &str = "runs.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub run: usize,
    pub algorithm: Algorithm,
    #[serde(rename = "move")]
    pub step: u64,
    pub distance: i64,
}

#[derive(Serialize)]
struct Curve {
    run: usize,
    algorithm: Algorithm,
    moves: Vec<u64>,
    distance: Vec<i64>,
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    run: usize,
    algorithm: Algorithm,
    #[serde(flatten)]
    record: &'a EpisodeRecord,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the step CSV, the summary, the distance-vs-moves curves, the full
/// run records and the tagged training metrics into `dir`.
pub fn export_results(records: &[RunRecord], dir: &Path) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in records {
        for p in &r.steps {
            csv.serialize(StepRow {
                run: r.run,
                algorithm: r.algorithm,
                step: p.step,
                distance: p.distance,
            })
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    let bytes = csv.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    write(&dir.join(STEPS_FILE), &bytes)?;

    let summary = summarize(records);
    write(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;

    let curves: Vec<Curve> = records
        .iter()
        .map(|r| Curve {
            run: r.run,
            algorithm: r.algorithm,
            moves: r.steps.iter().map(|p| p.step).collect(),
            distance: r.steps.iter().map(|p| p.distance).collect(),
        })
        .collect();
    write(&dir.join(CURVES_FILE), serde_json::to_string(&curves)?.as_bytes())?;
    write(&dir.join(RUNS_FILE), serde_json::to_string_pretty(records)?.as_bytes())?;

    let mut metrics = String::new();
    for r in records {
        for m in &r.training.records {
            let tagged = TaggedRecord {
                run: r.run,
                algorithm: r.algorithm,
                record: m,
            };
            metrics.push_str(&serde_json::to_string(&tagged)?);
            metrics.push('\n');
        }
    }
    write(&dir.join(METRICS_FILE), metrics.as_bytes())?;
    Ok(summary)
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Level;

    fn record(run: usize, algorithm: Algorithm, trace: &[i64], reward: f64) -> RunRecord {
        let steps: Vec<StepPoint> = trace
            .iter()
            .enumerate()
            .map(|(i, &d)| StepPoint {
                step: i as u64,
                distance: d,
            })
            .collect();
        let last = *steps.last().unwrap();
        RunRecord {
            run,
            algorithm,
            seed: run as u64,
            steps,
            deaths: vec![],
            episode_rewards: vec![reward],
            final_moves: last.step,
            final_distance: last.distance,
            avg_reward: reward,
            avg_distance: last.distance as f64,
            avg_moves: last.step as f64,
            training: MetricsLog::new(),
        }
    }

    #[test]
    fn stagnation_examples_are_reexported() {
        assert_eq!(detect_stagnation_death(&[7; 101], 100), Some(100));
        let rising: Vec<i64> = (0..300).collect();
        assert_eq!(detect_stagnation_death(&rising, 100), None);
        let mut t = vec![5; 100];
        t.push(6);
        t.extend(vec![6; 99]);
        assert_eq!(detect_stagnation_death(&t, 100), None);
    }

    #[test]
    fn averages_and_spread() {
        assert_eq!(mean(&[5.0, 7.0]), 6.0);
        assert_eq!(stdev(&[3.0]), 0.0);
        assert!((stdev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.138089935299395).abs() < 1e-12);
    }

    #[test]
    fn greedy_evaluation_is_repeatable() {
        let set = LevelSet::new(vec![Level::flat(60, 40).unwrap()], ObsConfig { frames: 1, pool_factor: 4 });
        let env = set.make(0);
        let cfg = crate::policy::NetworkConfig::from_arch(env.observation_shape(), 5, Default::default(), false);
        let net = PolicyNetwork::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let limits = EpisodeLimits {
            max_moves: 200,
            max_distance: None,
            stagnation: Some(20),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = evaluate_policy(Policy::Greedy(&net), &set, 2, &limits, &mut rng).unwrap();
        assert_eq!(e.episodes.len(), 2);
        assert_eq!(e.episodes[0].trace, e.episodes[1].trace);
        assert_eq!(e.avg_reward, e.episodes[0].total_reward);
    }

    #[test]
    fn summary_matches_hand_means() {
        let rs = vec![
            record(0, Algorithm::Ppo, &[20, 30, 40], 1.0),
            record(1, Algorithm::Ppo, &[20, 30], 3.0),
            record(0, Algorithm::Random, &[20], 0.0),
        ];
        let s = summarize(&rs);
        assert_eq!(s.algorithms.len(), 2);
        let ppo = &s.algorithms[0];
        assert_eq!(ppo.distance_mean, 35.0);
        assert_eq!(ppo.moves_mean, 1.5);
        assert_eq!(ppo.reward_mean, 2.0);
        assert_eq!(s.ranking, vec![Algorithm::Ppo, Algorithm::Random]);
    }

    #[test]
    fn export_round_trip_and_refusal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_results(&[], dir.path()), Err(Error::NoRecords)));
        let rs = vec![record(0, Algorithm::Dqn, &[20, 30, 40], 1.0), record(1, Algorithm::Dqn, &[20, 20], 0.5)];
        export_results(&rs, dir.path()).unwrap();
        let rows = read_steps_csv(&dir.path().join(STEPS_FILE)).unwrap();
        assert_eq!(rows.len(), 5);
        let text = fs::read_to_string(dir.path().join(STEPS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 5 + 1);
        assert_eq!(text.lines().next().unwrap(), "run,algorithm,move,distance");
        let back: Vec<(usize, u64, i64)> = rows.iter().map(|r| (r.run, r.step, r.distance)).collect();
        let orig: Vec<(usize, u64, i64)> = rs
            .iter()
            .flat_map(|r| r.steps.iter().map(move |p| (r.run, p.step, p.distance)))
            .collect();
        assert_eq!(back, orig);
        assert!(rows.iter().all(|r| r.algorithm == Algorithm::Dqn));

        let blocked = dir.path().join("file");
        fs::write(&blocked, "x").unwrap();
        let err = export_results(&rs, &blocked.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"));
    }

    fn quick_config(algorithm: Algorithm) -> RunConfig {
        RunConfig {
            algorithm,
            num_runs: 2,
            budget: 0,
            level_width: 60,
            eval_episodes: 2,
            max_moves: 300,
            stagnation_threshold: 20,
            obs: ObsConfig { frames: 1, pool_factor: 4 },
            ..RunConfig::default()
        }
    }

    #[test]
    fn random_benchmark_with_zero_budget() {
        let cfg = quick_config(Algorithm::Random);
        let out = run_benchmark(&cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.summary.algorithms[0].runs, 2);
        for r in &out.records {
            assert!(r.final_moves <= cfg.max_moves);
            assert!(r.steps.iter().all(|p| p.distance <= cfg.max_distance));
            assert!(r.steps.windows(2).all(|w| w[0].step < w[1].step));
            assert_eq!(r.final_distance, r.steps.last().unwrap().distance);
        }
    }

    #[test]
    fn identical_configs_export_identical_bytes() {
        let mut cfg = quick_config(Algorithm::Ppo);
        cfg.budget = 3;
        cfg.ppo.rollout_len = 16;
        cfg.ppo.arch = crate::policy::ArchConfig { kernel: 2, filters: 2 };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        export_results(&run_benchmark(&cfg).unwrap().records, a.path()).unwrap();
        export_results(&run_benchmark(&cfg).unwrap().records, b.path()).unwrap();
        for f in [STEPS_FILE, SUMMARY_FILE, CURVES_FILE, RUNS_FILE, METRICS_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert!(!fs::read(a.path().join(METRICS_FILE)).unwrap().is_empty());
    }

    #[test]
    fn algorithm_names_parse() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("a2c".parse::<Algorithm>().is_err());
    }
}
