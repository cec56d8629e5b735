//! Reptile meta-reinforcement learning.
//!
//! A vanilla REINFORCE warm start is followed by a task loop: for each sampled
//! level the policy is fine-tuned from the current initialization with
//! replayed mini-batches, and the initialization is then interpolated toward
//! the fine-tuned weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvFactory, Environment, ObservationStack};
use crate::episode::{run_episode, EpisodeLimits};
use crate::error::{Error, Result};
use crate::metrics::{EpisodeRecord, MetricsLog};
use crate::policy::{ArchConfig, NetworkConfig, PolicyNetwork, VALUE_BIAS, VALUE_WEIGHT};
use crate::replay::{ExperienceTuple, ReplayBuffer};
use crate::tensor::{clip_grad_norm, sgd_step, Adam, Checkpoint, Parameter, Tape, Tensor};

/// Steps per recorded tape when differentiating whole episodes.
const TAPE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerObjective {
    /// Policy gradient on replayed returns-to-go minus the baseline.
    Reinforce,
    /// `log softmax(f)[a] · TD-error` with the logits read as action values.
    LogitTdError,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterMode {
    /// Interpolate after every task.
    Serial,
    /// Interpolate toward the mean of all task weights of an iteration.
    Batched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReptileConfig {
    /// Tasks visited per meta-iteration.
    pub tasks_per_iteration: usize,
    pub episodes_per_task: usize,
    /// Mini-batch updates after each episode.
    pub num_grad_steps: usize,
    /// Step size of the vanilla warm start.
    pub meta_lr: f64,
    pub inner_lr: f64,
    /// Interpolation rate of the outer update.
    pub meta_step: f64,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub meta_iterations: usize,
    /// Stops training once this many episodes have been played in total.
    pub episode_budget: Option<usize>,
    pub init_iterations: usize,
    /// Tasks sampled per warm-start iteration.
    pub init_tasks: usize,
    pub objective: InnerObjective,
    pub outer: OuterMode,
    pub use_baseline: bool,
    pub baseline_lr: f64,
    pub reset_replay_per_task: bool,
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    /// Weight of a mean-entropy bonus added to the inner objective.
    pub entropy_coef: f64,
    pub limits: EpisodeLimits,
    pub arch: ArchConfig,
}

impl Default for ReptileConfig {
    fn default() -> Self {
        Self {
            tasks_per_iteration: 10,
            episodes_per_task: 10,
            num_grad_steps: 10,
            meta_lr: 1e-3,
            inner_lr: 0.1,
            meta_step: 0.1,
            gamma: 0.99,
            replay_capacity: 10_000,
            batch_size: 32,
            meta_iterations: 1,
            episode_budget: None,
            init_iterations: 3,
            init_tasks: 10,
            objective: InnerObjective::Reinforce,
            outer: OuterMode::Serial,
            use_baseline: true,
            baseline_lr: 1e-3,
            reset_replay_per_task: false,
            max_grad_norm: Some(1.0),
            normalize_advantages: true,
            entropy_coef: 0.0,
            limits: EpisodeLimits {
                max_moves: 1000,
                max_distance: None,
                stagnation: Some(100),
            },
            arch: ArchConfig::default(),
        }
    }
}

impl ReptileConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("reptile: {m}")));
        if !(self.meta_lr >= 0.0 && self.inner_lr >= 0.0 && self.baseline_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.meta_step) {
            return bad("meta_step must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return bad("batch_size must be in 1..=replay_capacity");
        }
        if self.max_grad_norm.is_some_and(|m| m <= 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be non-negative");
        }
        Ok(())
    }
}

/// Fine-tuned policy parameters for one task visit. The value head is not
/// part of the task weights; it is trained directly by the baseline
/// optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    pub task: usize,
    pub params: Vec<Parameter>,
}

/// `-Σ weights[i] · log π(actions[i] | obs[i])`, value only.
pub fn reinforce_loss(
    net: &PolicyNetwork,
    obs: &[&ObservationStack],
    actions: &[usize],
    weights: &[f64],
) -> Result<f64> {
    let a = net.config().actions;
    let logits = net.forward_batch(obs)?;
    Ok(logits
        .chunks_exact(a)
        .zip(actions.iter().zip(weights))
        .map(|(row, (&act, &w))| -w * crate::tensor::log_softmax(row)[act])
        .sum())
}

/// Adds the gradient of [`reinforce_loss`] into the network's grad slots and
/// returns the loss.
pub fn reinforce_backward(
    net: &mut PolicyNetwork,
    obs: &[&ObservationStack],
    actions: &[usize],
    weights: &[f64],
) -> Result<f64> {
    if obs.len() != actions.len() || obs.len() != weights.len() {
        return Err(Error::Config("reinforce batch arrays differ in length".into()));
    }
    let mut total = 0.0;
    for start in (0..obs.len()).step_by(TAPE_CHUNK) {
        let end = (start + TAPE_CHUNK).min(obs.len());
        let mut tape = Tape::new();
        let vars = net.register(&mut tape)?;
        let out = net.record(&mut tape, &vars, &obs[start..end])?;
        let logp = tape.log_softmax(out.logits)?;
        let picked = tape.gather(logp, &actions[start..end])?;
        let w = tape.constant(Tensor::from_vec(weights[start..end].to_vec()))?;
        let prod = tape.mul(picked, w)?;
        let sum = tape.sum(prod)?;
        let loss = tape.scale(sum, -1.0)?;
        total += tape.value(loss).item()?;
        tape.backward(loss, net.params_mut())?;
    }
    Ok(total)
}

/// Adds the gradient of `−coef · mean_i H(π(·|obs[i]))` into the policy
/// grads and returns the mean entropy.
pub fn entropy_bonus_backward(net: &mut PolicyNetwork, obs: &[&ObservationStack], coef: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape)?;
    let out = net.record(&mut tape, &vars, obs)?;
    let p = tape.softmax(out.logits)?;
    let logp = tape.log_softmax(out.logits)?;
    let plogp = tape.mul(p, logp)?;
    let neg_h = tape.row_sum(plogp)?;
    let neg_h = tape.mean(neg_h)?;
    let entropy = -tape.value(neg_h).item()?;
    let loss = tape.scale(neg_h, coef)?;
    tape.backward(loss, net.params_mut())?;
    Ok(entropy)
}

/// One-step TD errors `r + γ·max f(s')·(1 − done) − f(s, a)` from the raw
/// logits, treated as constants.
pub fn td_errors(net: &PolicyNetwork, batch: &[&ExperienceTuple], gamma: f64) -> Result<Vec<f64>> {
    let a = net.config().actions;
    let obs: Vec<&ObservationStack> = batch.iter().map(|t| t.obs.as_ref()).collect();
    let next: Vec<&ObservationStack> = batch.iter().map(|t| t.next_obs.as_ref()).collect();
    let q = net.forward_batch(&obs)?;
    let qn = net.forward_batch(&next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let best = qn[i * a..(i + 1) * a].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bootstrap = if t.done { 0.0 } else { gamma * best };
            t.reward + bootstrap - q[i * a + t.action]
        })
        .collect())
}

/// Mean squared error of the value head against `targets`; gradients flow
/// into the value head only.
pub fn value_regression_backward(net: &mut PolicyNetwork, obs: &[&ObservationStack], targets: &[f64]) -> Result<f64> {
    if !net.has_value_head() {
        return Err(crate::policy::PolicyError::NoValueHead.into());
    }
    let d = net.config().flatten_dim();
    let feats = net.features(obs)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![obs.len(), d], feats)?)?;
    let head = &net.params()[VALUE_WEIGHT..=VALUE_BIAS];
    let w = tape.param(0, &head[0])?;
    let b = tape.param(1, &head[1])?;
    let v = tape.dense(x, w, b)?;
    let v = tape.reshape(v, &[obs.len()])?;
    let g = tape.constant(Tensor::from_vec(targets.to_vec()))?;
    let diff = tape.sub(v, g)?;
    let sq = tape.square(diff)?;
    let loss = tape.mean(sq)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss, &mut net.params_mut()[VALUE_WEIGHT..=VALUE_BIAS])?;
    Ok(value)
}

/// `Σ_i ‖w_i − θ‖²` and its gradient `−2 Σ_i (w_i − θ)`.
pub fn meta_loss(theta: &[Parameter], tasks: &[TaskWeights]) -> Result<(f64, Vec<Tensor>)> {
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = theta.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for tw in tasks {
        check_compatible(theta, &tw.params)?;
        for ((p, w), g) in theta.iter().zip(&tw.params).zip(grads.iter_mut()) {
            for ((t, wi), gi) in p.value.data().iter().zip(w.value.data()).zip(g.data_mut()) {
                let d = wi - t;
                loss += d * d;
                *gi -= 2.0 * d;
            }
        }
    }
    Ok((loss, grads))
}

/// `θ ← (1 − β) θ + β target`, clamped into the interval spanned by the two.
pub fn reptile_outer_update(theta: &mut [Parameter], target: &[Parameter], beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("meta_step {beta} outside [0, 1]")));
    }
    check_compatible(theta, target)?;
    for (p, w) in theta.iter_mut().zip(target) {
        for (t, &wi) in p.value.data_mut().iter_mut().zip(w.value.data()) {
            let mixed = (1.0 - beta) * *t + beta * wi;
            *t = mixed.clamp(t.min(wi), t.max(wi));
        }
    }
    Ok(())
}

/// Element-wise mean of task weights, accumulated in task order.
pub fn mean_task_weights(tasks: &[TaskWeights]) -> Result<Vec<Parameter>> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Config("no task weights to average".into()))?;
    let mut mean = first.params.clone();
    for tw in &tasks[1..] {
        check_compatible(&mean, &tw.params)?;
        for (m, w) in mean.iter_mut().zip(&tw.params) {
            m.value.data_mut().iter_mut().zip(w.value.data()).for_each(|(a, b)| *a += b);
        }
    }
    let k = tasks.len() as f64;
    for m in &mut mean {
        m.value.data_mut().iter_mut().for_each(|a| *a /= k);
    }
    Ok(mean)
}

fn check_compatible(a: &[Parameter], b: &[Parameter]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.value.shape() != y.value.shape()) {
        return Err(Error::Config("parameter lists have different shapes".into()));
    }
    Ok(())
}

fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in v.iter_mut() {
        *x -= mean;
        if var > 1e-8 {
            *x /= std;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReptileOutcome {
    pub network: PolicyNetwork,
    pub metrics: MetricsLog,
    /// Parameters after the warm start and after every meta-iteration.
    pub checkpoints: Vec<Checkpoint>,
}

/// Owns the live initialization, the run RNG, the replay buffer and the
/// baseline optimizer. The individual steps are public so that they can be
/// driven one at a time.
pub struct ReptileTrainer<'a, F: EnvFactory> {
    factory: &'a F,
    config: ReptileConfig,
    rng: ChaCha8Rng,
    net: PolicyNetwork,
    replay: ReplayBuffer<ExperienceTuple>,
    baseline_opt: Adam,
    metrics: MetricsLog,
    episodes: usize,
}

impl<'a, F: EnvFactory> ReptileTrainer<'a, F> {
    pub fn new(factory: &'a F, config: ReptileConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if factory.num_tasks() == 0 {
            return Err(Error::Config("reptile needs at least one task".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = factory.make(0);
        let net_cfg = NetworkConfig::from_arch(
            probe.observation_shape(),
            probe.num_actions(),
            config.arch,
            config.use_baseline,
        );
        let net = PolicyNetwork::new(net_cfg, &mut rng)?;
        Ok(Self {
            factory,
            replay: ReplayBuffer::new(config.replay_capacity),
            baseline_opt: Adam::with_lr(config.baseline_lr),
            config,
            rng,
            net,
            metrics: MetricsLog::new(),
            episodes: 0,
        })
    }

    pub fn network(&self) -> &PolicyNetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut PolicyNetwork {
        &mut self.net
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn episodes_played(&self) -> usize {
        self.episodes
    }

    fn budget_left(&self) -> bool {
        self.config.episode_budget.map_or(true, |b| self.episodes < b)
    }

    pub fn sample_task(&mut self) -> usize {
        self.rng.gen_range(0..self.factory.num_tasks())
    }

    /// Warm start: each iteration samples `init_tasks` tasks, plays
    /// `episodes_per_task` episodes on each with the current policy, and
    /// takes one `meta_lr` step on `−Σ log π(a|X) · R` summed over all of them.
    pub fn vanilla_meta_init(&mut self) -> Result<()> {
        for _ in 0..self.config.init_iterations {
            if !self.budget_left() {
                break;
            }
            self.net.zero_grad();
            for _ in 0..self.config.init_tasks {
                let task = self.sample_task();
                let mut env = self.factory.make(task);
                for j in 0..self.config.episodes_per_task {
                    if !self.budget_left() {
                        break;
                    }
                    let (net, rng) = (&self.net, &mut self.rng);
                    let ep = run_episode(&mut env, &self.config.limits, |o| Ok(net.select_sample(o, rng)?))?;
                    if ep.transitions.is_empty() {
                        return Err(Error::EmptyEpisode);
                    }
                    self.episodes += 1;
                    self.metrics.push(EpisodeRecord::from_episode(0, task, j, &ep));
                    let obs: Vec<&ObservationStack> = ep.transitions.iter().map(|t| t.obs.as_ref()).collect();
                    let actions: Vec<usize> = ep.transitions.iter().map(|t| t.action).collect();
                    let weights = vec![ep.total_reward; obs.len()];
                    reinforce_backward(&mut self.net, &obs, &actions, &weights)?;
                }
            }
            let policy = self.net.policy_params_mut();
            if let Some(m) = self.config.max_grad_norm {
                clip_grad_norm(policy, m);
            }
            sgd_step(policy, self.config.meta_lr)?;
        }
        Ok(())
    }

    /// Fine-tunes a copy of the live policy on `task` and returns its weights.
    /// Only the baseline head, the replay buffer, the RNG and the metrics of
    /// the trainer change.
    pub fn inner_task_update(&mut self, task: usize, meta_iter: usize) -> Result<TaskWeights> {
        let cfg = self.config.clone();
        if cfg.reset_replay_per_task {
            self.replay.clear();
        }
        let mut local = self.net.clone();
        let mut env = self.factory.make(task);
        for j in 0..cfg.episodes_per_task {
            if !self.budget_left() {
                break;
            }
            let rng = &mut self.rng;
            let ep = run_episode(&mut env, &cfg.limits, |o| Ok(local.select_sample(o, rng)?))?;
            if ep.transitions.is_empty() {
                return Err(Error::EmptyEpisode);
            }
            self.episodes += 1;
            self.metrics.push(EpisodeRecord::from_episode(meta_iter, task, j, &ep));
            let returns = ep.returns_to_go(cfg.gamma);
            for (t, g) in ep.transitions.iter().zip(returns) {
                self.replay.push(ExperienceTuple {
                    obs: t.obs.clone(),
                    action: t.action,
                    reward: t.reward,
                    next_obs: t.next_obs.clone(),
                    done: t.done,
                    return_to_go: g,
                });
            }
            for _ in 0..cfg.num_grad_steps {
                let batch: Vec<ExperienceTuple> = self
                    .replay
                    .sample(cfg.batch_size, &mut self.rng)
                    .into_iter()
                    .cloned()
                    .collect();
                self.inner_step(&mut local, &batch)?;
            }
        }
        if local.has_value_head() {
            for i in VALUE_WEIGHT..=VALUE_BIAS {
                self.net.params_mut()[i].value = local.params()[i].value.clone();
            }
        }
        let n = VALUE_WEIGHT.min(local.params().len());
        Ok(TaskWeights {
            task,
            params: local.params()[..n].to_vec(),
        })
    }

    fn inner_step(&mut self, local: &mut PolicyNetwork, batch: &[ExperienceTuple]) -> Result<()> {
        let cfg = &self.config;
        let m = batch.len() as f64;
        let obs: Vec<&ObservationStack> = batch.iter().map(|t| t.obs.as_ref()).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let returns: Vec<f64> = batch.iter().map(|t| t.return_to_go).collect();
        let weights = match cfg.objective {
            InnerObjective::Reinforce => {
                let mut adv = returns.clone();
                if cfg.use_baseline {
                    let (_, values) = local.forward_batch_with_values(&obs)?;
                    adv.iter_mut().zip(values).for_each(|(a, b)| *a -= b);
                }
                if cfg.normalize_advantages {
                    normalize(&mut adv);
                }
                adv.iter().map(|a| a / m).collect::<Vec<_>>()
            }
            InnerObjective::LogitTdError => {
                let refs: Vec<&ExperienceTuple> = batch.iter().collect();
                // descending `(1/M) Σ log f(s,a)·δ` equals reinforce_loss with weights −δ/M
                td_errors(local, &refs, cfg.gamma)?
                    .into_iter()
                    .map(|d| -d / m)
                    .collect()
            }
        };
        local.zero_grad();
        reinforce_backward(local, &obs, &actions, &weights)?;
        if cfg.entropy_coef > 0.0 {
            entropy_bonus_backward(local, &obs, cfg.entropy_coef)?;
        }
        let policy = local.policy_params_mut();
        if let Some(max) = cfg.max_grad_norm {
            clip_grad_norm(policy, max);
        }
        sgd_step(policy, cfg.inner_lr)?;
        if cfg.use_baseline {
            local.zero_grad();
            value_regression_backward(local, &obs, &returns)?;
            self.baseline_opt
                .step(&mut local.params_mut()[VALUE_WEIGHT..=VALUE_BIAS])?;
        }
        Ok(())
    }

    /// Moves the live policy toward `target`.
    pub fn outer_update(&mut self, target: &[Parameter]) -> Result<()> {
        reptile_outer_update(self.net.policy_params_mut(), target, self.config.meta_step)
    }

    /// Warm start followed by the meta-iterations.
    pub fn run(mut self) -> Result<ReptileOutcome> {
        self.vanilla_meta_init()?;
        let mut checkpoints = vec![self.net.checkpoint()];
        for it in 1..=self.config.meta_iterations {
            if !self.budget_left() {
                break;
            }
            let mut batch = Vec::new();
            for _ in 0..self.config.tasks_per_iteration {
                if !self.budget_left() {
                    break;
                }
                let task = self.sample_task();
                let w = self.inner_task_update(task, it)?;
                match self.config.outer {
                    OuterMode::Serial => self.outer_update(&w.params)?,
                    OuterMode::Batched => batch.push(w),
                }
            }
            if !batch.is_empty() {
                let mean = mean_task_weights(&batch)?;
                self.outer_update(&mean)?;
            }
            checkpoints.push(self.net.checkpoint());
        }
        Ok(ReptileOutcome {
            network: self.net,
            metrics: self.metrics,
            checkpoints,
        })
    }
}

/// Trains from scratch with the run seed `seed`.
pub fn train_reptile<F: EnvFactory>(factory: &F, config: &ReptileConfig, seed: u64) -> Result<ReptileOutcome> {
    ReptileTrainer::new(factory, config.clone(), seed)?.run()
}
