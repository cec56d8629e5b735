//! Deep Q-learning with a replay buffer, a periodically synced target network
//! and linearly decaying epsilon-greedy exploration. The network's logits are
//! read as action values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvFactory, Environment, ObservationStack};
use crate::episode::{run_agent_episode, Agent, EpisodeLimits, Transition};
use crate::error::{Error, Result};
use crate::metrics::{EpisodeRecord, MetricsLog};
use crate::policy::{ArchConfig, NetworkConfig, PolicyNetwork};
use crate::replay::{ExperienceTuple, ReplayBuffer};
use crate::tensor::{clip_grad_norm, Adam, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub gamma: f64,
    /// Learner steps between target syncs.
    pub target_sync: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which epsilon decays linearly.
    pub epsilon_decay_steps: u64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Environment steps before the first update.
    pub warmup: u64,
    /// Environment steps per learner update.
    pub train_every: u64,
    pub max_grad_norm: Option<f64>,
    /// Training budget in episodes.
    pub episodes: usize,
    pub limits: EpisodeLimits,
    pub arch: ArchConfig,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            target_sync: 500,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            replay_capacity: 10_000,
            batch_size: 32,
            lr: 1e-3,
            warmup: 500,
            train_every: 1,
            max_grad_norm: Some(10.0),
            episodes: 1000,
            limits: EpisodeLimits {
                max_moves: 1000,
                max_distance: None,
                stagnation: Some(100),
            },
            arch: ArchConfig::default(),
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dqn: {m}")));
        if self.target_sync == 0 || self.train_every == 0 {
            return bad("target_sync and train_every must be at least 1");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return bad("batch_size must be in 1..=replay_capacity");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if self.max_grad_norm.is_some_and(|m| m <= 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }

    /// Exploration rate after `step` environment steps.
    pub fn epsilon(&self, step: u64) -> f64 {
        if step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Frozen copy of a Q-network.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetNetwork {
    net: PolicyNetwork,
}

impl TargetNetwork {
    pub fn new(live: &PolicyNetwork) -> Self {
        Self { net: live.clone() }
    }

    pub fn network(&self) -> &PolicyNetwork {
        &self.net
    }

    pub fn q_values(&self, obs: &ObservationStack) -> Result<Vec<f64>> {
        Ok(self.net.forward_logits(obs)?)
    }
}

/// Copies the live parameters into the target.
pub fn sync_target(live: &PolicyNetwork, target: &mut TargetNetwork) -> Result<()> {
    Ok(target.net.copy_from(live)?)
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `r` when `done`, else `r + γ·max_a' Q_target(s', a')`.
pub fn td_target(reward: f64, next_obs: &ObservationStack, done: bool, target: &TargetNetwork, gamma: f64) -> Result<f64> {
    if done {
        return Ok(reward);
    }
    Ok(reward + gamma * max(&target.q_values(next_obs)?))
}

/// Batched [`td_target`].
pub fn td_targets(batch: &[&ExperienceTuple], target: &TargetNetwork, gamma: f64) -> Result<Vec<f64>> {
    let a = target.net.config().actions;
    let next: Vec<&ObservationStack> = batch.iter().map(|t| t.next_obs.as_ref()).collect();
    let q = target.net.forward_batch(&next)?;
    Ok(batch
        .iter()
        .zip(q.chunks_exact(a))
        .map(|(t, row)| if t.done { t.reward } else { t.reward + gamma * max(row) })
        .collect())
}

fn loss_impl(net: &mut PolicyNetwork, batch: &[&ExperienceTuple], targets: &[f64], backward: bool) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty td batch".into()));
    }
    let obs: Vec<&ObservationStack> = batch.iter().map(|t| t.obs.as_ref()).collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let mut tape = Tape::new();
    let vars = net.register(&mut tape)?;
    let out = net.record(&mut tape, &vars, &obs)?;
    let q = tape.gather(out.logits, &actions)?;
    let y = tape.constant(Tensor::from_vec(targets.to_vec()))?;
    let err = tape.sub(y, q)?;
    let sq = tape.square(err)?;
    let loss = tape.mean(sq)?;
    let value = tape.value(loss).item()?;
    if backward {
        tape.backward(loss, net.params_mut())?;
    }
    Ok(value)
}

/// Mean squared error between the targets and the Q-values of the taken
/// actions.
pub fn td_loss(batch: &[&ExperienceTuple], net: &PolicyNetwork, target: &TargetNetwork, gamma: f64) -> Result<f64> {
    let y = td_targets(batch, target, gamma)?;
    loss_impl(&mut net.clone(), batch, &y, false)
}

/// Adds the gradient of [`td_loss`] into `net`'s grads and returns the loss.
pub fn td_backward(batch: &[&ExperienceTuple], net: &mut PolicyNetwork, target: &TargetNetwork, gamma: f64) -> Result<f64> {
    let y = td_targets(batch, target, gamma)?;
    loss_impl(net, batch, &y, true)
}

/// Learner state shared across episodes.
pub struct DqnLearner {
    config: DqnConfig,
    net: PolicyNetwork,
    target: TargetNetwork,
    opt: Adam,
    replay: ReplayBuffer<ExperienceTuple>,
    rng: ChaCha8Rng,
    env_steps: u64,
    learner_steps: u64,
}

impl DqnLearner {
    pub fn new(config: DqnConfig, input: [usize; 3], actions: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = PolicyNetwork::new(NetworkConfig::from_arch(input, actions, config.arch, false), &mut rng)?;
        Ok(Self {
            target: TargetNetwork::new(&net),
            opt: Adam::with_lr(config.lr),
            replay: ReplayBuffer::new(config.replay_capacity),
            config,
            net,
            rng,
            env_steps: 0,
            learner_steps: 0,
        })
    }

    pub fn network(&self) -> &PolicyNetwork {
        &self.net
    }

    pub fn target(&self) -> &TargetNetwork {
        &self.target
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn learner_steps(&self) -> u64 {
        self.learner_steps
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn learn(&mut self) -> Result<()> {
        let batch: Vec<ExperienceTuple> = self
            .replay
            .sample(self.config.batch_size, &mut self.rng)
            .into_iter()
            .cloned()
            .collect();
        let refs: Vec<&ExperienceTuple> = batch.iter().collect();
        self.net.zero_grad();
        td_backward(&refs, &mut self.net, &self.target, self.config.gamma)?;
        if let Some(m) = self.config.max_grad_norm {
            clip_grad_norm(self.net.params_mut(), m);
        }
        self.opt.step(self.net.params_mut())?;
        self.learner_steps += 1;
        if self.learner_steps % self.config.target_sync == 0 {
            sync_target(&self.net, &mut self.target)?;
        }
        Ok(())
    }
}

impl Agent for DqnLearner {
    fn act(&mut self, obs: &ObservationStack) -> Result<usize> {
        let eps = self.config.epsilon(self.env_steps);
        Ok(self.net.select_epsilon_greedy(obs, eps, &mut self.rng)?)
    }

    fn observe(&mut self, t: &Transition) -> Result<()> {
        self.replay.push(ExperienceTuple {
            obs: t.obs.clone(),
            action: t.action,
            reward: t.reward,
            next_obs: t.next_obs.clone(),
            done: t.done,
            // not used by the TD update
            return_to_go: 0.0,
        });
        self.env_steps += 1;
        let due = self.env_steps % self.config.train_every == 0;
        if due && self.env_steps >= self.config.warmup && self.replay.len() >= self.config.batch_size {
            self.learn()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DqnOutcome {
    pub network: PolicyNetwork,
    pub metrics: MetricsLog,
}

/// Trains a fresh Q-network for `config.episodes` episodes on uniformly drawn
/// tasks.
pub fn train_dqn<F: EnvFactory>(factory: &F, config: &DqnConfig, seed: u64) -> Result<DqnOutcome> {
    if factory.num_tasks() == 0 {
        return Err(Error::Config("dqn needs at least one task".into()));
    }
    let probe = factory.make(0);
    let mut learner = DqnLearner::new(config.clone(), probe.observation_shape(), probe.num_actions(), seed)?;
    let mut metrics = MetricsLog::new();
    for episode in 0..config.episodes {
        let task = learner.rng().gen_range(0..factory.num_tasks());
        let mut env = factory.make(task);
        let ep = run_agent_episode(&mut env, &config.limits, &mut learner)?;
        metrics.push(EpisodeRecord::from_episode(0, task, episode, &ep));
    }
    Ok(DqnOutcome {
        network: learner.net,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Corridor;
    use crate::policy::{POLICY_BIAS, POLICY_WEIGHT};
    use crate::tensor::{finite_difference_gradient, Parameter};
    use std::sync::Arc;

    fn net_with(input: [usize; 3], actions: usize, filters: usize, seed: u64) -> PolicyNetwork {
        let cfg = NetworkConfig {
            input,
            kernel: 1,
            filters,
            actions,
            value_head: false,
        };
        PolicyNetwork::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn tuple(obs: ObservationStack, action: usize, reward: f64, next: ObservationStack, done: bool) -> ExperienceTuple {
        ExperienceTuple {
            obs: Arc::new(obs),
            action,
            reward,
            next_obs: Arc::new(next),
            done,
            return_to_go: 0.0,
        }
    }

    /// A target whose Q-values are exactly the output bias.
    fn bias_only_target(q: &[f64]) -> TargetNetwork {
        let mut net = net_with([2, 1, 1], q.len(), 2, 0);
        net.params_mut()[POLICY_WEIGHT].value.fill(0.0);
        net.params_mut()[POLICY_BIAS].value.data_mut().copy_from_slice(q);
        TargetNetwork::new(&net)
    }

    #[test]
    fn target_examples() {
        let c = Corridor::new(2, 1.0);
        let t = bias_only_target(&[1.0, 3.0, 2.0, 0.0, 0.0]);
        assert_eq!(td_target(-100.0, &c.observe(1), true, &t, 0.99).unwrap(), -100.0);
        assert_eq!(td_target(1.5, &c.observe(1), false, &t, 0.0).unwrap(), 1.5);
        let y = td_target(1.0, &c.observe(1), false, &t, 0.9).unwrap();
        assert!((y - 3.7).abs() < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let c = Corridor::new(2, 1.0);
        let mut net = net_with([2, 1, 1], 5, 2, 1);
        net.params_mut()[POLICY_WEIGHT].value.fill(0.0);
        net.params_mut()[POLICY_BIAS].value.fill(0.0);
        // y = 2 against Q(s, a) = 0
        let target = bias_only_target(&[0.0; 5]);
        let b = tuple(c.observe(0), 3, 2.0, c.observe(1), true);
        assert_eq!(td_loss(&[&b], &net, &target, 0.9).unwrap(), 4.0);

        let exact = tuple(c.observe(0), 3, 0.0, c.observe(1), true);
        net.zero_grad();
        assert_eq!(td_backward(&[&exact], &mut net, &target, 0.9).unwrap(), 0.0);
        assert!(net.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn gradient_only_touches_taken_action_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = net_with([3, 2, 1], 5, 3, 2);
        let target = TargetNetwork::new(&net_with([3, 2, 1], 5, 3, 9));
        let obs = |rng: &mut ChaCha8Rng| {
            let v = (0..6).map(|_| rng.gen_range(0.2..1.0)).collect();
            ObservationStack::new(Tensor::new(vec![3, 2, 1], v).unwrap()).unwrap()
        };
        let b = tuple(obs(&mut rng), 2, 1.0, obs(&mut rng), false);
        net.zero_grad();
        td_backward(&[&b], &mut net, &target, 0.9).unwrap();
        let g = &net.params()[POLICY_WEIGHT].grad;
        let a = 5;
        for (i, v) in g.data().iter().enumerate() {
            if i % a != 2 {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(g.data().iter().any(|&v| v != 0.0));
        let gb = net.params()[POLICY_BIAS].grad.data();
        assert!(gb.iter().enumerate().all(|(i, &v)| (i == 2) == (v != 0.0)));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let mut net = net_with([3, 2, 2], 4, 3, 20 + trial);
            let target = TargetNetwork::new(&net_with([3, 2, 2], 4, 3, 40 + trial));
            let obs = |rng: &mut ChaCha8Rng| {
                let v = (0..12).map(|_| rng.gen_range(0.2..1.0)).collect();
                ObservationStack::new(Tensor::new(vec![3, 2, 2], v).unwrap()).unwrap()
            };
            let batch: Vec<ExperienceTuple> = (0..4)
                .map(|i| tuple(obs(&mut rng), i % 4, rng.gen_range(-1.0..1.0), obs(&mut rng), i == 3))
                .collect();
            let refs: Vec<&ExperienceTuple> = batch.iter().collect();
            net.zero_grad();
            td_backward(&refs, &mut net, &target, 0.9).unwrap();
            let analytic: Vec<Tensor> = net.params().iter().map(|p| p.grad.clone()).collect();
            let base = net.clone();
            let mut params: Vec<Parameter> = net.params().to_vec();
            let numeric = finite_difference_gradient(
                &mut params,
                |ps| {
                    let mut n = base.clone();
                    for (d, s) in n.params_mut().iter_mut().zip(ps) {
                        d.value = s.value.clone();
                    }
                    td_loss(&refs, &n, &target, 0.9).unwrap()
                },
                1e-6,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                for (x, y) in a.data().iter().zip(n.data()) {
                    assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1.0), "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn sync_copies_and_freezes() {
        let c = Corridor::new(4, 1.0);
        let mut live = net_with([4, 1, 1], 2, 3, 1);
        let mut target = TargetNetwork::new(&net_with([4, 1, 1], 2, 3, 2));
        sync_target(&live, &mut target).unwrap();
        for s in 0..4 {
            assert_eq!(target.q_values(&c.observe(s)).unwrap(), live.forward_logits(&c.observe(s)).unwrap());
        }
        let before = target.clone();
        sync_target(&live, &mut target).unwrap();
        assert!(before == target);
        live.params_mut()[POLICY_BIAS].value.fill(7.0);
        assert_eq!(target.q_values(&c.observe(1)).unwrap(), before.q_values(&c.observe(1)).unwrap());
        assert!(sync_target(&net_with([4, 1, 1], 3, 3, 1), &mut target).is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = DqnConfig::default();
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(5_000) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon(10_000), 0.05);
        assert_eq!(cfg.epsilon(50_000), 0.05);
    }

    fn corridor_config() -> DqnConfig {
        DqnConfig {
            gamma: 0.9,
            target_sync: 50,
            epsilon_decay_steps: 1500,
            epsilon_end: 0.1,
            replay_capacity: 2000,
            batch_size: 32,
            lr: 1e-2,
            warmup: 100,
            episodes: 300,
            limits: EpisodeLimits {
                max_moves: 30,
                max_distance: None,
                stagnation: None,
            },
            arch: ArchConfig { kernel: 1, filters: 4 },
            ..DqnConfig::default()
        }
    }

    #[test]
    fn zero_lr_and_determinism() {
        let c = Corridor::new(6, 1.0);
        let cfg = DqnConfig {
            lr: 0.0,
            episodes: 20,
            ..corridor_config()
        };
        let out = train_dqn(&c, &cfg, 3).unwrap();
        let fresh = DqnLearner::new(cfg.clone(), [6, 1, 1], 2, 3).unwrap();
        let same = out.network.params().iter().zip(fresh.network().params());
        assert!(same.into_iter().all(|(a, b)| a.value == b.value));

        let cfg = DqnConfig {
            episodes: 20,
            ..corridor_config()
        };
        let a = train_dqn(&c, &cfg, 5).unwrap();
        let b = train_dqn(&c, &cfg, 5).unwrap();
        assert_eq!(a.metrics.to_jsonl(), b.metrics.to_jsonl());
        assert!(a.network == b.network);
    }

    #[test]
    fn corridor_matches_value_iteration() {
        let c = Corridor::new(6, 1.0);
        let cfg = corridor_config();
        let q_star = c.value_iteration(cfg.gamma, 1e-12);
        let out = train_dqn(&c, &cfg, 0).unwrap();
        for s in 0..5 {
            let q = out.network.forward_logits(&c.observe(s)).unwrap();
            let best = if q_star[s][1] > q_star[s][0] { 1 } else { 0 };
            assert_eq!(out.network.select_greedy(&c.observe(s)).unwrap(), best, "state {s}: {q:?}");
            for a in 0..2 {
                assert!((q[a] - q_star[s][a]).abs() < 0.1, "state {s} action {a}: {} vs {}", q[a], q_star[s][a]);
            }
        }
    }
}
