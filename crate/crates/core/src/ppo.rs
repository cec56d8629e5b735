//! Proximal policy optimization with a clipped surrogate, a value loss and an
//! entropy bonus, using GAE advantages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvFactory, Environment, ObservationStack};
use crate::episode::{run_episode, EpisodeLimits};
use crate::error::{Error, Result};
use crate::metrics::{EpisodeRecord, MetricsLog};
use crate::policy::{ArchConfig, NetworkConfig, PolicyNetwork};
use crate::tensor::{clip_grad_norm, log_softmax, Adam, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    /// Value loss coefficient.
    pub c1: f64,
    /// Entropy bonus coefficient.
    pub c2: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Environment steps collected before each update phase. Whole episodes
    /// are collected, so a rollout may run slightly longer.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    /// Training budget in episodes.
    pub episodes: usize,
    /// Multiplies rewards before they enter the advantage computation.
    pub reward_scale: f64,
    pub limits: EpisodeLimits,
    pub arch: ArchConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            c1: 0.5,
            c2: 0.01,
            gamma: 0.99,
            gae_lambda: 0.95,
            rollout_len: 512,
            epochs: 4,
            minibatch: 64,
            lr: 1e-3,
            max_grad_norm: Some(0.5),
            episodes: 1000,
            reward_scale: 0.01,
            limits: EpisodeLimits {
                max_moves: 1000,
                max_distance: None,
                stagnation: Some(100),
            },
            arch: ArchConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return bad("c1 and c2 must be non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0 && self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma and gae_lambda must lie in (0, 1]");
        }
        if self.rollout_len == 0 || self.epochs == 0 || self.minibatch == 0 {
            return bad("rollout_len, epochs and minibatch must be positive");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if self.max_grad_norm.is_some_and(|m| m <= 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Per-step rollout data. `ends[t]` marks the last step of an episode, which
/// is either terminal (`dones[t]`) or cut by a limit; `next_values[t]` is the
/// value estimate of the state after step `t`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub obs: Vec<std::sync::Arc<ObservationStack>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub ends: Vec<bool>,
    pub values: Vec<f64>,
    pub next_values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub targets: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.obs.len(),
            self.rewards.len(),
            self.dones.len(),
            self.ends.len(),
            self.values.len(),
            self.next_values.len(),
            self.log_probs.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Config("rollout arrays differ in length".into()));
        }
        Ok(())
    }
}

/// Raw GAE advantages and value targets `A_t + V(s_t)`. The recursion is cut
/// at episode ends.
pub fn gae(rollout: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rollout.is_empty() {
        return Err(Error::Config("empty rollout".into()));
    }
    rollout.check()?;
    let n = rollout.len();
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let bootstrap = if rollout.dones[t] { 0.0 } else { gamma * rollout.next_values[t] };
        let delta = rollout.rewards[t] + bootstrap - rollout.values[t];
        let carry = if rollout.ends[t] { 0.0 } else { gamma * lambda * next };
        adv[t] = delta + carry;
        next = adv[t];
    }
    let targets = adv.iter().zip(&rollout.values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Fills `advantages` (normalized per rollout) and `targets`.
pub fn compute_advantages(rollout: &mut RolloutBuffer, gamma: f64, lambda: f64) -> Result<()> {
    let (mut adv, targets) = gae(rollout, gamma, lambda)?;
    normalize(&mut adv);
    rollout.advantages = adv;
    rollout.targets = targets;
    Ok(())
}

fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    for x in xs.iter_mut() {
        *x -= mean;
        if var >= 1e-8 {
            *x /= var.sqrt();
        }
    }
}

/// `(1 + ε)·A` for non-negative `A`, else `(1 − ε)·A`.
pub fn clip_g(epsilon: f64, advantage: f64) -> f64 {
    if advantage >= 0.0 {
        (1.0 + epsilon) * advantage
    } else {
        (1.0 - epsilon) * advantage
    }
}

/// `min(r·A, g(ε, A))`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(clip_g(epsilon, advantage))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoLosses {
    pub l_clip: f64,
    pub l_vf: f64,
    pub entropy: f64,
    /// `−l_clip + c1·l_vf − c2·entropy`, the minimized objective.
    pub combined: f64,
}

/// Evaluates the losses on the rollout steps `indices` and, when `backward`
/// is set, adds the gradient of the combined loss into the network's grads.
fn losses_impl(
    net: &mut PolicyNetwork,
    rollout: &RolloutBuffer,
    indices: &[usize],
    config: &PpoConfig,
    backward: bool,
) -> Result<PpoLosses> {
    if indices.is_empty() || rollout.advantages.len() != rollout.len() || rollout.targets.len() != rollout.len() {
        return Err(Error::Config("ppo batch needs computed advantages".into()));
    }
    let n = indices.len();
    let obs: Vec<&ObservationStack> = indices.iter().map(|&i| rollout.obs[i].as_ref()).collect();
    let actions: Vec<usize> = indices.iter().map(|&i| rollout.actions[i]).collect();
    let pick = |v: &[f64]| Tensor::from_vec(indices.iter().map(|&i| v[i]).collect());
    let mut tape = Tape::new();
    let vars = net.register(&mut tape)?;
    let out = net.record(&mut tape, &vars, &obs)?;
    let values = out.values.ok_or(crate::policy::PolicyError::NoValueHead)?;

    let logp = tape.log_softmax(out.logits)?;
    let picked = tape.gather(logp, &actions)?;
    let old = tape.constant(pick(&rollout.log_probs))?;
    let log_ratio = tape.sub(picked, old)?;
    let ratio = tape.exp(log_ratio)?;
    let adv = tape.constant(pick(&rollout.advantages))?;
    let surr = tape.mul(ratio, adv)?;
    let clipped: Vec<f64> = indices
        .iter()
        .map(|&i| clip_g(config.clip_epsilon, rollout.advantages[i]))
        .collect();
    let clipped = tape.constant(Tensor::from_vec(clipped))?;
    let surr = tape.minimum(surr, clipped)?;
    let l_clip = tape.mean(surr)?;

    let v = tape.reshape(values, &[n])?;
    let target = tape.constant(pick(&rollout.targets))?;
    let err = tape.sub(v, target)?;
    let sq = tape.square(err)?;
    let l_vf = tape.mean(sq)?;
    let l_vf = tape.scale(l_vf, 0.5)?;

    let p = tape.softmax(out.logits)?;
    let plogp = tape.mul(p, logp)?;
    let neg_h = tape.row_sum(plogp)?;
    let neg_h = tape.mean(neg_h)?;
    let entropy = tape.scale(neg_h, -1.0)?;

    let a = tape.scale(l_clip, -1.0)?;
    let b = tape.scale(l_vf, config.c1)?;
    let c = tape.scale(entropy, -config.c2)?;
    let ab = tape.add(a, b)?;
    let combined = tape.add(ab, c)?;

    let losses = PpoLosses {
        l_clip: tape.value(l_clip).item()?,
        l_vf: tape.value(l_vf).item()?,
        entropy: tape.value(entropy).item()?,
        combined: tape.value(combined).item()?,
    };
    if backward {
        tape.backward(combined, net.params_mut())?;
    }
    Ok(losses)
}

pub fn ppo_losses(net: &PolicyNetwork, rollout: &RolloutBuffer, indices: &[usize], config: &PpoConfig) -> Result<PpoLosses> {
    losses_impl(&mut net.clone(), rollout, indices, config, false)
}

/// Adds the gradient of the combined loss into `net`'s grads.
pub fn ppo_backward(
    net: &mut PolicyNetwork,
    rollout: &RolloutBuffer,
    indices: &[usize],
    config: &PpoConfig,
) -> Result<PpoLosses> {
    losses_impl(net, rollout, indices, config, true)
}

#[derive(Clone, Debug)]
pub struct PpoOutcome {
    pub network: PolicyNetwork,
    pub metrics: MetricsLog,
}

/// Appends one played episode to `rollout` with the behaviour policy's
/// values and log-probabilities.
fn append_episode(
    net: &PolicyNetwork,
    rollout: &mut RolloutBuffer,
    ep: &crate::episode::Episode,
    reward_scale: f64,
) -> Result<()> {
    let a = net.config().actions;
    let obs: Vec<&ObservationStack> = ep.transitions.iter().map(|t| t.obs.as_ref()).collect();
    let (logits, values) = net.forward_batch_with_values(&obs)?;
    let last = ep.transitions.last().ok_or(Error::EmptyEpisode)?;
    let tail = if last.done { 0.0 } else { net.value(&last.next_obs)? };
    let n = ep.transitions.len();
    for (i, t) in ep.transitions.iter().enumerate() {
        rollout.obs.push(t.obs.clone());
        rollout.actions.push(t.action);
        rollout.rewards.push(t.reward * reward_scale);
        rollout.dones.push(t.done);
        rollout.ends.push(i + 1 == n);
        rollout.values.push(values[i]);
        rollout.next_values.push(if i + 1 < n { values[i + 1] } else { tail });
        rollout.log_probs.push(log_softmax(&logits[i * a..(i + 1) * a])[t.action]);
    }
    Ok(())
}

/// Trains a fresh actor-critic for `config.episodes` episodes. Each episode
/// plays a uniformly drawn task.
pub fn train_ppo<F: EnvFactory>(factory: &F, config: &PpoConfig, seed: u64) -> Result<PpoOutcome> {
    config.validate()?;
    if factory.num_tasks() == 0 {
        return Err(Error::Config("ppo needs at least one task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = factory.make(0);
    let net_cfg = NetworkConfig::from_arch(probe.observation_shape(), probe.num_actions(), config.arch, true);
    let mut net = PolicyNetwork::new(net_cfg, &mut rng)?;
    let mut opt = Adam::with_lr(config.lr);
    let mut metrics = MetricsLog::new();
    let mut episodes = 0;
    let mut update = 0;
    while episodes < config.episodes {
        let mut rollout = RolloutBuffer::default();
        while rollout.len() < config.rollout_len && episodes < config.episodes {
            let task = rng.gen_range(0..factory.num_tasks());
            let mut env = factory.make(task);
            let ep = run_episode(&mut env, &config.limits, |o| Ok(net.select_sample(o, &mut rng)?))?;
            metrics.push(EpisodeRecord::from_episode(update, task, episodes, &ep));
            append_episode(&net, &mut rollout, &ep, config.reward_scale)?;
            episodes += 1;
        }
        compute_advantages(&mut rollout, config.gamma, config.gae_lambda)?;
        let mut order: Vec<usize> = (0..rollout.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.minibatch) {
                net.zero_grad();
                ppo_backward(&mut net, &rollout, batch, config)?;
                if let Some(m) = config.max_grad_norm {
                    clip_grad_norm(net.params_mut(), m);
                }
                opt.step(net.params_mut())?;
            }
        }
        update += 1;
    }
    Ok(PpoOutcome { network: net, metrics })
}
