//! Convolutional policy / Q network: conv → relu → flatten → dense, with an
//! optional scalar value head on the flattened features.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ObservationStack;
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::{self, fan_in_uniform, Checkpoint, Parameter, Tape, Tensor, TensorError, Var};

pub const CONV_WEIGHT: usize = 0;
pub const CONV_BIAS: usize = 1;
pub const POLICY_WEIGHT: usize = 2;
pub const POLICY_BIAS: usize = 3;
pub const VALUE_WEIGHT: usize = 4;
pub const VALUE_BIAS: usize = 5;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("observation shape {got:?} does not match network input {expected:?}")]
    ObservationShape { expected: [usize; 3], got: [usize; 3] },
    #[error("network has no value head")]
    NoValueHead,
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("checkpoint I/O at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Layer sizes that trainers expose in their configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kernel: usize,
    pub filters: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { kernel: 3, filters: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Observation shape `(W, H, C)`.
    pub input: [usize; 3],
    pub kernel: usize,
    pub filters: usize,
    pub actions: usize,
    pub value_head: bool,
}

impl NetworkConfig {
    pub fn new(input: [usize; 3], actions: usize) -> Self {
        Self {
            input,
            kernel: 3,
            filters: 32,
            actions,
            value_head: false,
        }
    }

    pub fn from_arch(input: [usize; 3], actions: usize, arch: ArchConfig, value_head: bool) -> Self {
        Self {
            input,
            kernel: arch.kernel,
            filters: arch.filters,
            actions,
            value_head,
        }
    }

    pub fn with_value_head(mut self, on: bool) -> Self {
        self.value_head = on;
        self
    }

    fn dims(&self, batch: usize) -> ConvDims {
        ConvDims {
            batch,
            width: self.input[0],
            height: self.input[1],
            in_channels: self.input[2],
            kernel: self.kernel,
            filters: self.filters,
        }
    }

    pub fn flatten_dim(&self) -> usize {
        let d = self.dims(1);
        d.out_width() * d.out_height() * self.filters
    }

    fn validate(&self) -> Result<()> {
        let [w, h, c] = self.input;
        if self.kernel == 0 || self.kernel > w || self.kernel > h || c == 0 {
            return Err(PolicyError::Config(format!(
                "kernel {} does not fit input {:?}",
                self.kernel, self.input
            )));
        }
        if self.filters == 0 || self.actions == 0 {
            return Err(PolicyError::Config("filters and actions must be positive".into()));
        }
        Ok(())
    }
}

/// Probabilities over actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            probs: tensor::softmax(logits),
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Inverse-CDF draw in index order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.probs, rng.gen::<f64>())
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Lowest-index maximizer.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The first index whose cumulative probability exceeds `u`.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the total just below u; fall back to the last non-zero slot
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Nodes produced by recording a batched forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `(N, A)` logits.
    pub logits: Var,
    /// `(N, 1)` state values when the head is enabled.
    pub values: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetwork {
    config: NetworkConfig,
    params: Vec<Parameter>,
}

impl PolicyNetwork {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let [_, _, c] = config.input;
        let (k, f, a, d) = (config.kernel, config.filters, config.actions, config.flatten_dim());
        let mut params = vec![
            Parameter::new("conv.weight", fan_in_uniform(&[k, k, c, f], k * k * c, rng)),
            Parameter::new("conv.bias", Tensor::zeros(&[f])),
            Parameter::new("policy.weight", fan_in_uniform(&[d, a], d, rng)),
            Parameter::new("policy.bias", Tensor::zeros(&[a])),
        ];
        if config.value_head {
            params.push(Parameter::new("value.weight", fan_in_uniform(&[d, 1], d, rng)));
            params.push(Parameter::new("value.bias", Tensor::zeros(&[1])));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Parameters excluding the value head.
    pub fn policy_params_mut(&mut self) -> &mut [Parameter] {
        let n = VALUE_WEIGHT.min(self.params.len());
        &mut self.params[..n]
    }

    pub fn has_value_head(&self) -> bool {
        self.config.value_head
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Zeroes the output layer weights and bias.
    pub fn zero_output_layer(&mut self) {
        self.params[POLICY_WEIGHT].value.fill(0.0);
        self.params[POLICY_BIAS].value.fill(0.0);
    }

    /// Copies every parameter value from `other`.
    pub fn copy_from(&mut self, other: &PolicyNetwork) -> Result<()> {
        if self.config != other.config {
            return Err(PolicyError::Config("cannot copy between different architectures".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    fn check_obs(&self, obs: &ObservationStack) -> Result<()> {
        if obs.shape() != self.config.input {
            return Err(PolicyError::ObservationShape {
                expected: self.config.input,
                got: obs.shape(),
            });
        }
        Ok(())
    }

    /// Post-relu conv features for a batch, row-major `(N, flatten_dim)`.
    pub fn features(&self, batch: &[&ObservationStack]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(batch.len() * self.config.input.iter().product::<usize>());
        for o in batch {
            self.check_obs(o)?;
            input.extend_from_slice(o.tensor().data());
        }
        let dims = self.config.dims(batch.len());
        let mut h = kernels::conv2d_forward(
            &input,
            self.params[CONV_WEIGHT].value.data(),
            self.params[CONV_BIAS].value.data(),
            &dims,
        );
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(h)
    }

    /// Logits for a batch, row-major `(N, A)`, without recording gradients.
    pub fn forward_batch(&self, batch: &[&ObservationStack]) -> Result<Vec<f64>> {
        let h = self.features(batch)?;
        Ok(kernels::dense_forward(
            &h,
            self.params[POLICY_WEIGHT].value.data(),
            self.params[POLICY_BIAS].value.data(),
            batch.len(),
        ))
    }

    /// Logits and state values for a batch.
    pub fn forward_batch_with_values(&self, batch: &[&ObservationStack]) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.config.value_head {
            return Err(PolicyError::NoValueHead);
        }
        let h = self.features(batch)?;
        let n = batch.len();
        let logits = kernels::dense_forward(
            &h,
            self.params[POLICY_WEIGHT].value.data(),
            self.params[POLICY_BIAS].value.data(),
            n,
        );
        let values = kernels::dense_forward(
            &h,
            self.params[VALUE_WEIGHT].value.data(),
            self.params[VALUE_BIAS].value.data(),
            n,
        );
        Ok((logits, values))
    }

    pub fn forward_logits(&self, obs: &ObservationStack) -> Result<Vec<f64>> {
        self.forward_batch(&[obs])
    }

    pub fn value(&self, obs: &ObservationStack) -> Result<f64> {
        Ok(self.forward_batch_with_values(&[obs])?.1[0])
    }

    pub fn action_distribution(&self, obs: &ObservationStack) -> Result<ActionDistribution> {
        Ok(ActionDistribution::from_logits(&self.forward_logits(obs)?))
    }

    pub fn select_greedy(&self, obs: &ObservationStack) -> Result<usize> {
        Ok(argmax(&self.forward_logits(obs)?))
    }

    pub fn select_sample<R: Rng + ?Sized>(&self, obs: &ObservationStack, rng: &mut R) -> Result<usize> {
        Ok(self.action_distribution(obs)?.sample(rng))
    }

    /// Uniform random action with probability `epsilon`, else greedy. One
    /// uniform draw decides, and a second picks the random action.
    pub fn select_epsilon_greedy<R: Rng + ?Sized>(
        &self,
        obs: &ObservationStack,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<usize> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(PolicyError::Config(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if rng.gen::<f64>() < epsilon {
            Ok(rng.gen_range(0..self.config.actions))
        } else {
            self.select_greedy(obs)
        }
    }

    /// Registers the parameters on `tape` (slot `i` is `params()[i]`).
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        Ok(tape.params(&self.params)?)
    }

    /// Records a batched forward pass using previously registered `vars`.
    pub fn record(&self, tape: &mut Tape, vars: &[Var], batch: &[&ObservationStack]) -> Result<ForwardVars> {
        let [w, h, c] = self.config.input;
        let mut data = Vec::with_capacity(batch.len() * w * h * c);
        for o in batch {
            self.check_obs(o)?;
            data.extend_from_slice(o.tensor().data());
        }
        let x = tape.constant(Tensor::new(vec![batch.len(), w, h, c], data)?)?;
        let conv = tape.conv2d(x, vars[CONV_WEIGHT], vars[CONV_BIAS])?;
        let act = tape.relu(conv)?;
        let flat = tape.flatten(act, true)?;
        let logits = tape.dense(flat, vars[POLICY_WEIGHT], vars[POLICY_BIAS])?;
        let values = if self.config.value_head {
            Some(tape.dense(flat, vars[VALUE_WEIGHT], vars[VALUE_BIAS])?)
        } else {
            None
        };
        Ok(ForwardVars { logits, values })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        Ok(ck.restore_into(&mut self.params)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.restore(&ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs_from(shape: [usize; 3], rng: &mut ChaCha8Rng) -> ObservationStack {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        ObservationStack::new(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    fn small_net(value_head: bool, rng: &mut ChaCha8Rng) -> PolicyNetwork {
        let cfg = NetworkConfig {
            input: [6, 5, 2],
            kernel: 3,
            filters: 4,
            actions: 5,
            value_head,
        };
        PolicyNetwork::new(cfg, rng).unwrap()
    }

    /// Direct-loop forward pass.
    fn naive_logits(net: &PolicyNetwork, obs: &ObservationStack) -> Vec<f64> {
        let cfg = net.config();
        let [w, h, c] = cfg.input;
        let (k, f) = (cfg.kernel, cfg.filters);
        let (ow, oh) = (w - k + 1, h - k + 1);
        let x = obs.tensor().data();
        let kw = net.params()[CONV_WEIGHT].value.data();
        let kb = net.params()[CONV_BIAS].value.data();
        let mut feat = vec![0.0; ow * oh * f];
        for i in 0..ow {
            for j in 0..oh {
                for fi in 0..f {
                    let mut s = kb[fi];
                    for di in 0..k {
                        for dj in 0..k {
                            for ci in 0..c {
                                s += x[((i + di) * h + j + dj) * c + ci] * kw[((di * k + dj) * c + ci) * f + fi];
                            }
                        }
                    }
                    feat[(i * oh + j) * f + fi] = s.max(0.0);
                }
            }
        }
        let dw = net.params()[POLICY_WEIGHT].value.data();
        let db = net.params()[POLICY_BIAS].value.data();
        (0..cfg.actions)
            .map(|a| db[a] + feat.iter().enumerate().map(|(i, v)| v * dw[i * cfg.actions + a]).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let net = small_net(false, &mut rng);
            let obs = obs_from([6, 5, 2], &mut rng);
            let fast = net.forward_logits(&obs).unwrap();
            let slow = naive_logits(&net, &obs);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
            // taped path agrees with the fast path
            let mut tape = Tape::new();
            let vars = net.register(&mut tape).unwrap();
            let out = net.record(&mut tape, &vars, &[&obs]).unwrap();
            for (a, b) in tape.value(out.logits).data().iter().zip(&fast) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = small_net(false, &mut rng);
        net.zero_output_layer();
        let obs = obs_from([6, 5, 2], &mut rng);
        assert_eq!(net.forward_logits(&obs).unwrap(), vec![0.0; 5]);
        let d = net.action_distribution(&obs).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(net.select_greedy(&obs).unwrap(), 0);
        assert!((d.entropy() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn value_head_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = small_net(false, &mut rng);
        let b = small_net(true, &mut rng);
        assert_eq!(b.num_parameters() - a.num_parameters(), a.config().flatten_dim() + 1);
        assert!(matches!(a.value(&obs_from([6, 5, 2], &mut rng)), Err(PolicyError::NoValueHead)));
        let mut z = b.clone();
        z.params_mut()[VALUE_WEIGHT].value.fill(0.0);
        assert_eq!(z.value(&obs_from([6, 5, 2], &mut rng)).unwrap(), 0.0);
    }

    #[test]
    fn default_network_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = PolicyNetwork::new(NetworkConfig::new([32, 24, 4], 5), &mut rng).unwrap();
        assert_eq!(net.config().flatten_dim(), 30 * 22 * 32);
        assert_eq!(net.num_parameters(), 3 * 3 * 4 * 32 + 32 + 30 * 22 * 32 * 5 + 5);
        let obs = obs_from([32, 24, 4], &mut rng);
        assert_eq!(net.forward_logits(&obs).unwrap().len(), 5);
        let wrong = obs_from([32, 24, 3], &mut rng);
        assert!(matches!(net.forward_logits(&wrong), Err(PolicyError::ObservationShape { .. })));
    }

    #[test]
    fn greedy_tie_break_and_shift() {
        assert_eq!(argmax(&[0.0; 5]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 2.0, 0.0, 0.0]), 1);
        assert_eq!(argmax(&[101.0, 103.0, 102.0, 100.0, 100.0]), 1);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = ActionDistribution::from_logits(&[0.0; 5]);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[d.sample(&mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
        let one_hot = ActionDistribution {
            probs: vec![0.0, 0.0, 1.0, 0.0, 0.0],
        };
        assert!((0..1000).all(|_| one_hot.sample(&mut rng) == 2));
        assert_eq!(sample_index(&[0.3, 0.7], 0.9999999999999999), 1);
    }

    #[test]
    fn epsilon_greedy_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = small_net(false, &mut rng);
        let obs = obs_from([6, 5, 2], &mut rng);
        let g = net.select_greedy(&obs).unwrap();
        for _ in 0..100 {
            assert_eq!(net.select_epsilon_greedy(&obs, 0.0, &mut rng).unwrap(), g);
        }
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[net.select_epsilon_greedy(&obs, 1.0, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = r1.clone();
        for _ in 0..50 {
            assert_eq!(
                net.select_epsilon_greedy(&obs, 0.3, &mut r1).unwrap(),
                net.select_epsilon_greedy(&obs, 0.3, &mut r2).unwrap()
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = small_net(true, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let mut other = small_net(true, &mut rng);
        assert_ne!(other, net);
        other.load(&path).unwrap();
        assert_eq!(other, net);
    }
}
