//! Trajectory value function: a Q/V pair trained with a blended expectile
//! objective, so that `Q(s, a)` estimates a future return that is high yet
//! backed by returns actually present in the data.
//!
//! The value net is regressed toward two targets with the asymmetric loss
//! `|τ − 1(u < 0)|·u²`: the slow target Q (weight `1 − w`) and the discounted
//! return of the sampled step along its own trajectory (weight `w`). The Q net
//! is regressed toward `r + γ·(1 − done)·V(s')`.
//!
//! Nets read normalized states and actions; values are in raw discounted
//! reward units.

use std::path::Path;

use branchgen_neural::{
    adam_step, backprop, load_checkpoint, net_forward, save_checkpoint, AdamConfig, AdamState, Mlp,
    ParamSet, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{discounted_returns, Dataset, NormStats, Role, GAMMA};
use crate::error::{Error, Result};

/// `|τ − 1(u < 0)|·u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

/// Derivative of [`expectile_loss`] with respect to `u`.
pub fn expectile_loss_grad(u: f64, tau: f64) -> f64 {
    2.0 * expectile_weight(u, tau) * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvfConfig {
    /// Expectile level.
    pub tau: f64,
    /// Weight of the own-trajectory return term in the value loss.
    pub w: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for TvfConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            w: 0.5,
            gamma: GAMMA,
            polyak: 0.005,
            hidden: vec![256, 256, 256],
            lr: 3e-4,
            batch_size: 256,
            steps: 20_000,
        }
    }
}

impl TvfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!("expectile level {} outside (0, 1)", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::InvalidArgument(format!("blend weight {} outside [0, 1]", self.w)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("discount {} outside (0, 1]", self.gamma)));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::InvalidArgument(format!("Polyak rate {} outside (0, 1]", self.polyak)));
        }
        if self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Transitions with inputs already normalized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TvfBatch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub dones: Vec<bool>,
    /// Discounted return of each step along its own trajectory.
    pub returns: Vec<f64>,
}

impl TvfBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvfLosses {
    pub value: f64,
    pub q: f64,
}

/// The trained (or training) Q, V and target-Q nets with their optimizers.
#[derive(Clone, Debug)]
pub struct ValueHeads {
    pub config: TvfConfig,
    pub norm: NormStats,
    q_net: Mlp,
    v_net: Mlp,
    target_net: Mlp,
    pub q: ParamSet,
    pub v: ParamSet,
    pub q_target: ParamSet,
    q_opt: AdamState,
    v_opt: AdamState,
}

impl ValueHeads {
    pub fn new(config: TvfConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let (ds, da) = (norm.state_dim(), norm.action_dim());
        let sizes = |input: usize| {
            let mut s = vec![input];
            s.extend(&config.hidden);
            s.push(1);
            s
        };
        let q_net = Mlp::new("tvf/q", sizes(ds + da));
        let v_net = Mlp::new("tvf/v", sizes(ds));
        let target_net = Mlp::new("tvf/q_target", sizes(ds + da));
        let mut q = ParamSet::new();
        q_net.init(&mut q, seed)?;
        let mut v = ParamSet::new();
        v_net.init(&mut v, seed)?;
        let q_target = q.rerooted("tvf/q/", "tvf/q_target/");
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Self {
            config,
            norm,
            q_net,
            v_net,
            target_net,
            q,
            v,
            q_target,
            q_opt: AdamState::new(adam),
            v_opt: AdamState::new(adam),
        })
    }

    fn sa_input(&self, states: &[f64], actions: &[f64], n: usize) -> Result<Tensor> {
        let (ds, da) = (self.norm.state_dim(), self.norm.action_dim());
        let mut x = Vec::with_capacity(n * (ds + da));
        for i in 0..n {
            x.extend_from_slice(&states[i * ds..(i + 1) * ds]);
            x.extend_from_slice(&actions[i * da..(i + 1) * da]);
        }
        Ok(Tensor::matrix(n, ds + da, x)?)
    }

    /// Q on normalized inputs.
    pub fn q_normalized(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let n = states.len() / self.norm.state_dim();
        let x = self.sa_input(states, actions, n)?;
        Ok(net_forward(&self.q_net, &self.q, &x)?.0.into_data())
    }

    /// Target Q on normalized inputs.
    pub fn q_target_normalized(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let n = states.len() / self.norm.state_dim();
        let x = self.sa_input(states, actions, n)?;
        Ok(net_forward(&self.target_net, &self.q_target, &x)?.0.into_data())
    }

    /// V on normalized states.
    pub fn v_normalized(&self, states: &[f64]) -> Result<Vec<f64>> {
        let n = states.len() / self.norm.state_dim();
        let x = Tensor::matrix(n, self.norm.state_dim(), states.to_vec())?;
        Ok(net_forward(&self.v_net, &self.v, &x)?.0.into_data())
    }

    /// `Q(s, a)` for raw rows of states and actions.
    pub fn predict_batch(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let zs = self.norm.normalize(states, Role::State)?;
        let za = self.norm.normalize(actions, Role::Action)?;
        if zs.len() / self.norm.state_dim() != za.len() / self.norm.action_dim() {
            return Err(Error::InvalidArgument("state and action row counts differ".into()));
        }
        self.q_normalized(&zs, &za)
    }

    /// `V(s)` for raw state rows.
    pub fn value_batch(&self, states: &[f64]) -> Result<Vec<f64>> {
        let zs = self.norm.normalize(states, Role::State)?;
        self.v_normalized(&zs)
    }

    /// Estimated future return of a raw state-action pair.
    pub fn predict_future_return(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(state, action)?[0])
    }

    /// Value-net loss and its gradient with respect to each V output.
    pub fn value_loss(&self, v: &[f64], q_target: &[f64], returns: &[f64]) -> (f64, Vec<f64>) {
        let (tau, w) = (self.config.tau, self.config.w);
        let b = v.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(v.len());
        for i in 0..v.len() {
            let u_q = q_target[i] - v[i];
            let u_r = returns[i] - v[i];
            loss += ((1.0 - w) * expectile_loss(u_q, tau) + w * expectile_loss(u_r, tau)) / b;
            grad.push(-((1.0 - w) * expectile_loss_grad(u_q, tau) + w * expectile_loss_grad(u_r, tau)) / b);
        }
        (loss, grad)
    }

    /// Bootstrapped Q targets `r + γ·(1 − done)·V(s')`.
    pub fn q_targets(&self, rewards: &[f64], dones: &[bool], next_v: &[f64]) -> Vec<f64> {
        rewards
            .iter()
            .zip(dones)
            .zip(next_v)
            .map(|((r, &d), v)| if d { *r } else { r + self.config.gamma * v })
            .collect()
    }

    /// One Adam step on V, one on Q, then the Polyak target update.
    pub fn train_step(&mut self, batch: &TvfBatch) -> Result<TvfLosses> {
        let n = batch.len();
        let ds = self.norm.state_dim();
        if n == 0 {
            return Err(Error::InvalidArgument("empty value-function batch".into()));
        }

        let q_t = self.q_target_normalized(&batch.states, &batch.actions)?;
        let sx = Tensor::matrix(n, ds, batch.states.clone())?;
        let (v_out, mut v_tape) = net_forward(&self.v_net, &self.v, &sx)?;
        let (value_loss, dv) = self.value_loss(v_out.data(), &q_t, &batch.returns);
        if !value_loss.is_finite() {
            return Err(non_finite("value loss", value_loss, batch));
        }
        let grads = backprop(&mut v_tape, &Tensor::matrix(n, 1, dv)?)?;
        adam_step(&mut self.v, grads.params(), &mut self.v_opt)?;

        let next_v = self.v_normalized(&batch.next_states)?;
        let y = self.q_targets(&batch.rewards, &batch.dones, &next_v);
        let x = self.sa_input(&batch.states, &batch.actions, n)?;
        let (q_out, mut q_tape) = net_forward(&self.q_net, &self.q, &x)?;
        let mut q_loss = 0.0;
        let mut dq = Vec::with_capacity(n);
        for (q, y) in q_out.data().iter().zip(&y) {
            q_loss += (y - q).powi(2) / n as f64;
            dq.push(-2.0 * (y - q) / n as f64);
        }
        if !q_loss.is_finite() {
            return Err(non_finite("Q loss", q_loss, batch));
        }
        let grads = backprop(&mut q_tape, &Tensor::matrix(n, 1, dq)?)?;
        adam_step(&mut self.q, grads.params(), &mut self.q_opt)?;

        let fresh = self.q.rerooted("tvf/q/", "tvf/q_target/");
        self.q_target.polyak_update(&fresh, self.config.polyak)?;
        Ok(TvfLosses { value: value_loss, q: q_loss })
    }

    /// All parameters plus the header and normalization statistics.
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut all = self.q.clone();
        all.merge(self.v.clone())?;
        all.merge(self.q_target.clone())?;
        all.set_meta("tvf/meta/tau", self.config.tau);
        all.set_meta("tvf/meta/w", self.config.w);
        all.set_meta("tvf/meta/gamma", self.config.gamma);
        all.set_meta("tvf/meta/polyak", self.config.polyak);
        store_norm(&mut all, "tvf/norm", &self.norm)?;
        Ok(all)
    }

    /// Rebuild heads for inference from [`ValueHeads::to_params`] output.
    pub fn from_params(all: &ParamSet, config: TvfConfig) -> Result<Self> {
        let norm = load_norm(all, "tvf/norm")?;
        let mut hidden = Vec::new();
        let mut i = 0;
        while let Ok(w) = all.get(&format!("tvf/v/{i}/w")) {
            if all.contains(&format!("tvf/v/{}/w", i + 1)) {
                hidden.push(w.shape()[1]);
            }
            i += 1;
        }
        let config = TvfConfig {
            tau: all.meta("tvf/meta/tau")?,
            w: all.meta("tvf/meta/w")?,
            gamma: all.meta("tvf/meta/gamma")?,
            polyak: all.meta("tvf/meta/polyak")?,
            hidden,
            ..config
        };
        let mut heads = Self::new(config, norm, 0)?;
        heads.q = all.rerooted("tvf/q/", "tvf/q/");
        heads.v = all.rerooted("tvf/v/", "tvf/v/");
        heads.q_target = all.rerooted("tvf/q_target/", "tvf/q_target/");
        Ok(heads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(save_checkpoint(path, &self.to_params()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(&load_checkpoint(path)?, TvfConfig::default())
    }
}

fn non_finite(what: &'static str, value: f64, batch: &TvfBatch) -> Error {
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Error::NonFinite {
        what,
        detail: format!(
            "loss {value} on a batch of {} (max |state| {}, max |reward| {}, max |return| {})",
            batch.len(),
            max_abs(&batch.states),
            max_abs(&batch.rewards),
            max_abs(&batch.returns)
        ),
    }
}

/// Store normalization statistics as tensors under `prefix`.
pub fn store_norm(params: &mut ParamSet, prefix: &str, norm: &NormStats) -> Result<()> {
    for (name, m) in [("state", &norm.state), ("action", &norm.action), ("reward", &norm.reward), ("return", &norm.ret)] {
        params.insert(format!("{prefix}/{name}_mean"), Tensor::new(vec![m.dim()], m.mean.clone())?)?;
        params.insert(format!("{prefix}/{name}_std"), Tensor::new(vec![m.dim()], m.std.clone())?)?;
    }
    Ok(())
}

pub fn load_norm(params: &ParamSet, prefix: &str) -> Result<NormStats> {
    let get = |name: &str| -> Result<crate::dataset::Moments> {
        Ok(crate::dataset::Moments {
            mean: params.get(&format!("{prefix}/{name}_mean"))?.data().to_vec(),
            std: params.get(&format!("{prefix}/{name}_std"))?.data().to_vec(),
        })
    };
    Ok(NormStats { state: get("state")?, action: get("action")?, reward: get("reward")?, ret: get("return")? })
}

/// Uniform sampler over the transitions of a dataset usable for value
/// learning: every step except the last step of a truncated trajectory,
/// which has no successor state.
#[derive(Clone, Debug)]
pub struct TransitionSampler {
    /// (trajectory, step) pairs.
    index: Vec<(usize, usize)>,
    returns: Vec<Vec<f64>>,
}

impl TransitionSampler {
    pub fn new(dataset: &Dataset, gamma: f64) -> Result<Self> {
        let mut index = Vec::new();
        let mut returns = Vec::new();
        for (n, traj) in dataset.trajectories().iter().enumerate() {
            let usable = if traj.terminal { traj.len() } else { traj.len() - 1 };
            index.extend((0..usable).map(|t| (n, t)));
            returns.push(discounted_returns(traj, gamma));
        }
        if index.is_empty() {
            return Err(Error::InvalidArgument("dataset has no usable transitions".into()));
        }
        Ok(Self { index, returns })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<TvfBatch> {
        let norm = dataset.norm();
        let mut b = TvfBatch::default();
        for _ in 0..batch_size {
            let (n, t) = self.index[rng.gen_range(0..self.index.len())];
            let traj = &dataset.trajectories()[n];
            let done = traj.terminal && t + 1 == traj.len();
            let next = if done { t } else { t + 1 };
            b.states.extend(norm.normalize(traj.state(t), Role::State)?);
            b.actions.extend(norm.normalize(traj.action(t), Role::Action)?);
            b.next_states.extend(norm.normalize(traj.state(next), Role::State)?);
            b.rewards.push(traj.rewards[t]);
            b.dones.push(done);
            b.returns.push(self.returns[n][t]);
        }
        Ok(b)
    }
}

/// Train fresh heads on `dataset` for `config.steps` steps.
pub fn train_tvf<R: Rng + ?Sized>(dataset: &Dataset, config: &TvfConfig, seed: u64, rng: &mut R) -> Result<ValueHeads> {
    let mut heads = ValueHeads::new(config.clone(), dataset.norm().clone(), seed)?;
    let sampler = TransitionSampler::new(dataset, config.gamma)?;
    for step in 0..config.steps {
        let batch = sampler.sample(dataset, config.batch_size, rng)?;
        let losses = heads.train_step(&batch)?;
        if step % 1000 == 0 || step + 1 == config.steps {
            log::debug!("tvf step {step}: value loss {:.5}, q loss {:.5}", losses.value, losses.q);
        }
    }
    Ok(heads)
}
