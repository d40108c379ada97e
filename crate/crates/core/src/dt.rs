//! Decision transformer: a causal transformer over interleaved
//! (return-to-go, state, action) tokens that predicts each action from the
//! hidden state at its state token.
//!
//! States enter normalized, returns-to-go scaled by a fixed constant, and
//! actions raw (they already live in [−1, 1]).

use std::cmp::Ordering;
use std::path::Path;

use branchgen_neural::{
    adam_step, affine, backprop, clip_global_norm, layer_norm, load_checkpoint, net_forward, save_checkpoint,
    AdamConfig, AdamState, AttentionLayout, CheckFixture, Mlp, NeuralError, Network, ParamSet, SelfAttention, Tape,
    Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{rtg, Dataset, NormStats, Role, Trajectory};
use crate::env::{clip_action, EnvState, MazeSpec, Route, ACTION_DIM};
use crate::error::{Error, Result};
use crate::tvf::{load_norm, store_norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtConfig {
    /// Context length in timesteps.
    pub context: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Size of the timestep embedding table; later steps share the last row.
    pub max_timestep: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            context: 20,
            width: 128,
            blocks: 3,
            heads: 1,
            max_timestep: 512,
            lr: 1e-4,
            grad_clip: 0.25,
            batch_size: 64,
            steps: 50_000,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.max_timestep == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("context, timestep table and batch size must be positive".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} must be a positive multiple of the head count {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// A batch of left-padded windows, each `context` steps long. Padded steps
/// have `mask == false` and zero contents.
#[derive(Clone, Debug, PartialEq)]
pub struct DtWindows {
    pub batch: usize,
    pub context: usize,
    /// `[batch·context]` scaled returns-to-go.
    pub rtg: Vec<f64>,
    /// `[batch·context, ds]` normalized states.
    pub states: Vec<f64>,
    /// `[batch·context, da]` actions.
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Network shape of the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct DtNet {
    pub state_dim: usize,
    pub action_dim: usize,
    pub context: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_timestep: usize,
}

impl DtNet {
    fn attention(&self, b: usize) -> SelfAttention {
        SelfAttention { path: format!("dt/block{b}/attn"), dim: self.width, heads: self.heads }
    }

    fn ff(&self, b: usize) -> Mlp {
        Mlp::new(format!("dt/block{b}/ff"), vec![self.width, 4 * self.width, self.width])
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet, NeuralError> {
        let d = self.width;
        let mut p = ParamSet::new();
        p.add_affine("dt/embed_rtg", 1, d, true, seed)?;
        p.add_affine("dt/embed_state", self.state_dim, d, true, seed)?;
        p.add_affine("dt/embed_action", self.action_dim, d, true, seed)?;
        p.add_embedding("dt/timestep", self.max_timestep, d, seed)?;
        p.add_layer_norm("dt/embed_ln", d)?;
        for b in 0..self.blocks {
            p.add_layer_norm(&format!("dt/block{b}/ln1"), d)?;
            self.attention(b).init(&mut p, seed)?;
            p.add_layer_norm(&format!("dt/block{b}/ln2"), d)?;
            self.ff(b).init(&mut p, seed)?;
        }
        p.add_layer_norm("dt/final_ln", d)?;
        p.add_affine("dt/head", d, self.action_dim, true, seed)?;
        Ok(p)
    }
}

impl Network for DtNet {
    type Input = DtWindows;

    /// Predicted actions, one row per window step.
    fn forward(&self, tape: &mut Tape, params: &ParamSet, w: &DtWindows) -> Result<Var, NeuralError> {
        let (b, k) = (w.batch, w.context);
        let rows = b * k;
        if w.states.len() != rows * self.state_dim || w.actions.len() != rows * self.action_dim || w.rtg.len() != rows {
            return Err(NeuralError::Shape {
                layer: "dt/embed_state".into(),
                detail: format!("window batch of {b}×{k} has inconsistent token arrays"),
            });
        }
        tape.set_scope("dt/embed");
        let g = tape.input(Tensor::matrix(rows, 1, w.rtg.clone())?)?;
        let s = tape.input(Tensor::matrix(rows, self.state_dim, w.states.clone())?)?;
        let a = tape.input(Tensor::matrix(rows, self.action_dim, w.actions.clone())?)?;
        let table = tape.param(params, "dt/timestep/table")?;
        let ids: Vec<usize> = w.timesteps.iter().map(|&t| t.min(self.max_timestep - 1)).collect();
        let time = tape.embedding(table, &ids)?;
        let mut parts = Vec::with_capacity(3);
        for (x, path) in [(g, "dt/embed_rtg"), (s, "dt/embed_state"), (a, "dt/embed_action")] {
            let e = affine(tape, params, path, x)?;
            parts.push(tape.add(e, time)?);
        }
        let stacked = tape.concat_rows(&parts)?;
        // Interleave to (g_0, s_0, a_0, g_1, …) within each window.
        let order: Vec<usize> = (0..b)
            .flat_map(|bi| (0..k).flat_map(move |ki| (0..3).map(move |kind| kind * rows + bi * k + ki)))
            .collect();
        let tokens = tape.select_rows(stacked, &order)?;
        let mut h = layer_norm(tape, params, "dt/embed_ln", tokens)?;

        let key_valid: Vec<bool> = w.mask.iter().flat_map(|&m| [m, m, m]).collect();
        let layout = AttentionLayout { batch: b, seq: 3 * k, heads: self.heads, causal: true, key_valid: Some(key_valid) };
        for bi in 0..self.blocks {
            let path = format!("dt/block{bi}");
            tape.set_scope(path.clone());
            let n = layer_norm(tape, params, &format!("{path}/ln1"), h)?;
            let att = self.attention(bi).apply(tape, params, n, layout.clone())?;
            h = tape.add(h, att)?;
            tape.set_scope(path.clone());
            let n = layer_norm(tape, params, &format!("{path}/ln2"), h)?;
            let f = self.ff(bi).apply(tape, params, n)?;
            h = tape.add(h, f)?;
        }
        tape.set_scope("dt/head");
        let h = layer_norm(tape, params, "dt/final_ln", h)?;
        let state_rows: Vec<usize> = (0..rows).map(|r| 3 * r + 1).collect();
        let hs = tape.select_rows(h, &state_rows)?;
        affine(tape, params, "dt/head", hs)
    }
}

impl CheckFixture for DtNet {
    fn init_params(&self, seed: u64) -> Result<ParamSet, NeuralError> {
        let mut p = self.init(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd7);
        for (path, t) in p.iter_mut() {
            if path.ends_with("/b") || path.ends_with("/gain") || path.ends_with("/bias") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            }
        }
        Ok(p)
    }

    fn sample_input(&self, seed: u64) -> DtWindows {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, k) = (2, self.context);
        let rows = b * k;
        let mut mask = vec![true; rows];
        mask[0] = false;
        DtWindows {
            batch: b,
            context: k,
            rtg: (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            states: (0..rows * self.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            actions: (0..rows * self.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            timesteps: (0..rows).map(|r| r % k).collect(),
            mask,
        }
    }
}

/// The trainable policy with its input scaling.
#[derive(Clone, Debug)]
pub struct DtPolicy {
    pub config: DtConfig,
    pub net: DtNet,
    pub params: ParamSet,
    pub norm: NormStats,
    /// Returns-to-go are divided by this before entering the network.
    pub rtg_scale: f64,
    opt: AdamState,
}

impl DtPolicy {
    pub fn new(config: DtConfig, norm: NormStats, rtg_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(rtg_scale.is_finite() && rtg_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("return scale {rtg_scale} must be positive")));
        }
        let net = DtNet {
            state_dim: norm.state_dim(),
            action_dim: norm.action_dim(),
            context: config.context,
            width: config.width,
            blocks: config.blocks,
            heads: config.heads,
            max_timestep: config.max_timestep,
        };
        let params = net.init(seed)?;
        let opt = AdamState::new(AdamConfig::with_lr(config.lr));
        Ok(Self { config, net, params, norm, rtg_scale, opt })
    }

    /// Set the action head to zero so every prediction is zero.
    pub fn zero_action_head(&mut self) {
        self.params.zero_prefix("dt/head/");
    }

    /// Predicted actions for every window step, `[batch·context, da]`.
    pub fn predict_windows(&self, w: &DtWindows) -> Result<Vec<f64>> {
        Ok(net_forward(&self.net, &self.params, w)?.0.into_data())
    }

    /// Mean squared action error over unmasked steps, without updating.
    pub fn loss(&self, w: &DtWindows) -> Result<f64> {
        let pred = self.predict_windows(w)?;
        Ok(masked_mse(&pred, w, self.net.action_dim).0)
    }

    /// One Adam step on the masked action MSE.
    pub fn train_step(&mut self, w: &DtWindows) -> Result<f64> {
        let (pred, mut tape) = net_forward(&self.net, &self.params, w)?;
        let (loss, grad) = masked_mse(pred.data(), w, self.net.action_dim);
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "DT loss", detail: format!("batch of {} windows", w.batch) });
        }
        let mut grads = backprop(&mut tape, &Tensor::matrix(pred.rows(), pred.cols(), grad)?)?.into_params();
        if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip);
        }
        adam_step(&mut self.params, &grads, &mut self.opt)?;
        Ok(loss)
    }

    /// Action for the current step given up to `context − 1` earlier steps
    /// (older steps are dropped). History entries are raw
    /// `(return-to-go, state, action)` with their timesteps.
    pub fn predict_action(&self, history: &[HistoryStep], current_rtg: f64, current_state: &[f64], timestep: usize) -> Result<Vec<f64>> {
        let w = self.build_context(&[(history, current_rtg, current_state, timestep)])?;
        let pred = self.predict_windows(&w)?;
        let da = self.net.action_dim;
        let last = w.context - 1;
        Ok(pred[last * da..(last + 1) * da].to_vec())
    }

    fn build_context(&self, items: &[(&[HistoryStep], f64, &[f64], usize)]) -> Result<DtWindows> {
        let (k, ds, da) = (self.config.context, self.net.state_dim, self.net.action_dim);
        let mut w = DtWindows {
            batch: items.len(),
            context: k,
            rtg: Vec::with_capacity(items.len() * k),
            states: Vec::with_capacity(items.len() * k * ds),
            actions: Vec::with_capacity(items.len() * k * da),
            timesteps: Vec::with_capacity(items.len() * k),
            mask: Vec::with_capacity(items.len() * k),
        };
        for &(history, g, s, t) in items {
            if s.len() != ds {
                return Err(Error::InvalidArgument(format!("state has {} values, expected {ds}", s.len())));
            }
            let keep = history.len().min(k - 1);
            let recent = &history[history.len() - keep..];
            for step in recent {
                if step.state.len() != ds || step.action.len() != da {
                    return Err(Error::InvalidArgument("history step has the wrong state or action width".into()));
                }
            }
            let pad = k - 1 - keep;
            for _ in 0..pad {
                w.rtg.push(0.0);
                w.states.extend(std::iter::repeat(0.0).take(ds));
                w.actions.extend(std::iter::repeat(0.0).take(da));
                w.timesteps.push(0);
                w.mask.push(false);
            }
            for step in recent {
                w.rtg.push(step.rtg / self.rtg_scale);
                w.states.extend(self.norm.normalize(&step.state, Role::State)?);
                w.actions.extend_from_slice(&step.action);
                w.timesteps.push(step.timestep);
                w.mask.push(true);
            }
            w.rtg.push(g / self.rtg_scale);
            w.states.extend(self.norm.normalize(s, Role::State)?);
            w.actions.extend(std::iter::repeat(0.0).take(da));
            w.timesteps.push(t);
            w.mask.push(true);
        }
        Ok(w)
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut all = self.params.clone();
        let c = &self.config;
        for (key, v) in [
            ("context", c.context as f64),
            ("width", c.width as f64),
            ("blocks", c.blocks as f64),
            ("heads", c.heads as f64),
            ("max_timestep", c.max_timestep as f64),
            ("state_dim", self.net.state_dim as f64),
            ("action_dim", self.net.action_dim as f64),
            ("rtg_scale", self.rtg_scale),
        ] {
            all.set_meta(format!("dt/meta/{key}"), v);
        }
        store_norm(&mut all, "dt/norm", &self.norm)?;
        Ok(all)
    }

    pub fn from_params(all: &ParamSet) -> Result<Self> {
        let m = |k: &str| all.meta(&format!("dt/meta/{k}"));
        let config = DtConfig {
            context: m("context")? as usize,
            width: m("width")? as usize,
            blocks: m("blocks")? as usize,
            heads: m("heads")? as usize,
            max_timestep: m("max_timestep")? as usize,
            ..DtConfig::default()
        };
        let norm = load_norm(all, "dt/norm")?;
        let mut policy = Self::new(config, norm, m("rtg_scale")?, 0)?;
        let mut params = ParamSet::new();
        for (path, t) in all.iter() {
            if !path.starts_with("dt/meta/") && !path.starts_with("dt/norm/") {
                params.insert(path, t.clone())?;
            }
        }
        policy.params = params;
        Ok(policy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(save_checkpoint(path, &self.to_params()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(&load_checkpoint(path)?)
    }
}

fn masked_mse(pred: &[f64], w: &DtWindows, da: usize) -> (f64, Vec<f64>) {
    let valid = w.mask.iter().filter(|&&m| m).count().max(1) as f64 * da as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (r, &m) in w.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for j in 0..da {
            let i = r * da + j;
            let e = pred[i] - w.actions[i];
            loss += e * e / valid;
            grad[i] = 2.0 * e / valid;
        }
    }
    (loss, grad)
}

/// One earlier step of an evaluation or query context, in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryStep {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub timestep: usize,
}

/// Samples training windows ending at uniformly drawn steps of any
/// trajectory, with precomputed return-to-go labels. Steps are indexed in a
/// content order of the trajectories, so the windows drawn for a seed do
/// not depend on how the dataset happens to be stored.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    index: Vec<(usize, usize)>,
    rtgs: Vec<Vec<f64>>,
}

fn content_order(a: &Trajectory, b: &Trajectory) -> Ordering {
    let cmp = |x: &[f64], y: &[f64]| {
        x.iter().zip(y).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(x.len().cmp(&y.len()))
    };
    cmp(&a.states, &b.states)
        .then_with(|| cmp(&a.actions, &b.actions))
        .then_with(|| cmp(&a.rewards, &b.rewards))
        .then_with(|| a.rtg_tail.map(f64::to_bits).cmp(&b.rtg_tail.map(f64::to_bits)))
}

impl WindowSampler {
    pub fn new(dataset: &Dataset) -> Self {
        let trajectories = dataset.trajectories();
        let mut order: Vec<usize> = (0..trajectories.len()).collect();
        order.sort_by(|&a, &b| content_order(&trajectories[a], &trajectories[b]));
        let mut index = Vec::with_capacity(dataset.num_steps());
        for n in order {
            index.extend((0..trajectories[n].len()).map(|t| (n, t)));
        }
        let rtgs = trajectories.iter().map(rtg).collect();
        Self { index, rtgs }
    }

    /// Window of `policy.config.context` steps ending at step `t` of
    /// trajectory `n`, left-padded.
    pub fn window(&self, dataset: &Dataset, policy: &DtPolicy, n: usize, t: usize) -> Result<DtWindows> {
        self.windows(dataset, policy, &[(n, t)])
    }

    pub fn windows(&self, dataset: &Dataset, policy: &DtPolicy, ends: &[(usize, usize)]) -> Result<DtWindows> {
        let k = policy.config.context;
        let (ds, da) = (dataset.state_dim(), dataset.action_dim());
        let norm = &policy.norm;
        let mut w = DtWindows {
            batch: ends.len(),
            context: k,
            rtg: Vec::with_capacity(ends.len() * k),
            states: Vec::with_capacity(ends.len() * k * ds),
            actions: Vec::with_capacity(ends.len() * k * da),
            timesteps: Vec::with_capacity(ends.len() * k),
            mask: Vec::with_capacity(ends.len() * k),
        };
        for &(n, t) in ends {
            let traj = dataset.get(n)?;
            let start = (t + 1).saturating_sub(k);
            for _ in 0..k - (t + 1 - start) {
                w.rtg.push(0.0);
                w.states.extend(std::iter::repeat(0.0).take(ds));
                w.actions.extend(std::iter::repeat(0.0).take(da));
                w.timesteps.push(0);
                w.mask.push(false);
            }
            for i in start..=t {
                w.rtg.push(self.rtgs[n][i] / policy.rtg_scale);
                w.states.extend(norm.normalize(traj.state(i), Role::State)?);
                w.actions.extend_from_slice(traj.action(i));
                w.timesteps.push(i);
                w.mask.push(true);
            }
        }
        Ok(w)
    }

    pub fn sample<R: Rng + ?Sized>(&self, dataset: &Dataset, policy: &DtPolicy, batch: usize, rng: &mut R) -> Result<DtWindows> {
        let ends: Vec<(usize, usize)> = (0..batch).map(|_| self.index[rng.gen_range(0..self.index.len())]).collect();
        self.windows(dataset, policy, &ends)
    }
}

/// Train a fresh policy on `dataset`. Returns are scaled by the largest
/// collected episode return (or 1 when that is not positive).
pub fn train_dt<R: Rng + ?Sized>(dataset: &Dataset, config: &DtConfig, seed: u64, rng: &mut R) -> Result<DtPolicy> {
    let max_ret = dataset.max_collected_return();
    let scale = if max_ret.is_finite() && max_ret > 0.0 { max_ret } else { 1.0 };
    let mut policy = DtPolicy::new(config.clone(), dataset.norm().clone(), scale, seed)?;
    let sampler = WindowSampler::new(dataset);
    for step in 0..config.steps {
        let w = sampler.sample(dataset, &policy, config.batch_size, rng)?;
        let loss = policy.train_step(&w)?;
        if step % 1000 == 0 || step + 1 == config.steps {
            log::debug!("dt step {step}: loss {loss:.5}");
        }
    }
    Ok(policy)
}

/// Score anchors: mean returns of a uniform-random policy and of an
/// expert route.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub random: f64,
    pub expert: f64,
}

impl References {
    pub fn normalized_score(&self, mean_return: f64) -> f64 {
        let span = self.expert - self.random;
        if span.abs() < 1e-12 {
            0.0
        } else {
            100.0 * (mean_return - self.random) / span
        }
    }
}

/// Mean return of the uniform-random policy over `episodes` episodes and
/// of the noise-free expert route over its `count` episodes.
pub fn reference_returns(spec: &MazeSpec, expert: &Route, episodes: usize, seed: u64) -> Result<References> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_total = 0.0;
    for _ in 0..episodes {
        let mut s = spec.reset(&mut rng);
        loop {
            let a = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
            let o = spec.step(&s, a)?;
            random_total += o.reward;
            s = o.state;
            if o.done {
                break;
            }
        }
    }
    let expert_eps = expert.count.max(1);
    let mut expert_total = 0.0;
    for _ in 0..expert_eps {
        expert_total += crate::env::rollout_route(spec, expert, &mut rng)?.total_return();
    }
    Ok(References { random: random_total / episodes.max(1) as f64, expert: expert_total / expert_eps as f64 })
}

/// One evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub ret: f64,
    pub success: bool,
    pub length: usize,
    /// Return-to-go fed to the policy at each step.
    pub rtgs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub positions: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub normalized_score: f64,
    pub target_rtg: f64,
    pub references: References,
    pub traces: Vec<EpisodeTrace>,
}

/// Anything that picks actions from a DT-style context, so evaluation can
/// also drive scripted or inert policies.
pub trait ContextPolicy {
    /// Actions for a batch of contexts: `(history, current rtg, current
    /// raw state, timestep)`.
    fn act_batch(&self, items: &[(&[HistoryStep], f64, &[f64], usize)]) -> Result<Vec<[f64; 2]>>;
}

impl ContextPolicy for DtPolicy {
    fn act_batch(&self, items: &[(&[HistoryStep], f64, &[f64], usize)]) -> Result<Vec<[f64; 2]>> {
        if self.net.action_dim != ACTION_DIM {
            return Err(Error::InvalidArgument("policy action width does not match the maze".into()));
        }
        let w = self.build_context(items)?;
        let pred = self.predict_windows(&w)?;
        let k = w.context;
        Ok((0..items.len())
            .map(|i| {
                let r = (i * k + k - 1) * ACTION_DIM;
                [pred[r], pred[r + 1]]
            })
            .collect())
    }
}

/// Roll out `episodes` episodes in lockstep. Each episode starts from its
/// own seeded reset; the return-to-go is decremented by each observed
/// reward.
pub fn evaluate<P: ContextPolicy + ?Sized>(
    policy: &P,
    context: usize,
    spec: &MazeSpec,
    target_rtg: f64,
    episodes: usize,
    references: References,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let keep = context.saturating_sub(1).max(1);
    let mut states: Vec<EnvState> = (0..episodes)
        .map(|e| spec.reset(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(e as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))))
        .collect();
    let mut rtgs = vec![target_rtg; episodes];
    let mut histories: Vec<Vec<HistoryStep>> = vec![Vec::new(); episodes];
    let mut traces: Vec<EpisodeTrace> = (0..episodes)
        .map(|e| EpisodeTrace {
            episode: e,
            ret: 0.0,
            success: false,
            length: 0,
            rtgs: Vec::new(),
            rewards: Vec::new(),
            positions: vec![states[e].pos],
        })
        .collect();
    let mut active: Vec<usize> = (0..episodes).collect();
    while !active.is_empty() {
        let obs: Vec<[f64; 4]> = active.iter().map(|&e| states[e].observation()).collect();
        let items: Vec<(&[HistoryStep], f64, &[f64], usize)> = active
            .iter()
            .zip(&obs)
            .map(|(&e, o)| (histories[e].as_slice(), rtgs[e], &o[..], states[e].t))
            .collect();
        let actions = policy.act_batch(&items)?;
        let mut still = Vec::with_capacity(active.len());
        for (&e, a) in active.iter().zip(actions) {
            let a = clip_action(a);
            let o = spec.step(&states[e], a)?;
            let tr = &mut traces[e];
            tr.rtgs.push(rtgs[e]);
            tr.rewards.push(o.reward);
            tr.positions.push(o.state.pos);
            tr.ret += o.reward;
            tr.length += 1;
            tr.success |= o.reached_goal;
            histories[e].push(HistoryStep {
                rtg: rtgs[e],
                state: states[e].observation().to_vec(),
                action: a.to_vec(),
                timestep: states[e].t,
            });
            if histories[e].len() > keep {
                histories[e].remove(0);
            }
            rtgs[e] -= o.reward;
            states[e] = o.state;
            if !o.done {
                still.push(e);
            }
        }
        active = still;
    }
    let mean_return = traces.iter().map(|t| t.ret).sum::<f64>() / episodes as f64;
    let success_rate = traces.iter().filter(|t| t.success).count() as f64 / episodes as f64;
    Ok(EvalReport {
        episodes,
        mean_return,
        success_rate,
        normalized_score: references.normalized_score(mean_return),
        target_rtg,
        references,
        traces,
    })
}
