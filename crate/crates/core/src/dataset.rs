//! Trajectory storage, return computations, normalization, segment sampling
//! and the binary dataset format.
//!
//! Dataset file layout (all integers and floats little-endian):
//!
//! ```text
//! "BGDATA1" | version u8 | trajectory count u64
//! per trajectory:
//!     T u64 | ds u64 | da u64 | states T*ds f64 | actions T*da f64 | rewards T f64
//!     terminal u8 | provenance u8 | has RTG tail u8 | [RTG tail f64]
//! footer:
//!     dataset provenance u8 | ds u64 | da u64
//!     state mean/std | action mean/std | reward mean/std | return mean/std
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discount used for condition returns, the value function and the filter.
pub const GAMMA: f64 = 0.99;

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f64 = 1e-6;

pub const DATASET_MAGIC: &[u8; 7] = b"BGDATA1";
pub const DATASET_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Collected,
    Expanded,
}

impl Provenance {
    fn to_byte(self) -> u8 {
        match self {
            Provenance::Collected => 0,
            Provenance::Expanded => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Provenance::Collected),
            1 => Some(Provenance::Expanded),
            _ => None,
        }
    }
}

/// One episode. Matrices are row-major with one row per step. A trajectory's
/// index `n` is its position within its [`Dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
    pub provenance: Provenance,
    /// Return-to-go label of the final step when it is bootstrapped rather
    /// than equal to the final reward (expanded trajectories).
    pub rtg_tail: Option<f64>,
}

impl Trajectory {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        states: Vec<f64>,
        actions: Vec<f64>,
        rewards: Vec<f64>,
        terminal: bool,
    ) -> Result<Self> {
        let traj = Self {
            state_dim,
            action_dim,
            states,
            actions,
            rewards,
            terminal,
            provenance: Provenance::Collected,
            rtg_tail: None,
        };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if t == 0 {
            return Err(Error::InvalidArgument("trajectory has no steps".into()));
        }
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::InvalidArgument("state and action dims must be positive".into()));
        }
        if self.states.len() != t * self.state_dim || self.actions.len() != t * self.action_dim {
            return Err(Error::InvalidArgument(format!(
                "trajectory matrices disagree: T={t}, {} state values for ds={}, {} action values for da={}",
                self.states.len(),
                self.state_dim,
                self.actions.len(),
                self.action_dim
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    /// Step `t` as one `(s, a, r)` row.
    pub fn step_row(&self, t: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.state_dim + self.action_dim + 1);
        row.extend_from_slice(self.state(t));
        row.extend_from_slice(self.action(t));
        row.push(self.rewards[t]);
        row
    }

    /// Steps `from..to` as consecutive `(s, a, r)` rows.
    pub fn step_rows(&self, from: usize, to: usize) -> Vec<f64> {
        (from..to).flat_map(|t| self.step_row(t)).collect()
    }

    /// Undiscounted episode return.
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Undiscounted return-to-go: `g[t] = Σ_{t' ≥ t} r[t']`, with the final
/// label replaced by the bootstrapped tail when present.
pub fn rtg(traj: &Trajectory) -> Vec<f64> {
    let t_len = traj.len();
    let mut g = vec![0.0; t_len];
    g[t_len - 1] = traj.rtg_tail.unwrap_or(traj.rewards[t_len - 1]);
    for t in (0..t_len - 1).rev() {
        g[t] = traj.rewards[t] + g[t + 1];
    }
    g
}

/// `R_t = Σ_{i ≥ t} γ^{i−t} r[i]`.
pub fn discounted_return(traj: &Trajectory, t: usize, gamma: f64) -> Result<f64> {
    if t >= traj.len() {
        return Err(Error::InvalidArgument(format!(
            "time index {t} outside trajectory of length {}",
            traj.len()
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside (0, 1]")));
    }
    Ok(discounted_returns(traj, gamma)[t])
}

/// Discounted return at every step, by backward recursion.
pub fn discounted_returns(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for t in (0..traj.len()).rev() {
        acc = traj.rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Which block of a step a value vector belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    State,
    Action,
    Reward,
    Return,
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(Role::State),
            "action" => Ok(Role::Action),
            "reward" => Ok(Role::Reward),
            "return" => Ok(Role::Return),
            other => Err(Error::InvalidArgument(format!("unknown normalization role {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    /// Per-column mean and population standard deviation of `rows`
    /// (row-major, `dim` columns), with the std floored.
    pub fn fit(values: &[f64], dim: usize) -> Self {
        let n = (values.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in values.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in values.chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Normalization statistics fitted on collected trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub state: Moments,
    pub action: Moments,
    pub reward: Moments,
    pub ret: Moments,
}

impl NormStats {
    /// Fit on the trajectories with provenance `Collected`.
    pub fn fit(trajectories: &[Trajectory], gamma: f64) -> Result<Self> {
        let collected: Vec<&Trajectory> = trajectories
            .iter()
            .filter(|t| t.provenance == Provenance::Collected)
            .collect();
        let first = collected
            .first()
            .ok_or_else(|| Error::InvalidArgument("no collected trajectories to fit norm stats on".into()))?;
        let (ds, da) = (first.state_dim, first.action_dim);
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        let mut returns = Vec::new();
        for t in &collected {
            states.extend_from_slice(&t.states);
            actions.extend_from_slice(&t.actions);
            rewards.extend_from_slice(&t.rewards);
            returns.extend(discounted_returns(t, gamma));
        }
        Ok(Self {
            state: Moments::fit(&states, ds),
            action: Moments::fit(&actions, da),
            reward: Moments::fit(&rewards, 1),
            ret: Moments::fit(&returns, 1),
        })
    }

    /// Statistics that leave every value unchanged.
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state: Moments::identity(state_dim),
            action: Moments::identity(action_dim),
            reward: Moments::identity(1),
            ret: Moments::identity(1),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action.dim()
    }

    /// Width of one `(s, a, r)` row.
    pub fn step_dim(&self) -> usize {
        self.state_dim() + self.action_dim() + 1
    }

    pub fn moments(&self, role: Role) -> &Moments {
        match role {
            Role::State => &self.state,
            Role::Action => &self.action,
            Role::Reward => &self.reward,
            Role::Return => &self.ret,
        }
    }

    /// `(x − mean) / std` over rows of the role's width.
    pub fn normalize(&self, values: &[f64], role: Role) -> Result<Vec<f64>> {
        let m = self.moments(role);
        check_width(values, m.dim(), role)?;
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - m.mean[i % m.dim()]) / m.std[i % m.dim()])
            .collect())
    }

    pub fn denormalize(&self, values: &[f64], role: Role) -> Result<Vec<f64>> {
        let m = self.moments(role);
        check_width(values, m.dim(), role)?;
        Ok(values
            .iter()
            .enumerate()
            .map(|(i, z)| z * m.std[i % m.dim()] + m.mean[i % m.dim()])
            .collect())
    }

    /// Normalize consecutive `(s, a, r)` rows.
    pub fn normalize_steps(&self, rows: &[f64]) -> Result<Vec<f64>> {
        self.map_steps(rows, |m, i, v| (v - m.mean[i]) / m.std[i])
    }

    /// Invert [`NormStats::normalize_steps`]; actions are clipped to [−1, 1].
    pub fn denormalize_steps(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.map_steps(rows, |m, i, z| z * m.std[i] + m.mean[i])?;
        let (ds, da) = (self.state_dim(), self.action_dim());
        for row in out.chunks_mut(self.step_dim()) {
            for a in &mut row[ds..ds + da] {
                *a = a.clamp(-1.0, 1.0);
            }
        }
        Ok(out)
    }

    fn map_steps(&self, rows: &[f64], f: impl Fn(&Moments, usize, f64) -> f64) -> Result<Vec<f64>> {
        let w = self.step_dim();
        if rows.len() % w != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form rows of width {w}",
                rows.len()
            )));
        }
        let (ds, da) = (self.state_dim(), self.action_dim());
        Ok(rows
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % w;
                if c < ds {
                    f(&self.state, c, v)
                } else if c < ds + da {
                    f(&self.action, c - ds, v)
                } else {
                    f(&self.reward, 0, v)
                }
            })
            .collect())
    }
}

fn check_width(values: &[f64], dim: usize, role: Role) -> Result<()> {
    if values.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form {role:?} rows of width {dim}",
            values.len()
        )));
    }
    Ok(())
}

/// A non-empty list of trajectories plus normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    norm: NormStats,
    provenance: Provenance,
}

impl Dataset {
    /// Build a collected dataset, fitting norm stats with [`GAMMA`].
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let norm = NormStats::fit(&trajectories, GAMMA)?;
        Self::with_stats(trajectories, norm, Provenance::Collected)
    }

    pub fn with_stats(trajectories: Vec<Trajectory>, norm: NormStats, provenance: Provenance) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::InvalidArgument("dataset has no trajectories".into()));
        }
        for (n, t) in trajectories.iter().enumerate() {
            t.validate()?;
            if t.state_dim != norm.state_dim() || t.action_dim != norm.action_dim() {
                return Err(Error::InvalidArgument(format!(
                    "trajectory {n} has dims ({}, {}), dataset has ({}, {})",
                    t.state_dim,
                    t.action_dim,
                    norm.state_dim(),
                    norm.action_dim()
                )));
            }
        }
        Ok(Self { trajectories, norm, provenance })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn get(&self, n: usize) -> Result<&Trajectory> {
        self.trajectories.get(n).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "trajectory index {n} out of range for {} trajectories",
                self.trajectories.len()
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn state_dim(&self) -> usize {
        self.norm.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.norm.action_dim()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Largest undiscounted episode return among collected trajectories.
    pub fn max_collected_return(&self) -> f64 {
        self.trajectories
            .iter()
            .filter(|t| t.provenance == Provenance::Collected)
            .map(Trajectory::total_return)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest return-to-go label anywhere in the dataset.
    pub fn max_rtg(&self) -> f64 {
        self.trajectories
            .iter()
            .flat_map(rtg)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same trajectories and stats, relabeled as expanded.
    pub fn append_expanded(&self, extra: Vec<Trajectory>) -> Result<Self> {
        let mut trajectories = self.trajectories.clone();
        trajectories.extend(extra);
        Self::with_stats(trajectories, self.norm.clone(), Provenance::Expanded)
    }
}

/// A K-step condition segment, its H-step successor and the condition return.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPair {
    pub n: usize,
    pub t: usize,
    /// K rows of raw `(s, a, r)`, steps `t−K+1 ..= t`.
    pub condition: Vec<f64>,
    /// H rows of raw `(s, a, r)`, steps `t+1 ..= t+H`.
    pub successor: Vec<f64>,
    /// Discounted return from step `t`.
    pub ret: f64,
}

/// Uniform sampler over `(n, t)` positions whose window fits its trajectory.
#[derive(Clone, Debug)]
pub struct SegmentSampler {
    k: usize,
    h: usize,
    /// (trajectory index, first valid t, number of valid t)
    spans: Vec<(usize, usize, usize)>,
    cumulative: Vec<usize>,
}

impl SegmentSampler {
    /// Positions with `K−1 ≤ t ≤ T−1−H`.
    pub fn new(dataset: &Dataset, k: usize, h: usize) -> Result<Self> {
        Self::with_last(dataset, k, h, |traj| traj.len().checked_sub(1 + h))
    }

    /// Positions with `K−1 ≤ t ≤ last(traj)`.
    pub fn with_last(
        dataset: &Dataset,
        k: usize,
        h: usize,
        last: impl Fn(&Trajectory) -> Option<usize>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("condition length K must be positive".into()));
        }
        let mut spans = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0;
        for (n, traj) in dataset.trajectories().iter().enumerate() {
            if let Some(last) = last(traj) {
                if last + 1 >= k {
                    let count = last + 2 - k;
                    total += count;
                    spans.push((n, k - 1, count));
                    cumulative.push(total);
                }
            }
        }
        if total == 0 {
            return Err(Error::InvalidArgument(format!(
                "no trajectory admits a window with K={k}, H={h}"
            )));
        }
        Ok(Self { k, h, spans, cumulative })
    }

    pub fn num_positions(&self) -> usize {
        *self.cumulative.last().unwrap()
    }

    /// The `i`-th valid position in (n, t) order.
    pub fn position(&self, i: usize) -> (usize, usize) {
        let span = self.cumulative.partition_point(|&c| c <= i);
        let before = if span == 0 { 0 } else { self.cumulative[span - 1] };
        let (n, first, _) = self.spans[span];
        (n, first + (i - before))
    }

    pub fn sample_position<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        self.position(rng.gen_range(0..self.num_positions()))
    }

    /// All valid positions in (n, t) order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.spans
            .iter()
            .flat_map(|&(n, first, count)| (first..first + count).map(move |t| (n, t)))
    }

    pub fn pair(&self, dataset: &Dataset, n: usize, t: usize, gamma: f64) -> Result<SegmentPair> {
        let traj = dataset.get(n)?;
        if t + 1 < self.k || t + self.h >= traj.len() {
            return Err(Error::InvalidArgument(format!(
                "window (n={n}, t={t}) does not fit a trajectory of length {}",
                traj.len()
            )));
        }
        Ok(SegmentPair {
            n,
            t,
            condition: traj.step_rows(t + 1 - self.k, t + 1),
            successor: traj.step_rows(t + 1, t + 1 + self.h),
            ret: discounted_return(traj, t, gamma)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, dataset: &Dataset, gamma: f64, rng: &mut R) -> Result<SegmentPair> {
        let (n, t) = self.sample_position(rng);
        self.pair(dataset, n, t, gamma)
    }
}

/// Draw one segment pair uniformly over all valid windows.
pub fn sample_segment_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    k: usize,
    h: usize,
    rng: &mut R,
) -> Result<SegmentPair> {
    SegmentSampler::new(dataset, k, h)?.sample(dataset, GAMMA, rng)
}

pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.push(DATASET_VERSION);
    put_u64(&mut out, dataset.len() as u64);
    for t in dataset.trajectories() {
        put_u64(&mut out, t.len() as u64);
        put_u64(&mut out, t.state_dim as u64);
        put_u64(&mut out, t.action_dim as u64);
        put_f64s(&mut out, &t.states);
        put_f64s(&mut out, &t.actions);
        put_f64s(&mut out, &t.rewards);
        out.push(t.terminal as u8);
        out.push(t.provenance.to_byte());
        match t.rtg_tail {
            Some(v) => {
                out.push(1);
                put_f64s(&mut out, &[v]);
            }
            None => out.push(0),
        }
    }
    let norm = dataset.norm();
    out.push(dataset.provenance().to_byte());
    put_u64(&mut out, norm.state_dim() as u64);
    put_u64(&mut out, norm.action_dim() as u64);
    for m in [&norm.state, &norm.action, &norm.reward, &norm.ret] {
        put_f64s(&mut out, &m.mean);
        put_f64s(&mut out, &m.std);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(DATASET_MAGIC.len(), "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic, expected BGDATA1".into() });
    }
    let version_at = r.pos as u64;
    let version = r.u8("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: version_at,
            detail: format!("unsupported version {version}"),
        });
    }
    let count = r.u64("trajectory count")? as usize;
    let mut trajectories = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let at = r.pos as u64;
        let t_len = r.u64("trajectory length")? as usize;
        let ds = r.u64("state dim")? as usize;
        let da = r.u64("action dim")? as usize;
        let states = r.f64s(t_len.saturating_mul(ds), "states")?;
        let actions = r.f64s(t_len.saturating_mul(da), "actions")?;
        let rewards = r.f64s(t_len, "rewards")?;
        let terminal = r.flag("terminal flag")?;
        let prov_at = r.pos as u64;
        let provenance = Provenance::from_byte(r.u8("provenance")?)
            .ok_or_else(|| Error::Format { offset: prov_at, detail: "unknown provenance tag".into() })?;
        let rtg_tail = if r.flag("RTG tail flag")? { Some(r.f64s(1, "RTG tail")?[0]) } else { None };
        let traj = Trajectory { state_dim: ds, action_dim: da, states, actions, rewards, terminal, provenance, rtg_tail };
        traj.validate().map_err(|e| Error::Format { offset: at, detail: e.to_string() })?;
        trajectories.push(traj);
    }
    let prov_at = r.pos as u64;
    let provenance = Provenance::from_byte(r.u8("dataset provenance")?)
        .ok_or_else(|| Error::Format { offset: prov_at, detail: "unknown provenance tag".into() })?;
    let ds = r.u64("footer state dim")? as usize;
    let da = r.u64("footer action dim")? as usize;
    let mut moments = Vec::with_capacity(4);
    for (dim, what) in [(ds, "state stats"), (da, "action stats"), (1, "reward stats"), (1, "return stats")] {
        let mean = r.f64s(dim, what)?;
        let std = r.f64s(dim, what)?;
        moments.push(Moments { mean, std });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos as u64, detail: "trailing bytes after footer".into() });
    }
    let ret = moments.pop().unwrap();
    let reward = moments.pop().unwrap();
    let action = moments.pop().unwrap();
    let state = moments.pop().unwrap();
    let norm = NormStats { state, action, reward, ret };
    Dataset::with_stats(trajectories, norm, provenance)
        .map_err(|e| Error::Format { offset: 0, detail: e.to_string() })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        let at = self.pos as u64;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format { offset: at, detail: format!("{what} byte {b} is not 0 or 1") }),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).unwrap_or(usize::MAX), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
