//! Return-guided branch generation, TD(n) continuity filtering and dataset
//! expansion.
//!
//! A branch continues a real K-step segment ending at step `t` with H
//! generated steps, conditioned on the value function's estimate
//! `Q(s_t, a_t)` instead of the segment's real return. A branch is kept when
//! that estimate agrees with the average of its n-step bootstrapped returns
//! `TD(n) = r_t + Σ_{i=1}^{n−1} γ^i r̃_{t+i} + γ^n Q(s̃_{t+n}, ã_{t+n})`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Provenance, SegmentSampler, Trajectory, GAMMA};
use crate::diffusion::{Condition, DiffusionModel};
use crate::error::{Error, Result};
use crate::tvf::ValueHeads;

/// Anything that scores raw state-action rows.
pub trait QFunction {
    fn q_batch(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>>;
}

impl QFunction for ValueHeads {
    fn q_batch(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        self.predict_batch(states, actions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Threshold; `None` until calibrated.
    pub delta: Option<f64>,
    pub gamma: f64,
    /// Percentile of real-successor statistics used as the threshold.
    pub percentile: f64,
    /// Real successor segments scored during calibration.
    pub calibration_samples: usize,
    /// Generation attempts as a fraction of the dataset's trajectory count.
    pub budget_fraction: f64,
    /// When false every generated branch is accepted.
    pub enabled: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            delta: None,
            gamma: GAMMA,
            percentile: 90.0,
            calibration_samples: 2000,
            budget_fraction: 0.2,
            enabled: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 100.0) {
            return Err(Error::InvalidArgument(format!("percentile {} outside (0, 100]", self.percentile)));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(Error::InvalidArgument(format!("filter threshold {d} must be positive")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("discount {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Number of generation attempts for a dataset of `trajectories`.
    pub fn budget(&self, trajectories: usize) -> usize {
        (self.budget_fraction * trajectories as f64).round() as usize
    }
}

/// A generated continuation of a real segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchCandidate {
    /// Source trajectory.
    pub n: usize,
    /// Last real step of the condition segment.
    pub t: usize,
    /// K raw `(s, a, r)` rows ending at step `t`.
    pub condition: Vec<Vec<f64>>,
    /// H raw generated rows for steps `t+1 ..= t+H`, actions clipped.
    pub branch: Vec<Vec<f64>>,
    /// Return the generator was conditioned on.
    pub guidance: f64,
    pub statistic: Option<f64>,
    pub accepted: bool,
}

impl BranchCandidate {
    fn last_real(&self) -> &[f64] {
        self.condition.last().expect("condition segment is non-empty")
    }
}

fn split_rows(rows: &[Vec<f64>], ds: usize, da: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut s = Vec::with_capacity(rows.len() * ds);
    let mut a = Vec::with_capacity(rows.len() * da);
    let mut r = Vec::with_capacity(rows.len());
    for row in rows {
        s.extend_from_slice(&row[..ds]);
        a.extend_from_slice(&row[ds..ds + da]);
        r.push(row[ds + da]);
    }
    (s, a, r)
}

/// `Q(s_t, a_t)` and `TD(n)` for `n = 1..=H`, from one batched Q call.
fn q_and_td_targets<Q: QFunction + ?Sized>(
    c: &BranchCandidate,
    q: &Q,
    ds: usize,
    da: usize,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut rows = vec![c.last_real().to_vec()];
    rows.extend(c.branch.iter().cloned());
    let (s, a, _) = split_rows(&rows, ds, da);
    let qs = q.q_batch(&s, &a)?;
    let r_t = c.last_real()[ds + da];
    let mut targets = Vec::with_capacity(c.branch.len());
    let mut acc = r_t;
    let mut discount = 1.0;
    for n in 1..=c.branch.len() {
        if n > 1 {
            acc += discount * c.branch[n - 2][ds + da];
        }
        discount *= gamma;
        targets.push(acc + discount * qs[n]);
    }
    Ok((qs[0], targets))
}

/// n-step bootstrapped return of a candidate, `1 ≤ n ≤ H`.
pub fn td_n_target<Q: QFunction + ?Sized>(
    candidate: &BranchCandidate,
    q: &Q,
    n: usize,
    gamma: f64,
    state_dim: usize,
    action_dim: usize,
) -> Result<f64> {
    if n == 0 || n > candidate.branch.len() {
        return Err(Error::InvalidArgument(format!(
            "TD horizon {n} outside 1..={}",
            candidate.branch.len()
        )));
    }
    Ok(q_and_td_targets(candidate, q, state_dim, action_dim, gamma)?.1[n - 1])
}

/// `|Q(s_t, a_t) − mean_n TD(n)|`.
pub fn filter_statistic<Q: QFunction + ?Sized>(
    candidate: &BranchCandidate,
    q: &Q,
    gamma: f64,
    state_dim: usize,
    action_dim: usize,
) -> Result<f64> {
    let (q0, targets) = q_and_td_targets(candidate, q, state_dim, action_dim, gamma)?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    Ok((q0 - mean).abs())
}

/// Score a candidate and record the decision on it.
pub fn filter<Q: QFunction + ?Sized>(
    candidate: &mut BranchCandidate,
    q: &Q,
    config: &FilterConfig,
    state_dim: usize,
    action_dim: usize,
) -> Result<(bool, f64)> {
    let stat = filter_statistic(candidate, q, config.gamma, state_dim, action_dim)?;
    let accepted = if config.enabled {
        let delta = config
            .delta
            .ok_or_else(|| Error::InvalidArgument("filter threshold has not been calibrated".into()))?;
        stat < delta
    } else {
        true
    };
    candidate.statistic = Some(stat);
    candidate.accepted = accepted;
    Ok((accepted, stat))
}

/// Smallest threshold under which `percentile`% of `stats` fall strictly
/// below it: the midpoint between the last passing and first failing
/// sorted statistic.
pub fn delta_from_statistics(stats: &[f64], percentile: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("no statistics to calibrate on".into()));
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let pass = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    let delta = if pass == n {
        let top = sorted[n - 1];
        top + 1e-12 * (1.0 + top.abs())
    } else {
        0.5 * (sorted[pass - 1] + sorted[pass])
    };
    Ok(if delta > 0.0 { delta } else { 1e-12 })
}

/// Real successor segments as pseudo-branches.
pub fn real_candidates(dataset: &Dataset, k: usize, h: usize, positions: &[(usize, usize)]) -> Result<Vec<BranchCandidate>> {
    let w = dataset.state_dim() + dataset.action_dim() + 1;
    let sampler = SegmentSampler::new(dataset, k, h)?;
    positions
        .iter()
        .map(|&(n, t)| {
            let pair = sampler.pair(dataset, n, t, GAMMA)?;
            Ok(BranchCandidate {
                n,
                t,
                condition: pair.condition.chunks(w).map(<[f64]>::to_vec).collect(),
                branch: pair.successor.chunks(w).map(<[f64]>::to_vec).collect(),
                guidance: pair.ret,
                statistic: None,
                accepted: false,
            })
        })
        .collect()
}

/// Filter statistics of real successors at uniformly drawn positions.
pub fn real_successor_statistics<Q: QFunction + ?Sized, R: Rng + ?Sized>(
    dataset: &Dataset,
    q: &Q,
    k: usize,
    h: usize,
    samples: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sampler = SegmentSampler::new(dataset, k, h)?;
    if sampler.num_positions() < 100 {
        return Err(Error::InvalidArgument(format!(
            "calibration needs at least 100 segment pairs, dataset has {}",
            sampler.num_positions()
        )));
    }
    let positions: Vec<(usize, usize)> = if sampler.num_positions() <= samples {
        sampler.positions().collect()
    } else {
        (0..samples).map(|_| sampler.sample_position(rng)).collect()
    };
    let (ds, da) = (dataset.state_dim(), dataset.action_dim());
    real_candidates(dataset, k, h, &positions)?
        .iter()
        .map(|c| filter_statistic(c, q, gamma, ds, da))
        .collect()
}

/// Threshold from the configured percentile of real-successor statistics.
pub fn calibrate_delta<Q: QFunction + ?Sized, R: Rng + ?Sized>(
    dataset: &Dataset,
    q: &Q,
    k: usize,
    h: usize,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<f64> {
    config.validate()?;
    let samples = config.calibration_samples.max(1000);
    let stats = real_successor_statistics(dataset, q, k, h, samples, config.gamma, rng)?;
    delta_from_statistics(&stats, config.percentile)
}

/// Positions eligible as branch points: `t ≥ K−1`, excluding the goal step
/// of terminal trajectories.
pub fn generation_sampler(dataset: &Dataset, k: usize) -> Result<SegmentSampler> {
    SegmentSampler::with_last(dataset, k, 0, |traj| {
        if traj.terminal {
            traj.len().checked_sub(2)
        } else {
            Some(traj.len() - 1)
        }
    })
}

/// Generate `count` unfiltered candidates. Each candidate draws its branch
/// point and then its own sampler seed from `rng`, so results match
/// one-at-a-time generation.
pub fn generate_branches<R: Rng + ?Sized>(
    dataset: &Dataset,
    tvf: &ValueHeads,
    model: &DiffusionModel,
    count: usize,
    rng: &mut R,
) -> Result<Vec<BranchCandidate>> {
    let k = model.config.k;
    let sampler = generation_sampler(dataset, k)?;
    let (ds, da) = (dataset.state_dim(), dataset.action_dim());
    let w = ds + da + 1;
    let mut picks = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, t) = sampler.sample_position(rng);
        let seed: u64 = rng.gen();
        picks.push((n, t, seed));
    }
    let mut out = Vec::with_capacity(count);
    for chunk in picks.chunks(64) {
        let mut conds = Vec::with_capacity(chunk.len());
        let mut partial = Vec::with_capacity(chunk.len());
        for &(n, t, _) in chunk {
            let traj = dataset.get(n)?;
            let rows = traj.step_rows(t + 1 - k, t + 1);
            let guidance = tvf.predict_future_return(traj.state(t), traj.action(t))?;
            conds.push(Condition::from_raw(dataset.norm(), &rows, guidance)?);
            partial.push((n, t, rows, guidance));
        }
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&(_, _, s)| ChaCha8Rng::seed_from_u64(s)).collect();
        let refs: Vec<&Condition> = conds.iter().collect();
        let samples = model.sample_batch(&refs, &model.config.schedule(), &mut rngs)?;
        for ((n, t, rows, guidance), z) in partial.into_iter().zip(samples) {
            let raw = dataset.norm().denormalize_steps(&z)?;
            out.push(BranchCandidate {
                n,
                t,
                condition: rows.chunks(w).map(<[f64]>::to_vec).collect(),
                branch: raw.chunks(w).map(<[f64]>::to_vec).collect(),
                guidance,
                statistic: None,
                accepted: false,
            });
        }
    }
    Ok(out)
}

/// One unfiltered candidate.
pub fn generate_branch<R: Rng + ?Sized>(
    dataset: &Dataset,
    tvf: &ValueHeads,
    model: &DiffusionModel,
    rng: &mut R,
) -> Result<BranchCandidate> {
    Ok(generate_branches(dataset, tvf, model, 1, rng)?.remove(0))
}

/// Append one trajectory per accepted candidate: the source prefix `0..=t`
/// followed by the branch, with the final return-to-go label bootstrapped
/// by `Q` at the last generated step. Rejected candidates are ignored.
pub fn expand_dataset<Q: QFunction + ?Sized>(
    dataset: &Dataset,
    candidates: &[BranchCandidate],
    q: &Q,
) -> Result<Dataset> {
    let (ds, da) = (dataset.state_dim(), dataset.action_dim());
    let mut extra = Vec::new();
    for c in candidates.iter().filter(|c| c.accepted) {
        let src = dataset.get(c.n)?;
        if c.t >= src.len() {
            return Err(Error::InvalidArgument(format!(
                "candidate step {} outside source trajectory {} of length {}",
                c.t,
                c.n,
                src.len()
            )));
        }
        if c.branch.is_empty() {
            return Err(Error::InvalidArgument("candidate has an empty branch".into()));
        }
        let (bs, ba, br) = split_rows(&c.branch, ds, da);
        let mut states = src.states[..(c.t + 1) * ds].to_vec();
        let mut actions = src.actions[..(c.t + 1) * da].to_vec();
        let mut rewards = src.rewards[..=c.t].to_vec();
        states.extend_from_slice(&bs);
        actions.extend_from_slice(&ba);
        rewards.extend_from_slice(&br);
        let last = c.branch.len() - 1;
        let tail = q.q_batch(&bs[last * ds..], &ba[last * da..])?[0];
        let mut traj = Trajectory::new(ds, da, states, actions, rewards, false)?;
        traj.provenance = Provenance::Expanded;
        traj.rtg_tail = Some(tail);
        extra.push(traj);
    }
    log::info!("expanded dataset with {} branches", extra.len());
    dataset.append_expanded(extra)
}

pub fn write_candidate_log(path: impl AsRef<Path>, candidates: &[BranchCandidate]) -> Result<()> {
    let mut out = Vec::new();
    for c in candidates {
        serde_json::to_writer(&mut out, c).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_candidate_log(path: impl AsRef<Path>) -> Result<Vec<BranchCandidate>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("candidate log line {}: {e}", i + 1))
        })?);
    }
    Ok(out)
}
