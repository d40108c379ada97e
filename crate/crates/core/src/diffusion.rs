//! Conditional diffusion over H-step trajectory segments.
//!
//! The denoiser follows the EDM parameterization
//! `D(x, σ) = c_skip(σ)·x + c_out(σ)·F(c_in(σ)·x, c_noise(σ), cond)` where `F`
//! is a small transformer over the H segment tokens. The noise-level and
//! condition embeddings are summed and drive per-block scale/shift
//! modulation of the normalized token activations. Sampling integrates the
//! probability-flow ODE down a ρ-spaced σ ladder with Heun's method.

use std::path::Path;

use branchgen_neural::{
    adam_step, affine, backprop, clip_global_norm, load_checkpoint, net_forward, save_checkpoint,
    AdamConfig, AdamState, AttentionLayout, CheckFixture, Mlp, Network, ParamSet, SelfAttention, Tape,
    Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, NormStats, Role, SegmentPair, SegmentSampler, GAMMA};
use crate::error::{Error, Result};
use crate::tvf::{load_norm, store_norm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Condition segment length.
    pub k: usize,
    /// Generated segment length.
    pub h: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    /// Number of denoising steps.
    pub sigma_steps: usize,
    /// Mean and std of `ln σ` during training.
    pub p_mean: f64,
    pub p_std: f64,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Hidden width of the condition encoder.
    pub cond_hidden: usize,
    /// Number of sinusoidal frequencies in the noise-level features.
    pub noise_frequencies: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            h: 10,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 1.0,
            sigma_steps: 10,
            p_mean: -1.2,
            p_std: 1.2,
            width: 128,
            blocks: 4,
            heads: 4,
            cond_hidden: 256,
            noise_frequencies: 16,
            lr: 3e-4,
            grad_clip: 1.0,
            batch_size: 64,
            steps: 20_000,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            rho: self.rho,
            steps: self.sigma_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.h == 0 {
            return Err(Error::InvalidArgument("segment lengths K and H must be positive".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} must be a positive multiple of the head count {}",
                self.width, self.heads
            )));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::InvalidArgument("σ_data must be positive".into()));
        }
        self.schedule().validate()
    }
}

/// EDM preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
    /// Loss weight `(σ² + σ_d²)/(σ·σ_d)²`.
    pub weight: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma;
        let d2 = sigma_data * sigma_data;
        Self {
            c_skip: d2 / (s2 + d2),
            c_out: sigma * sigma_data / (s2 + d2).sqrt(),
            c_in: 1.0 / (s2 + d2).sqrt(),
            c_noise: sigma.ln() / 4.0,
            weight: (s2 + d2) / (sigma * sigma_data).powi(2),
        }
    }
}

/// ρ-spaced noise levels for deterministic sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise schedule needs 0 < σ_min < σ_max and ρ > 0, got {self:?}"
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("noise schedule needs at least one step".into()));
        }
        Ok(())
    }

    /// `σ_0 = σ_max > … > σ_{N−1} = σ_min`, followed by a final 0. A
    /// single-step schedule is `[σ_max, 0]`.
    pub fn ladder(&self) -> Vec<f64> {
        let n = self.steps;
        let mut out = Vec::with_capacity(n + 1);
        if n == 1 {
            out.push(self.sigma_max);
        } else {
            let (hi, lo) = (self.sigma_max.powf(1.0 / self.rho), self.sigma_min.powf(1.0 / self.rho));
            for i in 0..n {
                let s = if i == 0 {
                    self.sigma_max
                } else if i == n - 1 {
                    self.sigma_min
                } else {
                    (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(self.rho)
                };
                out.push(s);
            }
        }
        out.push(0.0);
        out
    }
}

/// `x + σ·ε` with standard normal `ε`.
pub fn perturb<R: Rng + ?Sized>(x0: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    x0.iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            x + sigma * e
        })
        .collect()
}

/// Diffusion condition in normalized space: K rows of `(s, a, r)` plus the
/// normalized return.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub tokens: Vec<f64>,
    pub ret: f64,
}

impl Condition {
    /// Normalize raw condition rows and a raw discounted return.
    pub fn from_raw(norm: &NormStats, rows: &[f64], ret: f64) -> Result<Self> {
        if !ret.is_finite() {
            return Err(Error::InvalidArgument(format!("condition return {ret} is not finite")));
        }
        Ok(Self {
            tokens: norm.normalize_steps(rows)?,
            ret: norm.normalize(&[ret], Role::Return)?[0],
        })
    }

    pub fn from_pair(norm: &NormStats, pair: &SegmentPair) -> Result<Self> {
        Self::from_raw(norm, &pair.condition, pair.ret)
    }

    fn features(&self) -> Vec<f64> {
        let mut f = self.tokens.clone();
        f.push(self.ret);
        f
    }
}

/// Inputs of the raw transformer `F` for a batch of segments.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserInput {
    /// `[batch·H, W]` scaled noisy segments `c_in·x`.
    pub x: Tensor,
    /// `[batch, 2·frequencies]` sinusoidal features of `c_noise`.
    pub noise: Tensor,
    /// `[batch, K·W + 1]` flattened conditions.
    pub cond: Tensor,
}

/// The transformer `F` of the preconditioned denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub k: usize,
    pub h: usize,
    pub step_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub cond_hidden: usize,
    pub noise_frequencies: usize,
}

impl Denoiser {
    pub fn from_config(config: &DiffusionConfig, step_dim: usize) -> Self {
        Self {
            k: config.k,
            h: config.h,
            step_dim,
            width: config.width,
            blocks: config.blocks,
            heads: config.heads,
            cond_hidden: config.cond_hidden,
            noise_frequencies: config.noise_frequencies,
        }
    }

    fn noise_mlp(&self) -> Mlp {
        Mlp::new("diffusion/noise", vec![2 * self.noise_frequencies, self.width, self.width])
    }

    fn cond_mlp(&self) -> Mlp {
        Mlp::new("diffusion/cond", vec![self.k * self.step_dim + 1, self.cond_hidden, self.width])
    }

    fn attention(&self, b: usize) -> SelfAttention {
        SelfAttention { path: format!("diffusion/block{b}/attn"), dim: self.width, heads: self.heads }
    }

    fn ff(&self, b: usize) -> Mlp {
        Mlp::new(format!("diffusion/block{b}/ff"), vec![self.width, 4 * self.width, self.width])
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let d = self.width;
        let mut p = ParamSet::new();
        p.add_affine("diffusion/in", self.step_dim, d, true, seed)?;
        p.add_embedding("diffusion/pos", self.h, d, seed)?;
        self.noise_mlp().init(&mut p, seed)?;
        self.cond_mlp().init(&mut p, seed)?;
        for b in 0..self.blocks {
            for m in ["scale1", "shift1", "scale2", "shift2"] {
                p.add_affine(&format!("diffusion/block{b}/{m}"), d, d, true, seed)?;
            }
            self.attention(b).init(&mut p, seed)?;
            self.ff(b).init(&mut p, seed)?;
        }
        for m in ["scale", "shift"] {
            p.add_affine(&format!("diffusion/final/{m}"), d, d, true, seed)?;
        }
        p.add_affine("diffusion/out", d, self.step_dim, true, seed)?;
        Ok(p)
    }

    /// Sinusoidal features of `c_noise` at geometric frequencies.
    pub fn noise_features(&self, c_noise: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.noise_frequencies);
        for i in 0..self.noise_frequencies {
            let freq = (2.0f64).powf(i as f64 * 6.0 / self.noise_frequencies.max(1) as f64);
            f.push((c_noise * freq).sin());
            f.push((c_noise * freq).cos());
        }
        f
    }
}

impl Network for Denoiser {
    type Input = DenoiserInput;

    fn forward(&self, tape: &mut Tape, params: &ParamSet, input: &DenoiserInput) -> Result<Var, branchgen_neural::NeuralError> {
        let batch = input.noise.rows();
        if input.x.rows() != batch * self.h || input.x.cols() != self.step_dim {
            return Err(branchgen_neural::NeuralError::Shape {
                layer: "diffusion/in".into(),
                detail: format!(
                    "expected [{}, {}] noisy segments, got {:?}",
                    batch * self.h,
                    self.step_dim,
                    input.x.shape()
                ),
            });
        }
        tape.set_scope("diffusion/in");
        let x = tape.input(input.x.clone())?;
        let mut h = affine(tape, params, "diffusion/in", x)?;
        let table = tape.param(params, "diffusion/pos/table")?;
        let ids: Vec<usize> = (0..batch * self.h).map(|r| r % self.h).collect();
        let pos = tape.embedding(table, &ids)?;
        h = tape.add(h, pos)?;

        let nf = tape.input(input.noise.clone())?;
        let noise_emb = self.noise_mlp().apply(tape, params, nf)?;
        let cf = tape.input(input.cond.clone())?;
        let cond_emb = self.cond_mlp().apply(tape, params, cf)?;
        tape.set_scope("diffusion/emb");
        let emb = tape.add(noise_emb, cond_emb)?;
        let emb = tape.gelu(emb)?;

        let layout = AttentionLayout { batch, seq: self.h, heads: self.heads, causal: false, key_valid: None };
        for b in 0..self.blocks {
            let path = format!("diffusion/block{b}");
            tape.set_scope(path.clone());
            let s1 = affine(tape, params, &format!("{path}/scale1"), emb)?;
            let t1 = affine(tape, params, &format!("{path}/shift1"), emb)?;
            let s2 = affine(tape, params, &format!("{path}/scale2"), emb)?;
            let t2 = affine(tape, params, &format!("{path}/shift2"), emb)?;
            let n = tape.layer_norm(h, None, None)?;
            let m = tape.modulate(n, s1, t1, self.h)?;
            let a = self.attention(b).apply(tape, params, m, layout.clone())?;
            h = tape.add(h, a)?;
            tape.set_scope(path.clone());
            let n = tape.layer_norm(h, None, None)?;
            let m = tape.modulate(n, s2, t2, self.h)?;
            let f = self.ff(b).apply(tape, params, m)?;
            h = tape.add(h, f)?;
        }
        tape.set_scope("diffusion/final");
        let s = affine(tape, params, "diffusion/final/scale", emb)?;
        let t = affine(tape, params, "diffusion/final/shift", emb)?;
        let n = tape.layer_norm(h, None, None)?;
        let m = tape.modulate(n, s, t, self.h)?;
        tape.set_scope("diffusion/out");
        affine(tape, params, "diffusion/out", m)
    }
}

impl CheckFixture for Denoiser {
    fn init_params(&self, seed: u64) -> Result<ParamSet, branchgen_neural::NeuralError> {
        let mut p = self.init(seed).map_err(|e| match e {
            Error::Neural(n) => n,
            other => branchgen_neural::NeuralError::InvalidTensor(other.to_string()),
        })?;
        // Random biases so every bias gradient is generic.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for (path, t) in p.iter_mut() {
            if path.ends_with("/b") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        Ok(p)
    }

    fn sample_input(&self, seed: u64) -> DenoiserInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = 2;
        let mut m = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        DenoiserInput {
            x: m(batch * self.h, self.step_dim),
            noise: m(batch, 2 * self.noise_frequencies),
            cond: m(batch, self.k * self.step_dim + 1),
        }
    }
}

/// Trained conditional segment generator.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub norm: NormStats,
    pub net: Denoiser,
    pub params: ParamSet,
    opt: AdamState,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, norm: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = Denoiser::from_config(&config, norm.step_dim());
        let params = net.init(seed)?;
        let opt = AdamState::new(AdamConfig::with_lr(config.lr));
        Ok(Self { config, norm, net, params, opt })
    }

    pub fn step_dim(&self) -> usize {
        self.net.step_dim
    }

    fn segment_len(&self) -> usize {
        self.config.h * self.step_dim()
    }

    fn build_input(&self, xs: &[&[f64]], sigmas: &[f64], conds: &[&Condition]) -> Result<DenoiserInput> {
        let b = xs.len();
        let mut x = Vec::with_capacity(b * self.segment_len());
        let mut noise = Vec::with_capacity(b * 2 * self.net.noise_frequencies);
        let mut cond = Vec::with_capacity(b * (self.config.k * self.step_dim() + 1));
        for i in 0..b {
            let pc = Precond::new(sigmas[i], self.config.sigma_data);
            x.extend(xs[i].iter().map(|v| v * pc.c_in));
            noise.extend(self.net.noise_features(pc.c_noise));
            if conds[i].tokens.len() != self.config.k * self.step_dim() {
                return Err(Error::InvalidArgument(format!(
                    "condition has {} values, expected {} rows of width {}",
                    conds[i].tokens.len(),
                    self.config.k,
                    self.step_dim()
                )));
            }
            cond.extend(conds[i].features());
        }
        Ok(DenoiserInput {
            x: Tensor::matrix(b * self.config.h, self.step_dim(), x)?,
            noise: Tensor::matrix(b, 2 * self.net.noise_frequencies, noise)?,
            cond: Tensor::matrix(b, self.config.k * self.step_dim() + 1, cond)?,
        })
    }

    /// Preconditioned denoiser outputs `D(x_i, σ_i)` for a batch.
    pub fn denoise(&self, xs: &[&[f64]], sigmas: &[f64], conds: &[&Condition]) -> Result<Vec<Vec<f64>>> {
        let input = self.build_input(xs, sigmas, conds)?;
        let (f, _) = net_forward(&self.net, &self.params, &input)?;
        let len = self.segment_len();
        Ok((0..xs.len())
            .map(|i| {
                let pc = Precond::new(sigmas[i], self.config.sigma_data);
                xs[i]
                    .iter()
                    .zip(&f.data()[i * len..(i + 1) * len])
                    .map(|(x, f)| pc.c_skip * x + pc.c_out * f)
                    .collect()
            })
            .collect())
    }

    /// Weighted denoising loss on clean segments `x0` noised at `sigmas`
    /// with the given noise, and its gradient.
    fn loss_and_grads(
        &self,
        x0: &[Vec<f64>],
        sigmas: &[f64],
        eps: &[Vec<f64>],
        conds: &[&Condition],
    ) -> Result<(f64, branchgen_neural::ParamGrads)> {
        let b = x0.len();
        let len = self.segment_len();
        let noisy: Vec<Vec<f64>> = (0..b)
            .map(|i| x0[i].iter().zip(&eps[i]).map(|(x, e)| x + sigmas[i] * e).collect())
            .collect();
        let refs: Vec<&[f64]> = noisy.iter().map(Vec::as_slice).collect();
        let input = self.build_input(&refs, sigmas, conds)?;
        let (f, mut tape) = net_forward(&self.net, &self.params, &input)?;
        let count = (b * len) as f64;
        let mut loss = 0.0;
        let mut df = Vec::with_capacity(b * len);
        for i in 0..b {
            let pc = Precond::new(sigmas[i], self.config.sigma_data);
            for j in 0..len {
                let d = pc.c_skip * noisy[i][j] + pc.c_out * f.data()[i * len + j];
                let err = d - x0[i][j];
                loss += pc.weight * err * err / count;
                df.push(2.0 * pc.weight * err * pc.c_out / count);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "diffusion loss",
                detail: format!("σ range {:?}", sigmas.iter().fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)))),
            });
        }
        let grads = backprop(&mut tape, &Tensor::matrix(b * self.config.h, self.step_dim(), df)?)?;
        Ok((loss, grads.into_params()))
    }

    /// Weighted denoising loss without updating parameters.
    pub fn loss(&self, x0: &[Vec<f64>], sigmas: &[f64], eps: &[Vec<f64>], conds: &[&Condition]) -> Result<f64> {
        Ok(self.loss_and_grads(x0, sigmas, eps, conds)?.0)
    }

    /// One Adam step on a batch of normalized `(condition, successor)`
    /// pairs, drawing σ from the log-normal training distribution.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[(Condition, Vec<f64>)], rng: &mut R) -> Result<f64> {
        let mut sigmas = Vec::with_capacity(batch.len());
        let mut eps = Vec::with_capacity(batch.len());
        for (_, x0) in batch {
            let z: f64 = StandardNormal.sample(rng);
            sigmas.push((self.config.p_mean + self.config.p_std * z).exp());
            eps.push(perturb(&vec![0.0; x0.len()], 1.0, rng));
        }
        let x0: Vec<Vec<f64>> = batch.iter().map(|(_, x)| x.clone()).collect();
        let conds: Vec<&Condition> = batch.iter().map(|(c, _)| c).collect();
        let (loss, mut grads) = self.loss_and_grads(&x0, &sigmas, &eps, &conds)?;
        if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip);
        }
        adam_step(&mut self.params, &grads, &mut self.opt)?;
        Ok(loss)
    }

    /// Normalized `(condition, successor)` training example.
    pub fn example(&self, pair: &SegmentPair) -> Result<(Condition, Vec<f64>)> {
        Ok((Condition::from_pair(&self.norm, pair)?, self.norm.normalize_steps(&pair.successor)?))
    }

    /// Deterministic Heun sampling for a batch of conditions; condition `i`
    /// draws its initial noise from `rngs[i]`, so results do not depend on
    /// batch composition.
    pub fn sample_batch<R: Rng>(
        &self,
        conds: &[&Condition],
        schedule: &NoiseSchedule,
        rngs: &mut [R],
    ) -> Result<Vec<Vec<f64>>> {
        schedule.validate()?;
        if conds.len() != rngs.len() {
            return Err(Error::InvalidArgument("one RNG per condition is required".into()));
        }
        let ladder = schedule.ladder();
        let len = self.segment_len();
        let mut xs: Vec<Vec<f64>> = rngs
            .iter_mut()
            .map(|rng| perturb(&vec![0.0; len], ladder[0], rng))
            .collect();
        for i in 0..ladder.len() - 1 {
            let (s, s_next) = (ladder[i], ladder[i + 1]);
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let den = self.denoise(&refs, &vec![s; xs.len()], conds)?;
            let slopes: Vec<Vec<f64>> = xs
                .iter()
                .zip(&den)
                .map(|(x, d)| x.iter().zip(d).map(|(x, d)| (x - d) / s).collect())
                .collect();
            if s_next == 0.0 {
                // The Euler step to σ = 0 lands exactly on the denoiser output.
                xs = den;
            } else {
                xs = self.heun_step(&xs, &slopes, s, s_next, conds)?;
            }
            if xs.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "sampler state", detail: format!("at σ = {s}") });
            }
        }
        Ok(xs)
    }

    /// Euler predictor from `s` to `s_next > 0` with the trapezoidal
    /// correction.
    fn heun_step(&self, xs: &[Vec<f64>], slopes: &[Vec<f64>], s: f64, s_next: f64, conds: &[&Condition]) -> Result<Vec<Vec<f64>>> {
        let euler: Vec<Vec<f64>> = xs
            .iter()
            .zip(slopes)
            .map(|(x, d)| x.iter().zip(d).map(|(x, d)| x + (s_next - s) * d).collect())
            .collect();
        let refs: Vec<&[f64]> = euler.iter().map(Vec::as_slice).collect();
        let den2 = self.denoise(&refs, &vec![s_next; xs.len()], conds)?;
        Ok(xs
            .iter()
            .zip(slopes)
            .zip(euler.iter().zip(&den2))
            .map(|((x, d1), (e, d2))| {
                x.iter()
                    .zip(d1)
                    .zip(e.iter().zip(d2))
                    .map(|((x, d1), (e, d2))| x + (s_next - s) * 0.5 * (d1 + (e - d2) / s_next))
                    .collect()
            })
            .collect())
    }

    pub fn sample<R: Rng>(&self, cond: &Condition, schedule: &NoiseSchedule, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.sample_batch(&[cond], schedule, std::slice::from_mut(rng))?.remove(0))
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut all = self.params.clone();
        let c = &self.config;
        for (key, v) in [
            ("k", c.k as f64),
            ("h", c.h as f64),
            ("sigma_min", c.sigma_min),
            ("sigma_max", c.sigma_max),
            ("rho", c.rho),
            ("sigma_data", c.sigma_data),
            ("sigma_steps", c.sigma_steps as f64),
            ("width", c.width as f64),
            ("blocks", c.blocks as f64),
            ("heads", c.heads as f64),
            ("cond_hidden", c.cond_hidden as f64),
            ("noise_frequencies", c.noise_frequencies as f64),
        ] {
            all.set_meta(format!("diffusion/meta/{key}"), v);
        }
        store_norm(&mut all, "diffusion/norm", &self.norm)?;
        Ok(all)
    }

    pub fn from_params(all: &ParamSet) -> Result<Self> {
        let m = |k: &str| all.meta(&format!("diffusion/meta/{k}"));
        let config = DiffusionConfig {
            k: m("k")? as usize,
            h: m("h")? as usize,
            sigma_min: m("sigma_min")?,
            sigma_max: m("sigma_max")?,
            rho: m("rho")?,
            sigma_data: m("sigma_data")?,
            sigma_steps: m("sigma_steps")? as usize,
            width: m("width")? as usize,
            blocks: m("blocks")? as usize,
            heads: m("heads")? as usize,
            cond_hidden: m("cond_hidden")? as usize,
            noise_frequencies: m("noise_frequencies")? as usize,
            ..DiffusionConfig::default()
        };
        let norm = load_norm(all, "diffusion/norm")?;
        let mut model = Self::new(config, norm, 0)?;
        let mut params = ParamSet::new();
        for (path, t) in all.iter() {
            if !path.starts_with("diffusion/meta/") && !path.starts_with("diffusion/norm/") {
                params.insert(path, t.clone())?;
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(save_checkpoint(path, &self.to_params()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(&load_checkpoint(path)?)
    }
}

/// Train a fresh model on uniformly sampled segment pairs of `dataset`.
pub fn train_diffusion<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &DiffusionConfig,
    seed: u64,
    rng: &mut R,
) -> Result<DiffusionModel> {
    let mut model = DiffusionModel::new(config.clone(), dataset.norm().clone(), seed)?;
    let sampler = SegmentSampler::new(dataset, config.k, config.h)?;
    for step in 0..config.steps {
        let batch = (0..config.batch_size)
            .map(|_| model.example(&sampler.sample(dataset, GAMMA, rng)?))
            .collect::<Result<Vec<_>>>()?;
        let loss = model.train_step(&batch, rng)?;
        if step % 500 == 0 || step + 1 == config.steps {
            log::debug!("diffusion step {step}: loss {loss:.5}");
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precond_identities() {
        for &s in &[0.002, 0.1, 1.0, 3.7, 80.0] {
            for &d in &[0.5, 1.0] {
                let p = Precond::new(s, d);
                assert!((p.c_skip - d * d / (s * s + d * d)).abs() < 1e-15);
                assert!((p.c_out - s * d / (s * s + d * d).sqrt()).abs() < 1e-12);
                // Unit-variance training target: λ·c_out² = 1.
                assert!((p.weight * p.c_out * p.c_out - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ladder_endpoints_and_order() {
        let s = NoiseSchedule { sigma_min: 0.002, sigma_max: 80.0, rho: 7.0, steps: 10 };
        let l = s.ladder();
        assert_eq!(l.len(), 11);
        assert_eq!(l[0], 80.0);
        assert_eq!(l[9], 0.002);
        assert_eq!(l[10], 0.0);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        let one = NoiseSchedule { steps: 1, ..s }.ladder();
        assert_eq!(one, vec![80.0, 0.0]);
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = vec![0.5, -1.25, 3.0];
        assert_eq!(perturb(&x, 0.0, &mut rng), x);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let norm = NormStats::identity(2, 1);
        let bad_heads = DiffusionConfig { width: 10, heads: 3, ..DiffusionConfig::default() };
        assert!(DiffusionModel::new(bad_heads, norm.clone(), 0).is_err());
        let bad_sched = DiffusionConfig { sigma_min: 100.0, ..DiffusionConfig::default() };
        assert!(DiffusionModel::new(bad_sched, norm, 0).is_err());
    }
}
