//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::layers::{net_forward, Network};
use crate::params::ParamSet;
use crate::tape::{backprop, Tape};
use crate::tensor::Tensor;

/// A network that can produce its own parameters and a representative
/// input from a seed, so it can be gradient-checked in isolation.
pub trait CheckFixture: Network {
    fn init_params(&self, seed: u64) -> Result<ParamSet>;
    fn sample_input(&self, seed: u64) -> Self::Input;
}

/// Max over all parameter scalars of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// The scalar loss is a fixed random projection of the network output so
/// every output coordinate contributes.
pub fn grad_check<N: Network>(
    net: &N,
    params: &ParamSet,
    input: &N::Input,
    eps: f64,
    probe_seed: u64,
) -> Result<f64> {
    grad_check_with(net, params, input, eps, probe_seed, |_| {})
}

/// As [`grad_check`], with a hook applied to the tape before the analytic
/// backward pass (used to inject faults in tests).
pub fn grad_check_with<N: Network>(
    net: &N,
    params: &ParamSet,
    input: &N::Input,
    eps: f64,
    probe_seed: u64,
    prepare: impl FnOnce(&mut Tape),
) -> Result<f64> {
    let (out, mut tape) = net_forward(net, params, input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe: Vec<f64> = (0..out.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let probe = Tensor::new(out.shape().to_vec(), probe)?;
    let loss = |o: &Tensor| -> f64 { o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum() };

    prepare(&mut tape);
    let grads = backprop(&mut tape, &probe)?;

    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    for path in paths {
        let analytic = match grads.param(&path) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; params.get(&path)?.len()],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(&path)?.data()[i];
            work.get_mut(&path)?.data_mut()[i] = orig + eps;
            let plus = loss(&net_forward(net, &work, input)?.0);
            work.get_mut(&path)?.data_mut()[i] = orig - eps;
            let minus = loss(&net_forward(net, &work, input)?.0);
            work.get_mut(&path)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// [`grad_check`] on a fixture's own seeded parameters and input.
pub fn grad_check_seeded<N: CheckFixture>(net: &N, seed: u64, eps: f64) -> Result<f64> {
    let params = net.init_params(seed)?;
    let input = net.sample_input(seed);
    grad_check(net, &params, &input, eps, seed ^ 0x5eed)
}
