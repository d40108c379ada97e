//! Parameterized layers composed from tape primitives.

use crate::error::{NeuralError, Result};
use crate::params::ParamSet;
use crate::tape::{AttentionLayout, Tape, Var};
use crate::tensor::Tensor;

/// A differentiable network: records its forward computation on a tape.
pub trait Network {
    type Input;

    fn forward(&self, tape: &mut Tape, params: &ParamSet, input: &Self::Input) -> Result<Var>;
}

/// Run `net` on a fresh tape, returning the output value and the tape for
/// a later [`Tape::backward`].
pub fn net_forward<N: Network>(net: &N, params: &ParamSet, input: &N::Input) -> Result<(Tensor, Tape)> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, params, input)?;
    tape.mark_output(out);
    let value = tape.value(out).clone();
    Ok((value, tape))
}

/// Affine layer reading `path/w` and, when present, `path/b`.
pub fn affine(tape: &mut Tape, params: &ParamSet, path: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{path}/w"))?;
    let b_path = format!("{path}/b");
    let b = if params.contains(&b_path) {
        Some(tape.param(params, &b_path)?)
    } else {
        None
    };
    tape.affine(x, w, b)
}

/// Layer norm with learned `path/gain` and `path/bias`.
pub fn layer_norm(tape: &mut Tape, params: &ParamSet, path: &str, x: Var) -> Result<Var> {
    let g = tape.param(params, &format!("{path}/gain"))?;
    let b = tape.param(params, &format!("{path}/bias"))?;
    tape.layer_norm(x, Some(g), Some(b))
}

/// Feed-forward stack with GELU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub path: String,
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(path: impl Into<String>, sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self { path: path.into(), sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn init(&self, params: &mut ParamSet, seed: u64) -> Result<()> {
        for (i, w) in self.sizes.windows(2).enumerate() {
            params.add_affine(&format!("{}/{i}", self.path), w[0], w[1], true, seed)?;
        }
        Ok(())
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, mut x: Var) -> Result<Var> {
        let layers = self.sizes.len() - 1;
        for i in 0..layers {
            tape.set_scope(format!("{}/{i}", self.path));
            x = affine(tape, params, &format!("{}/{i}", self.path), x)?;
            if i + 1 < layers {
                x = tape.gelu(x)?;
            }
        }
        Ok(x)
    }
}

impl Network for Mlp {
    type Input = Tensor;

    fn forward(&self, tape: &mut Tape, params: &ParamSet, input: &Tensor) -> Result<Var> {
        if input.cols() != self.input_dim() {
            return Err(NeuralError::Shape {
                layer: format!("{}/0", self.path),
                detail: format!(
                    "expected {} input columns, got {}",
                    self.input_dim(),
                    input.cols()
                ),
            });
        }
        let x = tape.input(input.clone())?;
        self.apply(tape, params, x)
    }
}

/// Multi-head self-attention: bias-free q/k/v projections plus an output
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub path: String,
    pub dim: usize,
    pub heads: usize,
}

impl SelfAttention {
    pub fn init(&self, params: &mut ParamSet, seed: u64) -> Result<()> {
        for name in ["q", "k", "v"] {
            params.add_affine(&format!("{}/{name}", self.path), self.dim, self.dim, false, seed)?;
        }
        params.add_affine(&format!("{}/o", self.path), self.dim, self.dim, true, seed)
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        layout: AttentionLayout,
    ) -> Result<Var> {
        tape.set_scope(self.path.clone());
        let q = affine(tape, params, &format!("{}/q", self.path), x)?;
        let k = affine(tape, params, &format!("{}/k", self.path), x)?;
        let v = affine(tape, params, &format!("{}/v", self.path), x)?;
        let a = tape.attention(q, k, v, AttentionLayout { heads: self.heads, ..layout })?;
        affine(tape, params, &format!("{}/o", self.path), a)
    }
}
