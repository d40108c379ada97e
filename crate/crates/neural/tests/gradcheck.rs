use branchgen_neural::{
    affine, grad_check, grad_check_seeded, grad_check_with, layer_norm, net_forward, AttentionLayout,
    CheckFixture, Mlp, Network, ParamSet, Result, SelfAttention, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Affine layers only.
struct Linear;

impl Network for Linear {
    type Input = Tensor;
    fn forward(&self, tape: &mut Tape, params: &ParamSet, input: &Tensor) -> Result<Var> {
        let x = tape.input(input.clone())?;
        let h = affine(tape, params, "l0", x)?;
        affine(tape, params, "l1", h)
    }
}

impl CheckFixture for Linear {
    fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        p.add_affine("l0", 3, 4, true, seed)?;
        p.add_affine("l1", 4, 2, true, seed)?;
        Ok(p)
    }
    fn sample_input(&self, seed: u64) -> Tensor {
        random_matrix(5, 3, seed)
    }
}

/// Every primitive in one graph: embedding, concatenation, layer norm,
/// modulation, multi-head causal attention with padding, GELU, row
/// selection and softmax.
struct Composite;

const SEQ: usize = 4;
const BATCH: usize = 2;
const DIM: usize = 6;

impl Network for Composite {
    type Input = Tensor;
    fn forward(&self, tape: &mut Tape, params: &ParamSet, input: &Tensor) -> Result<Var> {
        let x = tape.input(input.clone())?;
        let tab = tape.param(params, "pos/table")?;
        let ids: Vec<usize> = (0..BATCH * SEQ).map(|r| r % SEQ).collect();
        let pos = tape.embedding(tab, &ids)?;
        let cat = tape.concat_cols(&[x, pos])?;
        let h = affine(tape, params, "in", cat)?;
        let cond = tape.param(params, "cond")?;
        let scale = affine(tape, params, "scale", cond)?;
        let shift = affine(tape, params, "shift", cond)?;
        let n = tape.layer_norm(h, None, None)?;
        let m = tape.modulate(n, scale, shift, SEQ)?;
        let attn = SelfAttention { path: "attn".into(), dim: DIM, heads: 2 };
        let layout = AttentionLayout {
            batch: BATCH,
            seq: SEQ,
            heads: 2,
            causal: true,
            key_valid: Some(vec![false, true, true, true, true, true, true, true]),
        };
        let a = attn.apply(tape, params, m, layout)?;
        let r = tape.add(h, a)?;
        let n2 = layer_norm(tape, params, "ln", r)?;
        let g = tape.gelu(n2)?;
        let s = tape.scale(g, 0.7)?;
        let both = tape.concat_rows(&[s, r])?;
        let picked = tape.select_rows(both, &[1, 3, 5, 7, 8, 8])?;
        let out = affine(tape, params, "out", picked)?;
        tape.softmax(out)
    }
}

impl CheckFixture for Composite {
    fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        p.add_embedding("pos", SEQ, 2, seed)?;
        p.add_affine("in", 5, DIM, true, seed)?;
        p.insert("cond", random_matrix(BATCH, 3, seed + 100))?;
        p.add_affine("scale", 3, DIM, true, seed)?;
        p.add_affine("shift", 3, DIM, true, seed)?;
        SelfAttention { path: "attn".into(), dim: DIM, heads: 2 }.init(&mut p, seed)?;
        p.add_layer_norm("ln", DIM)?;
        // Non-trivial gain/bias so their gradients are exercised.
        for (i, v) in p.get_mut("ln/gain")?.data_mut().iter_mut().enumerate() {
            *v = 1.0 + 0.1 * i as f64;
        }
        p.add_affine("out", DIM, 3, true, seed)?;
        Ok(p)
    }
    fn sample_input(&self, seed: u64) -> Tensor {
        random_matrix(BATCH * SEQ, 3, seed + 7)
    }
}

#[test]
fn affine_only_network_is_exact() {
    for seed in 0..3 {
        let err = grad_check_seeded(&Linear, seed, 1e-5).unwrap();
        assert!(err < 1e-9, "seed {seed}: {err:e}");
    }
}

#[test]
fn composite_network_matches_finite_differences() {
    for seed in 0..3 {
        let err = grad_check_seeded(&Composite, seed, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn random_three_layer_mlp_matches_finite_differences() {
    let mlp = Mlp::new("mlp", vec![4, 8, 8, 3]);
    let mut params = ParamSet::new();
    mlp.init(&mut params, 11).unwrap();
    let x = random_matrix(6, 4, 12);
    let err = grad_check(&mlp, &params, &x, 1e-5, 13).unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn corrupted_backward_rule_is_detected() {
    let params = Composite.init_params(0).unwrap();
    let x = Composite.sample_input(0);
    for op in ["gelu", "layer_norm", "attention", "modulate"] {
        let err =
            grad_check_with(&Composite, &params, &x, 1e-5, 1, |t| t.corrupt_backward(op, 1.5)).unwrap();
        assert!(err > 1e-2, "{op}: corruption went unnoticed ({err:e})");
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let mlp = Mlp::new("mlp", vec![3, 16, 2]);
    let mut a = ParamSet::new();
    mlp.init(&mut a, 42).unwrap();
    let mut b = ParamSet::new();
    mlp.init(&mut b, 42).unwrap();
    let x = Tensor::from_rows(&[vec![0.25, -1.5, 3.0]]).unwrap();
    let first = net_forward(&mlp, &a, &x).unwrap().0;
    let second = net_forward(&mlp, &b, &x).unwrap().0;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first), bits(&second));
}

#[test]
fn input_shape_mismatch_names_first_layer() {
    let mlp = Mlp::new("tvf/q", vec![3, 4, 1]);
    let mut p = ParamSet::new();
    mlp.init(&mut p, 0).unwrap();
    let err = net_forward(&mlp, &p, &Tensor::zeros(vec![2, 5])).err().unwrap();
    assert!(err.to_string().contains("tvf/q/0"), "{err}");
}

#[test]
fn rows_are_computed_independently() {
    // Batch composition must not change per-row results.
    let mlp = Mlp::new("m", vec![5, 32, 32, 4]);
    let mut p = ParamSet::new();
    mlp.init(&mut p, 3).unwrap();
    let batch = random_matrix(37, 5, 9);
    let full = net_forward(&mlp, &p, &batch).unwrap().0;
    for r in [0, 17, 36] {
        let single = Tensor::matrix(1, 5, batch.row(r).to_vec()).unwrap();
        let one = net_forward(&mlp, &p, &single).unwrap().0;
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(one.data()), bits(full.row(r)));
    }
}

proptest! {
    #[test]
    fn layer_norm_rows_are_standardized(row in proptest::collection::vec(-50.0f64..50.0, 8)) {
        let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 8, row).unwrap()).unwrap();
        let y = tape.layer_norm(x, None, None).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
        let n = row.len();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, n, row).unwrap()).unwrap();
        let y = tape.softmax(x).unwrap();
        let total: f64 = tape.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
