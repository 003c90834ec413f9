//! Central-difference gradient checks for every differentiable primitive and
//! for the composed layers, against the analytic backward pass.

use cdfse_core::nnprim::gradcheck::max_rel_grad_error;
use cdfse_core::nnprim::layers::{BatchNorm1d, Conv1d, Embedding, FftBlock, Linear};
use cdfse_core::nnprim::{ParamStore, Phase, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DELTA: f64 = 1e-5;
// Loose enough that a mathematically-zero gradient (e.g. an attention key
// bias, which softmax shift invariance cancels) is not failed on central
// difference noise, tight enough that a real backward bug lands far outside.
const TOL: f64 = 2e-5;

/// Project a tensor to a scalar with fixed random weights, so the upstream
/// gradient reaching the op under test is non-uniform (uniform upstream
/// grads can hide transposition mistakes).
fn spiky_sum(tape: &mut Tape, x: Var, seed: u64) -> cdfse_core::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(&shape, &mut rng));
    let m = tape.mul(x, w)?;
    Ok(tape.sum(m))
}

fn check<F>(store: &mut ParamStore, phase: Phase, build: F)
where
    F: Fn(&mut Tape) -> cdfse_core::Result<Var>,
{
    let report = max_rel_grad_error(store, phase, DELTA, build).unwrap();
    assert!(report.max_rel_err < TOL, "{report}");
}

fn randn_param(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> cdfse_core::nnprim::ParamId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.add_param(name, Tensor::randn(shape, &mut rng))
}

#[test]
fn elementwise_arithmetic() {
    let mut store = ParamStore::new();
    let a = randn_param(&mut store, "a", &[2, 3], 10);
    let b = randn_param(&mut store, "b", &[2, 3], 11);
    check(&mut store, Phase::Train, |tape| {
        let (va, vb) = (tape.param(a), tape.param(b));
        let sum = tape.add(va, vb)?;
        let diff = tape.sub(va, vb)?;
        let prod = tape.mul(va, vb)?;
        let scaled = tape.scale(prod, 1.7);
        let l1 = spiky_sum(tape, sum, 1)?;
        let l2 = spiky_sum(tape, diff, 2)?;
        let l3 = spiky_sum(tape, scaled, 3)?;
        let l12 = tape.add(l1, l2)?;
        tape.add(l12, l3)
    });
}

#[test]
fn linear_layer() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[3, 4], 20);
    let w = randn_param(&mut store, "w", &[4, 2], 21);
    let b = randn_param(&mut store, "b", &[1, 2], 22);
    check(&mut store, Phase::Train, |tape| {
        let (vx, vw, vb) = (tape.param(x), tape.param(w), tape.param(b));
        let y = tape.linear(vx, vw, vb)?;
        spiky_sum(tape, y, 4)
    });
}

#[test]
fn matrix_products() {
    let mut store = ParamStore::new();
    let a = randn_param(&mut store, "a", &[3, 4], 30);
    let b = randn_param(&mut store, "b", &[4, 2], 31);
    let c = randn_param(&mut store, "c", &[5, 4], 32);
    check(&mut store, Phase::Train, |tape| {
        let (va, vb, vc) = (tape.param(a), tape.param(b), tape.param(c));
        let nn = tape.matmul(va, vb)?;
        let nt = tape.matmul_nt(va, vc)?;
        let l1 = spiky_sum(tape, nn, 5)?;
        let l2 = spiky_sum(tape, nt, 6)?;
        tape.add(l1, l2)
    });
}

#[test]
fn convolution_wide_and_pointwise() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[5, 2], 40);
    let w3 = randn_param(&mut store, "w3", &[3, 2, 3], 41);
    let w1 = randn_param(&mut store, "w1", &[1, 3, 2], 42);
    check(&mut store, Phase::Train, |tape| {
        let (vx, vw3, vw1) = (tape.param(x), tape.param(w3), tape.param(w1));
        let h = tape.conv1d(vx, vw3)?;
        let y = tape.conv1d(h, vw1)?;
        spiky_sum(tape, y, 7)
    });
}

#[test]
fn convolution_shorter_than_kernel() {
    // T=2 with K=3 exercises both padded edges on every output frame.
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[2, 2], 43);
    let w = randn_param(&mut store, "w", &[3, 2, 2], 44);
    check(&mut store, Phase::Train, |tape| {
        let (vx, vw) = (tape.param(x), tape.param(w));
        let y = tape.conv1d(vx, vw)?;
        spiky_sum(tape, y, 8)
    });
}

#[test]
fn average_pooling_even_and_odd() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[5, 3], 50);
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let once = tape.avgpool1d(vx); // 5 → 3, replicated tail
        let twice = tape.avgpool1d(once); // 3 → 2, replicated tail
        let l1 = spiky_sum(tape, once, 9)?;
        let l2 = spiky_sum(tape, twice, 10)?;
        tape.add(l1, l2)
    });
}

#[test]
fn pointwise_nonlinearities_away_from_kinks() {
    let mut store = ParamStore::new();
    let x = store
        .add_param("x", Tensor::from_vec(&[2, 3], vec![0.5, -1.2, 2.0, -0.3, 1.4, -2.2]).unwrap());
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let r = tape.relu(vx);
        let t = tape.tanh(vx);
        let a = tape.abs(vx);
        let l1 = spiky_sum(tape, r, 11)?;
        let l2 = spiky_sum(tape, t, 12)?;
        let l3 = spiky_sum(tape, a, 13)?;
        let l12 = tape.add(l1, l2)?;
        tape.add(l12, l3)
    });
}

#[test]
fn reductions_and_row_masking() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[3, 4], 60);
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let m = tape.mean_rows(vx);
        // A zero weight must zero that row's contribution exactly.
        let masked = tape.scale_rows(vx, &[0.0, 1.5, 2.0])?;
        let l1 = spiky_sum(tape, m, 14)?;
        let l2 = spiky_sum(tape, masked, 15)?;
        tape.add(l1, l2)
    });
}

#[test]
fn batchnorm_training_mode() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[4, 3], 70);
    let bn = BatchNorm1d::new(&mut store, "bn", 3);
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let y = bn.apply(tape, vx)?;
        spiky_sum(tape, y, 16)
    });
}

#[test]
fn batchnorm_eval_mode_uses_running_stats() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[4, 3], 71);
    let gamma = randn_param(&mut store, "bn.weight", &[1, 3], 72);
    let beta = randn_param(&mut store, "bn.bias", &[1, 3], 73);
    let rm = store.add_buffer("bn.running_mean", Tensor::from_vec(&[1, 3], vec![0.1, -0.2, 0.3]).unwrap());
    let rv = store.add_buffer("bn.running_var", Tensor::from_vec(&[1, 3], vec![0.9, 1.1, 0.7]).unwrap());
    check(&mut store, Phase::Eval, |tape| {
        let (vx, vg, vb) = (tape.param(x), tape.param(gamma), tape.param(beta));
        let y = tape.batchnorm1d(vx, vg, vb, (rm, rv), 0.1)?;
        spiky_sum(tape, y, 17)
    });
}

#[test]
fn layer_normalization() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[3, 6], 80);
    let gamma = randn_param(&mut store, "ln.weight", &[1, 6], 81);
    let beta = randn_param(&mut store, "ln.bias", &[1, 6], 82);
    check(&mut store, Phase::Train, |tape| {
        let (vx, vg, vb) = (tape.param(x), tape.param(gamma), tape.param(beta));
        let y = tape.layernorm(vx, vg, vb)?;
        spiky_sum(tape, y, 18)
    });
}

#[test]
fn row_softmax() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[3, 5], 90);
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let y = tape.softmax_rows(vx);
        spiky_sum(tape, y, 19)
    });
}

#[test]
fn weighted_cross_entropy() {
    let mut store = ParamStore::new();
    let logits = randn_param(&mut store, "logits", &[4, 3], 100);
    check(&mut store, Phase::Train, |tape| {
        let v = tape.param(logits);
        tape.cross_entropy(v, &[0, 2, 1, 1], &[1.0, 0.0, 2.0, 0.5])
    });
}

#[test]
fn embedding_gather_with_repeats() {
    let mut store = ParamStore::new();
    let table = randn_param(&mut store, "table", &[5, 3], 110);
    check(&mut store, Phase::Train, |tape| {
        let t = tape.param(table);
        let y = tape.gather_rows(t, &[0, 2, 2, 4])?;
        spiky_sum(tape, y, 20)
    });
}

#[test]
fn row_repetition() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[3, 2], 120);
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let y = tape.repeat_rows(vx, &[1, 3, 2])?;
        spiky_sum(tape, y, 21)
    });
}

#[test]
fn column_slicing_and_concatenation() {
    let mut store = ParamStore::new();
    let x = randn_param(&mut store, "x", &[2, 6], 130);
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let left = tape.slice_cols(vx, 0, 2)?;
        let right = tape.slice_cols(vx, 2, 4)?;
        let swapped = tape.concat_cols(&[right, left])?;
        spiky_sum(tape, swapped, 22)
    });
}

#[test]
fn scaled_dot_attention_both_outputs() {
    let mut store = ParamStore::new();
    let q = randn_param(&mut store, "q", &[3, 4], 140);
    let k = randn_param(&mut store, "k", &[5, 4], 141);
    let v = randn_param(&mut store, "v", &[5, 2], 142);
    check(&mut store, Phase::Train, |tape| {
        let (vq, vk, vv) = (tape.param(q), tape.param(k), tape.param(v));
        let (out, weights) = tape.scaled_dot_attention(vq, vk, vv)?;
        // The weights feed both the context and the loss directly, so the
        // softmax node accumulates gradient from two consumers.
        let l1 = spiky_sum(tape, out, 23)?;
        let l2 = spiky_sum(tape, weights, 24)?;
        tape.add(l1, l2)
    });
}

#[test]
fn conv_bn_pool_linear_pipeline() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(150);
    let x = store.add_param("x", Tensor::randn(&[6, 3], &mut rng));
    let conv = Conv1d::new(&mut store, "conv", 3, 3, 4, &mut rng).unwrap();
    let bn = BatchNorm1d::new(&mut store, "bn", 4);
    let fc = Linear::new(&mut store, "fc", 4, 2, &mut rng);
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let h = conv.apply(tape, vx)?;
        let h = bn.apply(tape, h)?;
        let h = tape.relu(h);
        let h = tape.avgpool1d(h);
        let h = fc.apply(tape, h)?;
        let h = tape.tanh(h);
        let m = tape.mean_rows(h);
        spiky_sum(tape, m, 25)
    });
}

#[test]
fn transformer_block_end_to_end() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(160);
    let x = store.add_param("x", Tensor::randn(&[5, 8], &mut rng));
    let block = FftBlock::new(&mut store, "blk", 8, 2, 16, (3, 1), &mut rng).unwrap();
    check(&mut store, Phase::Train, |tape| {
        let vx = tape.param(x);
        let y = block.apply(tape, vx)?;
        spiky_sum(tape, y, 26)
    });
}

#[test]
fn embedding_then_length_regulation() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(170);
    let emb = Embedding::new(&mut store, "emb", 7, 6, &mut rng);
    check(&mut store, Phase::Train, |tape| {
        let h = emb.apply(tape, &[1, 3, 5])?;
        let y = tape.repeat_rows(h, &[2, 1, 3])?;
        spiky_sum(tape, y, 27)
    });
}
