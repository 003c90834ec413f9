use rand::Rng;

use super::params::{BufId, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully-connected layer with bias. Weights are Xavier-uniform.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut R) -> Linear {
        Linear::with_gain(store, prefix, din, dout, 1.0, rng)
    }

    /// `gain` scales the Xavier bound; callers that feed a softmax use a
    /// small gain so the distribution starts near-uniform.
    pub fn with_gain<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Linear {
        let bound = gain * (6.0 / (din + dout) as f64).sqrt();
        let w = store.add_param(format!("{prefix}.weight"), Tensor::rand_uniform(&[din, dout], bound, rng));
        let b = store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[1, dout]));
        Linear { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, b)
    }
}

/// Same-padded 1-D convolution without bias (normalization follows it
/// everywhere this model uses one).
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    w: ParamId,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Conv1d> {
        if kernel % 2 == 0 {
            return Err(Error::Config {
                field: "kernel",
                detail: format!("conv kernel width must be odd, got {kernel}"),
            });
        }
        let bound = (6.0 / (kernel * cin + kernel * cout) as f64).sqrt();
        let w = store.add_param(
            format!("{prefix}.weight"),
            Tensor::rand_uniform(&[kernel, cin, cout], bound, rng),
        );
        Ok(Conv1d { w })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        tape.conv1d(x, w)
    }
}

/// Batch normalization over time frames with running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm1d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufId,
    running_var: BufId,
    momentum: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> BatchNorm1d {
        BatchNorm1d {
            gamma: store.add_param(format!("{prefix}.weight"), Tensor::filled(&[1, channels], 1.0)),
            beta: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[1, channels])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[1, channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::filled(&[1, channels], 1.0)),
            momentum: 0.1,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.batchnorm1d(x, g, b, (self.running_mean, self.running_var), self.momentum)
    }
}

/// Per-row layer normalization with learned scale/shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: store.add_param(format!("{prefix}.weight"), Tensor::filled(&[1, dim], 1.0)),
            beta: store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layernorm(x, g, b)
    }
}

/// Token embedding table.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, vocab: usize, dim: usize, rng: &mut R) -> Embedding {
        let mut t = Tensor::randn(&[vocab, dim], rng);
        let scale = 1.0 / (dim as f64).sqrt();
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
        Embedding {
            table: store.add_param(format!("{prefix}.weight"), t),
        }
    }

    pub fn apply(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }
}

/// Multi-head self-attention over a full (unmasked) sequence.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    head_dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<SelfAttention> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config {
                field: "n_heads",
                detail: format!("{n_heads} heads do not divide model width {d_model}"),
            });
        }
        Ok(SelfAttention {
            wq: Linear::new(store, &format!("{prefix}.wq"), d_model, d_model, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), d_model, d_model, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), d_model, d_model, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), d_model, d_model, rng),
            n_heads,
            head_dim: d_model / n_heads,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let q = self.wq.apply(tape, x)?;
        let k = self.wk.apply(tape, x)?;
        let v = self.wv.apply(tape, x)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let start = h * self.head_dim;
            let qh = tape.slice_cols(q, start, self.head_dim)?;
            let kh = tape.slice_cols(k, start, self.head_dim)?;
            let vh = tape.slice_cols(v, start, self.head_dim)?;
            let (out, _) = tape.scaled_dot_attention(qh, kh, vh)?;
            heads.push(out);
        }
        let cat = tape.concat_cols(&heads)?;
        self.wo.apply(tape, cat)
    }
}

/// Feed-forward transformer block: self-attention and a two-conv feed-forward
/// net, each wrapped in a residual connection followed by layer norm.
#[derive(Debug, Clone, Copy)]
pub struct FftBlock {
    attn: SelfAttention,
    ln1: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    ln2: LayerNorm,
}

impl FftBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        ffn_dim: usize,
        ffn_kernels: (usize, usize),
        rng: &mut R,
    ) -> Result<FftBlock> {
        Ok(FftBlock {
            attn: SelfAttention::new(store, &format!("{prefix}.attn"), d_model, n_heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d_model),
            conv1: Conv1d::new(store, &format!("{prefix}.ffn.conv1"), ffn_kernels.0, d_model, ffn_dim, rng)?,
            conv2: Conv1d::new(store, &format!("{prefix}.ffn.conv2"), ffn_kernels.1, ffn_dim, d_model, rng)?,
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d_model),
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.attn.apply(tape, x)?;
        let res = tape.add(x, a)?;
        let x = self.ln1.apply(tape, res)?;
        let h = self.conv1.apply(tape, x)?;
        let h = tape.relu(h);
        let h = self.conv2.apply(tape, h)?;
        let res = tape.add(x, h)?;
        self.ln2.apply(tape, res)
    }
}

/// Fixed sinusoidal position encoding, `T×d` with interleaved sin/cos.
pub fn sinusoidal_pe(t_len: usize, d: usize) -> Tensor {
    assert!(d % 2 == 0, "position encoding width must be even");
    let mut pe = Tensor::zeros(&[t_len, d]);
    for pos in 0..t_len {
        let row = pe.row_mut(pos);
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnprim::tape::Phase;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_attention_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SelfAttention::new(&mut store, "a", 10, 3, &mut rng).is_err());
    }

    #[test]
    fn fft_block_preserves_sequence_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = FftBlock::new(&mut store, "blk", 8, 2, 16, (3, 1), &mut rng).unwrap();
        let mut tape = Tape::new(&store, Phase::Eval);
        let x = tape.constant(Tensor::randn(&[5, 8], &mut rng));
        let y = block.apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[5, 8]);
    }

    #[test]
    fn position_encoding_starts_at_sin0_cos0() {
        let pe = sinusoidal_pe(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        // Position 1, lowest frequency pair: sin(1), cos(1).
        assert!((pe.at(1, 0) - 1.0_f64.sin()).abs() < 1e-12);
        assert!((pe.at(1, 1) - 1.0_f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn embedding_lookup_matches_table_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = Embedding::new(&mut store, "emb", 6, 4, &mut rng);
        let mut tape = Tape::new(&store, Phase::Eval);
        let y = emb.apply(&mut tape, &[3, 3, 0]).unwrap();
        let row3 = tape.value(y).row(0).to_vec();
        assert_eq!(tape.value(y).row(1), row3.as_slice());
        assert_ne!(tape.value(y).row(2), row3.as_slice());
    }
}
