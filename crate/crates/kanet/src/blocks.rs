//! Transformer block weights and the tape forward shared by the frozen
//! encoder stages (self-attention) and the fusion unit (cross-attention).

use rand::Rng;

use crate::error::{KanetError, Result};
use crate::tensor::{Scalar, Tape, Tensor, VarId};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const MLP_WIDTH_FACTOR: usize = 4;

/// One post-norm transformer block: attention, add & norm, MLP, add & norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

impl<T: Scalar> BlockWeights<T> {
    /// Seeded Gaussian init (std 0.02) for projections, identity layernorm,
    /// zero biases. `zero_out_proj` starts the block as a near-identity
    /// residual map.
    pub fn init<R: Rng>(dim: usize, zero_out_proj: bool, rng: &mut R) -> Self {
        let std = T::from_f64(INIT_STD);
        let hidden = dim * MLP_WIDTH_FACTOR;
        let w_q = Tensor::randn(vec![dim, dim], std, rng);
        let w_k = Tensor::randn(vec![dim, dim], std, rng);
        let w_v = Tensor::randn(vec![dim, dim], std, rng);
        let w_o = if zero_out_proj {
            // Consume the same number of draws so sibling weights do not
            // shift when this flag changes.
            let _ = Tensor::<T>::randn(vec![dim, dim], std, rng);
            Tensor::zeros(vec![dim, dim])
        } else {
            Tensor::randn(vec![dim, dim], std, rng)
        };
        BlockWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            mlp_w1: Tensor::randn(vec![dim, hidden], std, rng),
            mlp_b1: Tensor::zeros(vec![hidden]),
            mlp_w2: Tensor::randn(vec![hidden, dim], std, rng),
            mlp_b2: Tensor::zeros(vec![dim]),
            ln1_gamma: Tensor::new(vec![dim], vec![T::one(); dim]).expect("ln gamma"),
            ln1_beta: Tensor::zeros(vec![dim]),
            ln2_gamma: Tensor::new(vec![dim], vec![T::one(); dim]).expect("ln gamma"),
            ln2_beta: Tensor::zeros(vec![dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Field order used everywhere a block is iterated (optimizer slots,
    /// checkpoint records).
    pub fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }

    /// Registers every tensor on the tape. Trainable blocks become leaves
    /// with gradient storage; frozen ones are constants.
    pub fn register(&self, tape: &mut Tape<T>, num_heads: usize, trainable: bool) -> BlockVars {
        let mut reg = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        BlockVars {
            w_q: reg(&self.w_q),
            w_k: reg(&self.w_k),
            w_v: reg(&self.w_v),
            w_o: reg(&self.w_o),
            mlp_w1: reg(&self.mlp_w1),
            mlp_b1: reg(&self.mlp_b1),
            mlp_w2: reg(&self.mlp_w2),
            mlp_b2: reg(&self.mlp_b2),
            ln1_gamma: reg(&self.ln1_gamma),
            ln1_beta: reg(&self.ln1_beta),
            ln2_gamma: reg(&self.ln2_gamma),
            ln2_beta: reg(&self.ln2_beta),
            num_heads,
        }
    }
}

/// Tape handles for one registered block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub w_q: VarId,
    pub w_k: VarId,
    pub w_v: VarId,
    pub w_o: VarId,
    pub mlp_w1: VarId,
    pub mlp_b1: VarId,
    pub mlp_w2: VarId,
    pub mlp_b2: VarId,
    pub ln1_gamma: VarId,
    pub ln1_beta: VarId,
    pub ln2_gamma: VarId,
    pub ln2_beta: VarId,
    pub num_heads: usize,
}

impl BlockVars {
    pub fn ids(&self) -> [VarId; 12] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Scaled-dot-product multi-head attention. Queries come from `q_in`
/// (`n x d`), keys and values from `kv_in` (`m x d`).
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_in: VarId,
    kv_in: VarId,
    vars: &BlockVars,
) -> Result<VarId> {
    let (_, d) = tape.value(q_in).as_matrix()?;
    let heads = vars.num_heads;
    if d % heads != 0 {
        return Err(KanetError::shape(
            "attention",
            format!("dim {d} not divisible by {heads} heads"),
        ));
    }
    let head_dim = d / heads;
    let inv_sqrt = T::from_f64(1.0 / (head_dim as f64).sqrt());

    let q = tape.matmul(q_in, vars.w_q)?;
    let k = tape.matmul(kv_in, vars.w_k)?;
    let v = tape.matmul(kv_in, vars.w_v)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, inv_sqrt)?;
        let attn = tape.softmax_rows(scaled)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, vars.w_o)
}

/// Full post-norm block. Self-attention when `kv_in == q_in`,
/// cross-attention otherwise; the residual always comes from the query
/// side.
pub fn transformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    q_in: VarId,
    kv_in: VarId,
    vars: &BlockVars,
) -> Result<VarId> {
    let attn = multi_head_attention(tape, q_in, kv_in, vars)?;
    let res1 = tape.add(q_in, attn)?;
    let h = tape.layernorm(res1, vars.ln1_gamma, vars.ln1_beta)?;

    let pre = tape.matmul(h, vars.mlp_w1)?;
    let pre = tape.bias_add(pre, vars.mlp_b1)?;
    let act = tape.gelu(pre)?;
    let post = tape.matmul(act, vars.mlp_w2)?;
    let post = tape.bias_add(post, vars.mlp_b2)?;

    let res2 = tape.add(h, post)?;
    tape.layernorm(res2, vars.ln2_gamma, vars.ln2_beta)
}
