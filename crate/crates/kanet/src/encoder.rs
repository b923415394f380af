//! Frozen ViT-style image encoder split into early, middle, and post
//! stages. Weights are seeded Gaussians, never trained; gradients still
//! propagate *through* the post stage to whatever feeds it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::{BlockVars, BlockWeights, INIT_STD};
use crate::data::LabeledDataset;
use crate::error::{KanetError, Result};
use crate::tensor::{Scalar, Tape, Tensor, VarId};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub n_early: usize,
    pub n_middle: usize,
    pub n_post: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_heads: 4,
            n_early: 2,
            n_middle: 3,
            n_post: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0
        {
            return Err(KanetError::Config(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(KanetError::Config(format!(
                "embed dim {} must be a positive multiple of {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.channels == 0 {
            return Err(KanetError::Config("channels must be positive".into()));
        }
        if self.n_early == 0 || self.n_middle == 0 || self.n_post == 0 {
            return Err(KanetError::Config(
                "every encoder stage needs at least one layer".into(),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Patch tokens plus the leading class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn total_layers(&self) -> usize {
        self.n_early + self.n_middle + self.n_post
    }
}

/// Class token plus per-sample middle-stage tokens, cached because the
/// stages below the fusion point are frozen.
pub struct EncodedDataset<T> {
    /// Early-stage class token per sample, a 1-D `[D]` tensor.
    pub early_class: Vec<Tensor<T>>,
    /// Full middle-stage token matrix per sample, `(L+1) x D`.
    pub middle: Vec<Tensor<T>>,
    pub labels: Vec<u32>,
}

#[derive(Clone)]
pub struct Encoder<T> {
    cfg: EncoderConfig,
    patch_proj: Tensor<T>,
    patch_bias: Tensor<T>,
    class_token: Tensor<T>,
    pos_embed: Tensor<T>,
    blocks: Vec<BlockWeights<T>>,
}

impl<T: Scalar> Encoder<T> {
    /// Builds the frozen encoder. Weight generation depends only on the
    /// seed and the *total* layer count, so re-splitting the stages keeps
    /// every weight bitwise identical.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = T::from_f64(INIT_STD);
        let d = cfg.embed_dim;
        let patch_proj = Tensor::randn(vec![cfg.patch_dim(), d], std, &mut rng);
        let patch_bias = Tensor::randn(vec![d], std, &mut rng);
        let class_token = Tensor::randn(vec![1, d], std, &mut rng);
        let pos_embed = Tensor::randn(vec![cfg.seq_len(), d], std, &mut rng);
        let blocks = (0..cfg.total_layers())
            .map(|_| BlockWeights::init(d, false, &mut rng))
            .collect();
        Ok(Encoder { cfg, patch_proj, patch_bias, class_token, pos_embed, blocks })
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Same weights, different stage boundaries (the KS/KF sweep).
    pub fn resplit(&self, n_early: usize, n_middle: usize, n_post: usize) -> Result<Self> {
        if n_early + n_middle + n_post != self.cfg.total_layers() {
            return Err(KanetError::Config(format!(
                "split {n_early}/{n_middle}/{n_post} does not cover {} layers",
                self.cfg.total_layers()
            )));
        }
        let cfg = EncoderConfig { n_early, n_middle, n_post, ..self.cfg.clone() };
        cfg.validate()?;
        Ok(Encoder {
            cfg,
            patch_proj: self.patch_proj.clone(),
            patch_bias: self.patch_bias.clone(),
            class_token: self.class_token.clone(),
            pos_embed: self.pos_embed.clone(),
            blocks: self.blocks.clone(),
        })
    }

    /// Concatenated little-endian bytes of every parameter, for freeze
    /// contracts.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.patch_proj.to_le_bytes());
        out.extend_from_slice(&self.patch_bias.to_le_bytes());
        out.extend_from_slice(&self.class_token.to_le_bytes());
        out.extend_from_slice(&self.pos_embed.to_le_bytes());
        for b in &self.blocks {
            for t in b.tensors() {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    /// Flattens an image into the `L x patch_dim` patch matrix. Patches
    /// run over the grid row-major; within a patch the layout is
    /// channel-major.
    fn patch_matrix(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cfg.channels;
        let s = self.cfg.image_size;
        if image.shape() != [c, s, s] {
            return Err(KanetError::shape(
                "patch_embed",
                format!("expected image [{c}, {s}, {s}], got {:?}", image.shape()),
            ));
        }
        let p = self.cfg.patch_size;
        let grid = s / p;
        let data = image.data();
        let mut rows = Vec::with_capacity(self.cfg.num_patches() * self.cfg.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for py in 0..p {
                        let y = gy * p + py;
                        let base = ch * s * s + y * s + gx * p;
                        rows.extend_from_slice(&data[base..base + p]);
                    }
                }
            }
        }
        Tensor::new(vec![self.cfg.num_patches(), self.cfg.patch_dim()], rows)
    }

    /// Projects patches, prepends the class token, adds positional
    /// embeddings. Output: `(L+1) x D` tokens on the tape.
    pub fn patch_embed(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<VarId> {
        let patches = tape.constant(self.patch_matrix(image)?);
        let proj = tape.constant(self.patch_proj.clone());
        let bias = tape.constant(self.patch_bias.clone());
        let class_tok = tape.constant(self.class_token.clone());
        let pos = tape.constant(self.pos_embed.clone());

        let projected = tape.matmul(patches, proj)?;
        let projected = tape.bias_add(projected, bias)?;
        let tokens = tape.concat_rows(&[class_tok, projected])?;
        tape.add(tokens, pos)
    }

    /// Registers the blocks of `range` as frozen constants.
    pub fn register_blocks(
        &self,
        tape: &mut Tape<T>,
        range: std::ops::Range<usize>,
    ) -> Vec<BlockVars> {
        self.blocks[range]
            .iter()
            .map(|b| b.register(tape, self.cfg.num_heads, false))
            .collect()
    }

    pub fn early_range(&self) -> std::ops::Range<usize> {
        0..self.cfg.n_early
    }

    pub fn middle_range(&self) -> std::ops::Range<usize> {
        self.cfg.n_early..self.cfg.n_early + self.cfg.n_middle
    }

    pub fn post_range(&self) -> std::ops::Range<usize> {
        self.cfg.n_early + self.cfg.n_middle..self.cfg.total_layers()
    }

    /// Runs pre-registered blocks over a token matrix.
    pub fn forward_blocks(
        &self,
        tape: &mut Tape<T>,
        tokens: VarId,
        vars: &[BlockVars],
    ) -> Result<VarId> {
        let mut x = tokens;
        for v in vars {
            x = crate::blocks::transformer_block(tape, x, x, v)?;
        }
        Ok(x)
    }

    fn encode_range(
        &self,
        tape: &mut Tape<T>,
        tokens: VarId,
        range: std::ops::Range<usize>,
    ) -> Result<VarId> {
        let d = self.cfg.embed_dim;
        let (_, got_d) = tape.value(tokens).as_matrix()?;
        if got_d != d {
            return Err(KanetError::shape(
                "encode",
                format!("token dim {got_d}, encoder dim {d}"),
            ));
        }
        let vars = self.register_blocks(tape, range);
        self.forward_blocks(tape, tokens, &vars)
    }

    pub fn encode_early(&self, tape: &mut Tape<T>, tokens: VarId) -> Result<VarId> {
        self.encode_range(tape, tokens, self.early_range())
    }

    pub fn encode_middle(&self, tape: &mut Tape<T>, tokens: VarId) -> Result<VarId> {
        self.encode_range(tape, tokens, self.middle_range())
    }

    pub fn encode_post(&self, tape: &mut Tape<T>, tokens: VarId) -> Result<VarId> {
        self.encode_range(tape, tokens, self.post_range())
    }

    /// One pass up to the fusion point: the early-stage class token (for
    /// the knowledge library) and the full middle-stage token matrix.
    pub fn encode_to_middle(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let tokens = self.patch_embed(&mut tape, image)?;
        let early = self.encode_early(&mut tape, tokens)?;
        let early_class = tape.value(early).row_tensor(0);
        let middle = self.encode_middle(&mut tape, early)?;
        Ok((early_class, tape.value(middle).clone()))
    }

    /// Caches the frozen-stage outputs for a whole dataset.
    pub fn encode_dataset(&self, data: &LabeledDataset<T>) -> Result<EncodedDataset<T>> {
        let encoded: Result<Vec<(Tensor<T>, Tensor<T>)>> = data
            .images
            .par_iter()
            .map(|img| self.encode_to_middle(img))
            .collect();
        let encoded = encoded?;
        let (early_class, middle) = encoded.into_iter().unzip();
        Ok(EncodedDataset { early_class, middle, labels: data.labels.clone() })
    }
}
