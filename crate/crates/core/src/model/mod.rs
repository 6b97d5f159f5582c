//! A small decoder-only multimodal transformer.
//!
//! The image enters as a prefix of `grid²` visual tokens, followed by text
//! tokens. Blocks are pre-norm with causal multi-head self-attention and a
//! 4× GELU MLP; the output head is untied from the token embedding. Every
//! forward pass records the post-softmax attention of every layer and head.

mod checkpoint;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use forward::{
    forward_graph, forward_packed_graph, next_token_logits, AttentionBias, AttentionStack, ForwardResult, ForwardVars,
    PackedVars, ParamVars,
    SeqLayout,
};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Side of the visual grid; the model sees `grid²` visual tokens.
    pub grid: usize,
    pub vocab_size: usize,
    /// Width of one cell's feature vector.
    pub feat_dim: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Fixed multiplier on the whole visual embedding (projection, bias and
    /// position). It leaves the first layer norm's output unchanged and sets
    /// how large the visual residual stream is next to a latent offset.
    pub visual_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 48,
            n_layers: 4,
            n_heads: 4,
            grid: 8,
            vocab_size: crate::harness::vocab::VOCAB_SIZE,
            feat_dim: crate::harness::data::FEAT_DIM,
            max_seq: 96,
            seed: 7,
            init_std: 0.02,
            visual_gain: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_visual(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.grid == 0 || self.vocab_size == 0 || self.feat_dim == 0 {
            return bad("grid, vocab_size and feat_dim must be positive");
        }
        if self.max_seq <= self.n_visual() {
            return bad("max_seq must leave room for text after the visual prefix");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        if !(self.visual_gain > 0.0 && self.visual_gain.is_finite()) {
            return bad("visual_gain must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc1: Tensor,
    pub b_fc1: Tensor,
    pub w_fc2: Tensor,
    pub b_fc2: Tensor,
}

/// All weights of the model. Matrices are stored `[in, out]` and applied as
/// `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Seeded Gaussian initialization. Weight matrices and embeddings draw from
/// `N(0, init_std²)`; layer-norm gains start at one and all biases at zero.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut gauss = |shape: &[usize]| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    };
    let d = cfg.d_model;
    let hidden = 4 * d;
    let tok_emb = gauss(&[cfg.vocab_size, d]);
    let patch_proj = gauss(&[cfg.feat_dim, d]);
    let pos_emb = gauss(&[cfg.max_seq, d]);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            w_q: gauss(&[d, d]),
            w_k: gauss(&[d, d]),
            w_v: gauss(&[d, d]),
            w_o: gauss(&[d, d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w_fc1: gauss(&[d, hidden]),
            b_fc1: Tensor::zeros(&[hidden]),
            w_fc2: gauss(&[hidden, d]),
            b_fc2: Tensor::zeros(&[d]),
        })
        .collect();
    let head_w = gauss(&[d, cfg.vocab_size]);
    Ok(ModelParams {
        config: cfg.clone(),
        tok_emb,
        patch_proj,
        patch_bias: Tensor::zeros(&[d]),
        pos_emb,
        layers,
        lnf_gain: Tensor::ones(&[d]),
        lnf_bias: Tensor::zeros(&[d]),
        head_w,
        head_b: Tensor::zeros(&[cfg.vocab_size]),
    })
}

impl ModelParams {
    /// Every parameter block with a stable name, in canonical order.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("patch_proj".into(), &self.patch_proj),
            ("patch_bias".into(), &self.patch_bias),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.extend([
            ("lnf_gain".into(), &self.lnf_gain),
            ("lnf_bias".into(), &self.lnf_bias),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
        ]);
        out
    }

    /// Mutable view of [`blocks`](Self::blocks), same order.
    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.tok_emb,
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.pos_emb,
        ];
        for l in self.layers.iter_mut() {
            out.extend(l.named_mut());
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over block names, shapes and little-endian values, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.blocks() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Weight matrices and embeddings (the Gaussian-initialized blocks).
    pub fn weight_blocks(&self) -> Vec<&Tensor> {
        self.blocks()
            .into_iter()
            .filter(|(name, t)| t.shape().len() == 2 && !name.ends_with("gain"))
            .map(|(_, t)| t)
            .collect()
    }
}

impl LayerParams {
    fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_fc1", &self.w_fc1),
            ("b_fc1", &self.b_fc1),
            ("w_fc2", &self.w_fc2),
            ("b_fc2", &self.b_fc2),
        ]
    }

    fn named_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc1,
            &mut self.b_fc1,
            &mut self.w_fc2,
            &mut self.b_fc2,
        ]
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
