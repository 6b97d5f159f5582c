use std::ops::Range;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::harness::data::SyntheticImage;
use crate::numcore::{Graph, RowMask, Tensor, Var};

/// Where each segment of the input sequence sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub n_visual: usize,
    /// Length of the text prompt (generated tokens excluded).
    pub n_text: usize,
    pub seq_len: usize,
}

impl SeqLayout {
    pub fn visual(&self) -> Range<usize> {
        0..self.n_visual
    }

    pub fn text(&self) -> Range<usize> {
        self.n_visual..self.n_visual + self.n_text
    }

    /// The last prompt position: its logits produce the first answer token.
    pub fn answer_start(&self) -> usize {
        self.n_visual + self.n_text - 1
    }
}

/// Post-softmax attention of one forward pass, `maps[layer][head]`, each
/// `seq × seq`.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub maps: Vec<Vec<Tensor>>,
    pub layout: SeqLayout,
}

impl AttentionStack {
    pub fn n_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn n_heads(&self) -> usize {
        self.maps.first().map_or(0, |l| l.len())
    }
}

/// Additive pre-softmax bias of `eta` on a fixed set of key columns, applied
/// to every query row in every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias {
    pub columns: Vec<usize>,
    pub eta: f64,
}

impl AttentionBias {
    fn row(&self, seq_len: usize) -> Tensor {
        let mut t = Tensor::zeros(&[1, seq_len]);
        for &c in &self.columns {
            if c < seq_len {
                t.data_mut()[c] = self.eta;
            }
        }
        t
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// `[seq, vocab]`
    pub logits: Tensor,
    pub attn: AttentionStack,
}

/// Logits at the final position.
pub fn next_token_logits(result: &ForwardResult) -> &[f64] {
    let rows = result.logits.rows();
    result.logits.row(rows - 1)
}

pub struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w_fc1: Var,
    b_fc1: Var,
    w_fc2: Var,
    b_fc2: Var,
}

/// Model parameters registered as leaves of one graph.
pub struct ParamVars {
    tok_emb: Var,
    patch_proj: Var,
    patch_bias: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    lnf_gain: Var,
    lnf_bias: Var,
    head_w: Var,
    head_b: Var,
    /// Same order as [`ModelParams::blocks`].
    pub all: Vec<Var>,
}

impl ParamVars {
    /// Borrows every block onto `g`. With `requires_grad = false` the model
    /// is a constant and backward skips all parameter gradients.
    pub fn register<'a>(g: &mut Graph<'a>, params: &'a ModelParams, requires_grad: bool) -> Self {
        let all: Vec<Var> = params
            .blocks()
            .into_iter()
            .map(|(_, t)| g.leaf_ref(t, requires_grad))
            .collect();
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("block count");
        let tok_emb = next();
        let patch_proj = next();
        let patch_bias = next();
        let pos_emb = next();
        let layers = (0..params.layers.len())
            .map(|_| LayerVars {
                ln1_gain: next(),
                ln1_bias: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w_fc1: next(),
                b_fc1: next(),
                w_fc2: next(),
                b_fc2: next(),
            })
            .collect();
        let lnf_gain = next();
        let lnf_bias = next();
        let head_w = next();
        let head_b = next();
        Self {
            tok_emb,
            patch_proj,
            patch_bias,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            head_w,
            head_b,
            all,
        }
    }

    /// Visual-token embeddings on the graph: per-cell projection plus
    /// positional embedding, times `gain`. `features` is `[n_v, feat_dim]`.
    pub fn embed_image(&self, g: &mut Graph<'_>, features: Var, gain: f64) -> Result<Var> {
        let n_v = g.value(features).rows();
        let proj = g.matmul(features, self.patch_proj)?;
        let proj = g.add_row_bias(proj, self.patch_bias)?;
        let ids: Vec<usize> = (0..n_v).collect();
        let pos = g.gather_rows(self.pos_emb, &ids)?;
        let e = g.add(proj, pos)?;
        if gain == 1.0 {
            Ok(e)
        } else {
            g.scale(e, gain)
        }
    }
}

/// Differentiable handles from [`forward_graph`].
pub struct ForwardVars {
    pub logits: Var,
    pub attn: Vec<Vec<Var>>,
    pub layout: SeqLayout,
}

/// Runs the decoder on `[e_v ; text]`. `e_v` already carries its positional
/// embedding; text tokens get positions `n_v..`. `prompt_len` only sets the
/// layout metadata (tokens after it are generated ones).
pub fn forward_graph(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    e_v: Var,
    text: &[usize],
    prompt_len: usize,
    bias: Option<&AttentionBias>,
) -> Result<ForwardVars> {
    let n_v = g.value(e_v).rows();
    let seq_len = n_v + text.len();
    if seq_len > cfg.max_seq {
        return Err(Error::SequenceOverflow {
            len: seq_len,
            max: cfg.max_seq,
        });
    }
    if text.is_empty() || prompt_len == 0 || prompt_len > text.len() {
        return Err(Error::InvalidConfig(format!(
            "prompt length {prompt_len} invalid for {} text tokens",
            text.len()
        )));
    }
    if let Some(&bad) = text.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidConfig(format!("token id {bad} outside vocabulary")));
    }
    let layout = SeqLayout {
        n_visual: n_v,
        n_text: prompt_len,
        seq_len,
    };

    let pos_ids: Vec<usize> = (n_v..seq_len).collect();
    let e_t = embed_text(g, pv, text, &pos_ids)?;
    let x = g.concat_rows(&[e_v, e_t])?;
    let (logits, attn) = decoder(g, cfg, pv, x, &RowMask::causal(n_v), bias)?;
    Ok(ForwardVars { logits, attn, layout })
}

/// Handles from [`forward_packed_graph`].
pub struct PackedVars {
    /// `[n_v + Σ len, vocab]`
    pub logits: Var,
    /// Row of each segment's first token.
    pub offsets: Vec<usize>,
}

/// Runs several texts after one shared visual prefix in a single pass. Each
/// segment attends to the prefix and to itself only and takes positions
/// `n_v..`, so its rows are exactly those of a separate [`forward_graph`]
/// call on `[e_v ; text]`.
pub fn forward_packed_graph(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    e_v: Var,
    texts: &[&[usize]],
) -> Result<PackedVars> {
    let n_v = g.value(e_v).rows();
    let mut tokens = Vec::new();
    let mut pos_ids = Vec::new();
    let mut offsets = Vec::with_capacity(texts.len());
    for t in texts {
        if t.is_empty() {
            return Err(Error::InvalidConfig("empty text segment".into()));
        }
        if n_v + t.len() > cfg.max_seq {
            return Err(Error::SequenceOverflow {
                len: n_v + t.len(),
                max: cfg.max_seq,
            });
        }
        if let Some(&bad) = t.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::InvalidConfig(format!("token id {bad} outside vocabulary")));
        }
        offsets.push(n_v + tokens.len());
        tokens.extend_from_slice(t);
        pos_ids.extend(n_v..n_v + t.len());
    }
    let e_t = embed_text(g, pv, &tokens, &pos_ids)?;
    let x = g.concat_rows(&[e_v, e_t])?;
    let lens: Vec<usize> = texts.iter().map(|t| t.len()).collect();
    let (logits, _) = decoder(g, cfg, pv, x, &RowMask::segments(n_v, &lens), None)?;
    Ok(PackedVars { logits, offsets })
}

fn embed_text(g: &mut Graph<'_>, pv: &ParamVars, tokens: &[usize], pos_ids: &[usize]) -> Result<Var> {
    let tok = g.gather_rows(pv.tok_emb, tokens)?;
    let pos = g.gather_rows(pv.pos_emb, pos_ids)?;
    g.add(tok, pos)
}

/// The transformer blocks, final norm and output head.
fn decoder(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    mut x: Var,
    mask: &RowMask,
    bias: Option<&AttentionBias>,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let seq_len = g.value(x).rows();
    let bias_var = bias.map(|b| g.constant(b.row(seq_len)));
    let d_k = cfg.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut attn = Vec::with_capacity(pv.layers.len());

    for lv in &pv.layers {
        let h = g.layernorm(x, lv.ln1_gain, lv.ln1_bias)?;
        let q = g.matmul(h, lv.w_q)?;
        let k = g.matmul(h, lv.w_k)?;
        let v = g.matmul(h, lv.w_v)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut maps = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * d_k, d_k)?;
            let kh = g.slice_cols(k, head * d_k, d_k)?;
            let vh = g.slice_cols(v, head * d_k, d_k)?;
            let scores = g.matmul_bt(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(b) = bias_var {
                scores = g.add_row_bias(scores, b)?;
            }
            let a = g.softmax_rows_masked(scores, mask)?;
            maps.push(a);
            heads.push(g.matmul(a, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let o = g.matmul(o, lv.w_o)?;
        x = g.add(x, o)?;

        let h2 = g.layernorm(x, lv.ln2_gain, lv.ln2_bias)?;
        let m = g.matmul(h2, lv.w_fc1)?;
        let m = g.add_row_bias(m, lv.b_fc1)?;
        let m = g.gelu(m)?;
        let m = g.matmul(m, lv.w_fc2)?;
        let m = g.add_row_bias(m, lv.b_fc2)?;
        x = g.add(x, m)?;
        attn.push(maps);
    }

    let hf = g.layernorm(x, pv.lnf_gain, pv.lnf_bias)?;
    let logits = g.matmul(hf, pv.head_w)?;
    let logits = g.add_row_bias(logits, pv.head_b)?;
    Ok((logits, attn))
}

impl ModelParams {
    /// Visual-token embeddings `[n_v, d_model]`: cell projection plus
    /// position, plus the latent modifier when one is given.
    pub fn embed_image(&self, image: &SyntheticImage, p_v: Option<&Tensor>) -> Result<Tensor> {
        let cfg = &self.config;
        if image.grid != cfg.grid || image.features.cols() != cfg.feat_dim {
            return Err(Error::Shape {
                op: "embed_image",
                left: vec![cfg.grid, cfg.grid, cfg.feat_dim],
                right: vec![image.grid, image.grid, image.features.cols()],
            });
        }
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, self, false);
        let f = g.leaf_ref(&image.features, false);
        let e = pv.embed_image(&mut g, f, cfg.visual_gain)?;
        let base = g.value(e).clone();
        match p_v {
            None => Ok(base),
            Some(p) => {
                if p.shape() != base.shape() {
                    return Err(Error::Shape {
                        op: "embed_image(p_v)",
                        left: base.shape().to_vec(),
                        right: p.shape().to_vec(),
                    });
                }
                base.add(p)
            }
        }
    }

    /// Gradient-free forward pass that returns logits and attention.
    pub fn forward(
        &self,
        e_v: &Tensor,
        text: &[usize],
        prompt_len: usize,
        bias: Option<&AttentionBias>,
    ) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, self, false);
        let ev = g.leaf_ref(e_v, false);
        let out = forward_graph(&mut g, &self.config, &pv, ev, text, prompt_len, bias)?;
        Ok(collect_result(&g, &out))
    }
}

pub(crate) fn collect_result(g: &Graph<'_>, out: &ForwardVars) -> ForwardResult {
    ForwardResult {
        logits: g.value(out.logits).clone(),
        attn: AttentionStack {
            maps: out
                .attn
                .iter()
                .map(|l| l.iter().map(|&a| g.value(a).clone()).collect())
                .collect(),
            layout: out.layout,
        },
    }
}
