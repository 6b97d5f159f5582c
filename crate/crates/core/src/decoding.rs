//! Greedy generation in four flavours: plain, edit-attention, steered and
//! steered with prompt debiasing.
//!
//! Every step reruns the full forward over `[e_v ; prompt ; generated]`; the
//! sequences here are short enough that a key/value cache is not worth it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::SyntheticImage;
use crate::harness::vocab::{self, EOS};
use crate::model::{next_token_logits, AttentionBias, AttentionStack, ModelParams};
use crate::numcore::Tensor;
use crate::steering::{self, SteeringConfig, SteeringTrace};
use crate::visprompt::{rasterize, RegionMask, VisualPrompt};

/// Which decode steps receive the edit-attention bias.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSteps {
    #[default]
    FirstOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeMode {
    Plain,
    EditAttention { eta: f64, steps: BiasSteps },
    Steered { steering: SteeringConfig },
    SteeredDebias { steering: SteeringConfig, gamma: f64 },
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Plain => "plain",
            DecodeMode::EditAttention { .. } => "edit",
            DecodeMode::Steered { .. } => "steered",
            DecodeMode::SteeredDebias { .. } => "steered+debias",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    pub stop_token: usize,
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode) -> Self {
        Self {
            max_new_tokens: 4,
            mode,
            stop_token: EOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        match &self.mode {
            DecodeMode::EditAttention { eta, .. } if !eta.is_finite() => {
                Err(Error::InvalidConfig("eta must be finite".into()))
            }
            DecodeMode::Steered { steering } => steering.validate(),
            DecodeMode::SteeredDebias { steering, gamma } => {
                if !(*gamma >= 0.0) {
                    return Err(Error::InvalidConfig("gamma must be >= 0".into()));
                }
                steering.validate()
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Logits the choice was made from at each step (combined in debias mode).
    pub step_logits: Vec<Vec<f64>>,
    /// Debias mode only: the two branches, `(steered, unsteered)`.
    pub branch_logits: Option<Vec<(Vec<f64>, Vec<f64>)>>,
    /// Attention of the last forward pass.
    pub attn: AttentionStack,
    pub trace: Option<SteeringTrace>,
    pub latent: Option<Tensor>,
}

#[derive(Serialize)]
struct StepExport {
    top5: Vec<(usize, String, f64)>,
}

#[derive(Serialize)]
struct ResultExport<'a> {
    mode: &'static str,
    tokens: &'a [usize],
    text: String,
    steps: Vec<StepExport>,
    config: &'a DecodeConfig,
}

impl DecodeResult {
    pub fn text(&self) -> String {
        vocab::detokenize(&self.tokens)
    }

    /// JSON with the mode, tokens, detokenized text, per-step top-5 logits
    /// and the config.
    pub fn to_json(&self, cfg: &DecodeConfig) -> String {
        let steps = self
            .step_logits
            .iter()
            .map(|l| StepExport {
                top5: top_k(l, 5)
                    .into_iter()
                    .map(|i| (i, vocab::token_name(i), l[i]))
                    .collect(),
            })
            .collect();
        let export = ResultExport {
            mode: cfg.mode.name(),
            tokens: &self.tokens,
            text: self.text(),
            steps,
            config: cfg,
        };
        serde_json::to_string_pretty(&export).expect("decode result serializes")
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, descending, ties by lower index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `(1+γ)·s − γ·u`, written as `s + γ(s − u)` so that `γ = 0` and `s = u`
/// both give `s` exactly.
pub fn debias_logits(steered: &[f64], unsteered: &[f64], gamma: f64) -> Vec<f64> {
    steered
        .iter()
        .zip(unsteered)
        .map(|(&s, &u)| s + gamma * (s - u))
        .collect()
}

struct Decoder<'m> {
    model: &'m ModelParams,
    prompt_len: usize,
    seq: Vec<usize>,
    max_new: usize,
    stop: usize,
}

impl<'m> Decoder<'m> {
    fn new(model: &'m ModelParams, text: &[usize], max_new: usize, stop: usize) -> Result<Self> {
        if max_new == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(Self {
            model,
            prompt_len: text.len(),
            seq: text.to_vec(),
            max_new,
            stop,
        })
    }

    fn step(&self, e_v: &Tensor, bias: Option<&AttentionBias>) -> Result<(Vec<f64>, AttentionStack)> {
        let out = self.model.forward(e_v, &self.seq, self.prompt_len, bias)?;
        Ok((next_token_logits(&out).to_vec(), out.attn))
    }

    /// Appends `tok`; true when generation should stop.
    fn push(&mut self, tok: usize) -> bool {
        self.seq.push(tok);
        tok == self.stop || self.seq.len() - self.prompt_len >= self.max_new
    }

    fn generated(&self) -> Vec<usize> {
        self.seq[self.prompt_len..].to_vec()
    }
}

/// Argmax decoding with an optional latent added to the visual tokens.
pub fn greedy_decode(
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    max_new_tokens: usize,
    stop_token: usize,
    p_v: Option<&Tensor>,
) -> Result<DecodeResult> {
    let e_v = model.embed_image(image, p_v)?;
    let mut dec = Decoder::new(model, text, max_new_tokens, stop_token)?;
    let mut step_logits = Vec::new();
    loop {
        let (logits, attn) = dec.step(&e_v, None)?;
        let tok = argmax(&logits);
        step_logits.push(logits);
        if dec.push(tok) {
            return Ok(DecodeResult {
                tokens: dec.generated(),
                step_logits,
                branch_logits: None,
                attn,
                trace: None,
                latent: p_v.cloned(),
            });
        }
    }
}

/// Greedy decoding with `+η` added before the softmax on the key columns of
/// `region`, in every layer and for every query row, on the selected steps.
#[allow(clippy::too_many_arguments)]
pub fn edit_attention_decode(
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    region: &RegionMask,
    eta: f64,
    steps: BiasSteps,
    max_new_tokens: usize,
    stop_token: usize,
) -> Result<DecodeResult> {
    if region.grid() != model.config.grid {
        return Err(Error::InvalidConfig(format!(
            "region grid {} does not match model grid {}",
            region.grid(),
            model.config.grid
        )));
    }
    if !eta.is_finite() {
        return Err(Error::InvalidConfig("eta must be finite".into()));
    }
    let bias = AttentionBias {
        columns: region.indices(),
        eta,
    };
    let e_v = model.embed_image(image, None)?;
    let mut dec = Decoder::new(model, text, max_new_tokens, stop_token)?;
    let mut step_logits = Vec::new();
    loop {
        let biased = step_logits.is_empty() || steps == BiasSteps::All;
        let (logits, attn) = dec.step(&e_v, biased.then_some(&bias))?;
        let tok = argmax(&logits);
        step_logits.push(logits);
        if dec.push(tok) {
            return Ok(DecodeResult {
                tokens: dec.generated(),
                step_logits,
                branch_logits: None,
                attn,
                trace: None,
                latent: None,
            });
        }
    }
}

/// Contrastive decoding: at every step both the steered (with `p_v`) and the
/// unsteered branch see the same history, and the token is the argmax of
/// `(1+γ)·steered − γ·unsteered`.
pub fn prompt_debias_decode(
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    p_v: &Tensor,
    gamma: f64,
    max_new_tokens: usize,
    stop_token: usize,
) -> Result<DecodeResult> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig("gamma must be >= 0".into()));
    }
    let e_plain = model.embed_image(image, None)?;
    let e_steered = model.embed_image(image, Some(p_v))?;
    let mut dec = Decoder::new(model, text, max_new_tokens, stop_token)?;
    let mut step_logits = Vec::new();
    let mut branches = Vec::new();
    loop {
        let (s, attn) = dec.step(&e_steered, None)?;
        let (u, _) = dec.step(&e_plain, None)?;
        let combined = debias_logits(&s, &u, gamma);
        let tok = argmax(&combined);
        step_logits.push(combined);
        branches.push((s, u));
        if dec.push(tok) {
            return Ok(DecodeResult {
                tokens: dec.generated(),
                step_logits,
                branch_logits: Some(branches),
                attn,
                trace: None,
                latent: Some(p_v.clone()),
            });
        }
    }
}

/// Runs the full pipeline for `cfg.mode`, steering first where the mode
/// asks for it.
pub fn decode(
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    prompt: &VisualPrompt,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let (max_new, stop) = (cfg.max_new_tokens, cfg.stop_token);
    match &cfg.mode {
        DecodeMode::Plain => greedy_decode(model, image, text, max_new, stop, None),
        DecodeMode::EditAttention { eta, steps } => {
            let region = rasterize(prompt, model.config.grid)?;
            edit_attention_decode(model, image, text, &region, *eta, *steps, max_new, stop)
        }
        DecodeMode::Steered { steering } => {
            let (p_v, trace) = steering::steer(model, image, text, prompt, steering)?;
            let mut r = greedy_decode(model, image, text, max_new, stop, Some(&p_v.values))?;
            r.trace = Some(trace);
            Ok(r)
        }
        DecodeMode::SteeredDebias { steering, gamma } => {
            let (p_v, trace) = steering::steer(model, image, text, prompt, steering)?;
            let mut r = prompt_debias_decode(model, image, text, &p_v.values, *gamma, max_new, stop)?;
            r.trace = Some(trace);
            Ok(r)
        }
    }
}
