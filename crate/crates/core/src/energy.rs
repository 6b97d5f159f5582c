//! Attention aggregation and the mask energies.
//!
//! The model's attention stack is pooled into one `g × g` map over the
//! visual tokens, either from every text-prompt query row (context token)
//! or from the answer-start row alone. The energy then measures how much of
//! that map's mass falls outside the referred region:
//!
//! * hard: `(1 − Σ_{i∈r} Aᵢ / Σᵢ Aᵢ)²`
//! * soft: `(1 − clamp(Σᵢ wᵢAᵢ / Σᵢ Aᵢ))²` with Gaussian weights `w`
//!
//! Sums run over visual tokens only. Everything here is differentiable back
//! to the visual-token embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::SyntheticImage;
use crate::model::{forward_graph, AttentionStack, ModelParams, ParamVars, SeqLayout};
use crate::numcore::{Graph, Tensor, Var};
use crate::visprompt::{
    cell_center, distance_transform, distance_transform_points, rasterize, soft_weight_map, PromptKind, RegionMask,
    SoftWeightMap, VisualPrompt,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Mean over all text-prompt query rows.
    ContextToken,
    /// The answer-start query row only.
    AnswerStart,
}

/// Which attention rows and layers are pooled. Heads are always averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub mode: AggregationMode,
    /// Inclusive layer window.
    pub layer_start: usize,
    pub layer_end: usize,
}

impl AggregationSpec {
    /// Context token over every layer.
    pub fn context_token(n_layers: usize) -> Self {
        Self {
            mode: AggregationMode::ContextToken,
            layer_start: 0,
            layer_end: n_layers.saturating_sub(1),
        }
    }

    /// Answer-start row over the middle half of the decoder,
    /// `[⌈L/4⌉, ⌊3L/4⌋]`.
    pub fn answer_start(n_layers: usize) -> Self {
        let end = 3 * n_layers / 4;
        let start = n_layers.div_ceil(4).min(end);
        Self {
            mode: AggregationMode::AnswerStart,
            layer_start: start,
            layer_end: end,
        }
    }

    pub fn default_for(mode: AggregationMode, n_layers: usize) -> Self {
        match mode {
            AggregationMode::ContextToken => Self::context_token(n_layers),
            AggregationMode::AnswerStart => Self::answer_start(n_layers),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer_start > self.layer_end || self.layer_end >= n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer window [{}, {}] invalid for {n_layers} layers",
                self.layer_start, self.layer_end
            )));
        }
        Ok(())
    }

    /// Query rows pooled under this spec.
    pub fn rows(&self, layout: &SeqLayout) -> Vec<usize> {
        match self.mode {
            AggregationMode::ContextToken => layout.text().collect(),
            AggregationMode::AnswerStart => vec![layout.answer_start()],
        }
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.layer_start..=self.layer_end
    }
}

/// Pools recorded attention into a `[g, g]` map over visual tokens.
pub fn aggregate(attn: &AttentionStack, spec: &AggregationSpec) -> Result<Tensor> {
    spec.validate(attn.n_layers())?;
    let layout = &attn.layout;
    if layout.n_text == 0 {
        return Err(Error::InvalidConfig("attention layout has no text tokens".into()));
    }
    let rows = spec.rows(layout);
    let n_v = layout.n_visual;
    let mut out = vec![0.0; n_v];
    let mut count = 0usize;
    for l in spec.layers() {
        for map in &attn.maps[l] {
            for &r in &rows {
                for (o, v) in out.iter_mut().zip(&map.row(r)[..n_v]) {
                    *o += v;
                }
                count += 1;
            }
        }
    }
    let inv = 1.0 / count as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    let g = (n_v as f64).sqrt().round() as usize;
    Tensor::new(vec![g, g], out)
}

/// Differentiable twin of [`aggregate`]; output `[1, n_v]`.
pub fn aggregate_var(g: &mut Graph<'_>, attn: &[Vec<Var>], layout: &SeqLayout, spec: &AggregationSpec) -> Result<Var> {
    spec.validate(attn.len())?;
    let inputs: Vec<Var> = spec.layers().flat_map(|l| attn[l].iter().copied()).collect();
    g.pool_rows(&inputs, &spec.rows(layout), 0, layout.n_visual)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyValue {
    pub value: f64,
    /// The ratio inside the square, before any clamping.
    pub mass_ratio: f64,
}

/// What the energy pulls attention towards.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Hard(RegionMask),
    Soft(SoftWeightMap),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    Hard,
    Soft,
    /// Hard for boxes and masks, soft for scribbles and points.
    #[default]
    Auto,
}

impl Target {
    pub fn from_prompt(prompt: &VisualPrompt, grid: usize, mode: EnergyMode, sigma: f64, normalized: bool) -> Result<Self> {
        let hard = match mode {
            EnergyMode::Hard => true,
            EnergyMode::Soft => false,
            EnergyMode::Auto => prompt.kind().is_region(),
        };
        if hard {
            return Ok(Target::Hard(rasterize(prompt, grid)?));
        }
        let d = match prompt.kind() {
            PromptKind::Scribble | PromptKind::Point => distance_transform(prompt, grid)?,
            PromptKind::Box | PromptKind::Mask => {
                // distance to the nearest cell of the rasterized region
                let r = rasterize(prompt, grid)?;
                let pts: Vec<[f64; 2]> = r
                    .indices()
                    .into_iter()
                    .map(|i| cell_center(grid, i / grid, i % grid))
                    .collect();
                distance_transform_points(&pts, grid)?
            }
        };
        Ok(Target::Soft(soft_weight_map(&d, sigma, normalized)?))
    }

    pub fn grid(&self) -> usize {
        match self {
            Target::Hard(r) => r.grid(),
            Target::Soft(w) => w.grid(),
        }
    }

    fn weights(&self) -> Vec<f64> {
        match self {
            Target::Hard(r) => r.indicator(),
            Target::Soft(w) => w.weights.data().to_vec(),
        }
    }

    fn clamps(&self) -> bool {
        matches!(self, Target::Soft(w) if !w.normalized)
    }
}

/// Energy of an aggregated map on the graph. Returns `(energy, ratio)`.
pub fn energy_var(g: &mut Graph<'_>, map: Var, target: &Target) -> Result<(Var, Var)> {
    let weights = target.weights();
    if g.value(map).len() != weights.len() {
        return Err(Error::Shape {
            op: "energy",
            left: g.value(map).shape().to_vec(),
            right: vec![target.grid(), target.grid()],
        });
    }
    let total = g.sum(map)?;
    if g.value(total).item() == 0.0 {
        return Err(Error::ZeroMass);
    }
    let inside = g.weighted_sum(map, &weights)?;
    let ratio = g.div(inside, total)?;
    let r = if target.clamps() { g.clamp(ratio, 0.0, 1.0)? } else { ratio };
    let gap = g.affine(r, -1.0, 1.0)?;
    Ok((g.square(gap)?, ratio))
}

fn check_map(a: &Tensor) -> Result<()> {
    if a.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidConfig("attention map must be non-negative".into()));
    }
    Ok(())
}

fn eval_energy(a: &Tensor, target: &Target) -> Result<EnergyValue> {
    check_map(a)?;
    let mut g = Graph::new();
    let m = g.leaf_ref(a, false);
    let (e, r) = energy_var(&mut g, m, target)?;
    Ok(EnergyValue {
        value: g.value(e).item(),
        mass_ratio: g.value(r).item(),
    })
}

/// `(1 − in-region mass / total mass)²`.
pub fn hard_energy(a: &Tensor, region: &RegionMask) -> Result<EnergyValue> {
    eval_energy(a, &Target::Hard(region.clone()))
}

/// `(1 − clamp(Σ wᵢAᵢ / Σ Aᵢ))²`; the clamp is only active for raw weights.
pub fn soft_energy(a: &Tensor, weights: &SoftWeightMap) -> Result<EnergyValue> {
    eval_energy(a, &Target::Soft(weights.clone()))
}

/// One steering objective: a frozen model, one image and question, and a
/// target. The base visual embedding is computed once; each evaluation adds
/// the latent and runs a full forward (and optionally backward) pass.
pub struct EnergyProblem<'m> {
    pub model: &'m ModelParams,
    base: Tensor,
    text: Vec<usize>,
    pub target: Target,
    pub spec: AggregationSpec,
}

/// Result of one evaluation at a given latent.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub energy: EnergyValue,
    /// Gradient of `scale · E` with respect to the latent.
    pub grad: Option<Tensor>,
    /// Logits at the answer-start position.
    pub logits: Vec<f64>,
    /// Aggregated `[g, g]` attention map.
    pub map: Tensor,
}

impl<'m> EnergyProblem<'m> {
    pub fn new(
        model: &'m ModelParams,
        image: &SyntheticImage,
        text: &[usize],
        target: Target,
        spec: AggregationSpec,
    ) -> Result<Self> {
        spec.validate(model.config.n_layers)?;
        if target.grid() != model.config.grid {
            return Err(Error::InvalidConfig(format!(
                "target grid {} does not match model grid {}",
                target.grid(),
                model.config.grid
            )));
        }
        Ok(Self {
            model,
            base: model.embed_image(image, None)?,
            text: text.to_vec(),
            target,
            spec,
        })
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.base.rows(), self.base.cols()]
    }

    pub fn text(&self) -> &[usize] {
        &self.text
    }

    pub fn base_embedding(&self) -> &Tensor {
        &self.base
    }

    /// Forward at `p_v`; with `want_grad` also backpropagates `scale · E`.
    pub fn evaluate(&self, p_v: &Tensor, scale: f64, want_grad: bool) -> Result<Evaluation> {
        if p_v.shape() != self.base.shape() {
            return Err(Error::Shape {
                op: "energy_gradient",
                left: self.base.shape().to_vec(),
                right: p_v.shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let pv = ParamVars::register(&mut g, self.model, false);
        let base = g.leaf_ref(&self.base, false);
        let lat = g.leaf_ref(p_v, want_grad);
        let e_v = g.add(base, lat)?;
        let out = forward_graph(&mut g, &self.model.config, &pv, e_v, &self.text, self.text.len(), None)?;
        let map = aggregate_var(&mut g, &out.attn, &out.layout, &self.spec)?;
        let (e, r) = energy_var(&mut g, map, &self.target)?;
        let energy = EnergyValue {
            value: g.value(e).item(),
            mass_ratio: g.value(r).item(),
        };
        let logits = g.value(out.logits).row(out.layout.seq_len - 1).to_vec();
        let grid = self.model.config.grid;
        let map = g.value(map).clone().reshape(&[grid, grid])?;
        let grad = if want_grad {
            let loss = if scale == 1.0 { e } else { g.scale(e, scale)? };
            g.backward(loss)?;
            Some(g.grad(lat).unwrap_or_else(|| Tensor::zeros(p_v.shape())))
        } else {
            None
        };
        Ok(Evaluation {
            energy,
            grad,
            logits,
            map,
        })
    }
}

/// `∇_{p_v} E` through one forward and one backward pass.
pub fn energy_gradient(
    p_v: &Tensor,
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    target: &Target,
    spec: &AggregationSpec,
) -> Result<Tensor> {
    let problem = EnergyProblem::new(model, image, text, target.clone(), *spec)?;
    let ev = problem.evaluate(p_v, 1.0, true)?;
    Ok(ev.grad.expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SeqLayout;

    fn layout(n_v: usize, n_t: usize) -> SeqLayout {
        SeqLayout {
            n_visual: n_v,
            n_text: n_t,
            seq_len: n_v + n_t,
        }
    }

    fn quarter_region() -> RegionMask {
        rasterize(&VisualPrompt::Box { coords: [0.0, 0.0, 0.5, 0.5] }, 8).unwrap()
    }

    #[test]
    fn answer_start_window_is_middle_half() {
        assert_eq!(AggregationSpec::answer_start(32).layers(), 8..=24);
        assert_eq!(AggregationSpec::answer_start(4).layers(), 1..=3);
        assert_eq!(AggregationSpec::answer_start(2).layers(), 1..=1);
        assert_eq!(AggregationSpec::answer_start(1).layers(), 0..=0);
        assert_eq!(AggregationSpec::context_token(4).layers(), 0..=3);
    }

    #[test]
    fn empty_or_out_of_range_window_rejected() {
        let spec = AggregationSpec {
            mode: AggregationMode::ContextToken,
            layer_start: 2,
            layer_end: 1,
        };
        assert!(spec.validate(4).is_err());
        assert!(AggregationSpec::context_token(4).validate(3).is_err());
    }

    #[test]
    fn degenerate_pool_is_the_row_slice() {
        // 1 layer, 1 head, 4 visual tokens, 1 text token
        let l = layout(4, 1);
        let mut m = Tensor::zeros(&[5, 5]);
        let row = [0.1, 0.2, 0.3, 0.15, 0.25];
        m.data_mut()[20..25].copy_from_slice(&row);
        let stack = AttentionStack {
            maps: vec![vec![m]],
            layout: l,
        };
        let a = aggregate(&stack, &AggregationSpec::context_token(1)).unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a.data(), &row[..4]);
    }

    #[test]
    fn hard_energy_cases() {
        let r = quarter_region();
        let uniform = Tensor::full(&[8, 8], 1.0 / 64.0);
        let e = hard_energy(&uniform, &r).unwrap();
        assert!((e.value - 0.5625).abs() < 1e-15);

        let mut inside = Tensor::zeros(&[8, 8]);
        inside.data_mut()[0] = 0.7;
        assert_eq!(hard_energy(&inside, &r).unwrap().value, 0.0);

        let mut half = Tensor::zeros(&[8, 8]);
        half.data_mut()[0] = 0.3;
        half.data_mut()[63] = 0.3;
        assert!((hard_energy(&half, &r).unwrap().value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_mass_is_an_error() {
        let z = Tensor::zeros(&[8, 8]);
        assert!(matches!(hard_energy(&z, &quarter_region()), Err(Error::ZeroMass)));
    }

    #[test]
    fn soft_energy_cases() {
        let ones = SoftWeightMap {
            weights: Tensor::ones(&[8, 8]),
            sigma: f64::INFINITY,
            normalized: true,
        };
        let a = Tensor::full(&[8, 8], 0.01);
        assert_eq!(soft_energy(&a, &ones).unwrap().value, 0.0);

        let mut w = Tensor::zeros(&[8, 8]);
        w.data_mut()[10] = 0.5;
        let half = SoftWeightMap {
            weights: w,
            sigma: 0.1,
            normalized: true,
        };
        let mut a = Tensor::zeros(&[8, 8]);
        a.data_mut()[10] = 0.4;
        assert!((soft_energy(&a, &half).unwrap().value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn raw_weights_clamp_ratio() {
        let raw = SoftWeightMap {
            weights: Tensor::full(&[2, 2], 3.9),
            sigma: 0.1,
            normalized: false,
        };
        let a = Tensor::full(&[2, 2], 0.1);
        let e = soft_energy(&a, &raw).unwrap();
        assert!(e.mass_ratio > 1.0);
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn auto_mode_picks_energy_by_prompt_kind() {
        let b = VisualPrompt::Box { coords: [0.0, 0.0, 0.5, 0.5] };
        let p = VisualPrompt::Point { point: [0.5, 0.5] };
        assert!(matches!(Target::from_prompt(&b, 8, EnergyMode::Auto, 0.1, true).unwrap(), Target::Hard(_)));
        assert!(matches!(Target::from_prompt(&p, 8, EnergyMode::Auto, 0.1, true).unwrap(), Target::Soft(_)));
        assert!(matches!(Target::from_prompt(&p, 8, EnergyMode::Hard, 0.1, true).unwrap(), Target::Hard(_)));
        match Target::from_prompt(&b, 8, EnergyMode::Soft, 0.1, true).unwrap() {
            Target::Soft(w) => assert_eq!(w.weights.get2(0, 0), 1.0),
            _ => panic!("expected soft target"),
        }
    }
}
