//! Test-time optimization of the latent visual modifier.
//!
//! Two loops share one evaluation routine ([`EnergyProblem::evaluate`]):
//!
//! * [`steer_gd`]: gradient descent `p ← p − α∇E` on the context-token map,
//!   with the iterate smoothed by an exponential moving average and an
//!   optional early stop.
//! * [`steer_adam`]: Adam on `α·E` over the answer-start map in the middle
//!   layers, with bias correction and no smoothing or early stop.
//!
//! Both start from a zero latent, record one trace entry per evaluation
//! (iteration 0 included) and leave the model untouched.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::energy::{AggregationMode, AggregationSpec, EnergyMode, EnergyProblem, Evaluation, Target};
use crate::error::{Error, Result};
use crate::harness::data::SyntheticImage;
use crate::model::ModelParams;
use crate::numcore::Tensor;
use crate::visprompt::{VisualPrompt, DEFAULT_SIGMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub enabled: bool,
    /// Stop once the energy drops below this.
    pub energy_threshold: f64,
    /// Stop once the relative improvement over the previous iterate is
    /// smaller than this.
    pub min_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            enabled: true,
            energy_threshold: 0.2,
            min_improvement: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub optimizer: Optimizer,
    /// Number of updates, `T`.
    pub iterations: usize,
    /// Energy scale `α`.
    pub alpha: f64,
    /// EMA decay on the iterate (gradient descent only).
    pub beta: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Contrast weight for prompt debiasing.
    pub gamma: f64,
    pub sigma: f64,
    /// Peak-normalize the soft weights.
    pub soft_normalized: bool,
    pub early_stop: EarlyStop,
    pub aggregation: AggregationMode,
    /// Explicit inclusive layer window; `None` uses the mode's default.
    pub layers: Option<(usize, usize)>,
    pub energy_mode: EnergyMode,
}

impl SteeringConfig {
    /// Gradient descent with EMA and early stop: `T=5, α=400, β=0.5`.
    pub fn gd() -> Self {
        Self {
            optimizer: Optimizer::Gd,
            iterations: 5,
            alpha: 400.0,
            beta: 0.5,
            lr: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            gamma: 0.7,
            sigma: DEFAULT_SIGMA,
            soft_normalized: true,
            early_stop: EarlyStop::default(),
            aggregation: AggregationMode::ContextToken,
            layers: None,
            energy_mode: EnergyMode::Auto,
        }
    }

    /// Adam on the answer-start map: `T=3, α=400, lr=0.03, γ=0.7`.
    pub fn adam() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            iterations: 3,
            early_stop: EarlyStop {
                enabled: false,
                ..EarlyStop::default()
            },
            aggregation: AggregationMode::AnswerStart,
            ..Self::gd()
        }
    }

    pub fn for_optimizer(opt: Optimizer) -> Self {
        match opt {
            Optimizer::Gd => Self::gd(),
            Optimizer::Adam => Self::adam(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1)");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be > 0");
        }
        Ok(())
    }

    pub fn aggregation_spec(&self, n_layers: usize) -> Result<AggregationSpec> {
        let spec = match self.layers {
            Some((start, end)) => AggregationSpec {
                mode: self.aggregation,
                layer_start: start,
                layer_end: end,
            },
            None => AggregationSpec::default_for(self.aggregation, n_layers),
        };
        spec.validate(n_layers)?;
        Ok(spec)
    }

    pub fn target(&self, prompt: &VisualPrompt, grid: usize) -> Result<Target> {
        Target::from_prompt(prompt, grid, self.energy_mode, self.sigma, self.soft_normalized)
    }

    /// Builds the objective this config optimizes for one sample.
    pub fn problem<'m>(
        &self,
        model: &'m ModelParams,
        image: &SyntheticImage,
        text: &[usize],
        prompt: &VisualPrompt,
    ) -> Result<EnergyProblem<'m>> {
        self.validate()?;
        let spec = self.aggregation_spec(model.config.n_layers)?;
        let target = self.target(prompt, model.config.grid)?;
        EnergyProblem::new(model, image, text, target, spec)
    }
}

/// The learnable additive offset on the visual tokens, `[n_v, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentModifier {
    pub values: Tensor,
}

impl LatentModifier {
    pub fn zeros(n_visual: usize, d_model: usize) -> Self {
        Self {
            values: Tensor::zeros(&[n_visual, d_model]),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.norm()
    }
}

/// Adam moments for one latent.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place:
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
    /// m̂ = m/(1−β₁ᵗ)            v̂ = v/(1−β₂ᵗ)
    /// p ← p − lr·m̂/(√v̂ + ε)
    /// ```
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StopReason {
    MaxIters,
    EnergyThreshold,
    NoImprovement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub energy: f64,
    pub mass_ratio: f64,
    /// Norm of the gradient used for the update at this iterate.
    pub grad_norm: f64,
    pub p_v_norm: f64,
    /// Answer-start logits at this iterate.
    #[serde(skip)]
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SteeringTrace {
    pub records: Vec<IterRecord>,
    pub stop_reason: StopReason,
    /// Index into `records` of the returned latent.
    pub chosen: usize,
    pub initial_map: Tensor,
    pub final_map: Tensor,
}

impl SteeringTrace {
    pub fn initial(&self) -> &IterRecord {
        &self.records[0]
    }

    /// The record belonging to the returned latent.
    pub fn final_record(&self) -> &IterRecord {
        &self.records[self.chosen]
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iter,energy,mass_ratio,grad_norm,p_v_norm")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{},{}", r.iter, r.energy, r.mass_ratio, r.grad_norm, r.p_v_norm)?;
        }
        Ok(())
    }
}

/// Aggregate over many traces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub count: usize,
    pub mean_initial_energy: f64,
    pub mean_final_energy: f64,
    pub stop_reasons: BTreeMap<String, usize>,
}

pub fn summarize_traces<'a>(traces: impl IntoIterator<Item = &'a SteeringTrace>) -> TraceSummary {
    let mut s = TraceSummary::default();
    for t in traces {
        s.count += 1;
        s.mean_initial_energy += t.initial().energy;
        s.mean_final_energy += t.final_record().energy;
        *s.stop_reasons.entry(format!("{:?}", t.stop_reason)).or_default() += 1;
    }
    if s.count > 0 {
        s.mean_initial_energy /= s.count as f64;
        s.mean_final_energy /= s.count as f64;
    }
    s
}

fn record(iter: usize, ev: &Evaluation, p: &Tensor) -> IterRecord {
    IterRecord {
        iter,
        energy: ev.energy.value,
        mass_ratio: ev.energy.mass_ratio,
        grad_norm: ev.grad.as_ref().map_or(0.0, Tensor::norm),
        p_v_norm: p.norm(),
        logits: ev.logits.clone(),
    }
}

/// Gradient descent with iterate EMA:
/// `u = p − α∇E`, `p ← βp + (1−β)u`.
///
/// With early stopping on, the loop ends as soon as the energy falls below
/// the threshold or improves by less than the relative minimum; in the
/// latter case the lower-energy of the last two iterates is returned.
pub fn steer_gd_problem(problem: &EnergyProblem<'_>, cfg: &SteeringConfig) -> Result<(LatentModifier, SteeringTrace)> {
    cfg.validate()?;
    let [n_v, d] = problem.latent_shape();
    let mut p = Tensor::zeros(&[n_v, d]);
    let mut prev_p = p.clone();
    let mut records = Vec::with_capacity(cfg.iterations + 1);
    let mut maps = Vec::with_capacity(cfg.iterations + 1);
    let mut stop = StopReason::MaxIters;
    let mut chosen;
    let mut it = 0;
    loop {
        let ev = problem.evaluate(&p, 1.0, true)?;
        records.push(record(it, &ev, &p));
        maps.push(ev.map.clone());
        chosen = it;
        if it == cfg.iterations {
            break;
        }
        if cfg.early_stop.enabled {
            let e = ev.energy.value;
            if e < cfg.early_stop.energy_threshold {
                stop = StopReason::EnergyThreshold;
                break;
            }
            if it > 0 {
                let e_prev = records[it - 1].energy;
                if (e_prev - e) / e_prev.max(1e-12) < cfg.early_stop.min_improvement {
                    stop = StopReason::NoImprovement;
                    if e_prev < e {
                        chosen = it - 1;
                        p = prev_p;
                    }
                    break;
                }
            }
        }
        let grad = ev.grad.expect("gradient requested");
        prev_p = p.clone();
        for (pi, gi) in p.data_mut().iter_mut().zip(grad.data()) {
            let u = *pi - cfg.alpha * gi;
            *pi = cfg.beta * *pi + (1.0 - cfg.beta) * u;
        }
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("latent after GD step {}", it + 1)));
        }
        it += 1;
    }
    let trace = SteeringTrace {
        initial_map: maps[0].clone(),
        final_map: maps[chosen].clone(),
        records,
        stop_reason: stop,
        chosen,
    };
    Ok((LatentModifier { values: p }, trace))
}

/// Adam on `α·E` for `T` steps, `t` starting at 1.
pub fn steer_adam_problem(problem: &EnergyProblem<'_>, cfg: &SteeringConfig) -> Result<(LatentModifier, SteeringTrace)> {
    cfg.validate()?;
    let [n_v, d] = problem.latent_shape();
    let mut p = Tensor::zeros(&[n_v, d]);
    let mut state = AdamState::new(p.len());
    let mut records = Vec::with_capacity(cfg.iterations + 1);
    let mut maps = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..=cfg.iterations {
        let ev = problem.evaluate(&p, cfg.alpha, true)?;
        records.push(record(it, &ev, &p));
        maps.push(ev.map.clone());
        if it == cfg.iterations {
            break;
        }
        let grad = ev.grad.expect("gradient requested");
        state.step(p.data_mut(), grad.data(), cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("latent after Adam step {}", it + 1)));
        }
    }
    let chosen = records.len() - 1;
    let trace = SteeringTrace {
        initial_map: maps[0].clone(),
        final_map: maps[chosen].clone(),
        records,
        stop_reason: StopReason::MaxIters,
        chosen,
    };
    Ok((LatentModifier { values: p }, trace))
}

pub fn steer_gd(
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    prompt: &VisualPrompt,
    cfg: &SteeringConfig,
) -> Result<(LatentModifier, SteeringTrace)> {
    steer_gd_problem(&cfg.problem(model, image, text, prompt)?, cfg)
}

pub fn steer_adam(
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    prompt: &VisualPrompt,
    cfg: &SteeringConfig,
) -> Result<(LatentModifier, SteeringTrace)> {
    steer_adam_problem(&cfg.problem(model, image, text, prompt)?, cfg)
}

/// Dispatches on `cfg.optimizer`.
pub fn steer(
    model: &ModelParams,
    image: &SyntheticImage,
    text: &[usize],
    prompt: &VisualPrompt,
    cfg: &SteeringConfig,
) -> Result<(LatentModifier, SteeringTrace)> {
    match cfg.optimizer {
        Optimizer::Gd => steer_gd(model, image, text, prompt, cfg),
        Optimizer::Adam => steer_adam(model, image, text, prompt, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut st = AdamState::new(3);
        let mut p = vec![0.0; 3];
        let g = [2.5, -0.3, 1e3];
        st.step(&mut p, &g, 0.03, 0.9, 0.999, 1e-8);
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.03 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
            assert!((pi + 0.03 * gi.signum()).abs() < 1e-8);
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(4);
        let mut p = vec![0.0; 4];
        for _ in 0..5 {
            st.step(&mut p, &[0.0; 4], 0.03, 0.9, 0.999, 1e-8);
        }
        assert_eq!(p, vec![0.0; 4]);
        assert!(st.v.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn config_defaults() {
        let gd = SteeringConfig::gd();
        assert_eq!((gd.iterations, gd.alpha, gd.beta), (5, 400.0, 0.5));
        assert!(gd.early_stop.enabled);
        let adam = SteeringConfig::adam();
        assert_eq!((adam.iterations, adam.alpha, adam.lr, adam.gamma), (3, 400.0, 0.03, 0.7));
        assert_eq!(adam.aggregation, AggregationMode::AnswerStart);
        assert!(!adam.early_stop.enabled);
    }

    #[test]
    fn config_validation() {
        let mut c = SteeringConfig::gd();
        c.beta = 1.0;
        assert!(c.validate().is_err());
        let mut c = SteeringConfig::gd();
        c.alpha = 0.0;
        assert!(c.validate().is_err());
        let mut c = SteeringConfig::adam();
        c.gamma = -0.1;
        assert!(c.validate().is_err());
    }
}
