//! Referring-object classification over a dataset, per decoding mode.
//!
//! The prediction for a sample is whichever of its two candidate tokens
//! scores higher at the first answer step (ties go to the lower token id).
//! Steered modes read those logits from the steering trace at the returned
//! latent, which is the same forward pass greedy decoding would run.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::data::{Dataset, RocSample};
use crate::decoding::debias_logits;
use crate::error::{Error, Result};
use crate::model::{next_token_logits, AttentionBias, ModelParams};
use crate::par::{self, Exec};
use crate::steering::{self, SteeringConfig, SteeringTrace, StopReason};
use crate::visprompt::{rasterize, PromptKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "edit")]
    EditAttention,
    #[serde(rename = "gd")]
    SteeredGd,
    #[serde(rename = "adam")]
    SteeredAdam,
    #[serde(rename = "adam+debias")]
    SteeredAdamDebias,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Plain,
        EvalMode::EditAttention,
        EvalMode::SteeredGd,
        EvalMode::SteeredAdam,
        EvalMode::SteeredAdamDebias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Plain => "plain",
            EvalMode::EditAttention => "edit",
            EvalMode::SteeredGd => "gd",
            EvalMode::SteeredAdam => "adam",
            EvalMode::SteeredAdamDebias => "adam+debias",
        }
    }

    pub fn is_steered(self) -> bool {
        matches!(self, EvalMode::SteeredGd | EvalMode::SteeredAdam | EvalMode::SteeredAdamDebias)
    }

    /// Parses a comma-separated list such as `plain,edit,adam+debias`.
    pub fn parse_list(s: &str) -> Result<Vec<EvalMode>> {
        let modes = s
            .split(',')
            .map(str::trim)
            .filter(|m| !m.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if modes.is_empty() {
            return Err(Error::InvalidConfig("no evaluation modes given".into()));
        }
        Ok(modes)
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub modes: Vec<EvalMode>,
    pub gd: SteeringConfig,
    pub adam: SteeringConfig,
    /// Edit-attention bias.
    pub eta: f64,
    pub exec: Exec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: EvalMode::ALL.to_vec(),
            gd: SteeringConfig::gd(),
            adam: SteeringConfig::adam(),
            eta: 10.0,
            exec: Exec::Parallel,
        }
    }
}

/// What one mode did on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: usize,
    pub kind: PromptKind,
    pub predicted: usize,
    pub correct: bool,
    /// Steered modes only.
    pub steering: Option<SteeringOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringOutcome {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Share of aggregated attention on the referred object, before and
    /// after steering.
    pub mass_before: f64,
    pub mass_after: f64,
    pub stop_reason: StopReason,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringStats {
    pub mean_initial_energy: f64,
    pub mean_final_energy: f64,
    pub mean_mass_before: f64,
    pub mean_mass_after: f64,
    /// Share of samples whose final energy is below the initial one.
    pub energy_decreased: f64,
    /// Share of samples whose in-region mass went up.
    pub mass_increased: f64,
    pub stop_reasons: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: EvalMode,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub by_kind: BTreeMap<PromptKind, KindStats>,
    pub steering: Option<SteeringStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub model_checksum: String,
    pub dataset_digest: String,
    pub modes: Vec<ModeReport>,
    /// Per-mode, per-sample outcomes in dataset order.
    pub outcomes: BTreeMap<EvalMode, Vec<SampleOutcome>>,
    /// Not serialized, so reports from identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl EvalReport {
    pub fn mode(&self, mode: EvalMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn accuracy(&self, mode: EvalMode) -> Option<f64> {
        self.mode(mode).map(|m| m.accuracy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The pick between the two candidates; ties go to the lower token id.
pub fn choose(logits: &[f64], a: usize, b: usize) -> usize {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if logits[hi] > logits[lo] {
        hi
    } else {
        lo
    }
}

fn region_mass(map: &[f64], cells: &[usize]) -> f64 {
    let total: f64 = map.iter().sum();
    cells.iter().map(|&i| map[i]).sum::<f64>() / total
}

fn steering_outcome(trace: &SteeringTrace, cells: &[usize]) -> SteeringOutcome {
    SteeringOutcome {
        initial_energy: trace.initial().energy,
        final_energy: trace.final_record().energy,
        mass_before: region_mass(trace.initial_map.data(), cells),
        mass_after: region_mass(trace.final_map.data(), cells),
        stop_reason: trace.stop_reason,
        iterations: trace.chosen,
    }
}

fn eval_sample(model: &ModelParams, s: &RocSample, cfg: &EvalConfig) -> Result<Vec<SampleOutcome>> {
    let cells = s.image.objects[s.target].cells(s.image.grid);
    let base = model.embed_image(&s.image, None)?;
    let q = &s.question;
    let mut plain: Option<Vec<f64>> = None;
    let mut adam: Option<(Vec<f64>, SteeringOutcome)> = None;
    let mut out = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let mut plain_logits = || -> Result<Vec<f64>> {
            if plain.is_none() {
                let r = model.forward(&base, q, q.len(), None)?;
                plain = Some(next_token_logits(&r).to_vec());
            }
            Ok(plain.clone().expect("set above"))
        };
        let (logits, steering) = match mode {
            EvalMode::Plain => (plain_logits()?, None),
            EvalMode::EditAttention => {
                let region = rasterize(&s.prompt, model.config.grid)?;
                let bias = AttentionBias {
                    columns: region.indices(),
                    eta: cfg.eta,
                };
                let r = model.forward(&base, q, q.len(), Some(&bias))?;
                (next_token_logits(&r).to_vec(), None)
            }
            EvalMode::SteeredGd => {
                let (_, trace) = steering::steer(model, &s.image, q, &s.prompt, &cfg.gd)?;
                (trace.final_record().logits.clone(), Some(steering_outcome(&trace, &cells)))
            }
            EvalMode::SteeredAdam | EvalMode::SteeredAdamDebias => {
                if adam.is_none() {
                    let (_, trace) = steering::steer(model, &s.image, q, &s.prompt, &cfg.adam)?;
                    adam = Some((trace.final_record().logits.clone(), steering_outcome(&trace, &cells)));
                }
                let (steered, so) = adam.clone().expect("set above");
                let logits = if mode == EvalMode::SteeredAdamDebias {
                    debias_logits(&steered, &plain_logits()?, cfg.adam.gamma)
                } else {
                    steered
                };
                (logits, Some(so))
            }
        };
        let predicted = choose(&logits, s.answer_a, s.answer_b);
        out.push(SampleOutcome {
            id: s.id,
            kind: s.prompt.kind(),
            predicted,
            correct: predicted == s.truth,
            steering,
        });
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn summarize(mode: EvalMode, outcomes: &[SampleOutcome]) -> ModeReport {
    let total = outcomes.len();
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let mut by_kind: BTreeMap<PromptKind, KindStats> = BTreeMap::new();
    for o in outcomes {
        let k = by_kind.entry(o.kind).or_default();
        k.total += 1;
        k.correct += o.correct as usize;
    }
    for k in by_kind.values_mut() {
        k.accuracy = k.correct as f64 / k.total as f64;
    }
    let st: Vec<&SteeringOutcome> = outcomes.iter().filter_map(|o| o.steering.as_ref()).collect();
    let steering = (!st.is_empty()).then(|| {
        let mut stop_reasons = BTreeMap::new();
        for s in &st {
            *stop_reasons.entry(format!("{:?}", s.stop_reason)).or_default() += 1;
        }
        let n = st.len() as f64;
        SteeringStats {
            mean_initial_energy: mean(st.iter().map(|s| s.initial_energy)),
            mean_final_energy: mean(st.iter().map(|s| s.final_energy)),
            mean_mass_before: mean(st.iter().map(|s| s.mass_before)),
            mean_mass_after: mean(st.iter().map(|s| s.mass_after)),
            energy_decreased: st.iter().filter(|s| s.final_energy < s.initial_energy).count() as f64 / n,
            mass_increased: st.iter().filter(|s| s.mass_after > s.mass_before).count() as f64 / n,
            stop_reasons,
        }
    });
    ModeReport {
        mode,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        by_kind,
        steering,
    }
}

/// Evaluates every requested mode on every sample. Samples are independent
/// and fan out according to `cfg.exec`.
pub fn eval_roc(model: &ModelParams, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.modes.is_empty() {
        return Err(Error::InvalidConfig("no evaluation modes given".into()));
    }
    if !cfg.eta.is_finite() {
        return Err(Error::InvalidConfig("eta must be finite".into()));
    }
    cfg.gd.validate()?;
    cfg.adam.validate()?;
    let start = Instant::now();
    let per_sample = par::try_map_indexed(cfg.exec, dataset.len(), |i| eval_sample(model, &dataset.samples[i], cfg))?;
    let mut outcomes: BTreeMap<EvalMode, Vec<SampleOutcome>> = BTreeMap::new();
    for sample in per_sample {
        for (mode, o) in cfg.modes.iter().zip(sample) {
            outcomes.entry(*mode).or_default().push(o);
        }
    }
    let mut seen = Vec::new();
    let modes = cfg
        .modes
        .iter()
        .filter(|m| {
            let new = !seen.contains(*m);
            seen.push(**m);
            new
        })
        .map(|&m| summarize(m, &outcomes[&m]))
        .collect();
    Ok(EvalReport {
        samples: dataset.len(),
        model_checksum: model.checksum(),
        dataset_digest: dataset.digest(),
        modes,
        outcomes,
        wall_clock: start.elapsed(),
    })
}

/// One row of the step-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub iter: usize,
    pub accuracy: f64,
    pub mean_energy: f64,
}

/// Runs `base` (early stop forced off) at every `alpha` and reports the
/// accuracy and mean energy after each iteration.
pub fn alpha_sweep(
    model: &ModelParams,
    dataset: &Dataset,
    base: &SteeringConfig,
    alphas: &[f64],
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        let mut cfg = base.clone();
        cfg.alpha = alpha;
        cfg.early_stop.enabled = false;
        cfg.validate()?;
        let traces = par::try_map_indexed(exec, dataset.len(), |i| {
            let s = &dataset.samples[i];
            steering::steer(model, &s.image, &s.question, &s.prompt, &cfg).map(|(_, t)| t)
        })?;
        for iter in 0..=cfg.iterations {
            let mut correct = 0;
            let mut energy = 0.0;
            for (s, t) in dataset.samples.iter().zip(&traces) {
                let r = &t.records[iter];
                correct += (choose(&r.logits, s.answer_a, s.answer_b) == s.truth) as usize;
                energy += r.energy;
            }
            let n = dataset.len().max(1) as f64;
            rows.push(SweepRow {
                alpha,
                iter,
                accuracy: correct as f64 / n,
                mean_energy: energy / n,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "alpha,iter,accuracy,mean_energy")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.alpha, r.iter, r.accuracy, r.mean_energy)?;
    }
    Ok(())
}
