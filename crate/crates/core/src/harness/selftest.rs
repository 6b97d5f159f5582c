//! Quick runtime checks of the gradients and formulas against scalar
//! reimplementations, for the `selftest` command.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::{SyntheticImage, FEAT_DIM};
use super::vocab;
use crate::decoding::greedy_decode;
use crate::energy::{hard_energy, soft_energy, AggregationMode, AggregationSpec, EnergyMode, EnergyProblem, Target};
use crate::error::Result;
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::numcore::{finite_difference_at, relative_error, Tensor, DEFAULT_STEP};
use crate::par::Exec;
use crate::steering::AdamState;
use crate::visprompt::{distance_transform, rasterize, soft_weight_map, VisualPrompt, DEFAULT_SIGMA};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

fn small_model(seed: u64) -> Result<ModelParams> {
    init_model(&ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 1,
        grid: 4,
        max_seq: 32,
        seed,
        init_std: 0.3,
        ..ModelConfig::default()
    })
}

fn gradients(seeds: u64) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model = small_model(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = SyntheticImage {
            grid: 4,
            objects: Vec::new(),
            features: gaussian(&[16, FEAT_DIM], 1.0, &mut rng),
        };
        let text = vocab::question(0, 1);
        let p = gaussian(&[16, 16], 0.1, &mut rng);
        let prompts = [
            (EnergyMode::Hard, VisualPrompt::Box { coords: [0.0, 0.25, 0.5, 1.0] }),
            (EnergyMode::Soft, VisualPrompt::Point { point: [0.7, 0.2] }),
        ];
        for (mode, prompt) in &prompts {
            for agg in [AggregationMode::ContextToken, AggregationMode::AnswerStart] {
                let target = Target::from_prompt(prompt, 4, *mode, DEFAULT_SIGMA, true)?;
                let problem = EnergyProblem::new(&model, &image, &text, target, AggregationSpec::default_for(agg, 2))?;
                let analytic = problem.evaluate(&p, 1.0, true)?.grad.expect("gradient requested");
                let coords = sample(&mut rng, p.len(), 20).into_vec();
                let f = |t: &Tensor| problem.evaluate(t, 1.0, false).map_or(f64::NAN, |e| e.energy.value);
                let numeric = finite_difference_at(&f, &p, DEFAULT_STEP, &coords, Exec::Parallel);
                for (&c, n) in coords.iter().zip(numeric) {
                    let e = relative_error(analytic.data()[c], n);
                    worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
                }
            }
        }
    }
    Ok(Check {
        name: "energy gradient vs finite differences",
        pass: worst < 1e-4,
        detail: format!("max relative error {worst:.2e} (tol 1e-4)"),
    })
}

fn energies() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let grid = rng.random_range(3..9);
        let a = Tensor::new(vec![grid, grid], (0..grid * grid).map(|_| rng.random::<f64>() + 1e-3).collect())?;
        let region = rasterize(&VisualPrompt::Box { coords: [0.0, 0.0, 0.5, 0.5] }, grid)?;
        let (mut inside, mut total) = (0.0, 0.0);
        for (i, v) in a.data().iter().enumerate() {
            let (cx, cy) = (((i % grid) as f64 + 0.5) / grid as f64, ((i / grid) as f64 + 0.5) / grid as f64);
            if cx <= 0.5 && cy <= 0.5 {
                inside += v;
            }
            total += v;
        }
        worst = worst.max((hard_energy(&a, &region)?.value - (1.0 - inside / total).powi(2)).abs());

        let pt = [rng.random::<f64>(), rng.random::<f64>()];
        let w = soft_weight_map(&distance_transform(&VisualPrompt::Point { point: pt }, grid)?, 0.2, true)?;
        let mut num = 0.0;
        for (i, v) in a.data().iter().enumerate() {
            let (cx, cy) = (((i % grid) as f64 + 0.5) / grid as f64, ((i / grid) as f64 + 0.5) / grid as f64);
            let d2 = (pt[0] - cx).powi(2) + (pt[1] - cy).powi(2);
            num += (-d2 / (2.0 * 0.04)).exp() * v;
        }
        worst = worst.max((soft_energy(&a, &w)?.value - (1.0 - num / total).powi(2)).abs());
    }
    Ok(Check {
        name: "hard and soft energy vs scalar formulas",
        pass: worst < 1e-12,
        detail: format!("max abs error {worst:.1e} on 400 maps (tol 1e-12)"),
    })
}

fn adam() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut st = AdamState::new(1);
    let mut p = [0.5];
    let (mut q, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for t in 1..=100 {
        let g = rng.random_range(-2.0..2.0);
        st.step(&mut p, &[g], 0.03, 0.9, 0.999, 1e-8);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powf(t as f64));
        let v_hat = v / (1.0 - 0.999f64.powf(t as f64));
        q -= 0.03 * m_hat / (v_hat.sqrt() + 1e-8);
        worst = worst.max((p[0] - q).abs());
    }
    Check {
        name: "Adam vs scalar recursion",
        pass: worst < 1e-12,
        detail: format!("max abs error {worst:.1e} over 100 steps (tol 1e-12)"),
    }
}

fn zero_latent() -> Result<Check> {
    let model = small_model(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = SyntheticImage {
        grid: 4,
        objects: Vec::new(),
        features: gaussian(&[16, FEAT_DIM], 1.0, &mut rng),
    };
    let text = vocab::question(2, 3);
    let zero = Tensor::zeros(&[16, 16]);
    let a = greedy_decode(&model, &image, &text, 3, vocab::EOS, None)?;
    let b = greedy_decode(&model, &image, &text, 3, vocab::EOS, Some(&zero))?;
    let same = a.tokens == b.tokens
        && a.step_logits.iter().flatten().zip(b.step_logits.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(Check {
        name: "zero latent leaves logits unchanged",
        pass: same,
        detail: if same { "bit-identical".into() } else { "logits differ".into() },
    })
}

/// Runs every check; an `Err` means a check could not run at all.
pub fn run() -> Result<Vec<Check>> {
    Ok(vec![gradients(3)?, energies()?, adam(), zero_latent()?])
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run().unwrap() {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }
}
