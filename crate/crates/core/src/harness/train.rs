//! Next-token training of the toy model on the synthetic images.
//!
//! Each image yields two kinds of sequences, with loss only on the answer
//! positions:
//!
//! * captions, `<bos> object at <region> is` → `<color> <shape> <eos>`, one
//!   per object whose coarse region is unambiguous;
//! * questions, `<bos> object is A or B ?` → `<answer> <eos>`, answered with
//!   whichever candidate covers more cells. Even-numbered questions pair a
//!   present shape with an absent one; odd-numbered ones pair two present
//!   shapes of different area when the image has them.
//!
//! Questions teach the answer position to weigh how much of each candidate
//! it sees. Evaluation asks about two present objects without saying which
//! is meant, so an unsteered model answers with the more prominent one and
//! only steering its attention onto the referred region changes that.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::vocab::{self, EOS, N_SHAPES};
use crate::error::{Error, Result};
use crate::model::{forward_packed_graph, ModelParams, ParamVars};
use crate::numcore::{Graph, Tensor};
use crate::par::{self, Exec};
use crate::steering::AdamState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Two-choice questions drawn per image.
    pub questions_per_image: usize,
    /// Global gradient-norm clip; `0` disables it.
    pub clip_norm: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 2,
            lr: 1e-3,
            seed: 7,
            questions_per_image: 2,
            clip_norm: 1.0,
            exec: Exec::Parallel,
        }
    }
}

/// One training sequence over the image of `dataset.samples[sample]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub sample: usize,
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    pub examples: usize,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean over the last 5% of steps (at least one).
    pub fn final_loss(&self) -> Option<f64> {
        if self.losses.is_empty() {
            return None;
        }
        let k = (self.losses.len() / 20).max(1);
        let tail = &self.losses[self.losses.len() - k..];
        Some(tail.iter().sum::<f64>() / k as f64)
    }
}

/// Builds the caption and question sequences for every image.
pub fn build_examples(dataset: &Dataset, questions_per_image: usize, seed: u64) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let grid = dataset.grid;
    let mut out = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let objs = &s.image.objects;
        for (j, o) in objs.iter().enumerate() {
            let region = o.region(grid);
            if objs.iter().enumerate().any(|(k, p)| k != j && p.region(grid) == region) {
                continue;
            }
            let mut tokens = vocab::caption_prompt(region);
            let prompt_len = tokens.len();
            tokens.extend([vocab::color_token(o.color), vocab::shape_token(o.shape), EOS]);
            out.push(TrainExample {
                sample: i,
                tokens,
                prompt_len,
            });
        }
        let area = |shape: usize| -> usize {
            objs.iter().filter(|o| o.shape == shape).map(|o| o.height * o.width).sum()
        };
        let present: Vec<usize> = objs.iter().map(|o| o.shape).collect();
        let absent: Vec<usize> = (0..N_SHAPES).filter(|sh| !present.contains(sh)).collect();
        let mut unequal = Vec::new();
        for (x, &a) in present.iter().enumerate() {
            for &b in &present[x + 1..] {
                if area(a) != area(b) {
                    unequal.push((a, b));
                }
            }
        }
        for q in 0..questions_per_image {
            let (a, b) = if q % 2 == 1 && !unequal.is_empty() {
                unequal[rng.random_range(0..unequal.len())]
            } else {
                let p = present[rng.random_range(0..present.len())];
                (p, absent[rng.random_range(0..absent.len())])
            };
            let answer = if area(a) > area(b) { a } else { b };
            let (a, b) = if rng.random::<bool>() { (a, b) } else { (b, a) };
            let mut tokens = vocab::question(a, b);
            let prompt_len = tokens.len();
            tokens.extend([vocab::shape_token(answer), EOS]);
            out.push(TrainExample {
                sample: i,
                tokens,
                prompt_len,
            });
        }
    }
    out
}

/// Mean next-token cross-entropy over the answer positions of `examples`,
/// which must all share one image and are run as one packed forward pass;
/// optionally also the gradient for every parameter block.
pub fn image_loss(
    params: &ModelParams,
    dataset: &Dataset,
    examples: &[&TrainExample],
    want_grad: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let sample = examples
        .first()
        .ok_or_else(|| Error::InvalidConfig("no examples to score".into()))?
        .sample;
    if examples.iter().any(|e| e.sample != sample) {
        return Err(Error::InvalidConfig("packed examples must share one image".into()));
    }
    let image = &dataset.samples[sample].image;
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params, want_grad);
    let f = g.leaf_ref(&image.features, false);
    let e_v = pv.embed_image(&mut g, f, params.config.visual_gain)?;
    let inputs: Vec<&[usize]> = examples.iter().map(|e| &e.tokens[..e.tokens.len() - 1]).collect();
    let out = forward_packed_graph(&mut g, &params.config, &pv, e_v, &inputs)?;
    let mut targets = Vec::new();
    for (ex, &off) in examples.iter().zip(&out.offsets) {
        targets.extend((ex.prompt_len..ex.tokens.len()).map(|j| (off + j - 1, ex.tokens[j])));
    }
    let loss = g.cross_entropy(out.logits, &targets)?;
    let value = g.value(loss).item();
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = pv
        .all
        .iter()
        .zip(params.blocks())
        .map(|(&v, (_, t))| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

fn group_by_image(examples: &[TrainExample]) -> Vec<Vec<&TrainExample>> {
    let mut groups: Vec<Vec<&TrainExample>> = Vec::new();
    for ex in examples {
        match groups.last_mut() {
            Some(gr) if gr[0].sample == ex.sample => gr.push(ex),
            _ => groups.push(vec![ex]),
        }
    }
    groups
}

/// Trains `params` with Adam. One step consumes `batch_size` images, each
/// with all of its sequences. Returns the updated parameters and the loss
/// curve; zero epochs returns them untouched.
pub fn train_toy(params: &ModelParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("training lr must be > 0".into()));
    }
    if dataset.grid != params.config.grid {
        return Err(Error::InvalidConfig(format!(
            "dataset grid {} does not match model grid {}",
            dataset.grid, params.config.grid
        )));
    }
    let mut params = params.clone();
    let examples = build_examples(dataset, cfg.questions_per_image, cfg.seed);
    let groups = group_by_image(&examples);
    let mut report = TrainReport {
        losses: Vec::new(),
        examples: examples.len(),
    };
    if cfg.epochs == 0 || groups.is_empty() {
        return Ok((params, report));
    }
    let mut states: Vec<AdamState> = params.blocks().iter().map(|(_, t)| AdamState::new(t.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = report.losses.len();
            let results = par::try_map_indexed(cfg.exec, batch.len(), |i| {
                image_loss(&params, dataset, &groups[batch[i]], true)
            })?;
            let n = batch.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Vec<f64>> = params.blocks().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            for (l, gs) in &results {
                loss += l / n;
                for (acc, gt) in grads.iter_mut().zip(gs) {
                    for (a, v) in acc.iter_mut().zip(gt.data()) {
                        *a += v / n;
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            if cfg.clip_norm > 0.0 {
                let norm = grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
                if norm > cfg.clip_norm {
                    let c = cfg.clip_norm / norm;
                    grads.iter_mut().flatten().for_each(|v| *v *= c);
                }
            }
            for ((block, st), gr) in params.blocks_mut().into_iter().zip(&mut states).zip(&grads) {
                st.step(block.data_mut(), gr, cfg.lr, 0.9, 0.999, 1e-8);
            }
            report.losses.push(loss);
        }
    }
    Ok((params, report))
}

/// Mean per-image loss over a dataset without updating anything.
pub fn mean_loss(params: &ModelParams, dataset: &Dataset, examples: &[TrainExample], exec: Exec) -> Result<f64> {
    let groups = group_by_image(examples);
    let losses = par::try_map_indexed(exec, groups.len(), |i| {
        image_loss(params, dataset, &groups[i], false).map(|(l, _)| l)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::gen_dataset;
    use crate::model::{init_model, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            grid: 4,
            max_seq: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn examples_answer_only_present_shapes() {
        let d = gen_dataset(30, 1, 8).unwrap();
        for ex in build_examples(&d, 2, 3) {
            let objs = &d.samples[ex.sample].image.objects;
            let answer = ex.tokens[ex.tokens.len() - 2];
            assert_eq!(*ex.tokens.last().unwrap(), EOS);
            if vocab::is_shape_token(answer) {
                assert!(objs.iter().any(|o| vocab::shape_token(o.shape) == answer));
            }
        }
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let p = init_model(&tiny()).unwrap();
        let d = gen_dataset(4, 1, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (q, r) = train_toy(&p, &d, &cfg).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(r.steps(), 0);
    }

    #[test]
    fn loss_positive_and_decreasing_on_tiny_model() {
        let p = init_model(&tiny()).unwrap();
        let d = gen_dataset(8, 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 4,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let (_, r) = train_toy(&p, &d, &cfg).unwrap();
        assert!(r.losses.iter().all(|&l| l > 0.0));
        assert!(r.final_loss().unwrap() < r.initial_loss().unwrap());
    }

    #[test]
    fn parallel_and_sequential_training_agree() {
        let p = init_model(&tiny()).unwrap();
        let d = gen_dataset(4, 3, 4).unwrap();
        let mut cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (a, _) = train_toy(&p, &d, &cfg).unwrap();
        cfg.exec = Exec::Sequential;
        let (b, _) = train_toy(&p, &d, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }
}
