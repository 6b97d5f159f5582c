mod common;

use attnsteer::decoding::{
    decode, edit_attention_decode, greedy_decode, prompt_debias_decode, BiasSteps, DecodeConfig, DecodeMode,
};
use attnsteer::harness::vocab::EOS;
use attnsteer::numcore::Tensor;
use attnsteer::steering::SteeringConfig;
use attnsteer::visprompt::{rasterize, VisualPrompt};
use proptest::prelude::*;

fn quarter() -> VisualPrompt {
    VisualPrompt::Box { coords: [0.0, 0.0, 0.5, 0.5] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_eta_equals_plain(seed in 0u64..10_000) {
        let model = common::small_model(2, 2, 4, 16, seed);
        let image = common::noise_image(4, seed);
        let text = common::question(seed);
        let region = rasterize(&quarter(), 4).unwrap();
        let plain = greedy_decode(&model, &image, &text, 4, EOS, None).unwrap();
        let edit = edit_attention_decode(&model, &image, &text, &region, 0.0, BiasSteps::All, 4, EOS).unwrap();
        prop_assert_eq!(&plain.tokens, &edit.tokens);
        prop_assert_eq!(plain.step_logits, edit.step_logits);
    }

    #[test]
    fn zero_latent_is_bit_exact(seed in 0u64..10_000) {
        let model = common::small_model(2, 2, 4, 16, seed);
        let image = common::noise_image(4, seed);
        let text = common::question(seed);
        let zero = Tensor::zeros(&[16, 16]);
        let with = greedy_decode(&model, &image, &text, 3, EOS, Some(&zero)).unwrap();
        let without = greedy_decode(&model, &image, &text, 3, EOS, None).unwrap();
        prop_assert_eq!(&with.tokens, &without.tokens);
        for (a, b) in with.step_logits.iter().zip(&without.step_logits) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn zero_gamma_equals_steered(seed in 0u64..10_000, scale in 0.1f64..3.0) {
        let model = common::small_model(2, 2, 4, 16, seed);
        let image = common::noise_image(4, seed);
        let text = common::question(seed);
        let mut rng = common::rng(seed);
        let p_v = common::gaussian(&[16, 16], scale, &mut rng);
        let steered = greedy_decode(&model, &image, &text, 4, EOS, Some(&p_v)).unwrap();
        let debiased = prompt_debias_decode(&model, &image, &text, &p_v, 0.0, 4, EOS).unwrap();
        prop_assert_eq!(&steered.tokens, &debiased.tokens);
        prop_assert_eq!(steered.step_logits, debiased.step_logits);
    }
}

#[test]
fn large_eta_concentrates_attention_in_region() {
    let model = common::small_model(2, 2, 4, 16, 21);
    let image = common::noise_image(4, 21);
    let text = common::question(21);
    let region = rasterize(&quarter(), 4).unwrap();
    let cols = region.indices();
    let out = edit_attention_decode(&model, &image, &text, &region, 50.0, BiasSteps::FirstOnly, 1, EOS).unwrap();
    let layout = out.attn.layout;
    for layer in &out.attn.maps {
        for map in layer {
            for r in layout.text() {
                let row = map.row(r);
                let inside: f64 = cols.iter().map(|&c| row[c]).sum();
                assert!(inside > 0.99, "row {r}: {inside}");
            }
        }
    }
}

#[test]
fn decode_respects_budget_and_stop_token() {
    let model = common::small_model(2, 2, 4, 16, 22);
    let image = common::noise_image(4, 22);
    let text = common::question(22);
    for max in 1..5 {
        let r = greedy_decode(&model, &image, &text, max, EOS, None).unwrap();
        assert!(r.tokens.len() <= max);
        if let Some(i) = r.tokens.iter().position(|&t| t == EOS) {
            assert_eq!(i, r.tokens.len() - 1);
        }
        assert_eq!(r.step_logits.len(), r.tokens.len());
    }
}

#[test]
fn every_mode_leaves_model_untouched() {
    let model = common::small_model(2, 2, 4, 16, 23);
    let before = model.checksum();
    let image = common::noise_image(4, 23);
    let text = common::question(23);
    let modes = [
        DecodeMode::Plain,
        DecodeMode::EditAttention {
            eta: 10.0,
            steps: BiasSteps::All,
        },
        DecodeMode::Steered {
            steering: SteeringConfig::gd(),
        },
        DecodeMode::SteeredDebias {
            steering: SteeringConfig::adam(),
            gamma: 0.7,
        },
    ];
    for mode in modes {
        let cfg = DecodeConfig::new(mode);
        let r = decode(&model, &image, &text, &quarter(), &cfg).unwrap();
        assert_eq!(model.checksum(), before);
        let json: serde_json::Value = serde_json::from_str(&r.to_json(&cfg)).unwrap();
        assert_eq!(json["mode"], cfg.mode.name());
        assert_eq!(json["tokens"].as_array().unwrap().len(), r.tokens.len());
    }
}

#[test]
fn debias_branches_are_recorded() {
    let model = common::small_model(2, 2, 4, 16, 24);
    let image = common::noise_image(4, 24);
    let text = common::question(24);
    let p_v = common::gaussian(&[16, 16], 1.0, &mut common::rng(24));
    let r = prompt_debias_decode(&model, &image, &text, &p_v, 0.7, 3, EOS).unwrap();
    let branches = r.branch_logits.as_ref().unwrap();
    assert_eq!(branches.len(), r.step_logits.len());
    for ((s, u), c) in branches.iter().zip(&r.step_logits) {
        for i in 0..c.len() {
            assert!((c[i] - (1.7 * s[i] - 0.7 * u[i])).abs() < 1e-9);
        }
    }
}
