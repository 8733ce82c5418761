mod common;

use common::{jitter, masked_gap, random_image, reference_analysis};
use lpmc::attention::PromptMode;
use lpmc::backbone::{analysis, init_backbone, Prompts};
use lpmc::config::ModelConfig;
use lpmc::lpm::{encoder_prompts, init_prompt_set, NormMode};
use lpmc::params::ParamStore;
use lpmc::tensor::Tape;

#[test]
fn masked_prompts_reproduce_plain_window_attention() {
    let cfg = ModelConfig::desk();
    for seed in 0..3 {
        let gap = masked_gap(&cfg, seed, 64);
        assert!(gap <= 1e-6, "image {seed}: {gap:e}");
    }
}

#[test]
fn masked_equivalence_holds_through_shifted_layers() {
    let cfg = ModelConfig {
        depths: vec![2, 2, 2, 2],
        ..common::tiny_config()
    };
    let gap = masked_gap(&cfg, 9, 128);
    assert!(gap <= 1e-6, "{gap:e}");
}

#[test]
fn active_prompts_change_the_latent() {
    let cfg = common::tiny_config();
    let backbone: ParamStore<f64> = init_backbone(&cfg, 1).unwrap();
    let mut prompts: ParamStore<f64> = init_prompt_set(&cfg, 2).unwrap();
    jitter(&mut prompts, 3, 0.2);
    let img = random_image(4, 64, 64);
    let tape = Tape::<f64>::inference();
    let (b, p) = (backbone.bind(&tape), prompts.bind(&tape));
    let x = tape.constant(img.to_tensor());
    let grids = encoder_prompts(&cfg, &p, &x, NormMode::Eval, &mut Vec::new()).unwrap();
    let y_active = analysis(
        &cfg,
        &b,
        &x,
        Some(Prompts {
            grids: &grids,
            mode: PromptMode::Active,
        }),
    )
    .unwrap()
    .0;
    let y_plain = reference_analysis(&cfg, &backbone, &img.to_tensor());
    assert!(y_active.to_tensor().max_abs_diff(&y_plain) > 1e-3);
}

#[test]
fn zero_prompts_are_not_a_no_op() {
    // Zero prompt keys still take softmax mass, so a fresh prompt set only
    // approximates the plain backbone; masking is what makes it exact.
    let cfg = common::tiny_config();
    let backbone: ParamStore<f64> = init_backbone(&cfg, 1).unwrap();
    let prompts: ParamStore<f64> = init_prompt_set(&cfg, 2).unwrap();
    let img = random_image(5, 64, 64);
    let tape = Tape::<f64>::inference();
    let (b, p) = (backbone.bind(&tape), prompts.bind(&tape));
    let x = tape.constant(img.to_tensor());
    let grids = encoder_prompts(&cfg, &p, &x, NormMode::Eval, &mut Vec::new()).unwrap();
    assert!(grids.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    let y = analysis(
        &cfg,
        &b,
        &x,
        Some(Prompts {
            grids: &grids,
            mode: PromptMode::Active,
        }),
    )
    .unwrap()
    .0;
    let y_ref = reference_analysis(&cfg, &backbone, &img.to_tensor());
    assert!(y.to_tensor().max_abs_diff(&y_ref) > 0.0);
}
