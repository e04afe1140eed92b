//! The tape-based Transformer block against an independent longhand
//! implementation of the same math.

mod common;

use tsnas::diffcore::{Tape, Tensor};
use tsnas::nnops::{block_forward, ForecastModel, ModelConfig};
use tsnas::rng::Prng;
use tsnas::searchspace::ArchitectureSpec;

fn block_cfg(d_model: usize, num_heads: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        num_blocks: 1,
        num_heads,
        patch_len: 4,
        patch_stride: 2,
        lookback: 16,
        horizon: 4,
        num_channels: 1,
        dropout: 0.0,
        instance_norm: false,
    }
}

fn run_block_on_tape(model: &ForecastModel, x: &[f64], l: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape
        .constant(Tensor::matrix(l, model.cfg.d_model, x.to_vec()).unwrap());
    let choices = model.choices();
    let out = block_forward(
        &mut tape,
        &model.params,
        &model.ids.blocks[0],
        &model.cfg,
        &choices[0],
        xv,
        &mut None,
    )
    .unwrap();
    assert_eq!(tape.shape(out), &[l, model.cfg.d_model]);
    tape.data(out).to_vec()
}

#[test]
fn vanilla_block_matches_longhand_reference() {
    let mut worst: f64 = 0.0;
    for (seed, d_model, num_heads, l, cases) in
        [(11, 8, 2, 7, 60), (12, 16, 4, 5, 40)]
    {
        let model = ForecastModel::new(
            block_cfg(d_model, num_heads),
            ArchitectureSpec::vanilla(1),
            seed,
        )
        .unwrap();
        let mut rng = Prng::new(seed).split("block-inputs");
        for _ in 0..cases {
            let x: Vec<f64> = (0..l * d_model).map(|_| rng.uniform(-1.5, 1.5)).collect();
            let got = run_block_on_tape(&model, &x, l);
            let want = common::reference_vanilla_block(&model, 0, &x, l);
            worst = worst.max(common::max_abs_diff(&got, &want));
        }
    }
    assert!(worst <= 1e-12, "worst |tape - reference| = {worst:.3e}");
}

#[test]
fn deep_vanilla_model_chains_reference_blocks() {
    let mut cfg = block_cfg(8, 2);
    cfg.num_blocks = 3;
    let model = ForecastModel::new(cfg, ArchitectureSpec::vanilla(3), 21).unwrap();
    let l = 7;
    let mut rng = Prng::new(3).split("deep-inputs");
    let x: Vec<f64> = (0..l * 8).map(|_| rng.uniform(-1.0, 1.0)).collect();

    let mut tape = Tape::new();
    let mut h = tape.constant(Tensor::matrix(l, 8, x.clone()).unwrap());
    let choices = model.choices();
    for (bp, ch) in model.ids.blocks.iter().zip(&choices) {
        h = block_forward(&mut tape, &model.params, bp, &model.cfg, ch, h, &mut None).unwrap();
    }
    let got = tape.data(h).to_vec();

    let mut want = x;
    for b in 0..3 {
        want = common::reference_vanilla_block(&model, b, &want, l);
    }
    let diff = common::max_abs_diff(&got, &want);
    assert!(diff <= 1e-12, "worst |tape - reference| = {diff:.3e}");
}
