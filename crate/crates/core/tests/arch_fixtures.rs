//! Architectures discovered on the ETT and M4 benchmark tasks, stored as
//! spec files: they must parse, sit inside the full search space, build,
//! and survive a training step.

use std::path::Path;

use tsnas::diffcore::{AdamW, LrSchedule, Tape};
use tsnas::nnops::{batch_mse_loss, ForecastModel, ModelConfig};
use tsnas::rng::Prng;
use tsnas::searchspace::{parse_spec_file, SearchSpaceConfig, WidthFactor};

const FIXTURES: [&str; 5] = [
    "arch_etth1.json",
    "arch_etth2.json",
    "arch_ettm1.json",
    "arch_ettm2.json",
    "arch_m4_yearly.json",
];

fn fixture_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn fixture_model_cfg() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        num_blocks: 3,
        num_heads: 4,
        patch_len: 4,
        patch_stride: 2,
        lookback: 16,
        horizon: 4,
        num_channels: 1,
        dropout: 0.0,
        instance_norm: true,
    }
}

#[test]
fn fixtures_parse_and_lie_inside_the_full_space() {
    let space = SearchSpaceConfig::full();
    for name in FIXTURES {
        let spec = parse_spec_file(&fixture_path(name)).unwrap();
        assert_eq!(spec.blocks.len(), 3, "{name}");
        assert!(space.contains(&spec), "{name} uses an operation outside the space");
    }
}

#[test]
fn fixtures_build_and_take_one_training_step() {
    let cfg = fixture_model_cfg();
    let mut rng = Prng::new(40).split("fixture-batch");
    let lookback: Vec<f64> = (0..cfg.lookback).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let target: Vec<f64> = (0..cfg.horizon).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let batch = [(lookback.as_slice(), target.as_slice())];

    for name in FIXTURES {
        let spec = parse_spec_file(&fixture_path(name)).unwrap();
        let mut model = ForecastModel::new(cfg.clone(), spec, 1).unwrap();
        let choices = model.choices();
        let ids: Vec<_> = model.params.ids().collect();
        let mut opt = AdamW::new(&model.params, ids, LrSchedule::constant(1e-3), 0.0);

        let step = |model: &mut ForecastModel, opt: &mut AdamW| -> f64 {
            let mut tape = Tape::new();
            let loss = batch_mse_loss(
                &mut tape,
                &model.params,
                &model.ids,
                &model.cfg,
                &choices,
                &batch,
                &mut None,
            )
            .unwrap();
            let value = tape.value(loss);
            tape.backward(loss).unwrap();
            model.params.zero_grads();
            tape.accumulate_param_grads(&mut model.params);
            opt.step(&mut model.params);
            value
        };

        let before = step(&mut model, &mut opt);
        let after = step(&mut model, &mut opt);
        assert!(before.is_finite() && after.is_finite(), "{name}");
        assert_ne!(before, after, "{name}: the optimizer step changed nothing");
    }
}

#[test]
fn half_width_fixture_shrinks_the_ffn_hidden_dim() {
    let cfg = fixture_model_cfg();
    let spec = parse_spec_file(&fixture_path("arch_etth1.json")).unwrap();
    assert_eq!(spec.blocks[1].k, WidthFactor::Half);

    let model = ForecastModel::new(cfg.clone(), spec, 1).unwrap();
    let ffn = &model.ids.blocks[1].ffn[&WidthFactor::Half];
    assert_eq!(model.params.get(ffn.up).shape, vec![cfg.d_model, cfg.d_model / 2]);
    assert_eq!(model.params.get(ffn.down).shape, vec![cfg.d_model / 2, cfg.d_model]);

    // The other two blocks keep the full-width factor 1 hidden layer.
    for b in [0, 2] {
        let ffn = &model.ids.blocks[b].ffn[&WidthFactor::One];
        assert_eq!(model.params.get(ffn.up).shape, vec![cfg.d_model, cfg.d_model]);
    }
}
