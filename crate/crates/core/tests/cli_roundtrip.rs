//! End-to-end checks of the `tsnas` binary: artifact layout, byte-level
//! reproducibility, exit codes, and cross-command consistency.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tsnas::cli::{Algo, ForecastMode, RunConfig, SpaceConfig, TaskConfig};
use tsnas::data::{load_csv, CsvSchema, Frequency, SyntheticConfig, SyntheticKind, SyntheticManifest};
use tsnas::nnops::ModelConfig;
use tsnas::search::{NodeDecision, SearchConfig};
use tsnas::searchspace::parse_spec_file;

fn tsnas_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsnas"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tsnas");
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn tsnas").status.code().expect("exit code")
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_blocks: 1,
        num_heads: 2,
        patch_len: 4,
        patch_stride: 2,
        lookback: 12,
        horizon: 4,
        num_channels: 1,
        dropout: 0.0,
        instance_norm: false,
    }
}

fn tiny_search() -> SearchConfig {
    SearchConfig {
        k1: 1,
        k2: 1,
        k3: 2,
        patience: 5,
        eval_every_steps: 4,
        batch_size: 16,
        ..SearchConfig::default()
    }
}

fn sines_config(space: &str, seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        task: TaskConfig::Synthetic {
            synthetic: SyntheticConfig {
                name: "sines".to_string(),
                kind: SyntheticKind::Sines {
                    periods: vec![12, 24],
                    noise_sigma: 0.05,
                },
                length: 200,
                channels: 1,
                seed: 7,
                frequency: Frequency::Hourly,
            },
        },
        mode: ForecastMode::LongTerm,
        algo: Algo::AbDarts,
        model: tiny_model(),
        search: tiny_search(),
        space: SpaceConfig::Preset(space.to_string()),
        fractions: None,
        seeds,
        output_dir: PathBuf::from("out"),
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn read_trace(path: &Path) -> Vec<NodeDecision> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_and_version_exit_zero() {
    let out = run_ok(tsnas_bin().arg("--help"));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["search", "train", "eval", "export-arch", "gen-synthetic", "gradcheck"] {
        assert!(text.contains(cmd), "--help should mention {cmd}:\n{text}");
    }
    run_ok(tsnas_bin().arg("--version"));
    let out = run_ok(tsnas_bin().args(["search", "--help"]));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--algo", "--space", "--seeds", "--output-dir"] {
        assert!(text.contains(flag), "search --help should mention {flag}:\n{text}");
    }
}

#[test]
fn unknown_flags_and_bad_configs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &sines_config("s4", vec![0]));

    assert_eq!(
        exit_code(tsnas_bin().args(["search", "--config"]).arg(&cfg_path).arg("--bogus-flag")),
        1
    );
    assert_eq!(exit_code(tsnas_bin().args(["search", "--config", "/nonexistent.json"])), 1);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"task":{"source":"csv","path":"x.csv"},"typo_field":1}"#).unwrap();
    assert_eq!(exit_code(tsnas_bin().args(["search", "--config"]).arg(&bad)), 1);

    assert_eq!(
        exit_code(
            tsnas_bin()
                .args(["search", "--config"])
                .arg(&cfg_path)
                .args(["--algo", "enas"])
        ),
        1
    );
}

#[test]
fn gen_synthetic_artifacts_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticConfig {
        name: "waves".to_string(),
        kind: SyntheticKind::Sines {
            periods: vec![10],
            noise_sigma: 0.1,
        },
        length: 64,
        channels: 2,
        seed: 3,
        frequency: Frequency::Daily,
    };
    let cfg_path = dir.path().join("synth.json");
    fs::write(&cfg_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let out_dir = dir.path().join("series");
    run_ok(
        tsnas_bin()
            .args(["gen-synthetic", "--config"])
            .arg(&cfg_path)
            .arg("--out-dir")
            .arg(&out_dir),
    );

    let series = load_csv(
        &out_dir.join("data.csv"),
        &CsvSchema {
            series_name: "waves".to_string(),
            frequency: Frequency::Daily,
        },
    )
    .unwrap();
    assert_eq!(series.len(), 64);
    assert_eq!(series.num_channels(), 2);

    let manifest: SyntheticManifest =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config.length, 64);
    assert_eq!(manifest.config.channels, 2);

    // The CSV must reproduce the generator's output exactly.
    let (direct, _) = tsnas::data::gen_synthetic(&spec).unwrap();
    for (a, b) in direct.channels.iter().zip(&series.channels) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn search_artifacts_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &sines_config("s3", vec![0]));

    for root in ["run-a", "run-b"] {
        run_ok(
            tsnas_bin()
                .args(["search", "--config"])
                .arg(&cfg_path)
                .env("TSNAS_OUTPUT_ROOT", dir.path().join(root)),
        );
    }
    let a = dir.path().join("run-a/out");
    let b = dir.path().join("run-b/out");

    for file in ["config.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    for file in [
        "architecture.json",
        "trace.jsonl",
        "checkpoint.bin",
        "summary.json",
    ] {
        let fa = fs::read(a.join("seed-0").join(file)).unwrap();
        let fb = fs::read(b.join("seed-0").join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical runs");
    }
    // timings.json is wall-clock and only needs to exist and parse.
    let timings: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("seed-0/timings.json")).unwrap()).unwrap();
    for key in [
        "supernet_train_secs",
        "scoring_secs",
        "recovery_secs",
        "retrain_secs",
        "search_total_secs",
    ] {
        assert!(timings[key].as_f64().is_some(), "timings.json missing {key}");
    }

    // The architecture exports as a standalone spec file.
    let spec = parse_spec_file(&a.join("seed-0/architecture.json")).unwrap();
    assert_eq!(spec.blocks.len(), 1);

    // Trace records justify the decision: chosen is the argmax of scores.
    let trace = read_trace(&a.join("seed-0/trace.jsonl"));
    assert!(!trace.is_empty());
    for rec in &trace {
        assert_eq!(rec.candidates.len(), rec.scores.len());
        let best = rec
            .scores
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.partial_cmp(y).unwrap())
            .unwrap()
            .0;
        assert_eq!(rec.chosen, best, "node {}", rec.node_name);
    }

    // Everything carries the identical run triple.
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("seed-0/summary.json")).unwrap()).unwrap();
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert_eq!(summary["seed"].as_u64(), Some(0));
    assert_eq!(summary["code_version"].as_str(), Some(env!("CARGO_PKG_VERSION")));
    assert_eq!(timings["config_hash"].as_str(), Some(hash));
}

#[test]
fn search_singleton_space_yields_baseline_without_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &sines_config("full", vec![0]));
    run_ok(
        tsnas_bin()
            .args(["search", "--config"])
            .arg(&cfg_path)
            .args(["--space", "s4"])
            .env("TSNAS_OUTPUT_ROOT", dir.path().join("root")),
    );
    let seed_dir = dir.path().join("root/out/seed-0");

    assert_eq!(fs::read_to_string(seed_dir.join("trace.jsonl")).unwrap(), "");
    let spec = parse_spec_file(&seed_dir.join("architecture.json")).unwrap();
    assert_eq!(spec, tsnas::searchspace::ArchitectureSpec::vanilla(1));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(seed_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["scoring_events"].as_u64(), Some(0));
}

#[test]
fn darts_baseline_runs_and_reports_alpha_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &sines_config("s3", vec![0]));
    run_ok(
        tsnas_bin()
            .args(["search", "--config"])
            .arg(&cfg_path)
            .args(["--algo", "darts"])
            .env("TSNAS_OUTPUT_ROOT", dir.path().join("root")),
    );
    let seed_dir = dir.path().join("root/out/seed-0");
    assert_eq!(fs::read_to_string(seed_dir.join("trace.jsonl")).unwrap(), "");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(seed_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["algo"].as_str(), Some("darts"));
    assert!(summary["alpha_steps"].as_u64().unwrap() > 0);
    parse_spec_file(&seed_dir.join("architecture.json")).unwrap();
}

#[test]
fn train_eval_roundtrip_and_checkpoint_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &sines_config("s4", vec![0, 1]));
    let root = dir.path().join("root");

    // Train two seeds of the baseline architecture.
    run_ok(
        tsnas_bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .env("TSNAS_OUTPUT_ROOT", &root),
    );
    let out = root.join("out");
    let m0: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("seed-0/metrics.json")).unwrap()).unwrap();
    let m1: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("seed-1/metrics.json")).unwrap()).unwrap();
    let mean: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics_mean.json")).unwrap()).unwrap();
    assert_ne!(m0["val"]["mse"], m1["val"]["mse"], "seeds should differ");
    let expected = (m0["test"]["mse"].as_f64().unwrap() + m1["test"]["mse"].as_f64().unwrap()) / 2.0;
    let got = mean["test"]["mse"].as_f64().unwrap();
    assert!((got - expected).abs() <= 1e-15 * expected.abs().max(1.0));
    assert_eq!(mean["seeds"], serde_json::json!([0, 1]));

    // Evaluating the stored checkpoint reproduces the training-time test
    // report exactly.
    let ckpt = out.join("seed-0/checkpoint.bin");
    let eval_out = run_ok(
        tsnas_bin()
            .args(["eval", "--config"])
            .arg(&cfg_path)
            .arg("--checkpoint")
            .arg(&ckpt)
            .args(["--split", "test"])
            .env("TSNAS_OUTPUT_ROOT", &root),
    );
    let report: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&eval_out.stdout).trim()).unwrap();
    assert_eq!(report["report"]["mse"].as_f64(), m0["test"]["mse"].as_f64());
    assert_eq!(report["report"]["mae"].as_f64(), m0["test"]["mae"].as_f64());
    assert_eq!(report["split"].as_str(), Some("test"));
    let on_disk = fs::read_to_string(root.join("out/eval_report.json")).unwrap();
    let on_disk: serde_json::Value = serde_json::from_str(&on_disk).unwrap();
    assert_eq!(on_disk["report"]["mse"], report["report"]["mse"]);

    // export-arch prints the stored architecture.
    let arch_out = run_ok(tsnas_bin().args(["export-arch", "--checkpoint"]).arg(&ckpt));
    let spec: tsnas::searchspace::ArchitectureSpec =
        serde_json::from_str(String::from_utf8_lossy(&arch_out.stdout).trim()).unwrap();
    assert_eq!(spec, tsnas::searchspace::ArchitectureSpec::vanilla(1));

    // A flipped payload byte must be detected as a hash mismatch (exit 3).
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x20;
    let tampered = dir.path().join("tampered.bin");
    fs::write(&tampered, &bytes).unwrap();
    assert_eq!(
        exit_code(
            tsnas_bin()
                .args(["eval", "--config"])
                .arg(&cfg_path)
                .arg("--checkpoint")
                .arg(&tampered)
                .env("TSNAS_OUTPUT_ROOT", &root)
        ),
        3
    );

    // A checkpoint whose geometry disagrees with the dataset is also a
    // mismatch, even with a valid payload hash.
    let mut other = sines_config("s4", vec![0]);
    other.model.lookback = 16;
    other.model.patch_len = 8;
    other.model.patch_stride = 4;
    let other_path = dir.path().join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    assert_eq!(
        exit_code(
            tsnas_bin()
                .args(["eval", "--config"])
                .arg(&other_path)
                .arg("--checkpoint")
                .arg(&ckpt)
                .env("TSNAS_OUTPUT_ROOT", &root)
        ),
        3
    );
}

#[test]
fn seeds_flag_overrides_config_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &sines_config("s4", vec![9]));
    run_ok(
        tsnas_bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .args(["--seeds", "2"])
            .env("TSNAS_OUTPUT_ROOT", dir.path().join("root")),
    );
    let out = dir.path().join("root/out");
    assert!(out.join("seed-0/metrics.json").exists());
    assert!(out.join("seed-1/metrics.json").exists());
    assert!(!out.join("seed-9").exists());
}

#[test]
fn gradcheck_smoke_exits_zero() {
    let out = run_ok(tsnas_bin().args([
        "gradcheck",
        "--instances",
        "1",
        "--hypernet-instances",
        "1",
    ]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("ok"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}
