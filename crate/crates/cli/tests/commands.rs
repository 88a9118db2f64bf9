//! Command-level contracts: artifacts exist, re-parse, and agree with the
//! underlying library paths.

use std::fs;

use mmlab_cli::commands::{self, build_fit_report};
use mmlab_cli::config::{preset, RunConfig};
use mmlab_core::checkpoint;
use mmlab_core::model::{self, ParamNodes};
use mmlab_core::oracle;
use mmlab_core::seed::SeedSplitter;
use mmlab_core::tape::Tape;
use mmlab_core::train;

/// desk-tiny shrunk to a few steps so command tests stay fast.
fn quick_config() -> RunConfig {
    let mut cfg = preset("desk-tiny").unwrap();
    for stage in &mut cfg.stages {
        stage.steps = 4;
        stage.batch_size = 2;
        stage.warmup_steps = 2;
    }
    cfg.data.n_train = 8;
    cfg.data.n_val = 4;
    cfg.eval.interval = 4;
    if let Some(sweep) = &mut cfg.sweep {
        sweep.steps = 3;
        sweep.batch_size = 2;
        sweep.seeds = vec![1];
        sweep.n_val = 3;
        sweep.data_sizes = vec![6];
        sweep.encoder_budgets = vec![768, 1536];
        sweep.decoder_budgets = vec![6144, 24576];
    }
    cfg
}

#[test]
fn train_writes_all_three_artifacts_and_reruns_identically() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let a = commands::cmd_train(&cfg, &out_a).unwrap();
    let b = commands::cmd_train(&cfg, &out_b).unwrap();

    for art in [&a.metrics_path, &a.config_echo_path] {
        assert!(art.exists(), "{} missing", art.display());
    }
    assert!(a.checkpoint_base.with_extension("json").exists());
    assert!(a.checkpoint_base.with_extension("bin").exists());

    // determinism: byte-identical metrics and checkpoint payloads
    assert_eq!(
        fs::read(&a.metrics_path).unwrap(),
        fs::read(&b.metrics_path).unwrap()
    );
    assert_eq!(
        fs::read(a.checkpoint_base.with_extension("bin")).unwrap(),
        fs::read(b.checkpoint_base.with_extension("bin")).unwrap()
    );

    // config echo re-parses to the same config
    let echoed = RunConfig::from_toml(&fs::read_to_string(&a.config_echo_path).unwrap()).unwrap();
    assert_eq!(echoed.to_toml(), cfg.to_toml());

    // metrics csv re-parses: header + one row per step
    let text = fs::read_to_string(&a.metrics_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,stage,train_loss,val_loss,visual_rms,linguistic_rms"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12); // 3 stages x 4 steps
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 6);
        cols[2].parse::<f64>().unwrap();
    }
}

#[test]
fn different_seed_changes_metrics() {
    let cfg = quick_config();
    let mut cfg2 = quick_config();
    cfg2.seed = cfg.seed + 1;
    let dir = tempfile::tempdir().unwrap();
    let a = commands::cmd_train(&cfg, &dir.path().join("a")).unwrap();
    let b = commands::cmd_train(&cfg2, &dir.path().join("b")).unwrap();
    assert_ne!(
        fs::read(&a.metrics_path).unwrap(),
        fs::read(&b.metrics_path).unwrap()
    );
}

#[test]
fn sweep_emits_grid_records_and_consistent_report() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let art = commands::cmd_sweep(&cfg, dir.path()).unwrap();
    assert_eq!(art.records.len(), 4); // 2 encoder x 2 decoder x 1 data size

    // records CSV re-parses into the same records
    let text = fs::read_to_string(&art.records_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "encoder_params,llm_params,data_size,val_loss");
    let parsed: Vec<mmlab_core::scaling::ScalingRecord> = lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            mmlab_core::scaling::ScalingRecord {
                encoder_params: c[0].parse().unwrap(),
                llm_params: c[1].parse().unwrap(),
                data_size: c[2].parse().unwrap(),
                val_loss: c[3].parse().unwrap(),
            }
        })
        .collect();
    assert_eq!(parsed, art.records);

    // fit report: loss-vs-llm fit per encoder budget, optimal sizes from the
    // doubling ladder, and their log-log fit
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&art.report_path).unwrap()).unwrap();
    let fits = report["loss_vs_llm_size"].as_array().unwrap();
    assert_eq!(fits.len(), 2);
    for fit in fits {
        assert!(fit["slope"].is_number());
        assert!(fit["intercept"].is_number());
        assert!(fit["r2"].is_number());
    }
    let optimal = report["optimal_encoder_sizes"].as_array().unwrap();
    assert_eq!(optimal.len(), 2); // one per llm budget

    // offline recompute of the rule from the emitted CSV
    let report_built = build_fit_report(&parsed, 0.01);
    for (entry, want) in optimal.iter().zip(&report_built.optimal_encoder_sizes) {
        assert_eq!(
            entry["optimal_encoder_params"].as_u64().unwrap(),
            want.optimal_encoder_params
        );
        assert_eq!(entry["saturated"].as_bool().unwrap(), want.saturated);
    }
}

#[test]
fn attn_dump_rows_sum_to_one_with_depth_many_layers() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let trained = commands::cmd_train(&cfg, &dir.path().join("train")).unwrap();
    let art =
        commands::cmd_attn_dump(&cfg, &trained.checkpoint_base, None, &dir.path().join("dump")).unwrap();

    assert_eq!(art.stats.len(), cfg.model.decoder.depth);
    for blocks in &art.stats {
        assert!((blocks[0] + blocks[1] - 1.0).abs() < 1e-6, "{blocks:?}");
        assert!((blocks[2] + blocks[3] - 1.0).abs() < 1e-6, "{blocks:?}");
    }
    let text = fs::read_to_string(&art.csv_path).unwrap();
    assert_eq!(text.lines().count(), cfg.model.decoder.depth + 1);
}

#[test]
fn attn_dump_accepts_image_fixture() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let trained = commands::cmd_train(&cfg, &dir.path().join("train")).unwrap();
    let samples = train::gen_synthetic(99, 1, &cfg.data.grid);
    let base = dir.path().join("fixture");
    mmlab_core::imagefile::save(&samples[0].image, &base).unwrap();
    let art = commands::cmd_attn_dump(
        &cfg,
        &trained.checkpoint_base,
        Some(&base),
        &dir.path().join("dump"),
    )
    .unwrap();
    assert_eq!(art.stats.len(), cfg.model.decoder.depth);
    for blocks in &art.stats {
        assert!((blocks[0] + blocks[1] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attn_dump_rejects_mismatched_checkpoint() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let trained = commands::cmd_train(&cfg, &dir.path().join("train")).unwrap();
    let mut other = quick_config();
    other.model.decoder.depth = 2;
    let err = commands::cmd_attn_dump(&other, &trained.checkpoint_base, None, &dir.path().join("x"));
    assert!(err.is_err());
}

#[test]
fn attn_dump_of_tied_checkpoint_matches_vanilla_oracle() {
    let mut cfg = quick_config();
    cfg.model.decoder.depth = 2; // keep the oracle run cheap
    let dir = tempfile::tempdir().unwrap();

    // build a tied-expert store and save it as a checkpoint
    let splitter = SeedSplitter::new(cfg.seed);
    let mut store = model::init_params(&cfg.model, &splitter.child("init"));
    oracle::tie_experts(&mut store, cfg.model.decoder.depth);
    let base = dir.path().join("tied");
    checkpoint::save(&store, &base).unwrap();
    // reload so both paths see the same f32-cast weights
    let store = checkpoint::load(&base).unwrap();

    let art = commands::cmd_attn_dump(&cfg, &base, None, &dir.path().join("dump")).unwrap();

    let data = train::build_dataset(&splitter, &cfg.data);
    let vanilla = oracle::vanilla_forward(&store, &cfg.model, &data.val[0]);
    let mask = vanilla.packed.modality_mask();
    let oracle_stats: Vec<[f64; 4]> = vanilla
        .layer_probs
        .iter()
        .map(|heads| mmlab_core::decoder::aggregate_blocks(heads, &mask))
        .collect();
    assert_eq!(art.stats.len(), oracle_stats.len());
    for (a, b) in art.stats.iter().zip(&oracle_stats) {
        for (x, y) in a.iter().zip(b) {
            assert!(x == y, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn pack_debug_is_stable_across_runs() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let a = commands::cmd_pack_debug(&cfg, 64, 64, &dir.path().join("a")).unwrap();
    let b = commands::cmd_pack_debug(&cfg, 64, 64, &dir.path().join("b")).unwrap();
    assert_eq!(a.json, b.json);
    assert_eq!(
        fs::read(&a.json_path).unwrap(),
        fs::read(&b.json_path).unwrap()
    );
}

#[test]
fn forward_checkpoint_roundtrip_preserves_logits() {
    // save -> load -> forward must equal forward on the f32-cast store
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let trained = commands::cmd_train(&cfg, &dir.path().join("train")).unwrap();
    let store = checkpoint::load(&trained.checkpoint_base).unwrap();

    let splitter = SeedSplitter::new(cfg.seed);
    let data = train::build_dataset(&splitter, &cfg.data);
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert_all(&mut tape, &store);
    let out = model::forward(&mut tape, &nodes, &cfg.model, &data.val[0]).unwrap();
    assert!(tape.value(out.logits).data().iter().all(|v| v.is_finite()));
}
