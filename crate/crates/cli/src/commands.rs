//! The four commands. Each one is deterministic given (config, seed) and
//! writes its artifacts under the resolved output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use mmlab_core::checkpoint;
use mmlab_core::decoder;
use mmlab_core::model::{self, ParamNodes};
use mmlab_core::packing;
use mmlab_core::scaling::{self, ScalingRecord};
use mmlab_core::seed::SeedSplitter;
use mmlab_core::tape::Tape;
use mmlab_core::train::{self, MetricsRow, TrainOptions};

use crate::config::RunConfig;
use crate::{runtime, CliError};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

fn fmt_metrics_row(row: &MetricsRow) -> String {
    let val = row.val_loss.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{}\n",
        row.step, row.stage, row.train_loss, val, row.visual_rms, row.linguistic_rms
    )
}

pub struct TrainArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoint_base: PathBuf,
    pub config_echo_path: PathBuf,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Runs the stage list and writes metrics.csv, checkpoint.{json,bin} and
/// config_echo.toml.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts, CliError> {
    cfg.validate()?;
    ensure_dir(out_dir)?;

    let config_echo_path = out_dir.join("config_echo.toml");
    write_file(&config_echo_path, cfg.to_toml())?;

    let opts = TrainOptions {
        model: cfg.model.clone(),
        stages: cfg.stages.clone(),
        data: cfg.data.clone(),
        adam: cfg.optimizer,
        eval_interval: cfg.eval.interval,
        seed: cfg.seed,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = String::from("step,stage,train_loss,val_loss,visual_rms,linguistic_rms\n");
    let result = train::run_training(&opts, |row| {
        csv.push_str(&fmt_metrics_row(row));
    })
    .map_err(runtime)?;
    write_file(&metrics_path, &csv)?;

    let checkpoint_base = out_dir.join("checkpoint");
    checkpoint::save(&result.store, &checkpoint_base).map_err(runtime)?;

    println!(
        "train: {} stages, val loss {:.4} -> {:.4}, artifacts in {}",
        cfg.stages.len(),
        result.initial_val_loss,
        result.final_val_loss,
        out_dir.display()
    );
    Ok(TrainArtifacts {
        metrics_path,
        checkpoint_base,
        config_echo_path,
        initial_val_loss: result.initial_val_loss,
        final_val_loss: result.final_val_loss,
    })
}

#[derive(Debug, Serialize)]
pub struct LossFitEntry {
    pub encoder_params: u64,
    pub data_size: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Serialize)]
pub struct OptimalSizeEntry {
    pub llm_params: u64,
    pub data_size: usize,
    pub optimal_encoder_params: u64,
    pub saturated: bool,
}

#[derive(Debug, Serialize)]
pub struct FitSummary {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub lambda: f64,
    /// Validation loss against llm size (log-linear), one fit per
    /// (encoder budget, data size) with at least two llm points.
    pub loss_vs_llm_size: Vec<LossFitEntry>,
    /// Doubling-ladder rule applied per (llm budget, data size); empty when
    /// the encoder ladder does not double.
    pub optimal_encoder_sizes: Vec<OptimalSizeEntry>,
    /// Log-log fit of optimal encoder size against llm size, when at least
    /// two llm budgets produced a choice.
    pub optimal_size_vs_llm_size: Option<FitSummary>,
}

pub fn records_to_csv(records: &[ScalingRecord]) -> String {
    let mut out = String::from("encoder_params,llm_params,data_size,val_loss\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.encoder_params, r.llm_params, r.data_size, r.val_loss
        ));
    }
    out
}

/// The fit report derived from sweep records; also the offline-recompute
/// surface used by tests.
pub fn build_fit_report(records: &[ScalingRecord], lambda: f64) -> FitReport {
    let mut enc_budgets: Vec<u64> = records.iter().map(|r| r.encoder_params).collect();
    enc_budgets.sort_unstable();
    enc_budgets.dedup();
    let mut llm_budgets: Vec<u64> = records.iter().map(|r| r.llm_params).collect();
    llm_budgets.sort_unstable();
    llm_budgets.dedup();
    let mut data_sizes: Vec<usize> = records.iter().map(|r| r.data_size).collect();
    data_sizes.sort_unstable();
    data_sizes.dedup();

    let lookup = |e: u64, l: u64, d: usize| {
        records
            .iter()
            .find(|r| r.encoder_params == e && r.llm_params == l && r.data_size == d)
            .map(|r| r.val_loss)
    };

    let mut loss_vs_llm_size = Vec::new();
    for &e in &enc_budgets {
        for &d in &data_sizes {
            let points: Vec<(f64, f64)> = llm_budgets
                .iter()
                .filter_map(|&l| lookup(e, l, d).map(|loss| (l as f64, loss)))
                .collect();
            if points.len() >= 2 {
                if let Ok(fit) = scaling::fit_loglinear(&points) {
                    loss_vs_llm_size.push(LossFitEntry {
                        encoder_params: e,
                        data_size: d,
                        slope: fit.slope,
                        intercept: fit.intercept,
                        r2: fit.r2,
                    });
                }
            }
        }
    }

    let ladder_doubles = enc_budgets.len() >= 2
        && enc_budgets.windows(2).all(|w| w[1] == w[0] * 2);
    let mut optimal_encoder_sizes = Vec::new();
    if ladder_doubles {
        for &l in &llm_budgets {
            for &d in &data_sizes {
                let ladder: Vec<(u64, f64)> = enc_budgets
                    .iter()
                    .filter_map(|&e| lookup(e, l, d).map(|loss| (e, loss)))
                    .collect();
                if ladder.len() == enc_budgets.len() {
                    if let Ok(choice) = scaling::optimal_encoder_size(&ladder, lambda) {
                        optimal_encoder_sizes.push(OptimalSizeEntry {
                            llm_params: l,
                            data_size: d,
                            optimal_encoder_params: choice.size,
                            saturated: choice.saturated,
                        });
                    }
                }
            }
        }
    }

    let optimal_points: Vec<(f64, f64)> = optimal_encoder_sizes
        .iter()
        .map(|e| (e.llm_params as f64, e.optimal_encoder_params as f64))
        .collect();
    let distinct_llm = {
        let mut xs: Vec<u64> = optimal_encoder_sizes.iter().map(|e| e.llm_params).collect();
        xs.sort_unstable();
        xs.dedup();
        xs.len()
    };
    let optimal_size_vs_llm_size = if distinct_llm >= 2 {
        scaling::fit_loglog(&optimal_points).ok().map(|f| FitSummary {
            slope: f.slope,
            intercept: f.intercept,
            r2: f.r2,
        })
    } else {
        None
    };

    FitReport { lambda, loss_vs_llm_size, optimal_encoder_sizes, optimal_size_vs_llm_size }
}

pub struct SweepArtifacts {
    pub records_path: PathBuf,
    pub report_path: PathBuf,
    pub records: Vec<ScalingRecord>,
}

/// Runs the configured sweep grid and writes records.csv + fit_report.json.
pub fn cmd_sweep(cfg: &RunConfig, out_dir: &Path) -> Result<SweepArtifacts, CliError> {
    cfg.validate()?;
    let spec = cfg.sweep_spec()?;
    ensure_dir(out_dir)?;

    let records = scaling::run_sweep(&spec).map_err(runtime)?;
    let records_path = out_dir.join("records.csv");
    write_file(&records_path, records_to_csv(&records))?;

    let lambda = cfg.sweep.as_ref().map(|s| s.lambda).unwrap_or(0.01);
    let report = build_fit_report(&records, lambda);
    let report_path = out_dir.join("fit_report.json");
    write_file(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(runtime)?,
    )?;

    println!(
        "sweep: {} records, report in {}",
        records.len(),
        out_dir.display()
    );
    Ok(SweepArtifacts { records_path, report_path, records })
}

pub struct AttnDumpArtifacts {
    pub csv_path: PathBuf,
    pub stats: Vec<[f64; 4]>,
}

/// Loads a checkpoint, runs one sample forward and writes the per-layer
/// modality-block attention masses. The sample is the first held-out one,
/// or an image fixture when `image_base` is given (its caption comes from
/// the rule-based decoder).
pub fn cmd_attn_dump(
    cfg: &RunConfig,
    checkpoint_base: &Path,
    image_base: Option<&Path>,
    out_dir: &Path,
) -> Result<AttnDumpArtifacts, CliError> {
    cfg.validate()?;
    let store = checkpoint::load(checkpoint_base).map_err(runtime)?;
    model::check_store_matches(&cfg.model, &store).map_err(runtime)?;
    ensure_dir(out_dir)?;

    let splitter = SeedSplitter::new(cfg.seed);
    let sample = match image_base {
        Some(base) => {
            let image = mmlab_core::imagefile::load(base).map_err(runtime)?;
            let caption = train::caption_from_image(&image, &cfg.data.grid);
            mmlab_core::model::SampleInput { image: Some(image), caption }
        }
        None => {
            let data = train::build_dataset(&splitter, &cfg.data);
            data.val[0].clone()
        }
    };

    let mut tape = Tape::new();
    let nodes = ParamNodes::insert_all(&mut tape, &store);
    let out = model::forward(&mut tape, &nodes, &cfg.model, &sample).map_err(runtime)?;
    let mask = out.packed.modality_mask();
    let stats = decoder::attention_stats(&tape, &out.layer_probs, &mask);

    let mut csv =
        String::from("layer,visual_to_visual,visual_to_text,text_to_visual,text_to_text\n");
    for (layer, blocks) in stats.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            layer, blocks[0], blocks[1], blocks[2], blocks[3]
        ));
    }
    let csv_path = out_dir.join("attn_blocks.csv");
    write_file(&csv_path, &csv)?;

    println!("attn-dump: {} layers, {}", stats.len(), csv_path.display());
    Ok(AttnDumpArtifacts { csv_path, stats })
}

pub struct PackDebugArtifacts {
    pub json_path: PathBuf,
    pub json: String,
}

/// Serializes the packed-sequence layout for an image of the given dims
/// (caption empty: layout only).
pub fn cmd_pack_debug(
    cfg: &RunConfig,
    height: usize,
    width: usize,
    out_dir: &Path,
) -> Result<PackDebugArtifacts, CliError> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(CliError::Config(format!("invalid image dims {height}x{width}")));
    }
    ensure_dir(out_dir)?;

    let shapes = packing::scale_shapes_for(
        height,
        width,
        &cfg.model.packing,
        cfg.model.encoder.patch_stride,
        cfg.model.encoder.shuffle_factor,
    );
    let special = packing::SpecialTokens::for_vocab(cfg.model.decoder.vocab);
    let packed = packing::assemble_sequence(&shapes, &[], special).map_err(runtime)?;
    let json = packed.to_debug_json();

    let json_path = out_dir.join(format!("packed_{height}x{width}.json"));
    write_file(&json_path, &json)?;

    let mut stdout = std::io::stdout();
    let _ = writeln!(stdout, "{json}");
    Ok(PackDebugArtifacts { json_path, json })
}
