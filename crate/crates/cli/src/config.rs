//! Run configuration: TOML on disk, embedded presets, and validation of
//! every structural invariant before any compute starts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use mmlab_core::config::ModelConfig;
use mmlab_core::scaling::{ComponentLadder, SweepSpec};
use mmlab_core::train::{AdamHyper, DataSpec, StageSchedule};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Validation every this many steps (always once at the end).
    pub interval: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    /// Nominal encoder budgets; a doubling ladder enables the optimal-size
    /// rule in the fit report.
    pub encoder_budgets: Vec<u64>,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_budgets: Vec<u64>,
    pub data_sizes: Vec<usize>,
    pub n_val: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    /// Task for the sweep runs; defaults to the main [data.grid].
    #[serde(default)]
    pub grid: Option<mmlab_core::train::GridSpec>,
}

fn default_lambda() -> f64 {
    0.01
}

fn default_threads() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackDebugSection {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataSpec,
    #[serde(default = "AdamHyper::default")]
    pub optimizer: AdamHyper,
    pub eval: EvalConfig,
    pub stages: Vec<StageSchedule>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub pack_debug: Option<PackDebugSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every module-level invariant, checked before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, detail: String| CliError::Config(format!("config field `{name}`: {detail}"));

        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;

        let check_grid = |grid: &mmlab_core::train::GridSpec, where_: &str| {
            if grid.grid == 0 || grid.colors == 0 {
                return Err(field(where_, "grid and colors must be positive".into()));
            }
            if grid.image_size == 0 || grid.image_size % grid.grid != 0 {
                return Err(field(
                    where_,
                    format!("image_size {} not divisible by grid {}", grid.image_size, grid.grid),
                ));
            }
            if grid.min_vocab() > self.model.decoder.vocab {
                return Err(field(
                    where_,
                    format!(
                        "colors: palette needs vocab >= {}, model has {}",
                        grid.min_vocab(),
                        self.model.decoder.vocab
                    ),
                ));
            }
            Ok(())
        };
        check_grid(&self.data.grid, "data.grid")?;
        if self.data.n_train == 0 {
            return Err(field("data.n_train", "must be positive".into()));
        }
        if self.data.n_val == 0 {
            return Err(field("data.n_val", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.text_ratio) {
            return Err(field("data.text_ratio", "must lie in [0, 1]".into()));
        }
        if self.eval.interval == 0 {
            return Err(field("eval.interval", "must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(field("stages", "at least one stage required".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.steps == 0 {
                return Err(field(&format!("stages[{i}].steps"), "must be positive".into()));
            }
            if s.batch_size == 0 {
                return Err(field(&format!("stages[{i}].batch_size"), "must be positive".into()));
            }
            if !(s.peak_lr > 0.0) {
                return Err(field(&format!("stages[{i}].peak_lr"), "must be positive".into()));
            }
            if s.warmup_steps > s.steps {
                return Err(field(
                    &format!("stages[{i}].warmup_steps"),
                    format!("{} exceeds stage steps {}", s.warmup_steps, s.steps),
                ));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.encoder_budgets.is_empty() || sweep.decoder_budgets.is_empty() {
                return Err(field("sweep", "budget ladders must be non-empty".into()));
            }
            if sweep.seeds.is_empty() {
                return Err(field("sweep.seeds", "at least one seed".into()));
            }
            if sweep.steps == 0 || sweep.batch_size == 0 {
                return Err(field("sweep.steps", "steps and batch_size must be positive".into()));
            }
            if !(sweep.lambda >= 0.0) {
                return Err(field("sweep.lambda", "must be non-negative".into()));
            }
            if let Some(grid) = &sweep.grid {
                check_grid(grid, "sweep.grid")?;
            }
        }
        if let Some(pd) = &self.pack_debug {
            if pd.height == 0 || pd.width == 0 {
                return Err(field("pack_debug", "dims must be positive".into()));
            }
        }
        Ok(())
    }

    /// Core sweep spec assembled from the sweep section plus the shared
    /// model/data fields.
    pub fn sweep_spec(&self) -> Result<SweepSpec, CliError> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("config has no [sweep] section".into()))?;
        Ok(SweepSpec {
            encoder: ComponentLadder {
                depth: s.encoder_depth,
                heads: s.encoder_heads,
                budgets: s.encoder_budgets.clone(),
            },
            decoder: ComponentLadder {
                depth: s.decoder_depth,
                heads: s.decoder_heads,
                budgets: s.decoder_budgets.clone(),
            },
            data_sizes: s.data_sizes.clone(),
            n_val: s.n_val,
            seeds: s.seeds.clone(),
            steps: s.steps,
            batch_size: s.batch_size,
            peak_lr: s.peak_lr,
            warmup_steps: s.warmup_steps,
            weight_decay: s.weight_decay,
            vocab: self.model.decoder.vocab,
            grid: s.grid.unwrap_or(self.data.grid),
            packing: self.model.packing.clone(),
            threads: s.threads,
        })
    }
}

/// Embedded presets; tests and quick runs need no external files.
pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    match name {
        "desk-tiny" => Ok(RunConfig::from_toml(DESK_TINY).expect("desk-tiny preset parses")),
        "full-2b" => Ok(RunConfig::from_toml(FULL_2B).expect("full-2b preset parses")),
        other => Err(CliError::Config(format!(
            "unknown preset `{other}` (available: desk-tiny, full-2b)"
        ))),
    }
}

/// Small model that trains to a useful loss on one CPU core in minutes.
const DESK_TINY: &str = r#"
seed = 7

[model.encoder]
depth = 2
width = 32
mlp_width = 88
heads = 4
patch_stride = 16
shuffle_factor = 2
out_width = 64

[model.decoder]
depth = 4
width = 64
mlp_width = 176
heads = 4
vocab = 32

[model.packing]
tau = 0.7071067811865476
area_threshold = 1024

[data]
n_train = 96
n_val = 24
text_ratio = 0.0

[data.grid]
grid = 2
colors = 6
image_size = 64

[optimizer]
beta1 = 0.9
beta2 = 0.95
eps = 1e-8

[eval]
interval = 20

[[stages]]
id = "s1.1"
steps = 60
batch_size = 8
peak_lr = 2e-3
warmup_steps = 10
schedule = "constant_with_warmup"
weight_decay = 0.05

[[stages]]
id = "s1.2"
steps = 60
batch_size = 8
peak_lr = 2e-3
warmup_steps = 10
schedule = "constant_with_warmup"
weight_decay = 0.1

[[stages]]
id = "s2"
steps = 80
batch_size = 8
peak_lr = 1e-3
warmup_steps = 10
schedule = "cosine_with_warmup"
weight_decay = 0.01

[sweep]
encoder_depth = 1
encoder_heads = 1
encoder_budgets = [192, 384, 768]
decoder_depth = 2
decoder_heads = 2
decoder_budgets = [6144, 24576]
data_sizes = [12800]
n_val = 256
seeds = [1, 2, 3]
steps = 1600
batch_size = 8
peak_lr = 2e-3
warmup_steps = 20
weight_decay = 0.0
lambda = 0.01
threads = 2

# Single-epoch runs (steps x batch = data size) on a finer-grained task:
# 8px blocks put four blocks in every 16px patch, so the narrow encoders
# genuinely bottleneck color information instead of tying on an easy task.
[sweep.grid]
grid = 3
colors = 8
image_size = 24
"#;

/// Reference hyperparameters of the full-scale 2B-class recipe. A fixture
/// for config handling and parameter accounting; not runnable at desk scale.
const FULL_2B: &str = r#"
seed = 0

[model.encoder]
depth = 24
width = 1472
mlp_width = 5888
heads = 23
patch_stride = 16
shuffle_factor = 2
out_width = 2048

[model.decoder]
depth = 24
width = 2048
mlp_width = 8192
heads = 16
vocab = 65536

[model.packing]
tau = 0.7071067811865476
area_threshold = 4096

[data]
n_train = 500000000
n_val = 10000
text_ratio = 0.0

[data.grid]
grid = 4
colors = 16
image_size = 448

[optimizer]
beta1 = 0.9
beta2 = 0.95
eps = 1e-8

[eval]
interval = 1000

[[stages]]
id = "s1.1"
steps = 70000
batch_size = 7000
peak_lr = 5e-5
warmup_steps = 200
schedule = "constant_with_warmup"
weight_decay = 0.05

[[stages]]
id = "s1.2"
steps = 40000
batch_size = 4614
peak_lr = 5e-5
warmup_steps = 200
schedule = "constant_with_warmup"
weight_decay = 0.1

[[stages]]
id = "s2"
steps = 30000
batch_size = 2234
peak_lr = 2e-5
warmup_steps = 200
schedule = "cosine_with_warmup"
weight_decay = 0.01
"#;

#[cfg(test)]
mod tests {
    use super::*;
    use mmlab_core::train::StageId;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["desk-tiny", "full-2b"] {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn desk_tiny_matches_its_contract() {
        let cfg = preset("desk-tiny").unwrap();
        assert_eq!(cfg.model.encoder.depth, 2);
        assert_eq!(cfg.model.encoder.width, 32);
        assert_eq!(cfg.model.decoder.depth, 4);
        assert_eq!(cfg.model.decoder.width, 64);
        assert_eq!(cfg.model.decoder.vocab, 32);
        assert_eq!(cfg.stages.len(), 3);
        assert_eq!(cfg.stages[0].id, StageId::S1_1);
        assert_eq!(cfg.stages[2].id, StageId::S2);
        assert!((cfg.model.packing.tau - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn full_2b_fixture_carries_published_shapes() {
        let cfg = preset("full-2b").unwrap();
        assert_eq!(cfg.model.encoder.depth, 24);
        assert_eq!(cfg.model.encoder.width, 1472);
        assert_eq!(cfg.model.encoder.mlp_width, 5888);
        assert_eq!(cfg.model.encoder.heads, 23);
        assert_eq!(cfg.model.decoder.width, 2048);
        assert_eq!(cfg.model.decoder.mlp_width, 8192);
        assert_eq!(cfg.model.decoder.heads, 16);
        let steps: Vec<usize> = cfg.stages.iter().map(|s| s.steps).collect();
        assert_eq!(steps, vec![70_000, 40_000, 30_000]);
        let batch: Vec<usize> = cfg.stages.iter().map(|s| s.batch_size).collect();
        assert_eq!(batch, vec![7000, 4614, 2234]);
        assert!(cfg.stages.iter().all(|s| s.warmup_steps == 200));
    }

    #[test]
    fn missing_field_error_names_the_field() {
        let broken = DESK_TINY.replace("steps = 60", "steps_typo = 60");
        let err = RunConfig::from_toml(&broken).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("steps"), "unhelpful error: {msg}");
    }

    #[test]
    fn validation_catches_grid_vocab_overflow() {
        let mut cfg = preset("desk-tiny").unwrap();
        cfg.data.grid.colors = 40; // needs vocab >= 46 > 32
        let err = cfg.validate().unwrap_err();
        assert!(format!("{err}").contains("colors"));
    }

    #[test]
    fn config_echo_roundtrips() {
        let cfg = preset("desk-tiny").unwrap();
        let echoed = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg.to_toml(), echoed.to_toml());
    }
}
