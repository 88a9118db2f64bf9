//! Scaling lab: the 12·d·w² parameter budget and its inverse, the published
//! depth/width sweep grid, the λ-rule for picking the optimal encoder size
//! from a doubling ladder, log-linear least squares, and a desk-scale sweep
//! runner that trains one tiny model per grid point.

use thiserror::Error;

use crate::config::{DecoderConfig, EncoderConfig, ModelConfig, PackingConfig};
use crate::train::{
    self, AdamHyper, DataSpec, GridSpec, ScheduleKind, StageId, StageSchedule, TrainOptions,
};

#[derive(Debug, Error)]
pub enum ScalingError {
    #[error("ladder must have at least two entries")]
    LadderTooShort,
    #[error("ladder sizes must double: {prev} -> {next}")]
    LadderNotDoubling { prev: u64, next: u64 },
    #[error("need at least two points to fit")]
    TooFewPoints,
    #[error("degenerate fit: all x values equal")]
    DegenerateX,
    #[error("log fit requires positive values, got {0}")]
    NonPositive(f64),
    #[error(
        "sweep point failed (encoder {encoder_params}, llm {llm_params}, data {data_size}): {message}"
    )]
    PointFailed {
        encoder_params: u64,
        llm_params: u64,
        data_size: usize,
        message: String,
    },
}

/// Transformer-stack parameter budget: N = 12·d·w².
pub fn param_count(d: u64, w: u64) -> u64 {
    12 * d * w * w
}

/// Inverse of the budget at fixed depth: √(N / 12d), rounded to the nearest
/// positive multiple of `multiple` (the head-count granularity).
pub fn width_for_budget(n: u64, d: u64, multiple: u64) -> u64 {
    assert!(n > 0 && d > 0 && multiple > 0);
    let raw = (n as f64 / (12.0 * d as f64)).sqrt();
    let rounded = (raw / multiple as f64).round() as u64;
    rounded.max(1) * multiple
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub d: usize,
    pub w: usize,
    pub n_target: u64,
}

/// The published iso-budget depth/width grid, ~0.6B per point.
pub fn sweep_grid() -> Vec<SweepPoint> {
    const N_TARGET: u64 = 603_979_776; // 12 · 12 · 2048²
    [(3usize, 4096usize), (6, 2880), (12, 2048), (24, 1472), (48, 1024)]
        .into_iter()
        .map(|(d, w)| SweepPoint { d, w, n_target: N_TARGET })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderChoice {
    pub size: u64,
    /// False when no ladder entry qualified (every doubling still paid off);
    /// the returned size is then the largest available.
    pub saturated: bool,
}

/// Smallest ladder size whose loss improvement from doubling falls below
/// `lambda` times the base (smallest-entry) loss. Strictly-below comparison;
/// ladder sizes must double exactly.
pub fn optimal_encoder_size(
    ladder: &[(u64, f64)],
    lambda: f64,
) -> Result<LadderChoice, ScalingError> {
    if ladder.len() < 2 {
        return Err(ScalingError::LadderTooShort);
    }
    for pair in ladder.windows(2) {
        if pair[1].0 != pair[0].0 * 2 {
            return Err(ScalingError::LadderNotDoubling { prev: pair[0].0, next: pair[1].0 });
        }
    }
    let threshold = lambda * ladder[0].1;
    for pair in ladder.windows(2) {
        if pair[0].1 - pair[1].1 < threshold {
            return Ok(LadderChoice { size: pair[0].0, saturated: true });
        }
    }
    Ok(LadderChoice { size: ladder.last().unwrap().0, saturated: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares y ≈ slope·x + intercept.
pub fn fit_line(points: &[(f64, f64)]) -> Result<LineFit, ScalingError> {
    if points.len() < 2 {
        return Err(ScalingError::TooFewPoints);
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(ScalingError::DegenerateX);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for &(x, y) in points {
        let fit = slope * x + intercept;
        ss_res += (y - fit) * (y - fit);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LineFit { slope, intercept, r2 })
}

/// Least squares on (ln x, y): loss against a size axis.
pub fn fit_loglinear(points: &[(f64, f64)]) -> Result<LineFit, ScalingError> {
    let transformed: Result<Vec<(f64, f64)>, ScalingError> = points
        .iter()
        .map(|&(x, y)| {
            if x <= 0.0 {
                Err(ScalingError::NonPositive(x))
            } else {
                Ok((x.ln(), y))
            }
        })
        .collect();
    fit_line(&transformed?)
}

/// Least squares on (ln x, ln y): size against size.
pub fn fit_loglog(points: &[(f64, f64)]) -> Result<LineFit, ScalingError> {
    let transformed: Result<Vec<(f64, f64)>, ScalingError> = points
        .iter()
        .map(|&(x, y)| {
            if x <= 0.0 {
                Err(ScalingError::NonPositive(x))
            } else if y <= 0.0 {
                Err(ScalingError::NonPositive(y))
            } else {
                Ok((x.ln(), y.ln()))
            }
        })
        .collect();
    fit_line(&transformed?)
}

// ── sweep runner ───────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ComponentLadder {
    pub depth: usize,
    pub heads: usize,
    /// Nominal 12·d·w² budgets; widths are solved per budget.
    pub budgets: Vec<u64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepSpec {
    pub encoder: ComponentLadder,
    pub decoder: ComponentLadder,
    pub data_sizes: Vec<usize>,
    pub n_val: usize,
    /// One training run per seed; the recorded loss is the median.
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub vocab: usize,
    pub grid: GridSpec,
    pub packing: PackingConfig,
    /// Worker threads for independent points (1 = sequential).
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalingRecord {
    pub encoder_params: u64,
    pub llm_params: u64,
    pub data_size: usize,
    pub val_loss: f64,
}

/// Gated-FFN width that lands the per-layer parameter count on 12·w²
/// (attention contributes 4w², the FFN 3·mlp·w).
pub fn mlp_width_for(w: usize) -> usize {
    (8 * w).div_ceil(3)
}

/// Encoder shape realizing a nominal budget at fixed depth/heads. Width
/// granularity is 4·heads so the 2-d rotary head-dim constraint holds.
pub fn encoder_for_budget(ladder: &ComponentLadder, budget: u64, out_width: usize) -> EncoderConfig {
    let w = width_for_budget(budget, ladder.depth as u64, 4 * ladder.heads as u64) as usize;
    EncoderConfig {
        depth: ladder.depth,
        width: w,
        mlp_width: mlp_width_for(w),
        heads: ladder.heads,
        patch_stride: 16,
        shuffle_factor: 2,
        out_width,
    }
}

/// Decoder shape realizing a nominal activated-path budget.
pub fn decoder_for_budget(ladder: &ComponentLadder, budget: u64, vocab: usize) -> DecoderConfig {
    let w = width_for_budget(budget, ladder.depth as u64, 2 * ladder.heads as u64) as usize;
    DecoderConfig {
        depth: ladder.depth,
        width: w,
        mlp_width: mlp_width_for(w),
        heads: ladder.heads,
        vocab,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn run_point(
    spec: &SweepSpec,
    enc_budget: u64,
    dec_budget: u64,
    data_size: usize,
) -> Result<ScalingRecord, ScalingError> {
    let fail = |message: String| ScalingError::PointFailed {
        encoder_params: enc_budget,
        llm_params: dec_budget,
        data_size,
        message,
    };
    let decoder = decoder_for_budget(&spec.decoder, dec_budget, spec.vocab);
    let encoder = encoder_for_budget(&spec.encoder, enc_budget, decoder.width);
    let model = ModelConfig { encoder, decoder, packing: spec.packing.clone() };
    model.validate().map_err(|e| fail(e.to_string()))?;

    let mut losses = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let opts = TrainOptions {
            model: model.clone(),
            stages: vec![StageSchedule {
                id: StageId::S2,
                steps: spec.steps,
                batch_size: spec.batch_size,
                peak_lr: spec.peak_lr,
                warmup_steps: spec.warmup_steps,
                // decay to zero so the recorded loss is the settled floor of
                // the configuration, not the optimizer's noise level
                schedule: ScheduleKind::CosineWithWarmup,
                weight_decay: spec.weight_decay,
            }],
            data: DataSpec {
                n_train: data_size,
                n_val: spec.n_val,
                grid: spec.grid,
                text_ratio: 0.0,
            },
            adam: AdamHyper::default(),
            eval_interval: usize::MAX, // final evaluation only
            seed,
        };
        let result = train::run_training(&opts, |_| {}).map_err(|e| fail(e.to_string()))?;
        losses.push(result.final_val_loss);
    }
    Ok(ScalingRecord {
        encoder_params: enc_budget,
        llm_params: dec_budget,
        data_size,
        val_loss: median(losses),
    })
}

/// Trains every (encoder budget × decoder budget × data size) point with the
/// shared seed set and records the median validation loss. Points are
/// independent; execution may be parallel, output order is sorted.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<ScalingRecord>, ScalingError> {
    let mut points = Vec::new();
    for &e in &spec.encoder.budgets {
        for &d in &spec.decoder.budgets {
            for &n in &spec.data_sizes {
                points.push((e, d, n));
            }
        }
    }

    let threads = spec.threads.max(1).min(points.len().max(1));
    let mut records: Vec<Option<Result<ScalingRecord, ScalingError>>> =
        (0..points.len()).map(|_| None).collect();

    if threads <= 1 {
        for (slot, &(e, d, n)) in records.iter_mut().zip(&points) {
            *slot = Some(run_point(spec, e, d, n));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<ScalingRecord, ScalingError>>>> =
            (0..points.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= points.len() {
                        break;
                    }
                    let (e, d, n) = points[i];
                    *slots[i].lock().unwrap() = Some(run_point(spec, e, d, n));
                });
            }
        });
        for (slot, cell) in records.iter_mut().zip(slots) {
            *slot = cell.into_inner().unwrap();
        }
    }

    let mut out = Vec::with_capacity(points.len());
    for r in records {
        out.push(r.expect("every point executed")?);
    }
    out.sort_by(|a, b| {
        (a.encoder_params, a.llm_params, a.data_size).cmp(&(
            b.encoder_params,
            b.llm_params,
            b.data_size,
        ))
    });
    Ok(out)
}
