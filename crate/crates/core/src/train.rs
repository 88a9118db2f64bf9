//! Next-token-prediction training: the three-stage freeze schedule, AdamW,
//! the synthetic captioning task and the metrics stream.
//!
//! Freeze stages widen monotonically:
//!   s1.1  vision tower + visual experts only (all textual weights frozen)
//!   s1.2  additionally the text attention projections
//!   s2    everything
//!
//! All randomness comes from named streams of one root seed (init / data /
//! order / mix), so two runs with the same options produce identical loss
//! sequences byte for byte.

use std::collections::BTreeMap;

use rand_core::RngCore;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::model::{self, ModelError, ParamNodes, SampleInput};
use crate::params::{ParamGroup, ParameterStore};
use crate::seed::SeedSplitter;
use crate::tape::Tape;
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at stage {stage} step {step}")]
    NonFiniteLoss { stage: &'static str, step: usize },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── stages ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StageId {
    #[serde(rename = "s1.1")]
    S1_1,
    #[serde(rename = "s1.2")]
    S1_2,
    #[serde(rename = "s2")]
    S2,
}

impl StageId {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageId::S1_1 => "s1.1",
            StageId::S1_2 => "s1.2",
            StageId::S2 => "s2",
        }
    }

    pub fn parse(s: &str) -> Option<StageId> {
        match s {
            "s1.1" => Some(StageId::S1_1),
            "s1.2" => Some(StageId::S1_2),
            "s2" => Some(StageId::S2),
            _ => None,
        }
    }
}

/// Trainable groups per stage; each stage strictly contains the previous.
pub fn stage_groups(stage: StageId) -> Vec<ParamGroup> {
    match stage {
        StageId::S1_1 => vec![ParamGroup::Vision, ParamGroup::VisualExperts],
        StageId::S1_2 => vec![
            ParamGroup::Vision,
            ParamGroup::VisualExperts,
            ParamGroup::TextAttn,
        ],
        StageId::S2 => crate::params::ALL_GROUPS.to_vec(),
    }
}

pub fn apply_stage(stage: StageId, store: &mut ParameterStore) {
    store.set_trainable_groups(&stage_groups(stage));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    ConstantWithWarmup,
    CosineWithWarmup,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StageSchedule {
    pub id: StageId,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub schedule: ScheduleKind,
    pub weight_decay: f64,
}

/// Learning rate at a 0-indexed step of a stage.
pub fn lr_at(sched: &StageSchedule, step: usize) -> f64 {
    if step < sched.warmup_steps {
        return sched.peak_lr * (step + 1) as f64 / sched.warmup_steps as f64;
    }
    match sched.schedule {
        ScheduleKind::ConstantWithWarmup => sched.peak_lr,
        ScheduleKind::CosineWithWarmup => {
            let span = sched.steps.saturating_sub(sched.warmup_steps).max(1);
            let progress = (step - sched.warmup_steps) as f64 / span as f64;
            sched.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

// ── optimizer ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// Norm gains and biases train without weight decay.
pub fn weight_decay_exempt(name: &str) -> bool {
    name.ends_with(".b") || name.contains("norm")
}

pub struct AdamW {
    hyper: AdamHyper,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    t: u64,
}

impl AdamW {
    pub fn new(hyper: AdamHyper) -> Self {
        Self { hyper, moments: BTreeMap::new(), t: 0 }
    }

    /// One decoupled-weight-decay update over the trainable groups. Absent
    /// gradients are treated as zero (the moments still decay).
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hyper.beta2.powi(self.t as i32);
        for name in store.names() {
            if !store.is_trainable(&name).unwrap_or(false) {
                continue;
            }
            let shape = store.get(&name).unwrap().shape().to_vec();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let zero;
            let g = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(&shape);
                    &zero
                }
            };
            let wd = if weight_decay_exempt(&name) { 0.0 } else { weight_decay };
            let theta = store.get_mut(&name).unwrap();
            let (b1, b2, eps) = (self.hyper.beta1, self.hyper.beta2, self.hyper.eps);
            for i in 0..theta.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                let base = theta.data()[i];
                theta.data_mut()[i] = base - lr * update - lr * wd * base;
            }
        }
    }
}

// ── the synthetic captioning task ──────────────────────────────────────

pub const PAD_TOKEN: u32 = 0;
pub const CAPTION_END: u32 = 1;
pub const COLOR_BASE: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    /// Blocks per side.
    pub grid: usize,
    /// Palette size.
    pub colors: usize,
    /// Square image side in pixels.
    pub image_size: usize,
}

impl GridSpec {
    pub fn caption_len(&self) -> usize {
        self.grid * self.grid + 1
    }

    /// Smallest vocabulary that fits pad, end, the palette and the four
    /// structural tokens.
    pub fn min_vocab(&self) -> usize {
        (COLOR_BASE as usize) + self.colors + 4
    }
}

/// Saturated hue wheel; distinct for any sane palette size.
pub fn palette_color(index: usize, colors: usize) -> [f64; 3] {
    let h = index as f64 / colors as f64 * 6.0;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Tensor,
    pub caption: Vec<u32>,
}

/// Deterministic colored-block images with row-major color captions ending
/// in `CAPTION_END`.
pub fn gen_synthetic(seed: u64, n: usize, spec: &GridSpec) -> Vec<SyntheticSample> {
    assert!(spec.grid >= 1 && spec.colors >= 1);
    assert!(
        spec.image_size % spec.grid == 0,
        "image size {} not divisible by grid {}",
        spec.image_size,
        spec.grid
    );
    let mut rng = SeedSplitter::new(seed).stream("synthetic");
    let block = spec.image_size / spec.grid;
    let side = spec.image_size;
    (0..n)
        .map(|_| {
            let picks: Vec<usize> = (0..spec.grid * spec.grid)
                .map(|_| (rng.next_u64() % spec.colors as u64) as usize)
                .collect();
            let mut data = vec![0.0; side * side * 3];
            for (b, &color) in picks.iter().enumerate() {
                let (br, bc) = (b / spec.grid, b % spec.grid);
                let rgb = palette_color(color, spec.colors);
                for y in br * block..(br + 1) * block {
                    for x in bc * block..(bc + 1) * block {
                        let off = (y * side + x) * 3;
                        data[off] = rgb[0];
                        data[off + 1] = rgb[1];
                        data[off + 2] = rgb[2];
                    }
                }
            }
            let mut caption: Vec<u32> =
                picks.iter().map(|&c| COLOR_BASE + c as u32).collect();
            caption.push(CAPTION_END);
            SyntheticSample {
                image: Tensor::new(vec![side, side, 3], data).unwrap(),
                caption,
            }
        })
        .collect()
}

/// Rule-based inverse of the generator: reads one pixel per block and maps
/// it back to the nearest palette color. Used as the round-trip oracle.
pub fn caption_from_image(image: &Tensor, spec: &GridSpec) -> Vec<u32> {
    let side = spec.image_size;
    let block = side / spec.grid;
    let mut caption = Vec::with_capacity(spec.caption_len());
    for br in 0..spec.grid {
        for bc in 0..spec.grid {
            let y = br * block + block / 2;
            let x = bc * block + block / 2;
            let off = (y * side + x) * 3;
            let px = [image.data()[off], image.data()[off + 1], image.data()[off + 2]];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..spec.colors {
                let rgb = palette_color(c, spec.colors);
                let d: f64 = (0..3).map(|i| (px[i] - rgb[i]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            caption.push(COLOR_BASE + best as u32);
        }
    }
    caption.push(CAPTION_END);
    caption
}

// ── losses and steps ───────────────────────────────────────────────────

/// Mean cross-entropy of one-ahead targets over masked positions.
pub fn ntp_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64, TensorError> {
    Ok(tensor::masked_cross_entropy(logits, targets, mask)?.item())
}

pub struct StepStats {
    pub loss: f64,
    pub visual_rms: f64,
    pub linguistic_rms: f64,
}

/// One forward/backward/update over a batch. Per-sample gradients accumulate
/// in batch order and are averaged; only trainable groups are updated.
pub fn train_step(
    batch: &[&SampleInput],
    store: &mut ParameterStore,
    cfg: &ModelConfig,
    optimizer: &mut AdamW,
    lr: f64,
    weight_decay: f64,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut loss_acc = 0.0;
    let mut vis_acc = 0.0;
    let mut lin_acc = 0.0;
    for sample in batch {
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert_all(&mut tape, store);
        let out = model::forward(&mut tape, &nodes, cfg, sample)?;
        let loss = out.loss.ok_or(TrainError::EmptyBatch)?;
        loss_acc += tape.value(loss).item();
        let (v, l) = out.modality_rms(&tape);
        vis_acc += v;
        lin_acc += l;

        let grads = tape.backward(loss)?;
        for (name, node) in nodes.iter() {
            if let Some(g) = grads.get(node) {
                match grad_acc.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grad_acc.insert(name.to_string(), g.clone());
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in grad_acc.values_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    optimizer.step(store, &grad_acc, lr, weight_decay);
    Ok(StepStats {
        loss: loss_acc * inv,
        visual_rms: vis_acc * inv,
        linguistic_rms: lin_acc * inv,
    })
}

/// Mean per-sample NTP loss over a held-out set; no updates, pure in the
/// store.
pub fn validation_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    samples: &[SampleInput],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let mut acc = 0.0;
    for s in samples {
        acc += model::loss_value(store, cfg, s)?;
    }
    Ok(acc / samples.len() as f64)
}

// ── data pipeline ──────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DataSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub grid: GridSpec,
    /// Fraction of training samples presented caption-only (image dropped),
    /// the multimodal : pure-text mixture knob. Default 0.
    #[serde(default)]
    pub text_ratio: f64,
}

pub struct Dataset {
    pub train: Vec<SampleInput>,
    pub val: Vec<SampleInput>,
}

/// Materializes train/val sets from the data streams of `splitter`.
pub fn build_dataset(splitter: &SeedSplitter, spec: &DataSpec) -> Dataset {
    let train_raw = gen_synthetic(splitter.derive_u64("data/train"), spec.n_train, &spec.grid);
    let val_raw = gen_synthetic(splitter.derive_u64("data/val"), spec.n_val, &spec.grid);
    let mut mix = splitter.stream("mix");
    let train = train_raw
        .into_iter()
        .map(|s| {
            let text_only = crate::seed::next_f64(&mut mix) < spec.text_ratio;
            SampleInput {
                image: if text_only { None } else { Some(s.image) },
                caption: s.caption,
            }
        })
        .collect();
    let val = val_raw
        .into_iter()
        .map(|s| SampleInput { image: Some(s.image), caption: s.caption })
        .collect();
    Dataset { train, val }
}

/// Endless shuffled-epoch index stream.
struct EpochIter {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha12Rng,
}

impl EpochIter {
    fn new(n: usize, rng: rand_chacha::ChaCha12Rng) -> Self {
        Self { order: (0..n).collect(), cursor: n, rng }
    }

    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            // Fisher-Yates
            for i in (1..self.order.len()).rev() {
                let j = (self.rng.next_u64() % (i as u64 + 1)) as usize;
                self.order.swap(i, j);
            }
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

// ── full run driver ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub stages: Vec<StageSchedule>,
    pub data: DataSpec,
    pub adam: AdamHyper,
    /// Validation every this many global steps (and always at the end).
    pub eval_interval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: &'static str,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub visual_rms: f64,
    pub linguistic_rms: f64,
}

pub struct TrainResult {
    pub store: ParameterStore,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

/// Runs the stage list in order on a freshly initialized model, streaming
/// one metrics row per step into `sink`. Deterministic per (options, seed).
pub fn run_training(
    opts: &TrainOptions,
    mut sink: impl FnMut(&MetricsRow),
) -> Result<TrainResult, TrainError> {
    let splitter = SeedSplitter::new(opts.seed);
    let mut store = model::init_params(&opts.model, &splitter.child("init"));
    let data = build_dataset(&splitter, &opts.data);
    if data.val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let mut order = EpochIter::new(data.train.len(), splitter.stream("order"));

    let initial_val_loss = validation_loss(&store, &opts.model, &data.val)?;
    let mut global_step = 0usize;
    let mut last_val = initial_val_loss;

    for stage in &opts.stages {
        apply_stage(stage.id, &mut store);
        let mut optimizer = AdamW::new(opts.adam);
        for step in 0..stage.steps {
            let batch: Vec<&SampleInput> = (0..stage.batch_size)
                .map(|_| &data.train[order.next_index()])
                .collect();
            let lr = lr_at(stage, step);
            let stats = train_step(
                &batch,
                &mut store,
                &opts.model,
                &mut optimizer,
                lr,
                stage.weight_decay,
            )?;
            if !stats.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { stage: stage.id.as_str(), step });
            }
            global_step += 1;
            let is_last =
                std::ptr::eq(stage, opts.stages.last().unwrap()) && step + 1 == stage.steps;
            let val_loss = if global_step % opts.eval_interval.max(1) == 0 || is_last {
                let v = validation_loss(&store, &opts.model, &data.val)?;
                last_val = v;
                Some(v)
            } else {
                None
            };
            sink(&MetricsRow {
                step: global_step,
                stage: stage.id.as_str(),
                train_loss: stats.loss,
                val_loss,
                visual_rms: stats.visual_rms,
                linguistic_rms: stats.linguistic_rms,
            });
        }
    }
    Ok(TrainResult { store, initial_val_loss, final_val_loss: last_val })
}
