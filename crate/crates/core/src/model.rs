//! Whole-model assembly: parameter initialization, the end-to-end forward
//! pass (pyramid → encoder per scale → packing → decoder → loss) and the
//! plain-scalar loss entry point the finite-difference oracle drives.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::{ConfigError, DecoderConfig, EncoderConfig, ModelConfig};
use crate::decoder;
use crate::encoder;
use crate::packing::{self, Modality, PackError, PackedSequence, ScaleShape, SpecialTokens};
use crate::params::{ParamError, ParameterStore};
use crate::seed::{next_gaussian, SeedSplitter};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

pub const RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match config: {0}")]
    StoreMismatch(String),
}

/// Leaf node ids for every parameter, inserted in name order so tape layouts
/// are deterministic.
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn insert_all(tape: &mut Tape, store: &ParameterStore) -> Self {
        let mut map = BTreeMap::new();
        for (name, tensor) in store.iter() {
            map.insert(name.to_string(), tape.leaf(tensor.clone()));
        }
        Self { map }
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

/// One gaussian tensor from the parameter's own named stream, so a tensor's
/// init depends only on (seed, name, shape). Architectures that share a
/// sub-component get bitwise-identical weights for it, which is what lets
/// sweep points differ by architecture alone.
fn named_gaussian(init: &SeedSplitter, name: &str, shape: &[usize], std: f64) -> Tensor {
    let mut rng = init.stream(name);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| next_gaussian(&mut rng) * std).collect())
        .expect("finite init draw")
}

fn insert_encoder_params(store: &mut ParameterStore, cfg: &EncoderConfig, init: &SeedSplitter) {
    let w = cfg.width;
    let proj = |store: &mut ParameterStore, name: String, shape: &[usize]| {
        let t = named_gaussian(init, &name, shape, INIT_STD);
        store.insert(&name, t).unwrap();
    };
    proj(store, "enc.patch.w".into(), &[cfg.patch_dim(), w]);
    store.insert("enc.patch.b", Tensor::zeros(&[w])).unwrap();
    for l in 0..cfg.depth {
        for p in ["wq", "wk", "wv", "wo"] {
            proj(store, format!("enc.l{l}.attn.{p}"), &[w, w]);
        }
        store.insert(&format!("enc.l{l}.norm_attn"), Tensor::filled(&[w], 1.0)).unwrap();
        store.insert(&format!("enc.l{l}.norm_ffn"), Tensor::filled(&[w], 1.0)).unwrap();
        proj(store, format!("enc.l{l}.ffn.gate"), &[w, cfg.mlp_width]);
        proj(store, format!("enc.l{l}.ffn.up"), &[w, cfg.mlp_width]);
        proj(store, format!("enc.l{l}.ffn.down"), &[cfg.mlp_width, w]);
    }
    proj(store, "enc.conn.fc1.w".into(), &[cfg.shuffled_width(), cfg.out_width]);
    store.insert("enc.conn.fc1.b", Tensor::zeros(&[cfg.out_width])).unwrap();
    proj(store, "enc.conn.fc2.w".into(), &[cfg.out_width, cfg.out_width]);
    store.insert("enc.conn.fc2.b", Tensor::zeros(&[cfg.out_width])).unwrap();
}

fn insert_decoder_params(store: &mut ParameterStore, cfg: &DecoderConfig, init: &SeedSplitter) {
    let w = cfg.width;
    let proj = |store: &mut ParameterStore, name: String, shape: &[usize]| {
        let t = named_gaussian(init, &name, shape, INIT_STD);
        store.insert(&name, t).unwrap();
    };
    proj(store, "dec.embed".into(), &[cfg.vocab, w]);
    for l in 0..cfg.depth {
        for expert in ["visual", "linguistic"] {
            for p in ["wq", "wk", "wv", "wo"] {
                proj(store, format!("dec.l{l}.attn.{expert}.{p}"), &[w, w]);
            }
        }
        store.insert(&format!("dec.l{l}.norm_attn"), Tensor::filled(&[w], 1.0)).unwrap();
        store.insert(&format!("dec.l{l}.norm_ffn"), Tensor::filled(&[w], 1.0)).unwrap();
        for expert in ["visual", "linguistic"] {
            proj(store, format!("dec.l{l}.ffn.{expert}.gate"), &[w, cfg.mlp_width]);
            proj(store, format!("dec.l{l}.ffn.{expert}.up"), &[w, cfg.mlp_width]);
            proj(store, format!("dec.l{l}.ffn.{expert}.down"), &[cfg.mlp_width, w]);
        }
    }
    store.insert("dec.final_norm", Tensor::filled(&[w], 1.0)).unwrap();
    proj(store, "dec.head".into(), &[w, cfg.vocab]);
}

/// Fresh parameters: projections ~ N(0, 0.02), gains 1, biases 0. Every
/// tensor draws from its own (seed, name) stream.
pub fn init_params(cfg: &ModelConfig, init: &SeedSplitter) -> ParameterStore {
    let mut store = ParameterStore::new();
    insert_encoder_params(&mut store, &cfg.encoder, init);
    insert_decoder_params(&mut store, &cfg.decoder, init);
    store
}

/// Encoder-only store for unit tests.
pub fn init_encoder_params_standalone(cfg: &EncoderConfig, init: &SeedSplitter) -> ParameterStore {
    let mut store = ParameterStore::new();
    insert_encoder_params(&mut store, cfg, init);
    store
}

/// Decoder-only store for unit tests.
pub fn init_decoder_params_standalone(cfg: &DecoderConfig, init: &SeedSplitter) -> ParameterStore {
    let mut store = ParameterStore::new();
    insert_decoder_params(&mut store, cfg, init);
    store
}

/// Checks a (possibly loaded) store against the config: same names, same
/// shapes as a freshly initialized one.
pub fn check_store_matches(cfg: &ModelConfig, store: &ParameterStore) -> Result<(), ModelError> {
    let reference = init_params(cfg, &SeedSplitter::new(0).child("shape-probe"));
    if reference.names() != store.names() {
        return Err(ModelError::StoreMismatch(
            "parameter name set differs from config".into(),
        ));
    }
    for (name, tensor) in reference.iter() {
        let got = store.get(name)?;
        if got.shape() != tensor.shape() {
            return Err(ModelError::StoreMismatch(format!(
                "{name}: shape {:?} vs config {:?}",
                got.shape(),
                tensor.shape()
            )));
        }
    }
    Ok(())
}

/// One training/eval sample: an optional image plus caption token ids.
/// `image: None` is the pure-text path of the data mixture.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub image: Option<Tensor>,
    pub caption: Vec<u32>,
}

pub struct ForwardOutput {
    /// Mean masked NTP loss; `None` when the sequence has no loss positions.
    pub loss: Option<NodeId>,
    pub logits: NodeId,
    pub packed: PackedSequence,
    pub layer_probs: Vec<Vec<NodeId>>,
    pub final_hidden: NodeId,
}

impl ForwardOutput {
    /// RMS of the final hidden state, split by modality. The decoder paper
    /// motivation for attention experts is a visual/text feature-scale gap;
    /// this is the measurable it is logged as.
    pub fn modality_rms(&self, tape: &Tape) -> (f64, f64) {
        let hidden = tape.value(self.final_hidden);
        let w = hidden.last_dim();
        let mut acc = [0.0f64; 2];
        let mut count = [0usize; 2];
        for (i, slot) in self.packed.slots.iter().enumerate() {
            let idx = match slot.modality {
                Modality::Visual => 0,
                Modality::Linguistic => 1,
            };
            for &v in hidden.row(i) {
                acc[idx] += v * v;
            }
            count[idx] += w;
        }
        let rms = |i: usize| {
            if count[i] == 0 {
                0.0
            } else {
                (acc[i] / count[i] as f64).sqrt()
            }
        };
        (rms(0), rms(1))
    }
}

/// Builds the full forward graph for one sample on the given tape.
pub fn forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    input: &SampleInput,
) -> Result<ForwardOutput, ModelError> {
    let special = SpecialTokens::for_vocab(cfg.decoder.vocab);

    // Encode every pyramid scale.
    let mut scale_shapes: Vec<ScaleShape> = Vec::new();
    let mut scale_tokens: Vec<NodeId> = Vec::new();
    if let Some(image) = &input.image {
        let pyramid = packing::build_pyramid(image, cfg.packing.tau, cfg.packing.area_threshold)?;
        for scale in &pyramid.scales {
            let grid = encoder::encode_scale(tape, nodes, &cfg.encoder, scale)?;
            scale_shapes.push(ScaleShape::from_image_dims(
                scale.shape()[0],
                scale.shape()[1],
                cfg.encoder.patch_stride,
                cfg.encoder.shuffle_factor,
            ));
            scale_tokens.push(grid.tokens);
        }
    }

    let packed = packing::assemble_sequence(&scale_shapes, &input.caption, special)?;

    // Embed: text slots from the vocab table, visual slots from the
    // connector outputs, interleaved per the packed layout.
    let text_ids: Vec<usize> = packed.text_ids().iter().map(|&t| t as usize).collect();
    let text_embeds = tape.gather_rows(nodes.node("dec.embed"), &text_ids)?;

    let embeddings = if scale_tokens.is_empty() {
        text_embeds
    } else {
        let mut sources = vec![text_embeds];
        sources.extend(&scale_tokens);
        let mut picks = Vec::with_capacity(packed.len());
        let mut text_rank = 0usize;
        for slot in &packed.slots {
            match slot.kind {
                packing::SlotKind::Text { .. } => {
                    picks.push((0, text_rank));
                    text_rank += 1;
                }
                packing::SlotKind::Visual { scale, row, col } => {
                    let cols = packed.scales[scale].grid_cols;
                    picks.push((1 + scale, row * cols + col));
                }
            }
        }
        tape.compose_rows(&sources, &picks)?
    };

    let mask = packed.modality_mask();
    let positions = packed.positions();
    let out = decoder::decoder_forward(tape, nodes, &cfg.decoder, embeddings, &mask, &positions)?;

    let (targets, loss_mask) = packed.ntp_targets();
    let loss = if loss_mask.iter().any(|&m| m) {
        Some(tape.masked_cross_entropy(out.logits, &targets, &loss_mask)?)
    } else {
        None
    };

    Ok(ForwardOutput {
        loss,
        logits: out.logits,
        packed,
        layer_probs: out.layer_probs,
        final_hidden: out.final_hidden,
    })
}

/// Scalar loss of one sample as a plain function of the store — the exact
/// forward path, wrapped for the finite-difference oracle.
pub fn loss_value(
    store: &ParameterStore,
    cfg: &ModelConfig,
    input: &SampleInput,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert_all(&mut tape, store);
    let out = forward(&mut tape, &nodes, cfg, input).map_err(|e| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::ShapeMismatch {
            op: "loss_value",
            detail: other.to_string(),
        },
    })?;
    let loss = out.loss.ok_or(TensorError::ShapeMismatch {
        op: "loss_value",
        detail: "sample has no loss positions".into(),
    })?;
    Ok(tape.value(loss).item())
}
