//! MoE-extended causal decoder. Each token is projected by the weights of
//! its own modality's expert (attention q/k/v/o and the gated FFN both come
//! in a visual and a linguistic copy), then all tokens meet in one global
//! causal attention with 1-d rotary positions. Routing is deterministic by
//! modality label: exactly one expert path fires per token, so the activated
//! parameter count per token is independent of how many experts exist.

use crate::config::DecoderConfig;
use crate::layers;
use crate::model::{ParamNodes, RMS_EPS};
use crate::packing::Modality;
use crate::rope::DEFAULT_ROPE_BASE;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

/// Row routing for one sequence: which rows belong to which expert and how
/// to merge per-expert outputs back into sequence order.
struct Routing {
    /// groups[expert] = ascending row indices (empty groups are skipped).
    groups: Vec<(Modality, Vec<usize>)>,
    /// merge[i] = (present-group index, row within that group's output).
    merge: Vec<(usize, usize)>,
}

fn route(mask: &[Modality]) -> Routing {
    let mut vis = Vec::new();
    let mut lin = Vec::new();
    for (i, m) in mask.iter().enumerate() {
        match m {
            Modality::Visual => vis.push(i),
            Modality::Linguistic => lin.push(i),
        }
    }
    let mut groups = Vec::new();
    if !vis.is_empty() {
        groups.push((Modality::Visual, vis));
    }
    if !lin.is_empty() {
        groups.push((Modality::Linguistic, lin));
    }
    let mut merge = vec![(0usize, 0usize); mask.len()];
    for (g, (_, rows)) in groups.iter().enumerate() {
        for (r, &i) in rows.iter().enumerate() {
            merge[i] = (g, r);
        }
    }
    Routing { groups, merge }
}

fn expert_name(modality: Modality) -> &'static str {
    match modality {
        Modality::Visual => "visual",
        Modality::Linguistic => "linguistic",
    }
}

/// Applies `x[rows] · W_m` per expert and re-interleaves the outputs. With a
/// single modality present this degenerates to one plain matmul.
fn routed_matmul(
    tape: &mut Tape,
    x: NodeId,
    routing: &Routing,
    weight_for: impl Fn(Modality) -> NodeId,
) -> Result<NodeId, TensorError> {
    let mut outs = Vec::with_capacity(routing.groups.len());
    for (modality, rows) in &routing.groups {
        let picks: Vec<(usize, usize)> = rows.iter().map(|&r| (0, r)).collect();
        let sub = if rows.len() == tape.value(x).rows() {
            x // whole sequence, skip the copy
        } else {
            tape.compose_rows(&[x], &picks)?
        };
        outs.push(tape.matmul(sub, weight_for(*modality))?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.compose_rows(&outs, &routing.merge)
}

pub struct AttentionResult {
    pub out: NodeId,
    pub head_probs: Vec<NodeId>,
}

/// Modality-expert attention: per-token q/k/v/o projections from the token's
/// own expert, one unified global attention over the whole sequence.
pub fn mmoe_attention(
    tape: &mut Tape,
    nodes: &ParamNodes,
    layer: usize,
    x: NodeId,
    mask: &[Modality],
    positions: &[i64],
    cfg: &DecoderConfig,
    causal: bool,
) -> Result<AttentionResult, TensorError> {
    if mask.len() != tape.value(x).rows() {
        return Err(TensorError::ShapeMismatch {
            op: "mmoe_attention",
            detail: format!("{} mask labels for {} rows", mask.len(), tape.value(x).rows()),
        });
    }
    let routing = route(mask);
    let w = |proj: &str, m: Modality| nodes.node(&format!("dec.l{layer}.attn.{}.{proj}", expert_name(m)));

    let q = routed_matmul(tape, x, &routing, |m| w("wq", m))?;
    let k = routed_matmul(tape, x, &routing, |m| w("wk", m))?;
    let v = routed_matmul(tape, x, &routing, |m| w("wv", m))?;
    let qr = tape.rope_1d(q, cfg.heads, positions, DEFAULT_ROPE_BASE)?;
    let kr = tape.rope_1d(k, cfg.heads, positions, DEFAULT_ROPE_BASE)?;
    let attn = layers::multi_head_attention(tape, qr, kr, v, cfg.heads, causal)?;
    let out = routed_matmul(tape, attn.out, &routing, |m| w("wo", m))?;
    Ok(AttentionResult { out, head_probs: attn.head_probs })
}

/// Modality-expert gated FFN, same routing scheme.
pub fn mmoe_ffn(
    tape: &mut Tape,
    nodes: &ParamNodes,
    layer: usize,
    x: NodeId,
    mask: &[Modality],
) -> Result<NodeId, TensorError> {
    if mask.len() != tape.value(x).rows() {
        return Err(TensorError::ShapeMismatch {
            op: "mmoe_ffn",
            detail: format!("{} mask labels for {} rows", mask.len(), tape.value(x).rows()),
        });
    }
    let routing = route(mask);
    let w = |proj: &str, m: Modality| nodes.node(&format!("dec.l{layer}.ffn.{}.{proj}", expert_name(m)));

    let mut outs = Vec::with_capacity(routing.groups.len());
    for (modality, rows) in &routing.groups {
        let picks: Vec<(usize, usize)> = rows.iter().map(|&r| (0, r)).collect();
        let sub = if rows.len() == mask.len() {
            x
        } else {
            tape.compose_rows(&[x], &picks)?
        };
        outs.push(layers::gated_ffn(
            tape,
            sub,
            w("gate", *modality),
            w("up", *modality),
            w("down", *modality),
        )?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.compose_rows(&outs, &routing.merge)
}

pub struct LayerResult {
    pub x: NodeId,
    pub head_probs: Vec<NodeId>,
}

/// Pre-norm block: `x' = x + attn(norm(x)); x = x' + ffn(norm(x'))`.
pub fn decoder_layer(
    tape: &mut Tape,
    nodes: &ParamNodes,
    layer: usize,
    x: NodeId,
    mask: &[Modality],
    positions: &[i64],
    cfg: &DecoderConfig,
) -> Result<LayerResult, TensorError> {
    let normed = tape.rmsnorm(x, nodes.node(&format!("dec.l{layer}.norm_attn")), RMS_EPS)?;
    let attn = mmoe_attention(tape, nodes, layer, normed, mask, positions, cfg, true)?;
    let x = tape.add(x, attn.out)?;

    let normed = tape.rmsnorm(x, nodes.node(&format!("dec.l{layer}.norm_ffn")), RMS_EPS)?;
    let ffn = mmoe_ffn(tape, nodes, layer, normed, mask)?;
    let x = tape.add(x, ffn)?;
    Ok(LayerResult { x, head_probs: attn.head_probs })
}

pub struct DecoderOutput {
    pub logits: NodeId,
    /// Hidden state entering the final norm, for activation statistics.
    pub final_hidden: NodeId,
    /// Per layer, per head attention probabilities.
    pub layer_probs: Vec<Vec<NodeId>>,
}

/// Full decoder: layers, final norm, LM head. Depth 0 degenerates to
/// `head(norm(embeddings))`.
pub fn decoder_forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &DecoderConfig,
    embeddings: NodeId,
    mask: &[Modality],
    positions: &[i64],
) -> Result<DecoderOutput, TensorError> {
    let mut x = embeddings;
    let mut layer_probs = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let out = decoder_layer(tape, nodes, l, x, mask, positions, cfg)?;
        x = out.x;
        layer_probs.push(out.head_probs);
    }
    let final_hidden = x;
    let normed = tape.rmsnorm(x, nodes.node("dec.final_norm"), RMS_EPS)?;
    let logits = tape.matmul(normed, nodes.node("dec.head"))?;
    Ok(DecoderOutput { logits, final_hidden, layer_probs })
}

/// Scalar parameters touched by one token's forward path: its own expert's
/// attention and FFN matrices plus the shared norms, embedding row and head.
/// Independent of how many experts the layer stores.
pub fn activated_params_per_token(cfg: &DecoderConfig) -> usize {
    let w = cfg.width;
    let per_layer_attn = 4 * w * w;
    let per_layer_ffn = 3 * w * cfg.mlp_width;
    let per_layer_norms = 2 * w;
    cfg.depth * (per_layer_attn + per_layer_ffn + per_layer_norms) + w /* embed row */
        + w /* final norm */
        + w * cfg.vocab
}

/// Head-averaged attention mass between modality blocks: `[vv, vt, tv, tt]`.
/// Each entry is the average total probability a source-block token assigns
/// to the target block, so present-source rows sum to 1; absent-source rows
/// are zero.
pub fn aggregate_blocks(head_probs: &[Tensor], mask: &[Modality]) -> [f64; 4] {
    let seq = mask.len();
    let vis: Vec<usize> = (0..seq).filter(|&i| mask[i] == Modality::Visual).collect();
    let lin: Vec<usize> = (0..seq).filter(|&i| mask[i] == Modality::Linguistic).collect();

    let mut avg = Tensor::zeros(&[seq, seq]);
    for p in head_probs {
        for (d, s) in avg.data_mut().iter_mut().zip(p.data()) {
            *d += s;
        }
    }
    let inv = 1.0 / head_probs.len() as f64;
    for v in avg.data_mut() {
        *v *= inv;
    }

    let block = |src: &[usize], dst: &[usize]| -> f64 {
        if src.is_empty() {
            return 0.0;
        }
        let mut acc = 0.0;
        for &i in src {
            for &j in dst {
                acc += avg.at2(i, j);
            }
        }
        acc / src.len() as f64
    };
    [
        block(&vis, &vis),
        block(&vis, &lin),
        block(&lin, &vis),
        block(&lin, &lin),
    ]
}

/// Per-layer block aggregation of a forward pass's attention maps.
pub fn attention_stats(
    tape: &Tape,
    layer_probs: &[Vec<NodeId>],
    mask: &[Modality],
) -> Vec<[f64; 4]> {
    layer_probs
        .iter()
        .map(|heads| {
            let tensors: Vec<Tensor> = heads.iter().map(|&h| tape.value(h).clone()).collect();
            aggregate_blocks(&tensors, mask)
        })
        .collect()
}
