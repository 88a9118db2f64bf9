//! Independent vanilla-transformer reference used by the equivalence tests:
//! a plain-loop, tape-free forward pass of the same architecture with a
//! single expert set (it reads only the linguistic weights). When the two
//! experts of the main model are tied, its logits must match this
//! implementation bit for bit, because every kernel here follows the same
//! scalar operation order as the tape kernels without sharing their code.
//!
//! Compiled only for tests (feature `testkit`).

use crate::config::ModelConfig;
use crate::model::{SampleInput, RMS_EPS};
use crate::packing::{self, SlotKind, SpecialTokens};
use crate::params::ParameterStore;
use crate::rope::DEFAULT_ROPE_BASE;
use crate::tensor::Tensor;

fn linear(x: &Tensor, w: &Tensor) -> Tensor {
    let (m, k) = (x.rows(), x.last_dim());
    let n = w.last_dim();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += x.at2(i, kk) * w.at2(kk, j);
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let w = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(w) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn rms_norm(x: &Tensor, gain: &Tensor) -> Tensor {
    let w = x.last_dim();
    let mut out = vec![0.0; x.numel()];
    for (r, row) in x.data().chunks_exact(w).enumerate() {
        let mut ms = 0.0;
        for &v in row {
            ms += v * v;
        }
        ms /= w as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (c, &v) in row.iter().enumerate() {
            out[r * w + c] = v * inv * gain.data()[c];
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn silu_scalar(v: f64) -> f64 {
    v * (1.0 / (1.0 + (-v).exp()))
}

fn rotate_half(chunk: &mut [f64], pos: f64, dim: usize) {
    for i in 0..dim / 2 {
        let theta = pos * DEFAULT_ROPE_BASE.powf(-2.0 * i as f64 / dim as f64);
        let (sin, cos) = theta.sin_cos();
        let a = chunk[2 * i];
        let b = chunk[2 * i + 1];
        chunk[2 * i] = a * cos - b * sin;
        chunk[2 * i + 1] = a * sin + b * cos;
    }
}

fn rope_1d(x: &Tensor, heads: usize, positions: &[i64]) -> Tensor {
    let w = x.last_dim();
    let hd = w / heads;
    let mut out = x.data().to_vec();
    for (s, &pos) in positions.iter().enumerate() {
        for h in 0..heads {
            let off = s * w + h * hd;
            rotate_half(&mut out[off..off + hd], pos as f64, hd);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn rope_2d(x: &Tensor, heads: usize, rows: &[i64], cols: &[i64]) -> Tensor {
    let w = x.last_dim();
    let hd = w / heads;
    let half = hd / 2;
    let mut out = x.data().to_vec();
    for s in 0..rows.len() {
        for h in 0..heads {
            let off = s * w + h * hd;
            rotate_half(&mut out[off..off + half], rows[s] as f64, half);
            rotate_half(&mut out[off + half..off + hd], cols[s] as f64, half);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Multi-head attention; returns (output, per-head probability matrices).
fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> (Tensor, Vec<Tensor>) {
    let seq = q.rows();
    let width = q.last_dim();
    let hd = width / heads;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; seq * width];
    let mut all_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let base = h * hd;
        let mut probs = vec![0.0; seq * seq];
        for i in 0..seq {
            let limit = if causal { i + 1 } else { seq };
            let mut row = vec![0.0; limit];
            for (j, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..hd {
                    acc += q.at2(i, base + d) * k.at2(j, base + d);
                }
                *slot = acc * inv_sqrt;
            }
            let mut max = f64::NEG_INFINITY;
            for &s in &row {
                if s > max {
                    max = s;
                }
            }
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            for (j, &p) in row.iter().enumerate() {
                probs[i * seq + j] = p;
            }
            for d in 0..hd {
                let mut acc = 0.0;
                for (j, &p) in row.iter().enumerate() {
                    acc += p * v.at2(j, base + d);
                }
                out[i * width + base + d] = acc;
            }
        }
        all_probs.push(Tensor::new(vec![seq, seq], probs).unwrap());
    }
    (Tensor::new(vec![seq, width], out).unwrap(), all_probs)
}

fn gated_ffn(x: &Tensor, gate: &Tensor, up: &Tensor, down: &Tensor) -> Tensor {
    let g = linear(x, gate);
    let u = linear(x, up);
    let mut hidden = vec![0.0; g.numel()];
    for (i, h) in hidden.iter_mut().enumerate() {
        *h = silu_scalar(g.data()[i]) * u.data()[i];
    }
    let hidden = Tensor::new(g.shape().to_vec(), hidden).unwrap();
    linear(&hidden, down)
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

pub struct VanillaForward {
    pub logits: Tensor,
    /// Per decoder layer, per head attention probabilities.
    pub layer_probs: Vec<Vec<Tensor>>,
    pub packed: packing::PackedSequence,
}

/// Full vanilla forward: vision tower, connector, single-expert causal
/// decoder, LM head. Uses only `*.linguistic.*` decoder weights.
pub fn vanilla_forward(
    store: &ParameterStore,
    cfg: &ModelConfig,
    input: &SampleInput,
) -> VanillaForward {
    let ecfg = &cfg.encoder;
    let dcfg = &cfg.decoder;
    let get = |name: &str| store.get(name).unwrap();

    // vision tower per scale
    let mut scale_shapes = Vec::new();
    let mut scale_tokens: Vec<Tensor> = Vec::new();
    if let Some(image) = &input.image {
        let pyramid =
            packing::build_pyramid(image, cfg.packing.tau, cfg.packing.area_threshold).unwrap();
        for scale in &pyramid.scales {
            let patches = crate::encoder::image_to_patches(scale, ecfg.patch_stride).unwrap();
            let rows = scale.shape()[0] / ecfg.patch_stride;
            let cols = scale.shape()[1] / ecfg.patch_stride;
            let mut x = add_bias(&linear(&patches, get("enc.patch.w")), get("enc.patch.b"));

            let row_pos: Vec<i64> =
                (0..rows * cols).map(|t| (t / cols) as i64).collect();
            let col_pos: Vec<i64> =
                (0..rows * cols).map(|t| (t % cols) as i64).collect();
            for l in 0..ecfg.depth {
                let p = |s: &str| format!("enc.l{l}.{s}");
                let normed = rms_norm(&x, get(&p("norm_attn")));
                let q = rope_2d(&linear(&normed, get(&p("attn.wq"))), ecfg.heads, &row_pos, &col_pos);
                let k = rope_2d(&linear(&normed, get(&p("attn.wk"))), ecfg.heads, &row_pos, &col_pos);
                let v = linear(&normed, get(&p("attn.wv")));
                let (attn, _) = attention(&q, &k, &v, ecfg.heads, false);
                x = add(&x, &linear(&attn, get(&p("attn.wo"))));
                let normed = rms_norm(&x, get(&p("norm_ffn")));
                let ffn = gated_ffn(&normed, get(&p("ffn.gate")), get(&p("ffn.up")), get(&p("ffn.down")));
                x = add(&x, &ffn);
            }

            // pixel shuffle: factor×factor blocks concatenated row-major
            let f = ecfg.shuffle_factor;
            let (orows, ocols) = (rows / f, cols / f);
            let w = ecfg.width;
            let mut shuffled = vec![0.0; orows * ocols * w * f * f];
            let mut write = 0;
            for br in 0..orows {
                for bc in 0..ocols {
                    for dr in 0..f {
                        for dc in 0..f {
                            let src = (br * f + dr) * cols + bc * f + dc;
                            shuffled[write..write + w].copy_from_slice(x.row(src));
                            write += w;
                        }
                    }
                }
            }
            let shuffled = Tensor::new(vec![orows * ocols, w * f * f], shuffled).unwrap();

            let h = add_bias(&linear(&shuffled, get("enc.conn.fc1.w")), get("enc.conn.fc1.b"));
            let mut act = h.data().to_vec();
            for v in act.iter_mut() {
                *v = silu_scalar(*v);
            }
            let act = Tensor::new(h.shape().to_vec(), act).unwrap();
            let out = add_bias(&linear(&act, get("enc.conn.fc2.w")), get("enc.conn.fc2.b"));

            scale_shapes.push(packing::ScaleShape::from_image_dims(
                scale.shape()[0],
                scale.shape()[1],
                ecfg.patch_stride,
                ecfg.shuffle_factor,
            ));
            scale_tokens.push(out);
        }
    }

    let special = SpecialTokens::for_vocab(dcfg.vocab);
    let packed = packing::assemble_sequence(&scale_shapes, &input.caption, special).unwrap();

    // embeddings in slot order
    let width = dcfg.width;
    let embed = get("dec.embed");
    let mut emb = vec![0.0; packed.len() * width];
    for (i, slot) in packed.slots.iter().enumerate() {
        let row = match slot.kind {
            SlotKind::Text { id } => embed.row(id as usize),
            SlotKind::Visual { scale, row, col } => {
                let cols = packed.scales[scale].grid_cols;
                scale_tokens[scale].row(row * cols + col)
            }
        };
        emb[i * width..(i + 1) * width].copy_from_slice(row);
    }
    let mut x = Tensor::new(vec![packed.len(), width], emb).unwrap();

    let positions: Vec<i64> = (0..packed.len() as i64).collect();
    let mut layer_probs = Vec::with_capacity(dcfg.depth);
    for l in 0..dcfg.depth {
        let p = |s: &str| format!("dec.l{l}.{s}");
        let normed = rms_norm(&x, get(&p("norm_attn")));
        let q = rope_1d(&linear(&normed, get(&p("attn.linguistic.wq"))), dcfg.heads, &positions);
        let k = rope_1d(&linear(&normed, get(&p("attn.linguistic.wk"))), dcfg.heads, &positions);
        let v = linear(&normed, get(&p("attn.linguistic.wv")));
        let (attn, probs) = attention(&q, &k, &v, dcfg.heads, true);
        x = add(&x, &linear(&attn, get(&p("attn.linguistic.wo"))));
        let normed = rms_norm(&x, get(&p("norm_ffn")));
        let ffn = gated_ffn(
            &normed,
            get(&p("ffn.linguistic.gate")),
            get(&p("ffn.linguistic.up")),
            get(&p("ffn.linguistic.down")),
        );
        x = add(&x, &ffn);
        layer_probs.push(probs);
    }

    let normed = rms_norm(&x, get("dec.final_norm"));
    let logits = linear(&normed, get("dec.head"));
    VanillaForward { logits, layer_probs, packed }
}

/// Copies the linguistic expert weights over the visual ones, making the MoE
/// model mathematically a single-expert transformer.
pub fn tie_experts(store: &mut ParameterStore, depth: usize) {
    for l in 0..depth {
        for proj in ["wq", "wk", "wv", "wo"] {
            let lin = store.get(&format!("dec.l{l}.attn.linguistic.{proj}")).unwrap().clone();
            store.set(&format!("dec.l{l}.attn.visual.{proj}"), lin).unwrap();
        }
        for proj in ["gate", "up", "down"] {
            let lin = store.get(&format!("dec.l{l}.ffn.linguistic.{proj}")).unwrap().clone();
            store.set(&format!("dec.l{l}.ffn.visual.{proj}"), lin).unwrap();
        }
    }
}
