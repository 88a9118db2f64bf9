//! Attention and feed-forward building blocks shared by the encoder and the
//! decoder. Callers project q/k/v (and apply rotary embeddings) first; this
//! module only owns the head bookkeeping and the gated FFN shape.

use crate::tape::{NodeId, Tape};
use crate::tensor::TensorError;

pub struct AttentionOut {
    pub out: NodeId,
    /// One `[seq × seq]` probability matrix per head.
    pub head_probs: Vec<NodeId>,
}

/// Scaled dot-product attention over `heads` column blocks of q/k/v, each
/// `[seq × heads·hd]`. Scores scale by 1/√hd; `causal` masks strictly-future
/// columns inside the softmax so no infinities ever materialize.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    causal: bool,
) -> Result<AttentionOut, TensorError> {
    let width = tape.value(q).last_dim();
    let hd = width / heads;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    let mut outs = Vec::with_capacity(heads);
    let mut head_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, from, to)?;
        let kh = tape.slice_cols(k, from, to)?;
        let vh = tape.slice_cols(v, from, to)?;
        let kt = tape.transpose(kh)?;
        let scores_raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores_raw, inv_sqrt)?;
        let probs = if causal {
            tape.causal_softmax_rows(scores)?
        } else {
            tape.softmax_rows(scores)?
        };
        let oh = tape.matmul(probs, vh)?;
        outs.push(oh);
        head_probs.push(probs);
    }
    let out = tape.concat_cols(&outs)?;
    Ok(AttentionOut { out, head_probs })
}

/// `(SiLU(x·W_gate) ⊙ x·W_up) · W_down`.
pub fn gated_ffn(
    tape: &mut Tape,
    x: NodeId,
    w_gate: NodeId,
    w_up: NodeId,
    w_down: NodeId,
) -> Result<NodeId, TensorError> {
    let gate = tape.matmul(x, w_gate)?;
    let up = tape.matmul(x, w_up)?;
    let act = tape.silu(gate)?;
    let hidden = tape.mul(act, up)?;
    tape.matmul(hidden, w_down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{next_gaussian, SeedSplitter};
    use crate::tensor::Tensor;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SeedSplitter::new(seed).stream("layers");
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| next_gaussian(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut tape = Tape::new();
        let q = tape.leaf(rand_tensor(&[5, 8], 1));
        let k = tape.leaf(rand_tensor(&[5, 8], 2));
        let v = tape.leaf(rand_tensor(&[5, 8], 3));
        let attn = multi_head_attention(&mut tape, q, k, v, 2, true).unwrap();
        for probs in &attn.head_probs {
            let p = tape.value(*probs);
            for i in 0..5 {
                let sum: f64 = p.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for j in i + 1..5 {
                    assert_eq!(p.at2(i, j), 0.0, "causal leak at ({i},{j})");
                }
            }
        }
        assert_eq!(tape.value(attn.out).shape(), &[5, 8]);
    }

    #[test]
    fn single_token_attention_is_identity_on_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(rand_tensor(&[1, 4], 4));
        let k = tape.leaf(rand_tensor(&[1, 4], 5));
        let v = tape.leaf(rand_tensor(&[1, 4], 6));
        let attn = multi_head_attention(&mut tape, q, k, v, 2, true).unwrap();
        assert_eq!(tape.value(attn.out).data(), tape.value(v).data());
    }

    #[test]
    fn ffn_zero_gate_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[3, 4], 7));
        let gate = tape.leaf(Tensor::zeros(&[4, 6]));
        let up = tape.leaf(rand_tensor(&[4, 6], 8));
        let down = tape.leaf(rand_tensor(&[6, 4], 9));
        let y = gated_ffn(&mut tape, x, gate, up, down).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_matches_scalar_arithmetic() {
        // width 1, mlp 1: y = silu(x g) * (x u) * d
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![0.8]).unwrap());
        let gate = tape.leaf(Tensor::new(vec![1, 1], vec![1.3]).unwrap());
        let up = tape.leaf(Tensor::new(vec![1, 1], vec![-0.4]).unwrap());
        let down = tape.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let y = gated_ffn(&mut tape, x, gate, up, down).unwrap();
        let g = 0.8_f64 * 1.3;
        let expect = (g * (1.0 / (1.0 + (-g).exp()))) * (0.8 * -0.4) * 2.0;
        assert!((tape.value(y).item() - expect).abs() < 1e-15);
    }
}
