//! Vision tower: patch embedding, a stack of bidirectional transformer
//! layers with 2-d rotary positions over the patch grid, pixel-shuffle
//! downsampling and the MLP connector into the decoder's embedding space.
//!
//! Depth 0 is legal and collapses the tower to patch embed + connector.

use crate::config::{EncoderConfig, PAD_MULTIPLE, PATCH_CHANNELS};
use crate::layers;
use crate::model::{ParamNodes, RMS_EPS};
use crate::rope::DEFAULT_ROPE_BASE;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};

/// A grid of token embeddings living on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub tokens: NodeId,
}

/// Smallest multiple of 32 at or above `n`.
pub fn pad_up(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

/// Zero-pads an `[H×W×3]` image on the bottom/right so both sides are
/// multiples of 32.
pub fn pad_image(img: &Tensor) -> Result<Tensor, TensorError> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != PATCH_CHANNELS {
        return Err(TensorError::ShapeMismatch {
            op: "pad_image",
            detail: format!("expected [H, W, 3], got {shape:?}"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let (ph, pw) = (pad_up(h), pad_up(w));
    if ph == h && pw == w {
        return Ok(img.clone());
    }
    let mut out = Tensor::zeros(&[ph, pw, PATCH_CHANNELS]);
    for y in 0..h {
        let src = &img.data()[y * w * PATCH_CHANNELS..(y + 1) * w * PATCH_CHANNELS];
        let dst = &mut out.data_mut()[y * pw * PATCH_CHANNELS..];
        dst[..w * PATCH_CHANNELS].copy_from_slice(src);
    }
    Ok(out)
}

/// Flattens non-overlapping stride×stride patches into rows, grid-row-major.
/// Within a patch the order is (dy, dx, channel).
pub fn image_to_patches(img: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != PATCH_CHANNELS {
        return Err(TensorError::ShapeMismatch {
            op: "image_to_patches",
            detail: format!("expected [H, W, 3], got {shape:?}"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    if h % stride != 0 || w % stride != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "image_to_patches",
            detail: format!("{h}x{w} not aligned to stride {stride}"),
        });
    }
    let (rows, cols) = (h / stride, w / stride);
    let patch_dim = stride * stride * PATCH_CHANNELS;
    let mut data = Vec::with_capacity(rows * cols * patch_dim);
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..stride {
                let y = pr * stride + dy;
                let x0 = pc * stride;
                let src = &img.data()[(y * w + x0) * PATCH_CHANNELS..(y * w + x0 + stride) * PATCH_CHANNELS];
                data.extend_from_slice(src);
            }
        }
    }
    Tensor::new(vec![rows * cols, patch_dim], data)
}

/// Linear projection of each flattened patch to the encoder width.
pub fn patch_embed(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &EncoderConfig,
    img: &Tensor,
) -> Result<PatchGrid, TensorError> {
    let patches = image_to_patches(img, cfg.patch_stride)?;
    let rows = img.shape()[0] / cfg.patch_stride;
    let cols = img.shape()[1] / cfg.patch_stride;
    let p = tape.leaf(patches);
    let projected = tape.matmul(p, nodes.node("enc.patch.w"))?;
    let tokens = tape.add_row_broadcast(projected, nodes.node("enc.patch.b"))?;
    Ok(PatchGrid { rows, cols, tokens })
}

fn grid_positions(rows: usize, cols: usize) -> (Vec<i64>, Vec<i64>) {
    let mut rs = Vec::with_capacity(rows * cols);
    let mut cs = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            rs.push(r as i64);
            cs.push(c as i64);
        }
    }
    (rs, cs)
}

/// The transformer stack: pre-norm, full bidirectional attention with 2-d
/// rotary positions, SiLU-gated FFN, residuals. Depth 0 returns the grid
/// unchanged.
pub fn encoder_forward(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &EncoderConfig,
    grid: PatchGrid,
) -> Result<PatchGrid, TensorError> {
    let (row_pos, col_pos) = grid_positions(grid.rows, grid.cols);
    let mut x = grid.tokens;
    for l in 0..cfg.depth {
        let p = |suffix: &str| nodes.node(&format!("enc.l{l}.{suffix}"));

        let normed = tape.rmsnorm(x, p("norm_attn"), RMS_EPS)?;
        let q = tape.matmul(normed, p("attn.wq"))?;
        let k = tape.matmul(normed, p("attn.wk"))?;
        let v = tape.matmul(normed, p("attn.wv"))?;
        let qr = tape.rope_2d(q, cfg.heads, &row_pos, &col_pos, DEFAULT_ROPE_BASE)?;
        let kr = tape.rope_2d(k, cfg.heads, &row_pos, &col_pos, DEFAULT_ROPE_BASE)?;
        let attn = layers::multi_head_attention(tape, qr, kr, v, cfg.heads, false)?;
        let proj = tape.matmul(attn.out, p("attn.wo"))?;
        x = tape.add(x, proj)?;

        let normed = tape.rmsnorm(x, p("norm_ffn"), RMS_EPS)?;
        let ffn = layers::gated_ffn(tape, normed, p("ffn.gate"), p("ffn.up"), p("ffn.down"))?;
        x = tape.add(x, ffn)?;
    }
    Ok(PatchGrid { tokens: x, ..grid })
}

/// Merges each factor×factor block of grid tokens into one token with
/// factor²-fold width. Pure rearrangement: the scalar multiset is unchanged.
pub fn pixel_shuffle(
    tape: &mut Tape,
    grid: PatchGrid,
    factor: usize,
) -> Result<PatchGrid, TensorError> {
    if factor == 0 || grid.rows % factor != 0 || grid.cols % factor != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "pixel_shuffle",
            detail: format!("grid {}x{} not divisible by factor {factor}", grid.rows, grid.cols),
        });
    }
    if factor == 1 {
        return Ok(grid);
    }
    let (out_rows, out_cols) = (grid.rows / factor, grid.cols / factor);
    let width = tape.value(grid.tokens).last_dim();
    let mut picks = Vec::with_capacity(grid.rows * grid.cols);
    for br in 0..out_rows {
        for bc in 0..out_cols {
            for dr in 0..factor {
                for dc in 0..factor {
                    picks.push((0usize, (br * factor + dr) * grid.cols + bc * factor + dc));
                }
            }
        }
    }
    let gathered = tape.compose_rows(&[grid.tokens], &picks)?;
    let tokens = tape.reshape(gathered, vec![out_rows * out_cols, width * factor * factor])?;
    Ok(PatchGrid { rows: out_rows, cols: out_cols, tokens })
}

/// Inverse of the shuffle rearrangement, for tests and sanity checks.
pub fn pixel_unshuffle(
    tape: &mut Tape,
    grid: PatchGrid,
    factor: usize,
) -> Result<PatchGrid, TensorError> {
    if factor == 1 {
        return Ok(grid);
    }
    let wide = tape.value(grid.tokens).last_dim();
    let width = wide / (factor * factor);
    let (rows, cols) = (grid.rows * factor, grid.cols * factor);
    let flat = tape.reshape(grid.tokens, vec![grid.rows * grid.cols * factor * factor, width])?;
    let mut picks = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (br, bc) = (r / factor, c / factor);
            let (dr, dc) = (r % factor, c % factor);
            let block = br * grid.cols + bc;
            picks.push((0usize, block * factor * factor + dr * factor + dc));
        }
    }
    let tokens = tape.compose_rows(&[flat], &picks)?;
    Ok(PatchGrid { rows, cols, tokens })
}

/// Two-layer MLP (linear → SiLU → linear) into the decoder width.
pub fn connector(
    tape: &mut Tape,
    nodes: &ParamNodes,
    grid: PatchGrid,
) -> Result<NodeId, TensorError> {
    let h = tape.matmul(grid.tokens, nodes.node("enc.conn.fc1.w"))?;
    let h = tape.add_row_broadcast(h, nodes.node("enc.conn.fc1.b"))?;
    let h = tape.silu(h)?;
    let out = tape.matmul(h, nodes.node("enc.conn.fc2.w"))?;
    tape.add_row_broadcast(out, nodes.node("enc.conn.fc2.b"))
}

/// Full tower for one image scale: patch embed → layers → shuffle →
/// connector. Returns the connector tokens and their grid shape.
pub fn encode_scale(
    tape: &mut Tape,
    nodes: &ParamNodes,
    cfg: &EncoderConfig,
    img: &Tensor,
) -> Result<PatchGrid, TensorError> {
    let grid = patch_embed(tape, nodes, cfg, img)?;
    let grid = encoder_forward(tape, nodes, cfg, grid)?;
    let grid = pixel_shuffle(tape, grid, cfg.shuffle_factor)?;
    let tokens = connector(tape, nodes, grid)?;
    Ok(PatchGrid { tokens, ..grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use crate::seed::{next_gaussian, SeedSplitter};

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            depth: 1,
            width: 8,
            mlp_width: 16,
            heads: 2,
            patch_stride: 16,
            shuffle_factor: 2,
            out_width: 16,
        }
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = SeedSplitter::new(seed).stream("img");
        Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|_| crate::seed::next_f64(&mut rng)).collect(),
        )
        .unwrap()
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> (Tape, ParamNodes) {
        let init = SeedSplitter::new(seed).child("init");
        let store = model::init_encoder_params_standalone(cfg, &init);
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert_all(&mut tape, &store);
        (tape, nodes)
    }

    #[test]
    fn pad_image_dims() {
        assert_eq!(pad_image(&rand_image(64, 64, 1)).unwrap().shape(), &[64, 64, 3]);
        assert_eq!(pad_image(&rand_image(33, 1, 2)).unwrap().shape(), &[64, 32, 3]);
        assert_eq!(pad_image(&rand_image(181, 96, 3)).unwrap().shape(), &[192, 96, 3]);
    }

    #[test]
    fn pad_preserves_content_and_zero_fills() {
        let img = rand_image(33, 1, 4);
        let padded = pad_image(&img).unwrap();
        for y in 0..33 {
            for ch in 0..3 {
                assert_eq!(padded.data()[(y * 32) * 3 + ch], img.data()[y * 3 + ch]);
            }
        }
        // padded pixels: right of the single column, and below row 32
        assert_eq!(padded.data()[5 * 3], 0.0);
        assert_eq!(padded.data()[(40 * 32) * 3 + 1], 0.0);
    }

    #[test]
    fn patch_embed_grid_shape() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 5);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(64, 64, 6)).unwrap();
        assert_eq!((grid.rows, grid.cols), (4, 4));
        assert_eq!(tape.value(grid.tokens).shape(), &[16, 8]);
    }

    #[test]
    fn zero_image_zero_bias_embeds_to_zero() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 7);
        let grid = patch_embed(&mut tape, &nodes, &c, &Tensor::zeros(&[32, 32, 3])).unwrap();
        assert!(tape.value(grid.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_patch_picks_projection_row() {
        let c = cfg();
        let init = SeedSplitter::new(8).child("init");
        let store = model::init_encoder_params_standalone(&c, &init);
        // light up exactly input coordinate (dy=1, dx=2, ch=0) of patch (0, 0)
        let mut img = Tensor::zeros(&[32, 32, 3]);
        img.data_mut()[(1 * 32 + 2) * 3] = 1.0;
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert_all(&mut tape, &store);
        let grid = patch_embed(&mut tape, &nodes, &c, &img).unwrap();
        let w = store.get("enc.patch.w").unwrap();
        let flat_idx = (1 * 16 + 2) * 3; // (dy*stride + dx)*channels + ch
        for j in 0..c.width {
            let expect = w.at2(flat_idx, j); // bias is zero at init
            assert_eq!(tape.value(grid.tokens).at2(0, j), expect);
        }
    }

    #[test]
    fn depth_zero_forward_is_identity() {
        let mut c = cfg();
        c.depth = 0;
        let (mut tape, nodes) = setup(&c, 9);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(64, 64, 10)).unwrap();
        let out = encoder_forward(&mut tape, &nodes, &c, grid).unwrap();
        assert_eq!(out.tokens, grid.tokens);
    }

    #[test]
    fn zeroed_residual_projections_make_identity_layers() {
        let c = cfg();
        let init = SeedSplitter::new(11).child("init");
        let mut store = model::init_encoder_params_standalone(&c, &init);
        store.set("enc.l0.attn.wo", Tensor::zeros(&[8, 8])).unwrap();
        store.set("enc.l0.ffn.down", Tensor::zeros(&[16, 8])).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert_all(&mut tape, &store);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(64, 64, 12)).unwrap();
        let out = encoder_forward(&mut tape, &nodes, &c, grid).unwrap();
        assert_eq!(tape.value(out.tokens).data(), tape.value(grid.tokens).data());
    }

    /// One encoder layer with caller-supplied (row, col) annotations; used to
    /// probe permutation equivariance without going through the grid order.
    fn layer_with_positions(
        store: &crate::params::ParameterStore,
        c: &EncoderConfig,
        tokens: Tensor,
        rows: &[i64],
        cols: &[i64],
    ) -> Tensor {
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert_all(&mut tape, store);
        let x = tape.leaf(tokens);
        let normed = tape.rmsnorm(x, nodes.node("enc.l0.norm_attn"), RMS_EPS).unwrap();
        let q = tape.matmul(normed, nodes.node("enc.l0.attn.wq")).unwrap();
        let k = tape.matmul(normed, nodes.node("enc.l0.attn.wk")).unwrap();
        let v = tape.matmul(normed, nodes.node("enc.l0.attn.wv")).unwrap();
        let qr = tape.rope_2d(q, c.heads, rows, cols, DEFAULT_ROPE_BASE).unwrap();
        let kr = tape.rope_2d(k, c.heads, rows, cols, DEFAULT_ROPE_BASE).unwrap();
        let attn = layers::multi_head_attention(&mut tape, qr, kr, v, c.heads, false).unwrap();
        let proj = tape.matmul(attn.out, nodes.node("enc.l0.attn.wo")).unwrap();
        let x1 = tape.add(x, proj).unwrap();
        let normed = tape.rmsnorm(x1, nodes.node("enc.l0.norm_ffn"), RMS_EPS).unwrap();
        let ffn = layers::gated_ffn(
            &mut tape,
            normed,
            nodes.node("enc.l0.ffn.gate"),
            nodes.node("enc.l0.ffn.up"),
            nodes.node("enc.l0.ffn.down"),
        )
        .unwrap();
        let out = tape.add(x1, ffn).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        // Reordering tokens together with their (row, col) annotations must
        // reorder the outputs identically.
        let c = cfg();
        let init = SeedSplitter::new(13).child("init");
        let store = model::init_encoder_params_standalone(&c, &init);

        let mut data_rng = SeedSplitter::new(14).stream("tok");
        let tokens =
            Tensor::new(vec![4, 8], (0..32).map(|_| next_gaussian(&mut data_rng)).collect())
                .unwrap();

        let grid_rows: Vec<i64> = (0..4).map(|i| (i / 2) as i64).collect();
        let grid_cols: Vec<i64> = (0..4).map(|i| (i % 2) as i64).collect();
        let direct = layer_with_positions(&store, &c, tokens.clone(), &grid_rows, &grid_cols);

        let perm = [2usize, 0, 3, 1];
        let permuted_tokens =
            crate::tensor::compose_rows(&[&tokens], &perm.map(|i| (0, i))).unwrap();
        let perm_rows: Vec<i64> = perm.iter().map(|&i| grid_rows[i]).collect();
        let perm_cols: Vec<i64> = perm.iter().map(|&i| grid_cols[i]).collect();
        let permuted = layer_with_positions(&store, &c, permuted_tokens, &perm_rows, &perm_cols);

        for (out_row, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let a = direct.at2(src, j);
                let b = permuted.at2(out_row, j);
                assert!((a - b).abs() < 1e-12, "({out_row},{j}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn zeroing_one_token_touches_all_outputs_when_deep() {
        // Bidirectional attention: no causal mask, so any input token reaches
        // every output token.
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 29);
        let img = rand_image(64, 64, 30);
        let grid = patch_embed(&mut tape, &nodes, &c, &img).unwrap();
        let base = encoder_forward(&mut tape, &nodes, &c, grid).unwrap();
        let base_out = tape.value(base.tokens).clone();

        let mut zeroed = tape.value(grid.tokens).clone();
        for v in zeroed.data_mut()[..8].iter_mut() {
            *v = 0.0;
        }
        let z = tape.leaf(zeroed);
        let gz = PatchGrid { rows: 4, cols: 4, tokens: z };
        let out_z = encoder_forward(&mut tape, &nodes, &c, gz).unwrap();
        let z_out = tape.value(out_z.tokens);
        for r in 0..16 {
            let changed = (0..8).any(|j| base_out.at2(r, j) != z_out.at2(r, j));
            assert!(changed, "row {r} unchanged despite bidirectional attention");
        }
    }

    #[test]
    fn shuffle_factor_one_is_identity() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 15);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(64, 64, 16)).unwrap();
        let out = pixel_shuffle(&mut tape, grid, 1).unwrap();
        assert_eq!(out.tokens, grid.tokens);
    }

    #[test]
    fn shuffle_merges_blocks_and_preserves_multiset() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 17);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(64, 64, 18)).unwrap();
        let out = pixel_shuffle(&mut tape, grid, 2).unwrap();
        assert_eq!((out.rows, out.cols), (2, 2));
        assert_eq!(tape.value(out.tokens).shape(), &[4, 32]);

        let mut before: Vec<u64> =
            tape.value(grid.tokens).data().iter().map(|v| v.to_bits()).collect();
        let mut after: Vec<u64> =
            tape.value(out.tokens).data().iter().map(|v| v.to_bits()).collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    #[test]
    fn unshuffle_inverts_shuffle() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 19);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(64, 96, 20)).unwrap();
        let shuffled = pixel_shuffle(&mut tape, grid, 2).unwrap();
        let back = pixel_unshuffle(&mut tape, shuffled, 2).unwrap();
        assert_eq!((back.rows, back.cols), (grid.rows, grid.cols));
        assert_eq!(tape.value(back.tokens).data(), tape.value(grid.tokens).data());
    }

    #[test]
    fn indivisible_grid_rejected() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 21);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(48, 48, 22)).unwrap();
        assert!(pixel_shuffle(&mut tape, grid, 2).is_err()); // 3x3 grid
    }

    #[test]
    fn connector_zero_weights_zero_output() {
        let c = cfg();
        let init = SeedSplitter::new(23).child("init");
        let mut store = model::init_encoder_params_standalone(&c, &init);
        store.set("enc.conn.fc1.w", Tensor::zeros(&[32, 16])).unwrap();
        store.set("enc.conn.fc2.w", Tensor::zeros(&[16, 16])).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert_all(&mut tape, &store);
        let out = encode_scale(&mut tape, &nodes, &c, &rand_image(64, 64, 24)).unwrap();
        assert_eq!(tape.value(out.tokens).shape(), &[4, 16]);
        assert!(tape.value(out.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn connector_matches_naive_mlp_oracle() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 25);
        let grid = patch_embed(&mut tape, &nodes, &c, &rand_image(64, 64, 26)).unwrap();
        let shuffled = pixel_shuffle(&mut tape, grid, 2).unwrap();
        let out = connector(&mut tape, &nodes, shuffled).unwrap();

        let x = tape.value(shuffled.tokens).clone();
        let w1 = tape.value(nodes.node("enc.conn.fc1.w")).clone();
        let b1 = tape.value(nodes.node("enc.conn.fc1.b")).clone();
        let w2 = tape.value(nodes.node("enc.conn.fc2.w")).clone();
        let b2 = tape.value(nodes.node("enc.conn.fc2.b")).clone();
        for i in 0..x.rows() {
            for j in 0..16 {
                let mut acc = 0.0;
                for m in 0..16 {
                    let mut h = 0.0;
                    for k in 0..32 {
                        h += x.at2(i, k) * w1.at2(k, m);
                    }
                    h += b1.data()[m];
                    let s = h * (1.0 / (1.0 + (-h).exp()));
                    acc += s * w2.at2(m, j);
                }
                acc += b2.data()[j];
                let got = tape.value(out).at2(i, j);
                assert!((got - acc).abs() < 1e-12, "({i},{j}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn end_to_end_token_count() {
        let c = cfg();
        let (mut tape, nodes) = setup(&c, 27);
        let out = encode_scale(&mut tape, &nodes, &c, &rand_image(64, 64, 28)).unwrap();
        // (64 / (16*2))^2 = 4 connector tokens
        assert_eq!((out.rows, out.cols), (2, 2));
        assert_eq!(tape.value(out.tokens).shape(), &[4, 16]);
    }
}
