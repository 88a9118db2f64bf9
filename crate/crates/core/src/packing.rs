//! Visual multi-scale packing: image pyramid construction, special-token
//! layout, modality mask, position annotation and loss mask.
//!
//! Sequence layout for an image with scales s0..sn and a caption:
//!
//! ```text
//! <boi> [s0 tokens row-by-row, <eol> after each row] <eos_scale>
//!       [s1 ...] <eos_scale> ... <eoi> caption...
//! ```
//!
//! One begin/end pair wraps the whole multi-scale block; scales are emitted
//! largest-first and separated by `<end_of_scale>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PackingConfig, PAD_MULTIPLE, PATCH_CHANNELS};
use crate::encoder::pad_image;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PackError {
    #[error("tau {0} outside (0, 1)")]
    BadTau(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("caption token {0} collides with the reserved special-token range")]
    CaptionInSpecialRange(u32),
    #[error("packed sequence invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Linguistic,
}

/// The four reserved ids at the top of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub begin_of_image: u32,
    pub end_of_image: u32,
    pub end_of_line: u32,
    pub end_of_scale: u32,
}

impl SpecialTokens {
    pub fn for_vocab(vocab: usize) -> Self {
        let v = vocab as u32;
        Self {
            begin_of_image: v - 4,
            end_of_image: v - 3,
            end_of_line: v - 2,
            end_of_scale: v - 1,
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        id == self.begin_of_image
            || id == self.end_of_image
            || id == self.end_of_line
            || id == self.end_of_scale
    }

    /// First reserved id; ordinary text ids must stay below this.
    pub fn text_limit(&self) -> u32 {
        self.begin_of_image
    }
}

/// Ordered multi-scale image stack, largest first.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    pub scales: Vec<Tensor>,
}

impl ImagePyramid {
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.scales
            .iter()
            .map(|s| (s.shape()[0], s.shape()[1]))
            .collect()
    }
}

fn floor_to_multiple(x: f64, multiple: usize) -> usize {
    let m = multiple as f64;
    (((x / m).floor() as usize) * multiple).max(multiple)
}

/// Scale dimension ladder for a padded `h0 × w0` image: each step multiplies
/// by tau and floors to a multiple of 32 (min 32); a scale is kept while its
/// area is at least the threshold and still strictly shrinking. The original
/// is always kept.
pub fn pyramid_dims(h0: usize, w0: usize, tau: f64, area_threshold: u64) -> Vec<(usize, usize)> {
    let mut dims = vec![(h0, w0)];
    let (mut h, mut w) = (h0, w0);
    loop {
        let nh = floor_to_multiple(tau * h as f64, PAD_MULTIPLE);
        let nw = floor_to_multiple(tau * w as f64, PAD_MULTIPLE);
        let area = (nh as u64) * (nw as u64);
        if area >= (h as u64) * (w as u64) {
            break; // stalled at the minimum size
        }
        if area < area_threshold {
            break;
        }
        dims.push((nh, nw));
        h = nh;
        w = nw;
    }
    dims
}

/// Area-weighted box downsampling to exact target dims. Boxes have equal
/// area, so the global per-channel mean is preserved.
fn downsample(img: &Tensor, nh: usize, nw: usize) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Tensor::zeros(&[nh, nw, PATCH_CHANNELS]);
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let inv_area = 1.0 / (sy * sx);
    for r in 0..nh {
        let y0 = r as f64 * sy;
        let y1 = (r + 1) as f64 * sy;
        for c in 0..nw {
            let x0 = c as f64 * sx;
            let x1 = (c + 1) as f64 * sx;
            for ch in 0..PATCH_CHANNELS {
                let mut acc = 0.0;
                let mut iy = y0.floor() as usize;
                while (iy as f64) < y1 && iy < h {
                    let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                    let mut ix = x0.floor() as usize;
                    while (ix as f64) < x1 && ix < w {
                        let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                        acc += img.data()[(iy * w + ix) * PATCH_CHANNELS + ch] * wy * wx;
                        ix += 1;
                    }
                    iy += 1;
                }
                out.data_mut()[(r * nw + c) * PATCH_CHANNELS + ch] = acc * inv_area;
            }
        }
    }
    out
}

/// Pads the input to multiples of 32, then emits progressively downsampled
/// copies until the area falls under the threshold.
pub fn build_pyramid(
    img: &Tensor,
    tau: f64,
    area_threshold: u64,
) -> Result<ImagePyramid, PackError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(PackError::BadTau(tau));
    }
    let base = pad_image(img)?;
    let (h0, w0) = (base.shape()[0], base.shape()[1]);
    let dims = pyramid_dims(h0, w0, tau, area_threshold);
    let mut scales = Vec::with_capacity(dims.len());
    scales.push(base.clone());
    for &(h, w) in dims.iter().skip(1) {
        scales.push(downsample(&base, h, w));
    }
    Ok(ImagePyramid { scales })
}

/// Post-shuffle token grid extents for one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleShape {
    pub height: usize,
    pub width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl ScaleShape {
    pub fn from_image_dims(h: usize, w: usize, stride: usize, factor: usize) -> Self {
        Self {
            height: h,
            width: w,
            grid_rows: h / (stride * factor),
            grid_cols: w / (stride * factor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotKind {
    Text { id: u32 },
    Visual { scale: usize, row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    #[serde(flatten)]
    pub kind: SlotKind,
    pub modality: Modality,
    pub position: usize,
    pub loss: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PackedSequence {
    pub special: SpecialTokens,
    pub scales: Vec<ScaleShape>,
    pub slots: Vec<Slot>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn modality_mask(&self) -> Vec<Modality> {
        self.slots.iter().map(|s| s.modality).collect()
    }

    pub fn positions(&self) -> Vec<i64> {
        self.slots.iter().map(|s| s.position as i64).collect()
    }

    /// Text ids in slot order (visual slots excluded).
    pub fn text_ids(&self) -> Vec<u32> {
        self.slots
            .iter()
            .filter_map(|s| match s.kind {
                SlotKind::Text { id } => Some(id),
                SlotKind::Visual { .. } => None,
            })
            .collect()
    }

    /// One-ahead targets and loss mask for next-token prediction at each
    /// position: position i predicts slot i+1 and contributes iff that slot
    /// carries loss. The final position never contributes.
    pub fn ntp_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.slots.len();
        let mut targets = vec![0usize; n];
        let mut mask = vec![false; n];
        for i in 0..n.saturating_sub(1) {
            if let SlotKind::Text { id } = self.slots[i + 1].kind {
                targets[i] = id as usize;
                mask[i] = self.slots[i + 1].loss;
            }
        }
        (targets, mask)
    }

    /// Stable JSON form for golden-file tests and the pack-debug command.
    pub fn to_debug_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("packed sequence serializes")
    }

    /// Structural invariants: wrapping pair, one `<eol>` per visual row, one
    /// `<eos_scale>` per scale, no loss on visual slots, consecutive
    /// positions.
    pub fn validate(&self) -> Result<(), PackError> {
        let st = &self.special;
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.position != i {
                return Err(PackError::Invalid(format!(
                    "slot {i} has position {}",
                    slot.position
                )));
            }
            match slot.kind {
                SlotKind::Visual { .. } => {
                    if slot.loss {
                        return Err(PackError::Invalid(format!("visual slot {i} carries loss")));
                    }
                    if slot.modality != Modality::Visual {
                        return Err(PackError::Invalid(format!("visual slot {i} mislabeled")));
                    }
                }
                SlotKind::Text { id } => {
                    if slot.modality != Modality::Linguistic {
                        return Err(PackError::Invalid(format!("text slot {i} mislabeled")));
                    }
                    if st.contains(id) && slot.loss {
                        return Err(PackError::Invalid(format!(
                            "structural token at {i} carries loss"
                        )));
                    }
                }
            }
        }

        if self.scales.is_empty() {
            // Pure text: no structural tokens allowed at all.
            for slot in &self.slots {
                if let SlotKind::Text { id } = slot.kind {
                    if st.contains(id) {
                        return Err(PackError::Invalid(
                            "structural token in text-only sequence".into(),
                        ));
                    }
                }
            }
            return Ok(());
        }

        // Re-derive the expected visual block and compare slot-for-slot.
        let mut expect: Vec<SlotKind> = vec![SlotKind::Text { id: st.begin_of_image }];
        for (s, shape) in self.scales.iter().enumerate() {
            for r in 0..shape.grid_rows {
                for c in 0..shape.grid_cols {
                    expect.push(SlotKind::Visual { scale: s, row: r, col: c });
                }
                expect.push(SlotKind::Text { id: st.end_of_line });
            }
            expect.push(SlotKind::Text { id: st.end_of_scale });
        }
        expect.push(SlotKind::Text { id: st.end_of_image });

        if self.slots.len() < expect.len() {
            return Err(PackError::Invalid("sequence shorter than its layout".into()));
        }
        for (i, kind) in expect.iter().enumerate() {
            if self.slots[i].kind != *kind {
                return Err(PackError::Invalid(format!(
                    "slot {i}: expected {kind:?}, found {:?}",
                    self.slots[i].kind
                )));
            }
        }
        // Everything after <end_of_image> is caption: ordinary text with loss.
        for (i, slot) in self.slots.iter().enumerate().skip(expect.len()) {
            match slot.kind {
                SlotKind::Text { id } if !st.contains(id) && slot.loss => {}
                _ => {
                    return Err(PackError::Invalid(format!(
                        "slot {i} after the image block is not a caption token"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Lays out the multimodal token stream for encoded scales plus a caption.
pub fn assemble_sequence(
    scales: &[ScaleShape],
    caption: &[u32],
    special: SpecialTokens,
) -> Result<PackedSequence, PackError> {
    for &t in caption {
        if t >= special.text_limit() {
            return Err(PackError::CaptionInSpecialRange(t));
        }
    }
    let mut slots = Vec::new();
    let push_text = |slots: &mut Vec<Slot>, id: u32, loss: bool| {
        let position = slots.len();
        slots.push(Slot {
            kind: SlotKind::Text { id },
            modality: Modality::Linguistic,
            position,
            loss,
        });
    };

    if !scales.is_empty() {
        push_text(&mut slots, special.begin_of_image, false);
        for (s, shape) in scales.iter().enumerate() {
            for r in 0..shape.grid_rows {
                for c in 0..shape.grid_cols {
                    let position = slots.len();
                    slots.push(Slot {
                        kind: SlotKind::Visual { scale: s, row: r, col: c },
                        modality: Modality::Visual,
                        position,
                        loss: false,
                    });
                }
                push_text(&mut slots, special.end_of_line, false);
            }
            push_text(&mut slots, special.end_of_scale, false);
        }
        push_text(&mut slots, special.end_of_image, false);
    }
    for &t in caption {
        push_text(&mut slots, t, true);
    }

    let packed = PackedSequence {
        special,
        scales: scales.to_vec(),
        slots,
    };
    packed.validate()?;
    Ok(packed)
}

/// Closed-form slot count of the image block (wrapping tokens included,
/// caption excluded) for a raw `h × w` image.
pub fn expected_token_count(
    h: usize,
    w: usize,
    tau: f64,
    area_threshold: u64,
    stride: usize,
    factor: usize,
) -> usize {
    let (ph, pw) = (crate::encoder::pad_up(h), crate::encoder::pad_up(w));
    let dims = pyramid_dims(ph, pw, tau, area_threshold);
    let mut count = 2; // begin/end of image
    for (sh, sw) in dims {
        let rows = sh / (stride * factor);
        let cols = sw / (stride * factor);
        count += rows * cols + rows + 1;
    }
    count
}

/// Scale shapes the encoder will produce for a raw image, matching
/// `build_pyramid` + pixel shuffle without touching pixels.
pub fn scale_shapes_for(
    h: usize,
    w: usize,
    packing: &PackingConfig,
    stride: usize,
    factor: usize,
) -> Vec<ScaleShape> {
    let (ph, pw) = (crate::encoder::pad_up(h), crate::encoder::pad_up(w));
    pyramid_dims(ph, pw, packing.tau, packing.area_threshold)
        .into_iter()
        .map(|(sh, sw)| ScaleShape::from_image_dims(sh, sw, stride, factor))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedSplitter;
    use rand_core::RngCore;

    const TAU: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = SeedSplitter::new(seed).stream("pack");
        Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|_| crate::seed::next_f64(&mut rng)).collect(),
        )
        .unwrap()
    }

    fn specials() -> SpecialTokens {
        SpecialTokens::for_vocab(32)
    }

    #[test]
    fn special_ids_sit_at_vocab_top() {
        let st = specials();
        assert_eq!(st.begin_of_image, 28);
        assert_eq!(st.end_of_scale, 31);
        assert!(st.contains(29));
        assert!(!st.contains(27));
    }

    #[test]
    fn pyramid_256_at_threshold_4096() {
        let dims = pyramid_dims(256, 256, TAU, 4096);
        assert_eq!(dims, vec![(256, 256), (160, 160), (96, 96), (64, 64)]);
    }

    #[test]
    fn small_image_keeps_original_only() {
        let img = rand_image(30, 30, 1);
        let p = build_pyramid(&img, TAU, 4096).unwrap();
        assert_eq!(p.dims(), vec![(32, 32)]);
    }

    #[test]
    fn unrounded_areas_halve_exactly_at_default_tau() {
        // (√2/2)² = 1/2, so the ideal (pre-rounding) area halves per step.
        let ratio = TAU * TAU;
        assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pyramid_areas_strictly_decrease() {
        let img = rand_image(256, 192, 2);
        let p = build_pyramid(&img, TAU, 1024).unwrap();
        let dims = p.dims();
        assert!(dims.len() > 2);
        for win in dims.windows(2) {
            assert!(win[1].0 * win[1].1 < win[0].0 * win[0].1, "{dims:?}");
            assert_eq!(win[1].0 % 32, 0);
            assert_eq!(win[1].1 % 32, 0);
        }
    }

    #[test]
    fn threshold_is_monotone_in_scale_count() {
        let mut last = usize::MAX;
        for threshold in [1024u64, 4096, 16384, 65536, 1 << 40] {
            let n = pyramid_dims(256, 256, TAU, threshold).len();
            assert!(n <= last, "threshold {threshold} grew the pyramid");
            last = n;
        }
        assert_eq!(pyramid_dims(256, 256, TAU, 1 << 40).len(), 1);
    }

    #[test]
    fn bad_tau_rejected() {
        let img = rand_image(64, 64, 3);
        assert!(build_pyramid(&img, 0.0, 1024).is_err());
        assert!(build_pyramid(&img, 1.0, 1024).is_err());
    }

    #[test]
    fn downsampling_preserves_channel_means() {
        let img = rand_image(64, 64, 4);
        let small = downsample(&img, 32, 32);
        for ch in 0..3 {
            let mean = |t: &Tensor, n: usize| -> f64 {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += t.data()[i * 3 + ch];
                }
                acc / n as f64
            };
            let big_mean = mean(&img, 64 * 64);
            let small_mean = mean(&small, 32 * 32);
            assert!((big_mean - small_mean).abs() < 1e-9);
        }
    }

    #[test]
    fn single_scale_layout_with_caption() {
        // 2x2 visual tokens + 3 caption tokens: 1 + (4+2+1) + 1 + 3 = 12
        let shapes = [ScaleShape { height: 64, width: 64, grid_rows: 2, grid_cols: 2 }];
        let packed = assemble_sequence(&shapes, &[3, 4, 5], specials()).unwrap();
        assert_eq!(packed.len(), 12);
        packed.validate().unwrap();
        let (_, mask) = packed.ntp_targets();
        // loss flows at the positions predicting the three caption tokens
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        assert!(mask[8] && mask[9] && mask[10]);
    }

    #[test]
    fn empty_caption_ends_at_end_of_image() {
        let shapes = [ScaleShape { height: 64, width: 64, grid_rows: 2, grid_cols: 2 }];
        let packed = assemble_sequence(&shapes, &[], specials()).unwrap();
        let last = packed.slots.last().unwrap();
        assert_eq!(last.kind, SlotKind::Text { id: specials().end_of_image });
        assert_eq!(packed.len(), 9);
    }

    #[test]
    fn two_scale_block_arithmetic() {
        let shapes = [
            ScaleShape { height: 64, width: 64, grid_rows: 2, grid_cols: 2 },
            ScaleShape { height: 32, width: 32, grid_rows: 1, grid_cols: 1 },
        ];
        let packed = assemble_sequence(&shapes, &[], specials()).unwrap();
        // 1 + (4+2+1) + (1+1+1) + 1 = 12
        assert_eq!(packed.len(), 12);
    }

    #[test]
    fn caption_colliding_with_specials_rejected() {
        let shapes = [ScaleShape { height: 32, width: 32, grid_rows: 1, grid_cols: 1 }];
        assert!(assemble_sequence(&shapes, &[28], specials()).is_err());
    }

    #[test]
    fn expected_count_minimal_image() {
        // 32x32, one scale, one visual token: 1 + (1+1+1) + 1 = 5
        assert_eq!(expected_token_count(32, 32, TAU, 4096, 16, 2), 5);
    }

    #[test]
    fn expected_count_huge_threshold_keeps_original() {
        assert_eq!(expected_token_count(256, 256, TAU, u64::MAX, 16, 2), 2 + 64 + 8 + 1);
    }

    #[test]
    fn expected_count_matches_assembly_on_random_dims() {
        let mut rng = SeedSplitter::new(5).stream("dims");
        let packing = PackingConfig { tau: TAU, area_threshold: 2048 };
        for _ in 0..50 {
            let h = 1 + (rng.next_u64() % 300) as usize;
            let w = 1 + (rng.next_u64() % 300) as usize;
            let shapes = scale_shapes_for(h, w, &packing, 16, 2);
            let caption = [2u32, 3];
            let packed = assemble_sequence(&shapes, &caption, specials()).unwrap();
            let expect = expected_token_count(h, w, TAU, 2048, 16, 2) + caption.len();
            assert_eq!(packed.len(), expect, "dims {h}x{w}");
        }
    }

    #[test]
    fn text_only_sequence_validates() {
        let packed = assemble_sequence(&[], &[2, 3, 4], specials()).unwrap();
        assert_eq!(packed.len(), 3);
        packed.validate().unwrap();
        assert!(packed.slots.iter().all(|s| s.modality == Modality::Linguistic));
    }

    #[test]
    fn debug_json_is_stable() {
        let shapes = [ScaleShape { height: 32, width: 32, grid_rows: 1, grid_cols: 1 }];
        let a = assemble_sequence(&shapes, &[2], specials()).unwrap().to_debug_json();
        let b = assemble_sequence(&shapes, &[2], specials()).unwrap().to_debug_json();
        assert_eq!(a, b);
        assert!(a.contains("\"kind\": \"visual\""));
    }
}
