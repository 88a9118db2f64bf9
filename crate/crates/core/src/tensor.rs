//! Dense row-major f64 tensor and the deterministic kernels every layer is
//! built from.
//!
//! Two hard rules apply to every kernel:
//!   * fixed operation order — matmul accumulates left-to-right over the inner
//!     dimension, reductions walk memory order, no reassociation — so results
//!     are bitwise reproducible;
//!   * outputs must be finite; a NaN/Inf is reported as an error, never
//!     propagated.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("shape {shape:?} requires {expected} elements, got {got}")]
    BadConstruction {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("index out of range in {op}: {detail}")]
    IndexOutOfRange { op: &'static str, detail: String },
}

/// Dense tensor: positive extents, flat row-major f64 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || expected != data.len() {
            return Err(TensorError::BadConstruction {
                expected,
                got: data.len(),
                shape,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Rows of the 2-D view: all leading extents collapsed, last extent is the
    /// feature width.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.last_dim() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || expected != self.numel() {
            return Err(TensorError::BadConstruction {
                expected,
                got: self.numel(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected 2-d tensor, got shape {:?}", t.shape),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

// ── kernels ──────────────────────────────────────────────────────────────
//
// Free functions shared by the tape (which records them) and by anything that
// just wants the forward math. Each one validates shapes, computes with a
// fixed order, and checks the output for non-finite values.

/// `[m×k] · [k×n] -> [m×n]`, accumulation strictly left-to-right over k.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            detail: format!("inner extents {k} vs {k2}"),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (kk, &av) in arow.iter().enumerate() {
                acc += av * b.data[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    ensure_finite("matmul", &out)?;
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn transpose(x: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = require_2d("transpose", x)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    ensure_finite("add", &data)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    ensure_finite("mul", &data)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(x: &Tensor, c: f64) -> Result<Tensor, TensorError> {
    let data: Vec<f64> = x.data.iter().map(|v| v * c).collect();
    ensure_finite("scale", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Adds `bias[n]` to every row of `x[..×n]`.
pub fn add_row_broadcast(x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let w = x.last_dim();
    if bias.shape != [w] {
        return Err(TensorError::ShapeMismatch {
            op: "add_row_broadcast",
            detail: format!("bias {:?} vs row width {w}", bias.shape),
        });
    }
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(w) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    ensure_finite("add_row_broadcast", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Elementwise x * sigmoid(x).
pub fn silu(x: &Tensor) -> Result<Tensor, TensorError> {
    let data: Vec<f64> = x.data.iter().map(|&v| v * sigmoid(v)).collect();
    ensure_finite("silu", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Per-vector `x / sqrt(mean(x²) + eps) ⊙ gain` over the last dimension.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    let w = x.last_dim();
    if gain.shape != [w] {
        return Err(TensorError::ShapeMismatch {
            op: "rmsnorm",
            detail: format!("gain {:?} vs width {w}", gain.shape),
        });
    }
    let mut data = vec![0.0; x.numel()];
    for (r, row) in x.data.chunks_exact(w).enumerate() {
        let mut ms = 0.0;
        for &v in row {
            ms += v * v;
        }
        ms /= w as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (c, &v) in row.iter().enumerate() {
            data[r * w + c] = v * inv * gain.data[c];
        }
    }
    ensure_finite("rmsnorm", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

fn softmax_in_place(row: &mut [f64], len: usize) {
    let mut max = f64::NEG_INFINITY;
    for &v in row[..len].iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row[..len].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row[..len].iter_mut() {
        *v /= sum;
    }
    for v in row[len..].iter_mut() {
        *v = 0.0;
    }
}

/// Row-wise softmax with max subtraction. Total on finite input.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    let w = x.last_dim();
    let mut data = x.data.clone();
    for row in data.chunks_exact_mut(w) {
        softmax_in_place(row, w);
    }
    ensure_finite("softmax_rows", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Softmax of row i over columns 0..=i only; later columns get exactly 0.
/// Keeps causal attention free of -inf intermediates.
pub fn causal_softmax_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = require_2d("causal_softmax_rows", x)?;
    if n < m {
        return Err(TensorError::ShapeMismatch {
            op: "causal_softmax_rows",
            detail: format!("need cols >= rows, got {m}x{n}"),
        });
    }
    let mut data = x.data.clone();
    for (i, row) in data.chunks_exact_mut(n).enumerate() {
        softmax_in_place(row, i + 1);
    }
    ensure_finite("causal_softmax_rows", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Gathers `table` rows by id: out row i = table row ids[i].
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor, TensorError> {
    let (rows, w) = require_2d("gather_rows", table)?;
    if ids.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "gather_rows",
            detail: "empty id list".into(),
        });
    }
    let mut data = Vec::with_capacity(ids.len() * w);
    for &id in ids {
        if id >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                detail: format!("row {id} of {rows}"),
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor {
        shape: vec![ids.len(), w],
        data,
    })
}

/// Builds a matrix whose row j is `sources[picks[j].0]` row `picks[j].1`.
/// All sources must share one width.
pub fn compose_rows(sources: &[&Tensor], picks: &[(usize, usize)]) -> Result<Tensor, TensorError> {
    if sources.is_empty() || picks.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "compose_rows",
            detail: "empty sources or picks".into(),
        });
    }
    let w = sources[0].last_dim();
    for s in sources {
        if s.last_dim() != w {
            return Err(TensorError::ShapeMismatch {
                op: "compose_rows",
                detail: format!("width {} vs {w}", s.last_dim()),
            });
        }
    }
    let mut data = Vec::with_capacity(picks.len() * w);
    for &(s, r) in picks {
        if s >= sources.len() || r >= sources[s].rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "compose_rows",
                detail: format!("pick ({s}, {r})"),
            });
        }
        data.extend_from_slice(sources[s].row(r));
    }
    Ok(Tensor {
        shape: vec![picks.len(), w],
        data,
    })
}

pub fn slice_cols(x: &Tensor, from: usize, to: usize) -> Result<Tensor, TensorError> {
    let (m, n) = require_2d("slice_cols", x)?;
    if from >= to || to > n {
        return Err(TensorError::IndexOutOfRange {
            op: "slice_cols",
            detail: format!("cols {from}..{to} of {n}"),
        });
    }
    let w = to - from;
    let mut data = Vec::with_capacity(m * w);
    for i in 0..m {
        data.extend_from_slice(&x.data[i * n + from..i * n + to]);
    }
    Ok(Tensor {
        shape: vec![m, w],
        data,
    })
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "concat_cols",
            detail: "no parts".into(),
        });
    }
    let m = require_2d("concat_cols", parts[0])?.0;
    let mut total = 0;
    for p in parts {
        let (pm, pw) = require_2d("concat_cols", p)?;
        if pm != m {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts {pm} vs {m}"),
            });
        }
        total += pw;
    }
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor {
        shape: vec![m, total],
        data,
    })
}

/// Sum of all elements, walked in memory order.
pub fn sum_all(x: &Tensor) -> Result<Tensor, TensorError> {
    let mut acc = 0.0;
    for &v in &x.data {
        acc += v;
    }
    ensure_finite("sum_all", std::slice::from_ref(&acc))?;
    Ok(Tensor::scalar(acc))
}

/// Mean cross-entropy of `logits[i]` against `targets[i]` over masked rows,
/// computed via log-sum-exp so tiny probabilities never produce log(0).
pub fn masked_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<Tensor, TensorError> {
    let (m, n) = require_2d("masked_cross_entropy", logits)?;
    if targets.len() != m || mask.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "masked_cross_entropy",
            detail: format!("{m} rows vs {} targets, {} mask", targets.len(), mask.len()),
        });
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "masked_cross_entropy",
            detail: "empty loss mask".into(),
        });
    }
    let mut total = 0.0;
    for i in 0..m {
        if !mask[i] {
            continue;
        }
        if targets[i] >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "masked_cross_entropy",
                detail: format!("target {} of vocab {n}", targets[i]),
            });
        }
        let row = logits.row(i);
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        total += max + sum.ln() - row[targets[i]];
    }
    let loss = total / count as f64;
    ensure_finite("masked_cross_entropy", std::slice::from_ref(&loss))?;
    Ok(Tensor::scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_inputs() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let b = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_matches_naive_oracle_exactly() {
        // Independent triple loop in a different loop order.
        let mut rng = crate::seed::SeedSplitter::new(11).stream("mm");
        let a = Tensor::new(
            vec![5, 4],
            (0..20).map(|_| crate::seed::next_gaussian(&mut rng)).collect(),
        )
        .unwrap();
        let b = Tensor::new(
            vec![4, 3],
            (0..12).map(|_| crate::seed::next_gaussian(&mut rng)).collect(),
        )
        .unwrap();
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at2(i, k) * b.at2(k, j);
                }
                assert_eq!(c.at2(i, j), acc);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 2], &[0.; 4]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_equal_row_is_uniform() {
        let x = t(&[1, 4], &[2.5; 4]);
        let p = softmax_rows(&x).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_analytic_quarters() {
        let x = t(&[1, 2], &[0.0, 3f64.ln()]);
        let p = softmax_rows(&x).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::seed::SeedSplitter::new(2).stream("sm");
        let x = Tensor::new(
            vec![4, 6],
            (0..24)
                .map(|_| crate::seed::next_gaussian(&mut rng) * 5.0)
                .collect(),
        )
        .unwrap();
        let p = softmax_rows(&x).unwrap();
        for i in 0..4 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let x = t(&[3, 3], &[5., 9., 9., 1., 1., 9., 0., 0., 0.]);
        let p = causal_softmax_rows(&x).unwrap();
        assert_eq!(p.at2(0, 0), 1.0);
        assert_eq!(p.at2(0, 1), 0.0);
        assert_eq!(p.at2(0, 2), 0.0);
        assert!((p.at2(1, 0) - 0.5).abs() < 1e-15);
        assert_eq!(p.at2(1, 2), 0.0);
        let last: f64 = p.row(2).iter().sum();
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_constant_vector_gives_ones() {
        let x = t(&[2, 3], &[4.0; 6]);
        let gain = t(&[3], &[1.0; 3]);
        let y = rmsnorm(&x, &gain, 0.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsnorm_zero_gain_zero_output() {
        let x = t(&[1, 3], &[1., -2., 3.]);
        let gain = t(&[3], &[0.0; 3]);
        let y = rmsnorm(&x, &gain, 0.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmsnorm_output_has_unit_rms() {
        let mut rng = crate::seed::SeedSplitter::new(5).stream("rn");
        let x = Tensor::new(
            vec![3, 8],
            (0..24)
                .map(|_| crate::seed::next_gaussian(&mut rng) * 3.0)
                .collect(),
        )
        .unwrap();
        let gain = t(&[8], &[1.0; 8]);
        let y = rmsnorm(&x, &gain, 0.0).unwrap();
        for i in 0..3 {
            let ms: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((ms.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn silu_fixed_points() {
        let x = t(&[1, 2], &[0.0, 20.0]);
        let y = silu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1] > 19.99 && y.data()[1] <= 20.0);
    }

    #[test]
    fn silu_matches_closed_form_on_grid() {
        let xs: Vec<f64> = (-50..=50).map(|i| i as f64 / 10.0).collect();
        let x = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
        let y = silu(&x).unwrap();
        for (v, out) in xs.iter().zip(y.data()) {
            let expect = v / (1.0 + (-v).exp());
            assert!((out - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let logits = t(&[2, 256], &[0.7; 512]);
        let loss = masked_cross_entropy(&logits, &[3, 200], &[true, true]).unwrap();
        assert!((loss.item() - 256f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_confident_logits_near_zero() {
        let mut data = vec![0.0; 8];
        data[5] = 60.0;
        let logits = t(&[1, 8], &data);
        let loss = masked_cross_entropy(&logits, &[5], &[true]).unwrap();
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn cross_entropy_single_masked_row_matches_hand_value() {
        let logits = t(&[2, 3], &[1.0, 2.0, 3.0, 0.5, -0.5, 0.0]);
        let loss = masked_cross_entropy(&logits, &[0, 2], &[false, true]).unwrap();
        let row: [f64; 3] = [0.5, -0.5, 0.0];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let expect = z.ln() - row[2];
        assert!((loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let logits = t(&[1, 4], &[0.0; 4]);
        assert!(masked_cross_entropy(&logits, &[0], &[false]).is_err());
    }

    #[test]
    fn compose_and_slice_roundtrip() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[1, 3], &[7., 8., 9.]);
        let merged = compose_rows(&[&a, &b], &[(1, 0), (0, 1), (0, 0)]).unwrap();
        assert_eq!(merged.row(0), &[7., 8., 9.]);
        assert_eq!(merged.row(1), &[4., 5., 6.]);
        let cols = slice_cols(&merged, 1, 3).unwrap();
        assert_eq!(cols.row(2), &[2., 3.]);
    }

    #[test]
    fn concat_cols_recovers_slices() {
        let x = t(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let left = slice_cols(&x, 0, 2).unwrap();
        let right = slice_cols(&x, 2, 4).unwrap();
        assert_eq!(concat_cols(&[&left, &right]).unwrap(), x);
    }
}
