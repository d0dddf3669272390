//! Golden reference implementations: literal nested-loop integer versions of
//! every operation, with no tiling or reordering, used to verify the engine
//! and host pipeline bit-exactly.

use std::collections::HashMap;

use thiserror::Error;

use crate::graph_ir::{ActFunc, LayerKind, ModelGraph, Padding};
use crate::quant::{shift_round_half_even, FixedPointFormat, QTensor};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("window {0}x{1} larger than tensor")]
    WindowTooLarge(usize, usize),
}

/// Accumulator fixed-point format for an (x, k) product chain.
fn acc_format(x: FixedPointFormat, k: FixedPointFormat) -> FixedPointFormat {
    FixedPointFormat::new(62, x.frac + k.frac, true)
}

/// Quantize one accumulator value: right shift, round half to even, saturate.
pub fn ref_quantize(acc: i64, shift: u32, out: FixedPointFormat) -> i64 {
    out.saturate(shift_round_half_even(acc, shift))
}

/// Bias term aligned to the accumulator scale.
fn aligned_bias(bias: Option<&QTensor>, o: usize, acc_frac: i32) -> i64 {
    match bias {
        None => 0,
        Some(b) => {
            let sh = acc_frac - b.format.frac;
            debug_assert!(sh >= 0, "bias has more fractional bits than the accumulator");
            b.data[o] << sh
        }
    }
}

/// Direct integer 2-D convolution with bias, shift, and saturation.
#[allow(clippy::too_many_arguments)]
pub fn ref_conv2d(
    x: &QTensor,
    k: &QTensor,
    bias: Option<&QTensor>,
    shift: u32,
    out_format: FixedPointFormat,
    stride: [usize; 2],
    padding: Padding,
) -> Result<QTensor, OracleError> {
    let [n_, h, w, i] = shape4(x)?;
    let kshape = shape4(k)?;
    let [kh, kw, ki, o] = kshape;
    if ki != i {
        return Err(OracleError::ShapeMismatch(format!(
            "conv weights expect {ki} input channels, tensor has {i}"
        )));
    }
    let (pad_t, pad_l) = match padding {
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(OracleError::WindowTooLarge(kh, kw));
            }
            (0, 0)
        }
    };
    let (oh, ow) = match padding {
        Padding::Same => (h.div_ceil(stride[0]), w.div_ceil(stride[1])),
        Padding::Valid => ((h - kh) / stride[0] + 1, (w - kw) / stride[1] + 1),
    };
    let accf = acc_format(x.format, k.format);
    let mut out = vec![0i64; n_ * oh * ow * o];
    for n in 0..n_ {
        for oy in 0..oh {
            for ox in 0..ow {
                let base_y = (oy * stride[0]) as isize - pad_t;
                let base_x = (ox * stride[1]) as isize - pad_l;
                for oc in 0..o {
                    let mut acc: i64 = aligned_bias(bias, oc, accf.frac);
                    for dy in 0..kh {
                        let y = base_y + dy as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for dx in 0..kw {
                            let xx = base_x + dx as isize;
                            if xx < 0 || xx as usize >= w {
                                continue;
                            }
                            for ic in 0..i {
                                let xv = x.data[((n * h + y as usize) * w + xx as usize) * i + ic];
                                let kv = k.data[((dy * kw + dx) * i + ic) * o + oc];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * o + oc] =
                        ref_quantize(acc, shift, out_format);
                }
            }
        }
    }
    Ok(QTensor::new_unchecked(vec![n_, oh, ow, o], out, out_format))
}

/// Dense layer over flattened input `[N,1,1,F]` with weights `[F][O]`.
pub fn ref_dense(
    x: &QTensor,
    k: &QTensor,
    bias: Option<&QTensor>,
    shift: u32,
    out_format: FixedPointFormat,
) -> Result<QTensor, OracleError> {
    let [n, h, w, f] = shape4(x)?;
    if h != 1 || w != 1 {
        return Err(OracleError::ShapeMismatch(format!(
            "dense expects [N,1,1,F], got [{n},{h},{w},{f}]"
        )));
    }
    let y = ref_mm(&x.data, n, f, k, bias, shift, out_format, x.format)?;
    let o = k.len() / f;
    Ok(QTensor::new_unchecked(vec![n, 1, 1, o], y, out_format))
}

/// Matrix multiply: `x [1,R,1,I] · k [I][O] -> [1,R,1,O]`.
pub fn ref_matmul(
    x: &QTensor,
    k: &QTensor,
    bias: Option<&QTensor>,
    shift: u32,
    out_format: FixedPointFormat,
) -> Result<QTensor, OracleError> {
    let [n, rows, w, i] = shape4(x)?;
    if n != 1 || w != 1 {
        return Err(OracleError::ShapeMismatch(format!(
            "matmul expects [1,R,1,I], got [{n},{rows},{w},{i}]"
        )));
    }
    let y = ref_mm(&x.data, rows, i, k, bias, shift, out_format, x.format)?;
    let o = k.len() / i;
    Ok(QTensor::new_unchecked(vec![1, rows, 1, o], y, out_format))
}

#[allow(clippy::too_many_arguments)]
fn ref_mm(
    x: &[i64],
    rows: usize,
    i: usize,
    k: &QTensor,
    bias: Option<&QTensor>,
    shift: u32,
    out_format: FixedPointFormat,
    x_format: FixedPointFormat,
) -> Result<Vec<i64>, OracleError> {
    if i == 0 || k.len() % i != 0 {
        return Err(OracleError::ShapeMismatch(format!(
            "weight length {} not divisible by input dim {i}",
            k.len()
        )));
    }
    let o = k.len() / i;
    let accf = acc_format(x_format, k.format);
    let mut out = vec![0i64; rows * o];
    for r in 0..rows {
        for oc in 0..o {
            let mut acc: i64 = aligned_bias(bias, oc, accf.frac);
            for ic in 0..i {
                acc += x[r * i + ic] * k.data[ic * o + oc];
            }
            out[r * o + oc] = ref_quantize(acc, shift, out_format);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefPoolKind {
    Max,
    Avg,
}

/// Pooling with 'same' or 'valid' padding. Average pooling divides by the
/// full window size with floor division; out-of-range taps contribute zero to
/// the sum (max pooling skips them).
pub fn ref_pool(
    x: &QTensor,
    kind: RefPoolKind,
    window: [usize; 2],
    stride: [usize; 2],
    padding: Padding,
) -> Result<QTensor, OracleError> {
    let [n_, h, w, c] = shape4(x)?;
    let [kh, kw] = window;
    let (pad_t, pad_l) = match padding {
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(OracleError::WindowTooLarge(kh, kw));
            }
            (0, 0)
        }
    };
    let (oh, ow) = match padding {
        Padding::Same => (h.div_ceil(stride[0]), w.div_ceil(stride[1])),
        Padding::Valid => ((h - kh) / stride[0] + 1, (w - kw) / stride[1] + 1),
    };
    let mut out = vec![0i64; n_ * oh * ow * c];
    for n in 0..n_ {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc: Option<i64> = None;
                    let mut sum: i64 = 0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let y = (oy * stride[0]) as isize - pad_t + dy as isize;
                            let xx = (ox * stride[1]) as isize - pad_l + dx as isize;
                            if y < 0 || y as usize >= h || xx < 0 || xx as usize >= w {
                                continue;
                            }
                            let v = x.data[((n * h + y as usize) * w + xx as usize) * c + ch];
                            sum += v;
                            acc = Some(acc.map_or(v, |a: i64| a.max(v)));
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * c + ch] = match kind {
                        RefPoolKind::Max => acc.unwrap_or(0),
                        RefPoolKind::Avg => sum.div_euclid((kh * kw) as i64),
                    };
                }
            }
        }
    }
    Ok(QTensor::new_unchecked(vec![n_, oh, ow, c], out, x.format))
}

pub fn ref_relu(x: &QTensor) -> QTensor {
    let data = x.data.iter().map(|&v| v.max(0)).collect();
    QTensor::new_unchecked(x.shape.clone(), data, x.format)
}

/// Saturating elementwise add in a shared format.
pub fn ref_add(a: &QTensor, b: &QTensor) -> Result<QTensor, OracleError> {
    if a.shape != b.shape {
        return Err(OracleError::ShapeMismatch(format!(
            "add operands {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| a.format.saturate(x + y))
        .collect();
    Ok(QTensor::new_unchecked(a.shape.clone(), data, a.format))
}

/// Row-wise integer softmax approximation over the channel dimension.
///
/// For each row: t_i = max − v_i in the input's fractional scale; weights
/// w_i = exp(−t_i) via a base-2 linear-segment approximation in Q15;
/// probabilities p_i = floor(w_i · 2^out_frac / Σw), saturated.
pub fn ref_softmax_rows(x: &QTensor, out_format: FixedPointFormat) -> QTensor {
    let cols = *x.shape.last().unwrap();
    let rows = x.len() / cols.max(1);
    let mut out = vec![0i64; x.len()];
    for r in 0..rows {
        let row = &x.data[r * cols..(r + 1) * cols];
        let res = softmax_row_ref(row, x.format.frac, out_format);
        out[r * cols..(r + 1) * cols].copy_from_slice(&res);
    }
    QTensor::new_unchecked(x.shape.clone(), out, out_format)
}

fn softmax_row_ref(row: &[i64], frac: i32, out: FixedPointFormat) -> Vec<i64> {
    let m = row.iter().copied().max().unwrap_or(0);
    let f = frac.max(0) as u32;
    let weights: Vec<i64> = row.iter().map(|&v| exp_neg_q15_ref(m - v, f)).collect();
    let sum: i64 = weights.iter().sum::<i64>().max(1);
    let of = out.frac.max(0) as u32;
    weights
        .iter()
        .map(|&w| out.saturate((w << of) / sum))
        .collect()
}

/// e^(−t) in Q15 for t ≥ 0 given in Q(frac), via 2^(−t·log2 e) with linear
/// interpolation of the fractional power.
fn exp_neg_q15_ref(t: i64, frac: u32) -> i64 {
    const LOG2E_Q16: i64 = 94548;
    let u = (t * LOG2E_Q16) >> 16; // Q(frac)
    let n = u >> frac;
    if n >= 15 {
        return 0;
    }
    let r = u - (n << frac);
    let lin = (1i64 << 15) - ((r << 14) >> frac);
    lin >> n
}

fn shape4(t: &QTensor) -> Result<[usize; 4], OracleError> {
    if t.shape.len() != 4 {
        return Err(OracleError::ShapeMismatch(format!(
            "expected rank-4 tensor, got {:?}",
            t.shape
        )));
    }
    Ok([t.shape[0], t.shape[1], t.shape[2], t.shape[3]])
}

fn ref_flatten(x: &QTensor) -> QTensor {
    QTensor::new_unchecked(vec![x.shape[0], 1, 1, x.len() / x.shape[0]], x.data.clone(), x.format)
}

/// Execute a whole model graph node by node in reference form.
pub fn run_reference(graph: &ModelGraph, input: &QTensor) -> Result<QTensor, OracleError> {
    let (_, last) = run_reference_values(graph, input)?;
    Ok(last)
}

/// As `run_reference`, additionally returning every node's output tensor
/// (indexed by node position) for per-stage comparisons.
pub fn run_reference_values(
    graph: &ModelGraph,
    input: &QTensor,
) -> Result<(Vec<Option<QTensor>>, QTensor), OracleError> {
    let ids: HashMap<&str, usize> =
        graph.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut values: HashMap<usize, QTensor> = HashMap::new();
    let mut last = input.clone();
    for &v in &graph.topo {
        let n = &graph.nodes[v];
        let arg = |slot: usize| -> &QTensor {
            n.inputs
                .get(slot)
                .and_then(|name| ids.get(name.as_str()))
                .and_then(|p| values.get(p))
                .unwrap_or(input)
        };
        let ofmt = graph.node_formats[v];
        let result = match n.kind {
            LayerKind::Conv2d => {
                let k = weights4(n.weights.as_ref().unwrap(), n.kernel, arg(0).shape[3]);
                ref_conv2d(arg(0), &k, n.bias.as_ref(), n.out_shift, ofmt, n.stride, n.padding)?
            }
            LayerKind::Dense => {
                let k = n.weights.clone().unwrap();
                ref_dense(arg(0), &k, n.bias.as_ref(), n.out_shift, ofmt)?
            }
            LayerKind::Matmul => {
                let k = n.weights.clone().unwrap();
                ref_matmul(arg(0), &k, n.bias.as_ref(), n.out_shift, ofmt)?
            }
            LayerKind::MaxPool => {
                ref_pool(arg(0), RefPoolKind::Max, n.kernel, n.stride, n.padding)?
            }
            LayerKind::AvgPool => {
                ref_pool(arg(0), RefPoolKind::Avg, n.kernel, n.stride, n.padding)?
            }
            LayerKind::Activation => match n.func.unwrap_or(ActFunc::Relu) {
                ActFunc::Relu => ref_relu(arg(0)),
                ActFunc::SoftmaxApprox => ref_softmax_rows(arg(0), ofmt),
            },
            LayerKind::SoftmaxApprox => ref_softmax_rows(arg(0), ofmt),
            LayerKind::Flatten => ref_flatten(arg(0)),
            LayerKind::Add => ref_add(arg(0), arg(1))?,
            LayerKind::Attention => ref_attention(n, arg(0), ofmt)?,
        };
        values.insert(v, result.clone());
        last = result;
    }
    let by_index = (0..graph.nodes.len()).map(|i| values.remove(&i)).collect();
    Ok((by_index, last))
}

fn weights4(w: &QTensor, kernel: [usize; 2], in_ch: usize) -> QTensor {
    let o = w.len() / (kernel[0] * kernel[1] * in_ch);
    QTensor::new_unchecked(vec![kernel[0], kernel[1], in_ch, o], w.data.clone(), w.format)
}

/// Reference multi-head attention matching the lowered decomposition's
/// quantization policy: each matmul stage requantizes to the layer's output
/// format, Q·Kᵀ carries an extra right shift approximating 1/sqrt(d_h), and
/// attention weights come from the row-wise softmax approximation.
fn ref_attention(
    n: &crate::graph_ir::LayerSpec,
    x: &QTensor,
    ofmt: FixedPointFormat,
) -> Result<QTensor, OracleError> {
    let [_, seq, _, dim] = shape4(x)?;
    let heads = n.heads;
    let d_h = dim / heads;
    let w_all = n.weights.as_ref().unwrap();
    let wfmt = w_all.format;
    let shift = n.out_shift;
    let scale_shift = (usize::BITS - 1 - (d_h as u32).leading_zeros()).div_ceil(2);
    let proj = |s: usize| -> QTensor {
        QTensor::new_unchecked(
            vec![dim * dim],
            w_all.data[s * dim * dim..(s + 1) * dim * dim].to_vec(),
            wfmt,
        )
    };
    let q = ref_matmul(x, &proj(0), None, shift, ofmt)?;
    let k = ref_matmul(x, &proj(1), None, shift, ofmt)?;
    let v = ref_matmul(x, &proj(2), None, shift, ofmt)?;
    let slice_cols = |t: &QTensor, lo: usize, hi: usize| -> QTensor {
        let mut data = Vec::with_capacity(seq * (hi - lo));
        for r in 0..seq {
            data.extend_from_slice(&t.data[r * dim + lo..r * dim + hi]);
        }
        QTensor::new_unchecked(vec![1, seq, 1, hi - lo], data, t.format)
    };
    let mut merged = vec![0i64; seq * dim];
    for hd in 0..heads {
        let (lo, hi) = (hd * d_h, (hd + 1) * d_h);
        let q_h = slice_cols(&q, lo, hi);
        let k_h = slice_cols(&k, lo, hi);
        let v_h = slice_cols(&v, lo, hi);
        // K_hᵀ as an [d_h][seq] weight matrix
        let mut kt = vec![0i64; d_h * seq];
        for r in 0..seq {
            for c in 0..d_h {
                kt[c * seq + r] = k_h.data[r * d_h + c];
            }
        }
        let kt = QTensor::new_unchecked(vec![d_h * seq], kt, ofmt);
        let scores = ref_matmul(&q_h, &kt, None, shift + scale_shift, ofmt)?;
        let attn = ref_softmax_rows(&scores, ofmt);
        let vh_w = QTensor::new_unchecked(vec![seq * d_h], v_h.data.clone(), ofmt);
        let out_h = ref_matmul(&attn, &vh_w, None, shift, ofmt)?;
        for r in 0..seq {
            merged[r * dim + lo..r * dim + hi]
                .copy_from_slice(&out_h.data[r * d_h..(r + 1) * d_h]);
        }
    }
    let merged = QTensor::new_unchecked(vec![1, seq, 1, dim], merged, ofmt);
    ref_matmul(&merged, &proj(3), None, shift, ofmt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::Padding;

    fn f(bits: u32, frac: i32) -> FixedPointFormat {
        FixedPointFormat::new(bits, frac, true)
    }

    fn q(shape: Vec<usize>, data: Vec<i64>, fmt: FixedPointFormat) -> QTensor {
        QTensor::new_unchecked(shape, data, fmt)
    }

    #[test]
    fn conv_identity_kernel() {
        let x = q(vec![1, 2, 2, 1], vec![1, -2, 3, -4], f(8, 0));
        let k = q(vec![1, 1, 1, 1], vec![1], f(8, 0));
        let y = ref_conv2d(&x, &k, None, 0, f(16, 0), [1, 1], Padding::Same).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_valid_window_sum() {
        let x = q(vec![1, 2, 2, 1], vec![1, 2, 3, 4], f(8, 0));
        let k = q(vec![2, 2, 1, 1], vec![1, 1, 1, 1], f(8, 0));
        let y = ref_conv2d(&x, &k, None, 0, f(16, 0), [1, 1], Padding::Valid).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1, 1]);
        assert_eq!(y.data, vec![10]);
    }

    #[test]
    fn conv_same_pads_with_zero_and_strides() {
        let x = q(vec![1, 3, 3, 1], (1..=9).collect(), f(8, 0));
        let k = q(vec![3, 3, 1, 1], vec![1; 9], f(8, 0));
        let y = ref_conv2d(&x, &k, None, 0, f(16, 0), [2, 2], Padding::Same).unwrap();
        assert_eq!(y.shape, vec![1, 2, 2, 1]);
        // windows centered at (0,0), (0,2), (2,0), (2,2)
        assert_eq!(y.data, vec![1 + 2 + 4 + 5, 2 + 3 + 5 + 6, 4 + 5 + 7 + 8, 5 + 6 + 8 + 9]);
    }

    #[test]
    fn matmul_small() {
        let x = q(vec![1, 2, 1, 2], vec![1, 2, 3, 4], f(8, 0));
        let k = q(vec![2, 1], vec![5, 6], f(8, 0));
        let y = ref_matmul(&x, &k, None, 0, f(16, 0)).unwrap();
        assert_eq!(y.shape, vec![1, 2, 1, 1]);
        assert_eq!(y.data, vec![17, 39]);
    }

    #[test]
    fn dense_with_bias_and_shift() {
        // acc = 2*3 + bias(1 << acc_frac-...); frac 0 everywhere: acc = 6 + 10
        let x = q(vec![1, 1, 1, 1], vec![2], f(8, 0));
        let k = q(vec![1, 1], vec![3], f(8, 0));
        let b = q(vec![1], vec![10], f(16, 0));
        let y = ref_dense(&x, &k, Some(&b), 1, f(8, 0)).unwrap();
        assert_eq!(y.data, vec![8]); // (6 + 10) >> 1
    }

    #[test]
    fn pools() {
        let x = q(vec![1, 2, 2, 1], vec![1, 2, 3, 4], f(8, 0));
        let mx = ref_pool(&x, RefPoolKind::Max, [2, 2], [2, 2], Padding::Valid).unwrap();
        assert_eq!(mx.data, vec![4]);
        let av = ref_pool(&x, RefPoolKind::Avg, [2, 2], [2, 2], Padding::Valid).unwrap();
        assert_eq!(av.data, vec![2]); // floor(10 / 4)
    }

    #[test]
    fn relu_and_saturating_add() {
        let x = q(vec![4], vec![-3, 0, 2, -1], f(8, 0));
        assert_eq!(ref_relu(&x).data, vec![0, 0, 2, 0]);
        let a = q(vec![2], vec![120, -120], f(8, 0));
        let b = q(vec![2], vec![20, -20], f(8, 0));
        let s = ref_add(&a, &b).unwrap();
        assert_eq!(s.data, vec![127, -128]);
    }

    #[test]
    fn quantize_rounds_half_to_even_and_saturates() {
        assert_eq!(ref_quantize(7, 1, f(8, 0)), 4);
        assert_eq!(ref_quantize(5, 1, f(8, 0)), 2);
        assert_eq!(ref_quantize(-5, 1, f(8, 0)), -2);
        assert_eq!(ref_quantize(1 << 20, 2, f(8, 0)), 127);
        assert_eq!(ref_quantize(-(1 << 20), 2, f(8, 0)), -128);
    }

    #[test]
    fn conv_is_linear_without_shift() {
        let fmt = f(8, 0);
        let x1 = q(vec![1, 3, 3, 2], (0..18).map(|v| (v % 5) - 2).collect(), fmt);
        let x2 = q(vec![1, 3, 3, 2], (0..18).map(|v| (v % 7) - 3).collect(), fmt);
        let xs = q(
            vec![1, 3, 3, 2],
            x1.data.iter().zip(&x2.data).map(|(a, b)| a + b).collect(),
            f(9, 0),
        );
        let k = q(vec![3, 3, 2, 1], (0..18).map(|v| (v % 3) - 1).collect(), fmt);
        let wide = f(32, 0);
        let conv = |x: &QTensor| {
            ref_conv2d(x, &k, None, 0, wide, [1, 1], Padding::Same).unwrap().data
        };
        let sum: Vec<i64> = conv(&x1).iter().zip(conv(&x2)).map(|(a, b)| a + b).collect();
        assert_eq!(conv(&xs), sum);
    }

    #[test]
    fn softmax_rows_behave_like_probabilities() {
        let out = f(16, 15);
        let x = q(vec![1, 4], vec![8, 1, -3, 5], f(8, 2));
        let y = ref_softmax_rows(&x, out);
        let total: i64 = y.data.iter().sum();
        assert!(y.data.iter().all(|&p| p >= 0));
        // mass sums to ~1.0 in Q15 (truncation may lose a few LSBs)
        assert!((total - (1 << 15)).abs() < 64, "total {total}");
        let argmax = (0..4).max_by_key(|&i| y.data[i]).unwrap();
        assert_eq!(argmax, 0);
    }

    #[test]
    fn softmax_uniform_row_is_uniform() {
        let y = ref_softmax_rows(&q(vec![1, 4], vec![5, 5, 5, 5], f(8, 2)), f(16, 15));
        assert!(y.data.iter().all(|&p| p == y.data[0]));
        assert_eq!(y.data[0], (1 << 15) / 4);
    }
}
