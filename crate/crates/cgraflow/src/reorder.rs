//! Tensor slicing and reordering between natural layout and engine beat
//! streams: inputs with vertical halo, weight packets, and output inversion
//! with host-side partial-sum accumulation.

use std::fmt::Write as _;

use thiserror::Error;

use crate::quant::{FixedPointFormat, QTensor};
use crate::tiler::RuntimeParams;

#[derive(Debug, Error)]
pub enum ReorderError {
    #[error("tensor shape {got:?} does not match params (expected {expected} elements)")]
    ShapeMismatch { got: Vec<usize>, expected: usize },
    #[error("stream has {got} beats, expected {expected}")]
    BeatCount { got: usize, expected: usize },
    #[error("beat {index} has width {got}, expected {expected}")]
    BeatWidth { index: usize, got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Beat {
    pub words: Vec<i64>,
    pub is_config: bool,
    pub is_last_of_packet: bool,
}

impl Beat {
    pub fn data(words: Vec<i64>) -> Self {
        Beat { words, is_config: false, is_last_of_packet: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeatStream {
    pub beats: Vec<Beat>,
}

impl BeatStream {
    pub fn len(&self) -> usize {
        self.beats.len()
    }
    pub fn is_empty(&self) -> bool {
        self.beats.is_empty()
    }

    /// Text dump for golden-file comparison: one beat per line, words
    /// space-separated; config beats prefixed `#`, packet ends suffixed `|`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for b in &self.beats {
            if b.is_config {
                s.push_str("# ");
            }
            for (i, w) in b.words.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{w}");
            }
            if b.is_last_of_packet {
                s.push_str(" |");
            }
            s.push('\n');
        }
        s
    }
}

/// Top-edge halo depth for a 'same' vertical window.
pub fn pad_top(k_h: usize) -> usize {
    (k_h - 1) / 2
}

/// Left-edge pad of a 'same' horizontal window.
pub fn pad_left(k_w: usize) -> usize {
    (k_w - 1) / 2
}

/// Right-edge pad; also the number of row-end flush emissions in the engine.
pub fn pad_right(k_w: usize) -> usize {
    k_w - 1 - pad_left(k_w)
}

fn check_elems(t: &QTensor, p: &RuntimeParams, expected: usize) -> Result<(), ReorderError> {
    if t.len() != expected {
        return Err(ReorderError::ShapeMismatch { got: t.shape.clone(), expected });
    }
    let _ = p;
    Ok(())
}

/// Slice and reorder an input tensor into the engine-facing beat stream.
///
/// Beat order is the nest `[i_t][n][h_t][w][i_s]`; each beat carries
/// `H_S + K_H - 1` vertically adjacent pixels of one channel: a height slice
/// plus halo. Halo rows take real neighboring data between slices and zeros
/// at the image borders; rows of a partial final slice are zero.
pub fn reorder_input(x: &QTensor, p: &RuntimeParams) -> Result<BeatStream, ReorderError> {
    check_elems(x, p, p.N * p.H * p.W * p.I)?;
    let width = p.input_beat_width();
    let pt = pad_top(p.K_H);
    let mut beats = Vec::with_capacity(p.I_T * p.N * p.H_T * p.W * p.I_S);
    let at = |n: usize, h: usize, w: usize, i: usize| -> i64 {
        x.data[((n * p.H + h) * p.W + w) * p.I + i]
    };
    for i_t in 0..p.I_T {
        for n in 0..p.N {
            for h_t in 0..p.H_T {
                for w in 0..p.W {
                    for i_s in 0..p.I_S {
                        let i = i_t * p.I_S + i_s;
                        let base = (h_t * p.H_S) as isize - pt as isize;
                        let words: Vec<i64> = (0..width)
                            .map(|j| {
                                let h = base + j as isize;
                                if i >= p.I || h < 0 || h as usize >= p.H {
                                    0
                                } else {
                                    at(n, h as usize, w, i)
                                }
                            })
                            .collect();
                        beats.push(Beat::data(words));
                    }
                }
            }
        }
    }
    Ok(BeatStream { beats })
}

/// Reorder a weight tensor `[K_H,K_W,I,O]` into cache packets.
///
/// One packet per `(i_t, o_t)`: a leading config beat (per-column group
/// position) followed by `I_S·K_H` cache rows of `O_S·K_W` words in the nest
/// `[i_s][k_h]` by `[o_s][k_w]`. Out-of-range slice entries are zero; the
/// final row of each packet is tagged.
pub fn reorder_weights(k: &QTensor, p: &RuntimeParams) -> Result<BeatStream, ReorderError> {
    check_elems(k, p, p.K_H * p.K_W * p.I * p.O)?;
    let width = p.weight_beat_width();
    let at = |kh: usize, kw: usize, i: usize, o: usize| -> i64 {
        k.data[((kh * p.K_W + kw) * p.I + i) * p.O + o]
    };
    let mut beats = Vec::new();
    for i_t in 0..p.I_T {
        for o_t in 0..p.O_T {
            let config: Vec<i64> =
                (0..width).map(|c| (c % p.K_W) as i64).collect();
            beats.push(Beat { words: config, is_config: true, is_last_of_packet: false });
            for i_s in 0..p.I_S {
                for kh in 0..p.K_H {
                    let i = i_t * p.I_S + i_s;
                    let words: Vec<i64> = (0..width)
                        .map(|c| {
                            let (o_s, kw) = (c / p.K_W, c % p.K_W);
                            let o = o_t * p.O_S + o_s;
                            if i >= p.I || o >= p.O {
                                0
                            } else {
                                at(kh, kw, i, o)
                            }
                        })
                        .collect();
                    let last = i_s == p.I_S - 1 && kh == p.K_H - 1;
                    beats.push(Beat { words, is_config: false, is_last_of_packet: last });
                }
            }
        }
    }
    Ok(BeatStream { beats })
}

/// Invert the engine output stream to the natural-layout pre-activation
/// tensor, accumulating partial sums across input-channel tiles and dropping
/// padded rows and channels.
pub fn deorder_output(
    y_t: &BeatStream,
    p: &RuntimeParams,
    acc_format: FixedPointFormat,
) -> Result<QTensor, ReorderError> {
    let expected = p.I_T * p.O_T * p.N * p.H_T * p.W;
    if y_t.len() != expected {
        return Err(ReorderError::BeatCount { got: y_t.len(), expected });
    }
    let width = p.output_beat_width();
    let mut out = vec![0i64; p.N * p.H * p.W * p.O];
    let mut idx = 0usize;
    for _i_t in 0..p.I_T {
        for o_t in 0..p.O_T {
            for n in 0..p.N {
                for h_t in 0..p.H_T {
                    for w in 0..p.W {
                        let beat = &y_t.beats[idx];
                        if beat.words.len() != width {
                            return Err(ReorderError::BeatWidth {
                                index: idx,
                                got: beat.words.len(),
                                expected: width,
                            });
                        }
                        for o_s in 0..p.O_S {
                            let o = o_t * p.O_S + o_s;
                            if o >= p.O {
                                continue;
                            }
                            for h_s in 0..p.H_S {
                                let h = h_t * p.H_S + h_s;
                                if h >= p.H {
                                    continue;
                                }
                                out[((n * p.H + h) * p.W + w) * p.O + o] +=
                                    beat.words[o_s * p.H_S + h_s];
                            }
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(QTensor::new_unchecked(vec![p.N, p.H, p.W, p.O], out, acc_format))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::{ActivationCode, PoolCode, PostCodes, RuntimeParams};

    fn default_post() -> PostCodes {
        PostCodes {
            bias: false,
            shift: 0,
            activation: ActivationCode::None,
            pool: PoolCode::None,
            pool_window: [1, 1],
            pool_stride: [1, 1],
            flatten: false,
            skip: None,
            stride: [1, 1],
            valid_crop: false,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn params(
        kh: usize, kw: usize, n: usize, h: usize, w: usize, i: usize, o: usize,
        rows: usize, cols: usize, dw: usize,
    ) -> RuntimeParams {
        let (h_s, i_s, o_s) = (rows, dw / kh, cols / kw);
        RuntimeParams {
            K_H: kh, K_W: kw, N: n, W: w, H: h, I: i, O: o,
            H_S: h_s, I_S: i_s, O_S: o_s,
            H_T: h.div_ceil(h_s), I_T: i.div_ceil(i_s), O_T: o.div_ceil(o_s),
            post: default_post(),
        }
    }

    fn q(shape: Vec<usize>, data: Vec<i64>) -> QTensor {
        QTensor::new_unchecked(shape, data, crate::quant::FixedPointFormat::new(16, 0, true))
    }

    #[test]
    fn pad_splits() {
        assert_eq!((pad_top(1), pad_top(3), pad_top(7)), (0, 1, 3));
        assert_eq!((pad_left(1), pad_left(3), pad_left(4)), (0, 1, 1));
        assert_eq!((pad_right(1), pad_right(3), pad_right(4)), (0, 1, 2));
        for k in 1..=11 {
            assert_eq!(pad_left(k) + pad_right(k) + 1, k);
        }
    }

    #[test]
    fn input_identity_beat() {
        // one exact height slice, no halo: the beat is the column itself
        let p = params(1, 1, 1, 2, 1, 1, 1, 2, 1, 1);
        let s = reorder_input(&q(vec![1, 2, 1, 1], vec![7, 9]), &p).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.beats[0].words, vec![7, 9]);
    }

    #[test]
    fn input_halo_between_slices_and_zero_at_borders() {
        // H=4 split into two 2-row slices with a K_H=3 halo
        let p = params(3, 1, 1, 4, 1, 1, 1, 2, 1, 3);
        let s = reorder_input(&q(vec![1, 4, 1, 1], vec![1, 2, 3, 4]), &p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.beats[0].words, vec![0, 1, 2, 3]); // zero above the image
        assert_eq!(s.beats[1].words, vec![2, 3, 4, 0]); // real halo, zero below
    }

    #[test]
    fn input_beat_count_and_width() {
        let p = params(3, 3, 2, 10, 5, 7, 4, 4, 6, 9);
        let x = q(vec![2, 10, 5, 7], (0..2 * 10 * 5 * 7).map(|v| v as i64).collect());
        let s = reorder_input(&x, &p).unwrap();
        assert_eq!(s.len(), p.I_T * p.N * p.H_T * p.W * p.I_S);
        assert!(s.beats.iter().all(|b| b.words.len() == p.input_beat_width()));
    }

    #[test]
    fn input_exact_tiling_is_a_bijection() {
        // K_H = 1 and exact tiles: every element appears exactly once
        let p = params(1, 1, 1, 8, 3, 4, 1, 4, 1, 4);
        let x = q(vec![1, 8, 3, 4], (1..=96).collect());
        let s = reorder_input(&x, &p).unwrap();
        let mut seen: Vec<i64> = s.beats.iter().flat_map(|b| b.words.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (1..=96).collect::<Vec<i64>>());
    }

    #[test]
    fn weight_packet_layout() {
        // K=[2,3], I=1, O=2 on 6 columns: one packet, config beat then rows
        let p = params(2, 3, 1, 4, 4, 1, 2, 2, 6, 2);
        let k = q(vec![2, 3, 1, 2], (1..=12).collect());
        let s = reorder_weights(&k, &p).unwrap();
        assert_eq!(s.len(), p.I_T * p.O_T * (1 + p.I_S * p.K_H));
        assert!(s.beats[0].is_config);
        assert_eq!(s.beats[0].words, vec![0, 1, 2, 0, 1, 2]); // group positions
        // row kh: [o_s=0: kw 0..3][o_s=1: kw 0..3], k[(kh*3+kw)*2 + o]
        assert_eq!(s.beats[1].words, vec![1, 3, 5, 2, 4, 6]);
        assert_eq!(s.beats[2].words, vec![7, 9, 11, 8, 10, 12]);
        assert!(s.beats[2].is_last_of_packet);
    }

    #[test]
    fn weight_padding_channels_are_zero() {
        // O=1 on O_S=2: the second group is zero-filled
        let p = params(1, 1, 1, 2, 1, 1, 1, 2, 2, 4);
        let k = q(vec![1, 1, 1, 1], vec![9]);
        let s = reorder_weights(&k, &p).unwrap();
        assert_eq!(s.beats[1].words, vec![9, 0]);
    }

    #[test]
    fn deorder_accumulates_channel_tiles() {
        // I_T = 2: two partial-sum beats for the same output positions
        let p = params(1, 1, 1, 2, 1, 2, 1, 2, 1, 1);
        assert_eq!(p.I_T, 2);
        let y_t = BeatStream {
            beats: vec![Beat::data(vec![1, 2]), Beat::data(vec![10, 20])],
        };
        let f = crate::quant::FixedPointFormat::new(32, 0, true);
        let y = deorder_output(&y_t, &p, f).unwrap();
        assert_eq!(y.shape, vec![1, 2, 1, 1]);
        assert_eq!(y.data, vec![11, 22]);
    }

    #[test]
    fn deorder_drops_padded_rows_and_channels() {
        // H=3 on H_S=2, O=1 on O_S=2: padded lanes are discarded
        let p = params(1, 1, 1, 3, 1, 1, 1, 2, 2, 4);
        let y_t = BeatStream {
            beats: vec![Beat::data(vec![1, 2, 91, 92]), Beat::data(vec![3, 99, 93, 94])],
        };
        let f = crate::quant::FixedPointFormat::new(32, 0, true);
        let y = deorder_output(&y_t, &p, f).unwrap();
        assert_eq!(y.data, vec![1, 2, 3]);
    }

    #[test]
    fn deorder_rejects_wrong_beat_count() {
        let p = params(1, 1, 1, 2, 1, 1, 1, 2, 1, 4);
        let f = crate::quant::FixedPointFormat::new(32, 0, true);
        assert!(matches!(
            deorder_output(&BeatStream::default(), &p, f),
            Err(ReorderError::BeatCount { got: 0, expected: 1 })
        ));
    }

    #[test]
    fn dump_format() {
        let s = BeatStream {
            beats: vec![
                Beat { words: vec![0, 1], is_config: true, is_last_of_packet: false },
                Beat { words: vec![5, -3], is_config: false, is_last_of_packet: true },
            ],
        };
        assert_eq!(s.dump(), "# 0 1\n5 -3 |\n");
    }
}
