//! Mapping bundles onto a CGRA configuration: slice sizes and tile counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_ir::{ActFunc, Bundle, CoreOp, PoolKind};

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("kernel width {kw} exceeds array width {c}: no column group fits")]
    KernelTooWide { kw: usize, c: usize },
    #[error("kernel height {kh} exceeds cache depth {dw}: no channel slice fits")]
    KernelTooTall { kh: usize, dw: usize },
    #[error("{dim} = {value} exceeds runtime register limit {limit}")]
    RegisterLimit { dim: &'static str, value: usize, limit: usize },
}

/// Static hardware build parameters plus verification knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CgraConfig {
    pub rows: usize,
    pub cols: usize,
    pub cache_depth: usize,
    pub bits_x: u32,
    pub bits_k: u32,
    pub bits_b: u32,
    pub bits_y: u32,
    pub max_n: usize,
    pub max_kh: usize,
    pub max_kw: usize,
    pub max_i: usize,
    pub max_h: usize,
    pub max_w: usize,
    pub p_valid: f64,
    pub p_ready: f64,
    pub rng_seed: u64,
}

impl Default for CgraConfig {
    fn default() -> Self {
        CgraConfig {
            rows: 8,
            cols: 24,
            cache_depth: 24,
            bits_x: 8,
            bits_k: 8,
            bits_b: 16,
            bits_y: 8,
            max_n: 1 << 8,
            max_kh: 11,
            max_kw: 11,
            max_i: 1 << 16,
            max_h: 1 << 16,
            max_w: 1 << 16,
            p_valid: 1.0,
            p_ready: 1.0,
            rng_seed: 0,
        }
    }
}

impl CgraConfig {
    pub fn validate(&self) -> Result<(), TilerError> {
        let bad = |m: String| Err(TilerError::BadConfig(m));
        if self.rows < 1 || self.cols < 1 {
            return bad(format!("rows={}, cols={} must be >= 1", self.rows, self.cols));
        }
        if self.cache_depth < self.max_kh {
            return bad(format!(
                "cache_depth={} < max_kh={}: at least one channel slice must fit",
                self.cache_depth, self.max_kh
            ));
        }
        for (name, b) in [
            ("bits_x", self.bits_x),
            ("bits_k", self.bits_k),
            ("bits_b", self.bits_b),
            ("bits_y", self.bits_y),
        ] {
            if !(1..=32).contains(&b) {
                return bad(format!("{name}={b} outside 1..=32"));
            }
        }
        for (name, p) in [("p_valid", self.p_valid), ("p_ready", self.p_ready)] {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("{name}={p} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationCode {
    None,
    Relu,
    SoftmaxApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolCode {
    None,
    Max,
    Avg,
}

/// Host post-processing opcodes carried with the runtime parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostCodes {
    pub bias: bool,
    pub shift: u32,
    pub activation: ActivationCode,
    pub pool: PoolCode,
    pub pool_window: [usize; 2],
    pub pool_stride: [usize; 2],
    pub flatten: bool,
    pub skip: Option<usize>,
    pub stride: [usize; 2],
    /// Crop the 'same'-domain engine output down to the valid window.
    pub valid_crop: bool,
}

/// Per-bundle runtime register values (the Table-2 parameter set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct RuntimeParams {
    pub K_H: usize,
    pub K_W: usize,
    pub N: usize,
    pub W: usize,
    pub H: usize,
    pub I: usize,
    pub O: usize,
    pub H_S: usize,
    pub I_S: usize,
    pub O_S: usize,
    pub H_T: usize,
    pub I_T: usize,
    pub O_T: usize,
    pub post: PostCodes,
}

impl RuntimeParams {
    /// Width of one input beat.
    pub fn input_beat_width(&self) -> usize {
        self.H_S + self.K_H - 1
    }
    /// Width of one weights-cache row.
    pub fn weight_beat_width(&self) -> usize {
        self.O_S * self.K_W
    }
    /// Width of one output beat.
    pub fn output_beat_width(&self) -> usize {
        self.O_S * self.H_S
    }
    /// Kept output rows in the 'same'-domain grid as (offset, step, count),
    /// after the valid-window crop and stride subsampling.
    pub fn kept_rows(&self) -> (usize, usize, usize) {
        let s = self.post.stride[0];
        if self.post.valid_crop {
            let valid = self.H + 1 - self.K_H;
            (crate::reorder::pad_top(self.K_H), s, valid.div_ceil(s))
        } else {
            (0, s, self.H.div_ceil(s))
        }
    }

    /// Kept output columns, same convention as `kept_rows`.
    pub fn kept_cols(&self) -> (usize, usize, usize) {
        let s = self.post.stride[1];
        if self.post.valid_crop {
            let valid = self.W + 1 - self.K_W;
            (crate::reorder::pad_left(self.K_W), s, valid.div_ceil(s))
        } else {
            (0, s, self.W.div_ceil(s))
        }
    }

    /// Final spatial output dims of the core op (post crop and stride).
    pub fn out_dims(&self) -> (usize, usize) {
        (self.kept_rows().2, self.kept_cols().2)
    }

    /// MAC count of the mapped core op (real work, not padded slices).
    pub fn macs(&self) -> u64 {
        (self.N * self.H * self.W * self.I * self.O * self.K_H * self.K_W) as u64
    }
}

/// Map a bundle onto the array per the unified dataflow's runtime parameters.
pub fn compute_runtime_params(
    bundle: &Bundle,
    config: &CgraConfig,
) -> Result<RuntimeParams, TilerError> {
    config.validate()?;
    let [kh, kw] = bundle.kernel;
    // Dense and matmul map as 1x1 with the row count presented along H.
    let (n, h, w, i) = match bundle.core {
        CoreOp::Conv2d => {
            let [n, h, w, i] = bundle.in_shape;
            (n, h, w, i)
        }
        CoreOp::Dense => {
            // [N,1,1,F] -> batch along H
            let [n, _, _, f] = bundle.in_shape;
            (1, n, 1, f)
        }
        CoreOp::Matmul => {
            let [_, rows, _, cols] = bundle.in_shape;
            (1, rows, 1, cols)
        }
    };
    let o = bundle.out_channels();
    let (r, c, dw) = (config.rows, config.cols, config.cache_depth);

    if kw > c {
        return Err(TilerError::KernelTooWide { kw, c });
    }
    if kh > dw {
        return Err(TilerError::KernelTooTall { kh, dw });
    }
    let limit = |dim: &'static str, value: usize, limit: usize| {
        if value > limit {
            Err(TilerError::RegisterLimit { dim, value, limit })
        } else {
            Ok(())
        }
    };
    limit("K_H", kh, config.max_kh)?;
    limit("K_W", kw, config.max_kw)?;
    limit("N", n, config.max_n)?;
    limit("H", h, config.max_h)?;
    limit("W", w, config.max_w)?;
    limit("I", i, config.max_i)?;

    let h_s = r;
    let i_s = dw / kh; // capacity-respecting floor; >= 1 by the check above
    let o_s = c / kw;
    let params = RuntimeParams {
        K_H: kh,
        K_W: kw,
        N: n,
        W: w,
        H: h,
        I: i,
        O: o,
        H_S: h_s,
        I_S: i_s,
        O_S: o_s,
        H_T: h.div_ceil(h_s),
        I_T: i.div_ceil(i_s),
        O_T: o.div_ceil(o_s),
        post: post_codes(bundle),
    };
    debug_assert!(params.I_S * params.K_H <= dw);
    Ok(params)
}

fn post_codes(bundle: &Bundle) -> PostCodes {
    let e = &bundle.enabled;
    let (pool, pw, ps) = match e.pooling {
        None => (PoolCode::None, [1, 1], [1, 1]),
        Some(p) => (
            match p.kind {
                PoolKind::Max => PoolCode::Max,
                PoolKind::Avg => PoolCode::Avg,
            },
            p.window,
            p.stride,
        ),
    };
    PostCodes {
        bias: e.bias,
        shift: bundle.out_shift,
        activation: match e.activation {
            None => ActivationCode::None,
            Some(ActFunc::Relu) => ActivationCode::Relu,
            Some(ActFunc::SoftmaxApprox) => ActivationCode::SoftmaxApprox,
        },
        pool,
        pool_window: pw,
        pool_stride: ps,
        flatten: e.flatten,
        skip: match bundle.skip_source {
            Some(crate::graph_ir::SkipSource::Bundle(b)) => Some(b),
            _ => None,
        },
        stride: e.stride_subsample.unwrap_or([1, 1]),
        valid_crop: bundle.padding == crate::graph_ir::Padding::Valid
            && bundle.core == CoreOp::Conv2d,
    }
}

/// True when the printed ceiling reading of the channel-slice size would
/// differ from the capacity-respecting floor used here.
pub fn slice_rounding_disagrees(config: &CgraConfig, kh: usize) -> bool {
    kh > 0 && config.cache_depth % kh != 0
}
