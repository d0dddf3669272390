//! Analytic cycle/data-movement model and design-space sweep.

use std::fmt::Write as _;

use serde::Serialize;

use crate::graph_ir::{lower_to_bundles, Bundle, GraphError, ModelGraph};
use crate::tiler::{compute_runtime_params, CgraConfig, RuntimeParams};

/// Stall-free cycles to process one bundle.
pub fn analytic_cycles(p: &RuntimeParams) -> u64 {
    (p.O_T * p.I_T) as u64 * (1 + (p.N * p.H_T * p.W) as u64 * (1 + (p.I_S * p.K_H) as u64))
}

/// Off-chip words: (weights, inputs by the printed formula, outputs).
///
/// The input formula charges `I_S·(R + K_H/2)` words per output position with
/// the half kept exact; the simulator's actual beat traffic is
/// `analytic_input_beat_words` and the two are reported side by side.
pub fn analytic_words(p: &RuntimeParams, config: &CgraConfig) -> (u64, f64, u64) {
    let weights = (p.O_T * p.I_T * p.I_S * p.K_H * config.cols) as u64;
    let positions = (p.O_T * p.I_T * p.N * p.H_T * p.W * p.I_S) as u64;
    let inputs_eq3 = positions as f64 * (2 * config.rows + p.K_H) as f64 / 2.0;
    let (h_out, w_out) = p.out_dims();
    let outputs = (p.N * h_out * w_out * p.O) as u64;
    (weights, inputs_eq3, outputs)
}

/// Words actually moved on the input stream: one beat of `R + K_H - 1` words
/// per `(i_t, o_t, n, h_t, w, i_s)`.
pub fn analytic_input_beat_words(p: &RuntimeParams, config: &CgraConfig) -> u64 {
    (p.I_T * p.O_T * p.N * p.H_T * p.W * p.I_S) as u64 * (config.rows + p.K_H - 1) as u64
}

/// Idle-PE fractions (columns, rows) per iteration.
pub fn idle_ratios(p: &RuntimeParams, config: &CgraConfig) -> (f64, f64) {
    let c = config.cols as f64;
    let col = (config.cols % p.K_W) as f64 / c
        + ((p.O % p.O_S) * p.K_W) as f64 / (c * p.O_T as f64);
    let row = (p.H % config.rows) as f64 / p.H as f64;
    (col, row)
}

/// Array utilization: useful MACs over PE-cycles, in (0, 1].
pub fn efficiency(p: &RuntimeParams, config: &CgraConfig) -> f64 {
    p.macs() as f64 / ((config.rows * config.cols) as f64 * analytic_cycles(p) as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct PerfRow {
    pub bundle_id: usize,
    pub kh: usize,
    pub kw: usize,
    pub macs: u64,
    pub cycles: u64,
    pub efficiency: f64,
    pub weight_words: u64,
    pub input_words_eq3: f64,
    pub input_words_beats: u64,
    pub output_words: u64,
    pub idle_col_ratio: f64,
    pub idle_row_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerfTotals {
    pub cycles: u64,
    pub weight_words: u64,
    pub input_words_beats: u64,
    pub output_words: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerfReport {
    pub config_rows: usize,
    pub config_cols: usize,
    pub cache_depth: usize,
    pub rows: Vec<PerfRow>,
    /// (bundle id, reason) for bundles infeasible on this config.
    pub infeasible: Vec<(usize, String)>,
    pub totals: PerfTotals,
}

pub fn report_bundle(b: &Bundle, config: &CgraConfig) -> Result<PerfRow, String> {
    let p = compute_runtime_params(b, config).map_err(|e| e.to_string())?;
    let cycles = analytic_cycles(&p);
    let (weights, eq3, outputs) = analytic_words(&p, config);
    let beats = analytic_input_beat_words(&p, config);
    let (col, row) = idle_ratios(&p, config);
    Ok(PerfRow {
        bundle_id: b.id,
        kh: p.K_H,
        kw: p.K_W,
        macs: p.macs(),
        cycles,
        efficiency: efficiency(&p, config),
        weight_words: weights,
        input_words_eq3: eq3,
        input_words_beats: beats,
        output_words: outputs,
        idle_col_ratio: col,
        idle_row_ratio: row,
    })
}

pub fn report_model(bundles: &[Bundle], config: &CgraConfig) -> PerfReport {
    let mut rows = Vec::new();
    let mut infeasible = Vec::new();
    for b in bundles {
        match report_bundle(b, config) {
            Ok(r) => rows.push(r),
            Err(e) => infeasible.push((b.id, e)),
        }
    }
    let totals = PerfTotals {
        cycles: rows.iter().map(|r| r.cycles).sum(),
        weight_words: rows.iter().map(|r| r.weight_words).sum(),
        input_words_beats: rows.iter().map(|r| r.input_words_beats).sum(),
        output_words: rows.iter().map(|r| r.output_words).sum(),
    };
    PerfReport {
        config_rows: config.rows,
        config_cols: config.cols,
        cache_depth: config.cache_depth,
        rows,
        infeasible,
        totals,
    }
}

/// One report per configuration, in input order. Rows are computed in
/// parallel (capped by `CGRAFLOW_THREADS`) but assembled deterministically.
pub fn sweep(graph: &ModelGraph, configs: &[CgraConfig]) -> Result<Vec<PerfReport>, GraphError> {
    let bundles = lower_to_bundles(graph)?;
    let run = || {
        use rayon::prelude::*;
        configs.par_iter().map(|c| report_model(&bundles, c)).collect::<Vec<_>>()
    };
    let reports = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(run),
        None => run(),
    };
    Ok(reports)
}

fn thread_cap() -> Option<usize> {
    std::env::var("CGRAFLOW_THREADS").ok()?.parse().ok()
}

pub const CSV_HEADER: &str = "config_rows,config_cols,cache_depth,bundle_id,kh,kw,macs,cycles,efficiency,weight_words,input_words_eq3,input_words_beats,output_words,idle_col_ratio,idle_row_ratio";

/// Render sweep reports as CSV with the fixed header; deterministic, row
/// order = config order then bundle order. Infeasible bundles are omitted
/// from the table (they carry no numbers) and reported separately.
pub fn to_csv(reports: &[PerfReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for rep in reports {
        for r in &rep.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                rep.config_rows,
                rep.config_cols,
                rep.cache_depth,
                r.bundle_id,
                r.kh,
                r.kw,
                r.macs,
                r.cycles,
                r.efficiency,
                r.weight_words,
                r.input_words_eq3,
                r.input_words_beats,
                r.output_words,
                r.idle_col_ratio,
                r.idle_row_ratio,
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiler::{ActivationCode, PoolCode, PostCodes};

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
        config: &CgraConfig,
    ) -> RuntimeParams {
        let (h_s, i_s, o_s) = (config.rows, config.cache_depth / kh, config.cols / kw);
        RuntimeParams {
            K_H: kh, K_W: kw, N: n, W: w, H: h, I: i, O: o,
            H_S: h_s, I_S: i_s, O_S: o_s,
            H_T: h.div_ceil(h_s), I_T: i.div_ceil(i_s), O_T: o.div_ceil(o_s),
            post: default_post(),
        }
    }

    #[test]
    fn smallest_case_takes_three_cycles() {
        let config = CgraConfig { rows: 1, cols: 1, cache_depth: 1, max_kh: 1, ..CgraConfig::default() };
        let p = params(1, 1, 1, 1, 1, 1, 1, &config);
        assert_eq!(analytic_cycles(&p), 3);
        assert_eq!(efficiency(&p, &config), 1.0 / 3.0);
    }

    #[test]
    fn word_counts() {
        let config = CgraConfig { rows: 4, cols: 8, cache_depth: 6, ..CgraConfig::default() };
        let p = params(3, 1, 1, 8, 4, 4, 16, &config);
        // I_S = 2, I_T = 2, O_S = 8, O_T = 2, H_T = 2
        let (weights, eq3, outputs) = analytic_words(&p, &config);
        assert_eq!(weights, (2 * 2 * 2 * 3 * 8) as u64);
        // positions = O_T*I_T*N*H_T*W*I_S = 2*2*1*2*4*2 = 64; (2R+K_H)/2 = 5.5
        assert_eq!(eq3, 64.0 * 5.5);
        assert_eq!(outputs, (8 * 4 * 16) as u64); // same padding, stride 1
        assert_eq!(analytic_input_beat_words(&p, &config), 64 * (4 + 3 - 1) as u64);
    }

    #[test]
    fn column_idle_first_term_tracks_kernel_groups() {
        let config = CgraConfig { cols: 96, cache_depth: 24, ..CgraConfig::default() };
        for (kw, want) in [(1, 0.0), (3, 0.0), (5, 1.0), (7, 5.0), (11, 8.0)] {
            // choose O as an exact multiple of O_S so only the first term remains
            let o = (config.cols / kw) * 2;
            let p = params(1, kw, 1, config.rows, 1, 1, o, &config);
            let (col, _) = idle_ratios(&p, &config);
            assert!((col - want / 96.0).abs() < 1e-12, "kw={kw}: {col}");
        }
    }

    #[test]
    fn partial_tiles_idle_rows_and_columns() {
        let config = CgraConfig { rows: 8, cols: 24, cache_depth: 24, ..CgraConfig::default() };
        // H = 12 on 8 rows: 12 % 8 = 4 idle rows' worth
        let p = params(1, 1, 1, 12, 1, 1, 30, &config);
        let (col, row) = idle_ratios(&p, &config);
        assert_eq!(row, 4.0 / 12.0);
        // O = 30 on O_S = 24: second tile wastes 18 columns of 24 half the time
        assert_eq!(col, (30 % 24) as f64 / (24.0 * 2.0));
    }

    #[test]
    fn efficiency_never_exceeds_one() {
        let config = CgraConfig { rows: 4, cols: 12, cache_depth: 9, ..CgraConfig::default() };
        for kh in [1, 3] {
            for kw in [1, 3] {
                for h in [1, 4, 7] {
                    for i in [1, 3, 10] {
                        for o in [1, 12, 13] {
                            let p = params(kh, kw, 1, h, 3, i, o, &config);
                            let e = efficiency(&p, &config);
                            assert!(e > 0.0 && e <= 1.0, "kh={kh} kw={kw} h={h} i={i} o={o}: {e}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let doc = crate::models::random_model_json(1);
        let graph = crate::graph_ir::parse_model(&doc).unwrap();
        let configs = [
            CgraConfig::default(),
            CgraConfig { rows: 4, cols: 12, ..CgraConfig::default() },
        ];
        let r1 = sweep(&graph, &configs).unwrap();
        let r2 = sweep(&graph, &configs).unwrap();
        assert_eq!(to_csv(&r1), to_csv(&r2));
        assert_eq!(r1.len(), 2);
        assert_eq!((r1[0].config_rows, r1[1].config_rows), (8, 4));
        assert!(to_csv(&r1).starts_with(CSV_HEADER));
    }

    #[test]
    fn infeasible_bundles_are_reported_not_rendered() {
        let doc = crate::models::resnet50_json(32, 0);
        let graph = crate::graph_ir::parse_model(&doc).unwrap();
        // a 4-column array cannot host the 7-wide stem kernel
        let configs = [CgraConfig { cols: 4, ..CgraConfig::default() }];
        let r = sweep(&graph, &configs).unwrap();
        assert!(!r[0].infeasible.is_empty());
        let csv = to_csv(&r);
        for (id, _) in &r[0].infeasible {
            assert!(!csv.contains(&format!(",{id},7,7,")));
        }
    }
}
