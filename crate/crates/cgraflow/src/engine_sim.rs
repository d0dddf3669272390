//! Cycle-level software model of the PE array: pixel shifter, ping-pong
//! weights cache, dynamic column regrouping, stall injection, and transfer
//! counters.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::reorder::{pad_right, Beat, BeatStream};
use crate::tiler::{CgraConfig, RuntimeParams};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("stream/params inconsistency: {0}")]
    StreamMismatch(String),
    #[error("accumulator overflow at (o_s={o_s}, k_w={k_w}, row={row}): |{value}| exceeds {limit} ")]
    Overflow { o_s: usize, k_w: usize, row: usize, value: i64, limit: i64 },
    #[error("pixel shifter phase {phase} out of range (K_H={k_h})")]
    PhaseOutOfRange { phase: usize, k_h: usize },
    #[error("backpressure probability {0} outside (0, 1]")]
    BadProbability(f64),
}

/// Off-chip transfer and timing counters for one bundle run.
#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct SimCounters {
    pub cycles: u64,
    pub stall_cycles: u64,
    pub weight_words: u64,
    pub input_words: u64,
    pub output_words: u64,
    /// Input beats fetched (each `R + K_H - 1` words wide).
    #[serde(skip)]
    pub input_beats: u64,
    /// Cache rotations observed per weight packet, in packet order.
    #[serde(skip)]
    pub packet_rotations: Vec<u64>,
}

impl SimCounters {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("counters serialize")
    }
}

/// Accumulator grid with dynamic column regrouping `A:[O_S][K_W][R]`.
pub struct PeArrayState {
    pub acc: Vec<i64>,
    pub o_s: usize,
    pub k_w: usize,
    pub rows: usize,
    acc_limit: i64,
}

impl PeArrayState {
    fn new(p: &RuntimeParams, config: &CgraConfig) -> Self {
        // guard bits cover up to 2^16 products per packet; capped to stay
        // within the i64 carrier
        let bits = (config.bits_x + config.bits_k + 16).min(62);
        PeArrayState {
            acc: vec![0; p.O_S * p.K_W * p.H_S],
            o_s: p.O_S,
            k_w: p.K_W,
            rows: p.H_S,
            acc_limit: (1i64 << (bits - 1)) - 1,
        }
    }

    #[inline]
    fn idx(&self, o_s: usize, k_w: usize, r: usize) -> usize {
        (o_s * self.k_w + k_w) * self.rows + r
    }

    fn reset(&mut self) {
        self.acc.fill(0);
    }

    /// One MAC phase: every position multiplies its own cached tap by the
    /// shared input window.
    fn mac(&mut self, k_row: &[i64], window: &[i64]) -> Result<(), EngineError> {
        for o_s in 0..self.o_s {
            for k_w in 0..self.k_w {
                let k = k_row[o_s * self.k_w + k_w];
                if k == 0 {
                    continue;
                }
                let base = self.idx(o_s, k_w, 0);
                for (r, &x) in window.iter().enumerate() {
                    let a = &mut self.acc[base + r];
                    *a += k * x;
                    if a.unsigned_abs() > self.acc_limit as u64 {
                        return Err(EngineError::Overflow {
                            o_s,
                            k_w,
                            row: r,
                            value: *a,
                            limit: self.acc_limit,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Drain the last column of every group into an output beat, then shift
    /// each group right by one position, zeroing position 0.
    fn emit_and_shift(&mut self) -> Vec<i64> {
        let mut words = Vec::with_capacity(self.o_s * self.rows);
        for o_s in 0..self.o_s {
            let last = self.idx(o_s, self.k_w - 1, 0);
            words.extend_from_slice(&self.acc[last..last + self.rows]);
            for k_w in (1..self.k_w).rev() {
                let (dst, src) = (self.idx(o_s, k_w, 0), self.idx(o_s, k_w - 1, 0));
                self.acc.copy_within(src..src + self.rows, dst);
            }
            let first = self.idx(o_s, 0, 0);
            self.acc[first..first + self.rows].fill(0);
        }
        words
    }
}

/// Dual-bank weights cache; one bank serves reads while the other fills.
pub struct WeightsCacheState {
    pub banks: [Vec<Vec<i64>>; 2],
    pub active: usize,
    pub rotations: u64,
}

impl WeightsCacheState {
    fn new() -> Self {
        WeightsCacheState { banks: [Vec::new(), Vec::new()], active: 0, rotations: 0 }
    }

    fn fill_inactive(&mut self, rows: Vec<Vec<i64>>) {
        self.banks[1 - self.active] = rows;
    }

    fn swap(&mut self) {
        self.active = 1 - self.active;
        self.rotations = 0;
    }

    fn row(&self, i: usize) -> &[i64] {
        &self.banks[self.active][i]
    }
}

/// The stalled side of a stream handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamSide {
    Valid,
    Ready,
}

/// Deterministic pseudo-random stall schedule for one handshake side.
pub struct BackpressureSchedule {
    rng: ChaCha8Rng,
    p: f64,
}

pub fn inject_backpressure(
    side: StreamSide,
    p: f64,
    seed: u64,
) -> Result<BackpressureSchedule, EngineError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(EngineError::BadProbability(p));
    }
    // distinct streams per side from one user seed
    let seed = match side {
        StreamSide::Valid => seed,
        StreamSide::Ready => seed ^ 0x9e37_79b9_7f4a_7c15,
    };
    Ok(BackpressureSchedule { rng: ChaCha8Rng::seed_from_u64(seed), p })
}

impl BackpressureSchedule {
    /// Stall cycles before the next transfer is accepted.
    pub fn stalls(&mut self) -> u64 {
        if self.p >= 1.0 {
            return 0;
        }
        let mut s = 0;
        while self.rng.gen::<f64>() >= self.p {
            s += 1;
        }
        s
    }
}

/// The pixel shifter's R-wide window of a fetched beat at vertical phase
/// `k_h`; the beat is fetched once and shifted `K_H` times internally.
pub fn pixel_shifter_load(beat: &[i64], k_h: usize, rows: usize) -> Result<&[i64], EngineError> {
    let phases = beat.len() + 1 - rows;
    if k_h >= phases {
        return Err(EngineError::PhaseOutOfRange { phase: k_h, k_h: phases });
    }
    Ok(&beat[k_h..k_h + rows])
}

/// Execute one bundle's loop nest over prepared input and weight streams.
///
/// The stall-free cycle count is, per weight packet, one configuration cycle
/// plus `1 + I_S·K_H` cycles per output position. Output beats carry raw
/// accumulator partial sums; the first `pad_right(K_W)` emissions of each row
/// are suppressed and the same number are flushed at the row end, so each row
/// yields exactly `W` beats aligned to 'same' output columns.
pub fn simulate_bundle(
    p: &RuntimeParams,
    x_t: &BeatStream,
    k_t: &BeatStream,
    config: &CgraConfig,
) -> Result<(BeatStream, SimCounters), EngineError> {
    let expected_x = p.I_T * p.N * p.H_T * p.W * p.I_S;
    if x_t.len() != expected_x {
        return Err(EngineError::StreamMismatch(format!(
            "input stream has {} beats, expected {expected_x}",
            x_t.len()
        )));
    }
    let expected_k = p.I_T * p.O_T * (1 + p.I_S * p.K_H);
    if k_t.len() != expected_k {
        return Err(EngineError::StreamMismatch(format!(
            "weight stream has {} beats, expected {expected_k}",
            k_t.len()
        )));
    }
    let in_width = p.input_beat_width();
    let w_width = p.weight_beat_width();

    let mut valid = inject_backpressure(StreamSide::Valid, config.p_valid, config.rng_seed)?;
    let mut ready = inject_backpressure(StreamSide::Ready, config.p_ready, config.rng_seed)?;

    let mut array = PeArrayState::new(p, config);
    let mut cache = WeightsCacheState::new();
    let mut counters = SimCounters::default();
    let mut out = BeatStream::default();

    let pad_r = pad_right(p.K_W);
    let (r_off, r_step, r_cnt) = p.kept_rows();
    let (c_off, c_step, c_cnt) = p.kept_cols();
    let kept = |pos: usize, off: usize, step: usize, cnt: usize| -> bool {
        pos >= off && (pos - off) % step == 0 && (pos - off) / step < cnt
    };

    let mut ki = 0usize;
    for i_t in 0..p.I_T {
        for o_t in 0..p.O_T {
            // the same input block is refetched for every output tile
            let mut xi = i_t * p.N * p.H_T * p.W * p.I_S;
            // configuration beat + packet load into the inactive bank; the
            // ping-pong fill overlaps compute, costing only the config cycle
            let cfg = &k_t.beats[ki];
            if !cfg.is_config {
                return Err(EngineError::StreamMismatch(format!(
                    "beat {ki} should be a packet config beat"
                )));
            }
            ki += 1;
            counters.cycles += 1;
            let mut rows = Vec::with_capacity(p.I_S * p.K_H);
            for _ in 0..p.I_S * p.K_H {
                let b = &k_t.beats[ki];
                ki += 1;
                if b.words.len() != w_width {
                    return Err(EngineError::StreamMismatch(format!(
                        "weight row width {} != {w_width}",
                        b.words.len()
                    )));
                }
                rows.push(b.words.clone());
            }
            cache.fill_inactive(rows);
            cache.swap();
            // the whole cache row (all C columns) is written per row
            counters.weight_words += (p.I_S * p.K_H * config.cols) as u64;

            for _n in 0..p.N {
                for h_t in 0..p.H_T {
                    array.reset();
                    let mut emitted = 0usize;
                    let emit = |array: &mut PeArrayState,
                                    out: &mut BeatStream,
                                    counters: &mut SimCounters,
                                    ready: &mut BackpressureSchedule,
                                    emitted: &mut usize| {
                        let words = array.emit_and_shift();
                        let col = *emitted;
                        *emitted += 1;
                        if col < pad_r {
                            return; // left-edge partial window, suppressed
                        }
                        let c = col - pad_r;
                        counters.stall_cycles += ready.stalls();
                        if i_t == p.I_T - 1 && kept(c, c_off, c_step, c_cnt) {
                            let mut kept_words = 0u64;
                            for o_s in 0..p.O_S {
                                if o_t * p.O_S + o_s >= p.O {
                                    continue;
                                }
                                for h_s in 0..p.H_S {
                                    let h = h_t * p.H_S + h_s;
                                    if h < p.H && kept(h, r_off, r_step, r_cnt) {
                                        kept_words += 1;
                                    }
                                }
                            }
                            counters.output_words += kept_words;
                        }
                        out.beats.push(Beat::data(words));
                    };
                    for _w in 0..p.W {
                        counters.cycles += 1;
                        for i_s in 0..p.I_S {
                            let beat = &x_t.beats[xi];
                            xi += 1;
                            if beat.words.len() != in_width {
                                return Err(EngineError::StreamMismatch(format!(
                                    "input beat width {} != {in_width}",
                                    beat.words.len()
                                )));
                            }
                            counters.input_words += in_width as u64;
                            counters.input_beats += 1;
                            counters.stall_cycles += valid.stalls();
                            for k_h in 0..p.K_H {
                                let window = pixel_shifter_load(&beat.words, k_h, p.H_S)?;
                                counters.cycles += 1;
                                array.mac(cache.row(i_s * p.K_H + k_h), window)?;
                            }
                        }
                        cache.rotations += 1;
                        emit(&mut array, &mut out, &mut counters, &mut ready, &mut emitted);
                    }
                    // row-end flush of the right-edge windows; the remaining
                    // taps see zero input, so these emissions cost no cycles
                    for _ in 0..pad_r {
                        emit(&mut array, &mut out, &mut counters, &mut ready, &mut emitted);
                    }
                }
            }
            counters.packet_rotations.push(cache.rotations);
        }
    }
    counters.cycles += counters.stall_cycles;
    debug_assert_eq!(out.len(), p.I_T * p.O_T * p.N * p.H_T * p.W);
    Ok((out, counters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{FixedPointFormat, QTensor};
    use crate::reorder::{deorder_output, reorder_input, reorder_weights};
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

    fn q(shape: Vec<usize>, data: Vec<i64>) -> QTensor {
        QTensor::new_unchecked(shape, data, FixedPointFormat::new(16, 0, true))
    }

    fn run(
        p: &RuntimeParams,
        x: &QTensor,
        k: &QTensor,
        config: &CgraConfig,
    ) -> (BeatStream, SimCounters) {
        let x_t = reorder_input(x, p).unwrap();
        let k_t = reorder_weights(k, p).unwrap();
        simulate_bundle(p, &x_t, &k_t, config).unwrap()
    }

    #[test]
    fn single_pe_multiply() {
        let config = CgraConfig { rows: 1, cols: 1, cache_depth: 1, max_kh: 1, ..CgraConfig::default() };
        let p = params(1, 1, 1, 1, 1, 1, 1, &config);
        let (out, c) = run(&p, &q(vec![1, 1, 1, 1], vec![5]), &q(vec![1, 1, 1, 1], vec![3]), &config);
        assert_eq!(out.beats.len(), 1);
        assert_eq!(out.beats[0].words, vec![15]);
        // one config cycle + one fetch cycle + one MAC phase
        assert_eq!(c.cycles, 3);
        assert_eq!(c.stall_cycles, 0);
        assert_eq!(c.output_words, 1);
        assert_eq!(c.input_beats, 1);
    }

    #[test]
    fn pixel_shifter_phases() {
        let beat = [10, 20, 30, 40];
        assert_eq!(pixel_shifter_load(&beat, 0, 2).unwrap(), &[10, 20]);
        assert_eq!(pixel_shifter_load(&beat, 1, 2).unwrap(), &[20, 30]);
        assert_eq!(pixel_shifter_load(&beat, 2, 2).unwrap(), &[30, 40]);
        assert!(matches!(
            pixel_shifter_load(&beat, 3, 2),
            Err(EngineError::PhaseOutOfRange { phase: 3, .. })
        ));
    }

    #[test]
    fn horizontal_window_alignment() {
        // 1x3 kernel [1,2,4] over a single row [1,1,1,1]: 'same' output is
        // the windowed sums with zero padding on both edges
        let config = CgraConfig { rows: 1, cols: 3, cache_depth: 1, max_kh: 1, ..CgraConfig::default() };
        let p = params(1, 3, 1, 1, 4, 1, 1, &config);
        let x = q(vec![1, 1, 4, 1], vec![1, 1, 1, 1]);
        let k = q(vec![1, 3, 1, 1], vec![1, 2, 4]);
        let (out, _) = run(&p, &x, &k, &config);
        let y = deorder_output(&out, &p, FixedPointFormat::new(32, 0, true)).unwrap();
        // windows: [0,1,1], [1,1,1], [1,1,1], [1,1,0] with taps [1,2,4]
        assert_eq!(y.data, vec![6, 7, 7, 3]);
    }

    #[test]
    fn rotations_per_packet() {
        let config = CgraConfig { rows: 2, cols: 2, cache_depth: 3, max_kh: 3, ..CgraConfig::default() };
        let p = params(3, 1, 2, 5, 4, 1, 3, &config);
        let x = q(vec![2, 5, 4, 1], vec![1; 40]);
        let k = q(vec![3, 1, 1, 3], vec![1; 9]);
        let (_, c) = run(&p, &x, &k, &config);
        assert_eq!(c.packet_rotations.len(), p.I_T * p.O_T);
        let per_packet = (p.N * p.H_T * p.W) as u64;
        assert!(c.packet_rotations.iter().all(|&r| r == per_packet));
    }

    #[test]
    fn backpressure_preserves_results_and_adds_stalls() {
        let base = CgraConfig { rows: 3, cols: 6, cache_depth: 6, ..CgraConfig::default() };
        let p = params(3, 3, 1, 8, 5, 2, 4, &base);
        let x = q(vec![1, 8, 5, 2], (0..80).map(|v| (v % 13) - 6).collect());
        let k = q(vec![3, 3, 2, 4], (0..72).map(|v| (v % 7) - 3).collect());
        let (out0, c0) = run(&p, &x, &k, &base);
        assert_eq!(c0.stall_cycles, 0);
        for (pv, pr) in [(0.3, 1.0), (1.0, 0.3), (0.3, 0.2)] {
            let cfg = CgraConfig { p_valid: pv, p_ready: pr, rng_seed: 7, ..base };
            let (out, c) = run(&p, &x, &k, &cfg);
            assert_eq!(out, out0, "stalls must not change data");
            assert!(c.stall_cycles > 0);
            assert_eq!(c.cycles, c0.cycles + c.stall_cycles);
        }
    }

    #[test]
    fn stall_schedule_is_seed_deterministic() {
        let cfg = CgraConfig { rows: 2, cols: 2, cache_depth: 2, p_valid: 0.4, p_ready: 0.5, rng_seed: 42, ..CgraConfig::default() };
        let p = params(1, 1, 1, 4, 3, 2, 2, &cfg);
        let x = q(vec![1, 4, 3, 2], (0..24).collect());
        let k = q(vec![1, 1, 2, 2], vec![1, 2, 3, 4]);
        let (o1, c1) = run(&p, &x, &k, &cfg);
        let (o2, c2) = run(&p, &x, &k, &cfg);
        assert_eq!(o1, o2);
        assert_eq!(c1, c2);
        let other = CgraConfig { rng_seed: 43, ..cfg };
        let (o3, c3) = run(&p, &x, &k, &other);
        assert_eq!(o3, o1);
        assert_ne!(c3.stall_cycles, c1.stall_cycles);
    }

    #[test]
    fn full_rate_consumes_no_rng() {
        let mut s = inject_backpressure(StreamSide::Valid, 1.0, 0).unwrap();
        for _ in 0..100 {
            assert_eq!(s.stalls(), 0);
        }
        assert!(inject_backpressure(StreamSide::Ready, 0.0, 0).is_err());
        assert!(inject_backpressure(StreamSide::Ready, 1.5, 0).is_err());
    }

    #[test]
    fn accumulator_overflow_is_detected() {
        // 1-bit operands give an 18-bit accumulator; huge words overflow it
        let config = CgraConfig { rows: 1, cols: 1, cache_depth: 1, max_kh: 1, bits_x: 1, bits_k: 1, ..CgraConfig::default() };
        let p = params(1, 1, 1, 1, 1, 1, 1, &config);
        let x = q(vec![1, 1, 1, 1], vec![1 << 10]);
        let k = q(vec![1, 1, 1, 1], vec![1 << 10]);
        let x_t = reorder_input(&x, &p).unwrap();
        let k_t = reorder_weights(&k, &p).unwrap();
        assert!(matches!(
            simulate_bundle(&p, &x_t, &k_t, &config),
            Err(EngineError::Overflow { .. })
        ));
    }

    #[test]
    fn counters_serialize_with_fixed_keys() {
        let c = SimCounters { cycles: 1, stall_cycles: 2, weight_words: 3, input_words: 4, output_words: 5, ..SimCounters::default() };
        let v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut want = vec!["cycles", "stall_cycles", "weight_words", "input_words", "output_words"];
        want.sort_unstable();
        assert_eq!(keys, want);
    }
}
