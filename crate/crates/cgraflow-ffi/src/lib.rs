//! C ABI over the cgraflow pipeline: opaque program handles, status codes,
//! and a thread-local last-error message. The generated header lands in
//! `include/cgraflow.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgraflow::host_stage::run_model;
use cgraflow::oracle::run_reference;
use cgraflow::quant::QTensor;
use cgraflow::tiler::CgraConfig;
use cgraflow::{compile, Program};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgfStatus {
    Ok = 0,
    /// Null pointer, malformed UTF-8/JSON, or undersized buffer.
    InvalidArgument = 1,
    /// Model does not map onto the configuration.
    Infeasible = 2,
    /// Engine output differs from the reference.
    Mismatch = 3,
    Internal = 4,
}

/// Opaque handle to a compiled program (model + configuration).
pub struct CgfProgram {
    program: Program,
    config: CgraConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Message describing the most recent failure on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cgf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, CgfStatus> {
    if s.is_null() {
        set_error("null string argument");
        return Err(CgfStatus::InvalidArgument);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        CgfStatus::InvalidArgument
    })
}

/// Compile a model document against a configuration. On success `*out` owns
/// a program handle that must be released with `cgf_program_free`.
///
/// # Safety
/// `model_json` and `config_json` must be NUL-terminated strings; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cgf_program_compile(
    model_json: *const c_char,
    config_json: *const c_char,
    out: *mut *mut CgfProgram,
) -> CgfStatus {
    if out.is_null() {
        set_error("null output handle");
        return CgfStatus::InvalidArgument;
    }
    *out = ptr::null_mut();
    let model = match read_str(model_json) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let config: CgraConfig = match read_str(config_json) {
        Ok(s) => match serde_json::from_str(s) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("bad config: {e}"));
                return CgfStatus::InvalidArgument;
            }
        },
        Err(st) => return st,
    };
    if let Err(e) = config.validate() {
        set_error(&e.to_string());
        return CgfStatus::Infeasible;
    }
    match compile(model, &config) {
        Ok(program) => {
            *out = Box::into_raw(Box::new(CgfProgram { program, config }));
            CgfStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            match e {
                cgraflow::CompileError::Tiler { .. } => CgfStatus::Infeasible,
                cgraflow::CompileError::Graph(_) => CgfStatus::InvalidArgument,
            }
        }
    }
}

/// Release a program handle. Null is ignored.
///
/// # Safety
/// `p` must be null or a pointer returned by `cgf_program_compile`.
#[no_mangle]
pub unsafe extern "C" fn cgf_program_free(p: *mut CgfProgram) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of bundles in the compiled program.
///
/// # Safety
/// `p` must be a valid program handle.
#[no_mangle]
pub unsafe extern "C" fn cgf_program_bundle_count(p: *const CgfProgram) -> usize {
    p.as_ref().map_or(0, |h| h.program.bundles.len())
}

/// Total element count of the model input tensor.
///
/// # Safety
/// `p` must be a valid program handle.
#[no_mangle]
pub unsafe extern "C" fn cgf_program_input_len(p: *const CgfProgram) -> usize {
    p.as_ref().map_or(0, |h| h.program.graph.input_shape.iter().product())
}

/// Program description (bundles, runtime parameters, memory plan) as JSON.
/// Free the returned string with `cgf_string_free`.
///
/// # Safety
/// `p` must be a valid program handle.
#[no_mangle]
pub unsafe extern "C" fn cgf_program_export_json(p: *const CgfProgram) -> *mut c_char {
    let Some(h) = p.as_ref() else { return ptr::null_mut() };
    let json = cgraflow::memory_planner::export_plan(
        &h.program.bundles,
        &h.program.plan,
        &h.program.params,
    );
    CString::new(json).map_or(ptr::null_mut(), CString::into_raw)
}

/// Free a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer produced by this library.
#[no_mangle]
pub unsafe extern "C" fn cgf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Run one inference through the cycle-level engine model. `input` holds the
/// input tensor's elements in row-major order; the output tensor is written
/// to `out` (capacity `out_cap` elements) and its length to `out_len`.
/// `cycles`, when non-null, receives the summed engine cycle count.
///
/// # Safety
/// Pointers must be valid for the stated capacities.
#[no_mangle]
pub unsafe extern "C" fn cgf_run(
    p: *const CgfProgram,
    input: *const i64,
    input_len: usize,
    out: *mut i64,
    out_cap: usize,
    out_len: *mut usize,
    cycles: *mut u64,
) -> CgfStatus {
    let Some(h) = p.as_ref() else {
        set_error("null program handle");
        return CgfStatus::InvalidArgument;
    };
    let want: usize = h.program.graph.input_shape.iter().product();
    if input.is_null() || input_len != want {
        set_error(&format!("input must hold {want} elements"));
        return CgfStatus::InvalidArgument;
    }
    let data = std::slice::from_raw_parts(input, input_len).to_vec();
    let fmt = h.program.graph.input_format;
    if data.iter().any(|&v| !fmt.contains(v)) {
        set_error("input element outside the declared fixed-point range");
        return CgfStatus::InvalidArgument;
    }
    let tensor =
        QTensor::new_unchecked(h.program.graph.input_shape.to_vec(), data, fmt);
    match run_model(&h.program.bundles, &tensor, &h.config, &h.program.plan) {
        Ok((result, counters)) => {
            if out_cap < result.len() || out.is_null() {
                set_error(&format!("output needs {} elements", result.len()));
                return CgfStatus::InvalidArgument;
            }
            std::slice::from_raw_parts_mut(out, result.len()).copy_from_slice(&result.data);
            if !out_len.is_null() {
                *out_len = result.len();
            }
            if !cycles.is_null() {
                *cycles = counters.iter().map(|c| c.cycles).sum();
            }
            CgfStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            CgfStatus::Internal
        }
    }
}

/// Run the engine pipeline and the reference model on a seeded random input
/// and report the largest absolute difference.
///
/// # Safety
/// `p` must be a valid program handle; `max_diff` may be null.
#[no_mangle]
pub unsafe extern "C" fn cgf_verify(
    p: *const CgfProgram,
    seed: u64,
    max_diff: *mut i64,
) -> CgfStatus {
    let Some(h) = p.as_ref() else {
        set_error("null program handle");
        return CgfStatus::InvalidArgument;
    };
    let fmt = h.program.graph.input_format;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<i64> = (0..h.program.graph.input_shape.iter().product())
        .map(|_| rng.gen_range(fmt.min_value()..=fmt.max_value()))
        .collect();
    let input = QTensor::new_unchecked(h.program.graph.input_shape.to_vec(), data, fmt);
    let got = match run_model(&h.program.bundles, &input, &h.config, &h.program.plan) {
        Ok((t, _)) => t,
        Err(e) => {
            set_error(&e.to_string());
            return CgfStatus::Internal;
        }
    };
    let want = match run_reference(&h.program.graph, &input) {
        Ok(t) => t,
        Err(e) => {
            set_error(&e.to_string());
            return CgfStatus::Internal;
        }
    };
    let diff = if got.shape == want.shape {
        got.data.iter().zip(&want.data).map(|(&a, &b)| (a - b).abs()).max().unwrap_or(0)
    } else {
        i64::MAX
    };
    if !max_diff.is_null() {
        *max_diff = diff;
    }
    if diff == 0 {
        CgfStatus::Ok
    } else {
        set_error(&format!("max |diff| = {diff}"));
        CgfStatus::Mismatch
    }
}

/// Analytic sweep over a JSON list of configurations; returns the CSV table.
/// Free with `cgf_string_free`.
///
/// # Safety
/// Arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cgf_sweep_csv(
    model_json: *const c_char,
    configs_json: *const c_char,
) -> *mut c_char {
    let Ok(model) = read_str(model_json) else { return ptr::null_mut() };
    let Ok(configs) = read_str(configs_json) else { return ptr::null_mut() };
    let configs: Vec<CgraConfig> = match serde_json::from_str(configs) {
        Ok(c) => c,
        Err(e) => {
            set_error(&format!("bad config list: {e}"));
            return ptr::null_mut();
        }
    };
    let graph = match cgraflow::graph_ir::parse_model(model) {
        Ok(g) => g,
        Err(e) => {
            set_error(&e.to_string());
            return ptr::null_mut();
        }
    };
    match cgraflow::perf_model::sweep(&graph, &configs) {
        Ok(reports) => {
            let csv = cgraflow::perf_model::to_csv(&reports);
            CString::new(csv).map_or(ptr::null_mut(), CString::into_raw)
        }
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn config_json() -> String {
        serde_json::to_string(&CgraConfig::default()).unwrap()
    }

    #[test]
    fn compile_run_verify_roundtrip() {
        let model = c(&cgraflow::models::random_model_json(3));
        let cfg = c(&config_json());
        let mut handle: *mut CgfProgram = ptr::null_mut();
        unsafe {
            assert_eq!(
                cgf_program_compile(model.as_ptr(), cfg.as_ptr(), &mut handle),
                CgfStatus::Ok
            );
            assert!(!handle.is_null());
            assert!(cgf_program_bundle_count(handle) >= 1);

            let mut diff = -1i64;
            assert_eq!(cgf_verify(handle, 11, &mut diff), CgfStatus::Ok);
            assert_eq!(diff, 0);

            let n = cgf_program_input_len(handle);
            let input = vec![1i64; n];
            let mut out = vec![0i64; 1 << 16];
            let mut out_len = 0usize;
            let mut cycles = 0u64;
            assert_eq!(
                cgf_run(
                    handle,
                    input.as_ptr(),
                    n,
                    out.as_mut_ptr(),
                    out.len(),
                    &mut out_len,
                    &mut cycles
                ),
                CgfStatus::Ok
            );
            assert!(out_len > 0);
            assert!(cycles > 0);

            let json = cgf_program_export_json(handle);
            assert!(!json.is_null());
            let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
            assert!(text.contains("arena_size"));
            cgf_string_free(json);

            cgf_program_free(handle);
        }
    }

    #[test]
    fn bad_inputs_report_errors() {
        let mut handle: *mut CgfProgram = ptr::null_mut();
        let cfg = c(&config_json());
        unsafe {
            assert_eq!(
                cgf_program_compile(c("not json").as_ptr(), cfg.as_ptr(), &mut handle),
                CgfStatus::InvalidArgument
            );
            assert!(handle.is_null());
            let msg = CStr::from_ptr(cgf_last_error()).to_str().unwrap();
            assert!(!msg.is_empty());
            assert_eq!(
                cgf_program_compile(ptr::null(), cfg.as_ptr(), &mut handle),
                CgfStatus::InvalidArgument
            );
        }
    }

    #[test]
    fn infeasible_config_rejected() {
        // kernel wider than the array
        let model = c(&cgraflow::models::resnet50_json(56, 0));
        let cfg = CgraConfig { cols: 4, cache_depth: 24, ..CgraConfig::default() };
        let cfg = c(&serde_json::to_string(&cfg).unwrap());
        let mut handle: *mut CgfProgram = ptr::null_mut();
        unsafe {
            assert_eq!(
                cgf_program_compile(model.as_ptr(), cfg.as_ptr(), &mut handle),
                CgfStatus::Infeasible
            );
        }
    }

    #[test]
    fn sweep_csv_has_header() {
        let model = c(&cgraflow::models::random_model_json(5));
        let cfgs = c(&serde_json::to_string(&vec![CgraConfig::default()]).unwrap());
        unsafe {
            let csv = cgf_sweep_csv(model.as_ptr(), cfgs.as_ptr());
            assert!(!csv.is_null());
            let text = CStr::from_ptr(csv).to_str().unwrap().to_owned();
            assert!(text.starts_with(cgraflow::perf_model::CSV_HEADER));
            cgf_string_free(csv);
        }
    }
}
