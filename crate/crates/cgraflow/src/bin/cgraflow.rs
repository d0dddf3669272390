//! Command-line pipeline driver: lower, plan, simulate, verify, sweep, and
//! export model programs.
//!
//! Exit codes: 0 success, 1 verification mismatch, 2 usage or infeasible
//! input, 3 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgraflow::graph_ir::WeightSource;
use cgraflow::host_stage::{load_tensor, run_model, run_model_trace, save_tensor};
use cgraflow::oracle::run_reference_values;
use cgraflow::perf_model::{sweep, to_csv};
use cgraflow::quant::QTensor;
use cgraflow::tiler::CgraConfig;
use cgraflow::{compile, CompileError};

#[derive(Parser)]
#[command(name = "cgraflow", version, about = "CGRA engine compiler and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Model description JSON.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Array configuration JSON (one config, or a list for sweeps).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input tensor (binary + .json sidecar); random when omitted.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for generated inputs and stall schedules.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Override the configured input-side valid probability.
    #[arg(long, global = true)]
    p_valid: Option<f64>,
    /// Override the configured output-side ready probability.
    #[arg(long, global = true)]
    p_ready: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and lower a model; print the bundle list.
    Lower,
    /// Print buffer lifetimes and addresses.
    PlanMemory,
    /// Run one inference through the engine model.
    Simulate,
    /// Compare the engine pipeline against the reference on a random input.
    Verify {
        /// Fault-injection hook: flip one weight before simulating.
        #[arg(long, hide = true)]
        corrupt_weights: bool,
    },
    /// Analytic per-layer performance CSV over one or more configs.
    Sweep,
    /// Emit the bundle/params/memory-plan program description.
    ExportConfig,
}

enum CliError {
    Usage(String),
    Mismatch(String),
    Internal(String),
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Mismatch(m)) => {
            eprintln!("mismatch: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}

fn read_model(cli: &Cli) -> Result<String, CliError> {
    let path = cli.model.as_ref().ok_or_else(|| CliError::Usage("--model is required".into()))?;
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn read_configs(cli: &Cli) -> Result<Vec<CgraConfig>, CliError> {
    let mut configs = match &cli.config {
        None => vec![CgraConfig::default()],
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str::<Vec<CgraConfig>>(&text)
                .or_else(|_| serde_json::from_str::<CgraConfig>(&text).map(|c| vec![c]))
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
        }
    };
    if configs.is_empty() {
        return Err(CliError::Usage("config list is empty".into()));
    }
    for c in &mut configs {
        c.rng_seed = cli.seed;
        if let Some(p) = cli.p_valid {
            c.p_valid = p;
        }
        if let Some(p) = cli.p_ready {
            c.p_ready = p;
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(configs)
}

fn input_tensor(cli: &Cli, program: &cgraflow::Program) -> Result<QTensor, CliError> {
    match &cli.input {
        Some(path) => load_tensor(path).map_err(|e| CliError::Usage(e.to_string())),
        None => {
            let shape = program.graph.input_shape.to_vec();
            let fmt = program.graph.input_format;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(fmt.min_value()..=fmt.max_value()))
                .collect();
            Ok(QTensor::new_unchecked(shape, data, fmt))
        }
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Lower => {
            let doc = read_model(cli)?;
            let config = read_configs(cli)?[0];
            let program = compile(&doc, &config)?;
            for (b, p) in program.bundles.iter().zip(&program.params) {
                println!(
                    "bundle {} {:?} kernel {:?} in {:?} out {:?} tiles (H_T,I_T,O_T)=({},{},{}) nodes {:?}",
                    b.id, b.core, b.kernel, b.in_shape, b.out_shape, p.H_T, p.I_T, p.O_T, b.node_ids
                );
            }
            Ok(())
        }
        Command::PlanMemory | Command::ExportConfig => {
            let doc = read_model(cli)?;
            let config = read_configs(cli)?[0];
            let program = compile(&doc, &config)?;
            let json = cgraflow::memory_planner::export_plan(
                &program.bundles,
                &program.plan,
                &program.params,
            );
            match &cli.out {
                None => println!("{json}"),
                Some(_) => {
                    let dir = out_dir(cli)?;
                    std::fs::write(dir.join("program.json"), json)
                        .map_err(|e| CliError::Internal(e.to_string()))?;
                }
            }
            Ok(())
        }
        Command::Simulate => {
            let doc = read_model(cli)?;
            let config = read_configs(cli)?[0];
            let program = compile(&doc, &config)?;
            let input = input_tensor(cli, &program)?;
            let (output, counters) =
                run_model(&program.bundles, &input, &config, &program.plan)
                    .map_err(|e| CliError::Internal(e.to_string()))?;
            let dir = out_dir(cli)?;
            save_tensor(&dir.join("output.bin"), &output)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let dump: Vec<String> = counters.iter().map(|c| c.to_json()).collect();
            std::fs::write(dir.join("counters.json"), format!("[{}]", dump.join(",\n")))
                .map_err(|e| CliError::Internal(e.to_string()))?;
            println!("output shape {:?}", output.shape);
            Ok(())
        }
        Command::Verify { corrupt_weights } => {
            let doc = read_model(cli)?;
            let config = read_configs(cli)?[0];
            let mut program = compile(&doc, &config)?;
            let input = input_tensor(cli, &program)?;
            if *corrupt_weights {
                for b in &mut program.bundles {
                    if let WeightSource::Constant(t) = &mut b.weights {
                        let f = t.format;
                        t.data[0] = if t.data[0] == f.max_value() { f.min_value() } else { t.data[0] + 1 };
                        break;
                    }
                }
            }
            let (outputs, _) =
                run_model_trace(&program.bundles, &input, &config, &program.plan)
                    .map_err(|e| CliError::Internal(e.to_string()))?;
            let (node_values, reference) = run_reference_values(&program.graph, &input)
                .map_err(|e| CliError::Internal(e.to_string()))?;
            let node_index: std::collections::HashMap<&str, usize> = program
                .graph
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| (n.id.as_str(), i))
                .collect();
            let mut worst = 0i64;
            for (b, got) in program.bundles.iter().zip(&outputs) {
                // synthesized sub-bundles ('#'-tagged) have no graph node
                let Some(id) = b.node_ids.iter().rev().find(|id| !id.contains('#')) else {
                    continue;
                };
                let want = node_values[node_index[id.as_str()]].as_ref().expect("node value");
                let diff = max_abs_diff(got, want);
                println!("bundle {:>3} ({id}): max |diff| = {diff}", b.id);
                worst = worst.max(diff);
            }
            let final_diff = max_abs_diff(outputs.last().unwrap(), &reference);
            println!("final output: max |diff| = {final_diff}");
            worst = worst.max(final_diff);
            if worst == 0 {
                println!("verify OK");
                Ok(())
            } else {
                Err(CliError::Mismatch(format!("max |diff| = {worst}")))
            }
        }
        Command::Sweep => {
            let doc = read_model(cli)?;
            let configs = read_configs(cli)?;
            let graph = cgraflow::graph_ir::parse_model(&doc)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let reports = sweep(&graph, &configs).map_err(|e| CliError::Usage(e.to_string()))?;
            let csv = to_csv(&reports);
            match &cli.out {
                None => print!("{csv}"),
                Some(_) => {
                    let dir = out_dir(cli)?;
                    std::fs::write(dir.join("sweep.csv"), csv)
                        .map_err(|e| CliError::Internal(e.to_string()))?;
                }
            }
            for r in &reports {
                for (id, reason) in &r.infeasible {
                    eprintln!(
                        "infeasible on ({},{}): bundle {id}: {reason}",
                        r.config_rows, r.config_cols
                    );
                }
            }
            Ok(())
        }
    }
}

fn max_abs_diff(a: &QTensor, b: &QTensor) -> i64 {
    if a.shape != b.shape {
        return i64::MAX;
    }
    a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y).abs()).max().unwrap_or(0)
}
