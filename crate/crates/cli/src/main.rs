#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixlink::analysis::{self, compare_to_reference, count_params, param_grid, reference_total, render_table, GRID_COMPRESSIONS, GRID_MULTIPLIERS};
use mixlink::config::{Ablation, Format, NetworkSection, RunConfig};
use mixlink::gradcheck::{self, Tolerance};
use mixlink::train::{run_toy, History, DROPOUT_RATE, HISTORY_CSV_HEADER};
use mixlink::verify::{self, Suite};
use mixlink::{Error, Precision};

/// Mixed link networks: describe, count, verify, gradient-check and train.
#[derive(Parser, Debug)]
#[command(name = "mixlink", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Write the report to this file instead of stdout.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-stage shapes and widths of a network.
    Describe {
        #[command(flatten)]
        common: Common,
        /// Named preset, e.g. mixnet-105.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Per-layer parameter and FLOP report.
    CountParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        /// Sweep m over {1, 2, 4} and theta over {0.5, 1.0} against the published totals.
        #[arg(long)]
        grid: bool,
        /// Relative tolerance for the comparison against published totals.
        #[arg(long, default_value_t = analysis::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Randomized topology equivalence suites.
    VerifyTopology {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Option<SuiteArg>,
        /// Restrict the reduction suite to Arch-1, 2 or 3.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        arch: Option<u8>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, hide = true)]
        inject_bug: Option<BugArg>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check a single operation.
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum)]
        dtype: Option<DtypeArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the synthetic toy task and write the history as CSV.
    TrainToy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Enable dropout at the default rate.
        #[arg(long)]
        dropout: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Unrolling,
    Reduction,
    Width,
    Witness,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BugArg {
    Offset,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DtypeArg {
    #[value(name = "64bit")]
    F64,
    #[value(name = "32bit")]
    F32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateArg {
    Position,
    K2,
}

/// Exit 1 for failed checks or training, 2 for usage and config errors.
enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &common.output {
        cfg.output.path = Some(p.clone());
    }
    if let Some(f) = common.format {
        cfg.output.format = match f {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
            FormatArg::Table => Format::Table,
        };
    }
    Ok(cfg)
}

fn emit(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn network_section(cfg: &RunConfig, preset: Option<String>) -> NetworkSection {
    match preset {
        Some(name) => NetworkSection {
            preset: Some(name),
            multiplier: cfg.network.multiplier,
            compression: cfg.network.compression,
            ..Default::default()
        },
        None if cfg.network == NetworkSection::default() => NetworkSection::preset("mixnet-100"),
        None => cfg.network.clone(),
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Describe { common, preset } => describe(&load_config(&common)?, preset),
        Command::CountParams { common, preset, grid, tolerance } => count(&load_config(&common)?, preset, grid, tolerance),
        Command::VerifyTopology { common, suite, arch, trials, seed, inject_bug } => {
            let mut cfg = load_config(&common)?;
            let v = &mut cfg.verify;
            if let Some(s) = suite {
                v.suites = vec![match s {
                    SuiteArg::Unrolling => Suite::Unrolling,
                    SuiteArg::Reduction => Suite::Reduction,
                    SuiteArg::Width => Suite::Width,
                    SuiteArg::Witness => Suite::Witness,
                }];
            }
            if let Some(a) = arch {
                v.arch = Some(a as usize);
            }
            if let Some(t) = trials {
                v.trials = t;
            }
            if let Some(s) = seed {
                v.seed = s;
            }
            v.inject_offset_bug = inject_bug.is_some();
            verify_topology(&cfg)
        }
        Command::Gradcheck { common, op, trials, dtype, seed } => {
            let mut cfg = load_config(&common)?;
            let g = &mut cfg.gradcheck;
            if let Some(op) = op {
                g.ops = vec![op];
            }
            if let Some(t) = trials {
                g.trials = t;
            }
            if let Some(d) = dtype {
                g.precision = match d {
                    DtypeArg::F64 => Precision::F64,
                    DtypeArg::F32 => Precision::F32,
                };
            }
            if let Some(s) = seed {
                g.seed = s;
            }
            run_gradcheck(&cfg)
        }
        Command::TrainToy { common, ablate, seed, epochs, dropout } => {
            let mut cfg = load_config(&common)?;
            let t = &mut cfg.train;
            if let Some(a) = ablate {
                t.ablate = Some(match a {
                    AblateArg::Position => Ablation::Position,
                    AblateArg::K2 => Ablation::K2,
                });
            }
            if let Some(s) = seed {
                t.seed = s;
            }
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if dropout {
                t.dropout = DROPOUT_RATE;
            }
            train_toy(&cfg)
        }
    }
}

fn describe(cfg: &RunConfig, preset: Option<String>) -> Outcome {
    let spec = network_section(cfg, preset).to_spec()?;
    let report = count_params(&spec)?;
    let stages = report.stages();
    let text = match cfg.output.format {
        Format::Json => {
            let v = serde_json::json!({ "config": report.config, "stages": stages });
            serde_json::to_string_pretty(&v).expect("serializes") + "\n"
        }
        Format::Csv => {
            let mut out = String::from("stage,input,output,layers,params\n");
            for s in &stages {
                out.push_str(&format!("{},{},{},{},{}\n", s.stage, s.input, s.output, s.layers, s.params));
            }
            out
        }
        Format::Table => {
            let c = &report.config;
            let mut out = format!(
                "{} ({:?}, L = {}, k1 = {}, k2 = {}, {:?}, m = {}, theta = {}, classes = {})\n",
                c.name, c.family, c.depth, c.k1, c.k2, c.position, c.multiplier, c.compression, c.classes
            );
            let rows: Vec<[String; 6]> = stages
                .iter()
                .map(|s| {
                    [
                        s.stage.clone(),
                        s.input.to_string(),
                        s.output.to_string(),
                        format!("{}x{}", s.output.h, s.output.w),
                        s.layers.to_string(),
                        s.params.to_string(),
                    ]
                })
                .collect();
            out.push_str(&render_table(&["stage", "input", "output", "size", "layers", "params"], &rows, &[false, true, true, true, true, true]));
            out.push_str(&format!("total params {} ({:.2}M)\n", report.total_params, report.params_millions));
            out
        }
    };
    emit(cfg.output.path.as_deref(), &text)
}

fn count(cfg: &RunConfig, preset: Option<String>, grid: bool, tolerance: f64) -> Outcome {
    if !(tolerance > 0.0) {
        return Err(Failure::Usage("--tolerance must be positive".into()));
    }
    if grid {
        let chosen = preset.or_else(|| cfg.network.preset.clone());
        let presets: Vec<&str> = match &chosen {
            Some(p) => vec![p.as_str()],
            None => analysis::REFERENCE_TOTALS.iter().map(|(n, _)| *n).collect(),
        };
        let report = param_grid(&presets, &GRID_MULTIPLIERS, &GRID_COMPRESSIONS, tolerance)?;
        let text = match cfg.output.format {
            Format::Json => report.to_json() + "\n",
            Format::Csv => report.to_csv(),
            Format::Table => report.to_table(),
        };
        return emit(cfg.output.path.as_deref(), &text);
    }
    let section = network_section(cfg, preset);
    let report = count_params(&section.to_spec()?)?;
    let comparison = section
        .preset
        .as_deref()
        .and_then(reference_total)
        .map(|r| compare_to_reference(report.total_params, r, tolerance))
        .transpose()?;
    let text = match cfg.output.format {
        Format::Json => {
            let mut v = serde_json::to_value(&report).expect("serializes");
            v["reference"] = serde_json::to_value(comparison).expect("serializes");
            serde_json::to_string_pretty(&v).expect("serializes") + "\n"
        }
        Format::Csv => report.to_csv(),
        Format::Table => {
            let mut out = report.to_table();
            if let Some(c) = comparison {
                out.push_str(&format!(
                    "published {}M, rel error {:.4}, {} at tolerance {}\n",
                    c.reference,
                    c.rel_error,
                    if c.pass { "match" } else { "mismatch" },
                    tolerance
                ));
            }
            out
        }
    };
    emit(cfg.output.path.as_deref(), &text)
}

fn verify_topology(cfg: &RunConfig) -> Outcome {
    let report = verify::run(&cfg.verify).map_err(|e| Failure::Usage(e.to_string()))?;
    let text = match cfg.output.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("serializes") + "\n",
        Format::Csv => {
            let mut out = String::from("suite,trials,max_deviation,pass,invariant,seed\n");
            for s in &report.suites {
                let (inv, seed) = s.failure.as_ref().map_or((String::new(), String::new()), |f| (f.invariant.clone(), f.seed.to_string()));
                out.push_str(&format!("{},{},{:e},{},{},{}\n", s.suite.name(), s.trials, s.max_deviation, s.pass, inv, seed));
            }
            out
        }
        Format::Table => report.to_table(),
    };
    emit(cfg.output.path.as_deref(), &text)?;
    if report.pass {
        return Ok(());
    }
    let failed: Vec<String> = report
        .suites
        .iter()
        .filter_map(|s| s.failure.as_ref().map(|f| format!("{}: invariant `{}` violated, seed {}", s.suite.name(), f.invariant, f.seed)))
        .collect();
    Err(Failure::Check(failed.join("; ")))
}

struct OpSummary {
    op: String,
    trials: usize,
    max_rel_error: f64,
    worst_seed: u64,
    worst_at: String,
    error: Option<String>,
}

fn run_gradcheck(cfg: &RunConfig) -> Outcome {
    let g = &cfg.gradcheck;
    if g.trials == 0 {
        return Err(Failure::Usage("trials must be at least 1".into()));
    }
    let ops = g.resolved_ops()?;
    let tol = Tolerance::for_precision(g.precision);
    let mut summaries = Vec::new();
    for op in &ops {
        let mut s = OpSummary {
            op: op.clone(),
            trials: 0,
            max_rel_error: 0.0,
            worst_seed: g.seed,
            worst_at: String::new(),
            error: None,
        };
        for t in 0..g.trials {
            let seed = g.seed.wrapping_add(t as u64);
            s.trials += 1;
            match gradcheck::run_trial(op, seed, g.precision) {
                Ok(r) if r.rel_error > s.max_rel_error || s.worst_at.is_empty() => {
                    s.max_rel_error = r.rel_error;
                    s.worst_seed = seed;
                    s.worst_at = format!("{}[{}]", r.worst_input, r.worst_index);
                }
                Ok(_) => {}
                Err(e) => {
                    s.error = Some(e.to_string());
                    s.worst_seed = seed;
                    break;
                }
            }
        }
        summaries.push(s);
    }
    let pass = |s: &OpSummary| s.error.is_none() && s.max_rel_error <= tol.max_rel_error;
    let all = summaries.iter().all(pass);
    let precision = serde_json::to_value(g.precision).expect("serializes");
    let text = match cfg.output.format {
        Format::Json => {
            let ops: Vec<_> = summaries
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "op": s.op, "trials": s.trials, "max_rel_error": s.max_rel_error,
                        "worst_seed": s.worst_seed, "worst_at": s.worst_at, "error": s.error, "pass": pass(s),
                    })
                })
                .collect();
            let v = serde_json::json!({
                "dtype": precision, "step": tol.step, "tolerance": tol.max_rel_error,
                "seed": g.seed, "ops": ops, "pass": all,
            });
            serde_json::to_string_pretty(&v).expect("serializes") + "\n"
        }
        Format::Csv => {
            let mut out = String::from("op,trials,max_rel_error,worst_seed,worst_at,pass\n");
            for s in &summaries {
                out.push_str(&format!("{},{},{:e},{},{},{}\n", s.op, s.trials, s.max_rel_error, s.worst_seed, s.worst_at, pass(s)));
            }
            out
        }
        Format::Table => {
            let rows: Vec<[String; 6]> = summaries
                .iter()
                .map(|s| {
                    [
                        s.op.clone(),
                        s.trials.to_string(),
                        format!("{:.3e}", s.max_rel_error),
                        s.worst_seed.to_string(),
                        s.error.clone().unwrap_or_else(|| s.worst_at.clone()),
                        if pass(s) { "PASS" } else { "FAIL" }.into(),
                    ]
                })
                .collect();
            let mut out = render_table(&["op", "trials", "max_rel_error", "worst_seed", "worst_at", "result"], &rows, &[false, true, true, true, false, false]);
            out.push_str(&format!(
                "dtype {} step {:e} tolerance {:e} seed {} overall {}\n",
                precision.as_str().unwrap_or("?"),
                tol.step,
                tol.max_rel_error,
                g.seed,
                if all { "PASS" } else { "FAIL" }
            ));
            out
        }
    };
    emit(cfg.output.path.as_deref(), &text)?;
    if all {
        return Ok(());
    }
    let failed: Vec<String> = summaries
        .iter()
        .filter(|s| !pass(s))
        .map(|s| format!("{} failed at seed {} ({})", s.op, s.worst_seed, s.error.clone().unwrap_or_else(|| s.worst_at.clone())))
        .collect();
    Err(Failure::Check(failed.join("; ")))
}

fn history_rows(variant: Option<&str>, h: &History) -> String {
    let csv = h.to_csv();
    let body = csv.lines().skip(1);
    match variant {
        None => body.map(|l| format!("{l}\n")).collect(),
        Some(v) => body.map(|l| format!("{v},{l}\n")).collect(),
    }
}

fn train_toy(cfg: &RunConfig) -> Outcome {
    let t = &cfg.train;
    let train_cfg = t.train_config();
    train_cfg.validate()?;
    let variants = t.variants()?;
    let labelled = variants.len() > 1;
    let mut csv = if labelled { format!("variant,{HISTORY_CSV_HEADER}\n") } else { format!("{HISTORY_CSV_HEADER}\n") };
    let mut summary = String::new();
    let mut failure = None;
    for (label, model) in &variants {
        let tag = labelled.then_some(label.as_str());
        match run_toy(&t.dataset, model, &train_cfg) {
            Ok(r) => {
                csv.push_str(&history_rows(tag, &r.history));
                let last = r.history.last().expect("at least one epoch");
                summary.push_str(&format!(
                    "variant={label} seed={} params={} epochs={} final_train_acc={} final_test_acc={} oracle_test_acc={} final_loss={}\n",
                    r.seed,
                    r.params,
                    r.history.records.len(),
                    last.train_acc,
                    last.test_acc,
                    r.oracle_test_acc,
                    last.loss
                ));
            }
            Err(Error::Diverged { epoch, loss, history }) => {
                csv.push_str(&history_rows(tag, &history));
                failure = Some(format!("variant {label} diverged at epoch {epoch} (loss {loss}); partial history written, seed {}", t.seed));
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    match &cfg.output.path {
        Some(p) => {
            emit(Some(p), &csv)?;
            print!("{summary}");
        }
        None => {
            print!("{csv}");
            eprint!("{summary}");
        }
    }
    match failure {
        Some(msg) => Err(Failure::Check(msg)),
        None => Ok(()),
    }
}
