//! Command-line front end. Exit codes: 0 on success, 1 on runtime failure,
//! 2 on usage errors (bad flags, bad values, missing input files).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poolcall_core::gradcheck::{run_suite, FdSettings};
use poolcall_core::{Ctx, Mode};
use poolcall_siggen::{generate_dataset, read_records, GenConfig};
use poolcall_train::basecall::{basecall, load_model_dir, BasecallCfg};
use poolcall_train::eval::evaluate_files;
use poolcall_train::trainer::{default_train_cfg, train, TrainCfg};

#[derive(Parser)]
#[command(
    name = "poolcall",
    version,
    about = "Synthetic nanopore-style base calling with dynamic pooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic read dataset with train/valid/test splits
    Generate(GenerateArgs),
    /// Train a model preset on a generated dataset
    Train(TrainArgs),
    /// Call bases for every read in a dataset split
    Basecall(BasecallArgs),
    /// Score calls against the dataset's reference sequences
    Eval(EvalArgs),
    /// Finite-difference validation of every differentiable op
    Gradcheck(GradcheckArgs),
    /// Export pooling scatter and per-read warp traces as TSV
    ExportPlots(ExportPlotsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of reads across all splits
    #[arg(long)]
    reads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Slowest per-read speed multiplier
    #[arg(long, default_value_t = 0.7)]
    speed_min: f64,
    /// Fastest per-read speed multiplier
    #[arg(long, default_value_t = 1.4)]
    speed_max: f64,
    /// Shortest reference length in bases
    #[arg(long, default_value_t = 220)]
    seq_min: usize,
    /// Longest reference length in bases
    #[arg(long, default_value_t = 500)]
    seq_max: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Model preset: hac-mini-stride, hac-mini-dynpool, fast-mini-stride,
    /// fast-mini-dynpool, or smoke
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    preset: Option<String>,
    /// Full training config as JSON, instead of a preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory from `generate`
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the model and logs
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    first_cycle: Option<u64>,
    #[arg(long)]
    cycles: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Signals per training window
    #[arg(long)]
    window: Option<usize>,
    /// Validation reads decoded at each cycle end
    #[arg(long)]
    valid_reads: Option<usize>,
    /// Checkpoint to initialize from
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Args)]
struct BasecallArgs {
    /// Model directory from `train`
    #[arg(long)]
    model: PathBuf,
    /// Dataset split file (e.g. test.bin)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for calls.fastq, traces.tsv, basecall.json
    #[arg(long)]
    out: PathBuf,
    /// Beam width; 1 decodes greedily
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// calls.fastq from `basecall`
    #[arg(long)]
    calls: PathBuf,
    /// Dataset split file holding the references
    #[arg(long)]
    data: PathBuf,
    /// traces.tsv from `basecall` (dynamic-pooling models)
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Output directory for per_read.tsv and report.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds to run the registry over
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

#[derive(Args)]
struct ExportPlotsArgs {
    /// Model directory from `train` (must be a dynamic-pooling model)
    #[arg(long)]
    model: PathBuf,
    /// Dataset split file
    #[arg(long)]
    data: PathBuf,
    /// Output directory for scatter.tsv and positions.tsv
    #[arg(long)]
    out: PathBuf,
    /// Number of reads to export warp positions for
    #[arg(long, default_value_t = 8)]
    reads: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn train_err(e: poolcall_train::Error) -> Failure {
    match e {
        poolcall_train::Error::MissingFile(p) => {
            Failure::Usage(format!("missing input file {}", p.display()))
        }
        e => Failure::Runtime(e.to_string()),
    }
}

fn siggen_err(e: poolcall_siggen::Error) -> Failure {
    match e {
        poolcall_siggen::Error::InvalidConfig(m) => Failure::Usage(m),
        poolcall_siggen::Error::Collision(p) => {
            Failure::Usage(format!("dataset already exists at {}", p.display()))
        }
        e => Failure::Runtime(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Basecall(a) => cmd_basecall(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportPlots(a) => cmd_export_plots(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Failure> {
    if a.reads == 0 {
        return usage("--reads must be at least 1");
    }
    let cfg = GenConfig {
        speed_min: a.speed_min,
        speed_max: a.speed_max,
        seq_len_min: a.seq_min,
        seq_len_max: a.seq_max,
        ..GenConfig::default()
    };
    let meta = generate_dataset(&a.out, a.seed, a.reads, &cfg).map_err(siggen_err)?;
    println!(
        "generated {} reads ({} train / {} valid / {} test) under {}",
        meta.n_reads,
        meta.n_train,
        meta.n_valid,
        meta.n_test,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg: TrainCfg = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(preset)) => default_train_cfg(preset, a.seed.unwrap_or(0)).map_err(|e| {
            match e {
                poolcall_train::Error::Config(m) => Failure::Usage(m),
                e => train_err(e),
            }
        })?,
        (None, None) => return usage("either --preset or --config is required"),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(v) = a.max_lr {
        cfg.schedule.max_lr = v;
    }
    if let Some(v) = a.warmup {
        cfg.schedule.warmup = v;
    }
    if let Some(v) = a.first_cycle {
        cfg.schedule.first_cycle = v;
    }
    if let Some(v) = a.cycles {
        cfg.schedule.cycles = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.window {
        cfg.window = v;
    }
    if let Some(v) = a.valid_reads {
        cfg.valid_reads = v;
    }
    if a.init_from.is_some() {
        cfg.init_from = a.init_from.clone();
    }
    if cfg.batch_size == 0 || cfg.window == 0 {
        return usage("--batch-size and --window must be at least 1");
    }
    let summary = train(&a.data, &a.out, &cfg).map_err(train_err)?;
    println!(
        "trained {} steps, final loss {:.3}, model at {}",
        summary.steps,
        summary.final_loss,
        summary.model_path.display()
    );
    if let Some(acc) = summary.final_valid_accuracy {
        println!("validation accuracy {acc:.4}");
    }
    Ok(())
}

fn cmd_basecall(a: BasecallArgs) -> Result<(), Failure> {
    if a.threads == 0 {
        return usage("--threads must be at least 1");
    }
    let cfg = BasecallCfg { beam_width: a.beam.max(1), threads: a.threads };
    let summary = basecall(&a.model, &a.data, &a.out, &cfg).map_err(train_err)?;
    println!(
        "called {} reads ({} signals) at {:.0} signals/s, outputs under {}",
        summary.n_reads,
        summary.total_signals,
        summary.signals_per_sec,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let report =
        evaluate_files(&a.calls, &a.data, a.traces.as_deref(), &a.out).map_err(train_err)?;
    println!(
        "{} reads, median accuracy {:.4}, mean accuracy {:.4}, {} empty",
        report.n_reads, report.median_accuracy, report.mean_accuracy, report.n_empty
    );
    if let Some(fit) = &report.length_factor_fit {
        println!("length factor vs speed: slope {:.4}, r2 {:.4}", fit.slope, fit.r2);
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if a.seeds == 0 {
        return usage("--seeds must be at least 1");
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let reports = run_suite(&seeds, &FdSettings::default())
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut failures = 0usize;
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!(
            "{status} {} / {}: max rel {:.3e}, max abs {:.3e}",
            r.case, r.tensor, r.max_rel_err, r.max_abs_err
        );
        if !r.passed {
            failures += 1;
        }
    }
    println!("{} checks, {} failures", reports.len(), failures);
    if failures > 0 {
        return Err(Failure::Runtime(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

fn cmd_export_plots(a: ExportPlotsArgs) -> Result<(), Failure> {
    use std::io::Write;

    if !a.data.exists() {
        return usage(format!("missing input file {}", a.data.display()));
    }
    let (_, store, model) = load_model_dir(&a.model).map_err(train_err)?;
    let records = read_records(&a.data).map_err(siggen_err)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(e.to_string()))?;

    let trace_of = |signal: &[f32]| -> Result<_, Failure> {
        let mut cx = Ctx::new(&store, Mode::Eval);
        let x = cx
            .tape
            .leaf(poolcall_core::Tensor::new(vec![1, signal.len(), 1], signal.to_vec()).unwrap());
        let (_, traces) = model.forward(&mut cx, x).map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(traces.map(|mut t| t.remove(0)))
    };

    let scatter_path = a.out.join("scatter.tsv");
    let mut scatter = std::io::BufWriter::new(
        std::fs::File::create(&scatter_path).map_err(|e| Failure::Runtime(e.to_string()))?,
    );
    writeln!(scatter, "read_id\tspeed\tmean_length_factor")
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut any_trace = false;
    let mut positions_rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (idx, rec) in records.iter().enumerate() {
        if rec.signal.is_empty() {
            continue;
        }
        let Some(trace) = trace_of(&rec.signal)? else {
            break;
        };
        any_trace = true;
        writeln!(scatter, "{}\t{:.6}\t{:.6}", rec.read_id, rec.speed, trace.mean_length_factor)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        if idx < a.reads {
            positions_rows.push((rec.read_id.clone(), trace.positions));
        }
    }
    scatter.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    if !any_trace {
        let _ = std::fs::remove_file(&scatter_path);
        return usage("model has no dynamic pooling stage; nothing to export");
    }

    let mut pos = std::io::BufWriter::new(
        std::fs::File::create(a.out.join("positions.tsv"))
            .map_err(|e| Failure::Runtime(e.to_string()))?,
    );
    writeln!(pos, "read_id\tinput_index\tposition").map_err(|e| Failure::Runtime(e.to_string()))?;
    for (id, positions) in &positions_rows {
        for (i, p) in positions.iter().enumerate() {
            writeln!(pos, "{id}\t{i}\t{p:.6}").map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    pos.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    println!(
        "wrote {} and {}",
        scatter_path.display(),
        a.out.join("positions.tsv").display()
    );
    Ok(())
}
