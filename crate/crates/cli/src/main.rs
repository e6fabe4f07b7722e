use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stride_core::analysis::{compare_runs, panel_series, series_csv, Panel};
use stride_core::config::{resolve, ConfigSources};
use stride_core::rundir::{run_in_dir, RunDir};
use stride_core::scheduler::{build_datasets, dataset_digest, evaluate, evaluate_verifier, Decode, Verdicts};
use stride_core::Error;

#[derive(Parser)]
#[command(name = "stride", version, about = "Generator/verifier co-training on synthetic modular chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration into a run directory (resumes if interrupted).
    Run {
        /// JSON file with config overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named preset; `stride` when omitted.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to runs/<preset>-s<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        cycles: Option<u64>,
    },
    /// Re-evaluate a run's checkpointed generator on its eval set.
    Eval {
        run_dir: PathBuf,
        /// Sample K rollouts per query and report pass@K as well.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tabulate finished runs by final pass@1.
    Compare {
        #[arg(required = true, num_args = 2..)]
        run_dirs: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export one training-dynamics series as a (cycle, value) CSV.
    PlotData {
        run_dir: PathBuf,
        /// One of f1, guidance, entropy, depth.
        #[arg(long)]
        panel: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::ConfigNotFound(_) => 2,
        _ => 1,
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_run(
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    cycles: Option<u64>,
) -> Result<(), Error> {
    let cfg = resolve(&ConfigSources {
        preset: preset.as_deref(),
        file: config.as_deref(),
        env: std::env::vars().collect(),
        seed,
        cycles,
    })?;
    let label = preset.clone().unwrap_or_else(|| "stride".into());
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-s{}", label.replace('@', "-"), cfg.seed)));
    let dir = RunDir::new(&out);
    let outcome = run_in_dir(&cfg, &dir, Some(&label))?;
    let m = &outcome.manifest;
    if outcome.already_complete {
        eprintln!("{} already holds this run", out.display());
    } else if outcome.resumed {
        eprintln!("resumed {}", out.display());
    }
    println!(
        "{}: {} cycles, pass@1 {:.4} -> {:.4}, metrics {}",
        out.display(),
        m.cycles_completed,
        m.initial_eval.pass_at_1,
        m.final_eval.pass_at_1,
        &m.metrics_digest[..16]
    );
    if m.ended_early {
        eprintln!("query stream ran out after {} cycles", m.cycles_completed);
    }
    Ok(())
}

fn cmd_eval(run_dir: PathBuf, k: Option<usize>, seed: u64) -> Result<(), Error> {
    let dir = RunDir::new(&run_dir);
    let cfg = dir.read_config()?;
    let (_, eval) = build_datasets(&cfg)?;
    if let Ok(m) = dir.read_manifest() {
        if m.eval_digest != dataset_digest(&eval) {
            return Err(Error::Config(format!("eval set of {} no longer matches its manifest", run_dir.display())));
        }
    }
    let generator = dir.load_generator()?;
    let decode = match k {
        Some(k) => Decode::Sample { k, seed },
        None => Decode::Greedy,
    };
    let report = evaluate(&generator, &eval, decode)?;
    let verifier = dir.load_verifier()?;
    let f1 = match (&verifier, cfg.adversarial_verifier) {
        (_, true) => Some(evaluate_verifier(Verdicts::Uniform, &generator, &eval, seed)?),
        (Some(v), false) => Some(evaluate_verifier(Verdicts::Policy(v), &generator, &eval, seed)?),
        (None, false) => None,
    };
    let out = serde_json::json!({
        "run": run_dir.display().to_string(),
        "eval": report,
        "verifier_f1": f1,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}

fn cmd_compare(run_dirs: Vec<PathBuf>, csv: Option<PathBuf>) -> Result<(), Error> {
    let cmp = compare_runs(&run_dirs)?;
    print!("{}", cmp.to_text());
    let text = cmp.to_csv()?;
    match csv {
        Some(p) => write_out(Some(&p), &text),
        None => {
            println!();
            write_out(None, &text)
        }
    }
}

fn cmd_plot_data(run_dir: PathBuf, panel: String, out: Option<PathBuf>) -> Result<(), Error> {
    let panel = Panel::parse(&panel)?;
    let dir = RunDir::new(&run_dir);
    dir.read_manifest()?;
    let series = panel_series(&dir.read_metrics()?, panel);
    if series.is_empty() {
        eprintln!("warning: {} has an empty {} series", run_dir.display(), panel.name());
    }
    write_out(out.as_deref(), &series_csv(panel, &series))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, preset, seed, out, cycles } => cmd_run(config, preset, seed, out, cycles),
        Command::Eval { run_dir, k, seed } => cmd_eval(run_dir, k, seed),
        Command::Compare { run_dirs, csv } => cmd_compare(run_dirs, csv),
        Command::PlotData { run_dir, panel, out } => cmd_plot_data(run_dir, panel, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
