use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bsprune::decomposition::{decompose_all, decomposition_growth, S_INIT};
use bsprune::graph::{build_architecture, cost_report, replace_head, ArchConfig, CostReport, NetGraph, Template, WeightInit};
use bsprune::importance::Method;
use bsprune::pipeline::{
    ablate, load_checkpoint, prune_procedure, run_procedure, save_checkpoint, train_procedure, RunConfig, RunData,
    RunReport,
};
use bsprune::pruner::prune_report;
use bsprune::{Error, ErrorClass, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bsprune", version, about = "Basis decomposition and pruning of convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count parameters and FLOPs of an architecture with a fresh head.
    Count {
        /// Template name or path to an architecture file.
        arch: String,
        /// Input extent as HxWxC.
        #[arg(long)]
        input: Option<String>,
        /// Classes of the replacement head.
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Also count the decomposed model.
        #[arg(long)]
        decomposed: bool,
        /// Print one line per layer.
        #[arg(long)]
        layers: bool,
    },
    /// Build, re-head, and decompose an architecture into a checkpoint.
    Decompose {
        arch: String,
        out: PathBuf,
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Head replacement, decomposition, and training.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "bsprune-out")]
        out: PathBuf,
    },
    /// Basis and channel pruning of a trained, decomposed checkpoint.
    Prune {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "bsprune-out")]
        out: PathBuf,
    },
    /// The full procedure.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "bsprune-out")]
        out: PathBuf,
    },
    /// Compare two checkpoints.
    Report {
        before: PathBuf,
        after: PathBuf,
        /// Print one line per layer.
        #[arg(long)]
        layers: bool,
    },
    /// Train once, then basis-prune by each method without retraining.
    Ablate {
        config: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, value_delimiter = ',', default_value = "taylor_fo,singular,random:0,reverse")]
        methods: Vec<String>,
    },
}

fn parse_input(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Option<Vec<usize>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match dims.as_deref() {
        Some(&[h, w, c]) if h > 0 && w > 0 && c > 0 => Ok([h, w, c]),
        _ => Err(Error::InvalidArgument(format!("expected HxWxC, got {s:?}"))),
    }
}

/// A template name, or else a path to an architecture file.
fn arch_config(arch: &str, input: Option<&str>, classes: usize) -> Result<ArchConfig> {
    let input = input.map(parse_input).transpose()?;
    let mut cfg = match Template::parse(arch) {
        Ok(t) => ArchConfig::template(t.name(), None, classes),
        Err(e) if !Path::new(arch).exists() => return Err(e),
        Err(_) => ArchConfig::load(Path::new(arch))?,
    };
    if input.is_some() {
        cfg.input = input;
    }
    Ok(cfg)
}

fn human(v: u64, units: &[(f64, &str)]) -> String {
    let v = v as f64;
    for &(scale, suffix) in units {
        if v >= scale {
            return format!("{:.2}{suffix}", v / scale);
        }
    }
    format!("{v}")
}

fn params_h(v: u64) -> String {
    human(v, &[(1e6, "M"), (1e3, "k")])
}

fn flops_h(v: u64) -> String {
    human(v, &[(1e9, "G"), (1e6, "M"), (1e3, "k")])
}

fn print_costs(label: &str, c: &CostReport, layers: bool) {
    println!(
        "{label:<11} params {} ({})  trainable {} ({})  flops {} ({})",
        c.total_params,
        params_h(c.total_params),
        c.trainable_params,
        params_h(c.trainable_params),
        c.total_flops,
        flops_h(c.total_flops)
    );
    if layers {
        for l in &c.layers {
            println!("  {:<32} {:<18} {:>12} {:>10} {:>14}", l.name, l.kind, l.params, l.trainable, l.flops);
        }
    }
}

fn count(arch: &str, input: Option<&str>, classes: usize, decomposed: bool, layers: bool) -> Result<()> {
    let cfg = arch_config(arch, input, classes)?;
    let g: NetGraph = build_architecture(&cfg, WeightInit::ShapeOnly)?;
    let g = replace_head(&g, classes, 0)?;
    let (h, w, c) = g.input_extent();
    println!("input       {h}x{w}x{c}");
    println!("convs       {}", g.conv_count());
    print_costs("original", &cost_report(&g), layers);
    if decomposed {
        let d = decompose_all(&g, S_INIT as f32)?;
        print_costs("decomposed", &cost_report(&d), layers);
        let grown = decomposition_growth(&g);
        let base = cost_report(&g).total_params as f64;
        println!("growth      {grown:+} params ({:+.2}%)", 100.0 * grown as f64 / base);
    }
    Ok(())
}

fn decompose(arch: &str, out: &Path, input: Option<&str>, classes: usize, seed: u64) -> Result<()> {
    let cfg = arch_config(arch, input, classes)?;
    let g: NetGraph = build_architecture(&cfg, WeightInit::HeNormal { seed })?;
    let d = decompose_all(&replace_head(&g, classes, seed)?, S_INIT as f32)?;
    save_checkpoint(&d, out)?;
    print_costs("decomposed", &cost_report(&d), false);
    println!("wrote {}", out.display());
    Ok(())
}

fn print_report(r: &RunReport, out: Option<&Path>) {
    println!(
        "{:<16} {:>9} {:>9} {:>12} {:>14} {:>9} {:>9}",
        "stage", "test_acc", "val_acc", "params", "flops", "param_pr", "flop_pr"
    );
    for row in &r.rows {
        println!(
            "{:<16} {:>8.2}% {:>8.2}% {:>12} {:>14} {:>8.2}% {:>8.2}%",
            row.stage,
            100.0 * row.accuracy,
            100.0 * row.val_accuracy,
            row.params,
            row.flops,
            100.0 * row.param_pr,
            100.0 * row.flop_pr
        );
    }
    if let Some(dir) = out {
        println!("outputs in {}", dir.display());
    }
}

fn prune(config: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data: RunData = RunData::load(&cfg)?;
    let trained: NetGraph = load_checkpoint(checkpoint)?;
    let (_, report) = prune_procedure(&cfg, &data, trained.clone(), &trained, Some(out))?;
    print_report(&report, Some(out));
    Ok(())
}

fn report(before: &Path, after: &Path, layers: bool) -> Result<()> {
    let b: NetGraph = load_checkpoint(before)?;
    let a: NetGraph = load_checkpoint(after)?;
    let r = prune_report(&b, &a, None)?;
    println!("params  {} -> {}  PR {:.2}%", r.params_before, r.params_after, 100.0 * r.param_pr);
    println!("flops   {} -> {}  PR {:.2}%", r.flops_before, r.flops_after, 100.0 * r.flop_pr);
    if layers {
        for l in &r.layers {
            println!(
                "  {:<32} {:>10} -> {:<10} {:>12} -> {}",
                l.name, l.params_before, l.params_after, l.flops_before, l.flops_after
            );
        }
    }
    Ok(())
}

fn ablation(config: &Path, fraction: f64, methods: &[String]) -> Result<()> {
    let methods: Vec<Method> = methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let cfg = RunConfig::load(config)?;
    let data: RunData = RunData::load(&cfg)?;
    let (g, r) = train_procedure(&cfg, &data, None)?;
    if let Some(row) = r.row("trained") {
        println!("{:<16} {:>8.2}%", "trained", 100.0 * row.accuracy);
    }
    for (m, acc) in ablate(&g, &data, &methods, fraction, cfg.batch_size, cfg.seed)? {
        println!("{:<16} {:>8.2}%", m.to_string(), 100.0 * acc);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Count {
            arch,
            input,
            classes,
            decomposed,
            layers,
        } => count(&arch, input.as_deref(), classes, decomposed, layers),
        Command::Decompose {
            arch,
            out,
            input,
            classes,
            seed,
        } => decompose(&arch, &out, input.as_deref(), classes, seed),
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let data: RunData = RunData::load(&cfg)?;
            let (_, r) = train_procedure(&cfg, &data, Some(&out))?;
            print_report(&r, Some(&out));
            Ok(())
        }
        Command::Prune { config, checkpoint, out } => prune(&config, &checkpoint, &out),
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let data: RunData = RunData::load(&cfg)?;
            let (_, r) = run_procedure(&cfg, &data, Some(&out))?;
            print_report(&r, Some(&out));
            Ok(())
        }
        Command::Report { before, after, layers } => report(&before, &after, layers),
        Command::Ablate {
            config,
            fraction,
            methods,
        } => ablation(&config, fraction, &methods),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("BSPRUNE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("BSPRUNE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
