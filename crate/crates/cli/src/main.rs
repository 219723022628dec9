use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dancecca::checkpoint::Checkpoint;
use dancecca::config::RunConfig;
use dancecca::ingest::{load_manifest, DatasetManifest, FoldAssignment};
use dancecca::pipeline::{self, Direction};
use dancecca::report::group;
use dancecca::synth::{generate_dataset, SynthConfig};
use dancecca::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dancecca", version, about = "Music audio / dance movement retrieval with deep CCA")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, env = "DANCECCA_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Extraction worker threads (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output; repeat for debug messages.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset and its manifest.
    Synth(SynthArgs),
    /// Compute and cache segmented features for every manifest clip.
    Extract,
    /// Train one fold and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate checkpoints of one fold on its held-out clips.
    Evaluate(EvaluateArgs),
    /// Rank indexed clips of the other modality against one query file.
    Retrieve(RetrieveArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for manifest.tsv, audio/ and pose/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n_objects)]
    objects: usize,
    #[arg(long, default_value_t = SynthConfig::default().latent_dim)]
    latent_dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().styles)]
    styles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    fold: usize,
    /// Run index; the run seed is the configured seed plus this.
    #[arg(long, default_value_t = 0, conflicts_with = "all_runs")]
    run: usize,
    /// Train every configured run of the fold.
    #[arg(long)]
    all_runs: bool,
    /// Build the chance-level reference model instead of training.
    #[arg(long)]
    untrained: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path (single run only). Defaults to the output directory.
    #[arg(long, conflicts_with = "all_runs")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    fold: usize,
    /// Checkpoints of the fold's runs; scores are averaged over them.
    #[arg(long = "checkpoint", required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    /// Report path. Defaults to `<output_dir>/fold<k>/report.toml`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A WAV file for audio-to-movement, a pose track for movement-to-audio.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, value_parser = parse_direction)]
    direction: Direction,
    /// Print only the best `top` matches.
    #[arg(long)]
    top: Option<usize>,
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &g.manifest {
        cfg.paths.manifest = p.clone();
    }
    if let Some(p) = &g.cache_dir {
        cfg.paths.cache_dir = p.clone();
    }
    if let Some(p) = &g.output_dir {
        cfg.paths.output_dir = p.clone();
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    load_manifest(&cfg.paths.manifest)
}

/// Printed to stderr by every command so stdout stays machine-readable.
fn reproducibility(cfg: &RunConfig, folds: Option<&FoldAssignment>, seeds: &[u64]) -> Result<()> {
    let (audio, movement) = pipeline::build_branches(cfg, 0)?;
    let mut e = io::stderr().lock();
    let _ = writeln!(e, "# reproducibility");
    let _ = writeln!(e, "config_hash = {}", cfg.hash());
    let _ = writeln!(e, "seeds = {seeds:?}");
    if let Some(f) = folds {
        let _ = writeln!(e, "folds = {} (seed {}), sizes {:?}", f.k, f.seed, f.fold_sizes());
    }
    let _ = writeln!(
        e,
        "parameters = audio {}, movement {}",
        group(audio.count_parameters().total),
        group(movement.count_parameters().total)
    );
    let _ = writeln!(e, "threads = {}", threads());
    Ok(())
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn fold_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.paths.output_dir.join(format!("fold{fold}"))
}

fn default_checkpoint(cfg: &RunConfig, fold: usize, run: usize, untrained: bool) -> PathBuf {
    let stem = if untrained { "untrained-run" } else { "run" };
    fold_dir(cfg, fold).join(format!("{stem}{run}.ckpt"))
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let sc = SynthConfig {
        n_objects: args.objects,
        latent_dim: args.latent_dim,
        noise_sigma: args.noise,
        styles: args.styles,
        seed: args.seed,
    };
    let ds = generate_dataset(&sc, &args.out)?;
    println!("{}", ds.manifest_path.display());
    info!("wrote {} objects to {}", ds.manifest.len(), args.out.display());
    Ok(())
}

fn cmd_extract(cfg: &RunConfig) -> Result<bool> {
    let m = manifest(cfg)?;
    let folds = pipeline::folds_for(cfg, &m)?;
    reproducibility(cfg, Some(&folds), &[])?;
    let s = pipeline::extract(cfg, &m)?;
    if let Some(t) = &s.target {
        println!("target\t{}", t.clip_id);
    }
    println!("computed\t{}", s.computed.len());
    println!("skipped\t{}", s.skipped.len());
    println!("failed\t{}", s.failures.len());
    for (id, e) in &s.failures {
        println!("failure\t{id}\t{e}");
    }
    Ok(s.failures.is_empty())
}

fn cmd_train(cfg: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let m = manifest(cfg)?;
    let folds = pipeline::folds_for(cfg, &m)?;
    let runs: Vec<usize> = if args.all_runs { (0..cfg.eval.runs).collect() } else { vec![args.run] };
    let seeds: Vec<u64> = runs.iter().map(|&r| cfg.run_seed(r)).collect();
    reproducibility(cfg, Some(&folds), &seeds)?;
    for &run in &runs {
        let ckpt = pipeline::train_fold(cfg, &m, args.fold, run, args.untrained)?;
        let path = args
            .out
            .clone()
            .unwrap_or_else(|| default_checkpoint(cfg, args.fold, run, args.untrained));
        let hash = ckpt.save(&path)?;
        println!("{}\t{hash}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let m = manifest(cfg)?;
    let folds = pipeline::folds_for(cfg, &m)?;
    let checkpoints: Vec<Checkpoint> = args.checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<_>>()?;
    let seeds: Vec<u64> = checkpoints.iter().map(|c| c.meta.seed).collect();
    reproducibility(cfg, Some(&folds), &seeds)?;
    let report = pipeline::evaluate_fold(cfg, &m, &checkpoints, args.fold)?;
    let path = args
        .report
        .clone()
        .unwrap_or_else(|| fold_dir(cfg, args.fold).join("report.toml"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Report(format!("{}: {e}", dir.display())))?;
    }
    let hash = report.save(&path)?;
    print!("{}", report.render());
    println!();
    println!("report\t{}\t{hash}", path.display());
    Ok(())
}

fn cmd_retrieve(cfg: &RunConfig, args: &RetrieveArgs) -> Result<()> {
    let m = manifest(cfg)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    reproducibility(cfg, None, &[ckpt.meta.seed])?;
    let hits = pipeline::retrieve(cfg, &ckpt, &m, &args.query, args.direction)?;
    let mut out = io::stdout().lock();
    for h in hits.iter().take(args.top.unwrap_or(usize::MAX)) {
        let _ = writeln!(out, "{}\t{}\t{:.6}", h.rank, h.clip_id, h.score);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Command::Synth(args) = &cli.command {
        cmd_synth(args)?;
        return Ok(true);
    }
    let mut cfg = load_config(&cli.global)?;
    cfg.validate()?;
    match &cli.command {
        Command::Synth(_) => unreachable!(),
        Command::Extract => return cmd_extract(&cfg),
        Command::Train(args) => cmd_train(&mut cfg, args)?,
        Command::Evaluate(args) => cmd_evaluate(&cfg, args)?,
        Command::Retrieve(args) => cmd_retrieve(&cfg, args)?,
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config_error() {
        2
    } else {
        1
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
