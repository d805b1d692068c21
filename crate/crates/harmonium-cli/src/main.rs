//! Command-line entry point wiring the library modules into reproducible
//! pipelines. Logs go to stderr; data goes to stdout or files. Every
//! command that writes outputs drops a `run_config.json` snapshot next to
//! them. Exit codes: 0 success, 1 validation or test failure, 2 usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use harmonium::bt;
use harmonium::color::{fit_transform, PatchColors};
use harmonium::dataset::{
    build_dataset, validate_manifest, BuilderConfig, Catalog, DatasetManifest, SplitSpec,
};
use harmonium::gift::{
    pretrain_reconstruction, run_selftest, synthetic_pairs, toy_train, GiftConfig, GiftNetwork,
};
use harmonium::metrics::evaluate_manifest;

#[derive(Parser)]
#[command(
    name = "harmonium",
    version,
    about = "Color-checker harmonization dataset construction, metrics, ranking, and network self-tests"
)]
struct Cli {
    /// Seed for all randomness (HARMONIUM_SEED overrides this).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Per-image parallelism for build and eval.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Emit machine-readable JSON reports on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a polynomial color-matching transform between two patch files.
    Fit(FitArgs),
    /// Build a (composite, real, mask) dataset from an annotated catalog.
    BuildDataset(BuildArgs),
    /// Validate a built dataset manifest.
    Validate(ValidateArgs),
    /// Evaluate predictions against a manifest.
    Eval(EvalArgs),
    /// Fit Bradley-Terry scores from pairwise preferences.
    Rank(RankArgs),
    /// Run the network invariant and gradient suites.
    GiftSelftest(SelftestArgs),
    /// Two-branch toy training on synthetic pairs.
    TrainToy(TrainArgs),
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// Source patch colors (JSON array of 24 [r,g,b] triplets).
    #[arg(long)]
    src: PathBuf,
    /// Target patch colors.
    #[arg(long)]
    dst: PathBuf,
    #[arg(long, default_value_t = 2)]
    degree: u32,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Output transform JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BuildArgs {
    /// Catalog JSON listing images, masks, and patch colors.
    #[arg(long)]
    catalog: PathBuf,
    /// Standard patch colors; defaults to the built-in chart reference.
    #[arg(long)]
    standard: Option<PathBuf>,
    /// References sampled per foreground.
    #[arg(long, default_value_t = 10)]
    refs: usize,
    #[arg(long, default_value_t = 2)]
    degree: u32,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Fraction of source images assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predicted images named like the composites.
    #[arg(long)]
    predictions: PathBuf,
    /// Output directory for the CSV and aggregate JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RankArgs {
    /// `winner,loser` CSV or `{methods, wins}` JSON.
    #[arg(long)]
    input: PathBuf,
    /// Pseudo-wins added to every ordered pair.
    #[arg(long, default_value_t = 0.1)]
    prior: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Table format for stdout: markdown or csv.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Optional file for the ranking table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SelftestArgs {}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    /// Side length of the synthetic square images (divisible by 8).
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 150)]
    recon_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    recon_lr: f64,
    /// Output directory for checkpoints and the loss trajectory.
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    /// Bad invocation (missing input file, unusable flag value): exit 2.
    Usage(String),
    /// Everything else: exit 1.
    Failure(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failure(e)
    }
}

impl From<harmonium::Error> for CliError {
    fn from(e: harmonium::Error) -> Self {
        CliError::Failure(e.into())
    }
}

fn require_file(path: &Path, flag: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "{flag} {}: file does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn require_dir(path: &Path, flag: &str) -> Result<(), CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!(
            "{flag} {}: directory does not exist",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct RunSnapshot<T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    jobs: usize,
    args: T,
}

fn write_snapshot<T: Serialize>(
    dir: &Path,
    command: &'static str,
    seed: u64,
    jobs: usize,
    args: &T,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let snapshot = RunSnapshot {
        tool: "harmonium",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        jobs,
        args,
    };
    let path = dir.join("run_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&snapshot)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn resolved_seed(flag_seed: u64) -> u64 {
    match std::env::var("HARMONIUM_SEED") {
        Ok(v) => match v.parse::<u64>() {
            Ok(seed) => {
                log::info!("HARMONIUM_SEED={seed} overrides --seed {flag_seed}");
                seed
            }
            Err(_) => {
                log::warn!("ignoring unparsable HARMONIUM_SEED={v:?}");
                flag_seed
            }
        },
        Err(_) => flag_seed,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let seed = resolved_seed(cli.seed);
    let jobs = cli.jobs.max(1);
    match cli.command {
        Command::Fit(args) => cmd_fit(args, seed, jobs, cli.json),
        Command::BuildDataset(args) => cmd_build(args, seed, jobs, cli.json),
        Command::Validate(args) => cmd_validate(args, cli.json),
        Command::Eval(args) => cmd_eval(args, seed, jobs, cli.json),
        Command::Rank(args) => cmd_rank(args, cli.json),
        Command::GiftSelftest(args) => cmd_selftest(args, seed, cli.json),
        Command::TrainToy(args) => cmd_train(args, seed, jobs, cli.json),
    }
}

fn cmd_fit(args: FitArgs, seed: u64, jobs: usize, json: bool) -> Result<u8, CliError> {
    require_file(&args.src, "--src")?;
    require_file(&args.dst, "--dst")?;
    let src = PatchColors::load(&args.src)?;
    let dst = PatchColors::load(&args.dst)?;
    let transform = fit_transform(&src, &dst, args.degree, args.ridge)?;
    transform.save(&args.out)?;
    let out_dir = args.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_snapshot(&out_dir, "fit", seed, jobs, &args)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&transform).map_err(anyhow::Error::from)?);
    } else {
        println!(
            "fitted degree-{} transform, rms residual {:.3e} -> {}",
            transform.degree,
            transform.fit_residual_rms,
            args.out.display()
        );
    }
    Ok(0)
}

fn cmd_build(args: BuildArgs, seed: u64, jobs: usize, json: bool) -> Result<u8, CliError> {
    require_file(&args.catalog, "--catalog")?;
    let standard = match &args.standard {
        Some(path) => {
            require_file(path, "--standard")?;
            PatchColors::load(path)?
        }
        None => PatchColors::colorchecker_srgb(),
    };
    let catalog = Catalog::load(&args.catalog)?;
    let config = BuilderConfig {
        degree: args.degree,
        ridge: args.ridge,
        seed,
        references_per_foreground: args.refs,
        split: SplitSpec::Fraction {
            train: args.train_fraction,
        },
        color_space: "srgb".into(),
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_snapshot(&args.out, "build-dataset", seed, jobs, &args)?;
    let manifest = build_dataset(&catalog, &standard, &config, &args.out, jobs)?;
    let trains = manifest
        .entries
        .iter()
        .filter(|e| matches!(e.split, harmonium::dataset::Split::Train))
        .count();
    log::info!(
        "built {} entries ({} train / {} test) from {} foregrounds",
        manifest.entries.len(),
        trains,
        manifest.entries.len() - trains,
        catalog.foreground_count()
    );
    if json {
        #[derive(Serialize)]
        struct Out {
            entries: usize,
            train: usize,
            test: usize,
            manifest: PathBuf,
        }
        let report = Out {
            entries: manifest.entries.len(),
            train: trains,
            test: manifest.entries.len() - trains,
            manifest: args.out.join("manifest.json"),
        };
        println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    } else {
        println!(
            "{} entries ({} train / {} test) -> {}",
            manifest.entries.len(),
            trains,
            manifest.entries.len() - trains,
            args.out.join("manifest.json").display()
        );
    }
    Ok(0)
}

fn cmd_validate(args: ValidateArgs, json: bool) -> Result<u8, CliError> {
    require_file(&args.manifest, "--manifest")?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let dir = args
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let report = validate_manifest(&manifest, &dir);
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    } else {
        println!(
            "checked {} entries: {} violation(s)",
            report.entries_checked,
            report.violations.len()
        );
        for v in &report.violations {
            println!("  {v}");
        }
    }
    Ok(if report.is_clean() { 0 } else { 1 })
}

fn cmd_eval(args: EvalArgs, seed: u64, jobs: usize, json: bool) -> Result<u8, CliError> {
    require_file(&args.manifest, "--manifest")?;
    require_dir(&args.predictions, "--predictions")?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let dir = args
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let evaluation = evaluate_manifest(&manifest, &dir, &args.predictions, jobs)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    evaluation.write_csv(&args.out.join("metrics.csv"))?;
    evaluation.write_aggregate_json(&args.out.join("aggregate.json"))?;
    write_snapshot(&args.out, "eval", seed, jobs, &args)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&evaluation).map_err(anyhow::Error::from)?);
    } else {
        print!("{}", evaluation.format_table());
    }
    for missing in &evaluation.missing {
        log::warn!("no prediction for {missing}");
    }
    Ok(if evaluation.incomplete { 1 } else { 0 })
}

fn cmd_rank(args: RankArgs, json: bool) -> Result<u8, CliError> {
    require_file(&args.input, "--input")?;
    if args.format != "markdown" && args.format != "csv" {
        return Err(CliError::Usage(format!(
            "--format {}: expected markdown or csv",
            args.format
        )));
    }
    let results = bt::PairwiseResults::load(&args.input)?;
    let scores = bt::fit_bt(&results, args.max_iters, args.tol, args.prior)?;
    let table = bt::rank_report(&scores);
    let rendered = if args.format == "csv" {
        bt::format_csv(&table)
    } else {
        bt::format_markdown(&table)
    };
    if let Some(out) = &args.out {
        std::fs::write(out, &rendered).with_context(|| format!("writing {}", out.display()))?;
    }
    if json {
        #[derive(Serialize)]
        struct Out<'a> {
            converged: bool,
            iterations: usize,
            table: &'a [bt::RankedMethod],
        }
        let report = Out {
            converged: scores.converged,
            iterations: scores.iterations,
            table: &table,
        };
        println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    } else {
        print!("{rendered}");
    }
    if !scores.converged {
        log::warn!("fit did not converge within {} iterations", args.max_iters);
        return Ok(1);
    }
    Ok(0)
}

fn cmd_selftest(_args: SelftestArgs, seed: u64, json: bool) -> Result<u8, CliError> {
    let checks = run_selftest(seed);
    let failed = checks.iter().filter(|c| !c.passed).count();
    if json {
        #[derive(Serialize)]
        struct Out {
            name: String,
            passed: bool,
            detail: String,
        }
        let rows: Vec<Out> = checks
            .iter()
            .map(|c| Out {
                name: c.name.clone(),
                passed: c.passed,
                detail: c.detail.clone(),
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows).map_err(anyhow::Error::from)?);
    } else {
        for c in &checks {
            println!(
                "{}: {} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

fn cmd_train(args: TrainArgs, seed: u64, jobs: usize, json: bool) -> Result<u8, CliError> {
    if args.size % 8 != 0 || args.size == 0 {
        return Err(CliError::Usage(format!(
            "--size {}: must be a positive multiple of 8",
            args.size
        )));
    }
    if args.pairs == 0 {
        return Err(CliError::Usage("--pairs must be at least 1".into()));
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_snapshot(&args.out, "train-toy", seed, jobs, &args)?;

    let config = GiftConfig::default();
    let pairs = synthetic_pairs(args.pairs, args.size, seed);
    let reals: Vec<_> = pairs.iter().map(|p| p.real.clone()).collect();

    log::info!(
        "pretraining the reconstruction branch: {} steps at lr {}",
        args.recon_steps,
        args.recon_lr
    );
    let recon = pretrain_reconstruction(
        GiftNetwork::init(config.without_gift(), seed.wrapping_add(1))?,
        &reals,
        args.recon_steps,
        args.recon_lr,
    )?;
    recon.save_checkpoint(&args.out.join("reconstruction.json"))?;

    log::info!(
        "training the harmonization branch: {} steps at lr {}",
        args.steps,
        args.lr
    );
    let mut net = GiftNetwork::init(config, seed)?;
    let result = toy_train(&mut net, &recon, &pairs, args.steps, args.lr)?;
    net.save_checkpoint(&args.out.join("harmonization.json"))?;

    let mut csv = String::from("step,total_loss,l_har\n");
    for (i, (t, h)) in result.total_loss.iter().zip(&result.l_har).enumerate() {
        csv.push_str(&format!("{i},{t},{h}\n"));
    }
    let traj_path = args.out.join("loss_trajectory.csv");
    std::fs::write(&traj_path, csv).with_context(|| format!("writing {}", traj_path.display()))?;

    let initial = result.l_har[0];
    let final_har = *result.l_har.last().unwrap();
    if json {
        #[derive(Serialize)]
        struct Out {
            steps: usize,
            initial_l_har: f64,
            final_l_har: f64,
            reduction: f64,
        }
        let report = Out {
            steps: args.steps,
            initial_l_har: initial,
            final_l_har: final_har,
            reduction: 1.0 - final_har / initial,
        };
        println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    } else {
        println!(
            "harmonization loss {initial:.5} -> {final_har:.5} over {} steps ({:.1}% reduction)",
            args.steps,
            100.0 * (1.0 - final_har / initial)
        );
    }
    Ok(0)
}
