//! `softmine`: fit 2D neural fields with soft-mined batches.

mod bench;
mod config;
mod fit;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use softmine::field::FieldParams;
use softmine::sampler::{stationarity_check, Boundary, StationarityConfig, SyntheticTarget};
use softmine::trainer::{evaluate_full, iterations_to_target};
use softmine::ImageField;

use config::{
    config_error, parse_override, read_document, ConfigError, Document, ExperimentConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "softmine",
    version,
    about = "Fit 2D neural fields with soft-mined batches"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// key = value configuration file (a plan with [variant] sections for bench)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Concurrent runs for bench
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Write the render and error heatmap at every evaluation
    #[arg(long, global = true)]
    dump_images: bool,
    /// Extra configuration entry, applied after the file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one field and write its log, checkpoint and render
    Fit,
    /// Run every variant of a plan over several seeds and summarize
    Bench,
    /// Check that the Langevin walk samples a synthetic target
    LmcCheck(LmcCheckArgs),
    /// Render a checkpoint to an image
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct LmcCheckArgs {
    /// gaussian-mixture, uniform or step
    #[arg(long, default_value = "gaussian-mixture")]
    target: String,
    /// Steps per walker, burn-in included
    #[arg(long, default_value_t = 200_000)]
    steps: u64,
    #[arg(long, default_value_t = 20_000)]
    burn_in: u64,
    #[arg(long, default_value_t = 1024)]
    walkers: usize,
    /// Histogram bins per side
    #[arg(long, default_value_t = 16)]
    bins: usize,
    /// Drift step size
    #[arg(long, default_value_t = 1e-4)]
    a: f64,
    /// Noise scale; defaults to sqrt(2a)
    #[arg(long)]
    b: Option<f64>,
    /// stay or redraw
    #[arg(long, default_value = "stay")]
    boundary: String,
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    /// Output image file
    #[arg(long, short)]
    output: PathBuf,
    /// Ground truth; sets the size and reports PSNR
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit => cmd_fit(&cli.common),
        Command::Bench => cmd_bench(&cli.common),
        Command::LmcCheck(args) => cmd_lmc_check(&cli.common, args),
        Command::Render(args) => cmd_render(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for anything the user can fix in the inputs, 3 for divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<softmine::Error>() {
            return match e {
                softmine::Error::Diverged(_) => 3,
                softmine::Error::InvalidConfig(_)
                | softmine::Error::Checkpoint(_)
                | softmine::Error::Decode { .. }
                | softmine::Error::UnsupportedChannels(_)
                | softmine::Error::DimensionMismatch(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Defaults, then the file, then `--set`, then the dedicated flags.
fn resolve(common: &Common, doc: &Document) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply(&doc.top, "config")?;
    apply_flags(common, &mut cfg)?;
    Ok(cfg)
}

fn apply_flags(common: &Common, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
    for s in &common.set {
        let e = parse_override(s)?;
        cfg.set(&e.key, &e.value)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.dump_images {
        cfg.dump_images = true;
    }
    Ok(())
}

fn load_doc(common: &Common) -> anyhow::Result<Document> {
    match &common.config {
        Some(path) => read_document(path),
        None => Ok(Document::default()),
    }
}

fn cmd_fit(common: &Common) -> anyhow::Result<ExitCode> {
    let doc = load_doc(common)?;
    if let Some((name, _)) = doc.sections.first() {
        return Err(config_error(format!(
            "fit takes a single configuration, found section [{name}]"
        )));
    }
    let cfg = resolve(common, &doc)?;
    cfg.validate()?;
    let img = fit::load_image(&cfg)?;
    let result = fit::run_fit(&cfg, &img)?;
    println!(
        "final PSNR {:.3} dB after {} iterations",
        result.final_psnr(),
        cfg.train.iterations
    );
    match cfg.train.target_psnr {
        Some(t) => match iterations_to_target(&result.records, t) {
            Some(it) => println!("reached {t} dB at iteration {it}"),
            None => println!("did not reach {t} dB"),
        },
        None => println!("no target PSNR configured"),
    }
    println!("artifacts in {}", cfg.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(common: &Common) -> anyhow::Result<ExitCode> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| config_error("bench needs --config pointing at a plan file"))?;
    let doc = read_document(path)?;
    let mut base = ExperimentConfig {
        out: PathBuf::from("runs/bench"),
        ..ExperimentConfig::default()
    };
    if let Some(out) = &common.out {
        base.out = out.clone();
    }
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(parse_override(&format!("seed={seed}"))?);
    }
    if common.dump_images {
        overrides.push(parse_override("dump_images=true")?);
    }
    let plan = bench::build_plan(&doc, &overrides, &base)?;
    let outcomes = bench::run_plan(&plan, common.jobs)?;
    let (target, rows) = bench::summarize(&plan, &outcomes);
    let csv = bench::summary_csv(&plan, &rows);
    fs::create_dir_all(&base.out).with_context(|| format!("creating {}", base.out.display()))?;
    let summary = base.out.join("summary.csv");
    fs::write(&summary, &csv).with_context(|| format!("writing {}", summary.display()))?;
    match target {
        Some(t) => println!("target PSNR {t:.4} dB"),
        None => println!("no baseline variant; speedups left empty"),
    }
    print!("{csv}");
    let failed: usize = rows.iter().map(|r| r.failed).sum();
    if failed > 0 {
        eprintln!("{failed} run(s) failed");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_lmc_check(common: &Common, args: &LmcCheckArgs) -> anyhow::Result<ExitCode> {
    let target: SyntheticTarget = args
        .target
        .parse()
        .map_err(|e| config_error(format!("{e}")))?;
    let boundary: Boundary = args
        .boundary
        .parse()
        .map_err(|e| config_error(format!("{e}")))?;
    let cfg = StationarityConfig {
        target,
        a: args.a,
        b: args.b.unwrap_or((2.0 * args.a).sqrt()),
        walkers: args.walkers,
        steps: args.steps,
        burn_in: args.burn_in,
        bins: args.bins,
        boundary,
        seed: common.seed.unwrap_or(0),
    };
    let report = stationarity_check(&cfg)?;
    let pass = report.tv < args.threshold;
    println!(
        "target {} walkers {} steps {} bins {}: TV distance {:.5} ({} threshold {})",
        target.as_str(),
        cfg.walkers,
        cfg.steps,
        cfg.bins,
        report.tv,
        if pass {
            "PASS, below"
        } else {
            "FAIL, not below"
        },
        args.threshold
    );
    if let Some(out) = &common.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut csv = String::from("bin_u,bin_v,empirical,expected\n");
        for (i, (e, x)) in report.empirical.iter().zip(&report.expected).enumerate() {
            csv.push_str(&format!(
                "{},{},{e:.9},{x:.9}\n",
                i % cfg.bins,
                i / cfg.bins
            ));
        }
        let path = out.join("histogram.csv");
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_render(args: &RenderArgs) -> anyhow::Result<ExitCode> {
    let params = FieldParams::<f32>::load(&args.checkpoint)?;
    let c = params.layout().out_channels;
    let reference = args
        .reference
        .as_ref()
        .map(|p| ImageField::load(p).map_err(|e| config_error(format!("reference: {e}"))))
        .transpose()?;
    let (width, height) = match (&reference, args.width, args.height) {
        (Some(r), None, None) => (r.width(), r.height()),
        (Some(r), Some(w), Some(h)) if (w, h) == (r.width(), r.height()) => (w, h),
        (Some(_), _, _) => {
            return Err(config_error(
                "--width/--height disagree with the reference image",
            ))
        }
        (None, Some(w), Some(h)) if w > 0 && h > 0 => (w, h),
        (None, _, _) => {
            return Err(config_error(
                "render needs --reference or a positive --width and --height",
            ))
        }
    };
    let render = match &reference {
        Some(r) => {
            let eval = evaluate_full(&params, r)?;
            println!("PSNR {:.6} dB", eval.psnr_db);
            eval.render
        }
        None => {
            let blank = ImageField::new(width, height, c, vec![0.0; width * height * c])?;
            let pred = params.predict(&blank.pixel_centers())?;
            ImageField::new(
                width,
                height,
                c,
                pred.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            )?
        }
    };
    render.save(&args.output)?;
    println!(
        "wrote {}x{} render to {}",
        width,
        height,
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}
