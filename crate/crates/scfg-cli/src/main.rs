//! `scfg` — run guided sampling, segment dumped attention stacks offline, and
//! compare guidance modes over paired seeds.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand};

use scfg_core::container::{to_f32, write_container, ContainerMeta};
use scfg_core::export::{write_compare_csv, write_scale_map_csv, write_trajectory_csv};
use scfg_core::guidance::GuidanceMode;
use scfg_core::manifest::{build_manifest, write_manifest};
use scfg_core::offline::segment_dump;
use scfg_core::pipeline::{compare_cfg_scfg, run_sampling, RunConfig};
use scfg_core::segmentation::BenchmarkMode;

#[derive(Parser)]
#[command(
    name = "scfg",
    about = "Guided diffusion sampling with per-region adaptive guidance scales",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sampling trajectory and write the sample, trajectory table,
    /// scale map, and manifest.
    Sample(SampleArgs),
    /// Segment a directory of dumped attention containers for one step.
    Segment(SegmentArgs),
    /// Run paired cfg/scfg trajectories over consecutive seeds and write the
    /// per-step dispersion table.
    Compare(CompareArgs),
}

fn parse_mode(s: &str) -> Result<GuidanceMode, String> {
    match s {
        "cfg" => Ok(GuidanceMode::Cfg),
        "scfg" => Ok(GuidanceMode::Scfg),
        other => Err(format!("unknown mode {other:?}, expected cfg or scfg")),
    }
}

fn parse_benchmark(s: &str) -> Result<BenchmarkMode, String> {
    match s {
        "foreground" => Ok(BenchmarkMode::Foreground),
        "mean" => Ok(BenchmarkMode::Mean),
        other => Err(format!(
            "unknown benchmark {other:?}, expected foreground or mean"
        )),
    }
}

fn parse_gamma(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("gamma must be > 0, got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|_| format!("{s:?} is not an integer"))?;
    if v >= 1 {
        Ok(v)
    } else {
        Err("value must be >= 1".to_string())
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Guidance mode; repeatable, the last occurrence wins.
    #[arg(long, value_parser = parse_mode, action = ArgAction::Append)]
    mode: Vec<GuidanceMode>,
    /// Global guidance scale.
    #[arg(long, value_parser = parse_gamma)]
    gamma: Option<f64>,
    /// DDIM step count.
    #[arg(long, value_parser = parse_positive)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Benchmark region: foreground or mean.
    #[arg(long, value_parser = parse_benchmark)]
    benchmark: Option<BenchmarkMode>,
    /// Self-attention propagation steps for segmentation.
    #[arg(long = "R", value_parser = parse_positive, default_value = "4")]
    propagation_steps: usize,
    /// Run-config JSON; defaults to the built-in desk-scale scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SegmentArgs {
    /// Directory holding layer<k>_<self|cross>_<cond|uncond>.bin containers.
    #[arg(long)]
    attn: PathBuf,
    /// Self-attention propagation steps.
    #[arg(long = "R", value_parser = parse_positive, default_value = "4")]
    propagation_steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Run-config JSON; defaults to the built-in desk-scale scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of paired seeds.
    #[arg(long, value_parser = parse_positive)]
    seeds: usize,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::standard_toy()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            let config: RunConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            Ok(config)
        }
    }
}

fn run_sample(args: SampleArgs) -> anyhow::Result<()> {
    let mut config = load_config(&args.config)?;
    if args.mode.len() > 1 {
        log::warn!("--mode given {} times; the last occurrence wins", args.mode.len());
    }
    if let Some(mode) = args.mode.last() {
        config.guidance.mode = *mode;
    }
    if let Some(gamma) = args.gamma {
        config.guidance.gamma = gamma;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(benchmark) = args.benchmark {
        config.guidance.benchmark_mode = benchmark;
    }
    config.guidance.propagation_steps = args.propagation_steps;
    config.out_dir = Some(args.out.clone());

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let artifacts = run_sampling(&config)?;

    let sample_path = args.out.join("sample.bin");
    let meta = ContainerMeta::new()
        .set("kind", "sample")
        .set("step", artifacts.sample.step)
        .set("seed", config.seed);
    write_container(&sample_path, &to_f32(&artifacts.sample.data), &meta, args.force)?;

    let trajectory_path = args.out.join("trajectory.csv");
    write_trajectory_csv(&trajectory_path, &artifacts.log, args.force)?;

    let scales_path = args.out.join("scale_map.csv");
    let (h, w, _) = config.latent_dim();
    write_scale_map_csv(&scales_path, &artifacts.final_scales, (h, w), args.force)?;

    let manifest = build_manifest(
        &config,
        &args.out,
        &[sample_path, trajectory_path, scales_path],
    )?;
    write_manifest(&args.out.join("run_manifest.json"), &manifest, args.force)?;
    println!(
        "wrote sample.bin, trajectory.csv, scale_map.csv, run_manifest.json to {}",
        args.out.display()
    );
    Ok(())
}

fn run_segment(args: SegmentArgs) -> anyhow::Result<()> {
    let result = segment_dump(&args.attn, args.propagation_steps, &args.out, args.force)?;
    println!(
        "segmented {} tokens at {}x{}; wrote {} files to {}",
        result.masks.token_count(),
        result.masks.resolution.0,
        result.masks.resolution.1,
        result.files.len(),
        args.out.display()
    );
    Ok(())
}

fn run_compare(args: CompareArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let summary = compare_cfg_scfg(&config, args.seeds)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("compare.csv");
    write_compare_csv(&path, &summary, args.force)?;
    println!(
        "mean CV cfg {:.6}  mean CV scfg {:.6}  fraction scfg lower {:.3}",
        summary.mean_cv_cfg, summary.mean_cv_scfg, summary.fraction_scfg_lower
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn ensure_out_is_not_a_file(path: &Path) -> anyhow::Result<()> {
    if path.exists() && !path.is_dir() {
        bail!("output path {} exists and is not a directory", path.display());
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sample(args) => {
            ensure_out_is_not_a_file(&args.out).and_then(|()| run_sample(args))
        }
        Command::Segment(args) => {
            ensure_out_is_not_a_file(&args.out).and_then(|()| run_segment(args))
        }
        Command::Compare(args) => {
            ensure_out_is_not_a_file(&args.out).and_then(|()| run_compare(args))
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
