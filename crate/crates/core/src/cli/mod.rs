//! The `mcdenoise` command line: phantom, train, denoise, eval, analyze and
//! bench. Every command writes only below `--out` and leaves a
//! `run_manifest.txt` there.

mod manifest;
pub mod pgm;

pub use manifest::{RunManifest, MANIFEST_NAME};

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{ensure, Error, Result};
use crate::kv::{format_extents, parse_extents};
use crate::metrics::{evaluate, MetricsTable};
use crate::model::{build, load_checkpoint, save_checkpoint, ModelKind, Network, ScaledConfig};
use crate::perf::{bench_csv, bench_modules, count_flops, module_flops, BenchConfig};
use crate::phantom::{generate_dataset, load_dataset, read_volume, write_volume, DatasetConfig, DoseVolume};
use crate::train::{denoise, train, TrainConfig};

const FORMATS: &str = "\
File formats (little-endian):
  DVOL  dose volume: \"DVOL\" u32 version=1, u32 H W D, f32 voxel size x3 (mm),
        u64 histories (0 = clean), u64 seed, then H*W*D f32 doses in Gy, depth fastest
  DMSK  structure mask: same header with magic \"DMSK\", values are 0.0 or 1.0
  DDPK  checkpoint: \"DDPK\" u32 version=1, u64 seed, u32 model tag, u32 base_features,
        u32 num_down, then per parameter tensor u32 id, u64 count, f64 values
  *.txt key=value lines, '#' comments
  *.pgm 8-bit binary greyscale, dose window [0, 80] Gy, difference window [-8, 8] Gy";

#[derive(Debug, Parser)]
#[command(name = "mcdenoise", version, about = "Monte Carlo dose denoising toolkit", after_help = FORMATS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with noisy realizations.
    #[command(after_help = "Writes out/case_NNN/{clean.dvol, noisy_XX.dvol, ptv.dmsk, body.dmsk, manifest.txt}.\n\n".to_string() + FORMATS)]
    Phantom(PhantomArgs),
    /// Train a denoiser on noise-to-noise pairs.
    #[command(after_help = "Writes out/model.ddpk, out/loss.csv (step,loss; mean over the last 50 steps) and out/train_config.txt.\n\n".to_string() + FORMATS)]
    Train(TrainArgs),
    /// Denoise one DVOL volume with a checkpoint.
    #[command(after_help = "Writes out/denoised.dvol and, with --slices, middle-slice PGMs.\n\n".to_string() + FORMATS)]
    Denoise(DenoiseArgs),
    /// Evaluate noisy (and denoised) volumes of a dataset against the clean maps.
    #[command(after_help = "Writes out/metrics.csv (one row per case, realization and label) and out/summary.txt (mean and std per label).\n\n".to_string() + FORMATS)]
    Eval(EvalArgs),
    /// Per-layer FLOPs and parameter counts of a network.
    #[command(after_help = "Writes out/flops.csv (layer,kind,input,output,flops,cumulative_flops,params) and out/flops.txt.")]
    Analyze(AnalyzeArgs),
    /// Time a regular 3x3x3 module against an axial+slice module.
    #[command(after_help = "Writes out/bench.csv (module,median_ms,iqr_ms,repeats,workers).")]
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of cases.
    #[arg(long, default_value_t = 8)]
    pub cases: usize,
    /// Noisy realizations per case.
    #[arg(long, default_value_t = 2)]
    pub pairs: usize,
    /// Simulated histories of every noisy realization.
    #[arg(long, default_value_t = 1_000_000)]
    pub histories: u64,
    /// Grid extents HxWxD.
    #[arg(long, default_value = "32x32x16", value_parser = extents_arg)]
    pub extents: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `phantom`.
    #[arg(long)]
    pub data: PathBuf,
    /// key=value training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Leave the last N cases out of training.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// proposed or unet.
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub base_features: Option<usize>,
    #[arg(long)]
    pub num_down: Option<usize>,
    /// Crop extents HxWxD.
    #[arg(long, value_parser = extents_arg)]
    pub crop: Option<[usize; 3]>,
    /// Maximum zero padding per side.
    #[arg(long)]
    pub pad: Option<usize>,
    /// Dose in Gy that maps to 1.0 at the network input.
    #[arg(long)]
    pub normalization_dose: Option<f64>,
    /// Never swap input and target.
    #[arg(long)]
    pub no_swap: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Noisy DVOL volume.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 80.0)]
    pub normalization_dose: f64,
    /// Also export middle slices of input, output and their difference.
    #[arg(long)]
    pub slices: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory written by `phantom`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint; without it only the noisy volumes are scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score only the last N cases (0 = all).
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    /// Noisy realizations per case to score (default: all).
    #[arg(long)]
    pub realizations: Option<usize>,
    #[arg(long, default_value_t = 80.0)]
    pub normalization_dose: f64,
    /// Export middle slices of the first scored case and realization.
    #[arg(long)]
    pub slices: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// proposed or unet.
    #[arg(long, default_value = "proposed")]
    pub model: ModelKind,
    #[arg(long, default_value = "256x256x64", value_parser = extents_arg)]
    pub extents: [usize; 3],
    #[arg(long, default_value_t = 64)]
    pub base_features: usize,
    /// Downsampling modules (default: 5 for proposed, 6 for unet).
    #[arg(long)]
    pub num_down: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value = "32x32x16", value_parser = extents_arg)]
    pub extents: [usize; 3],
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Time stride-2 modules instead of stride-1.
    #[arg(long)]
    pub downsample: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn extents_arg(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_extents(s).map_err(|e| e.to_string())
}

/// 2 for usage errors, 4 for numerical failures, 3 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => 2,
        e if e.is_numeric() => 4,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let (out, mut manifest) = match cli.command {
        Command::Phantom(a) => (a.out.clone(), cmd_phantom(&a)?),
        Command::Train(a) => (a.out.clone(), cmd_train(&a)?),
        Command::Denoise(a) => (a.out.clone(), cmd_denoise(&a)?),
        Command::Eval(a) => (a.out.clone(), cmd_eval(&a)?),
        Command::Analyze(a) => (a.out.clone(), cmd_analyze(&a)?),
        Command::Bench(a) => (a.out.clone(), cmd_bench(&a)?),
    };
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(&out)?;
    Ok(())
}

/// Model configurations whose divisibility contract `extents` satisfy.
pub fn valid_configs(extents: [usize; 3]) -> Vec<(ModelKind, usize)> {
    let mut out = Vec::new();
    for kind in [ModelKind::Proposed, ModelKind::UnetBaseline] {
        for nd in 1..=6 {
            if ScaledConfig::new(8, nd, extents).validate(kind).is_ok() {
                out.push((kind, nd));
            }
        }
    }
    out
}

fn cmd_phantom(a: &PhantomArgs) -> Result<RunManifest> {
    let desk = ScaledConfig { extents: a.extents, ..ScaledConfig::desk() };
    if desk.validate(ModelKind::Proposed).is_err() {
        let valid: Vec<String> = valid_configs(a.extents).iter().map(|(k, nd)| format!("{k} num_down={nd}")).collect();
        eprintln!(
            "warning: extents {} do not fit the default {} with num_down={} (needs multiples of {}); valid: {}",
            format_extents(a.extents),
            ModelKind::Proposed,
            desk.num_down,
            desk.divisor(ModelKind::Proposed),
            if valid.is_empty() { "none".to_string() } else { valid.join(", ") }
        );
    }
    let cfg = DatasetConfig::new(a.extents, a.cases, a.histories, a.pairs, a.seed);
    let cases = generate_dataset(&cfg, Some(&a.out))?;
    let mut m = RunManifest::new("phantom");
    m.seed = Some(a.seed);
    m.config
        .set("cases", a.cases)
        .set("pairs", a.pairs)
        .set("histories", a.histories)
        .set("extents", format_extents(a.extents))
        .set("noise_alpha", cfg.noise.alpha)
        .set("noise_reference_dose", cfg.noise.reference_dose);
    m.outputs = cases.iter().map(|c| a.out.join(format!("case_{:03}", c.id))).collect();
    Ok(m)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::desk(),
    };
    macro_rules! flag {
        ($($f:ident => $field:ident),*) => {$(if let Some(v) = a.$f { cfg.$field = v; })*};
    }
    flag!(iterations => iterations, lr => lr, seed => seed, model => model, base_features => base_features,
        num_down => num_down, crop => crop_extents, pad => pad, normalization_dose => normalization_dose);
    if a.no_swap {
        cfg.swap_input_target = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    let cfg = resolve_train_config(a)?;
    let cases = load_dataset(&a.data)?;
    ensure!(a.holdout < cases.len(), InvalidConfig, "holdout {} leaves no training cases of {}", a.holdout, cases.len());
    let train_cases = &cases[..cases.len() - a.holdout];
    let graph = build(cfg.model, &cfg.scaled())?;
    let mut net = Network::init(graph, cfg.seed);
    let log = train(&mut net, train_cases, &cfg)?;

    std::fs::create_dir_all(&a.out)?;
    let (ckpt, loss, config) = (a.out.join("model.ddpk"), a.out.join("loss.csv"), a.out.join("train_config.txt"));
    save_checkpoint(&net, &ckpt)?;
    log.write_csv(&loss)?;
    cfg.to_kv().write(&config)?;
    let mut m = RunManifest::new("train");
    m.seed = Some(cfg.seed);
    m.config = cfg.to_kv();
    m.config.set("holdout", a.holdout);
    m.inputs = train_cases.iter().map(|c| a.data.join(format!("case_{:03}", c.id))).collect();
    m.outputs = vec![ckpt, loss, config];
    Ok(m)
}

fn cmd_denoise(a: &DenoiseArgs) -> Result<RunManifest> {
    let net = load_checkpoint(&a.checkpoint)?;
    let input = read_volume(&a.input)?;
    let output = denoise(&net, &input, a.normalization_dose)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("denoised.dvol");
    write_volume(&path, &output)?;
    let mut m = RunManifest::new("denoise");
    m.seed = Some(net.seed);
    m.config.set("normalization_dose", a.normalization_dose).set("slices", a.slices);
    m.inputs = vec![a.checkpoint.clone(), a.input.clone()];
    m.outputs.push(path);
    if a.slices {
        m.outputs.extend(export_slices(&a.out.join("slices"), &[("input", &input), ("denoised", &output)], Some((&output, &input)))?);
    }
    Ok(m)
}

fn export_slices(dir: &Path, volumes: &[(&str, &DoseVolume)], diff: Option<(&DoseVolume, &DoseVolume)>) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (name, v) in volumes {
        paths.extend(pgm::write_slices(v, dir, name, pgm::DOSE_WINDOW)?);
    }
    if let Some((x, y)) = diff {
        let d = x.with_values(x.values.iter().zip(&y.values).map(|(a, b)| a - b).collect())?;
        paths.extend(pgm::write_slices(&d, dir, "difference", pgm::DIFF_WINDOW)?);
    }
    Ok(paths)
}

fn cmd_eval(a: &EvalArgs) -> Result<RunManifest> {
    let cases = load_dataset(&a.data)?;
    ensure!(a.holdout <= cases.len(), InvalidConfig, "holdout {} exceeds {} cases", a.holdout, cases.len());
    let scored = if a.holdout == 0 { &cases[..] } else { &cases[cases.len() - a.holdout..] };
    let available = scored.iter().map(|c| c.noisy.len()).min().unwrap_or(0);
    let n_real = a.realizations.unwrap_or(available);
    ensure!(
        n_real >= 1 && n_real <= available,
        Format,
        "{n_real} realizations requested, dataset has {available} per case"
    );
    let net = a.checkpoint.as_ref().map(load_checkpoint).transpose()?;

    let mut table = MetricsTable::default();
    for case in scored {
        for (r, noisy) in case.noisy.iter().take(n_real).enumerate() {
            table.push("noisy", case.id, r, evaluate(noisy, &case.clean, &case.ptv, &case.body)?);
            if let Some(net) = &net {
                let den = denoise(net, noisy, a.normalization_dose)?;
                table.push("denoised", case.id, r, evaluate(&den, &case.clean, &case.ptv, &case.body)?);
            }
        }
    }
    std::fs::create_dir_all(&a.out)?;
    let (csv, summary) = (a.out.join("metrics.csv"), a.out.join("summary.txt"));
    table.write_csv(&csv)?;
    let text = table.summary();
    std::fs::write(&summary, &text)?;
    print!("{text}");

    let mut m = RunManifest::new("eval");
    m.config
        .set("holdout", a.holdout)
        .set("realizations", n_real)
        .set("normalization_dose", a.normalization_dose)
        .set("slices", a.slices);
    m.inputs.push(a.data.clone());
    m.inputs.extend(a.checkpoint.clone());
    m.seed = net.as_ref().map(|n| n.seed);
    m.outputs = vec![csv, summary];
    if a.slices {
        let case = &scored[0];
        let noisy = &case.noisy[0];
        let den = net.as_ref().map(|n| denoise(n, noisy, a.normalization_dose)).transpose()?;
        let mut vols = vec![("clean", &case.clean), ("noisy", noisy)];
        if let Some(d) = &den {
            vols.push(("denoised", d));
        }
        let diff = Some((den.as_ref().unwrap_or(noisy), &case.clean));
        m.outputs.extend(export_slices(&a.out.join("slices"), &vols, diff)?);
    }
    Ok(m)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<RunManifest> {
    let nd = a.num_down.unwrap_or(match a.model {
        ModelKind::Proposed => 5,
        ModelKind::UnetBaseline => 6,
    });
    let cfg = ScaledConfig::new(a.base_features, nd, a.extents);
    let graph = build(a.model, &cfg)?;
    let report = count_flops(&graph, a.extents)?;
    std::fs::create_dir_all(&a.out)?;
    let (csv, txt) = (a.out.join("flops.csv"), a.out.join("flops.txt"));
    std::fs::write(&csv, report.to_csv())?;
    let table = report.to_table();
    std::fs::write(&txt, &table)?;
    print!("{table}");
    let mut m = RunManifest::new("analyze");
    m.config
        .set("model", a.model)
        .set("extents", format_extents(a.extents))
        .set("base_features", a.base_features)
        .set("num_down", nd);
    m.outputs = vec![csv, txt];
    Ok(m)
}

fn cmd_bench(a: &BenchArgs) -> Result<RunManifest> {
    let cfg = BenchConfig {
        channels: a.channels,
        extents: a.extents,
        repeats: a.repeats,
        warmup: a.warmup,
        workers: a.workers,
        downsample: a.downsample,
        seed: a.seed,
    };
    let rows = bench_modules(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("bench.csv");
    let csv = bench_csv(&rows);
    std::fs::write(&path, &csv)?;
    let (regular, decoupled) = module_flops(a.channels, a.extents, a.downsample);
    print!("{csv}");
    println!("analytic FLOPs decoupled/regular = {decoupled}/{regular} = {:.4}", decoupled as f64 / regular as f64);
    let mut m = RunManifest::new("bench");
    m.seed = Some(a.seed);
    m.config
        .set("channels", a.channels)
        .set("extents", format_extents(a.extents))
        .set("repeats", a.repeats)
        .set("warmup", a.warmup)
        .set("workers", a.workers)
        .set("downsample", a.downsample);
    m.outputs.push(path);
    Ok(m)
}
