use clap::{Args, Parser, Subcommand};
use discopatch::checkpoint::load_model;
use discopatch::codec::load_image;
use discopatch::commands::*;
use discopatch::config::RunConfig;
use discopatch::dataset::{load_dir, standardize};
use discopatch::{Error, Result};
use discopatch_core::eval::{score_image, BiasMode, ScoreOptions};
use discopatch_core::patching::CropMode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "discopatch", version, about = "Patch-statistics adversarial VAE for out-of-distribution detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a folder of images.
    Train(TrainArgs),
    /// Print the anomaly score of one image.
    Score(ScoreArgs),
    /// AUROC and FPR95 of an ID folder against OOD folders.
    Eval(EvalArgs),
    /// Score whole images in batches with learned or batch statistics.
    BatchBias(BiasArgs),
    /// Write corrupted copies of a folder.
    Corrupt(CorruptArgs),
    /// Time single-image scoring.
    Bench(BenchArgs),
    /// Write mean discriminator features per image as CSV.
    ExportFeatures(FeatureArgs),
    /// Generate the procedural image family.
    Synth(SynthArgs),
    /// Print a preset configuration.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_images: Option<usize>,
    #[arg(long)]
    patches_per_image: Option<usize>,
}

/// Patch sampling shared by the scoring commands.
#[derive(Args)]
struct PatchArgs {
    /// Patches per image (defaults to the checkpoint's eval setting).
    #[arg(long)]
    patches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid tiles instead of random crops.
    #[arg(long)]
    tiled: bool,
}

impl PatchArgs {
    fn options(&self, cfg: &RunConfig) -> Result<ScoreOptions> {
        let mut o = cfg.score_options()?;
        if let Some(n) = self.patches {
            if n == 0 {
                return Err(Error::Usage("--patches must be positive".into()));
            }
            o.n_patches = n;
        }
        if let Some(s) = self.seed {
            o.seed = s;
        }
        if self.tiled {
            o.crop = CropMode::Tiled;
        }
        Ok(o)
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    patches: PatchArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    id: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    ood: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    patches: PatchArgs,
}

#[derive(Args)]
struct BiasArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    id: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    ood: Vec<PathBuf>,
    #[arg(long, default_value = "1,16,32,64,128,256")]
    batch_sizes: String,
    /// `learned`, `batch` or both, comma separated.
    #[arg(long, default_value = "learned,batch")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated corruption names, or `all`.
    #[arg(long, default_value = "all")]
    kinds: String,
    /// `1-5`, `3` or `1,3,5`.
    #[arg(long, default_value = "1-5")]
    severities: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images are standardized to this size first.
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Image to score; a synthetic one when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    patches: PatchArgs,
}

#[derive(Args)]
struct FeatureArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    patches: PatchArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&a.preset)?,
    };
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.seed = a.seed.unwrap_or(t.seed);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_images = a.batch_images.unwrap_or(t.batch_images);
    t.patches_per_image = a.patches_per_image.unwrap_or(t.patches_per_image);
    cfg.validate()?;
    let ds = load_dir(&a.data, cfg.train.image_size)?;
    eprintln!("training on {} images ({} skipped)", ds.len(), ds.skipped.len());
    fit(&cfg, &ds.images, Some(&a.out), |r| {
        eprintln!(
            "epoch {:>3}  step {:>7}  l_dcp {:.4}  l_d {:.4}  d_real {:.3}  d_fake {:.3}",
            r.epoch + 1,
            r.step,
            r.l_dcp,
            r.l_d,
            r.d_real,
            r.d_fake
        )
    })?;
    println!("{}", a.out.join(MODEL_FILE).display());
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let img = standardize(load_image(&a.image)?, cfg.train.image_size)?;
    let key = dir_label(&a.image);
    println!("{:.6}", score_image(&model, &img, &key, &a.patches.options(&cfg)?)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let size = cfg.train.image_size;
    let id = load_dir(&a.id, size)?;
    let rows = eval_sets(&model, &a.patches.options(&cfg)?, &id, &load_sets(&a.ood, size)?)?;
    print!("{}", eval_table(&rows));
    if let Some(p) = &a.csv {
        write_eval_csv(p, &rows)?;
    }
    Ok(())
}

fn batch_bias(a: BiasArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let size = cfg.train.image_size;
    let modes = a.mode.split(',').map(|m| Ok(m.trim().parse::<BiasMode>()?)).collect::<Result<Vec<_>>>()?;
    let sizes = parse_usize_list(&a.batch_sizes, "batch size")?;
    let rows = bias_grid(&model, &load_dir(&a.id, size)?, &load_sets(&a.ood, size)?, &sizes, &modes, a.seed)?;
    print!("{}", bias_table(&rows));
    if rows.iter().any(|r| r.truncated) {
        println!("* batch size larger than the set; scored as a single batch");
    }
    if let Some(p) = &a.csv {
        write_bias_csv(p, &rows)?;
    }
    Ok(())
}

fn corrupt(a: CorruptArgs) -> Result<()> {
    let ds = load_dir(&a.input, a.size)?;
    let rows = corrupt_dir(&ds, &a.out, &parse_kinds(&a.kinds)?, &parse_severities(&a.severities)?, a.seed)?;
    println!("wrote {} images to {}", rows.len(), a.out.display());
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let size = cfg.train.image_size;
    let img = match &a.image {
        Some(p) => standardize(load_image(p)?, size)?,
        None => standardize(discopatch::synth::synth_images(1, 0).remove(0), size)?,
    };
    let stats = bench(&model, &img, a.runs, a.warmup, &a.patches.options(&cfg)?)?;
    println!("{}", bench_report(&stats));
    Ok(())
}

fn features(a: FeatureArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let ds = load_dir(&a.data, cfg.train.image_size)?;
    let width = export_features(&model, &ds, &a.patches.options(&cfg)?, &a.out)?;
    println!("wrote {} rows of {} features to {}", ds.len(), width, a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let rows = discopatch::synth::synth_dataset(&a.out, a.n, a.seed)?;
    println!("wrote {} images to {}", rows.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::BatchBias(a) => batch_bias(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Bench(a) => bench_cmd(a),
        Command::ExportFeatures(a) => features(a),
        Command::Synth(a) => synth(a),
        Command::Config { preset } => {
            print!("{}", RunConfig::preset(&preset)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
