use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylebank::analysis::{default_channel_threshold, reconstruct_style_element, sparsity_stats};
use stylebank::checkpoint::{extractor_from_container, model_from_container, model_to_container};
use stylebank::loss::DEFAULT_EXTRACTOR_SEED;
use stylebank::{
    add_style_incremental, autoencoder_digest, image_io, reduce_labels, Container, Dataset, Error, FeatureExtractor,
    ImageBuffer, LossWeights, LrSchedule, ModelConfig, Result, StyleBankModel, Tensor, TrainConfig, Trainer,
};

use crate::pipeline;
use crate::service::{self, AppState};

#[derive(Parser, Debug)]
#[command(name = "stylebank", version, about = "Style transfer with explicit per-style filter banks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a new model on content images and a set of styles.
    Train(TrainArgs),
    /// Add one style to a trained model, keeping the encoder and decoder fixed.
    AddStyle(AddStyleArgs),
    /// Stylize an image with one style.
    Stylize(StylizeArgs),
    /// Stylize with a weighted blend of styles.
    Fuse(FuseArgs),
    /// Cluster encoder features into a label map.
    Segment(SegmentArgs),
    /// Feature statistics and style-element visualisation.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct ModelArg {
    /// Model checkpoint.
    #[arg(long, env = "STYLEBANK_MODEL")]
    pub model: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    /// Content images: PNG files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    pub content: Vec<PathBuf>,
    /// Iterations to run.
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Square crop size; must be a multiple of 8.
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.8)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 30_000)]
    pub lr_interval: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 50.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub gamma: f64,
    /// Long side style images are resized to.
    #[arg(long, default_value_t = 128)]
    pub style_size: usize,
    /// Write per-iteration metrics CSV here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Directory for the state dump written if training hits a NaN.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
    /// Save an intermediate checkpoint every N iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    /// `name=path.png`, repeatable.
    #[arg(long = "style", required = true, value_parser = parse_style)]
    pub styles: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub out: PathBuf,
    /// Stylizing steps per auto-encoder step.
    #[arg(long = "t", default_value_t = 2)]
    pub stylizing_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 32)]
    pub c_max: usize,
    #[arg(long, default_value_t = 3)]
    pub bank_kernel: usize,
    /// Checkpoint holding `extractor/...` weights to use instead of the built-in random stack.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AddStyleArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Name of the new style.
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub style_image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StylizeArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub style: String,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// `name=weight,...`; normalized to sum 1.
    #[arg(long, required = true, value_delimiter = ',', value_parser = pipeline::parse_weight)]
    pub weights: Vec<(String, f32)>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 8-bit label map PNG at image resolution.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Per-channel mean nonzero encoder response over a set of images, as CSV.
    Sparsity {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, required = true, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode what one style's bank makes of a masked region of an image.
    Element {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        style: String,
        /// Gray PNG at image resolution; nonzero pixels select the region.
        #[arg(long)]
        mask: PathBuf,
        /// Channel cut-off; defaults to 1e-3 of the strongest in-mask channel.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, default_value_t = service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Largest accepted image side.
    #[arg(long, default_value_t = service::DEFAULT_MAX_SIDE)]
    pub max_side: usize,
}

fn parse_style(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got `{s}`"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn load_image(path: &Path) -> Result<ImageBuffer> {
    ImageBuffer::load(path)
}

/// PNG files named directly or found (non-recursively, sorted) in directories.
fn collect_images(paths: &[PathBuf]) -> Result<Vec<Tensor<f32>>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::invalid("content", "no PNG images found"));
    }
    files.iter().map(|f| load_image(f).map(|i| i.to_tensor())).collect()
}

fn train_config(t: &TrainingArgs, stylizing_steps: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        stylizing_steps,
        lambda,
        batch_size: t.batch,
        iterations: t.iters,
        schedule: LrSchedule {
            initial: t.lr,
            decay: t.lr_decay,
            interval: t.lr_interval,
        },
        crop: t.crop,
        seed: t.seed,
        weights: LossWeights {
            alpha: t.alpha,
            beta: t.beta,
            gamma: t.gamma,
        },
        style_long_side: t.style_size,
        dump_dir: t.dump_dir.clone(),
        ..TrainConfig::default()
    }
}

fn save(path: &Path, model: &StyleBankModel, extractor: Option<&FeatureExtractor>) -> Result<()> {
    model_to_container(model, extractor)?.write(path)
}

/// Runs the trainer, streaming metrics and writing periodic checkpoints.
fn drive(trainer: &mut Trainer<'_>, t: &TrainingArgs, out: &Path, extractor: Option<&FeatureExtractor>) -> Result<()> {
    if let Some(m) = &t.metrics {
        trainer.log_to(m)?;
    }
    for _ in 0..t.iters {
        let row = trainer.step()?;
        if row.iter % 50 == 0 || row.iter == 1 {
            log::info!("iter {} {:?} total {:.6}", row.iter, row.branch, row.total);
        }
        if let Some(every) = t.checkpoint_every.filter(|&e| e > 0) {
            if trainer.iteration() % every == 0 {
                save(out, &trainer.model, extractor)?;
            }
        }
    }
    save(out, &trainer.model, extractor)
}

fn load_model(path: &Path) -> Result<(StyleBankModel, Option<FeatureExtractor>)> {
    let c = Container::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((model_from_container(&c)?, extractor_from_container(&c)?))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let config = train_config(&a.training, a.stylizing_steps, a.lambda);
            let custom = match &a.extractor {
                Some(p) => Some(
                    extractor_from_container(&Container::read(p)?)?
                        .ok_or_else(|| Error::Checkpoint(format!("{} has no extractor entries", p.display())))?,
                ),
                None => None,
            };
            let default_extractor = FeatureExtractor::random(DEFAULT_EXTRACTOR_SEED);
            let extractor = custom.as_ref().unwrap_or(&default_extractor);
            let dataset = Dataset::new(collect_images(&a.training.content)?)?;
            let styles = a
                .styles
                .iter()
                .map(|(n, p)| Ok((n.clone(), load_image(p)?.to_tensor())))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let model_config = ModelConfig {
                c_max: a.c_max,
                bank_kernel: a.bank_kernel,
            };
            let model = StyleBankModel::new(model_config, &mut rng)?;
            let mut trainer = Trainer::new(model, extractor, dataset, &styles, config)?;
            drive(&mut trainer, &a.training, &a.out, custom.as_ref())?;
            println!("wrote {}", a.out.display());
        }
        Command::AddStyle(a) => {
            let (model, custom) = load_model(&a.model.model)?;
            let default_extractor = FeatureExtractor::random(DEFAULT_EXTRACTOR_SEED);
            let extractor = custom.as_ref().unwrap_or(&default_extractor);
            let before = autoencoder_digest(&model);
            let dataset = Dataset::new(collect_images(&a.training.content)?)?;
            let style = load_image(&a.style_image)?.to_tensor();
            let config = train_config(&a.training, 1, 1.0);
            let mut trainer = add_style_incremental(model, extractor, dataset, &a.name, &style, config)?;
            drive(&mut trainer, &a.training, &a.out, custom.as_ref())?;
            let after = autoencoder_digest(&trainer.model);
            println!("encoder/decoder sha256 {before} -> {after}");
            println!("wrote {}", a.out.display());
        }
        Command::Stylize(a) => {
            let (model, _) = load_model(&a.model.model)?;
            let out = pipeline::stylize(&model, &load_image(&a.input)?, &a.style)?;
            out.save(&a.out)?;
        }
        Command::Fuse(a) => {
            let (model, _) = load_model(&a.model.model)?;
            let (out, normalized) = pipeline::fuse(&model, &load_image(&a.input)?, &a.weights)?;
            let shown: Vec<String> = normalized.iter().map(|(n, w)| format!("{n}={w}")).collect();
            println!("weights {}", shown.join(","));
            out.save(&a.out)?;
        }
        Command::Segment(a) => {
            let (model, _) = load_model(&a.model.model)?;
            let seg = pipeline::segment(&model, &load_image(&a.input)?, a.k, a.seed)?;
            std::fs::write(&a.out, image_io::encode_labels(&seg.labels, seg.width, seg.height)?)?;
        }
        Command::Analyze(AnalyzeCommand::Sparsity { model, images, out }) => {
            let (model, _) = load_model(&model.model)?;
            let images = collect_images(&images)?;
            let report = sparsity_stats(&model, &images)?;
            std::fs::write(&out, report.to_csv())?;
        }
        Command::Analyze(AnalyzeCommand::Element {
            model,
            input,
            style,
            mask,
            threshold,
            out,
        }) => {
            let (model, _) = load_model(&model.model)?;
            let img = load_image(&input)?;
            let (h, w) = (img.height(), img.width());
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::invalid("analyze element", format!("image {w}x{h} must have sides divisible by 4")));
            }
            let (labels, mw, mh) = image_io::decode_labels(&std::fs::read(&mask)?)?;
            if (mw, mh) != (w, h) {
                return Err(Error::Mask(format!("mask is {mw}x{mh}, image is {w}x{h}")));
            }
            let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l != 0)).collect();
            let (reduced, fh, fw) = reduce_labels(&binary, h, w)?;
            let mask = Tensor::new([1, 1, fh, fw], reduced.iter().map(|&l| l as f32).collect())?;
            let features = model.encode(&img.to_tensor())?;
            let threshold = match threshold {
                Some(t) => t,
                None => default_channel_threshold(&features, &mask)?,
            };
            let decoded = reconstruct_style_element(&model, &features, &style, &mask, threshold)?;
            ImageBuffer::from_tensor(&decoded)?.save(&out)?;
        }
        Command::Serve(a) => {
            let (model, _) = load_model(&a.model.model)?;
            let state = AppState::new(model, a.max_side);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(state, &a.host, a.port))?;
        }
    }
    Ok(())
}
