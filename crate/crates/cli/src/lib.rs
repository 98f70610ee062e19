//! The `camclass` command line: split, train, eval, explain, featmaps and a
//! synthetic-corpus generator, driven by a TOML run config.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use camclass::dataset::{
    load_image, load_rgb, read_manifest, scan_dataset, stratified_split, write_count_table, write_manifest,
    Normalization, Split,
};
use camclass::evaluator::{confusion_matrix, per_class_metrics, write_report};
use camclass::explain::{
    cam_image, explain, feature_grid, overlay, upsample_cam, write_raw_csv, write_rgb_png, CamMethod,
};
use camclass::model::{load_checkpoint, BlockConfig, HeadConfig, HeadKind, Model, ModelConfig};
use camclass::synth::generate_shapes;
use camclass::trainer::{argmax_rows, predict_set, topk_accuracy, train, Hyperparams, LabeledSet, TrainOptions, TOP_K};
use camclass::Tensor;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

pub const OUTPUT_DIR_ENV: &str = "CAMCLASS_OUTPUT_DIR";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const COUNTS_FILE: &str = "split_counts.csv";
pub const MODEL_FILE: &str = "model.ckpt";

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub const USAGE: i32 = 1;
    pub const RUNTIME: i32 = 2;

    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<camclass::Error> for CliError {
    fn from(e: camclass::Error) -> Self {
        use camclass::Error as E;
        let code = match e {
            E::InvalidArgument(_)
            | E::InvalidConfig(_)
            | E::UnknownLayer { .. }
            | E::LabelOutOfRange { .. }
            | E::LabelMap(_) => Self::USAGE,
            _ => Self::RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Contents of the TOML run config. Every field is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset_root: Option<PathBuf>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub explain: ExplainSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk_default(1, 0);
        Self {
            input_size: d.input_size,
            input_channels: d.input_channels,
            blocks: d.blocks,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub cosine_decay: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            momentum: h.momentum,
            weight_decay: h.weight_decay,
            checkpoint_every: h.checkpoint_every,
            cosine_decay: h.cosine_decay,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub images: Vec<PathBuf>,
    /// Conv layer name, or `last`.
    pub layer: String,
    /// Class index or label; the predicted class when unset.
    pub class: Option<String>,
    pub method: String,
    pub alpha: f64,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            images: Vec::new(),
            layer: "last".into(),
            class: None,
            method: CamMethod::HiResCam.as_str().into(),
            alpha: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: cannot read config: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    /// Model init derives its seed from the run seed.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_size: self.model.input_size,
            input_channels: self.model.input_channels,
            blocks: self.model.blocks.clone(),
            head: HeadConfig {
                kind: HeadKind::GapAffine,
                num_classes,
            },
            seed: self.seed.wrapping_add(1),
        }
    }

    /// The training shuffle derives its seed from the run seed.
    pub fn hyperparams(&self) -> Hyperparams {
        let t = &self.train;
        Hyperparams {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: self.seed.wrapping_add(2),
            checkpoint_every: t.checkpoint_every,
            cosine_decay: t.cosine_decay,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "camclass",
    version,
    about = "Train, evaluate and explain a compact image classifier"
)]
pub struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a dataset root and write a stratified train/val/test manifest.
    Split {
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Train from a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Class activation maps for one or more images.
    Explain(ExplainArgs),
    /// Feature-map grids of conv layers for one or more images.
    Featmaps {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Layer names; every conv layer when omitted.
        #[arg(long = "layer")]
        layers: Vec<String>,
    },
    /// Generate the synthetic four-class shape corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    /// hirescam or gradcam.
    #[arg(long)]
    pub method: Option<String>,
    /// Conv layer name, or `last`.
    #[arg(long)]
    pub layer: Option<String>,
    /// Class index or label; the predicted class when omitted.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Parses `args` and runs the command, returning the exit code. Output
/// goes to `out`, diagnostics to `err`.
pub fn run_with(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    env_output_dir: Option<PathBuf>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { CliError::USAGE } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match execute(cli, env_output_dir, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}

struct Context {
    config: RunConfig,
    output_dir: PathBuf,
}

impl Context {
    fn manifest_path(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.output_dir.join(MANIFEST_FILE))
    }

    fn checkpoint_path(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.output_dir.join(MODEL_FILE))
    }
}

pub fn execute(cli: Cli, env_output_dir: Option<PathBuf>, out: &mut dyn Write) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let output_dir = cli
        .output_dir
        .or(env_output_dir)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("camclass-out"));
    let ctx = Context { config, output_dir };
    let print = |out: &mut dyn Write, line: String| -> CliResult<()> {
        writeln!(out, "{line}").map_err(|e| CliError {
            code: CliError::RUNTIME,
            message: format!("cannot write output: {e}"),
        })
    };

    match cli.command {
        Command::Split { data_root } => {
            let root = data_root
                .or_else(|| ctx.config.dataset_root.clone())
                .ok_or_else(|| CliError::usage("no dataset root: pass --data-root or set dataset_root"))?;
            let index = scan_dataset(&root)?;
            let manifest = stratified_split(&index, ctx.config.seed);
            write_manifest(&manifest, ctx.output_dir.join(MANIFEST_FILE))?;
            write_count_table(&manifest, ctx.output_dir.join(COUNTS_FILE))?;
            print(
                out,
                format!(
                    "{:<20} {:>6} {:>6} {:>6} {:>6}",
                    "family", "train", "val", "test", "total"
                ),
            )?;
            for row in manifest.count_table() {
                print(
                    out,
                    format!(
                        "{:<20} {:>6} {:>6} {:>6} {:>6}",
                        row.family,
                        row.train,
                        row.val,
                        row.test,
                        row.total()
                    ),
                )?;
            }
            for w in &index.warnings {
                print(out, format!("warning: {w}"))?;
            }
            print(
                out,
                format!("manifest: {}", ctx.output_dir.join(MANIFEST_FILE).display()),
            )
        }

        Command::Train(args) => {
            let manifest = read_manifest(ctx.manifest_path(args.manifest))?;
            let mut hp = ctx.config.hyperparams();
            hp.epochs = args.epochs.unwrap_or(hp.epochs);
            hp.batch_size = args.batch_size.unwrap_or(hp.batch_size);
            hp.learning_rate = args.learning_rate.unwrap_or(hp.learning_rate);
            hp.validate()?;
            let mut model: Model = match &args.resume {
                Some(path) => load_checkpoint(path)?,
                None => Model::build(ctx.config.model_config(manifest.families().len()))?
                    .with_labels(manifest.families())?,
            };
            let opts = TrainOptions {
                out_dir: Some(ctx.output_dir.clone()),
            };
            let outcome = train(&mut model, &manifest, &hp, &opts)?;
            let last = outcome.logs.last().expect("at least one epoch");
            print(
                out,
                format!(
                    "epoch {}: train_loss {:.6} val_loss {:.6} top1 {:.4} top5 {:.4}",
                    last.epoch, last.train_loss, last.val_loss, last.top1, last.top5
                ),
            )?;
            print(
                out,
                format!("checkpoint: {}", ctx.output_dir.join(MODEL_FILE).display()),
            )
        }

        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let split: Split = split
                .parse()
                .map_err(|e: camclass::Error| CliError::usage(e.to_string()))?;
            let manifest = read_manifest(ctx.manifest_path(manifest))?;
            let model: Model = load_checkpoint(ctx.checkpoint_path(checkpoint))?;
            if manifest.families() != model.labels() {
                return Err(camclass::Error::LabelMap(format!(
                    "manifest families [{}] differ from checkpoint labels [{}]",
                    manifest.families().join(", "),
                    model.labels().join(", ")
                ))
                .into());
            }
            let set = LabeledSet::load(&manifest, split, model.labels(), model.config().input_size)?;
            if set.is_empty() {
                return Err(CliError {
                    code: CliError::RUNTIME,
                    message: format!("split `{split}` has no images"),
                });
            }
            let logits = predict_set(&model, &set, ctx.config.train.batch_size.max(1))?;
            let predicted = argmax_rows(&logits);
            let cm =
                confusion_matrix(&set.labels, &predicted, model.num_classes())?.with_labels(model.labels().to_vec())?;
            let report = per_class_metrics(&cm);
            let dir = ctx.output_dir.join(format!("eval_{split}"));
            write_report(&report, &cm, &dir)?;
            let k = TOP_K.min(model.num_classes());
            print(
                out,
                format!(
                    "{split}: n {} top1 {:.4} top{k} {:.4} macro_p {:.4} macro_r {:.4} macro_f1 {:.4}",
                    report.total,
                    report.accuracy,
                    topk_accuracy(&logits, &set.labels, k)?,
                    report.macro_avg.precision,
                    report.macro_avg.recall,
                    report.macro_avg.f1
                ),
            )?;
            print(out, format!("report: {}", dir.display()))
        }

        Command::Explain(args) => {
            let ex = &ctx.config.explain;
            let method: CamMethod = args
                .method
                .as_deref()
                .unwrap_or(&ex.method)
                .parse()
                .map_err(|e: camclass::Error| CliError::usage(e.to_string()))?;
            let alpha = args.alpha.unwrap_or(ex.alpha);
            let images = if args.images.is_empty() {
                ex.images.clone()
            } else {
                args.images
            };
            if images.is_empty() {
                return Err(CliError::usage("no images: pass --image or set explain.images"));
            }
            let model: Model = load_checkpoint(ctx.checkpoint_path(args.checkpoint))?;
            let layer = resolve_layer(&model, args.layer.as_deref().unwrap_or(&ex.layer))?;
            let class_arg = args.class.or_else(|| ex.class.clone());
            let requested = class_arg.as_deref().map(|c| resolve_class(&model, c)).transpose()?;
            let size = model.config().input_size;
            for image in &images {
                let input = single_batch(image, size)?;
                let logits = model.predict(&input, &[])?.logits;
                let predicted = argmax_rows(&logits)[0];
                let class = requested.unwrap_or(predicted);
                let cam = upsample_cam(explain(&model, &input, class, &layer, method)?, size);
                let dir = ctx
                    .output_dir
                    .join("explain")
                    .join(file_stem(image))
                    .join(method.as_str());
                let meta = [("layer", layer.as_str()), ("method", method.as_str())];
                write_raw_csv(&cam, &dir.join("cam_raw.csv"))?;
                write_rgb_png(&cam_image(&cam)?, &dir.join("cam.png"), &meta)?;
                let original = load_rgb(image, size)?;
                write_rgb_png(&overlay(&cam, &original, alpha)?, &dir.join("overlay.png"), &meta)?;
                feature_grid(&model, &input, &layer)?.write_png(&dir.join(format!("featuregrid_{layer}.png")))?;
                let confidence = softmax(logits.data())[predicted];
                print(
                    out,
                    format!(
                        "{}: predicted {} (class {predicted}) confidence {confidence:.6}",
                        image.display(),
                        model.labels()[predicted]
                    ),
                )?;
                print(
                    out,
                    format!(
                        "  {} layer {layer} class {} ({class}) logit {} bias {} raw_sum {}",
                        method.as_str(),
                        model.labels()[class],
                        cam.logit,
                        cam.bias,
                        cam.raw_sum()
                    ),
                )?;
                print(out, format!("  artifacts: {}", dir.display()))?;
            }
            Ok(())
        }

        Command::Featmaps {
            checkpoint,
            images,
            layers,
        } => {
            let images = if images.is_empty() {
                ctx.config.explain.images.clone()
            } else {
                images
            };
            if images.is_empty() {
                return Err(CliError::usage("no images: pass --image or set explain.images"));
            }
            let model: Model = load_checkpoint(ctx.checkpoint_path(checkpoint))?;
            let layers = if layers.is_empty() {
                model.conv_layer_names()
            } else {
                layers
                    .iter()
                    .map(|l| resolve_layer(&model, l))
                    .collect::<CliResult<Vec<_>>>()?
            };
            for image in &images {
                let input = single_batch(image, model.config().input_size)?;
                let dir = ctx.output_dir.join("featmaps").join(file_stem(image));
                for layer in &layers {
                    let grid = feature_grid(&model, &input, layer)?;
                    let path = dir.join(format!("featuregrid_{layer}.png"));
                    grid.write_png(&path)?;
                    print(
                        out,
                        format!(
                            "{}: {layer} {}×{} grid -> {}",
                            image.display(),
                            grid.rows,
                            grid.cols,
                            path.display()
                        ),
                    )?;
                }
            }
            Ok(())
        }

        Command::Synth {
            out: dir,
            per_class,
            size,
        } => {
            if per_class == 0 || size < 8 {
                return Err(CliError::usage("per-class must be >= 1 and size >= 8"));
            }
            let paths = generate_shapes(&dir, per_class, size, ctx.config.seed)?;
            print(out, format!("wrote {} images under {}", paths.len(), dir.display()))
        }
    }
}

fn resolve_layer(model: &Model, name: &str) -> CliResult<String> {
    if name == "last" {
        return Ok(model.last_conv_layer().to_string());
    }
    model.layer_geometry(name)?;
    Ok(name.to_string())
}

fn resolve_class(model: &Model, class: &str) -> CliResult<usize> {
    if let Ok(i) = class.parse::<usize>() {
        if i < model.num_classes() {
            return Ok(i);
        }
    }
    model.labels().iter().position(|l| l == class).ok_or_else(|| {
        CliError::usage(format!(
            "unknown class `{class}`; use an index below {} or one of: {}",
            model.num_classes(),
            model.labels().join(", ")
        ))
    })
}

fn single_batch(image: &Path, size: usize) -> CliResult<Tensor> {
    let img = load_image::<f32>(image, size, Normalization::UnitRange)?;
    Ok(Tensor::stack(&[&img])?)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_matches_defaults() {
        let cfg: RunConfig = toml::from_str(include_str!("../../../configs/desk.toml")).unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.model.blocks, d.model.blocks);
        assert_eq!(cfg.model.input_size, 64);
        assert_eq!(cfg.hyperparams(), d.hyperparams());
        assert_eq!(cfg.explain.method, "hirescam");
        assert_eq!(cfg.output_dir, Some(PathBuf::from("runs/desk")));
    }

    #[test]
    fn seeds_are_derived_from_run_seed() {
        let cfg = RunConfig {
            seed: 10,
            ..Default::default()
        };
        assert_eq!(cfg.model_config(4).seed, 11);
        assert_eq!(cfg.hyperparams().seed, 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_with(["camclass", "frobnicate"], None, &mut out, &mut err), 1);
        assert_eq!(run_with(["camclass", "--help"], None, &mut out, &mut err), 0);
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run_with(["camclass", "split"], None, &mut out, &mut err), 1);
        assert!(String::from_utf8_lossy(&err).contains("dataset root"));
    }

    #[test]
    fn error_codes_follow_error_kind() {
        let e: CliError = camclass::Error::LabelMap("x".into()).into();
        assert_eq!(e.code, CliError::USAGE);
        let e: CliError = camclass::Error::Training("x".into()).into();
        assert_eq!(e.code, CliError::RUNTIME);
    }
}
