use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::imageops::{self, FilterType};
use swinca_core::checkpoint;
use swinca_core::data::{self, Sample};
use swinca_core::metrics::{binarize, MetricsReport};
use swinca_core::optim::Optimizer;
use swinca_core::train::{self, TrainSettings, LOSS_LOG_HEADER};
use swinca_core::{Model, ModelConfig};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "swinca", version, about = "Breast-ultrasound lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value config file (scale, window, heads, lr, optimizer, epochs, batch, seed, augment)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Model scale such as 1/4 or 0.25
    #[arg(long)]
    pub scale: Option<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic image/mask corpus
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the train split; writes loss_log.csv, best.ckpt and final.ckpt
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on a split; writes metrics.csv, metrics.json, confusion.csv
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        #[command(flatten)]
        common: Common,
    },
    /// Write <stem>_mask.png and <stem>_overlay.png for each image
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Render metrics.json as summary, per-region and confusion tables
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { out, n, size, seed } => synth(&out, n, size, seed),
        Command::Train { corpus, out, common } => cmd_train(&corpus, &out, &resolve(&common)?),
        Command::Eval { corpus, checkpoint, out, subset, common } => {
            cmd_eval(&corpus, &checkpoint, &out, subset, &resolve(&common)?)
        }
        Command::Predict { checkpoint, out, common, images } => {
            cmd_predict(&checkpoint, &out, &images, &resolve(&common)?)
        }
        Command::Report { metrics, out } => cmd_report(&metrics, out.as_deref()),
    }
}

fn resolve(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &c.scale {
        cfg.set("scale", s)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn synth(out: &Path, n: usize, size: usize, seed: u64) -> Result<(), CliError> {
    if n == 0 || size < 16 {
        return Err(CliError::Usage(format!("synth needs n >= 1 and size >= 16 (got n={n}, size={size})")));
    }
    let ids = data::write_synthetic_corpus(out, n, size, seed)?;
    eprintln!("wrote {} pairs to {}", ids.len(), out.display());
    Ok(())
}

fn load_samples(corpus: &Path, model: &ModelConfig) -> Result<Vec<Sample>, CliError> {
    let (samples, report) = data::load_corpus(corpus, model.input_size)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for (p, e) in &report.errors {
        eprintln!("error: {}: {e}", p.display());
    }
    if samples.is_empty() {
        return Err(CliError::Data(format!("no usable image/mask pairs in {}", corpus.display())));
    }
    Ok(samples)
}

fn load_model(path: &Path, cfg: &ModelConfig) -> Result<Model, CliError> {
    checkpoint::load(path, cfg).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

fn cmd_train(corpus: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let mcfg = cfg.model_config()?;
    if cfg.batch == 0 {
        return Err(CliError::Usage("batch must be >= 1".into()));
    }
    let samples = load_samples(corpus, &mcfg)?;
    let split = data::split(samples, cfg.seed);
    // With too few samples for a validation subset, validate on the training set.
    let val = if split.val.is_empty() { &split.train } else { &split.val };
    create_dir(out)?;
    write(&out.join("config.txt"), &cfg.to_text())?;

    let mut model = Model::build(&mcfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.store).map_err(|e| CliError::Usage(e.to_string()))?;
    let settings = TrainSettings { epochs: cfg.epochs, batch: cfg.batch, seed: cfg.seed, augment: cfg.augment };
    eprintln!(
        "training on {} images ({} val, {} test held out), {} parameters",
        split.train.len(),
        val.len(),
        split.test.len(),
        model.store.num_scalars()
    );

    let log_path = out.join("loss_log.csv");
    let best_path = out.join("best.ckpt");
    let mut log = format!("{LOSS_LOG_HEADER}\n");
    write(&log_path, &log)?;
    let mut best = f64::NEG_INFINITY;
    train::fit(&mut model, &mut opt, &split.train, val, &settings, |entry, m| {
        log.push_str(&entry.csv_row());
        log.push('\n');
        fs::write(&log_path, &log).map_err(|e| swinca_core::Error::Validation(format!("{}: {e}", log_path.display())))?;
        eprintln!("{}", entry.csv_row());
        if entry.val_dice > best {
            best = entry.val_dice;
            checkpoint::save(m, &best_path)?;
        }
        Ok(())
    })?;
    if !best_path.exists() {
        checkpoint::save(&model, &best_path)?;
    }
    checkpoint::save(&model, out.join("final.ckpt"))?;
    Ok(())
}

fn cmd_eval(corpus: &Path, ckpt: &Path, out: &Path, subset: Subset, cfg: &RunConfig) -> Result<(), CliError> {
    let mcfg = cfg.model_config()?;
    let model = load_model(ckpt, &mcfg)?;
    let samples = load_samples(corpus, &mcfg)?;
    let split = data::split(samples, cfg.seed);
    let chosen: Vec<Sample> = match subset {
        Subset::Train => split.train,
        Subset::Val => split.val,
        Subset::Test => split.test,
        Subset::All => split.train.into_iter().chain(split.val).chain(split.test).collect(),
    };
    if chosen.is_empty() {
        return Err(CliError::Data(format!("the {subset:?} subset is empty")));
    }
    let ev = train::evaluate(&model, &chosen, cfg.batch)?;
    create_dir(out)?;
    write(&out.join("metrics.csv"), &ev.report.to_csv())?;
    write(&out.join("metrics.json"), &ev.report.to_json())?;
    write(&out.join("confusion.csv"), &ev.report.confusion_csv())?;
    let mut per = String::from("id,tp,fp,fn,tn,bf_lesion,bf_background\n");
    for (id, e) in &ev.per_image {
        let c = e.counts;
        per.push_str(&format!("{id},{},{},{},{},{:.6},{:.6}\n", c.tp, c.fp, c.fn_, c.tn, e.bf_lesion, e.bf_background));
    }
    write(&out.join("per_image.csv"), &per)?;
    print!("{}", ev.report.to_csv());
    Ok(())
}

fn predict_one(model: &Model, path: &Path, out: &Path) -> Result<(), CliError> {
    let size = model.config().input_size;
    let (x, (w, h)) = data::load_image(path, size)?;
    let probs = model.predict(&x)?;
    let mask = data::mask_to_gray(&binarize(&probs));
    let mask = if (w, h) == (size as u32, size as u32) { mask } else { imageops::resize(&mask, w, h, FilterType::Nearest) };
    let original = image::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, name: String| {
        let p = out.join(name);
        img(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    };
    save(&|p| mask.save(p), format!("{stem}_mask.png"))?;
    let ov = data::overlay(&original, &mask);
    save(&|p| ov.save(p), format!("{stem}_overlay.png"))?;
    Ok(())
}

fn cmd_predict(ckpt: &Path, out: &Path, images: &[PathBuf], cfg: &RunConfig) -> Result<(), CliError> {
    let mcfg = cfg.model_config()?;
    let model = load_model(ckpt, &mcfg)?;
    create_dir(out)?;
    let mut failed = 0;
    for p in images {
        if let Err(e) = predict_one(&model, p, out) {
            eprintln!("error: {e}");
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Data(format!("{failed} of {} images failed", images.len())));
    }
    Ok(())
}

/// Markdown rendering of a metrics report.
pub fn render_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("# Segmentation report ({} images)\n\n", r.images));
    s.push_str("| GlobalAcc | MeanAcc | MeanIoU | WeightedIoU | MeanBFScore |\n|---|---|---|---|---|\n");
    s.push_str(&format!(
        "| {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n\n",
        r.global_acc, r.mean_acc, r.mean_iou, r.weighted_iou, r.mean_bf
    ));
    s.push_str("| Region | DSC | Accuracy | IoU | BFScore |\n|---|---|---|---|---|\n");
    for row in &r.regions {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            row.region, row.dsc, row.accuracy, row.iou, row.bf_score
        ));
    }
    let t = r.confusion_table();
    s.push_str("\nConfusion matrix (rows: true class, columns: predicted, row-normalised)\n\n");
    s.push_str("| | lesion | background |\n|---|---|---|\n");
    s.push_str(&format!("| lesion | {:.4} | {:.4} |\n", t[0][0], t[0][1]));
    s.push_str(&format!("| background | {:.4} | {:.4} |\n", t[1][0], t[1][1]));
    s
}

fn cmd_report(metrics: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(metrics).map_err(|e| CliError::Data(format!("{}: {e}", metrics.display())))?;
    let report: MetricsReport =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", metrics.display())))?;
    let md = render_report(&report);
    match out {
        Some(p) => write(p, &md)?,
        None => print!("{md}"),
    }
    Ok(())
}
