//! `lepidet`: the detection pipeline as subcommands that communicate through
//! files.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lepidet::augment::amplify;
use lepidet::dataset::{
    build_training_set, load_manifest, remove_singletons, species_histogram, split_stratified, write_manifest,
    DatasetManifest, PatternStrategy,
};
use lepidet::detector::{read_checkpoint, write_checkpoint};
use lepidet::eval::{evaluate, load_predictions, save_predictions, ApMethod, EvalConfig};
use lepidet::image::read_ppm;
use lepidet::trainer::{predict, train, write_loss_log};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "lepidet", version, about = "Species detection pipeline")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for image-parallel steps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory that manifest image paths are relative to; defaults to the
    /// manifest's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    /// Every pattern photo (Data_1).
    All,
    /// Pattern photos of species in the ecological training set (Data_2).
    Matched,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and, with --check-images, that every image decodes.
    Validate {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        check_images: bool,
    },
    /// Species histogram and long-tail summary.
    Stats {
        #[command(flatten)]
        io: Io,
    },
    /// Stratified half split into train.jsonl and test.jsonl.
    Split {
        #[command(flatten)]
        io: Io,
        /// Remove species seen in only one image before splitting.
        #[arg(long)]
        drop_singletons: bool,
    },
    /// Ecological training split plus pattern photos.
    BuildTrainset {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        patterns: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "matched")]
        strategy: Strategy,
    },
    /// Tenfold amplification: each image plus nine variants.
    Augment {
        #[command(flatten)]
        io: Io,
    },
    /// Train a detector; writes model.ckpt and loss.csv.
    Train {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        total_iters: Option<usize>,
        #[arg(long)]
        initial_lr: Option<f64>,
        #[arg(long)]
        lr_step: Option<usize>,
        #[arg(long)]
        log_every: Option<usize>,
    },
    /// Detect in every manifest image; writes predictions.jsonl.
    Predict {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        score_threshold: Option<f64>,
        #[arg(long)]
        nms_threshold: Option<f64>,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Per-class AP, operating-point precision/recall and mAP.
    Eval {
        #[command(flatten)]
        target: EvalTarget,
    },
    /// Per-class precision/recall curves as CSV.
    PrCurve {
        #[command(flatten)]
        target: EvalTarget,
        /// Restrict to one species.
        #[arg(long)]
        species: Option<String>,
    },
}

#[derive(Args)]
struct EvalTarget {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    /// `voc2010` or `blocks:<n>`.
    #[arg(long)]
    method: Option<String>,
}

enum Failure {
    Usage(String),
    Config(String),
    Module(lepidet::Error),
}

impl From<lepidet::Error> for Failure {
    fn from(e: lepidet::Error) -> Self {
        Failure::Module(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Config(_) => 3,
            Failure::Module(_) => 4,
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Config(m) => eprintln!("error: config: {m}"),
                Failure::Module(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    threads: usize,
}

impl Ctx {
    fn need(&self, flag: Option<PathBuf>, from_cfg: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
        flag.or_else(|| from_cfg.clone())
            .ok_or_else(|| Failure::Usage(format!("--{name} is required (flag or config field)")))
    }

    fn out_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
        let dir = flag
            .or_else(|| self.cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| {
            Failure::Module(lepidet::Error::Write {
                path: dir.clone(),
                source: e,
            })
        })?;
        Ok(dir)
    }

    fn manifest(&self, io: &Io) -> Result<(PathBuf, DatasetManifest), Failure> {
        let path = self.need(io.manifest.clone(), &self.cfg.manifest, "manifest")?;
        let m = load_manifest(&path)?;
        Ok((path, m))
    }

    fn image_root(&self, io: &Io, manifest_path: &Path) -> PathBuf {
        io.image_root
            .clone()
            .or_else(|| self.cfg.image_root.clone())
            .unwrap_or_else(|| manifest_path.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}

fn emit(path: &Path) {
    println!("{}", path.display());
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|source| {
        Failure::Module(lepidet::Error::Write {
            path: path.to_path_buf(),
            source,
        })
    })?;
    emit(path);
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let threads = cli.threads.or(cfg.threads).unwrap_or(1).max(1);
    let ctx = Ctx { cfg, seed, threads };
    match cli.command {
        Command::Validate { io, check_images } => validate(&ctx, &io, check_images),
        Command::Stats { io } => stats(&ctx, &io),
        Command::Split { io, drop_singletons } => split(&ctx, io, drop_singletons),
        Command::BuildTrainset { io, patterns, strategy } => build(&ctx, io, patterns, strategy),
        Command::Augment { io } => augment(&ctx, io),
        Command::Train {
            io,
            total_iters,
            initial_lr,
            lr_step,
            log_every,
        } => {
            let mut tc = ctx.cfg.train.clone();
            tc.seed = ctx.seed;
            tc.total_iters = total_iters.unwrap_or(tc.total_iters);
            tc.initial_lr = initial_lr.unwrap_or(tc.initial_lr);
            tc.lr_step = lr_step.or(tc.lr_step);
            tc.log_every = log_every.unwrap_or(tc.log_every);
            train_cmd(&ctx, io, tc)
        }
        Command::Predict {
            io,
            checkpoint,
            score_threshold,
            nms_threshold,
            top_n,
        } => {
            let mut pc = ctx.cfg.predict;
            pc.score_threshold = score_threshold.unwrap_or(pc.score_threshold);
            pc.nms_threshold = nms_threshold.unwrap_or(pc.nms_threshold);
            pc.top_n = top_n.unwrap_or(pc.top_n);
            let ckpt = ctx.need(checkpoint, &ctx.cfg.checkpoint, "checkpoint")?;
            let (path, manifest) = ctx.manifest(&io)?;
            let root = ctx.image_root(&io, &path);
            let model = read_checkpoint(&ckpt)?;
            let preds = predict(&model, &manifest, &root, &pc, ctx.threads)?;
            let out = ctx.out_dir(io.out)?.join("predictions.jsonl");
            save_predictions(&preds.detections, &preds.skipped, &out)?;
            if !preds.skipped.is_empty() {
                eprintln!("skipped {} unreadable images", preds.skipped.len());
            }
            emit(&out);
            Ok(())
        }
        Command::Eval { target } => {
            let (report, out) = eval_report(&ctx, target)?;
            let csv = out.join("per_class.csv");
            write_text(&csv, &report.per_class_csv())?;
            let summary = out.join("summary.txt");
            write_text(&summary, &format!("{}\n", report.summary()))?;
            println!("{}", report.summary());
            Ok(())
        }
        Command::PrCurve { target, species } => {
            let (report, out) = eval_report(&ctx, target)?;
            let mut written = 0;
            for c in report
                .classes
                .iter()
                .filter(|c| species.as_ref().is_none_or(|s| s == &c.species))
            {
                write_text(&out.join(format!("pr_{}.csv", c.species)), &c.curve.to_csv())?;
                written += 1;
            }
            if written == 0 {
                return Err(Failure::Module(lepidet::Error::Empty(format!(
                    "species {} has no ground truth",
                    species.unwrap_or_default()
                ))));
            }
            Ok(())
        }
    }
}

fn validate(ctx: &Ctx, io: &Io, check_images: bool) -> Outcome {
    let (path, m) = ctx.manifest(io)?;
    if check_images {
        let root = ctx.image_root(io, &path);
        for r in &m.records {
            let img = read_ppm(root.join(&r.path)).map_err(|e| lepidet::Error::ImageRead {
                image_id: r.image_id.clone(),
                reason: e.to_string(),
            })?;
            if (img.width(), img.height()) != (r.width, r.height) {
                return Err(lepidet::Error::InvalidRecord {
                    image_id: r.image_id.clone(),
                    reason: format!(
                        "image is {}x{}, manifest says {}x{}",
                        img.width(),
                        img.height(),
                        r.width,
                        r.height
                    ),
                }
                .into());
            }
        }
    }
    println!("ok: {} records, {} species", m.len(), m.species_set().len());
    Ok(())
}

fn stats(ctx: &Ctx, io: &Io) -> Outcome {
    let (_, m) = ctx.manifest(io)?;
    let hist = species_histogram(&m);
    let (min, median, max) = hist
        .long_tail_summary()
        .ok_or_else(|| lepidet::Error::Empty("manifest has no annotated species".into()))?;
    println!(
        "images={} species={} singletons={} min={min} median={median} max={max}",
        m.len(),
        hist.entries.len(),
        hist.singletons()
    );
    let out = ctx.out_dir(io.out.clone())?.join("species_histogram.csv");
    write_text(&out, &hist.to_csv())
}

fn split(ctx: &Ctx, io: Io, drop_singletons: bool) -> Outcome {
    let (_, mut m) = ctx.manifest(&io)?;
    if drop_singletons {
        m = remove_singletons(&m);
    }
    let (train, test) = split_stratified(&m, ctx.seed);
    let dir = ctx.out_dir(io.out)?;
    for (name, part) in [("train.jsonl", &train), ("test.jsonl", &test)] {
        let path = dir.join(name);
        write_manifest(part, &path)?;
        emit(&path);
    }
    Ok(())
}

fn build(ctx: &Ctx, io: Io, patterns: Option<PathBuf>, strategy: Strategy) -> Outcome {
    let (_, eco) = ctx.manifest(&io)?;
    let patterns = load_manifest(ctx.need(patterns, &ctx.cfg.patterns, "patterns")?)?;
    let strategy = match strategy {
        Strategy::All => PatternStrategy::AllPatterns,
        Strategy::Matched => PatternStrategy::MatchedPatterns,
    };
    let set = build_training_set(&eco, &patterns, strategy)?;
    let path = ctx
        .out_dir(io.out)?
        .join(format!("{}.jsonl", strategy.label().to_lowercase()));
    write_manifest(&set, &path)?;
    emit(&path);
    Ok(())
}

fn augment(ctx: &Ctx, io: Io) -> Outcome {
    let (path, m) = ctx.manifest(&io)?;
    let root = ctx.image_root(&io, &path);
    let dir = ctx.out_dir(io.out)?;
    let amplified = amplify(&m, &root, &dir, ctx.seed, ctx.threads)?;
    let out = dir.join("manifest.jsonl");
    write_manifest(&amplified, &out)?;
    emit(&out);
    Ok(())
}

fn train_cmd(ctx: &Ctx, io: Io, tc: lepidet::trainer::TrainConfig) -> Outcome {
    let (path, m) = ctx.manifest(&io)?;
    let root = ctx.image_root(&io, &path);
    let arch = ctx.cfg.detector(m.species_set().len().max(1));
    let outcome = train(&m, &root, &tc, &arch)?;
    let dir = ctx.out_dir(io.out)?;
    let ckpt = dir.join("model.ckpt");
    write_checkpoint(&outcome.checkpoint, &ckpt)?;
    emit(&ckpt);
    let mut csv = Vec::new();
    write_loss_log(&outcome.log, &mut csv).expect("in-memory write");
    write_text(&dir.join("loss.csv"), &String::from_utf8(csv).expect("ascii csv"))
}

fn eval_report(ctx: &Ctx, t: EvalTarget) -> Result<(lepidet::eval::EvaluationReport, PathBuf), Failure> {
    let pred = ctx.need(t.pred, &ctx.cfg.pred, "pred")?;
    let gt = ctx.need(t.gt, &ctx.cfg.gt, "gt")?;
    let method_text = t.method.unwrap_or_else(|| ctx.cfg.eval.method.clone());
    let method: ApMethod = method_text
        .parse()
        .map_err(|e: lepidet::Error| Failure::Usage(e.to_string()))?;
    let config = EvalConfig {
        iou_threshold: t.iou_threshold.unwrap_or(ctx.cfg.eval.iou_threshold),
        method,
    };
    let report = evaluate(&load_predictions(&pred)?, &load_manifest(&gt)?, &config)?;
    Ok((report, ctx.out_dir(t.out)?))
}
