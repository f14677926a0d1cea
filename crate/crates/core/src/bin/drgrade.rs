use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drgrade::model::BranchModel;
use drgrade::pipeline::{self, Ensemble, ModelBundle, PipelineConfig};
use drgrade::{Error, Result};

#[derive(Parser)]
#[command(name = "drgrade", version, about = "Diabetic retinopathy grading pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic APTOS-layout dataset.
    Synth {
        /// Images per grade.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preprocess every image of the dataset and write PNGs under <out>/preprocessed.
    Preprocess(RunArgs),
    /// Train both branch models.
    TrainBase(RunArgs),
    /// Train the meta-model on stacked outputs of saved branch checkpoints.
    TrainMeta(RunArgs),
    /// Score saved checkpoints on the validation split.
    Evaluate(RunArgs),
    /// Grade one image with a trained ensemble.
    Predict {
        image: PathBuf,
        /// Run output directory or its checkpoints/ subdirectory.
        #[arg(long)]
        model_dir: PathBuf,
    },
    /// Full flow: data → branches → meta-model → evaluation.
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Configuration file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset (64 px synthetic data, tiny CNN backbones).
    #[arg(long, conflicts_with = "config")]
    smoke: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// APTOS `id_code,diagnosis` CSV; omit to use synthetic data.
    #[arg(long, requires = "image_dir")]
    data_csv: Option<PathBuf>,
    #[arg(long, requires = "data_csv")]
    image_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Two registry names, comma separated.
    #[arg(long, value_delimiter = ',')]
    backbones: Option<Vec<String>>,
    #[arg(long)]
    epochs_base: Option<usize>,
    #[arg(long)]
    epochs_meta: Option<usize>,
    #[arg(long)]
    resample_target: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None if self.smoke => PipelineConfig::smoke("out"),
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let (Some(csv), Some(dir)) = (&self.data_csv, &self.image_dir) {
            cfg.data.csv = Some(csv.clone());
            cfg.data.image_dir = Some(dir.clone());
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(b) = &self.backbones {
            cfg.backbones = b.clone();
        }
        if let Some(e) = self.epochs_base {
            cfg.train_base.epochs = e;
        }
        if let Some(e) = self.epochs_meta {
            cfg.train_meta.epochs = e;
        }
        if let Some(t) = self.resample_target {
            cfg.resample_target = t;
        }
        if self.no_augment {
            cfg.augment_enabled = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(report: &pipeline::RunReport) {
    print!("{}", report.comparison_table());
    println!("metrics written to {}", report.output_dir.join("metrics.json").display());
}

fn load_branches(cfg: &PipelineConfig) -> Result<Vec<BranchModel>> {
    ModelBundle::from_config(cfg)?.load_branches(&cfg.checkpoint_dir())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { n, size, seed, out } => {
            let m = pipeline::generate_synthetic(n, size, seed, &out)?;
            println!("wrote {} images and {}", m.len(), out.join("labels.csv").display());
        }
        Command::Preprocess(args) => {
            let cfg = args.config()?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let (full, _, _, rejects) = pipeline::ingest_and_split(&cfg)?;
            let dir = cfg.output_dir.join("preprocessed");
            std::fs::create_dir_all(&dir)?;
            let images = pipeline::load_images(&full, &cfg.preprocess, Some(&cfg.cache_dir()))
                .map_err(|e| e.in_stage("preprocess"))?;
            for (r, img) in full.records.iter().zip(&images.images) {
                img.save(dir.join(format!("{}.png", r.id)))?;
            }
            println!("preprocessed {} images into {} ({} rejected)", full.len(), dir.display(), rejects.len());
        }
        Command::TrainBase(args) => {
            let cfg = args.config()?;
            let data = pipeline::prepare_data(&cfg)?;
            for (i, t) in pipeline::train_base_stage(&cfg, &data)?.iter().enumerate() {
                println!(
                    "{} ({}): best epoch {:?}, val qwk {:.4}",
                    pipeline::branch_name(i),
                    t.model.backbone.name,
                    t.history.best_epoch,
                    t.val_metrics.qwk.unwrap_or(f64::NAN)
                );
            }
        }
        Command::TrainMeta(args) => {
            let cfg = args.config()?;
            let data = pipeline::prepare_data(&cfg)?;
            let branches = load_branches(&cfg).map_err(|e| e.in_stage("train-meta"))?;
            let (_, history) = pipeline::train_meta_stage(&cfg, &data, &branches)?;
            let best = history.best();
            println!(
                "meta: best epoch {:?}, val qwk {:.4}",
                history.best_epoch,
                best.map_or(f64::NAN, |r| r.val_qwk)
            );
        }
        Command::Evaluate(args) => {
            let cfg = args.config()?;
            let data = pipeline::prepare_data(&cfg)?;
            let ensemble = Ensemble::load(&cfg.checkpoint_dir()).map_err(|e| e.in_stage("evaluate"))?;
            let n = ensemble.branches.len();
            let report = pipeline::evaluate_stage(&cfg, &data, &ensemble.branches, &ensemble.meta, vec![None; n], None)?;
            print_report(&report);
        }
        Command::Predict { image, model_dir } => {
            let ensemble = Ensemble::load_from_model_dir(&model_dir).map_err(|e| e.in_stage("predict"))?;
            let (grade, probs) = ensemble.predict_path(&image).map_err(|e| e.in_stage("predict"))?;
            println!("{}", pipeline::format_prediction(grade, &probs));
        }
        Command::Run(args) => {
            let cfg = args.config()?;
            let report = pipeline::run_pipeline(&cfg)?;
            print_report(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if matches!(e, Error::InvalidConfig(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
