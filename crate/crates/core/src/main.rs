use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualbranch::data::SynthConfig;
use dualbranch::experiment::{
    cmd_crossval, cmd_embed, cmd_eval, cmd_synth, cmd_train, DataSource, ExperimentSpec, FoldSelection, Split,
};
use dualbranch::network::{FeatureKind, Variant};
use dualbranch::training::TrainConfig;
use dualbranch::{Error, Result};

#[derive(Parser)]
#[command(name = "dualbranch", version, about = "Dual-branch adversarial EMG pattern recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// SynthConfig JSON; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "DUALBRANCH_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Train one fold or all folds.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, default_value = "proposed")]
        variant: Variant,
    },
    /// Evaluate a checkpoint on its fold's subjects.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, env = "DUALBRANCH_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Export features and their 2-D PCA projection.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// original, pattern or subject
        #[arg(long, default_value = "pattern")]
        which: FeatureKind,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, env = "DUALBRANCH_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Train and evaluate every fold for each variant.
    Crossval {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated variants.
        #[arg(long, value_delimiter = ',', default_value = "erm,ponly,mtl,proposed")]
        variants: Vec<Variant>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (manifest.json).
    #[arg(long, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// SynthConfig JSON to generate the data in memory.
    #[arg(long)]
    synth: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TrainConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "folds")]
    fold: Option<usize>,
    /// A fold index or "all".
    #[arg(long)]
    folds: Option<FoldSelection>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    n_folds: usize,
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
    #[arg(long, default_value_t = dualbranch::data::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = dualbranch::data::DEFAULT_STEP)]
    step: usize,
    /// Skip per-channel z-scoring.
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, env = "DUALBRANCH_OUT", default_value = "out")]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Validation {
        field: path.display().to_string(),
        reason: e.to_string(),
    })
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        match (&self.data, &self.synth) {
            (Some(dir), None) => Ok(DataSource::Dataset(dir.clone())),
            (None, Some(cfg)) => Ok(DataSource::Synth(read_json(cfg)?)),
            _ => Err(Error::Validation {
                field: "data".into(),
                reason: "give exactly one of --data DIR or --synth CONFIG".into(),
            }),
        }
    }
}

impl ExperimentArgs {
    fn spec(&self, variant: Variant) -> Result<ExperimentSpec> {
        let mut train: TrainConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainConfig::default(),
        };
        train.variant = variant;
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.lr {
            train.learning_rate = v;
        }
        if let Some(v) = self.seed {
            train.seed = v;
        }
        let mut spec = ExperimentSpec::new(self.data.source()?, train, self.out.clone());
        spec.folds = match (self.fold, self.folds) {
            (Some(k), _) => FoldSelection::One(k),
            (None, Some(f)) => f,
            (None, None) => FoldSelection::One(0),
        };
        spec.n_folds = self.n_folds;
        spec.fold_seed = self.fold_seed;
        spec.window = self.window;
        spec.step = self.step;
        spec.normalize = !self.no_normalize;
        spec.validate()?;
        Ok(spec)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            let m = cmd_synth(&cfg, &out)?;
            println!("wrote {} recordings to {}", m.recordings.len(), out.display());
        }
        Command::Train { exp, variant } => {
            let spec = exp.spec(variant)?;
            for run in cmd_train(&spec)? {
                println!(
                    "{variant} fold {}: accuracy {:.4} f1 {:.4} dbi {}",
                    run.fold,
                    run.report.accuracy,
                    run.report.f1,
                    run.report.dbi.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let r = cmd_eval(&checkpoint, &data.source()?, split, &out)?;
            println!(
                "{} split: {} subjects, accuracy {:.4} f1 {:.4}",
                r.split,
                r.subjects.len(),
                r.accuracy,
                r.f1
            );
        }
        Command::Embed {
            checkpoint,
            data,
            which,
            split,
            out,
        } => {
            let (f, p) = cmd_embed(&checkpoint, &data.source()?, which, split, &out)?;
            println!("wrote {} and {}", f.display(), p.display());
        }
        Command::Crossval { exp, variants } => {
            let mut spec = exp.spec(variants.first().copied().unwrap_or(Variant::Proposed))?;
            if exp.fold.is_none() && exp.folds.is_none() {
                spec.folds = FoldSelection::All;
            }
            let summary = cmd_crossval(&spec, &variants)?;
            for v in &summary.variants {
                println!("{:>9}  mean accuracy {:.4}", v.variant.to_string(), v.mean_accuracy());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
