//! End-to-end experiments: what the `dualbranch` commands run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{
    load_manifest, make_folds, save_manifest, split_fold, synthesize, FoldSplit, Manifest, Recording, SynthConfig,
    WindowParams, WindowedDataset, DEFAULT_STEP, DEFAULT_WINDOW,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_per_subject, davies_bouldin, pca_project, write_feature_csv, EvalReport, PredictionSet};
use crate::network::{DualBranchModel, FeatureKind, Variant};
use crate::training::{predict_patterns, train, write_log_csv, EpochLog, TrainConfig};

/// Where recordings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// A dataset directory with `manifest.json`.
    Dataset(PathBuf),
    /// Generated on the fly.
    Synth(SynthConfig),
}

impl DataSource {
    pub fn load(&self) -> Result<Arc<Vec<Recording>>> {
        let recs = match self {
            DataSource::Dataset(path) => {
                if !path.exists() {
                    return Err(Error::invalid("data", format!("{} does not exist", path.display())));
                }
                load_manifest(path)?
            }
            DataSource::Synth(cfg) => synthesize(cfg)?,
        };
        if recs.is_empty() {
            return Err(Error::invalid("dataset", "no recordings"));
        }
        Ok(Arc::new(recs))
    }
}

/// A single fold or every fold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldSelection {
    One(usize),
    All,
}

impl FoldSelection {
    pub fn folds(self, n_folds: usize) -> Result<Vec<usize>> {
        match self {
            FoldSelection::All => Ok((0..n_folds).collect()),
            FoldSelection::One(k) if k < n_folds => Ok(vec![k]),
            FoldSelection::One(k) => Err(Error::invalid("fold", format!("{k} not in 0..{n_folds}"))),
        }
    }
}

impl FromStr for FoldSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(FoldSelection::All);
        }
        s.parse()
            .map(FoldSelection::One)
            .map_err(|_| Error::invalid("fold", format!("{s:?} is neither an index nor \"all\"")))
    }
}

impl fmt::Display for FoldSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldSelection::One(k) => write!(f, "{k}"),
            FoldSelection::All => f.write_str("all"),
        }
    }
}

/// Everything needed to reproduce a training run; written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: DataSource,
    pub train: TrainConfig,
    pub folds: FoldSelection,
    pub n_folds: usize,
    /// Seed of the subject-to-fold shuffle.
    pub fold_seed: u64,
    pub window: usize,
    pub step: usize,
    pub normalize: bool,
    pub out: PathBuf,
}

impl ExperimentSpec {
    pub fn new(data: DataSource, train: TrainConfig, out: PathBuf) -> Self {
        ExperimentSpec {
            data,
            train,
            folds: FoldSelection::One(0),
            n_folds: 4,
            fold_seed: 0,
            window: DEFAULT_WINDOW,
            step: DEFAULT_STEP,
            normalize: true,
            out,
        }
    }

    pub fn window_params(&self) -> WindowParams {
        WindowParams {
            window: self.window,
            step: self.step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.window_params().validate()?;
        if self.n_folds < 2 {
            return Err(Error::invalid("n_folds", format!("{} < 2", self.n_folds)));
        }
        self.folds.folds(self.n_folds)?;
        if let DataSource::Synth(cfg) = &self.data {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Training config actually used for `fold`: the seed is offset by the fold index.
    pub fn fold_config(&self, variant: Variant, fold: usize) -> TrainConfig {
        TrainConfig {
            variant,
            seed: self.train.seed.wrapping_add(fold as u64),
            ..self.train.clone()
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset to `out` in the interchange format.
pub fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let recs = synthesize(config)?;
    let manifest = save_manifest(out, &recs)?;
    write_json(&out.join("synth_config.json"), config)?;
    Ok(manifest)
}

/// A trained fold with its evaluation.
#[derive(Clone, Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub model: DualBranchModel,
    pub meta: CheckpointMeta,
    pub log: Vec<EpochLog>,
    pub report: EvalReport,
}

/// Splits, trains and evaluates one fold on its held-out subjects.
pub fn run_fold(
    recordings: &Arc<Vec<Recording>>,
    spec: &ExperimentSpec,
    variant: Variant,
    fold: usize,
) -> Result<FoldRun> {
    let subjects: Vec<u32> = {
        let mut s: Vec<u32> = recordings.iter().map(|r| r.subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let plan = make_folds(&subjects, spec.n_folds, spec.fold_seed)?;
    let split = split_fold(Arc::clone(recordings), &plan, fold, spec.window_params(), spec.normalize)?;
    let config = spec.fold_config(variant, fold);
    let outcome = train(&split.train, &config, None)?;
    let meta = CheckpointMeta {
        fold: Some(fold),
        train_subjects: split.train.subject_ids().to_vec(),
        gesture_ids: split.train.gesture_ids().to_vec(),
        normalization: split.train.normalization().cloned(),
        window_step: Some(spec.step),
    };
    let mut report = evaluate(&outcome.model, &split.test, "test")?;
    report.fold = Some(fold);
    Ok(FoldRun {
        fold,
        model: outcome.model,
        meta,
        log: outcome.log,
        report,
    })
}

/// Output directory of one variant and fold.
pub fn fold_dir(out: &Path, variant: Variant, fold: usize) -> PathBuf {
    out.join(variant.name()).join(format!("fold{fold}"))
}

/// Trains the selected folds, writing per fold `model.ckpt`,
/// `train_log.csv`, `test_report.{csv,json}` and `config.json`.
pub fn cmd_train(spec: &ExperimentSpec) -> Result<Vec<FoldRun>> {
    spec.validate()?;
    let recordings = spec.data.load()?;
    let mut runs = Vec::new();
    for fold in spec.folds.folds(spec.n_folds)? {
        let variant = spec.train.variant;
        let run = run_fold(&recordings, spec, variant, fold).map_err(|e| fold_error(fold, e))?;
        let dir = fold_dir(&spec.out, variant, fold);
        create_dir(&dir)?;
        checkpoint::save(&dir.join("model.ckpt"), &run.model, &run.meta)?;
        write_log_csv(&dir.join("train_log.csv"), &run.log)?;
        run.report.write_csv(&dir.join("test_report.csv"))?;
        run.report.write_json(&dir.join("test_report.json"))?;
        let resolved = ExperimentSpec {
            train: spec.fold_config(variant, fold),
            folds: FoldSelection::One(fold),
            ..spec.clone()
        };
        write_json(&dir.join("config.json"), &resolved)?;
        log::info!("fold {fold}: test accuracy {:.4}", run.report.accuracy);
        runs.push(run);
    }
    Ok(runs)
}

fn fold_error(fold: usize, e: Error) -> Error {
    Error::Fold {
        fold,
        source: Box::new(e),
    }
}

/// Per-subject pattern metrics on `data`, with the Davies–Bouldin index of
/// the pooled pattern-specific features.
pub fn evaluate(model: &DualBranchModel, data: &WindowedDataset, split: &str) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("split", format!("{split} split has no windows")));
    }
    let probs = predict_patterns(model, data, 256)?;
    let labels: Vec<usize> = data.infos().iter().map(|i| i.pattern).collect();
    let subjects: Vec<u32> = data.infos().iter().map(|i| i.subject_id).collect();
    let preds = PredictionSet::from_tensor(&probs, labels.clone(), subjects)?;
    let mut report = aggregate_per_subject(&preds)?;
    report.split = split.to_string();
    report.variant = Some(model.variant().to_string());
    let (features, width) = features_of(model, data, FeatureKind::Pattern)?;
    report.dbi = match davies_bouldin(&features, width, &labels) {
        Ok(d) => Some(d),
        Err(e @ (Error::UndefinedMetric(_) | Error::CoincidentCentroids(..))) => {
            log::warn!("DBI skipped: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(report)
}

/// Eval-mode features of every window as row-major `f64`.
pub fn features_of(model: &DualBranchModel, data: &WindowedDataset, which: FeatureKind) -> Result<(Vec<f64>, usize)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    let mut width = 0;
    for c in idx.chunks(256) {
        let f = model.export_features(&data.batch(c)?, which)?;
        width = f.shape()[1];
        out.extend(f.data().iter().map(|&x| x as f64));
    }
    Ok((out, width))
}

/// Train or test split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid("split", format!("{s:?} (expected train or test)"))),
        }
    }
}

/// Rebuilds the checkpoint's fold split from its stored training subjects,
/// gesture ids and normalization statistics.
pub fn checkpoint_split(
    meta: &CheckpointMeta,
    model: &DualBranchModel,
    recordings: Arc<Vec<Recording>>,
    step: Option<usize>,
) -> Result<FoldSplit> {
    let params = WindowParams {
        window: model.input_spec().window_len,
        step: step.or(meta.window_step).unwrap_or(DEFAULT_STEP),
    };
    let present: Vec<u32> = crate::data::gesture_space(&recordings);
    if present.iter().any(|g| !meta.gesture_ids.contains(g)) || meta.gesture_ids.len() != model.n_patterns() {
        return Err(Error::invalid(
            "dataset",
            format!(
                "gesture ids {present:?} do not match the checkpoint's {:?}",
                meta.gesture_ids
            ),
        ));
    }
    let train_subjects = meta.train_subjects.clone();
    let (train_ds, short) = WindowedDataset::build(
        Arc::clone(&recordings),
        params,
        meta.gesture_ids.clone(),
        train_subjects.clone(),
        |s| train_subjects.contains(&s),
    )?;
    let (test_ds, _) = WindowedDataset::build(
        recordings,
        params,
        meta.gesture_ids.clone(),
        train_subjects.clone(),
        |s| !train_subjects.contains(&s),
    )?;
    let (train_ds, test_ds) = match &meta.normalization {
        Some(stats) => (train_ds.normalize(stats.clone())?, test_ds.normalize(stats.clone())?),
        None => (train_ds, test_ds),
    };
    if model.input_spec().channels != train_ds.channels() {
        return Err(Error::invalid(
            "dataset",
            format!(
                "{} channels, checkpoint expects {}",
                train_ds.channels(),
                model.input_spec().channels
            ),
        ));
    }
    Ok(FoldSplit {
        fold: meta.fold.unwrap_or(0),
        train: train_ds,
        test: test_ds,
        short_recordings: short,
    })
}

/// Evaluates a checkpoint on its fold's test (or training) subjects and
/// writes `{split}_report.csv` and `{split}_report.json` into `out`.
pub fn cmd_eval(ckpt: &Path, data: &DataSource, split: Split, out: &Path) -> Result<EvalReport> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let fold = checkpoint_split(&meta, &model, data.load()?, None)?;
    let ds = match split {
        Split::Train => &fold.train,
        Split::Test => &fold.test,
    };
    let mut report = evaluate(&model, ds, split.name())?;
    report.fold = meta.fold;
    create_dir(out)?;
    report.write_csv(&out.join(format!("{}_report.csv", split.name())))?;
    report.write_json(&out.join(format!("{}_report.json", split.name())))?;
    Ok(report)
}

/// Exports eval-mode features of a split to `features_{which}.csv` and their
/// 2-D principal-component projection to `projection_{which}.csv`.
pub fn cmd_embed(ckpt: &Path, data: &DataSource, which: FeatureKind, split: Split, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (model, meta) = checkpoint::load(ckpt)?;
    if which == FeatureKind::Subject && !model.variant().has_subject_branch() {
        return Err(Error::UnsupportedVariant {
            variant: model.variant().to_string(),
            what: "subject-specific features".into(),
        });
    }
    let fold = checkpoint_split(&meta, &model, data.load()?, None)?;
    let ds = match split {
        Split::Train => &fold.train,
        Split::Test => &fold.test,
    };
    let (features, width) = features_of(&model, ds, which)?;
    let subjects: Vec<u32> = ds.infos().iter().map(|i| i.subject_id).collect();
    let gestures: Vec<u32> = ds.infos().iter().map(|i| i.gesture_id).collect();
    let name = match which {
        FeatureKind::Original => "original",
        FeatureKind::Pattern => "pattern",
        FeatureKind::Subject => "subject",
    };
    create_dir(out)?;
    let fpath = out.join(format!("features_{name}.csv"));
    write_feature_csv(&fpath, &subjects, &gestures, &features, width, "f")?;
    let proj = pca_project(&features, width, 2)?;
    let ppath = out.join(format!("projection_{name}.csv"));
    write_feature_csv(&ppath, &subjects, &gestures, &proj.coords, 2, "pca")?;
    Ok((fpath, ppath))
}

/// Fold-level metrics of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub accuracy: Vec<f64>,
    pub f1: Vec<f64>,
    pub auroc: Vec<Option<f64>>,
    pub dbi: Vec<Option<f64>>,
}

impl VariantSummary {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }
}

/// Methods × folds grid of test metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalSummary {
    pub folds: Vec<usize>,
    pub variants: Vec<VariantSummary>,
}

impl CrossvalSummary {
    /// Rows `method,metric,fold…,mean`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["method".to_string(), "metric".to_string()];
        header.extend(self.folds.iter().map(|f| format!("fold{f}")));
        header.push("mean".into());
        w.write_record(&header)?;
        for v in &self.variants {
            let rows: [(&str, Vec<Option<f64>>); 4] = [
                ("accuracy", v.accuracy.iter().copied().map(Some).collect()),
                ("f1", v.f1.iter().copied().map(Some).collect()),
                ("auroc", v.auroc.clone()),
                ("dbi", v.dbi.clone()),
            ];
            for (metric, vals) in rows {
                let mut rec = vec![v.variant.to_string(), metric.to_string()];
                rec.extend(vals.iter().map(|x| x.map(|x| x.to_string()).unwrap_or_default()));
                let defined: Vec<f64> = vals.iter().flatten().copied().collect();
                rec.push(if defined.len() == vals.len() {
                    (defined.iter().sum::<f64>() / defined.len() as f64).to_string()
                } else {
                    String::new()
                });
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Trains and evaluates every selected fold for each variant, writing
/// per-fold artifacts plus `summary.csv` and `summary.json`.
pub fn cmd_crossval(spec: &ExperimentSpec, variants: &[Variant]) -> Result<CrossvalSummary> {
    spec.validate()?;
    if variants.is_empty() {
        return Err(Error::invalid("variants", "none selected"));
    }
    let recordings = spec.data.load()?;
    let folds = spec.folds.folds(spec.n_folds)?;
    let mut summary = CrossvalSummary {
        folds: folds.clone(),
        variants: Vec::new(),
    };
    for &variant in variants {
        let mut vs = VariantSummary {
            variant,
            accuracy: Vec::new(),
            f1: Vec::new(),
            auroc: Vec::new(),
            dbi: Vec::new(),
        };
        for &fold in &folds {
            let run = run_fold(&recordings, spec, variant, fold).map_err(|e| fold_error(fold, e))?;
            let dir = fold_dir(&spec.out, variant, fold);
            create_dir(&dir)?;
            checkpoint::save(&dir.join("model.ckpt"), &run.model, &run.meta)?;
            write_log_csv(&dir.join("train_log.csv"), &run.log)?;
            run.report.write_csv(&dir.join("test_report.csv"))?;
            run.report.write_json(&dir.join("test_report.json"))?;
            log::info!("{variant} fold {fold}: accuracy {:.4}", run.report.accuracy);
            vs.accuracy.push(run.report.accuracy);
            vs.f1.push(run.report.f1);
            vs.auroc.push(run.report.auroc);
            vs.dbi.push(run.report.dbi);
        }
        summary.variants.push(vs);
    }
    create_dir(&spec.out)?;
    summary.write_csv(&spec.out.join("summary.csv"))?;
    write_json(&spec.out.join("summary.json"), &summary)?;
    write_json(&spec.out.join("config.json"), spec)?;
    Ok(summary)
}
