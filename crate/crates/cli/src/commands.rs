//! The experiment commands. Each one reads its inputs, writes its outputs
//! under an output directory and returns what it wrote for programmatic use.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tac_core::codebook::{CodeBook, DistanceMetric};
use tac_core::data::{
    holdout_split, load_mnist_idx, mnist_train_val, synth_blobs, train_test_split, write_mnist_idx, BlobSpec, Dataset,
    Normalization, NormalizationMode, Split,
};
use tac_core::error::Error as CoreError;
use tac_core::metrics::{
    accuracy_rejection_curve, auroc, curves_to_csv, detection_rate_at_eer, eer, trapezoid_area, voc_curve, CurveSet,
    ScoreSet,
};
use tac_core::model::{
    capacity_test, fit_addon, fit_base, fit_with, params_checksum, AddonSpec, BaseClassifier, CapacityPoint, EpochLog,
    Scope, ScoredPrediction, Strategy, TacMode, TacModel, TrainConfig, TrainLog,
};
use tac_core::rng::SplitMix64;

use crate::config::{ArchitectureName, RunConfig, Task};
use crate::error::{CliError, Result};
use crate::output::{cell, defined, parse_cell, Outputs};

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

// ------------------------------------------------------------------ data

/// Raw (unnormalized) splits of a run. Labels of `train`, `val` and `test`
/// are in the model's class indexing; `ood` keeps the original labels.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

impl Splits {
    /// Validation data for training logs: the validation split, or the
    /// test split when none was carved out.
    pub fn monitor(&self) -> &Dataset {
        if self.val.is_empty() {
            &self.test
        } else {
            &self.val
        }
    }
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let holdout = d.holdout.iter().copied().collect();
    match cfg.task {
        Task::Blobs => {
            let spec = BlobSpec {
                num_classes: d.num_classes.unwrap_or(0),
                dim: d.dim.unwrap_or(0),
                per_class: d.per_class.unwrap_or(0),
                separation: d.separation.unwrap_or(0.0),
                noise: d.noise.unwrap_or(0.0),
                seed: cfg.seed,
                far_classes: d.far_classes,
                far_scale: d.far_scale.unwrap_or(3.0),
            };
            let all = synth_blobs(&spec)?;
            let (train, test) = train_test_split(&all, d.test_count.unwrap_or(0), cfg.seed)?;
            let s = holdout_split(&train, &test, &holdout, d.val_count.unwrap_or(0), cfg.seed)?;
            Ok(Splits {
                train: s.train,
                val: s.val,
                test: s.test,
                ood: s.ood,
            })
        }
        Task::Mnist => {
            let dir = d.mnist_dir.as_deref().expect("validated");
            let [tri, trl, tei, tel] = MNIST_FILES.map(|f| dir.join(f));
            let full = at_path(&tri, load_mnist_idx(&tri, &trl))?;
            let mut test = at_path(&tei, load_mnist_idx(&tei, &tel))?;
            test.split = Split::Test;
            if d.holdout.is_empty() && d.val_count.is_none() {
                let (train, val) = mnist_train_val(&full)?;
                let ood = test.subset(&[], Split::Ood);
                return Ok(Splits { train, val, test, ood });
            }
            let val_count = d.val_count.unwrap_or(tac_core::data::MNIST_VAL_COUNT);
            let s = holdout_split(&full, &test, &holdout, val_count, cfg.seed)?;
            Ok(Splits {
                train: s.train,
                val: s.val,
                test: s.test,
                ood: s.ood,
            })
        }
    }
}

/// Writes one split as `<name>.csv` (flat samples) or as an IDX pair
/// `<name>-images.idx` / `<name>-labels.idx` (image samples).
fn write_split(out: &mut Outputs, name: &str, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Ok(());
    }
    if ds.sample_shape().len() == 1 {
        out.write(&format!("{name}.csv"), ds.to_csv().as_bytes())?;
    } else {
        let (img, lab) = (format!("{name}-images.idx"), format!("{name}-labels.idx"));
        if let Some(parent) = out.path(&img).parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        write_mnist_idx(ds, &out.path(&img), &out.path(&lab))?;
        out.record(&img)?;
        out.record(&lab)?;
    }
    Ok(())
}

/// Loads a split written by `train`: a `.csv` file, or the prefix of an IDX pair.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e == "csv") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let max_label = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').next()?.parse::<usize>().ok())
            .max()
            .unwrap_or(0);
        return Ok(Dataset::from_csv(&text, max_label + 1, Split::Test)?);
    }
    let prefix = path.display().to_string();
    let images = PathBuf::from(format!("{prefix}-images.idx"));
    at_path(&images, load_mnist_idx(&images, Path::new(&format!("{prefix}-labels.idx"))))
}

fn reshape(ds: &Dataset, shape: &[usize]) -> Result<Dataset> {
    if ds.sample_shape() == shape {
        return Ok(ds.clone());
    }
    if ds.sample_len() != shape.iter().product::<usize>() {
        return Err(CliError::config(format!(
            "samples of shape {:?} do not fit model input {shape:?}",
            ds.sample_shape()
        )));
    }
    let mut out = Dataset::new(ds.inputs().to_vec(), shape.to_vec(), ds.labels().to_vec(), ds.num_classes(), ds.split)?;
    out.normalization = ds.normalization.clone();
    Ok(out)
}

/// Reshapes raw samples to the model input and applies its normalization.
pub fn model_inputs(model: &TacModel, ds: &Dataset) -> Result<Dataset> {
    let ds = reshape(ds, &model.base.arch.input_shape)?;
    match &model.normalization {
        Some(n) => Ok(n.apply(&ds)?),
        None => Ok(ds),
    }
}

/// Attaches the file path to I/O failures reported by the core crate.
fn at_path<T>(path: &Path, r: tac_core::error::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CoreError::Io(source) => CliError::io(path, source),
        other => other.into(),
    })
}

fn load_model(path: &Path) -> Result<TacModel> {
    at_path(path, TacModel::load(path))
}

fn all_indices(ds: &Dataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

fn first_argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0
}

/// Accuracy of the classification head.
pub fn head_accuracy(base: &BaseClassifier, ds: &Dataset) -> Result<f64> {
    let (x, labels) = ds.gather(&all_indices(ds))?;
    let z = base.logits(&x)?;
    let correct = labels.iter().enumerate().filter(|(i, &y)| first_argmax(z.row(*i)) == y).count();
    Ok(correct as f64 / ds.len() as f64)
}

// ------------------------------------------------------------------ train

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseSummary {
    pub source: String,
    pub checksum_before: String,
    pub checksum_after: String,
    pub head_accuracy_before: f64,
    pub head_accuracy_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub task: Task,
    pub mode: TacMode,
    pub epochs: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// `val`, or `test` when no validation split exists.
    pub val_source: String,
    pub final_train_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    pub base: Option<BaseSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TacModel,
    pub log: TrainLog,
    pub summary: TrainSummary,
    pub checkpoint: PathBuf,
}

pub fn train_log_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,loss,l_bin,l_ce,train_accuracy,val_accuracy,mean_correct_distance\n");
    for e in &log.epochs {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch,
            cell(Some(e.loss)),
            cell(e.l_bin),
            cell(e.l_ce),
            cell(Some(e.train_accuracy)),
            cell(e.val_accuracy),
            cell(e.mean_correct_distance)
        )
        .unwrap();
    }
    s
}

fn progress(quiet: bool, tag: &str, e: &EpochLog) {
    if !quiet {
        let val = e.val_accuracy.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default();
        eprintln!("[{tag}] epoch {} loss {:.5} train_acc {:.4}{val}", e.epoch, e.loss, e.train_accuracy);
    }
}

fn normalization_mode(task: Task) -> NormalizationMode {
    match task {
        Task::Blobs => NormalizationMode::PerFeature,
        Task::Mnist => NormalizationMode::Global,
    }
}

fn flatten_for(cfg: &RunConfig, ds: &Dataset) -> Result<Dataset> {
    match cfg.architecture.name {
        ArchitectureName::Mlp => reshape(ds, &[ds.sample_len()]),
        ArchitectureName::Conv => Ok(ds.clone()),
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
    }
}

/// Builds the untrained model of a config. Add-on models attach to
/// `base`; scratch models initialize their own network.
pub fn build_model(cfg: &RunConfig, input_shape: &[usize], base: Option<BaseClassifier>) -> Result<TacModel> {
    let book = CodeBook::generate(cfg.model_classes(), cfg.codebook.length, cfg.codebook.seed)?;
    match cfg.mode {
        TacMode::Scratch => {
            let arch = cfg.architecture(input_shape)?;
            let base = BaseClassifier::init(arch, &mut SplitMix64::stream(cfg.seed, "init"))?;
            Ok(TacModel::scratch(base, &cfg.taps(), book, cfg.loss.clone(), cfg.transform)?)
        }
        TacMode::Addon => {
            let a = cfg.addon.as_ref().expect("validated");
            let base = base.ok_or_else(|| CliError::config("add-on model needs a base"))?;
            let spec = AddonSpec {
                kind: a.projection,
                slice_size: a.slice_size,
            };
            let mut rng = SplitMix64::stream(cfg.seed, "projection");
            Ok(TacModel::addon(base, &cfg.taps(), spec, book, cfg.loss.clone(), cfg.transform, &mut rng)?)
        }
    }
}

/// Trains the model of `cfg` and writes `checkpoint.json`, `train_log.csv`,
/// `train_summary.json`, the config and the raw data splits under `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<TrainOutcome> {
    let mut out = Outputs::new(&cfg.out_dir)?;
    let splits = load_splits(cfg)?;
    let raw_train = flatten_for(cfg, &splits.train)?;
    let raw_monitor = flatten_for(cfg, splits.monitor())?;
    let input_shape = raw_train.sample_shape().to_vec();

    let (base, norm, base_summary) = match cfg.mode {
        TacMode::Scratch => (None, Normalization::fit(&raw_train, normalization_mode(cfg.task))?, None),
        TacMode::Addon => {
            let a = cfg.addon.as_ref().expect("validated");
            let (base, norm, source) = match &a.base_checkpoint {
                Some(path) => {
                    let (base, norm) = at_path(path, BaseClassifier::load(path))?;
                    let norm = match norm {
                        Some(n) => n,
                        None => Normalization::fit(&raw_train, normalization_mode(cfg.task))?,
                    };
                    (base, norm, path.display().to_string())
                }
                None => {
                    let norm = Normalization::fit(&raw_train, normalization_mode(cfg.task))?;
                    let arch = cfg.architecture(&input_shape)?;
                    let mut base = BaseClassifier::init(arch, &mut SplitMix64::stream(cfg.seed, "init"))?;
                    let base_cfg = TrainConfig {
                        epochs: a.base_epochs,
                        optimizer: a.base_optimizer.unwrap_or(cfg.optimizer),
                        ..train_config(cfg)
                    };
                    let log = fit_base(&mut base, &norm.apply(&raw_train)?, Some(&norm.apply(&raw_monitor)?), &base_cfg)?;
                    log.epochs.iter().for_each(|e| progress(quiet, "base", e));
                    out.write("base_log.csv", train_log_csv(&log).as_bytes())?;
                    let path = out.path("base_checkpoint.json");
                    base.save(Some(&norm), &path)?;
                    out.record("base_checkpoint.json")?;
                    (base, norm, "base_checkpoint.json".to_string())
                }
            };
            if base.arch.head != Some(cfg.model_classes()) || base.arch.input_shape != input_shape {
                return Err(CliError::config(format!(
                    "base network (input {:?}, head {:?}) does not fit this task (input {input_shape:?}, {} classes)",
                    base.arch.input_shape,
                    base.arch.head,
                    cfg.model_classes()
                )));
            }
            let monitor = norm.apply(&raw_monitor)?;
            let summary = BaseSummary {
                source,
                checksum_before: params_checksum(&base.params),
                checksum_after: String::new(),
                head_accuracy_before: head_accuracy(&base, &monitor)?,
                head_accuracy_after: f64::NAN,
            };
            (Some(base), norm, Some(summary))
        }
    };

    let train = norm.apply(&raw_train)?;
    let monitor = norm.apply(&raw_monitor)?;
    let mut model = build_model(cfg, &input_shape, base)?;
    model.normalization = Some(norm);
    let tcfg = train_config(cfg);
    let log = match cfg.mode {
        TacMode::Scratch => fit_with(&mut model, &train, Some(&monitor), &tcfg, |_, e| {
            progress(quiet, "tac", e);
            Ok(())
        })?,
        TacMode::Addon => {
            let log = fit_addon(&mut model, &train, Some(&monitor), &tcfg)?;
            log.epochs.iter().for_each(|e| progress(quiet, "addon", e));
            log
        }
    };
    let base_summary = match base_summary {
        Some(mut b) => {
            b.checksum_after = params_checksum(&model.base.params);
            b.head_accuracy_after = head_accuracy(&model.base, &monitor)?;
            Some(b)
        }
        None => None,
    };

    let last = log.epochs.last();
    let summary = TrainSummary {
        task: cfg.task,
        mode: cfg.mode,
        epochs: cfg.epochs,
        train_samples: train.len(),
        val_samples: monitor.len(),
        val_source: if splits.val.is_empty() { "test" } else { "val" }.into(),
        final_train_accuracy: last.map(|e| e.train_accuracy),
        final_val_accuracy: last.and_then(|e| e.val_accuracy),
        base: base_summary,
    };
    // The saved config omits the output directory so reruns elsewhere match byte for byte.
    let saved = RunConfig {
        out_dir: PathBuf::from("."),
        ..cfg.clone()
    };
    out.write("config.toml", saved.to_toml().as_bytes())?;
    let checkpoint = out.path("checkpoint.json");
    model.save(&checkpoint)?;
    out.record("checkpoint.json")?;
    out.write("train_log.csv", train_log_csv(&log).as_bytes())?;
    out.write_json("train_summary.json", &summary)?;
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test), ("ood", &splits.ood)] {
        write_split(&mut out, &format!("data/{name}"), ds)?;
    }
    out.finish("train")?;
    Ok(TrainOutcome {
        model,
        log,
        summary,
        checkpoint,
    })
}

// ------------------------------------------------------------------ eval

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub samples: usize,
    pub accuracy: f64,
    pub errors: usize,
    /// Error-detection metrics; `null` when every prediction is right (or wrong).
    pub auroc: Option<f64>,
    pub detection_rate: Option<f64>,
    pub eer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub predictions: Vec<ScoredPrediction>,
    pub summary: BTreeMap<String, StrategySummary>,
}

/// Runs `f` on a ScoreSet, reporting single-class sets as undefined.
fn optional_metric(s: &Result<ScoreSet, CoreError>, f: fn(&ScoreSet) -> tac_core::error::Result<f64>) -> Result<Option<f64>> {
    match s {
        Ok(s) => match f(s) {
            Ok(v) => Ok(defined(v)),
            Err(CoreError::Degenerate(_)) => Ok(None),
            Err(e) => Err(e.into()),
        },
        Err(CoreError::Degenerate(_)) => Ok(None),
        Err(e) => Err(CliError::Core(CoreError::Input(e.to_string()))),
    }
}

pub fn summarize(preds: &[ScoredPrediction]) -> Result<StrategySummary> {
    let correct = preds.iter().filter(|p| p.correct() == Some(true)).count();
    let set = ScoreSet::errors(preds);
    Ok(StrategySummary {
        samples: preds.len(),
        accuracy: correct as f64 / preds.len() as f64,
        errors: preds.len() - correct,
        auroc: optional_metric(&set, auroc)?,
        detection_rate: optional_metric(&set, detection_rate_at_eer)?,
        eer: optional_metric(&set, eer)?,
    })
}

/// Default strategies: TAC with the checkpoint's training metric, plus MSP
/// and MLS when the model has a head.
pub fn default_strategies(model: &TacModel) -> Vec<Strategy> {
    let mut s = vec![Strategy::tac(model.loss.metric)];
    if model.base.arch.head.is_some() {
        s.extend([Strategy::Msp, Strategy::Mls]);
    }
    s
}

/// Applies a scope to the TAC strategies that did not name one.
pub fn with_scope(strategies: &[Strategy], scope: Scope) -> Vec<Strategy> {
    strategies
        .iter()
        .map(|&s| match s {
            Strategy::Tac { metric, scope: Scope::Full } => Strategy::Tac { metric, scope },
            other => other,
        })
        .collect()
}

pub fn predictions_csv(preds: &[ScoredPrediction]) -> String {
    let mut s = String::from("sample_id,label,strategy,predicted,confidence\n");
    for p in preds {
        let label = p.label.map(|y| y.to_string()).unwrap_or_default();
        writeln!(s, "{},{label},{},{},{}", p.sample_id, p.strategy, p.predicted, cell(Some(p.confidence))).unwrap();
    }
    s
}

pub fn parse_predictions(text: &str) -> Result<Vec<ScoredPrediction>> {
    let mut lines = text.lines();
    if lines.next() != Some("sample_id,label,strategy,predicted,confidence") {
        return Err(CliError::config("predictions csv has an unexpected header"));
    }
    let bad = |ln: usize, what: &str| CliError::config(format!("predictions csv line {}: {what}", ln + 2));
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(ln, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(ln, "expected 5 fields"));
            }
            Ok(ScoredPrediction {
                sample_id: f[0].parse().map_err(|_| bad(ln, "bad sample id"))?,
                label: if f[1].is_empty() {
                    None
                } else {
                    Some(f[1].parse().map_err(|_| bad(ln, "bad label"))?)
                },
                strategy: f[2].parse().map_err(|_| bad(ln, "bad strategy"))?,
                predicted: f[3].parse().map_err(|_| bad(ln, "bad prediction"))?,
                confidence: parse_cell(f[4])
                    .map_err(|e| bad(ln, &e))?
                    .ok_or_else(|| bad(ln, "missing confidence"))?,
            })
        })
        .collect()
}

/// Groups predictions by strategy, in order of first appearance.
pub fn by_strategy(preds: &[ScoredPrediction]) -> Vec<(Strategy, Vec<ScoredPrediction>)> {
    let mut groups: Vec<(Strategy, Vec<ScoredPrediction>)> = Vec::new();
    for p in preds {
        match groups.iter_mut().find(|(s, _)| *s == p.strategy) {
            Some((_, g)) => g.push(p.clone()),
            None => groups.push((p.strategy, vec![p.clone()])),
        }
    }
    groups
}

fn check_labels(model: &TacModel, ds: &Dataset) -> Result<()> {
    let k = model.num_classes();
    match ds.labels().iter().find(|&&y| y >= k) {
        Some(y) => Err(CliError::config(format!("label {y} is outside the model's {k} classes"))),
        None => Ok(()),
    }
}

/// Scores `data` with every strategy and writes `predictions.csv` and `summary.json`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, strategies: &[Strategy], scope: Scope, out_dir: &Path) -> Result<EvalOutcome> {
    let model = load_model(checkpoint)?;
    let ds = model_inputs(&model, &load_dataset(data)?)?;
    check_labels(&model, &ds)?;
    let strategies = if strategies.is_empty() {
        default_strategies(&model)
    } else {
        strategies.to_vec()
    };
    let strategies = with_scope(&strategies, scope);
    let (x, labels) = ds.gather(&all_indices(&ds))?;
    let predictions = model.predict(&x, Some(&labels), &strategies)?;
    let mut summary = BTreeMap::new();
    for (s, group) in by_strategy(&predictions) {
        summary.insert(s.to_string(), summarize(&group)?);
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("predictions.csv", predictions_csv(&predictions).as_bytes())?;
    out.write_json("summary.json", &summary)?;
    out.finish("eval")?;
    Ok(EvalOutcome { predictions, summary })
}

// ------------------------------------------------------------------ reject

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectAreas {
    /// Normalized trapezoid area of the accuracy-rejection curve.
    pub accuracy_rejection: f64,
    /// Normalized trapezoid areas of the fold-averaged VOC curves over omega.
    pub voc_train: f64,
    pub voc_test: f64,
}

#[derive(Debug, Clone)]
pub struct RejectOutcome {
    pub voc: Vec<CurveSet>,
    pub accuracy_rejection: CurveSet,
    pub areas: BTreeMap<String, RejectAreas>,
}

/// VOC and accuracy-rejection analysis of every strategy in a predictions
/// file. Writes `voc.csv` (per fold and mean), `voc_thresholds.csv`,
/// `accuracy_rejection.csv` and `areas.json`.
pub fn cmd_reject(
    predictions: &Path,
    omegas: &[f64],
    fractions: &[f64],
    folds: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<RejectOutcome> {
    let text = std::fs::read_to_string(predictions).map_err(|e| CliError::io(predictions, e))?;
    let preds = parse_predictions(&text)?;
    let groups = by_strategy(&preds);
    if groups.is_empty() {
        return Err(CliError::config("predictions file is empty"));
    }
    let mut fold_curves: Vec<CurveSet> = (0..folds)
        .map(|f| CurveSet::new("voc", "omega", omegas.to_vec(), &f.to_string(), Some(seed)))
        .collect::<tac_core::error::Result<_>>()?;
    let mut mean = CurveSet::new("voc", "omega", omegas.to_vec(), "mean", Some(seed))?;
    let mut acc = CurveSet::new("accuracy-rejection", "fraction", fractions.to_vec(), "all", None)?;
    let mut thresholds = String::from("strategy,fold,omega,threshold,train_value,test_value\n");
    let mut areas = BTreeMap::new();
    for (strategy, group) in &groups {
        let voc = voc_curve(group, omegas, folds, seed)?;
        for (f, c) in voc.per_fold.iter().enumerate() {
            fold_curves[f].push(format!("{strategy}:train"), c.get("train").expect("series").to_vec())?;
            fold_curves[f].push(format!("{strategy}:test"), c.get("test").expect("series").to_vec())?;
        }
        let (tr, te) = (voc.mean.get("train").expect("series"), voc.mean.get("test").expect("series"));
        mean.push(format!("{strategy}:train"), tr.to_vec())?;
        mean.push(format!("{strategy}:test"), te.to_vec())?;
        for s in &voc.selections {
            writeln!(
                thresholds,
                "{strategy},{},{},{},{},{}",
                s.fold,
                cell(Some(s.omega)),
                cell(Some(s.threshold)),
                cell(Some(s.train.value)),
                cell(Some(s.test.value))
            )
            .unwrap();
        }
        let (curve, area) = accuracy_rejection_curve(group, fractions)?;
        acc.push(strategy.to_string(), curve.get("accuracy").expect("series").to_vec())?;
        areas.insert(
            strategy.to_string(),
            RejectAreas {
                accuracy_rejection: area,
                voc_train: trapezoid_area(omegas, tr),
                voc_test: trapezoid_area(omegas, te),
            },
        );
    }
    let mut voc = fold_curves;
    voc.push(mean);
    let mut out = Outputs::new(out_dir)?;
    out.write("voc.csv", curves_to_csv(&voc)?.as_bytes())?;
    out.write("voc_thresholds.csv", thresholds.as_bytes())?;
    out.write("accuracy_rejection.csv", curves_to_csv(std::slice::from_ref(&acc))?.as_bytes())?;
    out.write_json("areas.json", &areas)?;
    out.finish("reject")?;
    Ok(RejectOutcome {
        voc,
        accuracy_rejection: acc,
        areas,
    })
}

// ------------------------------------------------------------------ ood

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodMetric {
    pub auroc: f64,
    pub detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodSummary {
    pub scope: String,
    pub in_samples: usize,
    pub ood_samples: usize,
    pub metrics: BTreeMap<String, OodMetric>,
    /// Set when L-inf beats L1 on AUROC; that ordering warrants inspection.
    /// `null` unless both metrics were evaluated.
    pub linf_above_l1: Option<bool>,
}

/// Out-of-distribution detection: positives are the OOD pool, scored by the
/// negated TAC confidence. Writes `ood_scores.csv` and `ood_summary.json`.
pub fn cmd_ood(
    checkpoint: &Path,
    in_data: &Path,
    ood_data: &Path,
    metrics: &[DistanceMetric],
    scope: Scope,
    out_dir: &Path,
) -> Result<OodSummary> {
    let model = load_model(checkpoint)?;
    let inside = model_inputs(&model, &load_dataset(in_data)?)?;
    let pool = model_inputs(&model, &load_dataset(ood_data)?)?;
    let metrics = if metrics.is_empty() {
        DistanceMetric::ALL.to_vec()
    } else {
        metrics.to_vec()
    };
    let strategies: Vec<Strategy> = metrics.iter().map(|&metric| Strategy::Tac { metric, scope }).collect();
    let (xi, _) = inside.gather(&all_indices(&inside))?;
    let (xo, _) = pool.gather(&all_indices(&pool))?;
    let pi = model.predict(&xi, None, &strategies)?;
    let po = model.predict(&xo, None, &strategies)?;
    let (ni, no) = (inside.len(), pool.len());
    let mut csv = String::from("strategy,source,sample_id,score\n");
    let mut summary = OodSummary {
        scope: match scope {
            Scope::Full => "full".into(),
            Scope::Layer(l) => l.to_string(),
        },
        in_samples: ni,
        ood_samples: no,
        metrics: BTreeMap::new(),
        linf_above_l1: None,
    };
    for (j, (metric, strategy)) in metrics.iter().zip(&strategies).enumerate() {
        let ci: Vec<f64> = pi[j * ni..(j + 1) * ni].iter().map(|p| p.confidence).collect();
        let co: Vec<f64> = po[j * no..(j + 1) * no].iter().map(|p| p.confidence).collect();
        let set = ScoreSet::ood(&ci, &co)?;
        for (source, conf) in [("in", &ci), ("ood", &co)] {
            for (i, c) in conf.iter().enumerate() {
                writeln!(csv, "{strategy},{source},{i},{}", cell(Some(-c))).unwrap();
            }
        }
        summary.metrics.insert(
            metric.to_string(),
            OodMetric {
                auroc: auroc(&set)?,
                detection_rate: detection_rate_at_eer(&set)?,
            },
        );
    }
    if let (Some(l1), Some(linf)) = (summary.metrics.get("l1"), summary.metrics.get("linf")) {
        summary.linf_above_l1 = Some(linf.auroc > l1.auroc);
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("ood_scores.csv", csv.as_bytes())?;
    out.write_json("ood_summary.json", &summary)?;
    out.finish("ood")?;
    Ok(summary)
}

// ------------------------------------------------------------------ capacity

/// Random-label memorization on the first `capacity.samples` training
/// samples. Writes `capacity.csv` with the in-sample error per epoch.
pub fn cmd_capacity(cfg: &RunConfig, quiet: bool) -> Result<Vec<CapacityPoint>> {
    let cap = cfg
        .capacity
        .as_ref()
        .ok_or_else(|| CliError::config("capacity needs a [capacity] section"))?;
    if cfg.mode != TacMode::Scratch {
        return Err(CliError::config("the capacity test trains a scratch model"));
    }
    let splits = load_splits(cfg)?;
    let train = flatten_for(cfg, &splits.train)?;
    if cap.samples > train.len() {
        return Err(CliError::config(format!(
            "capacity.samples {} exceeds the {} training samples",
            cap.samples,
            train.len()
        )));
    }
    let subset = train.subset(&(0..cap.samples).collect::<Vec<_>>(), Split::Train);
    let norm = Normalization::fit(&subset, normalization_mode(cfg.task))?;
    let subset = norm.apply(&subset)?;
    let mut model = build_model(cfg, subset.sample_shape(), None)?;
    let series = capacity_test(&mut model, &subset, &train_config(cfg), cap.label_seed.unwrap_or(cfg.seed))?;
    let mut csv = String::from("epoch,error\n");
    for p in &series {
        if !quiet {
            eprintln!("[capacity] epoch {} error {:.4}", p.epoch, p.error);
        }
        writeln!(csv, "{},{}", p.epoch, cell(Some(p.error))).unwrap();
    }
    let mut out = Outputs::new(&cfg.out_dir)?;
    out.write("capacity.csv", csv.as_bytes())?;
    out.finish("capacity")?;
    Ok(series)
}

// ------------------------------------------------------------------ layers

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    /// Layer number, or `full` for the whole profile.
    pub scope: String,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub detection_rate: Option<f64>,
}

/// Per-layer prediction: each tapped layer's sub-profile against the
/// matching code columns, then the full profile. Writes `layers.csv`.
pub fn cmd_layers(checkpoint: &Path, data: &Path, metric: Option<DistanceMetric>, out_dir: &Path) -> Result<Vec<LayerRow>> {
    let model = load_model(checkpoint)?;
    let ds = model_inputs(&model, &load_dataset(data)?)?;
    check_labels(&model, &ds)?;
    let metric = metric.unwrap_or(model.loss.metric);
    let mut scopes: Vec<Scope> = model.spec.layers().iter().map(|l| Scope::Layer(l.id)).collect();
    scopes.push(Scope::Full);
    let strategies: Vec<Strategy> = scopes.iter().map(|&scope| Strategy::Tac { metric, scope }).collect();
    let (x, labels) = ds.gather(&all_indices(&ds))?;
    let preds = model.predict(&x, Some(&labels), &strategies)?;
    let mut rows = Vec::new();
    let mut csv = String::from("scope,accuracy,auroc,detection_rate\n");
    for (scope, group) in scopes.iter().zip(preds.chunks(ds.len())) {
        let s = summarize(group)?;
        let row = LayerRow {
            scope: match scope {
                Scope::Full => "full".into(),
                Scope::Layer(l) => l.to_string(),
            },
            accuracy: s.accuracy,
            auroc: s.auroc,
            detection_rate: s.detection_rate,
        };
        writeln!(csv, "{},{},{},{}", row.scope, cell(Some(row.accuracy)), cell(row.auroc), cell(row.detection_rate)).unwrap();
        rows.push(row);
    }
    let mut out = Outputs::new(out_dir)?;
    out.write("layers.csv", csv.as_bytes())?;
    out.finish("layers")?;
    Ok(rows)
}

// ------------------------------------------------------------------ codes

/// Generates a codebook and writes it as JSON to `out`.
pub fn cmd_gen_codes(num_classes: usize, code_length: usize, seed: u64, out: &Path) -> Result<CodeBook> {
    let book = CodeBook::generate(num_classes, code_length, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    book.save(out)?;
    Ok(book)
}
