use serde::{Deserialize, Serialize};

use super::arch::BaseClassifier;
use super::optim::{OptimizerConfig, OptimizerState};
use super::tac::{Strategy, TacMode, TacModel};
use crate::autodiff::{Graph, Tensor, Var};
use crate::codebook::{distance, nearest_code};
use crate::data::{batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{codebook_tensor, combined_loss, mixup_batch, one_hot, Targets};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

/// Training statistics of one epoch. Loss, accuracy and distance are
/// averaged over the epoch's batches as they were seen (before each step);
/// under Mixup the reference label of a sample is its dominant class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub l_bin: Option<f64>,
    pub l_ce: Option<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub mean_correct_distance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub epoch: usize,
    pub error: f64,
}

fn check_dataset(ds: &Dataset, sample_shape: &[usize], num_classes: usize) -> Result<()> {
    if ds.sample_shape() != sample_shape {
        return Err(Error::dim(format!(
            "dataset samples {:?} vs model input {:?}",
            ds.sample_shape(),
            sample_shape
        )));
    }
    if let Some(&bad) = ds.labels().iter().find(|&&y| y >= num_classes) {
        return Err(Error::Input(format!("label {bad} outside the model's {num_classes} classes")));
    }
    Ok(())
}

fn all_inputs(ds: &Dataset) -> Result<Tensor> {
    ds.gather(&(0..ds.len()).collect::<Vec<_>>())
        .map(|(x, _)| x)
}

fn first_argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0
}

/// Accuracy of the TAC prediction with the training metric on the full profile.
pub(crate) fn tac_accuracy(model: &TacModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Input("accuracy of an empty dataset".into()));
    }
    let preds = model.predict(&all_inputs(ds)?, Some(ds.labels()), &[Strategy::tac(model.loss.metric)])?;
    Ok(preds.iter().filter(|p| p.correct() == Some(true)).count() as f64 / ds.len() as f64)
}

fn gradients(g: &Graph, loss: Var, vars: &[Var], epoch: usize, batch: usize) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    vars.iter()
        .map(|&v| {
            let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            if t.all_finite() {
                Ok(t)
            } else {
                Err(Error::Divergence {
                    epoch,
                    batch,
                    detail: "non-finite gradient".into(),
                })
            }
        })
        .collect()
}

fn finite_loss(value: f64, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence {
            epoch,
            batch,
            detail: format!("loss is {value}"),
        })
    }
}

pub fn fit(model: &mut TacModel, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    fit_with(model, train, val, cfg, |_, _| Ok(()))
}

/// Trains the mode's trainable parameters with the combined TAC loss.
/// `on_epoch` runs after every epoch with the updated model.
pub fn fit_with(
    model: &mut TacModel,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TacModel, &EpochLog) -> Result<()>,
) -> Result<TrainLog> {
    model.loss.validate()?;
    let k = model.num_classes();
    let shape = model.base.arch.input_shape.clone();
    check_dataset(train, &shape, k)?;
    if let Some(v) = val {
        check_dataset(v, &shape, k)?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, &model.trainable_mut())?;
    let mut mix_rng = SplitMix64::stream(cfg.seed, "mixup");
    let codes = codebook_tensor(&model.book);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut bin_sum, mut ce_sum, mut dist_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut correct = 0usize;
        for (b, idx) in batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64).iter().enumerate() {
            let (x, labels) = train.gather(idx)?;
            let (x, targets) = if model.loss.mixup > 0.0 && idx.len() >= 2 {
                let y = one_hot(&labels, k)?;
                let c = codes.select_rows(&labels)?;
                let m = mixup_batch(&x, &y, &c, model.loss.mixup, &mut mix_rng)?;
                let t = m.targets();
                (m.inputs, t)
            } else {
                (x, Targets::from_labels(&labels, &model.book)?)
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let input = g.constant(x);
            let (profiles, _) = model.forward_profiles(&mut g, input, &bound)?;
            let parts = combined_loss(&mut g, profiles, &model.book, &targets, &model.loss, model.transform)?;
            let n = idx.len() as f64;
            loss_sum += n * finite_loss(g.value(parts.total).item(), epoch, b + 1)?;
            bin_sum += n * g.value(parts.bin).item();
            ce_sum += n * g.value(parts.ce).item();
            let values = g.value(profiles);
            for i in 0..idx.len() {
                let point: Vec<f64> = values.row(i).iter().map(|&v| model.transform.apply_value(v)).collect();
                let reference = first_argmax(targets.weights.row(i));
                let (pred, _) = nearest_code(&point, &model.book, model.loss.metric)?;
                correct += (pred == reference) as usize;
                dist_sum += distance(&point, &model.book.code_f64(reference), model.loss.metric)?;
            }
            let vars = model.trainable_vars(&bound);
            let grads = gradients(&g, parts.total, &vars, epoch, b + 1)?;
            opt.apply(&mut model.trainable_mut(), &grads)?;
        }
        let n = train.len() as f64;
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n,
            l_bin: Some(bin_sum / n),
            l_ce: Some(ce_sum / n),
            train_accuracy: correct as f64 / n,
            val_accuracy: match val {
                Some(v) if !v.is_empty() => Some(tac_accuracy(model, v)?),
                _ => None,
            },
            mean_correct_distance: Some(dist_sum / n),
        };
        on_epoch(model, &entry)?;
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Trains the base network and its head with softmax cross-entropy.
pub fn fit_base(base: &mut BaseClassifier, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    let k = base
        .arch
        .head
        .ok_or_else(|| Error::Spec("base training needs a classification head".into()))?;
    check_dataset(train, &base.arch.input_shape, k)?;
    if let Some(v) = val {
        check_dataset(v, &base.arch.input_shape, k)?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, &base.params.iter_mut().collect::<Vec<_>>())?;
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64).iter().enumerate() {
            let (x, labels) = train.gather(idx)?;
            let mut g = Graph::new();
            let params = base.bind(&mut g, true);
            let input = g.constant(x);
            let logits = base.forward(&mut g, &params, input)?.logits.expect("head present");
            let logp = g.log_softmax(logits, 1)?;
            let y = g.constant(one_hot(&labels, k)?);
            let picked = g.mul(logp, y)?;
            let total = g.sum_all(picked);
            let loss = g.scale(total, -1.0 / idx.len() as f64);
            loss_sum += idx.len() as f64 * finite_loss(g.value(loss).item(), epoch, b + 1)?;
            let z = g.value(logits);
            correct += (0..idx.len()).filter(|&i| first_argmax(z.row(i)) == labels[i]).count();
            let grads = gradients(&g, loss, &params, epoch, b + 1)?;
            opt.apply(&mut base.params.iter_mut().collect::<Vec<_>>(), &grads)?;
        }
        let n = train.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            l_bin: None,
            l_ce: None,
            train_accuracy: correct as f64 / n,
            val_accuracy: match val {
                Some(v) if !v.is_empty() => Some(head_accuracy(base, v)?),
                _ => None,
            },
            mean_correct_distance: None,
        });
    }
    Ok(log)
}

pub(crate) fn head_accuracy(base: &BaseClassifier, ds: &Dataset) -> Result<f64> {
    let z = base.logits(&all_inputs(ds)?)?;
    let correct = (0..ds.len()).filter(|&i| first_argmax(z.row(i)) == ds.labels()[i]).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains the projection stacks of an add-on model and verifies that every
/// base parameter is bitwise unchanged afterwards.
pub fn fit_addon(model: &mut TacModel, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    if model.mode != TacMode::Addon {
        return Err(Error::Spec("fit_addon needs an add-on model".into()));
    }
    let before = super::params_checksum(&model.base.params);
    let snapshot = model.base.params.clone();
    let log = fit(model, train, val, cfg)?;
    let unchanged = snapshot
        .iter()
        .zip(&model.base.params)
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    if !unchanged || before != super::params_checksum(&model.base.params) {
        return Err(Error::Numeric("frozen base parameters changed during add-on training".into()));
    }
    Ok(log)
}

/// Trains on labels replaced by seeded uniform draws and records the
/// in-sample TAC error before training (epoch 0) and after every epoch.
pub fn capacity_test(model: &mut TacModel, ds: &Dataset, cfg: &TrainConfig, label_seed: u64) -> Result<Vec<CapacityPoint>> {
    let k = model.num_classes();
    let mut rng = SplitMix64::stream(label_seed, "capacity-labels");
    let labels = (0..ds.len()).map(|_| rng.below(k)).collect();
    let mut random = ds.with_labels(labels, k)?;
    random.split = Split::Train;
    let mut series = vec![CapacityPoint {
        epoch: 0,
        error: 1.0 - tac_accuracy(model, &random)?,
    }];
    fit_with(model, &random, None, cfg, |m, e| {
        series.push(CapacityPoint {
            epoch: e.epoch,
            error: 1.0 - tac_accuracy(m, &random)?,
        });
        Ok(())
    })?;
    Ok(series)
}
