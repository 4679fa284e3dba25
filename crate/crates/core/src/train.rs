//! Optimisation steps, the epoch loop and evaluation.

use crate::autograd::Graph;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, ensure_binary, evaluate_loss};
use crate::metrics::{aggregate, binarize, evaluate_image, ImageEval, MetricsReport};
use crate::network::Model;
use crate::nn::BN_MOMENTUM;
use crate::optim::Optimizer;
use crate::param::Ctx;
use crate::tensor::Tensor;

fn check_batch(model: &Model, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<()> {
    let (is, ms) = (images.shape(), masks.shape());
    let want = model.input_shape(is.n());
    if is != want {
        return Err(Error::dim("train_step", format!("images {is:?}, model expects {want:?}")));
    }
    if ms.n() != is.n() || ms.c() != 1 || ms.h() != is.h() || ms.w() != is.w() {
        return Err(Error::dim("train_step", format!("masks {ms:?} vs images {is:?}")));
    }
    ensure_binary(masks)
}

/// Forward in training mode, backprop the combined loss, update batch-norm
/// running statistics (unless the learning rate is zero) and apply one
/// optimiser step. Returns the loss measured before the update.
pub fn train_step(model: &mut Model, opt: &mut Optimizer, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<f32> {
    check_batch(model, images, masks)?;
    let mut g = Graph::<f32>::new();
    let mut cx = Ctx::new(&mut g, &model.store, true);
    let x = cx.graph.input(images.clone());
    let out = model.forward(&mut cx, x)?;
    let loss = combined_loss(cx.graph, out.probs, masks)?;
    let vars = cx.param_vars().to_vec();
    let bn = cx.take_bn_updates();
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Validation(format!("non-finite loss {loss_value}")));
    }
    g.backward(loss)?;
    let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();
    // A zero learning rate freezes everything, running statistics included.
    if opt.lr() != 0.0 {
        model.store.apply_bn_updates(bn, BN_MOMENTUM);
    }
    opt.step(&mut model.store, &grads)?;
    Ok(loss_value)
}

/// Settings for [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub augment: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_dice";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.epoch, self.train_loss, self.val_loss, self.val_dice)
    }
}

/// Training order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut data::sample_rng(seed, epoch, "#order"));
    order
}

/// Train for `settings.epochs`, evaluating on `val` after every epoch. The
/// learning rate follows the per-epoch decay schedule. `on_epoch` sees each
/// log entry together with the model as it stands after that epoch.
pub fn fit(
    model: &mut Model,
    opt: &mut Optimizer,
    train: &[Sample],
    val: &[Sample],
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("training needs non-empty train and validation sets".into()));
    }
    if settings.batch == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    let mut logs = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        opt.set_epoch(epoch);
        let order = epoch_order(train.len(), settings.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(settings.batch) {
            let items: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &train[i];
                    if settings.augment {
                        data::augment(s, &mut data::sample_rng(settings.seed, epoch, &s.id))
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = items.iter().collect();
            let (x, y) = data::batch(&refs)?;
            total += train_step(model, opt, &x, &y)? as f64 * chunk.len() as f64;
        }
        let ev = evaluate(model, val, settings.batch)?;
        let log = EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss: ev.mean_loss,
            val_dice: ev.report.lesion().dsc,
        };
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_image: Vec<(String, ImageEval)>,
    /// Mean over images of the per-image combined loss.
    pub mean_loss: f64,
}

/// Eval-mode predictions thresholded at 0.5 and scored against the masks.
pub fn evaluate(model: &Model, samples: &[Sample], batch: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = data::batch(&refs)?;
        check_batch(model, &x, &y)?;
        let probs = model.predict(&x)?;
        for (i, s) in chunk.iter().enumerate() {
            let p = probs.item(i);
            loss += evaluate_loss(&p, &s.mask)?.combined;
            per_image.push((s.id.clone(), evaluate_image(&binarize(&p), &s.mask)?));
        }
    }
    let evals: Vec<ImageEval> = per_image.iter().map(|(_, e)| *e).collect();
    Ok(Evaluation { report: aggregate(&evals)?, per_image, mean_loss: loss / samples.len() as f64 })
}
