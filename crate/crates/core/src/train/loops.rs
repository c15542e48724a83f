//! Training procedures and split evaluation.
//!
//! All loops run one image per step over a seeded shuffle that is redrawn
//! every epoch, so a run is a deterministic function of its inputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mil::{image_label_loss, infer_mask, mil_loss_from_scores, supervised_loss};
use crate::net::Network;
use crate::train::iu::{IuAccumulator, IuReport};
use crate::train::metrics::MetricsWriter;
use crate::train::optim::{sgd_step, OptimHyper, OptimState};

/// Which loss drives a training loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Global-max-pooled per-class logistic loss on image-level labels.
    ImageLabel,
    /// Max-point multi-class MIL loss on image-level labels.
    Mil,
    /// Per-pixel cross-entropy on full ground-truth masks.
    Supervised,
}

impl Objective {
    pub fn phase_name(self) -> &'static str {
        match self {
            Objective::ImageLabel => "pretrain",
            Objective::Mil => "train",
            Objective::Supervised => "supervised",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub hyper: OptimHyper,
    pub seed: u64,
    /// Validate every this many steps (and after the last one); 0 disables.
    pub val_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            hyper: OptimHyper::default(),
            seed: 0,
            val_every: 100,
        }
    }
}

pub struct TrainOutcome {
    pub net: Network,
    pub state: OptimState,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    /// `(iteration, mean IU)` for each validation pass.
    pub val_history: Vec<(u64, f64)>,
}

/// Forward, loss, backward and one SGD update on a single sample.
/// Returns the pre-update loss.
pub fn train_step(
    net: &mut Network,
    state: &mut OptimState,
    sample: &Sample,
    objective: Objective,
    hyper: &OptimHyper,
) -> Result<f64> {
    let mut graph = Graph::new();
    let image = graph.leaf(sample.image.clone());
    let pass = net.forward(&mut graph, image)?;
    let loss = match objective {
        Objective::ImageLabel => image_label_loss(&mut graph, pass.scores, &sample.bag)?,
        Objective::Mil => mil_loss_from_scores(&mut graph, pass.scores, &sample.bag)?.loss,
        Objective::Supervised => supervised_loss(&mut graph, pass.scores, &sample.mask)?,
    };
    let value = graph.value(loss).data()[0];
    let grads = graph.backward_scalar(loss)?;
    let grads: Vec<_> = pass.params.iter().map(|&p| grads.get(p)).collect();
    sgd_step(
        net.params_mut().iter_mut().map(|p| &mut p.value),
        &grads,
        state,
        hyper,
    )?;
    Ok(value)
}

/// Runs `options.hyper.iterations` steps of `objective` over `train`.
pub fn train(
    mut net: Network,
    mut state: OptimState,
    train: &[Sample],
    val: &[Sample],
    objective: Objective,
    options: &TrainOptions,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    options.hyper.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let iterations = options.hyper.iterations;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(iterations);
    let mut val_history = Vec::new();

    for step in 0..iterations {
        let pos = step % train.len();
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let loss = train_step(
            &mut net,
            &mut state,
            &train[order[pos]],
            objective,
            &options.hyper,
        )?;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!(
                "loss became non-finite at step {}",
                step + 1
            )));
        }
        losses.push(loss);
        let iter = (step + 1) as u64;
        if let Some(m) = metrics.as_deref_mut() {
            m.row(iter, objective.phase_name(), Some(loss), None)?;
        }
        let due = options.val_every > 0
            && !val.is_empty()
            && ((step + 1) % options.val_every == 0 || step + 1 == iterations);
        if due {
            let miu = evaluate(&net, val)?.mean;
            val_history.push((iter, miu));
            if let Some(m) = metrics.as_deref_mut() {
                m.row(iter, "val", None, Some(miu))?;
            }
        }
    }
    Ok(TrainOutcome {
        net,
        state,
        losses,
        val_history,
    })
}

/// Image-level pretraining from `net` with fresh optimizer state.
pub fn pretrain_classifier(
    net: Network,
    train_set: &[Sample],
    hyper: &OptimHyper,
    seed: u64,
    metrics: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    let state = OptimState::for_network(&net);
    let options = TrainOptions {
        hyper: *hyper,
        seed,
        val_every: 0,
    };
    train(net, state, train_set, &[], Objective::ImageLabel, &options, metrics)
}

/// MIL fine-tuning from `net` with fresh optimizer state.
pub fn train_mil(
    net: Network,
    train_set: &[Sample],
    val: &[Sample],
    options: &TrainOptions,
    metrics: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    let state = OptimState::for_network(&net);
    train(net, state, train_set, val, Objective::Mil, options, metrics)
}

/// Predicted full-resolution mask for one image.
pub fn predict_mask(net: &Network, sample: &Sample) -> Result<crate::mil::SegmentationMask> {
    let scores = net.predict(&sample.image)?;
    infer_mask(&scores, sample.mask.height(), sample.mask.width())
}

/// Mean IU of the network's masks against the split's ground truth.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<IuReport> {
    let mut acc = IuAccumulator::new(net.config().num_classes());
    for s in samples {
        acc.add(&predict_mask(net, s)?, &s.mask)?;
    }
    Ok(acc.report())
}

/// Fraction of all predicted pixels labelled background.
pub fn background_fraction(net: &Network, samples: &[Sample]) -> Result<f64> {
    let (mut bg, mut total) = (0usize, 0usize);
    for s in samples {
        let mask = predict_mask(net, s)?;
        bg += mask.labels().iter().filter(|&&l| l == 0).count();
        total += mask.labels().len();
    }
    Ok(if total == 0 { 0.0 } else { bg as f64 / total as f64 })
}
