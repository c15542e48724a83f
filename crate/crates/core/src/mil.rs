//! Multi-class MIL loss over per-class heatmaps, the image-level pretraining
//! loss, and mask inference.
//!
//! For an image with label bag `L` (always containing background), each label
//! picks the coarse pixel where its own softmax probability peaks, and the
//! loss is the mean negative log probability over those picks. Every other
//! pixel contributes nothing. The picks are treated as constants during
//! backward, so gradients flow only through the softmax columns at the
//! selected points.

use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::kernels::{bilinear_upsample_forward, softmax_channels_forward};
use crate::autograd::{first_argmax, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::net::ScoreStack;
use crate::tensor::Tensor;

/// Guards `ln` against an underflowed probability.
pub const LOG_FLOOR: f64 = 1e-300;

/// Image-level label set. Always contains background (0).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelBag(BTreeSet<usize>);

impl LabelBag {
    pub fn new(labels: impl IntoIterator<Item = usize>, num_fg_classes: usize) -> Result<Self> {
        let set: BTreeSet<usize> = labels.into_iter().collect();
        if !set.contains(&0) {
            return Err(Error::Invalid(format!(
                "label bag {:?} is missing background (0)",
                set
            )));
        }
        if let Some(&bad) = set.iter().find(|&&l| l > num_fg_classes) {
            return Err(Error::Invalid(format!(
                "label {} out of range for {} foreground classes",
                bad, num_fg_classes
            )));
        }
        Ok(LabelBag(set))
    }

    /// Background plus the given foreground labels.
    pub fn with_foreground(
        fg: impl IntoIterator<Item = usize>,
        num_fg_classes: usize,
    ) -> Result<Self> {
        Self::new(std::iter::once(0).chain(fg), num_fg_classes)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.contains(&label)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        match self.0.iter().next_back() {
            Some(&max) if max >= channels => Err(shape_err!(
                "label {} has no channel in a {}-class stack",
                max,
                channels
            )),
            _ => Ok(()),
        }
    }
}

/// Softmax-normalized class probabilities `[num_classes, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbStack(Tensor);

impl ProbStack {
    pub fn from_scores(scores: &ScoreStack) -> Result<Self> {
        Ok(ProbStack(softmax_channels_forward(scores.tensor())?))
    }

    /// Wraps probabilities that are already normalized per pixel.
    pub fn from_probabilities(probs: Tensor) -> Result<Self> {
        let (c, h, w) = probs.dims3()?;
        let plane = h * w;
        for p in 0..plane {
            let total: f64 = (0..c).map(|ch| probs.data()[ch * plane + p]).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "probabilities at pixel {} sum to {}",
                    p, total
                )));
            }
        }
        if probs.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("probability outside [0, 1]".into()));
        }
        Ok(ProbStack(probs))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Coarse-grid coordinates: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

/// One arg-max location per label in the bag.
pub type SelectedPoints = BTreeMap<usize, Point>;

/// Per-label arg-max of the label's own probability map (first in row-major
/// order on ties). Labels outside the bag are ignored.
pub fn select_max_points(probs: &Tensor, bag: &LabelBag) -> Result<SelectedPoints> {
    let (c, h, w) = probs.dims3()?;
    bag.check_channels(c)?;
    let plane = h * w;
    Ok(bag
        .labels()
        .map(|l| {
            let idx = first_argmax(&probs.data()[l * plane..(l + 1) * plane]);
            (l, Point { x: idx % w, y: idx / w })
        })
        .collect())
}

pub struct MilLoss {
    pub loss: Var,
    pub points: SelectedPoints,
}

/// `-(1/|L|) * sum_l ln p_l(x_l, y_l)` over probability var `probs`.
pub fn mil_loss(graph: &mut Graph, probs: Var, bag: &LabelBag) -> Result<MilLoss> {
    let points = select_max_points(graph.value(probs), bag)?;
    let (_, h, w) = graph.value(probs).dims3()?;
    let indices = points
        .iter()
        .map(|(&l, p)| (l * h + p.y) * w + p.x)
        .collect();
    let picked = graph.gather(probs, indices)?;
    let logs = graph.ln_floor(picked, LOG_FLOOR);
    let mean = graph.mean(logs);
    Ok(MilLoss {
        loss: graph.scale(mean, -1.0),
        points,
    })
}

/// Softmax over raw scores followed by [`mil_loss`].
pub fn mil_loss_from_scores(graph: &mut Graph, scores: Var, bag: &LabelBag) -> Result<MilLoss> {
    let probs = graph.softmax_channels(scores)?;
    mil_loss(graph, probs, bag)
}

/// Global max over each foreground channel followed by per-class binary
/// logistic loss against bag membership. Background is excluded.
pub fn image_label_loss(graph: &mut Graph, scores: Var, bag: &LabelBag) -> Result<Var> {
    let (c, _, _) = graph.value(scores).dims3()?;
    if c < 2 {
        return Err(shape_err!("image-level loss needs a foreground channel"));
    }
    bag.check_channels(c)?;
    let peaks = graph.channel_max(scores)?;
    let fg = graph.gather(peaks, (1..c).collect())?;
    let targets = (1..c)
        .map(|l| if bag.contains(l) { 1.0 } else { 0.0 })
        .collect();
    graph.bce_with_logits(fg, targets)
}

/// Full-resolution per-pixel cross-entropy against a ground-truth mask, with
/// the coarse scores bilinearly upsampled to mask size first.
pub fn supervised_loss(graph: &mut Graph, scores: Var, mask: &SegmentationMask) -> Result<Var> {
    let up = graph.bilinear_upsample(scores, mask.height(), mask.width())?;
    let labels = mask.labels().iter().map(|&l| l as usize).collect();
    graph.pixel_cross_entropy(up, labels)
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height * width != labels.len() {
            return Err(shape_err!(
                "mask {}x{} given {} labels",
                height,
                width,
                labels.len()
            ));
        }
        Ok(SegmentationMask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        SegmentationMask {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Distinct labels present, ascending.
    pub fn present(&self) -> BTreeSet<usize> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..256).filter(|&l| seen[l]).collect()
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(l) => Err(Error::Invalid(format!(
                "mask label {} out of range for {} classes",
                l, num_classes
            ))),
            None => Ok(()),
        }
    }
}

/// Per-pixel argmax over channels (first channel wins ties).
pub fn argmax_channels(t: &Tensor) -> Result<SegmentationMask> {
    let (c, h, w) = t.dims3()?;
    if c > 256 {
        return Err(shape_err!("{} channels do not fit an 8-bit mask", c));
    }
    let plane = h * w;
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if t.data()[ch * plane + p] > t.data()[best * plane + p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    SegmentationMask::new(h, w, labels)
}

/// Softmax, bilinear upsampling of each probability channel to
/// `out_h x out_w`, then per-pixel argmax.
pub fn infer_mask(scores: &ScoreStack, out_h: usize, out_w: usize) -> Result<SegmentationMask> {
    let probs = softmax_channels_forward(scores.tensor())?;
    let up = bilinear_upsample_forward(&probs, out_h, out_w)?;
    argmax_channels(&up)
}
