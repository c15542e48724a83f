//! Intersection-over-union accumulated over a whole split.

use crate::error::{shape_err, Error, Result};
use crate::mil::SegmentationMask;

#[derive(Clone, Debug, PartialEq)]
pub struct IuReport {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a non-empty union; 0 if there are none.
    pub mean: f64,
}

/// Sums per-class intersection and union pixel counts across image pairs.
#[derive(Clone, Debug)]
pub struct IuAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
    pairs: usize,
}

impl IuAccumulator {
    pub fn new(num_classes: usize) -> Self {
        IuAccumulator {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            pairs: 0,
        }
    }

    pub fn add(&mut self, pred: &SegmentationMask, truth: &SegmentationMask) -> Result<()> {
        let index = self.pairs;
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(shape_err!(
                "pair {}: prediction {}x{} vs ground truth {}x{}",
                index,
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            ));
        }
        let n = self.intersection.len();
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(Error::Invalid(format!(
                    "pair {}: label {} out of range for {} classes",
                    index,
                    p.max(t),
                    n
                )));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        self.pairs += 1;
        Ok(())
    }

    pub fn report(&self) -> IuReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        IuReport {
            intersection: self.intersection.clone(),
            union: self.union.clone(),
            per_class,
            mean,
        }
    }
}

pub fn mean_iu(
    predictions: &[SegmentationMask],
    ground_truths: &[SegmentationMask],
    num_classes: usize,
) -> Result<IuReport> {
    if predictions.len() != ground_truths.len() {
        return Err(shape_err!(
            "{} predictions for {} ground truths",
            predictions.len(),
            ground_truths.len()
        ));
    }
    let mut acc = IuAccumulator::new(num_classes);
    for (p, t) in predictions.iter().zip(ground_truths) {
        acc.add(p, t)?;
    }
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> SegmentationMask {
        SegmentationMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_case_is_one_third() {
        let gt = mask(2, 2, &[0, 1, 0, 1]);
        let pred = mask(2, 2, &[0, 0, 1, 1]);
        let r = mean_iu(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.intersection, vec![1, 1]);
        assert_eq!(r.union, vec![3, 3]);
        assert_eq!(r.per_class, vec![Some(1.0 / 3.0), Some(1.0 / 3.0)]);
        assert_eq!(r.mean, 1.0 / 3.0);
    }

    #[test]
    fn identical_masks_score_one_and_absent_classes_are_excluded() {
        let gt = mask(2, 3, &[0, 0, 2, 2, 0, 0]);
        let r = mean_iu(&[gt.clone()], &[gt], 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn disjoint_foreground_scores_zero() {
        let gt = mask(1, 4, &[1, 1, 0, 0]);
        let pred = mask(1, 4, &[0, 0, 1, 1]);
        let r = mean_iu(&[pred], &[gt], 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.0));
    }

    #[test]
    fn accumulation_is_global_not_per_image() {
        // Image A: class 1 perfect on 1 pixel. Image B: class 1 predicted on 3
        // pixels, absent in truth. Global IU = 1/4; per-image mean would be 1/2.
        let a_gt = mask(1, 4, &[1, 0, 0, 0]);
        let b_gt = mask(1, 4, &[0, 0, 0, 0]);
        let b_pred = mask(1, 4, &[1, 1, 1, 0]);
        let r = mean_iu(&[a_gt.clone(), b_pred], &[a_gt, b_gt], 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.25));
    }

    #[test]
    fn shape_mismatch_names_pair() {
        let a = mask(1, 2, &[0, 0]);
        let b = mask(2, 1, &[0, 0]);
        let err = mean_iu(&[a.clone(), a], &[mask(1, 2, &[0, 1]), b], 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("pair 1"), "{err}");
    }
}
