//! Confusion-matrix segmentation metrics.

use std::fmt::Write as _;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accumulates a `K×K` confusion matrix (rows: ground truth, columns:
/// prediction). Accumulation is associative, so per-image matrices can be
/// merged in any order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_index: u8,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: u8) -> Self {
        Self { num_classes, ignore_index, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, predictions: &Array3<u8>, labels: &Array3<u8>) -> Result<()> {
        if predictions.dim() != labels.dim() {
            return Err(Error::Shape(format!(
                "predictions {:?} vs labels {:?}",
                predictions.dim(),
                labels.dim()
            )));
        }
        let k = self.num_classes;
        for (&p, &l) in predictions.iter().zip(labels) {
            if l == self.ignore_index {
                continue;
            }
            if l as usize >= k {
                return Err(Error::InvalidLabel { label: l, num_classes: k });
            }
            if p as usize >= k {
                return Err(Error::InvalidLabel { label: p, num_classes: k });
            }
            self.counts[l as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn to_array(&self) -> Array2<u64> {
        Array2::from_shape_vec((self.num_classes, self.num_classes), self.counts.clone()).expect("square")
    }

    pub fn report(&self) -> Result<MetricReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let k = self.num_classes;
        let mut iou = Vec::with_capacity(k);
        let mut class_acc = Vec::with_capacity(k);
        let mut correct = 0;
        for c in 0..k {
            let tp = self.get(c, c);
            let gt: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let pred: u64 = (0..k).map(|t| self.get(t, c)).sum();
            let union = gt + pred - tp;
            correct += tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            class_acc.push((gt > 0).then(|| tp as f64 / gt as f64));
        }
        Ok(MetricReport {
            miou: mean_present(&iou),
            pixel_accuracy: correct as f64 / total as f64,
            mean_class_accuracy: mean_present(&class_acc),
            per_class_iou: iou,
            confusion: (0..k).map(|t| (0..k).map(|p| self.get(t, p)).collect()).collect(),
        })
    }
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Scores in `[0, 1]`. `per_class_iou[c]` is `None` when class `c` is absent
/// from both predictions and ground truth; such classes are left out of the
/// mIoU mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub mean_class_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<8} {:>8}", "class", "IoU").unwrap();
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c:<8} {:>8.4}", v).unwrap(),
                None => writeln!(out, "{c:<8} {:>8}", "-").unwrap(),
            }
        }
        writeln!(out, "{:<8} {:>8.4}", "mIoU", self.miou).unwrap();
        writeln!(out, "{:<8} {:>8.4}", "pixAcc", self.pixel_accuracy).unwrap();
        writeln!(out, "{:<8} {:>8.4}", "mAcc", self.mean_class_accuracy).unwrap();
        out
    }
}

/// One-shot evaluation of a list of `(prediction, label)` maps.
pub fn evaluate<'a, I>(pairs: I, num_classes: usize, ignore_index: u8) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a Array3<u8>, &'a Array3<u8>)>,
{
    let mut cm = ConfusionMatrix::new(num_classes, ignore_index);
    for (p, l) in pairs {
        cm.add(p, l)?;
    }
    cm.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_score_one() {
        let l = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y + x) % 3) as u8);
        let r = evaluate([(&l, &l)], 3, 255).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.pixel_accuracy, 1.0);
    }

    #[test]
    fn constant_prediction_on_balanced_pair() {
        let l = Array3::from_shape_fn((1, 2, 4), |(_, _, x)| u8::from(x >= 2));
        let p = Array3::zeros((1, 2, 4));
        let r = evaluate([(&p, &l)], 2, 255).unwrap();
        assert!((r.miou - 0.25).abs() < 1e-12);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
    }

    #[test]
    fn empty_set_is_an_error() {
        let l = Array3::from_elem((1, 2, 2), 255u8);
        assert!(matches!(evaluate([(&l, &l)], 2, 255), Err(Error::EmptyEvaluation)));
        let none: Vec<(&Array3<u8>, &Array3<u8>)> = Vec::new();
        assert!(matches!(evaluate(none, 2, 255), Err(Error::EmptyEvaluation)));
    }

    fn brute_force(pairs: &[(Array3<u8>, Array3<u8>)], k: usize) -> (f64, f64) {
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let (mut inter, mut union) = (0, 0);
            for (p, l) in pairs {
                for (&a, &b) in p.iter().zip(l) {
                    if b == 255 {
                        continue;
                    }
                    inter += usize::from(a == c && b == c);
                    union += usize::from(a == c || b == c);
                }
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let (mut ok, mut n) = (0, 0);
        for (p, l) in pairs {
            for (&a, &b) in p.iter().zip(l) {
                if b != 255 {
                    n += 1;
                    ok += usize::from(a == b);
                }
            }
        }
        (ious.iter().sum::<f64>() / ious.len() as f64, ok as f64 / n as f64)
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(Array3<u8>, Array3<u8>)>)> {
        (2usize..6, 1usize..5).prop_flat_map(|(k, n)| {
            let map = move || {
                proptest::collection::vec(prop_oneof![9 => 0..k as u8, 1 => Just(255u8)], 30)
                    .prop_map(|v| Array3::from_shape_vec((1, 5, 6), v).unwrap())
            };
            let pred = move || proptest::collection::vec(0..k as u8, 30).prop_map(|v| Array3::from_shape_vec((1, 5, 6), v).unwrap());
            (Just(k), proptest::collection::vec((pred(), map()), n))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_partition_invariant((k, pairs) in instance()) {
            let valid = pairs.iter().flat_map(|(_, l)| l.iter()).any(|&l| l != 255);
            prop_assume!(valid);
            let r = evaluate(pairs.iter().map(|(p, l)| (p, l)), k, 255).unwrap();
            let (miou, acc) = brute_force(&pairs, k);
            prop_assert!((r.miou - miou).abs() < 1e-12);
            prop_assert!((r.pixel_accuracy - acc).abs() < 1e-12);

            let mut merged = ConfusionMatrix::new(k, 255);
            for (p, l) in pairs.iter().rev() {
                let mut one = ConfusionMatrix::new(k, 255);
                one.add(p, l).unwrap();
                merged.merge(&one);
            }
            prop_assert_eq!(merged.report().unwrap(), r);
        }
    }
}
