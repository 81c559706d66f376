//! Confusion matrix and IoU metrics.

use crate::error::{bail, Result};

/// `K x K` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `None` for classes with neither support nor predictions.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            bail!(Dimension, "confusion matrix needs {} counts, got {}", k * k, counts.len());
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds predictions; pixels labelled `ignore_index` are skipped.
    pub fn update(&mut self, truth: &[i32], pred: &[i32], ignore_index: i32) -> Result<()> {
        if truth.len() != pred.len() {
            bail!(Dimension, "confusion update: {} labels vs {} predictions", truth.len(), pred.len());
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == ignore_index {
                continue;
            }
            let k = self.k as i32;
            if !(0..k).contains(&t) || !(0..k).contains(&p) {
                bail!(Data, "class index out of range: truth {t}, prediction {p}, classes {k}");
            }
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// `IoU_k = TP / (TP + FP + FN)`; the mean skips classes absent from
    /// both ground truth and predictions.
    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            bail!(Data, "mIoU of an empty confusion matrix is undefined");
        }
        let mut per_class = Vec::with_capacity(self.k);
        let mut diag = 0u64;
        for c in 0..self.k {
            let tp = self.get(c, c);
            diag += tp;
            let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
            let union = row + col - tp;
            per_class.push(if union == 0 { None } else { Some(tp as f64 / union as f64) });
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Metrics { per_class_iou: per_class, miou, pixel_acc: diag as f64 / total as f64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_is_perfect() {
        let m = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap().metrics().unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.per_class_iou[2], None);
    }

    #[test]
    fn two_class_example() {
        let m = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap().metrics().unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(0.5)]);
        assert_eq!(m.miou, 0.5);
    }

    #[test]
    fn all_wrong_is_zero() {
        let mut c = ConfusionMatrix::new(2);
        c.update(&[0, 0, 1, 1], &[1, 1, 0, 0], 255).unwrap();
        assert_eq!(c.metrics().unwrap().miou, 0.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(ConfusionMatrix::new(4).metrics().is_err());
    }

    #[test]
    fn ignore_and_range() {
        let mut c = ConfusionMatrix::new(2);
        c.update(&[255, 1], &[0, 1], 255).unwrap();
        assert_eq!(c.total(), 1);
        assert!(c.update(&[2], &[0], 255).is_err());
    }
}
