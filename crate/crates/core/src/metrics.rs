//! Confusion matrix, per-class IoU and mIoU.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::ClassMap;

/// C×C pixel counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Build from row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape(
                "ConfusionMatrix::from_counts",
                format!("{} counts for {num_classes} classes", counts.len()),
            ));
        }
        Ok(ConfusionMatrix { num_classes, counts })
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

    /// Count every pixel whose truth is not `ignore_id`.
    pub fn accumulate(&mut self, pred: &ClassMap, truth: &ClassMap, ignore_id: u8) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(Error::shape(
                "ConfusionMatrix::accumulate",
                format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims()),
            ));
        }
        let c = self.num_classes;
        // validate first so a bad map leaves the matrix untouched
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == ignore_id {
                continue;
            }
            if usize::from(t) >= c || usize::from(p) >= c {
                return Err(Error::domain(
                    "ConfusionMatrix::accumulate",
                    format!("class id {} out of range for {c} classes", t.max(p)),
                ));
            }
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t != ignore_id {
                self.counts[usize::from(t) * c + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn iou(&self) -> Result<IouReport> {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::domain("iou", "no class is present in truth or prediction"));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouReport { per_class, miou })
    }
}

/// Per-class IoU (`None` when a class never occurs) and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IouReport {
    /// Plain-text table: one column per class plus mIoU, values in percent.
    pub fn table(&self, names: &[&str]) -> String {
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        for (k, _) in self.per_class.iter().enumerate() {
            let name = names.get(k).copied().unwrap_or("?");
            let _ = write!(out, "{name:>width$} ");
        }
        let _ = writeln!(out, "{:>width$}", "mIoU");
        for v in &self.per_class {
            match v {
                Some(v) => {
                    let _ = write!(out, "{:>width$.2} ", v * 100.0);
                }
                None => {
                    let _ = write!(out, "{:>width$} ", "-");
                }
            }
        }
        let _ = writeln!(out, "{:>width$.2}", self.miou * 100.0);
        out
    }
}
