//! Confusion matrices and the segmentation metrics derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_class: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_class: usize) -> Self {
        ConfusionMatrix { n_class, counts: vec![0; n_class * n_class] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_class + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::invalid(format!(
                "accumulate: {} truth labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let c = self.n_class;
        if let Some(&bad) = truth.iter().chain(pred).find(|&&v| v as usize >= c) {
            return Err(Error::invalid(format!("class {bad} outside [0, {c})")));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Cellwise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_class != self.n_class {
            return Err(Error::invalid("merging confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("metrics of an empty confusion matrix"));
        }
        let c = self.n_class;
        let diag: Vec<u64> = (0..c).map(|i| self.get(i, i)).collect();
        let rows: Vec<u64> = (0..c).map(|i| (0..c).map(|j| self.get(i, j)).sum()).collect();
        let cols: Vec<u64> = (0..c).map(|j| (0..c).map(|i| self.get(i, j)).sum()).collect();
        let per_class_acc: Vec<Option<f64>> =
            (0..c).map(|i| (rows[i] > 0).then(|| diag[i] as f64 / rows[i] as f64)).collect();
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|i| {
                let union = rows[i] + cols[i] - diag[i];
                (rows[i] + cols[i] > 0).then(|| diag[i] as f64 / union as f64)
            })
            .collect();
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Metrics {
            oa: diag.iter().sum::<u64>() as f64 / total as f64,
            macc: mean(&per_class_acc),
            miou: mean(&per_class_iou),
            per_class_acc,
            per_class_iou,
        })
    }
}

/// Classes excluded by the absent-class rule carry `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
}

impl Metrics {
    /// Aligned text table: OA, mIoU, mAcc, then one IoU column per class.
    pub fn table(&self, class_names: &[&str]) -> String {
        let mut header = vec!["OA".to_string(), "mIoU".into(), "mAcc".into()];
        header.extend(class_names.iter().map(|s| s.to_string()));
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut values = vec![pct(self.oa), pct(self.miou), pct(self.macc)];
        values.extend(self.per_class_iou.iter().map(|v| v.map_or("-".to_string(), pct)));
        let widths: Vec<usize> = header.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", line(&header), line(&values))
    }
}
