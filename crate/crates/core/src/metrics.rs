use std::fmt::Write as _;
use std::path::Path;

use crate::error::{dim_err, Result};
use crate::losses::LabelMap;

/// `counts[gt * k + pred]`, ignoring pixels whose ground truth is ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub pixel_acc: f64,
    pub mean_acc: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(dim_err(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if gt.is_ignored(g) || pred.is_ignored(p) {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(dim_err(format!("class id beyond {} in metrics", self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    /// Integer counts add, so merge order does not matter.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn metrics(&self) -> SegmentationMetrics {
        let k = self.k;
        let gt_total: Vec<u64> = (0..k).map(|g| (0..k).map(|p| self.count(g, p)).sum()).collect();
        let pred_total: Vec<u64> = (0..k).map(|p| (0..k).map(|g| self.count(g, p)).sum()).collect();
        let correct: u64 = (0..k).map(|c| self.count(c, c)).sum();
        let valid: u64 = gt_total.iter().sum();

        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let union = gt_total[c] + pred_total[c] - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        let recalls: Vec<f64> = (0..k)
            .filter(|&c| gt_total[c] > 0)
            .map(|c| self.count(c, c) as f64 / gt_total[c] as f64)
            .collect();
        let mean_acc = if recalls.is_empty() { 0.0 } else { recalls.iter().sum::<f64>() / recalls.len() as f64 };
        let pixel_acc = if valid == 0 { 0.0 } else { correct as f64 / valid as f64 };
        SegmentationMetrics { miou, pixel_acc, mean_acc, per_class_iou }
    }
}

pub fn segmentation_metrics(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<SegmentationMetrics> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}

/// CSV report: `class_id,class_name,iou` rows, then a `mIoU,pixel_acc,mean_acc`
/// header and its values. Absent classes print `nan`.
pub fn report_csv(m: &SegmentationMetrics, class_names: &[&str]) -> String {
    let mut out = String::from("class_id,class_name,iou\n");
    for (c, iou) in m.per_class_iou.iter().enumerate() {
        let name = class_names.get(c).copied().unwrap_or("unknown");
        match iou {
            Some(v) => writeln!(out, "{c},{name},{v:.6}").unwrap(),
            None => writeln!(out, "{c},{name},nan").unwrap(),
        }
    }
    out.push_str("mIoU,pixel_acc,mean_acc\n");
    writeln!(out, "{:.6},{:.6},{:.6}", m.miou, m.pixel_acc, m.mean_acc).unwrap();
    out
}

pub fn write_report(path: &Path, m: &SegmentationMetrics, class_names: &[&str]) -> Result<()> {
    std::fs::write(path, report_csv(m, class_names))?;
    Ok(())
}
