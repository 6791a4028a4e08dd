//! Occupancy evaluation: per-class IoU, mean IoU over semantic classes,
//! and scene-completion IoU over binary occupancy, plus the JSON report.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;

/// Confusion counts with rows = ground-truth class, columns = predicted
/// class.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.count(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|g| self.count(g, c)).sum()
    }
}

/// Accumulate confusion counts over voxels whose ground-truth class is not
/// ignored. Grids must share a spec.
pub fn confusion(pred: &VoxelGrid, gt: &VoxelGrid, ignore: &[u8]) -> Result<ConfusionMatrix> {
    if pred.spec != gt.spec {
        return Err(Error::shape(
            "confusion",
            "prediction and ground truth use different grid specs",
        ));
    }
    let num_classes = pred.class_count().max(gt.class_count()) as usize;
    let mut counts = vec![0u64; num_classes * num_classes];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if ignore.contains(&g) {
            continue;
        }
        counts[(g as usize) * num_classes + p as usize] += 1;
    }
    Ok(ConfusionMatrix {
        num_classes,
        counts,
    })
}

/// IoU of one class: `TP / (TP + FP + FN)`. `None` when the class is
/// absent from both prediction and ground truth.
pub fn iou(m: &ConfusionMatrix, class: usize) -> Option<f64> {
    let tp = m.count(class, class);
    let fp = m.col_sum(class) - tp;
    let fn_ = m.row_sum(class) - tp;
    if tp + fp + fn_ == 0 {
        return None;
    }
    Some(tp as f64 / (tp + fp + fn_) as f64)
}

/// Mean IoU over semantic classes (free excluded) present in ground truth
/// or prediction.
pub fn miou(m: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = (1..m.num_classes()).filter_map(|c| iou(m, c)).collect();
    if ious.is_empty() {
        return Err(Error::invalid("miou", "no semantic class present"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn sc_iou_counts(pred: &VoxelGrid, gt: &VoxelGrid, ignore: &[u8]) -> Result<(u64, u64)> {
    if pred.spec != gt.spec {
        return Err(Error::shape(
            "sc_iou",
            "prediction and ground truth use different grid specs",
        ));
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if ignore.contains(&g) {
            continue;
        }
        let (po, go) = (p != 0, g != 0);
        if po && go {
            intersection += 1;
        }
        if po || go {
            union += 1;
        }
    }
    Ok((intersection, union))
}

/// Scene-completion IoU: intersection over union of binary occupied space.
pub fn sc_iou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    let (intersection, union) = sc_iou_counts(pred, gt, &[])?;
    if union == 0 {
        return Err(Error::invalid("sc_iou", "both grids are fully free"));
    }
    Ok(intersection as f64 / union as f64)
}

/// Scene-completion IoU skipping voxels whose ground-truth class is
/// ignored.
pub fn sc_iou_ignoring(pred: &VoxelGrid, gt: &VoxelGrid, ignore: &[u8]) -> Result<f64> {
    let (intersection, union) = sc_iou_counts(pred, gt, ignore)?;
    if union == 0 {
        return Err(Error::invalid("sc_iou", "both grids are fully free"));
    }
    Ok(intersection as f64 / union as f64)
}

/// Evaluation summary serialized by the `eval` command.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub sc_iou: f64,
    pub miou: f64,
    pub per_class: BTreeMap<String, Option<f64>>,
}

/// Build the full report. `class_names[c]` names class id `c` (index 0 is
/// the free class and is excluded from the per-class table); classes
/// beyond the table get a generated name.
pub fn evaluate(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    ignore: &[u8],
    class_names: &[String],
) -> Result<EvalReport> {
    let m = confusion(pred, gt, ignore)?;
    let mut per_class = BTreeMap::new();
    for c in 1..m.num_classes() {
        if ignore.contains(&(c as u8)) {
            continue;
        }
        let name = class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class_{c}"));
        per_class.insert(name, iou(&m, c));
    }
    Ok(EvalReport {
        sc_iou: sc_iou_ignoring(pred, gt, ignore)?,
        miou: miou(&m)?,
        per_class,
    })
}
