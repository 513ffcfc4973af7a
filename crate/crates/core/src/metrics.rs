//! Dataset-level segmentation metrics from one accumulated confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, IGNORE};
use crate::reliability::ConfusionMatrix;

pub const CSV_HEADER: &str = "split,epoch,miou,per_class_ious,dice,jaccard,specificity,sensitivity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub specificity: Option<f64>,
    pub sensitivity: Option<f64>,
    pub pixel_count: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalReport {
    /// Builds the report from a matrix with ground truth on rows.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        if cm.total() == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let per_class_iou = cm.class_iou();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        let mut report = EvalReport {
            miou,
            per_class_iou,
            dice: None,
            jaccard: None,
            specificity: None,
            sensitivity: None,
            pixel_count: cm.total(),
        };
        if cm.num_classes() == 2 {
            // Foreground is class 1.
            let (tn, fp, fn_, tp) = (cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1));
            report.dice = ratio(2 * tp, 2 * tp + fp + fn_);
            report.jaccard = ratio(tp, tp + fp + fn_);
            report.specificity = ratio(tn, tn + fp);
            report.sensitivity = ratio(tp, tp + fn_);
        }
        Ok(report)
    }

    pub fn csv_row(&self, split: &str, epoch: usize) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let ious = self
            .per_class_iou
            .iter()
            .map(|v| opt(*v))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{split},{epoch},{:.6},{ious},{},{},{},{}",
            self.miou,
            opt(self.dice),
            opt(self.jaccard),
            opt(self.specificity),
            opt(self.sensitivity)
        )
    }
}

/// Adds one (ground truth, prediction) pair, skipping IGNORE ground truth.
pub fn accumulate_eval(gt: &LabelMap, pred: &LabelMap, cm: &mut ConfusionMatrix) -> Result<()> {
    if gt.dims() != pred.dims() {
        return Err(Error::ShapeMismatch(format!(
            "ground truth {:?} vs prediction {:?}",
            gt.dims(),
            pred.dims()
        )));
    }
    let n = cm.num_classes();
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        if g == IGNORE {
            continue;
        }
        for v in [g, p] {
            if v as usize >= n {
                return Err(Error::LabelOutOfRange {
                    label: v,
                    num_classes: n,
                });
            }
        }
        cm.increment(g as usize, p as usize);
    }
    Ok(())
}

pub fn evaluate(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        accumulate_eval(g, p, &mut cm)?;
    }
    EvalReport::from_confusion(&cm)
}
