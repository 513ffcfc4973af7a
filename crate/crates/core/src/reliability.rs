//! Cross-window pseudo-label reliability.
//!
//! An image's score is the mean IoU of one confusion matrix accumulated over
//! all six window pairs of a patch group, comparing the argmax predictions
//! each window makes for the shared overlap pixels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ImageId;
use crate::error::{Error, Result};
use crate::geometry::{enumerate_pairs, GroupLayout, PatchGroup};
use crate::grid::{argmax_channels, ConfidenceMap, Grid, Image, LabelMap, IGNORE};
use crate::model::Segmenter;
use crate::rng::{stream_rng, Stream};

/// Square count matrix, rows indexed by the first prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.num_classes + col]
    }

    pub fn increment(&mut self, row: usize, col: usize) {
        self.counts[row * self.num_classes + col] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        (0..self.num_classes).map(|c| self.get(row, c)).sum()
    }

    pub fn col_sum(&self, col: usize) -> u64 {
        (0..self.num_classes).map(|r| self.get(r, col)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
    }

    pub fn transpose(&self) -> Self {
        let n = self.num_classes;
        let mut t = Self::new(n);
        for r in 0..n {
            for c in 0..n {
                t.counts[c * n + r] = self.get(r, c);
            }
        }
        t
    }

    /// Per-class IoU; `None` for classes absent from both axes.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Tallies `counts[pred_k][pred_l]` per pixel.
pub fn confusion_accumulate(pred_k: &LabelMap, pred_l: &LabelMap, into: &mut ConfusionMatrix) -> Result<()> {
    if pred_k.dims() != pred_l.dims() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {:?} vs {:?}",
            pred_k.dims(),
            pred_l.dims()
        )));
    }
    let n = into.num_classes();
    for (&a, &b) in pred_k.data().iter().zip(pred_l.data()) {
        for v in [a, b] {
            if v as usize >= n {
                return Err(Error::LabelOutOfRange {
                    label: v,
                    num_classes: n,
                });
            }
        }
        into.increment(a as usize, b as usize);
    }
    Ok(())
}

/// Mean IoU over classes with a nonzero union.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let present: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityScore {
    pub image_id: ImageId,
    pub score: f64,
}

/// Pairwise overlap confusion of four window predictions.
pub fn overlap_confusion(preds: &[LabelMap; 4], group: &PatchGroup, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for spec in enumerate_pairs(group, 6)? {
        let (k, l) = spec.pair;
        let yk = preds[k - 1].crop(&spec.local_k)?;
        let yl = preds[l - 1].crop(&spec.local_l)?;
        confusion_accumulate(&yk, &yl, &mut cm)?;
    }
    Ok(cm)
}

/// Scores one image with exactly four forward passes.
pub fn reliability_score<S: Segmenter + ?Sized>(model: &S, image: &Image, group: &PatchGroup) -> Result<ReliabilityScore> {
    let mut preds: Vec<LabelMap> = Vec::with_capacity(4);
    for w in &group.windows {
        preds.push(argmax_channels(&model.forward(image, w)?));
    }
    let preds: [LabelMap; 4] = preds.try_into().expect("four windows");
    let cm = overlap_confusion(&preds, group, model.arch().num_classes)?;
    Ok(ReliabilityScore {
        image_id: group.image_id,
        score: miou(&cm)?,
    })
}

/// Scores every image with a patch group drawn from `(seed, round, image id)`.
pub fn score_images<S: Segmenter + ?Sized>(
    model: &S,
    images: &[(ImageId, &Image)],
    win: usize,
    min_overlap: usize,
    seed: u64,
    round: u64,
) -> Result<Vec<ReliabilityScore>> {
    images
        .par_iter()
        .map(|(id, image)| {
            let layout = GroupLayout::new(image.height(), image.width(), win, min_overlap)?;
            let mut rng = stream_rng(seed, Stream::Selection, (round << 32) | id.0 as u64);
            let group = layout.sample(*id, &mut rng);
            reliability_score(model, image, &group)
        })
        .collect()
}

/// `max(1, floor(n * ratio))`.
pub fn selection_count(n: usize, ratio: f64) -> usize {
    (((n as f64) * ratio + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Highest scores first, ties by ascending id; keeps `selection_count` ids.
pub fn rank_and_select(scores: &[ReliabilityScore], ratio: f64) -> Result<Vec<ImageId>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to rank"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Precondition(format!("ratio {ratio} outside (0, 1]")));
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
    Ok(ranked
        .into_iter()
        .take(selection_count(scores.len(), ratio))
        .map(|s| s.image_id)
        .collect())
}

/// Argmax labels where the top confidence reaches `threshold`, IGNORE elsewhere.
pub fn pixel_filter_mask(conf: &ConfidenceMap, threshold: f64) -> Result<LabelMap> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Precondition(format!("threshold {threshold} outside (0, 1)")));
    }
    let labels = argmax_channels(conf);
    let c = conf.channels();
    let data = labels
        .data()
        .iter()
        .zip(conf.data().chunks(c))
        .map(|(&y, px)| if px[y as usize] >= threshold { y } else { IGNORE })
        .collect();
    Grid::new(conf.height(), conf.width(), 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> LabelMap {
        Grid::new(1, v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn accumulate_example() {
        let mut cm = ConfusionMatrix::new(2);
        confusion_accumulate(&labels(&[0, 0, 1, 1]), &labels(&[0, 1, 1, 1]), &mut cm).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));

        let mut diag = ConfusionMatrix::new(3);
        confusion_accumulate(&labels(&[0, 2, 1]), &labels(&[0, 2, 1]), &mut diag).unwrap();
        assert!((0..3).all(|r| (0..3).all(|c| r == c || diag.get(r, c) == 0)));

        let mut both = cm.clone();
        confusion_accumulate(&labels(&[0, 1, 1, 1]), &labels(&[0, 0, 1, 1]), &mut both).unwrap();
        let mut expected = cm.clone();
        expected.merge(&cm.transpose());
        assert_eq!(both, expected);

        assert!(matches!(
            confusion_accumulate(&labels(&[2]), &labels(&[0]), &mut ConfusionMatrix::new(2)),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        assert!(confusion_accumulate(&labels(&[0]), &labels(&[0, 1]), &mut cm).is_err());
    }

    #[test]
    fn miou_examples() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap();
        assert!((miou(&cm).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let diag = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 0, 0, 9]).unwrap();
        assert_eq!(miou(&diag).unwrap(), 1.0);
        let disjoint = ConfusionMatrix::from_counts(2, vec![0, 2, 2, 0]).unwrap();
        assert_eq!(miou(&disjoint).unwrap(), 0.0);
        assert!(matches!(miou(&ConfusionMatrix::new(2)), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn miou_matches_set_based_iou() {
        let a = [0u8, 1, 1, 0, 1, 0, 0, 1, 1, 1];
        let b = [0u8, 1, 0, 0, 1, 1, 0, 1, 0, 1];
        let mut cm = ConfusionMatrix::new(2);
        confusion_accumulate(&labels(&a), &labels(&b), &mut cm).unwrap();
        let iou = |class: u8| {
            let sa: Vec<usize> = (0..a.len()).filter(|&i| a[i] == class).collect();
            let sb: Vec<usize> = (0..b.len()).filter(|&i| b[i] == class).collect();
            let inter = sa.iter().filter(|i| sb.contains(i)).count();
            let union = sa.len() + sb.len() - inter;
            inter as f64 / union as f64
        };
        assert!((miou(&cm).unwrap() - (iou(0) + iou(1)) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn selection_examples() {
        let s = |id, score| ReliabilityScore {
            image_id: ImageId(id),
            score,
        };
        let scores = [s(0, 0.9), s(1, 0.4), s(2, 0.7), s(3, 0.1)];
        assert_eq!(rank_and_select(&scores, 0.5).unwrap(), vec![ImageId(0), ImageId(2)]);
        assert_eq!(rank_and_select(&scores, 1.0).unwrap().len(), 4);
        assert_eq!(rank_and_select(&scores, 0.1).unwrap(), vec![ImageId(0)]);
        let tied = [s(5, 0.5), s(2, 0.5), s(9, 0.5)];
        assert_eq!(rank_and_select(&tied, 0.67).unwrap(), vec![ImageId(2), ImageId(5)]);
        assert!(matches!(rank_and_select(&[], 0.5), Err(Error::EmptyInput(_))));
        assert!(rank_and_select(&scores, 0.0).is_err());
        assert_eq!(selection_count(140, 0.5), 70);
        assert_eq!(selection_count(100, 0.29), 29);
    }

    #[test]
    fn pixel_filter_examples() {
        let c = Grid::new(1, 2, 2, vec![0.8, 0.2, 0.6, 0.4]).unwrap();
        assert_eq!(pixel_filter_mask(&c, 0.75).unwrap().data(), &[0, IGNORE]);
        assert_eq!(pixel_filter_mask(&c, 1e-9).unwrap(), argmax_channels(&c));
        assert!(pixel_filter_mask(&c, 1.0).is_err());
    }
}
