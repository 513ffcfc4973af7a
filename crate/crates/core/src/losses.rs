//! Supervised cross-entropy, cross-window consistency, and pseudo-label losses.
//!
//! Every loss returns its gradient with respect to the probabilities it
//! consumed; [`crate::model::backward`] chains that into parameter space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::OverlapSpec;
use crate::grid::{argmax, BinaryMask, ConfidenceMap, Grid, LabelMap, IGNORE};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bcc: f64,
    pub lambda_dpm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bcc: 0.16,
            lambda_dpm: 1.0,
        }
    }
}

/// Which loss terms a training stage enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Supervised + consistency.
    One,
    /// Supervised + pseudo-label.
    Two,
}

impl LossWeights {
    pub fn for_stage(&self, stage: Stage) -> LossWeights {
        match stage {
            Stage::One => LossWeights {
                lambda_bcc: self.lambda_bcc,
                lambda_dpm: 0.0,
            },
            Stage::Two => LossWeights {
                lambda_bcc: 0.0,
                lambda_dpm: self.lambda_dpm,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub pixel_count: usize,
}

impl LossValue {
    pub const ZERO: LossValue = LossValue {
        value: 0.0,
        pixel_count: 0,
    };

    /// True when no pixel contributed (e.g. all labels were IGNORE).
    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }
}

fn same_dims(a: &ConfidenceMap, b: &Grid<impl crate::grid::Element>, what: &str) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean cross-entropy over non-IGNORE pixels. All-ignored input yields an
/// empty zero loss with a zero gradient.
pub fn ce_loss(conf: &ConfidenceMap, labels: &LabelMap) -> Result<(LossValue, Grid<f64>)> {
    same_dims(conf, labels, "ce_loss")?;
    if labels.channels() != 1 {
        return Err(Error::ShapeMismatch("label map must have one channel".into()));
    }
    let classes = conf.channels();
    labels.validate_labels(classes)?;
    let valid = labels.data().iter().filter(|&&y| y != IGNORE).count();
    let mut grad = Grid::zeros(conf.height(), conf.width(), classes);
    if valid == 0 {
        return Ok((LossValue::ZERO, grad));
    }
    let n = valid as f64;
    let mut total = 0.0;
    for (i, &y) in labels.data().iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let at = i * classes + y as usize;
        let p = conf.data()[at].max(PROB_CLAMP);
        total -= p.ln();
        grad.data_mut()[at] = -1.0 / (p * n);
    }
    Ok((
        LossValue {
            value: total / n,
            pixel_count: valid,
        },
        grad,
    ))
}

/// Pseudo-label supervision uses the same cross-entropy as ground truth.
pub fn pseudo_label_loss(conf: &ConfidenceMap, pseudo: &LabelMap) -> Result<(LossValue, Grid<f64>)> {
    ce_loss(conf, pseudo)
}

/// 1 where the two maps disagree on the argmax class.
pub fn importance_mask(conf_k: &ConfidenceMap, conf_l: &ConfidenceMap) -> Result<BinaryMask> {
    if conf_k.dims() != conf_l.dims() {
        return Err(Error::ShapeMismatch(format!(
            "importance_mask: {:?} vs {:?}",
            conf_k.dims(),
            conf_l.dims()
        )));
    }
    let c = conf_k.channels();
    let data = conf_k
        .data()
        .chunks(c)
        .zip(conf_l.data().chunks(c))
        .map(|(a, b)| u8::from(argmax(a) != argmax(b)))
        .collect();
    Grid::new(conf_k.height(), conf_k.width(), 1, data)
}

/// Whether consistency is restricted to argmax-disagreeing pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Importance,
    /// Every overlap pixel counts.
    Dense,
}

#[derive(Clone, Debug)]
pub struct PairLoss {
    pub loss: LossValue,
    pub grad_k: Grid<f64>,
    pub grad_l: Grid<f64>,
}

/// Masked mean squared distance between two aligned overlap maps. The mask is
/// a constant: no gradient flows through the argmax indicator.
pub fn bcc_pair_loss(conf_k: &ConfidenceMap, conf_l: &ConfidenceMap, mode: MaskMode) -> Result<PairLoss> {
    let mask = importance_mask(conf_k, conf_l)?;
    let (h, w, c) = conf_k.dims();
    let area = (h * w) as f64;
    let mut grad_k = Grid::zeros(h, w, c);
    let mut grad_l = Grid::zeros(h, w, c);
    let mut total = 0.0;
    let mut counted = 0;
    for (px, &m) in mask.data().iter().enumerate() {
        if mode == MaskMode::Importance && m == 0 {
            continue;
        }
        counted += 1;
        let range = px * c..(px + 1) * c;
        let (pk, pl) = (&conf_k.data()[range.clone()], &conf_l.data()[range.clone()]);
        for ch in 0..c {
            let d = pk[ch] - pl[ch];
            total += d * d;
            grad_k.data_mut()[range.start + ch] = 2.0 * d / area;
            grad_l.data_mut()[range.start + ch] = -2.0 * d / area;
        }
    }
    Ok(PairLoss {
        loss: LossValue {
            value: total / area,
            pixel_count: counted,
        },
        grad_k,
        grad_l,
    })
}

/// Consistency loss of one patch group summed over `pairs`, with each pair's
/// gradient scattered back into the owning windows' probability grids.
///
/// `confs[k - 1]` is the forward output of window `k`.
pub fn bcc_group_loss(
    confs: &[ConfidenceMap; 4],
    pairs: &[OverlapSpec],
    mode: MaskMode,
) -> Result<(LossValue, [Grid<f64>; 4])> {
    let mut grads = confs
        .each_ref()
        .map(|c| Grid::zeros(c.height(), c.width(), c.channels()));
    let mut total = LossValue::ZERO;
    for spec in pairs {
        let (k, l) = spec.pair;
        let ok = confs[k - 1].crop(&spec.local_k)?;
        let ol = confs[l - 1].crop(&spec.local_l)?;
        let pair = bcc_pair_loss(&ok, &ol, mode)?;
        total.value += pair.loss.value;
        total.pixel_count += pair.loss.pixel_count;
        scatter_add(&mut grads[k - 1], &pair.grad_k, &spec.local_k);
        scatter_add(&mut grads[l - 1], &pair.grad_l, &spec.local_l);
    }
    Ok((total, grads))
}

fn scatter_add(dst: &mut Grid<f64>, src: &Grid<f64>, at: &crate::geometry::Window) {
    for r in 0..src.height() {
        for c in 0..src.width() {
            let d = dst.pixel_mut(at.top + r, at.left + c);
            d.iter_mut().zip(src.pixel(r, c)).for_each(|(a, b)| *a += b);
        }
    }
}

/// Weighted sum `ls + lambda_bcc * lbcc + lambda_dpm * ldpm`.
pub fn total_loss(ls: LossValue, lbcc: LossValue, ldpm: LossValue, w: LossWeights) -> LossValue {
    LossValue {
        value: ls.value + w.lambda_bcc * lbcc.value + w.lambda_dpm * ldpm.value,
        pixel_count: ls.pixel_count + lbcc.pixel_count + ldpm.pixel_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conf(values: &[f64], c: usize) -> ConfidenceMap {
        Grid::new(1, values.len() / c, c, values.to_vec()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let labels = Grid::new(1, 1, 1, vec![1u8]).unwrap();
        let (l, g) = ce_loss(&conf(&[0.25, 0.75], 2), &labels).unwrap();
        assert!((l.value - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!((g.data()[1] + 1.0 / 0.75).abs() < 1e-12);
        assert_eq!(g.data()[0], 0.0);

        let ignored = Grid::new(1, 2, 1, vec![IGNORE, IGNORE]).unwrap();
        let (l, g) = ce_loss(&conf(&[0.5, 0.5, 0.1, 0.9], 2), &ignored).unwrap();
        assert!(l.is_empty());
        assert_eq!(l.value, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let (l, _) = ce_loss(&conf(&[0.0, 1.0], 2), &labels).unwrap();
        assert!(l.value <= 1e-6);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let labels = Grid::new(1, 1, 1, vec![2u8]).unwrap();
        assert!(ce_loss(&conf(&[0.5, 0.5], 2), &labels).is_err());
    }

    #[test]
    fn importance_mask_examples() {
        let m = importance_mask(&conf(&[0.6, 0.4], 2), &conf(&[0.2, 0.8], 2)).unwrap();
        assert_eq!(m.data(), &[1]);
        let m = importance_mask(&conf(&[0.7, 0.3], 2), &conf(&[0.6, 0.4], 2)).unwrap();
        assert_eq!(m.data(), &[0]);
        let a = conf(&[0.1, 0.9, 0.5, 0.5], 2);
        assert!(importance_mask(&a, &a).unwrap().data().iter().all(|&v| v == 0));
        assert!(importance_mask(&a, &conf(&[0.1, 0.9], 2)).is_err());
    }

    #[test]
    fn bcc_pair_examples() {
        let p = bcc_pair_loss(&conf(&[0.6, 0.4], 2), &conf(&[0.2, 0.8], 2), MaskMode::Importance).unwrap();
        assert!((p.loss.value - 0.32).abs() < 1e-12);
        assert_eq!(p.loss.pixel_count, 1);

        let a = conf(&[0.6, 0.4, 0.3, 0.7], 2);
        assert_eq!(bcc_pair_loss(&a, &a, MaskMode::Importance).unwrap().loss.value, 0.0);

        let b = conf(&[0.9, 0.1, 0.01, 0.99], 2);
        let p = bcc_pair_loss(&a, &b, MaskMode::Importance).unwrap();
        assert_eq!(p.loss.value, 0.0);
        assert!(p.grad_k.data().iter().chain(p.grad_l.data()).all(|&v| v == 0.0));
        // Without the importance factor the confidence gap counts.
        assert!(bcc_pair_loss(&a, &b, MaskMode::Dense).unwrap().loss.value > 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let v = |x| LossValue {
            value: x,
            pixel_count: 1,
        };
        let w = LossWeights::default();
        assert!((total_loss(v(1.0), v(0.5), v(0.0), w).value - 1.08).abs() < 1e-12);
        assert_eq!(total_loss(LossValue::ZERO, LossValue::ZERO, LossValue::ZERO, w).value, 0.0);
        let w0 = LossWeights {
            lambda_bcc: 0.0,
            lambda_dpm: 1.0,
        };
        assert_eq!(total_loss(v(1.0), v(7.0), v(2.0), w0).value, 3.0);
        assert_eq!(w.for_stage(Stage::One).lambda_dpm, 0.0);
        assert_eq!(w.for_stage(Stage::Two).lambda_bcc, 0.0);
    }

    fn prob_vec(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn bcc_pair_is_symmetric_and_bounded(
            a in proptest::collection::vec(0.01f64..1.0, 12),
            b in proptest::collection::vec(0.01f64..1.0, 12),
        ) {
            let ka: Vec<f64> = a.chunks(3).flat_map(prob_vec).collect();
            let kb: Vec<f64> = b.chunks(3).flat_map(prob_vec).collect();
            let ca = Grid::new(2, 2, 3, ka).unwrap();
            let cb = Grid::new(2, 2, 3, kb).unwrap();
            let ab = bcc_pair_loss(&ca, &cb, MaskMode::Importance).unwrap();
            let ba = bcc_pair_loss(&cb, &ca, MaskMode::Importance).unwrap();
            prop_assert!((ab.loss.value - ba.loss.value).abs() < 1e-15);
            prop_assert!(ab.loss.value <= 2.0);
            prop_assert!(ab.loss.value >= 0.0);
        }

        #[test]
        fn ce_is_nonnegative(raw in proptest::collection::vec(0.0f64..1.0, 8), labels in proptest::collection::vec(0u8..4, 2)) {
            let probs: Vec<f64> = raw.chunks(4).flat_map(|c| prob_vec(&c.iter().map(|v| v + 1e-3).collect::<Vec<_>>())).collect();
            let conf = Grid::new(1, 2, 4, probs).unwrap();
            let (l, _) = ce_loss(&conf, &Grid::new(1, 2, 1, labels).unwrap()).unwrap();
            prop_assert!(l.value >= 0.0);
        }
    }
}
