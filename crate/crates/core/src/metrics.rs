//! Segmentation metrics: dataset-level mean IoU and the thresholded
//! lesion score.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Mask;

/// IoU below this counts as a failed lesion segmentation.
pub const ISIC_THRESHOLD: f64 = 0.65;

/// `counts[gt * k + pred]` over every evaluated pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

fn same_shape(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::Shape(alloc::format!(
            "prediction {}x{} against ground truth {}x{}",
            pred.h,
            pred.w,
            gt.h,
            gt.w
        )));
    }
    Ok(())
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        same_shape(pred, gt)?;
        let k = self.classes;
        if let Some(&bad) = pred.data.iter().chain(&gt.data).find(|&&v| v as usize >= k) {
            return Err(Error::InvalidClass {
                index: bad as usize,
                classes: k,
            });
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both ground truth and
    /// prediction, and for `ignore`. Pixels whose ground truth is `ignore`
    /// are left out entirely.
    pub fn ious(&self, ignore: Option<u8>) -> Vec<Option<f64>> {
        let k = self.classes;
        let ig = ignore.map(usize::from);
        (0..k)
            .map(|c| {
                if Some(c) == ig {
                    return None;
                }
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..k).filter(|&g| g != c && Some(g) != ig).map(|g| self.get(g, c)).sum();
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self, ignore: Option<u8>) -> Result<f64> {
        let present: Vec<f64> = self.ious(ignore).into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Dataset mean IoU from one confusion matrix aggregated over all images.
pub fn miou(preds: &[Mask], gts: &[Mask], classes: usize, ignore: Option<u8>) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(alloc::format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.add(p, g)?;
    }
    cm.miou(ignore)
}

fn check_binary(m: &Mask) -> Result<()> {
    match m.data.iter().find(|&&v| v > 1) {
        Some(&v) => Err(Error::NonBinary(v)),
        None => Ok(()),
    }
}

/// Foreground IoU of two binary masks; two empty masks agree perfectly.
pub fn binary_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    check_binary(pred)?;
    check_binary(gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += u64::from(p & g);
        union += u64::from(p | g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `0` below the threshold, the IoU itself otherwise.
pub fn isic_threshold(iou: f64) -> f64 {
    if iou < ISIC_THRESHOLD {
        0.0
    } else {
        iou
    }
}

/// Mean thresholded IoU over images.
pub fn isic_score(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(alloc::format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        total += isic_threshold(binary_iou(p, g)?);
    }
    Ok(total / preds.len() as f64)
}
