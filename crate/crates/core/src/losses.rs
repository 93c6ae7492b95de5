//! Fused training objective and count metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityMap, SegmentationMask};

/// Probability clamp for the BCE logarithms.
pub const BCE_EPS: f64 = 1e-7;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} predicted values vs {b} targets")));
    }
    Ok(())
}

/// Mean squared error over every pixel of every map in the batch.
pub fn density_loss_slice(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred.len(), gt.len(), "density loss")?;
    if pred.is_empty() {
        return Err(Error::Empty("density loss input"));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`density_loss_slice`] with respect to `pred`.
pub fn density_loss_grad(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let scale = 2.0 / pred.len() as f64;
    pred.iter().zip(gt).map(|(p, g)| scale * (p - g)).collect()
}

pub fn density_loss(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if !pred.same_dims(gt) {
        return Err(Error::Shape(format!(
            "density loss: prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    density_loss_slice(pred.values(), gt.values())
}

/// Binary cross-entropy averaged over all pixels, predictions clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn seg_bce_loss_slice(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_len(pred.len(), gt.len(), "segmentation loss")?;
    if pred.is_empty() {
        return Err(Error::Empty("segmentation loss input"));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&m, &y)| {
            let m = m.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * m.ln() + (1.0 - y) * (1.0 - m).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`seg_bce_loss_slice`]; zero where the clamp is active.
pub fn seg_bce_loss_grad(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(&m, &y)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&m) {
                0.0
            } else {
                (-y / m + (1.0 - y) / (1.0 - m)) / n
            }
        })
        .collect()
}

pub fn seg_bce_loss(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    if !pred.same_dims(gt) {
        return Err(Error::Shape(format!(
            "segmentation loss: prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    seg_bce_loss_slice(pred.values(), gt.values())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_den: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_den.is_finite() && self.l_seg.is_finite() && self.l_total.is_finite()
    }

    /// Names the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.l_den.is_finite() {
            Some("l_den")
        } else if !self.l_seg.is_finite() {
            Some("l_seg")
        } else if !self.l_total.is_finite() {
            Some("l_total")
        } else {
            None
        }
    }
}

/// `l_total = l_den + lambda * l_seg`.
pub fn total_loss(l_den: f64, l_seg: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(LossBreakdown {
        l_den,
        l_seg,
        l_total: l_den + lambda * l_seg,
        lambda,
    })
}

/// Count metrics over a test set. `mse` is the root of the mean squared
/// count error, following crowd-counting convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
    /// `(ground truth, predicted)` count per frame.
    pub per_frame: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialization is infallible")
    }
}

pub fn evaluate(pairs: &[(f64, f64)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let n = pairs.len() as f64;
    let abs_sum: f64 = pairs.iter().map(|(c, p)| (c - p).abs()).sum();
    let sq_sum: f64 = pairs.iter().map(|(c, p)| (c - p) * (c - p)).sum();
    Ok(EvalReport {
        mae: abs_sum / n,
        mse: (sq_sum / n).sqrt(),
        n: pairs.len(),
        per_frame: pairs.to_vec(),
    })
}

/// Intersection over union of `pred >= threshold` against `gt >= 0.5`.
/// Two empty masks count as a perfect match.
pub fn mask_iou(pred: &[f64], gt: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask sizes {} and {} differ",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p >= threshold, g >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn density_loss_constant_offset() {
        let gt = DensityMap(Grid::from_fn(4, 3, |x, y| (x * y) as f64 * 0.1));
        let pred = DensityMap(gt.map(|v| v + 0.3));
        assert!((density_loss(&pred, &gt).unwrap() - 0.09).abs() < 1e-15);
        assert_eq!(density_loss(&gt, &gt).unwrap(), 0.0);
        assert!(density_loss(&gt, &DensityMap::zeros(3, 4)).is_err());
    }

    #[test]
    fn bce_known_values() {
        let ones = SegmentationMask(Grid::filled(3, 3, 1.0));
        assert!(seg_bce_loss(&ones, &ones).unwrap() < 1e-6);
        let half = SegmentationMask(Grid::filled(3, 3, 0.5));
        assert!((seg_bce_loss(&half, &ones).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        // clamp keeps log(0) finite
        let zeros = SegmentationMask(Grid::zeros(3, 3));
        assert!(seg_bce_loss(&zeros, &ones).unwrap().is_finite());
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.5, 0.2, 1.0).unwrap();
        assert!((b.l_total - 1.7).abs() < 1e-15);
        assert_eq!(total_loss(1.5, 0.2, 0.0).unwrap().l_total, 1.5);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
        let slope = total_loss(1.5, 0.2, 3.0).unwrap().l_total - total_loss(1.5, 0.2, 2.0).unwrap().l_total;
        assert!((slope - 0.2).abs() < 1e-12);
    }

    #[test]
    fn evaluate_hand_values() {
        let r = evaluate(&[(10.0, 12.0), (20.0, 17.0)]).unwrap();
        assert!((r.mae - 2.5).abs() < 1e-12);
        assert!((r.mse - 6.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.n, 2);
        assert!(evaluate(&[]).is_err());
        let perfect = evaluate(&[(3.0, 3.0), (4.0, 4.0)]).unwrap();
        assert_eq!((perfect.mae, perfect.mse), (0.0, 0.0));
    }

    #[test]
    fn report_json_layout() {
        let r = evaluate(&[(1.0, 2.0)]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["n"], 1);
        assert_eq!(v["per_frame"][0][0], 1.0);
        assert_eq!(v["per_frame"][0][1], 2.0);
        assert_eq!(v["mae"], 1.0);
        assert_eq!(v["mse"], 1.0);
    }

    #[test]
    fn iou_hand_values() {
        let gt = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(mask_iou(&[0.9, 0.2, 0.7, 0.1], &gt, 0.5).unwrap(), 1.0 / 3.0);
        assert_eq!(mask_iou(&[0.0; 4], &[0.0; 4], 0.5).unwrap(), 1.0);
        assert!(mask_iou(&[0.0; 3], &gt, 0.5).is_err());
    }
}
