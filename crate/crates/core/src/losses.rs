//! Structured segmentation loss (BCE + soft IoU) and the six-map objective.

use serde::Serialize;

use crate::cgd::PredictionSet;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Smoothing constant of the soft IoU.
pub const IOU_SMOOTH: f64 = 1.0;

fn check_pair(logits: &Tensor, gt: &Tensor) -> Result<usize> {
    let (b, c, _, _) = logits.dims4()?;
    if c != 1 || gt.shape() != logits.shape() {
        return Err(shape_err!("loss expects matching [B,1,H,W] maps, got {:?} and {:?}", logits.shape(), gt.shape()));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input(format!("ground truth must be binary, found {v}")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite {
            context: "loss logits".into(),
        });
    }
    Ok(b)
}

/// Mean binary cross-entropy on logits, `softplus(x) - g*x` per pixel.
pub fn bce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_pair(logits, gt)?;
    Ok(logits.softplus().sub(&logits.mul(gt)?)?.mean())
}

/// `1 - (Σpg + 1) / (Σp + Σg - Σpg + 1)` per image, averaged over the batch.
pub fn iou_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let b = check_pair(logits, gt)?;
    let p = logits.sigmoid();
    let per_image = |t: &Tensor| -> Result<Tensor> { t.reshape(&[b, t.numel() / b])?.sum_axis(1) };
    let inter = per_image(&p.mul(gt)?)?;
    let union = per_image(&p)?.add(&per_image(gt)?)?.sub(&inter)?;
    let ratio = inter.add_scalar(IOU_SMOOTH).div(&union.add_scalar(IOU_SMOOTH))?;
    Ok(ratio.neg().add_scalar(1.0).mean())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// BCE summed over the maps.
    pub bce: f64,
    /// Soft IoU summed over the maps.
    pub iou: f64,
    pub per_map: Vec<(String, f64)>,
    pub total: f64,
}

/// Sum over `maps` of `bce + iou`, evaluated sequentially. Exactly six maps
/// are required.
pub fn total_loss_maps(maps: &[(&str, &Tensor)], gt: &Tensor) -> Result<(Tensor, LossBreakdown)> {
    if maps.len() != PredictionSet::NAMES.len() {
        return Err(Error::Usage(format!("expected 6 prediction maps, got {}", maps.len())));
    }
    let mut total: Option<Tensor> = None;
    let mut out = LossBreakdown {
        bce: 0.0,
        iou: 0.0,
        per_map: Vec::with_capacity(maps.len()),
        total: 0.0,
    };
    for (name, logits) in maps {
        let bce = bce_loss(logits, gt)?;
        let iou = iou_loss(logits, gt)?;
        let seg = bce.add(&iou)?;
        out.bce += bce.item()?;
        out.iou += iou.item()?;
        out.per_map.push((name.to_string(), seg.item()?));
        total = Some(match total {
            None => seg,
            Some(t) => t.add(&seg)?,
        });
    }
    let total = total.expect("six maps");
    out.total = total.item()?;
    Ok((total, out))
}

pub fn total_loss(preds: &PredictionSet, gt: &Tensor) -> Result<(Tensor, LossBreakdown)> {
    let maps: Vec<(&str, &Tensor)> = PredictionSet::NAMES.iter().copied().zip(preds.maps()).collect();
    total_loss_maps(&maps, gt)
}
