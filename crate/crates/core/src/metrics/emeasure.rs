use super::{check, threshold_counts, EPS, THRESHOLDS};
use crate::error::Result;

/// Enhanced alignment score of one binarization, given its confusion counts.
fn enhanced_alignment(tp: usize, pred_fg: usize, gt_fg: usize, n: usize) -> f64 {
    let fp = pred_fg - tp;
    let sum = if gt_fg == 0 {
        (n - pred_fg) as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let fn_ = gt_fg - tp;
        let tn = n - pred_fg - fn_;
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        let (pf, pb) = (1.0 - mp, -mp);
        let (gf, gb) = (1.0 - mg, -mg);
        [(tp, pf, gf), (fp, pf, gb), (fn_, pb, gf), (tn, pb, gb)]
            .iter()
            .map(|&(count, a, b)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0) * (align + 1.0) / 4.0 * count as f64
            })
            .sum()
    };
    sum / n as f64
}

/// Mean enhanced-alignment measure over the 256 thresholds.
pub fn e_measure_mean(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    let gtb = check(pred, gt, h, w)?;
    let n = h * w;
    let gt_fg = gtb.iter().filter(|&&g| g).count();
    let total: f64 = threshold_counts(pred, &gtb)
        .into_iter()
        .map(|(tp, pred_fg)| enhanced_alignment(tp, pred_fg, gt_fg, n))
        .sum();
    Ok(total / THRESHOLDS as f64)
}
