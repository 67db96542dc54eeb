//! Evaluation measures for a probability map against a binary mask:
//! S-measure, mean E-measure, weighted F-measure, mean F-measure and MAE.
//!
//! Maps are row-major `h x w` slices; predictions lie in `[0, 1]` and ground
//! truth in `{0, 1}`.

mod emeasure;
mod fmeasure;
mod smeasure;

pub use emeasure::e_measure_mean;
pub use fmeasure::{f_mean, f_weighted, nearest_foreground};
pub use smeasure::s_measure;

use serde::Serialize;

use crate::error::{Error, Result};

/// Guards divisions in the metric formulas (the f64 machine epsilon).
pub const EPS: f64 = f64::EPSILON;

/// Number of binarization thresholds; threshold `k` is `(k + 0.5) / 256`.
pub const THRESHOLDS: usize = 256;

pub(crate) fn threshold(k: usize) -> f64 {
    (k as f64 + 0.5) / THRESHOLDS as f64
}

/// Number of thresholds at or below `p`, i.e. how many binarizations mark
/// this pixel as foreground.
pub(crate) fn levels_at_or_below(p: f64) -> usize {
    let mut k = ((p * THRESHOLDS as f64 - 0.5).floor().max(-1.0) + 1.0) as usize;
    k = k.min(THRESHOLDS);
    while k < THRESHOLDS && threshold(k) <= p {
        k += 1;
    }
    while k > 0 && threshold(k - 1) > p {
        k -= 1;
    }
    k
}

/// Per-threshold foreground counts `(tp, pred_fg)` for `k = 0..256`.
pub(crate) fn threshold_counts(pred: &[f64], gt: &[bool]) -> Vec<(usize, usize)> {
    let mut hist_fg = [0usize; THRESHOLDS + 1];
    let mut hist_all = [0usize; THRESHOLDS + 1];
    for (&p, &g) in pred.iter().zip(gt) {
        let n = levels_at_or_below(p);
        hist_all[n] += 1;
        if g {
            hist_fg[n] += 1;
        }
    }
    // pixels with n levels are foreground for thresholds k < n
    let mut out = vec![(0, 0); THRESHOLDS];
    let (mut tp, mut all) = (0, 0);
    for k in (0..THRESHOLDS).rev() {
        tp += hist_fg[k + 1];
        all += hist_all[k + 1];
        out[k] = (tp, all);
    }
    out
}

/// Validates a pair and returns the ground truth as booleans.
pub(crate) fn check(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<Vec<bool>> {
    if h == 0 || w == 0 || pred.len() != h * w || gt.len() != h * w {
        return Err(Error::Input(format!(
            "metric inputs must both be {h}x{w}, got {} and {} values",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Input(format!("prediction value {p} outside [0, 1]")));
    }
    gt.iter()
        .map(|&g| match g {
            0.0 => Ok(false),
            1.0 => Ok(true),
            _ => Err(Error::Input(format!("ground truth value {g} is not binary"))),
        })
        .collect()
}

pub fn mae(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check(pred, gt, h, w)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / (h * w) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub s_measure: f64,
    pub e_measure_mean: f64,
    pub f_weighted: f64,
    pub f_mean: f64,
    pub mae: f64,
    pub n_samples: usize,
}

impl MetricReport {
    /// Column order of the plain-text table.
    pub const COLUMNS: [&'static str; 5] = ["S_m", "F_w", "MAE", "E_m", "F_m"];

    pub fn values(&self) -> [f64; 5] {
        [self.s_measure, self.f_weighted, self.mae, self.e_measure_mean, self.f_mean]
    }
}

pub fn evaluate_pair(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        s_measure: s_measure(pred, gt, h, w)?,
        e_measure_mean: e_measure_mean(pred, gt, h, w)?,
        f_weighted: f_weighted(pred, gt, h, w)?,
        f_mean: f_mean(pred, gt, h, w)?,
        mae: mae(pred, gt, h, w)?,
        n_samples: 1,
    })
}

/// One evaluation sample: a prediction and its mask, both `h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

/// Per-sample reports and their arithmetic mean, summed in input order.
pub fn evaluate_dataset<'a, I>(pairs: I) -> Result<(Vec<MetricReport>, MetricReport)>
where
    I: IntoIterator<Item = &'a Pair>,
{
    let per: Vec<MetricReport> = pairs
        .into_iter()
        .map(|p| evaluate_pair(&p.pred, &p.gt, p.h, p.w))
        .collect::<Result<_>>()?;
    if per.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let n = per.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| per.iter().map(f).sum::<f64>() / n;
    let agg = MetricReport {
        s_measure: mean(|r| r.s_measure),
        e_measure_mean: mean(|r| r.e_measure_mean),
        f_weighted: mean(|r| r.f_weighted),
        f_mean: mean(|r| r.f_mean),
        mae: mean(|r| r.mae),
        n_samples: per.len(),
    };
    Ok((per, agg))
}
