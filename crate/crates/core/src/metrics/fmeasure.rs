use super::{check, threshold_counts, EPS, THRESHOLDS};
use crate::error::Result;

const BETA2_MEAN: f64 = 0.3;
const BETA_WEIGHTED: f64 = 1.0;
const KERNEL_SIDE: usize = 7;
const KERNEL_SIGMA: f64 = 5.0;

/// Mean over the 256 thresholds of `F_beta` with `beta^2 = 0.3`. A threshold
/// with no true positives scores 0.
pub fn f_mean(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    let gtb = check(pred, gt, h, w)?;
    let gt_fg = gtb.iter().filter(|&&g| g).count();
    let total: f64 = threshold_counts(pred, &gtb)
        .into_iter()
        .map(|(tp, pred_fg)| {
            if tp == 0 {
                return 0.0;
            }
            let p = tp as f64 / pred_fg as f64;
            let r = tp as f64 / gt_fg as f64;
            (1.0 + BETA2_MEAN) * p * r / (BETA2_MEAN * p + r)
        })
        .sum();
    Ok(total / THRESHOLDS as f64)
}

/// For every pixel, the squared Euclidean distance to the nearest foreground
/// pixel and the sorted indices of all foreground pixels at that distance.
/// Returns `None` for an empty mask.
pub fn nearest_foreground(gt: &[bool], h: usize, w: usize) -> Option<Vec<(usize, Vec<usize>)>> {
    let rows: Vec<Vec<usize>> = (0..h)
        .map(|r| (0..w).filter(|&c| gt[r * w + c]).collect())
        .collect();
    if rows.iter().all(Vec::is_empty) {
        return None;
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut best = usize::MAX;
            let mut hits: Vec<usize> = Vec::new();
            for dr in 0..h {
                if dr * dr > best {
                    break;
                }
                let cand_rows = [r.checked_sub(dr), (dr > 0 && r + dr < h).then_some(r + dr)];
                for rr in cand_rows.into_iter().flatten() {
                    let cols = &rows[rr];
                    let pos = cols.partition_point(|&x| x < c);
                    let mut consider = |cc: usize| {
                        let d = dr * dr + cc.abs_diff(c).pow(2);
                        if d < best {
                            best = d;
                            hits.clear();
                        }
                        if d == best {
                            hits.push(rr * w + cc);
                        }
                    };
                    if pos < cols.len() {
                        consider(cols[pos]);
                    }
                    if pos > 0 {
                        consider(cols[pos - 1]);
                    }
                }
            }
            hits.sort_unstable();
            hits.dedup();
            out.push((best, hits));
        }
    }
    Some(out)
}

/// Normalized 7x7 Gaussian with sigma 5; entries below `EPS * max` are zeroed.
pub(crate) fn gaussian_kernel() -> Vec<f64> {
    let m = (KERNEL_SIDE / 2) as f64;
    let mut k: Vec<f64> = (0..KERNEL_SIDE * KERNEL_SIDE)
        .map(|i| {
            let y = (i / KERNEL_SIDE) as f64 - m;
            let x = (i % KERNEL_SIDE) as f64 - m;
            (-(x * x + y * y) / (2.0 * KERNEL_SIGMA * KERNEL_SIGMA)).exp()
        })
        .collect();
    let max = k.iter().cloned().fold(0.0, f64::max);
    k.iter_mut().filter(|v| **v < EPS * max).for_each(|v| *v = 0.0);
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted F-measure (`beta = 1`). Background errors take the error at the
/// nearest foreground pixel (averaged over equidistant ones), are spread by
/// the Gaussian with zero padding, and are weighted by
/// `2 - exp(ln(0.5) / 5 * distance)`. An empty mask scores 0.
pub fn f_weighted(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    let gtb = check(pred, gt, h, w)?;
    let Some(nearest) = nearest_foreground(&gtb, h, w) else {
        return Ok(0.0);
    };
    let e: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    let et: Vec<f64> = nearest
        .iter()
        .enumerate()
        .map(|(i, (_, hits))| {
            if gtb[i] {
                e[i]
            } else {
                hits.iter().map(|&j| e[j]).sum::<f64>() / hits.len() as f64
            }
        })
        .collect();
    let k = gaussian_kernel();
    let half = (KERNEL_SIDE / 2) as isize;
    let mut ew = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut ea = 0.0;
            for (ki, kv) in k.iter().enumerate() {
                let rr = r as isize + (ki / KERNEL_SIDE) as isize - half;
                let cc = c as isize + (ki % KERNEL_SIDE) as isize - half;
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    ea += kv * et[rr as usize * w + cc as usize];
                }
            }
            let i = r * w + c;
            let min_e = if gtb[i] && ea < e[i] { ea } else { e[i] };
            let b = if gtb[i] {
                1.0
            } else {
                2.0 - ((0.5f64).ln() / 5.0 * (nearest[i].0 as f64).sqrt()).exp()
            };
            ew[i] = min_e * b;
        }
    }
    let n_fg = gtb.iter().filter(|&&g| g).count() as f64;
    let ew_fg: f64 = ew.iter().zip(&gtb).filter(|(_, &g)| g).map(|(v, _)| v).sum();
    let ew_bg: f64 = ew.iter().zip(&gtb).filter(|(_, &g)| !g).map(|(v, _)| v).sum();
    let tpw = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let p = tpw / (tpw + ew_bg + EPS);
    let q = (1.0 + BETA_WEIGHTED) * r * p / (r + BETA_WEIGHTED * p + EPS);
    Ok(q.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(k[i * 7 + j], k[j * 7 + i]);
                assert_eq!(k[i * 7 + j], k[(6 - i) * 7 + j]);
            }
        }
    }

    #[test]
    fn nearest_foreground_matches_brute_force() {
        let (h, w) = (7, 9);
        let gt: Vec<bool> = (0..h * w).map(|i| (i * 37 + i / 5) % 11 == 0).collect();
        let got = nearest_foreground(&gt, h, w).unwrap();
        for (i, (d, hits)) in got.iter().enumerate() {
            let dist = |j: usize| (i / w).abs_diff(j / w).pow(2) + (i % w).abs_diff(j % w).pow(2);
            let best = (0..h * w).filter(|&j| gt[j]).map(dist).min().unwrap();
            let all: Vec<usize> = (0..h * w).filter(|&j| gt[j] && dist(j) == best).collect();
            assert_eq!((*d, hits), (best, &all));
        }
        assert!(nearest_foreground(&[false; 4], 2, 2).is_none());
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let (h, w) = (12, 12);
        let gt: Vec<f64> = (0..h * w)
            .map(|i| if (4..8).contains(&(i / w)) && (3..9).contains(&(i % w)) { 1.0 } else { 0.0 })
            .collect();
        let zero = vec![0.0; h * w];
        assert_eq!(f_mean(&zero, &gt, h, w).unwrap(), 0.0);
        assert!(f_weighted(&zero, &gt, h, w).unwrap() < 1e-12);
    }

    #[test]
    fn zero_padding_leaks_recall_at_the_border() {
        // the spread error is attenuated near the image edge, so a mask
        // touching the border keeps some weighted recall for an empty prediction
        let gt = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        assert!(f_weighted(&[0.0; 6], &gt, 2, 3).unwrap() > 0.5);
    }

    #[test]
    fn binary_prediction_equals_single_threshold_f() {
        let gt = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let pred = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let (p, r) = (2.0 / 3.0, 2.0 / 3.0);
        let f = 1.3 * p * r / (0.3 * p + r);
        assert!((f_mean(&pred, &gt, 2, 3).unwrap() - f).abs() < 1e-15);
    }
}
