use super::{check, EPS};
use crate::error::Result;

const ALPHA: f64 = 0.5;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (ddof 1); zero for fewer than two values.
fn sample_var(v: &[f64], m: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn object_similarity(values: &[f64]) -> f64 {
    let x = mean(values);
    let sigma = sample_var(values, x).sqrt();
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(pred: &[f64], gt: &[bool]) -> f64 {
    let u = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p).collect();
    u * object_similarity(&fg) + (1.0 - u) * object_similarity(&bg)
}

/// Split position: the rounded foreground centroid plus one, so the
/// centroid row/column belongs to the top/left parts.
fn centroid(gt: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in gt.iter().enumerate().filter(|(_, &g)| g) {
        sr += (i / w) as f64;
        sc += (i % w) as f64;
        n += 1;
    }
    let (r, c) = if n == 0 {
        ((h as f64 / 2.0).round_ties_even(), (w as f64 / 2.0).round_ties_even())
    } else {
        ((sr / n as f64).round_ties_even(), (sc / n as f64).round_ties_even())
    };
    ((c as usize + 1).min(w), (r as usize + 1).min(h))
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let x = mean(pred);
    let y = mean(gt);
    let (sx, sy, sxy) = if n < 2 {
        (0.0, 0.0, 0.0)
    } else {
        let d = (n - 1) as f64;
        (
            pred.iter().map(|p| (p - x) * (p - x)).sum::<f64>() / d,
            gt.iter().map(|g| (g - y) * (g - y)).sum::<f64>() / d,
            pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / d,
        )
    };
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(pred: &[f64], gt: &[bool], h: usize, w: usize) -> f64 {
    let (x, y) = centroid(gt, h, w);
    let area = (h * w) as f64;
    let parts = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let weights = {
        let w1 = (x * y) as f64 / area;
        let w2 = (y * (w - x)) as f64 / area;
        let w3 = ((h - y) * x) as f64 / area;
        [w1, w2, w3, 1.0 - w1 - w2 - w3]
    };
    let mut score = 0.0;
    for (&(r0, r1, c0, c1), wt) in parts.iter().zip(weights) {
        if r0 == r1 || c0 == c1 {
            continue;
        }
        let mut p = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut g = Vec::with_capacity(p.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                p.push(pred[r * w + c]);
                g.push(if gt[r * w + c] { 1.0 } else { 0.0 });
            }
        }
        score += wt * ssim(&p, &g);
    }
    score
}

/// Structure measure with `alpha = 0.5`. An empty mask scores
/// `1 - mean(pred)` and a full mask `mean(pred)`.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    let gtb = check(pred, gt, h, w)?;
    let fg = gtb.iter().filter(|&&g| g).count();
    Ok(if fg == 0 {
        1.0 - mean(pred)
    } else if fg == gtb.len() {
        mean(pred)
    } else {
        let s = ALPHA * object_score(pred, &gtb) + (1.0 - ALPHA) * region_score(pred, &gtb, h, w);
        s.max(0.0)
    })
}
