#![allow(dead_code)]
//! Helpers shared by the integration test targets.

pub mod oracles;

use serde::Deserialize;

pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (2.0f64).powi(-53)
    }
}

pub const METRIC_SIDE: usize = 16;

/// Mirror of `make_case` in `tests/oracles/metrics_ref.py`.
pub fn metric_case(i: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SplitMix64::new(1000 + i as u64);
    let (h, w) = (METRIC_SIDE, METRIC_SIDE);
    let mut gt = vec![0.0; h * w];
    if i == 1 {
        gt = vec![1.0; h * w];
    } else if i != 0 {
        let cy = 3.0 + rng.uniform() * 10.0;
        let cx = 3.0 + rng.uniform() * 10.0;
        let ry = 2.0 + rng.uniform() * 4.0;
        let rx = 2.0 + rng.uniform() * 4.0;
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    gt[r * w + c] = 1.0;
                }
            }
        }
        for _ in 0..3 {
            let j = (rng.uniform() * (h * w) as f64) as usize;
            gt[j] = 1.0 - gt[j];
        }
    }
    let mix = rng.uniform();
    let kind = i % 5;
    let pred = gt
        .iter()
        .map(|&g| {
            let u = rng.uniform();
            match kind {
                3 => {
                    if u >= 0.1 {
                        g
                    } else {
                        1.0 - g
                    }
                }
                4 => {
                    let v = (mix * g + (1.0 - mix) * u).clamp(0.0, 1.0);
                    ((v * 255.0).floor() + 0.5) / 256.0
                }
                _ => (mix * g + (1.0 - mix) * u).clamp(0.0, 1.0),
            }
        })
        .collect();
    (pred, gt)
}

#[derive(Debug, Deserialize)]
pub struct MetricRef {
    pub case: usize,
    pub pred_sum: f64,
    pub gt_fg: usize,
    pub s_measure: f64,
    pub e_measure_mean: f64,
    pub f_weighted: f64,
    pub f_mean: f64,
    pub mae: f64,
}

#[derive(Debug, Deserialize)]
pub struct MetricFixture {
    pub side: usize,
    pub cases: Vec<MetricRef>,
}

pub fn metric_fixture() -> MetricFixture {
    let text = include_str!("../fixtures/metric_reference.json");
    serde_json::from_str(text).expect("metric fixture parses")
}

/// Largest deviation of the implementation from the frozen reference over
/// all cases, as `(metric name, case, |diff|)`.
pub fn metric_reference_worst() -> (String, usize, f64) {
    let fx = metric_fixture();
    assert_eq!(fx.side, METRIC_SIDE);
    let mut worst = (String::new(), 0, 0.0);
    for c in &fx.cases {
        let (pred, gt) = metric_case(c.case);
        let s = METRIC_SIDE;
        assert!((pred.iter().sum::<f64>() - c.pred_sum).abs() < 1e-9, "case {} inputs differ", c.case);
        assert_eq!(gt.iter().filter(|&&g| g == 1.0).count(), c.gt_fg, "case {}", c.case);
        let got = [
            ("S_m", cgnet::metrics::s_measure(&pred, &gt, s, s).unwrap(), c.s_measure),
            ("E_m", cgnet::metrics::e_measure_mean(&pred, &gt, s, s).unwrap(), c.e_measure_mean),
            ("F_w", cgnet::metrics::f_weighted(&pred, &gt, s, s).unwrap(), c.f_weighted),
            ("F_m", cgnet::metrics::f_mean(&pred, &gt, s, s).unwrap(), c.f_mean),
            ("MAE", cgnet::metrics::mae(&pred, &gt, s, s).unwrap(), c.mae),
        ];
        for (name, a, b) in got {
            let d = (a - b).abs();
            if d > worst.2 || worst.0.is_empty() {
                worst = (name.to_string(), c.case, d);
            }
        }
    }
    worst
}
