//! Training loop, loss trace and model evaluation over loaded samples.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cgd::PredictionSet;
use crate::config::RunConfig;
use crate::dataset::{imageio, load_mask, Triple};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{evaluate_dataset, MetricReport, Pair};
use crate::model::CgNet;
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Stream salt so shuffling and augmentation draws differ from init draws.
const DATA_STREAM: u64 = 0x5eed_da7a;

/// One `(image, label, mask)` triple held in memory at native resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f64>,
    /// `[H, W]` in `{0, 1}`.
    pub mask: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

pub fn load_samples(triples: &[Triple]) -> Result<Vec<Sample>> {
    triples
        .iter()
        .map(|t| {
            let image = imageio::load_rgb(&t.image_path)?;
            let mask = load_mask(&t.mask_path)?;
            let (_, _, h, w) = image.dims4()?;
            if mask.shape()[2..] != [h, w] {
                return Err(Error::Input(format!("{}: mask and image sizes differ", t.id)));
            }
            Ok(Sample {
                id: t.id.clone(),
                label: t.label.clone(),
                image: image.to_vec(),
                mask: mask.to_vec(),
                h,
                w,
            })
        })
        .collect()
}

/// One row of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const LOSS_CSV_HEADER: [&str; 10] = [
    "step", "bce", "iou", "total", "seg_p1", "seg_p2", "seg_p3", "seg_p4", "seg_fv", "seg_fm",
];

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LOSS_CSV_HEADER)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), fmt(r.loss.bce), fmt(r.loss.iou), fmt(r.loss.total)];
        rec.extend(r.loss.per_map.iter().map(|(_, v)| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Round-trip formatting so traces compare bitwise as text.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn flip_rows(data: &mut [f64], planes: usize, h: usize, w: usize) {
    for p in 0..planes {
        for r in 0..h {
            data[(p * h + r) * w..(p * h + r + 1) * w].reverse();
        }
    }
}

/// Crops a window covering 80 to 100 percent of each side.
fn crop(sample: &Sample, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let scale = rng.random_range(0.8..=1.0);
    let ch = ((sample.h as f64 * scale).round() as usize).max(1);
    let cw = ((sample.w as f64 * scale).round() as usize).max(1);
    let r0 = rng.random_range(0..=sample.h - ch);
    let c0 = rng.random_range(0..=sample.w - cw);
    let take = |src: &[f64], planes: usize| {
        let mut out = Vec::with_capacity(planes * ch * cw);
        for p in 0..planes {
            for r in r0..r0 + ch {
                let row = (p * sample.h + r) * sample.w;
                out.extend_from_slice(&src[row + c0..row + c0 + cw]);
            }
        }
        out
    };
    (take(&sample.image, 3), take(&sample.mask, 1), ch, cw)
}

/// Bilinear mask resize followed by thresholding at 0.5.
fn resize_mask(mask: Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = mask.dims4()?;
    if (h, w) == (size, size) {
        return Ok(mask);
    }
    let r = mask.bilinear_resize(size, size)?;
    let data = r.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(r.shape(), data)
}

/// Network inputs for a batch: prompt-branch image, detector image, mask at
/// the detector size.
pub struct Batch {
    pub prompt: Tensor,
    pub detector: Tensor,
    pub mask: Tensor,
    pub labels: Vec<String>,
}

impl Batch {
    pub fn labels(&self) -> Vec<&str> {
        self.labels.iter().map(String::as_str).collect()
    }
}

/// Builds a batch, drawing augmentation from `rng` when given.
pub fn make_batch(
    model: &CgNet,
    samples: &[&Sample],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Batch> {
    let cfg = &model.cfg.optim;
    let sd = model.cfg.encoder.detector_size;
    let (mut prompts, mut dets, mut masks) = (vec![], vec![], vec![]);
    for s in samples {
        let (mut image, mut mask, mut h, mut w) = (s.image.clone(), s.mask.clone(), s.h, s.w);
        if let Some(rng) = rng.as_deref_mut() {
            if cfg.crop {
                (image, mask, h, w) = crop(s, rng);
            }
            if cfg.flip && rng.random_bool(0.5) {
                flip_rows(&mut image, 3, h, w);
                flip_rows(&mut mask, 1, h, w);
            }
            if cfg.jitter {
                let gain = rng.random_range(0.9..1.1);
                let bias = rng.random_range(-0.05..0.05);
                image.iter_mut().for_each(|v| *v = (*v * gain + bias).clamp(0.0, 1.0));
            }
        }
        let img = Tensor::new(&[1, 3, h, w], image)?;
        let (p, d) = model.prepare_inputs(&img)?;
        prompts.push(p);
        dets.push(d);
        masks.push(resize_mask(Tensor::new(&[1, 1, h, w], mask)?, sd)?);
    }
    let cat = |v: &[Tensor]| Tensor::concat(&v.iter().collect::<Vec<_>>(), 0);
    Ok(Batch {
        prompt: cat(&prompts)?,
        detector: cat(&dets)?,
        mask: cat(&masks)?,
        labels: samples.iter().map(|s| s.label.clone()).collect(),
    })
}

pub struct TrainOutcome {
    pub model: CgNet,
    pub trace: Vec<LossRow>,
}

/// Trains a freshly initialized model for `cfg.optim.steps` Adam steps.
/// Row `k` of the trace is the loss of the batch used for update `k`.
pub fn train(cfg: &RunConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    let model = CgNet::new(cfg)?;
    let trace = train_model(&model, samples, |_| {})?;
    Ok(TrainOutcome { model, trace })
}

/// Trains `model` in place, calling `on_step` after each update.
pub fn train_model(model: &CgNet, samples: &[Sample], mut on_step: impl FnMut(&LossRow)) -> Result<Vec<LossRow>> {
    let cfg = &model.cfg;
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    let o = &cfg.optim;
    let mut opt = Adam::new(model.trainable_params(), o.lr, o.beta1, o.beta2, o.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    let bs = o.batch_size.min(samples.len());
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(o.steps);
    for step in 0..o.steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..samples.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<&Sample> = order.drain(..bs).map(|i| &samples[i]).collect();
        let batch = make_batch(model, &picked, Some(&mut rng))?;
        let (preds, _) = model.forward(&batch.prompt, &batch.detector, &batch.labels())?;
        let (loss, breakdown) = total_loss(&preds, &batch.mask)?;
        loss.backward()?;
        opt.step()?;
        let row = LossRow { step, loss: breakdown };
        on_step(&row);
        trace.push(row);
    }
    Ok(trace)
}

/// Forward pass over `samples` in batches, without augmentation.
pub fn predict(model: &CgNet, samples: &[Sample], batch_size: usize) -> Result<Vec<(PredictionSet, Batch)>> {
    samples
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = make_batch(model, &refs, None)?;
            let (preds, _) = model.forward(&batch.prompt, &batch.detector, &batch.labels())?;
            Ok((preds, batch))
        })
        .collect()
}

/// Total loss over all samples, averaged over batches of `batch_size`.
pub fn dataset_loss(model: &CgNet, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let outs = predict(model, samples, batch_size)?;
    let mut sum = 0.0;
    for (preds, batch) in &outs {
        sum += total_loss(preds, &batch.mask)?.1.total;
    }
    Ok(sum / outs.len() as f64)
}

/// Per-sample metrics of the `p1` map, resized to each mask's native size.
pub fn evaluate_model(model: &CgNet, samples: &[Sample], batch_size: usize) -> Result<(Vec<MetricReport>, MetricReport)> {
    let mut pairs = Vec::with_capacity(samples.len());
    let mut k = 0;
    for (preds, _) in predict(model, samples, batch_size)? {
        let b = preds.p1.shape()[0];
        for i in 0..b {
            let s = &samples[k];
            let logits = preds.p1.narrow(0, i, 1)?.bilinear_resize(s.h, s.w)?;
            pairs.push(Pair {
                pred: logits.sigmoid().to_vec(),
                gt: s.mask.clone(),
                h: s.h,
                w: s.w,
            });
            k += 1;
        }
    }
    evaluate_dataset(&pairs)
}

/// Writes the channel mean of every named feature map of the first batch
/// element, plus the sigmoid of each prediction, as 8-bit PNGs. Returns the
/// file names in write order.
pub fn dump_features(model: &CgNet, sample: &Sample, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let batch = make_batch(model, &[sample], None)?;
    let (preds, bundle) = model.forward(&batch.prompt, &batch.detector, &batch.labels())?;
    let mut written = Vec::new();
    for (name, map) in bundle.named_maps() {
        let (_, c, h, w) = map.dims4()?;
        let data = map.data();
        let mean: Vec<f64> = (0..h * w)
            .map(|i| (0..c).map(|ch| data[ch * h * w + i]).sum::<f64>() / c as f64)
            .collect();
        let file = format!("{name}.png");
        imageio::save_gray(&dir.join(&file), imageio::normalize_plane(&mean), h, w)?;
        written.push(file);
    }
    for (name, map) in PredictionSet::NAMES.iter().zip(preds.maps()) {
        let (_, _, h, w) = map.dims4()?;
        let probs: Vec<u8> = map.sigmoid().data().iter().map(|&v| imageio::to_u8(v)).collect();
        let file = format!("pred_{name}.png");
        imageio::save_gray(&dir.join(&file), probs, h, w)?;
        written.push(file);
    }
    Ok(written)
}
