//! Deterministic stand-in encoders.
//!
//! The text encoder and the visual tap stack are frozen and fully determined
//! by `EncoderConfig::seed`. The pyramid fusion with its transformer block
//! and the detector backbone are trainable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::EncoderConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Linear, Mhsa};
use crate::param::{fnv1a, Init, ParamBuilder};
use crate::tensor::{Conv2dOptions, Tensor};

const DOWN3: Conv2dOptions = Conv2dOptions { stride: 2, padding: 1 };

fn check_image(image: &Tensor, side: usize, what: &str) -> Result<usize> {
    let (b, c, h, w) = image.dims4()?;
    if c != 3 || h != side || w != side {
        return Err(shape_err!("{what} expects [B,3,{side},{side}], got {:?}", image.shape()));
    }
    Ok(b)
}

/// Embeds each label as a unit vector of length `text_dim`, one row per label.
pub fn encode_text(labels: &[&str], cfg: &EncoderConfig) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Input("no labels to encode".into()));
    }
    let mut data = Vec::with_capacity(labels.len() * cfg.text_dim);
    for label in labels {
        if label.trim().is_empty() {
            return Err(Error::Input("empty class label".into()));
        }
        let mut key = cfg.seed.to_le_bytes().to_vec();
        key.extend_from_slice(label.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key));
        let v: Vec<f64> = (0..cfg.text_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.into_iter().map(|x| x / norm));
    }
    Tensor::new(&[labels.len(), cfg.text_dim], data)
}

/// The three visual pyramid taps at strides 8, 16 and 16.
#[derive(Debug, Clone)]
pub struct VisualLevels {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
}

/// Frozen strided conv stack. The trunk convolutions have no bias, so a zero
/// image yields per-channel constant taps.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    trunk: Vec<Conv2d>,
    taps: [Conv2d; 3],
    side: usize,
}

impl VisualEncoder {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let pb = pb.frozen_with_seed(cfg.seed);
        let d = cfg.visual_dim;
        let stem = (d / 2).max(4);
        let specs = [(3, stem, DOWN3), (stem, d, DOWN3), (d, d, DOWN3), (d, d, DOWN3), (d, d, Conv2dOptions::SAME3)];
        let trunk = specs
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, opts))| {
                Conv2d::new(&pb.sub(&format!("trunk{i}")), ci, co, 3, opts, Init::kaiming(ci * 9), None)
            })
            .collect::<Result<Vec<_>>>()?;
        let tap = |i: usize| {
            Conv2d::new(
                &pb.sub(&format!("tap{i}")),
                d,
                d,
                1,
                Conv2dOptions::POINTWISE,
                Init::lecun(d),
                Some(Init::Normal { std: 0.1 }),
            )
        };
        Ok(VisualEncoder {
            trunk,
            taps: [tap(1)?, tap(2)?, tap(3)?],
            side: cfg.prompt_size,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<VisualLevels> {
        check_image(image, self.side, "visual encoder")?;
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(3);
        for (i, conv) in self.trunk.iter().enumerate() {
            x = conv.forward(&x)?.relu();
            if i >= 2 {
                outs.push(self.taps[i - 2].forward(&x)?);
            }
        }
        let f3 = outs.pop().expect("three taps");
        let f2 = outs.pop().expect("three taps");
        let f1 = outs.pop().expect("three taps");
        Ok(VisualLevels { f1, f2, f3 })
    }
}

/// Top-down fusion of the visual taps followed by one transformer block in
/// which the projected text vector joins the image tokens. Produces `F_m` on
/// the stride-8 grid.
#[derive(Debug, Clone)]
pub struct PyramidFusion {
    laterals: [Conv2d; 3],
    smooth: Conv2d,
    text_proj: Linear,
    attn: Mhsa,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl PyramidFusion {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig, heads: usize) -> Result<Self> {
        let d = cfg.visual_dim;
        let lat = |i: usize| Conv2d::pointwise(&pb.sub(&format!("lateral{i}")), d, d);
        Ok(PyramidFusion {
            laterals: [lat(1)?, lat(2)?, lat(3)?],
            smooth: Conv2d::new(
                &pb.sub("smooth"),
                d,
                d,
                3,
                Conv2dOptions::SAME3,
                Init::lecun(d * 9),
                Some(Init::Zeros),
            )?,
            text_proj: Linear::new(&pb.sub("text_proj"), cfg.text_dim, d, Init::lecun(cfg.text_dim))?,
            attn: Mhsa::new(&pb.sub("attn"), d, heads, false)?,
            ffn_in: Linear::new(&pb.sub("ffn_in"), d, 2 * d, Init::kaiming(d))?,
            ffn_out: Linear::new(&pb.sub("ffn_out"), 2 * d, d, Init::lecun(2 * d))?,
        })
    }

    pub fn forward(&self, levels: &VisualLevels, text: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = levels.f1.dims4()?;
        let (bt, _) = match *text.shape() {
            [bt, dt] => (bt, dt),
            ref s => return Err(shape_err!("text embedding must be [B, D_t], got {:?}", s)),
        };
        if bt != b {
            return Err(shape_err!("text batch {bt} vs image batch {b}"));
        }
        let (_, _, h2, w2) = levels.f2.dims4()?;
        let p3 = self.laterals[2].forward(&levels.f3)?;
        let p2 = self.laterals[1].forward(&levels.f2)?.add(&p3.bilinear_resize(h2, w2)?)?;
        let p1 = self.laterals[0].forward(&levels.f1)?.add(&p2.bilinear_resize(h, w)?)?;
        let fused = self.smooth.forward(&p1)?;

        let d = self.attn.dim;
        let tokens = fused.to_tokens()?;
        let text_tok = self.text_proj.forward(text)?.reshape(&[b, 1, d])?;
        let seq = Tensor::concat(&[&tokens, &text_tok], 1)?;
        let seq = seq.add(&self.attn.forward(&seq, &seq)?)?;
        let seq = seq.add(&self.ffn_out.forward(&self.ffn_in.forward(&seq)?.relu())?)?;
        seq.narrow(1, 0, h * w)?.from_tokens(h, w)
    }
}

/// Backbone pyramid levels at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct BackboneLevels {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub x4: Tensor,
}

/// Trainable detector backbone: a stride-2 stem, then four stages of a
/// stride-2 conv and a shape-preserving conv, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Conv2d,
    stages: Vec<(Conv2d, Conv2d)>,
    side: usize,
}

impl Backbone {
    pub fn new(pb: &ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let ch = cfg.backbone_channels;
        let down = |pb: &ParamBuilder, ci: usize, co: usize| {
            Conv2d::new(pb, ci, co, 3, DOWN3, Init::kaiming(ci * 9), Some(Init::Zeros))
        };
        let stem = down(&pb.sub("stem"), 3, ch[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let s = pb.sub(&format!("stage{}", i + 1));
            stages.push((down(&s.sub("down"), c_in, c)?, Conv2d::same3(&s.sub("conv"), c, c)?));
            c_in = c;
        }
        Ok(Backbone {
            stem,
            stages,
            side: cfg.detector_size,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<BackboneLevels> {
        check_image(image, self.side, "backbone")?;
        let mut x = self.stem.forward(image)?.relu();
        let mut outs = Vec::with_capacity(4);
        for (down, conv) in &self.stages {
            x = conv.forward(&down.forward(&x)?.relu())?.relu();
            outs.push(x.clone());
        }
        let mut it = outs.into_iter();
        let mut next = || it.next().expect("four stages");
        Ok(BackboneLevels {
            x1: next(),
            x2: next(),
            x3: next(),
            x4: next(),
        })
    }
}
