//! End-to-end wiring: encoders, prompt generator, guidance, SCM ladder and
//! decoder.

use crate::cgd::{Decoder, PredictionSet, Scm, ScmIntermediate};
use crate::config::RunConfig;
use crate::cpg::{Cpg, PromptFeatures};
use crate::csg::Csg;
use crate::encoders::{encode_text, Backbone, BackboneLevels, PyramidFusion, VisualEncoder, VisualLevels};
use crate::error::{Error, Result};
use crate::nn::BlockStyle;
use crate::param::{ParamBuilder, Parameter};
use crate::tensor::Tensor;

/// Every named intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub f_t: Tensor,
    pub visual: VisualLevels,
    pub f_m: Tensor,
    pub prompt: PromptFeatures,
    pub backbone: BackboneLevels,
    pub g_c: Tensor,
    /// SCM levels 1, 2, 3.
    pub scm: Vec<ScmIntermediate>,
}

impl FeatureBundle {
    /// Named single-sample feature maps, for debug dumps.
    pub fn named_maps(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("f1", &self.visual.f1),
            ("f2", &self.visual.f2),
            ("f3", &self.visual.f3),
            ("f_m", &self.f_m),
            ("f_c", &self.prompt.f_c),
            ("f_n", &self.prompt.f_n),
            ("f_n1", &self.prompt.f_n1),
            ("f_n2", &self.prompt.f_n2),
            ("f_n3", &self.prompt.f_n3),
            ("f_v", &self.prompt.f_v),
            ("x1", &self.backbone.x1),
            ("x2", &self.backbone.x2),
            ("x3", &self.backbone.x3),
            ("x4", &self.backbone.x4),
            ("g_c", &self.g_c),
        ];
        for (name, s) in ["f_s1", "f_s2", "f_s3"].into_iter().zip(&self.scm) {
            v.push((name, &s.f_s));
        }
        v
    }
}

pub struct CgNet {
    pub cfg: RunConfig,
    pub visual: VisualEncoder,
    pub fusion: PyramidFusion,
    pub cpg: Cpg,
    pub backbone: Backbone,
    pub csg: Csg,
    /// SCM levels 1, 2, 3.
    pub scm: Vec<Scm>,
    pub decoder: Decoder,
    params: Vec<Parameter>,
}

impl CgNet {
    /// Trainable weights are drawn from `cfg.seed`; frozen encoder weights
    /// from `cfg.encoder.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let pb = ParamBuilder::new(cfg.seed);
        let e = &cfg.encoder;
        let m = &cfg.model;
        let style = BlockStyle {
            norm: m.norm,
            activation: m.activation,
        };
        let ch = e.backbone_channels;
        let d = e.visual_dim;
        let visual = VisualEncoder::new(&pb.sub("visual"), e)?;
        let fusion = PyramidFusion::new(&pb.sub("fusion"), e, m.heads)?;
        let cpg = Cpg::new(&pb.sub("cpg"), e.text_dim, d, m.heads, style)?;
        let backbone = Backbone::new(&pb.sub("backbone"), e)?;
        let csg = Csg::new(&pb.sub("csg"), d, ch[3], m.heads)?;
        let scm = (0..3)
            .map(|i| Scm::new(&pb.sub(&format!("scm{}", i + 1)), ch[i], ch[i + 1], ch[3], style))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(&pb.sub("decoder"), ch, d, e.detector_size)?;
        Ok(CgNet {
            cfg: cfg.clone(),
            visual,
            fusion,
            cpg,
            backbone,
            csg,
            scm,
            decoder,
            params: pb.params(),
        })
    }

    /// All parameters, frozen ones included, in construction order.
    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn trainable_params(&self) -> Vec<Parameter> {
        self.params.iter().filter(|p| !p.is_frozen()).cloned().collect()
    }

    pub fn frozen_params(&self) -> Vec<Parameter> {
        self.params.iter().filter(|p| p.is_frozen()).cloned().collect()
    }

    /// Resizes a `[B,3,H,W]` image to the prompt and detector input sizes.
    pub fn prepare_inputs(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (sp, sd) = (self.cfg.encoder.prompt_size, self.cfg.encoder.detector_size);
        Ok((image.bilinear_resize(sp, sp)?, image.bilinear_resize(sd, sd)?))
    }

    /// Full forward pass; `labels` has one entry per batch row.
    pub fn forward(
        &self,
        prompt_image: &Tensor,
        detector_image: &Tensor,
        labels: &[&str],
    ) -> Result<(PredictionSet, FeatureBundle)> {
        let b = prompt_image.dims4()?.0;
        if labels.len() != b || detector_image.dims4()?.0 != b {
            return Err(Error::Usage(format!(
                "batch mismatch: {} labels, prompt batch {b}, detector batch {}",
                labels.len(),
                detector_image.shape()[0]
            )));
        }
        let f_t = encode_text(labels, &self.cfg.encoder)?;
        let visual = self.visual.forward(prompt_image)?;
        let f_m = self.fusion.forward(&visual, &f_t)?;
        let prompt = self.cpg.forward(&f_m, &f_t, &visual)?;
        let backbone = self.backbone.forward(detector_image)?;
        let g_c = self.csg.forward(&backbone.x4, &prompt.f_v, &f_m)?;
        let xs = [&backbone.x1, &backbone.x2, &backbone.x3, &backbone.x4];
        let scm = (0..3)
            .map(|i| self.scm[i].forward(xs[i], xs[i + 1], &g_c))
            .collect::<Result<Vec<_>>>()?;
        let f_s: Vec<Tensor> = scm.iter().rev().map(|s| s.f_s.clone()).collect();
        let preds = self.decoder.forward(&f_s, &backbone.x4, &prompt.f_v, &f_m)?;
        for (name, map) in PredictionSet::NAMES.iter().zip(preds.maps()) {
            if !map.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("prediction {name}"),
                });
            }
        }
        Ok((
            preds,
            FeatureBundle {
                f_t,
                visual,
                f_m,
                prompt,
                backbone,
                g_c,
                scm,
            },
        ))
    }

    /// Forward from a single source image batch.
    pub fn forward_image(&self, image: &Tensor, labels: &[&str]) -> Result<(PredictionSet, FeatureBundle)> {
        let (p, d) = self.prepare_inputs(image)?;
        self.forward(&p, &d, labels)
    }
}
