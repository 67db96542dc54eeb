//! Class prompt generator: cross-modal attention, multi-level alignment and
//! progressive refinement, producing the prompt feature `F_v`.

use crate::encoders::VisualLevels;
use crate::error::{shape_err, Result};
use crate::nn::{BlockStyle, Conv2d, ConvBlock, Linear, Mhsa};
use crate::param::{Init, ParamBuilder};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PromptFeatures {
    pub f_c: Tensor,
    pub f_n: Tensor,
    pub f_n1: Tensor,
    pub f_n2: Tensor,
    pub f_n3: Tensor,
    pub f_v: Tensor,
}

/// Image tokens of `F_m` attend to the projected text token; the result is
/// added back onto `F_m`. The output projection starts at zero.
#[derive(Debug, Clone)]
pub struct CrossModalAttention {
    pub text_proj: Linear,
    pub attn: Mhsa,
}

impl CrossModalAttention {
    pub fn new(pb: &ParamBuilder, text_dim: usize, dim: usize, heads: usize) -> Result<Self> {
        Ok(CrossModalAttention {
            text_proj: Linear::new(&pb.sub("text_proj"), text_dim, dim, Init::lecun(text_dim))?,
            attn: Mhsa::new(&pb.sub("attn"), dim, heads, true)?,
        })
    }

    pub fn forward(&self, f_m: &Tensor, text: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = f_m.dims4()?;
        if text.shape().first() != Some(&b) {
            return Err(shape_err!("text rows {:?} vs batch {b}", text.shape()));
        }
        let text_tok = self.text_proj.forward(text)?.reshape(&[b, 1, d])?;
        let attended = self.attn.forward(&f_m.to_tokens()?, &text_tok)?;
        f_m.add(&attended.from_tokens(h, w)?)
    }
}

/// One alignment branch: project a visual level to the prompt width, resize
/// it to the prompt grid, and let the `F_c` tokens attend to it.
#[derive(Debug, Clone)]
pub struct AlignBranch {
    pub proj: Conv2d,
    pub attn: Mhsa,
}

impl AlignBranch {
    fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(AlignBranch {
            proj: Conv2d::pointwise(&pb.sub("proj"), dim, dim)?,
            attn: Mhsa::new(&pb.sub("attn"), dim, heads, false)?,
        })
    }

    fn forward(&self, fc_tokens: &Tensor, level: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let ctx = self.proj.forward(level)?.bilinear_resize(h, w)?.to_tokens()?;
        self.attn.forward(fc_tokens, &ctx)
    }
}

/// `F_n = MHSA(F_c, F_2) + MHSA(F_c, F_3)` with independent branches.
#[derive(Debug, Clone)]
pub struct MvcmAlign {
    pub branch2: AlignBranch,
    pub branch3: AlignBranch,
}

impl MvcmAlign {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(MvcmAlign {
            branch2: AlignBranch::new(&pb.sub("branch2"), dim, heads)?,
            branch3: AlignBranch::new(&pb.sub("branch3"), dim, heads)?,
        })
    }

    pub fn forward(&self, f_c: &Tensor, f2: &Tensor, f3: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = f_c.dims4()?;
        let tokens = f_c.to_tokens()?;
        let a = self.branch2.forward(&tokens, f2, h, w)?;
        let b = self.branch3.forward(&tokens, f3, h, w)?;
        a.add(&b)?.from_tokens(h, w)
    }
}

/// Residual progressive refinement:
///
/// ```text
/// F1 = B1b(B1a(Fn) + Fn)
/// F2 = B2b(B2a(Fn*F1) + Fn*F1)
/// F3 = B3b(B3a(Fn*F2) + Fn*F2)
/// Fv = Bf([F1, F2, F3])
/// ```
#[derive(Debug, Clone)]
pub struct MvcmEnhance {
    /// `(inner, outer)` blocks of the three refinement steps.
    pub steps: [(ConvBlock, ConvBlock); 3],
    pub fuse: ConvBlock,
}

impl MvcmEnhance {
    pub fn new(pb: &ParamBuilder, dim: usize, style: BlockStyle) -> Result<Self> {
        let step = |i: usize| -> Result<(ConvBlock, ConvBlock)> {
            let s = pb.sub(&format!("step{i}"));
            Ok((
                ConvBlock::new(&s.sub("inner"), dim, dim, style)?,
                ConvBlock::new(&s.sub("outer"), dim, dim, style)?,
            ))
        };
        Ok(MvcmEnhance {
            steps: [step(1)?, step(2)?, step(3)?],
            fuse: ConvBlock::new(&pb.sub("fuse"), 3 * dim, dim, style)?,
        })
    }

    /// Returns `(F_n^1, F_n^2, F_n^3, F_v)`.
    pub fn forward(&self, f_n: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let refine = |(inner, outer): &(ConvBlock, ConvBlock), x: &Tensor| -> Result<Tensor> {
            outer.forward(&inner.forward(x)?.add(x)?)
        };
        let f1 = refine(&self.steps[0], f_n)?;
        let f2 = refine(&self.steps[1], &f_n.mul(&f1)?)?;
        let f3 = refine(&self.steps[2], &f_n.mul(&f2)?)?;
        let f_v = self.fuse.forward(&Tensor::concat(&[&f1, &f2, &f3], 1)?)?;
        Ok((f1, f2, f3, f_v))
    }
}

#[derive(Debug, Clone)]
pub struct Cpg {
    pub cma: CrossModalAttention,
    pub align: MvcmAlign,
    pub enhance: MvcmEnhance,
}

impl Cpg {
    pub fn new(pb: &ParamBuilder, text_dim: usize, dim: usize, heads: usize, style: BlockStyle) -> Result<Self> {
        Ok(Cpg {
            cma: CrossModalAttention::new(&pb.sub("cma"), text_dim, dim, heads)?,
            align: MvcmAlign::new(&pb.sub("align"), dim, heads)?,
            enhance: MvcmEnhance::new(&pb.sub("enhance"), dim, style)?,
        })
    }

    pub fn forward(&self, f_m: &Tensor, text: &Tensor, levels: &VisualLevels) -> Result<PromptFeatures> {
        let f_c = self.cma.forward(f_m, text)?;
        let f_n = self.align.forward(&f_c, &levels.f2, &levels.f3)?;
        let (f_n1, f_n2, f_n3, f_v) = self.enhance.forward(&f_n)?;
        Ok(PromptFeatures {
            f_c,
            f_n,
            f_n1,
            f_n2,
            f_n3,
            f_v,
        })
    }
}
