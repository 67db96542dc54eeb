//! Layers built from parameters: convolutions, linear maps, conv blocks and
//! multi-head attention.

use crate::config::Activation;
use crate::error::{Error, Result};
use crate::param::{Init, ParamBuilder, Parameter};
use crate::tensor::{Conv2dOptions, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        opts: Conv2dOptions,
        weight_init: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        Ok(Conv2d {
            weight: pb.param("weight", &[c_out, c_in, kernel, kernel], weight_init)?,
            bias: bias.map(|init| pb.param("bias", &[c_out], init)).transpose()?,
            opts,
        })
    }

    /// Shape-preserving 3x3 convolution with He-initialized weights and zero bias.
    pub fn same3(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(pb, c_in, c_out, 3, Conv2dOptions::SAME3, Init::kaiming(c_in * 9), Some(Init::Zeros))
    }

    /// 1x1 projection with unit-gain weights and zero bias.
    pub fn pointwise(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(pb, c_in, c_out, 1, Conv2dOptions::POINTWISE, Init::lecun(c_in), Some(Init::Zeros))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(Parameter::tensor);
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.opts)
    }

    pub fn params(&self) -> Vec<Parameter> {
        std::iter::once(self.weight.clone()).chain(self.bias.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, weight_init: Init) -> Result<Self> {
        Ok(Linear {
            weight: pb.param("weight", &[d_out, d_in], weight_init)?,
            bias: pb.param("bias", &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight.tensor(), Some(&self.bias.tensor()))
    }

    pub fn params(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// How a [`ConvBlock`] post-processes its convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockStyle {
    pub norm: bool,
    pub activation: Activation,
}

impl BlockStyle {
    /// A bare convolution.
    pub const PLAIN: BlockStyle = BlockStyle {
        norm: false,
        activation: Activation::Identity,
    };
}

pub const NORM_EPS: f64 = 1e-6;

/// 3x3 convolution, then optional instance normalization with learned
/// per-channel scale and shift, then the activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub scale: Option<Parameter>,
    pub shift: Option<Parameter>,
    pub style: BlockStyle,
}

impl ConvBlock {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, style: BlockStyle) -> Result<Self> {
        let conv = Conv2d::same3(&pb.sub("conv"), c_in, c_out)?;
        let (scale, shift) = if style.norm {
            let norm = pb.sub("norm");
            (
                Some(norm.param("scale", &[c_out], Init::Ones)?),
                Some(norm.param("shift", &[c_out], Init::Zeros)?),
            )
        } else {
            (None, None)
        };
        Ok(ConvBlock {
            conv,
            scale,
            shift,
            style,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.conv.forward(x)?;
        if let (Some(scale), Some(shift)) = (&self.scale, &self.shift) {
            y = y.instance_norm(NORM_EPS)?.channel_affine(&scale.tensor(), &shift.tensor())?;
        }
        Ok(match self.style.activation {
            Activation::Relu => y.relu(),
            Activation::Identity => y,
        })
    }
}

/// Multi-head scaled dot-product attention with separate query and context
/// sources. Inputs and output are `[B, N, D]` token sequences.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mhsa {
    /// With `zero_out`, the output projection starts at zero so a residual
    /// branch built on this layer is the identity at initialization.
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("attention width {dim} is not divisible by {heads} heads")));
        }
        let init = Init::lecun(dim);
        Ok(Mhsa {
            q: Linear::new(&pb.sub("q"), dim, dim, init)?,
            k: Linear::new(&pb.sub("k"), dim, dim, init)?,
            v: Linear::new(&pb.sub("v"), dim, dim, init)?,
            out: Linear::new(&pb.sub("out"), dim, dim, if zero_out { Init::Zeros } else { init })?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, context)?.0)
    }

    /// Also returns the attention weights as `[B, heads, N_q, N_k]`.
    pub fn forward_with_weights(&self, query: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, nq, d) = query.dims3()?;
        let (bk, nk, dk) = context.dims3()?;
        if b != bk || d != self.dim || dk != self.dim {
            return Err(crate::error::shape_err!(
                "attention: query {:?} and context {:?} for width {}",
                query.shape(),
                context.shape(),
                self.dim
            ));
        }
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split_heads = |t: Tensor, n: usize| -> Result<Tensor> {
            t.reshape(&[b, n, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, n, dh])
        };
        let q = split_heads(self.q.forward(query)?, nq)?;
        let k = split_heads(self.k.forward(context)?, nk)?;
        let v = split_heads(self.v.forward(context)?, nk)?;
        let scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax(2)?;
        let mixed = attn
            .matmul(&v)?
            .reshape(&[b, h, nq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, nq, self.dim])?;
        Ok((self.out.forward(&mixed)?, attn.reshape(&[b, h, nq, nk])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_key_attention_is_value_projection() {
        let pb = ParamBuilder::new(5);
        let m = Mhsa::new(&pb, 4, 1, false).unwrap();
        let q = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(1));
        let c = Tensor::randn(&[2, 1, 4], 1.0, &mut rng(2));
        let (out, w) = m.forward_with_weights(&q, &c).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
        let expect = m.out.forward(&m.v.forward(&c).unwrap()).unwrap();
        for bi in 0..2 {
            for t in 0..3 {
                for j in 0..4 {
                    let got = out.data()[(bi * 3 + t) * 4 + j];
                    assert!((got - expect.data()[bi * 4 + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let pb = ParamBuilder::new(6);
        let m = Mhsa::new(&pb, 8, 2, false).unwrap();
        let q = Tensor::randn(&[2, 5, 8], 1.0, &mut rng(3));
        let c = Tensor::randn(&[2, 7, 8], 1.0, &mut rng(4));
        let (_, w) = m.forward_with_weights(&q, &c).unwrap();
        for row in w.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_token_attention() {
        let pb = ParamBuilder::new(0);
        let m = Mhsa::new(&pb, 2, 1, false).unwrap();
        m.q.weight.set_values(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        m.k.weight.set_values(vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        m.v.weight.set_values(vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        m.out.weight.set_values(vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        m.out.bias.set_values(vec![0.5, 0.0]).unwrap();
        let q = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap();
        let out = m.forward(&q, &c).unwrap();
        // keys: (2,2), (6,-1); values: (3,2), (2,-1); scale 1/sqrt(2)
        let s = 1.0 / 2f64.sqrt();
        let expect = |qv: [f64; 2]| {
            let s0 = (qv[0] * 2.0 + qv[1] * 2.0) * s;
            let s1 = (qv[0] * 6.0 - qv[1]) * s;
            let (e0, e1) = (s0.exp(), s1.exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let mixed = [a0 * 3.0 + a1 * 2.0, a0 * 2.0 - a1];
            [mixed[0] + 0.5, 2.0 * mixed[1]]
        };
        let want: Vec<f64> = [expect([1.0, 0.0]), expect([0.0, 1.0])].concat();
        for (g, w) in out.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(Mhsa::new(&ParamBuilder::new(0), 6, 4, false), Err(Error::Config(_))));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let pb = ParamBuilder::new(8);
        let m = Mhsa::new(&pb, 4, 2, false).unwrap();
        let c = Tensor::randn(&[1, 3, 4], 1.0, &mut rng(5));
        let q = Tensor::randn(&[1, 2, 4], 1.0, &mut rng(6));
        let rep = grad_check(|x| Ok(m.forward(x, &c)?.square().sum()), &q, 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
        let rep = grad_check(|x| Ok(m.forward(&q, x)?.square().sum()), &c, 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let pb = ParamBuilder::new(9);
        let style = BlockStyle {
            norm: true,
            activation: Activation::Identity,
        };
        let blk = ConvBlock::new(&pb, 2, 3, style).unwrap();
        let x = Tensor::randn(&[1, 2, 3, 3], 1.0, &mut rng(7));
        let target = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng(8));
        let rep = grad_check(
            |x| Ok(blk.forward(x)?.mul(&target)?.sum()),
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
