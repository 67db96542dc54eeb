//! Class-semantic guidance: `G_c = X4 + MHSA(X4, F_v') + MHSA(X4, F_m')`,
//! where the primed prompt features are projected to the width of `X4` and
//! resized to its grid.

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, Mhsa};
use crate::param::ParamBuilder;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Csg {
    pub proj_v: Conv2d,
    pub proj_m: Conv2d,
    pub attn_v: Mhsa,
    pub attn_m: Mhsa,
}

impl Csg {
    pub fn new(pb: &ParamBuilder, prompt_dim: usize, c4: usize, heads: usize) -> Result<Self> {
        Ok(Csg {
            proj_v: Conv2d::pointwise(&pb.sub("proj_v"), prompt_dim, c4)?,
            proj_m: Conv2d::pointwise(&pb.sub("proj_m"), prompt_dim, c4)?,
            attn_v: Mhsa::new(&pb.sub("attn_v"), c4, heads, true)?,
            attn_m: Mhsa::new(&pb.sub("attn_m"), c4, heads, true)?,
        })
    }

    pub fn forward(&self, x4: &Tensor, f_v: &Tensor, f_m: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x4.dims4()?;
        for f in [f_v, f_m] {
            if f.shape().first() != Some(&b) {
                return Err(shape_err!("guidance: batch of {:?} vs x4 {:?}", f.shape(), x4.shape()));
            }
        }
        let query = x4.to_tokens()?;
        let ctx_v = self.proj_v.forward(f_v)?.bilinear_resize(h, w)?.to_tokens()?;
        let ctx_m = self.proj_m.forward(f_m)?.bilinear_resize(h, w)?.to_tokens()?;
        let a = self.attn_v.forward(&query, &ctx_v)?.from_tokens(h, w)?;
        let m = self.attn_m.forward(&query, &ctx_m)?.from_tokens(h, w)?;
        x4.add(&a)?.add(&m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_at_init() {
        let csg = Csg::new(&ParamBuilder::new(1), 8, 16, 4).unwrap();
        let x4 = randn(&[2, 16, 2, 2], 1);
        let g = csg.forward(&x4, &randn(&[2, 8, 4, 4], 2), &randn(&[2, 8, 4, 4], 3)).unwrap();
        assert!(g.bit_eq(&x4));
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let csg = Csg::new(&ParamBuilder::new(1), 8, 16, 4).unwrap();
        let r = csg.forward(&randn(&[2, 16, 2, 2], 1), &randn(&[1, 8, 4, 4], 2), &randn(&[2, 8, 4, 4], 3));
        assert!(r.is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let csg = Csg::new(&ParamBuilder::new(2), 4, 8, 2).unwrap();
        for (i, attn) in [&csg.attn_v, &csg.attn_m].into_iter().enumerate() {
            attn.out.weight.set_values(randn(&[8, 8], 10 + i as u64).to_vec()).unwrap();
        }
        let x4 = randn(&[1, 8, 2, 2], 1);
        let f_m = randn(&[1, 4, 4, 4], 3);
        let target = randn(&[1, 8, 2, 2], 4);
        let loss = |fv: &Tensor| Ok(csg.forward(&x4, fv, &f_m)?.mul(&target)?.sum());
        let rep = grad_check(loss, &randn(&[1, 4, 4, 4], 2), 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
        let rep = grad_check(|x| Ok(csg.forward(x, &f_m, &f_m)?.square().sum()), &x4, 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
