//! Class-guided detector: the semantics-consistency ladder over adjacent
//! backbone levels and the accumulating decoder.

use crate::error::{shape_err, Error, Result};
use crate::nn::{BlockStyle, Conv2d, ConvBlock, Linear};
use crate::param::{Init, ParamBuilder};
use crate::tensor::{Conv2dOptions, Tensor};

/// Number of channel groups in the refinement stage.
pub const GROUPS: usize = 4;

/// Every named intermediate of one SCM level.
#[derive(Debug, Clone)]
pub struct ScmIntermediate {
    pub r_cls: Tensor,
    pub x_hat_i: Tensor,
    pub x_hat_ip1: Tensor,
    pub g_c_prime: Tensor,
    pub x_tilde_i: Tensor,
    pub x_tilde_ip1: Tensor,
    pub x_cot: Tensor,
    pub groups: Vec<Tensor>,
    pub weights: Vec<Tensor>,
    pub gated: Vec<Tensor>,
    pub f_s: Tensor,
}

/// Channel gate: global average pool, two linear maps, sigmoid.
/// Output is `[B, C, 1, 1]`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Gate {
    pub fn new(pb: &ParamBuilder, c: usize) -> Result<Self> {
        Ok(Gate {
            fc1: Linear::new(&pb.sub("fc1"), c, c, Init::lecun(c))?,
            fc2: Linear::new(&pb.sub("fc2"), c, c, Init::lecun(c))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = x.global_avg_pool()?.reshape(&[b, c])?;
        self.fc2
            .forward(&self.fc1.forward(&pooled)?)?
            .sigmoid()
            .reshape(&[b, c, 1, 1])
    }
}

/// One semantics-consistency module over the level pair `(X_i, X_{i+1})`.
#[derive(Debug, Clone)]
pub struct Scm {
    pub proj_next: Conv2d,
    pub proj_guide: Conv2d,
    pub locate: ConvBlock,
    pub fc: Linear,
    pub cot: ConvBlock,
    pub gates: Vec<Gate>,
    pub group_convs: Vec<ConvBlock>,
    pub fuse: ConvBlock,
    pub channels: usize,
}

impl Scm {
    pub fn new(pb: &ParamBuilder, c: usize, c_next: usize, c_guide: usize, style: BlockStyle) -> Result<Self> {
        if !c.is_multiple_of(GROUPS) {
            return Err(Error::Config(format!("SCM width {c} is not divisible by {GROUPS} groups")));
        }
        let cg = c / GROUPS;
        Ok(Scm {
            proj_next: Conv2d::pointwise(&pb.sub("proj_next"), c_next, c)?,
            proj_guide: Conv2d::pointwise(&pb.sub("proj_guide"), c_guide, c)?,
            locate: ConvBlock::new(&pb.sub("locate"), c, c, style)?,
            fc: Linear::new(&pb.sub("fc"), 2 * c, c, Init::lecun(2 * c))?,
            cot: ConvBlock::new(&pb.sub("cot"), 2 * c, c, style)?,
            gates: (0..GROUPS)
                .map(|j| Gate::new(&pb.sub(&format!("gate{}", j + 1)), cg))
                .collect::<Result<_>>()?,
            group_convs: (0..GROUPS)
                .map(|j| ConvBlock::new(&pb.sub(&format!("group{}", j + 1)), cg, cg, style))
                .collect::<Result<_>>()?,
            fuse: ConvBlock::new(&pb.sub("fuse"), c, c, style)?,
            channels: c,
        })
    }

    /// Projects `X_{i+1}` and `G_c` to this level's width, then resizes them
    /// to the grid of `X_i`.
    pub fn align(&self, x_i: &Tensor, x_ip1: &Tensor, g_c: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x_i.dims4()?;
        Ok((
            self.proj_next.forward(x_ip1)?.bilinear_resize(h, w)?,
            self.proj_guide.forward(g_c)?.bilinear_resize(h, w)?,
        ))
    }

    /// Spatial localization on aligned inputs. Returns
    /// `(R_cls, X̂_i, X̂_{i+1}, G'_c, X̃_i, X̃_{i+1})`.
    #[allow(clippy::type_complexity)]
    pub fn spatial(
        &self,
        x_i: &Tensor,
        x_ip1: &Tensor,
        g: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor, Tensor)> {
        let (b, c, h, w) = x_i.dims4()?;
        if x_ip1.shape() != x_i.shape() || g.shape() != x_i.shape() {
            return Err(shape_err!(
                "spatial stage: {:?}, {:?}, {:?} are not aligned",
                x_i.shape(),
                x_ip1.shape(),
                g.shape()
            ));
        }
        let logits = self.locate.forward(&x_i.add(x_ip1)?)?.mul(g)?;
        let r_cls = logits.reshape(&[b, c, h * w])?.softmax(2)?.reshape(&[b, c, h, w])?;
        debug_assert!(r_cls
            .data()
            .chunks(h * w)
            .all(|plane| (plane.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        let x_hat_i = r_cls.mul(x_i)?;
        let x_hat_ip1 = r_cls.mul(x_ip1)?;
        let g_c_prime = self
            .fc
            .forward(&Tensor::concat(&[&x_hat_ip1, &x_hat_i], 1)?.to_tokens()?)?
            .from_tokens(h, w)?;
        let x_tilde_i = g_c_prime.add(&x_hat_i)?;
        let x_tilde_ip1 = g_c_prime.add(&x_hat_ip1)?;
        Ok((r_cls, x_hat_i, x_hat_ip1, g_c_prime, x_tilde_i, x_tilde_ip1))
    }

    /// Channel-adaptive refinement. Returns `(X_cot, groups, weights, gated, F_s)`.
    #[allow(clippy::type_complexity)]
    pub fn channel(
        &self,
        x_tilde_i: &Tensor,
        x_tilde_ip1: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, Tensor)> {
        if x_tilde_i.shape() != x_tilde_ip1.shape() {
            return Err(shape_err!(
                "channel stage: {:?} vs {:?}",
                x_tilde_i.shape(),
                x_tilde_ip1.shape()
            ));
        }
        let x_cot = self.cot.forward(&Tensor::concat(&[x_tilde_i, x_tilde_ip1], 1)?)?;
        let groups = x_cot.split(1, GROUPS)?;
        let mut weights = Vec::with_capacity(GROUPS);
        let mut gated = Vec::with_capacity(GROUPS);
        for ((g, gate), conv) in groups.iter().zip(&self.gates).zip(&self.group_convs) {
            let w = gate.forward(g)?;
            gated.push(conv.forward(&g.mul(&w)?)?);
            weights.push(w);
        }
        let refs: Vec<&Tensor> = gated.iter().collect();
        let f_s = self.fuse.forward(&Tensor::concat(&refs, 1)?)?;
        Ok((x_cot, groups, weights, gated, f_s))
    }

    pub fn forward(&self, x_i: &Tensor, x_ip1: &Tensor, g_c: &Tensor) -> Result<ScmIntermediate> {
        let (x_next, g) = self.align(x_i, x_ip1, g_c)?;
        let (r_cls, x_hat_i, x_hat_ip1, g_c_prime, x_tilde_i, x_tilde_ip1) = self.spatial(x_i, &x_next, &g)?;
        let (x_cot, groups, weights, gated, f_s) = self.channel(&x_tilde_i, &x_tilde_ip1)?;
        Ok(ScmIntermediate {
            r_cls,
            x_hat_i,
            x_hat_ip1,
            g_c_prime,
            x_tilde_i,
            x_tilde_ip1,
            x_cot,
            groups,
            weights,
            gated,
            f_s,
        })
    }
}

/// The four decoder outputs and the two auxiliary maps, all logits at the
/// detector resolution.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub p1: Tensor,
    pub p2: Tensor,
    pub p3: Tensor,
    pub p4: Tensor,
    pub aux_fv: Tensor,
    pub aux_fm: Tensor,
}

impl PredictionSet {
    pub const NAMES: [&'static str; 6] = ["p1", "p2", "p3", "p4", "fv", "fm"];

    /// The six maps in [`PredictionSet::NAMES`] order.
    pub fn maps(&self) -> [&Tensor; 6] {
        [&self.p1, &self.p2, &self.p3, &self.p4, &self.aux_fv, &self.aux_fm]
    }
}

/// Single-channel heads. Level predictions are accumulated top-down in logit
/// space on each level's native grid:
/// `P4 = H4(X4)`, `P_i = H_i(F_s^i) + up(P_{i+1})`.
#[derive(Debug, Clone)]
pub struct Decoder {
    /// Heads for levels 1..=4 (index 0 is level 1).
    pub heads: Vec<Conv2d>,
    pub aux_fv: Conv2d,
    pub aux_fm: Conv2d,
    pub out_size: usize,
}

impl Decoder {
    /// `level_channels` are the widths of `F_s^1, F_s^2, F_s^3, X_4`.
    pub fn new(pb: &ParamBuilder, level_channels: [usize; 4], prompt_dim: usize, out_size: usize) -> Result<Self> {
        let head = |name: String, c: usize, k: usize, opts| {
            Conv2d::new(&pb.sub(&name), c, 1, k, opts, Init::Zeros, Some(Init::Zeros))
        };
        Ok(Decoder {
            heads: level_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| head(format!("head{}", i + 1), c, 3, Conv2dOptions::SAME3))
                .collect::<Result<_>>()?,
            aux_fv: head("aux_fv".into(), prompt_dim, 1, Conv2dOptions::POINTWISE)?,
            aux_fm: head("aux_fm".into(), prompt_dim, 1, Conv2dOptions::POINTWISE)?,
            out_size,
        })
    }

    /// `f_s` is `[F_s^3, F_s^2, F_s^1]`.
    pub fn forward(&self, f_s: &[Tensor], x4: &Tensor, f_v: &Tensor, f_m: &Tensor) -> Result<PredictionSet> {
        if f_s.len() != 3 {
            return Err(Error::Usage(format!("decoder expects 3 SCM outputs, got {}", f_s.len())));
        }
        let s = self.out_size;
        let mut native = self.heads[3].forward(x4)?;
        let mut outs = vec![native.bilinear_resize(s, s)?];
        for (k, fs) in f_s.iter().enumerate() {
            let (_, _, h, w) = fs.dims4()?;
            native = self.heads[2 - k].forward(fs)?.add(&native.bilinear_resize(h, w)?)?;
            outs.push(native.bilinear_resize(s, s)?);
        }
        let mut it = outs.into_iter();
        let (p4, p3, p2, p1) = (
            it.next().expect("p4"),
            it.next().expect("p3"),
            it.next().expect("p2"),
            it.next().expect("p1"),
        );
        Ok(PredictionSet {
            p1,
            p2,
            p3,
            p4,
            aux_fv: self.aux_fv.forward(f_v)?.bilinear_resize(s, s)?,
            aux_fm: self.aux_fm.forward(f_m)?.bilinear_resize(s, s)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STYLE: BlockStyle = BlockStyle {
        norm: true,
        activation: Activation::Relu,
    };

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn identity3(c: usize) -> Vec<f64> {
        let mut w = vec![0.0; c * c * 9];
        for i in 0..c {
            w[(i * c + i) * 9 + 4] = 1.0;
        }
        w
    }

    #[test]
    fn r_cls_sums_to_one_per_channel() {
        let scm = Scm::new(&ParamBuilder::new(1), 8, 16, 32, STYLE).unwrap();
        let out = scm
            .forward(&randn(&[2, 8, 4, 4], 1), &randn(&[2, 16, 2, 2], 2), &randn(&[2, 32, 1, 1], 3))
            .unwrap();
        for plane in out.r_cls.data().chunks(16) {
            assert!(plane.iter().all(|&r| r > 0.0));
            assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.f_s.shape(), &[2, 8, 4, 4]);
    }

    #[test]
    fn uniform_logits_give_uniform_r_cls() {
        let scm = Scm::new(&ParamBuilder::new(2), 4, 4, 4, BlockStyle::PLAIN).unwrap();
        scm.locate.conv.weight.set_values(vec![0.0; 144]).unwrap();
        scm.locate.conv.bias.as_ref().unwrap().set_values(vec![0.7; 4]).unwrap();
        let g = Tensor::full(&[1, 4, 3, 3], 2.0);
        let x = randn(&[1, 4, 3, 3], 1);
        let (r, ..) = scm.spatial(&x, &randn(&[1, 4, 3, 3], 2), &g).unwrap();
        for v in r.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn split_concat_round_trip_is_bitwise() {
        let x = randn(&[1, 8, 2, 2], 4);
        let parts = x.split(1, GROUPS).unwrap();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert!(Tensor::concat(&refs, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn forced_identity_path_returns_x_cot() {
        let scm = Scm::new(&ParamBuilder::new(3), 8, 8, 8, BlockStyle::PLAIN).unwrap();
        for gate in &scm.gates {
            gate.fc2.weight.set_values(vec![0.0; 4]).unwrap();
            gate.fc2.bias.set_values(vec![1e3; 2]).unwrap();
        }
        for conv in &scm.group_convs {
            conv.conv.weight.set_values(identity3(2)).unwrap();
        }
        scm.fuse.conv.weight.set_values(identity3(8)).unwrap();
        let (x_cot, _, w, _, f_s) = scm.channel(&randn(&[1, 8, 2, 2], 1), &randn(&[1, 8, 2, 2], 2)).unwrap();
        assert!(w.iter().all(|w| w.data().iter().all(|&v| v == 1.0)));
        assert!(f_s.bit_eq(&x_cot));
    }

    #[test]
    fn closed_gates_give_bias_map() {
        let scm = Scm::new(&ParamBuilder::new(4), 8, 8, 8, STYLE).unwrap();
        for gate in &scm.gates {
            gate.fc2.weight.set_values(vec![0.0; 4]).unwrap();
            gate.fc2.bias.set_values(vec![-1e3; 2]).unwrap();
        }
        let (_, _, w, _, f_s) = scm.channel(&randn(&[1, 8, 2, 2], 1), &randn(&[1, 8, 2, 2], 2)).unwrap();
        assert!(w.iter().all(|w| w.data().iter().all(|&v| v < 1e-300)));
        for plane in f_s.data().chunks(4) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn groups_must_divide_width() {
        assert!(matches!(
            Scm::new(&ParamBuilder::new(0), 6, 8, 8, STYLE),
            Err(Error::Config(_))
        ));
    }

    fn decoder() -> Decoder {
        Decoder::new(&ParamBuilder::new(5), [4, 8, 8, 16], 8, 32).unwrap()
    }

    fn decoder_inputs() -> (Vec<Tensor>, Tensor, Tensor, Tensor) {
        (
            vec![randn(&[1, 8, 4, 4], 3), randn(&[1, 8, 8, 8], 2), randn(&[1, 4, 16, 16], 1)],
            randn(&[1, 16, 2, 2], 4),
            randn(&[1, 8, 8, 8], 5),
            randn(&[1, 8, 8, 8], 6),
        )
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let (fs, x4, fv, fm) = decoder_inputs();
        let p = decoder().forward(&fs, &x4, &fv, &fm).unwrap();
        for m in p.maps() {
            assert_eq!(m.shape(), &[1, 1, 32, 32]);
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
        assert!(matches!(decoder().forward(&fs[..2], &x4, &fv, &fm), Err(Error::Usage(_))));
    }

    #[test]
    fn accumulation_carries_level_four() {
        let dec = decoder();
        dec.heads[3].weight.set_values(randn(&[1, 16, 3, 3], 9).to_vec()).unwrap();
        dec.heads[3].bias.as_ref().unwrap().set_values(vec![0.25]).unwrap();
        let (fs, x4, fv, fm) = decoder_inputs();
        let p = dec.forward(&fs, &x4, &fv, &fm).unwrap();
        let native = dec.heads[3].forward(&x4).unwrap();
        let cascade = native
            .bilinear_resize(4, 4)
            .and_then(|t| t.bilinear_resize(8, 8))
            .and_then(|t| t.bilinear_resize(16, 16))
            .and_then(|t| t.bilinear_resize(32, 32))
            .unwrap();
        assert!(p.p1.bit_eq(&cascade));
        assert!(p.p4.bit_eq(&native.bilinear_resize(32, 32).unwrap()));
        assert!(p.p1.data().iter().any(|&v| v != 0.0));
    }
}
