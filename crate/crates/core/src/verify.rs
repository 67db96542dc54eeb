//! Finite-difference suite over every differentiable op and module, plus an
//! end-to-end check of the full model on sampled parameter coordinates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cgd::{Decoder, Gate, Scm};
use crate::config::{Activation, RunConfig};
use crate::cpg::{CrossModalAttention, MvcmAlign, MvcmEnhance};
use crate::csg::Csg;
use crate::error::{Error, Result};
use crate::losses::{bce_loss, iou_loss, total_loss};
use crate::model::CgNet;
use crate::nn::{BlockStyle, ConvBlock, Mhsa, NORM_EPS};
use crate::param::{ParamBuilder, Parameter};
use crate::tensor::{grad_check, rel_err, Conv2dOptions, GradCheckReport, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
/// Spatial size of the end-to-end model inputs.
pub const END_TO_END_SIDE: usize = 32;
const COORDS_PER_PARAM: usize = 2;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// The input coordinate with the largest relative error.
    pub worst: String,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl CheckRow {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        CheckRow {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            max_abs_err: r.max_abs_err,
            worst: format!("[{}]", r.worst_index),
            checked: r.checked,
            tol: r.tol,
            passed: r.passed,
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Entries bounded away from zero, so kinks and poles stay out of reach.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let t = Tensor::rand_uniform(shape, 0.2, 1.5, &mut ChaCha8Rng::seed_from_u64(seed));
    let signs = randn(shape, seed ^ 0x51);
    let data = t.data().iter().zip(signs.data()).map(|(v, s)| v.copysign(*s)).collect();
    Tensor::new(shape, data).expect("shape")
}

/// `sum(out * R)` for a fixed random `R`, so every output entry contributes
/// a distinct weight.
fn probe(out: &Tensor) -> Result<Tensor> {
    let r = randn(out.shape(), 0xfeed ^ out.numel() as u64);
    Ok(out.mul(&r)?.sum())
}

struct Suite {
    rows: Vec<CheckRow>,
}

impl Suite {
    fn check(&mut self, name: &str, input: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<()> {
        let rep = grad_check(|x| probe(&f(x)?), input, FD_STEP, OP_TOL)?;
        self.rows.push(CheckRow::from_report(name, &rep));
        Ok(())
    }
}

const STYLE: BlockStyle = BlockStyle {
    norm: true,
    activation: Activation::Relu,
};

fn elementwise(s: &mut Suite) -> Result<()> {
    let a = randn(&[2, 3, 4], 1);
    let b = away_from_zero(&[2, 3, 4], 2);
    s.check("add", &a, |x| x.add(&b))?;
    s.check("sub", &a, |x| b.sub(x))?;
    s.check("mul", &a, |x| x.mul(&b))?;
    s.check("div/numerator", &a, |x| x.div(&b))?;
    s.check("div/denominator", &b, |x| a.div(x))?;
    s.check("scale", &a, |x| Ok(x.scale(-1.7)))?;
    s.check("add_scalar", &a, |x| Ok(x.add_scalar(0.3)))?;
    s.check("neg", &a, |x| Ok(x.neg()))?;
    s.check("relu", &b, |x| Ok(x.relu()))?;
    s.check("sigmoid", &a, |x| Ok(x.sigmoid()))?;
    s.check("softplus", &a, |x| Ok(x.softplus()))?;
    s.check("exp", &a, |x| Ok(x.exp()))?;
    s.check("square", &a, |x| Ok(x.square()))?;
    let m = randn(&[2, 3, 4, 5], 3);
    let g = randn(&[2, 3, 1, 1], 4);
    s.check("broadcast_add/map", &m, |x| x.add(&g))?;
    s.check("broadcast_add/vector", &g, |x| m.add(x))?;
    s.check("broadcast_mul/map", &m, |x| x.mul(&g))?;
    s.check("broadcast_mul/vector", &g, |x| m.mul(x))?;
    Ok(())
}

fn structural(s: &mut Suite) -> Result<()> {
    let a = randn(&[2, 3, 4], 5);
    let m = randn(&[2, 4, 3, 3], 6);
    s.check("sum", &a, |x| Ok(x.sum().scale(0.7)))?;
    s.check("mean", &a, |x| Ok(x.mean().scale(0.7)))?;
    s.check("sum_axis", &a, |x| x.sum_axis(1))?;
    s.check("softmax", &a, |x| x.softmax(2))?;
    s.check("reshape", &a, |x| x.reshape(&[6, 4]))?;
    s.check("permute", &a, |x| x.permute(&[2, 0, 1]))?;
    let other = randn(&[2, 2, 4], 7);
    s.check("concat", &a, |x| Tensor::concat(&[&other, x], 1))?;
    s.check("narrow", &a, |x| x.narrow(2, 1, 2))?;
    s.check("split", &m, |x| {
        let parts = x.split(1, 2)?;
        parts[1].sub(&parts[0].scale(2.0))
    })?;
    s.check("instance_norm", &m, |x| x.instance_norm(NORM_EPS))?;
    let scale = randn(&[4], 8);
    let shift = randn(&[4], 9);
    s.check("channel_affine/input", &m, |x| x.channel_affine(&scale, &shift))?;
    s.check("channel_affine/scale", &scale, |p| m.channel_affine(p, &shift))?;
    s.check("channel_affine/shift", &shift, |p| m.channel_affine(&scale, p))?;
    s.check("global_avg_pool", &m, |x| x.global_avg_pool())?;
    s.check("to_tokens", &m, |x| x.to_tokens())?;
    let tokens = randn(&[2, 9, 4], 10);
    s.check("from_tokens", &tokens, |x| x.from_tokens(3, 3))?;
    Ok(())
}

fn linear_algebra(s: &mut Suite) -> Result<()> {
    let a = randn(&[3, 4], 11);
    let b = randn(&[4, 5], 12);
    s.check("matmul/lhs", &a, |x| x.matmul(&b))?;
    s.check("matmul/rhs", &b, |x| a.matmul(x))?;
    let a3 = randn(&[2, 3, 4], 13);
    let b3 = randn(&[2, 4, 2], 14);
    s.check("batched_matmul/lhs", &a3, |x| x.matmul(&b3))?;
    s.check("batched_matmul/rhs", &b3, |x| a3.matmul(x))?;
    let w = randn(&[5, 4], 15);
    let bias = randn(&[5], 16);
    s.check("linear/input", &a3, |x| x.linear(&w, Some(&bias)))?;
    s.check("linear/weight", &w, |p| a3.linear(p, Some(&bias)))?;
    s.check("linear/bias", &bias, |p| a3.linear(&w, Some(p)))?;

    let img = randn(&[2, 3, 6, 5], 17);
    let k3 = randn(&[4, 3, 3, 3], 18);
    let cb = randn(&[4], 19);
    s.check("conv2d/input", &img, |x| x.conv2d(&k3, Some(&cb), Conv2dOptions::SAME3))?;
    s.check("conv2d/weight", &k3, |p| img.conv2d(p, Some(&cb), Conv2dOptions::SAME3))?;
    s.check("conv2d/bias", &cb, |p| img.conv2d(&k3, Some(p), Conv2dOptions::SAME3))?;
    let strided = Conv2dOptions { stride: 2, padding: 1 };
    s.check("conv2d_stride2/input", &img, |x| x.conv2d(&k3, None, strided))?;
    s.check("conv2d_stride2/weight", &k3, |p| img.conv2d(p, None, strided))?;
    let k1 = randn(&[2, 3, 1, 1], 20);
    s.check("conv1x1/input", &img, |x| x.conv2d(&k1, None, Conv2dOptions::POINTWISE))?;
    s.check("bilinear_up", &img, |x| x.bilinear_resize(11, 8))?;
    s.check("bilinear_down", &img, |x| x.bilinear_resize(3, 2))?;
    Ok(())
}

fn losses(s: &mut Suite) -> Result<()> {
    let logits = randn(&[2, 1, 4, 4], 21);
    let gt_data = (0..32).map(|i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 }).collect();
    let gt = Tensor::new(&[2, 1, 4, 4], gt_data)?;
    s.check("bce_loss", &logits, |x| bce_loss(x, &gt))?;
    s.check("iou_loss", &logits, |x| iou_loss(x, &gt))?;
    Ok(())
}

fn modules(s: &mut Suite) -> Result<()> {
    // randomized output projections so every path carries gradient
    let pb = ParamBuilder::new(31);
    let block = ConvBlock::new(&pb.sub("block"), 3, 4, STYLE)?;
    let x = randn(&[1, 3, 4, 4], 22);
    s.check("conv_block", &x, |t| block.forward(t))?;

    let mhsa = Mhsa::new(&pb.sub("mhsa"), 8, 2, false)?;
    let q = randn(&[2, 5, 8], 23);
    let c = randn(&[2, 3, 8], 24);
    s.check("mhsa/query", &q, |t| mhsa.forward(t, &c))?;
    s.check("mhsa/context", &c, |t| mhsa.forward(&q, t))?;

    let dim = 8;
    let cma = CrossModalAttention::new(&pb.sub("cma"), 6, dim, 2)?;
    randomize(&cma_params(&cma), 41)?;
    let f_m = randn(&[1, dim, 4, 4], 25);
    let text = randn(&[1, 6], 26);
    s.check("cross_modal_attention/image", &f_m, |t| cma.forward(t, &text))?;
    s.check("cross_modal_attention/text", &text, |t| cma.forward(&f_m, t))?;

    let align = MvcmAlign::new(&pb.sub("align"), dim, 2)?;
    let f2 = randn(&[1, dim, 2, 2], 27);
    let f3 = randn(&[1, dim, 2, 2], 28);
    s.check("mvcm_align/f_c", &f_m, |t| align.forward(t, &f2, &f3))?;
    s.check("mvcm_align/f3", &f3, |t| align.forward(&f_m, &f2, t))?;

    let enhance = MvcmEnhance::new(&pb.sub("enhance"), dim, STYLE)?;
    s.check("mvcm_enhance", &f_m, |t| Ok(enhance.forward(t)?.3))?;

    let csg = Csg::new(&pb.sub("csg"), dim, 8, 2)?;
    randomize(&csg_params(&csg), 42)?;
    let x4 = randn(&[1, 8, 2, 2], 29);
    s.check("csg/x4", &x4, |t| csg.forward(t, &f_m, &f_m))?;
    s.check("csg/f_v", &f_m, |t| csg.forward(&x4, t, &f2))?;

    let gate = Gate::new(&pb.sub("gate"), 4)?;
    let gx = randn(&[2, 4, 3, 3], 30);
    s.check("gate", &gx, |t| gate.forward(t))?;

    let scm = Scm::new(&pb.sub("scm"), 8, 8, 8, STYLE)?;
    let xi = randn(&[1, 8, 4, 4], 31);
    let xn = randn(&[1, 8, 2, 2], 32);
    let gc = randn(&[1, 8, 2, 2], 33);
    s.check("scm/x_i", &xi, |t| Ok(scm.forward(t, &xn, &gc)?.f_s))?;
    s.check("scm/x_next", &xn, |t| Ok(scm.forward(&xi, t, &gc)?.f_s))?;
    s.check("scm/g_c", &gc, |t| Ok(scm.forward(&xi, &xn, t)?.f_s))?;

    let dec = Decoder::new(&pb.sub("decoder"), [4, 4, 4, 4], dim, 8)?;
    randomize(&dec.heads.iter().flat_map(|h| h.params()).collect::<Vec<_>>(), 43)?;
    let fs: Vec<Tensor> = [1usize, 2, 4].iter().map(|&k| randn(&[1, 4, k, k], 34 + k as u64)).collect();
    let x4d = randn(&[1, 4, 1, 1], 39);
    s.check("decoder/f_s1", &fs[2], |t| {
        let p = dec.forward(&[fs[0].clone(), fs[1].clone(), t.clone()], &x4d, &f_m, &f_m)?;
        Ok(p.p1)
    })?;
    s.check("decoder/x4", &x4d, |t| {
        let p = dec.forward(&fs, t, &f_m, &f_m)?;
        Tensor::concat(&[&p.p1, &p.p4], 1)
    })?;
    Ok(())
}

fn cma_params(m: &CrossModalAttention) -> Vec<Parameter> {
    let mut v = m.attn.out.params();
    v.extend(m.text_proj.params());
    v
}

fn csg_params(m: &Csg) -> Vec<Parameter> {
    let mut v = m.attn_v.out.params();
    v.extend(m.attn_m.out.params());
    v
}

/// Overwrites zero-initialized parameters with small random values.
fn randomize(params: &[Parameter], seed: u64) -> Result<()> {
    for (k, p) in params.iter().enumerate() {
        let t = Tensor::randn(&p.shape(), 0.3, &mut ChaCha8Rng::seed_from_u64(seed + k as u64));
        p.set_values(t.to_vec())?;
    }
    Ok(())
}

/// Finite-difference checks for every op and module, each at `OP_TOL`.
pub fn op_suite() -> Result<Vec<CheckRow>> {
    let mut s = Suite { rows: Vec::new() };
    elementwise(&mut s)?;
    structural(&mut s)?;
    linear_algebra(&mut s)?;
    losses(&mut s)?;
    modules(&mut s)?;
    Ok(s.rows)
}

/// The default configuration shrunk to 32x32 inputs.
pub fn end_to_end_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.prompt_size = END_TO_END_SIDE;
    cfg.encoder.detector_size = END_TO_END_SIDE;
    cfg
}

/// Total loss of the full model against sampled coordinates of every
/// trainable parameter. Zero-initialized parameters are randomized first so
/// that every branch carries gradient.
pub fn end_to_end(cfg: &RunConfig, seed: u64) -> Result<CheckRow> {
    let model = CgNet::new(cfg)?;
    let trainable = model.trainable_params();
    for (k, p) in trainable.iter().enumerate() {
        if p.to_vec().iter().all(|&v| v == 0.0) {
            let t = Tensor::randn(&p.shape(), 0.2, &mut ChaCha8Rng::seed_from_u64(seed ^ (k as u64 + 1)));
            p.set_values(t.to_vec())?;
        }
    }
    let side = END_TO_END_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::rand_uniform(&[2, 3, side, side], 0.0, 1.0, &mut rng);
    let sd = cfg.encoder.detector_size;
    let gt_data = (0..2 * sd * sd)
        .map(|i| {
            let (r, c) = ((i / sd) % sd, i % sd);
            if r.abs_diff(sd / 2) + c.abs_diff(sd / 3 + i / (sd * sd)) < sd / 4 { 1.0 } else { 0.0 }
        })
        .collect();
    let gt = Tensor::new(&[2, 1, sd, sd], gt_data)?;
    let (prompt, det) = model.prepare_inputs(&image)?;
    let labels = ["fish", "crab"];
    let loss = || Ok(total_loss(&model.forward(&prompt, &det, &labels)?.0, &gt)?.0);
    let mut coords = Vec::new();
    for p in &trainable {
        let n = p.numel().min(COORDS_PER_PARAM);
        for i in sample(&mut rng, p.numel(), n) {
            coords.push((p.clone(), i));
        }
    }
    let (row, kinks) = kink_aware_check(loss, &coords)?;
    let mut row = row;
    row.name = format!("end_to_end ({kinks} kink coords)");
    Ok(row)
}

/// Central differences at `FD_STEP`, except where the two one-sided
/// differences disagree: such a coordinate has a ReLU kink within one step,
/// and the analytic value is compared with the nearer one-sided difference.
/// Returns the row and the number of kink coordinates.
fn kink_aware_check<F>(loss: F, coords: &[(Parameter, usize)]) -> Result<(CheckRow, usize)>
where
    F: Fn() -> Result<Tensor>,
{
    for (p, _) in coords {
        p.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|(p, i)| p.grad().map(|g| g[*i]).ok_or_else(|| Error::Usage(format!("{} is frozen", p.name()))))
        .collect::<Result<_>>()?;
    let f0 = loss()?.item()?;
    let h = FD_STEP;
    let mut row = CheckRow {
        name: "end_to_end".into(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: String::new(),
        checked: 0,
        tol: END_TO_END_TOL,
        passed: true,
    };
    let mut kinks = 0;
    for ((p, i), a) in coords.iter().zip(analytic) {
        let orig = p.to_vec();
        let mut v = orig.clone();
        v[*i] = orig[*i] + h;
        p.set_values(v.clone())?;
        let up = loss()?.item()?;
        v[*i] = orig[*i] - h;
        p.set_values(v)?;
        let down = loss()?.item()?;
        p.set_values(orig)?;
        let central = (up - down) / (2.0 * h);
        let (fwd, bwd) = ((up - f0) / h, (f0 - down) / h);
        let mut err = rel_err(a, central);
        if err >= END_TO_END_TOL && rel_err(fwd, bwd) >= END_TO_END_TOL {
            kinks += 1;
            err = rel_err(a, fwd).min(rel_err(a, bwd));
        }
        if err > row.max_rel_err {
            row.max_rel_err = err;
            row.worst = format!("{}[{i}]", p.name());
        }
        row.max_abs_err = row.max_abs_err.max((a - central).abs());
        row.checked += 1;
    }
    row.passed = row.max_rel_err < END_TO_END_TOL;
    Ok((row, kinks))
}
