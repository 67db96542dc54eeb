//! Straight-line re-implementations of the module equations and losses on
//! plain `Vec<f64>` planes, used to cross-check the tensor implementation.

use cgnet::cgd::{Gate, Scm};
use cgnet::config::Activation;
use cgnet::cpg::MvcmEnhance;
use cgnet::losses::{bce_loss, iou_loss, total_loss_maps};
use cgnet::nn::{BlockStyle, ConvBlock, Linear, NORM_EPS};
use cgnet::{ParamBuilder, Parameter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STYLE: BlockStyle = BlockStyle {
    norm: true,
    activation: Activation::Relu,
};

/// A single-image feature map, `c` planes of `h * w` values.
#[derive(Clone, Debug)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn of(t: &Tensor) -> Map {
        let s = t.shape();
        assert_eq!(s[0], 1);
        Map {
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data().to_vec(),
        }
    }

    fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.v[(c * self.h + r) * self.w + col]
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.v[c * n..(c + 1) * n]
    }

    fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        Map {
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        }
    }

    fn cat(parts: &[&Map]) -> Map {
        Map {
            c: parts.iter().map(|m| m.c).sum(),
            h: parts[0].h,
            w: parts[0].w,
            v: parts.iter().flat_map(|m| m.v.iter().copied()).collect(),
        }
    }

    fn channels(&self, from: usize, n: usize) -> Map {
        let p = self.h * self.w;
        Map {
            c: n,
            v: self.v[from * p..(from + n) * p].to_vec(),
            ..*self
        }
    }
}

fn conv3(x: &Map, weight: &[f64], bias: &[f64], c_out: usize) -> Map {
    let (h, w) = (x.h, x.w);
    let mut v = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        for r in 0..h {
            for col in 0..w {
                let mut acc = bias[o];
                for i in 0..x.c {
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let (rr, cc) = (r as isize + kr as isize - 1, col as isize + kc as isize - 1);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                continue;
                            }
                            acc += weight[((o * x.c + i) * 3 + kr) * 3 + kc] * x.at(i, rr as usize, cc as usize);
                        }
                    }
                }
                v[(o * h + r) * w + col] = acc;
            }
        }
    }
    Map { c: c_out, h, w, v }
}

fn block(b: &ConvBlock, x: &Map) -> Map {
    let c_out = b.conv.weight.shape()[0];
    let bias = b.conv.bias.as_ref().map(Parameter::to_vec).unwrap_or(vec![0.0; c_out]);
    let mut y = conv3(x, &b.conv.weight.to_vec(), &bias, c_out);
    if let (Some(scale), Some(shift)) = (&b.scale, &b.shift) {
        let (scale, shift) = (scale.to_vec(), shift.to_vec());
        let n = (y.h * y.w) as f64;
        for c in 0..c_out {
            let mean = y.plane(c).iter().sum::<f64>() / n;
            let var = y.plane(c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + NORM_EPS).sqrt();
            let p = y.h * y.w;
            for v in &mut y.v[c * p..(c + 1) * p] {
                *v = (*v - mean) / sd * scale[c] + shift[c];
            }
        }
    }
    if b.style.activation == Activation::Relu {
        y.v.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    y
}

/// Applies `lin` to every pixel's channel vector.
fn pixel_linear(lin: &Linear, x: &Map) -> Map {
    let (wt, b) = (lin.weight.to_vec(), lin.bias.to_vec());
    let d_out = b.len();
    let p = x.h * x.w;
    let mut v = vec![0.0; d_out * p];
    for o in 0..d_out {
        for px in 0..p {
            let mut acc = b[o];
            for i in 0..x.c {
                acc += wt[o * x.c + i] * x.v[i * p + px];
            }
            v[o * p + px] = acc;
        }
    }
    Map { c: d_out, v, ..*x }
}

fn vec_linear(lin: &Linear, x: &[f64]) -> Vec<f64> {
    let (wt, b) = (lin.weight.to_vec(), lin.bias.to_vec());
    (0..b.len())
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| wt[o * x.len() + i] * xi).sum::<f64>())
        .collect()
}

fn gate(g: &Gate, x: &Map) -> Vec<f64> {
    let p = (x.h * x.w) as f64;
    let pooled: Vec<f64> = (0..x.c).map(|c| x.plane(c).iter().sum::<f64>() / p).collect();
    vec_linear(&g.fc2, &vec_linear(&g.fc1, &pooled))
        .into_iter()
        .map(|z| 1.0 / (1.0 + (-z).exp()))
        .collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Replaces every parameter with N(0, 0.5) noise (scales around 1) so that
/// zero-initialized pieces are exercised too.
fn randomize(pb: &ParamBuilder, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in pb.params() {
        let noise = Tensor::randn(&p.shape(), 0.5, &mut rng);
        let base = if p.name().ends_with("scale") { 1.0 } else { 0.0 };
        p.set_values(noise.data().iter().map(|v| v + base).collect()).unwrap();
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Max deviation of the progressive refinement on a `1x4x4x4` input.
pub fn mvcm_enhance_error() -> f64 {
    let pb = ParamBuilder::new(11);
    let m = MvcmEnhance::new(&pb.sub("enh"), 4, STYLE).unwrap();
    randomize(&pb, 12);
    let f_n = input(&[1, 4, 4, 4], 13);
    let (t1, t2, t3, tv) = m.forward(&f_n).unwrap();

    let fnm = Map::of(&f_n);
    let step = |k: usize, x: &Map| {
        let (inner, outer) = &m.steps[k];
        let a = block(inner, x);
        block(outer, &a.zip(x, |p, q| p + q))
    };
    let f1 = step(0, &fnm);
    let f2 = step(1, &fnm.zip(&f1, |p, q| p * q));
    let f3 = step(2, &fnm.zip(&f2, |p, q| p * q));
    let fv = block(&m.fuse, &Map::cat(&[&f1, &f2, &f3]));
    [
        max_diff(t1.data(), &f1.v),
        max_diff(t2.data(), &f2.v),
        max_diff(t3.data(), &f3.v),
        max_diff(tv.data(), &fv.v),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub struct SpatialCheck {
    pub max_err: f64,
    /// Largest `|sum - 1|` over the spatial softmax planes.
    pub row_sum_err: f64,
}

/// Localization stage on aligned `1x4x2x2` inputs.
pub fn scm_spatial_check() -> SpatialCheck {
    let pb = ParamBuilder::new(21);
    let scm = Scm::new(&pb.sub("scm"), 4, 4, 4, STYLE).unwrap();
    randomize(&pb, 22);
    let (xi, xn, g) = (input(&[1, 4, 2, 2], 23), input(&[1, 4, 2, 2], 24), input(&[1, 4, 2, 2], 25));
    let (r, a, b, gp, ti, tn) = scm.spatial(&xi, &xn, &g).unwrap();

    let (mi, mn, mg) = (Map::of(&xi), Map::of(&xn), Map::of(&g));
    let logits = block(&scm.locate, &mi.zip(&mn, |p, q| p + q)).zip(&mg, |p, q| p * q);
    let mut rc = logits.clone();
    let p = rc.h * rc.w;
    for c in 0..rc.c {
        let plane = &mut rc.v[c * p..(c + 1) * p];
        let mx = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = plane.iter().map(|v| (v - mx).exp()).sum();
        plane.iter_mut().for_each(|v| *v = (*v - mx).exp() / z);
    }
    let hat_i = rc.zip(&mi, |p, q| p * q);
    let hat_n = rc.zip(&mn, |p, q| p * q);
    let gprime = pixel_linear(&scm.fc, &Map::cat(&[&hat_n, &hat_i]));
    let til_i = gprime.zip(&hat_i, |p, q| p + q);
    let til_n = gprime.zip(&hat_n, |p, q| p + q);

    let max_err = [
        max_diff(r.data(), &rc.v),
        max_diff(a.data(), &hat_i.v),
        max_diff(b.data(), &hat_n.v),
        max_diff(gp.data(), &gprime.v),
        max_diff(ti.data(), &til_i.v),
        max_diff(tn.data(), &til_n.v),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let row_sum_err = r
        .data()
        .chunks(p)
        .map(|plane| (plane.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    SpatialCheck { max_err, row_sum_err }
}

/// Channel refinement on `1x8x2x2` inputs.
pub fn scm_channel_error() -> f64 {
    let pb = ParamBuilder::new(31);
    let scm = Scm::new(&pb.sub("scm"), 8, 8, 8, STYLE).unwrap();
    randomize(&pb, 32);
    let (ti, tn) = (input(&[1, 8, 2, 2], 33), input(&[1, 8, 2, 2], 34));
    let (cot, groups, weights, gated, fs) = scm.channel(&ti, &tn).unwrap();

    let x_cot = block(&scm.cot, &Map::cat(&[&Map::of(&ti), &Map::of(&tn)]));
    let mut errs = vec![max_diff(cot.data(), &x_cot.v)];
    let cg = x_cot.c / 4;
    let mut outs = Vec::new();
    for j in 0..4 {
        let grp = x_cot.channels(j * cg, cg);
        let wts = gate(&scm.gates[j], &grp);
        let p = grp.h * grp.w;
        let mut scaled = grp.clone();
        for c in 0..cg {
            scaled.v[c * p..(c + 1) * p].iter_mut().for_each(|v| *v *= wts[c]);
        }
        let out = block(&scm.group_convs[j], &scaled);
        errs.push(max_diff(groups[j].data(), &grp.v));
        errs.push(max_diff(weights[j].data(), &wts));
        errs.push(max_diff(gated[j].data(), &out.v));
        outs.push(out);
    }
    let refs: Vec<&Map> = outs.iter().collect();
    let f_s = block(&scm.fuse, &Map::cat(&refs));
    errs.push(max_diff(fs.data(), &f_s.v));
    errs.into_iter().fold(0.0, f64::max)
}

fn direct_bce(x: &[f64], g: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&x, &g)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / x.len() as f64
}

fn direct_iou(x: &[f64], g: &[f64], batch: usize) -> f64 {
    let n = x.len() / batch;
    (0..batch)
        .map(|b| {
            let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for i in b * n..(b + 1) * n {
                let p = 1.0 / (1.0 + (-x[i]).exp());
                inter += p * g[i];
                sp += p;
                sg += g[i];
            }
            1.0 - (inter + 1.0) / (sp + sg - inter + 1.0)
        })
        .sum::<f64>()
        / batch as f64
}

fn random_mask(shape: &[usize], seed: u64) -> Tensor {
    let t = input(shape, seed);
    Tensor::new(shape, t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Largest deviation of bce, iou and the six-map total from direct formulas.
pub fn loss_oracle_error() -> f64 {
    let mut worst: f64 = 0.0;
    for (k, shape) in [[1, 1, 4, 4], [2, 1, 5, 3]].iter().enumerate() {
        let seed = 40 + 10 * k as u64;
        let x = Tensor::randn(shape, 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let g = random_mask(shape, seed + 1);
        let b = shape[0];
        worst = worst
            .max((bce_loss(&x, &g).unwrap().item().unwrap() - direct_bce(x.data(), g.data())).abs())
            .max((iou_loss(&x, &g).unwrap().item().unwrap() - direct_iou(x.data(), g.data(), b)).abs());
        let maps: Vec<Tensor> = (0..6)
            .map(|m| Tensor::randn(shape, 2.0, &mut ChaCha8Rng::seed_from_u64(seed + 2 + m)))
            .collect();
        let named: Vec<(&str, &Tensor)> = ["p1", "p2", "p3", "p4", "fv", "fm"].into_iter().zip(&maps).collect();
        let (_, br) = total_loss_maps(&named, &g).unwrap();
        let direct: f64 = maps
            .iter()
            .map(|m| direct_bce(m.data(), g.data()) + direct_iou(m.data(), g.data(), b))
            .sum();
        worst = worst.max((br.total - direct).abs());
    }
    worst
}

/// Plain gradient descent on six free 8x8 logit maps against a fixed mask;
/// returns the number of steps taken and the final total loss. Stops at
/// `target` or `max_steps`.
pub const DESCENT_LR: f64 = 200.0;

pub fn logit_descent(target: f64, max_steps: usize) -> (usize, f64) {
    let gt = Tensor::new(
        &[1, 1, 8, 8],
        (0..64).map(|i| if (2..6).contains(&(i / 8)) && (1..7).contains(&(i % 8)) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let params: Vec<Parameter> = (0..6)
        .map(|m| Parameter::new(format!("map{m}"), Tensor::zeros(&[1, 1, 8, 8]), false))
        .collect();
    let loss = || {
        let ts: Vec<Tensor> = params.iter().map(Parameter::tensor).collect();
        let named: Vec<(&str, &Tensor)> = ["p1", "p2", "p3", "p4", "fv", "fm"].into_iter().zip(&ts).collect();
        total_loss_maps(&named, &gt).unwrap().0
    };
    for step in 0..max_steps {
        params.iter().for_each(Parameter::zero_grad);
        let l = loss();
        let v = l.item().unwrap();
        if v < target {
            return (step, v);
        }
        l.backward().unwrap();
        for p in &params {
            let g = p.grad().unwrap();
            p.set_values(p.to_vec().iter().zip(&g).map(|(w, g)| w - DESCENT_LR * g).collect()).unwrap();
        }
    }
    (max_steps, loss().item().unwrap())
}
