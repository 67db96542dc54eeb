//! Named trainable (or frozen) parameters and their construction.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{GradCheckReport, Tensor};

struct ParamInner {
    name: String,
    frozen: bool,
    value: RwLock<Tensor>,
}

/// A named model weight. Cloning shares the underlying storage.
///
/// A trainable parameter's value is a leaf that accumulates gradients; a
/// frozen parameter's value is a constant leaf and never receives one.
#[derive(Clone)]
pub struct Parameter {
    inner: Arc<ParamInner>,
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.inner.name)
            .field("shape", &self.shape())
            .field("frozen", &self.inner.frozen)
            .finish()
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, frozen: bool) -> Self {
        let leaf = if frozen {
            value.detach()
        } else {
            value.requires_grad()
        };
        Parameter {
            inner: Arc::new(ParamInner {
                name: name.into(),
                frozen,
                value: RwLock::new(leaf),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.frozen
    }

    /// The current value, for use in a forward pass.
    pub fn tensor(&self) -> Tensor {
        self.inner.value.read().expect("parameter lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor().numel()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tensor().to_vec()
    }

    /// Gradient accumulated since the value was last set; `None` when frozen.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor().grad()
    }

    /// Replaces the value (same shape). Starts a fresh gradient buffer.
    pub fn set_values(&self, values: Vec<f64>) -> Result<()> {
        let shape = self.shape();
        let t = Tensor::new(&shape, values)?;
        let leaf = if self.inner.frozen {
            t
        } else {
            t.requires_grad()
        };
        *self.inner.value.write().expect("parameter lock poisoned") = leaf;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.tensor().zero_grad();
    }

    pub fn ptr_eq(&self, other: &Parameter) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

impl Init {
    /// He initialization for layers followed by a ReLU.
    pub fn kaiming(fan_in: usize) -> Self {
        Init::Scaled {
            fan_in,
            gain: std::f64::consts::SQRT_2,
        }
    }

    /// Unit-gain scaled initialization for linear (non-rectified) maps.
    pub fn lecun(fan_in: usize) -> Self {
        Init::Scaled { fan_in, gain: 1.0 }
    }

    fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Scaled { fan_in, gain } => Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng),
            Init::Normal { std } => Tensor::randn(shape, std, rng),
        }
    }
}

/// 64-bit FNV-1a, used to derive stable per-name seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Default)]
struct Registry {
    params: Vec<Parameter>,
    names: HashSet<String>,
}

/// Creates parameters under a dotted name prefix and records them in a
/// shared registry. Values are drawn from a generator seeded by
/// `(seed, full name)`, so initialization does not depend on creation order.
#[derive(Clone)]
pub struct ParamBuilder {
    registry: Rc<RefCell<Registry>>,
    prefix: String,
    seed: u64,
    frozen: bool,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            registry: Rc::default(),
            prefix: String::new(),
            seed,
            frozen: false,
        }
    }

    /// A builder for the child scope `name`.
    pub fn sub(&self, name: &str) -> Self {
        ParamBuilder {
            registry: self.registry.clone(),
            prefix: self.path(name),
            seed: self.seed,
            frozen: self.frozen,
        }
    }

    /// A builder whose parameters are frozen and drawn from `seed`.
    pub fn frozen_with_seed(&self, seed: u64) -> Self {
        ParamBuilder {
            registry: self.registry.clone(),
            prefix: self.prefix.clone(),
            seed,
            frozen: true,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Parameter> {
        let full = self.path(name);
        let mut reg = self.registry.borrow_mut();
        if !reg.names.insert(full.clone()) {
            return Err(Error::Config(format!("duplicate parameter name `{full}`")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(full.as_bytes()));
        let p = Parameter::new(full, init.sample(shape, &mut rng), self.frozen);
        reg.params.push(p.clone());
        Ok(p)
    }

    /// All parameters created through this builder tree, in creation order.
    pub fn params(&self) -> Vec<Parameter> {
        self.registry.borrow().params.clone()
    }
}

/// Copies the values of `src` into `dst`.
pub fn copy_values(dst: &Parameter, src: &Parameter) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(shape_err!(
            "copy {} -> {}: {:?} vs {:?}",
            src.name(),
            dst.name(),
            src.shape(),
            dst.shape()
        ));
    }
    dst.set_values(src.to_vec())
}

/// Central-difference check of `d loss / d param` at the listed
/// `(parameter, flat index)` coordinates. `loss` rebuilds the graph from the
/// parameters' current values on every call.
pub fn grad_check_params<F>(
    loss: F,
    coords: &[(Parameter, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for (p, _) in coords {
        p.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<f64> = coords
        .iter()
        .map(|(p, i)| {
            p.grad()
                .map(|g| g[*i])
                .ok_or_else(|| Error::Usage(format!("{} is frozen", p.name())))
        })
        .collect::<Result<_>>()?;
    let mut report = GradCheckReport::new(tol);
    for (k, ((p, i), a)) in coords.iter().zip(analytic).enumerate() {
        let orig = p.to_vec();
        let mut v = orig.clone();
        v[*i] = orig[*i] + h;
        p.set_values(v.clone())?;
        let up = loss()?.item()?;
        v[*i] = orig[*i] - h;
        p.set_values(v)?;
        let down = loss()?.item()?;
        p.set_values(orig)?;
        report.record(k, a, (up - down) / (2.0 * h));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_scoped() {
        let pb = ParamBuilder::new(1);
        let a = pb.sub("enc").sub("conv1").param("weight", &[2, 2], Init::Ones).unwrap();
        assert_eq!(a.name(), "enc.conv1.weight");
        assert!(pb.sub("enc.conv1").param("weight", &[1], Init::Zeros).is_err());
        assert_eq!(pb.params().len(), 1);
    }

    #[test]
    fn init_is_independent_of_creation_order() {
        let a = ParamBuilder::new(9);
        let x1 = a.param("x", &[4], Init::Normal { std: 1.0 }).unwrap();
        let b = ParamBuilder::new(9);
        b.param("y", &[4], Init::Normal { std: 1.0 }).unwrap();
        let x2 = b.param("x", &[4], Init::Normal { std: 1.0 }).unwrap();
        assert_eq!(x1.to_vec(), x2.to_vec());
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let pb = ParamBuilder::new(3);
        let w = pb.param("w", &[3], Init::Ones).unwrap();
        let f = pb.frozen_with_seed(4).param("f", &[3], Init::Ones).unwrap();
        let loss = w.tensor().mul(&f.tensor()).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 3]);
        assert!(f.grad().is_none());
        assert!(f.is_frozen());
    }

    #[test]
    fn set_values_resets_gradient() {
        let p = Parameter::new("p", Tensor::ones(&[2]), false);
        p.tensor().sum().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0]);
        p.set_values(vec![3.0, 4.0]).unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0, 0.0]);
        assert!(p.set_values(vec![1.0]).is_err());
    }
}
