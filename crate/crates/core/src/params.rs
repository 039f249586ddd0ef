//! Named trainable parameters and the per-forward [`Session`] that binds
//! them onto a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Optimizer group. Branch parameters (visual and linguistic) and the
/// fusion module plus prediction head are scheduled separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Branch,
    Fusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Frozen parameters are bound as constants and never updated.
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars, optionally restricted to names with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    /// Replaces every value with the tensor of the same name from `other`.
    pub fn load_values(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for p in &self.params {
            let Some((_, t)) = named.iter().find(|(n, _)| *n == p.name) else {
                return Err(Error::Format(format!("missing parameter `{}`", p.name)));
            };
            if t.shape() != p.value.shape() {
                return Err(Error::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for p in &mut self.params {
            let (_, t) = named.iter().find(|(n, _)| *n == p.name).expect("checked above");
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Xavier/Glorot uniform: `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// He/Kaiming uniform for layers followed by a ReLU: `a = √(6 / fan_in)`.
pub fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let a = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Clone, Copy, Debug)]
pub struct SessionOptions {
    /// Apply dropout.
    pub train: bool,
    /// Record parameters as differentiable leaves.
    pub grads: bool,
    /// Seed for the dropout stream.
    pub seed: u64,
}

impl SessionOptions {
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            grads: true,
            seed,
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            grads: false,
            seed: 0,
        }
    }
}

/// One forward evaluation: a tape, the parameters bound onto it, and the
/// dropout RNG.
pub struct Session<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    grads: bool,
    pub rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, opts: SessionOptions) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            train: opts.train,
            grads: opts.grads,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
        }
    }

    /// Uses `vars` (one per parameter, in store order) instead of binding
    /// fresh leaves.
    pub fn with_bound(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore<T>,
        vars: &[Var],
        opts: SessionOptions,
    ) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} vars supplied for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        let mut s = Self::new(tape, store, opts);
        s.bound = vars.iter().copied().map(Some).collect();
        Ok(s)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), self.grads && !p.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient for each parameter in store order; `None` where the
    /// parameter was not used in this session.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}
