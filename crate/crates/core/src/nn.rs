//! Parameter storage and the small set of layers the model is built from.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Name suffixes of the output projections that close a residual branch.
/// Zeroing them turns every residual block into the identity.
pub const RESIDUAL_OUTPUT_SUFFIXES: [&str; 4] = [
    ".attn.proj.weight",
    ".attn.proj.bias",
    ".mlp.fc2.weight",
    ".mlp.fc2.bias",
];

/// Seed derived from a base seed and a text label; stable across platforms
/// and releases.
pub fn stable_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
    Values(Vec<f64>),
}

impl Init {
    fn materialize(&self, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=*bound)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
            Init::Values(v) => v.clone(),
        };
        Tensor::new(shape, data)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters in registration order. Each parameter's initial value
/// depends only on the store seed and its name, so adding or removing other
/// parameters never changes it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<String> {
        if self.params.contains_key(name) {
            return Err(Error::config(format!("parameter {name} registered twice")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(self.seed, name));
        let value = init.materialize(shape, &mut rng)?;
        self.params.insert(name.to_string(), Param { value, trainable });
        Ok(name.to_string())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: shape {:?} cannot take {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Sets every residual-branch output projection to zero.
    pub fn zero_residual_outputs(&mut self) {
        for (name, p) in self.params.iter_mut() {
            if RESIDUAL_OUTPUT_SUFFIXES.iter().any(|s| name.ends_with(s)) {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }
}

/// Forward-pass context binding parameters to tape leaves. Each parameter is
/// bound at most once per tape so its gradient accumulates in one place.
pub struct Ctx<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<HashMap<String, Var<'t>>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        let var = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients of every trainable parameter touched by this pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        let bound = self.bound.borrow();
        let mut out: Vec<(String, Tensor)> = bound
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Affine map over the last axis: `x · W + b`, `W` stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(store, prefix, in_dim, out_dim, Init::Uniform(bound), Some(Init::Uniform(bound)))
    }

    pub fn with_init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = store.register(&format!("{prefix}.weight"), &[in_dim, out_dim], weight_init, true)?;
        let bias = bias_init
            .map(|init| store.register(&format!("{prefix}.bias"), &[out_dim], init, true))
            .transpose()?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let w = cx.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| cx.param(n)).transpose()?;
        x.linear(&w, b.as_ref())
    }
}

/// Layer normalisation over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(&format!("{prefix}.gamma"), &[dim], Init::Ones, true)?,
            beta: store.register(&format!("{prefix}.beta"), &[dim], Init::Zeros, true)?,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(Self::EPS)?
            .mul(&cx.param(&self.gamma)?)?
            .add(&cx.param(&self.beta)?)
    }
}

/// Two-layer feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, dim * expansion)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), dim * expansion, dim)?,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(cx, self.fc1.forward(cx, x)?.gelu())
    }
}

/// Multi-head self-attention over `[batch, tokens, dim]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{prefix}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `bias` is added to every batch element's `[heads, T, T]` scores.
    /// `mask` is `[groups, T, T]` and is added to batch element `b` using
    /// group `b % groups`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        bias: Option<Var<'t>>,
        mask: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape(format!(
                "attention expects [batch, tokens, {}], got {shape:?}",
                self.dim
            )));
        }
        let (b, t, h) = (shape[0], shape[1], self.heads);
        let dh = self.dim / h;
        let qkv = self
            .qkv
            .forward(cx, x)?
            .reshape(&[b, t, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Var<'t>> { qkv.narrow(0, i, 1)?.reshape(&[b * h, t, dh]) };
        let q = part(0)?.scale(1.0 / (dh as f64).sqrt());
        let k = part(1)?;
        let v = part(2)?;
        let mut scores = q.batch_matmul(&k.transpose_last()?)?;
        if let Some(bias) = bias {
            scores = scores.reshape(&[b, h, t, t])?.add(&bias)?;
        }
        if let Some(mask) = mask {
            let groups = mask.dim(0);
            if b % groups != 0 {
                return Err(Error::shape(format!(
                    "attention mask with {groups} groups for batch {b}"
                )));
            }
            let mask = mask.reshape(&[groups, 1, t, t])?;
            scores = scores.reshape(&[b / groups, groups, h, t, t])?.add(&mask)?;
        }
        let attn = scores.reshape(&[b * h, t, t])?.softmax_last()?;
        let out = attn
            .batch_matmul(&v)?
            .reshape(&[b, h, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?;
        self.proj.forward(cx, out)
    }
}
