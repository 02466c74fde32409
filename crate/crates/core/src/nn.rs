//! Parameter storage, a forward context binding parameters onto a tape, and
//! the small layers every block is assembled from.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{
    batch_norm, conv2d, grad_check_report, layer_norm_channels, linear_channels, mul, sum,
    BatchNormMode, GradCheckReport, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Trained by the optimizer and counted by `count_params`.
    Learnable,
    /// Persistent state that is not trained (running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub kind: ParamKind,
    /// Frozen learnables receive no gradient and are never updated.
    pub frozen: bool,
}

/// Flat, ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            kind,
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Number of learnable scalars (frozen ones included).
    pub fn num_learnable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Learnable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds uniform noise in `[-scale, scale)` to every learnable tensor.
    /// Moves a freshly initialized model away from its zero-initialized
    /// projections so gradient checks exercise every path.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            if p.kind == ParamKind::Learnable {
                for v in Arc::make_mut(&mut p.value).data_mut() {
                    *v += rng.random_range(-scale..scale);
                }
            }
        }
    }
}

/// Registers named, randomly initialized parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, value, ParamKind::Learnable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, value, ParamKind::Buffer)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape, value))
    }
}

/// One forward pass: a tape plus the parameters bound onto it so far.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    grad: bool,
    train: bool,
    bn_stats: Vec<BnUpdate>,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl<'s> Ctx<'s> {
    /// `grad` records backward rules for learnable parameters; `train` selects
    /// batch statistics in batch norm.
    pub fn new(store: &'s ParamStore, grad: bool, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            grad,
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Continues an existing tape with learnable parameters pre-bound to
    /// caller-owned vars (`bound[i]` for store entry `i`).
    pub fn from_tape(tape: Tape, store: &'s ParamStore, bound: Vec<Option<Var>>, train: bool) -> Self {
        assert_eq!(bound.len(), store.len());
        Self {
            tape,
            store,
            bound,
            grad: false,
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let rg = self.grad && p.kind == ParamKind::Learnable && !p.frozen;
        let v = self.tape.leaf_shared(p.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradient of every store entry after `tape.backward`, `None` for
    /// buffers, frozen or unused parameters.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Per-site linear map over channels.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, bias: bool) -> Self {
        let mut s = init.sub(name);
        let weight = s.uniform("weight", &[c_out, c_in], 1.0 / (c_in as f64).sqrt());
        let bias = bias.then(|| s.zeros("bias", &[c_out]));
        Self { weight, bias }
    }

    /// Linear map with every weight and bias equal to zero.
    pub fn zeros(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, bias: bool) -> Self {
        let mut s = init.sub(name);
        let weight = s.zeros("weight", &[c_out, c_in]);
        let bias = bias.then(|| s.zeros("bias", &[c_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        linear_channels(&mut ctx.tape, x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let mut s = init.sub(name);
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = s.uniform("weight", &[c_out, c_in, kernel, kernel], (6.0 / fan_in).sqrt());
        let bias = bias.then(|| s.zeros("bias", &[c_out]));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        conv2d(&mut ctx.tape, x, w, b, self.stride, self.pad)
    }
}

/// Layer normalization over channels at each site.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gamma: s.full("gamma", &[c], 1.0),
            beta: s.zeros("beta", &[c]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        layer_norm_channels(&mut ctx.tape, x, g, b)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init<'_>, name: &str, c: usize) -> Self {
        let mut s = init.sub(name);
        Self {
            gamma: s.full("gamma", &[c], 1.0),
            beta: s.zeros("beta", &[c]),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[c])),
            running_var: s.buffer("running_var", Tensor::ones(&[c])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = batch_norm(&mut ctx.tape, x, g, b, BatchNormMode::Train)?;
            if let Some((mean, var)) = stats {
                ctx.bn_stats.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean,
                    var,
                });
            }
            Ok(y)
        } else {
            let store = ctx.store;
            let mode = BatchNormMode::Eval {
                mean: store.get(self.running_mean).data(),
                var: store.get(self.running_var).data(),
            };
            Ok(batch_norm(&mut ctx.tape, x, g, b, mode)?.0)
        }
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (r, m) in store.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Convenience: run `f` on a gradient-free evaluation tape and return the
/// value of its result.
pub fn eval_with<F>(store: &ParamStore, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Ctx<'_>) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, false, false);
    let out = f(&mut ctx)?;
    Ok(ctx.tape.value(out).clone())
}

/// `Σ y ⊙ R` with `R` uniform in `[-1, 1)` drawn from `seed`; a scalar probe
/// of every output coordinate for gradient checks.
pub fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(tape.value(y).shape(), -1.0, 1.0, &mut rng);
    let r = tape.constant(r);
    let p = mul(tape, y, r)?;
    Ok(sum(tape, p))
}

/// Gradient check of `f` with respect to its inputs and every learnable,
/// unfrozen parameter of `store`. `f` returns a scalar.
pub fn param_grad_check<F>(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
    max_coords: usize,
    train: bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Learnable && !p.frozen)
        .map(|(id, _)| id)
        .collect();
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(ids.iter().map(|&id| store.get(id).clone()));
    let n_in = inputs.len();
    grad_check_report(name, &all, eps, max_coords, |tape, vars| {
        let mut bound = vec![None; store.len()];
        for (k, &id) in ids.iter().enumerate() {
            bound[id.0] = Some(vars[n_in + k]);
        }
        let mut ctx = Ctx::from_tape(std::mem::take(tape), store, bound, train);
        let out = f(&mut ctx, &vars[..n_in]);
        *tape = std::mem::take(&mut ctx.tape);
        out
    })
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
