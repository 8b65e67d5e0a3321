//! Named parameter storage and the per-forward graph context.

use hdnet_autodiff::init::fan_in_uniform;
use hdnet_autodiff::{BatchNormMode, BatchStats, Conv2dSpec, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Running-average factor: `running ← m·running + (1 − m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Trainable tensors in registration order, plus batch-norm buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    bn: Vec<BnState>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            let state = &mut self.bn[*i];
            let n = s.count as f64;
            let correction = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
            for c in 0..state.mean.len() {
                state.mean[c] = BN_MOMENTUM * state.mean[c] + (1.0 - BN_MOMENTUM) * s.mean[c];
                state.var[c] = BN_MOMENTUM * state.var[c] + (1.0 - BN_MOMENTUM) * s.var[c] * correction;
            }
        }
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names || self.bn.len() != other.bn.len() {
            return Err(CoreError::Checkpoint("parameter names differ from the configured model".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        for (a, b) in self.bn.iter().zip(&other.bn) {
            if a.name != b.name || a.mean.len() != b.mean.len() || a.var.len() != b.var.len() {
                return Err(CoreError::Checkpoint(format!("batch-norm buffer `{}` mismatch", b.name)));
            }
        }
        self.tensors = other.tensors.clone();
        self.bn = other.bn.clone();
        Ok(())
    }

    pub(crate) fn from_parts(names: Vec<String>, tensors: Vec<Tensor>, bn: Vec<BnState>) -> Self {
        Self { names, tensors, bn }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvRef {
    pub w: usize,
    pub b: Option<usize>,
    pub spec: Conv2dSpec,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BnRef {
    pub gamma: usize,
    pub beta: usize,
    pub state: usize,
}

/// Conv followed by batch norm and ReLU.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvBn {
    pub conv: ConvRef,
    pub bn: BnRef,
}

/// `x·W (+ b)` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearRef {
    pub w: usize,
    pub b: Option<usize>,
}

pub(crate) struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl<'r> Builder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            store: ParamStore::default(),
            rng,
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.store.names.push(name);
        self.store.tensors.push(t);
        self.store.tensors.len() - 1
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec, bias: bool, gain: f64) -> ConvRef {
        let w = fan_in_uniform(&[cout, cin, k, k], cin * k * k, gain, self.rng);
        let w = self.push(format!("{name}.weight"), w);
        let b = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvRef { w, b, spec }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.store.bn.push(BnState {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        BnRef {
            gamma,
            beta,
            state: self.store.bn.len() - 1,
        }
    }

    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), cin, cout, k, spec, false, RELU_GAIN),
            bn: self.bn(&format!("{name}.bn"), cout),
        }
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize, bias: bool, gain: f64) -> LinearRef {
        let w = fan_in_uniform(&[cin, cout], cin, gain, self.rng);
        let w = self.push(format!("{name}.weight"), w);
        let b = bias.then(|| self.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        LinearRef { w, b }
    }

    pub fn relu_linear(&mut self, name: &str, cin: usize, cout: usize) -> LinearRef {
        self.linear(name, cin, cout, false, RELU_GAIN)
    }
}

/// One forward pass: the tape plus the parameters bound onto it.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    vars: Vec<Var>,
    store: &'a ParamStore,
    training: bool,
    eps: f64,
    bn_stats: Vec<(usize, BatchStats)>,
}

impl<'a> Graph<'a> {
    /// Binds every parameter as a leaf; `grads` decides whether they get gradients.
    pub fn bind(tape: &'a mut Tape, store: &'a ParamStore, training: bool, grads: bool, eps: f64) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(grads)))
            .collect();
        Self {
            tape,
            vars,
            store,
            training,
            eps,
            bn_stats: Vec::new(),
        }
    }

    /// Uses `vars` (one per parameter, already on `tape`) instead of fresh leaves.
    pub fn with_vars(tape: &'a mut Tape, store: &'a ParamStore, vars: Vec<Var>, training: bool, eps: f64) -> Result<Self> {
        if vars.len() != store.tensors.len() {
            return Err(CoreError::invalid(
                "graph binding",
                format!("{} vars for {} parameters", vars.len(), store.tensors.len()),
            ));
        }
        for (i, (&v, t)) in vars.iter().zip(&store.tensors).enumerate() {
            if tape.shape(v) != t.shape() {
                return Err(CoreError::invalid("graph binding", format!("shape mismatch at parameter {i}")));
            }
        }
        Ok(Self {
            tape,
            vars,
            store,
            training,
            eps,
            bn_stats: Vec::new(),
        })
    }

    pub fn param(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn into_parts(self) -> (Vec<Var>, Vec<(usize, BatchStats)>) {
        (self.vars, self.bn_stats)
    }

    pub(crate) fn conv(&mut self, c: ConvRef, x: Var) -> Result<Var> {
        let b = c.b.map(|i| self.vars[i]);
        Ok(self.tape.conv2d(x, self.vars[c.w], b, c.spec)?)
    }

    pub(crate) fn bn(&mut self, b: BnRef, x: Var) -> Result<Var> {
        let state = &self.store.bn[b.state];
        let mode = if self.training {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval {
                mean: &state.mean,
                var: &state.var,
            }
        };
        let (y, stats) = self
            .tape
            .batch_norm(x, self.vars[b.gamma], self.vars[b.beta], mode, self.eps)?;
        if let Some(s) = stats {
            self.bn_stats.push((b.state, s));
        }
        Ok(y)
    }

    pub(crate) fn conv_bn_relu(&mut self, l: ConvBn, x: Var) -> Result<Var> {
        let y = self.conv(l.conv, x)?;
        let y = self.bn(l.bn, y)?;
        Ok(self.tape.relu(y)?)
    }

    /// Applies a linear map to the last axis of `x` (rank 2 or 3).
    pub(crate) fn linear(&mut self, l: LinearRef, x: Var) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[l.w])?;
        match l.b {
            Some(b) if self.tape.shape(y).len() == 2 => Ok(self.tape.bias_add(y, self.vars[b])?),
            Some(_) => Err(CoreError::invalid("linear", "bias only supported on [N, C] inputs")),
            None => Ok(y),
        }
    }

    /// Batch norm then ReLU over the last axis of a `[B, J, C]` or `[B, C]` tensor.
    pub(crate) fn bn_relu_last(&mut self, b: BnRef, x: Var) -> Result<Var> {
        let shape = self.tape.shape(x).to_vec();
        let c = *shape.last().expect("non-scalar");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = self.tape.reshape(x, &[rows, c])?;
        let y = self.bn(b, flat)?;
        let y = self.tape.relu(y)?;
        Ok(self.tape.reshape(y, &shape)?)
    }
}
