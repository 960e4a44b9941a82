//! Named parameter storage, dense layers, embeddings and the optimizer.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcore::{Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let (idx, _) = self.params.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    /// Replaces values by name; shapes must match and every name must exist.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, value) in named {
            let slot = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self.params.values().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self.params.values().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamSet`] recorded on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients in parameter order, zeros where unreachable.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| g.get_or_zeros(v)).collect()
    }
}

fn normal_init<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Weight initialization for a [`Linear`] layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 1/fan_in)`
    FanIn,
    Zero,
}

/// Affine layer `x W + b` with an optional fixed connectivity mask on `W`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    mask: Option<Tensor>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::FanIn => normal_init(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        let w = ps.add(format!("{name}.w"), w)?;
        let b = if bias {
            Some(ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            mask: None,
            fan_in,
            fan_out,
        })
    }

    /// Attaches a `[fan_in, fan_out]` 0/1 mask applied on every evaluation.
    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        if mask.shape() != [self.fan_in, self.fan_out] {
            return Err(Error::ShapeMismatch {
                op: "linear mask",
                lhs: vec![self.fan_in, self.fan_out],
                rhs: mask.shape().to_vec(),
            });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut w = p.get(self.w);
        if let Some(m) = &self.mask {
            w = w.mul_const(m)?;
        }
        let y = x.matmul(&w)?;
        match self.b {
            Some(b) => y.add(&p.get(b)),
            None => Ok(y),
        }
    }
}

/// Sinusoidal features of scalar inputs: `[sin(ω_i v), cos(ω_i v)]` with
/// geometrically spaced frequencies; output shape `[N, 2 * freqs]`.
pub fn sinusoidal(values: &[f64], freqs: usize, scale: f64) -> Tensor {
    let mut out = Vec::with_capacity(values.len() * 2 * freqs);
    for &v in values {
        let x = v * scale;
        for i in 0..freqs {
            let w = (-(10_000f64.ln()) * i as f64 / freqs as f64).exp();
            out.push((w * x).sin());
        }
        for i in 0..freqs {
            let w = (-(10_000f64.ln()) * i as f64 / freqs as f64).exp();
            out.push((w * x).cos());
        }
    }
    Tensor::new(&[values.len(), 2 * freqs], out).expect("embedding shape")
}

/// Noise-level embedding width.
pub const TIME_FREQS: usize = 16;
pub const TIME_EMB: usize = 2 * TIME_FREQS;

/// Embedding of noise levels in `[0, 1]`.
pub fn time_embedding(t: &[f64]) -> Tensor {
    sinusoidal(t, TIME_FREQS, 1000.0)
}

/// Embedding of trajectory step counts.
pub fn steps_embedding(steps: &[usize]) -> Tensor {
    let v: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    sinusoidal(&v, TIME_FREQS, 1.0)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.values_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then cosine decay to `floor` at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Cosine decay from `start` at step 0 to 0 at `total`.
pub fn cosine_decay(start: f64, step: u64, total: u64) -> f64 {
    let p = (step as f64 / total.max(1) as f64).min(1.0);
    0.5 * start * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
