//! Neural-network plumbing shared by every trainable model: seeded parameter
//! initialisation, an Adam/AdamW optimizer with exportable state, and a few
//! layers candle does not provide with gradients.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::{FanInOut, NonLinearity, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

/// Parameter store whose fresh variables are drawn from a seeded stream.
///
/// candle's own initialisers use an unseedable thread RNG on the CPU, which
/// would make training irreproducible.
pub struct SeededInit {
    map: VarMap,
    rng: Mutex<Rng>,
}

impl SeededInit {
    pub fn new(map: VarMap, seed: u64) -> Self {
        Self {
            map,
            rng: Mutex::new(seeded(seed)),
        }
    }

    fn draw(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().expect("init rng poisoned");
        match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    mean + stdev * z
                })
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan.for_shape(shape).max(1);
                let std = non_linearity.gain() / (fan as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let b = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-b..b)).collect()
                    }
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut *rng);
                            std * z
                        })
                        .collect(),
                }
            }
        }
    }
}

impl SimpleBackend for SeededInit {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.map.data().lock().expect("varmap poisoned");
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.draw(&s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("no initialiser given for {name}")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map.data().lock().expect("varmap poisoned").contains_key(name)
    }
}

/// Fresh parameter store plus a builder that initialises into it.
pub fn seeded_builder(seed: u64, dtype: DType) -> (VarMap, VarBuilder<'static>) {
    let map = VarMap::new();
    let vb = VarBuilder::from_backend(
        Box::new(SeededInit::new(map.clone(), seed)),
        dtype,
        Device::Cpu,
    );
    (map, vb)
}

/// Variables sorted by name, for deterministic iteration.
pub fn sorted_vars(map: &VarMap) -> Vec<(String, Var)> {
    let data = map.data().lock().expect("varmap poisoned");
    let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

pub fn parameter_count(map: &VarMap) -> usize {
    sorted_vars(map).iter().map(|(_, v)| v.elem_count()).sum()
}

/// Snapshot of all variables as plain tensors keyed by name.
pub fn export_vars(map: &VarMap, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
    sorted_vars(map)
        .into_iter()
        .map(|(k, v)| Ok((format!("{prefix}{k}"), v.as_tensor().copy()?)))
        .collect()
}

/// Overwrites every variable from `tensors[prefix + name]`; all must exist.
pub fn import_vars(map: &VarMap, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
    for (name, var) in sorted_vars(map) {
        let key = format!("{prefix}{name}");
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if t.shape() != var.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, model expects {:?}",
                t.shape(),
                var.shape()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightDecay {
    /// Classic L2 penalty folded into the gradient (Adam).
    Coupled(f64),
    /// Decoupled shrinkage of the weights (AdamW).
    Decoupled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: WeightDecay,
}

impl AdamConfig {
    pub fn adam(lr: f64, l2: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: WeightDecay::Coupled(l2),
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay: WeightDecay::Decoupled(weight_decay),
            ..Self::adam(lr, 0.0)
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with optional coupled or decoupled weight decay. Its moment
/// estimates can be exported into a checkpoint so training resumes exactly.
pub struct Adam {
    slots: Vec<Slot>,
    step: u64,
    config: AdamConfig,
}

impl Adam {
    pub fn new(map: &VarMap, config: AdamConfig) -> Result<Self> {
        let slots = sorted_vars(map)
            .into_iter()
            .map(|(name, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            slots,
            step: 0,
            config,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Detached so the moments never hold on to the forward graph.
            let theta = slot.var.as_tensor().detach();
            let g = g.detach();
            let g = match c.weight_decay {
                WeightDecay::Coupled(wd) if wd != 0.0 => (g + (&theta * wd)?)?,
                _ => g,
            };
            let m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let mut next = theta.clone();
            if let WeightDecay::Decoupled(wd) = c.weight_decay {
                next = (next * (1.0 - c.lr * wd))?;
            }
            next = (next - (update * c.lr)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    pub fn export_state(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            out.insert(format!("{prefix}m.{}", s.name), s.m.copy()?);
            out.insert(format!("{prefix}v.{}", s.name), s.v.copy()?);
        }
        Ok(out)
    }

    pub fn import_state(
        &mut self,
        tensors: &HashMap<String, Tensor>,
        prefix: &str,
        step: u64,
    ) -> Result<()> {
        for s in &mut self.slots {
            for (which, dst) in [("m", &mut s.m), ("v", &mut s.v)] {
                let key = format!("{prefix}{which}.{}", s.name);
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                *dst = t.to_dtype(s.var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Layer normalisation over the last dimension built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Linear layer with PyTorch-style uniform initialisation.
pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<candle_nn::Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = vb.get_with_hints(
        (out_dim, in_dim),
        "weight",
        Init::Uniform {
            lo: -bound,
            up: bound,
        },
    )?;
    let b = vb.get_with_hints(
        out_dim,
        "bias",
        Init::Uniform {
            lo: -bound,
            up: bound,
        },
    )?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// 2-D convolution with Kaiming-uniform weights.
pub fn conv2d(
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    vb: VarBuilder,
) -> Result<candle_nn::Conv2d> {
    let cfg = candle_nn::Conv2dConfig {
        padding,
        stride,
        dilation: 1,
        groups,
        cudnn_fwd_algo: None,
    };
    let w = vb.get_with_hints(
        (out_c, in_c / groups, kernel, kernel),
        "weight",
        Init::Kaiming {
            dist: NormalOrUniform::Uniform,
            fan: FanInOut::FanIn,
            non_linearity: NonLinearity::ReLU,
        },
    )?;
    let fan_in = (in_c / groups * kernel * kernel) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let b = vb.get_with_hints(
        out_c,
        "bias",
        Init::Uniform {
            lo: -bound,
            up: bound,
        },
    )?;
    Ok(candle_nn::Conv2d::new(w, Some(b), cfg))
}

pub fn group_norm(groups: usize, channels: usize, vb: VarBuilder) -> Result<candle_nn::GroupNorm> {
    let w = vb.get_with_hints(channels, "weight", Init::Const(1.0))?;
    let b = vb.get_with_hints(channels, "bias", Init::Const(0.0))?;
    Ok(candle_nn::GroupNorm::new(w, b, channels, groups.min(channels), 1e-5)?)
}

/// Stacks equally sized images into a `(B, 1, H, W)` f32 tensor.
pub fn image_batch(images: &[&crate::raster::GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::shape(format!("{h}x{w}"), format!("{:?}", img.dims())));
        }
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), &Device::Cpu)?)
}

/// Stack of bidirectional GRU layers over `(B, L, F)` sequences, returning
/// `(B, L, 2·hidden)`.
pub struct BiGru {
    layers: Vec<(candle_nn::GRU, candle_nn::GRU)>,
    hidden: usize,
}

impl BiGru {
    pub fn new(in_dim: usize, hidden: usize, layers: usize, vb: VarBuilder) -> Result<Self> {
        if layers == 0 || hidden == 0 {
            return Err(Error::Config("recurrent encoder needs layers >= 1 and hidden >= 1".into()));
        }
        let mut out = Vec::with_capacity(layers);
        let mut d = in_dim;
        for l in 0..layers {
            let cfg = candle_nn::GRUConfig::default();
            let fwd = candle_nn::gru(d, hidden, cfg, vb.pp(format!("l{l}.fwd")))?;
            let bwd = candle_nn::gru(d, hidden, cfg, vb.pp(format!("l{l}.bwd")))?;
            out.push((fwd, bwd));
            d = 2 * hidden;
        }
        Ok(Self { layers: out, hidden })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_nn::RNN;
        let mut x = x.clone();
        for (fwd, bwd) in &self.layers {
            let len = x.dim(1)?;
            let f: Vec<Tensor> = fwd.seq(&x)?.into_iter().map(|s| s.h).collect();
            let rev: Vec<Tensor> = (0..len).rev().map(|i| x.narrow(1, i, 1)).collect::<candle_core::Result<_>>()?;
            let rev = Tensor::cat(&rev, 1)?;
            let mut b: Vec<Tensor> = bwd.seq(&rev)?.into_iter().map(|s| s.h).collect();
            b.reverse();
            x = Tensor::cat(&[Tensor::stack(&f, 1)?, Tensor::stack(&b, 1)?], 2)?;
        }
        Ok(x)
    }
}

/// Ensures every element of a scalar loss is finite.
pub fn finite_scalar(t: &Tensor, what: &str) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} = {v}")))
    }
}
