//! Per-relation denoising diffusion models over operand poses.
//!
//! A model maps noised poses `p_t` of a relation's operands, their
//! geometry `g` and the step `t` to a noise estimate. Fixed-arity
//! relations use a feed-forward backbone over the concatenated operand
//! tokens; variadic relations use a masked self-attention stack.

pub mod autodiff;

use crate::datagen::{TrainingSample, NORM};
pub use autodiff::{GradFault, Real, Tape, Var};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("{got} operands exceed {max} slots")]
    Arity { got: usize, max: usize },
    #[error("dataset has {got} samples, needs at least {need}")]
    Precondition { got: usize, need: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Cosine schedule; index 0 is the clean signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub offset: f64,
    pub alpha_bar: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }
}

pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Config("schedule needs at least one step".into()));
    }
    let f = |t: usize| (((t as f64 / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0);
    let alpha_bar: Vec<f64> = (0..=steps).map(|t| (f(t) / f0).clamp(0.0, 1.0)).collect();
    let mut beta = vec![0.0; steps + 1];
    for t in 1..=steps {
        beta[t] = (1.0 - alpha_bar[t] / alpha_bar[t - 1]).clamp(1e-6, 0.999);
    }
    Ok(NoiseSchedule { steps, offset, alpha_bar, beta })
}

/// `sqrt(abar_t) p0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(p0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    if p0.len() != eps.len() {
        return Err(DiffusionError::Shape(format!("pose has {} entries, noise {}", p0.len(), eps.len())));
    }
    if t > sched.steps {
        return Err(DiffusionError::Shape(format!("step {t} beyond {}", sched.steps)));
    }
    let a = sched.alpha_bar[t];
    Ok(p0.iter().zip(eps).map(|(p, e)| a.sqrt() * p + (1.0 - a).sqrt() * e).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArityMode {
    Fixed(usize),
    Variadic { max_slots: usize },
}

impl ArityMode {
    pub fn slots(self) -> usize {
        match self {
            ArityMode::Fixed(k) => k,
            ArityMode::Variadic { max_slots } => max_slots,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: usize,
    pub time_hidden: usize,
    pub pose_dim: usize,
    pub geom_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Learned per-slot embedding added to operand tokens.
    pub slot_encoding: bool,
}

impl ArchConfig {
    pub fn desk() -> Self {
        ArchConfig { hidden: 128, time_hidden: 512, pose_dim: 3, geom_dim: 3, heads: 4, blocks: 2, slot_encoding: true }
    }

    pub fn full_scale() -> Self {
        ArchConfig { hidden: 256, ..ArchConfig::desk() }
    }

    /// Small widths for tests and quick runs.
    pub fn tiny() -> Self {
        ArchConfig { hidden: 64, time_hidden: 128, ..ArchConfig::desk() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine decay of the step size down to `lr * lr_floor`.
    pub lr_floor: Option<f64>,
    /// Decay of the weight average returned as the trained model.
    pub ema: Option<f64>,
    /// Forward and backward passes in `f32`; weights and moments stay `f64`.
    pub single_precision: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { lr: 1e-3, steps: 20_000, batch: 128, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr_floor: Some(0.05), ema: Some(0.999), single_precision: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1: Lin,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ln2: Lin,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    shape: [Lin; 2],
    pose: [Lin; 2],
    time: [Lin; 2],
    mlp: Vec<Lin>,
    slots: Vec<usize>,
    blocks: Vec<Block>,
    final_ln: Option<Lin>,
    dec: Lin,
}

/// Named parameter tensors in declaration order; biases are `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn get_flat(&self, i: usize) -> f64 {
        let mut i = i;
        for t in &self.tensors {
            if i < t.len() {
                return t.as_slice().expect("params are contiguous")[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    fn set_flat(&mut self, i: usize, v: f64) {
        let mut i = i;
        for t in &mut self.tensors {
            if i < t.len() {
                t.as_slice_mut().expect("params are contiguous")[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }
}

struct Builder<'a, R: Rng> {
    params: Params,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> usize {
        let t = Array2::from_shape_fn((rows, cols), |_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 });
        self.params.names.push(name);
        self.params.tensors.push(t);
        self.params.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Lin { w: self.tensor(format!("{name}.w"), fan_in, fan_out, bound), b: self.tensor(format!("{name}.b"), 1, fan_out, bound) }
    }

    fn norm(&mut self, name: &str, n: usize) -> Lin {
        let w = self.tensor(format!("{name}.gain"), 1, n, 0.0);
        self.params.tensors[w].fill(1.0);
        Lin { w, b: self.tensor(format!("{name}.bias"), 1, n, 0.0) }
    }
}

fn build_layout<R: Rng>(arch: &ArchConfig, arity: ArityMode, rng: &mut R) -> (Layout, Params) {
    let h = arch.hidden;
    let mut b = Builder { params: Params { names: Vec::new(), tensors: Vec::new() }, rng };
    let shape = [b.linear("shape.0", arch.geom_dim, h), b.linear("shape.1", h, h)];
    let pose = [b.linear("pose.0", arch.pose_dim, h), b.linear("pose.1", h, h)];
    let time = [b.linear("time.0", h, arch.time_hidden), b.linear("time.1", arch.time_hidden, h)];
    let mut mlp = Vec::new();
    let mut slots = Vec::new();
    let mut blocks = Vec::new();
    let mut final_ln = None;
    match arity {
        ArityMode::Fixed(k) => {
            mlp.push(b.linear("mlp.0", (k + 1) * h, 2 * h));
            mlp.push(b.linear("mlp.1", 2 * h, 2 * h));
            mlp.push(b.linear("mlp.2", 2 * h, k * h));
        }
        ArityMode::Variadic { max_slots } => {
            if arch.slot_encoding {
                for s in 0..max_slots {
                    slots.push(b.tensor(format!("slot.{s}"), 1, h, 0.1));
                }
            }
            for i in 0..arch.blocks {
                blocks.push(Block {
                    ln1: b.norm(&format!("block.{i}.ln1"), h),
                    q: b.linear(&format!("block.{i}.q"), h, h),
                    k: b.linear(&format!("block.{i}.k"), h, h),
                    v: b.linear(&format!("block.{i}.v"), h, h),
                    o: b.linear(&format!("block.{i}.o"), h, h),
                    ln2: b.norm(&format!("block.{i}.ln2"), h),
                    ff1: b.linear(&format!("block.{i}.ff1"), h, 2 * h),
                    ff2: b.linear(&format!("block.{i}.ff2"), 2 * h, h),
                });
            }
            final_ln = Some(b.norm("final_ln", h));
        }
    }
    let dec = b.linear("dec", h, arch.pose_dim);
    (Layout { shape, pose, time, mlp, slots, blocks, final_ln, dec }, b.params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub relation: String,
    pub arity: ArityMode,
    pub arch: ArchConfig,
    /// Per-axis scale between scene units and model inputs.
    pub norm: Vec<f64>,
    pub seed: u64,
    pub params: Params,
    layout: Layout,
}

/// A batch of model inputs: `rows` samples of `slots` operands each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `rows x (slots * pose_dim)`
    pub p: Array2<f64>,
    /// `rows x (slots * geom_dim)`
    pub g: Array2<f64>,
    pub t: Vec<usize>,
    /// `rows x slots`, true for operands that are present.
    pub mask: Vec<Vec<bool>>,
}

fn sinusoid(t: &[usize], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((t.len(), dim), |(r, c)| {
        let i = if c < half { c } else { c - half };
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        let x = t[r] as f64 * freq;
        if c < half {
            x.sin()
        } else {
            x.cos()
        }
    })
}

impl DenoiserModel {
    pub fn new(relation: &str, arity: ArityMode, arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build_layout(&arch, arity, &mut rng);
        let norm = if arch.pose_dim == 3 { NORM.to_vec() } else { vec![1.0; arch.pose_dim] };
        DenoiserModel { relation: relation.to_string(), arity, arch, norm, seed, params, layout }
    }

    pub fn slots(&self) -> usize {
        self.arity.slots()
    }

    fn linear<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, l: Lin) -> Var {
        let y = tape.matmul(x, vars[l.w]);
        tape.add_row(y, vars[l.b])
    }

    /// Records the forward pass on `tape`; `vars` holds the parameter
    /// leaves in declaration order. Returns `rows x (slots * pose_dim)`.
    fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], batch: &Batch) -> Var {
        let (pd, gd) = (self.arch.pose_dim, self.arch.geom_dim);
        let s_count = self.slots();
        let rows = batch.t.len();
        let lay = &self.layout;
        let temb = tape.leaf(sinusoid(&batch.t, self.arch.hidden).mapv(T::of));
        let t0 = self.linear(tape, vars, temb, lay.time[0]);
        let t1 = tape.mish(t0);
        let time = self.linear(tape, vars, t1, lay.time[1]);
        let mut tokens = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let g = tape.leaf(batch.g.slice(ndarray::s![.., s * gd..(s + 1) * gd]).mapv(T::of));
            let p = tape.leaf(batch.p.slice(ndarray::s![.., s * pd..(s + 1) * pd]).mapv(T::of));
            let g0 = self.linear(tape, vars, g, lay.shape[0]);
            let g1 = tape.silu(g0);
            let ge = self.linear(tape, vars, g1, lay.shape[1]);
            let p0 = self.linear(tape, vars, p, lay.pose[0]);
            let p1 = tape.silu(p0);
            let pe = self.linear(tape, vars, p1, lay.pose[1]);
            let mut tok = tape.add(ge, pe);
            if let Some(&slot) = lay.slots.get(s) {
                tok = tape.add_row(tok, vars[slot]);
            }
            tokens.push(tok);
        }
        let h = self.arch.hidden;
        let per_slot: Vec<Var> = match self.arity {
            ArityMode::Fixed(_) => {
                let mut parts = tokens.clone();
                parts.push(time);
                let mut x = tape.concat(&parts);
                for (i, l) in lay.mlp.iter().enumerate() {
                    x = self.linear(tape, vars, x, *l);
                    if i + 1 < lay.mlp.len() {
                        x = tape.silu(x);
                    }
                }
                let x = tape.silu(x);
                (0..s_count).map(|s| tape.slice_cols(x, s * h, h)).collect()
            }
            ArityMode::Variadic { .. } => {
                // One sequence per sample: time token first, then slots.
                let seq = s_count + 1;
                let mut parts = vec![time];
                parts.extend(&tokens);
                let mut x = tape.interleave(&parts);
                let mut key_mask = Vec::with_capacity(rows * seq);
                for m in &batch.mask {
                    key_mask.push(true);
                    key_mask.extend(m.iter().copied());
                }
                for b in &lay.blocks {
                    let n = tape.layer_norm(x, vars[b.ln1.w], vars[b.ln1.b]);
                    let q = self.linear(tape, vars, n, b.q);
                    let k = self.linear(tape, vars, n, b.k);
                    let v = self.linear(tape, vars, n, b.v);
                    let a = tape.attention(q, k, v, self.arch.heads, seq, &key_mask);
                    let o = self.linear(tape, vars, a, b.o);
                    x = tape.add(x, o);
                    let n = tape.layer_norm(x, vars[b.ln2.w], vars[b.ln2.b]);
                    let f = self.linear(tape, vars, n, b.ff1);
                    let f = tape.silu(f);
                    let f = self.linear(tape, vars, f, b.ff2);
                    x = tape.add(x, f);
                }
                let ln = lay.final_ln.expect("variadic layout has a final norm");
                let x = tape.layer_norm(x, vars[ln.w], vars[ln.b]);
                (0..s_count).map(|s| tape.pick_rows(x, s + 1, seq)).collect()
            }
        };
        let mut outs = Vec::with_capacity(s_count);
        for (s, tok) in per_slot.into_iter().enumerate() {
            let o = self.linear(tape, vars, tok, lay.dec);
            let w: Vec<T> = batch.mask.iter().map(|m| if m[s] { T::one() } else { T::zero() }).collect();
            outs.push(tape.scale_rows(o, w));
        }
        tape.concat(&outs)
    }

    fn param_leaves<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.tensors.iter().map(|t| tape.leaf(t.mapv(T::of))).collect()
    }

    /// Checks a batch against the model's slot layout.
    pub fn check_batch(&self, batch: &Batch) -> Result<(), DiffusionError> {
        let s = self.slots();
        let rows = batch.t.len();
        if batch.p.dim() != (rows, s * self.arch.pose_dim) || batch.g.dim() != (rows, s * self.arch.geom_dim) {
            return Err(DiffusionError::Shape(format!(
                "batch {:?}/{:?} for {rows} rows of {s} slots",
                batch.p.dim(),
                batch.g.dim()
            )));
        }
        if batch.mask.len() != rows || batch.mask.iter().any(|m| m.len() != s) {
            return Err(DiffusionError::Shape("mask layout".into()));
        }
        Ok(())
    }

    /// Noise estimate for a batch; masked slots come out as zero.
    pub fn predict(&self, batch: &Batch) -> Result<Array2<f64>, DiffusionError> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let vars = self.param_leaves(&mut tape);
        let out = self.forward(&mut tape, &vars, batch);
        Ok(tape.value(out).clone())
    }

    /// Training loss on a batch of noised inputs with known noise, and, if
    /// requested, the parameter gradients.
    pub fn loss_and_grad(&self, batch: &Batch, eps: &Array2<f64>, fault: Option<GradFault>) -> (f64, Option<Vec<Array2<f64>>>) {
        let (loss, grads) = self.loss_and_grad_in::<f64>(batch, eps, fault);
        (loss, grads)
    }

    /// [`Self::loss_and_grad`] evaluated in `T`; results are widened back.
    fn loss_and_grad_in<T: Real>(&self, batch: &Batch, eps: &Array2<f64>, fault: Option<GradFault>) -> (f64, Option<Vec<Array2<f64>>>) {
        let mut tape = Tape::<T>::new();
        let vars = self.param_leaves(&mut tape);
        let out = self.forward(&mut tape, &vars, batch);
        let pd = self.arch.pose_dim;
        let weight: Array2<T> = Array2::from_shape_fn(eps.raw_dim(), |(r, c)| if batch.mask[r][c / pd] { T::one() } else { T::zero() });
        let denom = weight.sum().max(T::one());
        let loss = tape.mse(out, eps.mapv(T::of), weight, denom);
        let value = tape.value(loss)[[0, 0]].to_f64().unwrap_or(f64::NAN);
        let grads = fault.map(|f| {
            let mut g = tape.backward(loss, f);
            vars.iter()
                .map(|v| match g[v.index()].take() {
                    Some(g) => g.mapv(|x| x.to_f64().unwrap_or(f64::NAN)),
                    None => Array2::zeros(tape.value(*v).raw_dim()),
                })
                .collect()
        });
        (value, grads)
    }
}

/// Inputs of [`train_denoiser`]: one sample per row, already normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserData {
    pub g: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub count: Vec<usize>,
}

impl DenoiserData {
    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Pads relation samples to `slots` operands.
    pub fn from_samples(samples: &[TrainingSample], slots: usize) -> Result<Self, DiffusionError> {
        let mut d = DenoiserData { g: Vec::new(), p: Vec::new(), count: Vec::new() };
        for s in samples {
            if s.arity() > slots {
                return Err(DiffusionError::Arity { got: s.arity(), max: slots });
            }
            let mut g = vec![0.0; slots * 3];
            let mut p = vec![0.0; slots * 3];
            for k in 0..s.arity() {
                g[3 * k..3 * k + 3].copy_from_slice(&s.g[k]);
                p[3 * k..3 * k + 3].copy_from_slice(&s.p[k]);
            }
            d.g.push(g);
            d.p.push(p);
            d.count.push(s.arity());
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub losses: Vec<f64>,
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws a training batch: random rows, uniform steps, fresh noise.
fn draw_batch(
    data: &DenoiserData,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    size: usize,
    rng: &mut impl Rng,
) -> (Batch, Array2<f64>) {
    let (s, pd, gd) = (model.slots(), model.arch.pose_dim, model.arch.geom_dim);
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.len())).collect();
    let t: Vec<usize> = (0..size).map(|_| rng.random_range(1..=sched.steps)).collect();
    let mut p = Array2::zeros((size, s * pd));
    let mut g = Array2::zeros((size, s * gd));
    let mut eps = Array2::zeros((size, s * pd));
    let mut mask = Vec::with_capacity(size);
    for (r, &i) in idx.iter().enumerate() {
        let a = sched.alpha_bar[t[r]];
        let m: Vec<bool> = (0..s).map(|k| k < data.count[i]).collect();
        for c in 0..s * pd {
            if m[c / pd] {
                let e = gauss(rng);
                eps[[r, c]] = e;
                p[[r, c]] = a.sqrt() * data.p[i][c] + (1.0 - a).sqrt() * e;
            }
        }
        for c in 0..s * gd {
            g[[r, c]] = data.g[i][c];
        }
        mask.push(m);
    }
    (Batch { p, g, t, mask }, eps)
}

/// Adam on the denoising loss. The loss trace holds one value per step.
pub fn train_denoiser(
    data: &DenoiserData,
    relation: &str,
    arity: ArityMode,
    arch: &ArchConfig,
    opt: &OptConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<TrainOutcome, DiffusionError> {
    if data.is_empty() || data.len() < opt.batch {
        return Err(DiffusionError::Precondition { got: data.len(), need: opt.batch });
    }
    let mut model = DenoiserModel::new(relation, arity, arch.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut m: Vec<Array2<f64>> = model.params.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
    let mut v = m.clone();
    let mut avg = opt.ema.map(|_| model.params.tensors.clone());
    let mut losses = Vec::with_capacity(opt.steps);
    for step in 1..=opt.steps {
        let (batch, eps) = draw_batch(data, &model, sched, opt.batch, &mut rng);
        let (loss, grads) = if opt.single_precision {
            model.loss_and_grad_in::<f32>(&batch, &eps, Some(GradFault::None))
        } else {
            model.loss_and_grad(&batch, &eps, Some(GradFault::None))
        };
        if !loss.is_finite() {
            return Err(DiffusionError::TrainingDiverged { step });
        }
        losses.push(loss);
        let grads = grads.expect("gradients requested");
        let c1 = 1.0 - opt.beta1.powi(step as i32);
        let c2 = 1.0 - opt.beta2.powi(step as i32);
        let lr = match opt.lr_floor {
            Some(f) => {
                let c = 0.5 * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / opt.steps as f64).cos());
                opt.lr * (f + (1.0 - f) * c)
            }
            None => opt.lr,
        };
        for ((w, g), (mi, vi)) in model.params.tensors.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
            ndarray::Zip::from(w).and(g).and(mi).and(vi).for_each(|w, &g, mi, vi| {
                *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * g;
                *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * g * g;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + opt.eps);
            });
        }
        if let (Some(d), Some(avg)) = (opt.ema, avg.as_mut()) {
            // Warm-up keeps early averages from being dominated by the init.
            let d = d.min((1.0 + step as f64) / (10.0 + step as f64));
            for (a, w) in avg.iter_mut().zip(&model.params.tensors) {
                a.zip_mut_with(w, |a, &w| *a = d * *a + (1.0 - d) * w);
            }
        }
    }
    if let Some(avg) = avg {
        model.params.tensors = avg;
    }
    if !model.params.all_finite() {
        return Err(DiffusionError::TrainingDiverged { step: opt.steps });
    }
    Ok(TrainOutcome { model, losses })
}

/// One noise estimate for a single sample of `n` operands in normalized
/// units. Fails when `n` exceeds the model's slots.
pub fn denoise_step(model: &DenoiserModel, p_t: &[f64], g: &[f64], t: usize, n: usize) -> Result<Vec<f64>, DiffusionError> {
    let s = model.slots();
    if n > s {
        return Err(DiffusionError::Arity { got: n, max: s });
    }
    let (pd, gd) = (model.arch.pose_dim, model.arch.geom_dim);
    if p_t.len() != n * pd || g.len() != n * gd {
        return Err(DiffusionError::Shape(format!("{} pose and {} geometry entries for {n} operands", p_t.len(), g.len())));
    }
    let mut p = Array2::zeros((1, s * pd));
    let mut gg = Array2::zeros((1, s * gd));
    for (i, x) in p_t.iter().enumerate() {
        p[[0, i]] = *x;
    }
    for (i, x) in g.iter().enumerate() {
        gg[[0, i]] = *x;
    }
    let batch = Batch { p, g: gg, t: vec![t], mask: vec![(0..s).map(|k| k < n).collect()] };
    let out = model.predict(&batch)?;
    Ok(out.row(0).iter().take(n * pd).copied().collect())
}

/// Ancestral sampling of `chains` independent pose vectors for operands
/// with geometry `g` (scene units). Results are in scene units.
pub fn sample_chains(model: &DenoiserModel, g: &[[f64; 3]], sched: &NoiseSchedule, chains: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let n = g.len().max(if model.arch.geom_dim == 0 { model.slots() } else { 0 });
    let s = model.slots();
    if n > s {
        return Err(DiffusionError::Arity { got: n, max: s });
    }
    let (pd, gd) = (model.arch.pose_dim, model.arch.geom_dim);
    let mut gm = Array2::zeros((chains, s * gd));
    for r in 0..chains {
        for (k, gk) in g.iter().enumerate() {
            for d in 0..gd {
                gm[[r, k * gd + d]] = gk[d] / model.norm[d];
            }
        }
    }
    let mask: Vec<Vec<bool>> = (0..chains).map(|_| (0..s).map(|k| k < n).collect()).collect();
    let mut p = Array2::from_shape_fn((chains, s * pd), |(_, c)| if c / pd < n { gauss(rng) } else { 0.0 });
    for t in (1..=sched.steps).rev() {
        let batch = Batch { p: p.clone(), g: gm.clone(), t: vec![t; chains], mask: mask.clone() };
        let eps = model.predict(&batch)?;
        let (a, ab, b) = (sched.alpha(t), sched.alpha_bar[t], sched.beta[t]);
        let coef = b / (1.0 - ab).sqrt();
        for r in 0..chains {
            for c in 0..n * pd {
                let mean = (p[[r, c]] - coef * eps[[r, c]]) / a.sqrt();
                let noise = if t > 1 { b.sqrt() * gauss(rng) } else { 0.0 };
                p[[r, c]] = mean + noise;
            }
        }
    }
    Ok((0..chains).map(|r| (0..n * pd).map(|c| p[[r, c]] * model.norm[c % pd]).collect()).collect())
}

/// One ancestral sample; see [`sample_chains`].
pub fn sample_single(model: &DenoiserModel, g: &[[f64; 3]], sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<Vec<f64>, DiffusionError> {
    Ok(sample_chains(model, g, sched, 1, rng)?.remove(0))
}

/// Largest relative error between analytic parameter gradients of the
/// denoising loss and central differences (`h = 1e-4`) over at most 200
/// random parameters.
pub fn grad_check(model: &DenoiserModel, batch: &Batch, eps: &Array2<f64>, fault: GradFault, seed: u64) -> f64 {
    let (_, grads) = model.loss_and_grad(batch, eps, Some(fault));
    let grads = grads.expect("gradients requested");
    let flat: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..flat.len()).collect();
    let picks: Vec<usize> = all.choose_multiple(&mut rng, 200.min(flat.len())).copied().collect();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for i in picks {
        let w = model.params.get_flat(i);
        probe.params.set_flat(i, w + h);
        let (lp, _) = probe.loss_and_grad(batch, eps, None);
        probe.params.set_flat(i, w - h);
        let (lm, _) = probe.loss_and_grad(batch, eps, None);
        probe.params.set_flat(i, w);
        let num = (lp - lm) / (2.0 * h);
        let ana = flat[i];
        let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// A random batch for gradient checks and tests.
pub fn random_batch(model: &DenoiserModel, rows: usize, sched: &NoiseSchedule, rng: &mut impl Rng) -> (Batch, Array2<f64>) {
    let s = model.slots();
    let (pd, gd) = (model.arch.pose_dim, model.arch.geom_dim);
    let mask: Vec<Vec<bool>> = (0..rows)
        .map(|_| {
            let n = match model.arity {
                ArityMode::Fixed(k) => k,
                ArityMode::Variadic { max_slots } => rng.random_range(2.min(max_slots)..=max_slots),
            };
            (0..s).map(|k| k < n).collect()
        })
        .collect();
    let p = Array2::from_shape_fn((rows, s * pd), |(r, c)| if mask[r][c / pd] { gauss(rng) } else { 0.0 });
    let g = Array2::from_shape_fn((rows, s * gd), |(r, c)| if mask[r][c / gd.max(1)] { rng.random_range(0.05..0.5) } else { 0.0 });
    let eps = Array2::from_shape_fn((rows, s * pd), |(r, c)| if mask[r][c / pd] { gauss(rng) } else { 0.0 });
    let t = (0..rows).map(|_| rng.random_range(1..=sched.steps)).collect();
    (Batch { p, g, t, mask }, eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    relation: String,
    arity: ArityMode,
    arch: ArchConfig,
    norm: Vec<f64>,
    seed: u64,
    cfg_hash: String,
    tensors: Vec<(String, [usize; 2])>,
}

impl DenoiserModel {
    /// Little-endian u64 header length, JSON header, then every tensor as
    /// little-endian f32 in declaration order.
    pub fn save(&self, path: &Path, cfg_hash: &str) -> Result<(), DiffusionError> {
        let header = CheckpointHeader {
            relation: self.relation.clone(),
            arity: self.arity,
            arch: self.arch.clone(),
            norm: self.norm.clone(),
            seed: self.seed,
            cfg_hash: cfg_hash.to_string(),
            tensors: self.params.names.iter().zip(&self.params.tensors).map(|(n, t)| (n.clone(), [t.nrows(), t.ncols()])).collect(),
        };
        let h = serde_json::to_vec(&header).map_err(|e| DiffusionError::Checkpoint(e.to_string()))?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&(h.len() as u64).to_le_bytes())?;
        out.write_all(&h)?;
        for t in &self.params.tensors {
            for x in t.iter() {
                out.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a checkpoint; returns the model and its recorded config hash.
    pub fn load(path: &Path) -> Result<(DenoiserModel, String), DiffusionError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| DiffusionError::Checkpoint(m.to_string());
        let hlen = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().expect("8 bytes")) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?).map_err(|e| bad(&e.to_string()))?;
        let mut model = DenoiserModel::new(&header.relation, header.arity, header.arch.clone(), header.seed);
        if model.params.names.len() != header.tensors.len()
            || model.params.tensors.iter().zip(&header.tensors).any(|(t, (_, d))| [t.nrows(), t.ncols()] != *d)
        {
            return Err(bad("tensor layout does not match the architecture"));
        }
        let mut pos = 8 + hlen;
        for t in &mut model.params.tensors {
            for x in t.iter_mut() {
                let b = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated weights"))?;
                *x = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
                pos += 4;
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        model.norm = header.norm;
        Ok((model, header.cfg_hash))
    }
}

#[cfg(test)]
mod tests;
