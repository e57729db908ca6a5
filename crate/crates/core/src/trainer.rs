//! Self-supervised training: reconstruct frame `t` from frame `t - gap` through the predicted
//! offsets, and descend on the color error. Masks are never read.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Pass, TensorKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::VideoSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to biases and normalization parameters too.
    pub decay_all: bool,
    pub epochs: usize,
    pub frame_gap: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_all: false,
            epochs: 100,
            frame_gap: 5,
            batch_size: 4,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.frame_gap == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, frame_gap and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// `(frame[t - gap], frame[t])`.
pub fn sample_pair(video: &VideoSequence, t: usize, gap: usize) -> Result<(&Tensor<f32>, &Tensor<f32>)> {
    if t < gap || t >= video.len() {
        return Err(Error::IndexOutOfRange {
            index: t,
            reason: format!("pair (t - {gap}, t) in `{}` with {} frames", video.name, video.len()),
        });
    }
    Ok((&video.frames[t - gap], &video.frames[t]))
}

/// `lr * (1 - epoch / max_epoch)^0.9`; epochs past the end give 0.
pub fn poly_lr(epoch: usize, max_epoch: usize, lr: f64) -> f64 {
    if max_epoch == 0 {
        return 0.0;
    }
    lr * (1.0 - epoch.min(max_epoch) as f64 / max_epoch as f64).powf(0.9)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor<f32>>,
    pub epoch: usize,
    pub step: usize,
}

/// `v <- momentum * v + g + weight_decay * p`, then `p <- p - lr * v`.
pub fn sgd_update<T: Scalar>(p: &mut Tensor<T>, g: &Tensor<T>, v: &mut Tensor<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != v.shape() {
        return Err(Error::shape("sgd", format!("{:?}", p.shape()), format!("grad {:?}, velocity {:?}", g.shape(), v.shape())));
    }
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// One SGD step over every trainable tensor that has a gradient.
pub fn sgd_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: name.clone(),
                index: i,
                step: state.step,
            });
        }
    }
    for (name, kind, p) in params.named_tensors_mut() {
        if !kind.trainable() {
            continue;
        }
        let Some(g) = grads.get(&name) else { continue };
        let wd = if cfg.decay_all || kind == TensorKind::ConvWeight { cfg.weight_decay } else { 0.0 };
        let v = state.velocity.entry(name).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        sgd_update(p, g, v, lr, cfg.momentum, wd)?;
    }
    state.step += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState,
    pub log: Vec<LossRecord>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainOutcome {
    /// Relative drop of the mean epoch loss from the first to the last epoch.
    pub fn loss_drop(&self) -> Option<f64> {
        let (first, last) = (*self.epoch_losses.first()?, *self.epoch_losses.last()?);
        (first > 0.0).then(|| 1.0 - last / first)
    }
}

/// Plain-text loss log, one `epoch step lr loss` line per step.
pub fn format_log(log: &[LossRecord]) -> String {
    let mut s = String::from("# epoch step lr loss\n");
    for r in log {
        s.push_str(&format!("{} {} {:.6e} {:.6e}\n", r.epoch, r.step, r.lr, r.loss));
    }
    s
}

/// Loss and parameter gradients of one batch, without touching the parameters.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    reference: Tensor<f32>,
    target: Tensor<f32>,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>, Pass<f32>)> {
    let mut g = Graph::new();
    let r = g.input(reference);
    let t = g.input(target);
    let mut pass = Pass::train();
    let out = params.forward_train(&mut g, r, t, &mut pass)?;
    let loss = g.reconstruction_loss(out.prediction, out.target)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "reconstruction loss" });
    }
    g.backward(loss)?;
    let names: Vec<String> = g.param_names().map(str::to_string).collect();
    let grads = names
        .into_iter()
        .filter_map(|n| g.param_grad(&n).cloned().map(|t| (n, t)))
        .collect();
    Ok((value, grads, pass))
}

fn clip(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Trains from a fresh initialization of `cfg.model`.
pub fn train(dataset: &[VideoSequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, |_| {})
}

/// Like [`train`], calling `on_step` after every optimizer step.
pub fn train_with(dataset: &[VideoSequence], cfg: &TrainConfig, mut on_step: impl FnMut(&LossRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let want = (cfg.model.height, cfg.model.width);
    let mut pairs = Vec::new();
    for (i, v) in dataset.iter().enumerate() {
        if v.dims() != Some(want) {
            return Err(Error::shape("train", format!("{want:?} frames"), format!("{:?} in `{}`", v.dims(), v.name)));
        }
        if v.len() <= cfg.frame_gap {
            return Err(Error::invalid("train", format!("`{}` has {} frames, gap {}", v.name, v.len(), cfg.frame_gap)));
        }
        pairs.extend((cfg.frame_gap..v.len()).map(|t| (i, t)));
    }

    let mut params = ModelParams::<f32>::new(&cfg.model)?;
    let mut state = OptimizerState::default();
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = poly_lr(epoch, cfg.epochs, cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in pairs.chunks(cfg.batch_size) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().map(|&(v, t)| sample_pair(&dataset[v], t, cfg.frame_gap).map(|p| p.0)).collect::<Result<_>>()?;
            let tars: Vec<&Tensor<f32>> = chunk.iter().map(|&(v, t)| &dataset[v].frames[t]).collect();
            let (h, w) = want;
            let reference = Tensor::stack_batch(&refs)?.reshape([chunk.len(), 3, h, w])?;
            let target = Tensor::stack_batch(&tars)?.reshape([chunk.len(), 3, h, w])?;
            let (loss, mut grads, mut pass) = batch_gradients(&params, reference, target)?;
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            sgd_step(&mut params, &grads, &mut state, lr, cfg)?;
            params.apply_batch_stats(&mut pass);
            let record = LossRecord {
                epoch,
                step: state.step,
                lr,
                loss,
            };
            on_step(&record);
            log.push(record);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    state.epoch = cfg.epochs;
    Ok(TrainOutcome {
        params,
        optimizer: state,
        log,
        epoch_losses,
    })
}
