//! Mini-batch SGD over the synthetic training split.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, UpsampleMode, Var};
use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LabelMap, LossInputs, LossTargets, LossValues};
use crate::network::Network;
use crate::nn::ParamStore;
use crate::schedule::lr_at;
use crate::tensor::{Scalar, Tensor};

pub const LOG_HEADER: &str = "iter,lr,L_total,L_base,L_fine,L_bd,L_ske";

/// One training-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossValues,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(f, "{},{},{},{},{},{},{}", self.iter, self.lr, l.total, l.base, l.fine, l.boundary, l.skeleton)
    }
}

/// A stacked mini-batch.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: LabelMap,
    pub boundary: LabelMap,
    pub heatmaps: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let stack = |get: &dyn Fn(&Sample) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let mut shape = vec![samples.len()];
            shape.extend_from_slice(get(first).shape());
            let data = samples.iter().flat_map(|s| get(s).data().iter().copied()).collect();
            Tensor::new(&shape, data)
        };
        let labels: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
        let boundary: Vec<LabelMap> = samples.iter().map(|s| s.boundary.clone()).collect();
        Ok(Batch {
            images: stack(&|s| &s.image)?,
            labels: LabelMap::stack(&labels)?,
            boundary: LabelMap::stack(&boundary)?,
            heatmaps: stack(&|s| &s.heatmaps)?,
        })
    }
}

/// Forward pass plus total loss with every prediction resized to label
/// resolution.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Network,
    params: &ParamStore,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(BTreeMap<String, Var>, crate::losses::LossBreakdown)> {
    let vars = params.bind(tape);
    let image = tape.constant(batch.images.cast());
    let out = net.forward(tape, &vars, image)?;
    let [_, h, w] = batch.labels.shape();
    let mut up = |v: Var| tape.upsample(v, (h, w), UpsampleMode::Bilinear);
    let inputs = LossInputs {
        base_logits: up(out.base_logits)?,
        fine_logits: up(out.fine_logits)?,
        boundary_logits: out.boundary_logits.map(&mut up).transpose()?,
        skeleton: out.heatmaps.map(&mut up).transpose()?,
    };
    let heatmaps = tape.constant(batch.heatmaps.cast());
    let targets = LossTargets { labels: &batch.labels, boundary: &batch.boundary, heatmaps };
    let breakdown = total_loss(tape, &inputs, &targets, &cfg.loss)?;
    let vars = vars.iter().map(|(k, v)| (k.clone(), *v)).collect();
    Ok((vars, breakdown))
}

/// SGD with momentum and decoupled weight decay:
/// `v ← μ·v + g`, `p ← p − lr·v − lr·wd·p`.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi + lr * wd * *pi;
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`
/// (0 disables). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Deterministic epoch-wise batch sampler with optional horizontal flips.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), cursor: n }
    }

    fn next_batch(&mut self, size: usize, flip: bool) -> Vec<(usize, bool)> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let i = self.order[self.cursor];
                self.cursor += 1;
                (i, flip && self.rng.gen_bool(0.5))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LogRow>,
}

/// Runs `cfg.total_iters` SGD steps from `params`. Every row is passed to
/// `on_row` as soon as it is computed.
pub fn train(
    net: &Network,
    cfg: &TrainConfig,
    samples: &[Sample],
    mut params: ParamStore,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.check_params(&params)?;
    if samples.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut sampler = Sampler::new(samples.len(), cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.total_iters);
    for iter in 0..cfg.total_iters {
        let picks = sampler.next_batch(cfg.batch_size, cfg.flip);
        let flipped: Vec<Sample> = picks.iter().filter(|p| p.1).map(|&(i, _)| samples[i].flipped()).collect();
        let mut flipped_iter = flipped.iter();
        let chosen: Vec<&Sample> =
            picks.iter().map(|&(i, f)| if f { flipped_iter.next().expect("one per flip") } else { &samples[i] }).collect();
        let batch = Batch::from_samples(&chosen)?;

        let mut tape = Tape::<f32>::new();
        let (vars, breakdown) = batch_loss(&mut tape, net, &params, &batch, cfg)?;
        let values = breakdown.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }
        let lr = lr_at(iter, cfg);
        let row = LogRow { iter, lr, loss: values };
        on_row(&row);
        log.push(row);

        let mut all = tape.backward(breakdown.total)?;
        let mut grads: BTreeMap<String, Tensor<f32>> =
            vars.iter().filter_map(|(name, &v)| all.take(v).map(|g| (name.clone(), g))).collect();
        clip_grad_norm(&mut grads, cfg.max_grad_norm);
        sgd.step(&mut params, &grads, lr);
    }
    Ok(TrainOutcome { params, log })
}
