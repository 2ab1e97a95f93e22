use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use zssd_nn::optim::{clip_grad_norm, ema_update, AdamW, StepLr};
use zssd_nn::Act;

use super::condition::{assemble_condition, ConditionBundle};
use super::model::{DenoiserModel, Normalization, NoisePredictor};
use super::schedule::forward_sample;
use crate::field::{Field, Timestamp};
use crate::{Error, Result};

/// Normalized training samples sharing one set of statics.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub statics: Field,
    pub times: Vec<Timestamp>,
    pub samples: Vec<Vec<f32>>,
}

impl TrainingSet {
    pub fn from_fields(fields: &[Field], statics: &Field, norm: &Normalization) -> Result<Self> {
        assemble_condition(statics, Timestamp::new(2000, 1, 1, 0)?)?;
        let mut samples = Vec::with_capacity(fields.len());
        for f in fields {
            if *f.grid != *statics.grid {
                return Err(Error::Grid("training field and statics are on different grids".into()));
            }
            let mut v = f.values.clone();
            if !f.normalized {
                norm.normalize(&mut v);
            }
            samples.push(v.into_iter().map(|x| x as f32).collect());
        }
        Ok(TrainingSet { statics: statics.clone(), times: fields.iter().map(|f| f.time).collect(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn condition(&self, i: usize) -> ConditionBundle {
        assemble_condition(&self.statics, self.times[i]).expect("statics validated on construction")
    }

    pub fn sample(&self, i: usize) -> Vec<f64> {
        self.samples[i].iter().map(|v| *v as f64).collect()
    }
}

/// Mean per-element squared error between injected and predicted noise over
/// a batch, with steps drawn uniformly and standard normal noise.
pub fn training_loss<P: NoisePredictor, G: Rng>(
    model: &P,
    x0: &[Vec<f64>],
    conds: &[ConditionBundle],
    rng: &mut G,
) -> Result<f64> {
    if x0.is_empty() || x0.len() != conds.len() {
        return Err(Error::Shape(format!("{} samples with {} conditions", x0.len(), conds.len())));
    }
    let sched = model.schedule();
    let mut total = 0.0;
    for (x, c) in x0.iter().zip(conds) {
        let t = rng.gen_range(1..=sched.steps());
        let eps: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let xt = forward_sample(x, t, &eps, sched)?;
        let pred = model.predict(&xt, t, c);
        total += eps.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    }
    let loss = total / x0.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite training loss on a batch of {} samples", x0.len())));
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every `lr_every` epochs.
    pub lr_gamma: f64,
    pub lr_every: usize,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    /// Fixed (sample, step, noise) probes used for the validation loss.
    pub val_probes: usize,
    /// Required relative drop of the smoothed validation loss.
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 8,
            lr: 2e-3,
            lr_gamma: 0.9,
            lr_every: 10,
            weight_decay: 1e-4,
            ema_decay: 0.995,
            grad_clip: 1.0,
            val_probes: 64,
            min_improvement: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue training or to sample.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DenoiserModel,
    pub ema: Vec<f32>,
    pub opt: AdamW,
    pub epoch: usize,
    pub initial_val: f64,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: DenoiserModel, weight_decay: f64) -> Self {
        let n = model.params.len();
        TrainState { ema: model.params.clone(), opt: AdamW::new(n, weight_decay), model, epoch: 0, initial_val: f64::NAN, log: Vec::new() }
    }

    /// The averaged weights used for inference.
    pub fn sampling_model(&self) -> DenoiserModel {
        let mut m = self.model.clone();
        m.params = self.ema.clone();
        m
    }

    /// Mean validation loss of the last three epochs.
    pub fn smoothed_val(&self) -> f64 {
        let k = self.log.len().min(3);
        if k == 0 {
            return self.initial_val;
        }
        self.log[self.log.len() - k..].iter().map(|r| r.val_loss).sum::<f64>() / k as f64
    }

    /// Errors unless the smoothed validation loss dropped by `margin` relative.
    pub fn check_improvement(&self, margin: f64) -> Result<()> {
        let (a, b) = (self.initial_val, self.smoothed_val());
        if b < a * (1.0 - margin) {
            Ok(())
        } else {
            Err(Error::Divergence(format!(
                "validation loss went from {a:.4} to {b:.4}, short of the required {:.0}% drop",
                100.0 * margin
            )))
        }
    }
}

struct Probe {
    index: usize,
    step: usize,
    eps: Vec<f64>,
}

fn probes(set: &TrainingSet, count: usize, steps: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1d);
    (0..count)
        .map(|k| Probe {
            index: (k * set.len()) / count.max(1) % set.len(),
            // stratified over the whole step range
            step: 1 + (k * steps) / count.max(1),
            eps: (0..set.samples[0].len()).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect()
}

fn probe_loss(model: &DenoiserModel, set: &TrainingSet, probes: &[Probe]) -> Result<f64> {
    let mut total = 0.0;
    for p in probes {
        let xt = forward_sample(&set.sample(p.index), p.step, &p.eps, &model.schedule)?;
        let pred = model.predict(&xt, p.step, &set.condition(p.index));
        total += p.eps.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / probes.len() as f64)
}

/// Accumulate the gradient of one sample's loss (scaled by `scale`) and
/// return its per-element squared error.
fn sample_gradient(model: &DenoiserModel, set: &TrainingSet, i: usize, t: usize, eps: &[f64], scale: f64, grads: &mut [f32]) -> Result<f64> {
    let x0 = set.sample(i);
    let xt = forward_sample(&x0, t, eps, &model.schedule)?;
    let cond = set.condition(i);
    let (x, ctx) = model.input(&xt, &cond);
    let mut scratch = Vec::new();
    let (y, tape) = model.net.forward(&model.params, &x, t as f64, &ctx, &mut scratch);
    let n = y.data.len() as f64;
    let (skip, out) = model.output_mix(t);
    let mut se = 0.0;
    let dy: Vec<f32> = y
        .data
        .iter()
        .zip(eps)
        .zip(&xt)
        .map(|((f, e), x)| {
            let r = skip * x + out * *f as f64 - e;
            se += r * r;
            (2.0 * r * out * scale / n) as f32
        })
        .collect();
    let dy = Act::from_vec(y.c, y.h, y.w, dy);
    model.net.backward(&model.params, Some(grads), &tape, &dy, false, &mut scratch);
    Ok(se / n)
}

/// Run epochs `state.epoch .. cfg.epochs`, updating `state` in place.
///
/// `on_epoch` sees each finished epoch (for progress output and curves).
pub fn train_prior(
    state: &mut TrainState,
    train: &TrainingSet,
    val: &TrainingSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    let steps = state.model.schedule.steps();
    let val_probes = probes(val, cfg.val_probes.max(1), steps, cfg.seed);
    if state.initial_val.is_nan() {
        state.initial_val = probe_loss(&state.model, val, &val_probes)?;
    }
    let decay = state.model.net.layout().decay_mask();
    let sched = StepLr { lr0: cfg.lr, gamma: cfg.lr_gamma, every: cfg.lr_every };
    let mut grads = vec![0f32; state.model.params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut blowups = 0;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        // a fresh permutation per epoch, so resuming reproduces the same batches
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        order.shuffle(&mut rng);
        let lr = sched.at(epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let t = rng.gen_range(1..=steps);
                let eps: Vec<f64> = (0..train.samples[i].len()).map(|_| rng.sample(StandardNormal)).collect();
                batch_loss += sample_gradient(&state.model, train, i, t, &eps, 1.0 / batch.len() as f64, &mut grads)?;
            }
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("non-finite loss in epoch {epoch}, batch samples {batch:?}")));
            }
            loss_sum += batch_loss;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            state.opt.update(&mut state.model.params, &grads, lr, &decay);
            let n = state.opt.step as f64;
            ema_update(&mut state.ema, &state.model.params, cfg.ema_decay.min((1.0 + n) / (10.0 + n)));
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = probe_loss(&state.model, val, &val_probes)?;
        let rec = EpochRecord { epoch: epoch + 1, lr, train_loss, val_loss };
        state.epoch += 1;
        on_epoch(&rec);
        let first = state.log.first().map_or(train_loss, |r| r.train_loss);
        state.log.push(rec);
        blowups = if train_loss > 10.0 * first { blowups + 1 } else { 0 };
        if blowups >= 3 {
            return Err(Error::Divergence(format!(
                "training loss above ten times its first-epoch value for 3 epochs (epoch {}, loss {train_loss:.4})",
                epoch + 1
            )));
        }
    }
    Ok(())
}
