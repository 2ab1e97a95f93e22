use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zssd_nn::{Act, Real, Tape, UNet, UNetConfig};

use super::condition::{ConditionBundle, CONTEXT_DIM, CONTEXT_TOKENS, STATIC_VARS};
use super::schedule::NoiseSchedule;
use crate::grid::Grid;
use crate::{Error, Result};

/// Anything that predicts the injected noise from a noisy normalized state.
pub trait NoisePredictor {
    fn schedule(&self) -> &NoiseSchedule;
    fn predict(&self, x_t: &[f64], t: usize, cond: &ConditionBundle) -> Vec<f64>;
}

/// A noise predictor that can also pull a cotangent back to its input.
pub trait DifferentiablePredictor: NoisePredictor {
    type Trace;
    fn predict_traced(&self, x_t: &[f64], t: usize, cond: &ConditionBundle) -> (Vec<f64>, Self::Trace);
    /// `J^T v`, with `J` the Jacobian of the prediction with respect to `x_t`.
    fn pullback(&self, trace: &Self::Trace, v: &[f64]) -> Vec<f64>;
}

/// Per-variable z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics of `samples`, each a `C x plane` stack, pooled over space and time.
    pub fn fit<'a>(samples: impl Iterator<Item = &'a [f64]>, channels: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for s in samples {
            let plane = s.len() / channels;
            for c in 0..channels {
                for v in &s[c * plane..(c + 1) * plane] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += plane;
        }
        if n == 0 {
            return Err(Error::Data("cannot fit normalization on an empty set".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt()).collect();
        if std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::Data("a variable has zero variance".into()));
        }
        Ok(Normalization { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &mut [f64]) {
        let plane = x.len() / self.channels();
        for (c, chunk) in x.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
    }

    pub fn denormalize(&self, x: &mut [f64]) {
        let plane = x.len() / self.channels();
        for (c, chunk) in x.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.mean[c] + self.std[c] * *v);
        }
    }
}

/// Architecture and schedule of the prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub time_dim: usize,
    pub attention: bool,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            widths: vec![8, 16, 32, 64],
            res_blocks: 1,
            time_dim: 32,
            attention: true,
            steps: 50,
            beta_start: 2e-3,
            beta_end: 0.4,
        }
    }
}

impl PriorConfig {
    pub fn unet(&self, field_channels: usize) -> UNetConfig {
        UNetConfig {
            field_channels,
            cond_channels: STATIC_VARS.len(),
            widths: self.widths.clone(),
            res_blocks: self.res_blocks,
            time_dim: self.time_dim,
            context_tokens: CONTEXT_TOKENS,
            context_dim: CONTEXT_DIM,
            attention: self.attention,
            circular_lon: true,
            // keeps embedding frequencies comparable across step counts
            time_scale: 1000.0 / self.steps as f64,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// The trained noise-prediction network with everything needed to use it
/// on physical fields.
#[derive(Clone, Debug)]
pub struct Denoiser<R: Real = f32> {
    pub net: UNet,
    pub params: Vec<R>,
    pub schedule: NoiseSchedule,
    pub norm: Normalization,
    pub vars: Vec<String>,
    pub units: Vec<String>,
    pub grid: Arc<Grid>,
}

/// The production model runs in single precision.
pub type DenoiserModel = Denoiser<f32>;

pub struct NetTrace<R: Real> {
    tape: Tape<R>,
    t: usize,
}

impl<R: Real> Denoiser<R> {
    /// Freshly initialized network for `vars` on `grid`.
    pub fn init(
        config: &PriorConfig,
        grid: Arc<Grid>,
        vars: Vec<String>,
        units: Vec<String>,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        if config.widths.is_empty() || config.res_blocks == 0 {
            return Err(Error::Invalid("network needs at least one level and one block".into()));
        }
        if vars.len() != norm.channels() || vars.len() != units.len() {
            return Err(Error::Shape("variables, units and normalization disagree".into()));
        }
        let ucfg = config.unet(vars.len());
        let m = ucfg.spatial_multiple();
        if !grid.nlat().is_multiple_of(m) || !grid.nlon().is_multiple_of(m) {
            return Err(Error::Grid(format!("grid {:?} is not divisible by {m} for a {}-level network", grid.shape(), config.widths.len())));
        }
        let net = UNet::new(ucfg);
        let params = net.layout().init(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Denoiser { net, params, schedule: config.schedule()?, norm, vars, units, grid })
    }

    pub fn channels(&self) -> usize {
        self.vars.len()
    }

    /// Same model in another precision.
    pub fn cast<S: Real>(&self) -> Denoiser<S> {
        Denoiser {
            net: self.net.clone(),
            params: self.params.iter().map(|p| S::of(p.f64())).collect(),
            schedule: self.schedule.clone(),
            norm: self.norm.clone(),
            vars: self.vars.clone(),
            units: self.units.clone(),
            grid: self.grid.clone(),
        }
    }

    pub(crate) fn input(&self, x_t: &[f64], cond: &ConditionBundle) -> (Act<R>, Vec<R>) {
        let (h, w) = self.grid.shape();
        let n = h * w;
        assert_eq!(x_t.len(), self.channels() * n, "state does not match the model grid");
        assert_eq!(cond.statics.values.len(), STATIC_VARS.len() * n, "statics do not match the model grid");
        let data = x_t.iter().chain(&cond.statics.values).map(|v| R::of(*v)).collect();
        let ctx = cond.context_tokens().iter().map(|v| R::of(*v)).collect();
        (Act::from_vec(self.channels() + STATIC_VARS.len(), h, w, data), ctx)
    }

    /// Coefficients `(skip, out)` of the noise estimate
    /// `skip * x_t + out * net(x_t)`.
    ///
    /// At high noise the estimate is dominated by the exact `x_t` term, so
    /// errors in the network's input Jacobian are not amplified when the
    /// clean estimate divides by `sqrt(abar_t)`.
    pub fn output_mix(&self, t: usize) -> (f64, f64) {
        let ab = self.schedule.alpha_bar(t);
        ((1.0 - ab).sqrt(), ab.sqrt())
    }

    pub fn forward(&self, x_t: &[f64], t: usize, cond: &ConditionBundle) -> (Vec<f64>, Tape<R>) {
        let (x, ctx) = self.input(x_t, cond);
        let (y, tape) = self.net.forward(&self.params, &x, t as f64, &ctx, &mut Vec::new());
        let (skip, out) = self.output_mix(t);
        (y.data.iter().zip(x_t).map(|(f, x)| skip * x + out * f.f64()).collect(), tape)
    }
}

impl<R: Real> NoisePredictor for Denoiser<R> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, x_t: &[f64], t: usize, cond: &ConditionBundle) -> Vec<f64> {
        self.forward(x_t, t, cond).0
    }
}

impl<R: Real> DifferentiablePredictor for Denoiser<R> {
    type Trace = NetTrace<R>;

    fn predict_traced(&self, x_t: &[f64], t: usize, cond: &ConditionBundle) -> (Vec<f64>, NetTrace<R>) {
        let (y, tape) = self.forward(x_t, t, cond);
        (y, NetTrace { tape, t })
    }

    fn pullback(&self, trace: &NetTrace<R>, v: &[f64]) -> Vec<f64> {
        let (h, w) = self.grid.shape();
        let (skip, out) = self.output_mix(trace.t);
        let dy = Act::from_vec(self.channels(), h, w, v.iter().map(|x| R::of(out * *x)).collect());
        let dx = self
            .net
            .backward(&self.params, None, &trace.tape, &dy, true, &mut Vec::new())
            .expect("input gradient requested");
        // statics are not part of the state
        dx.data[..v.len()].iter().zip(v).map(|(d, g)| d.f64() + skip * g).collect()
    }
}
