//! Guided reverse diffusion: steer the prior towards fields whose
//! coarse-grained content matches a coarse input.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::Field;
use crate::grid::{Grid, LatWeights, SeparableOp};
use crate::prior::{ConditionBundle, DifferentiablePredictor, NoiseSchedule, Normalization};
use crate::{Error, Result};

/// Which residual the guidance differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Residual on the fine grid after coarsening and re-projection.
    Unified,
    /// Residual on the coarse grid only.
    Vanilla,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(GuidanceMode::Unified),
            "vanilla" => Ok(GuidanceMode::Vanilla),
            other => Err(Error::Invalid(format!("unknown guidance mode `{other}` (expected unified or vanilla)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub coarse: Arc<Grid>,
    pub fine: Arc<Grid>,
    pub ensemble: usize,
    pub seed: u64,
    pub mode: GuidanceMode,
    pub trace: bool,
    /// Divide the scale by the square root of the current energy.
    pub normalize_scale: bool,
    /// Symmetric clamp on the clean estimate, in normalized units.
    pub clamp: Option<f64>,
    /// Treat the noise prediction as constant when differentiating.
    pub frozen_denoiser: bool,
}

impl SamplerConfig {
    fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps != sched.steps() {
            return Err(Error::Invalid(format!(
                "sampler asks for {} steps, the model was trained with {}",
                self.steps,
                sched.steps()
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Invalid(format!("guidance scale must be finite and non-negative, got {}", self.guidance_scale)));
        }
        if self.ensemble == 0 {
            return Err(Error::Invalid("ensemble size must be at least 1".into()));
        }
        if matches!(self.clamp, Some(c) if c <= 0.0) {
            return Err(Error::Invalid("clamp bound must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub grad_norm: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub records: Vec<TraceRecord>,
}

impl GradientTrace {
    pub fn mean_grad_norm(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.grad_norm).sum::<f64>() / self.records.len() as f64
    }
}

/// Clean-state estimate `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn tweedie_x0(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::Shape(format!("state {} vs noise {}", x_t.len(), eps_hat.len())));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - n * e) / s).collect())
}

/// One reverse step `mu_t + sigma_t z - scale * grad`.
pub fn ancestral_update(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    z: &[f64],
    grad: &[f64],
    scale: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let n = x_t.len();
    if eps_hat.len() != n || z.len() != n || grad.len() != n {
        return Err(Error::Shape("update inputs differ in length".into()));
    }
    let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let ra = sched.alpha(t).sqrt();
    let sig = sched.sigma(t);
    Ok((0..n).map(|i| (x_t[i] - c * eps_hat[i]) / ra + sig * z[i] - scale * grad[i]).collect())
}

/// Latitude-weighted squared distance between a projected state and a target.
///
/// `op` maps the fine grid onto the grid of `target`; `w2` holds squared
/// row weights of that grid.
#[derive(Clone, Debug)]
pub struct Consistency {
    op: SeparableOp,
    target: Vec<f64>,
    w2: Vec<f64>,
}

impl Consistency {
    pub fn new(op: SeparableOp, target: Vec<f64>, weights: &LatWeights) -> Result<Self> {
        let dst = op.dst();
        if !target.len().is_multiple_of(dst.len()) || weights.w.len() != dst.nlat() {
            return Err(Error::Grid("target or weights do not match the operator's output grid".into()));
        }
        Ok(Consistency { op, target, w2: weights.squared() })
    }

    /// Build the energy for raw normalized input `y_raw` on `src`.
    pub fn for_input(mode: GuidanceMode, y_raw: &[f64], src: Arc<Grid>, coarse: Arc<Grid>, fine: Arc<Grid>) -> Result<Self> {
        match mode {
            GuidanceMode::Unified => {
                let input_op = SeparableOp::unified(src, coarse.clone(), fine.clone())?;
                let state_op = SeparableOp::unified(fine.clone(), coarse, fine.clone())?;
                Consistency::new(state_op, input_op.apply_stack(y_raw), &LatWeights::new(&fine))
            }
            GuidanceMode::Vanilla => {
                let input_op = SeparableOp::conservative(src, coarse.clone())?;
                let state_op = SeparableOp::conservative(fine, coarse.clone())?;
                Consistency::new(state_op, input_op.apply_stack(y_raw), &LatWeights::new(&coarse))
            }
        }
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    fn weighted_residual(&self, x0: &[f64]) -> (f64, Vec<f64>) {
        let r: Vec<f64> = self.op.apply_stack(x0).iter().zip(&self.target).map(|(a, b)| a - b).collect();
        let nlon = self.op.dst().nlon();
        let nlat = self.op.dst().nlat();
        let mut e = 0.0;
        let wr: Vec<f64> = r
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let w2 = self.w2[(k / nlon) % nlat];
                e += w2 * v * v;
                w2 * v
            })
            .collect();
        (e, wr)
    }

    pub fn energy(&self, x0: &[f64]) -> f64 {
        self.weighted_residual(x0).0
    }

    /// Energy and its gradient `2 op^T W^2 r` with respect to the state.
    pub fn gradient(&self, x0: &[f64]) -> (f64, Vec<f64>) {
        let (e, wr) = self.weighted_residual(x0);
        let mut g = self.op.adjoint_stack(&wr);
        g.iter_mut().for_each(|v| *v *= 2.0);
        (e, g)
    }
}

/// `|| W (op(x0_hat) - y) ||_F^2` for fields, with `W` broadcast along rows.
pub fn consistency_energy(x0_hat: &Field, y: &Field, w: &LatWeights, op: &SeparableOp) -> Result<f64> {
    let out = op.apply(x0_hat)?;
    if *out.grid != *y.grid || out.values.len() != y.values.len() {
        return Err(Error::Grid("operator output and target are on different grids".into()));
    }
    if w.w.len() != y.grid.nlat() {
        return Err(Error::Grid("weights do not match the target grid".into()));
    }
    let nlon = y.grid.nlon();
    let nlat = y.grid.nlat();
    Ok(out
        .values
        .iter()
        .zip(&y.values)
        .enumerate()
        .map(|(k, (a, b))| {
            let wi = w.w[(k / nlon) % nlat];
            (wi * (a - b)).powi(2)
        })
        .sum())
}

/// Result of differentiating the energy through one denoiser evaluation.
pub struct GuidanceStep {
    pub eps: Vec<f64>,
    pub x0: Vec<f64>,
    pub energy: f64,
    pub grad: Vec<f64>,
}

/// Gradient of the consistency energy of the clean estimate with respect to
/// the noisy state, back-propagated through the noise predictor unless
/// `frozen`.
pub fn guidance_gradient<P: DifferentiablePredictor>(
    model: &P,
    x_t: &[f64],
    t: usize,
    cond: &ConditionBundle,
    energy: &Consistency,
    frozen: bool,
) -> Result<GuidanceStep> {
    let sched = model.schedule();
    let (eps, trace) = model.predict_traced(x_t, t, cond);
    let x0 = tweedie_x0(x_t, &eps, t, sched)?;
    let (e, g) = energy.gradient(&x0);
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let grad = if frozen {
        g.iter().map(|v| v / s).collect()
    } else {
        let jt = model.pullback(&trace, &g);
        g.iter().zip(&jt).map(|(a, b)| (a - n * b) / s).collect()
    };
    Ok(GuidanceStep { eps, x0, energy: e, grad })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64 + 1);
    rng
}

/// Run one guided reverse chain in normalized space.
pub fn sample_chain<P: DifferentiablePredictor>(
    model: &P,
    cond: &ConditionBundle,
    energy: &Consistency,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    len: usize,
) -> Result<(Vec<f64>, GradientTrace)> {
    let sched = model.schedule();
    let mut x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let mut trace = GradientTrace::default();
    let mut x0_final = Vec::new();
    let guided = cfg.guidance_scale > 0.0;
    for t in (1..=sched.steps()).rev() {
        let step = if guided {
            guidance_gradient(model, &x, t, cond, energy, cfg.frozen_denoiser)?
        } else {
            let eps = model.predict(&x, t, cond);
            let x0 = tweedie_x0(&x, &eps, t, sched)?;
            let e = energy.energy(&x0);
            GuidanceStep { eps, x0, energy: e, grad: vec![0.0; len] }
        };
        let gnorm = norm(&step.grad);
        if !gnorm.is_finite() || !step.energy.is_finite() {
            let history: Vec<String> = trace.records.iter().rev().take(5).map(|r| format!("t={} |G|={:.3e}", r.t, r.grad_norm)).collect();
            return Err(Error::Divergence(format!("non-finite guidance at step {t}; recent: {}", history.join(", "))));
        }
        if cfg.trace {
            trace.records.push(TraceRecord { t, grad_norm: gnorm, energy: step.energy });
        }
        let scale = if cfg.normalize_scale && step.energy > 0.0 {
            cfg.guidance_scale / step.energy.sqrt()
        } else {
            cfg.guidance_scale
        };
        let z: Vec<f64> = if t > 1 { (0..len).map(|_| rng.sample(StandardNormal)).collect() } else { vec![0.0; len] };
        x = match cfg.clamp {
            None => {
                x0_final = step.x0;
                ancestral_update(&x, &step.eps, t, &z, &step.grad, scale, sched)?
            }
            Some(c) => {
                let x0: Vec<f64> = step.x0.iter().map(|v| v.clamp(-c, c)).collect();
                let prev = if t > 1 { sched.alpha_bar(t - 1) } else { 1.0 };
                let ab = sched.alpha_bar(t);
                let c1 = prev.sqrt() * sched.beta(t) / (1.0 - ab);
                let c2 = sched.alpha(t).sqrt() * (1.0 - prev) / (1.0 - ab);
                let sig = sched.sigma(t);
                let next = (0..len).map(|i| c1 * x0[i] + c2 * x[i] + sig * z[i] - scale * step.grad[i]).collect();
                x0_final = x0;
                next
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite state after step {t}")));
        }
    }
    Ok((x0_final, trace))
}

/// Posterior ensemble for one coarse input in physical units.
///
/// Members run on independent random streams derived from `cfg.seed`; the
/// output is in physical units on the fine grid.
pub fn sample_posterior<P: DifferentiablePredictor + Sync>(
    y_raw: &Field,
    cond: &ConditionBundle,
    model: &P,
    norm: &Normalization,
    vars: &[String],
    cfg: &SamplerConfig,
) -> Result<(Vec<Field>, Vec<GradientTrace>)> {
    cfg.validate(model.schedule())?;
    if y_raw.vars != vars {
        return Err(Error::Data(format!("input variables {:?} do not match the model's {:?}", y_raw.vars, vars)));
    }
    if *cond.statics.grid != *cfg.fine {
        return Err(Error::Grid("statics are not on the fine grid".into()));
    }
    if y_raw.grid.nlat() > cfg.fine.nlat() || y_raw.grid.nlon() > cfg.fine.nlon() {
        return Err(Error::Grid("input is finer than the fine grid".into()));
    }
    let mut y = y_raw.values.clone();
    if !y_raw.normalized {
        norm.normalize(&mut y);
    }
    let energy = Consistency::for_input(cfg.mode, &y, y_raw.grid.clone(), cfg.coarse.clone(), cfg.fine.clone())?;
    let len = vars.len() * cfg.fine.len();
    let runs: Vec<Result<(Vec<f64>, GradientTrace)>> = (0..cfg.ensemble)
        .into_par_iter()
        .map(|m| sample_chain(model, cond, &energy, cfg, &mut member_rng(cfg.seed, m), len))
        .collect();
    let mut fields = Vec::with_capacity(cfg.ensemble);
    let mut traces = Vec::with_capacity(cfg.ensemble);
    for r in runs {
        let (mut x, tr) = r?;
        norm.denormalize(&mut x);
        let mut f = y_raw.with_values(cfg.fine.clone(), x)?;
        f.normalized = false;
        fields.push(f);
        traces.push(tr);
    }
    Ok((fields, traces))
}

/// Guided sampling with the unified fine-grid residual.
pub fn zssd_sample<P: DifferentiablePredictor + Sync>(
    y_raw: &Field,
    cond: &ConditionBundle,
    model: &P,
    norm: &Normalization,
    vars: &[String],
    cfg: &SamplerConfig,
) -> Result<(Vec<Field>, Vec<GradientTrace>)> {
    let cfg = SamplerConfig { mode: GuidanceMode::Unified, ..cfg.clone() };
    sample_posterior(y_raw, cond, model, norm, vars, &cfg)
}

/// Guided sampling with the residual taken on the coarse grid only.
pub fn vanilla_dps_sample<P: DifferentiablePredictor + Sync>(
    y_raw: &Field,
    cond: &ConditionBundle,
    model: &P,
    norm: &Normalization,
    vars: &[String],
    cfg: &SamplerConfig,
) -> Result<(Vec<Field>, Vec<GradientTrace>)> {
    let cfg = SamplerConfig { mode: GuidanceMode::Vanilla, ..cfg.clone() };
    sample_posterior(y_raw, cond, model, norm, vars, &cfg)
}
