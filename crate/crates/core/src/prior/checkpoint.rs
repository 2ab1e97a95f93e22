use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use zssd_nn::optim::AdamW;
use zssd_nn::UNet;

use super::model::{Denoiser, DenoiserModel, Normalization, PriorConfig};
use super::schedule::NoiseSchedule;
use super::train::{EpochRecord, TrainState};
use crate::container::Container;
use crate::grid::Grid;
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    prior: PriorConfig,
    schedule: NoiseSchedule,
    grid: Grid,
    vars: Vec<String>,
    units: Vec<String>,
    norm: Normalization,
    epoch: usize,
    adam_step: u64,
    weight_decay: f64,
    initial_val: f64,
    log: Vec<EpochRecord>,
    config_hash: String,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Serialize the full training state, tagged with the run-config hash.
pub fn save_checkpoint(state: &TrainState, prior: &PriorConfig, config_hash: &str, path: &Path) -> Result<String> {
    let m = &state.model;
    let meta = Meta {
        prior: prior.clone(),
        schedule: m.schedule.clone(),
        grid: (*m.grid).clone(),
        vars: m.vars.clone(),
        units: m.units.clone(),
        norm: m.norm.clone(),
        epoch: state.epoch,
        adam_step: state.opt.step,
        weight_decay: state.opt.weight_decay,
        initial_val: state.initial_val,
        log: state.log.clone(),
        config_hash: config_hash.to_string(),
    };
    let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serializes"));
    c.push("params", to_f64(&m.params));
    c.push("ema", to_f64(&state.ema));
    c.push("adam_m", to_f64(&state.opt.m));
    c.push("adam_v", to_f64(&state.opt.v));
    c.write(path)?;
    Ok(c.id())
}

/// A loaded checkpoint: the training state plus provenance.
pub struct Checkpoint {
    pub state: TrainState,
    pub prior: PriorConfig,
    pub config_hash: String,
    pub id: String,
}

impl Checkpoint {
    pub fn sampling_model(&self) -> DenoiserModel {
        self.state.sampling_model()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path, CHECKPOINT_KIND)?;
    let meta: Meta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    let net = UNet::new(meta.prior.unet(meta.vars.len()));
    let params = c.section("params")?;
    if params.len() != net.num_params() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, architecture needs {}",
            params.len(),
            net.num_params()
        )));
    }
    let model = Denoiser {
        net,
        params: to_f32(params),
        schedule: meta.schedule,
        norm: meta.norm,
        vars: meta.vars,
        units: meta.units,
        grid: Arc::new(meta.grid),
    };
    let mut opt = AdamW::new(params.len(), meta.weight_decay);
    opt.step = meta.adam_step;
    opt.m = to_f32(c.section("adam_m")?);
    opt.v = to_f32(c.section("adam_v")?);
    let ema = to_f32(c.section("ema")?);
    if ema.len() != params.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(Error::Data("checkpoint sections have inconsistent lengths".into()));
    }
    let state = TrainState { model, ema, opt, epoch: meta.epoch, initial_val: meta.initial_val, log: meta.log };
    Ok(Checkpoint { state, prior: meta.prior, config_hash: meta.config_hash, id: c.id() })
}
