//! End-to-end runs shared by the command-line tool and the acceptance
//! suite: dataset assembly, prior training, the paired and unpaired
//! downscaling tasks, baselines and ablation sweeps.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{bcsd_downscale, bilinear_downscale, climatology, QuantileMap};
use crate::config::{DataConfig, RunConfig, SamplerSection};
use crate::field::Field;
use crate::grid::{Grid, SeparableOp};
use crate::io::{read_field, read_sequence, write_field, write_sequence, GcmEntry, Manifest, MANIFEST_VERSION};
use crate::metrics::{
    coarse_consistency, log_spectral_distance, mean_zonal_psd, terrain_correlation, MetricReport, RunMeta, TerrainCorrelation,
    TraceSummary,
};
use crate::prior::{assemble_condition, train_prior, Denoiser, DenoiserModel, EpochRecord, Normalization, TrainState, TrainingSet};
use crate::sampler::{sample_posterior, GradientTrace, GuidanceMode};
use crate::synth::{make_splits, normalize_statics, pseudo_gcm, spectral_truth, synth_terrain, Splits};
use crate::{Error, Result};

/// One pseudo climate model: a training-period series used only to fit
/// bias corrections, and the test-period series to downscale.
#[derive(Clone, Debug)]
pub struct GcmSeries {
    pub name: String,
    pub train: Vec<Field>,
    pub test: Vec<Field>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// Raw elevation (m) and land-sea mask.
    pub terrain: Field,
    pub truth: Vec<Field>,
    pub splits: Splits,
    pub gcms: Vec<GcmSeries>,
    pub data_hash: String,
}

impl Dataset {
    pub fn synthesize(cfg: &DataConfig) -> Result<Self> {
        let t = &cfg.truth;
        let terrain = synth_terrain(&t.grid()?, t.terrain_max_wavenumber, t.flat_terrain, t.seed)?;
        let truth = spectral_truth(t, &terrain)?;
        let times: Vec<_> = truth.iter().map(|f| f.time).collect();
        let splits = make_splits(&times)?;
        let gcms = cfg
            .gcms
            .iter()
            .map(|g| {
                Ok(GcmSeries {
                    name: g.name.clone(),
                    train: pseudo_gcm(&truth[splits.train.clone()], g)?,
                    test: pseudo_gcm(&truth[splits.test.clone()], g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { terrain, truth, splits, gcms, data_hash: crate::config::content_hash(cfg) })
    }

    pub fn train(&self) -> &[Field] {
        &self.truth[self.splits.train.clone()]
    }

    pub fn val(&self) -> &[Field] {
        &self.truth[self.splits.val.clone()]
    }

    pub fn test(&self) -> &[Field] {
        &self.truth[self.splits.test.clone()]
    }

    pub fn fine(&self) -> &Arc<Grid> {
        &self.terrain.grid
    }

    pub fn vars(&self) -> &[String] {
        &self.truth[0].vars
    }

    pub fn statics(&self) -> Result<Field> {
        normalize_statics(&self.terrain)
    }

    pub fn gcm(&self, name: &str) -> Result<&GcmSeries> {
        self.gcms.iter().find(|g| g.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.gcms.iter().map(|g| g.name.as_str()).collect();
            Error::Data(format!("no climate model `{name}` in the dataset (have {known:?})"))
        })
    }

    /// Normalization fitted on the training split.
    pub fn normalization(&self) -> Result<Normalization> {
        Normalization::fit(self.train().iter().map(|f| f.values.as_slice()), self.vars().len())
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_field(&dir.join("terrain.f32"), &self.terrain)?;
        let truth_dir = dir.join("truth");
        let split = |r: std::ops::Range<usize>, p: &str| -> Result<Vec<String>> {
            Ok(write_sequence(&truth_dir, p, &self.truth[r])?.into_iter().map(|n| format!("truth/{n}")).collect())
        };
        let train = split(self.splits.train.clone(), "train")?;
        let val = split(self.splits.val.clone(), "val")?;
        let test = split(self.splits.test.clone(), "test")?;
        let mut gcms = Vec::new();
        for g in &self.gcms {
            let sub = dir.join("gcm").join(&g.name);
            let rel = |names: Vec<String>| names.into_iter().map(|n| format!("gcm/{}/{n}", g.name)).collect();
            gcms.push(GcmEntry {
                name: g.name.clone(),
                train: rel(write_sequence(&sub, "train", &g.train)?),
                test: rel(write_sequence(&sub, "test", &g.test)?),
            });
        }
        let m = Manifest {
            schema_version: MANIFEST_VERSION,
            data_hash: self.data_hash.clone(),
            vars: self.vars().to_vec(),
            terrain: "terrain.f32".into(),
            train,
            val,
            test,
            gcms,
        };
        m.save(dir)?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::load(dir)?;
        let terrain = read_field(&dir.join(&m.terrain), None)?;
        let mut truth = read_sequence(dir, &m.train)?;
        let n_train = truth.len();
        truth.extend(read_sequence(dir, &m.val)?);
        let n_val = truth.len() - n_train;
        truth.extend(read_sequence(dir, &m.test)?);
        if truth.is_empty() || truth.iter().any(|f| *f.grid != *terrain.grid || f.vars != m.vars) {
            return Err(Error::Data(format!("{}: truth files disagree with the terrain grid or variables", dir.display())));
        }
        let splits = Splits { train: 0..n_train, val: n_train..n_train + n_val, test: n_train + n_val..truth.len() };
        let gcms = m
            .gcms
            .iter()
            .map(|g| Ok(GcmSeries { name: g.name.clone(), train: read_sequence(dir, &g.train)?, test: read_sequence(dir, &g.test)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { terrain, truth, splits, gcms, data_hash: m.data_hash })
    }
}

/// Fresh prior for `ds` following `cfg.prior`.
pub fn init_training(ds: &Dataset, cfg: &RunConfig) -> Result<TrainState> {
    let norm = ds.normalization()?;
    let units = ds.truth[0].units.clone();
    let model = Denoiser::init(&cfg.prior.model, ds.fine().clone(), ds.vars().to_vec(), units, norm, cfg.prior.training.seed)?;
    Ok(TrainState::new(model, cfg.prior.training.weight_decay))
}

/// Continue training `state` on the dataset's training split.
pub fn train_on(ds: &Dataset, cfg: &RunConfig, state: &mut TrainState, on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
    let statics = ds.statics()?;
    let norm = state.model.norm.clone();
    let train = TrainingSet::from_fields(ds.train(), &statics, &norm)?;
    let val = TrainingSet::from_fields(ds.val(), &statics, &norm)?;
    train_prior(state, &train, &val, &cfg.prior.training, on_epoch)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Conservative coarsening of truth by an integer factor.
    Paired { factor: usize },
    /// A pseudo climate model's test-period series.
    Unpaired { gcm: String },
}

impl Task {
    pub fn label(&self) -> String {
        match self {
            Task::Paired { factor } => format!("paired_x{factor}"),
            Task::Unpaired { gcm } => format!("unpaired_{gcm}"),
        }
    }
}

/// Inputs, references and baseline fitting material for one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub label: String,
    /// Coarse inputs on their native grid, one per evaluated step.
    pub inputs: Vec<Field>,
    pub truth: Vec<Field>,
    /// The shared coarse grid.
    pub coarse: Arc<Grid>,
    pub qmap_source: Vec<Field>,
    pub qmap_reference: Vec<Field>,
    pub climatology: Field,
}

/// Every `stride`-th test step.
pub fn eval_indices(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride.max(1)).collect()
}

fn coarsen_all(seq: &[Field], target: &Arc<Grid>) -> Result<Vec<Field>> {
    let Some(first) = seq.first() else { return Ok(Vec::new()) };
    let op = SeparableOp::conservative(first.grid.clone(), target.clone())?;
    seq.iter().map(|f| op.apply(f)).collect()
}

/// Assemble a task. Paired tasks use the coarsened grid itself as the shared
/// coarse grid; unpaired tasks use `coarse`.
pub fn task_data(ds: &Dataset, task: &Task, coarse: &Arc<Grid>, stride: usize) -> Result<TaskData> {
    let test = ds.test();
    let idx = eval_indices(test.len(), stride);
    let truth: Vec<Field> = idx.iter().map(|&i| test[i].clone()).collect();
    let (inputs, coarse, source_train) = match task {
        Task::Paired { factor } => {
            let (nlat, nlon) = ds.fine().shape();
            if *factor == 0 || nlat % factor != 0 || nlon % factor != 0 {
                return Err(Error::Invalid(format!("factor {factor} does not divide the {nlat}x{nlon} grid")));
            }
            let g = Arc::new(Grid::equiangular(nlat / factor, nlon / factor)?);
            (coarsen_all(&truth, &g)?, g, ds.train().to_vec())
        }
        Task::Unpaired { gcm } => {
            let s = ds.gcm(gcm)?;
            if s.test.len() != test.len() {
                return Err(Error::Data(format!("`{gcm}` has {} test steps, truth has {}", s.test.len(), test.len())));
            }
            (idx.iter().map(|&i| s.test[i].clone()).collect(), coarse.clone(), s.train.clone())
        }
    };
    Ok(TaskData {
        label: task.label(),
        qmap_source: coarsen_all(&source_train, &coarse)?,
        qmap_reference: coarsen_all(ds.train(), &coarse)?,
        climatology: climatology(ds.train())?,
        inputs,
        truth,
        coarse,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Zssd,
    VanillaDps,
    Bilinear,
    Bcsd,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Zssd => "zssd",
            Method::VanillaDps => "vanilla_dps",
            Method::Bilinear => "bilinear",
            Method::Bcsd => "bcsd",
        }
    }
}

/// Outputs of one method on one task: `members[m][step]`.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: Method,
    pub members: Vec<Vec<Field>>,
    pub traces: Vec<GradientTrace>,
    /// Mean coarse relative RMSE against the input, for guided methods.
    pub consistency: Option<f64>,
}

/// Everything the guided samplers need.
pub struct GuidedSetup<'a> {
    pub model: &'a DenoiserModel,
    pub statics: &'a Field,
    pub sampler: &'a SamplerSection,
    /// Replace the statics by zeros at inference.
    pub drop_statics: bool,
    pub trace: bool,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_add((step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub fn run_guided(task: &TaskData, setup: &GuidedSetup, mode: GuidanceMode) -> Result<MethodRun> {
    let model = setup.model;
    let e = setup.sampler.ensemble;
    let mut members: Vec<Vec<Field>> = vec![Vec::with_capacity(task.inputs.len()); e];
    let mut traces = Vec::new();
    let mut consistency = 0.0;
    for (i, y) in task.inputs.iter().enumerate() {
        let cfg = SamplerSection { seed: step_seed(setup.sampler.seed, i), ..setup.sampler.clone() }.build(
            model.schedule.steps(),
            task.coarse.clone(),
            model.grid.clone(),
            setup.trace,
        );
        let mut cond = assemble_condition(setup.statics, y.time)?;
        if setup.drop_statics {
            cond = cond.without_statics();
        }
        let cfg = crate::sampler::SamplerConfig { mode, ..cfg };
        let (fields, tr) = sample_posterior(y, &cond, model, &model.norm, &model.vars, &cfg)?;
        for (m, f) in fields.into_iter().enumerate() {
            consistency += coarse_consistency(&f, y, &task.coarse, &model.norm)?;
            members[m].push(f);
        }
        traces.extend(tr);
    }
    let method = if mode == GuidanceMode::Unified { Method::Zssd } else { Method::VanillaDps };
    let consistency = Some(consistency / (e * task.inputs.len()).max(1) as f64);
    Ok(MethodRun { method, members, traces, consistency })
}

pub fn run_baseline(task: &TaskData, method: Method, knots: usize) -> Result<MethodRun> {
    let fine = task.climatology.grid.clone();
    let outputs = match method {
        Method::Bilinear => task.inputs.iter().map(|y| bilinear_downscale(y, &fine)).collect::<Result<Vec<_>>>()?,
        Method::Bcsd => {
            let qmap = QuantileMap::fit(&task.qmap_source, &task.qmap_reference, knots)?;
            bcsd_downscale(&task.inputs, &qmap, Some(&task.climatology), &fine)?
        }
        m => return Err(Error::Invalid(format!("{} is not a baseline", m.name()))),
    };
    Ok(MethodRun { method, members: vec![outputs], traces: Vec::new(), consistency: None })
}

/// Scores averaged over ensemble members; spectra averaged, bias pooled.
pub fn evaluate_run(run: &MethodRun, truth: &[Field], meta: RunMeta, percentile: f64) -> Result<MetricReport> {
    let reports = run
        .members
        .iter()
        .map(|m| MetricReport::evaluate(meta.clone(), m, truth, percentile))
        .collect::<Result<Vec<_>>>()?;
    let mut report = reports[0].clone();
    let k = reports.len() as f64;
    for (v, s) in report.scores.iter_mut().enumerate() {
        s.mae = reports.iter().map(|r| r.scores[v].mae).sum::<f64>() / k;
        s.rmse = reports.iter().map(|r| r.scores[v].rmse).sum::<f64>() / k;
    }
    for (v, p) in report.psd.iter_mut().enumerate() {
        for (w, x) in p.iter_mut().enumerate() {
            *x = reports.iter().map(|r| r.psd[v][w]).sum::<f64>() / k;
        }
    }
    let pooled: Vec<Field> = run.members.iter().flatten().cloned().collect();
    let refs: Vec<Field> = run.members.iter().flat_map(|_| truth.iter().cloned()).collect();
    report.bias = crate::metrics::bias_distribution(&pooled, &refs)?;
    report.trace = TraceSummary::from_traces(&run.traces);
    report.coarse_consistency = run.consistency;
    report.check()?;
    Ok(report)
}

/// Mean over variables of `MAE_v / sd_v`, with `sd` the training spread.
pub fn standardized_mae(report: &MetricReport, norm: &Normalization) -> f64 {
    report.scaled_mae(&norm.std)
}

/// Mean over variables of the log-spectral distance to `truth` in `band`.
pub fn spectral_distance(psd: &[Vec<f64>], truth: &[Vec<f64>], band: std::ops::Range<usize>) -> Result<f64> {
    let mut s = 0.0;
    for (a, b) in psd.iter().zip(truth) {
        s += log_spectral_distance(a, b, band.clone())?;
    }
    Ok(s / psd.len() as f64)
}

/// Spectra of the raw inputs after bilinear interpolation to the fine grid.
pub fn input_spectra(task: &TaskData) -> Result<Vec<Vec<f64>>> {
    let fine = task.climatology.grid.clone();
    let up = task.inputs.iter().map(|y| bilinear_downscale(y, &fine)).collect::<Result<Vec<_>>>()?;
    mean_zonal_psd(&up)
}

/// Terrain correlation of each member's outputs, averaged.
pub fn run_terrain_correlation(run: &MethodRun, terrain: &Field) -> Result<TerrainCorrelation> {
    let mut r = 0.0;
    let mut degenerate = false;
    for m in &run.members {
        let c = terrain_correlation(m, terrain.channel(0), terrain.channel(1))?;
        r += c.r;
        degenerate |= c.degenerate;
    }
    Ok(TerrainCorrelation { r: r / run.members.len() as f64, degenerate })
}

/// Standardized 99th-percentile error of ZSSD for each guidance scale on
/// the validation year of a paired task.
pub fn zeta_sweep(ds: &Dataset, cfg: &RunConfig, model: &DenoiserModel, factor: usize, stride: usize) -> Result<Vec<(f64, f64, f64)>> {
    let statics = ds.statics()?;
    let val = ds.val();
    let idx = eval_indices(val.len(), stride);
    let truth: Vec<Field> = idx.iter().map(|&i| val[i].clone()).collect();
    let (nlat, nlon) = ds.fine().shape();
    let coarse = Arc::new(Grid::equiangular(nlat / factor, nlon / factor)?);
    let task = TaskData {
        label: format!("val_x{factor}"),
        inputs: coarsen_all(&truth, &coarse)?,
        truth: truth.clone(),
        coarse,
        qmap_source: Vec::new(),
        qmap_reference: Vec::new(),
        climatology: climatology(ds.train())?,
    };
    cfg.eval
        .zeta_grid
        .iter()
        .map(|&z| {
            let sampler = SamplerSection { guidance_scale: z, ..cfg.sampler.clone() };
            let setup = GuidedSetup { model, statics: &statics, sampler: &sampler, drop_statics: false, trace: false };
            let run = run_guided(&task, &setup, GuidanceMode::Unified)?;
            let report = evaluate_run(&run, &truth, RunMeta::default(), cfg.eval.percentile)?;
            Ok((z, standardized_mae(&report, &model.norm), run.consistency.unwrap_or(f64::NAN)))
        })
        .collect()
}
