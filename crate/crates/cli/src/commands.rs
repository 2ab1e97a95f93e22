use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use zssd::config::RunConfig;
use zssd::experiments::{
    eval_indices, evaluate_run, init_training, run_baseline, run_guided, run_terrain_correlation, standardized_mae, task_data, train_on,
    Dataset, GuidedSetup, Method, MethodRun, Task,
};
use zssd::io::{read_json, read_sequence, write_json, write_sequence, Manifest};
use zssd::metrics::{MetricReport, RunMeta};
use zssd::prior::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use zssd::sampler::{GradientTrace, GuidanceMode};

use crate::lock::DirLock;
use crate::Global;

const CONFIG_FILE: &str = "config.json";
const RUN_FILE: &str = "run.json";

/// The configuration in force: `--config`, else the one stored with the
/// dataset, else defaults; then command-line overrides.
fn resolve_config(g: &Global, data: Option<&Path>) -> Result<RunConfig> {
    let stored = data.map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists());
    let mut cfg = match g.config.as_deref().or(stored.as_deref()) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.data.truth.seed = s;
        for (i, gcm) in cfg.data.gcms.iter_mut().enumerate() {
            gcm.seed = s.wrapping_add(1000 + i as u64);
        }
        cfg.prior.training.seed = s;
        cfg.sampler.seed = s;
    }
    if let Some(m) = g.mode {
        cfg.sampler.mode = m;
    }
    if let Some(z) = g.zeta {
        cfg.sampler.guidance_scale = z;
    }
    if let Some(e) = g.ensemble {
        cfg.sampler.ensemble = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let manifest = Manifest::load(dir)?;
    if manifest.data_hash != cfg.data_hash() {
        return Err(zssd::Error::Data(format!(
            "dataset {} was generated with data hash {}, the configuration has {}",
            dir.display(),
            manifest.data_hash,
            cfg.data_hash()
        ))
        .into());
    }
    Ok(Dataset::load(dir)?)
}

pub fn synth(g: &Global, years: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(g, None)?;
    if let Some(y) = years {
        cfg.data.truth.years = y;
        cfg.validate()?;
    }
    let _lock = DirLock::acquire(&g.out, g.force)?;
    let ds = Dataset::synthesize(&cfg.data)?;
    let m = ds.save(&g.out)?;
    fs::write(g.out.join(CONFIG_FILE), cfg.to_json()).with_context(|| format!("writing {}", g.out.display()))?;
    println!(
        "wrote {} train / {} val / {} test steps and {} climate models to {} (data hash {})",
        m.train.len(),
        m.val.len(),
        m.test.len(),
        m.gcms.len(),
        g.out.display(),
        m.data_hash
    );
    Ok(())
}

pub fn train(g: &Global, data: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(g, Some(data))?;
    let ds = load_dataset(data, &cfg)?;
    let _lock = DirLock::acquire(&g.out, g.force || resume.is_some_and(|r| r.starts_with(&g.out)))?;
    let mut state: TrainState = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.config_hash != cfg.prior_hash() {
                bail!(zssd::Error::Data(format!(
                    "checkpoint {} was trained under prior hash {}, the configuration has {}",
                    p.display(),
                    ck.config_hash,
                    cfg.prior_hash()
                )));
            }
            ck.state
        }
        None => init_training(&ds, &cfg)?,
    };
    let result = train_on(&ds, &cfg, &mut state, |r| {
        println!("epoch {:>3}  lr {:.2e}  train {:.5}  val {:.5}", r.epoch, r.lr, r.train_loss, r.val_loss);
    });
    let ckpt = g.out.join("checkpoint.bin");
    let id = save_checkpoint(&state, &cfg.prior.model, &cfg.prior_hash(), &ckpt)?;
    let mut curve = String::from("epoch,lr,train_loss,val_loss\n");
    for r in &state.log {
        let _ = writeln!(curve, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss);
    }
    fs::write(g.out.join("training_curve.csv"), curve)?;
    fs::write(g.out.join(CONFIG_FILE), cfg.to_json())?;
    println!("checkpoint {} ({id})", ckpt.display());
    result?;
    state.check_improvement(cfg.prior.training.min_improvement)?;
    Ok(())
}

/// Provenance of a `sample` output directory.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    label: String,
    method: Method,
    task: Task,
    config_hash: String,
    data_hash: String,
    checkpoint_id: String,
    seed: u64,
    /// Test-split indices of the evaluated steps.
    steps: Vec<usize>,
    members: Vec<Vec<String>>,
    consistency: Option<f64>,
}

fn task_from_flags(g: &Global) -> Result<Task> {
    match (&g.paired, &g.gcm) {
        (Some(f), None) => Ok(Task::Paired { factor: *f }),
        (None, Some(name)) => Ok(Task::Unpaired { gcm: name.clone() }),
        _ => Err(zssd::Error::Invalid("choose the input with exactly one of --paired FACTOR or --gcm NAME".into()).into()),
    }
}

fn checkpoint_for(path: &Path, cfg: &RunConfig, ds: &Dataset) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let m = &ck.state.model;
    if *m.grid != **ds.fine() || m.vars != ds.vars() {
        bail!(zssd::Error::Grid(format!(
            "checkpoint is for {:?} on {:?}, the dataset holds {:?} on {:?}",
            m.vars,
            m.grid.shape(),
            ds.vars(),
            ds.fine().shape()
        )));
    }
    if ck.config_hash != cfg.prior_hash() {
        eprintln!("warning: checkpoint prior hash {} differs from the configuration's {}", ck.config_hash, cfg.prior_hash());
    }
    Ok(ck)
}

fn write_run(dir: &Path, run: &MethodRun, record: RunRecord) -> Result<()> {
    let mut record = record;
    for (m, seq) in run.members.iter().enumerate() {
        let names = write_sequence(&dir.join(format!("member_{m}")), "step", seq)?;
        record.members.push(names.into_iter().map(|n| format!("member_{m}/{n}")).collect());
    }
    write_json(&dir.join("traces.json"), &run.traces)?;
    write_json(&dir.join(RUN_FILE), &record)?;
    Ok(())
}

pub fn sample(g: &Global, data: &Path, checkpoint: Option<&Path>, baseline: Option<Method>) -> Result<()> {
    let cfg = resolve_config(g, Some(data))?;
    let ds = load_dataset(data, &cfg)?;
    let task = task_from_flags(g)?;
    let td = task_data(&ds, &task, &cfg.grid.coarse()?, cfg.eval.test_stride)?;
    let _lock = DirLock::acquire(&g.out, g.force)?;
    let (run, ckpt_id) = match baseline {
        Some(m) => (run_baseline(&td, m, cfg.baselines.knots)?, String::new()),
        None => {
            let path = checkpoint.context("--checkpoint is required for guided sampling")?;
            let ck = checkpoint_for(path, &cfg, &ds)?;
            let model = ck.sampling_model();
            let statics = ds.statics()?;
            let setup = GuidedSetup { model: &model, statics: &statics, sampler: &cfg.sampler, drop_statics: false, trace: true };
            (run_guided(&td, &setup, cfg.sampler.mode)?, ck.id.clone())
        }
    };
    if let Some(c) = run.consistency {
        println!("{} {}: coarse relative RMSE {:.4}", td.label, run.method.name(), c);
    }
    let record = RunRecord {
        label: td.label.clone(),
        method: run.method,
        task,
        config_hash: cfg.hash(),
        data_hash: ds.data_hash.clone(),
        checkpoint_id: ckpt_id,
        seed: cfg.sampler.seed,
        steps: eval_indices(ds.test().len(), cfg.eval.test_stride),
        members: Vec::new(),
        consistency: run.consistency,
    };
    write_run(&g.out, &run, record)?;
    fs::write(g.out.join(CONFIG_FILE), cfg.to_json())?;
    println!("wrote {} members x {} steps to {}", run.members.len(), td.inputs.len(), g.out.display());
    Ok(())
}

fn write_report(dir: &Path, name: &str, report: &MetricReport) -> Result<()> {
    fs::write(dir.join(format!("{name}.report.json")), report.to_json())?;
    fs::write(dir.join(format!("{name}.spectra.csv")), report.spectra_csv())?;
    fs::write(dir.join(format!("{name}.bias.csv")), report.bias_csv())?;
    Ok(())
}

pub fn eval(g: &Global, data: &Path, outputs: &Path) -> Result<()> {
    let record: RunRecord = read_json(&outputs.join(RUN_FILE))?;
    let manifest = Manifest::load(data)?;
    if record.data_hash != manifest.data_hash {
        bail!(zssd::Error::Data(format!(
            "outputs were produced from data {}, the dataset is {}",
            record.data_hash, manifest.data_hash
        )));
    }
    let cfg = resolve_config(g, Some(data))?;
    let ds = Dataset::load(data)?;
    let test = ds.test();
    let truth = record
        .steps
        .iter()
        .map(|&i| test.get(i).cloned().context("run refers to a step outside the test split"))
        .collect::<Result<Vec<_>>>()?;
    let members = record.members.iter().map(|names| read_sequence(outputs, names)).collect::<zssd::Result<Vec<_>>>()?;
    let traces: Vec<GradientTrace> = read_json(&outputs.join("traces.json"))?;
    let run = MethodRun { method: record.method, members, traces, consistency: record.consistency };
    let meta = RunMeta {
        label: format!("{}_{}", record.label, record.method.name()),
        config_hash: record.config_hash.clone(),
        data_hash: record.data_hash.clone(),
        seed: record.seed,
        checkpoint_id: record.checkpoint_id.clone(),
    };
    let mut report = evaluate_run(&run, &truth, meta.clone(), cfg.eval.percentile)?;
    if ds.vars().iter().any(|v| v == "u10") && ds.vars().iter().any(|v| v == "v10") {
        report.terrain_correlation = run_terrain_correlation(&run, &ds.terrain).ok();
    }
    let _lock = DirLock::acquire(&g.out, g.force)?;
    write_report(&g.out, &meta.label, &report)?;
    for s in &report.scores {
        println!("{:>6}  MAE {:.4}  RMSE {:.4}", s.var, s.mae, s.rmse);
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepPoint {
    factor: usize,
    paired: f64,
    unpaired: f64,
}

#[derive(Serialize)]
struct AblationSummary {
    config_hash: String,
    checkpoint_id: String,
    /// Terrain correlation of samples with and without static conditioning.
    conditioning: [f64; 2],
    /// Mean guidance-gradient norm with and without fine-grid re-projection.
    grad_norm: [f64; 2],
    scale_sweep: Vec<SweepPoint>,
}

pub fn ablate(g: &Global, data: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = resolve_config(g, Some(data))?;
    let ds = load_dataset(data, &cfg)?;
    let ck = checkpoint_for(checkpoint, &cfg, &ds)?;
    let model = ck.sampling_model();
    let statics = ds.statics()?;
    let _lock = DirLock::acquire(&g.out, g.force)?;
    let coarse = cfg.grid.coarse()?;
    let meta = |label: String| RunMeta {
        label,
        config_hash: cfg.hash(),
        data_hash: ds.data_hash.clone(),
        seed: cfg.sampler.seed,
        checkpoint_id: ck.id.clone(),
    };
    let setup = |drop_statics| GuidedSetup { model: &model, statics: &statics, sampler: &cfg.sampler, drop_statics, trace: true };
    let q = cfg.eval.percentile;
    let (nlat, nlon) = ds.fine().shape();
    let default_factor = nlat / coarse.nlat();
    if default_factor * coarse.nlat() != nlat || default_factor * coarse.nlon() != nlon {
        bail!(zssd::Error::Invalid("the shared coarse grid must divide the fine grid for the paired ablations".into()));
    }
    let paired = task_data(&ds, &Task::Paired { factor: default_factor }, &coarse, cfg.eval.test_stride)?;

    let mut conditioning = [0.0; 2];
    let mut grad_norm = [0.0; 2];
    let mut paired_default = None;
    for (k, drop) in [false, true].into_iter().enumerate() {
        let run = run_guided(&paired, &setup(drop), GuidanceMode::Unified)?;
        conditioning[k] = run_terrain_correlation(&run, &ds.terrain)?.r;
        let name = if drop { "no_statics" } else { "conditioned" };
        let report = evaluate_run(&run, &paired.truth, meta(format!("{}_{name}", paired.label)), q)?;
        write_report(&g.out, &report.meta.label, &report)?;
        if !drop {
            grad_norm[0] = report.trace.as_ref().map_or(0.0, |t| t.mean_grad_norm);
            paired_default = Some(standardized_mae(&report, &model.norm));
        }
    }
    let vanilla = run_guided(&paired, &setup(false), GuidanceMode::Vanilla)?;
    let report = evaluate_run(&vanilla, &paired.truth, meta(format!("{}_vanilla", paired.label)), q)?;
    grad_norm[1] = report.trace.as_ref().map_or(0.0, |t| t.mean_grad_norm);
    write_report(&g.out, &report.meta.label, &report)?;

    let mut scale_sweep = Vec::new();
    for &f in &cfg.eval.scale_sweep {
        let grid = std::sync::Arc::new(zssd::Grid::equiangular(nlat / f, nlon / f)?);
        let paired_err = match paired_default {
            Some(e) if f == default_factor => e,
            _ => {
                let td = task_data(&ds, &Task::Paired { factor: f }, &grid, cfg.eval.test_stride)?;
                let run = run_guided(&td, &setup(false), GuidanceMode::Unified)?;
                let r = evaluate_run(&run, &td.truth, meta(format!("sweep_{}", td.label)), q)?;
                write_report(&g.out, &r.meta.label, &r)?;
                standardized_mae(&r, &model.norm)
            }
        };
        let td = task_data(&ds, &Task::Unpaired { gcm: cfg.eval.sweep_gcm.clone() }, &grid, cfg.eval.test_stride)?;
        let run = run_guided(&td, &setup(false), GuidanceMode::Unified)?;
        let r = evaluate_run(&run, &td.truth, meta(format!("sweep_{}_x{f}", td.label)), q)?;
        write_report(&g.out, &r.meta.label, &r)?;
        let unpaired_err = standardized_mae(&r, &model.norm);
        println!("x{f}: paired {paired_err:.4}  unpaired {unpaired_err:.4}");
        scale_sweep.push(SweepPoint { factor: f, paired: paired_err, unpaired: unpaired_err });
    }
    let summary = AblationSummary { config_hash: cfg.hash(), checkpoint_id: ck.id.clone(), conditioning, grad_norm, scale_sweep };
    write_json(&g.out.join("ablation.json"), &summary)?;
    println!(
        "terrain correlation {:.3} conditioned / {:.3} without statics; gradient norm {:.3e} unified / {:.3e} vanilla",
        conditioning[0], conditioning[1], grad_norm[0], grad_norm[1]
    );
    Ok(())
}

pub fn plot(g: &Global, reports: &Path) -> Result<()> {
    let mut found: Vec<PathBuf> = fs::read_dir(reports)
        .with_context(|| format!("reading {}", reports.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".report.json"))
        .collect();
    found.sort();
    if found.is_empty() {
        bail!(zssd::Error::Data(format!("no *.report.json files in {}", reports.display())));
    }
    let loaded = found.iter().map(|p| read_json::<MetricReport>(p)).collect::<zssd::Result<Vec<_>>>()?;
    let _lock = DirLock::acquire(&g.out, g.force)?;
    for name in crate::plot::render_all(&loaded, &g.out)? {
        println!("{}", g.out.join(name).display());
    }
    Ok(())
}
