//! Run configuration: one JSON document with sections `data`, `grid`,
//! `prior`, `sampler`, `eval` and `baselines`. Every field has a default and
//! unknown keys are rejected.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::hex16;
use crate::grid::Grid;
use crate::prior::{PriorConfig, TrainConfig};
use crate::sampler::{GuidanceMode, SamplerConfig};
use crate::synth::{GcmConfig, SynthConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub truth: SynthConfig,
    pub gcms: Vec<GcmConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let truth = SynthConfig::default();
        DataConfig { gcms: GcmConfig::ensemble(truth.seed), truth }
    }
}

/// The shared coarse grid that every input is coarsened onto.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub coarse_nlat: usize,
    pub coarse_nlon: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { coarse_nlat: 8, coarse_nlon: 16 }
    }
}

impl GridConfig {
    pub fn coarse(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(Grid::equiangular(self.coarse_nlat, self.coarse_nlon)?))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub model: PriorConfig,
    pub training: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub guidance_scale: f64,
    pub ensemble: usize,
    pub mode: GuidanceMode,
    pub normalize_scale: bool,
    pub clamp: Option<f64>,
    pub frozen_denoiser: bool,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            guidance_scale: 0.15,
            ensemble: 5,
            mode: GuidanceMode::Unified,
            normalize_scale: false,
            clamp: None,
            frozen_denoiser: false,
            seed: 0,
        }
    }
}

impl SamplerSection {
    pub fn build(&self, steps: usize, coarse: Arc<Grid>, fine: Arc<Grid>, trace: bool) -> SamplerConfig {
        SamplerConfig {
            steps,
            guidance_scale: self.guidance_scale,
            coarse,
            fine,
            ensemble: self.ensemble,
            seed: self.seed,
            mode: self.mode,
            trace,
            normalize_scale: self.normalize_scale,
            clamp: self.clamp,
            frozen_denoiser: self.frozen_denoiser,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub percentile: f64,
    /// Evaluate every `test_stride`-th test step. A divisor of the steps per
    /// year keeps the shifted climate-model series a permutation of the
    /// evaluated truth steps.
    pub test_stride: usize,
    /// Wavenumbers `[start, end)` used for log-spectral distances.
    pub spectral_band: [usize; 2],
    /// Paired-task coarsening factors swept by the ablation.
    pub scale_sweep: Vec<usize>,
    /// Climate model used for the unpaired half of the sweep.
    pub sweep_gcm: String,
    /// Guidance scales tried by the validation sweep.
    pub zeta_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            percentile: 99.0,
            test_stride: 17,
            spectral_band: [10, 17],
            scale_sweep: vec![4, 8, 16],
            sweep_gcm: "gcm32x64".into(),
            zeta_grid: vec![0.05, 0.1, 0.15, 0.25],
        }
    }
}

impl EvalConfig {
    pub fn band(&self) -> std::ops::Range<usize> {
        self.spectral_band[0]..self.spectral_band[1]
    }
}

/// How training-period values are pooled when fitting the quantile map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantilePooling {
    AllTimes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub knots: usize,
    pub pooling: QuantilePooling,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { knots: 100, pooling: QuantilePooling::AllTimes }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub grid: GridConfig,
    pub prior: PriorSection,
    pub sampler: SamplerSection,
    pub eval: EvalConfig,
    pub baselines: BaselineConfig,
}

/// Short SHA-256 of the canonical (key-sorted, compact) JSON of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    // serde_json maps are ordered by key, so the encoding is canonical
    let v = serde_json::to_value(value).expect("config serializes");
    let bytes = serde_json::to_vec(&v).expect("value serializes");
    hex16(&Sha256::digest(&bytes))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config { path: e.path().to_string(), msg: e.inner().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |path: &str, msg: String| Error::Config { path: path.into(), msg };
        self.data.truth.validate().map_err(|e| cfg("data.truth", e.to_string()))?;
        let fine = (self.data.truth.nlat, self.data.truth.nlon);
        for (i, g) in self.data.gcms.iter().enumerate() {
            if g.nlat > fine.0 || g.nlon > fine.1 {
                return Err(cfg(&format!("data.gcms[{i}]"), format!("source grid {}x{} is finer than the truth grid", g.nlat, g.nlon)));
            }
            if let Some(c) = g.cutoff {
                if c <= 0.0 || c >= fine.1 as f64 / 2.0 {
                    return Err(cfg(&format!("data.gcms[{i}].cutoff"), format!("{c} is not below the fine Nyquist wavenumber")));
                }
            }
        }
        let names: std::collections::BTreeSet<&str> = self.data.gcms.iter().map(|g| g.name.as_str()).collect();
        if names.len() != self.data.gcms.len() {
            return Err(cfg("data.gcms", "climate model names must be unique".into()));
        }
        if self.grid.coarse_nlat > fine.0 || self.grid.coarse_nlon > fine.1 || self.grid.coarse_nlat == 0 {
            return Err(cfg("grid", "coarse grid must be non-empty and no finer than the truth grid".into()));
        }
        if self.sampler.ensemble == 0 {
            return Err(cfg("sampler.ensemble", "must be at least 1".into()));
        }
        if !(self.sampler.guidance_scale >= 0.0 && self.sampler.guidance_scale.is_finite()) {
            return Err(cfg("sampler.guidance_scale", "must be finite and non-negative".into()));
        }
        if !(self.eval.percentile > 0.0 && self.eval.percentile < 100.0) {
            return Err(cfg("eval.percentile", "must lie in (0, 100)".into()));
        }
        if self.eval.test_stride == 0 {
            return Err(cfg("eval.test_stride", "must be positive".into()));
        }
        if self.eval.spectral_band[0] >= self.eval.spectral_band[1] || self.eval.spectral_band[1] > fine.1 / 2 + 1 {
            return Err(cfg("eval.spectral_band", "must be a non-empty range of zonal wavenumbers".into()));
        }
        for f in &self.eval.scale_sweep {
            if *f == 0 || !fine.0.is_multiple_of(*f) || !fine.1.is_multiple_of(*f) {
                return Err(cfg("eval.scale_sweep", format!("factor {f} does not divide the truth grid")));
            }
        }
        if self.baselines.knots < 2 {
            return Err(cfg("baselines.knots", "need at least two knots".into()));
        }
        let p = &self.prior.model;
        if p.widths.is_empty() || p.steps == 0 {
            return Err(cfg("prior.model", "need at least one level and one diffusion step".into()));
        }
        let multiple = 1usize << (p.widths.len() - 1);
        if !fine.0.is_multiple_of(multiple) || !fine.1.is_multiple_of(multiple) {
            return Err(cfg("prior.model.widths", format!("{} levels need grid sides divisible by {multiple}", p.widths.len())));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }

    pub fn data_hash(&self) -> String {
        content_hash(&self.data)
    }

    /// Hash of everything that determines the trained prior.
    pub fn prior_hash(&self) -> String {
        content_hash(&(&self.data.truth, &self.prior))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_report_their_path() {
        let err = RunConfig::from_json(r#"{"sampler": {"zeta": 0.1}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "sampler.zeta"),
            e => panic!("unexpected {e}"),
        }
        let err = RunConfig::from_json(r#"{"data": {"truth": {"coupling": "high"}}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "data.truth.coupling"), "{err}");
    }

    #[test]
    fn hash_ignores_key_order_and_whitespace() {
        let a = RunConfig::from_json(r#"{"sampler": {"ensemble": 3, "seed": 9}, "eval": {"percentile": 95}}"#).unwrap();
        let b = RunConfig::from_json("{\"eval\":{\"percentile\":95.0},\n \"sampler\":{\"seed\":9,\"ensemble\":3}}").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(RunConfig::from_json(r#"{"data": {"truth": {"coupling": 1.5}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"percentile": 100}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"eval": {"scale_sweep": [3]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"data": {"gcms": [{"name": "a", "cutoff": 64}]}}"#).is_err());
    }
}
