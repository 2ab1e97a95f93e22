//! Synthetic stand-ins for reanalysis truth, terrain and coarse climate
//! model output.
//!
//! Truth fields are random-phase spectral syntheses with a power-law
//! spectrum, red in time, with seasonal and diurnal signals and near-surface
//! winds slowed over land and high terrain. Pseudo climate-model series are
//! derived from truth by coarsening, time shifting, spectral damping, a
//! smooth bias and a per-cell monotone distortion of the tails.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::field::{Field, Timestamp};
use crate::grid::{Grid, SeparableOp};
use crate::spectral::{fft2, radial_filter, signed_freq};
use crate::{Error, Result};

/// Units and the affine map from standardized to physical values.
pub fn variable_units(name: &str) -> Result<(&'static str, f64, f64)> {
    Ok(match name {
        "msl" => ("Pa", 101_325.0, 1_000.0),
        "u10" | "v10" => ("m s-1", 0.0, 5.0),
        "z500" => ("m2 s-2", 55_000.0, 900.0),
        "z250" => ("m2 s-2", 101_000.0, 1_300.0),
        other => return Err(Error::Invalid(format!("unknown variable `{other}`"))),
    })
}

fn is_wind(name: &str) -> bool {
    matches!(name, "u10" | "v10")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nlat: usize,
    pub nlon: usize,
    pub years: usize,
    pub start_year: i32,
    /// Evenly spaced days sampled per year, each at 00, 06, 12 and 18 UTC.
    pub days_per_year: usize,
    pub variables: Vec<String>,
    /// Zonal spectral slope of every variable unless overridden.
    pub slope: f64,
    pub slope_overrides: BTreeMap<String, f64>,
    /// Roll-off wavenumber of the power law; keeps the largest scales finite.
    pub spectral_knee: f64,
    /// Strength of wind damping over land and terrain, in `[0, 1]`.
    pub coupling: f64,
    /// e-folding time of the red-noise weather, in hours.
    pub decorrelation_hours: f64,
    pub seasonal_amplitude: f64,
    pub diurnal_amplitude: f64,
    /// Highest wavenumber present in the synthetic elevation.
    pub terrain_max_wavenumber: f64,
    pub flat_terrain: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nlat: 64,
            nlon: 128,
            years: 30,
            start_year: 1980,
            days_per_year: 17,
            variables: vec!["msl".into(), "u10".into(), "v10".into()],
            slope: -3.0,
            slope_overrides: BTreeMap::new(),
            spectral_knee: 2.0,
            coupling: 1.0,
            decorrelation_hours: 48.0,
            seasonal_amplitude: 0.5,
            diurnal_amplitude: 0.3,
            terrain_max_wavenumber: 24.0,
            flat_terrain: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.years == 0 || self.days_per_year == 0 || self.days_per_year > 365 {
            return Err(Error::Invalid("need at least one year and 1..=365 days per year".into()));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Invalid(format!("coupling must lie in [0, 1], got {}", self.coupling)));
        }
        for v in &self.variables {
            variable_units(v)?;
            if self.slope_for(v) >= 0.0 {
                return Err(Error::Invalid(format!("spectral slope of `{v}` must be negative")));
            }
        }
        if self.variables.is_empty() {
            return Err(Error::Invalid("no variables requested".into()));
        }
        if self.decorrelation_hours <= 0.0 {
            return Err(Error::Invalid("decorrelation time must be positive".into()));
        }
        Ok(())
    }

    pub fn slope_for(&self, var: &str) -> f64 {
        self.slope_overrides.get(var).copied().unwrap_or(self.slope)
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(Grid::equiangular(self.nlat, self.nlon)?))
    }

    pub fn steps_per_year(&self) -> usize {
        4 * self.days_per_year
    }

    /// Chronological sample times at a 6-hour cadence within each sampled day.
    pub fn timestamps(&self) -> Result<Vec<Timestamp>> {
        let mut out = Vec::with_capacity(self.years * self.steps_per_year());
        for y in 0..self.years {
            let year = self.start_year + y as i32;
            for d in 0..self.days_per_year {
                let ordinal = 1 + ((d as f64 + 0.5) * 365.0 / self.days_per_year as f64).floor() as u32;
                for hour in [0, 6, 12, 18] {
                    out.push(Timestamp::from_ordinal(year, ordinal.min(365), hour)?);
                }
            }
        }
        Ok(out)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
}

/// Spectral amplitudes on the mirrored `2 nlat x nlon` domain.
fn amplitudes(nlat: usize, nlon: usize, power: impl Fn(f64) -> f64) -> Vec<f64> {
    let rows = 2 * nlat;
    let mut amp = vec![0.0; rows * nlon];
    for i in 0..rows {
        let ky = signed_freq(i, rows);
        for j in 0..nlon {
            let kx = signed_freq(j, nlon);
            let k = (kx * kx + ky * ky).sqrt();
            if k > 0.0 {
                amp[i * nlon + j] = power(k).sqrt();
            }
        }
    }
    amp
}

/// Real part of the synthesized field restricted to the physical rows.
fn synthesize(coef: &[Complex64], nlat: usize, nlon: usize) -> Vec<f64> {
    let mut c = coef.to_vec();
    fft2(&mut c, 2 * nlat, nlon, true);
    c[..nlat * nlon].iter().map(|v| v.re).collect()
}

/// Random elevation (m) and land-sea mask on `grid`.
///
/// Land is the top 30% of a band-limited random surface; elevation rises
/// from zero at the coast to 4000 m at the highest cell.
pub fn synth_terrain(grid: &Arc<Grid>, max_wavenumber: f64, flat: bool, seed: u64) -> Result<Field> {
    let (nlat, nlon) = grid.shape();
    let t0 = Timestamp::new(2000, 1, 1, 0)?;
    let names = vec!["dem".to_string(), "lsm".to_string()];
    let units = vec!["m".to_string(), "1".to_string()];
    if flat {
        return Field::new(grid.clone(), vec![0.0; 2 * nlat * nlon], names, units, t0, false);
    }
    let mut rng = stream(seed, 1);
    let amp = amplitudes(nlat, nlon, |k| if k <= max_wavenumber { 1.0 / (1.0 + k * k) } else { 0.0 });
    let coef: Vec<Complex64> = amp.iter().map(|a| complex_normal(&mut rng) * *a).collect();
    let h = synthesize(&coef, nlat, nlon);
    let mut sorted = h.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[(0.7 * sorted.len() as f64) as usize];
    let top = sorted[sorted.len() - 1] - threshold;
    let dem: Vec<f64> = h.iter().map(|v| if *v > threshold { 4000.0 * (v - threshold) / top } else { 0.0 }).collect();
    let lsm: Vec<f64> = h.iter().map(|v| if *v > threshold { 1.0 } else { 0.0 }).collect();
    Field::new(grid.clone(), [dem, lsm].concat(), names, units, t0, false)
}

/// Statics as the network sees them: standardized elevation and the 0/1 mask.
pub fn normalize_statics(terrain: &Field) -> Result<Field> {
    let mut out = terrain.clone();
    let dem = out.channel_mut(0);
    let n = dem.len() as f64;
    let mean = dem.iter().sum::<f64>() / n;
    let std = (dem.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        dem.iter_mut().for_each(|v| *v = (*v - mean) / std);
    } else {
        dem.iter_mut().for_each(|v| *v = 0.0);
    }
    out.units = vec!["1".into(), "1".into()];
    out.normalized = true;
    Ok(out)
}

/// Wind damping factor per cell: 1 at sea level, falling linearly to
/// `1 - 0.75 c` at the highest point.
pub fn wind_damping(terrain: &Field, coupling: f64) -> Vec<f64> {
    let dem = terrain.channel(0);
    let top = dem.iter().cloned().fold(0.0, f64::max);
    dem.iter().map(|h| if top > 0.0 { 1.0 - 0.75 * coupling * h / top } else { 1.0 }).collect()
}

/// Chronological truth sequence on the configured fine grid.
pub fn spectral_truth(cfg: &SynthConfig, terrain: &Field) -> Result<Vec<Field>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    if *terrain.grid != *grid {
        return Err(Error::Grid("terrain is not on the configured grid".into()));
    }
    let (nlat, nlon) = grid.shape();
    let plane = nlat * nlon;
    let times = cfg.timestamps()?;
    let damping = wind_damping(terrain, cfg.coupling);
    let lat: Vec<f64> = grid.lat_centers().iter().map(|d| d.to_radians()).collect();
    let lon: Vec<f64> = grid.lon_centers().iter().map(|d| d.to_radians()).collect();
    let nv = cfg.variables.len();
    let mut data = vec![vec![0.0; nv * plane]; times.len()];
    for (v, name) in cfg.variables.iter().enumerate() {
        let slope = cfg.slope_for(name);
        let knee2 = cfg.spectral_knee * cfg.spectral_knee;
        let amp = amplitudes(nlat, nlon, |k| (knee2 + k * k).powf(0.5 * (slope - 1.0)));
        let raw_std = (amp.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt();
        let mut rng = stream(cfg.seed, 100 + v as u64);
        let mut coef: Vec<Complex64> = amp.iter().map(|a| complex_normal(&mut rng) * *a).collect();
        // a per-variable phase keeps the seasonal patterns of different variables distinct
        let phase = v as f64 * 0.7;
        for (n, t) in times.iter().enumerate() {
            if n > 0 {
                let dt = (t.epoch_hours() - times[n - 1].epoch_hours()) as f64;
                let rho = (-dt / cfg.decorrelation_hours).exp();
                let innov = (1.0 - rho * rho).sqrt();
                for (c, a) in coef.iter_mut().zip(&amp) {
                    *c = *c * rho + complex_normal(&mut rng) * (innov * a);
                }
            }
            let raw = synthesize(&coef, nlat, nlon);
            let season = TAU * (t.ordinal() as f64 - 15.0) / 365.0;
            let hour = TAU * t.hour() as f64 / 24.0;
            let out = &mut data[n][v * plane..(v + 1) * plane];
            for i in 0..nlat {
                for j in 0..nlon {
                    let k = i * nlon + j;
                    let z = raw[k] / raw_std;
                    out[k] = if is_wind(name) {
                        z * (1.0 + 0.5 * cfg.seasonal_amplitude * season.cos()) * damping[k]
                    } else {
                        z + cfg.seasonal_amplitude * (season + phase).cos() * lat[i].sin()
                            + cfg.diurnal_amplitude * (hour + lon[j] + phase).cos() * lat[i].cos()
                    };
                }
            }
        }
    }
    let mut units = Vec::with_capacity(nv);
    for (v, name) in cfg.variables.iter().enumerate() {
        let (unit, offset, scale) = variable_units(name)?;
        units.push(unit.to_string());
        let (mut s, mut q, mut n) = (0.0, 0.0, 0usize);
        for d in &data {
            for x in &d[v * plane..(v + 1) * plane] {
                s += x;
                q += x * x;
                n += 1;
            }
        }
        let mean = s / n as f64;
        let std = (q / n as f64 - mean * mean).sqrt();
        for d in data.iter_mut() {
            for x in &mut d[v * plane..(v + 1) * plane] {
                *x = offset + scale * (*x - mean) / std;
            }
        }
    }
    data.into_iter()
        .zip(times)
        .map(|(values, t)| Field::new(grid.clone(), values, cfg.variables.clone(), units.clone(), t, false))
        .collect()
}

/// Settings of one pseudo climate model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcmConfig {
    pub name: String,
    pub nlat: usize,
    pub nlon: usize,
    /// Radial wavenumber above which spectral power is damped; `None` keeps
    /// all scales.
    pub cutoff: Option<f64>,
    /// Amplitude gain applied above the cutoff.
    pub attenuation: f64,
    /// Amplitude of the smooth additive bias, in units of each variable's spread.
    pub bias: f64,
    /// Strength `s` of the per-cell tail distortion, in `[0, 1)`.
    pub distortion: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for GcmConfig {
    fn default() -> Self {
        GcmConfig {
            name: "gcm".into(),
            nlat: 32,
            nlon: 64,
            cutoff: Some(8.0),
            attenuation: 0.1,
            bias: 0.05,
            distortion: 0.1,
            shuffle: true,
            seed: 0,
        }
    }
}

impl GcmConfig {
    /// Five emulators on different source grids.
    pub fn ensemble(seed: u64) -> Vec<GcmConfig> {
        [(48, 96), (40, 80), (32, 64), (24, 48), (16, 32)]
            .iter()
            .enumerate()
            .map(|(i, &(nlat, nlon))| GcmConfig {
                name: format!("gcm{nlat}x{nlon}"),
                nlat,
                nlon,
                seed: seed.wrapping_add(1000 + i as u64),
                ..GcmConfig::default()
            })
            .collect()
    }

    /// Everything switched off: plain conservative coarsening.
    pub fn identity(name: &str, nlat: usize, nlon: usize) -> Self {
        GcmConfig {
            name: name.into(),
            nlat,
            nlon,
            cutoff: None,
            attenuation: 1.0,
            bias: 0.0,
            distortion: 0.0,
            shuffle: false,
            seed: 0,
        }
    }
}

/// Monotone per-cell tail distortion `m + (1-s)(x-m) + s sd tanh((x-m)/sd)`.
pub fn distort(x: f64, mean: f64, sd: f64, s: f64) -> f64 {
    if sd <= 0.0 {
        return x;
    }
    let d = x - mean;
    mean + (1.0 - s) * d + s * sd * (d / sd).tanh()
}

/// Derive a pseudo climate-model series from a chronological truth slice.
///
/// The time shift moves whole years cyclically within the slice (half the
/// slice when it spans less than two years), so calendar statistics survive
/// while day-to-day pairing with truth is lost.
pub fn pseudo_gcm(truth: &[Field], cfg: &GcmConfig) -> Result<Vec<Field>> {
    let first = truth.first().ok_or_else(|| Error::Data("empty truth sequence".into()))?;
    let fine = first.grid.clone();
    if let Some(c) = cfg.cutoff {
        if c <= 0.0 || c >= fine.nlon() as f64 / 2.0 {
            return Err(Error::Invalid(format!("cutoff {c} must lie in (0, {})", fine.nlon() / 2)));
        }
    }
    if !(0.0..1.0).contains(&cfg.distortion) {
        return Err(Error::Invalid("distortion strength must lie in [0, 1)".into()));
    }
    let src = Arc::new(Grid::equiangular(cfg.nlat, cfg.nlon)?);
    let down = SeparableOp::conservative(fine, src.clone())?;
    let coarse: Vec<Vec<f64>> = truth.iter().map(|f| down.apply_stack(&f.values)).collect();
    let n = coarse.len();
    let order: Vec<usize> = if cfg.shuffle && n > 1 {
        let y0 = truth[0].time.year();
        let per_year = truth.iter().take_while(|f| f.time.year() == y0).count();
        let years = n / per_year;
        let mut rng = stream(cfg.seed, 7);
        let offset = if years >= 2 && n.is_multiple_of(per_year) { per_year * rng.gen_range(1..years) } else { n / 2 };
        (0..n).map(|i| (i + offset) % n).collect()
    } else {
        (0..n).collect()
    };
    let (nlat, nlon) = src.shape();
    let plane = nlat * nlon;
    let nv = first.nchan();
    let mut series: Vec<Vec<f64>> = order.iter().map(|&i| coarse[i].clone()).collect();
    if let Some(c) = cfg.cutoff {
        let width = 2.0;
        let gain = |k: f64| {
            if k <= c {
                1.0
            } else if k >= c + width {
                cfg.attenuation
            } else {
                cfg.attenuation + (1.0 - cfg.attenuation) * 0.5 * (1.0 + (std::f64::consts::PI * (k - c) / width).cos())
            }
        };
        for s in series.iter_mut() {
            for v in 0..nv {
                let p = &mut s[v * plane..(v + 1) * plane];
                let f = radial_filter(p, nlat, nlon, gain);
                p.copy_from_slice(&f);
            }
        }
    }
    if cfg.bias != 0.0 {
        let mut rng = stream(cfg.seed, 8);
        for v in 0..nv {
            let amp = amplitudes(nlat, nlon, |k| if k <= 3.0 { 1.0 } else { 0.0 });
            let coef: Vec<Complex64> = amp.iter().map(|a| complex_normal(&mut rng) * *a).collect();
            let pattern = synthesize(&coef, nlat, nlon);
            let prms = (pattern.iter().map(|x| x * x).sum::<f64>() / plane as f64).sqrt().max(1e-300);
            let spread = series_std(&series, v * plane..(v + 1) * plane);
            for s in series.iter_mut() {
                for (x, b) in s[v * plane..(v + 1) * plane].iter_mut().zip(&pattern) {
                    *x += cfg.bias * spread * b / prms;
                }
            }
        }
    }
    if cfg.distortion > 0.0 {
        for k in 0..nv * plane {
            let mean = series.iter().map(|s| s[k]).sum::<f64>() / n as f64;
            let sd = (series.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            for s in series.iter_mut() {
                s[k] = distort(s[k], mean, sd, cfg.distortion);
            }
        }
    }
    series
        .into_iter()
        .zip(truth)
        .map(|(values, t)| t.with_values(src.clone(), values))
        .collect()
}

fn series_std(series: &[Vec<f64>], range: Range<usize>) -> f64 {
    let (mut s, mut q, mut n) = (0.0, 0.0, 0usize);
    for x in series {
        for v in &x[range.clone()] {
            s += v;
            q += v * v;
            n += 1;
        }
    }
    let m = s / n as f64;
    (q / n as f64 - m * m).max(0.0).sqrt()
}

/// Contiguous chronological index ranges in the ratio 20:1:9.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn make_splits(times: &[Timestamp]) -> Result<Splits> {
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data("sequence is not in strictly increasing time order".into()));
    }
    let n = times.len();
    if n < 3 {
        return Err(Error::Data(format!("{n} steps cannot form three non-empty splits")));
    }
    let train = ((n as f64 * 20.0 / 30.0).round() as usize).clamp(1, n - 2);
    let val = ((n as f64 / 30.0).round() as usize).clamp(1, n - train - 1);
    Ok(Splits { train: 0..train, val: train..train + val, test: train + val..n })
}
