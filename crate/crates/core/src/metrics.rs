//! Latitude-weighted extreme-value errors, zonal spectra, bias summaries and
//! the terrain-correlation statistic.

use std::fmt::Write as _;
use std::ops::Range;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::field::Field;
use crate::grid::{Grid, LatWeights, SeparableOp};
use crate::prior::Normalization;
use crate::sampler::GradientTrace;
use crate::{Error, Result};

fn check_aligned(a: &Field, b: &Field) -> Result<()> {
    if !a.aligned_with(b) {
        return Err(Error::Grid(format!(
            "fields differ in grid or variables: {:?} {:?} vs {:?} {:?}",
            a.grid.shape(),
            a.vars,
            b.grid.shape(),
            b.vars
        )));
    }
    Ok(())
}

/// Linear interpolation between order statistics of an already sorted slice.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-cell, per-variable `q`-th percentile over time.
pub fn percentile_field(seq: &[Field], q: f64) -> Result<Field> {
    let first = seq.first().ok_or_else(|| Error::Data("percentile of an empty sequence".into()))?;
    if !(q > 0.0 && q < 100.0) {
        return Err(Error::Invalid(format!("percentile must lie in (0, 100), got {q}")));
    }
    for f in seq {
        check_aligned(first, f)?;
    }
    let mut column = vec![0.0; seq.len()];
    let values = (0..first.values.len())
        .map(|k| {
            column.iter_mut().zip(seq).for_each(|(c, f)| *c = f.values[k]);
            column.sort_by(f64::total_cmp);
            sorted_quantile(&column, q)
        })
        .collect();
    first.with_values(first.grid.clone(), values)
}

fn weighted_errors(a: &Field, b: &Field, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    check_aligned(a, b)?;
    let w = a.grid.cos_lat();
    let nlon = a.grid.nlon();
    let wsum: f64 = w.iter().sum();
    Ok((0..a.nchan())
        .map(|c| {
            let s: f64 = a
                .channel(c)
                .iter()
                .zip(b.channel(c))
                .enumerate()
                .map(|(k, (x, y))| w[k / nlon] * f(x - y))
                .sum();
            s / (nlon as f64 * wsum)
        })
        .collect())
}

/// Per-variable `sum w |a - b| / (nlon * sum w)` with raw `cos(lat)` weights.
pub fn lat_weighted_mae(a: &Field, b: &Field) -> Result<Vec<f64>> {
    weighted_errors(a, b, f64::abs)
}

pub fn lat_weighted_rmse(a: &Field, b: &Field) -> Result<Vec<f64>> {
    Ok(weighted_errors(a, b, |d| d * d)?.into_iter().map(f64::sqrt).collect())
}

/// Zonal power per variable, indexed by wavenumber `0..=nlon/2`.
///
/// Each row contributes `|X_k|^2 / nlon^2`, doubled for wavenumbers that have
/// a negative-frequency twin, so the spectrum sums to the row's mean square.
/// Rows are averaged with normalized `cos(lat)` weights.
pub fn zonal_psd(field: &Field) -> Result<Vec<Vec<f64>>> {
    let grid = &field.grid;
    if !grid.periodic_lon() {
        return Err(Error::Grid("zonal spectra need a periodic longitude axis".into()));
    }
    let (nlat, nlon) = grid.shape();
    let w = LatWeights::new(grid);
    let fft = FftPlanner::new().plan_fft_forward(nlon);
    let mut buf = vec![Complex64::default(); nlon];
    let norm = 1.0 / (nlon * nlon) as f64;
    Ok((0..field.nchan())
        .map(|c| {
            let mut p = vec![0.0; nlon / 2 + 1];
            for (i, row) in field.channel(c).chunks(nlon).enumerate() {
                buf.iter_mut().zip(row).for_each(|(b, v)| *b = Complex64::new(*v, 0.0));
                fft.process(&mut buf);
                for (k, pk) in p.iter_mut().enumerate() {
                    let twin = if k == 0 || 2 * k == nlon { 1.0 } else { 2.0 };
                    *pk += w.w[i] / nlat as f64 * twin * buf[k].norm_sqr() * norm;
                }
            }
            p
        })
        .collect())
}

/// Time-averaged zonal spectra of a sequence.
pub fn mean_zonal_psd(seq: &[Field]) -> Result<Vec<Vec<f64>>> {
    let first = seq.first().ok_or_else(|| Error::Data("spectrum of an empty sequence".into()))?;
    let mut acc = zonal_psd(first)?;
    for f in &seq[1..] {
        check_aligned(first, f)?;
        for (a, p) in acc.iter_mut().zip(zonal_psd(f)?) {
            a.iter_mut().zip(p).for_each(|(x, y)| *x += y);
        }
    }
    let n = seq.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    Ok(acc)
}

/// Root-mean-square decibel difference over the wavenumbers in `band`.
pub fn log_spectral_distance(a: &[f64], b: &[f64], band: Range<usize>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("spectra of length {} and {}", a.len(), b.len())));
    }
    if band.is_empty() || band.end > a.len() {
        return Err(Error::Invalid(format!("band {band:?} outside wavenumbers 0..{}", a.len())));
    }
    let mut s = 0.0;
    for k in band.clone() {
        if a[k] <= 0.0 || b[k] <= 0.0 {
            return Err(Error::Data(format!("zero power at wavenumber {k}")));
        }
        s += (10.0 * (a[k] / b[k]).log10()).powi(2);
    }
    Ok((s / band.len() as f64).sqrt())
}

/// Least-squares slope of `log P` against `log k` over `band`.
pub fn spectral_slope(psd: &[f64], band: Range<usize>) -> Result<f64> {
    if band.len() < 2 || band.start == 0 || band.end > psd.len() {
        return Err(Error::Invalid(format!("cannot fit a slope over {band:?}")));
    }
    let pts: Vec<(f64, f64)> = band.map(|k| ((k as f64).ln(), psd[k].max(f64::MIN_POSITIVE).ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub mean: f64,
    pub std: f64,
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

/// Weighted quantile: linear interpolation of the sorted values against
/// cumulative weight taken at each sample's midpoint.
fn weighted_quantile(sorted: &[(f64, f64)], total: f64, q: f64) -> f64 {
    let target = q / 100.0 * total;
    let mut cum = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for &(v, w) in sorted {
        let mid = cum + 0.5 * w;
        if mid >= target {
            return match prev {
                Some((pv, pm)) if mid > pm => pv + (v - pv) * (target - pm) / (mid - pm),
                _ => v,
            };
        }
        prev = Some((v, mid));
        cum += w;
    }
    sorted.last().map_or(0.0, |p| p.0)
}

/// Per-variable distribution of `output - reference` pooled over all pairs
/// and cells with `cos(lat)` weights.
pub fn bias_distribution(outputs: &[Field], reference: &[Field]) -> Result<Vec<BiasSummary>> {
    if outputs.is_empty() || outputs.len() != reference.len() {
        return Err(Error::Data(format!("{} outputs for {} references", outputs.len(), reference.len())));
    }
    for (o, r) in outputs.iter().zip(reference) {
        check_aligned(o, r)?;
    }
    let grid = &outputs[0].grid;
    let w = grid.cos_lat();
    let nlon = grid.nlon();
    Ok((0..outputs[0].nchan())
        .map(|c| {
            let mut pts: Vec<(f64, f64)> = outputs
                .iter()
                .zip(reference)
                .flat_map(|(o, r)| {
                    o.channel(c).iter().zip(r.channel(c)).enumerate().map(|(k, (a, b))| (a - b, w[k / nlon]))
                })
                .collect();
            let total: f64 = pts.iter().map(|p| p.1).sum();
            let mean = pts.iter().map(|p| p.0 * p.1).sum::<f64>() / total;
            let var = pts.iter().map(|p| p.1 * (p.0 - mean).powi(2)).sum::<f64>() / total;
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let q = |p| weighted_quantile(&pts, total, p);
            BiasSummary { mean, std: var.sqrt(), p5: q(5.0), p25: q(25.0), p50: q(50.0), p75: q(75.0), p95: q(95.0) }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainCorrelation {
    pub r: f64,
    /// Set when wind magnitude or elevation has no variance over land.
    pub degenerate: bool,
}

/// Weighted Pearson correlation between time-mean near-surface wind speed
/// and elevation over land cells.
pub fn terrain_correlation(seq: &[Field], dem: &[f64], lsm: &[f64]) -> Result<TerrainCorrelation> {
    let first = seq.first().ok_or_else(|| Error::Data("terrain correlation of an empty sequence".into()))?;
    let (u, v) = match (first.var_index("u10"), first.var_index("v10")) {
        (Some(u), Some(v)) => (u, v),
        _ => return Err(Error::Data("terrain correlation needs u10 and v10".into())),
    };
    let n = first.plane();
    if dem.len() != n || lsm.len() != n {
        return Err(Error::Grid("elevation and mask are not on the field grid".into()));
    }
    let mut speed = vec![0.0; n];
    for f in seq {
        check_aligned(first, f)?;
        for (k, s) in speed.iter_mut().enumerate() {
            *s += f.channel(u)[k].hypot(f.channel(v)[k]) / seq.len() as f64;
        }
    }
    let w = first.grid.cos_lat();
    let nlon = first.grid.nlon();
    let land: Vec<(f64, f64, f64)> =
        (0..n).filter(|&k| lsm[k] > 0.5).map(|k| (w[k / nlon], speed[k], dem[k])).collect();
    if land.is_empty() {
        return Err(Error::Data("no land cells".into()));
    }
    Ok(weighted_pearson(&land))
}

fn weighted_pearson(pts: &[(f64, f64, f64)]) -> TerrainCorrelation {
    let sw: f64 = pts.iter().map(|p| p.0).sum();
    let mx = pts.iter().map(|p| p.0 * p.1).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / sw;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(w, x, y) in pts {
        sxy += w * (x - mx) * (y - my);
        sxx += w * (x - mx).powi(2);
        syy += w * (y - my).powi(2);
    }
    let scale = (sxx.abs() + syy.abs()).max(1.0);
    if sxx <= 1e-24 * scale || syy <= 1e-24 * scale {
        return TerrainCorrelation { r: 0.0, degenerate: true };
    }
    TerrainCorrelation { r: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), degenerate: false }
}

/// Latitude-weighted relative RMSE between the coarse content of `output`
/// and of `input`, pooled over variables in normalized units.
pub fn coarse_consistency(output: &Field, input: &Field, coarse: &std::sync::Arc<Grid>, norm: &Normalization) -> Result<f64> {
    if output.vars != input.vars {
        return Err(Error::Data("output and input carry different variables".into()));
    }
    let to_coarse = |f: &Field| -> Result<Vec<f64>> {
        let mut v = SeparableOp::conservative(f.grid.clone(), coarse.clone())?.apply_stack(&f.values);
        if !f.normalized {
            norm.normalize(&mut v);
        }
        Ok(v)
    };
    let a = to_coarse(output)?;
    let b = to_coarse(input)?;
    let w = LatWeights::new(coarse);
    let (nlat, nlon) = coarse.shape();
    let (mut num, mut den) = (0.0, 0.0);
    for (k, (x, y)) in a.iter().zip(&b).enumerate() {
        let wk = w.w[(k / nlon) % nlat];
        num += wk * (x - y).powi(2);
        den += wk * y * y;
    }
    if den <= 0.0 {
        return Err(Error::Data("coarse input has zero energy".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableScores {
    pub var: String,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mean_grad_norm: f64,
    pub final_energy: f64,
    /// Mean gradient norm per step across members, ordered from the first
    /// reverse step to the last.
    pub per_step: Vec<f64>,
}

impl TraceSummary {
    pub fn from_traces(traces: &[GradientTrace]) -> Option<Self> {
        let steps = traces.first()?.records.len();
        if steps == 0 {
            return None;
        }
        let m = traces.len() as f64;
        let per_step = (0..steps).map(|i| traces.iter().map(|t| t.records[i].grad_norm).sum::<f64>() / m).collect();
        Some(TraceSummary {
            mean_grad_norm: traces.iter().map(GradientTrace::mean_grad_norm).sum::<f64>() / m,
            final_energy: traces.iter().map(|t| t.records[steps - 1].energy).sum::<f64>() / m,
            per_step,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: RunMeta,
    pub percentile: f64,
    pub scores: Vec<VariableScores>,
    pub psd: Vec<Vec<f64>>,
    pub bias: Vec<BiasSummary>,
    pub trace: Option<TraceSummary>,
    pub coarse_consistency: Option<f64>,
    pub terrain_correlation: Option<TerrainCorrelation>,
}

impl MetricReport {
    /// Scores of the `q`-th percentile fields of `outputs` against `truth`,
    /// plus spectra of `outputs` and the pooled bias of `outputs - truth`.
    pub fn evaluate(meta: RunMeta, outputs: &[Field], truth: &[Field], q: f64) -> Result<Self> {
        let qm = percentile_field(outputs, q)?;
        let qr = percentile_field(truth, q)?;
        let mae = lat_weighted_mae(&qm, &qr)?;
        let rmse = lat_weighted_rmse(&qm, &qr)?;
        let scores = qm
            .vars
            .iter()
            .zip(mae.into_iter().zip(rmse))
            .map(|(v, (mae, rmse))| VariableScores { var: v.clone(), mae, rmse })
            .collect();
        let report = MetricReport {
            meta,
            percentile: q,
            scores,
            psd: mean_zonal_psd(outputs)?,
            bias: bias_distribution(outputs, truth)?,
            trace: None,
            coarse_consistency: None,
            terrain_correlation: None,
        };
        report.check()?;
        Ok(report)
    }

    pub fn check(&self) -> Result<()> {
        for s in &self.scores {
            if !(s.mae.is_finite() && s.rmse.is_finite()) {
                return Err(Error::Data(format!("non-finite score for {}", s.var)));
            }
            if s.mae > s.rmse * (1.0 + 1e-12) + 1e-300 {
                return Err(Error::Data(format!("MAE {} exceeds RMSE {} for {}", s.mae, s.rmse, s.var)));
            }
        }
        if self.psd.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite spectrum".into()));
        }
        Ok(())
    }

    pub fn mae(&self, var: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.var == var).map(|s| s.mae)
    }

    /// Mean of per-variable MAE divided by `scale` (one entry per variable),
    /// so variables in different units contribute comparably.
    pub fn scaled_mae(&self, scale: &[f64]) -> f64 {
        self.scores.iter().zip(scale).map(|(s, d)| s.mae / d).sum::<f64>() / self.scores.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `wavenumber,<var>...` rows.
    pub fn spectra_csv(&self) -> String {
        let mut out = String::from("wavenumber");
        for s in &self.scores {
            let _ = write!(out, ",{}", s.var);
        }
        out.push('\n');
        let n = self.psd.first().map_or(0, Vec::len);
        for k in 0..n {
            let _ = write!(out, "{k}");
            for p in &self.psd {
                let _ = write!(out, ",{:e}", p[k]);
            }
            out.push('\n');
        }
        out
    }

    pub fn bias_csv(&self) -> String {
        let mut out = String::from("var,mean,std,p5,p25,p50,p75,p95\n");
        for (s, b) in self.scores.iter().zip(&self.bias) {
            let _ = writeln!(out, "{},{},{},{},{},{},{},{}", s.var, b.mean, b.std, b.p5, b.p25, b.p50, b.p75, b.p95);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Timestamp;
    use std::sync::Arc;

    fn field(nlat: usize, nlon: usize, values: Vec<f64>) -> Field {
        let g = Arc::new(Grid::equiangular(nlat, nlon).unwrap());
        let c = values.len() / (nlat * nlon);
        let names = (0..c).map(|i| format!("v{i}")).collect();
        let units = (0..c).map(|_| "1".to_string()).collect();
        Field::new(g, values, names, units, Timestamp::new(2000, 1, 1, 0).unwrap(), false).unwrap()
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        let seq: Vec<Field> = (1..=100).map(|i| field(2, 4, vec![i as f64; 8])).collect();
        let p = percentile_field(&seq, 99.0).unwrap();
        assert!(p.values.iter().all(|v| (v - 99.01).abs() < 1e-12));
        let sym: Vec<Field> = [-3.0, 3.0, -1.0, 1.0].iter().map(|v| field(2, 4, vec![*v; 8])).collect();
        assert!(percentile_field(&sym, 50.0).unwrap().values.iter().all(|v| v.abs() < 1e-15));
        assert!(percentile_field(&[], 99.0).is_err());
        assert!(percentile_field(&seq, 100.0).is_err());
    }

    #[test]
    fn constant_offset_scores_exactly() {
        let a = field(4, 8, (0..64).map(|i| i as f64 * 0.1).collect());
        let b = field(4, 8, a.values.iter().map(|v| v + 0.5).collect());
        assert_eq!(lat_weighted_mae(&a, &a).unwrap(), vec![0.0, 0.0]);
        for v in lat_weighted_mae(&a, &b).unwrap().into_iter().chain(lat_weighted_rmse(&a, &b).unwrap()) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_concentrates_at_its_wavenumber() {
        let (nlat, nlon) = (4, 32);
        let mut v = vec![0.0; nlat * nlon];
        for i in 0..nlat {
            for j in 0..nlon {
                v[i * nlon + j] = 2.0 + (3.0 * std::f64::consts::TAU * j as f64 / nlon as f64).cos();
            }
        }
        let p = &zonal_psd(&field(nlat, nlon, v)).unwrap()[0];
        let non_dc: f64 = p[1..].iter().sum();
        assert!(p[3] / non_dc > 0.99);
        assert!((p[0] - 4.0).abs() < 1e-12);
        assert!((non_dc - 0.5).abs() < 1e-12);
        let flat = zonal_psd(&field(nlat, nlon, vec![1.5; nlat * nlon])).unwrap();
        assert!(flat[0][1..].iter().all(|x| x.abs() < 1e-20));
    }

    #[test]
    fn spectral_distance_closed_forms() {
        let a = vec![1.0, 2.0, 4.0, 8.0];
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert_eq!(log_spectral_distance(&a, &a, 0..4).unwrap(), 0.0);
        assert!((log_spectral_distance(&b, &a, 1..4).unwrap() - 3.010299956639812).abs() < 1e-12);
        assert_eq!(log_spectral_distance(&a, &b, 1..4).unwrap(), log_spectral_distance(&b, &a, 1..4).unwrap());
        assert!(log_spectral_distance(&a, &b, 2..9).is_err());
        assert!(log_spectral_distance(&[0.0, 1.0], &[1.0, 1.0], 0..2).is_err());
    }

    #[test]
    fn shifted_output_has_unit_bias() {
        let r = field(4, 8, (0..32).map(|i| (i as f64).sin()).collect());
        let o = field(4, 8, r.values.iter().map(|v| v + 1.0).collect());
        let b = &bias_distribution(&[o.clone()], &[r.clone()]).unwrap()[0];
        assert!((b.mean - 1.0).abs() < 1e-12 && b.std < 1e-7);
        assert!([b.p5, b.p25, b.p50, b.p75, b.p95].iter().all(|q| (q - 1.0).abs() < 1e-12));
        let z = &bias_distribution(&[r.clone()], &[r]).unwrap()[0];
        assert_eq!(*z, BiasSummary::default());
    }

    #[test]
    fn wind_against_elevation() {
        let (nlat, nlon) = (4, 8);
        let n = nlat * nlon;
        let dem: Vec<f64> = (0..n).map(|k| (k % 5) as f64 * 100.0).collect();
        let lsm: Vec<f64> = (0..n).map(|k| if k % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let speed: Vec<f64> = dem.iter().map(|h| 1000.0 - h).collect();
        let f = |u: Vec<f64>| {
            let g = Arc::new(Grid::equiangular(nlat, nlon).unwrap());
            let vals = [u, vec![0.0; n]].concat();
            let t = Timestamp::new(2000, 1, 1, 0).unwrap();
            Field::new(g, vals, vec!["u10".into(), "v10".into()], vec!["m s-1".into(); 2], t, false).unwrap()
        };
        let r = terrain_correlation(&[f(speed)], &dem, &lsm).unwrap();
        assert!((r.r + 1.0).abs() < 1e-12 && !r.degenerate);
        let flat = terrain_correlation(&[f((0..n).map(|k| k as f64).collect())], &vec![7.0; n], &lsm).unwrap();
        assert_eq!(flat, TerrainCorrelation { r: 0.0, degenerate: true });
        assert!(terrain_correlation(&[f(vec![1.0; n])], &dem, &vec![0.0; n]).is_err());
    }
}
