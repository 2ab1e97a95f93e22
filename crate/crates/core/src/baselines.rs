//! Classical downscaling baselines: bilinear interpolation and bias
//! correction with spatial disaggregation (BCSD).

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::json;

use crate::container::Container;
use crate::field::Field;
use crate::grid::{bilinear_regrid, Grid, SeparableOp};
use crate::metrics::sorted_quantile;
use crate::{Error, Result};

pub const QUANTILE_MAP_KIND: &str = "quantile_map";

/// Plain bilinear interpolation of the coarse input onto the fine grid.
pub fn bilinear_downscale(y_raw: &Field, fine: &Arc<Grid>) -> Result<Field> {
    bilinear_regrid(y_raw, fine)
}

/// Per-cell, per-variable empirical quantile transfer from a source series
/// to a reference series.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileMap {
    pub grid: Arc<Grid>,
    pub vars: Vec<String>,
    pub knots: usize,
    /// `cells x knots`, cells ordered as field values (`var`, `lat`, `lon`).
    source: Vec<f64>,
    reference: Vec<f64>,
}

fn cell_quantiles(seq: &[Field], knots: usize) -> Vec<f64> {
    let cells = seq[0].values.len();
    let mut out = vec![0.0; cells * knots];
    out.par_chunks_mut(knots).enumerate().for_each(|(k, q)| {
        let mut column: Vec<f64> = seq.iter().map(|f| f.values[k]).collect();
        column.sort_by(f64::total_cmp);
        for (i, v) in q.iter_mut().enumerate() {
            *v = sorted_quantile(&column, 100.0 * i as f64 / (knots - 1) as f64);
        }
    });
    out
}

impl QuantileMap {
    /// Fit on training-period series sharing one coarse grid, with knots at
    /// `knots` evenly spaced probabilities from 0 to 1 inclusive.
    pub fn fit(source: &[Field], reference: &[Field], knots: usize) -> Result<Self> {
        if knots < 2 {
            return Err(Error::Invalid("a quantile map needs at least two knots".into()));
        }
        if source.len() < knots || reference.len() < knots {
            return Err(Error::Data(format!(
                "series of {} and {} steps are shorter than {knots} knots",
                source.len(),
                reference.len()
            )));
        }
        let first = &reference[0];
        if let Some(f) = source.iter().chain(reference).find(|f| !f.aligned_with(first)) {
            return Err(Error::Grid(format!(
                "quantile map series disagree: {:?} {:?} vs {:?} {:?}",
                f.grid.shape(),
                f.vars,
                first.grid.shape(),
                first.vars
            )));
        }
        Ok(QuantileMap {
            grid: first.grid.clone(),
            vars: first.vars.clone(),
            knots,
            source: cell_quantiles(source, knots),
            reference: cell_quantiles(reference, knots),
        })
    }

    pub fn source_quantiles(&self, cell: usize) -> &[f64] {
        &self.source[cell * self.knots..(cell + 1) * self.knots]
    }

    pub fn reference_quantiles(&self, cell: usize) -> &[f64] {
        &self.reference[cell * self.knots..(cell + 1) * self.knots]
    }

    /// Map one value of `cell`: piecewise linear between knots, constant
    /// offset beyond the end knots.
    pub fn map_value(&self, cell: usize, x: f64) -> f64 {
        let src = self.source_quantiles(cell);
        let dst = self.reference_quantiles(cell);
        let last = self.knots - 1;
        if x <= src[0] {
            return dst[0] + (x - src[0]);
        }
        if x >= src[last] {
            return dst[last] + (x - src[last]);
        }
        let i = src.partition_point(|s| *s <= x) - 1;
        let span = src[i + 1] - src[i];
        if span <= 0.0 {
            return dst[i];
        }
        dst[i] + (dst[i + 1] - dst[i]) * (x - src[i]) / span
    }

    pub fn apply(&self, field: &Field) -> Result<Field> {
        if *field.grid != *self.grid || field.vars != self.vars {
            return Err(Error::Grid("field does not match the quantile map's grid and variables".into()));
        }
        let values = field.values.iter().enumerate().map(|(k, x)| self.map_value(k, *x)).collect();
        field.with_values(field.grid.clone(), values)
    }

    pub fn to_container(&self) -> Container {
        let meta = json!({ "grid": &*self.grid, "vars": self.vars, "knots": self.knots });
        let mut c = Container::new(QUANTILE_MAP_KIND, meta);
        c.push("source", self.source.clone());
        c.push("reference", self.reference.clone());
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Meta {
            grid: Grid,
            vars: Vec<String>,
            knots: usize,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Data(format!("quantile map header: {e}")))?;
        let n = meta.grid.len() * meta.vars.len() * meta.knots;
        let source = c.section("source")?.to_vec();
        let reference = c.section("reference")?.to_vec();
        if source.len() != n || reference.len() != n || meta.knots < 2 {
            return Err(Error::Data("quantile map sections do not match its header".into()));
        }
        Ok(QuantileMap { grid: Arc::new(meta.grid), vars: meta.vars, knots: meta.knots, source, reference })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        QuantileMap::from_container(&Container::read(path, QUANTILE_MAP_KIND)?)
    }
}

/// Time mean of a sequence.
pub fn climatology(seq: &[Field]) -> Result<Field> {
    let first = seq.first().ok_or_else(|| Error::Data("climatology of an empty sequence".into()))?;
    let mut acc = vec![0.0; first.values.len()];
    for f in seq {
        if !f.aligned_with(first) {
            return Err(Error::Grid("climatology over fields on different grids".into()));
        }
        acc.iter_mut().zip(&f.values).for_each(|(a, v)| *a += v);
    }
    let n = seq.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    first.with_values(first.grid.clone(), acc)
}

/// Bias-correct each step on the quantile map's coarse grid, then add the
/// interpolated anomaly to the fine training climatology.
///
/// The anomaly is re-projected with the coarse-consistent interpolator, so
/// the output's coarse averages equal the bias-corrected input.
pub fn bcsd_downscale(y_raw: &[Field], qmap: &QuantileMap, climatology: Option<&Field>, fine: &Arc<Grid>) -> Result<Vec<Field>> {
    let clim = climatology.ok_or_else(|| Error::Data("BCSD needs a fine-grid training climatology".into()))?;
    if *clim.grid != **fine || clim.vars != qmap.vars {
        return Err(Error::Grid("climatology is not on the fine grid with the map's variables".into()));
    }
    let coarse = qmap.grid.clone();
    let clim_coarse = SeparableOp::conservative(fine.clone(), coarse.clone())?.apply_stack(&clim.values);
    let up = SeparableOp::consistent_upsample(coarse.clone(), fine.clone())?;
    y_raw
        .iter()
        .map(|y| {
            let on_coarse = SeparableOp::conservative(y.grid.clone(), coarse.clone())?.apply(y)?;
            let corrected = qmap.apply(&on_coarse)?;
            let anomaly: Vec<f64> = corrected.values.iter().zip(&clim_coarse).map(|(a, c)| a - c).collect();
            let values = up.apply_stack(&anomaly).iter().zip(&clim.values).map(|(a, c)| a + c).collect();
            y.with_values(fine.clone(), values)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Timestamp;

    fn series(n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<Field> {
        let g = Arc::new(Grid::equiangular(2, 4).unwrap());
        (0..n)
            .map(|i| {
                let t = Timestamp::from_ordinal(2000, 1 + i as u32 % 365, 0).unwrap();
                Field::new(g.clone(), (0..8).map(|k| f(i, k)).collect(), vec!["a".into()], vec!["1".into()], t, false).unwrap()
            })
            .collect()
    }

    fn noise(i: usize, k: usize) -> f64 {
        ((i * 7919 + k * 104_729) as f64 * 0.618_033_988_75).fract() * 4.0 - 2.0
    }

    #[test]
    fn equal_series_give_identity() {
        let s = series(200, noise);
        let q = QuantileMap::fit(&s, &s, 100).unwrap();
        for c in 0..8 {
            assert_eq!(q.source_quantiles(c), q.reference_quantiles(c));
            for x in [-5.0, -1.3, 0.0, 0.77, 9.0] {
                assert!((q.map_value(c, x) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_source_is_shifted_back() {
        let r = series(150, noise);
        let s = series(150, |i, k| noise(i, k) + 2.0);
        let q = QuantileMap::fit(&s, &r, 100).unwrap();
        for c in 0..8 {
            for x in [-3.0, 0.1, 1.9, 4.5] {
                assert!((q.map_value(c, x) - (x - 2.0)).abs() < 1e-12);
            }
        }
        assert!(QuantileMap::fit(&s[..50], &r[..50], 100).is_err());
    }

    #[test]
    fn container_round_trip_keeps_the_map() {
        let r = series(120, noise);
        let s = series(120, |i, k| 0.5 * noise(i, k).powi(3));
        let q = QuantileMap::fit(&s, &r, 10).unwrap();
        let back = QuantileMap::from_container(&Container::from_bytes(&q.to_container().to_bytes(), QUANTILE_MAP_KIND).unwrap()).unwrap();
        assert_eq!(q, back);
        assert!(Container::from_bytes(&q.to_container().to_bytes(), "denoiser").is_err());
    }

    #[test]
    fn zero_anomaly_returns_climatology() {
        let fine = Arc::new(Grid::equiangular(8, 16).unwrap());
        let coarse = Arc::new(Grid::equiangular(2, 4).unwrap());
        let t = Timestamp::new(2000, 1, 1, 0).unwrap();
        let clim_vals: Vec<f64> = (0..128).map(|k| (k as f64 * 0.37).sin() * 3.0 + 10.0).collect();
        let clim = Field::new(fine.clone(), clim_vals, vec!["a".into()], vec!["1".into()], t, false).unwrap();
        let low = SeparableOp::conservative(fine.clone(), coarse).unwrap().apply(&clim).unwrap();
        let r = series(120, noise);
        let q = QuantileMap::fit(&r, &r, 20).unwrap();
        let out = bcsd_downscale(&[low.clone(), low], &q, Some(&clim), &fine).unwrap();
        for o in out {
            for (a, b) in o.values.iter().zip(&clim.values) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(bcsd_downscale(&[clim.clone()], &q, None, &fine).is_err());
    }
}
