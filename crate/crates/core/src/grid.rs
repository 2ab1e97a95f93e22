//! Regular latitude-longitude grids, latitude weights and the separable
//! linear operators that move fields between grids.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::field::Field;
use crate::{Error, Result};

/// Positions closer than this (in units of one cell) to a cell center are
/// snapped onto it, so identical grids interpolate exactly.
const SNAP: f64 = 1e-9;

/// A regular latitude-longitude grid described by cell centers and edges.
///
/// Latitudes increase from south to north. Longitude cells all have the same
/// width; when `periodic_lon` holds they tile the full circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    lat_centers: Vec<f64>,
    lon_centers: Vec<f64>,
    lat_bounds: Vec<f64>,
    lon_bounds: Vec<f64>,
    periodic_lon: bool,
}

/// Serialized form: centers and the periodic flag; bounds are derived.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lat_centers: Vec<f64>,
    pub lon_centers: Vec<f64>,
    pub periodic_lon: bool,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;
    fn try_from(s: GridSpec) -> Result<Self> {
        Grid::from_centers(s.lat_centers, s.lon_centers, s.periodic_lon)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec { lat_centers: g.lat_centers, lon_centers: g.lon_centers, periodic_lon: g.periodic_lon }
    }
}

impl Grid {
    /// Equiangular cell-center grid covering the globe with periodic longitude.
    pub fn equiangular(nlat: usize, nlon: usize) -> Result<Self> {
        if nlat < 2 || nlon < 2 {
            return Err(Error::Grid(format!("need at least 2x2 cells, got {nlat}x{nlon}")));
        }
        let dlat = 180.0 / nlat as f64;
        let dlon = 360.0 / nlon as f64;
        let grid = Grid {
            lat_centers: (0..nlat).map(|i| -90.0 + (i as f64 + 0.5) * dlat).collect(),
            lon_centers: (0..nlon).map(|j| (j as f64 + 0.5) * dlon).collect(),
            lat_bounds: (0..=nlat).map(|i| -90.0 + i as f64 * dlat).collect(),
            lon_bounds: (0..=nlon).map(|j| j as f64 * dlon).collect(),
            periodic_lon: true,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid from arbitrary increasing latitude centers (e.g. Gaussian
    /// latitudes) and uniformly spaced longitude centers. Latitude edges are
    /// midpoints between centers; the outermost edges mirror the first and
    /// last spacing and are clipped to the poles.
    pub fn from_centers(lat: Vec<f64>, lon: Vec<f64>, periodic_lon: bool) -> Result<Self> {
        if lat.len() < 2 || lon.len() < 2 {
            return Err(Error::Grid(format!("need at least 2x2 cells, got {}x{}", lat.len(), lon.len())));
        }
        let n = lat.len();
        let mut lat_bounds = Vec::with_capacity(n + 1);
        lat_bounds.push((lat[0] - 0.5 * (lat[1] - lat[0])).max(-90.0));
        lat_bounds.extend(lat.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        lat_bounds.push((lat[n - 1] + 0.5 * (lat[n - 1] - lat[n - 2])).min(90.0));
        let dlon = if periodic_lon { 360.0 / lon.len() as f64 } else { lon[1] - lon[0] };
        let start = lon[0] - 0.5 * dlon;
        let lon_bounds = (0..=lon.len()).map(|j| start + j as f64 * dlon).collect();
        let grid = Grid { lat_centers: lat, lon_centers: lon, lat_bounds, lon_bounds, periodic_lon };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        let (lat, lon) = (&self.lat_centers, &self.lon_centers);
        if lat.iter().chain(lon).any(|v| !v.is_finite()) {
            return Err(Error::Grid("non-finite coordinate".into()));
        }
        if lat.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Grid("latitude centers must be strictly increasing".into()));
        }
        if lat.iter().any(|&v| v <= -90.0 || v >= 90.0) {
            return Err(Error::Grid("latitude centers must lie strictly inside (-90, 90)".into()));
        }
        let b = &self.lat_bounds;
        if b[0] < -90.0 || b[b.len() - 1] > 90.0 || (0..lat.len()).any(|i| !(b[i] < lat[i] && lat[i] < b[i + 1])) {
            return Err(Error::Grid("latitude bounds do not bracket centers".into()));
        }
        let dlon = lon[1] - lon[0];
        if dlon <= 0.0 || lon.windows(2).any(|w| ((w[1] - w[0]) - dlon).abs() > 1e-6 * dlon.max(1.0)) {
            return Err(Error::Grid("longitude centers must be uniformly increasing".into()));
        }
        if self.periodic_lon && ((lon.len() as f64 * dlon) - 360.0).abs() > 1e-6 {
            return Err(Error::Grid(format!("periodic longitude cells of {dlon} deg do not tile 360 deg")));
        }
        Ok(())
    }

    pub fn nlat(&self) -> usize {
        self.lat_centers.len()
    }

    pub fn nlon(&self) -> usize {
        self.lon_centers.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nlat(), self.nlon())
    }

    pub fn len(&self) -> usize {
        self.nlat() * self.nlon()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lat_centers(&self) -> &[f64] {
        &self.lat_centers
    }

    pub fn lon_centers(&self) -> &[f64] {
        &self.lon_centers
    }

    pub fn lat_bounds(&self) -> &[f64] {
        &self.lat_bounds
    }

    pub fn lon_bounds(&self) -> &[f64] {
        &self.lon_bounds
    }

    pub fn periodic_lon(&self) -> bool {
        self.periodic_lon
    }

    pub fn lon_width(&self) -> f64 {
        self.lon_bounds[1] - self.lon_bounds[0]
    }

    /// Spherical band area `sin(upper) - sin(lower)` of each latitude row.
    pub fn band_areas(&self) -> Vec<f64> {
        self.lat_bounds.windows(2).map(|w| w[1].to_radians().sin() - w[0].to_radians().sin()).collect()
    }

    /// Cosine of each row's center latitude.
    pub fn cos_lat(&self) -> Vec<f64> {
        self.lat_centers.iter().map(|v| v.to_radians().cos()).collect()
    }
}

/// Per-row latitude weights proportional to `cos(lat)`, normalized to mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LatWeights {
    pub w: Vec<f64>,
}

impl LatWeights {
    pub fn new(grid: &Grid) -> Self {
        let c = grid.cos_lat();
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        LatWeights { w: c.into_iter().map(|v| v / mean).collect() }
    }

    pub fn squared(&self) -> Vec<f64> {
        self.w.iter().map(|v| v * v).collect()
    }
}

/// Area-weighted global mean of one channel plane.
pub fn area_mean(grid: &Grid, plane: &[f64]) -> f64 {
    let areas = grid.band_areas();
    let nlon = grid.nlon();
    let mut num = 0.0;
    let mut den = 0.0;
    for (row, a) in plane.chunks(nlon).zip(&areas) {
        num += a * row.iter().sum::<f64>();
        den += a * nlon as f64;
    }
    num / den
}

/// A linear map between grids that factors into a latitude matrix and a
/// longitude matrix: `out = lat * X * lon^T` for each channel plane `X`.
#[derive(Clone, Debug)]
pub struct SeparableOp {
    src: Arc<Grid>,
    dst: Arc<Grid>,
    lat: DMatrix<f64>,
    lon: DMatrix<f64>,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Rows normalized to sum to one; errors when a target row sees no source.
fn normalize_rows(mut m: DMatrix<f64>, coverage: &[f64], axis: &str) -> Result<DMatrix<f64>> {
    for i in 0..m.nrows() {
        let s: f64 = m.row(i).sum();
        if s <= 0.0 {
            return Err(Error::Grid(format!("{axis} cell {i} of the target grid does not overlap the source grid")));
        }
        if s < coverage[i] * (1.0 - 1e-9) {
            return Err(Error::Grid(format!("{axis} cell {i} of the target grid is only partly covered by the source grid")));
        }
        m.row_mut(i).unscale_mut(s);
    }
    Ok(m)
}

fn conservative_lat(src: &Grid, dst: &Grid) -> Result<DMatrix<f64>> {
    let sin = |d: f64| d.to_radians().sin();
    let (sb, db) = (src.lat_bounds(), dst.lat_bounds());
    let mut m = DMatrix::zeros(dst.nlat(), src.nlat());
    for i in 0..dst.nlat() {
        for k in 0..src.nlat() {
            let lo = db[i].max(sb[k]);
            let hi = db[i + 1].min(sb[k + 1]);
            if hi > lo {
                m[(i, k)] = sin(hi) - sin(lo);
            }
        }
    }
    normalize_rows(m, &dst.band_areas(), "latitude")
}

fn conservative_lon(src: &Grid, dst: &Grid) -> Result<DMatrix<f64>> {
    let (sb, db) = (src.lon_bounds(), dst.lon_bounds());
    let shifts: &[f64] = if src.periodic_lon() { &[-360.0, 0.0, 360.0] } else { &[0.0] };
    let mut m = DMatrix::zeros(dst.nlon(), src.nlon());
    for j in 0..dst.nlon() {
        for k in 0..src.nlon() {
            m[(j, k)] = shifts.iter().map(|s| overlap(db[j], db[j + 1], sb[k] + s, sb[k + 1] + s)).sum();
        }
    }
    let widths = vec![dst.lon_width(); dst.nlon()];
    normalize_rows(m, &widths, "longitude")
}

/// Fractional position of `x` among sorted `centers`, clamped at both ends.
fn clamped_position(centers: &[f64], x: f64) -> (usize, usize, f64) {
    let n = centers.len();
    if x <= centers[0] {
        return (0, 0, 0.0);
    }
    if x >= centers[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let i = centers.partition_point(|&c| c <= x) - 1;
    let f = (x - centers[i]) / (centers[i + 1] - centers[i]);
    if f < SNAP {
        (i, i + 1, 0.0)
    } else if f > 1.0 - SNAP {
        (i + 1, i + 1, 0.0)
    } else {
        (i, i + 1, f)
    }
}

fn bilinear_lat(src: &Grid, dst: &Grid) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dst.nlat(), src.nlat());
    for (i, &phi) in dst.lat_centers().iter().enumerate() {
        let (a, b, f) = clamped_position(src.lat_centers(), phi);
        m[(i, a)] += 1.0 - f;
        m[(i, b)] += f;
    }
    m
}

fn bilinear_lon(src: &Grid, dst: &Grid) -> DMatrix<f64> {
    let n = src.nlon();
    let mut m = DMatrix::zeros(dst.nlon(), n);
    let c0 = src.lon_centers()[0];
    let d = src.lon_width();
    for (j, &lam) in dst.lon_centers().iter().enumerate() {
        if src.periodic_lon() {
            let mut p = ((lam - c0) / d).rem_euclid(n as f64);
            if (p - p.round()).abs() < SNAP {
                p = p.round() % n as f64;
            }
            let k = p.floor() as usize % n;
            let f = p - p.floor();
            m[(j, k)] += 1.0 - f;
            m[(j, (k + 1) % n)] += f;
        } else {
            let (a, b, f) = clamped_position(src.lon_centers(), lam);
            m[(j, a)] += 1.0 - f;
            m[(j, b)] += f;
        }
    }
    m
}

impl SeparableOp {
    /// Overlap-area-weighted averaging onto a coarser (or equal) grid.
    pub fn conservative(src: Arc<Grid>, dst: Arc<Grid>) -> Result<Self> {
        if dst.nlat() > src.nlat() || dst.nlon() > src.nlon() {
            return Err(Error::Grid(format!(
                "conservative regridding needs a coarser target, got {:?} -> {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        let lat = conservative_lat(&src, &dst)?;
        let lon = conservative_lon(&src, &dst)?;
        Ok(SeparableOp { src, dst, lat, lon })
    }

    /// Bilinear interpolation of cell-center values onto a finer (or equal)
    /// grid, wrapping in longitude and clamping beyond the outermost rows.
    pub fn bilinear(src: Arc<Grid>, dst: Arc<Grid>) -> Result<Self> {
        if dst.nlat() < src.nlat() || dst.nlon() < src.nlon() {
            return Err(Error::Grid(format!(
                "interpolation needs a finer target, got {:?} -> {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        let lat = bilinear_lat(&src, &dst);
        let lon = bilinear_lon(&src, &dst);
        Ok(SeparableOp { src, dst, lat, lon })
    }

    /// Coarsen onto `coarse`, then re-project onto `fine`.
    ///
    /// The re-projection is bilinear interpolation preceded by a small
    /// correction on the coarse grid, chosen so that coarsening the result
    /// again reproduces the coarse field exactly.
    pub fn unified(src: Arc<Grid>, coarse: Arc<Grid>, fine: Arc<Grid>) -> Result<Self> {
        let down = SeparableOp::conservative(src, coarse.clone())?;
        let up = SeparableOp::consistent_upsample(coarse, fine)?;
        Ok(up.then_after(&down))
    }

    /// Interpolation from `coarse` to `fine` whose conservative coarsening is
    /// the identity on the coarse grid.
    pub fn consistent_upsample(coarse: Arc<Grid>, fine: Arc<Grid>) -> Result<Self> {
        let up = SeparableOp::bilinear(coarse.clone(), fine.clone())?;
        let back = SeparableOp::conservative(fine, coarse)?;
        let invert = |m: DMatrix<f64>, axis: &str| {
            m.try_inverse()
                .ok_or_else(|| Error::Grid(format!("{axis} interpolation cannot be made coarse-consistent")))
        };
        let lat_fix = invert(&back.lat * &up.lat, "latitude")?;
        let lon_fix = invert(&back.lon * &up.lon, "longitude")?;
        Ok(SeparableOp { src: up.src, dst: up.dst, lat: &up.lat * lat_fix, lon: &up.lon * lon_fix })
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &SeparableOp) -> SeparableOp {
        assert_eq!(*first.dst, *self.src, "operator grids do not chain");
        SeparableOp {
            src: first.src.clone(),
            dst: self.dst.clone(),
            lat: &self.lat * &first.lat,
            lon: &self.lon * &first.lon,
        }
    }

    pub fn src(&self) -> &Arc<Grid> {
        &self.src
    }

    pub fn dst(&self) -> &Arc<Grid> {
        &self.dst
    }

    pub fn lat_matrix(&self) -> &DMatrix<f64> {
        &self.lat
    }

    pub fn lon_matrix(&self) -> &DMatrix<f64> {
        &self.lon
    }

    /// Apply to one row-major channel plane on the source grid.
    pub fn apply_plane(&self, x: &[f64]) -> Vec<f64> {
        let (m, n) = self.src.shape();
        assert_eq!(x.len(), m * n, "plane does not match source grid");
        let x = DMatrix::from_row_slice(m, n, x);
        let y = &self.lat * x * self.lon.transpose();
        row_major(&y)
    }

    /// Adjoint map: one plane on the destination grid back to the source grid.
    pub fn adjoint_plane(&self, y: &[f64]) -> Vec<f64> {
        let (m, n) = self.dst.shape();
        assert_eq!(y.len(), m * n, "plane does not match destination grid");
        let y = DMatrix::from_row_slice(m, n, y);
        let x = self.lat.transpose() * y * &self.lon;
        row_major(&x)
    }

    /// Apply to every channel of a stacked `C x nlat x nlon` buffer.
    pub fn apply_stack(&self, x: &[f64]) -> Vec<f64> {
        x.chunks(self.src.len()).flat_map(|p| self.apply_plane(p)).collect()
    }

    pub fn adjoint_stack(&self, y: &[f64]) -> Vec<f64> {
        y.chunks(self.dst.len()).flat_map(|p| self.adjoint_plane(p)).collect()
    }

    pub fn apply(&self, field: &Field) -> Result<Field> {
        if *field.grid != *self.src {
            return Err(Error::Grid(format!(
                "field on {:?} grid, operator expects {:?}",
                field.grid.shape(),
                self.src.shape()
            )));
        }
        if field.nchan() == 0 {
            return Err(Error::Shape("field has no channels".into()));
        }
        field.with_values(self.dst.clone(), self.apply_stack(&field.values))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in m.row_iter() {
        out.extend(r.iter());
    }
    out
}

/// Conservative, area-weighted coarsening of `field` onto `target`.
pub fn conservative_regrid(field: &Field, target: &Arc<Grid>) -> Result<Field> {
    SeparableOp::conservative(field.grid.clone(), target.clone())?.apply(field)
}

/// Bilinear re-projection of `field` onto a finer `target`.
pub fn bilinear_regrid(field: &Field, target: &Arc<Grid>) -> Result<Field> {
    SeparableOp::bilinear(field.grid.clone(), target.clone())?.apply(field)
}

/// Coarsen to `coarse`, then re-project onto the shared fine grid.
pub fn unified_projection(field: &Field, coarse: &Arc<Grid>, fine: &Arc<Grid>) -> Result<Field> {
    SeparableOp::unified(field.grid.clone(), coarse.clone(), fine.clone())?.apply(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_equiangular_grid_centers() {
        let g = Grid::equiangular(2, 4).unwrap();
        assert_eq!(g.lat_centers(), &[-45.0, 45.0]);
        assert_eq!(g.lon_centers(), &[45.0, 135.0, 225.0, 315.0]);
        assert!(g.periodic_lon());
        assert!(Grid::equiangular(1, 4).is_err());
        assert!(Grid::equiangular(4, 1).is_err());
    }

    #[test]
    fn reanalysis_scale_grids_have_expected_spacing() {
        let g = Grid::equiangular(720, 1440).unwrap();
        assert!((g.lat_centers()[1] - g.lat_centers()[0] - 0.25).abs() < 1e-12);
        let w = LatWeights::new(&g);
        // strictly decreasing from equator to pole rows
        assert!(w.w[360..].windows(2).all(|p| p[1] < p[0]));
        let c = Grid::equiangular(36, 72).unwrap();
        assert!((c.lon_width() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn weights_of_four_row_grid() {
        let g = Grid::equiangular(4, 8).unwrap();
        let w = LatWeights::new(&g);
        let raw: Vec<f64> = [-67.5f64, -22.5, 22.5, 67.5].iter().map(|d| d.to_radians().cos()).collect();
        let mean = raw.iter().sum::<f64>() / 4.0;
        for (a, r) in w.w.iter().zip(&raw) {
            assert!((a - r / mean).abs() < 1e-14);
        }
        assert!((w.w[0] - 0.585786).abs() < 1e-6 && (w.w[1] - 1.414214).abs() < 1e-6);
        let two = LatWeights::new(&Grid::equiangular(2, 4).unwrap());
        assert!((two.w[0] - 1.0).abs() < 1e-15 && (two.w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_like_centers_get_midpoint_bounds() {
        let g = Grid::from_centers(vec![-60.0, -20.0, 20.0, 60.0], vec![0.0, 90.0, 180.0, 270.0], true).unwrap();
        assert_eq!(g.lat_bounds(), &[-80.0, -40.0, 0.0, 40.0, 80.0]);
        assert_eq!(g.lon_bounds()[0], -45.0);
        assert!(Grid::from_centers(vec![10.0, 0.0], vec![0.0, 180.0], true).is_err());
        assert!(Grid::from_centers(vec![0.0, 90.0], vec![0.0, 180.0], true).is_err());
        assert!(Grid::from_centers(vec![0.0, 10.0], vec![0.0, 100.0], true).is_err());
    }

    #[test]
    fn grid_round_trips_through_json() {
        let g = Grid::equiangular(6, 12).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: Grid = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn conservative_rejects_finer_target() {
        let a = Arc::new(Grid::equiangular(4, 8).unwrap());
        let b = Arc::new(Grid::equiangular(8, 16).unwrap());
        assert!(SeparableOp::conservative(a.clone(), b.clone()).is_err());
        assert!(SeparableOp::bilinear(b, a).is_err());
    }

    #[test]
    fn unified_is_coarse_consistent_for_non_integer_ratio() {
        let src = Arc::new(Grid::equiangular(20, 40).unwrap());
        let coarse = Arc::new(Grid::equiangular(6, 12).unwrap());
        let fine = Arc::new(Grid::equiangular(32, 64).unwrap());
        let u = SeparableOp::unified(src.clone(), coarse.clone(), fine.clone()).unwrap();
        let back = SeparableOp::conservative(fine, coarse.clone()).unwrap();
        let direct = SeparableOp::conservative(src, coarse).unwrap();
        let x: Vec<f64> = (0..800).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let a = back.apply_plane(&u.apply_plane(&x));
        let b = direct.apply_plane(&x);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9 * q.abs().max(1.0));
        }
    }
}
