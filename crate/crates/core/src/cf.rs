//! Read-only ingestion of classic-format NetCDF files (CDF-1 and CDF-2)
//! following CF naming: `psl`, `uas`, `vas` and `zg` become `msl`, `u10`,
//! `v10` and `z500`/`z250`, with geopotential height converted to
//! geopotential.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};

use crate::field::{Field, Timestamp};
use crate::grid::Grid;
use crate::{Error, Result};

/// Standard gravity, used to turn geopotential height into geopotential.
pub const GRAVITY: f64 = 9.80665;

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Text(String),
    Numbers(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct NcVar {
    pub name: String,
    pub dims: Vec<usize>,
    pub attrs: BTreeMap<String, AttrValue>,
    kind: u32,
    vsize: usize,
    begin: usize,
}

/// A parsed classic-format file held in memory.
#[derive(Clone, Debug)]
pub struct NcFile {
    pub dims: Vec<(String, usize)>,
    pub attrs: BTreeMap<String, AttrValue>,
    pub vars: Vec<NcVar>,
    numrecs: usize,
    record_dim: Option<usize>,
    record_size: usize,
    bytes: Vec<u8>,
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
    offset64: bool,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(format!("malformed NetCDF: {}", msg.into()))
}

fn type_size(kind: u32) -> Result<usize> {
    Ok(match kind {
        1 | 2 => 1,
        3 => 2,
        4 | 5 => 4,
        6 => 8,
        k => return Err(bad(format!("unsupported type code {k}"))),
    })
}

fn decode(kind: u32, raw: &[u8]) -> f64 {
    match kind {
        1 => raw[0] as i8 as f64,
        2 => raw[0] as f64,
        3 => i16::from_be_bytes([raw[0], raw[1]]) as f64,
        4 => i32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64,
        5 => f32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]) as f64,
        _ => f64::from_be_bytes(raw[..8].try_into().expect("eight bytes")),
    }
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.b.len()).ok_or_else(|| bad("truncated header"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn offset(&mut self) -> Result<usize> {
        if self.offset64 {
            let s = self.take(8)?;
            Ok(u64::from_be_bytes(s.try_into().expect("eight bytes")) as usize)
        } else {
            Ok(self.u32()? as usize)
        }
    }

    fn padded(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.take(n)?;
        self.take((4 - n % 4) % 4)?;
        Ok(s)
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.padded(n)?.to_vec()).map_err(|_| bad("non-UTF-8 name"))
    }

    /// A list header: `(tag, count)` or ABSENT.
    fn list(&mut self, tag: u32) -> Result<usize> {
        let t = self.u32()?;
        let n = self.u32()? as usize;
        match t {
            0 if n == 0 => Ok(0),
            t if t == tag => Ok(n),
            t => Err(bad(format!("expected list tag {tag}, found {t}"))),
        }
    }

    fn attrs(&mut self) -> Result<BTreeMap<String, AttrValue>> {
        let n = self.list(12)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let name = self.name()?;
            let kind = self.u32()?;
            let count = self.u32()? as usize;
            let size = type_size(kind)?;
            let raw = self.padded(count * size)?;
            let value = if kind == 2 {
                AttrValue::Text(String::from_utf8_lossy(raw).trim_end_matches('\0').to_string())
            } else {
                AttrValue::Numbers(raw.chunks_exact(size).map(|c| decode(kind, c)).collect())
            };
            out.insert(name, value);
        }
        Ok(out)
    }
}

impl NcFile {
    pub fn parse(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..3] != b"CDF" {
            return Err(bad("missing CDF magic"));
        }
        let offset64 = match bytes[3] {
            1 => false,
            2 => true,
            v => return Err(Error::Data(format!("NetCDF format version {v} is not supported (classic 1 or 2 only)"))),
        };
        let mut c = Cursor { b: &bytes, pos: 4, offset64 };
        let numrecs = c.u32()?;
        let numrecs = if numrecs == u32::MAX { 0 } else { numrecs as usize };
        let ndims = c.list(10)?;
        let mut dims = Vec::with_capacity(ndims);
        let mut record_dim = None;
        for i in 0..ndims {
            let name = c.name()?;
            let len = c.u32()? as usize;
            if len == 0 {
                record_dim = Some(i);
            }
            dims.push((name, len));
        }
        let attrs = c.attrs()?;
        let nvars = c.list(11)?;
        let mut vars = Vec::with_capacity(nvars);
        for _ in 0..nvars {
            let name = c.name()?;
            let nd = c.u32()? as usize;
            let ids = (0..nd).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if ids.iter().any(|d| *d >= dims.len()) {
                return Err(bad(format!("variable `{name}` refers to a missing dimension")));
            }
            let vattrs = c.attrs()?;
            let kind = c.u32()?;
            type_size(kind)?;
            let vsize = c.u32()? as usize;
            let begin = c.offset()?;
            vars.push(NcVar { name, dims: ids, attrs: vattrs, kind, vsize, begin });
        }
        let is_record = |v: &NcVar| record_dim.is_some() && v.dims.first() == record_dim.as_ref();
        let rec_vars: Vec<&NcVar> = vars.iter().filter(|v| is_record(v)).collect();
        let record_size = if rec_vars.len() == 1 {
            rec_vars[0].shape_product(&dims, numrecs) * type_size(rec_vars[0].kind)?
        } else {
            rec_vars.iter().map(|v| v.vsize).sum()
        };
        Ok(NcFile { dims, attrs, vars, numrecs, record_dim, record_size, bytes })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        NcFile::parse(bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn var(&self, name: &str) -> Option<&NcVar> {
        self.vars.iter().find(|v| v.name == name)
    }

    /// Dimension lengths of `var`, with the record dimension expanded.
    pub fn shape(&self, var: &NcVar) -> Vec<usize> {
        var.dims.iter().map(|d| if Some(*d) == self.record_dim { self.numrecs } else { self.dims[*d].1 }).collect()
    }

    pub fn dim_name(&self, id: usize) -> &str {
        &self.dims[id].0
    }

    /// All values of `name` in row-major order, with `scale_factor` and
    /// `add_offset` applied.
    pub fn read(&self, name: &str) -> Result<Vec<f64>> {
        let v = self.var(name).ok_or_else(|| Error::Data(format!("no variable `{name}`")))?;
        let size = type_size(v.kind)?;
        let is_record = self.record_dim.is_some() && v.dims.first() == self.record_dim.as_ref();
        let per = v.shape_product(&self.dims, 1);
        let (records, stride) = if is_record { (self.numrecs, self.record_size) } else { (1, 0) };
        let mut out = Vec::with_capacity(per * records);
        for r in 0..records {
            let start = v.begin + r * stride;
            let raw = self
                .bytes
                .get(start..start + per * size)
                .ok_or_else(|| bad(format!("data of `{name}` runs past the end of the file")))?;
            out.extend(raw.chunks_exact(size).map(|c| decode(v.kind, c)));
        }
        let num = |key: &str| match v.attrs.get(key) {
            Some(AttrValue::Numbers(x)) if !x.is_empty() => Some(x[0]),
            _ => None,
        };
        let fill = num("_FillValue").or_else(|| num("missing_value"));
        if let Some(f) = fill {
            if out.contains(&f) {
                return Err(Error::Data(format!("`{name}` contains missing values")));
            }
        }
        let (scale, offset) = (num("scale_factor").unwrap_or(1.0), num("add_offset").unwrap_or(0.0));
        if scale != 1.0 || offset != 0.0 {
            out.iter_mut().for_each(|x| *x = *x * scale + offset);
        }
        Ok(out)
    }

    pub fn text_attr(&self, var: &str, key: &str) -> Option<&str> {
        match self.var(var)?.attrs.get(key)? {
            AttrValue::Text(s) => Some(s),
            AttrValue::Numbers(_) => None,
        }
    }
}

impl NcVar {
    fn shape_product(&self, dims: &[(String, usize)], numrecs: usize) -> usize {
        self.dims.iter().map(|d| if dims[*d].1 == 0 { numrecs } else { dims[*d].1 }).product::<usize>().max(1)
    }
}

/// Parse CF time units such as `hours since 1850-01-01 00:00:00`.
pub fn parse_time_units(units: &str) -> Result<(f64, NaiveDateTime)> {
    let (unit, origin) = units
        .split_once(" since ")
        .ok_or_else(|| Error::Data(format!("time units `{units}` lack `since`")))?;
    let hours = match unit.trim() {
        "days" | "day" => 24.0,
        "hours" | "hour" => 1.0,
        "minutes" | "minute" => 1.0 / 60.0,
        "seconds" | "second" => 1.0 / 3600.0,
        u => return Err(Error::Data(format!("unsupported time unit `{u}`"))),
    };
    let origin = origin.trim().trim_end_matches('Z').replace('T', " ");
    let parsed = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(&origin, f).ok())
        .or_else(|| NaiveDate::parse_from_str(&origin, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)))
        .ok_or_else(|| Error::Data(format!("cannot parse time origin `{origin}`")))?;
    Ok((hours, parsed))
}

fn to_timestamp(origin: NaiveDateTime, hours: f64) -> Result<Timestamp> {
    let t = origin + Duration::minutes((hours * 60.0).round() as i64);
    // round to the nearest hour
    let t = t + Duration::minutes(if t.minute() >= 30 { 60 } else { 0 }) - Duration::minutes(t.minute() as i64);
    let d = t.date();
    Timestamp::new(chrono::Datelike::year(&d), chrono::Datelike::month(&d), chrono::Datelike::day(&d), t.hour())
}

fn find_var<'a>(nc: &'a NcFile, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| nc.var(n).map(|v| v.name.as_str()))
}

/// Map the CF variables found in `nc` to fields, one per time step.
///
/// Latitude is flipped to south-to-north when stored the other way.
/// Longitude is periodic when the spacing times the count spans 360 degrees.
pub fn read_cf(nc: &NcFile) -> Result<Vec<Field>> {
    let lat_name = find_var(nc, &["lat", "latitude"]).ok_or_else(|| Error::Data("no latitude coordinate".into()))?;
    let lon_name = find_var(nc, &["lon", "longitude"]).ok_or_else(|| Error::Data("no longitude coordinate".into()))?;
    let time_name = find_var(nc, &["time"]).ok_or_else(|| Error::Data("no time coordinate".into()))?;
    let mut lat = nc.read(lat_name)?;
    let lon = nc.read(lon_name)?;
    let flip = lat.len() > 1 && lat[0] > lat[1];
    if flip {
        lat.reverse();
    }
    let periodic = lon.len() > 1 && ((lon[1] - lon[0]) * lon.len() as f64 - 360.0).abs() < 1e-6;
    let grid = Arc::new(Grid::from_centers(lat, lon, periodic)?);
    let (nlat, nlon) = grid.shape();
    let units = nc.text_attr(time_name, "units").ok_or_else(|| Error::Data("time has no units".into()))?;
    if let Some(cal) = nc.text_attr(time_name, "calendar") {
        if !matches!(cal, "standard" | "gregorian" | "proleptic_gregorian") {
            return Err(Error::Data(format!("calendar `{cal}` is not supported")));
        }
    }
    let (scale, origin) = parse_time_units(units)?;
    let times = nc.read(time_name)?.iter().map(|t| to_timestamp(origin, t * scale)).collect::<Result<Vec<_>>>()?;
    let nt = times.len();

    let mut channels: Vec<(String, String, Vec<f64>)> = Vec::new();
    let plane = nlat * nlon;
    let surface = |cf: &str| -> Result<Option<Vec<f64>>> {
        let Some(v) = nc.var(cf) else { return Ok(None) };
        if nc.shape(v) != [nt, nlat, nlon] {
            return Err(Error::Data(format!("`{cf}` has shape {:?}, expected {:?}", nc.shape(v), [nt, nlat, nlon])));
        }
        Ok(Some(nc.read(cf)?))
    };
    for (cf, name, unit) in [("psl", "msl", "Pa"), ("uas", "u10", "m s-1"), ("vas", "v10", "m s-1")] {
        if let Some(data) = surface(cf)? {
            channels.push((name.into(), unit.into(), data));
        }
    }
    if let Some(v) = nc.var("zg") {
        let shape = nc.shape(v);
        if shape.len() != 4 || shape[0] != nt || shape[2..] != [nlat, nlon] {
            return Err(Error::Data(format!("`zg` has shape {shape:?}, expected [time, plev, lat, lon]")));
        }
        let plev_name = nc.dim_name(v.dims[1]).to_string();
        let mut plev = nc.read(&plev_name)?;
        if nc.text_attr(&plev_name, "units").is_some_and(|u| u.eq_ignore_ascii_case("hpa")) {
            plev.iter_mut().for_each(|p| *p *= 100.0);
        }
        let zg = nc.read("zg")?;
        for (pa, name) in [(50_000.0, "z500"), (25_000.0, "z250")] {
            if let Some(l) = plev.iter().position(|p| (p - pa).abs() < 1.0) {
                let mut data = Vec::with_capacity(nt * plane);
                for t in 0..nt {
                    let start = (t * shape[1] + l) * plane;
                    data.extend(zg[start..start + plane].iter().map(|h| h * GRAVITY));
                }
                channels.push((name.into(), "m2 s-2".into(), data));
            }
        }
    }
    if channels.is_empty() {
        return Err(Error::Data("none of psl, uas, vas, zg found".into()));
    }
    let vars: Vec<String> = channels.iter().map(|c| c.0.clone()).collect();
    let unit_names: Vec<String> = channels.iter().map(|c| c.1.clone()).collect();
    (0..nt)
        .map(|t| {
            let mut values = Vec::with_capacity(channels.len() * plane);
            for (_, _, data) in &channels {
                let p = &data[t * plane..(t + 1) * plane];
                if flip {
                    for row in p.chunks(nlon).rev() {
                        values.extend_from_slice(row);
                    }
                } else {
                    values.extend_from_slice(p);
                }
            }
            Field::new(grid.clone(), values, vars.clone(), unit_names.clone(), times[t], false)
        })
        .collect()
}

pub fn read_cf_file(path: &Path) -> Result<Vec<Field>> {
    read_cf(&NcFile::open(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
