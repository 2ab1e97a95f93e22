use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::{Error, Result};

/// A calendar instant at hourly resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTimestamp", into = "RawTimestamp")]
pub struct Timestamp {
    year: i32,
    month: u32,
    day: u32,
    hour: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimestamp {
    year: i32,
    month: u32,
    day: u32,
    hour: u32,
}

impl TryFrom<RawTimestamp> for Timestamp {
    type Error = Error;
    fn try_from(r: RawTimestamp) -> Result<Self> {
        Timestamp::new(r.year, r.month, r.day, r.hour)
    }
}

impl From<Timestamp> for RawTimestamp {
    fn from(t: Timestamp) -> Self {
        RawTimestamp { year: t.year, month: t.month, day: t.day, hour: t.hour }
    }
}

impl Timestamp {
    pub fn new(year: i32, month: u32, day: u32, hour: u32) -> Result<Self> {
        if NaiveDate::from_ymd_opt(year, month, day).is_none() || hour > 23 {
            return Err(Error::Invalid(format!("invalid date {year:04}-{month:02}-{day:02} {hour:02}h")));
        }
        Ok(Timestamp { year, month, day, hour })
    }

    /// The `ordinal`-th day (1-based) of `year` at `hour`.
    pub fn from_ordinal(year: i32, ordinal: u32, hour: u32) -> Result<Self> {
        let d = NaiveDate::from_yo_opt(year, ordinal)
            .ok_or_else(|| Error::Invalid(format!("day {ordinal} does not exist in {year}")))?;
        Timestamp::new(year, d.month(), d.day(), hour)
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn month(&self) -> u32 {
        self.month
    }

    pub fn day(&self) -> u32 {
        self.day
    }

    pub fn hour(&self) -> u32 {
        self.hour
    }

    /// Day of year, 1-based.
    pub fn ordinal(&self) -> u32 {
        NaiveDate::from_ymd_opt(self.year, self.month, self.day).expect("validated on construction").ordinal()
    }

    /// Hours elapsed since 1970-01-01T00.
    pub fn epoch_hours(&self) -> i64 {
        let d = NaiveDate::from_ymd_opt(self.year, self.month, self.day).expect("validated on construction");
        d.signed_duration_since(NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid")).num_days() * 24 + self.hour as i64
    }

    pub fn with_year(&self, year: i32) -> Result<Self> {
        Timestamp::new(year, self.month, self.day, self.hour)
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}-{:02}T{:02}", self.year, self.month, self.day, self.hour)
    }
}

/// A stack of gridded variables at one instant, stored `C x nlat x nlon`
/// in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub vars: Vec<String>,
    pub units: Vec<String>,
    pub time: Timestamp,
    pub normalized: bool,
}

impl Field {
    pub fn new(
        grid: Arc<Grid>,
        values: Vec<f64>,
        vars: Vec<String>,
        units: Vec<String>,
        time: Timestamp,
        normalized: bool,
    ) -> Result<Self> {
        if vars.len() != units.len() {
            return Err(Error::Shape(format!("{} variable names but {} units", vars.len(), units.len())));
        }
        if values.len() != vars.len() * grid.len() {
            return Err(Error::Shape(format!(
                "{} values for {} channels on a {:?} grid",
                values.len(),
                vars.len(),
                grid.shape()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at flat index {i}")));
        }
        Ok(Field { grid, values, vars, units, time, normalized })
    }

    /// Same metadata, new grid and values.
    pub fn with_values(&self, grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        Field::new(grid, values, self.vars.clone(), self.units.clone(), self.time, self.normalized)
    }

    pub fn nchan(&self) -> usize {
        self.vars.len()
    }

    pub fn plane(&self) -> usize {
        self.grid.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    /// Whether two fields share grid and variable layout.
    pub fn aligned_with(&self, other: &Field) -> bool {
        *self.grid == *other.grid && self.vars == other.vars
    }
}
