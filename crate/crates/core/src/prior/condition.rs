use std::f64::consts::TAU;

use crate::field::{Field, Timestamp};
use crate::{Error, Result};

/// Names of the static boundary channels, in network input order.
pub const STATIC_VARS: [&str; 2] = ["dem", "lsm"];

/// Number of calendar tokens seen by the bottleneck attention.
pub const CONTEXT_TOKENS: usize = 3;
/// Features per calendar token: one (sin, cos) pair plus a one-hot cycle id.
pub const CONTEXT_DIM: usize = 5;

/// `(sin, cos)` of the month/12, day-of-month/31 and hour/24 phases.
pub fn temporal_embedding(t: &Timestamp) -> [f64; 6] {
    let phases = [t.month() as f64 / 12.0, t.day() as f64 / 31.0, t.hour() as f64 / 24.0];
    let mut out = [0.0; 6];
    for (k, p) in phases.iter().enumerate() {
        out[2 * k] = (TAU * p).sin();
        out[2 * k + 1] = (TAU * p).cos();
    }
    out
}

/// Static boundary channels on the fine grid plus the calendar embedding
/// of one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub statics: Field,
    pub temporal: [f64; 6],
}

impl ConditionBundle {
    /// Calendar embedding as token rows `[sin, cos, one-hot(cycle)]`.
    pub fn context_tokens(&self) -> [f64; CONTEXT_TOKENS * CONTEXT_DIM] {
        let mut out = [0.0; CONTEXT_TOKENS * CONTEXT_DIM];
        for k in 0..CONTEXT_TOKENS {
            let row = &mut out[k * CONTEXT_DIM..(k + 1) * CONTEXT_DIM];
            row[0] = self.temporal[2 * k];
            row[1] = self.temporal[2 * k + 1];
            row[2 + k] = 1.0;
        }
        out
    }

    /// Same calendar, statics replaced by zeros (the unconditioned ablation).
    pub fn without_statics(&self) -> Self {
        let mut s = self.statics.clone();
        s.values.iter_mut().for_each(|v| *v = 0.0);
        ConditionBundle { statics: s, temporal: self.temporal }
    }
}

/// Pair normalized statics with the calendar embedding of `time`.
pub fn assemble_condition(statics: &Field, time: Timestamp) -> Result<ConditionBundle> {
    if statics.vars.len() != STATIC_VARS.len() || statics.vars.iter().zip(STATIC_VARS).any(|(a, b)| a != b) {
        return Err(Error::Data(format!("statics must hold exactly {STATIC_VARS:?}, got {:?}", statics.vars)));
    }
    if !statics.normalized {
        return Err(Error::Data("statics must be normalized".into()));
    }
    let mut s = statics.clone();
    s.time = time;
    Ok(ConditionBundle { statics: s, temporal: temporal_embedding(&time) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::sync::Arc;

    fn flat_ocean() -> Field {
        let g = Arc::new(Grid::equiangular(4, 8).unwrap());
        let t = Timestamp::new(2000, 1, 1, 0).unwrap();
        Field::new(g, vec![0.0; 64], vec!["dem".into(), "lsm".into()], vec!["1".into(), "1".into()], t, true).unwrap()
    }

    #[test]
    fn full_and_half_cycles() {
        let e = temporal_embedding(&Timestamp::new(2001, 12, 31, 0).unwrap());
        for k in 0..3 {
            assert!(e[2 * k].abs() < 1e-12 && (e[2 * k + 1] - 1.0).abs() < 1e-12, "{e:?}");
        }
        let e = temporal_embedding(&Timestamp::new(2001, 6, 1, 0).unwrap());
        assert!(e[0].abs() < 1e-12 && (e[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn mid_march_evening() {
        let e = temporal_embedding(&Timestamp::new(2001, 3, 15, 18).unwrap());
        // month: 2pi/4 -> (1, 0); hour: 2pi*3/4 -> (-1, 0); day: 2pi*15/31
        let expected = [1.0, 0.0, 0.10116832198743272, -0.994869323391895, -1.0, 0.0];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{e:?}");
        }
        for k in 0..3 {
            assert!((e[2 * k].powi(2) + e[2 * k + 1].powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bundle_validation() {
        let s = flat_ocean();
        let t = Timestamp::new(2003, 7, 4, 12).unwrap();
        let b = assemble_condition(&s, t).unwrap();
        assert_eq!(b.temporal, temporal_embedding(&t));
        let tokens = b.context_tokens();
        assert_eq!(tokens[2], 1.0);
        assert_eq!(tokens[5 + 3], 1.0);
        let mut raw = s.clone();
        raw.normalized = false;
        assert!(assemble_condition(&raw, t).is_err());
        let mut swapped = s;
        swapped.vars.reverse();
        assert!(assemble_condition(&swapped, t).is_err());
    }
}
