use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::Real;

/// A contiguous range inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a, R>(&self, p: &'a [R]) -> &'a [R] {
        &p[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a, R>(&self, p: &'a mut [R]) -> &'a mut [R] {
        &mut p[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    slot: Slot,
    init: Init,
    decay: bool,
}

/// Allocation table mapping named tensors onto one flat parameter vector.
#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    entries: Vec<Entry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserve `len` parameters. `decay` marks tensors subject to weight decay.
    pub fn alloc(&mut self, name: impl Into<String>, len: usize, init: Init, decay: bool) -> Slot {
        let slot = Slot { offset: self.total, len };
        self.total += len;
        self.entries.push(Entry { name: name.into(), slot, init, decay });
        slot
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn names(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.slot))
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, rng: &mut G) -> Vec<R> {
        let mut p = vec![R::zero(); self.total];
        for e in &self.entries {
            let dst = e.slot.of_mut(&mut p);
            match e.init {
                Init::Zeros => {}
                Init::Ones => dst.fill(R::one()),
                Init::Uniform(b) => {
                    for v in dst.iter_mut() {
                        *v = R::of(rng.gen_range(-b..=b));
                    }
                }
            }
        }
        p
    }

    /// Per-parameter mask, 1 where weight decay applies.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for e in &self.entries {
            if e.decay {
                m[e.slot.offset..e.slot.offset + e.slot.len].fill(true);
            }
        }
        m
    }
}
