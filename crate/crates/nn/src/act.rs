use crate::Real;

/// A single-sample activation map, channel-major (`c x h x w`).
#[derive(Clone, Debug, PartialEq)]
pub struct Act<R> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<R>,
}

impl<R: Real> Act<R> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![R::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), c * h * w, "activation buffer has wrong length");
        Self { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[R] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "shape mismatch in add");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stack channels of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Self {
        assert!(self.h == other.h && self.w == other.w, "spatial mismatch in concat");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self { c: self.c + other.c, h: self.h, w: self.w, data }
    }

    /// Inverse of [`Act::concat`]: split after `c0` channels.
    pub fn split(&self, c0: usize) -> (Self, Self) {
        let n = self.plane();
        let a = Self::from_vec(c0, self.h, self.w, self.data[..c0 * n].to_vec());
        let b = Self::from_vec(self.c - c0, self.h, self.w, self.data[c0 * n..].to_vec());
        (a, b)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }
}
