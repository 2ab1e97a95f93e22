//! Primitive layers. Each layer is a descriptor holding [`Slot`]s into the flat
//! parameter vector; `forward` and `backward` take the parameters explicitly.
//!
//! Backward passes accumulate parameter gradients into `grads` when it is
//! `Some`, and return the input gradient when asked for it.

use crate::{Act, Init, ParamLayout, Real, Slot};

/// Boundary handling for 3x3 convolutions: rows (latitude) are zero padded,
/// columns (longitude) wrap when `circular_w` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub circular_w: bool,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, kernel: usize, zero: bool) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (cin * kernel * kernel) as f64;
        let init = if zero { Init::Zeros } else { Init::Uniform((3.0 / fan_in).sqrt()) };
        let weight = layout.alloc(format!("{name}.weight"), cout * cin * kernel * kernel, init, true);
        let bias = layout.alloc(format!("{name}.bias"), cout, Init::Zeros, false);
        Self { cin, cout, kernel, weight, bias }
    }

    fn k(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn forward<R: Real>(&self, p: &[R], x: &Act<R>, pad: Padding, scratch: &mut Vec<R>) -> Act<R> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let n = x.plane();
        let mut y = Act::zeros(self.cout, x.h, x.w);
        let bias = self.bias.of(p);
        for (o, chunk) in y.data.chunks_mut(n).enumerate() {
            chunk.fill(bias[o]);
        }
        let w = self.weight.of(p);
        let k = self.k();
        let col: &[R] = if self.kernel == 1 {
            &x.data
        } else {
            im2col(x, pad, scratch);
            &scratch[..k * n]
        };
        R::gemm(self.cout, k, n, R::one(), w, (k as isize, 1), col, (n as isize, 1), R::one(), &mut y.data, (n as isize, 1));
        y
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<R: Real>(
        &self,
        p: &[R],
        grads: Option<&mut [R]>,
        x: &Act<R>,
        dy: &Act<R>,
        pad: Padding,
        need_dx: bool,
        scratch: &mut Vec<R>,
    ) -> Option<Act<R>> {
        let n = x.plane();
        let k = self.k();
        if let Some(g) = grads {
            {
                let gb = self.bias.of_mut(g);
                for (o, chunk) in dy.data.chunks(n).enumerate() {
                    gb[o] += chunk.iter().copied().sum::<R>();
                }
            }
            let col: &[R] = if self.kernel == 1 {
                &x.data
            } else {
                im2col(x, pad, scratch);
                &scratch[..k * n]
            };
            let gw = self.weight.of_mut(g);
            // dW[o, j] += sum_n dy[o, n] * col[j, n]
            R::gemm(self.cout, n, k, R::one(), &dy.data, (n as isize, 1), col, (1, n as isize), R::one(), gw, (k as isize, 1));
        }
        if !need_dx {
            return None;
        }
        let w = self.weight.of(p);
        if self.kernel == 1 {
            let mut dx = Act::zeros(self.cin, x.h, x.w);
            R::gemm(self.cin, self.cout, n, R::one(), w, (1, k as isize), &dy.data, (n as isize, 1), R::zero(), &mut dx.data, (n as isize, 1));
            return Some(dx);
        }
        scratch.clear();
        scratch.resize(k * n, R::zero());
        R::gemm(k, self.cout, n, R::one(), w, (1, k as isize), &dy.data, (n as isize, 1), R::zero(), scratch, (n as isize, 1));
        let mut dx = Act::zeros(self.cin, x.h, x.w);
        col2im(scratch, &mut dx, pad);
        Some(dx)
    }
}

/// Expand 3x3 neighbourhoods into a `(c*9) x (h*w)` matrix.
fn im2col<R: Real>(x: &Act<R>, pad: Padding, col: &mut Vec<R>) {
    let (h, w) = (x.h, x.w);
    let n = h * w;
    col.clear();
    col.resize(x.c * 9 * n, R::zero());
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    let d = &mut col[row + yy * w..row + (yy + 1) * w];
                    shift_row(s, d, kx as isize - 1, pad.circular_w);
                }
            }
        }
    }
}

/// `d[x] = s[x + dx]` with wrap or zero fill at the ends.
#[inline]
fn shift_row<R: Real>(s: &[R], d: &mut [R], dx: isize, circular: bool) {
    let w = s.len();
    match dx {
        0 => d.copy_from_slice(s),
        -1 => {
            d[1..].copy_from_slice(&s[..w - 1]);
            d[0] = if circular { s[w - 1] } else { R::zero() };
        }
        1 => {
            d[..w - 1].copy_from_slice(&s[1..]);
            d[w - 1] = if circular { s[0] } else { R::zero() };
        }
        _ => unreachable!(),
    }
}

/// Adjoint of [`im2col`].
fn col2im<R: Real>(col: &[R], dx: &mut Act<R>, pad: Padding) {
    let (h, w) = (dx.h, dx.w);
    let n = h * w;
    for ci in 0..dx.c {
        let dst = &mut dx.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let c = &col[row + yy * w..row + (yy + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        1 => {
                            for (a, b) in d.iter_mut().zip(c) {
                                *a += *b;
                            }
                        }
                        0 => {
                            // c[x] came from s[x - 1]
                            for xx in 1..w {
                                d[xx - 1] += c[xx];
                            }
                            if pad.circular_w {
                                d[w - 1] += c[0];
                            }
                        }
                        _ => {
                            // c[x] came from s[x + 1]
                            for xx in 0..w - 1 {
                                d[xx + 1] += c[xx];
                            }
                            if pad.circular_w {
                                d[0] += c[w - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma: Slot,
    pub beta: Slot,
}

#[derive(Clone, Debug)]
pub struct GnCache<R> {
    mean: Vec<R>,
    rstd: Vec<R>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, c: usize) -> Self {
        let groups = default_groups(c);
        let gamma = layout.alloc(format!("{name}.gamma"), c, Init::Ones, false);
        let beta = layout.alloc(format!("{name}.beta"), c, Init::Zeros, false);
        Self { c, groups, gamma, beta }
    }

    pub fn forward<R: Real>(&self, p: &[R], x: &Act<R>) -> (Act<R>, GnCache<R>) {
        assert_eq!(x.c, self.c, "group norm channels");
        let cg = self.c / self.groups;
        let n = x.plane();
        let gamma = self.gamma.of(p);
        let beta = self.beta.of(p);
        let mut y = Act::zeros(x.c, x.h, x.w);
        let mut mean = Vec::with_capacity(self.groups);
        let mut rstd = Vec::with_capacity(self.groups);
        let m = (cg * n) as f64;
        for g in 0..self.groups {
            let xs = &x.data[g * cg * n..(g + 1) * cg * n];
            let mu = xs.iter().map(|v| v.f64()).sum::<f64>() / m;
            let var = xs.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / m;
            let rs = 1.0 / (var + GN_EPS).sqrt();
            let (mu_r, rs_r) = (R::of(mu), R::of(rs));
            for ci in 0..cg {
                let c = g * cg + ci;
                let (ga, be) = (gamma[c], beta[c]);
                let src = &x.data[c * n..(c + 1) * n];
                let dst = &mut y.data[c * n..(c + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (*s - mu_r) * rs_r * ga + be;
                }
            }
            mean.push(mu_r);
            rstd.push(rs_r);
        }
        (y, GnCache { mean, rstd })
    }

    pub fn backward<R: Real>(&self, p: &[R], mut grads: Option<&mut [R]>, x: &Act<R>, cache: &GnCache<R>, dy: &Act<R>) -> Act<R> {
        let cg = self.c / self.groups;
        let n = x.plane();
        let gamma = self.gamma.of(p);
        let mut dx = Act::zeros(x.c, x.h, x.w);
        let m = R::of((cg * n) as f64);
        for g in 0..self.groups {
            let (mu, rs) = (cache.mean[g], cache.rstd[g]);
            // sums of dxhat and dxhat * xhat over the group
            let mut s1 = R::zero();
            let mut s2 = R::zero();
            for ci in 0..cg {
                let c = g * cg + ci;
                let xs = &x.data[c * n..(c + 1) * n];
                let ds = &dy.data[c * n..(c + 1) * n];
                let mut dg = R::zero();
                let mut db = R::zero();
                for (xv, dv) in xs.iter().zip(ds) {
                    let xhat = (*xv - mu) * rs;
                    dg += *dv * xhat;
                    db += *dv;
                }
                if let Some(gr) = grads.as_deref_mut() {
                    self.gamma.of_mut(gr)[c] += dg;
                    self.beta.of_mut(gr)[c] += db;
                }
                s1 += db * gamma[c];
                s2 += dg * gamma[c];
            }
            for ci in 0..cg {
                let c = g * cg + ci;
                let ga = gamma[c];
                let xs = &x.data[c * n..(c + 1) * n];
                let ds = &dy.data[c * n..(c + 1) * n];
                let out = &mut dx.data[c * n..(c + 1) * n];
                for ((o, xv), dv) in out.iter_mut().zip(xs).zip(ds) {
                    let xhat = (*xv - mu) * rs;
                    *o = rs / m * (m * *dv * ga - s1 - xhat * s2);
                }
            }
        }
        dx
    }
}

/// Number of normalization groups used for `c` channels.
pub fn default_groups(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c.is_multiple_of(*g) && c / g >= 2).unwrap_or(1)
}

/// Dense layer acting on a vector, or column-wise on a `in x n` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, inp: usize, out: usize, zero: bool) -> Self {
        let init = if zero { Init::Zeros } else { Init::Uniform((3.0 / inp as f64).sqrt()) };
        let weight = layout.alloc(format!("{name}.weight"), out * inp, init, true);
        let bias = layout.alloc(format!("{name}.bias"), out, Init::Zeros, false);
        Self { inp, out, weight, bias }
    }

    /// `x` is `inp x n` row-major; returns `out x n`.
    pub fn forward<R: Real>(&self, p: &[R], x: &[R], n: usize) -> Vec<R> {
        assert_eq!(x.len(), self.inp * n, "linear input size");
        let b = self.bias.of(p);
        let mut y = vec![R::zero(); self.out * n];
        for (o, row) in y.chunks_mut(n).enumerate() {
            row.fill(b[o]);
        }
        R::gemm(self.out, self.inp, n, R::one(), self.weight.of(p), (self.inp as isize, 1), x, (n as isize, 1), R::one(), &mut y, (n as isize, 1));
        y
    }

    pub fn backward<R: Real>(&self, p: &[R], grads: Option<&mut [R]>, x: &[R], dy: &[R], n: usize, need_dx: bool) -> Option<Vec<R>> {
        if let Some(g) = grads {
            {
                let gb = self.bias.of_mut(g);
                for (o, row) in dy.chunks(n).enumerate() {
                    gb[o] += row.iter().copied().sum::<R>();
                }
            }
            R::gemm(self.out, n, self.inp, R::one(), dy, (n as isize, 1), x, (1, n as isize), R::one(), self.weight.of_mut(g), (self.inp as isize, 1));
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![R::zero(); self.inp * n];
        R::gemm(self.inp, self.out, n, R::one(), self.weight.of(p), (1, self.inp as isize), dy, (n as isize, 1), R::zero(), &mut dx, (n as isize, 1));
        Some(dx)
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

pub fn silu<R: Real>(x: &[R]) -> Vec<R> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Multiply `dy` by the SiLU derivative evaluated at the pre-activation `x`.
pub fn silu_backward<R: Real>(x: &[R], dy: &[R]) -> Vec<R> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (R::one() + v * (R::one() - s))
        })
        .collect()
}

pub fn silu_act<R: Real>(x: &Act<R>) -> Act<R> {
    Act::from_vec(x.c, x.h, x.w, silu(&x.data))
}

pub fn silu_act_backward<R: Real>(x: &Act<R>, dy: &Act<R>) -> Act<R> {
    Act::from_vec(x.c, x.h, x.w, silu_backward(&x.data, &dy.data))
}

/// 2x2 mean pooling; `h` and `w` must be even.
pub fn avg_pool2<R: Real>(x: &Act<R>) -> Act<R> {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even spatial dims");
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, h2, w2);
    let q = R::of(0.25);
    for c in 0..x.c {
        let s = x.channel(c);
        for i in 0..h2 {
            for j in 0..w2 {
                let a = s[2 * i * x.w + 2 * j] + s[2 * i * x.w + 2 * j + 1] + s[(2 * i + 1) * x.w + 2 * j] + s[(2 * i + 1) * x.w + 2 * j + 1];
                y.data[c * h2 * w2 + i * w2 + j] = a * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<R: Real>(dy: &Act<R>) -> Act<R> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Act::zeros(dy.c, h, w);
    let q = R::of(0.25);
    for c in 0..dy.c {
        for i in 0..h {
            for j in 0..w {
                dx.data[c * h * w + i * w + j] = dy.data[c * dy.h * dy.w + (i / 2) * dy.w + j / 2] * q;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<R: Real>(x: &Act<R>) -> Act<R> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, h, w);
    for c in 0..x.c {
        for i in 0..h {
            for j in 0..w {
                y.data[c * h * w + i * w + j] = x.data[c * x.h * x.w + (i / 2) * x.w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<R: Real>(dy: &Act<R>) -> Act<R> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, h2, w2);
    for c in 0..dy.c {
        for i in 0..dy.h {
            for j in 0..dy.w {
                dx.data[c * h2 * w2 + (i / 2) * w2 + j / 2] += dy.data[c * dy.h * dy.w + i * dy.w + j];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_act(c: usize, h: usize, w: usize, seed: u64) -> Act<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Act::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Act<f64>, b: &Act<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_input_gradient_is_the_adjoint() {
        // <conv(x) - conv(0), y> == <x, dconv^T y> for the linear part.
        let mut layout = ParamLayout::new();
        let conv = Conv2d::new(&mut layout, "c", 2, 3, 3, false);
        let p: Vec<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(1));
        let x = rand_act(2, 4, 6, 2);
        let y = rand_act(3, 4, 6, 3);
        for circ in [true, false] {
            let pad = Padding { circular_w: circ };
            let mut s = Vec::new();
            let fx = conv.forward(&p, &x, pad, &mut s);
            let f0 = conv.forward(&p, &Act::zeros(2, 4, 6), pad, &mut s);
            let mut lin = fx.clone();
            for (a, b) in lin.data.iter_mut().zip(&f0.data) {
                *a -= *b;
            }
            let dx = conv.backward(&p, None, &x, &y, pad, true, &mut s).unwrap();
            assert!((dot(&lin, &y) - dot(&x, &dx)).abs() < 1e-10);
        }
    }

    #[test]
    fn circular_padding_commutes_with_column_roll() {
        let mut layout = ParamLayout::new();
        let conv = Conv2d::new(&mut layout, "c", 1, 1, 3, false);
        let p: Vec<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(5));
        let x = rand_act(1, 3, 5, 9);
        let roll = |a: &Act<f64>| {
            let mut r = a.clone();
            for i in 0..a.h {
                for j in 0..a.w {
                    r.data[i * a.w + (j + 1) % a.w] = a.data[i * a.w + j];
                }
            }
            r
        };
        let pad = Padding { circular_w: true };
        let mut s = Vec::new();
        let a = roll(&conv.forward(&p, &x, pad, &mut s));
        let b = conv.forward(&p, &roll(&x), pad, &mut s);
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_and_upsampling_adjoints() {
        let x = rand_act(2, 4, 6, 11);
        let y = rand_act(2, 2, 3, 12);
        assert!((dot(&avg_pool2(&x), &y) - dot(&x, &avg_pool2_backward(&y))).abs() < 1e-12);
        assert!((dot(&upsample2(&y), &x) - dot(&y, &upsample2_backward(&x))).abs() < 1e-12);
    }

    #[test]
    fn group_norm_gradient_matches_finite_differences() {
        let mut layout = ParamLayout::new();
        let gn = GroupNorm::new(&mut layout, "gn", 4);
        let mut p: Vec<f64> = layout.init(&mut ChaCha8Rng::seed_from_u64(1));
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.1 * i as f64;
        }
        let x = rand_act(4, 3, 3, 4);
        let r = rand_act(4, 3, 3, 5);
        let loss = |x: &Act<f64>| dot(&gn.forward(&p, x).0, &r);
        let (_, cache) = gn.forward(&p, &x);
        let dx = gn.backward(&p, None, &x, &cache, &r);
        for idx in [0, 7, 20, 35] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data[idx]).abs() < 1e-6, "{fd} vs {}", dx.data[idx]);
        }
    }
}
