//! Conditional encoder-decoder network with skip connections.
//!
//! Static condition channels are concatenated to the noisy field at the input;
//! the diffusion step enters every residual block through a sinusoidal
//! embedding; context tokens (calendar features) enter through a single
//! cross-attention block at the bottleneck.

use serde::{Deserialize, Serialize};

use crate::layers::{
    avg_pool2, avg_pool2_backward, silu, silu_act, silu_act_backward, silu_backward, upsample2, upsample2_backward, Conv2d,
    GnCache, GroupNorm, Linear, Padding,
};
use crate::{Act, ParamLayout, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Channels of the denoised field (input and output).
    pub field_channels: usize,
    /// Static condition channels concatenated at the input.
    pub cond_channels: usize,
    /// Feature widths per level, finest first.
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    /// Length of the sinusoidal step embedding.
    pub time_dim: usize,
    pub context_tokens: usize,
    pub context_dim: usize,
    pub attention: bool,
    pub circular_lon: bool,
    /// Step indices are multiplied by this before the sinusoidal embedding.
    pub time_scale: f64,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn temb_dim(&self) -> usize {
        4 * self.widths[0]
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    cout: usize,
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResTape<R> {
    x: Act<R>,
    gn1: GnCache<R>,
    a1: Act<R>,
    h1: Act<R>,
    h2: Act<R>,
    gn2: GnCache<R>,
    a2: Act<R>,
    h3: Act<R>,
}

impl ResBlock {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, tdim: usize) -> Self {
        Self {
            cout,
            gn1: GroupNorm::new(layout, &format!("{name}.gn1"), cin),
            conv1: Conv2d::new(layout, &format!("{name}.conv1"), cin, cout, 3, false),
            temb: Linear::new(layout, &format!("{name}.temb"), tdim, cout, false),
            gn2: GroupNorm::new(layout, &format!("{name}.gn2"), cout),
            conv2: Conv2d::new(layout, &format!("{name}.conv2"), cout, cout, 3, true),
            skip: (cin != cout).then(|| Conv2d::new(layout, &format!("{name}.skip"), cin, cout, 1, false)),
        }
    }

    fn forward<R: Real>(&self, p: &[R], x: Act<R>, s: &[R], pad: Padding, scratch: &mut Vec<R>) -> (Act<R>, ResTape<R>) {
        let (a1, gn1) = self.gn1.forward(p, &x);
        let h1 = silu_act(&a1);
        let mut h2 = self.conv1.forward(p, &h1, pad, scratch);
        let e = self.temb.forward(p, s, 1);
        let n = h2.plane();
        for (c, chunk) in h2.data.chunks_mut(n).enumerate() {
            for v in chunk {
                *v += e[c];
            }
        }
        let (a2, gn2) = self.gn2.forward(p, &h2);
        let h3 = silu_act(&a2);
        let mut out = self.conv2.forward(p, &h3, pad, scratch);
        match &self.skip {
            Some(sk) => out.add_assign(&sk.forward(p, &x, pad, scratch)),
            None => out.add_assign(&x),
        }
        (out, ResTape { x, gn1, a1, h1, h2, gn2, a2, h3 })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<R: Real>(
        &self,
        p: &[R],
        mut grads: Option<&mut [R]>,
        t: &ResTape<R>,
        dy: &Act<R>,
        s: &[R],
        ds: &mut [R],
        pad: Padding,
        scratch: &mut Vec<R>,
    ) -> Act<R> {
        let dh3 = self.conv2.backward(p, grads.as_deref_mut(), &t.h3, dy, pad, true, scratch).unwrap();
        let da2 = silu_act_backward(&t.a2, &dh3);
        let dh2 = self.gn2.backward(p, grads.as_deref_mut(), &t.h2, &t.gn2, &da2);
        if grads.is_some() {
            let n = dh2.plane();
            let de: Vec<R> = dh2.data.chunks(n).map(|c| c.iter().copied().sum()).collect();
            let dsv = self.temb.backward(p, grads.as_deref_mut(), s, &de, 1, true).unwrap();
            for (a, b) in ds.iter_mut().zip(&dsv) {
                *a += *b;
            }
        }
        let dh1 = self.conv1.backward(p, grads.as_deref_mut(), &t.h1, &dh2, pad, true, scratch).unwrap();
        let da1 = silu_act_backward(&t.a1, &dh1);
        let mut dx = self.gn1.backward(p, grads.as_deref_mut(), &t.x, &t.gn1, &da1);
        match &self.skip {
            Some(sk) => dx.add_assign(&sk.backward(p, grads, &t.x, dy, pad, true, scratch).unwrap()),
            None => dx.add_assign(dy),
        }
        debug_assert_eq!(dy.c, self.cout);
        dx
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    dim: usize,
    gn: GroupNorm,
    q: Conv2d,
    k: Linear,
    v: Linear,
    o: Conv2d,
}

struct AttnTape<R> {
    x: Act<R>,
    gn: GnCache<R>,
    xn: Act<R>,
    q: Act<R>,
    k: Vec<R>,
    v: Vec<R>,
    attn: Vec<R>,
    out: Act<R>,
}

impl CrossAttention {
    fn new(layout: &mut ParamLayout, name: &str, c: usize, ctx_dim: usize) -> Self {
        Self {
            dim: c,
            gn: GroupNorm::new(layout, &format!("{name}.gn"), c),
            q: Conv2d::new(layout, &format!("{name}.q"), c, c, 1, false),
            k: Linear::new(layout, &format!("{name}.k"), ctx_dim, c, false),
            v: Linear::new(layout, &format!("{name}.v"), ctx_dim, c, false),
            o: Conv2d::new(layout, &format!("{name}.o"), c, c, 1, true),
        }
    }

    /// `ctx_t` is the context as a `ctx_dim x m` matrix.
    fn forward<R: Real>(&self, p: &[R], x: Act<R>, ctx_t: &[R], m: usize, pad: Padding, scratch: &mut Vec<R>) -> (Act<R>, AttnTape<R>) {
        let d = self.dim;
        let n = x.plane();
        let (xn, gn) = self.gn.forward(p, &x);
        let q = self.q.forward(p, &xn, pad, scratch);
        let k = self.k.forward(p, ctx_t, m);
        let v = self.v.forward(p, ctx_t, m);
        let scale = R::of(1.0 / (d as f64).sqrt());
        // scores m x n
        let mut attn = vec![R::zero(); m * n];
        R::gemm(m, d, n, scale, &k, (1, m as isize), &q.data, (n as isize, 1), R::zero(), &mut attn, (n as isize, 1));
        for j in 0..n {
            let mx = (0..m).map(|i| attn[i * n + j]).fold(R::neg_infinity(), R::max);
            let mut z = R::zero();
            for i in 0..m {
                let e = (attn[i * n + j] - mx).exp();
                attn[i * n + j] = e;
                z += e;
            }
            for i in 0..m {
                attn[i * n + j] /= z;
            }
        }
        let mut out = Act::zeros(d, x.h, x.w);
        R::gemm(d, m, n, R::one(), &v, (m as isize, 1), &attn, (n as isize, 1), R::zero(), &mut out.data, (n as isize, 1));
        let mut y = self.o.forward(p, &out, pad, scratch);
        y.add_assign(&x);
        (y, AttnTape { x, gn, xn, q, k, v, attn, out })
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<R: Real>(
        &self,
        p: &[R],
        mut grads: Option<&mut [R]>,
        t: &AttnTape<R>,
        dy: &Act<R>,
        ctx_t: &[R],
        m: usize,
        pad: Padding,
        scratch: &mut Vec<R>,
    ) -> Act<R> {
        let d = self.dim;
        let n = dy.plane();
        let dout = self.o.backward(p, grads.as_deref_mut(), &t.out, dy, pad, true, scratch).unwrap();
        // dA = V^T dO (m x n)
        let mut da = vec![R::zero(); m * n];
        R::gemm(m, d, n, R::one(), &t.v, (1, m as isize), &dout.data, (n as isize, 1), R::zero(), &mut da, (n as isize, 1));
        if grads.is_some() {
            // dV = dO A^T (d x m)
            let mut dv = vec![R::zero(); d * m];
            R::gemm(d, n, m, R::one(), &dout.data, (n as isize, 1), &t.attn, (1, n as isize), R::zero(), &mut dv, (m as isize, 1));
            self.v.backward(p, grads.as_deref_mut(), ctx_t, &dv, m, false);
        }
        // softmax backward, in place on da -> dS
        for j in 0..n {
            let dot: R = (0..m).map(|i| t.attn[i * n + j] * da[i * n + j]).sum();
            for i in 0..m {
                da[i * n + j] = t.attn[i * n + j] * (da[i * n + j] - dot);
            }
        }
        let scale = R::of(1.0 / (d as f64).sqrt());
        let mut dq = Act::zeros(d, dy.h, dy.w);
        R::gemm(d, m, n, scale, &t.k, (m as isize, 1), &da, (n as isize, 1), R::zero(), &mut dq.data, (n as isize, 1));
        if grads.is_some() {
            let mut dk = vec![R::zero(); d * m];
            R::gemm(d, n, m, scale, &t.q.data, (n as isize, 1), &da, (1, n as isize), R::zero(), &mut dk, (m as isize, 1));
            self.k.backward(p, grads.as_deref_mut(), ctx_t, &dk, m, false);
        }
        let dxn = self.q.backward(p, grads.as_deref_mut(), &t.xn, &dq, pad, true, scratch).unwrap();
        let mut dx = self.gn.backward(p, grads, &t.x, &t.gn, &dxn);
        dx.add_assign(dy);
        dx
    }
}

/// Intermediate values recorded by [`UNet::forward`] for the backward pass.
pub struct Tape<R> {
    emb: Vec<R>,
    t1: Vec<R>,
    a1: Vec<R>,
    t2: Vec<R>,
    s: Vec<R>,
    ctx_t: Vec<R>,
    input: Act<R>,
    enc: Vec<Vec<ResTape<R>>>,
    attn: Option<AttnTape<R>>,
    mid: ResTape<R>,
    dec: Vec<Vec<ResTape<R>>>,
    dec_up_channels: Vec<usize>,
    pre_out: Act<R>,
    gn_out: GnCache<R>,
    a_out: Act<R>,
    h_out: Act<R>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    layout: ParamLayout,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    enc: Vec<Vec<ResBlock>>,
    attn: Option<CrossAttention>,
    mid: ResBlock,
    dec: Vec<Vec<ResBlock>>,
    gn_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Self {
        assert!(!config.widths.is_empty(), "at least one level is required");
        assert!(config.res_blocks >= 1, "at least one residual block per level");
        assert!(config.time_dim >= 2 && config.time_dim.is_multiple_of(2), "time_dim must be even");
        let mut layout = ParamLayout::new();
        let w = &config.widths;
        let levels = w.len();
        let tdim = config.temb_dim();
        let time1 = Linear::new(&mut layout, "time.0", config.time_dim, tdim, false);
        let time2 = Linear::new(&mut layout, "time.1", tdim, tdim, false);
        let conv_in = Conv2d::new(&mut layout, "conv_in", config.field_channels + config.cond_channels, w[0], 3, false);
        let mut enc = Vec::with_capacity(levels);
        let mut cin = w[0];
        for (l, &wl) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.res_blocks {
                blocks.push(ResBlock::new(&mut layout, &format!("enc.{l}.{b}"), cin, wl, tdim));
                cin = wl;
            }
            enc.push(blocks);
        }
        let bottom = w[levels - 1];
        let attn = config
            .attention
            .then(|| CrossAttention::new(&mut layout, "mid.attn", bottom, config.context_dim));
        let mid = ResBlock::new(&mut layout, "mid.res", bottom, bottom, tdim);
        let mut dec: Vec<Vec<ResBlock>> = (0..levels).map(|_| Vec::new()).collect();
        for l in (0..levels).rev() {
            let up = if l == levels - 1 { bottom } else { w[l + 1] };
            let mut blocks = Vec::new();
            for b in 0..config.res_blocks {
                let cin = if b == 0 { up + w[l] } else { w[l] };
                blocks.push(ResBlock::new(&mut layout, &format!("dec.{l}.{b}"), cin, w[l], tdim));
            }
            dec[l] = blocks;
        }
        let gn_out = GroupNorm::new(&mut layout, "out.gn", w[0]);
        let conv_out = Conv2d::new(&mut layout, "out.conv", w[0], config.field_channels, 3, false);
        Self { config, layout, time1, time2, conv_in, enc, attn, mid, dec, gn_out, conv_out }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    fn pad(&self) -> Padding {
        Padding { circular_w: self.config.circular_lon }
    }

    fn step_embedding<R: Real>(&self, t: f64) -> Vec<R> {
        let half = self.config.time_dim / 2;
        let ts = t * self.config.time_scale;
        let mut e = vec![R::zero(); 2 * half];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            e[i] = R::of((ts * freq).sin());
            e[half + i] = R::of((ts * freq).cos());
        }
        e
    }

    /// Evaluate the network on one sample.
    ///
    /// `x` holds the field channels followed by the condition channels;
    /// `context` holds `context_tokens` rows of `context_dim` features.
    pub fn forward<R: Real>(&self, p: &[R], x: &Act<R>, t: f64, context: &[R], scratch: &mut Vec<R>) -> (Act<R>, Tape<R>) {
        let cfg = &self.config;
        assert_eq!(p.len(), self.layout.len(), "parameter vector length");
        assert_eq!(x.c, cfg.field_channels + cfg.cond_channels, "input channels");
        let mult = cfg.spatial_multiple();
        assert!(x.h.is_multiple_of(mult) && x.w.is_multiple_of(mult), "spatial dims must be divisible by {mult}");
        assert_eq!(context.len(), cfg.context_tokens * cfg.context_dim, "context length");
        let pad = self.pad();
        let levels = cfg.levels();

        let emb = self.step_embedding::<R>(t);
        let t1 = self.time1.forward(p, &emb, 1);
        let a1 = silu(&t1);
        let t2 = self.time2.forward(p, &a1, 1);
        let s = silu(&t2);

        let m = cfg.context_tokens;
        let mut ctx_t = vec![R::zero(); context.len()];
        for tok in 0..m {
            for f in 0..cfg.context_dim {
                ctx_t[f * m + tok] = context[tok * cfg.context_dim + f];
            }
        }

        let mut h = self.conv_in.forward(p, x, pad, scratch);
        let mut skips = Vec::with_capacity(levels);
        let mut enc_t = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut tapes = Vec::new();
            for blk in &self.enc[l] {
                let (o, tp) = blk.forward(p, h, &s, pad, scratch);
                h = o;
                tapes.push(tp);
            }
            enc_t.push(tapes);
            skips.push(h.clone());
            if l + 1 < levels {
                h = avg_pool2(&h);
            }
        }
        let attn_t = match &self.attn {
            Some(a) => {
                let (o, tp) = a.forward(p, h, &ctx_t, m, pad, scratch);
                h = o;
                Some(tp)
            }
            None => None,
        };
        let (o, mid_t) = self.mid.forward(p, h, &s, pad, scratch);
        h = o;
        let mut dec_t: Vec<Vec<ResTape<R>>> = (0..levels).map(|_| Vec::new()).collect();
        let mut dec_up = vec![0; levels];
        for l in (0..levels).rev() {
            if l + 1 < levels {
                h = upsample2(&h);
            }
            dec_up[l] = h.c;
            h = h.concat(&skips[l]);
            for blk in &self.dec[l] {
                let (o, tp) = blk.forward(p, h, &s, pad, scratch);
                h = o;
                dec_t[l].push(tp);
            }
        }
        let (a_out, gn_out) = self.gn_out.forward(p, &h);
        let h_out = silu_act(&a_out);
        let y = self.conv_out.forward(p, &h_out, pad, scratch);
        let tape = Tape {
            emb,
            t1,
            a1,
            t2,
            s,
            ctx_t,
            input: x.clone(),
            enc: enc_t,
            attn: attn_t,
            mid: mid_t,
            dec: dec_t,
            dec_up_channels: dec_up,
            pre_out: h,
            gn_out,
            a_out,
            h_out,
        };
        (y, tape)
    }

    /// Back-propagate `dy` through a recorded forward pass.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the
    /// gradient with respect to the full input is returned when `need_dx`.
    pub fn backward<R: Real>(
        &self,
        p: &[R],
        mut grads: Option<&mut [R]>,
        tape: &Tape<R>,
        dy: &Act<R>,
        need_dx: bool,
        scratch: &mut Vec<R>,
    ) -> Option<Act<R>> {
        let cfg = &self.config;
        let pad = self.pad();
        let levels = cfg.levels();
        let m = cfg.context_tokens;
        let s = &tape.s;
        let mut ds = vec![R::zero(); s.len()];

        let dh = self.conv_out.backward(p, grads.as_deref_mut(), &tape.h_out, dy, pad, true, scratch).unwrap();
        let da = silu_act_backward(&tape.a_out, &dh);
        let mut d = self.gn_out.backward(p, grads.as_deref_mut(), &tape.pre_out, &tape.gn_out, &da);

        let mut dskips: Vec<Option<Act<R>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels {
            for (blk, tp) in self.dec[l].iter().zip(&tape.dec[l]).rev() {
                d = blk.backward(p, grads.as_deref_mut(), tp, &d, s, &mut ds, pad, scratch);
            }
            let (dup, dskip) = d.split(tape.dec_up_channels[l]);
            dskips[l] = Some(dskip);
            d = if l + 1 < levels { upsample2_backward(&dup) } else { dup };
        }
        d = self.mid.backward(p, grads.as_deref_mut(), &tape.mid, &d, s, &mut ds, pad, scratch);
        if let (Some(a), Some(tp)) = (&self.attn, &tape.attn) {
            d = a.backward(p, grads.as_deref_mut(), tp, &d, &tape.ctx_t, m, pad, scratch);
        }
        for l in (0..levels).rev() {
            if l + 1 < levels {
                d = avg_pool2_backward(&d);
            }
            d.add_assign(dskips[l].as_ref().unwrap());
            for (blk, tp) in self.enc[l].iter().zip(&tape.enc[l]).rev() {
                d = blk.backward(p, grads.as_deref_mut(), tp, &d, s, &mut ds, pad, scratch);
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let dt2 = silu_backward(&tape.t2, &ds);
            let da1 = self.time2.backward(p, Some(&mut *g), &tape.a1, &dt2, 1, true).unwrap();
            let dt1 = silu_backward(&tape.t1, &da1);
            self.time1.backward(p, Some(g), &tape.emb, &dt1, 1, false);
        }
        self.conv_in.backward(p, grads, &tape.input, &d, pad, need_dx, scratch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> UNetConfig {
        UNetConfig {
            field_channels: 2,
            cond_channels: 1,
            widths: vec![4, 8],
            res_blocks: 1,
            time_dim: 8,
            context_tokens: 3,
            context_dim: 5,
            attention: true,
            circular_lon: true,
            time_scale: 10.0,
        }
    }

    fn perturbed_params(net: &UNet, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<f64> = net.layout().init(&mut rng);
        // zero-initialised tensors would hide gradient paths
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        p
    }

    fn input(seed: u64) -> (Act<f64>, Vec<f64>, Act<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Act::from_vec(3, 4, 8, (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ctx = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = Act::from_vec(2, 4, 8, (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        (x, ctx, r)
    }

    fn objective(net: &UNet, p: &[f64], x: &Act<f64>, ctx: &[f64], r: &Act<f64>) -> f64 {
        let mut s = Vec::new();
        let (y, _) = net.forward(p, x, 3.0, ctx, &mut s);
        y.data.iter().zip(&r.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    #[test]
    fn output_shape_matches_field_channels() {
        let net = UNet::new(tiny());
        let p = perturbed_params(&net, 1);
        let (x, ctx, _) = input(2);
        let (y, _) = net.forward(&p, &x, 1.0, &ctx, &mut Vec::new());
        assert_eq!((y.c, y.h, y.w), (2, 4, 8));
    }

    #[test]
    fn parameter_and_input_gradients_match_central_differences() {
        let net = UNet::new(tiny());
        let p = perturbed_params(&net, 3);
        let (x, ctx, r) = input(4);
        let mut s = Vec::new();
        let (y, tape) = net.forward(&p, &x, 3.0, &ctx, &mut s);
        let mut dy = y.clone();
        for (a, b) in dy.data.iter_mut().zip(&r.data) {
            *a = 2.0 * (*a - *b);
        }
        let mut g = vec![0.0; p.len()];
        let dx = net.backward(&p, Some(&mut g), &tape, &dy, true, &mut s).unwrap();

        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // every named tensor gets probed at least once
        let probes: Vec<usize> = net
            .layout()
            .names()
            .map(|(_, slot)| slot.offset + rng.gen_range(0..slot.len))
            .collect();
        for i in probes {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (objective(&net, &pp, &x, &ctx, &r) - objective(&net, &pm, &x, &ctx, &r)) / (2.0 * h);
            let tol = 1e-6 + 1e-4 * fd.abs().max(g[i].abs());
            assert!((fd - g[i]).abs() < tol, "param {i}: fd {fd} vs analytic {}", g[i]);
        }
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&net, &p, &xp, &ctx, &r) - objective(&net, &p, &xm, &ctx, &r)) / (2.0 * h);
            let tol = 1e-6 + 1e-4 * fd.abs().max(dx.data[i].abs());
            assert!((fd - dx.data[i]).abs() < tol, "input {i}: fd {fd} vs analytic {}", dx.data[i]);
        }
    }

    #[test]
    fn input_only_backward_agrees_with_full_backward() {
        let net = UNet::new(tiny());
        let p = perturbed_params(&net, 5);
        let (x, ctx, r) = input(6);
        let mut s = Vec::new();
        let (_, tape) = net.forward(&p, &x, 2.0, &ctx, &mut s);
        let mut g = vec![0.0; p.len()];
        let a = net.backward(&p, Some(&mut g), &tape, &r, true, &mut s).unwrap();
        let b = net.backward(&p, None, &tape, &r, true, &mut s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_changes_output() {
        let net = UNet::new(tiny());
        let p = perturbed_params(&net, 7);
        let (x, ctx, _) = input(8);
        let mut s = Vec::new();
        let (y0, _) = net.forward(&p, &x, 2.0, &ctx, &mut s);
        let ctx2: Vec<f64> = ctx.iter().map(|v| -v).collect();
        let (y1, _) = net.forward(&p, &x, 2.0, &ctx2, &mut s);
        let diff: f64 = y0.data.iter().zip(&y1.data).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8);
    }
}
