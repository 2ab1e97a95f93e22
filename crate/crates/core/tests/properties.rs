use std::sync::Arc;

use proptest::prelude::*;
use zssd::baselines::{bcsd_downscale, climatology, QuantileMap};
use zssd::grid::{area_mean, Grid, SeparableOp};
use zssd::metrics::{lat_weighted_mae, lat_weighted_rmse, percentile_field, zonal_psd};
use zssd::{Field, Timestamp};

fn grid(nlat: usize, nlon: usize) -> Arc<Grid> {
    Arc::new(Grid::equiangular(nlat, nlon).unwrap())
}

fn field(g: &Arc<Grid>, values: Vec<f64>, step: usize) -> Field {
    let nchan = values.len() / g.len();
    let vars = (0..nchan).map(|c| format!("v{c}")).collect();
    let units = vec!["1".to_string(); nchan];
    let t = Timestamp::from_ordinal(2001, 1 + (step % 365) as u32, 0).unwrap();
    Field::new(g.clone(), values, vars, units, t, false).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fine 16x32 plus a coarsening factor dividing both dimensions.
fn fine_and_factor() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (prop::collection::vec(-5.0..5.0_f64, 16 * 32), prop::sample::select(vec![1usize, 2, 4, 8]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conservative_coarsening_is_linear_and_keeps_the_area_mean(
        (x, f) in fine_and_factor(),
        y in prop::collection::vec(-5.0..5.0_f64, 16 * 32),
        a in -3.0..3.0_f64,
    ) {
        let fine = grid(16, 32);
        let coarse = grid(16 / f, 32 / f);
        let op = SeparableOp::conservative(fine.clone(), coarse.clone()).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let lhs = op.apply_plane(&mix);
        let rhs: Vec<f64> = op.apply_plane(&x).iter().zip(op.apply_plane(&y)).map(|(p, q)| a * p + q).collect();
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(p, q)| p - q).collect();
        prop_assert!(max_abs(&diff) <= 1e-12 * (1.0 + max_abs(&lhs)));
        let (m_fine, m_coarse) = (area_mean(&fine, &x), area_mean(&coarse, &op.apply_plane(&x)));
        prop_assert!((m_fine - m_coarse).abs() <= 1e-12 * (1.0 + m_fine.abs()));
    }

    #[test]
    fn adjoint_matches_the_transpose((x, f) in fine_and_factor(), seed in 0u64..1000) {
        let op = SeparableOp::conservative(grid(16, 32), grid(16 / f, 32 / f)).unwrap();
        let y: Vec<f64> = (0..op.dst().len()).map(|k| ((k as u64 * 2654435761 + seed) % 97) as f64 / 48.0 - 1.0).collect();
        let lhs = dot(&op.apply_plane(&x), &y);
        let rhs = dot(&x, &op.adjoint_plane(&y));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn bilinear_stays_within_the_source_range(x in prop::collection::vec(-5.0..5.0_f64, 4 * 8), f in prop::sample::select(vec![1usize, 2, 3, 4])) {
        let op = SeparableOp::bilinear(grid(4, 8), grid(4 * f, 8 * f)).unwrap();
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        for v in op.apply_plane(&x) {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn unified_projection_round_trips_on_the_coarse_grid((x, f) in fine_and_factor()) {
        let (fine, coarse) = (grid(16, 32), grid(16 / f, 32 / f));
        let low = SeparableOp::conservative(fine.clone(), coarse.clone()).unwrap();
        let unified = SeparableOp::unified(fine.clone(), coarse, fine).unwrap();
        let before = low.apply_plane(&x);
        let after = low.apply_plane(&unified.apply_plane(&x));
        let diff: Vec<f64> = before.iter().zip(&after).map(|(p, q)| p - q).collect();
        prop_assert!(max_abs(&diff) <= 1e-10 * (1.0 + max_abs(&before)));
    }

    #[test]
    fn percentile_matches_a_sorted_column(
        cols in prop::collection::vec(prop::collection::vec(-100.0..100.0_f64, 2 * 4), 2..40),
        q in 0.5..99.5_f64,
    ) {
        let g = grid(2, 4);
        let seq: Vec<Field> = cols.iter().enumerate().map(|(i, v)| field(&g, v.clone(), i)).collect();
        let p = percentile_field(&seq, q).unwrap();
        for k in 0..8 {
            let mut column: Vec<f64> = cols.iter().map(|v| v[k]).collect();
            column.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = q / 100.0 * (column.len() - 1) as f64;
            let (lo, frac) = (rank.floor() as usize, rank.fract());
            let expect = if lo + 1 < column.len() { column[lo] * (1.0 - frac) + column[lo + 1] * frac } else { column[lo] };
            prop_assert!((p.values[k] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            prop_assert!(p.values[k] >= column[0] && p.values[k] <= column[column.len() - 1]);
        }
    }

    #[test]
    fn mae_never_exceeds_rmse(a in prop::collection::vec(-10.0..10.0_f64, 2 * 4 * 8), b in prop::collection::vec(-10.0..10.0_f64, 2 * 4 * 8)) {
        let g = grid(4, 8);
        let (fa, fb) = (field(&g, a, 0), field(&g, b, 0));
        for (m, r) in lat_weighted_mae(&fa, &fb).unwrap().iter().zip(lat_weighted_rmse(&fa, &fb).unwrap()) {
            prop_assert!(*m <= r * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn zonal_power_sums_to_the_weighted_mean_square(x in prop::collection::vec(-4.0..4.0_f64, 4 * 16)) {
        let g = grid(4, 16);
        let psd = zonal_psd(&field(&g, x.clone(), 0)).unwrap();
        let cos = g.cos_lat();
        let wsum: f64 = cos.iter().sum();
        let expect: f64 = x.chunks(16).zip(&cos).map(|(row, w)| w * row.iter().map(|v| v * v).sum::<f64>() / 16.0).sum::<f64>() / wsum;
        let total: f64 = psd[0].iter().sum();
        prop_assert!((total - expect).abs() <= 1e-10 * (1.0 + expect));
    }

    #[test]
    fn quantile_map_is_monotone(
        src in prop::collection::vec(-3.0..3.0_f64, 120),
        shift in -2.0..2.0_f64,
        gain in 0.2..3.0_f64,
        probes in prop::collection::vec(-8.0..8.0_f64, 2..30),
    ) {
        let g = grid(2, 2);
        let s: Vec<Field> = src.chunks(4).enumerate().map(|(i, v)| field(&g, v.to_vec(), i)).collect();
        let r: Vec<Field> = src.chunks(4).enumerate().map(|(i, v)| field(&g, v.iter().map(|x| gain * x * x.abs() + shift).collect(), i)).collect();
        let q = QuantileMap::fit(&s, &r, 10).unwrap();
        let mut sorted = probes;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for cell in 0..4 {
            let mapped: Vec<f64> = sorted.iter().map(|x| q.map_value(cell, *x)).collect();
            prop_assert!(mapped.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        }
    }
}

#[test]
fn white_noise_has_a_flat_zonal_spectrum() {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    let g = grid(8, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq: Vec<Field> = (0..400).map(|i| field(&g, (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), i)).collect();
    let psd = zssd::metrics::mean_zonal_psd(&seq).unwrap();
    // Uniform on [-1, 1] has variance 1/3, spread evenly over 64 bins.
    let expect = 2.0 / 3.0 / 64.0;
    for (k, p) in psd[0].iter().enumerate().take(32).skip(1) {
        assert!((p / expect - 1.0).abs() < 0.1, "wavenumber {k}: {p} vs {expect}");
    }
}

#[test]
fn bcsd_output_coarsens_to_the_corrected_input() {
    let (fine, coarse, src) = (grid(16, 32), grid(4, 8), grid(8, 16));
    let wave = |i: usize, k: usize, n: usize| ((i * 31 + k * 17) as f64 * 0.37).sin() + (k % n) as f64 / n as f64;
    let truth: Vec<Field> = (0..120).map(|i| field(&fine, (0..fine.len()).map(|k| wave(i, k, 32)).collect(), i)).collect();
    let gcm: Vec<Field> = (0..120).map(|i| field(&src, (0..src.len()).map(|k| 1.5 * wave(i + 3, k, 16) + 0.4).collect(), i)).collect();
    let to_coarse = |s: &[Field]| -> Vec<Field> {
        s.iter().map(|f| SeparableOp::conservative(f.grid.clone(), coarse.clone()).unwrap().apply(f).unwrap()).collect()
    };
    let q = QuantileMap::fit(&to_coarse(&gcm), &to_coarse(&truth), 20).unwrap();
    let clim = climatology(&truth).unwrap();
    let out = bcsd_downscale(&gcm[..10], &q, Some(&clim), &fine).unwrap();
    for (o, y) in out.iter().zip(&gcm) {
        let corrected = q.apply(&to_coarse(std::slice::from_ref(y))[0]).unwrap();
        let back = &to_coarse(std::slice::from_ref(o))[0];
        let diff: Vec<f64> = back.values.iter().zip(&corrected.values).map(|(a, b)| a - b).collect();
        assert!(max_abs(&diff) < 1e-10, "max deviation {}", max_abs(&diff));
    }
}
