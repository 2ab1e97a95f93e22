use std::sync::Arc;

use zssd::grid::{Grid, SeparableOp};
use zssd::metrics::{lat_weighted_rmse, mean_zonal_psd, spectral_slope, terrain_correlation};
use zssd::synth::{make_splits, pseudo_gcm, spectral_truth, synth_terrain, GcmConfig, SynthConfig};
use zssd::Field;

fn small(coupling: f64) -> SynthConfig {
    SynthConfig { years: 2, days_per_year: 4, coupling, seed: 11, ..SynthConfig::default() }
}

fn truth(cfg: &SynthConfig) -> (Field, Vec<Field>) {
    let terrain = synth_terrain(&cfg.grid().unwrap(), cfg.terrain_max_wavenumber, cfg.flat_terrain, cfg.seed).unwrap();
    let seq = spectral_truth(cfg, &terrain).unwrap();
    (terrain, seq)
}

#[test]
fn terrain_land_fraction_and_determinism() {
    let g = Arc::new(Grid::equiangular(64, 128).unwrap());
    for seed in 0..5 {
        let t = synth_terrain(&g, 24.0, false, seed).unwrap();
        let lsm = t.channel(1);
        assert!(lsm.iter().all(|v| *v == 0.0 || *v == 1.0));
        let frac = lsm.iter().sum::<f64>() / lsm.len() as f64;
        assert!((0.25..=0.35).contains(&frac), "land fraction {frac}");
        assert!(t.channel(0).iter().zip(lsm).all(|(h, l)| (*h > 0.0) == (*l == 1.0)));
        assert_eq!(t, synth_terrain(&g, 24.0, false, seed).unwrap());
    }
    let flat = synth_terrain(&g, 24.0, true, 3).unwrap();
    assert!(flat.values.iter().all(|v| *v == 0.0));
}

#[test]
fn truth_is_standardized_with_the_requested_slope() {
    let cfg = small(1.0);
    let (_, seq) = truth(&cfg);
    assert_eq!(seq.len(), 32);
    assert_eq!(seq[1].time.hour(), 6);
    let psd = mean_zonal_psd(&seq).unwrap();
    for (v, p) in cfg.variables.iter().zip(&psd) {
        let slope = spectral_slope(p, 5..51).unwrap();
        assert!((slope + 3.0).abs() <= 0.3, "{v}: slope {slope}");
    }
    // standardized per variable, then mapped to physical units
    let n = (seq.len() * seq[0].plane()) as f64;
    let mean = seq.iter().flat_map(|f| f.channel(0).iter()).sum::<f64>() / n;
    let sd = (seq.iter().flat_map(|f| f.channel(0).iter()).map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((mean - 101_325.0).abs() < 1e-6 && (sd - 1000.0).abs() < 1e-6);
    assert_eq!(seq, truth(&cfg).1);
}

#[test]
fn wind_speed_follows_terrain_only_when_coupled() {
    let long = |c| SynthConfig { years: 4, days_per_year: 17, ..small(c) };
    let (terrain, seq) = truth(&long(1.0));
    let r1 = terrain_correlation(&seq, terrain.channel(0), terrain.channel(1)).unwrap();
    assert!(r1.r < -0.3, "coupled r = {}", r1.r);
    let (terrain, seq) = truth(&long(0.0));
    let r0 = terrain_correlation(&seq, terrain.channel(0), terrain.channel(1)).unwrap();
    assert!(r0.r.abs() < 0.05, "uncoupled r = {}", r0.r);
}

#[test]
fn identity_emulation_is_plain_coarsening() {
    let (_, seq) = truth(&small(1.0));
    let gcm = pseudo_gcm(&seq, &GcmConfig::identity("id", 16, 32)).unwrap();
    let coarse = Arc::new(Grid::equiangular(16, 32).unwrap());
    let op = SeparableOp::conservative(seq[0].grid.clone(), coarse).unwrap();
    for (g, t) in gcm.iter().zip(&seq) {
        let expect = op.apply(t).unwrap();
        assert_eq!(g.values, expect.values);
        assert_eq!(g.time, t.time);
    }
}

#[test]
fn emulator_damps_small_scales_and_keeps_rank_order() {
    let (_, seq) = truth(&small(1.0));
    let cfg = GcmConfig { nlat: 48, nlon: 96, shuffle: false, ..GcmConfig::default() };
    let gcm = pseudo_gcm(&seq, &cfg).unwrap();
    let fine_src = Arc::new(Grid::equiangular(48, 96).unwrap());
    let reference: Vec<Field> = seq.iter().map(|f| SeparableOp::conservative(f.grid.clone(), fine_src.clone()).unwrap().apply(f).unwrap()).collect();
    let pg = mean_zonal_psd(&gcm).unwrap();
    let pt = mean_zonal_psd(&reference).unwrap();
    for (a, b) in pg.iter().zip(&pt) {
        for k in 9..30 {
            let db = 10.0 * (b[k] / a[k]).log10();
            assert!(db >= 3.0, "wavenumber {k}: only {db:.2} dB below truth");
        }
    }
    // without filter and bias the per-cell distortion preserves ranks exactly
    let only_distortion = GcmConfig { cutoff: None, bias: 0.0, shuffle: false, ..cfg.clone() };
    let d = pseudo_gcm(&seq, &only_distortion).unwrap();
    for k in (0..d[0].values.len()).step_by(97) {
        for i in 0..seq.len() {
            for j in 0..seq.len() {
                let a = reference[i].values[k].total_cmp(&reference[j].values[k]);
                assert_eq!(a, d[i].values[k].total_cmp(&d[j].values[k]));
            }
        }
    }
}

#[test]
fn large_scales_survive_emulation() {
    let (_, seq) = truth(&small(1.0));
    let fine = seq[0].grid.clone();
    let unified = Arc::new(Grid::equiangular(8, 16).unwrap());
    let truth_low = SeparableOp::conservative(fine.clone(), unified.clone()).unwrap();
    for cfg in GcmConfig::ensemble(5) {
        let cfg = GcmConfig { shuffle: false, ..cfg };
        let gcm = pseudo_gcm(&seq, &cfg).unwrap();
        let gcm_low = SeparableOp::conservative(gcm[0].grid.clone(), unified.clone()).unwrap();
        let up = SeparableOp::bilinear(gcm[0].grid.clone(), fine.clone()).unwrap();
        let (mut coarse_err, mut full_err) = (vec![0.0; 3], vec![0.0; 3]);
        for (g, t) in gcm.iter().zip(&seq) {
            let c = lat_weighted_rmse(&gcm_low.apply(g).unwrap(), &truth_low.apply(t).unwrap()).unwrap();
            let f = lat_weighted_rmse(&up.apply(g).unwrap(), t).unwrap();
            for v in 0..3 {
                coarse_err[v] += c[v];
                full_err[v] += f[v];
            }
        }
        for v in 0..3 {
            let ratio = coarse_err[v] / full_err[v];
            assert!(ratio < 0.5, "{} variable {v}: ratio {ratio}", cfg.name);
        }
    }
}

#[test]
fn splits_are_chronological() {
    let cfg = SynthConfig { years: 30, days_per_year: 1, ..SynthConfig::default() };
    let times = cfg.timestamps().unwrap();
    let s = make_splits(&times).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 4, 36));
    assert_eq!(times[s.train.end - 1].year(), 1999);
    assert_eq!(times[s.val.start].year(), 2000);
    assert_eq!(times[s.test.start].year(), 2001);
    assert_eq!(times[s.test.end - 1].year(), 2009);
}
