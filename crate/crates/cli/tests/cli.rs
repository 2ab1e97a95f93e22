use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {
    "truth": { "nlat": 16, "nlon": 32, "years": 4, "days_per_year": 4, "terrain_max_wavenumber": 6.0, "seed": 3 },
    "gcms": [
      { "name": "gcm8x16", "nlat": 8, "nlon": 16, "cutoff": 4.0, "seed": 11 },
      { "name": "gcm4x8", "nlat": 4, "nlon": 8, "cutoff": 3.0, "seed": 12 }
    ]
  },
  "grid": { "coarse_nlat": 4, "coarse_nlon": 8 },
  "prior": {
    "model": { "widths": [4, 8], "res_blocks": 1, "time_dim": 8, "steps": 5, "beta_start": 0.01, "beta_end": 0.3 },
    "training": { "epochs": 3, "batch_size": 8, "val_probes": 4, "min_improvement": 0.0 }
  },
  "sampler": { "ensemble": 2, "guidance_scale": 0.1 },
  "eval": { "test_stride": 2, "spectral_band": [3, 8], "scale_sweep": [2, 4], "sweep_gcm": "gcm8x16" },
  "baselines": { "knots": 5 }
}"#;

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn zssd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zssd")).args(args).env("ZSSD_NUM_WORKERS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = zssd(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "zssd {args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    zssd(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    data
}

#[test]
fn pipeline_from_synthesis_to_figures() {
    let dir = scratch("pipeline");
    let data = synth(&dir);
    assert!(data.join("config.json").exists());

    let prior = dir.join("prior");
    ok(&["train", "--data", s(&data), "--out", s(&prior)]);
    let ckpt = prior.join("checkpoint.bin");
    assert!(ckpt.exists());
    let curve = fs::read_to_string(prior.join("training_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4, "header plus one row per epoch:\n{curve}");

    let paired = dir.join("paired");
    let stdout = ok(&["sample", "--data", s(&data), "--checkpoint", s(&ckpt), "--paired", "2", "--out", s(&paired)]);
    assert!(stdout.contains("coarse relative RMSE"), "{stdout}");
    assert!(paired.join("member_1").is_dir());

    let again = dir.join("paired_again");
    ok(&["sample", "--data", s(&data), "--checkpoint", s(&ckpt), "--paired", "2", "--out", s(&again)]);
    let first = fs::read_dir(paired.join("member_0")).unwrap().count();
    assert!(first > 0);
    for entry in fs::read_dir(paired.join("member_0")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(paired.join("member_0").join(&name)).unwrap(), fs::read(again.join("member_0").join(&name)).unwrap());
    }

    let bcsd = dir.join("bcsd");
    ok(&["sample", "--data", s(&data), "--baseline", "bcsd", "--gcm", "gcm8x16", "--out", s(&bcsd)]);

    let reports = dir.join("reports");
    ok(&["eval", "--data", s(&data), "--outputs", s(&paired), "--out", s(&reports)]);
    ok(&["eval", "--data", s(&data), "--outputs", s(&bcsd), "--out", s(&reports), "--force"]);
    let names: Vec<String> = fs::read_dir(&reports).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(names.iter().any(|n| n.ends_with("zssd.report.json")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with("bcsd.report.json")), "{names:?}");
    assert!(names.iter().any(|n| n.ends_with(".spectra.csv")), "{names:?}");

    let figures = dir.join("figures");
    ok(&["plot", "--reports", s(&reports), "--out", s(&figures)]);
    for f in ["spectra.png", "bias.png", "traces.png", "errors.png", "legend.txt"] {
        assert!(figures.join(f).exists(), "missing {f}");
    }

    let ablation = dir.join("ablation");
    ok(&["ablate", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&ablation)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ablation.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(summary["scale_sweep"].as_array().unwrap().len(), 2);
}

#[test]
fn error_paths_map_to_exit_codes() {
    let dir = scratch("errors");
    let data = synth(&dir);

    // non-empty output directory without --force
    assert_eq!(code(&["synth", "--config", s(&dir.join("tiny.json")), "--out", s(&data)]), 3);

    let bad = dir.join("bad.json");
    fs::write(&bad, r#"{ "sampler": { "ensemble": 0 } }"#).unwrap();
    assert_eq!(code(&["synth", "--config", s(&bad), "--out", s(&dir.join("x"))]), 2);
    fs::write(&bad, r#"{ "sampler": { "ensembel": 3 } }"#).unwrap();
    assert_eq!(code(&["synth", "--config", s(&bad), "--out", s(&dir.join("y"))]), 2);

    assert_eq!(code(&["sample", "--data", s(&data), "--baseline", "bilinear", "--gcm", "nope", "--out", s(&dir.join("z"))]), 3);
    assert_eq!(code(&["sample", "--data", s(&data), "--baseline", "bilinear", "--out", s(&dir.join("w"))]), 2);

    let strict = dir.join("strict.json");
    fs::write(&strict, TINY.replace("\"min_improvement\": 0.0", "\"min_improvement\": 0.99")).unwrap();
    assert_eq!(code(&["train", "--config", s(&strict), "--data", s(&data), "--out", s(&dir.join("prior"))]), 4);
}
