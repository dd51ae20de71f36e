use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use driftdecomp::io::{
    read_tensor, save_truth, write_json, write_tensor, ModelBundle, TruthFile, DATA_FILE, MODEL_FILE, REPORT_FILE,
    TRUTH_FILE, TRUTH_SCORES_FILE,
};
use driftdecomp::synth::SynthConfig;
use driftdecomp::tensor::DenseTensor4;
use driftdecomp_cli::{
    cmd_evaluate, cmd_export_plots, cmd_fit, cmd_simulate, exit, spectrum_name, surface_name, EvaluateArgs, FitArgs,
    SimulateArgs, CONFIG_SCHEMA_VERSION,
};
use serde_json::json;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driftdecomp"))
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "synth": {
            "acquisitions": 40, "modulations": 12, "channels": 15, "samples": 3,
            "n_ms_peaks": 10, "drift1_max": 1.0, "drift2_max": 4.0,
            "sigma1": 1.2, "sigma2": 4.0, "seed": 3
        },
        "fit": {
            "n_starts": 3, "burn_iters": 20,
            "flex": { "rank": 2, "max_iters": 300,
                      "nonneg": { "scores": true, "spectra": true, "amplitudes": true } }
        }
    });
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Simulates and fits the small problem, returning (data dir, model dir).
fn simulate_and_fit(root: &Path) -> (PathBuf, PathBuf) {
    let config = small_config(root);
    let data = root.join("data");
    let model = root.join("model");
    cmd_simulate(&SimulateArgs {
        output: data.clone(),
        config: Some(config.clone()),
        ..Default::default()
    })
    .unwrap();
    cmd_fit(&FitArgs {
        input: data.clone(),
        output: model.clone(),
        config: Some(config),
        threads: 1,
        ..Default::default()
    })
    .unwrap();
    (data, model)
}

#[test]
fn simulate_default_writes_positive_tensor() {
    let dir = TempDir::new().unwrap();
    let summary = cmd_simulate(&SimulateArgs {
        output: dir.path().to_path_buf(),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(summary.dims, [200, 45, 20, 3]);
    assert_eq!(summary.rank, 2);
    for f in [DATA_FILE, TRUTH_FILE, TRUTH_SCORES_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let x = read_tensor(&dir.path().join(DATA_FILE)).unwrap();
    assert!(x.data().iter().all(|&v| v > 0.0));
}

#[test]
fn simulate_is_reproducible_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let config = small_config(dir.path());
    for name in ["a", "b"] {
        let out = bin()
            .args(["simulate", "--seed", "11", "--config"])
            .arg(&config)
            .arg("--output")
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("I=40 J=15 K=12 L=3") && stdout.contains("seed=11"), "{stdout}");
    }
    for f in [DATA_FILE, TRUTH_FILE, TRUTH_SCORES_FILE] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn simulate_warns_when_drift_exceeds_dims() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.json");
    let cfg = json!({
        "schema_version": CONFIG_SCHEMA_VERSION,
        "synth": { "acquisitions": 10, "modulations": 4, "channels": 8, "n_ms_peaks": 4 }
    });
    fs::write(&config, cfg.to_string()).unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn fit_small_problem_explains_variance() {
    let dir = TempDir::new().unwrap();
    let (_, model) = simulate_and_fit(dir.path());
    for f in ["F.dtf", "A.dtf", "D.dtf", MODEL_FILE, REPORT_FILE] {
        assert!(model.join(f).is_file(), "{f}");
    }
    let report = driftdecomp::io::load_report(&model).unwrap();
    assert!(report.percent_var > 99.9, "{}", report.percent_var);
    assert_eq!(report.objective_trace.len(), report.iterations + 1);
    assert_eq!(report.per_start.len(), 3);
}

#[test]
fn fit_out_of_iterations_exits_with_max_iters_and_writes_model() {
    let dir = TempDir::new().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    cmd_simulate(&SimulateArgs {
        output: data.clone(),
        config: Some(config),
        ..Default::default()
    })
    .unwrap();
    let model = dir.path().join("model");
    let out = bin()
        .args(["fit", "--rank", "2", "--starts", "2", "--max-iters", "1", "--threads", "1", "--input"])
        .arg(&data)
        .arg("--output")
        .arg(&model)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::MAX_ITERS), "{}", String::from_utf8_lossy(&out.stderr));
    let bundle = ModelBundle::load(&model).unwrap();
    assert_eq!(bundle.rank(), 2);
    assert!(model.join(REPORT_FILE).is_file());
}

#[test]
fn fit_missing_input_leaves_no_outputs() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model");
    let out = bin()
        .args(["fit", "--input"])
        .arg(dir.path().join("nope.dtf"))
        .arg("--output")
        .arg(&model)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::IO));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    assert!(!model.exists());
}

#[test]
fn fit_rejects_bad_config() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, json!({ "schema_version": 99 }).to_string()).unwrap();
    let data = dir.path().join("x.dtf");
    write_tensor(&data, &DenseTensor4::zeros([2, 2, 2, 2]).unwrap()).unwrap();
    let out = bin()
        .args(["fit", "--config"])
        .arg(&config)
        .arg("--input")
        .arg(&data)
        .arg("--output")
        .arg(dir.path().join("m"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::CONFIG));

    let out = bin()
        .args(["fit", "--nonneg", "xyz", "--input"])
        .arg(&data)
        .arg("--output")
        .arg(dir.path().join("m"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::CONFIG));
    assert!(!dir.path().join("m").exists());
}

#[test]
fn threads_env_var_is_accepted() {
    let dir = TempDir::new().unwrap();
    let config = small_config(dir.path());
    let data = dir.path().join("data");
    cmd_simulate(&SimulateArgs {
        output: data.clone(),
        config: Some(config),
        ..Default::default()
    })
    .unwrap();
    let out = bin()
        .env("DRIFTDECOMP_THREADS", "2")
        .args(["fit", "--starts", "2", "--max-iters", "3", "--input"])
        .arg(&data)
        .arg("--output")
        .arg(dir.path().join("m"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::MAX_ITERS));

    let out = bin()
        .env("DRIFTDECOMP_THREADS", "many")
        .args(["fit", "--input"])
        .arg(&data)
        .arg("--output")
        .arg(dir.path().join("m2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::CONFIG));
}

/// Writes a truth set and data tensor that the bundle reproduces exactly.
fn truth_from_model(bundle: &ModelBundle, dir: &Path) {
    let [ni, nr, nk, nl] = bundle.profiles.shape();
    let nj = bundle.spectra.nrows();
    let mut maps = bundle.profiles.clone();
    let mut x = DenseTensor4::zeros([ni, nj, nk, nl]).unwrap();
    for i in 0..ni {
        for k in 0..nk {
            for l in 0..nl {
                for r in 0..nr {
                    maps.set(i, r, k, l, bundle.profiles.get(i, r, k, l) * bundle.abundances[(l, r)]);
                }
                for j in 0..nj {
                    let v: f64 = (0..nr).map(|r| maps.get(i, r, k, l) * bundle.spectra[(j, r)]).sum();
                    x.set(i, j, k, l, v);
                }
            }
        }
    }
    let truth = driftdecomp::synth::GroundTruth {
        spectra: bundle.spectra.clone(),
        score_maps: maps.clone(),
        abundances: (0..nr).map(|r| (0..nl).map(|l| bundle.abundances[(l, r)]).collect()).collect(),
        apexes: vec![],
        noise_sd: 0.0,
        offset: 0.0,
    };
    let file = TruthFile::new(&SynthConfig::default(), [ni, nj, nk, nl], &truth, &[]);
    save_truth(dir, &file, &maps).unwrap();
    write_tensor(&dir.join(DATA_FILE), &x).unwrap();
}

#[test]
fn evaluate_against_own_reconstruction_is_perfect() {
    let dir = TempDir::new().unwrap();
    let (_, model) = simulate_and_fit(dir.path());
    let bundle = ModelBundle::load(&model).unwrap();
    let truth_dir = dir.path().join("self");
    truth_from_model(&bundle, &truth_dir);
    let report = cmd_evaluate(&EvaluateArgs {
        model: model.clone(),
        truth: truth_dir,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(report.permutation, vec![0, 1]);
    for c in report.spectral_cosines.iter().chain(&report.score_map_cosines) {
        assert!((c - 1.0).abs() < 1e-12, "{c}");
    }
    assert!((report.percent_var - 100.0).abs() < 1e-9);
    for reg in &report.abundance_regression {
        let reg = reg.unwrap();
        assert!((reg.slope - 1.0).abs() < 1e-9 && (reg.r_squared - 1.0).abs() < 1e-9);
    }
}

#[test]
fn evaluate_is_invariant_to_component_order() {
    let dir = TempDir::new().unwrap();
    let (data, model) = simulate_and_fit(dir.path());
    let bundle = ModelBundle::load(&model).unwrap();
    let base = cmd_evaluate(&EvaluateArgs {
        model: model.clone(),
        truth: data.clone(),
        ..Default::default()
    })
    .unwrap();
    assert!(base.mean_spectral_cosine > 0.99, "{base:?}");

    let mut swapped = bundle.clone();
    let [ni, _, nk, nl] = bundle.profiles.shape();
    for i in 0..ni {
        for k in 0..nk {
            for l in 0..nl {
                swapped.profiles.set(i, 0, k, l, bundle.profiles.get(i, 1, k, l));
                swapped.profiles.set(i, 1, k, l, bundle.profiles.get(i, 0, k, l));
            }
        }
    }
    swapped.spectra.swap_columns(0, 1);
    swapped.abundances.swap_columns(0, 1);
    let swapped_dir = dir.path().join("swapped");
    swapped.save(&swapped_dir).unwrap();
    let out = dir.path().join("eval.json");
    let permuted = cmd_evaluate(&EvaluateArgs {
        model: swapped_dir,
        truth: data.join(TRUTH_FILE),
        output: Some(out.clone()),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(permuted.permutation, base.permutation.iter().map(|&p| 1 - p).collect::<Vec<_>>());
    assert_eq!(permuted.spectral_cosines, base.spectral_cosines);
    assert_eq!(permuted.score_map_cosines, base.score_map_cosines);
    assert!((permuted.percent_var - base.percent_var).abs() < 1e-9);
    let on_disk: driftdecomp_cli::EvaluationReport = driftdecomp::io::read_json(&out).unwrap();
    assert_eq!(on_disk, permuted);
}

#[test]
fn evaluate_rejects_mismatched_truth() {
    let dir = TempDir::new().unwrap();
    let (_, model) = simulate_and_fit(dir.path());
    let other = dir.path().join("other");
    cmd_simulate(&SimulateArgs {
        output: other.clone(),
        config: None,
        rank: Some(2),
        seed: Some(1),
    })
    .unwrap();
    let out = bin()
        .arg("evaluate")
        .arg("--input")
        .arg(&model)
        .arg("--truth")
        .arg(&other)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn export_writes_one_file_per_surface_and_spectrum() {
    let dir = TempDir::new().unwrap();
    let (_, model) = simulate_and_fit(dir.path());
    let a = dir.path().join("plots_a");
    let b = dir.path().join("plots_b");
    let files = cmd_export_plots(&model, &a).unwrap();
    cmd_export_plots(&model, &b).unwrap();

    let names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let count = |prefix: &str, ext: &str| names.iter().filter(|n| n.starts_with(prefix) && n.ends_with(ext)).count();
    assert_eq!(count("surface_", ".csv"), 2 * 3);
    assert_eq!(count("spectrum_", ".csv"), 2);
    assert_eq!(count("surface_", ".svg"), 2 * 3);
    assert_eq!(count("spectrum_", ".svg"), 2);
    assert!(names.contains(&surface_name(1, 2, "csv")) && names.contains(&spectrum_name(0, "svg")));
    assert_eq!(files.len(), names.len());

    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
}

#[test]
fn export_from_empty_dir_is_descriptive() {
    let dir = TempDir::new().unwrap();
    let out = bin()
        .arg("export-plots")
        .arg("--input")
        .arg(dir.path())
        .arg("--output")
        .arg(dir.path().join("plots"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::IO));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no model found"));
}

#[test]
fn config_file_json_roundtrip() {
    let dir = TempDir::new().unwrap();
    let path = small_config(dir.path());
    let cfg = driftdecomp_cli::load_config(&path).unwrap();
    let again = dir.path().join("again.json");
    write_json(&again, &cfg).unwrap();
    let reread = driftdecomp_cli::load_config(&again).unwrap();
    assert_eq!(reread.fit, cfg.fit);
    assert_eq!(reread.synth.unwrap().acquisitions, 40);
}
