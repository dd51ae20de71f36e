use driftdecomp::coupled::{fit, CoupledConfig};
use driftdecomp::flex::{FlexConfig, Nonnegativity};
use driftdecomp::io::{load_report, load_truth, save_report, save_truth, ModelBundle, TruthFile};
use driftdecomp::metrics::{match_components, percent_var, unfold_profiles};
use driftdecomp::synth::{generate, SynthConfig};

fn small() -> SynthConfig {
    SynthConfig {
        acquisitions: 50,
        modulations: 14,
        channels: 18,
        samples: 3,
        rank: 2,
        n_ms_peaks: 12,
        drift1_max: 1.0,
        drift2_max: 5.0,
        sigma1: 1.3,
        sigma2: 5.0,
        seed: 21,
        ..Default::default()
    }
}

fn config() -> CoupledConfig {
    CoupledConfig {
        flex: FlexConfig {
            rank: 2,
            nonneg: Nonnegativity {
                scores: true,
                spectra: true,
                amplitudes: true,
            },
            max_iters: 300,
            ..Default::default()
        },
        n_starts: 3,
        burn_iters: 20,
        seed: 21,
        ..Default::default()
    }
}

#[test]
fn small_synthetic_is_recovered() {
    let syn = generate(&small()).unwrap();
    let model = fit(&syn.tensor, &config()).unwrap();
    assert!(model.report.percent_var > 99.9, "{}", model.report.percent_var);

    let spectra = match_components(&syn.truth.spectra, &model.spectra).unwrap();
    assert!(spectra.per_component_cosines.iter().all(|&c| c > 0.99), "{spectra:?}");

    // Elution surfaces match per sample once components are paired.
    for l in 0..3 {
        let truth = unfold_profiles(&syn.truth.score_maps, l);
        let est = unfold_profiles(&model.profiles, l);
        for (r, &m) in spectra.permutation.iter().enumerate() {
            let cos = truth.column(r).dot(&est.column(m)) / (truth.column(r).norm() * est.column(m).norm());
            assert!(cos > 0.99, "sample {l} component {r}: {cos}");
        }
    }

    // Spectral consensus between the two unfoldings.
    for r in 0..2 {
        let a = model.state_kl.loadings.column(r);
        let b = model.state_il.loadings.column(r);
        assert!(a.dot(&b) / (a.norm() * b.norm()) > 0.99);
    }
}

#[test]
fn saved_bundles_reload_exactly() {
    let cfg = small();
    let syn = generate(&cfg).unwrap();
    let model = fit(&syn.tensor, &config()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let bundle = ModelBundle::from_model(&model, syn.tensor.shape(), &config());
    bundle.save(dir.path()).unwrap();
    save_report(dir.path(), &model.report).unwrap();
    let back = ModelBundle::load(dir.path()).unwrap();
    assert_eq!(back.profiles, bundle.profiles);
    assert_eq!(back.spectra, bundle.spectra);
    assert_eq!(back.abundances, bundle.abundances);
    assert_eq!(back.meta, bundle.meta);
    assert_eq!(load_report(dir.path()).unwrap(), model.report);

    let pv = percent_var(&syn.tensor, &back.profiles, &back.abundance_vectors(), &back.spectra).unwrap();
    assert_eq!(pv, model.report.percent_var);

    let file = TruthFile::new(&cfg, syn.tensor.shape(), &syn.truth, &syn.warnings);
    save_truth(dir.path(), &file, &syn.truth.score_maps).unwrap();
    let truth = load_truth(dir.path()).unwrap();
    assert_eq!(truth.file, file);
    assert_eq!(truth.score_maps, syn.truth.score_maps);
    assert_eq!(truth.file.spectra_matrix().unwrap(), syn.truth.spectra);
}
