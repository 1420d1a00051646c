use nalgebra::DMatrix;
use proptest::prelude::*;

use pcpca::dataset::{load_csv, save_csv, write_csv, ContrastivePair, CsvOptions, DataMatrix};
use pcpca::estimators::{
    convert_gamma, fit_pcpca, heldout_log_likelihood, project, relative_log_likelihood, ModelFile, ProjectionMode,
};
use pcpca::evalkit::{run_experiment, simulate_mixture, ExperimentSpec, MixtureSpec};
use pcpca::linalg::{orthonormalize, projector_distance};
use pcpca::missing::{fit_missing, impute_uncentered, OptimizerConfig};
use pcpca::sampling::{gaussian_matrix, rng};
use pcpca::spectral::gamma_mle_report;

fn toy_pair(seed: u64) -> ContrastivePair {
    simulate_mixture(&MixtureSpec::toy().with_seed(seed)).unwrap().0
}

#[test]
fn csv_fit_model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pair = toy_pair(1);
    let (fg, bg) = (dir.path().join("fg.csv"), dir.path().join("bg.csv"));
    save_csv(&fg, pair.foreground().values()).unwrap();
    save_csv(&bg, pair.background().values()).unwrap();

    let opts = CsvOptions::default();
    let loaded = ContrastivePair::new(load_csv(&fg, &opts).unwrap(), load_csv(&bg, &opts).unwrap()).unwrap();
    assert_eq!(loaded.foreground().values(), pair.foreground().values());
    let centered = loaded.centered().unwrap();
    let gamma = convert_gamma(0.5, centered.n(), centered.m()).unwrap();
    let model = fit_pcpca(&centered, 1, gamma).unwrap();

    let file = ModelFile::from_model(&model, ProjectionMode::PosteriorMean);
    let text = serde_json::to_string_pretty(&file).unwrap();
    assert!(text.contains("\"version\": \"pcpca-model/1\""));
    let back: ModelFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back.to_model().unwrap(), model);

    let z = project(&model, centered.foreground(), ProjectionMode::PosteriorMean).unwrap();
    assert_eq!(z.shape(), (200, 1));
}

#[test]
fn masked_csv_imputes_on_the_raw_scale() {
    let pair = toy_pair(2);
    let masked = pair.foreground().mask_at_random(0.2, 3).unwrap();
    // keep at least one cell per row
    let mut keep = masked.mask().clone();
    for i in 0..keep.nrows() {
        keep[(i, i % 2)] |= !keep[(i, 1 - i % 2)];
    }
    let masked = pair.foreground().apply_mask(&keep).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, masked.values(), Some(masked.mask()), "NA").unwrap();
    let opts = CsvOptions { missing_token: "NA".into(), ..Default::default() };
    let parsed = pcpca::dataset::parse_csv(buf.as_slice(), &opts).unwrap();
    assert_eq!(parsed.mask(), masked.mask());

    let bg = pair.background().clone();
    let centered = ContrastivePair::new(parsed.clone(), bg).unwrap().centered().unwrap();
    let (model, _) = fit_missing(&centered, 1, 0.3, &OptimizerConfig::default(), 0).unwrap();
    let (filled, stdev) = impute_uncentered(&model, &parsed).unwrap();
    assert!(filled.is_fully_observed());
    for i in 0..parsed.n_samples() {
        for k in 0..2 {
            if parsed.is_observed(i, k) {
                assert!((filled.values()[(i, k)] - parsed.values()[(i, k)]).abs() < 1e-12);
                assert_eq!(stdev[(i, k)], 0.0);
            } else {
                assert!(stdev[(i, k)] > 0.0);
            }
        }
    }
}

#[test]
fn experiment_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::from_json(r#"{"kind": "generation", "repetitions": 2, "seed": 3}"#).unwrap();
    let report = run_experiment(&spec).unwrap();
    let path = dir.path().join("report.csv");
    report.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    // two metrics at each of five gamma' values, plus the header
    assert_eq!(text.lines().count(), 11);
    let ll0 = report.cell("pcpca", "test_ll", "gamma_prime", 0.0).unwrap().mean.unwrap();
    assert!(ll0.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn closed_form_beats_perturbations(seed in any::<u64>(), gp in 0.0f64..0.8) {
        let mut r = rng(seed);
        let x = gaussian_matrix(&mut r, 40, 4) * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.5, 1.2]));
        let y = gaussian_matrix(&mut r, 40, 4);
        let pair = ContrastivePair::new(DataMatrix::new(x).unwrap(), DataMatrix::new(y).unwrap()).unwrap().centered().unwrap();
        let gamma = convert_gamma(gp, 40, 40).unwrap();
        prop_assume!(gamma < gamma_mle_report(&pair, 2).unwrap().mle_feasible_sup);
        let model = fit_pcpca(&pair, 2, gamma).unwrap();
        let best = relative_log_likelihood(&model, &pair, gamma).unwrap();
        let w2 = model.w() + gaussian_matrix(&mut r, 4, 2) * 0.05;
        let other = model.with_params(w2, model.sigma2() * 1.05).unwrap();
        prop_assert!(relative_log_likelihood(&other, &pair, gamma).unwrap() <= best + 1e-9);
    }

    #[test]
    fn fit_is_translation_equivariant(seed in any::<u64>(), shift in -20.0f64..20.0) {
        let pair = toy_pair(seed);
        let moved = pair.map(|d| {
            let mut v = d.values().clone();
            v.add_scalar_mut(shift);
            DataMatrix::new(v)
        }).unwrap();
        let a = fit_pcpca(&pair.centered().unwrap(), 1, 0.3).unwrap();
        let b = fit_pcpca(&moved.centered().unwrap(), 1, 0.3).unwrap();
        prop_assert!(projector_distance(&orthonormalize(a.w()), &orthonormalize(b.w())) < 1e-8);
        prop_assert!((a.sigma2() - b.sigma2()).abs() < 1e-8 * a.sigma2().max(1.0));
    }

    #[test]
    fn heldout_likelihood_is_additive(seed in any::<u64>(), split in 1usize..199) {
        let pair = toy_pair(seed).centered().unwrap();
        let model = fit_pcpca(&pair, 1, 0.0).unwrap();
        let x = pair.foreground();
        let all: Vec<usize> = (0..x.n_samples()).collect();
        let whole = heldout_log_likelihood(&model, x).unwrap();
        let parts = heldout_log_likelihood(&model, &x.rows(&all[..split])).unwrap()
            + heldout_log_likelihood(&model, &x.rows(&all[split..])).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-8 * whole.abs());
    }
}
