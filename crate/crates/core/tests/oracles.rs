use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svead_core::data::{fit_scaler, apply_scaler};
use svead_core::explain::{ice_curves, shapley_exact, shapley_sampled, Background, GridKind, Reduction};
use svead_core::metrics::{pr_auc, roc_auc};
use svead_core::synth::two_blobs;
use svead_core::vae::{train_vae, TrainRows, VaeTrainConfig};
use svead_core::{Classifier, Dataset, LearnerSpec, Matrix, ScalerKind, VaeArchitecture, Warnings};

#[test]
fn random_scores_average_above_prevalence() {
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let (n, trials) = (50, 1000);
    let mut total = 0.0;
    let mut prevalence = 0.0;
    for _ in 0..trials {
        let mut y: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.2))).collect();
        y[0] = 1;
        y[1] = 0;
        let s: Vec<f64> = (0..n).map(|_| r.random()).collect();
        total += pr_auc(&y, &s).unwrap();
        prevalence += y.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
    }
    assert!(total / trials as f64 >= prevalence / trials as f64);
}

#[test]
fn sampled_shapley_within_three_standard_errors() {
    let d = 7;
    let bg = Background::new(Matrix::from_rows(&[vec![0.0; d], vec![1.0; d]]).unwrap(), Reduction::PerRowAverage).unwrap();
    let x: Vec<f64> = (0..d).map(|j| j as f64 * 0.5 - 1.0).collect();
    let linear = |m: &Matrix| Ok(m.rows_iter().map(|r| r.iter().enumerate().map(|(j, v)| (j as f64 + 1.0) * v).sum()).collect());
    let nonlinear = |m: &Matrix| Ok(m.rows_iter().map(|r| (r[0] * r[1]).tanh() + r[2] * r[3] * r[4] - r[5].max(r[6])).collect());
    for f in [&linear as &svead_core::explain::Predict, &nonlinear] {
        let exact = shapley_exact(f, &x, 0, &bg, 15).unwrap();
        let sampled = shapley_sampled(f, &x, 0, &bg, 2000, 5).unwrap();
        let se = sampled.std_error.clone().unwrap();
        for j in 0..d {
            assert!((sampled.phi[j] - exact.phi[j]).abs() <= 3.0 * se[j] + 1e-9, "feature {j}");
        }
    }
}

#[test]
fn logistic_ice_curves_match_closed_form() {
    let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 - 6.0, (i * 7 % 5) as f64]).collect();
    let data = Dataset::from_parts(Matrix::from_rows(&rows).unwrap(), (0..12).map(|i| (i % 2) as u8).collect()).unwrap();
    let f = |m: &Matrix| Ok(m.rows_iter().map(|r| 1.0 / (1.0 + (-r[0]).exp())).collect());
    let name = data.feature_names()[0].clone();
    let ice = ice_curves(&f, &data, &name, 9, GridKind::Linear).unwrap();
    for i in 0..data.n_rows() {
        for (c, g) in ice.grid.iter().enumerate() {
            assert!((ice.curves.get(i, c) - 1.0 / (1.0 + (-g).exp())).abs() < 1e-15);
        }
    }
    assert!(ice.pdp.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn logistic_combiner_beats_complementary_experts() {
    // Expert A errs on rows with i % 4 == 0, expert B on rows with i % 4 == 1.
    // Each is confident when right and barely wrong when wrong.
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let n = 400;
    let y: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
    let expert = |i: usize, label: u8, errs: usize, r: &mut ChaCha8Rng| {
        let (right, wrong) = (0.9 + 0.05 * r.random::<f64>(), 0.55 + 0.05 * r.random::<f64>());
        let toward = if i % 4 == errs { wrong } else { right };
        let correct_side = if i % 4 == errs { 1 - label } else { label };
        if correct_side == 1 { toward } else { 1.0 - toward }
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![expert(i, y[i], 0, &mut r), expert(i, y[i], 1, &mut r)]).collect();
    let meta = Dataset::from_parts(Matrix::from_rows(&rows).unwrap(), y.clone()).unwrap();
    let acc = |pred: &[u8]| pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / n as f64;
    let a: Vec<u8> = rows.iter().map(|r| u8::from(r[0] >= 0.5)).collect();
    let b: Vec<u8> = rows.iter().map(|r| u8::from(r[1] >= 0.5)).collect();
    let combiner = Classifier::fit(&LearnerSpec::logreg(), &meta, &mut Warnings::new()).unwrap();
    let stacked = combiner.predict(meta.features(), 0.5).unwrap();
    assert!(acc(&stacked) > acc(&a).max(acc(&b)), "{} vs {} / {}", acc(&stacked), acc(&a), acc(&b));
}

fn blob_vae() -> (svead_core::TrainedVae, Dataset, Dataset) {
    let data = two_blobs(150, 4, 8.0, 21);
    let scaler = fit_scaler(&data.subset(&data.class_rows(0)), ScalerKind::Zscore, &mut Warnings::new()).unwrap();
    let scaled = apply_scaler(&scaler, &data).unwrap();
    let blob_a = scaled.subset(&scaled.class_rows(0));
    let arch = VaeArchitecture::new(4);
    let cfg = VaeTrainConfig { epochs: 100, learning_rate: 5e-3, seed: 2, train_on: TrainRows::All, ..Default::default() };
    let vae = train_vae(&blob_a, &arch, &cfg, &mut Warnings::new()).unwrap();
    (vae, blob_a, scaled)
}

#[test]
fn vae_scores_far_outlier_below_training_rows() {
    let (vae, blob_a, _) = blob_vae();
    let train_scores = vae.reconstruction_scores(&blob_a, 64, 9).unwrap();
    let outlier = vae.reconstruction_probability(&[40.0, -40.0, 40.0, -40.0], 64, 9).unwrap();
    assert!(train_scores.iter().all(|&s| outlier < s));
}

#[test]
fn vae_reconstruction_separates_blobs() {
    let (vae, _, scaled) = blob_vae();
    let scores = vae.reconstruction_scores(&scaled, 64, 9).unwrap();
    // Blob B (label 1) should score lower, so rank by the negated score.
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    assert!(roc_auc(scaled.labels(), &neg).unwrap() > 0.95);
}
