use proptest::prelude::*;
use svead_core::container::{self, ArtifactKind};
use svead_core::data::{stratified_kfold, train_test_split};
use svead_core::explain::{ice_curves, shapley_exact, Background, GridKind, Reduction};
use svead_core::metrics::{brier, classification_scores, confusion, pr_auc, roc_auc};
use svead_core::resample::{smote, SYNTHETIC_ID_BASE};
use svead_core::tsne::{conditional_affinities, symmetrize};
use svead_core::vae::{gaussian_kl, reparameterize, LatentStats};
use svead_core::{Classifier, Dataset, LearnerSpec, Matrix, ResampleMethod, ResampleSpec, VoteMode, VotingEnsemble, Warnings};

fn labels_and_scores() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (prop::collection::vec(0u8..=1, n), prop::collection::vec(0.0f64..1.0, n))
            .prop_filter("both classes", |(y, _)| y.contains(&0) && y.contains(&1))
    })
}

fn dataset(min_rows: usize) -> impl Strategy<Value = Dataset> {
    (min_rows..40usize, 1usize..4).prop_flat_map(|(n, d)| {
        (prop::collection::vec(-5.0f64..5.0, n * d), prop::collection::vec(0u8..=1, n)).prop_map(move |(v, mut y)| {
            // Guarantee at least three rows of each class.
            for (i, label) in y.iter_mut().take(6).enumerate() {
                *label = (i % 2) as u8;
            }
            Dataset::from_parts(Matrix::from_vec(n, d, v).unwrap(), y).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_stay_in_range((y, s) in labels_and_scores()) {
        let roc = roc_auc(&y, &s).unwrap();
        let ap = pr_auc(&y, &s).unwrap();
        prop_assert!((0.0..=1.0).contains(&roc));
        prop_assert!((0.0..=1.0).contains(&ap));
        prop_assert!((0.0..=1.0).contains(&brier(&y, &s).unwrap()));
        let pred: Vec<u8> = s.iter().map(|&v| u8::from(v >= 0.5)).collect();
        let (sc, _) = classification_scores(&confusion(&y, &pred).unwrap());
        prop_assert!((-1.0..=1.0).contains(&sc.mcc));
        prop_assert!((-1.0..=1.0).contains(&sc.kappa));
        prop_assert!((0.0..=1.0).contains(&sc.f1));
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms((y, s) in labels_and_scores()) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&y, &s).unwrap(), roc_auc(&y, &t).unwrap());
        prop_assert_eq!(pr_auc(&y, &s).unwrap(), pr_auc(&y, &t).unwrap());
    }

    #[test]
    fn reversed_scores_complement_roc((y, s) in labels_and_scores()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((roc_auc(&y, &s).unwrap() + roc_auc(&y, &neg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smote_keeps_originals_and_balances(data in dataset(8), k in 1usize..5, seed in any::<u64>()) {
        let spec = ResampleSpec { method: ResampleMethod::Smote, smote_k: k, target_ratio: 1.0, seed };
        let out = smote(&data, &spec, &mut Warnings::new()).unwrap();
        let minority = if data.n_positive() <= data.n_negative() { 1 } else { 0 };
        for i in 0..data.n_rows() {
            prop_assert_eq!(out.row_ids()[i], data.row_ids()[i]);
            prop_assert_eq!(out.features().row(i), data.features().row(i));
        }
        for i in data.n_rows()..out.n_rows() {
            prop_assert!(out.row_ids()[i] >= SYNTHETIC_ID_BASE);
            prop_assert_eq!(out.labels()[i], minority);
        }
        prop_assert_eq!(out.n_positive(), out.n_negative());
    }

    #[test]
    fn linear_shapley_is_weight_times_offset(
        w in prop::collection::vec(-3.0f64..3.0, 1..7),
        seed in any::<u64>(),
    ) {
        let d = w.len();
        let x: Vec<f64> = (0..d).map(|j| ((seed >> j) % 7) as f64 - 3.0).collect();
        let bg_rows: Vec<Vec<f64>> = (0..3).map(|r| (0..d).map(|j| (r * d + j) as f64 * 0.1).collect()).collect();
        let bg = Background::new(Matrix::from_rows(&bg_rows).unwrap(), Reduction::PerRowAverage).unwrap();
        let wf = w.clone();
        let f = move |m: &Matrix| Ok(m.rows_iter().map(|r| r.iter().zip(&wf).map(|(a, b)| a * b).sum()).collect());
        let a = shapley_exact(&f, &x, 0, &bg, 15).unwrap();
        for j in 0..d {
            let mean = bg_rows.iter().map(|r| r[j]).sum::<f64>() / 3.0;
            prop_assert!((a.phi[j] - w[j] * (x[j] - mean)).abs() < 1e-9);
        }
        prop_assert!(a.efficiency_residual.abs() < 1e-9);
    }

    #[test]
    fn pdp_is_mean_of_ice(data in dataset(6), grid in 2usize..8) {
        let f = |m: &Matrix| Ok(m.rows_iter().map(|r| r.iter().map(|v| v.sin()).sum::<f64>()).collect());
        let name = data.feature_names()[0].clone();
        let ice = ice_curves(&f, &data, &name, grid, GridKind::Linear).unwrap();
        for (c, p) in ice.pdp.iter().enumerate() {
            let mean = ice.curves.column(c).iter().sum::<f64>() / data.n_rows() as f64;
            prop_assert!((p - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn container_roundtrip_and_tamper(v in prop::collection::vec(-1e6f64..1e6, 1..50), flip in any::<usize>()) {
        let m = Matrix::from_vec(1, v.len(), v).unwrap();
        let bytes = container::encode(ArtifactKind::Classifier, &m).unwrap();
        let back: Matrix = container::decode(&bytes, ArtifactKind::Classifier).unwrap();
        prop_assert_eq!(&back, &m);
        let mut bad = bytes.clone();
        let at = 15 + flip % (bad.len() - 15 - 32);
        bad[at] ^= 0x01;
        prop_assert!(container::decode::<Matrix>(&bad, ArtifactKind::Classifier).is_err());
        prop_assert!(container::decode::<Matrix>(&bytes, ArtifactKind::Vae).is_err());
    }

    #[test]
    fn folds_partition_rows_and_stratify(data in dataset(12), k in 2usize..4, seed in any::<u64>()) {
        let plan = stratified_kfold(&data, k, seed).unwrap();
        let mut seen = vec![0usize; data.n_rows()];
        for f in 0..k {
            let test = plan.test_rows(f);
            let train = plan.train_rows(f);
            prop_assert_eq!(test.len() + train.len(), data.n_rows());
            for i in test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        for class in [0u8, 1] {
            let counts: Vec<usize> = (0..k)
                .map(|f| plan.test_rows(f).iter().filter(|&&i| data.labels()[i] == class).count())
                .collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn split_is_disjoint_and_complete(data in dataset(12), seed in any::<u64>()) {
        let (train, test) = train_test_split(&data, 0.3, true, seed).unwrap();
        let mut ids: Vec<u64> = train.row_ids().iter().chain(test.row_ids()).copied().collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, data.row_ids().to_vec());
    }

    #[test]
    fn affinities_are_normalized(data in dataset(8), perplexity in 2.0f64..5.0) {
        let cond = conditional_affinities(data.features(), perplexity).unwrap();
        for i in 0..data.n_rows() {
            prop_assert!((cond.p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(cond.p.get(i, i), 0.0);
        }
        let joint = symmetrize(&cond).unwrap();
        prop_assert!((joint.p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_reparameterization_is_affine(
        mu in prop::collection::vec(-3.0f64..3.0, 1..5),
        seed in any::<u64>(),
    ) {
        let logvar: Vec<f64> = mu.iter().enumerate().map(|(i, _)| ((seed >> i) % 5) as f64 - 2.0).collect();
        let noise: Vec<f64> = mu.iter().enumerate().map(|(i, _)| ((seed >> (i + 8)) % 9) as f64 / 4.0 - 1.0).collect();
        let stats = LatentStats { mu: mu.clone(), logvar: logvar.clone() };
        prop_assert!(gaussian_kl(&stats) >= -1e-12);
        let z = reparameterize(&stats, &noise).unwrap();
        for k in 0..mu.len() {
            prop_assert!((z[k] - (mu[k] + (0.5 * logvar[k]).exp() * noise[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_vote_of_identical_models_is_the_model(data in dataset(10), m in 2usize..6) {
        let base = Classifier::fit(&LearnerSpec::logreg(), &data, &mut Warnings::new()).unwrap();
        let single = base.predict_proba(data.features()).unwrap();
        let v = VotingEnsemble::new(vec![base; m], VoteMode::Soft).unwrap();
        let (_, probs) = v.vote(data.features(), 0.5).unwrap();
        for (a, b) in probs.unwrap().iter().zip(&single) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn classifier_survives_container_roundtrip() {
    let data = svead_core::synth::two_blobs(30, 3, 4.0, 3);
    let model = Classifier::fit(&LearnerSpec::forest(), &data, &mut Warnings::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.svead");
    container::save(&path, ArtifactKind::Classifier, &model).unwrap();
    let back: Classifier = container::load(&path, ArtifactKind::Classifier).unwrap();
    assert_eq!(model.predict_proba(data.features()).unwrap(), back.predict_proba(data.features()).unwrap());
}
