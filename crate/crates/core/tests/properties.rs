mod common;

use mfnet::data::{FeatureSet, PseudoLabelEnsemble, SplitSpec};
use mfnet::ems::{segment_all, LinearSegmenter};
use mfnet::neighbors::{kmeans, kmeans_from, knn, normalize_l2, KMeansInit, KMeansParams};
use mfnet::net::{loss_supervised, Activation, LabeledBatch, NetworkParams, NetworkSpec};
use mfnet::rng::Rng;
use mfnet::tasks::{accuracy, purity, recall_at_1, recall_at_1_loo};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(max_n: usize, max_d: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(-100.0f64..100.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

/// Small integer coordinates, so distance ties are common.
fn grid_matrix(max_n: usize, max_d: usize) -> impl Strategy<Value = Array2<f64>> {
    (2..=max_n, 1..=max_d).prop_flat_map(|(n, d)| {
        prop::collection::vec(0i32..4, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v.into_iter().map(f64::from).collect()).unwrap())
    })
}

fn labeled_set() -> impl Strategy<Value = FeatureSet> {
    matrix(20, 5).prop_flat_map(|x| {
        let n = x.nrows();
        (Just(x), 1usize..5).prop_flat_map(move |(x, c)| {
            prop::collection::vec(prop::option::of(0..c), n)
                .prop_map(move |labels| FeatureSet::new(x.clone(), labels, c).unwrap())
        })
    })
}

fn sq(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_features_round_trip(fs in labeled_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let quantized = fs.with_features(fs.features().mapv(|v| f64::from(v as f32))).unwrap();
        quantized.save(&path).unwrap();
        prop_assert_eq!(FeatureSet::load(&path).unwrap(), quantized);
    }

    #[test]
    fn csv_features_round_trip(fs in labeled_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        // the CSV form infers the class count from the labels present
        let c = fs.labels().iter().flatten().max().map_or(0, |m| m + 1);
        let fs = FeatureSet::new(fs.features().to_owned(), fs.labels().to_vec(), c).unwrap();
        fs.save(&path).unwrap();
        prop_assert_eq!(FeatureSet::load(&path).unwrap(), fs);
    }

    #[test]
    fn pseudo_labels_round_trip(n in 1usize..40, t in 1usize..8, z in 1usize..50, seed: u64) {
        let mut rng = Rng::new(seed);
        let e = PseudoLabelEnsemble::new(Array2::from_shape_simple_fn((n, t), || rng.sample_distinct(z, 1)[0]), z).unwrap();
        prop_assert_eq!(PseudoLabelEnsemble::decode(&e.encode(), std::path::Path::new("x")).unwrap(), e);
    }

    #[test]
    fn split_round_trips(n in 1usize..60, seed: u64) {
        let mut rng = Rng::new(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let a = rng.sample_distinct(n + 1, 1)[0];
        let b = a + rng.sample_distinct(n - a + 1, 1)[0];
        let s = SplitSpec { labeled: idx[..a].to_vec(), unlabeled: idx[a..b].to_vec(), test: idx[b..].to_vec() };
        s.validate(n).unwrap();
        prop_assert_eq!(SplitSpec::parse(&s.to_text(), std::path::Path::new("x")).unwrap(), s);
    }

    #[test]
    fn knn_matches_sorting(x in grid_matrix(30, 3), q in any::<prop::sample::Index>(), kk in any::<prop::sample::Index>()) {
        let n = x.nrows();
        let query = q.index(n);
        let k = 1 + kk.index(n - 1);
        let fs = FeatureSet::unlabeled(x.clone()).unwrap();
        let mut order: Vec<usize> = (0..n).filter(|&j| j != query).collect();
        order.sort_by(|&a, &b| sq(x.row(query), x.row(a)).partial_cmp(&sq(x.row(query), x.row(b))).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(knn(&fs, query, k).unwrap(), order[..k].to_vec());
    }

    #[test]
    fn normalization_is_idempotent(x in matrix(20, 6)) {
        let once = normalize_l2(&FeatureSet::unlabeled(x).unwrap());
        let twice = normalize_l2(&once);
        for (a, b) in once.features().iter().zip(twice.features()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for row in once.features().outer_iter() {
            let norm = row.dot(&row).sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_never_increases_inertia(x in matrix(40, 4), z in 1usize..6, seed: u64, plus in any::<bool>()) {
        prop_assume!(z <= x.nrows());
        let fs = FeatureSet::unlabeled(x).unwrap();
        let params = KMeansParams { init: if plus { KMeansInit::PlusPlus } else { KMeansInit::Random }, ..KMeansParams::default() };
        let a = kmeans(&fs, z, &mut Rng::new(seed), &params).unwrap();
        for w in a.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let b = kmeans(&fs, z, &mut Rng::new(seed), &params).unwrap();
        prop_assert_eq!(&a, &b);
        let pooled = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pooled.install(|| kmeans(&fs, z, &mut Rng::new(seed), &params).unwrap());
        prop_assert_eq!(&a, &c);
        // restarting from the final centroids changes nothing
        let again = kmeans_from(&fs, a.centroids.clone(), &params).unwrap();
        prop_assert_eq!(again.assignments, a.assignments);
    }

    #[test]
    fn metrics_lie_in_unit_interval(n in 1usize..50, seed: u64) {
        let mut rng = Rng::new(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.sample_distinct(4, 1)[0]).collect();
        let other: Vec<usize> = (0..n).map(|_| rng.sample_distinct(6, 1)[0]).collect();
        let p = purity(&other, &truth).unwrap();
        let a = accuracy(&other, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&a));
        prop_assert_eq!(purity(&truth, &truth).unwrap(), 1.0);
        prop_assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
        let x = Array2::from_shape_simple_fn((n, 2), || rng.normal());
        let r = recall_at_1(x.view(), &truth, x.view(), &truth).unwrap();
        prop_assert_eq!(r, 1.0);
        if n > 1 {
            let loo = recall_at_1_loo(x.view(), &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&loo));
        }
    }

    #[test]
    fn softmax_ignores_a_shift_of_all_scores(seed: u64, shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let spec = NetworkSpec { input_dim: 3, hidden_dims: vec![4], activation: Activation::Tanh, n_classes: 3, n_trials: 1, n_pseudo_classes: 2 };
        let p = NetworkParams::init(&spec, &mut rng).unwrap();
        let x = common::random_matrix(5, 3, &mut rng);
        let y = vec![0, 1, 2, 1, 0];
        let base = loss_supervised(&p, LabeledBatch { x: x.view(), y: &y }, 0.0).unwrap();
        let mut shifted = p.clone();
        shifted.supervised_head.as_mut().unwrap().biases += shift;
        let moved = loss_supervised(&shifted, LabeledBatch { x: x.view(), y: &y }, 0.0).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn segment_all_is_the_score_argmax(x in grid_matrix(20, 3), z in 1usize..5, seed: u64) {
        let mut rng = Rng::new(seed);
        let d = x.ncols();
        let seg = LinearSegmenter {
            weights: Array2::from_shape_simple_fn((z, d), || (rng.uniform() * 3.0).floor() - 1.0),
            biases: Array1::zeros(z),
        };
        let got = segment_all(&FeatureSet::unlabeled(x.clone()).unwrap(), &seg).unwrap();
        for (i, row) in x.outer_iter().enumerate() {
            let scores: Vec<f64> = (0..z).map(|c| seg.weights.row(c).dot(&row)).collect();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = scores.iter().position(|&s| s == best).unwrap();
            prop_assert_eq!(got[i], first);
        }
    }
}
