use causal_vqa::autograd::Graph;
use causal_vqa::causal::{kmeans, ConfounderVocabulary};
use causal_vqa::data::prepare;
use causal_vqa::features::{decode_feature_record, encode_feature_record, payload_len, FeatureRecord, HEADER_LEN};
use causal_vqa::heads::{count_loss, hinge_loss, open_ended_loss};
use causal_vqa::linguistic::{parse_hsrp, tokenize};
use causal_vqa::model::CausalVqaModel;
use causal_vqa::nn::Dropout;
use causal_vqa::params::ParamStore;
use causal_vqa::synthetic::{generate_synthetic, SyntheticTaskSpec};
use causal_vqa::train::TrainConfig;
use causal_vqa::visual::{project_rows, ProjectionParams};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

/// Smallest SSE over all labellings of the rows into `k` non-empty clusters.
fn brute_force_sse(points: &Array2<f64>, k: usize) -> f64 {
    let m = points.nrows();
    let total = k.pow(m as u32);
    let mut best = f64::INFINITY;
    for code in 0..total {
        let labels: Vec<usize> = (0..m).map(|i| code / k.pow(i as u32) % k).collect();
        let mut sse = 0.0;
        let mut empty = false;
        for j in 0..k {
            let members: Vec<usize> = (0..m).filter(|&i| labels[i] == j).collect();
            if members.is_empty() {
                empty = true;
                break;
            }
            for c in 0..points.ncols() {
                let mean: f64 = members.iter().map(|&i| points[[i, c]]).sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|&i| (points[[i, c]] - mean).powi(2)).sum::<f64>();
            }
        }
        if !empty {
            best = best.min(sse);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_is_a_lloyd_fixed_point(points in sized_matrix(8, 3), k in 1usize..=3, seed in 0u64..1000) {
        // Lloyd restarts may stop in a local minimum, so the optimum bounds
        // the result from below rather than pinning it
        prop_assume!(points.nrows() >= k);
        let fit = kmeans(&points, k, seed, 10).unwrap();
        let best = brute_force_sse(&points, k);
        let tol = 1e-9 * best.max(1.0);
        prop_assert!(fit.sse() >= best - tol, "{} below optimum {}", fit.sse(), best);

        let dist = |i: usize, j: usize| -> f64 {
            points.row(i).iter().zip(fit.centroids.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let own: f64 = (0..points.nrows()).map(|i| dist(i, fit.assignments[i])).sum();
        prop_assert!((own - fit.sse()).abs() <= tol);
        for i in 0..points.nrows() {
            let nearest = (0..k).map(|j| dist(i, j)).fold(f64::INFINITY, f64::min);
            prop_assert!(dist(i, fit.assignments[i]) <= nearest + tol);
        }
    }

    #[test]
    fn projection_is_affine(x in matrix(3, 5), y in matrix(3, 5), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ProjectionParams::new(&mut store, &mut rng, (5, 4), 6);
        let motion = Array2::zeros((1, 4));
        let run = |input: Array2<f64>| {
            let mut g = Graph::new(&store);
            let app = g.input(input);
            let mot = g.input(motion.clone());
            let out = project_rows(&mut g, app, mot, &params, 1, 3);
            g.value(out.appearance).clone()
        };
        let bias = run(Array2::zeros((3, 5)));
        let lhs = run(&x * a + &y * b);
        let rhs = run(x.clone()) * a + run(y.clone()) * b - &bias * (a + b - 1.0);
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((l - r).abs() <= 1e-6);
        }
    }

    #[test]
    fn losses_are_nonnegative(logits in prop::collection::vec(-20.0f64..20.0, 2..8), pick in 0usize..8,
                              pred in -50.0f64..50.0, target in 0.0f64..20.0) {
        let store = ParamStore::new();
        let label = pick % logits.len();
        let mut g = Graph::new(&store);
        let x = g.input(Array2::from_shape_vec((1, logits.len()), logits.clone()).unwrap());
        let ce = open_ended_loss(&mut g, x, label).unwrap();
        prop_assert!(g.scalar(ce) >= 0.0);
        let scores: Vec<_> = logits.iter().map(|&s| g.input(Array2::from_elem((1, 1), s))).collect();
        let hinge = hinge_loss(&mut g, &scores, label, 1.0).unwrap();
        prop_assert!(g.scalar(hinge) >= 0.0);
        let p = g.input(Array2::from_elem((1, 1), pred));
        let mse = count_loss(&mut g, p, target);
        prop_assert!(g.scalar(mse) >= 0.0);
    }

    #[test]
    fn parse_is_total_and_deterministic(text in "[a-zA-Z ,?.']{0,60}") {
        let tokens = tokenize(&text);
        let t = parse_hsrp(&text);
        prop_assert_eq!(&t, &parse_hsrp(&text));
        prop_assert!(t.subject.end <= tokens.len());
        prop_assert!(t.object.end <= tokens.len());
        prop_assert!(t.action.start <= t.action.end);
    }

    #[test]
    fn feature_records_roundtrip(n in 1usize..4, t in 1usize..4, da in 1usize..6, dm in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let record = FeatureRecord {
            record_id: format!("r{seed}"),
            appearance: Array3::from_shape_fn((n * t, da, 1), |_| rng.random::<f32>() - 0.5)
                .into_shape_with_order((n * t, da)).unwrap()
                .into_shape_with_order((n, t, da)).unwrap(),
            motion: Array2::from_shape_fn((n, dm), |_| rng.random::<f32>() - 0.5),
        };
        let bytes = encode_feature_record(&record).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + payload_len(n, t, da, dm));
        prop_assert_eq!(payload_len(n, t, da, dm), 4 * (n * t * da + n * dm));
        let back = decode_feature_record(&record.record_id, &bytes).unwrap();
        prop_assert_eq!(back, record);
    }

    #[test]
    fn priors_are_probability_masses(words in prop::collection::vec(prop::collection::vec("[a-c]{1,2}", 4), 1..20)) {
        let tuples: Vec<[String; 4]> = words.into_iter().map(|w| [w[0].clone(), w[1].clone(), w[2].clone(), w[3].clone()]).collect();
        let cv = ConfounderVocabulary::from_phrases(tuples.iter()).unwrap();
        for set in &cv.sets {
            let total: f64 = set.iter().map(|s| s.prior).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(set.iter().all(|s| s.prior > 0.0));
        }
        for w in cv.prior_weights() {
            prop_assert!((0.5 - 1e-12..=1.0).contains(&w));
        }
    }
}

#[test]
fn forward_without_dropout_is_bit_identical() {
    let spec = SyntheticTaskSpec {
        num_samples: 8,
        feature_dims: (6, 5),
        ..Default::default()
    };
    let (m, r) = generate_synthetic(&spec).unwrap();
    let data = prepare(&m, &r, None, "train").unwrap();
    let config = TrainConfig {
        dim: 8,
        heads: 2,
        layers: 1,
        codebook_k: 3,
        ..TrainConfig::toy()
    };
    let model = CausalVqaModel::new(&config, &data.shape, data.confounders.prior_weights()).unwrap();
    let run = || {
        let mut g = Graph::new(&model.store);
        let mut sampler = ChaCha8Rng::seed_from_u64(4);
        let out = model.forward(&mut g, &data.samples[0], &mut sampler, &mut Dropout::off()).unwrap();
        g.value(out[0]).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
