use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use aurelgraph::anfl::{build_topology, AuFeatureMaps, FaceRepresentation};
use aurelgraph::autodiff::Graph;
use aurelgraph::codec::{decode_params, encode_params};
use aurelgraph::config::TrainConfig;
use aurelgraph::data::{decode_corpus, encode_corpus, generate_synthetic, SyntheticSpec};
use aurelgraph::losses::{compute_weights, edge_label, edge_labels};
use aurelgraph::mefl::{edge_index, edge_pairs, mefl_forward, MeflParams};
use aurelgraph::nn::uniform_init;
use aurelgraph::tensor::{ParamStore, Tensor};

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-20.0f64..20.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn softmax(t: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(t.clone());
    let s = g.softmax_rows(v).unwrap();
    g.value(s).clone()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(t in matrix(6, 8), shift in -50.0f64..50.0) {
        let s = softmax(&t);
        for r in 0..s.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(s.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let shifted = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + shift).collect()).unwrap();
        let s2 = softmax(&shifted);
        for (a, b) in s.data().iter().zip(s2.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn topology_rows_have_k_neighbours(
        (v, k) in (2usize..=9, 1usize..=6).prop_flat_map(|(n, c)| {
            (prop::collection::vec(-5.0f64..5.0, n * c).prop_map(move |d| Tensor::new(vec![n, c], d).unwrap()), 1..n)
        }),
        scale in 0.1f64..10.0,
    ) {
        let a = build_topology(&v, k).unwrap();
        let n = a.n();
        for i in 0..n {
            prop_assert_eq!(a.row_sum(i), k);
            prop_assert!(!a.get(i, i));
        }
        let scaled = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * scale).collect()).unwrap();
        prop_assert_eq!(build_topology(&scaled, k).unwrap(), a);
    }

    #[test]
    fn weights_sum_to_n_and_scale_inversely(rates in prop::collection::vec(0.001f64..=1.0, 1..16)) {
        let w = compute_weights(&rates).unwrap();
        let n = rates.len() as f64;
        prop_assert!((w.iter().sum::<f64>() - n).abs() <= 1e-12 * n);
        let c0 = w[0] * rates[0];
        for (wi, ri) in w.iter().zip(&rates) {
            prop_assert!((wi * ri - c0).abs() <= 1e-12 * c0.max(1.0));
        }
    }

    #[test]
    fn edge_labels_enumerate_joint_patterns(labels in prop::collection::vec(0u8..2, 2..8)) {
        let n = labels.len();
        let cls = edge_labels(&labels);
        prop_assert_eq!(cls.len(), n * (n - 1));
        for (k, (i, j)) in edge_pairs(n).into_iter().enumerate() {
            prop_assert_eq!(edge_index(n, i, j), k);
            prop_assert_eq!(cls[k], edge_label(labels[i], labels[j]));
            prop_assert_eq!(cls[k], 2 * labels[i] as usize + labels[j] as usize);
        }
    }

    #[test]
    fn mefl_is_equivariant_to_au_swaps(seed in any::<u64>(), n in 2usize..=5, pick in any::<(usize, usize)>()) {
        let (d, c) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MeflParams::new(&mut store, &mut rng, c).unwrap();
        let x = uniform_init(&mut rng, &[d, c], 1);
        let maps: Vec<Tensor> = (0..n).map(|_| uniform_init(&mut rng, &[d, c], 1)).collect();
        let i = pick.0 % n;
        let j = (i + 1 + pick.1 % (n - 1)) % n;
        let edges = |maps: &[Tensor]| {
            let mut g = Graph::with_params(&store);
            let xv = g.constant(x.clone());
            let face = FaceRepresentation::new(&g, xv).unwrap();
            let u = maps.iter().map(|m| g.constant(m.clone())).collect();
            let e = mefl_forward(&mut g, &AuFeatureMaps { u }, &face, &p).unwrap();
            g.value(e.e).clone()
        };
        let before = edges(&maps);
        let mut swapped = maps.clone();
        swapped.swap(i, j);
        let after = edges(&swapped);
        prop_assert_eq!(before.rows(), n * (n - 1));
        let perm = |a: usize| if a == i { j } else if a == j { i } else { a };
        for (a, b) in edge_pairs(n) {
            prop_assert_eq!(before.row(edge_index(n, a, b)), after.row(edge_index(n, perm(a), perm(b))));
        }
    }

    #[test]
    fn param_store_round_trips(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 0..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (k, s) in shapes.iter().enumerate() {
            store.add(format!("p{k}.weight"), uniform_init(&mut rng, s, 1)).unwrap();
        }
        let bytes = encode_params(&store);
        prop_assert_eq!(decode_params(&bytes).unwrap(), store);
    }

    #[test]
    fn corrupted_param_bytes_are_rejected(seed in any::<u64>(), at in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add("w", uniform_init(&mut rng, &[2, 3], 1)).unwrap();
        let mut bytes = encode_params(&store);
        let k = at.index(bytes.len());
        bytes[k] ^= flip;
        prop_assert!(decode_params(&bytes).is_err());
    }

    #[test]
    fn config_text_round_trips(
        lambda in 0.0f64..1.0,
        lr in 1e-8f64..1.0,
        epochs in 0usize..50,
        seed in any::<u64>(),
        threshold in 0.01f64..0.99,
    ) {
        let cfg = TrainConfig {
            lambda,
            stage1_lr: lr,
            stage2_epochs: epochs,
            seed,
            threshold,
            ..TrainConfig::default()
        };
        prop_assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn corpus_round_trips(n in 8usize..40, seed in any::<u64>()) {
        let corpus = generate_synthetic(n, &SyntheticSpec::coupled(4), seed).unwrap();
        let back = decode_corpus(&encode_corpus(&corpus)).unwrap();
        prop_assert_eq!(back, corpus);
    }
}
