mod common;

use std::collections::BTreeMap;

use modnet::checkpoint::{frozen_hash, Checkpoint};
use modnet::composite::{compose_stitch, compose_two_towers, Topology};
use modnet::data::{small_data_schedule, LabeledDataset};
use modnet::experiment::{CurveRow, LearningCurve};
use modnet::graph::grad_check;
use modnet::module::{build_module, set_frozen, ModuleSpec};
use modnet::optim::Hyper;
use modnet::tensor::softmax_xent;
use modnet::train::{TrainConfig, Trainer};
use modnet::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e4f64..1e4, 1..12), pick in 0usize..12) {
        let label = pick % logits.len();
        let (loss, probs) = softmax_xent(&Tensor::vector(logits), label).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!(probs.data().iter().all(|&p| p >= 0.0));
        prop_assert!((probs.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn frozen_parameters_never_move(i in 0u64..60, steps in 1u64..6) {
        let (net, _) = common::random_net(3 * i + 1 + i % 2);
        let before = frozen_hash(&net);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(i);
        let images: Vec<Tensor> = (0..6).map(|_| common::random_input(&mut r, net.input_shape())).collect();
        let labels = (0..6).map(|j| j % net.num_classes).collect();
        let ds = LabeledDataset::new(images, labels, net.num_classes).unwrap();
        let mut t = Trainer::new(&net, TrainConfig {
            batch_size: 3,
            activity_l2: Some(1e-6),
            hyper: Hyper::with_lr(0.05),
            ..TrainConfig::default()
        }).unwrap();
        t.train_steps(&ds, steps).unwrap();
        let after = t.net.to_composite();
        prop_assert_eq!(frozen_hash(&after), before);
        prop_assert_eq!(&after.base, &net.base);
    }

    #[test]
    fn checkpoint_bytes_round_trip(i in 0u64..100, step in 0u64..1000) {
        let (net, _) = common::random_net(i);
        let t = Trainer::new(&net, TrainConfig::default()).unwrap();
        let mut ck = t.checkpoint(BTreeMap::from([("i".to_string(), i.to_string())]));
        ck.step = step;
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.net, &net);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn base_features_match_standalone(i in 0u64..100) {
        let (net, _) = common::random_net(i);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(i);
        let x = common::random_input(&mut r, net.input_shape());
        let mut g = Graph::new();
        let input = g.input(net.input_shape(), false);
        let att = net.base.attach(&mut g, input).unwrap();
        g.set_input(input, x.clone()).unwrap();
        g.forward().unwrap();
        let mut ng = net.build_graph(None).unwrap();
        ng.forward(&x, 0).unwrap();
        prop_assert_eq!(g.value(att.features.unwrap()), ng.graph.value(ng.base_features()));
    }

    #[test]
    fn schedules_are_balanced_and_complete(k in 2usize..6, per_class in 1usize..7, bpc in 1usize..4, repeats in 1usize..6, seed in 0u64..1000) {
        prop_assume!(per_class % bpc == 0);
        let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
        let images = vec![Tensor::zeros(&[1, 2, 2]); labels.len()];
        let ds = LabeledDataset::new(images, labels, k).unwrap();
        let s = small_data_schedule(&ds, bpc, repeats, seed).unwrap();
        prop_assert_eq!(s.presentations(), per_class / bpc * repeats);
        let mut seen = vec![0; ds.len()];
        let mut last: Option<&[usize]> = None;
        let mut run = 0;
        for (_, batch) in s.iter() {
            let mut counts = vec![0; k];
            for &i in batch {
                counts[ds.labels[i]] += 1;
                seen[i] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c == bpc));
            run = if last == Some(batch) { run + 1 } else { 1 };
            prop_assert!(run <= repeats);
            last = Some(batch);
        }
        prop_assert!(seen.iter().all(|&c| c == repeats));
        prop_assert_eq!(s.stream_hash(), small_data_schedule(&ds, bpc, repeats, seed).unwrap().stream_hash());
    }

    #[test]
    fn curve_csv_round_trips(rows in prop::collection::vec((0u64..3, 0usize..4, 1usize..50, 0u32..1_000_001), 1..30)) {
        let mut c = LearningCurve::default();
        for (n, (seed, t, pc, acc)) in rows.into_iter().enumerate() {
            c.rows.push(CurveRow {
                seed,
                topology: Topology::ALL[t],
                per_class: pc,
                examples_seen: n as u64 + 1,
                batch_index: n,
                test_accuracy: acc as f64 / 1e6,
            });
        }
        c.sort();
        prop_assert_eq!(LearningCurve::from_csv(&c.to_csv()).unwrap(), c);
    }
}

#[test]
fn random_composites_pass_grad_check() {
    for i in 0..200 {
        let (net, desc) = common::random_net(i);
        let mut ng = common::prepared_graph(&net, i, Some(0.01), 1e-4);
        let err = grad_check(&mut ng.graph, ng.loss, 1e-5).unwrap();
        assert!(err < 1e-4, "{desc}: {err:e}");
    }
}

#[test]
fn stitch_with_top_pair_equals_two_towers() {
    let spec = ModuleSpec::parse("base", "(3x3x3)-maxpool2-(4x3x3)-dense6").unwrap();
    let mspec = spec.scaled("module", 1, 3);
    let base = set_frozen(build_module(&spec, &[1, 8, 8], 2).unwrap(), true);
    let top = spec.layers.len() - 1;
    let s = compose_stitch(base.clone(), &mspec, &[(top, top)], 3, 4).unwrap();
    let t = compose_two_towers(base, build_module(&mspec, &[1, 8, 8], 4).unwrap(), 3, 4).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (mut gs, mut gt) = (s.build_graph(None).unwrap(), t.build_graph(None).unwrap());
    for _ in 0..5 {
        let x = common::random_input(&mut r, &[1, 8, 8]);
        assert_eq!(gs.logits(&x).unwrap().clone(), gt.logits(&x).unwrap().clone());
    }
}
