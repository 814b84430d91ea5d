use proptest::prelude::*;

use nnlm::arch::{parse_and_validate, parse_description, serialize_description};
use nnlm::classes::ClassMap;
use nnlm::exchange::{run_exchange, ExchangeOptions, InitScheme};
use nnlm::graph::{GradientMap, ParamStore};
use nnlm::network::{Network, Segment, SequenceBatch};
use nnlm::optim::{clip_gradients, global_norm, optimizer_step, Algorithm, OptimizerConfig, OptimizerState};
use nnlm::persist::{model_bytes, parse_model};
use nnlm::rescore::word_errors;
use nnlm::tensor::{log_softmax, softmax};
use nnlm::vocab::{Vocabulary, NUM_RESERVED};
use nnlm::{Precision, Tensor};

fn hidden_layer() -> impl Strategy<Value = String> {
    prop_oneof![
        (1usize..40).prop_map(|n| format!("lstm size={n}")),
        (1usize..40).prop_map(|n| format!("gru size={n}")),
        (1usize..40).prop_map(|n| format!("tanh size={n}")),
        (0u32..100).prop_map(|r| format!("dropout dropout_rate={}", r as f64 / 100.0)),
    ]
}

fn description() -> impl Strategy<Value = String> {
    (prop::bool::ANY, 1usize..64, prop::collection::vec(hidden_layer(), 0..6)).prop_map(|(class, proj, hidden)| {
        let mut text = format!(
            "input type={} name=in\nlayer type=projection name=l0 input=in size={proj}\n",
            if class { "class" } else { "word" }
        );
        for (i, h) in hidden.iter().enumerate() {
            let (kind, attr) = h.split_once(' ').unwrap();
            text.push_str(&format!("layer type={kind} name=l{} input=l{i} {attr}\n", i + 1));
        }
        text.push_str(&format!("layer type=softmax name=out input=l{}\n", hidden.len()));
        text
    })
}

fn grads() -> impl Strategy<Value = GradientMap> {
    prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..8), 1..4).prop_map(|ts| {
        ts.into_iter()
            .enumerate()
            .map(|(i, data)| (format!("p{i}"), Tensor::vector(data)))
            .collect()
    })
}

fn corpus(types: usize) -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(
        prop::collection::vec((0..types).prop_map(|w| format!("w{w}")), 1..8),
        2..15,
    )
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(text in description()) {
        let desc = parse_and_validate(&text).unwrap();
        let again = parse_description(&serialize_description(&desc)).unwrap();
        prop_assert_eq!(&again, &desc);
        prop_assert_eq!(serialize_description(&again), text);
    }

    #[test]
    fn clipping_is_idempotent_and_keeps_direction(g in grads(), max_norm in 0.1f64..50.0) {
        let once = clip_gradients(&g, max_norm).unwrap();
        let twice = clip_gradients(&once, max_norm).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(global_norm(&once) <= max_norm * (1.0 + 1e-9));
        let scale = global_norm(&once) / global_norm(&g).max(f64::MIN_POSITIVE);
        for (name, t) in &g {
            for (a, b) in t.data().iter().zip(once[name].data()) {
                prop_assert!((a * scale - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-500.0f64..500.0, 1..30)) {
        let p = softmax(&row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (lp, q) in log_softmax(&row).iter().zip(&p) {
            prop_assert!(*lp <= 0.0);
            prop_assert!((lp.exp() - q).abs() < 1e-12);
        }
    }

    #[test]
    fn exchange_trace_never_decreases(c in corpus(9), k in 1usize..4, seed in 0u64..1000) {
        let vocab = Vocabulary::build(&c, None).unwrap();
        prop_assume!(vocab.num_regular() >= k);
        let opts = ExchangeOptions { num_classes: k, max_passes: 20, scheme: InitScheme::Random, seed };
        let result = run_exchange(&vocab, &c, &opts).unwrap();
        prop_assert!(result.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        prop_assert_eq!(result.classes.num_classes(), NUM_RESERVED + k);
        for class in 0..result.classes.num_classes() {
            let total: f64 = result.classes.members(class).iter().map(|&w| result.classes.membership(w)).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn windows_partition_a_segment(words in prop::collection::vec(3usize..20, 0..40), max_len in 1usize..10) {
        let seg = Segment::framed(&words);
        let pieces = seg.windows(max_len);
        prop_assert!(pieces.iter().all(|p| !p.is_empty() && p.len() <= max_len));
        let inputs: Vec<usize> = pieces.iter().flat_map(|p| p.inputs.clone()).collect();
        let targets: Vec<usize> = pieces.iter().flat_map(|p| p.targets.clone()).collect();
        prop_assert_eq!(inputs, seg.inputs);
        prop_assert_eq!(targets, seg.targets);
    }

    #[test]
    fn batch_counts_every_token(lens in prop::collection::vec(0usize..9, 1..10)) {
        let segments: Vec<Segment> = lens.iter().map(|&n| Segment::framed(&vec![3; n])).collect();
        let batch = SequenceBatch::new(&segments).unwrap();
        prop_assert_eq!(batch.rows(), segments.len());
        prop_assert_eq!(batch.steps(), lens.iter().max().unwrap() + 1);
        prop_assert_eq!(batch.tokens(), lens.iter().map(|n| n + 1).sum::<usize>());
    }

    #[test]
    fn word_errors_is_a_metric(a in prop::collection::vec("[abc]", 0..8), b in prop::collection::vec("[abc]", 0..8)) {
        prop_assert_eq!(word_errors(&a, &a), 0);
        prop_assert_eq!(word_errors(&a, &b), word_errors(&b, &a));
        prop_assert!(word_errors(&a, &b) <= a.len().max(b.len()));
        prop_assert!(word_errors(&a, &b) >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn class_map_from_counts_normalizes(counts in prop::collection::vec(0u64..20, 4..20), k in 1usize..4) {
        let class_of: Vec<usize> = (0..counts.len()).map(|w| w % k).collect();
        let map = ClassMap::from_counts(class_of, &counts).unwrap();
        for c in 0..k {
            let total: f64 = map.members(c).iter().map(|&w| map.membership(w)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

fn small_network(precision: Precision) -> Network {
    let corpus: Vec<Vec<String>> = vec!["a b c".split(' ').map(String::from).collect()];
    let vocab = Vocabulary::build(&corpus, None).unwrap();
    let arch = "input type=word name=w\nlayer type=projection name=p input=w size=3\nlayer type=gru name=h input=p size=4\nlayer type=softmax name=o input=h\n";
    Network::from_text(arch, vocab, None, 1, precision).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flipped_header_bytes_never_panic(pos in 0usize..200, byte in any::<u8>()) {
        let mut bytes = model_bytes(&small_network(Precision::Double), None).unwrap();
        let pos = pos % bytes.len();
        bytes[pos] = byte;
        let _ = parse_model(&bytes);
    }
}

#[test]
fn every_truncation_is_rejected() {
    for precision in [Precision::Single, Precision::Double] {
        let bytes = model_bytes(&small_network(precision), None).unwrap();
        assert!(parse_model(&bytes).is_ok());
        for len in 0..bytes.len() {
            assert!(
                parse_model(&bytes[..len]).is_err(),
                "{precision:?}: cut at {len} accepted"
            );
        }
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(parse_model(&longer).is_err());
    }
}

#[test]
fn every_optimizer_minimizes_a_quadratic_bowl() {
    // L = ½‖θ‖², gradient θ, from θ = (1, -2, 0.5)
    for algorithm in Algorithm::ALL {
        let config = OptimizerConfig {
            clip_norm: None,
            ..OptimizerConfig::new(algorithm)
        };
        let mut params = ParamStore::new();
        params.insert("t", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut state = OptimizerState::new(algorithm);
        let mut steps = 0;
        while params.get("t").unwrap().squared_norm().sqrt() >= 1e-3 {
            let grads: GradientMap = [("t".to_string(), params.get("t").unwrap().clone())].into();
            optimizer_step(&mut params, &grads, &config, &mut state).unwrap();
            steps += 1;
            assert!(steps <= 10_000, "{algorithm} did not converge");
        }
        assert_eq!(state.step(), steps);
    }
}

#[test]
fn single_precision_parameters_are_f32_values() {
    let net = small_network(Precision::Single);
    for (_, t) in net.params().iter() {
        assert!(t.data().iter().all(|&x| x == x as f32 as f64));
    }
}
