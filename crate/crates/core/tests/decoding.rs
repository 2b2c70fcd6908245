mod common;

use common::{counting_model, random_model};
use proptest::prelude::*;
use specstream::{
    generate, reference_generate, DecodeSession, Error, GenerateParams, ModelConfig, Precision, Sampling, StreamInit,
    StreamMode,
};

#[test]
fn counting_model_counts() {
    let m = counting_model(2, Precision::F32);
    assert_eq!(reference_generate(&m, &[2, 3], 3, None).unwrap(), vec![4, 5, 6]);
    assert_eq!(reference_generate(&m, &[9], 3, None).unwrap(), vec![10, 0, 1]);
    assert_eq!(reference_generate(&m, &[2], 5, Some(5)).unwrap(), vec![3, 4, 5]);
}

#[test]
fn counting_model_speculative_matches() {
    let m = counting_model(2, Precision::F64);
    for (k, tau) in [(1, 0.0), (2, 0.0), (3, 0.05), (2, 0.5)] {
        let params = GenerateParams { max_new: 10, gamma: 2, k, tau, ..Default::default() };
        let (tokens, metrics) = generate(&m, &[2, 3], &params).unwrap();
        assert_eq!(tokens, vec![4, 5, 6, 7, 8, 9, 10, 0, 1, 2]);
        if k == 1 {
            // streams draft u+1 in place of u+2, so every draft is rejected
            assert_eq!(metrics.target_calls, 10);
            assert_eq!(metrics.beta_histogram.iter().skip(2).sum::<u64>(), 0);
        }
    }
}

#[test]
fn session_steps_add_up() {
    let m = random_model(ModelConfig { num_streams: 3, ..ModelConfig::micro() }, 4);
    let params = GenerateParams { max_new: 12, gamma: 3, k: 2, tau: 0.0, ..Default::default() };
    let mut s = DecodeSession::new(&m, params.clone()).unwrap();
    let first = s.process_prompt(&[1, 2, 3]).unwrap();
    assert_eq!(first.len(), specstream::tree_size(3, 2));
    assert_eq!(s.generated(), &[first.root()]);
    let mut total = 1;
    while !s.is_finished() {
        let before = s.pending_tree().unwrap().clone();
        let step = s.decode_step().unwrap();
        assert_eq!(step.verified_nodes, before.len());
        assert_eq!(step.advancement, step.accepted_tokens.len() + 1);
        assert!(step.advancement <= before.max_depth() + 1);
        assert!(step.emitted.len() <= step.advancement);
        total += step.emitted.len();
        assert_eq!(s.generated().len(), total.min(12));
        assert_eq!(step.next_tree.is_some(), !s.is_finished());
    }
    assert!(s.decode_step().is_err());
    let want = reference_generate(&m, &[1, 2, 3], 12, None).unwrap();
    assert_eq!(s.generated(), want.as_slice());
    let metrics = s.metrics();
    assert_eq!(metrics.generated_tokens, 12);
    assert_eq!(metrics.beta_histogram.iter().enumerate().map(|(b, &c)| b as u64 * c).sum::<u64>(), 12);
}

#[test]
fn gamma_above_streams_is_rejected() {
    let m = random_model(ModelConfig::micro(), 0);
    let params = GenerateParams { gamma: 3, ..Default::default() };
    assert!(matches!(generate(&m, &[1], &params), Err(Error::Parameter(_))));
}

#[test]
fn sampling_with_one_candidate_is_greedy() {
    let m = random_model(ModelConfig::micro(), 2);
    let params = GenerateParams {
        max_new: 8,
        gamma: 2,
        k: 2,
        sampling: Sampling::TopK { k: 1, temperature: 0.7, seed: 9 },
        ..Default::default()
    };
    let (tokens, _) = generate(&m, &[3, 1], &params).unwrap();
    assert_eq!(tokens, reference_generate(&m, &[3, 1], 8, None).unwrap());
}

fn config_strategy() -> impl Strategy<Value = (ModelConfig, Precision)> {
    (5usize..14, 2usize..4, 0usize..3, any::<bool>(), 0usize..3, any::<bool>()).prop_map(
        |(v, layers, ns, rot, rank, f64_mode)| {
            let mode = if rot { StreamMode::Rotation } else { StreamMode::Embedding };
            let cfg = ModelConfig {
                vocab_size: v,
                num_layers: layers,
                msa_layers: 1 + ns % (layers - 1).max(1),
                num_streams: 4,
                stream_mode: mode,
                rotation_step: if rot { 0.02 } else { 0.0 },
                stream_init: if rank == 0 { StreamInit::Identity } else { StreamInit::LowRank { rank } },
                ..ModelConfig::micro()
            };
            (cfg, if f64_mode { Precision::F64 } else { Precision::F32 })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn speculative_equals_greedy(
        (cfg, precision) in config_strategy(),
        seed in 0u64..1000,
        prompt in proptest::collection::vec(0u32..5, 1..6),
        gamma in 1usize..=4,
        k in 1usize..=3,
        tau in prop_oneof![Just(0.0), Just(0.05), Just(0.5)],
        max_new in 1usize..16,
    ) {
        let m = specstream::Model::init(cfg, seed, precision).unwrap();
        let params = GenerateParams { max_new, gamma, k, tau, ..Default::default() };
        let (got, metrics) = generate(&m, &prompt, &params).unwrap();
        prop_assert_eq!(&got, &reference_generate(&m, &prompt, max_new, None).unwrap());
        prop_assert_eq!(metrics.generated_tokens as usize, got.len());
        prop_assert!(metrics.cr_ratio() >= 1.0);
    }
}
