mod common;

use graphcap::checkpoint::{checkpoint_bytes, checkpoint_from_bytes};
use graphcap::dataset::{parse_split, serialize_split, tokenize, DatasetRecord, Vocabulary, UNK};
use graphcap::metrics::{bleu_corpus, meteor_corpus, meteor_lite, EvalRecord, MeteorParams};
use graphcap::model::{GraphInput, Sample};
use graphcap::scene_graph::reify;
use graphcap::train::make_batches;
use graphcap::{toy, CaptionModel, ModelConfig, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "dog", "dogs", "on", "the", "table", "runs", "running"]), 0..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn record() -> impl Strategy<Value = EvalRecord> {
    (words(), prop::collection::vec(words(), 1..4)).prop_map(|(h, r)| EvalRecord::new(0, h, r))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn graph_properties_hold(seed in any::<u64>()) {
        let g = common::random_graph(&mut ChaCha8Rng::seed_from_u64(seed));
        let bad = common::graph_property_violations(&g, &toy::labels());
        prop_assert!(bad.is_empty(), "{:?}", bad);
    }

    #[test]
    fn jsonl_round_trip(seed in any::<u64>()) {
        let g = common::random_graph(&mut ChaCha8Rng::seed_from_u64(seed));
        let rec = DatasetRecord::from_graph(seed, &g, vec!["a dog .".into()]);
        let text = serialize_split(std::slice::from_ref(&rec));
        let back = parse_split(&text, &toy::labels()).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].gold_graph().unwrap(), rec.gold_graph().unwrap());
    }

    #[test]
    fn tokenizer_is_idempotent(s in "[A-Za-z' .,!?]{0,40}") {
        let once = tokenize(&s);
        let again = tokenize(&once.join(" "));
        prop_assert_eq!(once, again);
    }

    #[test]
    fn vocabulary_round_trip(caps in prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,5}", 1..6)) {
        let v = Vocabulary::build(&caps).unwrap();
        for c in &caps {
            let toks = tokenize(c);
            let ids = v.encode(&toks).unwrap();
            prop_assert!(!ids.contains(&UNK));
            prop_assert_eq!(v.decode(&ids), toks);
        }
    }

    #[test]
    fn bleu_bounds_and_invariances(recs in prop::collection::vec(record(), 1..5)) {
        let b = bleu_corpus(&recs, 4).unwrap();
        prop_assert!(b.iter().all(|x| (0.0..=1.0).contains(x)));
        let mut dup = recs.clone();
        for r in &mut dup {
            let first = r.references[0].clone();
            r.references.push(first);
        }
        prop_assert_eq!(bleu_corpus(&dup, 4).unwrap(), b.clone());
        let mut rev = recs.clone();
        rev.reverse();
        prop_assert_eq!(bleu_corpus(&rev, 4).unwrap(), b);
    }

    #[test]
    fn meteor_bounds_and_invariances(recs in prop::collection::vec(record(), 1..5)) {
        let p = MeteorParams::default();
        for r in &recs {
            let s = meteor_lite(r, &p);
            prop_assert!((0.0..1.0).contains(&s));
            let mut dup = r.clone();
            dup.references.extend(r.references.clone());
            prop_assert_eq!(meteor_lite(&dup, &p), s);
        }
        let m = meteor_corpus(&recs, &p).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        prop_assert_eq!(meteor_corpus(&rev, &p).unwrap(), m);
    }

    #[test]
    fn identical_hypothesis_scores_perfect_bleu(h in prop::collection::vec("[a-z]{1,4}", 4..10)) {
        let r = EvalRecord::new(0, h.clone(), vec![h]);
        prop_assert_eq!(bleu_corpus(&[r], 4).unwrap(), vec![1.0; 4]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distributions_are_normalized(seed in any::<u64>()) {
        let bad = common::normalization_violations(seed);
        prop_assert!(bad.is_empty(), "{:?}", bad);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), v in 0usize..4, d in 2usize..6, h in 2usize..6) {
        let m = CaptionModel::new(ModelConfig::small(Variant::ALL[v], 9, 7, d, h), seed).unwrap();
        let bytes = checkpoint_bytes(&m, None);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.model, &m);
        prop_assert_eq!(checkpoint_bytes(&back.model, None), bytes);
    }

    #[test]
    fn batches_partition_the_samples(seed in any::<u64>(), n in 1usize..40, bs in 1usize..9) {
        let labels = toy::labels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..n)
            .map(|_| loop {
                let g = common::random_graph(&mut rng);
                if !g.nodes.is_empty() {
                    break Sample {
                        graph: GraphInput::new(reify(&g).unwrap(), &labels).unwrap(),
                        tokens: vec![4],
                    };
                }
            })
            .collect();
        let batches = make_batches(&samples, bs, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(!b.is_empty());
            let size = samples[b[0]].graph.graph.len();
            prop_assert!(b.iter().all(|&i| samples[i].graph.graph.len() == size));
        }
        prop_assert_eq!(make_batches(&samples, bs, &mut ChaCha8Rng::seed_from_u64(seed)), batches);
    }
}
