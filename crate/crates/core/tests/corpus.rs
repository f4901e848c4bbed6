mod common;

use std::collections::BTreeSet;

use ppc_core::corpus::{
    derive_seed, generate_sentiment_corpus, generate_topic_corpus, make_prompts, CorpusSpec, BOS_ID,
};
use proptest::prelude::*;

#[test]
fn vocab_size_matches_distinct_words() {
    let spec = CorpusSpec::default();
    let vocab = spec.build_vocab().unwrap();
    let distinct: BTreeSet<&str> = vocab.tokens().iter().map(String::as_str).collect();
    assert_eq!(distinct.len(), vocab.len());
    for bag in spec.bags(&vocab).unwrap() {
        assert!(bag.ids().iter().all(|&id| (id as usize) < vocab.len()));
    }
}

#[test]
fn generated_corpora_are_reproducible() {
    let spec = CorpusSpec::default();
    let vocab = spec.build_vocab().unwrap();
    let a = generate_topic_corpus(&spec, &vocab, 50).unwrap();
    assert_eq!(a, generate_topic_corpus(&spec, &vocab, 50).unwrap());
    let other = CorpusSpec {
        seed: spec.seed + 1,
        ..spec.clone()
    };
    assert_ne!(a, generate_topic_corpus(&other, &vocab, 50).unwrap());
    let s = generate_sentiment_corpus(&spec, &vocab, 40).unwrap();
    assert_eq!(s.len(), 40);
}

#[test]
fn prompts_start_with_bos() {
    let spec = CorpusSpec::default();
    let vocab = spec.build_vocab().unwrap();
    let prompts = make_prompts(&spec, &vocab, 30, 2, 7).unwrap();
    assert_eq!(prompts.len(), 30);
    assert!(prompts.iter().all(|p| p.len() == 3 && p[0] == BOS_ID));
}

#[test]
fn seed_streams_are_independent() {
    let names = ["corpus", "pretrain", "disc", "judge", "rollout", "decode"];
    let seeds: BTreeSet<u64> = names.iter().map(|n| derive_seed(0, n, 0)).collect();
    assert_eq!(seeds.len(), names.len());
    assert_ne!(derive_seed(0, "rollout", 0), derive_seed(0, "rollout", 1));
    assert_eq!(derive_seed(5, "disc", 2), derive_seed(5, "disc", 2));
}

proptest! {
    #[test]
    fn tokenize_round_trips(picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..20)) {
        let vocab = CorpusSpec::default().build_vocab().unwrap();
        let words: Vec<&str> = picks.iter().map(|i| vocab.tokens()[i.index(vocab.len())].as_str()).collect();
        let text = words.join(" ");
        let ids = vocab.tokenize(&text).unwrap();
        prop_assert_eq!(vocab.detokenize(&ids).unwrap(), text);
    }
}
