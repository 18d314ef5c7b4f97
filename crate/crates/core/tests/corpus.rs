use proptest::prelude::*;

use pslm::corpus::{generate_corpus, read_corpus, write_corpus, CorpusConfig, ToyTts};
use pslm::VocabSpec;

#[test]
fn jsonl_round_trip() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let mut buf = Vec::new();
    write_corpus(&corpus, &mut buf).unwrap();
    assert_eq!(read_corpus(&buf[..]).unwrap(), corpus);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    std::fs::write(&path, &buf).unwrap();
    let reread = read_corpus(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(reread, corpus);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = CorpusConfig::default();
    assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
    let other = generate_corpus(&CorpusConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(other.train, generate_corpus(&CorpusConfig::default()).unwrap().train);
}

#[test]
fn pairs_are_consistent_with_the_tts() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let tts = corpus.config.tts().unwrap();
    for p in corpus.pairs() {
        assert_eq!(tts.synthesize(&p.tq).unwrap(), p.sq);
        assert_eq!(tts.synthesize(&p.ta).unwrap(), p.sa);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tts_inverts_exactly(text in prop::collection::vec(0u32..60, 0..20), seed in 0u64..4) {
        let tts = ToyTts::new(VocabSpec::toy(), seed, 11.0).unwrap();
        let inv = tts.invert(&tts.synthesize(&text).unwrap());
        prop_assert!(inv.is_exact());
        prop_assert_eq!(inv.text(), text);
    }
}
