use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fla_slt::corpus::{
    collate, generate_synthetic_corpus, glyph_name, load_corpus, save_corpus, trim_vocabulary, SyntheticSpec, Vocabulary,
};

const SPECIALS: usize = 4;

fn spec(counts: (usize, usize, usize)) -> SyntheticSpec {
    SyntheticSpec {
        image_size: (16, 16),
        counts,
        ..SyntheticSpec::default()
    }
}

#[test]
fn every_train_transcript_survives_tokenization() {
    let corpus = generate_synthetic_corpus(&spec((400, 1, 1))).unwrap();
    let vocab = corpus.full_vocabulary();
    for s in &corpus.train {
        let ids = vocab.tokenize(&s.transcript).unwrap().ids;
        assert!(ids.iter().all(|&i| i as usize >= SPECIALS || i == 1 || i == 2), "{}", s.sample_id);
        assert_eq!(vocab.detokenize(&ids), s.transcript);
    }
}

#[test]
fn trimmed_vocabulary_ignores_base_order() {
    let corpus = generate_synthetic_corpus(&spec((300, 20, 20))).unwrap();
    let mut words: Vec<String> = (0..30).map(glyph_name).collect();
    words.extend((0..970).map(|i| format!("filler{i}")));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sets = Vec::new();
    for _ in 0..2 {
        words.shuffle(&mut rng);
        let base = Vocabulary::from_tokens(words.iter());
        assert_eq!(base.len(), 1000 + SPECIALS);
        let trimmed = corpus.trimmed_vocabulary(&base);
        sets.push(trimmed.tokens().iter().cloned().collect::<BTreeSet<_>>());
        assert_eq!(trimmed.tokens()[SPECIALS..].len(), 30);
    }
    assert_eq!(sets[0], sets[1]);
}

#[test]
fn saved_pixels_come_back_within_one_level() {
    let corpus = generate_synthetic_corpus(&spec((12, 4, 4))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&corpus, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.len(), corpus.len());
    let mut worst = 0.0f32;
    for ((_, a), (_, b)) in corpus.iter().zip(back.iter()) {
        assert_eq!(a.sample_id, b.sample_id);
        assert_eq!(a.transcript, b.transcript);
        let (fa, fb) = (a.frames_f32(), b.frames_f32());
        assert_eq!(fa.shape(), fb.shape());
        worst = fa.iter().zip(fb.iter()).fold(worst, |m, (x, y)| m.max((x - y).abs()));
    }
    assert!(worst <= 1.0 / 255.0, "{worst}");
}

#[test]
fn seeded_batches_unpad_to_their_samples() {
    let corpus = generate_synthetic_corpus(&spec((64, 1, 1))).unwrap();
    let vocab = corpus.full_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let picked: Vec<_> = corpus.train.choose_multiple(&mut rng, 16).collect();
        let batch = collate(&picked, &vocab).unwrap();
        assert_eq!(batch.len(), 16);
        for (b, s) in picked.iter().enumerate() {
            assert_eq!(batch.sample_ids[b], s.sample_id);
            assert_eq!(batch.video(b), s.frames_f32());
            assert_eq!(batch.target(b), vocab.tokenize(&s.transcript).unwrap().ids);
            for t in 0..batch.frame_mask.ncols() {
                if !batch.frame_mask[[b, t]] {
                    assert!(batch.videos.slice(ndarray::s![b, t, .., .., ..]).iter().all(|&x| x == 0.0));
                }
            }
            for l in 0..batch.target_mask.ncols() {
                if !batch.target_mask[[b, l]] {
                    assert_eq!(batch.targets[[b, l]], 0);
                }
            }
        }
    }
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,4}", 1..20)
}

proptest! {
    #[test]
    fn in_vocabulary_text_roundtrips(vocab_words in words(), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..12), gaps in prop::collection::vec(1usize..3, 12)) {
        let vocab = Vocabulary::from_tokens(vocab_words.iter());
        let chosen: Vec<&str> = picks.iter().map(|i| vocab_words[i.index(vocab_words.len())].as_str()).collect();
        let messy: String = chosen.iter().zip(&gaps).map(|(w, g)| format!("{w}{}", " ".repeat(*g))).collect();
        let ids = vocab.tokenize(&messy).unwrap().ids;
        prop_assert_eq!(ids.len(), chosen.len() + 2);
        prop_assert_eq!(vocab.detokenize(&ids), chosen.join(" "));
    }

    #[test]
    fn trimming_keeps_exactly_the_used_tokens(base_words in words(), lines in prop::collection::vec(prop::collection::vec(any::<prop::sample::Index>(), 0..6), 0..8)) {
        let base = Vocabulary::from_tokens(base_words.iter());
        let texts: Vec<String> = lines
            .iter()
            .map(|l| l.iter().map(|i| base_words[i.index(base_words.len())].as_str()).collect::<Vec<_>>().join(" "))
            .collect();
        let trimmed = trim_vocabulary(&base, texts.iter().map(String::as_str));
        let used: BTreeSet<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
        let kept: Vec<&str> = trimmed.tokens()[SPECIALS..].iter().map(String::as_str).collect();
        prop_assert_eq!(&trimmed.tokens()[..SPECIALS], &base.tokens()[..SPECIALS]);
        prop_assert_eq!(kept.len(), used.len());
        prop_assert_eq!(kept.iter().copied().collect::<BTreeSet<_>>(), used);
    }
}
