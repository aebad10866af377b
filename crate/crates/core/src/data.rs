//! Corpus ingestion, word-level vocabulary, MLM masking and a small synthetic
//! grammar for desk-scale pretraining.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Lower-cased words and single punctuation characters.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '\'' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Token ↔ id map. Ids 0–4 are the reserved special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Words ranked by frequency (ties lexicographic), truncated so the
    /// whole vocabulary including reserved tokens has at most `max_size` entries.
    pub fn build(corpus: &str, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus.lines() {
            for w in split_words(line) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIAL_TOKENS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(NUM_SPECIAL);
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(w, _)| w))
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Tokens for `ids`, skipping special tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&id| id >= NUM_SPECIAL)
            .filter_map(|&id| self.token(id))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Format(format!(
                "{}: vocabulary must start with the reserved tokens",
                path.as_ref().display()
            )));
        }
        Vocab::from_tokens(tokens)
    }
}

/// Encodes each corpus line and cuts it into chunks of at most `max_words`.
pub fn corpus_sequences(vocab: &Vocab, corpus: &str, max_words: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for line in corpus.lines() {
        let ids = vocab.encode(line);
        for chunk in ids.chunks(max_words.max(1)) {
            out.push(chunk.to_vec());
        }
    }
    out
}

/// A sequence with its special tokens and segment ids, before padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
}

impl PackedSequence {
    /// `[CLS] a [SEP]`, all segment 0.
    pub fn single(ids: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(ids.len() + 2);
        tokens.push(CLS);
        tokens.extend_from_slice(ids);
        tokens.push(SEP);
        let segments = vec![0; tokens.len()];
        PackedSequence { tokens, segments }
    }

    /// `[CLS] a [SEP] b [SEP]`, segment 0 through the first `[SEP]`, then 1.
    pub fn pair(a: &[usize], b: &[usize]) -> Self {
        let mut p = PackedSequence::single(a);
        p.tokens.extend_from_slice(b);
        p.tokens.push(SEP);
        p.segments.resize(p.tokens.len(), 1);
        p
    }
}

/// One masked, padded sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attn_mask: Vec<u8>,
    pub masked_positions: Vec<usize>,
    /// Original token at each masked position.
    pub labels: Vec<usize>,
    pub valid_len: usize,
}

/// A rectangular batch of masked sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub seq_len: usize,
    pub sequences: Vec<MaskedSequence>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.sequences.iter().map(|s| s.masked_positions.len()).sum()
    }
}

/// Masks word sequences for MLM: wraps each in `[CLS] … [SEP]`, selects word
/// positions independently with probability `mask_rate` (at least one per
/// sequence), and replaces selections with `[MASK]` 80% / a random word 10% /
/// unchanged 10%.
pub fn make_mlm_batch(
    vocab_size: usize,
    sequences: &[Vec<usize>],
    max_seq_len: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedBatch> {
    let packed: Vec<PackedSequence> = sequences.iter().map(|s| PackedSequence::single(s)).collect();
    for (i, s) in sequences.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::EmptySequence(i));
        }
    }
    mask_packed(vocab_size, &packed, max_seq_len, mask_rate, seed)
}

pub fn mask_packed(
    vocab_size: usize,
    packed: &[PackedSequence],
    max_seq_len: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedBatch> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::Config(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::Config("vocabulary has no ordinary words".into()));
    }
    for (i, p) in packed.iter().enumerate() {
        if p.tokens.len() > max_seq_len {
            return Err(Error::OutOfRange(format!(
                "sequence {i} has {} tokens with specials, max_seq_len is {max_seq_len}",
                p.tokens.len()
            )));
        }
        if !p.tokens.iter().any(|&t| !is_special(t)) {
            return Err(Error::EmptySequence(i));
        }
    }
    let seq_len = packed.iter().map(|p| p.tokens.len()).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = packed
        .iter()
        .map(|p| mask_one(p, seq_len, vocab_size, mask_rate, &mut rng))
        .collect();
    Ok(MaskedBatch { seq_len, sequences })
}

fn is_special(t: usize) -> bool {
    t < NUM_SPECIAL && t != UNK
}

fn mask_one(
    p: &PackedSequence,
    seq_len: usize,
    vocab_size: usize,
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> MaskedSequence {
    let n = p.tokens.len();
    let maskable: Vec<usize> = (0..n).filter(|&i| !is_special(p.tokens[i])).collect();
    let selected = loop {
        let sel: Vec<usize> = maskable
            .iter()
            .copied()
            .filter(|_| rng.gen::<f64>() < mask_rate)
            .collect();
        if !sel.is_empty() {
            break sel;
        }
    };
    let mut token_ids = p.tokens.clone();
    let labels = selected.iter().map(|&i| p.tokens[i]).collect();
    for &i in &selected {
        let r: f64 = rng.gen();
        if r < 0.8 {
            token_ids[i] = MASK;
        } else if r < 0.9 {
            token_ids[i] = rng.gen_range(NUM_SPECIAL..vocab_size);
        }
    }
    token_ids.resize(seq_len, PAD);
    let mut segment_ids = p.segments.clone();
    segment_ids.resize(seq_len, 0);
    let mut attn_mask = vec![1u8; n];
    attn_mask.resize(seq_len, 0);
    MaskedSequence {
        token_ids,
        segment_ids,
        attn_mask,
        masked_positions: selected,
        labels,
        valid_len: n,
    }
}

/// Endless shuffled stream of MLM batches over a fixed set of sequences.
pub struct BatchStream {
    sequences: Vec<Vec<usize>>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    vocab_size: usize,
    max_seq_len: usize,
    mask_rate: f64,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(
        sequences: Vec<Vec<usize>>,
        batch_size: usize,
        vocab_size: usize,
        max_seq_len: usize,
        mask_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let sequences: Vec<Vec<usize>> = sequences.into_iter().filter(|s| !s.is_empty()).collect();
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let order = (0..sequences.len()).collect();
        let mut s = BatchStream {
            sequences,
            order,
            cursor: 0,
            batch_size,
            vocab_size,
            max_seq_len,
            mask_rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Result<MaskedBatch> {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.sequences[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        let seed = self.rng.gen();
        make_mlm_batch(self.vocab_size, &picked, self.max_seq_len, self.mask_rate, seed)
    }
}

// ---- synthetic corpus -----------------------------------------------------

struct NounPair(&'static str, &'static str);
struct VerbPair(&'static str, &'static str);

const AGENTS: [NounPair; 20] = [
    NounPair("dog", "dogs"),
    NounPair("cat", "cats"),
    NounPair("bird", "birds"),
    NounPair("horse", "horses"),
    NounPair("fox", "foxes"),
    NounPair("child", "children"),
    NounPair("farmer", "farmers"),
    NounPair("teacher", "teachers"),
    NounPair("doctor", "doctors"),
    NounPair("baker", "bakers"),
    NounPair("sailor", "sailors"),
    NounPair("king", "kings"),
    NounPair("queen", "queens"),
    NounPair("student", "students"),
    NounPair("wolf", "wolves"),
    NounPair("mouse", "mice"),
    NounPair("rabbit", "rabbits"),
    NounPair("painter", "painters"),
    NounPair("singer", "singers"),
    NounPair("soldier", "soldiers"),
];

const OBJECTS: [NounPair; 16] = [
    NounPair("apple", "apples"),
    NounPair("book", "books"),
    NounPair("ball", "balls"),
    NounPair("letter", "letters"),
    NounPair("stone", "stones"),
    NounPair("song", "songs"),
    NounPair("picture", "pictures"),
    NounPair("cake", "cakes"),
    NounPair("boat", "boats"),
    NounPair("key", "keys"),
    NounPair("flower", "flowers"),
    NounPair("coin", "coins"),
    NounPair("hat", "hats"),
    NounPair("map", "maps"),
    NounPair("lamp", "lamps"),
    NounPair("box", "boxes"),
];

const PLACES: [&str; 14] = [
    "garden", "river", "forest", "house", "market", "school", "castle", "village", "field",
    "kitchen", "harbor", "bridge", "hill", "library",
];

const INTRANSITIVE: [VerbPair; 12] = [
    VerbPair("runs", "run"),
    VerbPair("sleeps", "sleep"),
    VerbPair("sings", "sing"),
    VerbPair("waits", "wait"),
    VerbPair("laughs", "laugh"),
    VerbPair("jumps", "jump"),
    VerbPair("walks", "walk"),
    VerbPair("works", "work"),
    VerbPair("dances", "dance"),
    VerbPair("rests", "rest"),
    VerbPair("swims", "swim"),
    VerbPair("falls", "fall"),
];

const TRANSITIVE: [VerbPair; 12] = [
    VerbPair("sees", "see"),
    VerbPair("likes", "like"),
    VerbPair("finds", "find"),
    VerbPair("carries", "carry"),
    VerbPair("holds", "hold"),
    VerbPair("wants", "want"),
    VerbPair("takes", "take"),
    VerbPair("keeps", "keep"),
    VerbPair("drops", "drop"),
    VerbPair("paints", "paint"),
    VerbPair("buys", "buy"),
    VerbPair("loses", "lose"),
];

const ADJECTIVES: [&str; 18] = [
    "big", "small", "old", "young", "red", "green", "happy", "quiet", "brave", "tired",
    "clever", "strange", "bright", "dark", "heavy", "gentle", "wild", "lazy",
];

const ADVERBS: [&str; 10] = [
    "quickly", "slowly", "often", "rarely", "loudly", "softly", "today", "again", "alone",
    "together",
];

const PREPOSITIONS: [&str; 8] = ["in", "near", "behind", "under", "across", "beside", "inside", "past"];

const DET_SINGULAR: [&str; 5] = ["the", "a", "this", "that", "every"];
const DET_PLURAL: [&str; 6] = ["the", "these", "those", "many", "some", "two"];

/// Every word the synthetic grammar can emit.
pub fn grammar_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    for n in AGENTS.iter().chain(OBJECTS.iter()) {
        words.push(n.0);
        words.push(n.1);
    }
    words.extend(PLACES);
    for v in INTRANSITIVE.iter().chain(TRANSITIVE.iter()) {
        words.push(v.0);
        words.push(v.1);
    }
    words.extend(ADJECTIVES);
    words.extend(ADVERBS);
    words.extend(PREPOSITIONS);
    words.extend(DET_SINGULAR);
    words.extend(DET_PLURAL);
    words.extend(["who", "and", "because", "while", "it", "they", ".", ","]);
    words.sort_unstable();
    words.dedup();
    words
}

struct Grammar<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl Grammar<'_> {
    fn pick<'a>(&mut self, items: &[&'a str]) -> &'a str {
        items[self.rng.gen_range(0..items.len())]
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen::<f64>() < p
    }

    /// Determiner, optional adjective, noun; agreement in number.
    fn noun_phrase(&mut self, out: &mut Vec<&'static str>, nouns: &[NounPair], plural: bool) {
        let det = if plural {
            self.pick(&DET_PLURAL)
        } else {
            self.pick(&DET_SINGULAR)
        };
        out.push(det);
        if self.chance(0.4) {
            out.push(self.pick(&ADJECTIVES));
        }
        let n = &nouns[self.rng.gen_range(0..nouns.len())];
        out.push(if plural { n.1 } else { n.0 });
    }

    fn place_phrase(&mut self, out: &mut Vec<&'static str>) {
        out.push(self.pick(&PREPOSITIONS));
        out.push("the");
        out.push(self.pick(&PLACES));
    }

    fn verb(&mut self, verbs: &[VerbPair], plural: bool) -> &'static str {
        let v = &verbs[self.rng.gen_range(0..verbs.len())];
        if plural {
            v.1
        } else {
            v.0
        }
    }

    fn clause(&mut self, out: &mut Vec<&'static str>) {
        let plural = self.chance(0.5);
        self.noun_phrase(out, &AGENTS, plural);
        if self.chance(0.25) {
            // The relative clause separates the subject from its verb.
            out.push("who");
            out.push(self.verb(&TRANSITIVE, plural));
            let obj_plural = self.chance(0.5);
            self.noun_phrase(out, &OBJECTS, obj_plural);
        }
        if self.chance(0.5) {
            out.push(self.verb(&TRANSITIVE, plural));
            let obj_plural = self.chance(0.5);
            self.noun_phrase(out, &OBJECTS, obj_plural);
        } else {
            out.push(self.verb(&INTRANSITIVE, plural));
            if self.chance(0.5) {
                out.push(self.pick(&ADVERBS));
            }
        }
        if self.chance(0.4) {
            self.place_phrase(out);
        }
    }

    fn sentence(&mut self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.clause(&mut out);
        if self.chance(0.3) {
            out.push(self.pick(&["and", "because", "while"]));
            if self.chance(0.3) {
                let plural = self.chance(0.5);
                out.push(if plural { "they" } else { "it" });
                out.push(self.verb(&INTRANSITIVE, plural));
            } else {
                self.clause(&mut out);
            }
        }
        out.push(".");
        out
    }
}

/// `documents` lines of one or two sentences from a small template grammar
/// with number agreement. Deterministic per seed.
pub fn synth_corpus(seed: u64, documents: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for _ in 0..documents {
        let mut g = Grammar { rng: &mut rng };
        let sentences = if g.chance(0.35) { 2 } else { 1 };
        let mut words = Vec::new();
        for _ in 0..sentences {
            words.extend(g.sentence());
        }
        text.push_str(&words.join(" "));
        text.push('\n');
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_order_and_reserved_ids() {
        let v = Vocab::build("a b a", 7).unwrap();
        assert_eq!(v.len(), 7);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(Vocab::build("a b a", 7).unwrap(), v);
    }

    #[test]
    fn vocab_truncates_and_breaks_ties_lexicographically() {
        let v = Vocab::build("c b a c b a d", 7).unwrap();
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.token(6), Some("b"));
        assert_eq!(v.id("c"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(Vocab::build("  \n ", 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(split_words("The dog, runs."), vec!["the", "dog", ",", "runs", "."]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("vocab-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v.txt");
        let v = Vocab::build("x y z y", 20).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        fs::write(&path, "a\nb\n").unwrap();
        assert!(Vocab::load(&path).is_err());
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn batches_are_deterministic_and_well_formed() {
        let seqs = vec![vec![5, 6, 7], vec![8, 9], vec![5; 6]];
        let a = make_mlm_batch(12, &seqs, 10, 0.3, 42).unwrap();
        let b = make_mlm_batch(12, &seqs, 10, 0.3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seq_len, 8);
        for s in &a.sequences {
            assert_eq!(s.token_ids.len(), 8);
            assert!(!s.masked_positions.is_empty());
            assert_eq!(s.masked_positions.len(), s.labels.len());
            assert_eq!(s.token_ids[0], CLS);
            assert_eq!(s.token_ids[s.valid_len - 1], SEP);
            for (i, &m) in s.attn_mask.iter().enumerate() {
                assert_eq!(m == 0, s.token_ids[i] == PAD && i >= s.valid_len);
            }
        }
    }

    #[test]
    fn batch_errors() {
        assert!(make_mlm_batch(12, &[vec![5; 9]], 10, 0.15, 1).is_err());
        assert!(matches!(
            make_mlm_batch(12, &[vec![5], vec![]], 10, 0.15, 1),
            Err(Error::EmptySequence(1))
        ));
        assert!(make_mlm_batch(12, &[vec![5]], 10, 0.0, 1).is_err());
        assert!(make_mlm_batch(12, &[vec![5]], 10, 1.0, 1).is_err());
    }

    #[test]
    fn pair_packing_sets_segments() {
        let p = PackedSequence::pair(&[5, 6], &[7]);
        assert_eq!(p.tokens, vec![CLS, 5, 6, SEP, 7, SEP]);
        assert_eq!(p.segments, vec![0, 0, 0, 0, 1, 1]);
        let b = mask_packed(10, &[p], 8, 0.5, 3).unwrap();
        for &i in &b.sequences[0].masked_positions {
            assert!(![0, 3, 5].contains(&i));
        }
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_closed() {
        let a = synth_corpus(1, 200);
        assert_eq!(a, synth_corpus(1, 200));
        assert_ne!(a, synth_corpus(2, 200));
        let words = grammar_words();
        assert!(words.len() >= 180 && words.len() <= 220, "{}", words.len());
        for line in a.lines() {
            for w in split_words(line) {
                assert!(words.contains(&w.as_str()), "{w}");
            }
        }
    }

    #[test]
    fn stream_cycles_through_the_corpus() {
        let seqs: Vec<Vec<usize>> = (5..15).map(|i| vec![i, i]).collect();
        let mut s = BatchStream::new(seqs, 4, 20, 8, 0.15, 0).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..3 {
            let b = s.next_batch().unwrap();
            assert_eq!(b.len(), 4);
            for q in &b.sequences {
                for &l in &q.labels {
                    seen.insert(l);
                }
            }
        }
        assert!(seen.len() > 5);
    }
}
