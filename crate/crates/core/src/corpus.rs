//! Synthetic topic and sentiment corpora over a closed word-level vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::WordBag;
use crate::error::{Error, Result};
use crate::lm::TokenId;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const END: &str = "<end>";
pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const END_ID: TokenId = 2;

/// Bijection between token strings and ids. Ids 0..3 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != BOS || tokens[2] != END {
            return Err(Error::Data(format!("vocab must start with {PAD}, {BOS}, {END}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids_of(&self, words: &[String]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w).ok_or_else(|| unknown(w))).collect()
    }

    /// Whitespace word-level tokenization.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| unknown(w)))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| {
                self.word(i).ok_or(Error::Index {
                    what: "token id",
                    index: i as usize,
                    bound: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tokens = f.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

fn unknown(word: &str) -> Error {
    Error::Domain(format!("unknown word {word:?}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopicSpec {
    pub name: String,
    /// Words forming the steering bag.
    pub words: Vec<String>,
    /// Further topical words that co-occur with the bag but are not in it.
    #[serde(default)]
    pub related: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub topics: Vec<TopicSpec>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub fillers: Vec<String>,
    /// Inclusive sentence length range in words.
    pub min_len: usize,
    pub max_len: usize,
    /// Inclusive range of the fraction of bag words in a topic sentence.
    pub bag_rate: [f64; 2],
    /// Chance that a non-bag slot of a topic sentence holds a related word.
    pub related_rate: f64,
    /// Inclusive range of the fraction of marker words in a sentiment
    /// sentence.
    pub marker_rate: [f64; 2],
    pub seed: u64,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let topic = |name: &str, bag: &str, related: &str| TopicSpec {
            name: name.into(),
            words: words(bag),
            related: words(related),
        };
        Self {
            topics: vec![
                topic(
                    "science",
                    "atom biology chemistry cell data discovery energy experiment formula gene \
                     hypothesis lab laboratory measurement molecule physics research researcher \
                     result sample scientist study theory test evidence observation microscope \
                     analysis particle quantum",
                    "inquiry findings specimen reagent assay calibration",
                ),
                topic(
                    "military",
                    "army battle soldier weapon tank troops war general officer command attack \
                     defense navy missile combat regiment infantry artillery fleet sergeant \
                     mission base enemy strategy rifle armor squad brigade fort siege",
                    "garrison battalion cavalry platoon trench bunker",
                ),
                topic(
                    "space",
                    "planet orbit rocket star galaxy astronaut moon comet telescope satellite \
                     launch cosmos nebula asteroid solar lunar mars jupiter spacecraft shuttle \
                     universe gravity crater meteor eclipse astronomy probe capsule stellar \
                     celestial",
                    "spaceflight orbiter quasar pulsar supernova starship",
                ),
                topic(
                    "religion",
                    "god church faith prayer temple priest holy spirit worship belief bible soul \
                     heaven sacred divine saint ritual monk gospel scripture mosque pilgrim altar \
                     blessing sermon devotion prophet chapel hymn creed",
                    "congregation parish clergy psalm sanctuary piety",
                ),
            ],
            positive: words(
                "good great excellent wonderful delightful brilliant superb charming lovely \
                 enjoyable moving beautiful fun fresh clever warm touching smart funny gripping",
            ),
            negative: words(
                "bad awful terrible boring dull poor weak tedious bland messy clumsy stale \
                 lifeless annoying painful flat silly pointless ugly worst",
            ),
            fillers: words(
                "the a an of to in and is was it that this with for on as at by from be are \
                 were has had have not but or so very more most some any each every all many \
                 much few then than there here when where while which who what how why will \
                 would can could may might should just",
            ),
            min_len: 8,
            max_len: 14,
            bag_rate: [0.3, 0.55],
            related_rate: 0.1,
            marker_rate: [0.3, 0.5],
            seed: 0,
        }
    }
}

/// One generated sentence and its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<TokenId>,
    pub label: usize,
    pub topic: Option<String>,
}

/// On-disk corpus line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub text: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

pub const SENTIMENT_CLASSES: [&str; 2] = ["negative", "positive"];

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.topics.len() < 2 {
            return Err(Error::Config("corpus needs at least 2 topics".into()));
        }
        if self.fillers.is_empty() || self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::Config(
                "fillers and both sentiment lexicons must be nonempty".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        for (name, [lo, hi]) in [("bag_rate", self.bag_rate), ("marker_rate", self.marker_rate)] {
            if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
                return Err(Error::Config(format!("invalid {name} range [{lo}, {hi}]")));
            }
        }
        if !(0.0..=1.0).contains(&self.related_rate) {
            return Err(Error::Config("related_rate must lie in [0, 1]".into()));
        }
        for (i, a) in self.topics.iter().enumerate() {
            if a.words.is_empty() {
                return Err(Error::Config(format!("topic {} has an empty bag", a.name)));
            }
            let sa: BTreeSet<&String> = a.words.iter().collect();
            for b in &self.topics[i + 1..] {
                let shared = b.words.iter().filter(|w| sa.contains(w)).count();
                if shared * 10 > a.words.len().min(b.words.len()) {
                    return Err(Error::Config(format!(
                        "bags {} and {} share {shared} words",
                        a.name, b.name
                    )));
                }
            }
        }
        let pos: BTreeSet<&String> = self.positive.iter().collect();
        if self.negative.iter().any(|w| pos.contains(w)) {
            return Err(Error::Config("sentiment lexicons overlap".into()));
        }
        Ok(())
    }

    /// Reserved tokens, then every word in first-seen order: fillers,
    /// lexicons, topic bags and their related words.
    pub fn build_vocab(&self) -> Result<Vocab> {
        self.validate()?;
        let mut seen = BTreeSet::new();
        let mut tokens: Vec<String> = [PAD, BOS, END].map(String::from).to_vec();
        seen.extend(tokens.clone());
        let all = self
            .fillers
            .iter()
            .chain(&self.positive)
            .chain(&self.negative)
            .chain(self.topics.iter().flat_map(|t| t.words.iter().chain(&t.related)));
        for w in all {
            if seen.insert(w.clone()) {
                tokens.push(w.clone());
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn topic_names(&self) -> Vec<String> {
        self.topics.iter().map(|t| t.name.clone()).collect()
    }

    pub fn bag(&self, vocab: &Vocab, topic: usize) -> Result<WordBag> {
        let t = self.topics.get(topic).ok_or(Error::Index {
            what: "topic",
            index: topic,
            bound: self.topics.len(),
        })?;
        WordBag::new(t.name.clone(), vocab.ids_of(&t.words)?, vocab.len())
    }

    pub fn bags(&self, vocab: &Vocab) -> Result<Vec<WordBag>> {
        (0..self.topics.len()).map(|i| self.bag(vocab, i)).collect()
    }
}

/// Derives an independent seed for item `index` of a named stream.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in stream.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rate_count(rng: &mut ChaCha8Rng, len: usize, [lo, hi]: [f64; 2]) -> usize {
    let lo_n = (lo * len as f64).ceil() as usize;
    let hi_n = ((hi * len as f64).floor() as usize).max(lo_n).min(len);
    rng.random_range(lo_n..=hi_n)
}

fn sentence(
    rng: &mut ChaCha8Rng,
    spec: &CorpusSpec,
    marked: &[String],
    related: &[String],
    rate: [f64; 2],
    related_rate: f64,
) -> Vec<String> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let n_marked = rate_count(rng, len, rate);
    let mut out: Vec<String> = (0..len)
        .map(|i| {
            let pool = if i < n_marked {
                marked
            } else if !related.is_empty() && rng.random::<f64>() < related_rate {
                related
            } else {
                &spec.fillers
            };
            pool.choose(rng).expect("nonempty pool").clone()
        })
        .collect();
    out.shuffle(rng);
    out
}

fn labeled(
    spec: &CorpusSpec,
    vocab: &Vocab,
    size: usize,
    stream: &str,
    classes: usize,
    make: impl Fn(&mut ChaCha8Rng, usize) -> (Vec<String>, Option<String>) + Sync,
) -> Result<Vec<LabeledSequence>> {
    if size == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    let mut labels: Vec<usize> = (0..size).map(|i| i % classes).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream, u64::MAX)));
    labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream, i as u64));
            let (words, topic) = make(&mut rng, label);
            Ok(LabeledSequence {
                tokens: vocab.ids_of(&words)?,
                label,
                topic,
            })
        })
        .collect()
}

/// Topic sentences with exactly balanced labels (up to one sentence).
pub fn generate_topic_corpus(spec: &CorpusSpec, vocab: &Vocab, size: usize) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    labeled(spec, vocab, size, "topic", spec.topics.len(), |rng, label| {
        let t = &spec.topics[label];
        let s = sentence(rng, spec, &t.words, &t.related, spec.bag_rate, spec.related_rate);
        (s, Some(t.name.clone()))
    })
}

/// Sentiment sentences; label 0 is negative, 1 positive.
pub fn generate_sentiment_corpus(spec: &CorpusSpec, vocab: &Vocab, size: usize) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    labeled(spec, vocab, size, "sentiment", 2, |rng, label| {
        let lexicon = if label == 1 { &spec.positive } else { &spec.negative };
        let s = sentence(rng, spec, lexicon, &[], spec.marker_rate, 0.0);
        (s, None)
    })
}

/// Concatenates sentences into `<bos> s1 <end> s2 <end> ...` documents of
/// at most `max_len` tokens.
pub fn pack_documents(sentences: &[LabeledSequence], max_len: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut docs = Vec::new();
    let mut doc = vec![BOS_ID];
    for i in order {
        let s = &sentences[i].tokens;
        if doc.len() + s.len() + 1 > max_len && doc.len() > 1 {
            docs.push(std::mem::replace(&mut doc, vec![BOS_ID]));
        }
        doc.extend(s.iter().take(max_len.saturating_sub(2)));
        doc.push(END_ID);
    }
    if doc.len() > 1 {
        docs.push(doc);
    }
    docs
}

/// Short generation prompts: `<bos>` followed by `len` filler words.
pub fn make_prompts(
    spec: &CorpusSpec,
    vocab: &Vocab,
    count: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    let fillers = vocab.ids_of(&spec.fillers)?;
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prompt", i as u64));
            let mut p = vec![BOS_ID];
            p.extend((0..len).map(|_| *fillers.choose(&mut rng).expect("fillers")));
            p
        })
        .collect())
}

/// Per-sentence token sets used for co-occurrence statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    sentences: Vec<BTreeSet<TokenId>>,
    counts: BTreeMap<TokenId, usize>,
}

impl CorpusStats {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [TokenId]>) -> Self {
        let sentences: Vec<BTreeSet<TokenId>> = seqs.into_iter().map(|s| s.iter().copied().collect()).collect();
        let mut counts = BTreeMap::new();
        for s in &sentences {
            for &t in s {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        Self { sentences, counts }
    }

    /// Number of sentences containing `token`.
    pub fn count(&self, token: TokenId) -> usize {
        self.counts.get(&token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.counts.keys().copied()
    }

    /// Fraction of sentences containing `token` that also contain some
    /// member of `set`.
    pub fn cooccurrence_rate(&self, token: TokenId, set: &BTreeSet<TokenId>) -> f64 {
        let (mut with, mut total) = (0usize, 0usize);
        for s in self.sentences.iter().filter(|s| s.contains(&token)) {
            total += 1;
            if s.iter().any(|t| *t != token && set.contains(t)) {
                with += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            with as f64 / total as f64
        }
    }
}

pub fn write_corpus(path: &Path, vocab: &Vocab, seqs: &[LabeledSequence]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in seqs {
        let line = CorpusLine {
            text: vocab.detokenize(&s.tokens)?,
            label: s.label,
            topic: s.topic.clone(),
        };
        serde_json::to_writer(&mut f, &line)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<LabeledSequence>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: CorpusLine = serde_json::from_str(&line)?;
        out.push(LabeledSequence {
            tokens: vocab.tokenize(&l.text)?,
            label: l.label,
            topic: l.topic,
        });
    }
    Ok(out)
}
