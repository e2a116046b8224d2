//! Dialogue corpora: vocabulary, JSONL loading, windowing and a synthetic
//! generator with known many-to-many structure.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream_rng, streams};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MIN_FREQ: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::arg("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::arg(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Reserved ids followed by `words` in the given order (duplicates skipped).
    pub fn from_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref().to_string();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::try_from(tokens).expect("reserved prefix is always present")
    }

    /// Words with count ≥ `min_freq`, most frequent first, ties broken lexically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(words.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Inverse of [`Vocab::encode`] on in-vocabulary text; stops at the first `<eos>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercase, whitespace-split tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    pub text: String,
}

impl Utterance {
    pub fn new(text: &str, vocab: &Vocab) -> Result<Self> {
        let tokens = vocab.encode(text);
        if tokens.is_empty() {
            return Err(Error::arg("empty utterance"));
        }
        Ok(Self {
            tokens,
            text: text.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub utterances: Vec<Utterance>,
    /// Extra acceptable responses, for multi-reference evaluation.
    pub alt_responses: Vec<Utterance>,
}

impl Dialogue {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.len() < 2 {
            return Err(Error::arg(format!(
                "a dialogue needs at least 2 utterances, got {}",
                utterances.len()
            )));
        }
        Ok(Self {
            utterances,
            alt_responses: Vec::new(),
        })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], vocab: &Vocab) -> Result<Self> {
        let utts = texts
            .iter()
            .map(|t| Utterance::new(t.as_ref(), vocab))
            .collect::<Result<Vec<_>>>()?;
        Self::new(utts)
    }

    /// Horizon `T`: index of the response utterance.
    pub fn horizon(&self) -> usize {
        self.utterances.len() - 1
    }

    pub fn context(&self) -> &[Utterance] {
        &self.utterances[..self.horizon()]
    }

    pub fn response(&self) -> &Utterance {
        &self.utterances[self.horizon()]
    }

    pub fn texts(&self) -> Vec<String> {
        self.utterances.iter().map(|u| u.text.clone()).collect()
    }
}

#[derive(Debug, Deserialize)]
struct Record {
    turns: Vec<String>,
    #[serde(default)]
    references: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct LoadedCorpus {
    pub dialogues: Vec<Dialogue>,
    pub vocab: Vocab,
    /// Lines that could not be parsed.
    pub errors: Vec<LineError>,
    /// Well-formed records rejected for an empty turn or fewer than 2 turns.
    pub rejected: usize,
}

/// Reads a JSONL corpus, one `{"turns": [...]}` object per line.
///
/// Malformed lines are reported in [`LoadedCorpus::errors`] rather than
/// failing the whole load. When `vocab` is `None` one is built from the file
/// with [`DEFAULT_MIN_FREQ`].
pub fn load_corpus(path: &Path, vocab: Option<&Vocab>) -> Result<LoadedCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut rejected = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(rec) => {
                let valid = rec.turns.len() >= 2
                    && rec.turns.iter().chain(&rec.references).all(|t| !tokenize(t).is_empty());
                if valid {
                    records.push(rec);
                } else {
                    rejected += 1;
                }
            }
            Err(e) => errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} record(s) with empty turns or fewer than 2 turns", path.display());
    }
    for e in &errors {
        log::warn!("{}:{}: {}", path.display(), e.line, e.message);
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocab::build(
            records.iter().flat_map(|r| r.turns.iter().map(String::as_str)),
            DEFAULT_MIN_FREQ,
        ),
    };
    let dialogues = records
        .iter()
        .map(|r| {
            let mut d = Dialogue::from_texts(&r.turns, &vocab)?;
            d.alt_responses = r
                .references
                .iter()
                .map(|t| Utterance::new(t, &vocab))
                .collect::<Result<_>>()?;
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedCorpus {
        dialogues,
        vocab,
        errors,
        rejected,
    })
}

pub fn write_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let mut out = Vec::new();
    for d in dialogues {
        serde_json::to_writer(&mut out, &serde_json::json!({ "turns": d.texts() }))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Contiguous windows of `w` utterances with stride 1. Dialogues no longer
/// than `w` are returned unchanged.
pub fn window_dialogue(d: &Dialogue, w: usize) -> Result<Vec<Dialogue>> {
    if w < 2 {
        return Err(Error::arg(format!("window size must be at least 2, got {w}")));
    }
    let n = d.utterances.len();
    if n <= w {
        return Ok(vec![d.clone()]);
    }
    Ok((0..=n - w)
        .map(|k| Dialogue {
            utterances: d.utterances[k..k + w].to_vec(),
            alt_responses: Vec::new(),
        })
        .collect())
}

pub fn window_corpus(dialogues: &[Dialogue], w: usize) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for d in dialogues {
        out.extend(window_dialogue(d, w)?);
    }
    Ok(out)
}

/// Parameters of the synthetic many-to-many corpus.
///
/// Utterances are drawn from a shared pool. Every pool utterance has
/// `branching` distinct successors in the pool, and every template opens
/// with its own utterance followed by a walk through the successor graph.
/// A context therefore admits exactly `branching` valid responses, and the
/// same response answers many contexts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub branching: usize,
    pub templates: usize,
    pub turns: usize,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default)]
    pub holdout_templates: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_pool() -> usize {
    24
}
fn default_min_len() -> usize {
    3
}
fn default_max_len() -> usize {
    5
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            branching: 3,
            templates: 8,
            turns: 4,
            vocab_size: 40,
            seed: 0,
            pool_size: default_pool(),
            holdout_templates: 0,
            min_len: default_min_len(),
            max_len: default_max_len(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::arg(format!("synth spec: {m}")));
        if self.branching < 1 {
            return fail("branching must be at least 1");
        }
        if self.turns < 2 {
            return fail("turns must be at least 2");
        }
        if self.templates < 1 {
            return fail("templates must be at least 1");
        }
        if self.pool_size < self.branching {
            return fail("pool_size must be at least branching");
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return fail("need 1 <= min_len <= max_len");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        let needed = (self.pool_size + self.templates + self.holdout_templates) as f64;
        if (self.vocab_size as f64).powi(self.max_len as i32) < 4.0 * needed {
            return fail("vocab_size too small for the requested number of distinct utterances");
        }
        Ok(())
    }

    /// Number of dialogues per template.
    pub fn leaves_per_template(&self) -> usize {
        self.branching.pow((self.turns - 1) as u32)
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub train: Vec<Dialogue>,
    /// Dialogues from templates whose openings never appear in `train`.
    pub heldout: Vec<Dialogue>,
    /// Context prefix key → sorted set of valid next utterances.
    pub continuations: BTreeMap<String, Vec<String>>,
}

/// Joins a context into the key used by the continuation metadata.
pub fn prefix_key<S: AsRef<str>>(context: &[S]) -> String {
    context.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join(" | ")
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, streams::SYNTH, 0);
    let words: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();

    let mut seen = HashSet::new();
    let mut fresh = |rng: &mut crate::seed::StreamRng| loop {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let text = (0..len)
            .map(|_| words[rng.random_range(0..words.len())].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(text.clone()) {
            return text;
        }
    };

    let pool: Vec<String> = (0..spec.pool_size).map(|_| fresh(&mut rng)).collect();
    let pick_successors = |rng: &mut crate::seed::StreamRng, exclude: Option<usize>| {
        let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| Some(i) != exclude).collect();
        idx.shuffle(rng);
        idx.truncate(spec.branching);
        idx
    };
    let successors: Vec<Vec<usize>> =
        (0..pool.len()).map(|i| pick_successors(&mut rng, Some(i))).collect();
    let n_open = spec.templates + spec.holdout_templates;
    let openings: Vec<(String, Vec<usize>)> = (0..n_open)
        .map(|_| {
            let text = fresh(&mut rng);
            (text, pick_successors(&mut rng, None))
        })
        .collect();

    let mut all_texts: Vec<Vec<String>> = Vec::new();
    let mut split_at = 0;
    for (k, (open, first)) in openings.iter().enumerate() {
        if k == spec.templates {
            split_at = all_texts.len();
        }
        let mut stack: Vec<(Vec<String>, usize)> = Vec::new();
        // depth-first in successor order gives a stable enumeration
        for &s in first.iter().rev() {
            stack.push((vec![open.clone()], s));
        }
        while let Some((mut prefix, next)) = stack.pop() {
            prefix.push(pool[next].clone());
            if prefix.len() == spec.turns {
                all_texts.push(prefix);
            } else {
                for &s in successors[next].iter().rev() {
                    stack.push((prefix.clone(), s));
                }
            }
        }
    }
    if spec.holdout_templates == 0 {
        split_at = all_texts.len();
    }

    let mut continuations: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for d in &all_texts {
        for cut in 1..d.len() {
            continuations
                .entry(prefix_key(&d[..cut]))
                .or_default()
                .insert(d[cut].clone());
        }
    }

    let mut used: Vec<&str> = Vec::new();
    let mut used_set = HashSet::new();
    for d in &all_texts {
        for u in d {
            for w in u.split_whitespace() {
                if used_set.insert(w) {
                    used.push(w);
                }
            }
        }
    }
    used.sort_by_key(|w| w[1..].parse::<usize>().unwrap_or(usize::MAX));
    let vocab = Vocab::from_words(used);
    let to_dialogues = |texts: &[Vec<String>]| {
        texts
            .iter()
            .map(|t| Dialogue::from_texts(t, &vocab))
            .collect::<Result<Vec<_>>>()
    };
    Ok(SynthCorpus {
        train: to_dialogues(&all_texts[..split_at])?,
        heldout: to_dialogues(&all_texts[split_at..])?,
        continuations: continuations
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect(),
        vocab,
    })
}

pub fn write_continuations(path: &Path, map: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, map)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_continuations(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
