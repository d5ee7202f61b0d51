//! Parallel corpora, token-budget batching and a small BPE segmenter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{SourceBatch, TargetBatch};

/// Default per-side length cap in UTF-8 bytes.
pub const DEFAULT_MAX_BYTES: usize = 800;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line} is not valid UTF-8")]
    InvalidUtf8 { path: PathBuf, line: usize },
    #[error("source has {source_lines} lines but target has {target_lines}")]
    LineCountMismatch { source_lines: usize, target_lines: usize },
    #[error("pair {index} needs {tokens} tokens, more than the batch budget of {budget}")]
    OverBudget { index: usize, tokens: usize, budget: usize },
    #[error("BPE model line {line}: {msg}")]
    BadBpeModel { line: usize, msg: String },
}

/// Aligned sentence pairs with the length filter already applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    /// Pairs removed by the length filter.
    pub dropped: usize,
}

impl ParallelCorpus {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Self {
        Self {
            pairs,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Drop pairs where either side is longer than `max_bytes`.
    pub fn filter(mut self, max_bytes: usize) -> Self {
        let before = self.pairs.len();
        self.pairs.retain(|(s, t)| s.len() <= max_bytes && t.len() <= max_bytes);
        self.dropped += before - self.pairs.len();
        self
    }

    pub fn sources(&self) -> Vec<&str> {
        self.pairs.iter().map(|(s, _)| s.as_str()).collect()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.pairs.iter().map(|(_, t)| t.as_str()).collect()
    }
}

/// Split raw bytes into lines (LF or CRLF, optional final newline). On
/// invalid UTF-8 returns the 1-based number of the first bad line.
pub fn utf8_lines(raw: &[u8]) -> Result<Vec<String>, usize> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let body = raw.strip_suffix(b"\n").unwrap_or(raw);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            std::str::from_utf8(line).map(str::to_string).map_err(|_| i + 1)
        })
        .collect()
}

/// Read a text file as lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    let raw = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    utf8_lines(&raw).map_err(|line| DataError::InvalidUtf8 {
        path: path.to_path_buf(),
        line,
    })
}

pub fn load_and_filter(src: &Path, tgt: &Path, max_bytes: usize) -> Result<ParallelCorpus, DataError> {
    let source = read_lines(src)?;
    let target = read_lines(tgt)?;
    if source.len() != target.len() {
        return Err(DataError::LineCountMismatch {
            source_lines: source.len(),
            target_lines: target.len(),
        });
    }
    let corpus = ParallelCorpus {
        pairs: source.into_iter().zip(target).collect(),
        source_path: Some(src.to_path_buf()),
        target_path: Some(tgt.to_path_buf()),
        dropped: 0,
    };
    Ok(corpus.filter(max_bytes))
}

/// Synthetic copy corpus: `n` distinct lowercase ASCII sentences of two to
/// four short words, each paired with itself.
pub fn copy_task_corpus(n: usize, seed: u64) -> ParallelCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let words = rng.gen_range(2..=4);
        let sentence = (0..words)
            .map(|_| {
                let len = rng.gen_range(1..=4);
                (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect::<String>()
            })
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(sentence.clone()) {
            pairs.push((sentence.clone(), sentence));
        }
    }
    ParallelCorpus::from_pairs(pairs)
}

/// Non-PAD ids a pair contributes to a batch: `BOS src EOS` plus the
/// decoder's `BOS tgt`.
pub fn pair_tokens(src: &str, tgt: &str) -> usize {
    src.len() + 2 + tgt.len() + 1
}

/// One training batch; `indices` refer to corpus pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub source: SourceBatch,
    pub target: TargetBatch,
}

impl Batch {
    pub fn from_pairs(corpus: &ParallelCorpus, indices: Vec<usize>) -> Self {
        let src: Vec<&str> = indices.iter().map(|&i| corpus.pairs[i].0.as_str()).collect();
        let tgt: Vec<&str> = indices.iter().map(|&i| corpus.pairs[i].1.as_str()).collect();
        Self {
            source: SourceBatch::from_texts(&src),
            target: TargetBatch::from_texts(&tgt),
            indices,
        }
    }

    pub fn tokens(&self) -> usize {
        let src = self
            .source
            .ids
            .iter()
            .filter(|&&id| id != crate::bytes_tok::PAD)
            .count();
        let tgt = self
            .target
            .input
            .iter()
            .filter(|&&id| id != crate::bytes_tok::PAD)
            .count();
        src + tgt
    }
}

/// Length-bucketed batches under a token budget. Pairs are sorted by
/// length and packed greedily; only the batch order depends on `seed`, so
/// the number of batches per epoch is seed independent.
pub fn make_batches(corpus: &ParallelCorpus, token_budget: usize, seed: u64) -> Result<Vec<Batch>, DataError> {
    let cost: Vec<usize> = corpus.pairs.iter().map(|(s, t)| pair_tokens(s, t)).collect();
    if let Some((index, &tokens)) = cost.iter().enumerate().find(|(_, &c)| c > token_budget) {
        return Err(DataError::OverBudget {
            index,
            tokens,
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| (corpus.pairs[i].0.len(), corpus.pairs[i].1.len(), i));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        if used + cost[i] > token_budget && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        used += cost[i];
        current.push(i);
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(groups.into_iter().map(|g| Batch::from_pairs(corpus, g)).collect())
}

const END_OF_WORD: &str = "</w>";

/// Ordered merge list learned by [`train_bpe`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Symbols created by merges, end-of-word marker removed.
    pub fn vocab(&self) -> BTreeSet<String> {
        self.merges
            .iter()
            .map(|(a, b)| strip_marker(&format!("{a}{b}")).to_string())
            .collect()
    }

    pub fn segment(&self, word: &str) -> Vec<String> {
        apply_bpe(self, word)
    }
}

impl fmt::Display for BpeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, b) in &self.merges {
            writeln!(f, "{a} {b}")?;
        }
        Ok(())
    }
}

impl FromStr for BpeModel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut merges = Vec::new();
        for (i, line) in s.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(DataError::BadBpeModel {
                        line: i + 1,
                        msg: format!("expected two space-separated symbols, found {line:?}"),
                    })
                }
            }
        }
        Ok(Self::from_merges(merges))
    }
}

fn strip_marker(s: &str) -> &str {
    s.strip_suffix(END_OF_WORD).unwrap_or(s)
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

fn merge_pair(symbols: &mut Vec<String>, a: &str, b: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy pair merging over whitespace-separated words. Each step merges
/// the most frequent adjacent pair; ties go to the lexicographically
/// smallest pair. The last symbol of every word carries an end-of-word
/// marker, so word-final and word-internal symbols are distinct.
pub fn train_bpe<S: AsRef<str>>(lines: &[S], num_merges: usize) -> BpeModel {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = counts.into_iter().map(|(w, c)| (initial_symbols(w), c)).collect();
    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, c) in &words {
            for pair in symbols.windows(2) {
                *pairs.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
            }
        }
        let Some((best, _)) = pairs
            .into_iter()
            .max_by(|(p, c), (q, d)| c.cmp(d).then_with(|| q.cmp(p)))
        else {
            break;
        };
        let best = (best.0.to_string(), best.1.to_string());
        for (symbols, _) in &mut words {
            merge_pair(symbols, &best.0, &best.1);
        }
        merges.push(best);
    }
    BpeModel::from_merges(merges)
}

/// Segment one word by repeatedly merging its lowest-ranked adjacent pair.
pub fn apply_bpe(model: &BpeModel, word: &str) -> Vec<String> {
    let mut symbols = initial_symbols(word);
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|p| model.ranks.get(&(p[0].clone(), p[1].clone())))
            .min();
        let Some(&rank) = best else { break };
        let (a, b) = &model.merges[rank];
        merge_pair(&mut symbols, a, b);
    }
    for s in &mut symbols {
        if let Some(stripped) = s.strip_suffix(END_OF_WORD) {
            *s = stripped.to_string();
        }
    }
    symbols
}
