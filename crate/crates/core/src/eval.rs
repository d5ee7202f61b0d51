//! Decoding, corpus BLEU and word-level analysis.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytes_tok::{detokenize, ByteSequence, BOS, EOS, PAD};
use crate::data::{apply_bpe, BpeModel};
use crate::model::{ModelError, Seq2Seq, SourceBatch};
use crate::tensor::Float;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot translate an empty source")]
    EmptySource,
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("{hyps} hypotheses for {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty reference set")]
    NoReferences,
    #[error("bucket edges must be non-empty and strictly increasing")]
    BadEdges,
    #[error("fertility buckets need a BPE model")]
    MissingBpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Output cap as a multiple of the source length in bytes.
    pub max_len_factor: f64,
    /// Beam hypotheses are ranked by `score / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 1,
            max_len_factor: 2.0,
            length_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationHypothesis {
    /// Output bytes, without specials.
    pub tokens: ByteSequence,
    /// Sum of log-probabilities, including the final EOS when produced.
    pub score: f64,
    pub text: String,
    pub finished: bool,
}

impl TranslationHypothesis {
    fn new(ids: Vec<u32>, score: f64, finished: bool) -> Self {
        let text = detokenize(&ids).text;
        Self {
            tokens: ByteSequence::new(ids).expect("decoder emits byte ids only"),
            score,
            text,
            finished,
        }
    }

    fn normalized(&self, alpha: f64) -> f64 {
        let len = (self.tokens.len() + usize::from(self.finished)).max(1) as f64;
        self.score / len.powf(alpha)
    }
}

/// Specials other than EOS can never be produced.
fn allowed(id: usize) -> bool {
    id != PAD as usize && id != BOS as usize
}

fn output_cap(source: &ByteSequence, factor: f64) -> Result<usize, EvalError> {
    let n = source.content_bytes().len();
    if n == 0 {
        return Err(EvalError::EmptySource);
    }
    Ok(((n as f64 * factor).ceil() as usize).max(1))
}

fn source_batch(source: &ByteSequence) -> Result<SourceBatch, EvalError> {
    let content = source.content_bytes();
    let seq = crate::bytes_tok::tokenize_bytes(&content, true).map_err(ModelError::from)?;
    Ok(SourceBatch::from_sequences(&[seq])?)
}

/// Greedy or beam search decoding of one source sentence.
pub fn decode<T: Float>(
    model: &Seq2Seq<T>,
    source: &ByteSequence,
    cfg: &DecodeConfig,
) -> Result<TranslationHypothesis, EvalError> {
    match cfg.beam {
        0 => Err(EvalError::ZeroBeam),
        1 => greedy(model, source, cfg.max_len_factor),
        k => beam_search(model, source, k, cfg.max_len_factor, cfg.length_penalty),
    }
}

/// Decode a text sentence.
pub fn translate<T: Float>(
    model: &Seq2Seq<T>,
    text: &str,
    cfg: &DecodeConfig,
) -> Result<TranslationHypothesis, EvalError> {
    decode(model, &crate::bytes_tok::tokenize(text, true), cfg)
}

pub fn greedy<T: Float>(
    model: &Seq2Seq<T>,
    source: &ByteSequence,
    factor: f64,
) -> Result<TranslationHypothesis, EvalError> {
    let cap = output_cap(source, factor)?;
    let src = source_batch(source)?;
    let memory = model.memory(&src)?;
    let mut prefix = vec![BOS];
    let mut score = 0.0;
    for _ in 0..=cap {
        let lp = model.next_log_probs(&memory, &src.ids, std::slice::from_ref(&prefix))?;
        let (best, &p) = lp[0]
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i) && (prefix.len() <= cap || *i == EOS as usize))
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("vocabulary is non-empty");
        score += p;
        if best == EOS as usize {
            return Ok(TranslationHypothesis::new(prefix[1..].to_vec(), score, true));
        }
        prefix.push(best as u32);
    }
    Ok(TranslationHypothesis::new(prefix[1..].to_vec(), score, false))
}

/// Beam search over at most `cap` output bytes; at the cap the final token
/// is forced to EOS.
pub fn beam_search<T: Float>(
    model: &Seq2Seq<T>,
    source: &ByteSequence,
    beam: usize,
    factor: f64,
    alpha: f64,
) -> Result<TranslationHypothesis, EvalError> {
    if beam == 0 {
        return Err(EvalError::ZeroBeam);
    }
    let cap = output_cap(source, factor)?;
    let src = source_batch(source)?;
    let memory = model.memory(&src)?;
    let mut active: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<TranslationHypothesis> = Vec::new();
    while !active.is_empty() {
        let prefixes: Vec<Vec<u32>> = active.iter().map(|(p, _)| p.clone()).collect();
        let at_cap = prefixes[0].len() > cap;
        let lp = model.next_log_probs(&memory, &src.ids, &prefixes)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (b, row) in lp.iter().enumerate() {
            for (tok, &p) in row.iter().enumerate() {
                if allowed(tok) && (!at_cap || tok == EOS as usize) {
                    candidates.push((active[b].1 + p, b, tok));
                }
            }
        }
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let mut next = Vec::with_capacity(beam);
        for &(score, b, tok) in candidates.iter().take(beam) {
            if tok == EOS as usize {
                finished.push(TranslationHypothesis::new(active[b].0[1..].to_vec(), score, true));
            } else {
                let mut p = active[b].0.clone();
                p.push(tok as u32);
                next.push((p, score));
            }
        }
        active = next;
        if alpha != 0.0 && finished.len() >= beam {
            break;
        }
        // Scores only decrease, so without length normalisation an active
        // prefix can no longer beat the best finished hypothesis.
        if alpha == 0.0 {
            let best = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            active.retain(|(_, s)| *s > best);
        }
    }
    Ok(finished
        .into_iter()
        .max_by(|a, b| a.normalized(alpha).total_cmp(&b.normalized(alpha)))
        .expect("at least one hypothesis reaches EOS"))
}

fn tok13a_rules() -> &'static [(Regex, &'static str)] {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (r"([\{-\~\[-\` -\&\(-\+\:-\@/])", " $1 "),
            (r"([^0-9])([\.,])", "$1 $2 "),
            (r"([\.,])([^0-9])", " $1 $2"),
            (r"([0-9])(-)", "$1 $2 "),
        ]
        .into_iter()
        .map(|(re, rep)| (Regex::new(re).expect("static pattern"), rep))
        .collect()
    })
}

/// mteval-v13a tokenization as used by the standard BLEU scorer.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut line = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in tok13a_rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    line.split(|c: char| c.is_whitespace() || ('\x1c'..='\x1f').contains(&c))
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Sufficient statistics of corpus BLEU-4.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bleu {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub stats: BleuStats,
}

impl fmt::Display for Bleu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions;
        write!(
            f,
            "BLEU = {:.2} {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3} hyp_len = {} ref_len = {})",
            self.score, p[0], p[1], p[2], p[3], self.brevity_penalty, self.stats.hyp_len, self.stats.ref_len
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over 13a tokens with brevity penalty and no smoothing.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<Bleu, EvalError> {
    if refs.is_empty() {
        return Err(EvalError::NoReferences);
    }
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        let h = tokenize_13a(h.as_ref());
        let r = tokenize_13a(r.as_ref());
        stats.hyp_len += h.len();
        stats.ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                stats.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            stats.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(bleu_from_stats(stats))
}

pub fn bleu_from_stats(stats: BleuStats) -> Bleu {
    let precisions: [f64; 4] = std::array::from_fn(|n| {
        if stats.totals[n] > 0 {
            100.0 * stats.matches[n] as f64 / stats.totals[n] as f64
        } else {
            0.0
        }
    });
    let brevity_penalty = if stats.hyp_len == 0 {
        0.0
    } else if stats.hyp_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if stats.matches.contains(&0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| (p / 100.0).ln()).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Bleu {
        score,
        precisions,
        brevity_penalty,
        stats,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FertilityReport {
    /// Mean subwords per word token.
    pub mean: f64,
    pub words: usize,
    /// Fertility of each distinct word, in first-seen order.
    pub per_word: Vec<(String, usize)>,
}

pub fn fertility<S: AsRef<str>>(bpe: &BpeModel, lines: &[S]) -> FertilityReport {
    let mut cache: HashMap<&str, usize> = HashMap::new();
    let mut per_word = Vec::new();
    let mut total = 0usize;
    let mut words = 0usize;
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            let f = *cache.entry(w).or_insert_with(|| {
                let f = apply_bpe(bpe, w).len();
                per_word.push((w.to_string(), f));
                f
            });
            total += f;
            words += 1;
        }
    }
    FertilityReport {
        mean: if words == 0 { 0.0 } else { total as f64 / words as f64 },
        words,
        per_word,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketAxis {
    Fertility,
    WordLength,
}

impl std::str::FromStr for BucketAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fertility" => Ok(Self::Fertility),
            "word_length" | "length" => Ok(Self::WordLength),
            other => Err(format!("unknown axis {other:?} (expected fertility or word_length)")),
        }
    }
}

impl fmt::Display for BucketAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fertility => "fertility",
            Self::WordLength => "word_length",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    /// `[lo, hi)`; `None` means unbounded.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub words: usize,
    pub matches: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        if self.words == 0 {
            0.0
        } else {
            self.matches as f64 / self.words as f64
        }
    }

    pub fn label(&self) -> String {
        match (self.lo, self.hi) {
            (None, Some(hi)) => format!("<{hi}"),
            (Some(lo), None) => format!(">={lo}"),
            (Some(lo), Some(hi)) => format!("[{lo},{hi})"),
            (None, None) => "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketReport {
    pub axis: BucketAxis,
    pub buckets: Vec<Bucket>,
}

impl BucketReport {
    pub fn total_words(&self) -> usize {
        self.buckets.iter().map(|b| b.words).sum()
    }
}

impl fmt::Display for BucketReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}\twords\tmatches\taccuracy", self.axis)?;
        for b in &self.buckets {
            writeln!(f, "{}\t{}\t{}\t{:.4}", b.label(), b.words, b.matches, b.accuracy())?;
        }
        Ok(())
    }
}

/// Word accuracy of reference words, bucketed by fertility or character
/// length. A reference word matches if the hypothesis still holds an unused
/// copy of it. `k` edges give `k + 1` buckets.
pub fn bucket_accuracy<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    axis: BucketAxis,
    edges: &[f64],
    bpe: Option<&BpeModel>,
) -> Result<BucketReport, EvalError> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadEdges);
    }
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if axis == BucketAxis::Fertility && bpe.is_none() {
        return Err(EvalError::MissingBpe);
    }
    let mut buckets: Vec<Bucket> = (0..=edges.len())
        .map(|i| Bucket {
            lo: i.checked_sub(1).map(|j| edges[j]),
            hi: edges.get(i).copied(),
            words: 0,
            matches: 0,
        })
        .collect();
    for (h, r) in hyps.iter().zip(refs) {
        let mut available: HashMap<&str, usize> = HashMap::new();
        for w in h.as_ref().split_whitespace() {
            *available.entry(w).or_default() += 1;
        }
        for w in r.as_ref().split_whitespace() {
            let value = match (axis, bpe) {
                (BucketAxis::Fertility, Some(bpe)) => apply_bpe(bpe, w).len() as f64,
                _ => w.chars().count() as f64,
            };
            let idx = edges.iter().take_while(|&&e| e <= value).count();
            let bucket = &mut buckets[idx];
            bucket.words += 1;
            if let Some(n) = available.get_mut(w).filter(|n| **n > 0) {
                *n -= 1;
                bucket.matches += 1;
            }
        }
    }
    Ok(BucketReport { axis, buckets })
}

/// Text report: overall BLEU followed by an optional bucket table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: Bleu,
    pub buckets: Option<BucketReport>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.bleu)?;
        if let Some(b) = &self.buckets {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_13a_examples() {
        assert_eq!(tokenize_13a("Hello, world."), ["Hello", ",", "world", "."]);
        assert_eq!(tokenize_13a("3.14 and 1,000"), ["3.14", "and", "1,000"]);
        assert_eq!(
            tokenize_13a("state-of-the-art 5-3"),
            ["state-of-the-art", "5", "-", "3"]
        );
        assert_eq!(tokenize_13a("a &amp; b \"q\""), ["a", "&", "b", "\"", "q", "\""]);
        assert_eq!(tokenize_13a("(x)[y]{z}"), ["(", "x", ")", "[", "y", "]", "{", "z", "}"]);
    }

    #[test]
    fn identical_corpus_scores_100() {
        let s = ["the cat sat on the mat .", "a dog barked loudly at night"];
        assert!((bleu(&s, &s).unwrap().score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_four_gram_overlap_scores_zero() {
        let b = bleu(&["a b c d e"], &["a b c x d e"]).unwrap();
        assert_eq!(b.stats.matches[3], 0);
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let b = bleu(&["the the the the"], &["the cat"]).unwrap();
        assert_eq!(b.stats.matches[0], 1);
        assert_eq!(b.stats.totals[0], 4);
        assert_eq!(b.score, 0.0);
    }

    #[test]
    fn brevity_penalty_and_errors() {
        let b = bleu(&["a b c d"], &["a b c d e f g h"]).unwrap();
        assert!((b.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
        assert!(matches!(bleu::<&str, &str>(&[], &[]), Err(EvalError::NoReferences)));
        assert!(matches!(
            bleu(&["a"], &["a", "b"]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bucket_examples() {
        let r = bucket_accuracy(&["a b b"], &["a a b"], BucketAxis::WordLength, &[10.0], None).unwrap();
        assert_eq!(r.buckets[0].words, 3);
        assert_eq!(r.buckets[0].matches, 2);
        assert!((r.buckets[0].accuracy() - 2.0 / 3.0).abs() < 1e-12);

        let same = bucket_accuracy(&["x yy zzz"], &["x yy zzz"], BucketAxis::WordLength, &[2.0, 3.0], None).unwrap();
        assert!(same.buckets.iter().all(|b| b.accuracy() == 1.0));
        assert_eq!(same.buckets.iter().map(|b| b.words).collect::<Vec<_>>(), [1, 1, 1]);
        let none = bucket_accuracy(&["p q"], &["x yy"], BucketAxis::WordLength, &[2.0], None).unwrap();
        assert!(none.buckets.iter().all(|b| b.accuracy() == 0.0));
        assert_eq!(none.total_words(), 2);

        assert!(matches!(
            bucket_accuracy(&["a"], &["a"], BucketAxis::WordLength, &[], None),
            Err(EvalError::BadEdges)
        ));
        assert!(matches!(
            bucket_accuracy(&["a"], &["a"], BucketAxis::Fertility, &[1.0], None),
            Err(EvalError::MissingBpe)
        ));
    }

    #[test]
    fn report_lists_every_bucket() {
        let r = bucket_accuracy(&["a bb"], &["a bb"], BucketAxis::WordLength, &[2.0], None).unwrap();
        let text = r.to_string();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("<2\t1\t1\t1.0000"));
        assert!(text.contains(">=2\t1\t1\t1.0000"));
    }

    #[test]
    fn fertility_of_character_model_is_mean_length() {
        let m = crate::data::train_bpe(&["ab cde"], 0);
        let f = fertility(&m, &["ab cde", "ab"]);
        assert_eq!(f.words, 3);
        assert!((f.mean - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(f.per_word, vec![("ab".to_string(), 2), ("cde".to_string(), 3)]);
    }

    #[test]
    fn whole_word_merges_give_unit_fertility() {
        let m = crate::data::train_bpe(&["ab ab cd"], 10);
        assert_eq!(fertility(&m, &["ab cd ab"]).mean, 1.0);
    }
}
