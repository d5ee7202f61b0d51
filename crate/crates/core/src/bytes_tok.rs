//! Byte-level tokenization.
//!
//! Text is represented as its raw UTF-8 bytes (IDs 0-255) plus three special
//! IDs. There is no unknown token: every string has a byte representation.
//! Word spans are derived from whitespace runs and drive the block-wise
//! attention mask of the word fusion encoder.

use std::fmt;

use thiserror::Error;

/// Padding ID.
pub const PAD: u32 = 256;
/// Beginning-of-sequence ID.
pub const BOS: u32 = 257;
/// End-of-sequence ID.
pub const EOS: u32 = 258;
/// 256 byte values plus PAD/BOS/EOS.
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("token id {id} at position {position} is outside the byte vocabulary")]
    IdOutOfRange { id: u32, position: usize },
    #[error("special token {id} misplaced at position {position}")]
    MisplacedSpecial { id: u32, position: usize },
    #[error("spans do not partition [0, {len}): {reason}")]
    BadSpans { len: usize, reason: String },
}

pub fn is_special(id: u32) -> bool {
    id >= PAD
}

/// A sequence of byte token IDs.
///
/// PAD only appears as a trailing run, BOS only at position 0 and EOS only
/// as the last non-PAD token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ByteSequence {
    ids: Vec<u32>,
}

impl ByteSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self, TokError> {
        let content_len = ids.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1);
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= VOCAB_SIZE {
                return Err(TokError::IdOutOfRange { id, position });
            }
            let ok = match id {
                PAD => position >= content_len,
                BOS => position == 0,
                EOS => position + 1 == content_len,
                _ => true,
            };
            if !ok {
                return Err(TokError::MisplacedSpecial { id, position });
            }
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The raw bytes with every special token removed.
    pub fn content_bytes(&self) -> Vec<u8> {
        self.ids
            .iter()
            .filter(|&&id| !is_special(id))
            .map(|&id| id as u8)
            .collect()
    }
}

impl fmt::Display for ByteSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, id) in self.ids.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{id}")?;
        }
        Ok(())
    }
}

pub fn tokenize(text: &str, add_specials: bool) -> ByteSequence {
    let mut ids = Vec::with_capacity(text.len() + 2);
    if add_specials {
        ids.push(BOS);
    }
    ids.extend(text.bytes().map(u32::from));
    if add_specials {
        ids.push(EOS);
    }
    ByteSequence { ids }
}

/// Tokenize raw input that has not yet been checked for UTF-8 validity.
pub fn tokenize_bytes(raw: &[u8], add_specials: bool) -> Result<ByteSequence, TokError> {
    let text = std::str::from_utf8(raw).map_err(|e| TokError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    Ok(tokenize(text, add_specials))
}

/// Result of turning byte IDs back into text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub text: String,
    /// Number of invalid byte runs replaced with U+FFFD.
    pub replacements: usize,
}

/// Strip specials and decode the remaining bytes. Invalid runs (common in
/// partially trained decoder output) become U+FFFD.
pub fn detokenize(ids: &[u32]) -> Detokenized {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| !is_special(id)).map(|&id| id as u8).collect();
    let mut text = String::with_capacity(bytes.len());
    let mut replacements = 0;
    for chunk in bytes.utf8_chunks() {
        text.push_str(chunk.valid());
        if !chunk.invalid().is_empty() {
            text.push(char::REPLACEMENT_CHARACTER);
            replacements += 1;
        }
    }
    Detokenized { text, replacements }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpanKind {
    Word,
    Whitespace,
    Special,
}

impl SpanKind {
    pub fn label(self) -> &'static str {
        match self {
            SpanKind::Word => "word",
            SpanKind::Whitespace => "ws",
            SpanKind::Special => "special",
        }
    }
}

/// Half-open byte interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Mapping from word index to byte interval, covering the sequence without
/// gaps or overlap.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WordSpanMap {
    spans: Vec<Span>,
}

impl WordSpanMap {
    /// Validate that `spans` partition `[0, len)`.
    pub fn new(spans: Vec<Span>, len: usize) -> Result<Self, TokError> {
        let mut cursor = 0;
        for span in &spans {
            if span.start != cursor {
                return Err(TokError::BadSpans {
                    len,
                    reason: format!("span starts at {} but previous ended at {cursor}", span.start),
                });
            }
            if span.end <= span.start {
                return Err(TokError::BadSpans {
                    len,
                    reason: format!("empty span at {}", span.start),
                });
            }
            cursor = span.end;
        }
        if cursor != len {
            return Err(TokError::BadSpans {
                len,
                reason: format!("spans end at {cursor}"),
            });
        }
        Ok(Self { spans })
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    /// Total number of bytes covered.
    pub fn seq_len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    pub fn word_count(&self) -> usize {
        self.spans.iter().filter(|s| s.kind == SpanKind::Word).count()
    }

    /// Shift every span by one and add singleton BOS/EOS spans, matching
    /// `tokenize(text, true)`.
    pub fn with_specials(&self) -> WordSpanMap {
        let n = self.seq_len();
        let mut spans = Vec::with_capacity(self.spans.len() + 2);
        spans.push(Span {
            start: 0,
            end: 1,
            kind: SpanKind::Special,
        });
        spans.extend(self.spans.iter().map(|s| Span {
            start: s.start + 1,
            end: s.end + 1,
            kind: s.kind,
        }));
        spans.push(Span {
            start: n + 1,
            end: n + 2,
            kind: SpanKind::Special,
        });
        WordSpanMap { spans }
    }

    /// Span index for every byte position.
    pub fn span_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.seq_len());
        for (i, s) in self.spans.iter().enumerate() {
            ids.extend(std::iter::repeat_n(i, s.len()));
        }
        ids
    }
}

impl fmt::Display for WordSpanMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.spans.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}:{}:{}", s.start, s.end, s.kind.label())?;
        }
        Ok(())
    }
}

/// Split text into maximal whitespace and non-whitespace runs, in byte
/// offsets.
pub fn word_spans(text: &str) -> WordSpanMap {
    let mut spans: Vec<Span> = Vec::new();
    for (offset, ch) in text.char_indices() {
        let kind = if ch.is_whitespace() {
            SpanKind::Whitespace
        } else {
            SpanKind::Word
        };
        let end = offset + ch.len_utf8();
        match spans.last_mut() {
            Some(last) if last.kind == kind => last.end = end,
            _ => spans.push(Span {
                start: offset,
                end,
                kind,
            }),
        }
    }
    WordSpanMap { spans }
}

/// Word spans for a token sequence that may carry BOS/EOS and trailing PAD.
/// Specials become singleton spans; PAD positions are not covered.
pub fn spans_for_ids(ids: &[u32]) -> Result<WordSpanMap, TokError> {
    let seq = ByteSequence::new(ids.to_vec())?;
    let content_len = ids.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1);
    let ids = &seq.ids()[..content_len];
    let lead = usize::from(ids.first() == Some(&BOS));
    let trail = usize::from(ids.len() > lead && ids.last() == Some(&EOS));
    let bytes: Vec<u8> = ids[lead..ids.len() - trail].iter().map(|&b| b as u8).collect();
    let text = std::str::from_utf8(&bytes).map_err(|e| TokError::InvalidUtf8 {
        offset: e.valid_up_to() + lead,
    })?;
    let inner = word_spans(text);
    let mut spans = Vec::with_capacity(inner.spans.len() + 2);
    if lead == 1 {
        spans.push(Span {
            start: 0,
            end: 1,
            kind: SpanKind::Special,
        });
    }
    spans.extend(inner.spans.iter().map(|s| Span {
        start: s.start + lead,
        end: s.end + lead,
        kind: s.kind,
    }));
    if trail == 1 {
        let n = ids.len();
        spans.push(Span {
            start: n - 1,
            end: n,
            kind: SpanKind::Special,
        });
    }
    Ok(WordSpanMap { spans })
}
