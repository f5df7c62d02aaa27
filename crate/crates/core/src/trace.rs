//! Reasoning traces, sentence segmentation and corpus files.
//!
//! A corpus file is UTF-8 JSON Lines. Each record carries the required string
//! keys `id`, `prompt`, `reasoning` and `answer`; any other key is kept
//! verbatim and written back on save. Poisoned corpora additionally carry a
//! `poison_report` object.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::poison::PoisonReport;

/// Key under which poisoned corpora store their [`PoisonReport`].
pub const POISON_REPORT_KEY: &str = "poison_report";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub text: String,
    /// Whitespace between the previous sentence (or start of text) and this one.
    pub leading_separator: String,
    pub token_count: usize,
}

impl Sentence {
    pub fn new(
        index: usize,
        leading_separator: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Sentence {
            index,
            token_count: count_tokens(&text),
            text,
            leading_separator: leading_separator.into(),
        }
    }
}

/// One teacher output: prompt, segmented reasoning, and final answer.
///
/// The answer lives outside `sentences` and no poisoning routine touches it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace {
    pub id: String,
    pub prompt: String,
    pub sentences: Vec<Sentence>,
    pub answer: String,
    /// Unrecognised record keys, preserved in their original order.
    pub extra: Map<String, Value>,
}

impl ReasoningTrace {
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        reasoning: &str,
        answer: impl Into<String>,
    ) -> Self {
        ReasoningTrace {
            id: id.into(),
            prompt: prompt.into(),
            sentences: segment_sentences(reasoning),
            answer: answer.into(),
            extra: Map::new(),
        }
    }

    /// The reasoning text, rebuilt from separators and sentences.
    pub fn reasoning(&self) -> String {
        join_sentences(&self.sentences)
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.token_count).sum()
    }

    /// The embedded poisoning report, if this trace came from a poisoned corpus.
    pub fn poison_report(&self) -> Result<Option<PoisonReport>, serde_json::Error> {
        self.extra
            .get(POISON_REPORT_KEY)
            .map(PoisonReport::deserialize)
            .transpose()
    }

    pub fn set_poison_report(&mut self, report: &PoisonReport) {
        let value = serde_json::to_value(report).expect("report serializes");
        self.extra.insert(POISON_REPORT_KEY.to_string(), value);
    }
}

/// Counts maximal runs of non-whitespace characters.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn join_sentences(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.leading_separator);
        out.push_str(&s.text);
    }
    out
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!' | '\u{2026}')
}

fn is_closer(c: char) -> bool {
    matches!(
        c,
        '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}' | '\u{bb}'
    )
}

/// Splits reasoning text into sentences.
///
/// A sentence ends after a run of terminators (`.`, `?`, `!`, `…`), plus any
/// closing quotes or brackets, when the next character is whitespace or the
/// text ends. A newline also ends a sentence. Whitespace before a sentence is
/// its `leading_separator`; whitespace after the last sentence is kept in that
/// sentence's text so that joining reproduces the input exactly.
pub fn segment_sentences(reasoning: &str) -> Vec<Sentence> {
    let chars: Vec<(usize, char)> = reasoning.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { reasoning.len() };

    let mut sentences: Vec<Sentence> = Vec::new();
    let mut i = 0;
    while i < n {
        let sep_start = i;
        while i < n && chars[i].1.is_whitespace() {
            i += 1;
        }
        if i == n {
            // Whitespace tail.
            let tail = &reasoning[byte_at(sep_start)..];
            match sentences.last_mut() {
                Some(last) => last.text.push_str(tail),
                None => sentences.push(Sentence::new(0, "", tail)),
            }
            break;
        }
        let text_start = i;
        let mut end = n;
        while i < n {
            let c = chars[i].1;
            if c == '\n' {
                end = i;
                break;
            }
            if is_terminator(c) {
                let mut j = i;
                while j < n && is_terminator(chars[j].1) {
                    j += 1;
                }
                while j < n && is_closer(chars[j].1) {
                    j += 1;
                }
                if j == n || chars[j].1.is_whitespace() {
                    end = j;
                    break;
                }
                i = j;
                continue;
            }
            i += 1;
        }
        // A newline-terminated sentence may carry trailing spaces before the
        // newline; those belong to the next separator.
        let mut text_end = end;
        while text_end > text_start && chars[text_end - 1].1.is_whitespace() {
            text_end -= 1;
        }
        i = text_end;
        let index = sentences.len();
        sentences.push(Sentence::new(
            index,
            &reasoning[byte_at(sep_start)..byte_at(text_start)],
            &reasoning[byte_at(text_start)..byte_at(text_end)],
        ));
    }
    sentences
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read or write corpus")]
    Io(#[from] std::io::Error),
    #[error("line {line}: input is not valid UTF-8")]
    NotUtf8 { line: usize },
    #[error("line {line}: malformed record")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    prompt: String,
    reasoning: String,
    answer: String,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

/// Parses a JSON Lines corpus held in memory. Blank lines are skipped.
pub fn parse_corpus(bytes: &[u8]) -> Result<Vec<ReasoningTrace>, CorpusError> {
    let mut traces = Vec::new();
    let mut seen = HashSet::new();
    for (n, raw) in bytes.split(|b| *b == b'\n').enumerate() {
        let line = n + 1;
        let text = std::str::from_utf8(raw).map_err(|_| CorpusError::NotUtf8 { line })?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(text).map_err(|source| CorpusError::Malformed { line, source })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line,
                id: record.id,
            });
        }
        traces.push(ReasoningTrace {
            sentences: segment_sentences(&record.reasoning),
            id: record.id,
            prompt: record.prompt,
            answer: record.answer,
            extra: record.extra,
        });
    }
    Ok(traces)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ReasoningTrace>, CorpusError> {
    parse_corpus(&fs::read(path)?)
}

/// Serializes one trace as a single JSON line (without the newline).
pub fn to_json_line(trace: &ReasoningTrace) -> String {
    let record = Record {
        id: trace.id.clone(),
        prompt: trace.prompt.clone(),
        reasoning: trace.reasoning(),
        answer: trace.answer.clone(),
        extra: trace.extra.clone(),
    };
    serde_json::to_string(&record).expect("record serializes")
}

pub fn write_corpus<W: Write>(traces: &[ReasoningTrace], mut out: W) -> std::io::Result<()> {
    for t in traces {
        out.write_all(to_json_line(t).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_corpus(traces: &[ReasoningTrace], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let file = fs::File::create(path)?;
    write_corpus(traces, BufWriter::new(file))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        segment_sentences(s).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn splits_on_terminators() {
        assert_eq!(
            texts("Wait, that's wrong. Let me retry."),
            ["Wait, that's wrong.", "Let me retry."]
        );
        assert!(texts("").is_empty());
        assert_eq!(texts("So 3.14 is pi. Done."), ["So 3.14 is pi.", "Done."]);
    }

    #[test]
    fn ellipsis_and_closers() {
        assert_eq!(
            texts("Hmm... maybe. Or… not!"),
            ["Hmm...", "maybe.", "Or…", "not!"]
        );
        assert_eq!(
            texts("He said \"stop.\" Then left."),
            ["He said \"stop.\"", "Then left."]
        );
        assert_eq!(texts("Really?! Yes."), ["Really?!", "Yes."]);
    }

    #[test]
    fn newline_ends_a_sentence() {
        let s = segment_sentences("Step one  \nStep two");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "Step one");
        assert_eq!(s[1].leading_separator, "  \n");
        assert_eq!(s[1].text, "Step two");
    }

    #[test]
    fn whitespace_edges_round_trip() {
        for input in ["  lead. tail  ", "   ", "\n\n", "a.\n", "x", " . . "] {
            let s = segment_sentences(input);
            assert_eq!(join_sentences(&s), input, "{input:?}");
            for (i, sent) in s.iter().enumerate() {
                assert_eq!(sent.index, i);
            }
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(count_tokens("Wait, I made a mistake"), 5);
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("a  b\tc\n"), 3);
    }

    #[test]
    fn corpus_errors_name_the_line() {
        let dup = b"{\"id\":\"t1\",\"prompt\":\"p\",\"reasoning\":\"r.\",\"answer\":\"a\"}\n\
                    {\"id\":\"t1\",\"prompt\":\"p\",\"reasoning\":\"r.\",\"answer\":\"a\"}\n";
        let err = parse_corpus(dup).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, .. }));
        assert!(err.to_string().contains("duplicate id"));

        let missing = b"{\"id\":\"t1\",\"prompt\":\"p\",\"answer\":\"a\"}\n";
        let err = parse_corpus(missing).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
        let source = std::error::Error::source(&err).expect("serde error attached");
        assert!(source.to_string().contains("reasoning"));

        let bad = b"\n\xff\xfe\n";
        assert!(matches!(
            parse_corpus(bad).unwrap_err(),
            CorpusError::NotUtf8 { line: 2 }
        ));
    }

    #[test]
    fn single_record_and_unknown_keys() {
        let line = br#"{"id":"t1","prompt":"p","reasoning":"A. B.","answer":"5","zeta":[1,2],"alpha":{"x":null}}"#;
        let traces = parse_corpus(line).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].sentences.len(), 2);
        let out = to_json_line(&traces[0]);
        assert_eq!(out.as_bytes(), line);
    }
}
