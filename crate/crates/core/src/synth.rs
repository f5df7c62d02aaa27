//! Seeded synthetic reasoning corpora with known branching structure.
//!
//! Each generated trace records its ground truth under the `synth_truth`
//! key: the number of sentences and, in order, the token count of every
//! branching sentence. The truth comes from the templates, not from the
//! segmenter or the marker matcher, so it can serve as an oracle for both.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::seed;
use crate::trace::ReasoningTrace;

pub const TRUTH_KEY: &str = "synth_truth";

const BRANCHING: &[&str] = &[
    "Wait, {} is not right.",
    "Hold on, let me recheck {} again.",
    "Alternatively, we could try {} instead.",
    "wait that gives {} which contradicts the setup.",
    "\"Hold on,\" I think {} fails.",
    "Alternatively: plug in {} directly!",
    "Wait, is {} even an integer?",
];

// Plain sentences, including near misses for the marker matcher.
const PLAIN: &[&str] = &[
    "So the sum is {}.",
    "Multiply by 3.5 to get {}.",
    "Let x equal {}.",
    "Waiting on {} is unnecessary.",
    "We wait for {} to settle.",
    "Holding {} fixed, expand the product.",
    "Alternatives exist, but {} works.",
    "Then {} squared is positive.",
    "Is {} prime?",
    "Therefore the answer is {}.",
];

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub traces: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Probability that a sentence is branching.
    pub branching_density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            traces: 100,
            min_sentences: 4,
            max_sentences: 40,
            branching_density: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub sentences: usize,
    pub branching_tokens: Vec<usize>,
    pub branching_positions: Vec<usize>,
}

impl SynthTruth {
    pub fn of(trace: &ReasoningTrace) -> Option<SynthTruth> {
        trace
            .extra
            .get(TRUTH_KEY)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    /// Sentences and tokens TraceGuard should remove at budget `k`.
    pub fn expected_removal(&self, k: usize) -> (usize, usize) {
        let n = k.min(self.branching_tokens.len());
        (n, self.branching_tokens[..n].iter().sum())
    }
}

fn fill(template: &str, value: &str) -> (String, usize) {
    let text = template.replacen("{}", value, 1);
    let words = template.split(' ').count();
    (text, words)
}

pub fn generate(config: &SynthConfig) -> Vec<ReasoningTrace> {
    (0..config.traces)
        .map(|i| generate_one(config, i))
        .collect()
}

fn generate_one(config: &SynthConfig, i: usize) -> ReasoningTrace {
    let mut rng = seed::rng(seed::derive(config.seed, i as u64));
    let n = rng.random_range(config.min_sentences..=config.max_sentences.max(config.min_sentences));
    let mut reasoning = String::new();
    let mut truth = SynthTruth {
        sentences: n,
        branching_tokens: Vec::new(),
        branching_positions: Vec::new(),
    };
    for s in 0..n {
        let value = if rng.random_bool(0.3) {
            format!("{}.{}", rng.random_range(0..100), rng.random_range(1..100))
        } else {
            rng.random_range(0..1000).to_string()
        };
        let branching = rng.random_bool(config.branching_density);
        let pool = if branching { BRANCHING } else { PLAIN };
        let (text, words) = fill(pool[rng.random_range(0..pool.len())], &value);
        if s > 0 {
            reasoning.push_str(if rng.random_bool(0.15) { "\n" } else { " " });
        }
        reasoning.push_str(&text);
        if branching {
            truth.branching_tokens.push(words);
            truth.branching_positions.push(s);
        }
    }
    let answer = rng.random_range(0..1000).to_string();
    let mut trace = ReasoningTrace::new(
        format!("synth-{i:05}"),
        format!("Problem {i}: find the value."),
        &reasoning,
        answer,
    );
    trace.extra.insert(
        TRUTH_KEY.into(),
        serde_json::to_value(&truth).unwrap_or(Value::Null),
    );
    trace
}
