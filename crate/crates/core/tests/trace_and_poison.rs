use proptest::prelude::*;
use serde::Deserialize;

use traceguard_core::poison::{
    is_branching, match_budget_random, poison_corpus, random_poison, traceguard_poison,
    BranchingSet, PoisonConfig, PoisonMethod,
};
use traceguard_core::synth::{self, SynthConfig, SynthTruth};
use traceguard_core::trace::{
    count_tokens, join_sentences, load_corpus, save_corpus, segment_sentences, ReasoningTrace,
};

#[derive(Deserialize)]
struct Case {
    input: String,
    expected: Vec<String>,
}

#[test]
fn hand_segmented_fixture() {
    let fixture = include_str!("fixtures/segmentation.jsonl");
    let mut cases = 0;
    for line in fixture.lines() {
        let case: Case = serde_json::from_str(line).unwrap();
        let sentences = segment_sentences(&case.input);
        let got: Vec<&str> = sentences.iter().map(|s| s.text.trim_end()).collect();
        assert_eq!(got, case.expected, "input {:?}", case.input);
        assert_eq!(join_sentences(&sentences), case.input);
        cases += 1;
    }
    assert_eq!(cases, 20);
}

#[test]
fn corpus_round_trip_of_100_traces() {
    let traces = synth::generate(&SynthConfig {
        traces: 100,
        seed: 5,
        ..Default::default()
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&traces, &path).unwrap();
    let loaded = load_corpus(&path).unwrap();
    assert_eq!(loaded, traces);
}

#[test]
fn single_record_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.jsonl");
    std::fs::write(
        &path,
        "{\"id\":\"t1\",\"prompt\":\"p\",\"reasoning\":\"Hi.\",\"answer\":\"a\"}\n",
    )
    .unwrap();
    let loaded = load_corpus(&path).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].id, "t1");
}

fn sentence_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("Wait, that is wrong.".to_string()),
        Just("Hold on, recheck 3.5 first.".to_string()),
        Just("Alternatively, factor it!".to_string()),
        Just("Waiting helps nobody.".to_string()),
        "[A-Za-z0-9 ,]{1,30}[.?!]",
    ]
}

fn trace_strategy() -> impl Strategy<Value = ReasoningTrace> {
    (
        prop::collection::vec(
            (
                sentence_strategy(),
                prop_oneof![Just(" "), Just("\n"), Just("  ")],
            ),
            0..25,
        ),
        "[a-z0-9]{1,8}",
    )
        .prop_map(|(parts, answer)| {
            let mut text = String::new();
            for (i, (s, sep)) in parts.iter().enumerate() {
                if i > 0 {
                    text.push_str(sep);
                }
                text.push_str(s.trim());
            }
            ReasoningTrace::new("p", "prompt", &text, answer)
        })
}

proptest! {
    #[test]
    fn segmentation_round_trips(text in "\\PC{0,200}") {
        let sentences = segment_sentences(&text);
        prop_assert_eq!(join_sentences(&sentences), text.clone());
        for (i, s) in sentences.iter().enumerate() {
            prop_assert_eq!(s.index, i);
            prop_assert_eq!(s.token_count, count_tokens(&s.text));
        }
        prop_assert_eq!(segment_sentences(&text), sentences);
    }

    #[test]
    fn token_count_is_additive(a in "\\PC{0,40}[a-z]", b in "[a-z]\\PC{0,40}") {
        prop_assert_eq!(count_tokens(&format!("{a} {b}")), count_tokens(&a) + count_tokens(&b));
    }

    #[test]
    fn traceguard_invariants(trace in trace_strategy(), k in 0usize..8) {
        let set = BranchingSet::default();
        let branching: Vec<usize> = trace.sentences.iter().filter(|s| is_branching(s, &set)).map(|s| s.index).collect();
        let (poisoned, report) = traceguard_poison(&trace, &set, k);

        prop_assert_eq!(report.removed_indices.len(), k.min(branching.len()));
        prop_assert_eq!(&report.removed_indices[..], &branching[..report.removed_indices.len()]);
        prop_assert_eq!(
            report.removed_token_count,
            report.removed_indices.iter().map(|&i| trace.sentences[i].token_count).sum::<usize>()
        );
        prop_assert_eq!(&poisoned.answer, &trace.answer);

        let survivors: Vec<&str> = trace
            .sentences
            .iter()
            .filter(|s| !report.removed_indices.contains(&s.index))
            .map(|s| s.text.as_str())
            .collect();
        let kept: Vec<&str> = poisoned.sentences.iter().map(|s| s.text.as_str()).collect();
        prop_assert_eq!(kept, survivors);

        if report.removed_indices.len() < k {
            let (_, again) = traceguard_poison(&poisoned, &set, k);
            prop_assert!(again.removed_indices.is_empty());
        }

        let (_, bigger) = traceguard_poison(&trace, &set, k + 1);
        prop_assert!(bigger.removed_token_count >= report.removed_token_count);
    }

    #[test]
    fn random_invariants(trace in trace_strategy(), m in 0usize..30, seed in any::<u64>()) {
        let (poisoned, report) = random_poison(&trace, m, seed);
        prop_assert_eq!(report.removed_indices.len(), m.min(trace.sentences.len()));
        prop_assert!(report.removed_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(&poisoned.answer, &trace.answer);
        prop_assert_eq!(random_poison(&trace, m, seed), (poisoned, report));
    }

    #[test]
    fn matched_counts(trace in trace_strategy(), k in 0usize..8, seed in any::<u64>()) {
        let run = match_budget_random(&trace, &BranchingSet::default(), k, seed);
        prop_assert_eq!(run.report.removed_indices.len(), run.traceguard_removed);
    }
}

#[test]
fn matched_means_equal_on_200_traces() {
    let traces = synth::generate(&SynthConfig {
        traces: 200,
        seed: 17,
        ..Default::default()
    });
    let set = BranchingSet::default();
    let (mut tg, mut rnd) = (0usize, 0usize);
    for t in &traces {
        let (_, r) = traceguard_poison(t, &set, 3);
        let run = match_budget_random(t, &set, 3, 99);
        tg += r.removed_indices.len();
        rnd += run.report.removed_indices.len();
    }
    assert_eq!(tg, rnd);
    assert!(tg > 0);
}

#[test]
fn corpus_poisoning_matches_generator_truth() {
    let traces = synth::generate(&SynthConfig {
        traces: 100,
        seed: 23,
        ..Default::default()
    });
    for k in [0, 1, 2, 5, 50] {
        let config = PoisonConfig {
            method: PoisonMethod::Traceguard,
            k,
            markers: BranchingSet::default(),
            match_traceguard: false,
            seed: 0,
        };
        for ((_, report), trace) in poison_corpus(&traces, &config, 4)
            .unwrap()
            .iter()
            .zip(&traces)
        {
            let truth = SynthTruth::of(trace).unwrap();
            let (sentences, tokens) = truth.expected_removal(k);
            assert_eq!(report.removed_indices.len(), sentences);
            assert_eq!(report.removed_token_count, tokens);
        }
    }
}

#[test]
fn corpus_poisoning_is_thread_count_independent() {
    let traces = synth::generate(&SynthConfig {
        traces: 300,
        seed: 1,
        ..Default::default()
    });
    let config = PoisonConfig {
        method: PoisonMethod::Random,
        k: 4,
        markers: BranchingSet::default(),
        match_traceguard: true,
        seed: 77,
    };
    let one = poison_corpus(&traces, &config, 1).unwrap();
    let many = poison_corpus(&traces, &config, 8).unwrap();
    assert_eq!(one, many);
}
