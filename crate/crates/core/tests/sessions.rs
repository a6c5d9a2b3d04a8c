mod common;

use std::collections::{BTreeMap, BTreeSet};

use diffuse_core::oracle::{FnOracle, OracleError};
use diffuse_core::selection::ClusterOptions;
use diffuse_core::synth::{self, SynthConfig};
use diffuse_core::{
    pair_space, run_iterative, select_diffuse, DifferenceSpace, Outcome, Preference, SessionConfig, SessionEvent,
    SessionState, SessionStatus, SpaceMode,
};

fn pool(n: usize, pair: usize) -> (DifferenceSpace, BTreeMap<String, Preference>) {
    let corpus = synth::generate(&SynthConfig {
        pairs: pair + 1,
        pool: n,
        dim: 16,
        ..SynthConfig::default()
    });
    let p = &corpus.pairs[pair];
    let space = pair_space(
        &corpus.embeddings[&p.model_a],
        &corpus.embeddings[&p.model_b],
        SpaceMode::Subtract,
    )
    .unwrap();
    let labels = space
        .ids()
        .iter()
        .map(|id| {
            let a = corpus.scores.score(id, &p.model_a, "synthetic").unwrap();
            let b = corpus.scores.score(id, &p.model_b, "synthetic").unwrap();
            let l = if a > b {
                Preference::A
            } else if a < b {
                Preference::B
            } else {
                Preference::Tie
            };
            (id.clone(), l)
        })
        .collect();
    (space, labels)
}

fn answer(state: &SessionState, truth: &BTreeMap<String, Preference>) -> BTreeMap<String, Preference> {
    state.pending.iter().map(|id| (id.clone(), truth[id])).collect()
}

/// Drives `state` to the end with `truth`, returning the events emitted.
fn finish(
    space: &DifferenceSpace,
    state: &mut SessionState,
    truth: &BTreeMap<String, Preference>,
) -> Vec<SessionEvent> {
    let mut events = state.settle(space).unwrap();
    while !state.status.is_terminal() {
        let labels = answer(state, truth);
        events.extend(state.submit_labels(space, &labels).unwrap());
    }
    events
}

fn drive(
    space: &DifferenceSpace,
    config: SessionConfig,
    truth: &BTreeMap<String, Preference>,
) -> (SessionState, Vec<SessionEvent>) {
    let (mut state, mut events) = SessionState::start(space, config).unwrap();
    events.extend(finish(space, &mut state, truth));
    (state, events)
}

#[test]
fn unanimous_oracle_stops_after_five() {
    let (space, _) = pool(500, 0);
    let mut oracle = FnOracle(|_: &str| Ok::<_, OracleError>(Preference::A));
    let run = run_iterative(&space, SessionConfig::new(0.2, 5, 200), &mut oracle).unwrap();
    assert_eq!(run.outcome, Outcome::A);
    assert_eq!(run.annotated_count, 5);
    let product: f64 = (0..5).map(|i| (250.0 - i as f64) / (500.0 - i as f64)).product();
    assert!((run.state.current_risk - product).abs() < 1e-12);
}

#[test]
fn three_to_two_splits_once() {
    let (space, _) = pool(500, 0);
    let (mut state, _) = SessionState::start(&space, SessionConfig::new(0.05, 5, 200)).unwrap();
    let labels: BTreeMap<String, Preference> = state
        .pending
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), if i < 3 { Preference::A } else { Preference::B }))
        .collect();
    state.submit_labels(&space, &labels).unwrap();
    let exact = common::exact_sf(2, 500, 250, 5);
    assert!(exact > 0.05);
    assert_eq!(state.status, SessionStatus::AwaitingLabels);
    assert_eq!(state.k, 6);
    assert_eq!(state.pending.len(), 2);
    assert_eq!(state.annotated_count, 5);
}

#[test]
fn unreachable_threshold_exhausts_the_budget() {
    let (space, truth) = pool(300, 1);
    for b_max in [5, 6, 7, 40] {
        let (state, _) = drive(&space, SessionConfig::new(1e-9, 5, b_max), &truth);
        assert_eq!(state.status, SessionStatus::Inconclusive);
        assert!(state.annotated_count <= b_max);
        assert!(state.annotated_count + 2 > b_max);
    }
}

fn alternating() -> impl diffuse_core::Oracle {
    let mut t = 0usize;
    FnOracle(move |_: &str| {
        t += 1;
        Ok::<_, OracleError>(if t % 2 == 1 { Preference::A } else { Preference::B })
    })
}

#[test]
fn alternating_answers_never_decide_a_balanced_vote() {
    // when every answer votes, alternation keeps the vote balanced for good
    let (space, _) = pool(500, 2);
    let run = diffuse_core::iterative::run_iterative_random(
        space.ids(),
        &SessionConfig::new(0.2, 5, 200),
        &mut alternating(),
    )
    .unwrap();
    assert_eq!(run.outcome, Outcome::Inconclusive);
    assert!(run.annotated_count <= 200);

    // splits discard votes, so the voting set can drift; it must still never
    // stop while the two sides are within one vote of each other
    for pair in 0..6 {
        let (space, _) = pool(500, pair);
        let run = run_iterative(&space, SessionConfig::new(0.2, 5, 200), &mut alternating()).unwrap();
        assert!(run.annotated_count <= 200);
        let mut state = SessionState::replay(&space, &run.events[..1]).unwrap();
        for event in &run.events[1..] {
            let counts = state.decision_counts();
            let balanced = counts.a.abs_diff(counts.b) <= 1;
            let fully_labeled = counts.total() == state.k;
            if state.pending.is_empty() && fully_labeled && balanced && counts.a + counts.b > 0 {
                assert!(
                    state.current_risk >= 0.5 - 1e-12,
                    "pair {pair}: {counts:?} risk {}",
                    state.current_risk
                );
                assert!(
                    !matches!(event, SessionEvent::Concluded { .. }),
                    "pair {pair}: concluded on {counts:?}"
                );
            }
            state.apply(event).unwrap();
        }
        let all = diffuse_core::estimator::Counts::from_labels(state.annotations.values().copied());
        assert!(all.a.abs_diff(all.b) <= 1);
    }
}

#[test]
fn first_batch_is_the_diffuse_selection() {
    let (space, _) = pool(800, 0);
    for n_min in [1, 2, 5, 13] {
        let (state, _) = SessionState::start(&space, SessionConfig::new(0.2, n_min, 800)).unwrap();
        let plan = select_diffuse(&space, n_min, ClusterOptions::default(), 0).unwrap();
        assert_eq!(
            state.pending.iter().collect::<BTreeSet<_>>(),
            plan.selected.iter().collect::<BTreeSet<_>>()
        );
    }
    let (small, _) = pool(30, 0);
    let (state, _) = SessionState::start(&small, SessionConfig::new(0.2, 30, 30)).unwrap();
    assert_eq!(
        state.pending.iter().collect::<BTreeSet<_>>(),
        small.ids().iter().collect::<BTreeSet<_>>()
    );
}

#[test]
fn driver_and_manual_loop_agree() {
    for pair in 0..6 {
        let (space, truth) = pool(250, pair);
        let config = SessionConfig::new(0.1, 5, 120);
        let (manual, manual_events) = drive(&space, config.clone(), &truth);
        let mut oracle: std::collections::HashMap<String, Preference> = truth.clone().into_iter().collect();
        let run = run_iterative(&space, config, &mut oracle).unwrap();
        assert_eq!(run.events, manual_events, "pair {pair}");
        assert_eq!(run.state, manual);
    }
}

#[test]
fn replay_after_a_crash_at_every_event() {
    for pair in 0..4 {
        let (space, truth) = pool(200, pair);
        let config = SessionConfig::new(0.05, 5, 60);
        let (reference, events) = drive(&space, config, &truth);
        assert!(events.len() > 8, "pair {pair}: {} events", events.len());
        for cut in 1..=events.len() {
            let mut state = SessionState::replay(&space, &events[..cut]).unwrap();
            // labels received before the crash stay; the rest of the batch is asked again
            if let Some(SessionEvent::LabelReceived { .. }) = events.get(cut) {
                assert!(!state.pending.is_empty());
            }
            let tail = finish(&space, &mut state, &truth);
            assert_eq!(state, reference, "pair {pair}, cut {cut}");
            assert_eq!(&events[cut..], &tail[..], "pair {pair}, cut {cut}");
        }
    }
}

#[test]
fn every_reachable_state_keeps_its_invariants() {
    for pair in 0..8 {
        let (space, truth) = pool(300, pair);
        let b_max = 40;
        let (_, events) = drive(&space, SessionConfig::new(0.02, 5, b_max), &truth);
        let mut state = SessionState::replay(&space, &events[..1]).unwrap();
        let mut seen: BTreeMap<String, Preference> = BTreeMap::new();
        for event in &events[1..] {
            let k_before = state.k;
            let annotated_before = state.annotated_count;
            state.apply(event).unwrap();
            assert_eq!(state.clusters.len(), state.k);
            assert!(state.annotated_count <= b_max);
            assert_eq!(state.annotated_count, state.annotations.len());
            match event {
                SessionEvent::Split { .. } => {
                    assert_eq!(state.k, k_before + 1);
                    let decision: BTreeSet<String> = state.decision_set().into_iter().collect();
                    assert_eq!(decision.len(), state.k);
                }
                _ => assert_eq!(state.k, k_before),
            }
            if let SessionEvent::BatchIssued { ids } = event {
                assert!(ids.len() <= 2 || annotated_before == 0);
            }
            // an example's answer is recorded once and never re-keyed
            for (id, l) in &state.annotations {
                if let Some(prev) = seen.insert(id.clone(), *l) {
                    assert_eq!(prev, *l);
                }
            }
            assert_eq!(seen.len(), state.annotations.len());
        }
        assert!(state.status.is_terminal());
    }
}
