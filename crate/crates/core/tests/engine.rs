use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use segloop_core::data::{synthesize_case, SynthConfig};
use segloop_core::engine::{correction_weights, read_journal, replay, JournalRecord};
use segloop_core::{
    AnnotatedCase, BinaryMask, Error, InteractionEvent, Model, ModelConfig, Polarity, Session, SessionConfig,
    SessionMode, SessionStatus,
};

fn model() -> Arc<Model> {
    static M: OnceLock<Arc<Model>> = OnceLock::new();
    M.get_or_init(|| Arc::new(Model::init(ModelConfig::compact()).unwrap())).clone()
}

fn case(i: usize) -> AnnotatedCase {
    synthesize_case(&SynthConfig::default(), i).unwrap()
}

fn session(mode: SessionMode, seed: u64) -> Session {
    let m = model();
    let cfg = SessionConfig { seed, ..SessionConfig::for_model(&m) };
    Session::create("s", m, case(0).image().clone(), cfg, mode).unwrap()
}

fn click(s: &Session, row: usize, col: usize) -> InteractionEvent {
    InteractionEvent::click(s.iteration(), row, col, Polarity::Foreground)
}

#[test]
fn fresh_session_has_candidates_and_shapes() {
    let s = session(SessionMode::Adaptive, 1);
    assert_eq!(s.iteration(), 0);
    assert_eq!(s.status(), SessionStatus::Active);
    let last = s.last().unwrap();
    assert_eq!(last.ensemble.len(), s.config().n_samples);
    assert_eq!(last.candidates.len(), s.config().k_candidates);
    assert_eq!(s.remaining(), s.config().max_iterations);
}

#[test]
fn equal_seeds_give_identical_sessions() {
    let a = session(SessionMode::Adaptive, 7);
    let b = session(SessionMode::Adaptive, 7);
    assert_eq!(a.last(), b.last());
    let c = session(SessionMode::Adaptive, 8);
    assert_ne!(a.last().unwrap().ensemble, c.last().unwrap().ensemble);
}

#[test]
fn too_few_samples_for_the_candidates_is_rejected() {
    let m = model();
    let cfg = SessionConfig { n_samples: 2, k_candidates: 3, ..SessionConfig::for_model(&m) };
    let err = Session::create("s", m, case(0).image().clone(), cfg, SessionMode::Frozen).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn frozen_mode_keeps_the_space() {
    let mut s = session(SessionMode::Frozen, 2);
    let initial = serde_json::to_string(s.space()).unwrap();
    let params = s.sampling_params().clone();
    for k in 0..4 {
        let ev = if k % 2 == 0 { InteractionEvent::selection(s.iteration(), k % 3) } else { click(&s, 30, 30) };
        let res = s.apply_selection(ev).unwrap();
        assert_eq!(res.ensemble.len(), s.config().n_samples);
        assert_eq!(res.candidates.len(), s.config().k_candidates);
        assert_eq!(serde_json::to_string(s.space()).unwrap(), initial);
    }
    assert_eq!(s.sampling_params(), &params);
    assert_eq!(s.history().len(), 4);
}

#[test]
fn adaptive_mode_changes_only_the_sampling_groups() {
    let mut s = session(SessionMode::Adaptive, 3);
    let seg = s.model().seg.checksum();
    let mvp0 = s.sampling_params().mvp.checksum();
    let initial = s.space().clone();
    for k in 0..3 {
        s.apply_selection(InteractionEvent::selection(s.iteration(), k)).unwrap();
        assert_eq!(s.model().seg.checksum(), seg);
    }
    assert_ne!(s.sampling_params().mvp.checksum(), mvp0);
    assert_ne!(s.space(), &initial);
    assert_eq!(s.initial_space(), &initial);
    // the shared model is untouched
    assert_eq!(model().sampling.mvp.checksum(), mvp0);
}

#[test]
fn sessions_do_not_share_sampling_parameters() {
    let mut a = session(SessionMode::Adaptive, 4);
    let b = session(SessionMode::Adaptive, 4);
    let before = b.space().clone();
    for k in 0..3 {
        a.apply_selection(InteractionEvent::selection(a.iteration(), k)).unwrap();
    }
    assert_ne!(a.space(), &before);
    assert_eq!(b.space(), &before);
}

#[test]
fn iteration_cap_expires_the_session() {
    let mut s = session(SessionMode::Adaptive, 5);
    let cap = s.config().max_iterations;
    for _ in 0..cap {
        s.apply_selection(InteractionEvent::selection(s.iteration(), 0)).unwrap();
    }
    assert_eq!(s.iteration(), cap);
    assert_eq!(s.status(), SessionStatus::Expired);
    assert_eq!(s.remaining(), 0);
    let err = s.apply_selection(InteractionEvent::selection(cap, 0)).unwrap_err();
    assert!(matches!(err, Error::SessionClosed(SessionStatus::Expired)), "{err}");
    // the last soft mask is final
    let fused = s.last_soft().unwrap().binarized().clone();
    assert_eq!(s.accept().unwrap(), fused);
}

#[test]
fn accept_is_idempotent_and_closes_the_session() {
    let mut s = session(SessionMode::Frozen, 6);
    let first = s.last_soft().unwrap().binarized().clone();
    assert_eq!(s.accept().unwrap(), first);
    assert_eq!(s.accept().unwrap(), first);
    assert_eq!(s.status(), SessionStatus::Accepted);
    let err = s.apply_selection(InteractionEvent::selection(0, 0)).unwrap_err();
    assert!(matches!(err, Error::SessionClosed(SessionStatus::Accepted)));
}

#[test]
fn malformed_events_are_rejected_without_side_effects() {
    let mut s = session(SessionMode::Adaptive, 9);
    let before = s.space().clone();
    for ev in [
        InteractionEvent::selection(0, 3),
        InteractionEvent::selection(1, 0),
        InteractionEvent::click(0, 64, 0, Polarity::Background),
        InteractionEvent::click(0, 0, 99, Polarity::Foreground),
    ] {
        assert!(s.apply_selection(ev).is_err());
    }
    assert_eq!(s.iteration(), 0);
    assert!(s.history().is_empty());
    assert_eq!(s.space(), &before);
    assert_eq!(s.status(), SessionStatus::Active);
}

#[test]
fn repeated_predict_is_deterministic() {
    let mut s = session(SessionMode::Adaptive, 10);
    let a = s.step_predict().unwrap();
    let b = s.step_predict().unwrap();
    assert_eq!(a, b);
    assert_eq!(s.last(), Some(&b));
}

#[test]
fn held_samples_reuse_the_first_draws() {
    let m = model();
    let cfg = SessionConfig { hold_samples: true, seed: 11, ..SessionConfig::for_model(&m) };
    let mut s = Session::create("h", m, case(1).image().clone(), cfg, SessionMode::Frozen).unwrap();
    let draws = s.held_draws().to_vec();
    s.apply_selection(InteractionEvent::selection(0, 1)).unwrap();
    assert_eq!(s.held_draws(), draws.as_slice());
}

#[test]
fn journal_replay_reproduces_the_session() {
    let mut live = session(SessionMode::Adaptive, 12);
    let mut journal = Vec::new();
    JournalRecord::header(&live, Some("abc".into())).write_line(&mut journal).unwrap();
    for ev in [
        InteractionEvent::selection(0, 2),
        InteractionEvent::click(1, 20, 40, Polarity::Background),
        InteractionEvent::click(2, 33, 31, Polarity::Foreground),
    ] {
        JournalRecord::Event { event: ev.clone() }.write_line(&mut journal).unwrap();
        live.apply_selection(ev).unwrap();
    }
    JournalRecord::Accept.write_line(&mut journal).unwrap();
    let mask = live.accept().unwrap();

    let records = read_journal(journal.as_slice()).unwrap();
    assert_eq!(records.len(), 5);
    let mut again = replay(model(), &records).unwrap();
    assert_eq!(again.status(), SessionStatus::Accepted);
    assert_eq!(again.accept().unwrap(), mask);
    assert_eq!(again.space(), live.space());
    assert_eq!(again.sampling_params(), live.sampling_params());
}

#[test]
fn journals_must_start_with_a_header() {
    let line = serde_json::to_string(&JournalRecord::Accept).unwrap();
    assert!(read_journal(line.as_bytes()).is_err());
    assert!(read_journal(&b"not json\n"[..]).is_err());
}

#[test]
fn correction_weights_examples() {
    let fused = BinaryMask::from_fn(16, 16, |r, c| r < 8 && c < 8);
    let target = BinaryMask::from_fn(16, 16, |r, c| r < 8 && c < 10);
    let w = correction_weights(&target, &fused, None, 2.0);
    assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 16);
    assert_eq!(w.iter().filter(|&&v| v == 0.0).count(), 240);
    // a click at (0, 8) weights its own pixel fully and fades with distance
    let w = correction_weights(&target, &fused, Some((0, 8)), 2.0);
    assert_eq!(w[8], 1.0);
    assert!((w[16 + 9] - (-2.0f64 / 8.0).exp()).abs() < 1e-15);
    // beyond 3σ the weight is exactly zero
    assert_eq!(w[7 * 16 + 9], 0.0);
}

proptest! {
    #[test]
    fn correction_weights_vanish_where_target_agrees(
        a in proptest::collection::vec(0u8..2, 256),
        b in proptest::collection::vec(0u8..2, 256),
        focus in proptest::option::of((0usize..16, 0usize..16)),
        sigma in 0.5f64..20.0,
    ) {
        let target = BinaryMask::new(16, 16, a).unwrap();
        let fused = BinaryMask::new(16, 16, b).unwrap();
        let w = correction_weights(&target, &fused, focus, sigma);
        for (i, v) in w.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(v));
            if target.data()[i] == fused.data()[i] {
                prop_assert_eq!(*v, 0.0);
            } else if focus.is_none() {
                prop_assert_eq!(*v, 1.0);
            }
        }
    }
}
