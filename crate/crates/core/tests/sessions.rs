mod support;

use rehearsal_core::engine::{
    check_invariants, plan_annotation, plan_followup, plan_reflection, post_teacher_turn, run_scripted_sessions,
    run_scripted_sessions_sequential, start_session, DegradingGenerator, EngineError, GeneratedResponse,
    GenerationRequest, ModelGenerator, ResponseGenerator, ScriptedGenerator, SessionConfig, SessionEvent, SessionRng,
    SessionSpec, SessionState, TeacherTurn,
};
use rehearsal_core::pedagogy::{
    suggest, CodeLabel, ForbiddenTerms, ModelSuggester, PedagogyError, ScriptedClassifier, ScriptedFeedback,
    ScriptedSuggester,
};
use rehearsal_core::provider::{CannedProvider, ProviderError};
use rehearsal_core::{EmojiState, Speaker, TrqfLabel};
use support::{fixture_index, random_context};

fn turn(text: &str) -> TeacherTurn {
    TeacherTurn { text: text.into(), ..Default::default() }
}

fn session(seed: u64) -> SessionState {
    start_session(&fixture_index(), random_context(seed), SessionConfig::default(), seed, format!("s{seed}")).unwrap()
}

#[test]
fn new_session_is_neutral_with_full_roster() {
    let s = session(1);
    assert_eq!(s.roster.len(), 20);
    assert!(s.transcript.is_empty());
    assert!(s.affect.values().all(|a| *a == EmojiState::Neutral));
    check_invariants(&s).unwrap();

    let cfg = SessionConfig { opening_problem: Some("What is 30% of 50?".into()), ..Default::default() };
    let s = start_session(&fixture_index(), random_context(1), cfg, 1, "x").unwrap();
    assert_eq!(s.transcript.len(), 1);
    assert!(s.transcript[0].speaker.is_teacher());
}

#[test]
fn same_seed_same_transcript_and_replay_reproduces() {
    let run = || {
        let mut s = session(9);
        let mut log = Vec::new();
        for q in support::FUZZ_QUESTIONS {
            log.extend(post_teacher_turn(&mut s, &turn(q), &ScriptedGenerator, &ScriptedClassifier).unwrap().events);
            check_invariants(&s).unwrap();
        }
        (s, log)
    };
    let (a, log) = run();
    let (b, _) = run();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

    let (replayed, dropped) = SessionState::replay(a.meta(), &log);
    assert_eq!(dropped, 0);
    assert_eq!(serde_json::to_string(&replayed).unwrap(), serde_json::to_string(&a).unwrap());

    // An exchange cut off before its commit marker is dropped on replay.
    let last_commit = log.iter().rposition(|e| matches!(e, SessionEvent::ExchangeCommitted { .. })).unwrap();
    let prev_commit = log[..last_commit].iter().rposition(|e| matches!(e, SessionEvent::ExchangeCommitted { .. })).unwrap();
    let (partial, dropped) = SessionState::replay(a.meta(), &log[..last_commit]);
    assert_eq!(dropped, last_commit - prev_commit - 1);
    let (clean, _) = SessionState::replay(a.meta(), &log[..=prev_commit]);
    assert_eq!(partial, clean);

    // Continuing the replayed session draws the same numbers as the original.
    let mut cont = clean.clone();
    post_teacher_turn(&mut cont, &turn(support::FUZZ_QUESTIONS.last().unwrap()), &ScriptedGenerator, &ScriptedClassifier)
        .unwrap();
    assert_eq!(cont.transcript, a.transcript);
}

#[test]
fn turns_are_labelled_and_attributed() {
    let mut s = session(2);
    post_teacher_turn(&mut s, &turn("Why did you multiply by 0.3 instead of 30 or 3?"), &ScriptedGenerator, &ScriptedClassifier)
        .unwrap();
    assert_eq!(s.transcript[0].trqf_labels.as_slice(), [TrqfLabel::Teleological]);
    let students: Vec<_> = s.transcript.iter().filter(|t| !t.speaker.is_teacher()).collect();
    assert!((1..=4).contains(&students.len()));
    for t in students {
        assert!(t.affect.is_some());
        assert!(t.trqf_labels.is_empty());
        let id = t.speaker.student_id().unwrap();
        assert_eq!(s.affect[id], t.affect.unwrap());
    }
}

#[test]
fn addressing_and_respondent_bounds() {
    let mut s = session(3);
    let target = s.roster[7].profile.profile_id.clone();
    let t = TeacherTurn { text: "What do you think?".into(), addressed: Some(target.clone()), max_respondents: None };
    post_teacher_turn(&mut s, &t, &ScriptedGenerator, &ScriptedClassifier).unwrap();
    assert_eq!(s.transcript.len(), 2);
    assert_eq!(s.transcript[1].speaker, Speaker::Student(target));

    let bad = TeacherTurn { text: "Hi?".into(), addressed: Some("nobody".into()), max_respondents: None };
    assert!(matches!(post_teacher_turn(&mut s, &bad, &ScriptedGenerator, &ScriptedClassifier), Err(EngineError::UnknownStudent(_))));
    let zero = TeacherTurn { text: "Hi?".into(), addressed: None, max_respondents: Some(0) };
    assert!(matches!(post_teacher_turn(&mut s, &zero, &ScriptedGenerator, &ScriptedClassifier), Err(EngineError::InvalidMaxRespondents)));
    assert!(matches!(post_teacher_turn(&mut s, &turn("   "), &ScriptedGenerator, &ScriptedClassifier), Err(EngineError::EmptyText)));
    assert_eq!(s.transcript.len(), 2);

    for _ in 0..10 {
        let before = s.transcript.len();
        let one = TeacherTurn { text: "Anyone?".into(), addressed: None, max_respondents: Some(1) };
        post_teacher_turn(&mut s, &one, &ScriptedGenerator, &ScriptedClassifier).unwrap();
        assert_eq!(s.transcript.len(), before + 2);
    }
}

struct FailsAfter(std::sync::atomic::AtomicUsize);

impl ResponseGenerator for FailsAfter {
    fn respond(&self, req: &GenerationRequest<'_>, rng: &mut SessionRng) -> Result<GeneratedResponse, EngineError> {
        if self.0.fetch_sub(1, std::sync::atomic::Ordering::SeqCst) == 0 {
            return Err(PedagogyError::GeneratorFailure("boom".into()).into());
        }
        ScriptedGenerator.respond(req, rng)
    }
}

#[test]
fn failed_exchange_leaves_state_untouched() {
    let mut s = session(4);
    let before = s.clone();
    let t = TeacherTurn { text: "Who can explain?".into(), addressed: None, max_respondents: Some(4) };
    let gen = FailsAfter(std::sync::atomic::AtomicUsize::new(0));
    assert!(post_teacher_turn(&mut s, &t, &gen, &ScriptedClassifier).is_err());
    assert_eq!(s, before);
}

#[test]
fn model_generator_coerces_bad_affect_and_degrades_on_failure() {
    let mut s = session(5);
    let target = s.roster[0].profile.profile_id.clone();
    let t = TeacherTurn { text: "How do you know?".into(), addressed: Some(target), max_respondents: None };

    let provider = CannedProvider::new([r#"{"text": "Because 4 times 3 is 12.", "affect": "Ecstatic"}"#]);
    let plan = post_teacher_turn(&mut s, &t, &ModelGenerator::new(&provider), &ScriptedClassifier).unwrap();
    assert!(!plan.degraded);
    assert_eq!(s.transcript[1].affect, Some(EmojiState::Neutral));
    assert_eq!(s.transcript[1].text, "Because 4 times 3 is 12.");

    let failing = CannedProvider::new(Vec::<String>::new());
    failing.push_error(ProviderError::Timeout);
    let gen = DegradingGenerator::new(ModelGenerator::new(&failing));
    let plan = post_teacher_turn(&mut s, &t, &gen, &ScriptedClassifier).unwrap();
    assert!(plan.degraded);
    check_invariants(&s).unwrap();
}

#[test]
fn suggestions_follow_the_contract() {
    let forbidden = ForbiddenTerms::default();
    let mut s = session(6);
    assert_eq!(suggest(&s, &ScriptedClassifier, &ScriptedSuggester, &forbidden), Err(PedagogyError::NoTeacherTurn));
    for q in support::FUZZ_QUESTIONS {
        post_teacher_turn(&mut s, &turn(q), &ScriptedGenerator, &ScriptedClassifier).unwrap();
        let sug = suggest(&s, &ScriptedClassifier, &ScriptedSuggester, &forbidden).unwrap();
        assert!(sug.shape_violations().is_empty(), "{sug:?}");
        assert!(forbidden.find_in(&sug.reasoning).is_empty());
    }
}

#[test]
fn model_suggester_repairs_once_then_gives_up() {
    let forbidden = ForbiddenTerms::default();
    let mut s = session(7);
    post_teacher_turn(&mut s, &turn("How do you know?"), &ScriptedGenerator, &ScriptedClassifier).unwrap();

    let good = r#"{"reasoning": "Ask for evidence.", "recommended_questions": ["How do you know?", "What shows it?"]}"#;
    let leaky = r#"{"reasoning": "Ask for a warrant.", "recommended_questions": ["Why?", "What shows it?"]}"#;
    let provider = CannedProvider::new([leaky, good]);
    let sug = suggest(&s, &ScriptedClassifier, &ModelSuggester::new(&provider), &forbidden).unwrap();
    assert_eq!(sug.reasoning, "Ask for evidence.");
    assert!(provider.requests()[1].user.contains("forbidden term"));

    let two_questions = r#"{"reasoning": "Ask. Then ask again.", "recommended_questions": ["Why?", "How"]}"#;
    let provider = CannedProvider::new([leaky, two_questions]);
    match suggest(&s, &ScriptedClassifier, &ModelSuggester::new(&provider), &forbidden) {
        Err(PedagogyError::FormatViolation(v)) => assert!(!v.is_empty()),
        other => panic!("expected a format violation, got {other:?}"),
    }
}

#[test]
fn annotation_reflection_and_followups() {
    let mut s = session(8);
    for q in &support::FUZZ_QUESTIONS[..5] {
        post_teacher_turn(&mut s, &turn(q), &ScriptedGenerator, &ScriptedClassifier).unwrap();
    }
    assert!(matches!(plan_reflection(&s, "I asked mostly recall questions.", &ScriptedFeedback), Err(EngineError::Pedagogy(PedagogyError::NoAnnotations))));

    let e = plan_annotation(&s, 1, &[CodeLabel::Trqf(TrqfLabel::Epistemic)], &ScriptedClassifier).unwrap();
    s.apply(&e);
    assert!(matches!(plan_annotation(&s, 999, &[], &ScriptedClassifier), Err(EngineError::Pedagogy(PedagogyError::UnknownTurn(999)))));

    assert!(matches!(plan_reflection(&s, "  ", &ScriptedFeedback), Err(EngineError::Pedagogy(PedagogyError::EmptyReflection))));
    assert!(matches!(plan_followup(&s, "Why?", &ScriptedFeedback), Err(EngineError::NoFeedback)));
    let e = plan_reflection(&s, "I asked mostly recall questions.", &ScriptedFeedback).unwrap();
    s.apply(&e);
    let report = s.feedback.clone().unwrap();
    assert!(report.suggestions.len() >= 2);
    for sug in &report.suggestions {
        assert!(!sug.turn_ids.is_empty());
        assert!(sug.turn_ids.iter().all(|id| s.turn(*id).is_some()));
    }
    assert_eq!(report.annotation_accuracy.annotated, 1);

    let e = plan_followup(&s, "How many Teleological questions did I ask?", &ScriptedFeedback).unwrap();
    s.apply(&e);
    assert!(s.followups[0].answer.contains("Teleological"));
}

#[test]
fn batch_runner_modes_agree() {
    let index = fixture_index();
    let specs: Vec<SessionSpec> = (0..8).map(|seed| SessionSpec { context: random_context(seed), seed }).collect();
    let script: Vec<TeacherTurn> = support::FUZZ_QUESTIONS.iter().map(|q| turn(q)).collect();
    let par: Vec<_> = run_scripted_sessions(&index, &specs, &script).into_iter().map(Result::unwrap).collect();
    let seq: Vec<_> = run_scripted_sessions_sequential(&index, &specs, &script).into_iter().map(Result::unwrap).collect();
    assert_eq!(par, seq);
}

#[test]
#[ignore]
fn print_sample_transcript() {
    let mut s = session(11);
    for q in support::FUZZ_QUESTIONS {
        post_teacher_turn(&mut s, &turn(q), &ScriptedGenerator, &ScriptedClassifier).unwrap();
    }
    for t in &s.transcript {
        eprintln!("{:>3} {:?} {:?} {:?}{:?} {}", t.turn_id, t.speaker, t.affect, t.trqf_labels.as_slice(), t.toulmin_labels.as_slice(), t.text);
    }
}
