//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p rehearsal-service --test acceptance`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehearsal_core::engine::{
    check_invariants, post_teacher_turn, start_session, ScriptedGenerator, SessionConfig, SessionState, TeacherTurn,
};
use rehearsal_core::ingest::ProfileDataset;
use rehearsal_core::metrics::{aggregate, normalized_evenness, ReportRow, TOULMIN_CATEGORIES, TRQF_CATEGORIES};
use rehearsal_core::pedagogy::{
    parse_gold_corpus, score_gold, suggest, suggestion_violations, ForbiddenTerms, ModelSuggester, PedagogyError,
    ScriptedClassifier, ScriptedSuggester,
};
use rehearsal_core::provider::CannedProvider;
use rehearsal_core::retrieval::{
    score_all, select_from_candidates, select_roster, Candidate, SelectionOptions, TaxonomicScorer,
};
use rehearsal_core::{Ordinal, Speaker};
use serde_json::{json, Value};
use support::{
    core_fixtures, fixture_index, oracle_evenness, oracle_score, oracle_select_greedy, random_context, round2, snap,
    table1, OracleCandidate, FUZZ_QUESTIONS,
};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn table1_reproduction() -> Outcome {
    let started = Instant::now();
    let t = table1();
    let mut notes = Vec::new();
    for (name, rows, reported) in [
        ("baseline", &t.baseline, (76, 49, 177, 0.96, 0.75)),
        ("simulator", &t.simulator, (89, 68, 235, 0.99, 0.85)),
    ] {
        let c = aggregate(rows.iter().map(|r: &ReportRow| &r.counts)).counts();
        ensure!(c.n_student_responses == reported.0, "{name}: N {} != {}", c.n_student_responses, reported.0);
        ensure!(c.trqf_total() == reported.1, "{name}: TRQF total {} != {}", c.trqf_total(), reported.1);
        ensure!(c.toulmin_total() == reported.2, "{name}: Toulmin total {} != {}", c.toulmin_total(), reported.2);
        let trqf = normalized_evenness(&c.trqf, TRQF_CATEGORIES).map_err(|e| e.to_string())?;
        let toulmin = normalized_evenness(&c.toulmin, TOULMIN_CATEGORIES).map_err(|e| e.to_string())?;
        ensure!((trqf - oracle_evenness(&c.trqf, 3).unwrap()).abs() < 1e-12, "{name}: TRQF evenness disagrees with oracle");
        ensure!((toulmin - oracle_evenness(&c.toulmin, 6).unwrap()).abs() < 1e-12, "{name}: Toulmin evenness disagrees with oracle");
        ensure!((round2(trqf) - reported.3).abs() <= 0.005, "{name}: TRQF evenness {trqf:.4}");
        ensure!((round2(toulmin) - reported.4).abs() <= 0.005, "{name}: Toulmin evenness {toulmin:.4}");
        notes.push(format!("{name} N={} H={:.2}/{:.2}", c.n_student_responses, trqf, toulmin));
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(notes.join(", "))
}

fn evenness_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for case in 0..1000 {
        let k = rng.random_range(2..=12);
        let mut v: Vec<u64> = (0..k).map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(1..500) }).collect();
        if v.iter().all(|c| *c == 0) {
            v[0] = 1;
        }
        let h = normalized_evenness(&v, k).map_err(|e| format!("case {case}: {e}"))?;
        ensure!((0.0..=1.0).contains(&h), "case {case}: {h} out of bounds for {v:?}");
        ensure!((h - oracle_evenness(&v, k).unwrap()).abs() < 1e-12, "case {case}: oracle mismatch for {v:?}");

        let mut shuffled = v.clone();
        shuffled.shuffle(&mut rng);
        let hp = normalized_evenness(&shuffled, k).unwrap();
        ensure!((h - hp).abs() < 1e-12, "case {case}: permutation changed {h} to {hp}");

        let c = rng.random_range(2..=1000);
        let scaled: Vec<u64> = v.iter().map(|x| x * c).collect();
        let hs = normalized_evenness(&scaled, k).unwrap();
        ensure!((h - hs).abs() <= 1e-12, "case {case}: scaling by {c} changed {h} to {hs}");

        let level = rng.random_range(1..100);
        let u = normalized_evenness(&vec![level; k], k).unwrap();
        ensure!((u - 1.0).abs() < 1e-12, "case {case}: uniform gave {u}");

        let mut one = vec![0; k];
        one[rng.random_range(0..k)] = level;
        ensure!(normalized_evenness(&one, k).unwrap() == 0.0, "case {case}: degenerate vector not 0");
    }
    ensure!(normalized_evenness(&[0, 0, 0], 3).is_err(), "empty vector should be rejected");
    Ok("1000 vectors".into())
}

fn retrieval_oracle() -> Outcome {
    let index = fixture_index();
    ensure!(index.len() == 30, "index has {} profiles", index.len());
    for seed in 0..10 {
        let ctx = random_context(seed);
        let scores = score_all(&index, &ctx, &TaxonomicScorer);
        let mut oracle = Vec::new();
        for (p, s) in index.profiles().iter().zip(&scores) {
            let o = oracle_score(p, ctx.distilled());
            ensure!((s - o).abs() < 1e-9, "context {seed}: {} scored {s} vs {o}", p.profile_id);
            oracle.push(OracleCandidate { id: p.profile_id.clone(), stratum: p.engagement.rank() - 1, score: snap(o) });
        }
        let got = select_roster(&index, &ctx, SelectionOptions::default(), seed).map_err(|e| e.to_string())?;
        ensure!(got.members == oracle_select_greedy(&oracle, 20), "context {seed}: roster differs from oracle");
        let again = select_roster(&index, &ctx, SelectionOptions::default(), seed).map_err(|e| e.to_string())?;
        ensure!(
            serde_json::to_vec(&got).unwrap() == serde_json::to_vec(&again).unwrap(),
            "context {seed}: repeated selection differs"
        );

        let cands: Vec<Candidate> = index
            .profiles()
            .iter()
            .zip(&scores)
            .map(|(p, s)| Candidate { profile_id: p.profile_id.clone(), engagement: p.engagement, score: *s })
            .collect();
        for member in &got.members {
            let mut boosted = cands.clone();
            let c = boosted.iter_mut().find(|c| &c.profile_id == member).unwrap();
            c.score = (c.score + 0.1).min(1.0);
            let sel = select_from_candidates(&boosted, 20).map_err(|e| e.to_string())?;
            ensure!(sel.members.contains(member), "context {seed}: boosting {member} dropped it");
        }
    }
    Ok("30 profiles x 10 contexts".into())
}

fn fuzz_one(seed: u64, index: &rehearsal_core::retrieval::ProfileIndex, forbidden: &ForbiddenTerms) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turns = rng.random_range(1..=20);
    let mut script = Vec::new();
    let mut state = start_session(index, random_context(seed), SessionConfig::default(), seed, format!("fuzz{seed}"))
        .map_err(|e| e.to_string())?;
    for _ in 0..turns {
        let addressed = rng.random_bool(0.2).then(|| state.roster[rng.random_range(0..state.roster.len())].profile.profile_id.clone());
        let max_respondents = rng.random_bool(0.3).then(|| rng.random_range(1..=6));
        script.push(TeacherTurn { text: FUZZ_QUESTIONS[rng.random_range(0..FUZZ_QUESTIONS.len())].into(), addressed, max_respondents });
    }

    let run = |state: &mut SessionState| -> Result<Vec<_>, String> {
        let mut log = Vec::new();
        for t in &script {
            let before = state.transcript.len();
            let plan = post_teacher_turn(state, t, &ScriptedGenerator, &ScriptedClassifier).map_err(|e| e.to_string())?;
            log.extend(plan.events);
            check_invariants(state).map_err(|e| format!("session {seed}: {e}"))?;
            for turn in &state.transcript[before + 1..] {
                let Speaker::Student(id) = &turn.speaker else { return Err(format!("session {seed}: extra teacher turn")) };
                ensure!(state.roster.iter().any(|m| &m.profile.profile_id == id), "session {seed}: {id} not on roster");
                ensure!(turn.affect.is_some(), "session {seed}: student turn without affect");
                ensure!(state.affect.get(id) == turn.affect.as_ref(), "session {seed}: affect map out of sync");
                if let Some(target) = &t.addressed {
                    ensure!(id == target, "session {seed}: addressed {target} but {id} answered");
                }
            }
            let n = state.transcript.len() - before - 1;
            ensure!(n >= 1 && n <= t.max_respondents.unwrap_or(4), "session {seed}: {n} respondents");

            let sug = suggest(state, &ScriptedClassifier, &ScriptedSuggester, forbidden).map_err(|e| e.to_string())?;
            let v = suggestion_violations(&sug, forbidden);
            ensure!(v.is_empty(), "session {seed}: suggestion violations {v:?}");
        }
        Ok(log)
    };
    let initial = state.clone();
    let log = run(&mut state)?;
    let mut second = initial;
    run(&mut second)?;
    ensure!(
        serde_json::to_vec(&state).unwrap() == serde_json::to_vec(&second).unwrap(),
        "session {seed}: rerun differs"
    );
    let (replayed, dropped) = SessionState::replay(state.meta(), &log);
    ensure!(dropped == 0 && replayed == state, "session {seed}: replay differs");

    // A model suggester that only ever proposes forbidden wording must be refused.
    let leaky = r#"{"reasoning": "Push on the warrant.", "recommended_questions": ["Why?", "What backing do you have?"]}"#;
    let provider = CannedProvider::new([leaky, leaky]);
    match suggest(&state, &ScriptedClassifier, &ModelSuggester::new(&provider), forbidden) {
        Err(PedagogyError::FormatViolation(_)) => Ok(()),
        other => Err(format!("session {seed}: leaky suggestion not refused: {other:?}")),
    }
}

fn simulation_fuzz() -> Outcome {
    let started = Instant::now();
    let index = fixture_index();
    let forbidden = ForbiddenTerms::default();
    for seed in 0..200 {
        fuzz_one(seed, &index, &forbidden)?;
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("200 sessions in {:.1}s", elapsed.as_secs_f64()))
}

fn gold_corpus() -> Outcome {
    let text = std::fs::read_to_string(core_fixtures().join("gold_corpus.jsonl")).map_err(|e| e.to_string())?;
    let items = parse_gold_corpus(&text).map_err(|e| e.to_string())?;
    let score = score_gold(&items, &ScriptedClassifier).map_err(|e| e.to_string())?;
    let rate = score.exact_rate();
    ensure!(rate >= 0.9, "exact agreement {rate:.3} on {} items", items.len());
    Ok(format!("{:.1}% exact on {} items", rate * 100.0, items.len()))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rehearsal")
}

fn ingest(lessons: &Path, out: &Path) -> Result<Vec<u8>, String> {
    let status = Command::new(bin())
        .args(["ingest", "--extractor", "scripted", "--seed", "7", "--in"])
        .arg(lessons)
        .arg("--out")
        .arg(out)
        .stderr(Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "ingest exited with {status}");
    std::fs::read(out).map_err(|e| e.to_string())
}

fn ingestion_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let lessons = core_fixtures().join("lessons");
    let a = ingest(&lessons, &dir.path().join("a.jsonl"))?;
    let b = ingest(&lessons, &dir.path().join("b.jsonl"))?;
    ensure!(a == b, "two ingest runs differ");
    let text = String::from_utf8(a).map_err(|e| e.to_string())?;
    let dataset = ProfileDataset::from_jsonl(&text).map_err(|e| e.to_string())?;
    for p in dataset.profiles() {
        p.validate().map_err(|e| e.to_string())?;
    }
    Ok(format!("{} profiles, byte-identical", dataset.len()))
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(profiles: &Path, data: &Path) -> Result<Self, String> {
        let mut child = Command::new(bin())
            .args(["serve", "--backend", "scripted", "--port", "0", "--profiles"])
            .arg(profiles)
            .arg("--data-dir")
            .arg(data)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
        let base = line.trim().strip_prefix("listening on ").map(String::from);
        match base {
            Some(base) => Ok(Server { child, base }),
            None => {
                let _ = child.kill();
                Err(format!("unexpected startup line {line:?}"))
            }
        }
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct Client {
    http: reqwest::blocking::Client,
    base: String,
}

impl Client {
    fn call(&self, method: &str, path: &str, body: Option<Value>) -> Result<(Value, Vec<u8>), String> {
        let url = format!("{}{path}", self.base);
        let req = match method {
            "GET" => self.http.get(&url),
            _ => self.http.post(&url).json(&body.unwrap_or(Value::Null)),
        };
        let resp = req.send().map_err(|e| format!("{method} {path}: {e}"))?;
        let status = resp.status();
        let bytes = resp.bytes().map_err(|e| e.to_string())?.to_vec();
        ensure!(status.is_success(), "{method} {path} returned {status}: {}", String::from_utf8_lossy(&bytes));
        let v = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        Ok((v, bytes))
    }
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let profiles = dir.path().join("profiles.jsonl");
    ingest(&core_fixtures().join("lessons"), &profiles)?;
    let data = dir.path().join("data");
    let server = Server::start(&profiles, &data)?;
    let http = reqwest::blocking::Client::builder().timeout(Duration::from_secs(10)).build().map_err(|e| e.to_string())?;
    let client = Client { http, base: server.base.clone() };

    client.call("GET", "/healthz", None)?;
    let context = json!({"grade_level": 6, "math_topic": "percent of a number", "class_description": "Talkative but rarely justify."});
    let (created, _) = client.call("POST", "/sessions", Some(json!({"context": context, "seed": 42})))?;
    let id = created["session_id"].as_str().ok_or("no session id")?.to_string();
    for q in &FUZZ_QUESTIONS[..5] {
        client.call("POST", &format!("/sessions/{id}/turns"), Some(json!({"text": q})))?;
    }
    let (sug, _) = client.call("GET", &format!("/sessions/{id}/suggestion"), None)?;
    ensure!(sug["recommended_questions"].as_array().map(Vec::len) == Some(2), "suggestion shape {sug}");

    let (t, _) = client.call("GET", &format!("/sessions/{id}/transcript"), None)?;
    let turns = t["transcript"].as_array().ok_or("no transcript")?;
    let teacher_ids: Vec<u64> =
        turns.iter().filter(|t| t["speaker"] == "Teacher").filter_map(|t| t["turn_id"].as_u64()).collect();
    ensure!(teacher_ids.len() == 5, "expected 5 teacher turns, got {}", teacher_ids.len());
    for turn_id in &teacher_ids[..4] {
        client.call("POST", &format!("/sessions/{id}/annotations"), Some(json!({"turn_id": turn_id, "labels": ["Epistemic"]})))?;
    }
    let (report, _) =
        client.call("POST", &format!("/sessions/{id}/reflection"), Some(json!({"self_reflection": "I asked why but rarely followed up."})))?;
    ensure!(report["suggestions"].as_array().map(Vec::len).unwrap_or(0) >= 2, "feedback {report}");
    let (metrics, _) = client.call("GET", &format!("/sessions/{id}/metrics"), None)?;
    ensure!(metrics["annotation_accuracy"]["annotated"] == 4, "metrics {metrics}");

    // Crash mid-session, restart on the same data directory and compare.
    let (_, before) = client.call("GET", &format!("/sessions/{id}/transcript"), None)?;
    server.kill();
    let server = Server::start(&profiles, &data)?;
    let client = Client { base: server.base.clone(), ..client };
    let (_, after) = client.call("GET", &format!("/sessions/{id}/transcript"), None)?;
    ensure!(before == after, "transcript changed across restart");

    // Continuing after recovery matches a session that never crashed.
    let fresh = |c: &Client| -> Result<String, String> {
        let (s, _) = c.call("POST", "/sessions", Some(json!({"context": context, "seed": 9})))?;
        s["session_id"].as_str().map(String::from).ok_or_else(|| "no session id".to_string())
    };
    let a = fresh(&client)?;
    let b = fresh(&client)?;
    for q in &FUZZ_QUESTIONS[..3] {
        for s in [&a, &b] {
            client.call("POST", &format!("/sessions/{s}/turns"), Some(json!({"text": q})))?;
        }
    }
    server.kill();
    let server = Server::start(&profiles, &data)?;
    let client = Client { base: server.base.clone(), ..client };
    for q in &FUZZ_QUESTIONS[3..6] {
        for s in [&a, &b] {
            client.call("POST", &format!("/sessions/{s}/turns"), Some(json!({"text": q})))?;
        }
    }
    let (ta, _) = client.call("GET", &format!("/sessions/{a}/transcript"), None)?;
    let (tb, _) = client.call("GET", &format!("/sessions/{b}/transcript"), None)?;
    ensure!(ta["transcript"] == tb["transcript"], "same-seed sessions diverged after recovery");
    drop(server);
    Ok("all calls 2xx, transcript identical after restart".into())
}

fn main() {
    let checks: [Check; 7] = [
        ("table reproduction", table1_reproduction),
        ("evenness properties", evenness_properties),
        ("retrieval oracle", retrieval_oracle),
        ("simulation fuzz", simulation_fuzz),
        ("gold corpus agreement", gold_corpus),
        ("offline end-to-end", end_to_end),
        ("ingestion determinism", ingestion_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({ms} ms): {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name} ({ms} ms): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

