//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use infill_core::experiment::{
    Experiment, ExperimentConfig, ExperimentError, ExperimentState, MemoryStore, PromptPool, Stage, StoryTeller,
    SubmitRequest, TickClock,
};
use infill_core::generate::ExampleRecord;
use infill_core::prompts::Difficulty;
use infill_core::seed;
use infill_core::text;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Prompt `i` is `[w{i}a, w{i}b, w{i}c]`; every example mentions `ex{i}n{j}`
/// so example text is unique and easy to scan for.
pub fn synthetic_records(n_easy: usize, n_hard: usize) -> Vec<ExampleRecord> {
    (0..n_easy + n_hard)
        .map(|i| {
            let label = if i < n_easy { Difficulty::Easy } else { Difficulty::Hard };
            let prompt = vec![format!("w{i}a"), format!("w{i}b"), format!("w{i}c")];
            let sentences = (0..5)
                .map(|j| format!("The w{i}a and w{i}b met ex{i}n{j} beside the w{i}c today."))
                .collect();
            ExampleRecord {
                prompt_id: format!("p{i:03}"),
                prompt,
                label,
                sentences,
                attempts: 5,
                rejection_histogram: BTreeMap::new(),
            }
        })
        .collect()
}

/// Always continues with the same two short sentences.
pub struct FixedTeller;

impl StoryTeller for FixedTeller {
    fn continue_story(&self, _seed_sentence: &str, seed: u64) -> Result<String, ExperimentError> {
        Ok(format!("Rain fell on the roof. Story number {} ended there. And then", seed % 97))
    }
}

pub fn memory_experiment(config: ExperimentConfig, records: &[ExampleRecord]) -> Experiment {
    let pool = PromptPool::from_records(records, config.seed).unwrap();
    Experiment::open(config, pool, Box::new(MemoryStore::new()), Box::new(TickClock::starting_at(1_000))).unwrap()
}

/// A sentence valid for `words`; `tag` makes it unique.
pub fn valid_sentence(words: &[String], tag: &str) -> String {
    format!("Someone found the {} near a {} and then the {} {tag}.", words[0], words[1], words[2])
}

/// Passes authoring validation but the segmenter splits it in two.
pub fn multi_sentence(words: &[String], tag: &str) -> String {
    format!("The {} left. Then the {} and {} stayed here alone {tag}.", words[0], words[1], words[2])
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub ops: usize,
    pub leaks: Vec<String>,
    pub replay_mismatches: usize,
    pub stage_regressions: usize,
    pub export_mismatches: usize,
    pub responses: usize,
    pub sessions_done: usize,
}

fn stage_rank(s: Stage) -> u8 {
    match s {
        Stage::Pre => 0,
        Stage::Post => 1,
        Stage::Done => 2,
    }
}

/// Random operation sequence against a fresh in-memory experiment, checking
/// replay equivalence, stage monotonicity, example secrecy and export
/// filtering along the way.
pub fn fuzz_sequence(seed_value: u64, n_ops: usize) -> FuzzOutcome {
    let mut rng: ChaCha8Rng = seed::rng(seed_value);
    let records = synthetic_records(9, 9);
    let config = ExperimentConfig { seed: seed_value, judgment_subset_size: 6, ..Default::default() };
    let mut exp = memory_experiment(config.clone(), &records);
    let authors: Vec<String> = (0..5).map(|i| format!("author{i}")).collect();
    let raters: Vec<String> = (0..6).map(|i| format!("rater{i}")).collect();
    let mut multi: BTreeSet<String> = BTreeSet::new();
    let mut seen_stage: BTreeMap<String, Stage> = BTreeMap::new();
    let mut known_groups: Vec<String> = Vec::new();
    let mut out = FuzzOutcome { ops: n_ops, ..Default::default() };
    let mut counter = 0usize;

    for _ in 0..n_ops {
        let sessions: Vec<String> = exp.state().sessions.keys().cloned().collect();
        let mut bodies: Vec<String> = Vec::new();
        let pick_session = |rng: &mut ChaCha8Rng| -> String {
            if sessions.is_empty() || rng.random_bool(0.05) {
                "nope".to_string()
            } else {
                sessions[rng.random_range(0..sessions.len())].clone()
            }
        };
        match rng.random_range(0..100) {
            0..=7 => {
                let a = &authors[rng.random_range(0..authors.len())];
                match exp.create_session(a) {
                    Ok(v) => bodies.push(serde_json::to_string(&v).unwrap()),
                    Err(e) => bodies.push(e.to_string()),
                }
            }
            8..=14 => {
                let sid = pick_session(&mut rng);
                match exp.session(&sid) {
                    Ok(v) => bodies.push(serde_json::to_string(&v).unwrap()),
                    Err(e) => bodies.push(e.to_string()),
                }
            }
            15..=24 => {
                let sid = pick_session(&mut rng);
                let pid = exp
                    .state()
                    .sessions
                    .get(&sid)
                    .map(|s| s.prompts[rng.random_range(0..5)].prompt.prompt_id.clone())
                    .unwrap_or_else(|| "p999".into());
                match exp.examples(&sid, &pid) {
                    Ok(v) => bodies.push(serde_json::to_string(&v).unwrap()),
                    Err(e) => bodies.push(e.to_string()),
                }
            }
            25..=84 => {
                let sid = pick_session(&mut rng);
                let Some(session) = exp.state().sessions.get(&sid).cloned() else {
                    let req = SubmitRequest { stage: Stage::Pre, sentences: vec!["x".into(), "y".into()] };
                    bodies.push(exp.submit(&sid, "p000", &req, &FixedTeller).unwrap_err().to_string());
                    continue;
                };
                let open: Vec<usize> = (0..5)
                    .filter(|&i| match session.stage {
                        Stage::Pre => session.prompts[i].pre.is_none(),
                        Stage::Post => session.prompts[i].post.is_none(),
                        Stage::Done => false,
                    })
                    .collect();
                let idx = if !open.is_empty() && rng.random_bool(0.85) {
                    open[rng.random_range(0..open.len())]
                } else {
                    rng.random_range(0..5)
                };
                let slot = &session.prompts[idx];
                let stage = if rng.random_bool(0.9) && session.stage != Stage::Done {
                    session.stage
                } else {
                    [Stage::Pre, Stage::Post, Stage::Done][rng.random_range(0..3)]
                };
                let words = &slot.prompt.words;
                counter += 2;
                let mut sentences = vec![
                    valid_sentence(words, &format!("t{counter}")),
                    valid_sentence(words, &format!("u{counter}")),
                ];
                match rng.random_range(0..20) {
                    0 => sentences[1] = sentences[0].clone(),
                    1 => sentences[0] = "Too short.".into(),
                    2 => sentences.truncate(1),
                    3 if session.stage == Stage::Post => sentences[1] = slot.prompt.examples[0].clone(),
                    4 | 5 => {
                        sentences[rng.random_range(0..2)] = multi_sentence(words, &format!("m{counter}"));
                    }
                    _ => {}
                }
                let req = SubmitRequest { stage, sentences: sentences.clone() };
                match exp.submit(&sid, &slot.prompt.prompt_id, &req, &FixedTeller) {
                    Ok(r) => {
                        for s in &sentences {
                            if s.contains(" left. Then ") {
                                multi.insert(format!("{sid}/{}", slot.prompt.prompt_id));
                            }
                        }
                        bodies.push(serde_json::to_string(&r).unwrap());
                    }
                    Err(ExperimentError::Rejected(v)) => bodies.push(serde_json::to_string(&v).unwrap()),
                    Err(e) => bodies.push(e.to_string()),
                }
            }
            85..=91 => {
                let r = &raters[rng.random_range(0..raters.len())];
                match exp.judgment_task(r) {
                    Ok(t) => {
                        for item in &t.items {
                            if !known_groups.contains(&item.group_id) {
                                known_groups.push(item.group_id.clone());
                            }
                        }
                        bodies.push(serde_json::to_string(&t).unwrap());
                    }
                    Err(e) => bodies.push(e.to_string()),
                }
            }
            _ => {
                let r = &raters[rng.random_range(0..raters.len())];
                let gid = if known_groups.is_empty() || rng.random_bool(0.05) {
                    "missing:000".to_string()
                } else {
                    known_groups[rng.random_range(0..known_groups.len())].clone()
                };
                let choice = rng.random_range(0..4);
                match exp.submit_judgment(r, &gid, choice) {
                    Ok(x) => bodies.push(serde_json::to_string(&x).unwrap()),
                    Err(e) => bodies.push(e.to_string()),
                }
            }
        }

        // Secrecy: nothing returned may mention an example of a PRE session.
        for s in exp.state().sessions.values().filter(|s| s.stage == Stage::Pre) {
            for p in &s.prompts {
                for ex in &p.prompt.examples {
                    if bodies.iter().any(|b| b.contains(ex.as_str())) {
                        out.leaks.push(ex.clone());
                    }
                }
            }
        }
        for (id, s) in &exp.state().sessions {
            if let Some(prev) = seen_stage.insert(id.clone(), s.stage) {
                if stage_rank(s.stage) < stage_rank(prev) {
                    out.stage_regressions += 1;
                }
            }
        }
    }

    let events = exp.events().unwrap();
    let replayed = ExperimentState::replay(&events, &config.constraints).unwrap();
    if &replayed != exp.state() {
        out.replay_mismatches += 1;
    }
    let export = exp.export_blocks();
    let dropped: BTreeSet<String> = export.dropped.iter().map(|d| d.block_id.clone()).collect();
    let done: BTreeSet<String> = exp
        .state()
        .sessions
        .values()
        .filter(|s| s.stage == Stage::Done)
        .flat_map(|s| s.prompts.iter().map(move |p| format!("{}/{}", s.session_id, p.prompt.prompt_id)))
        .collect();
    let expected_dropped: BTreeSet<String> = multi.intersection(&done).cloned().collect();
    if dropped != expected_dropped || export.blocks.len() + dropped.len() != done.len() {
        out.export_mismatches += 1;
    }
    for b in &export.blocks {
        if b.pre.iter().chain(&b.post).any(|s| text::split_sentences(s).len() != 1) {
            out.export_mismatches += 1;
        }
    }
    out.responses = exp.export_responses().len();
    out.sessions_done = done.len() / 5;
    out
}
