//! The authoring experiment and judgment collection as an event-sourced
//! state machine.
//!
//! Every mutation is an [`Event`]. Live operations check the event against
//! the current state, append it to the [`EventStore`], then apply it, so a
//! state rebuilt by replaying the store always equals the live one.

mod feedback;
mod log;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{build_judgment_groups, presentation_order, AnalyticsError, AuthoringBlock, JudgmentGroup, JudgmentResponse, Source};
use crate::generate::{authoring_codes, CandidateVerdict, ExampleRecord, GenerationConstraints, ReasonCode};
use crate::lm::LmError;
use crate::prompts::Difficulty;
use crate::seed;
use crate::text;

pub use feedback::{compose_feedback, LmStoryTeller, StoryFeedback, StoryTeller, FEEDBACK_MAX_WORDS};
pub use log::{Clock, EventStore, FileStore, MemoryStore, SystemClock, TickClock};

pub const PROMPTS_PER_SESSION: usize = 5;
pub const SENTENCES_PER_SUBMISSION: usize = 2;
pub const EXAMPLES_PER_PROMPT: usize = 5;
pub const EVENT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {session_id} has no prompt {prompt_id}")]
    UnknownPrompt { session_id: String, prompt_id: String },
    #[error("author {0} already has a session")]
    DuplicateAuthor(String),
    #[error("prompt pool exhausted: need {easy} easy and {hard} hard, {easy_left} and {hard_left} left")]
    PoolExhausted { easy: usize, hard: usize, easy_left: usize, hard_left: usize },
    #[error("session is in stage {actual}, not {requested}")]
    WrongStage { requested: Stage, actual: Stage },
    #[error("{stage} sentences for prompt {prompt_id} were already submitted")]
    AlreadySubmitted { prompt_id: String, stage: Stage },
    #[error("examples are hidden until the POST stage")]
    ExamplesHidden,
    #[error("submission rejected")]
    Rejected(Vec<CandidateVerdict>),
    #[error("expected 2 sentences, got {0}")]
    WrongSentenceCount(usize),
    #[error("no completed blocks to judge")]
    NoBlocks,
    #[error("every judgment subset already has its raters")]
    NoJudgmentWork,
    #[error("unknown judgment group {0}")]
    UnknownGroup(String),
    #[error("rater {rater_id} is not assigned group {group_id}")]
    NotAssigned { rater_id: String, group_id: String },
    #[error("rater {rater_id} already judged group {group_id}")]
    DoubleSubmission { rater_id: String, group_id: String },
    #[error("choice {0} is not one of the 3 options")]
    InvalidChoice(usize),
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error("story generation failed: {0}")]
    Feedback(String),
    #[error("event log line {line}: {reason}")]
    Replay { line: usize, reason: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Pre,
    Post,
    Done,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pre => "PRE",
            Stage::Post => "POST",
            Stage::Done => "DONE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub judgment_subset_size: usize,
    pub raters_per_subset: usize,
    pub constraints: GenerationConstraints,
    pub feedback_max_words: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            judgment_subset_size: 56,
            raters_per_subset: 2,
            constraints: GenerationConstraints::default(),
            feedback_max_words: FEEDBACK_MAX_WORDS,
        }
    }
}

/// A labelled prompt with its generated examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolPrompt {
    pub prompt_id: String,
    pub words: Vec<String>,
    pub difficulty: Difficulty,
    pub examples: Vec<String>,
}

/// Easy and hard prompts in the order sessions draw them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPool {
    pub easy: Vec<PoolPrompt>,
    pub hard: Vec<PoolPrompt>,
}

impl PromptPool {
    /// Labelled records with a full example set, shuffled per difficulty.
    pub fn from_records(records: &[ExampleRecord], seed: u64) -> Result<Self, ExperimentError> {
        let mut sorted: Vec<&ExampleRecord> = records.iter().collect();
        sorted.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
        let mut ids = BTreeSet::new();
        let mut pick = |label: Difficulty| -> Result<Vec<PoolPrompt>, ExperimentError> {
            let mut out = Vec::new();
            for r in sorted.iter().filter(|r| r.label == label && r.sentences.len() == EXAMPLES_PER_PROMPT) {
                if !ids.insert(r.prompt_id.clone()) {
                    return Err(ExperimentError::InvalidPool(format!("duplicate prompt id {}", r.prompt_id)));
                }
                out.push(PoolPrompt {
                    prompt_id: r.prompt_id.clone(),
                    words: r.prompt.clone(),
                    difficulty: label,
                    examples: r.sentences.clone(),
                });
            }
            let tag = if label == Difficulty::Easy { "pool/easy" } else { "pool/hard" };
            out.shuffle(&mut seed::derived_rng(seed, tag));
            Ok(out)
        };
        let easy = pick(Difficulty::Easy)?;
        let hard = pick(Difficulty::Hard)?;
        Ok(Self { easy, hard })
    }
}

/// Easy/hard split for the `k`-th session: 3/2 then 2/3, alternating.
pub fn session_split(k: usize) -> (usize, usize) {
    if k % 2 == 0 {
        (3, 2)
    } else {
        (2, 3)
    }
}

/// Difficulty of each prompt slot, alternating from the majority label.
pub fn session_layout(k: usize) -> Vec<Difficulty> {
    let (easy, _) = session_split(k);
    let (major, minor) = if easy >= 3 { (Difficulty::Easy, Difficulty::Hard) } else { (Difficulty::Hard, Difficulty::Easy) };
    (0..PROMPTS_PER_SESSION).map(|i| if i % 2 == 0 { major } else { minor }).collect()
}

/// Per-sentence verdicts for an author submission.
///
/// Reuses the generator's length, order and punctuation codes, adds
/// `DUPLICATE` on a repeated sentence and, in POST, `MATCHES_EXAMPLE` for a
/// sentence equal to a shown example after whitespace normalization.
pub fn validate_sentences<S: AsRef<str>, E: AsRef<str>>(
    prompt_words: &[S],
    sentences: &[String],
    stage: Stage,
    shown_examples: &[E],
    constraints: &GenerationConstraints,
) -> Vec<CandidateVerdict> {
    let examples: BTreeSet<String> = shown_examples.iter().map(|e| text::whitespace_normalized(e.as_ref())).collect();
    let mut seen = BTreeSet::new();
    sentences
        .iter()
        .map(|s| {
            let mut codes = authoring_codes(s, prompt_words, constraints);
            let norm = text::whitespace_normalized(s);
            if !seen.insert(norm.clone()) {
                codes.insert(ReasonCode::Duplicate);
            }
            if stage == Stage::Post && examples.contains(&norm) {
                codes.insert(ReasonCode::MatchesExample);
            }
            CandidateVerdict::new(s, codes)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub sentences: Vec<String>,
    pub timestamp: u64,
    pub feedback: Option<Vec<StoryFeedback>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPrompt {
    pub prompt: PoolPrompt,
    pub pre: Option<Submission>,
    pub post: Option<Submission>,
}

impl SessionPrompt {
    fn slot(&self, stage: Stage) -> Option<&Submission> {
        match stage {
            Stage::Pre => self.pre.as_ref(),
            Stage::Post => self.post.as_ref(),
            Stage::Done => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorSession {
    pub session_id: String,
    pub author_id: String,
    pub index: usize,
    pub stage: Stage,
    pub prompts: Vec<SessionPrompt>,
    pub created_at: u64,
}

impl AuthorSession {
    fn prompt(&self, prompt_id: &str) -> Result<&SessionPrompt, ExperimentError> {
        self.prompts.iter().find(|p| p.prompt.prompt_id == prompt_id).ok_or_else(|| ExperimentError::UnknownPrompt {
            session_id: self.session_id.clone(),
            prompt_id: prompt_id.to_string(),
        })
    }

    fn stage_complete(&self, stage: Stage) -> bool {
        self.prompts.iter().all(|p| p.slot(stage).is_some())
    }

    /// Client-facing view without the hidden examples.
    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            author_id: self.author_id.clone(),
            stage: self.stage,
            prompts: self
                .prompts
                .iter()
                .map(|p| PromptView {
                    prompt_id: p.prompt.prompt_id.clone(),
                    words: p.prompt.words.clone(),
                    difficulty: p.prompt.difficulty,
                    pre_submitted: p.pre.is_some(),
                    post_submitted: p.post.is_some(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptView {
    pub prompt_id: String,
    pub words: Vec<String>,
    pub difficulty: Difficulty,
    pub pre_submitted: bool,
    pub post_submitted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub author_id: String,
    pub stage: Stage,
    pub prompts: Vec<PromptView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentState {
    pub seed: u64,
    pub groups: BTreeMap<String, JudgmentGroup>,
    /// Group ids per subset, in presentation sequence.
    pub subsets: Vec<Vec<String>>,
    /// Rater id to subset index, in order of first request.
    pub assignments: BTreeMap<String, usize>,
    pub responses: Vec<JudgmentResponse>,
    answered: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated { session_id: String, author_id: String, prompts: Vec<PoolPrompt> },
    SentencesSubmitted { session_id: String, prompt_id: String, stage: Stage, sentences: Vec<String> },
    FeedbackIssued { session_id: String, prompt_id: String, stage: Stage, feedback: Vec<StoryFeedback> },
    JudgmentsOpened { seed: u64, groups: Vec<JudgmentGroup>, subsets: Vec<Vec<String>> },
    JudgmentTaskCreated { rater_id: String, subset_index: usize },
    JudgmentRecorded { rater_id: String, group_id: String, choice: usize, preferred: Source },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub version: u32,
    pub seq: u64,
    pub timestamp: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Everything the service knows, derived solely from the event sequence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentState {
    pub sessions: BTreeMap<String, AuthorSession>,
    authors: BTreeMap<String, String>,
    pub easy_used: usize,
    pub hard_used: usize,
    pub judgments: Option<JudgmentState>,
    pub next_seq: u64,
}

impl ExperimentState {
    pub fn session(&self, id: &str) -> Result<&AuthorSession, ExperimentError> {
        self.sessions.get(id).ok_or_else(|| ExperimentError::UnknownSession(id.to_string()))
    }

    /// Reject any event that would not be a legal transition.
    pub fn check(&self, kind: &EventKind, constraints: &GenerationConstraints) -> Result<(), ExperimentError> {
        match kind {
            EventKind::SessionCreated { session_id, author_id, prompts } => {
                if self.authors.contains_key(author_id) {
                    return Err(ExperimentError::DuplicateAuthor(author_id.clone()));
                }
                if self.sessions.contains_key(session_id) {
                    return Err(ExperimentError::InvalidPool(format!("session id {session_id} reused")));
                }
                if prompts.len() != PROMPTS_PER_SESSION {
                    return Err(ExperimentError::InvalidPool(format!("{} prompts in session", prompts.len())));
                }
                let used: BTreeSet<&str> = self
                    .sessions
                    .values()
                    .flat_map(|s| s.prompts.iter().map(|p| p.prompt.prompt_id.as_str()))
                    .collect();
                if let Some(p) = prompts.iter().find(|p| used.contains(p.prompt_id.as_str())) {
                    return Err(ExperimentError::InvalidPool(format!("prompt {} already assigned", p.prompt_id)));
                }
                Ok(())
            }
            EventKind::SentencesSubmitted { session_id, prompt_id, stage, sentences } => {
                let session = self.session(session_id)?;
                let slot = session.prompt(prompt_id)?;
                if session.stage != *stage || *stage == Stage::Done {
                    return Err(ExperimentError::WrongStage { requested: *stage, actual: session.stage });
                }
                if slot.slot(*stage).is_some() {
                    return Err(ExperimentError::AlreadySubmitted { prompt_id: prompt_id.clone(), stage: *stage });
                }
                if sentences.len() != SENTENCES_PER_SUBMISSION {
                    return Err(ExperimentError::WrongSentenceCount(sentences.len()));
                }
                let verdicts = validate_sentences(&slot.prompt.words, sentences, *stage, &slot.prompt.examples, constraints);
                if verdicts.iter().any(|v| !v.accepted) {
                    return Err(ExperimentError::Rejected(verdicts));
                }
                Ok(())
            }
            EventKind::FeedbackIssued { session_id, prompt_id, stage, .. } => {
                let session = self.session(session_id)?;
                match session.prompt(prompt_id)?.slot(*stage) {
                    Some(sub) if sub.feedback.is_none() => Ok(()),
                    Some(_) => Err(ExperimentError::AlreadySubmitted { prompt_id: prompt_id.clone(), stage: *stage }),
                    None => Err(ExperimentError::WrongStage { requested: *stage, actual: session.stage }),
                }
            }
            EventKind::JudgmentsOpened { groups, subsets, .. } => {
                if self.judgments.is_some() || groups.is_empty() {
                    return Err(ExperimentError::NoJudgmentWork);
                }
                let ids: BTreeSet<&str> = groups.iter().map(|g| g.group_id.as_str()).collect();
                if let Some(bad) = subsets.iter().flatten().find(|g| !ids.contains(g.as_str())) {
                    return Err(ExperimentError::UnknownGroup(bad.clone()));
                }
                Ok(())
            }
            EventKind::JudgmentTaskCreated { rater_id, subset_index } => {
                let j = self.judgments.as_ref().ok_or(ExperimentError::NoJudgmentWork)?;
                if j.assignments.contains_key(rater_id) || *subset_index >= j.subsets.len() {
                    return Err(ExperimentError::NoJudgmentWork);
                }
                Ok(())
            }
            EventKind::JudgmentRecorded { rater_id, group_id, choice, preferred } => {
                let j = self.judgments.as_ref().ok_or(ExperimentError::NoJudgmentWork)?;
                if !j.groups.contains_key(group_id) {
                    return Err(ExperimentError::UnknownGroup(group_id.clone()));
                }
                let assigned = j.assignments.get(rater_id).is_some_and(|&s| j.subsets[s].contains(group_id));
                if !assigned {
                    return Err(ExperimentError::NotAssigned { rater_id: rater_id.clone(), group_id: group_id.clone() });
                }
                if j.answered.contains(&(rater_id.clone(), group_id.clone())) {
                    return Err(ExperimentError::DoubleSubmission {
                        rater_id: rater_id.clone(),
                        group_id: group_id.clone(),
                    });
                }
                let order = presentation_order(j.seed, rater_id, group_id);
                if order.get(*choice) != Some(preferred) {
                    return Err(ExperimentError::InvalidChoice(*choice));
                }
                Ok(())
            }
        }
    }

    /// Apply an event that already passed [`check`](Self::check).
    fn apply_checked(&mut self, event: &Event) {
        let ts = event.timestamp;
        match &event.kind {
            EventKind::SessionCreated { session_id, author_id, prompts } => {
                for p in prompts {
                    match p.difficulty {
                        Difficulty::Easy => self.easy_used += 1,
                        _ => self.hard_used += 1,
                    }
                }
                self.authors.insert(author_id.clone(), session_id.clone());
                let index = self.sessions.len();
                self.sessions.insert(
                    session_id.clone(),
                    AuthorSession {
                        session_id: session_id.clone(),
                        author_id: author_id.clone(),
                        index,
                        stage: Stage::Pre,
                        prompts: prompts
                            .iter()
                            .map(|p| SessionPrompt { prompt: p.clone(), pre: None, post: None })
                            .collect(),
                        created_at: ts,
                    },
                );
            }
            EventKind::SentencesSubmitted { session_id, prompt_id, stage, sentences } => {
                let session = self.sessions.get_mut(session_id).expect("checked");
                let slot = session.prompts.iter_mut().find(|p| &p.prompt.prompt_id == prompt_id).expect("checked");
                let sub = Some(Submission { sentences: sentences.clone(), timestamp: ts, feedback: None });
                match stage {
                    Stage::Pre => slot.pre = sub,
                    _ => slot.post = sub,
                }
                if session.stage_complete(session.stage) {
                    session.stage = if session.stage == Stage::Pre { Stage::Post } else { Stage::Done };
                }
            }
            EventKind::FeedbackIssued { session_id, prompt_id, stage, feedback } => {
                let session = self.sessions.get_mut(session_id).expect("checked");
                let slot = session.prompts.iter_mut().find(|p| &p.prompt.prompt_id == prompt_id).expect("checked");
                let sub = match stage {
                    Stage::Pre => slot.pre.as_mut(),
                    _ => slot.post.as_mut(),
                };
                sub.expect("checked").feedback = Some(feedback.clone());
            }
            EventKind::JudgmentsOpened { seed, groups, subsets } => {
                self.judgments = Some(JudgmentState {
                    seed: *seed,
                    groups: groups.iter().map(|g| (g.group_id.clone(), g.clone())).collect(),
                    subsets: subsets.clone(),
                    assignments: BTreeMap::new(),
                    responses: Vec::new(),
                    answered: BTreeSet::new(),
                });
            }
            EventKind::JudgmentTaskCreated { rater_id, subset_index } => {
                let j = self.judgments.as_mut().expect("checked");
                j.assignments.insert(rater_id.clone(), *subset_index);
            }
            EventKind::JudgmentRecorded { rater_id, group_id, preferred, .. } => {
                let j = self.judgments.as_mut().expect("checked");
                j.answered.insert((rater_id.clone(), group_id.clone()));
                j.responses.push(JudgmentResponse {
                    group_id: group_id.clone(),
                    rater_id: rater_id.clone(),
                    preferred: *preferred,
                    timestamp: ts,
                });
            }
        }
        self.next_seq = event.seq + 1;
    }

    pub fn apply(&mut self, event: &Event, constraints: &GenerationConstraints) -> Result<(), ExperimentError> {
        if event.version != EVENT_VERSION {
            return Err(ExperimentError::InvalidPool(format!("unsupported event version {}", event.version)));
        }
        if event.seq != self.next_seq {
            return Err(ExperimentError::InvalidPool(format!("expected seq {}, found {}", self.next_seq, event.seq)));
        }
        self.check(&event.kind, constraints)?;
        self.apply_checked(event);
        Ok(())
    }

    /// Rebuild a state from scratch.
    pub fn replay(events: &[Event], constraints: &GenerationConstraints) -> Result<Self, ExperimentError> {
        let mut state = Self::default();
        for (i, e) in events.iter().enumerate() {
            state
                .apply(e, constraints)
                .map_err(|err| ExperimentError::Replay { line: i + 1, reason: err.to_string() })?;
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub stage: Stage,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub verdicts: Vec<CandidateVerdict>,
    pub feedback: Vec<StoryFeedback>,
    /// Session stage after this submission.
    pub stage: Stage,
}

/// A validated submission awaiting story generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingSubmission {
    pub session_id: String,
    pub prompt_id: String,
    pub stage: Stage,
    pub sentences: Vec<String>,
    pub verdicts: Vec<CandidateVerdict>,
    /// Story seeds, one per sentence.
    pub seeds: Vec<u64>,
    pub max_words: usize,
}

impl PendingSubmission {
    /// Runs outside any lock on the experiment.
    pub fn tell(&self, teller: &dyn StoryTeller) -> Result<Vec<StoryFeedback>, ExperimentError> {
        self.sentences
            .iter()
            .zip(&self.seeds)
            .map(|(s, &seed)| {
                let cont = teller.continue_story(s, seed)?;
                Ok(compose_feedback(s, &cont, self.max_words))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskItem {
    pub group_id: String,
    /// Three sentences in this rater's order; `choice` indexes this list.
    pub options: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentTask {
    pub rater_id: String,
    pub subset_index: usize,
    pub items: Vec<TaskItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedBlock {
    pub block_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockExport {
    pub blocks: Vec<AuthoringBlock>,
    pub dropped: Vec<DroppedBlock>,
}

/// Blocks from finished sessions, minus any with a response that the
/// segmenter splits into more than one sentence.
pub fn export_blocks(state: &ExperimentState) -> BlockExport {
    let mut out = BlockExport::default();
    for s in state.sessions.values().filter(|s| s.stage == Stage::Done) {
        for p in &s.prompts {
            let (Some(pre), Some(post)) = (&p.pre, &p.post) else { continue };
            let block = AuthoringBlock {
                block_id: format!("{}/{}", s.session_id, p.prompt.prompt_id),
                author_id: s.author_id.clone(),
                prompt_id: p.prompt.prompt_id.clone(),
                prompt_words: p.prompt.words.clone(),
                difficulty: p.prompt.difficulty,
                pre: pre.sentences.clone(),
                post: post.sentences.clone(),
                gen: p.prompt.examples.clone(),
            };
            let multi: Vec<&String> =
                block.pre.iter().chain(&block.post).filter(|x| text::split_sentences(x).len() > 1).collect();
            if let Some(first) = multi.first() {
                out.dropped.push(DroppedBlock {
                    block_id: block.block_id,
                    reason: format!("{} response(s) span multiple sentences, e.g. {first:?}", multi.len()),
                });
            } else {
                out.blocks.push(block);
            }
        }
    }
    out
}

pub struct Experiment {
    config: ExperimentConfig,
    pool: PromptPool,
    state: ExperimentState,
    store: Box<dyn EventStore>,
    clock: Box<dyn Clock>,
}

impl Experiment {
    /// Open over a store, replaying whatever it already holds.
    pub fn open(
        config: ExperimentConfig,
        pool: PromptPool,
        mut store: Box<dyn EventStore>,
        clock: Box<dyn Clock>,
    ) -> Result<Self, ExperimentError> {
        let events = store.load()?;
        let state = ExperimentState::replay(&events, &config.constraints)?;
        Ok(Self { config, pool, state, store, clock })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn state(&self) -> &ExperimentState {
        &self.state
    }

    /// Reload the persisted event sequence.
    pub fn events(&mut self) -> Result<Vec<Event>, ExperimentError> {
        self.store.load()
    }

    fn commit(&mut self, kind: EventKind) -> Result<(), ExperimentError> {
        self.state.check(&kind, &self.config.constraints)?;
        let event = Event { version: EVENT_VERSION, seq: self.state.next_seq, timestamp: self.clock.now_ms(), kind };
        self.store.append(&event)?;
        self.state.apply_checked(&event);
        Ok(())
    }

    pub fn create_session(&mut self, author_id: &str) -> Result<SessionView, ExperimentError> {
        if self.state.authors.contains_key(author_id) {
            return Err(ExperimentError::DuplicateAuthor(author_id.to_string()));
        }
        let k = self.state.sessions.len();
        let (easy, hard) = session_split(k);
        let easy_left = self.pool.easy.len().saturating_sub(self.state.easy_used);
        let hard_left = self.pool.hard.len().saturating_sub(self.state.hard_used);
        if easy > easy_left || hard > hard_left {
            return Err(ExperimentError::PoolExhausted { easy, hard, easy_left, hard_left });
        }
        let (mut e, mut h) = (self.state.easy_used, self.state.hard_used);
        let prompts = session_layout(k)
            .into_iter()
            .map(|d| {
                if d == Difficulty::Easy {
                    e += 1;
                    self.pool.easy[e - 1].clone()
                } else {
                    h += 1;
                    self.pool.hard[h - 1].clone()
                }
            })
            .collect();
        let session_id = format!("s{k:04}");
        self.commit(EventKind::SessionCreated {
            session_id: session_id.clone(),
            author_id: author_id.to_string(),
            prompts,
        })?;
        Ok(self.state.sessions[&session_id].view())
    }

    pub fn session(&self, session_id: &str) -> Result<SessionView, ExperimentError> {
        Ok(self.state.session(session_id)?.view())
    }

    pub fn examples(&self, session_id: &str, prompt_id: &str) -> Result<Vec<String>, ExperimentError> {
        let s = self.state.session(session_id)?;
        let p = s.prompt(prompt_id)?;
        if s.stage == Stage::Pre {
            return Err(ExperimentError::ExamplesHidden);
        }
        Ok(p.prompt.examples.clone())
    }

    /// First half of a submission: validate without touching the log.
    pub fn prepare_submission(
        &self,
        session_id: &str,
        prompt_id: &str,
        request: &SubmitRequest,
    ) -> Result<PendingSubmission, ExperimentError> {
        let kind = EventKind::SentencesSubmitted {
            session_id: session_id.to_string(),
            prompt_id: prompt_id.to_string(),
            stage: request.stage,
            sentences: request.sentences.clone(),
        };
        self.state.check(&kind, &self.config.constraints)?;
        let p = self.state.session(session_id)?.prompt(prompt_id)?;
        let verdicts = validate_sentences(
            &p.prompt.words,
            &request.sentences,
            request.stage,
            &p.prompt.examples,
            &self.config.constraints,
        );
        let seeds = (0..request.sentences.len())
            .map(|i| seed::derive(self.config.seed, &format!("feedback/{session_id}/{prompt_id}/{}/{i}", request.stage)))
            .collect();
        Ok(PendingSubmission {
            session_id: session_id.to_string(),
            prompt_id: prompt_id.to_string(),
            stage: request.stage,
            sentences: request.sentences.clone(),
            verdicts,
            seeds,
            max_words: self.config.feedback_max_words,
        })
    }

    /// Second half: persist the submission and its feedback. Fails if the
    /// state moved on since `prepare_submission`.
    pub fn commit_submission(
        &mut self,
        pending: PendingSubmission,
        feedback: Vec<StoryFeedback>,
    ) -> Result<SubmitResponse, ExperimentError> {
        self.commit(EventKind::SentencesSubmitted {
            session_id: pending.session_id.clone(),
            prompt_id: pending.prompt_id.clone(),
            stage: pending.stage,
            sentences: pending.sentences.clone(),
        })?;
        self.commit(EventKind::FeedbackIssued {
            session_id: pending.session_id.clone(),
            prompt_id: pending.prompt_id.clone(),
            stage: pending.stage,
            feedback: feedback.clone(),
        })?;
        let stage = self.state.sessions[&pending.session_id].stage;
        Ok(SubmitResponse { verdicts: pending.verdicts, feedback, stage })
    }

    /// Both halves in one call, for single-threaded use.
    pub fn submit(
        &mut self,
        session_id: &str,
        prompt_id: &str,
        request: &SubmitRequest,
        teller: &dyn StoryTeller,
    ) -> Result<SubmitResponse, ExperimentError> {
        let pending = self.prepare_submission(session_id, prompt_id, request)?;
        let feedback = pending.tell(teller)?;
        self.commit_submission(pending, feedback)
    }

    pub fn export_blocks(&self) -> BlockExport {
        export_blocks(&self.state)
    }

    pub fn export_responses(&self) -> Vec<JudgmentResponse> {
        self.state.judgments.as_ref().map(|j| j.responses.clone()).unwrap_or_default()
    }

    fn open_judgments(&mut self) -> Result<(), ExperimentError> {
        let export = self.export_blocks();
        if export.blocks.is_empty() {
            return Err(ExperimentError::NoBlocks);
        }
        let mut groups = build_judgment_groups(&export.blocks)?;
        let seed = seed::derive(self.config.seed, "judgments");
        groups.shuffle(&mut seed::derived_rng(seed, "group-order"));
        let size = self.config.judgment_subset_size.max(1);
        let subsets = groups.chunks(size).map(|c| c.iter().map(|g| g.group_id.clone()).collect()).collect();
        self.commit(EventKind::JudgmentsOpened { seed, groups, subsets })
    }

    fn render_task(&self, rater_id: &str) -> JudgmentTask {
        let j = self.state.judgments.as_ref().expect("judgments open");
        let subset_index = j.assignments[rater_id];
        let items = j.subsets[subset_index]
            .iter()
            .map(|gid| {
                let g = &j.groups[gid];
                let options =
                    presentation_order(j.seed, rater_id, gid).iter().map(|&s| g.sentence(s).to_string()).collect();
                TaskItem { group_id: gid.clone(), options }
            })
            .collect();
        JudgmentTask { rater_id: rater_id.to_string(), subset_index, items }
    }

    /// The rater's subset, assigning one on first request. Judgments open
    /// on the first request over every block exported at that moment.
    pub fn judgment_task(&mut self, rater_id: &str) -> Result<JudgmentTask, ExperimentError> {
        if self.state.judgments.is_none() {
            self.open_judgments()?;
        }
        let j = self.state.judgments.as_ref().expect("judgments open");
        if !j.assignments.contains_key(rater_id) {
            let subset_index = j.assignments.len() / self.config.raters_per_subset.max(1);
            if subset_index >= j.subsets.len() {
                return Err(ExperimentError::NoJudgmentWork);
            }
            self.commit(EventKind::JudgmentTaskCreated { rater_id: rater_id.to_string(), subset_index })?;
        }
        Ok(self.render_task(rater_id))
    }

    /// Record that `rater_id` picked option `choice` of their ordering.
    pub fn submit_judgment(
        &mut self,
        rater_id: &str,
        group_id: &str,
        choice: usize,
    ) -> Result<JudgmentResponse, ExperimentError> {
        let j = self.state.judgments.as_ref().ok_or(ExperimentError::NoJudgmentWork)?;
        if !j.groups.contains_key(group_id) {
            return Err(ExperimentError::UnknownGroup(group_id.to_string()));
        }
        let order = presentation_order(j.seed, rater_id, group_id);
        let preferred = *order.get(choice).ok_or(ExperimentError::InvalidChoice(choice))?;
        self.commit(EventKind::JudgmentRecorded {
            rater_id: rater_id.to_string(),
            group_id: group_id.to_string(),
            choice,
            preferred,
        })?;
        Ok(self.state.judgments.as_ref().expect("open").responses.last().expect("just pushed").clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c() -> GenerationConstraints {
        GenerationConstraints::default()
    }

    #[test]
    fn alternating_split() {
        for k in 0..10 {
            let layout = session_layout(k);
            let easy = layout.iter().filter(|&&d| d == Difficulty::Easy).count();
            assert_eq!(easy, if k % 2 == 0 { 3 } else { 2 });
            assert!(layout.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn verdict_codes() {
        let prompt = ["walking", "the", "zoo"];
        let ok = "The little children enjoyed walking through the zoo and seeing all the different animals.";
        let v = validate_sentences(&prompt, &[ok.into(), ok.into()], Stage::Pre, &[] as &[&str], &c());
        assert!(v[0].accepted);
        assert_eq!(v[1].reason_codes.iter().copied().collect::<Vec<_>>(), vec![ReasonCode::Duplicate]);
        let spaced = "The little children  enjoyed walking through the zoo and seeing all the different animals.";
        let v = validate_sentences(&prompt, &[spaced.into()], Stage::Post, &[ok], &c());
        assert!(v[0].reason_codes.contains(&ReasonCode::MatchesExample));
        let v = validate_sentences(&prompt, &[spaced.into()], Stage::Pre, &[ok], &c());
        assert!(v[0].accepted);
    }

    #[test]
    fn event_json_shape() {
        let e = Event {
            version: 1,
            seq: 3,
            timestamp: 10,
            kind: EventKind::JudgmentTaskCreated { rater_id: "r".into(), subset_index: 0 },
        };
        let json = serde_json::to_value(&e).unwrap();
        assert_eq!(json["type"], "judgment_task_created");
        assert_eq!(json["seq"], 3);
        assert_eq!(serde_json::from_value::<Event>(json).unwrap(), e);
    }
}
