//! The three-round collaboration session.
//!
//! ```text
//! round 1   every agent, in team order: independent assessment
//!           leader coordination broadcast            (leadership)
//! round 2   every ordered pair i→j, sender-major:
//!             directed message at trust-derived depth  (mutual_trust)
//!             restate / verify, one retransmission     (closed_loop)
//!             recipient reviews the message            (mutual_monitoring)
//!             recipient's trust in sender updated      (mutual_trust)
//! round 3   every agent: final answer given the whole discussion
//!             open issues accepted or rejected         (mutual_monitoring)
//!           unresolved critical issues penalized       (mutual_trust)
//!           leader synthesis                           (leadership)
//! vote      decide::aggregate
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{stage, BackendError, ChatBackend, ChatMessage, GenerationParams, ImagePart};
use crate::channel::AgentChannel;
use crate::decide::{aggregate, Ballot};
use crate::domain::{AgentProfile, Event, EventKind, Label, Question, RoundTag, SessionTranscript, TeamworkConfig};
use crate::recruit::{MAX_TEAM, MIN_TEAM};
use crate::teamwork::{
    self, build_mental_models, closed_loop_exchange, issue_response_event, leader_coordination, message_quality_event,
    monitor_peer, parse_issue_responses, position_change_events, sharing_depth, unresolved_critical_events,
    IssueReport, LoopStep, SharingDepth, TrustEvent, TrustMatrix,
};
use crate::templates::TemplateSet;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("team size {0} outside {MIN_TEAM}..={MAX_TEAM}")]
    TeamSize(usize),
    #[error(transparent)]
    Question(#[from] crate::domain::DomainError),
    #[error("loading image for question {question}: {source}")]
    Image { question: String, source: std::io::Error },
}

/// Per-round bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundState {
    pub round: u8,
    pub per_agent_context: BTreeMap<String, Vec<ChatMessage>>,
    pub answers: BTreeMap<String, Option<Label>>,
}

// ---------------------------------------------------------------------------
// Answer extraction

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i:answer)\s*:\s*\**\s*\(?([A-Z])\b").unwrap())
}

fn standalone_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-Z])\b").unwrap())
}

/// Last `ANSWER: X` with a valid label, else the last standalone valid
/// label token.
pub fn extract_label(text: &str, labels: &[Label]) -> Option<Label> {
    let valid = |m: regex::Match<'_>| m.as_str().parse::<Label>().ok().filter(|l| labels.contains(l));
    answer_re()
        .captures_iter(text)
        .filter_map(|c| valid(c.get(1)?))
        .last()
        .or_else(|| standalone_re().captures_iter(text).filter_map(|c| valid(c.get(1)?)).last())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub label: Label,
    /// Neither the reply nor the re-ask yielded a label.
    pub answer_forced: bool,
    pub reasked: bool,
}

/// Parses an answer from `reply`; if absent, re-asks once at temperature
/// zero; as a last resort takes the first option.
pub fn extract_answer(
    channel: &AgentChannel<'_>,
    agent: &AgentProfile,
    prompt: &str,
    reply: &str,
) -> Result<ExtractedAnswer, BackendError> {
    let labels = channel.question.labels();
    if let Some(label) = extract_label(reply, &labels) {
        return Ok(ExtractedAnswer { label, answer_forced: false, reasked: false });
    }
    let reminder = channel.templates.render("answer_reminder", &[("labels", &channel.labels_text())]);
    let turns = vec![
        ChatMessage::user(prompt),
        ChatMessage::assistant(if reply.is_empty() { "(empty)" } else { reply }),
        ChatMessage::user(reminder),
    ];
    let retry = channel.converse(agent, stage::ANSWER_RETRY, None, turns, false, &GenerationParams::deterministic())?;
    Ok(match extract_label(&retry, &labels) {
        Some(label) => ExtractedAnswer { label, answer_forced: false, reasked: true },
        None => ExtractedAnswer { label: labels[0], answer_forced: true, reasked: true },
    })
}

// ---------------------------------------------------------------------------
// Session

/// System prompt: role and expertise, then the mental-model blocks and the
/// orientation preamble when those components are on.
pub fn system_prompt(
    templates: &TemplateSet,
    agent: &AgentProfile,
    config: &TeamworkConfig,
    mental_models: Option<&teamwork::MentalModelBlocks>,
) -> String {
    let team_role = if agent.is_leader && config.leadership {
        "You are the team leader: you coordinate the discussion and synthesize the team's conclusion."
    } else {
        ""
    };
    let mut out = templates.render(
        "agent_system",
        &[("role", &agent.role_title), ("expertise", &agent.expertise), ("team_role", team_role)],
    );
    out = out.trim_end().to_string();
    if let Some(mm) = mental_models.filter(|_| config.shared_mental_model) {
        out.push_str("\n\n");
        out.push_str(&mm.task_model);
        out.push_str("\n\n");
        out.push_str(&mm.team_model);
    }
    if config.team_orientation {
        out.push_str("\n\n");
        out.push_str(templates.get("orientation_preamble"));
    }
    out
}

struct Session<'a> {
    channel: AgentChannel<'a>,
    team: &'a [AgentProfile],
    config: TeamworkConfig,
    events: Vec<Event>,
    trust: TrustMatrix,
    snapshots: Vec<crate::domain::TrustSnapshot>,
    issues: Vec<IssueReport>,
    rounds: Vec<RoundState>,
    assessments: Vec<String>,
    coordination: Option<String>,
    /// (sender, recipient, payload) in send order.
    messages: Vec<(usize, usize, String)>,
    finals: Vec<ExtractedAnswer>,
    synthesis: Option<String>,
}

impl<'a> Session<'a> {
    fn leader(&self) -> Option<usize> {
        if !self.config.leadership {
            return None;
        }
        self.team.iter().position(|a| a.is_leader)
    }

    fn id(&self, i: usize) -> &str {
        &self.team[i].agent_id
    }

    fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    fn apply_trust(&mut self, e: TrustEvent) {
        let (before, after) = self.trust.apply(&e).expect("trust rule produced in-range indices");
        let ev = Event::new(e.round, EventKind::TrustUpdate, self.id(e.observer))
            .to(self.id(e.subject))
            .payload(e.kind.as_str())
            .with("delta", e.kind.delta())
            .with("before", before)
            .with("after", after);
        self.push(ev);
    }

    fn snapshot(&mut self, round: RoundTag) {
        if self.config.mutual_trust {
            self.snapshots.push(self.trust.snapshot(round));
        }
    }

    fn round_one(&mut self) -> Result<(), BackendError> {
        let mut state = RoundState { round: 1, ..RoundState::default() };
        let labels = self.channel.question.labels();
        let team = self.team;
        for agent in team {
            let prompt = self.channel.templates.render(
                "assessment",
                &[("question", self.channel.question_text()), ("options", &self.channel.options_text())],
            );
            let reply =
                self.channel.ask(agent, stage::ASSESSMENT, None, prompt.clone(), true, &GenerationParams::agent())?;
            let answer = extract_label(&reply, &labels);
            state.per_agent_context.insert(agent.agent_id.clone(), vec![ChatMessage::user(prompt)]);
            state.answers.insert(agent.agent_id.clone(), answer);
            let ev = Event::new(RoundTag::One, EventKind::Assessment, &agent.agent_id)
                .payload(reply.clone())
                .with("answer", answer.map(|l| l.to_string()));
            self.push(ev);
            self.assessments.push(reply);
        }
        self.rounds.push(state);
        self.snapshot(RoundTag::One);
        Ok(())
    }

    fn coordinate(&mut self) -> Result<(), BackendError> {
        let Some(lead) = self.leader() else { return Ok(()) };
        let round1: Vec<(&AgentProfile, &str)> =
            self.team.iter().zip(&self.assessments).map(|(a, s)| (a, s.as_str())).collect();
        let text = leader_coordination(&self.channel, &self.team[lead], &round1)?;
        let ev = Event::new(RoundTag::Two, EventKind::Coordination, self.id(lead))
            .payload(text.clone())
            .with("broadcast", true);
        self.push(ev);
        self.coordination = Some(text);
        Ok(())
    }

    fn coordination_block(&self) -> String {
        match &self.coordination {
            Some(c) => format!("\nLeader's coordination for the team:\n{c}\n"),
            None => String::new(),
        }
    }

    fn round_two(&mut self) -> Result<(), BackendError> {
        let n = self.team.len();
        let mut state = RoundState { round: 2, ..RoundState::default() };
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                self.exchange(i, j, &mut state)?;
            }
        }
        self.rounds.push(state);
        self.snapshot(RoundTag::Two);
        Ok(())
    }

    fn exchange(&mut self, i: usize, j: usize, state: &mut RoundState) -> Result<(), BackendError> {
        let team = self.team;
        let (sender, recipient) = (&team[i], &team[j]);
        let trust_level = self.config.mutual_trust.then(|| self.trust.level(i, j));
        let depth = trust_level.map_or(SharingDepth::Full, sharing_depth);
        let templates = self.channel.templates;
        let prompt = templates.render(
            "directed_message",
            &[
                ("recipient", &recipient.role_title),
                ("question", self.channel.question_text()),
                ("options", &self.channel.options_text()),
                ("own_assessment", &self.assessments[i]),
                ("recipient_assessment", &self.assessments[j]),
                ("coordination", &self.coordination_block()),
                ("depth_instruction", templates.get(depth.template())),
            ],
        );
        let payload = self.channel.ask(
            sender,
            stage::DIRECTED,
            Some(&recipient.agent_id),
            prompt.clone(),
            false,
            &GenerationParams::agent(),
        )?;
        state.per_agent_context.entry(sender.agent_id.clone()).or_default().push(ChatMessage::user(prompt));
        let mut ev = Event::new(RoundTag::Two, EventKind::DirectedMessage, &sender.agent_id)
            .to(&recipient.agent_id)
            .payload(payload.clone())
            .with("depth", depth.as_str());
        if let Some(t) = trust_level {
            ev = ev.with("trust", t);
        }
        self.push(ev);

        let mut first_pass = None;
        if self.config.closed_loop {
            let outcome = closed_loop_exchange(&self.channel, sender, recipient, &payload)?;
            for step in &outcome.steps {
                let ev = match step {
                    LoopStep::Acknowledgment { attempt, text, resent } => {
                        let mut ev = Event::new(RoundTag::Two, EventKind::Acknowledgment, &recipient.agent_id)
                            .to(&sender.agent_id)
                            .payload(text.clone())
                            .with("attempt", *attempt);
                        if let Some(p) = resent {
                            ev = ev.with("retransmission", p.clone());
                        }
                        ev
                    }
                    LoopStep::Verification { attempt, confirmed, raw } => {
                        Event::new(RoundTag::Two, EventKind::Verification, &sender.agent_id)
                            .to(&recipient.agent_id)
                            .payload(raw.clone())
                            .with("attempt", *attempt)
                            .with("verdict", if *confirmed { "CONFIRM" } else { "DENY" })
                    }
                };
                self.push(ev);
            }
            first_pass = Some(!outcome.retransmitted);
        }

        let mut raised = 0;
        if self.config.mutual_monitoring {
            let found = monitor_peer(&self.channel, (j, recipient), (i, sender), &payload)?;
            raised = found.len();
            for issue in found {
                let ev = Event::new(RoundTag::Two, EventKind::IssueReport, &recipient.agent_id)
                    .to(&sender.agent_id)
                    .payload(issue.description.clone())
                    .with("severity", issue.severity.as_str())
                    .with("issue_index", self.issues.len());
                self.push(ev);
                self.issues.push(issue);
            }
        }

        if self.config.mutual_trust {
            if let Some(e) = message_quality_event(i, j, raised, first_pass) {
                self.apply_trust(e);
            }
        }
        self.messages.push((i, j, payload));
        Ok(())
    }

    fn discussion(&self) -> String {
        let mut lines: Vec<String> = self
            .messages
            .iter()
            .map(|(i, j, p)| format!("[{} -> {}]\n{}", self.team[*i].role_title, self.team[*j].role_title, p))
            .collect();
        if lines.is_empty() {
            lines.push("(no messages)".to_string());
        }
        lines.join("\n\n")
    }

    fn open_issues_for(&self, agent: usize) -> Vec<usize> {
        (0..self.issues.len()).filter(|&k| self.issues[k].target == agent && !self.issues[k].resolved).collect()
    }

    fn round_three(&mut self) -> Result<(), BackendError> {
        let n = self.team.len();
        let mut state = RoundState { round: 3, ..RoundState::default() };
        let discussion = self.discussion();
        let round1_answers = self.rounds[0].answers.clone();
        let team = self.team;
        for (i, agent) in team.iter().enumerate() {
            let open = if self.config.mutual_monitoring { self.open_issues_for(i) } else { vec![] };
            let open_block = if open.is_empty() {
                String::new()
            } else {
                let listed = open
                    .iter()
                    .enumerate()
                    .map(|(k, &idx)| {
                        let is = &self.issues[idx];
                        format!(
                            "ISSUE {} ({}) from {}: {}",
                            k + 1,
                            is.severity.as_str(),
                            self.team[is.reviewer].role_title,
                            is.description
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n");
                format!("\n{}\n", self.channel.templates.render("open_issues", &[("issues", &listed)]))
            };
            let prompt = self.channel.templates.render(
                "final_answer",
                &[
                    ("question", self.channel.question_text()),
                    ("options", &self.channel.options_text()),
                    ("own_assessment", &self.assessments[i]),
                    ("coordination", &self.coordination_block()),
                    ("discussion", &discussion),
                    ("open_issues", &open_block),
                ],
            );
            let reply =
                self.channel.ask(agent, stage::FINAL, None, prompt.clone(), true, &GenerationParams::agent())?;
            let answer = extract_answer(&self.channel, agent, &prompt, &reply)?;
            state.per_agent_context.insert(agent.agent_id.clone(), vec![ChatMessage::user(prompt)]);
            state.answers.insert(agent.agent_id.clone(), Some(answer.label));
            let ev = Event::new(RoundTag::Three, EventKind::FinalAnswer, &agent.agent_id)
                .payload(reply.clone())
                .with("answer", answer.label.to_string())
                .with("answer_forced", answer.answer_forced)
                .with("reasked", answer.reasked);
            self.push(ev);

            if !open.is_empty() {
                let responses = parse_issue_responses(&reply);
                for (k, &idx) in open.iter().enumerate() {
                    let response = responses.get(&(k + 1)).copied();
                    if response == Some(true) {
                        self.issues[idx].resolve(RoundTag::Three);
                        let is = &self.issues[idx];
                        let ev = Event::new(RoundTag::Three, EventKind::IssueResolution, self.id(is.target))
                            .to(self.id(is.reviewer))
                            .payload(is.description.clone())
                            .with("issue_index", idx)
                            .with("severity", is.severity.as_str());
                        self.push(ev);
                    }
                    if self.config.mutual_trust {
                        if let Some(e) = issue_response_event(&self.issues[idx], response) {
                            self.apply_trust(e);
                        }
                    }
                }
            }

            let changed = round1_answers
                .get(&agent.agent_id)
                .copied()
                .flatten()
                .is_some_and(|first| first != answer.label && !answer.answer_forced);
            if self.config.mutual_trust && changed {
                for e in position_change_events(i, n) {
                    self.apply_trust(e);
                }
            }
            self.finals.push(answer);
        }
        if self.config.mutual_trust {
            for e in unresolved_critical_events(&self.issues) {
                self.apply_trust(e);
            }
        }
        self.rounds.push(state);
        self.snapshot(RoundTag::Three);
        Ok(())
    }

    fn synthesize(&mut self) -> Result<(), BackendError> {
        let Some(lead) = self.leader() else { return Ok(()) };
        let answers = self
            .team
            .iter()
            .zip(&self.finals)
            .map(|(a, f)| format!("- {} ({}): {}", a.role_title, a.agent_id, f.label))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = self.channel.templates.render(
            "leader_synthesis",
            &[
                ("answers", &answers),
                ("question", self.channel.question_text()),
                ("options", &self.channel.options_text()),
            ],
        );
        let text =
            self.channel.ask(&self.team[lead], stage::SYNTHESIS, None, prompt, false, &GenerationParams::agent())?;
        self.push(Event::new(RoundTag::Three, EventKind::Synthesis, self.id(lead)).payload(text.clone()));
        self.synthesis = Some(text);
        Ok(())
    }

    fn run(&mut self) -> Result<(), BackendError> {
        self.round_one()?;
        self.coordinate()?;
        self.round_two()?;
        self.round_three()?;
        self.synthesize()
    }
}

/// Runs one complete session. Backend failures do not surface as errors:
/// they end the session early and the transcript records them.
pub fn run_session(
    q: &Question,
    team: &[AgentProfile],
    config: TeamworkConfig,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    seed: u64,
) -> Result<SessionTranscript, SessionError> {
    if !(MIN_TEAM..=MAX_TEAM).contains(&team.len()) {
        return Err(SessionError::TeamSize(team.len()));
    }
    crate::domain::validate_question(q.clone())?;

    let mut channel = AgentChannel::new(q, backend, templates, seed);
    channel.images = q
        .images
        .iter()
        .map(|img| Ok(ImagePart { media_type: img.media_type.clone(), data: img.base64_data()? }))
        .collect::<Result<_, std::io::Error>>()
        .map_err(|source| SessionError::Image { question: q.id.clone(), source })?;
    let mental_models = config.shared_mental_model.then(|| build_mental_models(templates, q, team));
    for agent in team {
        channel
            .system_prompts
            .insert(agent.agent_id.clone(), system_prompt(templates, agent, &config, mental_models.as_ref()));
    }

    let mut session = Session {
        channel,
        team,
        config,
        events: Vec::new(),
        trust: TrustMatrix::new(team.len()),
        snapshots: Vec::new(),
        issues: Vec::new(),
        rounds: Vec::new(),
        assessments: Vec::new(),
        coordination: None,
        messages: Vec::new(),
        finals: Vec::new(),
        synthesis: None,
    };
    let outcome = session.run();

    let mut failure = None;
    let mut decision = None;
    match outcome {
        Err(e) => {
            tracing::warn!(question = %q.id, error = %e, "session aborted");
            failure = Some(e.to_string());
        }
        Ok(()) => {
            let leader_id = session.leader().map(|l| team[l].agent_id.clone());
            let ballots: Vec<Ballot> = team
                .iter()
                .zip(&session.finals)
                .map(|(a, f)| Ballot::new(&a.agent_id, f.label, a.weight, a.is_leader, config.leadership))
                .collect::<Result<_, _>>()
                .expect("team weights are positive");
            let mut d = aggregate(&ballots, config.leadership, leader_id.as_deref()).expect("team is non-empty");
            d.leader_synthesis = session.synthesis.clone();
            decision = Some(d);
        }
    }

    Ok(SessionTranscript {
        question_id: q.id.clone(),
        dataset: q.dataset.clone(),
        seed,
        team: team.to_vec(),
        config,
        events: session.events,
        trust_snapshots: session.snapshots,
        issues: session.issues,
        decision,
        failure,
    })
}

// ---------------------------------------------------------------------------
// Transcript files

/// One line of a `.log.jsonl` transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub seq: u64,
    pub round: RoundTag,
    pub kind: String,
    pub sender: String,
    pub recipient: Option<String>,
    pub payload: String,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn meta(kind: &str, payload: String, extra: serde_json::Value) -> TranscriptRecord {
    let extra = match extra {
        serde_json::Value::Object(m) => m,
        _ => serde_json::Map::new(),
    };
    TranscriptRecord {
        seq: 0,
        round: RoundTag::Meta,
        kind: kind.to_string(),
        sender: "system".to_string(),
        recipient: None,
        payload,
        extra,
    }
}

/// Header, every event, trust snapshots, then the decision (or failure).
pub fn transcript_records(t: &SessionTranscript) -> Vec<TranscriptRecord> {
    let mut out = vec![meta(
        "session",
        String::new(),
        serde_json::json!({
            "question_id": t.question_id,
            "dataset": t.dataset,
            "seed": t.seed,
            "config": t.config,
            "team": t.team,
        }),
    )];
    out.extend(t.events.iter().map(|e| TranscriptRecord {
        seq: 0,
        round: e.round,
        kind: e.kind.as_str().to_string(),
        sender: e.sender.clone(),
        recipient: e.recipient.clone(),
        payload: e.payload.clone(),
        extra: e.extra.clone(),
    }));
    for s in &t.trust_snapshots {
        out.push(meta("trust_snapshot", String::new(), serde_json::json!({"of_round": s.round, "levels": s.levels})));
    }
    if !t.issues.is_empty() {
        out.push(meta(
            "issue_ledger",
            String::new(),
            serde_json::json!({
                "issues": t.issues,
                "resolution_rate": teamwork::resolution_rate(&t.issues),
            }),
        ));
    }
    match (&t.decision, &t.failure) {
        (_, Some(f)) => out.push(meta("session_failed", f.clone(), serde_json::json!({}))),
        (Some(d), None) => out.push(meta(
            "decision",
            d.winner.to_string(),
            serde_json::json!({
                "winner": d.winner,
                "tallies": d.tallies,
                "tiebreak_trace": d.tiebreak_trace,
                "leader_synthesis": d.leader_synthesis,
            }),
        )),
        (None, None) => {}
    }
    for (i, r) in out.iter_mut().enumerate() {
        r.seq = i as u64;
    }
    out
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') { c } else { '_' }).collect()
}

pub fn transcript_file_name(dataset: &str, question_id: &str, seed: u64) -> String {
    format!("{}_{}_{}.log.jsonl", sanitize(dataset), sanitize(question_id), seed)
}

pub fn render_transcript(t: &SessionTranscript) -> String {
    let mut out = String::new();
    for r in transcript_records(t) {
        out.push_str(&serde_json::to_string(&r).expect("records are plain JSON"));
        out.push('\n');
    }
    out
}

/// Writes `{dataset}_{question_id}_{seed}.log.jsonl` into `dir`.
pub fn write_transcript(dir: &Path, t: &SessionTranscript) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(transcript_file_name(&t.dataset, &t.question_id, t.seed));
    let mut f = std::fs::File::create(&path)?;
    f.write_all(render_transcript(t).as_bytes())?;
    Ok(path)
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
