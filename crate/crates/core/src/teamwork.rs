//! The six teamwork mechanisms.
//!
//! | mechanism            | where it acts                                   |
//! |----------------------|-------------------------------------------------|
//! | leadership           | coordination before round 2, synthesis after 3  |
//! | mutual monitoring    | peer review of round-2 messages, issue ledger   |
//! | team orientation     | system-prompt preamble, orientation metric      |
//! | shared mental model  | task/team model blocks in every system prompt   |
//! | closed-loop          | send / restate / verify for round-2 messages    |
//! | mutual trust         | directed trust matrix, sharing depth            |
//!
//! Everything here is either a pure function or a single prompt/parse step;
//! sequencing lives in `collab`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{stage, BackendError, ChatMessage, GenerationParams};
use crate::channel::AgentChannel;
use crate::domain::{AgentProfile, Question, RoundTag, TrustSnapshot};
use crate::templates::{TemplateSet, ORIENTATION_LEXICON};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeamworkError {
    #[error("agent index {index} out of range for team of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("trust event observer and subject are both {0}")]
    SelfTrust(usize),
}

// ---------------------------------------------------------------------------
// Mutual trust

pub const INITIAL_TRUST: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustEventKind {
    AdmitsMistake,
    AcceptsFeedback,
    HighQualityShare,
    UnresolvedCriticalIssue,
    RejectedValidFeedback,
}

impl TrustEventKind {
    pub const ALL: [TrustEventKind; 5] = [
        TrustEventKind::AdmitsMistake,
        TrustEventKind::AcceptsFeedback,
        TrustEventKind::HighQualityShare,
        TrustEventKind::UnresolvedCriticalIssue,
        TrustEventKind::RejectedValidFeedback,
    ];

    pub fn delta(self) -> f64 {
        match self {
            TrustEventKind::AdmitsMistake => 0.05,
            TrustEventKind::AcceptsFeedback => 0.05,
            TrustEventKind::HighQualityShare => 0.03,
            TrustEventKind::UnresolvedCriticalIssue => -0.10,
            TrustEventKind::RejectedValidFeedback => -0.05,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrustEventKind::AdmitsMistake => "admits_mistake",
            TrustEventKind::AcceptsFeedback => "accepts_feedback",
            TrustEventKind::HighQualityShare => "high_quality_share",
            TrustEventKind::UnresolvedCriticalIssue => "unresolved_critical_issue",
            TrustEventKind::RejectedValidFeedback => "rejected_valid_feedback",
        }
    }
}

/// `observer` revises its trust in `subject`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustEvent {
    pub observer: usize,
    pub subject: usize,
    pub kind: TrustEventKind,
    pub round: RoundTag,
}

/// Directed pairwise trust, `level(i, j)` being how much agent `i` trusts
/// agent `j`. The diagonal is not stored meaningfully.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustMatrix {
    n: usize,
    levels: Vec<f64>,
}

impl TrustMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, levels: vec![INITIAL_TRUST; n * n] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn level(&self, observer: usize, subject: usize) -> f64 {
        assert!(observer < self.n && subject < self.n && observer != subject);
        self.levels[observer * self.n + subject]
    }

    fn check(&self, e: &TrustEvent) -> Result<(), TeamworkError> {
        for index in [e.observer, e.subject] {
            if index >= self.n {
                return Err(TeamworkError::IndexOutOfRange { index, size: self.n });
            }
        }
        if e.observer == e.subject {
            return Err(TeamworkError::SelfTrust(e.observer));
        }
        Ok(())
    }

    /// Applies one event in place and returns the `(before, after)` levels.
    pub fn apply(&mut self, e: &TrustEvent) -> Result<(f64, f64), TeamworkError> {
        self.check(e)?;
        let slot = &mut self.levels[e.observer * self.n + e.subject];
        let before = *slot;
        *slot = (before + e.kind.delta()).clamp(0.0, 1.0);
        Ok((before, *slot))
    }

    pub fn snapshot(&self, round: RoundTag) -> TrustSnapshot {
        let levels = (0..self.n).map(|i| (0..self.n).map(|j| (i != j).then(|| self.level(i, j))).collect()).collect();
        TrustSnapshot { round, levels }
    }

    /// Off-diagonal entries, row-major.
    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        (0..self.n).flat_map(move |i| (0..self.n).filter(move |j| *j != i).map(move |j| ((i, j), self.level(i, j))))
    }
}

/// Returns a copy of `m` with the event applied.
pub fn trust_update(m: &TrustMatrix, e: &TrustEvent) -> Result<TrustMatrix, TeamworkError> {
    let mut out = m.clone();
    out.apply(e)?;
    Ok(out)
}

/// How much of its reasoning an agent shares with a peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingDepth {
    Minimal,
    Summary,
    Full,
}

impl SharingDepth {
    pub fn as_str(self) -> &'static str {
        match self {
            SharingDepth::Minimal => "minimal",
            SharingDepth::Summary => "summary",
            SharingDepth::Full => "full",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            SharingDepth::Minimal => "sharing_minimal",
            SharingDepth::Summary => "sharing_summary",
            SharingDepth::Full => "sharing_full",
        }
    }
}

impl fmt::Display for SharingDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn sharing_depth(trust_level: f64) -> SharingDepth {
    if trust_level >= 0.7 {
        SharingDepth::Full
    } else if trust_level >= 0.4 {
        SharingDepth::Summary
    } else {
        SharingDepth::Minimal
    }
}

// ---------------------------------------------------------------------------
// Mutual performance monitoring

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Critical,
    Moderate,
    Minor,
}

impl Severity {
    /// Unrecognized tokens map to `Moderate`.
    pub fn parse_lenient(token: &str) -> Self {
        match token.trim().to_ascii_lowercase().as_str() {
            "critical" => Severity::Critical,
            "minor" => Severity::Minor,
            _ => Severity::Moderate,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Critical => "critical",
            Severity::Moderate => "moderate",
            Severity::Minor => "minor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueReport {
    pub reviewer: usize,
    pub target: usize,
    pub severity: Severity,
    pub description: String,
    pub resolved: bool,
    pub raised_round: Option<RoundTag>,
    pub resolved_round: Option<RoundTag>,
}

impl IssueReport {
    pub fn resolve(&mut self, round: RoundTag) {
        self.resolved = true;
        self.resolved_round = Some(round);
    }
}

/// Fraction of issues resolved; 1.0 when there are none.
pub fn resolution_rate(issues: &[IssueReport]) -> f64 {
    if issues.is_empty() {
        return 1.0;
    }
    issues.iter().filter(|i| i.resolved).count() as f64 / issues.len() as f64
}

fn issue_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^[\s\-*•\d.)]*ISSUE\b\s*(?:[(\[]\s*([A-Za-z]+)\s*[)\]]|([A-Za-z]+))?\s*:\s*(.*)$").unwrap()
    })
}

/// Parses a review reply into `(severity, description)` pairs. "NO ISSUES"
/// or a reply with no `ISSUE` lines yields nothing.
pub fn parse_issues(reply: &str) -> Vec<(Severity, String)> {
    issue_line_re()
        .captures_iter(reply)
        .map(|c| {
            let token = c.get(1).or_else(|| c.get(2)).map_or("", |m| m.as_str());
            (Severity::parse_lenient(token), c[3].trim().to_string())
        })
        .collect()
}

fn issue_response_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bISSUE\s*#?\s*(\d+)\s*:\s*(ACCEPTED|REJECTED)\b").unwrap())
}

/// Reads `ISSUE <n>: ACCEPTED|REJECTED` lines (1-based numbering). The
/// last response for a number wins.
pub fn parse_issue_responses(reply: &str) -> BTreeMap<usize, bool> {
    issue_response_re()
        .captures_iter(reply)
        .filter_map(|c| {
            let n: usize = c[1].parse().ok()?;
            (n >= 1).then(|| (n, c[2].eq_ignore_ascii_case("accepted")))
        })
        .collect()
}

/// Asks `reviewer` to check `peer_message` from `target` and parses the
/// issues found.
pub fn monitor_peer(
    channel: &AgentChannel<'_>,
    reviewer: (usize, &AgentProfile),
    target: (usize, &AgentProfile),
    peer_message: &str,
) -> Result<Vec<IssueReport>, BackendError> {
    let prompt = channel.templates.render(
        "monitor_review",
        &[
            ("target", &target.1.role_title),
            ("question", channel.question_text()),
            ("options", &channel.options_text()),
            ("message", peer_message),
        ],
    );
    let reply =
        channel.ask(reviewer.1, stage::MONITOR, Some(&target.1.agent_id), prompt, false, &GenerationParams::agent())?;
    Ok(parse_issues(&reply)
        .into_iter()
        .map(|(severity, description)| IssueReport {
            reviewer: reviewer.0,
            target: target.0,
            severity,
            description,
            resolved: false,
            raised_round: Some(RoundTag::Two),
            resolved_round: None,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Trust rules over the transcript

/// Recipient's view of a round-2 message: a message nobody flagged (and,
/// under closed-loop, verified on the first pass) counts as a
/// high-quality share.
pub fn message_quality_event(
    sender: usize,
    recipient: usize,
    issues_raised: usize,
    first_pass_verified: Option<bool>,
) -> Option<TrustEvent> {
    (issues_raised == 0 && first_pass_verified != Some(false)).then_some(TrustEvent {
        observer: recipient,
        subject: sender,
        kind: TrustEventKind::HighQualityShare,
        round: RoundTag::Two,
    })
}

/// Reviewer's view of how the target answered an issue in round 3.
/// Rejected critical issues are left to [`unresolved_critical_events`].
pub fn issue_response_event(issue: &IssueReport, accepted: Option<bool>) -> Option<TrustEvent> {
    let kind = match (accepted, issue.severity) {
        (Some(true), _) => TrustEventKind::AcceptsFeedback,
        (Some(false), Severity::Moderate) => TrustEventKind::RejectedValidFeedback,
        _ => return None,
    };
    Some(TrustEvent { observer: issue.reviewer, subject: issue.target, kind, round: RoundTag::Three })
}

/// One penalty per critical issue still open at the end of round 3.
pub fn unresolved_critical_events(issues: &[IssueReport]) -> Vec<TrustEvent> {
    issues
        .iter()
        .filter(|i| i.severity == Severity::Critical && !i.resolved)
        .map(|i| TrustEvent {
            observer: i.reviewer,
            subject: i.target,
            kind: TrustEventKind::UnresolvedCriticalIssue,
            round: RoundTag::Three,
        })
        .collect()
}

/// An agent whose final answer differs from its round-1 answer has
/// admitted a mistake in everyone else's eyes.
pub fn position_change_events(agent: usize, team_size: usize) -> Vec<TrustEvent> {
    (0..team_size)
        .filter(|&k| k != agent)
        .map(|observer| TrustEvent {
            observer,
            subject: agent,
            kind: TrustEventKind::AdmitsMistake,
            round: RoundTag::Three,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Shared mental models

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentalModelBlocks {
    pub task_model: String,
    pub team_model: String,
}

pub fn build_mental_models(templates: &TemplateSet, q: &Question, team: &[AgentProfile]) -> MentalModelBlocks {
    let labels = q.labels().iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ");
    let task_model = templates
        .render("mental_model_task", &[("question", &q.text), ("options", &q.render_options()), ("labels", &labels)]);
    let mut members: Vec<String> =
        team.iter().map(|a| format!("- {} ({}): {}", a.role_title, a.agent_id, a.expertise)).collect();
    if let Some(leader) = team.iter().find(|a| a.is_leader) {
        members.push(format!("Leader: {} coordinates the team and synthesizes its conclusions.", leader.role_title));
    }
    let team_model = templates.render("mental_model_team", &[("members", &members.join("\n"))]);
    MentalModelBlocks { task_model, team_model }
}

// ---------------------------------------------------------------------------
// Leadership

/// Prompts the leader with every round-1 assessment; the reply is
/// broadcast to the team before round 2.
pub fn leader_coordination(
    channel: &AgentChannel<'_>,
    leader: &AgentProfile,
    round1: &[(&AgentProfile, &str)],
) -> Result<String, BackendError> {
    let assessments = round1
        .iter()
        .map(|(a, text)| format!("[Assessment from {} ({})]\n{}", a.role_title, a.agent_id, text))
        .collect::<Vec<_>>()
        .join("\n\n");
    let prompt = channel.templates.render(
        "leader_coordination",
        &[("question", channel.question_text()), ("options", &channel.options_text()), ("assessments", &assessments)],
    );
    channel.ask(leader, stage::COORDINATION, None, prompt, false, &GenerationParams::agent())
}

// ---------------------------------------------------------------------------
// Closed-loop communication

/// One protocol step after the initial transmission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum LoopStep {
    Acknowledgment {
        attempt: u8,
        text: String,
        /// The clarified payload, on the retransmission attempt.
        resent: Option<String>,
    },
    Verification {
        attempt: u8,
        confirmed: bool,
        raw: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopOutcome {
    pub payload: String,
    pub acknowledgment: String,
    pub verified: bool,
    pub retransmitted: bool,
    pub steps: Vec<LoopStep>,
}

impl ClosedLoopOutcome {
    /// Transmission plus every acknowledgment and verification.
    pub fn event_count(&self) -> usize {
        1 + self.steps.len()
    }
}

/// Strict verdict: only a bare CONFIRM counts as confirmation.
pub fn parse_verdict(reply: &str) -> bool {
    let word = reply.trim().trim_matches(|c: char| !c.is_ascii_alphanumeric());
    word.eq_ignore_ascii_case("confirm")
}

/// Send, restate, verify; on DENY re-send once with a clarification
/// prefix and repeat the restate/verify pair.
pub fn closed_loop_exchange(
    channel: &AgentChannel<'_>,
    sender: &AgentProfile,
    recipient: &AgentProfile,
    payload: &str,
) -> Result<ClosedLoopOutcome, BackendError> {
    let mut steps = Vec::new();
    let mut current = payload.to_string();
    let mut retransmitted = false;
    let mut acknowledgment;
    let mut verified;
    let mut attempt = 1u8;
    loop {
        let ack_prompt =
            channel.templates.render("closed_loop_ack", &[("sender", &sender.role_title), ("payload", &current)]);
        acknowledgment = channel.converse(
            recipient,
            stage::ACKNOWLEDGE,
            Some(&sender.agent_id),
            vec![ChatMessage::user(ack_prompt)],
            false,
            &GenerationParams::agent(),
        )?;
        steps.push(LoopStep::Acknowledgment {
            attempt,
            text: acknowledgment.clone(),
            resent: retransmitted.then(|| current.clone()),
        });

        let verify_prompt = channel.templates.render(
            "closed_loop_verify",
            &[("recipient", &recipient.role_title), ("payload", &current), ("acknowledgment", &acknowledgment)],
        );
        let raw = channel.ask(
            sender,
            stage::VERIFY,
            Some(&recipient.agent_id),
            verify_prompt,
            false,
            &GenerationParams::agent(),
        )?;
        verified = parse_verdict(&raw);
        steps.push(LoopStep::Verification { attempt, confirmed: verified, raw });

        if verified || retransmitted {
            break;
        }
        retransmitted = true;
        attempt += 1;
        current = format!("{}\n\n{}", channel.templates.get("closed_loop_clarify"), payload);
    }
    if !verified {
        tracing::info!(
            sender = %sender.agent_id,
            recipient = %recipient.agent_id,
            "closed-loop verification failed after retransmission"
        );
    }
    Ok(ClosedLoopOutcome { payload: payload.to_string(), acknowledgment, verified, retransmitted, steps })
}

// ---------------------------------------------------------------------------
// Team orientation

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub solution: Vec<Vec<String>>,
    pub competitive: Vec<Vec<String>>,
}

impl Lexicon {
    /// Parses `[solution]` / `[competitive]` sections, one phrase per line.
    pub fn parse(text: &str) -> Self {
        let mut lex = Lexicon { solution: vec![], competitive: vec![] };
        let mut section = None;
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[solution]" => section = Some(true),
                "[competitive]" => section = Some(false),
                phrase => {
                    let toks = tokenize(phrase);
                    match section {
                        Some(true) => lex.solution.push(toks),
                        Some(false) => lex.competitive.push(toks),
                        None => tracing::warn!(phrase, "lexicon phrase outside a section"),
                    }
                }
            }
        }
        lex
    }

    pub fn builtin() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| Lexicon::parse(ORIENTATION_LEXICON))
    }
}

fn tokenize(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"[a-z0-9']+").unwrap());
    let lower = text.to_lowercase();
    re.find_iter(&lower).map(|m| m.as_str().to_string()).collect()
}

fn count_phrases(tokens: &[String], phrases: &[Vec<String>]) -> usize {
    phrases
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| tokens.windows(p.len()).filter(|w| w == &p.as_slice()).count())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationScore {
    pub solution_tokens: usize,
    pub competitive_tokens: usize,
    pub ratio: f64,
}

/// Counts solution-focused versus competitive phrases. Telemetry only.
pub fn orientation_metric(message_text: &str) -> OrientationScore {
    orientation_metric_with(Lexicon::builtin(), message_text)
}

pub fn orientation_metric_with(lexicon: &Lexicon, message_text: &str) -> OrientationScore {
    let tokens = tokenize(message_text);
    let solution_tokens = count_phrases(&tokens, &lexicon.solution);
    let competitive_tokens = count_phrases(&tokens, &lexicon.competitive);
    let total = solution_tokens + competitive_tokens;
    let ratio = if total == 0 { 1.0 } else { solution_tokens as f64 / total as f64 };
    OrientationScore { solution_tokens, competitive_tokens, ratio }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Script, ScriptEntry, ScriptedBackend};
    use crate::domain::{Label, ModalityClass};

    fn team(n: usize, leader: Option<usize>) -> Vec<AgentProfile> {
        (0..n)
            .map(|i| AgentProfile {
                agent_id: format!("agent{}", i + 1),
                role_title: format!("Specialist {}", i + 1),
                expertise: format!("area {}", i + 1),
                weight: 1.0 / n as f64,
                is_leader: leader == Some(i),
            })
            .collect()
    }

    fn question(n: usize) -> Question {
        Question {
            id: "q1".into(),
            dataset: "toy".into(),
            modality_class: ModalityClass::ClinicalDiagnosis,
            text: "What is the diagnosis?".into(),
            options: (0..n).map(|i| (Label::nth(i).unwrap(), format!("dx{i}"))).collect(),
            gold_label: None,
            images: vec![],
        }
    }

    fn event(o: usize, s: usize, kind: TrustEventKind) -> TrustEvent {
        TrustEvent { observer: o, subject: s, kind, round: RoundTag::Two }
    }

    #[test]
    fn trust_starts_at_point_eight() {
        let m = TrustMatrix::new(4);
        assert!(m.entries().all(|(_, v)| v == 0.8));
        assert_eq!(m.entries().count(), 12);
    }

    #[test]
    fn trust_update_examples() {
        let m = TrustMatrix::new(3);
        let m = trust_update(&m, &event(0, 1, TrustEventKind::AcceptsFeedback)).unwrap();
        assert!((m.level(0, 1) - 0.85).abs() < 1e-12);
        assert_eq!(m.level(1, 0), 0.8);

        let mut high = TrustMatrix::new(2);
        high.levels[1] = 0.98;
        high.apply(&event(0, 1, TrustEventKind::AdmitsMistake)).unwrap();
        assert_eq!(high.level(0, 1), 1.0);

        let mut low = TrustMatrix::new(2);
        low.levels[1] = 0.05;
        low.apply(&event(0, 1, TrustEventKind::UnresolvedCriticalIssue)).unwrap();
        assert_eq!(low.level(0, 1), 0.0);
    }

    #[test]
    fn trust_update_rejects_bad_indices() {
        let m = TrustMatrix::new(2);
        assert_eq!(
            trust_update(&m, &event(0, 2, TrustEventKind::AdmitsMistake)),
            Err(TeamworkError::IndexOutOfRange { index: 2, size: 2 })
        );
        assert_eq!(trust_update(&m, &event(1, 1, TrustEventKind::AdmitsMistake)), Err(TeamworkError::SelfTrust(1)));
    }

    #[test]
    fn snapshot_has_null_diagonal() {
        let s = TrustMatrix::new(2).snapshot(RoundTag::One);
        assert_eq!(s.levels, vec![vec![None, Some(0.8)], vec![Some(0.8), None]]);
    }

    #[test]
    fn sharing_depth_bands() {
        assert_eq!(sharing_depth(0.8), SharingDepth::Full);
        assert_eq!(sharing_depth(0.7), SharingDepth::Full);
        assert_eq!(sharing_depth(0.55), SharingDepth::Summary);
        assert_eq!(sharing_depth(0.4), SharingDepth::Summary);
        assert_eq!(sharing_depth(0.39999), SharingDepth::Minimal);
        assert_eq!(sharing_depth(0.0), SharingDepth::Minimal);
    }

    #[test]
    fn resolution_rate_examples() {
        let issue = |resolved| IssueReport {
            reviewer: 0,
            target: 1,
            severity: Severity::Minor,
            description: String::new(),
            resolved,
            raised_round: Some(RoundTag::Two),
            resolved_round: resolved.then_some(RoundTag::Three),
        };
        assert_eq!(resolution_rate(&[]), 1.0);
        assert_eq!(resolution_rate(&[issue(true), issue(false), issue(true), issue(false)]), 0.5);
        assert_eq!(resolution_rate(&[issue(true), issue(true)]), 1.0);
    }

    #[test]
    fn issue_parsing() {
        assert!(parse_issues("NO ISSUES").is_empty());
        assert_eq!(
            parse_issues("ISSUE (CRITICAL): misses sepsis"),
            vec![(Severity::Critical, "misses sepsis".to_string())]
        );
        assert_eq!(parse_issues("ISSUE (severe): odd")[0].0, Severity::Moderate);
        let many = parse_issues("Review:\n- ISSUE [minor]: typo\n2. ISSUE moderate: gap\nISSUE: untagged");
        assert_eq!(
            many.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
            vec![Severity::Minor, Severity::Moderate, Severity::Moderate]
        );
    }

    #[test]
    fn issue_response_parsing() {
        let r = parse_issue_responses("ISSUE 1: ACCEPTED\nissue 2: rejected\nISSUE 1: REJECTED\nISSUE 0: ACCEPTED");
        assert_eq!(r, BTreeMap::from([(1, false), (2, false)]));
    }

    #[test]
    fn trust_rules() {
        assert_eq!(
            message_quality_event(0, 1, 0, None).map(|e| (e.observer, e.subject, e.kind)),
            Some((1, 0, TrustEventKind::HighQualityShare))
        );
        assert!(message_quality_event(0, 1, 1, None).is_none());
        assert!(message_quality_event(0, 1, 0, Some(false)).is_none());

        let mut issue = IssueReport {
            reviewer: 2,
            target: 0,
            severity: Severity::Critical,
            description: "x".into(),
            resolved: false,
            raised_round: Some(RoundTag::Two),
            resolved_round: None,
        };
        assert!(issue_response_event(&issue, Some(false)).is_none());
        assert_eq!(issue_response_event(&issue, Some(true)).unwrap().kind, TrustEventKind::AcceptsFeedback);
        let evs = unresolved_critical_events(std::slice::from_ref(&issue));
        assert_eq!((evs[0].observer, evs[0].subject), (2, 0));
        issue.resolve(RoundTag::Three);
        assert!(unresolved_critical_events(&[issue.clone()]).is_empty());
        issue.severity = Severity::Moderate;
        assert_eq!(issue_response_event(&issue, Some(false)).unwrap().kind, TrustEventKind::RejectedValidFeedback);
        assert_eq!(position_change_events(1, 3).len(), 2);
    }

    #[test]
    fn mental_models_render_structure() {
        let t = TemplateSet::builtin();
        let q = question(4);
        let blocks = build_mental_models(&t, &q, &team(3, None));
        assert_eq!(blocks.team_model.lines().filter(|l| l.starts_with("- ")).count(), 3);
        for l in ["A. dx0", "B. dx1", "C. dx2", "D. dx3"] {
            assert!(blocks.task_model.contains(l));
        }
        assert!(!blocks.team_model.contains("Leader:"));
        let led = build_mental_models(&t, &q, &team(3, Some(1)));
        assert!(led.team_model.contains("Leader: Specialist 2"));
        assert_eq!(led, build_mental_models(&t, &q, &team(3, Some(1))));
    }

    #[test]
    fn coordination_prompt_includes_every_assessment() {
        let t = TemplateSet::builtin();
        let q = question(4);
        let members = team(5, Some(0));
        let backend = ScriptedBackend::new(
            Script::default().push(ScriptEntry::new(["Focus on options A vs C"]).stage(stage::COORDINATION)),
        );
        let channel = AgentChannel::new(&q, &backend, &t, 111);
        let texts: Vec<String> = (0..5).map(|i| format!("assessment text {i}")).collect();
        let round1: Vec<(&AgentProfile, &str)> = members.iter().zip(&texts).map(|(a, s)| (a, s.as_str())).collect();
        let out = leader_coordination(&channel, &members[0], &round1).unwrap();
        assert_eq!(out, "Focus on options A vs C");
        let prompt = &backend.calls()[0].messages[1].text;
        assert_eq!(prompt.matches("[Assessment from").count(), 5);
    }

    #[test]
    fn monitor_peer_parses_reply() {
        let t = TemplateSet::builtin();
        let q = question(4);
        let members = team(2, None);
        let backend = ScriptedBackend::new(
            Script::default().push(
                ScriptEntry::new(["NO ISSUES", "ISSUE (CRITICAL): wrong drug", "ISSUE (severe): vague"])
                    .stage(stage::MONITOR),
            ),
        );
        let channel = AgentChannel::new(&q, &backend, &t, 1);
        let r = (1, &members[1]);
        let target = (0, &members[0]);
        assert!(monitor_peer(&channel, r, target, "msg").unwrap().is_empty());
        let issues = monitor_peer(&channel, r, target, "msg").unwrap();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].severity, Severity::Critical);
        assert!(!issues[0].resolved);
        assert_eq!((issues[0].reviewer, issues[0].target), (1, 0));
        assert_eq!(monitor_peer(&channel, r, target, "msg").unwrap()[0].severity, Severity::Moderate);
    }

    fn loop_with(verdicts: &[&str]) -> ClosedLoopOutcome {
        let t = TemplateSet::builtin();
        let q = question(4);
        let members = team(2, None);
        let backend = ScriptedBackend::new(
            Script::default()
                .push(ScriptEntry::new(["restated", "restated again"]).stage(stage::ACKNOWLEDGE))
                .push(ScriptEntry::new(verdicts.iter().copied()).stage(stage::VERIFY)),
        );
        let channel = AgentChannel::new(&q, &backend, &t, 1);
        closed_loop_exchange(&channel, &members[0], &members[1], "consider B").unwrap()
    }

    #[test]
    fn closed_loop_confirm_first_pass() {
        let o = loop_with(&["CONFIRM"]);
        assert!(o.verified && !o.retransmitted);
        assert_eq!(o.event_count(), 3);
    }

    #[test]
    fn closed_loop_deny_then_confirm() {
        let o = loop_with(&["DENY", "CONFIRM."]);
        assert!(o.verified && o.retransmitted);
        assert_eq!(o.event_count(), 5);
        match &o.steps[2] {
            LoopStep::Acknowledgment { attempt: 2, resent: Some(p), .. } => {
                assert!(p.starts_with("CLARIFICATION") && p.ends_with("consider B"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn closed_loop_double_deny() {
        let o = loop_with(&["DENY", "DENY"]);
        assert!(!o.verified && o.retransmitted);
        assert_eq!(o.event_count(), 5);
    }

    #[test]
    fn verdict_is_strict() {
        assert!(parse_verdict("CONFIRM"));
        assert!(parse_verdict("  confirm. "));
        assert!(!parse_verdict("DENY"));
        assert!(!parse_verdict("I confirm this"));
    }

    #[test]
    fn orientation_examples() {
        let s = orientation_metric("We should combine our findings");
        assert_eq!((s.solution_tokens, s.competitive_tokens, s.ratio), (3, 0, 1.0));
        assert_eq!(orientation_metric("").ratio, 1.0);
        let c = orientation_metric("You failed; my answer stands");
        assert_eq!((c.solution_tokens, c.competitive_tokens, c.ratio), (0, 2, 0.0));
    }

    #[test]
    fn orientation_matches_whole_words() {
        // "disagree" is competitive only; "went"/"however" do not contain "we".
        let s = orientation_metric("I disagree, however it went fine");
        assert_eq!((s.solution_tokens, s.competitive_tokens), (0, 1));
        let p = orientation_metric("better patient outcome; Patient Outcome");
        assert_eq!(p.solution_tokens, 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn events(n: usize) -> impl Strategy<Value = Vec<TrustEvent>> {
            prop::collection::vec((0..n, 1..n, 0usize..5), 1..200).prop_map(move |raw| {
                raw.into_iter()
                    .map(|(o, off, k)| TrustEvent {
                        observer: o,
                        subject: (o + off) % n,
                        kind: TrustEventKind::ALL[k],
                        round: RoundTag::Two,
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn trust_stays_bounded_and_local(evs in events(4)) {
                let mut m = TrustMatrix::new(4);
                for e in &evs {
                    let before = m.clone();
                    m.apply(e).unwrap();
                    let changed: Vec<_> = before.entries().zip(m.entries())
                        .filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0).collect();
                    prop_assert!(changed.is_empty() || changed == vec![(e.observer, e.subject)]);
                    prop_assert!(m.entries().all(|(_, v)| (0.0..=1.0).contains(&v)));
                }
            }

            #[test]
            fn sharing_depth_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(sharing_depth(lo) <= sharing_depth(hi));
            }

            #[test]
            fn orientation_case_insensitive(s in "[A-Za-z ;,']{0,60}") {
                prop_assert_eq!(orientation_metric(&s), orientation_metric(&s.to_uppercase()));
                prop_assert_eq!(orientation_metric(&s), orientation_metric(&s.to_lowercase()));
            }

            #[test]
            fn resolution_rate_bounds(flags in prop::collection::vec(any::<bool>(), 0..20)) {
                let issues: Vec<IssueReport> = flags.iter().map(|&r| IssueReport {
                    reviewer: 0, target: 1, severity: Severity::Minor, description: String::new(),
                    resolved: r, raised_round: None, resolved_round: None,
                }).collect();
                let rate = resolution_rate(&issues);
                prop_assert!((0.0..=1.0).contains(&rate));
                if flags.iter().all(|f| *f) {
                    let mut more = issues.clone();
                    more.push(IssueReport { resolved: true, ..issues.first().cloned().unwrap_or(IssueReport {
                        reviewer: 0, target: 1, severity: Severity::Minor, description: String::new(),
                        resolved: true, raised_round: None, resolved_round: None })});
                    prop_assert!(resolution_rate(&more) >= rate);
                }
            }
        }
    }
}
