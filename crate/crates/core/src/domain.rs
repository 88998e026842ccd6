//! Domain types shared across the engine: questions, agents, teamwork
//! switches, transcripts and decisions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::teamwork::IssueReport;

/// Sum tolerance for normalized team weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("malformed question {id}: {}", violations.join("; "))]
    MalformedQuestion { id: String, violations: Vec<String> },
    #[error("agent weight must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("invalid option label {0:?}")]
    InvalidLabel(String),
    #[error("unknown modality class {0:?}")]
    UnknownModality(String),
    #[error("unknown teamwork component {0:?}")]
    UnknownComponent(String),
    #[error("team must not be empty")]
    EmptyTeam,
}

/// An option label: a single uppercase ASCII letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(char);

impl Label {
    pub fn new(c: char) -> Result<Self, DomainError> {
        if c.is_ascii_uppercase() {
            Ok(Label(c))
        } else {
            Err(DomainError::InvalidLabel(c.to_string()))
        }
    }

    /// The label at zero-based position `index` ('A' + index).
    pub fn nth(index: usize) -> Option<Self> {
        if index < 26 {
            Some(Label((b'A' + index as u8) as char))
        } else {
            None
        }
    }

    pub fn as_char(self) -> char {
        self.0
    }

    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Label {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::new(c),
            _ => Err(DomainError::InvalidLabel(s.to_string())),
        }
    }
}

impl TryFrom<String> for Label {
    type Error = DomainError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Label> for String {
    fn from(l: Label) -> Self {
        l.0.to_string()
    }
}

/// Per-dataset reasoning category; keys the component-selection table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityClass {
    ClinicalDiagnosis,
    EvidenceSynthesis,
    ComplexInference,
    KnowledgeAssessment,
    DifferentialDiagnosis,
    ClinicalCaseAnalysis,
    PathologyVisual,
    MedicalVisual,
    Unknown,
}

impl ModalityClass {
    pub const ALL: [ModalityClass; 9] = [
        ModalityClass::ClinicalDiagnosis,
        ModalityClass::EvidenceSynthesis,
        ModalityClass::ComplexInference,
        ModalityClass::KnowledgeAssessment,
        ModalityClass::DifferentialDiagnosis,
        ModalityClass::ClinicalCaseAnalysis,
        ModalityClass::PathologyVisual,
        ModalityClass::MedicalVisual,
        ModalityClass::Unknown,
    ];

    pub fn is_visual(self) -> bool {
        matches!(self, ModalityClass::PathologyVisual | ModalityClass::MedicalVisual)
    }

    /// Whether questions of this class may carry image attachments.
    pub fn allows_images(self) -> bool {
        self.is_visual() || self == ModalityClass::Unknown
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityClass::ClinicalDiagnosis => "clinical_diagnosis",
            ModalityClass::EvidenceSynthesis => "evidence_synthesis",
            ModalityClass::ComplexInference => "complex_inference",
            ModalityClass::KnowledgeAssessment => "knowledge_assessment",
            ModalityClass::DifferentialDiagnosis => "differential_diagnosis",
            ModalityClass::ClinicalCaseAnalysis => "clinical_case_analysis",
            ModalityClass::PathologyVisual => "pathology_visual",
            ModalityClass::MedicalVisual => "medical_visual",
            ModalityClass::Unknown => "unknown",
        }
    }
}

impl fmt::Display for ModalityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityClass {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        ModalityClass::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| DomainError::UnknownModality(s.to_string()))
    }
}

/// Where an image's bytes come from. File-backed images are read only
/// when a prompt is actually built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Base64(String),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub media_type: String,
    pub source: ImageSource,
}

impl ImageAttachment {
    pub fn inline(media_type: impl Into<String>, data: impl Into<String>) -> Self {
        Self { media_type: media_type.into(), source: ImageSource::Base64(data.into()) }
    }

    pub fn from_path(media_type: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self { media_type: media_type.into(), source: ImageSource::Path(path.into()) }
    }

    /// Base64 payload, reading the file for path-backed images.
    pub fn base64_data(&self) -> std::io::Result<String> {
        match &self.source {
            ImageSource::Base64(data) => Ok(data.clone()),
            ImageSource::Path(path) => {
                let bytes = std::fs::read(path)?;
                Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
            }
        }
    }
}

/// One multiple-choice item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub dataset: String,
    pub modality_class: ModalityClass,
    pub text: String,
    pub options: BTreeMap<Label, String>,
    pub gold_label: Option<Label>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageAttachment>,
}

impl Question {
    pub fn labels(&self) -> Vec<Label> {
        self.options.keys().copied().collect()
    }

    pub fn first_label(&self) -> Option<Label> {
        self.options.keys().next().copied()
    }

    /// Options rendered one per line as `A. text`.
    pub fn render_options(&self) -> String {
        self.options.iter().map(|(l, t)| format!("{l}. {t}")).collect::<Vec<_>>().join("\n")
    }

    /// Every invariant this question violates; empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.options.len() < 2 {
            out.push(format!("needs at least 2 options, has {}", self.options.len()));
        }
        for (i, label) in self.options.keys().enumerate() {
            if label.index() != i {
                out.push(format!("option labels must be contiguous from 'A'; found {label} at position {i}"));
                break;
            }
        }
        if let Some(gold) = self.gold_label {
            if !self.options.contains_key(&gold) {
                out.push(format!("gold label {gold} is not an option"));
            }
        }
        if !self.images.is_empty() && !self.modality_class.allows_images() {
            out.push(format!("images attached to a non-visual question ({})", self.modality_class));
        }
        out
    }
}

/// Returns the question unchanged when every invariant holds.
pub fn validate_question(q: Question) -> Result<Question, DomainError> {
    let violations = q.violations();
    if violations.is_empty() {
        Ok(q)
    } else {
        Err(DomainError::MalformedQuestion { id: q.id, violations })
    }
}

/// A recruited specialist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub role_title: String,
    pub expertise: String,
    pub weight: f64,
    pub is_leader: bool,
}

/// Scales weights by a common factor so they sum to one.
pub fn normalize_weights(team: Vec<AgentProfile>) -> Result<Vec<AgentProfile>, DomainError> {
    if team.is_empty() {
        return Err(DomainError::EmptyTeam);
    }
    if let Some(bad) = team.iter().find(|a| a.weight <= 0.0 || !a.weight.is_finite()) {
        return Err(DomainError::NonPositiveWeight(bad.weight));
    }
    let total: f64 = team.iter().map(|a| a.weight).sum();
    if (total - 1.0).abs() <= WEIGHT_SUM_TOLERANCE {
        return Ok(team);
    }
    Ok(team
        .into_iter()
        .map(|mut a| {
            a.weight /= total;
            a
        })
        .collect())
}

/// Six independent activation flags. All-false is the plain multi-agent
/// baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct TeamworkConfig {
    pub leadership: bool,
    pub mutual_monitoring: bool,
    pub team_orientation: bool,
    pub shared_mental_model: bool,
    pub closed_loop: bool,
    pub mutual_trust: bool,
}

impl TeamworkConfig {
    pub const COMPONENT_NAMES: [&'static str; 6] =
        ["leadership", "mutual_monitoring", "team_orientation", "shared_mental_model", "closed_loop", "mutual_trust"];

    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            leadership: true,
            mutual_monitoring: true,
            team_orientation: true,
            shared_mental_model: true,
            closed_loop: true,
            mutual_trust: true,
        }
    }

    pub fn flags(&self) -> [bool; 6] {
        [
            self.leadership,
            self.mutual_monitoring,
            self.team_orientation,
            self.shared_mental_model,
            self.closed_loop,
            self.mutual_trust,
        ]
    }

    pub fn active_count(&self) -> usize {
        self.flags().iter().filter(|f| **f).count()
    }

    pub fn active_names(&self) -> Vec<&'static str> {
        Self::COMPONENT_NAMES.iter().zip(self.flags()).filter_map(|(n, on)| on.then_some(*n)).collect()
    }

    /// Turns on one component by name. Accepts the canonical snake_case
    /// names plus a few short aliases ("monitoring", "trust", "smm", ...).
    pub fn enable(&mut self, name: &str) -> Result<(), DomainError> {
        let key = name.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match key.as_str() {
            "leadership" => self.leadership = true,
            "mutual_monitoring" | "monitoring" => self.mutual_monitoring = true,
            "team_orientation" | "orientation" => self.team_orientation = true,
            "shared_mental_model" | "shared_mental_models" | "smm" => self.shared_mental_model = true,
            "closed_loop" | "closed_loop_communication" => self.closed_loop = true,
            "mutual_trust" | "trust" => self.mutual_trust = true,
            _ => return Err(DomainError::UnknownComponent(name.to_string())),
        }
        Ok(())
    }

    /// Parses a comma-separated component list, or "all" / "none".
    pub fn parse_list(list: &str) -> Result<Self, DomainError> {
        match list.trim().to_ascii_lowercase().as_str() {
            "all" => return Ok(Self::all()),
            "none" | "" => return Ok(Self::none()),
            _ => {}
        }
        let mut cfg = Self::none();
        for part in list.split(',').filter(|p| !p.trim().is_empty()) {
            cfg.enable(part)?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for TeamworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = self.active_names();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// Round a transcript event belongs to. `Meta` events sit outside the
/// round sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoundTag {
    One,
    Two,
    Three,
    Meta,
}

impl RoundTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundTag::One => "1",
            RoundTag::Two => "2",
            RoundTag::Three => "3",
            RoundTag::Meta => "meta",
        }
    }

    pub fn number(self) -> Option<u8> {
        match self {
            RoundTag::One => Some(1),
            RoundTag::Two => Some(2),
            RoundTag::Three => Some(3),
            RoundTag::Meta => None,
        }
    }
}

impl fmt::Display for RoundTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoundTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(RoundTag::One),
            "2" => Ok(RoundTag::Two),
            "3" => Ok(RoundTag::Three),
            "meta" => Ok(RoundTag::Meta),
            other => Err(format!("invalid round tag {other:?}")),
        }
    }
}

impl Serialize for RoundTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RoundTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Assessment,
    Coordination,
    DirectedMessage,
    Acknowledgment,
    Verification,
    IssueReport,
    IssueResolution,
    TrustUpdate,
    Synthesis,
    FinalAnswer,
}

impl EventKind {
    /// Kinds that only appear when some teamwork mechanism is active.
    pub fn is_teamwork(self) -> bool {
        matches!(
            self,
            EventKind::Coordination
                | EventKind::Acknowledgment
                | EventKind::Verification
                | EventKind::IssueReport
                | EventKind::IssueResolution
                | EventKind::TrustUpdate
                | EventKind::Synthesis
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Assessment => "assessment",
            EventKind::Coordination => "coordination",
            EventKind::DirectedMessage => "directed_message",
            EventKind::Acknowledgment => "acknowledgment",
            EventKind::Verification => "verification",
            EventKind::IssueReport => "issue_report",
            EventKind::IssueResolution => "issue_resolution",
            EventKind::TrustUpdate => "trust_update",
            EventKind::Synthesis => "synthesis",
            EventKind::FinalAnswer => "final_answer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub round: RoundTag,
    pub kind: EventKind,
    pub sender: String,
    pub recipient: Option<String>,
    pub payload: String,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Event {
    pub fn new(round: RoundTag, kind: EventKind, sender: impl Into<String>) -> Self {
        Self {
            round,
            kind,
            sender: sender.into(),
            recipient: None,
            payload: String::new(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn to(mut self, recipient: impl Into<String>) -> Self {
        self.recipient = Some(recipient.into());
        self
    }

    pub fn payload(mut self, payload: impl Into<String>) -> Self {
        self.payload = payload.into();
        self
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }
}

/// Copy of the trust matrix at the end of a round. Diagonal entries are
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustSnapshot {
    pub round: RoundTag,
    pub levels: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub winner: Label,
    pub tallies: BTreeMap<Label, f64>,
    pub tiebreak_trace: Vec<String>,
    pub leader_synthesis: Option<String>,
}

/// Everything one collaboration session produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub question_id: String,
    pub dataset: String,
    pub seed: u64,
    pub team: Vec<AgentProfile>,
    pub config: TeamworkConfig,
    pub events: Vec<Event>,
    pub trust_snapshots: Vec<TrustSnapshot>,
    pub issues: Vec<IssueReport>,
    pub decision: Option<Decision>,
    /// Set when a backend failure aborted the session.
    pub failure: Option<String>,
}

impl SessionTranscript {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn events_of(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Whether any final answer had to fall back to the first option.
    pub fn any_answer_forced(&self) -> bool {
        self.events_of(EventKind::FinalAnswer)
            .any(|e| e.extra.get("answer_forced").and_then(|v| v.as_bool()) == Some(true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn question(n: usize, gold: Option<char>) -> Question {
        Question {
            id: "q1".into(),
            dataset: "toy".into(),
            modality_class: ModalityClass::ClinicalDiagnosis,
            text: "Which?".into(),
            options: (0..n).map(|i| (Label::nth(i).unwrap(), format!("opt{i}"))).collect(),
            gold_label: gold.map(|c| Label::new(c).unwrap()),
            images: vec![],
        }
    }

    fn agent(w: f64) -> AgentProfile {
        AgentProfile {
            agent_id: "a".into(),
            role_title: "Cardiologist".into(),
            expertise: "hearts".into(),
            weight: w,
            is_leader: false,
        }
    }

    fn weights(team: &[AgentProfile]) -> Vec<f64> {
        team.iter().map(|a| a.weight).collect()
    }

    #[test]
    fn valid_question_passes_unchanged() {
        let q = question(4, Some('B'));
        assert_eq!(validate_question(q.clone()).unwrap(), q);
    }

    #[test]
    fn single_option_is_malformed() {
        let err = validate_question(question(1, None)).unwrap_err();
        assert!(matches!(err, DomainError::MalformedQuestion { .. }));
    }

    #[test]
    fn gold_outside_options_is_malformed() {
        match validate_question(question(4, Some('E'))) {
            Err(DomainError::MalformedQuestion { violations, .. }) => {
                assert_eq!(violations.len(), 1);
                assert!(violations[0].contains("gold"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gap_in_labels_is_malformed() {
        let mut q = question(3, None);
        q.options.remove(&Label::new('B').unwrap());
        assert!(validate_question(q).is_err());
    }

    #[test]
    fn images_only_on_visual_or_unknown() {
        let mut q = question(2, None);
        q.images.push(ImageAttachment::inline("image/png", "AAAA"));
        assert!(validate_question(q.clone()).is_err());
        q.modality_class = ModalityClass::PathologyVisual;
        assert!(validate_question(q.clone()).is_ok());
        q.modality_class = ModalityClass::Unknown;
        assert!(validate_question(q).is_ok());
    }

    #[test]
    fn violations_are_all_listed() {
        let mut q = question(1, Some('C'));
        q.images.push(ImageAttachment::inline("image/png", "AAAA"));
        assert_eq!(q.violations().len(), 3);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_weights(vec![agent(1.0), agent(1.0), agent(1.0)]).unwrap();
        for w in weights(&n) {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        let n = normalize_weights(vec![agent(2.0), agent(1.0), agent(1.0)]).unwrap();
        assert_eq!(weights(&n), vec![0.5, 0.25, 0.25]);
        let n = normalize_weights(vec![agent(0.3), agent(0.3), agent(0.4)]).unwrap();
        assert_eq!(weights(&n), vec![0.3, 0.3, 0.4]);
    }

    #[test]
    fn normalize_rejects_non_positive() {
        assert_eq!(normalize_weights(vec![agent(1.0), agent(0.0)]), Err(DomainError::NonPositiveWeight(0.0)));
        assert!(normalize_weights(vec![agent(-1.0)]).is_err());
        assert!(normalize_weights(vec![agent(f64::NAN)]).is_err());
    }

    #[test]
    fn label_parsing() {
        assert_eq!("C".parse::<Label>().unwrap().index(), 2);
        assert!("c".parse::<Label>().is_err());
        assert!("AB".parse::<Label>().is_err());
        assert_eq!(Label::nth(25).unwrap().as_char(), 'Z');
        assert!(Label::nth(26).is_none());
    }

    #[test]
    fn component_list_parsing() {
        let cfg = TeamworkConfig::parse_list("leadership,mutual_trust").unwrap();
        assert_eq!(cfg.active_names(), vec!["leadership", "mutual_trust"]);
        assert_eq!(TeamworkConfig::parse_list("all").unwrap(), TeamworkConfig::all());
        assert_eq!(TeamworkConfig::parse_list("none").unwrap(), TeamworkConfig::none());
        assert!(TeamworkConfig::parse_list("leadership,backup").is_err());
    }

    #[test]
    fn modality_round_trips_through_str() {
        for m in ModalityClass::ALL {
            assert_eq!(m.as_str().parse::<ModalityClass>().unwrap(), m);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn team_strategy() -> impl Strategy<Value = Vec<AgentProfile>> {
            prop::collection::vec(1e-3f64..100.0, 1..8).prop_map(|ws| ws.into_iter().map(agent).collect())
        }

        proptest! {
            #[test]
            fn normalize_is_idempotent(team in team_strategy()) {
                let once = normalize_weights(team).unwrap();
                let twice = normalize_weights(once.clone()).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a.weight - b.weight).abs() <= 1e-12);
                }
                let sum: f64 = once.iter().map(|a| a.weight).sum();
                prop_assert!((sum - 1.0).abs() <= WEIGHT_SUM_TOLERANCE);
            }

            #[test]
            fn normalize_preserves_argmax(team in team_strategy()) {
                let argmax = |t: &[AgentProfile]| {
                    t.iter().enumerate().fold(0, |best, (i, a)| if a.weight > t[best].weight { i } else { best })
                };
                let before = argmax(&team);
                let after = normalize_weights(team).unwrap();
                prop_assert_eq!(before, argmax(&after));
            }

            /// Random corruptions: the validator accepts exactly the
            /// questions whose independently-checked invariants hold.
            #[test]
            fn validator_matches_invariants(
                n in 0usize..12,
                drop in prop::option::of(0usize..12),
                gold in prop::option::of(0usize..14),
                images in 0usize..2,
                modality in 0usize..9,
            ) {
                let mut q = question(n, None);
                if let Some(d) = drop {
                    if let Some(l) = Label::nth(d) { q.options.remove(&l); }
                }
                q.gold_label = gold.and_then(Label::nth);
                q.modality_class = ModalityClass::ALL[modality];
                for _ in 0..images { q.images.push(ImageAttachment::inline("image/png", "AA")); }

                let labels: Vec<usize> = q.options.keys().map(|l| l.index()).collect();
                let contiguous = labels.iter().enumerate().all(|(i, l)| *l == i);
                let gold_ok = q.gold_label.is_none_or(|g| labels.contains(&g.index()));
                let images_ok = q.images.is_empty()
                    || matches!(q.modality_class, ModalityClass::PathologyVisual | ModalityClass::MedicalVisual | ModalityClass::Unknown);
                let expected = labels.len() >= 2 && contiguous && gold_ok && images_ok;
                prop_assert_eq!(validate_question(q).is_ok(), expected);
            }
        }
    }
}
