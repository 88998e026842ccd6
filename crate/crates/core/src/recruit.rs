//! Team assembly: domain analysis, weighted specialists, and teamwork
//! component selection.

use serde::{Deserialize, Serialize};

use crate::backend::{stage, BackendError, ChatBackend, ChatMessage, GenerationParams};
use crate::channel::AgentChannel;
use crate::domain::{normalize_weights, AgentProfile, ModalityClass, Question, TeamworkConfig};
use crate::templates::TemplateSet;

pub const MIN_TEAM: usize = 2;
pub const MAX_TEAM: usize = 5;
pub const FALLBACK_SPECIALTY: &str = "Internal Medicine Generalist";
pub const FALLBACK_TEAM_SIZE: usize = 3;
pub const RECRUITER_ID: &str = "recruiter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAnalysis {
    pub detected_domains: Vec<String>,
    pub required_specialties: Vec<String>,
    pub team_size: usize,
    pub rationale: String,
    /// True when the recruiter's reply could not be used.
    #[serde(default)]
    pub fallback: bool,
}

impl DomainAnalysis {
    pub fn fallback() -> Self {
        Self {
            detected_domains: vec![],
            required_specialties: vec![FALLBACK_SPECIALTY.to_string(); FALLBACK_TEAM_SIZE],
            team_size: FALLBACK_TEAM_SIZE,
            rationale: "recruiter reply unparseable; generalist fallback".to_string(),
            fallback: true,
        }
    }

    /// Forces the team to `size` (clamped to 2..=5), truncating or padding
    /// the specialty list with generalists.
    pub fn resized(mut self, size: usize) -> Self {
        let size = size.clamp(MIN_TEAM, MAX_TEAM);
        self.required_specialties.resize(size, FALLBACK_SPECIALTY.to_string());
        self.team_size = size;
        self
    }
}

#[derive(Debug, Deserialize)]
struct RawAnalysis {
    #[serde(default)]
    domains: Vec<String>,
    #[serde(default)]
    specialties: Vec<String>,
    #[serde(default)]
    team_size: Option<i64>,
    #[serde(default)]
    rationale: String,
}

/// Finds the JSON object in a reply: a ```json fence, any fence, or the
/// outermost braces.
pub fn extract_json_block(text: &str) -> Option<serde_json::Value> {
    let mut candidates = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let Some(end) = after.find("```") else { break };
        let body = &after[..end];
        let body = body.strip_prefix("json").or_else(|| body.strip_prefix("JSON")).unwrap_or(body);
        candidates.push(body.trim().to_string());
        rest = &after[end + 3..];
    }
    if let (Some(s), Some(e)) = (text.find('{'), text.rfind('}')) {
        if s < e {
            candidates.push(text[s..=e].to_string());
        }
    }
    candidates.into_iter().find_map(|c| serde_json::from_str::<serde_json::Value>(&c).ok().filter(|v| v.is_object()))
}

/// Parses a recruiter analysis reply, applying the clamp rule.
pub fn parse_analysis(reply: &str) -> Option<DomainAnalysis> {
    let raw: RawAnalysis = serde_json::from_value(extract_json_block(reply)?).ok()?;
    let specialties: Vec<String> =
        raw.specialties.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if specialties.is_empty() {
        return None;
    }
    let requested = raw.team_size.unwrap_or(specialties.len() as i64);
    let size = requested.clamp(MIN_TEAM as i64, MAX_TEAM as i64) as usize;
    Some(
        DomainAnalysis {
            detected_domains: raw.domains,
            required_specialties: specialties,
            team_size: size,
            rationale: raw.rationale,
            fallback: false,
        }
        .resized(size),
    )
}

pub fn recruiter_profile() -> AgentProfile {
    AgentProfile {
        agent_id: RECRUITER_ID.to_string(),
        role_title: "the recruiter of a multidisciplinary medical team".to_string(),
        expertise: "matching clinical questions to the specialists best placed to answer them".to_string(),
        weight: 1.0,
        is_leader: false,
    }
}

fn recruiter_channel<'a>(
    q: &'a Question,
    backend: &'a dyn ChatBackend,
    templates: &'a TemplateSet,
    seed: u64,
) -> AgentChannel<'a> {
    AgentChannel::new(q, backend, templates, seed)
}

/// One recruiter prompt; on an unusable reply, one re-ask at temperature
/// zero; then the generalist fallback.
pub fn analyze_question(
    q: &Question,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    seed: u64,
) -> Result<DomainAnalysis, BackendError> {
    let channel = recruiter_channel(q, backend, templates, seed);
    let recruiter = recruiter_profile();
    let prompt = templates.render("recruit_analysis", &[("question", &q.text), ("options", &q.render_options())]);
    let params = GenerationParams::deterministic();
    let first = channel.ask(&recruiter, stage::ANALYSIS, None, prompt.clone(), true, &params)?;
    if let Some(a) = parse_analysis(&first) {
        return Ok(a);
    }
    tracing::debug!(question = %q.id, "recruiter analysis unparseable; re-asking");
    let turns = vec![
        ChatMessage::user(prompt),
        ChatMessage::assistant(if first.is_empty() { "(empty)".to_string() } else { first }),
        ChatMessage::user(templates.get("recruit_retry").to_string()),
    ];
    let second = channel.converse(&recruiter, stage::ANALYSIS_RETRY, None, turns, true, &params)?;
    Ok(parse_analysis(&second).unwrap_or_else(|| {
        tracing::warn!(question = %q.id, "recruiter analysis unparseable twice; using fallback team");
        DomainAnalysis::fallback()
    }))
}

#[derive(Debug, Deserialize)]
struct RawWeights {
    weights: Vec<f64>,
    #[serde(default)]
    expertise: Vec<String>,
}

/// Weights (and optional expertise lines) for `n` specialists, or `None`
/// when the reply is unusable.
pub fn parse_weights(reply: &str, n: usize) -> Option<(Vec<f64>, Vec<String>)> {
    let raw: RawWeights = serde_json::from_value(extract_json_block(reply)?).ok()?;
    let ok = raw.weights.len() == n && raw.weights.iter().all(|w| *w > 0.0 && *w <= 1.0);
    ok.then_some((raw.weights, raw.expertise))
}

/// Builds one profile per specialty with normalized recruiter weights.
/// With leadership on, the heaviest agent (first on ties) leads.
pub fn assemble_team(
    analysis: &DomainAnalysis,
    config: &TeamworkConfig,
    q: &Question,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    seed: u64,
) -> Result<Vec<AgentProfile>, BackendError> {
    let n = analysis.required_specialties.len();
    let channel = recruiter_channel(q, backend, templates, seed);
    let listing = analysis
        .required_specialties
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = templates.render(
        "recruit_weights",
        &[("specialties", &listing), ("question", &q.text), ("options", &q.render_options())],
    );
    let reply =
        channel.ask(&recruiter_profile(), stage::WEIGHTS, None, prompt, false, &GenerationParams::deterministic())?;
    let (weights, expertise) = parse_weights(&reply, n).unwrap_or_else(|| {
        tracing::debug!(question = %q.id, "weight reply unusable; uniform weights");
        (vec![1.0; n], vec![])
    });

    let team: Vec<AgentProfile> = analysis
        .required_specialties
        .iter()
        .enumerate()
        .map(|(i, role)| AgentProfile {
            agent_id: format!("agent{}", i + 1),
            role_title: role.clone(),
            expertise: expertise
                .get(i)
                .map(|e| e.trim())
                .filter(|e| !e.is_empty())
                .map(str::to_string)
                .unwrap_or_else(|| format!("Clinical expertise in {role}")),
            weight: weights[i],
            is_leader: false,
        })
        .collect();
    // Weights were validated positive above, so normalization cannot fail.
    let mut team = normalize_weights(team).expect("validated weights");
    if config.leadership {
        let lead = (0..team.len()).fold(0, |best, i| if team[i].weight > team[best].weight { i } else { best });
        team[lead].is_leader = true;
    }
    Ok(team)
}

/// Teamwork components for a modality, unless overridden.
pub fn select_components(modality: ModalityClass, override_config: Option<TeamworkConfig>) -> TeamworkConfig {
    if let Some(cfg) = override_config {
        return cfg;
    }
    let mut c = TeamworkConfig::none();
    match modality {
        ModalityClass::ClinicalDiagnosis => {
            c.leadership = true;
            c.mutual_trust = true;
            c.team_orientation = true;
        }
        ModalityClass::EvidenceSynthesis => {
            c.leadership = true;
            c.closed_loop = true;
            c.mutual_trust = true;
        }
        ModalityClass::ComplexInference | ModalityClass::KnowledgeAssessment => {
            c.shared_mental_model = true;
        }
        ModalityClass::DifferentialDiagnosis => {
            c.mutual_monitoring = true;
            c.mutual_trust = true;
        }
        ModalityClass::ClinicalCaseAnalysis => {
            c.mutual_monitoring = true;
        }
        ModalityClass::PathologyVisual => {
            c.mutual_monitoring = true;
            c.shared_mental_model = true;
            c.closed_loop = true;
        }
        ModalityClass::MedicalVisual => {
            c.shared_mental_model = true;
            c.closed_loop = true;
            c.team_orientation = true;
        }
        ModalityClass::Unknown => {
            c.leadership = true;
            c.shared_mental_model = true;
            c.mutual_trust = true;
        }
    }
    c
}

/// Output of the whole recruitment stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recruitment {
    pub analysis: DomainAnalysis,
    pub config: TeamworkConfig,
    pub team: Vec<AgentProfile>,
}

/// Analysis, component selection, then team assembly.
pub fn recruit(
    q: &Question,
    backend: &dyn ChatBackend,
    templates: &TemplateSet,
    seed: u64,
    team_size_override: Option<usize>,
    component_override: Option<TeamworkConfig>,
) -> Result<Recruitment, BackendError> {
    let mut analysis = analyze_question(q, backend, templates, seed)?;
    if let Some(n) = team_size_override {
        analysis = analysis.resized(n);
    }
    let config = select_components(q.modality_class, component_override);
    let team = assemble_team(&analysis, &config, q, backend, templates, seed)?;
    Ok(Recruitment { analysis, config, team })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Script, ScriptEntry, ScriptedBackend};
    use crate::domain::Label;

    fn question() -> Question {
        Question {
            id: "q1".into(),
            dataset: "toy".into(),
            modality_class: ModalityClass::ClinicalDiagnosis,
            text: "Chest pain?".into(),
            options: (0..4).map(|i| (Label::nth(i).unwrap(), format!("o{i}"))).collect(),
            gold_label: Some(Label::new('A').unwrap()),
            images: vec![],
        }
    }

    fn analysis_reply(size: i64, n: usize) -> String {
        let specs: Vec<String> = (0..n).map(|i| format!("\"Spec{i}\"")).collect();
        format!(
            "Here you go:\n```json\n{{\"domains\": [\"cardio\"], \"specialties\": [{}], \"team_size\": {size}, \"rationale\": \"r\"}}\n```",
            specs.join(", ")
        )
    }

    fn analyze_with(replies: &[&str]) -> (DomainAnalysis, ScriptedBackend) {
        let b =
            ScriptedBackend::new(Script::default().push(ScriptEntry::new(replies.iter().copied()).agent(RECRUITER_ID)));
        let a = analyze_question(&question(), &b, &TemplateSet::builtin(), 111).unwrap();
        (a, b)
    }

    #[test]
    fn analysis_parse_echo() {
        let reply = analysis_reply(4, 4);
        let (a, b) = analyze_with(&[&reply]);
        assert_eq!(a.team_size, 4);
        assert_eq!(a.required_specialties, vec!["Spec0", "Spec1", "Spec2", "Spec3"]);
        assert_eq!(a.detected_domains, vec!["cardio"]);
        assert!(!a.fallback);
        assert_eq!(b.calls().len(), 1);
        assert_eq!(b.calls()[0].params.temperature, 0.0);
    }

    #[test]
    fn analysis_garbage_twice_falls_back() {
        let (a, b) = analyze_with(&["garbage", "garbage"]);
        assert_eq!(a, DomainAnalysis::fallback());
        assert_eq!(a.required_specialties, vec![FALLBACK_SPECIALTY; 3]);
        let calls = b.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!(calls[1].ctx.stage, stage::ANALYSIS_RETRY);
        assert_eq!(calls[1].params.temperature, 0.0);
    }

    #[test]
    fn analysis_recovers_on_reask() {
        let reply = analysis_reply(2, 2);
        let (a, _) = analyze_with(&["garbage", &reply]);
        assert_eq!(a.team_size, 2);
        assert!(!a.fallback);
    }

    #[test]
    fn analysis_clamps_team_size() {
        let reply = analysis_reply(9, 9);
        let (a, _) = analyze_with(&[&reply]);
        assert_eq!(a.team_size, 5);
        assert_eq!(a.required_specialties.len(), 5);
        assert_eq!(a.required_specialties[4], "Spec4");

        let padded = parse_analysis(&analysis_reply(4, 2)).unwrap();
        assert_eq!(padded.required_specialties, vec!["Spec0", "Spec1", FALLBACK_SPECIALTY, FALLBACK_SPECIALTY]);
        let low = parse_analysis(&analysis_reply(1, 3)).unwrap();
        assert_eq!(low.team_size, 2);
        assert_eq!(low.required_specialties.len(), 2);
    }

    #[test]
    fn bare_json_without_fence() {
        let a = parse_analysis(r#"{"specialties": ["A", "B", "C"]}"#).unwrap();
        assert_eq!(a.team_size, 3);
        assert!(parse_analysis(r#"{"specialties": []}"#).is_none());
    }

    fn assemble(n: usize, weights_reply: &str, leadership: bool) -> Vec<AgentProfile> {
        let analysis = DomainAnalysis {
            detected_domains: vec![],
            required_specialties: (0..n).map(|i| format!("Spec{i}")).collect(),
            team_size: n,
            rationale: String::new(),
            fallback: false,
        };
        let b = ScriptedBackend::new(Script::default().push(ScriptEntry::new([weights_reply]).stage(stage::WEIGHTS)));
        let cfg = TeamworkConfig { leadership, ..TeamworkConfig::none() };
        assemble_team(&analysis, &cfg, &question(), &b, &TemplateSet::builtin(), 1).unwrap()
    }

    #[test]
    fn max_weight_leads() {
        let team = assemble(3, r#"{"weights": [0.5, 0.3, 0.2], "expertise": ["x", "y", "z"]}"#, true);
        assert!(team[0].is_leader);
        assert_eq!(team.iter().filter(|a| a.is_leader).count(), 1);
        assert_eq!(team[1].expertise, "y");
        assert_eq!(team[2].agent_id, "agent3");
    }

    #[test]
    fn unparseable_weights_are_uniform() {
        let team = assemble(2, "no idea", true);
        assert_eq!(team.iter().map(|a| a.weight).collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert!(team[0].is_leader && !team[1].is_leader);
    }

    #[test]
    fn equal_weights_normalize() {
        let team = assemble(5, r#"{"weights": [1, 1, 1, 1, 1]}"#, false);
        assert!(team.iter().all(|a| (a.weight - 0.2).abs() < 1e-12 && !a.is_leader));
    }

    #[test]
    fn out_of_range_weights_fall_back() {
        let team = assemble(2, r#"{"weights": [1.5, 0.5]}"#, false);
        assert_eq!(team[0].weight, 0.5);
        let team = assemble(3, r#"{"weights": [0.5, 0.5]}"#, false);
        assert!((team[0].weight - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn component_table() {
        use ModalityClass::*;
        let names = |m| select_components(m, None).active_names();
        assert_eq!(names(ClinicalDiagnosis), vec!["leadership", "team_orientation", "mutual_trust"]);
        assert_eq!(names(PathologyVisual), vec!["mutual_monitoring", "shared_mental_model", "closed_loop"]);
        assert_eq!(names(Unknown), vec!["leadership", "shared_mental_model", "mutual_trust"]);
        let custom = TeamworkConfig { closed_loop: true, ..TeamworkConfig::none() };
        assert_eq!(select_components(ClinicalDiagnosis, Some(custom)), custom);
        assert_eq!(select_components(ClinicalDiagnosis, Some(TeamworkConfig::none())), TeamworkConfig::none());
        for m in ModalityClass::ALL {
            assert!(select_components(m, None).active_count() >= 1);
        }
    }

    #[test]
    fn recruit_applies_size_override() {
        let b = ScriptedBackend::new(Script::with_default("garbage"));
        let r = recruit(&question(), &b, &TemplateSet::builtin(), 1, Some(4), None).unwrap();
        assert_eq!(r.team.len(), 4);
        assert!(r.team[0].is_leader);
        let sum: f64 = r.team.iter().map(|a| a.weight).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn assembled_team_invariants(ws in prop::collection::vec(0.01f64..=1.0, 2..=5), lead in any::<bool>()) {
                let reply = serde_json::json!({"weights": ws}).to_string();
                let team = assemble(ws.len(), &reply, lead);
                let sum: f64 = team.iter().map(|a| a.weight).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                let leaders = team.iter().filter(|a| a.is_leader).count();
                prop_assert_eq!(leaders, usize::from(lead));
            }
        }
    }
}
