#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use teamsmith::backend::{stage, Script, ScriptEntry, ScriptedBackend};
use teamsmith::{AgentProfile, Label, ModalityClass, Question, TeamworkConfig};

pub fn l(c: char) -> Label {
    Label::new(c).unwrap()
}

pub fn question(id: &str, n_options: usize, gold: Option<char>) -> Question {
    Question {
        id: id.to_string(),
        dataset: "synthetic".to_string(),
        modality_class: ModalityClass::Unknown,
        text: format!("Synthetic question {id}?"),
        options: (0..n_options)
            .map(|i| (Label::nth(i).unwrap(), format!("option {}", i + 1)))
            .collect::<BTreeMap<_, _>>(),
        gold_label: gold.map(l),
        images: vec![],
    }
}

/// `n` agents `agent1..agentN` with uniform weights.
pub fn team(n: usize) -> Vec<AgentProfile> {
    (0..n)
        .map(|i| AgentProfile {
            agent_id: format!("agent{}", i + 1),
            role_title: format!("Specialist {}", i + 1),
            expertise: "general medicine".to_string(),
            weight: 1.0 / n as f64,
            is_leader: false,
        })
        .collect()
}

/// Every agent answers `label` in both answering rounds; other stages get
/// a bland default.
pub fn unanimous(label: char) -> Script {
    Script::with_default("Noted.")
        .push(ScriptEntry::new(vec![format!("Reasoning. ANSWER: {label}"); 10]).stage(stage::ASSESSMENT))
        .push(ScriptEntry::new(vec![format!("Final. ANSWER: {label}"); 10]).stage(stage::FINAL))
}

pub fn backend(script: Script) -> ScriptedBackend {
    ScriptedBackend::new(script)
}

/// Recruiter replies for a team of `n`.
pub fn recruiter_entries(script: Script, n: usize) -> Script {
    let specialties: Vec<String> = (1..=n).map(|i| format!("\"Specialist {i}\"")).collect();
    let analysis = format!(
        "```json\n{{\"domains\": [\"medicine\"], \"specialties\": [{}], \"team_size\": {n}, \"rationale\": \"synthetic\"}}\n```",
        specialties.join(", ")
    );
    let weights: Vec<String> = (0..n).map(|i| format!("{:.2}", 0.5 + 0.1 * i as f64)).collect();
    let weights = format!("{{\"weights\": [{}]}}", weights.join(", "));
    script
        .push(ScriptEntry::new(vec![analysis; 1000]).stage(stage::ANALYSIS))
        .push(ScriptEntry::new(vec![weights; 1000]).stage(stage::WEIGHTS))
}

pub fn dataset_line(q: &Question) -> String {
    let options: serde_json::Map<String, serde_json::Value> =
        q.options.iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone()))).collect();
    let mut rec = serde_json::json!({"id": q.id, "question": q.text, "options": options});
    if let Some(g) = q.gold_label {
        rec["answer"] = serde_json::Value::String(g.to_string());
    }
    rec.to_string()
}

pub fn write_dataset(dir: &Path, name: &str, questions: &[Question]) -> PathBuf {
    let body: String = questions.iter().map(|q| dataset_line(q) + "\n").collect();
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

pub fn write_script(dir: &Path, name: &str, script: &Script) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(script).unwrap()).unwrap();
    p
}

/// Synthetic dataset of `n` four-option questions with gold `A`. The
/// script answers gold on the first `correct` ids and `B` on the rest.
pub fn graded_benchmark(n: usize, correct: usize, team_size: usize) -> (Vec<Question>, Script) {
    let questions: Vec<Question> = (0..n).map(|i| question(&format!("s{i:03}"), 4, Some('A'))).collect();
    let mut script = recruiter_entries(Script::with_default("Noted."), team_size);
    for (i, q) in questions.iter().enumerate() {
        let label = if i < correct { 'A' } else { 'B' };
        script = script
            .push(ScriptEntry::new(vec![format!("ANSWER: {label}"); 10]).question(&q.id).stage(stage::ASSESSMENT))
            .push(ScriptEntry::new(vec![format!("ANSWER: {label}"); 10]).question(&q.id).stage(stage::FINAL));
    }
    (questions, script)
}

pub fn cfg(list: &str) -> TeamworkConfig {
    TeamworkConfig::parse_list(list).unwrap()
}
