//! Per-session plumbing for talking to agents through a backend.

use std::collections::BTreeMap;

use crate::backend::{BackendError, CallContext, ChatBackend, ChatMessage, GenerationParams, ImagePart};
use crate::domain::{AgentProfile, Question};
use crate::templates::TemplateSet;

/// Everything needed to put a prompt to one agent within a session.
pub struct AgentChannel<'a> {
    pub question: &'a Question,
    pub backend: &'a dyn ChatBackend,
    pub templates: &'a TemplateSet,
    pub seed: u64,
    /// System prompt per agent id.
    pub system_prompts: BTreeMap<String, String>,
    /// Question images, already base64-encoded.
    pub images: Vec<ImagePart>,
}

impl<'a> AgentChannel<'a> {
    pub fn new(question: &'a Question, backend: &'a dyn ChatBackend, templates: &'a TemplateSet, seed: u64) -> Self {
        Self { question, backend, templates, seed, system_prompts: BTreeMap::new(), images: Vec::new() }
    }

    pub fn system_prompt(&self, agent: &AgentProfile) -> String {
        self.system_prompts
            .get(&agent.agent_id)
            .cloned()
            .unwrap_or_else(|| format!("You are {}. Your expertise: {}", agent.role_title, agent.expertise))
    }

    /// Single-turn call: the agent's system prompt plus one user message.
    pub fn ask(
        &self,
        agent: &AgentProfile,
        stage: &str,
        peer: Option<&str>,
        prompt: String,
        with_images: bool,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        self.converse(agent, stage, peer, vec![ChatMessage::user(prompt)], with_images, params)
    }

    /// Multi-turn call; images go on the first user message when requested.
    pub fn converse(
        &self,
        agent: &AgentProfile,
        stage: &str,
        peer: Option<&str>,
        turns: Vec<ChatMessage>,
        with_images: bool,
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let mut ctx = CallContext::new(&self.question.id, &agent.agent_id, stage, self.seed);
        if let Some(p) = peer {
            ctx = ctx.with_peer(p);
        }
        let mut messages = vec![ChatMessage::system(self.system_prompt(agent))];
        let mut attached = !with_images || self.images.is_empty();
        for mut m in turns {
            if !attached && m.role == crate::backend::ChatRole::User {
                m.images = self.images.clone();
                attached = true;
            }
            messages.push(m);
        }
        self.backend.complete(&ctx, &messages, params)
    }

    pub fn question_text(&self) -> &str {
        &self.question.text
    }

    pub fn options_text(&self) -> String {
        self.question.render_options()
    }

    pub fn labels_text(&self) -> String {
        self.question.labels().iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
    }
}
