//! Versioned prompt templates shipped with the crate.
//!
//! Template files have `[system]`, `[user]` and optional `[reprompt]`
//! sections; `#` lines before the first section are comments. Placeholders
//! are `{name}` and are substituted in a single pass, so substituted text is
//! never re-expanded.

use std::collections::BTreeMap;

use super::backend::ChatMessage;
use crate::error::{Error, Result};

const BUILTIN: &[(&str, &str)] = &[
    ("answer-v1", include_str!("../../templates/answer-v1.txt")),
    ("classify-v1", include_str!("../../templates/classify-v1.txt")),
    ("entail-v1", include_str!("../../templates/entail-v1.txt")),
];

pub const CLASSIFY_TEMPLATE_ID: &str = "classify-v1";
pub const ENTAIL_TEMPLATE_ID: &str = "entail-v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub system: String,
    pub user: String,
    pub reprompt: Option<String>,
}

impl PromptTemplate {
    pub fn builtin(id: &str) -> Result<Self> {
        let (_, source) = BUILTIN
            .iter()
            .find(|(name, _)| *name == id)
            .ok_or_else(|| Error::Config(format!("unknown prompt template `{id}`")))?;
        Self::parse(id, source)
    }

    pub fn builtin_ids() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(id, _)| *id)
    }

    pub fn parse(id: &str, source: &str) -> Result<Self> {
        let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut current: Option<&str> = None;
        for line in source.lines() {
            let trimmed = line.trim();
            if trimmed.starts_with('[') && trimmed.ends_with(']') {
                let name = &trimmed[1..trimmed.len() - 1];
                if !matches!(name, "system" | "user" | "reprompt") {
                    return Err(Error::Config(format!("template `{id}`: unknown section [{name}]")));
                }
                current = Some(name);
                sections.entry(name).or_default();
                continue;
            }
            match current {
                Some(name) => sections.entry(name).or_default().push(line),
                None if trimmed.is_empty() || trimmed.starts_with('#') => {}
                None => return Err(Error::Config(format!("template `{id}`: text before first section"))),
            }
        }
        let take = |name: &str| sections.get(name).map(|lines| lines.join("\n").trim().to_string());
        let system = take("system").ok_or_else(|| Error::Config(format!("template `{id}`: missing [system]")))?;
        let user = take("user").ok_or_else(|| Error::Config(format!("template `{id}`: missing [user]")))?;
        Ok(Self {
            id: id.to_string(),
            system,
            user,
            reprompt: take("reprompt"),
        })
    }

    /// Renders the system and user messages. With `reprompt`, the reprompt
    /// text is appended to the user turn.
    pub fn render(&self, vars: &[(&str, &str)], reprompt: bool) -> Vec<ChatMessage> {
        let mut user = substitute(&self.user, vars);
        if reprompt {
            if let Some(extra) = &self.reprompt {
                user.push_str("\n\n");
                user.push_str(&substitute(extra, vars));
            }
        }
        vec![
            ChatMessage::system(substitute(&self.system, vars)),
            ChatMessage::user(user),
        ]
    }
}

fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
