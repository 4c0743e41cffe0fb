//! Chat templates.

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::config::ChatTemplateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChatTemplate {
    Zephyr,
    Chatml,
}

impl ChatTemplate {
    pub fn from_config(id: ChatTemplateId) -> Option<Self> {
        match id {
            ChatTemplateId::Zephyr => Some(ChatTemplate::Zephyr),
            ChatTemplateId::Chatml => Some(ChatTemplate::Chatml),
            ChatTemplateId::None => None,
        }
    }
}

pub fn render_chat_template(template: ChatTemplate, messages: &[ChatMessage]) -> Result<String, DatasetError> {
    let last = messages.last().ok_or(DatasetError::EmptyMessages)?;
    let mut out = String::new();
    for m in messages {
        match template {
            ChatTemplate::Zephyr => {
                out.push_str("<|");
                out.push_str(m.role.as_str());
                out.push_str("|>\n");
                out.push_str(&m.content);
                out.push_str("</s>\n");
            }
            ChatTemplate::Chatml => {
                out.push_str("<|im_start|>");
                out.push_str(m.role.as_str());
                out.push('\n');
                out.push_str(&m.content);
                out.push_str("<|im_end|>\n");
            }
        }
    }
    if last.role != ChatRole::Assistant {
        out.push_str(match template {
            ChatTemplate::Zephyr => "<|assistant|>\n",
            ChatTemplate::Chatml => "<|im_start|>assistant\n",
        });
    }
    Ok(out)
}

/// Interprets a record value as a message list: either a JSON array of
/// `{role, content}` objects or a string holding one.
pub fn as_messages(value: &serde_json::Value) -> Option<Vec<ChatMessage>> {
    match value {
        serde_json::Value::Array(_) => serde_json::from_value(value.clone()).ok(),
        serde_json::Value::String(s) if s.trim_start().starts_with('[') => serde_json::from_str(s).ok(),
        _ => None,
    }
    .filter(|m: &Vec<ChatMessage>| !m.is_empty())
}
