//! Chat messages and the provider seam used by every LLM-backed step.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Role names as they appear in the prompt templates. The gateway maps
/// `Developer` onto the provider's system-style role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Developer,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Developer => "developer",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn developer(content: impl Into<String>) -> Self {
        Self { role: Role::Developer, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChatError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by provider")]
    RateLimited,
    #[error("provider rejected the request: {0}")]
    ProviderRejection(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no scripted response for prompt {0}")]
    UnscriptedPrompt(String),
    #[error("empty message list")]
    EmptyConversation,
}

impl ChatError {
    /// Whether a retry can reasonably succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, ChatError::Timeout | ChatError::RateLimited | ChatError::Transport(_))
    }
}

/// A chat-completion backend. Implementations must be deterministic for the
/// offline mock and safe to call from several threads.
pub trait ChatModel: Send + Sync {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError>;
}

impl<T: ChatModel + ?Sized> ChatModel for &T {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        (**self).chat(messages)
    }
}

/// Hex SHA-256 over `role \x1f content \x1e` for each message in order. Used
/// to key scripted responses and request logs without storing prompt text.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m.role.as_str().as_bytes());
        h.update([0x1f]);
        h.update(m.content.as_bytes());
        h.update([0x1e]);
    }
    to_hex(&h.finalize())
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Concatenated message contents, one per line; what substring rules match.
pub fn flatten(messages: &[ChatMessage]) -> String {
    let parts: Vec<&str> = messages.iter().map(|m| m.content.as_str()).collect();
    parts.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_role_and_content() {
        let a = prompt_hash(&[ChatMessage::user("x")]);
        let b = prompt_hash(&[ChatMessage::developer("x")]);
        let c = prompt_hash(&[ChatMessage::user("x")]);
        assert_ne!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn hash_separates_message_boundaries() {
        let a = prompt_hash(&[ChatMessage::user("ab"), ChatMessage::user("c")]);
        let b = prompt_hash(&[ChatMessage::user("a"), ChatMessage::user("bc")]);
        assert_ne!(a, b);
    }

    #[test]
    fn transient_classification() {
        assert!(ChatError::Timeout.is_transient());
        assert!(ChatError::RateLimited.is_transient());
        assert!(!ChatError::ProviderRejection("400".into()).is_transient());
    }
}
