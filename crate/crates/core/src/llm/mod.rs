//! Live model access over a chat-completion HTTP endpoint.

mod client;
pub mod prompt;

pub use client::{judge_index_warning, ChatClient, EndpointConfig, LlmBackend, Role, RoleTopP};
pub use prompt::{parse_index, parse_marked, render_prompt, render_text, ChatMessage, Marker, MarkerNotFound, PromptKind, PromptParams};
