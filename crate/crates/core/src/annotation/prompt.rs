use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Turn;

/// Identifier of the bundled system prompt. Bump together with the file.
pub const PROMPT_VERSION: &str = "affect-v1";

const SYSTEM_PROMPT: &str = include_str!("../../prompts/affect_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("turn {0:?} has no text to annotate")]
    EmptyText(String),
}

/// System and user sections sent to every backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: &'static str,
    pub user: String,
}

impl Prompt {
    /// Both sections as one document, as a text-only backend would see it.
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.system.trim_end(), self.user)
    }
}

pub fn system_prompt() -> &'static str {
    SYSTEM_PROMPT
}

/// Hash identifying the prompt template in effect: the system prompt plus the
/// context-window setting, since the latter changes what the user section
/// carries. Stored next to every cached annotation.
pub fn prompt_hash(context_window: usize) -> String {
    let mut h = Sha256::new();
    h.update(PROMPT_VERSION.as_bytes());
    h.update([0u8]);
    h.update(SYSTEM_PROMPT.as_bytes());
    if context_window > 0 {
        h.update(format!("\0context_window={context_window}").as_bytes());
    }
    hex::encode(h.finalize())
}

/// Prompt for a single turn; the user section is the turn text verbatim.
pub fn build_prompt(turn: &Turn) -> Result<Prompt, PromptError> {
    build_prompt_with_context(turn, &[])
}

/// Like [`build_prompt`], prefixing the user section with earlier turns of
/// the same conversation, oldest first.
pub fn build_prompt_with_context(turn: &Turn, context: &[&Turn]) -> Result<Prompt, PromptError> {
    if turn.text.trim().is_empty() {
        return Err(PromptError::EmptyText(turn.turn_id.clone()));
    }
    if context.is_empty() {
        return Ok(Prompt {
            system: SYSTEM_PROMPT,
            user: turn.text.clone(),
        });
    }
    let mut user = String::from("Earlier messages, for context only:\n");
    for c in context {
        user.push_str(&format!("[{}] {}\n", c.role, c.text));
    }
    user.push_str(&format!("\nMessage to annotate ({}):\n{}", turn.role, turn.text));
    Ok(Prompt {
        system: SYSTEM_PROMPT,
        user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Role;
    use chrono::{TimeZone, Utc};

    fn turn(text: &str) -> Turn {
        Turn {
            turn_id: "t1".into(),
            participant_id: "p".into(),
            timestamp: Utc.with_ymd_and_hms(2024, 9, 24, 12, 0, 0).unwrap(),
            role: Role::Student,
            text: text.into(),
            code_snippet_count: 0,
            token_count: 0,
        }
    }

    #[test]
    fn carries_text_and_schema() {
        let p = build_prompt(&turn("I'm stuck on this loop")).unwrap();
        assert_eq!(p.user, "I'm stuck on this loop");
        let full = p.render();
        assert!(full.contains("I'm stuck on this loop"));
        for needle in ["up to 5 emotions", "\"valence\"", "\"arousal\"", "\"learning\"", "1 (", "9 (", "\"emotions\""] {
            assert!(full.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn only_neutral_is_suggested() {
        let sys = system_prompt();
        assert!(sys.contains("\"neutral\""));
        for label in ["confusion", "curiosity", "frustration", "joy", "anxiety"] {
            assert!(!sys.contains(label), "system prompt suggests {label}");
        }
    }

    #[test]
    fn quotes_pass_through() {
        let text = r#"she said "print(\"hi\")" and it broke"#;
        let p = build_prompt(&turn(text)).unwrap();
        assert!(p.user.contains(text));
    }

    #[test]
    fn identical_across_calls() {
        let t = turn("same text");
        assert_eq!(build_prompt(&t).unwrap().render(), build_prompt(&t).unwrap().render());
    }

    #[test]
    fn empty_text_rejected() {
        assert_eq!(build_prompt(&turn("  \n")), Err(PromptError::EmptyText("t1".into())));
    }

    #[test]
    fn hash_is_stable_and_context_sensitive() {
        assert_eq!(prompt_hash(0), prompt_hash(0));
        assert_eq!(prompt_hash(0).len(), 64);
        assert_ne!(prompt_hash(0), prompt_hash(2));
    }

    #[test]
    fn context_is_prefixed() {
        let mut earlier = turn("what is a list?");
        earlier.role = Role::Tutor;
        let p = build_prompt_with_context(&turn("oh I see"), &[&earlier]).unwrap();
        assert!(p.user.starts_with("Earlier messages"));
        assert!(p.user.contains("[tutor] what is a list?"));
        assert!(p.user.ends_with("oh I see"));
    }
}
