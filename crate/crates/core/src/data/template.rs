use serde::{Deserialize, Serialize};

use super::Domain;

/// Conversation template wrapping an instruction for one specialist.
///
/// A sample renders as `prefix + instruction + infix + response + suffix`.
/// Only `prefix + instruction + infix` precedes the response span; the suffix
/// trails it and never influences response positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prefix: String,
    pub infix: String,
    pub suffix: String,
}

impl PromptTemplate {
    pub fn new(prefix: &str, infix: &str, suffix: &str) -> Self {
        PromptTemplate {
            prefix: prefix.into(),
            infix: infix.into(),
            suffix: suffix.into(),
        }
    }

    pub fn empty() -> Self {
        PromptTemplate::new("", "", "")
    }

    /// Small analogues of the chat formats of a general chat model, a code
    /// instruct model and a math instruct model.
    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Text => PromptTemplate::new("User: ", "\nAssistant: ", ""),
            Domain::Code => PromptTemplate::new("[INST] ", " [/INST] ", ""),
            Domain::Math => PromptTemplate::new("### Instruction:\n", "\n\n### Response:\n", ""),
        }
    }

    pub fn render_prompt(&self, instruction: &str) -> String {
        format!("{}{}{}", self.prefix, instruction, self.infix)
    }

    pub fn render(&self, instruction: &str, response: &str) -> String {
        format!("{}{}{}", self.render_prompt(instruction), response, self.suffix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_templates_are_distinct() {
        let t: Vec<_> = Domain::ALL.iter().map(|d| PromptTemplate::for_domain(*d)).collect();
        assert_ne!(t[0], t[1]);
        assert_ne!(t[1], t[2]);
        assert_ne!(t[0].prefix.len(), t[2].prefix.len());
    }

    #[test]
    fn render_layout() {
        let t = PromptTemplate::for_domain(Domain::Text);
        assert_eq!(t.render("hi", "hello"), "User: hi\nAssistant: hello");
        assert_eq!(PromptTemplate::empty().render("a", "b"), "ab");
    }
}
