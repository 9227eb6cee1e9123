use super::{Domain, PromptTemplate, Tokenizer, TrainingExample};
use crate::error::{Error, Result};

/// `(start, len)` of the response tokens inside one specialist's rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResponseSpan {
    pub start: usize,
    pub len: usize,
}

/// One example rendered through each specialist's template.
///
/// The response (terminated by [`Tokenizer::EOS`]) is tokenized once and
/// appended after every rendered prompt, so response ids are identical
/// across specialists by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct WrappedExample {
    pub domain: Domain,
    pub per_specialist_tokens: Vec<Vec<usize>>,
    pub spans: Vec<ResponseSpan>,
}

impl WrappedExample {
    pub fn num_specialists(&self) -> usize {
        self.per_specialist_tokens.len()
    }

    pub fn response_len(&self) -> usize {
        self.spans[0].len
    }

    pub fn response_tokens(&self) -> &[usize] {
        let span = self.spans[0];
        &self.per_specialist_tokens[0][span.start..span.start + span.len]
    }

    /// Input ids fed to specialist `s`: the rendering minus its final token,
    /// which is only ever a prediction target.
    pub fn inputs(&self, s: usize) -> &[usize] {
        let t = &self.per_specialist_tokens[s];
        &t[..t.len() - 1]
    }

    /// Input positions whose next-token prediction is a response token.
    pub fn response_positions(&self, s: usize) -> std::ops::Range<usize> {
        let span = self.spans[s];
        span.start - 1..span.start - 1 + span.len
    }

    /// Checks the alignment invariants; run on anything not built by
    /// [`wrap_example`].
    pub fn validate(&self) -> Result<()> {
        if self.per_specialist_tokens.len() != self.spans.len() || self.spans.is_empty() {
            return Err(Error::Alignment("token sequences and spans differ in count".into()));
        }
        let reference = self.response_tokens();
        for (s, (tokens, span)) in self.per_specialist_tokens.iter().zip(&self.spans).enumerate() {
            if span.start == 0 {
                return Err(Error::Alignment(format!("specialist {s} has no context before the response")));
            }
            if span.len == 0 || span.start + span.len != tokens.len() {
                return Err(Error::Alignment(format!("specialist {s} span {span:?} vs {} tokens", tokens.len())));
            }
            if &tokens[span.start..] != reference {
                return Err(Error::Alignment(format!("specialist {s} response ids differ")));
            }
        }
        Ok(())
    }
}

pub fn wrap_example(
    ex: &TrainingExample,
    templates: &[PromptTemplate],
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<WrappedExample> {
    if ex.response.is_empty() {
        return Err(Error::Alignment("empty response".into()));
    }
    let mut response = tokenizer.encode(&ex.response)?;
    response.push(Tokenizer::EOS);

    let mut per_specialist_tokens = Vec::with_capacity(templates.len());
    let mut spans = Vec::with_capacity(templates.len());
    for template in templates {
        let mut tokens = tokenizer.encode(&template.render_prompt(&ex.prompt))?;
        if tokens.is_empty() {
            return Err(Error::Alignment("rendered prompt is empty".into()));
        }
        let start = tokens.len();
        tokens.extend_from_slice(&response);
        // the last token is a target only, so the model sees len - 1 inputs
        if tokens.len() - 1 > max_seq_len {
            return Err(Error::Length {
                len: tokens.len() - 1,
                max: max_seq_len,
            });
        }
        spans.push(ResponseSpan {
            start,
            len: response.len(),
        });
        per_specialist_tokens.push(tokens);
    }
    Ok(WrappedExample {
        domain: ex.domain,
        per_specialist_tokens,
        spans,
    })
}
