//! Synthetic three-domain corpora, per-specialist templates, response-span
//! alignment and batch samplers.

mod corpus;
mod sampler;
mod template;
mod tokenizer;
mod wrap;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use corpus::{synth_corpus, write_atomic, DomainCorpus, Split, SplitManifest, TrainingExample};
pub use sampler::{balanced_batches, mixed_batches, resolve, BalancedSampler, Batch, ExampleRef, MixedSampler};
pub use template::PromptTemplate;
pub use tokenizer::Tokenizer;
pub use wrap::{wrap_example, ResponseSpan, WrappedExample};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Text,
    Code,
    Math,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Text, Domain::Code, Domain::Math];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Text => "text",
            Domain::Code => "code",
            Domain::Math => "math",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "text" => Ok(Domain::Text),
            "code" => Ok(Domain::Code),
            "math" => Ok(Domain::Math),
            other => Err(Error::Domain(other.into())),
        }
    }
}
