//! Downstream tasks: code summarization (encoder-decoder generation) and
//! code search (bi-encoder retrieval).

mod search;
mod summarize;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use search::{
    contrastive_loss, embed, embed_in, retrieve, search_loss, search_loss_in, Pooling, RetrievalIndex, SearchBatch,
    DEFAULT_TEMPERATURE,
};
pub use summarize::{generate_summary, sequence_log_prob, summarization_loss, summarization_loss_in, Strategy, SummarizationBatch};

use crate::corpus::{CorpusExample, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Summarization,
    Search,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "summarization" | "summarize" => Ok(Self::Summarization),
            "search" => Ok(Self::Search),
            other => Err(Error::Invalid(format!("unknown task `{other}` (expected summarization or search)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Summarization => "summarization",
            Self::Search => "search",
        }
    }
}

/// Turns corpus examples into model ids. When tags are on, the language tag
/// is prepended to the code side only.
#[derive(Clone, Copy, Debug)]
pub struct Encoding<'v> {
    pub vocab: &'v Vocabulary,
    pub max_len: usize,
    pub tags: bool,
}

impl Encoding<'_> {
    pub fn code(&self, ex: &CorpusExample) -> Vec<usize> {
        let mut ids = Vec::with_capacity(ex.code.len() + 1);
        if self.tags {
            if let Some(t) = self.vocab.tag_id(&ex.language) {
                ids.push(t);
            }
        }
        ids.extend(self.vocab.encode(&ex.code));
        ids.truncate(self.max_len);
        ids
    }

    /// Description ids, leaving room for BOS/EOS on the decoder side.
    pub fn description(&self, ex: &CorpusExample) -> Vec<usize> {
        let mut ids = self.vocab.encode(&ex.description);
        ids.truncate(self.max_len.saturating_sub(1).max(1));
        ids
    }
}
