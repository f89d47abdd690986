use std::collections::HashMap;

use indexmap::IndexMap;

use super::CorpusExample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// Word-level vocabulary. Layout: the five specials, then one tag per
/// language (if enabled), then corpus tokens by descending frequency with
/// lexical tie-break.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    languages: Vec<String>,
    tags: bool,
}

pub fn tag_token(language: &str) -> String {
    format!("<{language}>")
}

impl Vocabulary {
    pub fn build<'a>(
        examples: impl IntoIterator<Item = &'a CorpusExample>,
        languages: &[String],
        tags: bool,
        min_freq: usize,
    ) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for ex in examples {
            for t in ex.code.iter().chain(&ex.description) {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        if tags {
            tokens.extend(languages.iter().map(|l| tag_token(l)));
        }
        for (w, _) in words {
            if !SPECIALS.contains(&w) && !(tags && languages.iter().any(|l| tag_token(l) == w)) {
                tokens.push(w.to_string());
            }
        }
        Self::from_parts(tokens, languages.to_vec(), tags)
    }

    fn from_parts(tokens: Vec<String>, languages: Vec<String>, tags: bool) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index, languages, tags }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn has_tags(&self) -> bool {
        self.tags
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tag_id(&self, language: &str) -> Option<usize> {
        if !self.tags {
            return None;
        }
        self.index.get(&tag_token(language)).copied()
    }

    /// First id that is neither a special nor a language tag.
    pub fn first_word_id(&self) -> usize {
        SPECIALS.len() + if self.tags { self.languages.len() } else { 0 }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Token strings for `ids`, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn to_meta(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        m.insert("vocab.languages".into(), self.languages.join(","));
        m.insert("vocab.tags".into(), self.tags.to_string());
        m.insert("vocab.tokens".into(), self.tokens.join("\n"));
        m
    }

    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Format(format!("missing `{k}`")));
        let tokens: Vec<String> = get("vocab.tokens")?.split('\n').map(String::from).collect();
        let languages: Vec<String> =
            get("vocab.languages")?.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
        let tags = get("vocab.tags")? == "true";
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary does not start with the reserved specials".into()));
        }
        Ok(Self::from_parts(tokens, languages, tags))
    }
}
