//! Code/description pairs: ingestion, synthetic generation, tokenization,
//! vocabularies and per-language splits.

pub mod minilang;
mod vocab;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use vocab::{Vocabulary, BOS, EOS, MASK, PAD, UNK};

use crate::error::{Error, Result};
use minilang::{GenOptions, MiniLangSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub id: u64,
    pub language: String,
    pub code: Vec<String>,
    pub description: Vec<String>,
    /// Set when ingestion cut the code down to the length limit.
    #[serde(default)]
    pub truncated: bool,
}

const MULTI_OPS: &[&str] = &["==", "!=", "<=", ">=", "&&", "||", "->", "=>", "::", "+=", "-=", "*=", "/=", "++", "--"];

/// Whitespace + punctuation tokenizer. Identifier characters are ASCII
/// alphanumerics and non-ASCII letters; `_` is punctuation so that
/// `snake_case` splits into words.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in s.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_alphanumeric() {
                let start = i;
                while i < chars.len() && chars[i].is_alphanumeric() {
                    i += 1;
                }
                out.push(chars[start..i].iter().collect());
                continue;
            }
            if i + 1 < chars.len() {
                let pair: String = chars[i..i + 2].iter().collect();
                if MULTI_OPS.contains(&pair.as_str()) {
                    out.push(pair);
                    i += 2;
                    continue;
                }
            }
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Deserialize)]
struct RawLine {
    language: Option<String>,
    code: Option<String>,
    docstring: Option<String>,
    id: Option<u64>,
}

/// Reads CodeSearchNet-style JSONL (`language`, `code`, `docstring`,
/// optional `id`). Code longer than `max_len` tokens is truncated and flagged.
pub fn ingest_jsonl(path: &Path, accepted: &[&str], max_len: usize) -> Result<Vec<CorpusExample>> {
    let file = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(file), accepted, max_len)
}

pub fn ingest_reader<R: BufRead>(reader: R, accepted: &[&str], max_len: usize) -> Result<Vec<CorpusExample>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let field = |v: Option<String>, name: &str| {
            v.ok_or_else(|| Error::Parse { line: line_no, msg: format!("missing field `{name}`") })
        };
        let language = field(raw.language, "language")?;
        if !accepted.contains(&language.as_str()) {
            return Err(Error::UnknownLanguage { got: language, accepted: accepted.join(", ") });
        }
        let mut code = tokenize(&field(raw.code, "code")?);
        let description = tokenize(&field(raw.docstring, "docstring")?);
        if code.is_empty() || description.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "code and docstring must contain at least one token".into() });
        }
        let truncated = code.len() > max_len;
        code.truncate(max_len);
        let id = raw.id.unwrap_or(out.len() as u64);
        out.push(CorpusExample { id, language, code, description, truncated });
    }
    Ok(out)
}

#[derive(Serialize)]
struct OutLine<'a> {
    id: u64,
    language: &'a str,
    code: String,
    docstring: String,
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[CorpusExample]) -> Result<()> {
    for ex in examples {
        let line = OutLine {
            id: ex.id,
            language: &ex.language,
            code: detokenize(&ex.code),
            docstring: detokenize(&ex.description),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-language example counts for a size-imbalanced corpus: language `i`
/// of `L` gets `n / imbalance^(i/(L-1))`, so the first has `imbalance`
/// times as many examples as the last.
pub fn language_sizes(n: usize, languages: usize, imbalance: f64) -> Vec<usize> {
    (0..languages)
        .map(|i| {
            if languages == 1 || imbalance <= 1.0 {
                n
            } else {
                let f = imbalance.powf(i as f64 / (languages - 1) as f64);
                ((n as f64 / f).round() as usize).max(1)
            }
        })
        .collect()
}

/// Deterministic synthetic corpus. Each language draws from its own seed
/// derived from `seed`, so languages can be generated independently.
pub fn generate_synthetic(
    specs: &[MiniLangSpec],
    n_per_language: usize,
    imbalance: f64,
    seed: u64,
) -> Result<Vec<CorpusExample>> {
    if n_per_language == 0 {
        return Err(Error::Invalid("n_per_language must be >= 1".into()));
    }
    let sizes = language_sizes(n_per_language, specs.len(), imbalance);
    let opts = GenOptions { nested: true, ..GenOptions::default() };
    let mut out = Vec::new();
    for (li, (spec, &n)) in specs.iter().zip(&sizes).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((li as u64 + 1) << 32));
        for _ in 0..n {
            let f = minilang::generate_function(spec, &opts, &mut rng);
            out.push(CorpusExample {
                id: out.len() as u64,
                language: spec.name.to_string(),
                code: minilang::render(spec, &f),
                description: minilang::describe(spec, &f),
                truncated: false,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<CorpusExample>,
    pub dev: Vec<CorpusExample>,
    pub test: Vec<CorpusExample>,
}

impl Splits {
    pub fn languages(&self) -> Vec<String> {
        let mut langs: Vec<String> = Vec::new();
        for ex in self.train.iter().chain(&self.dev).chain(&self.test) {
            if !langs.contains(&ex.language) {
                langs.push(ex.language.clone());
            }
        }
        langs
    }
}

/// Stratified train/dev/test split. Within each language the examples are
/// shuffled with a language-specific seed and cut at the rounded fractions.
pub fn split(examples: &[CorpusExample], fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| *f < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions must be non-negative and sum to 1, got {fractions:?}")));
    }
    let mut by_lang: BTreeMap<&str, Vec<&CorpusExample>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for ex in examples {
        if !by_lang.contains_key(ex.language.as_str()) {
            order.push(&ex.language);
        }
        by_lang.entry(&ex.language).or_default().push(ex);
    }
    let mut out = Splits::default();
    for (li, lang) in order.iter().enumerate() {
        let mut group = by_lang.remove(lang).unwrap_or_default();
        if group.len() < 3 {
            return Err(Error::Invalid(format!("language `{lang}` has {} examples; at least 3 are needed", group.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(li as u64 * 7919));
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (a * n as f64).round() as usize;
        let n_dev = ((b * n as f64).round() as usize).min(n - n_train);
        for (i, ex) in group.into_iter().enumerate() {
            let dst = if i < n_train {
                &mut out.train
            } else if i < n_train + n_dev {
                &mut out.dev
            } else {
                &mut out.test
            };
            dst.push(ex.clone());
        }
    }
    Ok(out)
}

/// Groups examples by language, preserving first-seen language order.
pub fn by_language(examples: &[CorpusExample]) -> Vec<(String, Vec<&CorpusExample>)> {
    let mut out: Vec<(String, Vec<&CorpusExample>)> = Vec::new();
    for ex in examples {
        match out.iter_mut().find(|(l, _)| *l == ex.language) {
            Some((_, v)) => v.push(ex),
            None => out.push((ex.language.clone(), vec![ex])),
        }
    }
    out
}
