use std::collections::HashSet;
use std::io::Cursor;

use proptest::prelude::*;

use super::minilang::{self, languages};
use super::*;
use crate::probing::analyzer::{parse, TypeCheck};

const ACCEPTED: &[&str] = &["ruby", "javascript", "go", "python"];

fn ingest(text: &str) -> Result<Vec<CorpusExample>> {
    ingest_reader(Cursor::new(text), ACCEPTED, 256)
}

#[test]
fn tokenizer_splits_words_and_punctuation() {
    let t = tokenize("if (a_b >= 10) { return x; }");
    assert_eq!(t, ["if", "(", "a", "_", "b", ">=", "10", ")", "{", "return", "x", ";", "}"]);
}

proptest! {
    #[test]
    fn round_trip_only_normalizes_whitespace(words in prop::collection::vec("[a-z]{1,6}|[(){};,]|==|&&", 1..20),
                                             gaps in prop::collection::vec("[ \t\n]{1,3}", 20)) {
        let mut s = String::new();
        for (i, w) in words.iter().enumerate() {
            s.push_str(w);
            s.push_str(&gaps[i]);
        }
        prop_assert_eq!(detokenize(&tokenize(&s)), words.join(" "));
    }
}

#[test]
fn empty_file_gives_empty_list() {
    assert!(ingest("").unwrap().is_empty());
}

#[test]
fn ids_follow_line_order() {
    let line = r#"{"language":"go","code":"func f ( ) { }","docstring":"does f"}"#;
    let ex = ingest(&[line, line, line].join("\n")).unwrap();
    assert_eq!(ex.iter().map(|e| e.id).collect::<Vec<_>>(), [0, 1, 2]);
    assert_eq!(ex[0].description, ["does", "f"]);
}

#[test]
fn missing_field_names_field_and_line() {
    let text = "{\"language\":\"go\",\"code\":\"x\",\"docstring\":\"y\"}\n{\"language\":\"go\",\"docstring\":\"y\"}";
    let err = ingest(text).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("code"), "{err}");
}

#[test]
fn malformed_json_reports_line() {
    let err = ingest("{\"language\":").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
}

#[test]
fn unknown_language_lists_accepted() {
    let err = ingest(r#"{"language":"cobol","code":"x","docstring":"y"}"#).unwrap_err().to_string();
    assert!(err.contains("cobol") && err.contains("ruby, javascript, go, python"), "{err}");
}

#[test]
fn overlong_code_is_truncated_and_flagged() {
    let code = vec!["x"; 20].join(" ");
    let line = format!(r#"{{"language":"go","code":"{code}","docstring":"d"}}"#);
    let ex = ingest_reader(Cursor::new(line), ACCEPTED, 8).unwrap();
    assert_eq!(ex[0].code.len(), 8);
    assert!(ex[0].truncated);
}

#[test]
fn jsonl_export_reingests() {
    let corpus = generate_synthetic(languages(4), 5, 1.0, 3).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &corpus).unwrap();
    let back = ingest_reader(Cursor::new(buf), ACCEPTED, 10_000).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn generation_is_deterministic_and_counted() {
    let a = generate_synthetic(languages(4), 500, 1.0, 11).unwrap();
    let b = generate_synthetic(languages(4), 500, 1.0, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2000);
    for lang in ACCEPTED {
        assert_eq!(a.iter().filter(|e| e.language == *lang).count(), 500);
    }
    assert!(a.iter().all(|e| !e.code.is_empty() && !e.description.is_empty()));
}

#[test]
fn imbalance_sets_size_ratio() {
    let sizes = language_sizes(1000, 4, 10.0);
    assert_eq!(sizes[0], 1000);
    assert_eq!(sizes[3], 100);
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn every_generated_program_parses() {
    let corpus = generate_synthetic(minilang::builtin_languages(), 300, 1.0, 5).unwrap();
    for ex in &corpus {
        let spec = minilang::lookup(&ex.language).unwrap();
        parse(spec, &ex.code, TypeCheck::Strict).unwrap_or_else(|e| panic!("{e}: {}", ex.code.join(" ")));
    }
}

#[test]
fn generator_covers_every_keyword() {
    for spec in minilang::builtin_languages() {
        let corpus = generate_synthetic(std::slice::from_ref(spec), 1000, 1.0, 9).unwrap();
        let seen: HashSet<&str> = corpus.iter().flat_map(|e| e.code.iter().map(String::as_str)).collect();
        for kw in spec.keywords().into_iter().chain(spec.types.iter().copied()) {
            assert!(seen.contains(kw), "{}: `{kw}` never generated", spec.name);
        }
    }
}

#[test]
fn descriptions_reflect_structure() {
    let spec = minilang::lookup("python").unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    for _ in 0..200 {
        let f = minilang::generate_function(spec, &minilang::GenOptions::default(), &mut rng);
        let d = minilang::describe(spec, &f);
        assert_eq!(d[0], f.verb);
        assert_eq!(d.contains(&"loop".to_string()), f.has_loop());
    }
}

#[test]
fn length_targets_are_met() {
    let spec = minilang::lookup("java").unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    for (lo, hi) in [(0, 50), (100, 150), (200, 250)] {
        let opts = minilang::GenOptions { length: Some((lo, hi)), ..Default::default() };
        for _ in 0..20 {
            let n = minilang::render(spec, &minilang::generate_function(spec, &opts, &mut rng)).len();
            assert!((lo..hi).contains(&n), "{n} not in [{lo},{hi})");
        }
    }
}

fn sample(n_per: usize) -> Vec<CorpusExample> {
    generate_synthetic(languages(2), n_per, 1.0, 4).unwrap()
}

#[test]
fn split_all_train() {
    let s = split(&sample(10), (1.0, 0.0, 0.0), 0).unwrap();
    assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (20, 0, 0));
}

#[test]
fn split_counts_per_language() {
    let ex = generate_synthetic(languages(1), 100, 1.0, 4).unwrap();
    let s = split(&ex, (0.8, 0.1, 0.1), 0).unwrap();
    assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (80, 10, 10));
}

#[test]
fn split_is_a_deterministic_partition() {
    let ex = sample(37);
    let s = split(&ex, (0.7, 0.15, 0.15), 8).unwrap();
    assert_eq!(s, split(&ex, (0.7, 0.15, 0.15), 8).unwrap());
    let mut ids: Vec<u64> = s.train.iter().chain(&s.dev).chain(&s.test).map(|e| e.id).collect();
    ids.sort_unstable();
    assert_eq!(ids, ex.iter().map(|e| e.id).collect::<Vec<_>>());
}

#[test]
fn split_rejects_tiny_language() {
    let ex = sample(2);
    assert!(split(&ex, (0.8, 0.1, 0.1), 0).is_err());
    assert!(split(&sample(5), (0.5, 0.1, 0.1), 0).is_err());
}

#[test]
fn vocabulary_layout() {
    let ex = sample(20);
    let langs = vec!["ruby".to_string(), "javascript".to_string()];
    let v = Vocabulary::build(&ex, &langs, true, 1);
    assert_eq!(v.token(PAD), "<pad>");
    assert_eq!(v.token(MASK), "<mask>");
    assert_eq!(v.tag_id("ruby"), Some(5));
    assert_eq!(v.tag_id("javascript"), Some(6));
    assert_eq!(v.first_word_id(), 7);
    assert_eq!(v.id("never-seen"), UNK);
    let no_tags = Vocabulary::build(&ex, &langs, false, 1);
    assert_eq!(no_tags.tag_id("ruby"), None);
    assert_eq!(no_tags.len() + 2, v.len());
    for id in v.first_word_id()..v.len() {
        assert_eq!(v.id(v.token(id)), id);
    }
    assert_eq!(Vocabulary::from_meta(&v.to_meta()).unwrap(), v);
}
