//! Static analysis over mini-language token streams.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::minilang::{DeclStyle, MiniLangSpec, ARITH, RELOPS};
use crate::error::{Error, Result};

/// Length class: `[0,50) [50,100) [100,150) [150,200) [200,inf)`.
pub fn label_len(tokens: &[String]) -> usize {
    (tokens.len() / 50).min(4)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TypeCheck {
    /// Type positions must hold one of the language's type names.
    Strict,
    /// Any identifier is accepted in a type position.
    Lenient,
}

/// Summary of a successful parse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseInfo {
    pub decision_points: usize,
    pub functions: usize,
    /// Token positions that the grammar reads as types.
    pub type_positions: Vec<usize>,
}

struct Parser<'a> {
    spec: &'a MiniLangSpec,
    toks: &'a [String],
    pos: usize,
    check: TypeCheck,
    info: ParseInfo,
}

impl<'a> Parser<'a> {
    fn peek(&self, ahead: usize) -> Option<&'a str> {
        self.toks.get(self.pos + ahead).map(String::as_str)
    }

    fn fail<T>(&self, what: &str) -> Result<T> {
        let got = self.peek(0).unwrap_or("end of input");
        Err(Error::Parse { line: self.pos, msg: format!("expected {what}, found `{got}`") })
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        if self.peek(0) == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&format!("`{tok}`"))
        }
    }

    fn is_keyword(&self, t: &str) -> bool {
        self.spec.keywords().contains(&t)
    }

    fn is_word(t: &str) -> bool {
        t.chars().next().is_some_and(char::is_alphabetic) && t.chars().all(char::is_alphanumeric)
    }

    fn ident(&mut self) -> Result<()> {
        match self.peek(0) {
            Some(t) if Self::is_word(t) && !self.is_keyword(t) && !self.spec.is_type(t) => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail("identifier"),
        }
    }

    fn ty(&mut self) -> Result<()> {
        let ok = match self.peek(0) {
            Some(t) => match self.check {
                TypeCheck::Strict => self.spec.is_type(t),
                TypeCheck::Lenient => Self::is_word(t) && !self.is_keyword(t),
            },
            None => false,
        };
        if !ok {
            return self.fail("type name");
        }
        self.info.type_positions.push(self.pos);
        self.pos += 1;
        Ok(())
    }

    fn atom(&mut self) -> Result<()> {
        match self.peek(0) {
            Some(t) if t.chars().all(|c| c.is_ascii_digit()) => {
                self.pos += 1;
                Ok(())
            }
            _ => self.ident(),
        }
    }

    fn expr(&mut self) -> Result<()> {
        self.atom()?;
        while self.peek(0).is_some_and(|t| ARITH.contains(&t)) {
            self.pos += 1;
            self.atom()?;
        }
        Ok(())
    }

    fn cond(&mut self) -> Result<()> {
        loop {
            self.atom()?;
            match self.peek(0) {
                Some(t) if RELOPS.contains(&t) => self.pos += 1,
                _ => return self.fail("comparison operator"),
            }
            self.atom()?;
            match self.peek(0) {
                Some(t) if t == self.spec.and_op || t == self.spec.or_op => {
                    self.info.decision_points += 1;
                    self.pos += 1;
                }
                _ => return Ok(()),
            }
        }
    }

    fn decl(&mut self) -> Result<()> {
        match self.spec.decl {
            DeclStyle::TypeFirst => {
                self.ty()?;
                self.ident()
            }
            DeclStyle::NameColonType => {
                self.ident()?;
                self.expect(":")?;
                self.ty()
            }
            DeclStyle::NameType => {
                self.ident()?;
                self.ty()
            }
        }
    }

    fn block(&mut self) -> Result<()> {
        self.expect(self.spec.block_open)?;
        while self.peek(0) != Some(self.spec.block_close) {
            if self.peek(0).is_none() {
                return self.fail(&format!("`{}`", self.spec.block_close));
            }
            self.stmt()?;
        }
        self.pos += 1;
        Ok(())
    }

    fn guarded(&mut self) -> Result<()> {
        self.info.decision_points += 1;
        self.pos += 1;
        self.expect("(")?;
        self.cond()?;
        self.expect(")")?;
        self.block()
    }

    fn stmt(&mut self) -> Result<()> {
        let s = self.spec;
        match self.peek(0) {
            Some(t) if t == s.if_kw => {
                self.guarded()?;
                if self.peek(0) == Some(s.else_kw) {
                    self.pos += 1;
                    self.block()?;
                }
                Ok(())
            }
            Some(t) if t == s.loop_kw => self.guarded(),
            Some(t) if t == s.return_kw => {
                self.pos += 1;
                self.expr()?;
                self.expect(";")
            }
            Some(t) if t == s.fn_kw => self.function(),
            Some(_) if self.peek(1) == Some("=") => {
                self.ident()?;
                self.pos += 1;
                self.expr()?;
                self.expect(";")
            }
            Some(_) => {
                self.decl()?;
                self.expect("=")?;
                self.expr()?;
                self.expect(";")
            }
            None => self.fail("statement"),
        }
    }

    fn function(&mut self) -> Result<()> {
        self.expect(self.spec.fn_kw)?;
        self.ident()?;
        self.expect("_")?;
        self.ident()?;
        self.expect("(")?;
        if self.peek(0) != Some(")") {
            self.decl()?;
            while self.peek(0) == Some(",") {
                self.pos += 1;
                self.decl()?;
            }
        }
        self.expect(")")?;
        self.block()?;
        self.info.functions += 1;
        Ok(())
    }
}

/// Parses one top-level function under the mini-language grammar.
pub fn parse(spec: &MiniLangSpec, tokens: &[String], check: TypeCheck) -> Result<ParseInfo> {
    let mut p = Parser {
        spec,
        toks: tokens,
        pos: 0,
        check,
        info: ParseInfo { decision_points: 0, functions: 0, type_positions: Vec::new() },
    };
    p.function()?;
    if p.pos != tokens.len() {
        return p.fail("end of input");
    }
    Ok(p.info)
}

/// Decision-point count by keyword scan; works on any token stream.
pub fn scan_decision_points(spec: &MiniLangSpec, tokens: &[String]) -> usize {
    tokens.iter().filter(|t| spec.is_decision(t)).count()
}

/// Complexity class in `0..=9` from the grammar, falling back to a token
/// scan for code the grammar rejects when `fallback` is set.
pub fn label_cpx(spec: &MiniLangSpec, tokens: &[String], fallback: bool) -> Result<usize> {
    let n = match parse(spec, tokens, TypeCheck::Lenient) {
        Ok(info) => info.decision_points,
        Err(_) if fallback => scan_decision_points(spec, tokens),
        Err(e) => return Err(e),
    };
    Ok(n.min(9))
}

/// Replaces one uniformly chosen type occurrence with a uniformly chosen
/// identifier from `pool` that is not a type of `spec`.
pub fn mutate_types(spec: &MiniLangSpec, tokens: &[String], pool: &[&str], seed: u64) -> Result<(Vec<String>, usize)> {
    let positions: Vec<usize> = (0..tokens.len()).filter(|&i| spec.is_type(&tokens[i])).collect();
    if positions.is_empty() {
        return Err(Error::Invalid("code has no type tokens to mutate".into()));
    }
    let mut candidates: Vec<&str> = pool.iter().copied().filter(|t| !spec.is_type(t)).collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::Invalid("replacement pool has no non-type identifiers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let at = positions[rng.random_range(0..positions.len())];
    let with = *candidates.choose(&mut rng).expect("non-empty");
    let mut out = tokens.to_vec();
    out[at] = with.to_string();
    Ok((out, 1))
}

/// Default replacement pool: type names of the other given languages plus
/// a few identifiers that are types nowhere.
pub fn type_pool(languages: &[MiniLangSpec]) -> Vec<&'static str> {
    let mut pool: Vec<&'static str> = languages.iter().flat_map(|l| l.types.iter().copied()).collect();
    pool.extend(crate::corpus::minilang::FAKE_TYPES);
    pool.sort_unstable();
    pool.dedup();
    pool
}
