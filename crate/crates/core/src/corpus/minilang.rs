//! Synthetic mini-languages: one shared grammar, language-specific spellings.
//!
//! ```text
//! function := FN name '(' params ')' OPEN stmt* CLOSE
//! stmt     := decl '=' expr ';' | ident '=' expr ';'
//!           | IF '(' cond ')' OPEN stmt* CLOSE [ELSE OPEN stmt* CLOSE]
//!           | LOOP '(' cond ')' OPEN stmt* CLOSE
//!           | RETURN expr ';' | function
//! cond     := cmp ((AND | OR) cmp)*
//! cmp      := atom relop atom
//! expr     := atom (arith atom)*
//! ```
//!
//! `name` is `verb _ noun`; declarations follow the language's [`DeclStyle`].

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DeclStyle {
    /// `int x`
    TypeFirst,
    /// `x : int`
    NameColonType,
    /// `x int`
    NameType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MiniLangSpec {
    pub name: &'static str,
    pub fn_kw: &'static str,
    pub if_kw: &'static str,
    pub else_kw: &'static str,
    pub loop_kw: &'static str,
    pub return_kw: &'static str,
    pub and_op: &'static str,
    pub or_op: &'static str,
    pub block_open: &'static str,
    pub block_close: &'static str,
    pub types: &'static [&'static str],
    pub decl: DeclStyle,
}

impl MiniLangSpec {
    pub fn keywords(&self) -> Vec<&'static str> {
        vec![
            self.fn_kw,
            self.if_kw,
            self.else_kw,
            self.loop_kw,
            self.return_kw,
            self.and_op,
            self.or_op,
            self.block_open,
            self.block_close,
        ]
    }

    pub fn is_type(&self, tok: &str) -> bool {
        self.types.contains(&tok)
    }

    /// Tokens that open a decision point.
    pub fn is_decision(&self, tok: &str) -> bool {
        tok == self.if_kw || tok == self.loop_kw || tok == self.and_op || tok == self.or_op
    }
}

const LANGUAGES: [MiniLangSpec; 6] = [
    MiniLangSpec {
        name: "ruby",
        fn_kw: "def",
        if_kw: "if",
        else_kw: "else",
        loop_kw: "while",
        return_kw: "return",
        and_op: "and",
        or_op: "or",
        block_open: "do",
        block_close: "end",
        types: &["Integer", "Float", "String", "Array"],
        decl: DeclStyle::NameColonType,
    },
    MiniLangSpec {
        name: "javascript",
        fn_kw: "function",
        if_kw: "if",
        else_kw: "else",
        loop_kw: "while",
        return_kw: "return",
        and_op: "&&",
        or_op: "||",
        block_open: "{",
        block_close: "}",
        types: &["number", "string", "boolean", "object"],
        decl: DeclStyle::NameColonType,
    },
    MiniLangSpec {
        name: "go",
        fn_kw: "func",
        if_kw: "if",
        else_kw: "else",
        loop_kw: "for",
        return_kw: "return",
        and_op: "&&",
        or_op: "||",
        block_open: "{",
        block_close: "}",
        types: &["int", "float64", "string", "bool"],
        decl: DeclStyle::NameType,
    },
    MiniLangSpec {
        name: "python",
        fn_kw: "def",
        if_kw: "if",
        else_kw: "else",
        loop_kw: "while",
        return_kw: "return",
        and_op: "and",
        or_op: "or",
        block_open: ":",
        block_close: "pass",
        types: &["int", "float", "str", "list"],
        decl: DeclStyle::NameColonType,
    },
    MiniLangSpec {
        name: "java",
        fn_kw: "public",
        if_kw: "if",
        else_kw: "else",
        loop_kw: "while",
        return_kw: "return",
        and_op: "&&",
        or_op: "||",
        block_open: "{",
        block_close: "}",
        types: &["int", "double", "String", "boolean"],
        decl: DeclStyle::TypeFirst,
    },
    MiniLangSpec {
        name: "php",
        fn_kw: "function",
        if_kw: "if",
        else_kw: "else",
        loop_kw: "foreach",
        return_kw: "return",
        and_op: "and",
        or_op: "or",
        block_open: "{",
        block_close: "}",
        types: &["int", "float", "string", "array"],
        decl: DeclStyle::TypeFirst,
    },
];

/// The six built-in mini-languages, in table-column order.
pub fn builtin_languages() -> &'static [MiniLangSpec] {
    &LANGUAGES
}

/// The first `n` built-in languages (n in 1..=6).
pub fn languages(n: usize) -> &'static [MiniLangSpec] {
    &LANGUAGES[..n.clamp(1, LANGUAGES.len())]
}

pub fn lookup(name: &str) -> Option<&'static MiniLangSpec> {
    LANGUAGES.iter().find(|l| l.name == name)
}

pub const VERBS: &[&str] = &["get", "set", "compute", "find", "update", "check", "load", "parse", "build", "count"];
pub const NOUNS: &[&str] = &["value", "queue", "index", "total", "name", "item", "user", "node", "score", "path"];
pub const PARAMS: &[&str] = &["a", "b", "x", "y", "n", "num", "items", "key", "data", "size"];
pub const LOCALS: &[&str] = &["i", "j", "tmp", "res", "acc", "val", "flag", "sum"];
pub const RELOPS: &[&str] = &["<", ">", "==", "!=", "<=", ">="];
pub const ARITH: &[&str] = &["+", "-", "*"];

/// Identifiers that are not a type in any built-in language.
pub const FAKE_TYPES: &[&str] = &["Thing", "Blob", "Widget", "Record", "Handle"];

#[derive(Clone, Debug, PartialEq)]
pub enum Atom {
    Var(String),
    Num(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    pub first: Atom,
    pub rest: Vec<(&'static str, Atom)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Logic {
    And,
    Or,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cmp {
    pub lhs: Atom,
    pub op: &'static str,
    pub rhs: Atom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cond {
    pub first: Cmp,
    pub rest: Vec<(Logic, Cmp)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stmt {
    Decl { ty: String, name: String, value: Expr },
    Assign { name: String, value: Expr },
    If { cond: Cond, then: Vec<Stmt>, otherwise: Option<Vec<Stmt>> },
    Loop { cond: Cond, body: Vec<Stmt> },
    Return(Expr),
    Func(Function),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Function {
    pub verb: String,
    pub noun: String,
    pub params: Vec<(String, String)>,
    pub body: Vec<Stmt>,
}

impl Function {
    /// Decision points: conditionals, loops and short-circuit operators.
    pub fn decision_points(&self) -> usize {
        fn cond(c: &Cond) -> usize {
            c.rest.len()
        }
        fn block(b: &[Stmt]) -> usize {
            b.iter()
                .map(|s| match s {
                    Stmt::If { cond: c, then, otherwise } => {
                        1 + cond(c) + block(then) + otherwise.as_deref().map_or(0, block)
                    }
                    Stmt::Loop { cond: c, body } => 1 + cond(c) + block(body),
                    Stmt::Func(f) => f.decision_points(),
                    _ => 0,
                })
                .sum()
        }
        block(&self.body)
    }

    pub fn has_loop(&self) -> bool {
        fn any(b: &[Stmt]) -> bool {
            b.iter().any(|s| match s {
                Stmt::Loop { .. } => true,
                Stmt::If { then, otherwise, .. } => any(then) || otherwise.as_deref().is_some_and(any),
                _ => false,
            })
        }
        any(&self.body)
    }

    pub fn has_branch(&self) -> bool {
        fn any(b: &[Stmt]) -> bool {
            b.iter().any(|s| match s {
                Stmt::If { .. } => true,
                Stmt::Loop { body, .. } => any(body),
                _ => false,
            })
        }
        any(&self.body)
    }

    pub fn returns(&self) -> bool {
        self.body.iter().any(|s| matches!(s, Stmt::Return(_)))
    }
}

fn atom_tokens(a: &Atom, out: &mut Vec<String>) {
    match a {
        Atom::Var(v) => out.push(v.clone()),
        Atom::Num(n) => out.push(n.to_string()),
    }
}

fn expr_tokens(e: &Expr, out: &mut Vec<String>) {
    atom_tokens(&e.first, out);
    for (op, a) in &e.rest {
        out.push((*op).to_string());
        atom_tokens(a, out);
    }
}

fn cond_tokens(spec: &MiniLangSpec, c: &Cond, out: &mut Vec<String>) {
    let cmp = |c: &Cmp, out: &mut Vec<String>| {
        atom_tokens(&c.lhs, out);
        out.push(c.op.to_string());
        atom_tokens(&c.rhs, out);
    };
    cmp(&c.first, out);
    for (l, c) in &c.rest {
        out.push(match l {
            Logic::And => spec.and_op,
            Logic::Or => spec.or_op,
        }
        .to_string());
        cmp(c, out);
    }
}

fn decl_tokens(spec: &MiniLangSpec, ty: &str, name: &str, out: &mut Vec<String>) {
    match spec.decl {
        DeclStyle::TypeFirst => out.extend([ty.to_string(), name.to_string()]),
        DeclStyle::NameColonType => out.extend([name.to_string(), ":".to_string(), ty.to_string()]),
        DeclStyle::NameType => out.extend([name.to_string(), ty.to_string()]),
    }
}

fn block_tokens(spec: &MiniLangSpec, body: &[Stmt], out: &mut Vec<String>) {
    out.push(spec.block_open.to_string());
    for s in body {
        stmt_tokens(spec, s, out);
    }
    out.push(spec.block_close.to_string());
}

fn stmt_tokens(spec: &MiniLangSpec, s: &Stmt, out: &mut Vec<String>) {
    match s {
        Stmt::Decl { ty, name, value } => {
            decl_tokens(spec, ty, name, out);
            out.push("=".into());
            expr_tokens(value, out);
            out.push(";".into());
        }
        Stmt::Assign { name, value } => {
            out.extend([name.clone(), "=".into()]);
            expr_tokens(value, out);
            out.push(";".into());
        }
        Stmt::If { cond, then, otherwise } => {
            out.extend([spec.if_kw.to_string(), "(".into()]);
            cond_tokens(spec, cond, out);
            out.push(")".into());
            block_tokens(spec, then, out);
            if let Some(o) = otherwise {
                out.push(spec.else_kw.to_string());
                block_tokens(spec, o, out);
            }
        }
        Stmt::Loop { cond, body } => {
            out.extend([spec.loop_kw.to_string(), "(".into()]);
            cond_tokens(spec, cond, out);
            out.push(")".into());
            block_tokens(spec, body, out);
        }
        Stmt::Return(e) => {
            out.push(spec.return_kw.to_string());
            expr_tokens(e, out);
            out.push(";".into());
        }
        Stmt::Func(f) => out.extend(render(spec, f)),
    }
}

/// Token sequence of a function in the given language.
pub fn render(spec: &MiniLangSpec, f: &Function) -> Vec<String> {
    let mut out = vec![spec.fn_kw.to_string(), f.verb.clone(), "_".into(), f.noun.clone(), "(".into()];
    for (i, (ty, name)) in f.params.iter().enumerate() {
        if i > 0 {
            out.push(",".into());
        }
        decl_tokens(spec, ty, name, &mut out);
    }
    out.push(")".into());
    block_tokens(spec, &f.body, &mut out);
    out
}

/// Template description of the function's structure; each language has its
/// own docstring phrasing.
pub fn describe(spec: &MiniLangSpec, f: &Function) -> Vec<String> {
    let (verb, noun) = (f.verb.as_str(), f.noun.as_str());
    let first = f.params.first().map_or("input", |(_, n)| n.as_str());
    let lp = f.has_loop();
    let br = f.has_branch();
    let mut w: Vec<&str> = Vec::new();
    match spec.name {
        "ruby" => {
            w.extend([verb, "the", noun]);
            if lp {
                w.extend(["in", "a", "loop"]);
            }
            if br {
                w.extend(["if", "needed"]);
            }
        }
        "javascript" => {
            w.extend([verb, noun, "from", first]);
            if lp {
                w.extend(["with", "iteration"]);
            }
            if br {
                w.extend(["and", "a", "check"]);
            }
        }
        "go" => {
            w.extend(["this", "will", verb, "the", noun]);
            if br {
                w.extend(["with", "a", "check"]);
            }
            if lp {
                w.extend(["by", "looping"]);
            }
        }
        "python" => {
            w.extend([verb, "the", noun, "of", first]);
            if lp {
                w.extend(["using", "a", "loop"]);
            }
            if br {
                w.extend(["and", "a", "condition"]);
            }
        }
        "java" => {
            w.extend(["method", "to", verb, noun]);
            if lp {
                w.extend(["by", "looping"]);
            }
            if br {
                w.extend(["when", first, "is", "valid"]);
            }
        }
        _ => {
            w.extend([verb, "a", noun]);
            if br {
                w.extend(["when", first, "is", "valid"]);
            }
            if lp {
                w.extend(["in", "a", "loop"]);
            }
        }
    }
    if f.returns() && spec.name != "go" {
        w.extend(["and", "return", "it"]);
    }
    w.into_iter().map(String::from).collect()
}

/// Generation controls. Unset targets are sampled from small ranges.
#[derive(Clone, Debug, Default)]
pub struct GenOptions {
    /// Exact number of decision points.
    pub decisions: Option<usize>,
    /// Half-open token-length window `[lo, hi)`.
    pub length: Option<(usize, usize)>,
    /// Allow a nested helper function.
    pub nested: bool,
}

struct Builder<'a, R: Rng> {
    spec: &'a MiniLangSpec,
    rng: &'a mut R,
    vars: Vec<String>,
}

impl<R: Rng> Builder<'_, R> {
    fn atom(&mut self) -> Atom {
        if self.rng.random_bool(0.65) {
            Atom::Var(self.vars.choose(self.rng).expect("non-empty scope").clone())
        } else {
            Atom::Num(self.rng.random_range(0..10))
        }
    }

    fn expr(&mut self) -> Expr {
        let first = self.atom();
        let extra = self.rng.random_range(0..=2);
        let rest = (0..extra).map(|_| (*ARITH.choose(self.rng).unwrap(), self.atom())).collect();
        Expr { first, rest }
    }

    fn cmp(&mut self) -> Cmp {
        let lhs = Atom::Var(self.vars.choose(self.rng).unwrap().clone());
        let op = *RELOPS.choose(self.rng).unwrap();
        let rhs = self.atom();
        Cmp { lhs, op, rhs }
    }

    fn cond(&mut self, extra: usize) -> Cond {
        let first = self.cmp();
        let rest = (0..extra)
            .map(|_| (if self.rng.random_bool(0.5) { Logic::And } else { Logic::Or }, self.cmp()))
            .collect();
        Cond { first, rest }
    }

    fn simple(&mut self) -> Stmt {
        let name = (*LOCALS.choose(self.rng).unwrap()).to_string();
        let value = self.expr();
        if self.vars.contains(&name) && self.rng.random_bool(0.5) {
            Stmt::Assign { name, value }
        } else {
            let ty = (*self.spec.types.choose(self.rng).unwrap()).to_string();
            if !self.vars.contains(&name) {
                self.vars.push(name.clone());
            }
            Stmt::Decl { ty, name, value }
        }
    }

    /// A decision statement consuming `cost` decision points (>= 1).
    fn decision(&mut self, cost: usize) -> Stmt {
        let extra = cost - 1;
        let cond = self.cond(extra);
        let body = vec![self.simple()];
        if self.rng.random_bool(0.6) {
            let otherwise = self.rng.random_bool(0.4).then(|| vec![self.simple()]);
            Stmt::If { cond, then: body, otherwise }
        } else {
            Stmt::Loop { cond, body }
        }
    }

    fn function(&mut self, decisions: usize, nested: bool) -> Function {
        let verb = (*VERBS.choose(self.rng).unwrap()).to_string();
        let noun = (*NOUNS.choose(self.rng).unwrap()).to_string();
        let n_params = self.rng.random_range(1..=3);
        let mut names: Vec<&str> = PARAMS.choose_multiple(self.rng, n_params).copied().collect();
        names.sort_unstable();
        let params: Vec<(String, String)> = names
            .iter()
            .map(|n| ((*self.spec.types.choose(self.rng).unwrap()).to_string(), (*n).to_string()))
            .collect();
        self.vars = params.iter().map(|(_, n)| n.clone()).collect();

        let mut body = Vec::new();
        for _ in 0..self.rng.random_range(0..=2) {
            body.push(self.simple());
        }
        let mut left = decisions;
        while left > 0 {
            let cost = self.rng.random_range(1..=left.min(3));
            let stmt = self.decision(cost);
            left -= cost;
            // occasionally nest inside the previous decision block
            let nest_target = body.iter_mut().rev().find_map(|s| match s {
                Stmt::If { then, .. } => Some(then),
                Stmt::Loop { body, .. } => Some(body),
                _ => None,
            });
            match nest_target {
                Some(block) if self.rng.random_bool(0.3) => block.push(stmt),
                _ => body.push(stmt),
            }
        }
        if nested && self.rng.random_bool(0.15) {
            let saved = self.vars.clone();
            let inner = self.function(0, false);
            self.vars = saved;
            body.insert(0, Stmt::Func(inner));
        }
        if self.rng.random_bool(0.8) {
            body.push(Stmt::Return(self.expr()));
        }
        Function { verb, noun, params, body }
    }
}

/// Samples one well-formed function.
pub fn generate_function<R: Rng>(spec: &MiniLangSpec, opts: &GenOptions, rng: &mut R) -> Function {
    loop {
        let decisions = opts.decisions.unwrap_or_else(|| rng.random_range(0..=3));
        let mut b = Builder { spec, rng: &mut *rng, vars: Vec::new() };
        let mut f = b.function(decisions, opts.nested);
        let Some((lo, hi)) = opts.length else { return f };
        let mut len = render(spec, &f).len();
        while len < lo {
            let s = b.simple();
            let at = if f.returns() { f.body.len() - 1 } else { f.body.len() };
            f.body.insert(at, s);
            len = render(spec, &f).len();
        }
        if len < hi {
            return f;
        }
    }
}
