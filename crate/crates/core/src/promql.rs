//! Alert definitions and a practical PromQL subset parser.
//!
//! The grammar covers the alert shapes we care about: one metric selector,
//! an optional `rate`/`increase` over a range window, an optional outer
//! aggregation with `by(...)`, and an optional scalar comparison. Anything
//! else (subqueries, `offset`, vector binary ops) is rejected loudly via
//! [`ParseError::Unsupported`] instead of being silently mis-scoped.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

/// A Prometheus-style alert rule as loaded from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertDefinition {
    pub name: String,
    pub expr: String,
    /// Sustain period in seconds (`for` in the rule file).
    #[serde(rename = "for", with = "duration_text")]
    pub for_duration: u64,
    pub severity: Severity,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
    /// Epoch millis at which the rule entered the firing state.
    pub fired_at: i64,
    /// Evaluation lookback in seconds.
    #[serde(rename = "window", with = "duration_text")]
    pub window_hint: u64,
}

impl AlertDefinition {
    pub fn from_json(text: &str) -> Result<Self, AlertLoadError> {
        let def: AlertDefinition = serde_json::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn validate(&self) -> Result<(), AlertLoadError> {
        if self.expr.trim().is_empty() {
            return Err(AlertLoadError::Invalid("expr is empty".into()));
        }
        if self.fired_at <= 0 {
            return Err(AlertLoadError::Invalid("fired_at must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AlertLoadError {
    #[error("alert JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("alert definition invalid: {0}")]
    Invalid(String),
}

mod duration_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(secs: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{secs}s"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        super::parse_duration(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses `90s`, `5m`, `2h`, `1d` and compounds like `1m30s` into seconds.
pub fn parse_duration(text: &str) -> Result<u64, String> {
    let bytes = text.as_bytes();
    let mut i = 0;
    let mut total: u64 = 0;
    let mut any = false;
    while i < bytes.len() {
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return Err(format!("invalid duration {text:?}"));
        }
        let value: u64 = text[start..i]
            .parse()
            .map_err(|_| format!("invalid duration {text:?}"))?;
        let unit = match bytes.get(i) {
            Some(b's') => 1,
            Some(b'm') => 60,
            Some(b'h') => 3600,
            Some(b'd') => 86400,
            _ => return Err(format!("invalid duration unit in {text:?}")),
        };
        i += 1;
        total += value * unit;
        any = true;
    }
    if !any {
        return Err(format!("empty duration {text:?}"));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchOp {
    Eq,
    Neq,
    Regex,
    Nregex,
}

impl MatchOp {
    fn symbol(self) -> &'static str {
        match self {
            MatchOp::Eq => "=",
            MatchOp::Neq => "!=",
            MatchOp::Regex => "=~",
            MatchOp::Nregex => "!~",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelMatcher {
    pub key: String,
    pub op: MatchOp,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeFn {
    Rate,
    Increase,
}

impl fmt::Display for RangeFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RangeFn::Rate => "rate",
            RangeFn::Increase => "increase",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggFn {
    Sum,
    Avg,
    Min,
    Max,
    Count,
}

impl fmt::Display for AggFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggFn::Sum => "sum",
            AggFn::Avg => "avg",
            AggFn::Min => "min",
            AggFn::Max => "max",
            AggFn::Count => "count",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }
}

/// Semantic intent of an alert expression: the metric, its label matchers,
/// the range window, aggregation, and the fired threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertQueryIR {
    pub metric: String,
    pub matchers: Vec<LabelMatcher>,
    pub range_fn: Option<RangeFn>,
    /// Range window in seconds; present iff `range_fn` is.
    pub range_window: Option<u64>,
    pub agg: Option<AggFn>,
    pub agg_by: Vec<String>,
    pub cmp: Option<CmpOp>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {pos}: expected {expected}")]
    Syntax { pos: usize, expected: String },
    #[error("unsupported construct at byte {pos}: {construct}")]
    Unsupported { pos: usize, construct: String },
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_'
}

fn is_ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b':'
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Number(f64),
    Duration(u64),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Colon,
    EqSingle,  // =
    EqEq,      // ==
    NeBang,    // !=
    ReMatch,   // =~
    NreMatch,  // !~
    Lt,
    Le,
    Gt,
    Ge,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier {s:?}"),
            Tok::Str(_) => "string".into(),
            Tok::Number(n) => format!("number {n}"),
            Tok::Duration(d) => format!("duration {d}s"),
            Tok::Eof => "end of input".into(),
            other => format!("{other:?}"),
        }
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn next_tok(&mut self) -> Result<(usize, Tok), ParseError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((start, Tok::Eof));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'{' => {
                self.pos += 1;
                Tok::LBrace
            }
            b'}' => {
                self.pos += 1;
                Tok::RBrace
            }
            b'[' => {
                self.pos += 1;
                Tok::LBracket
            }
            b']' => {
                self.pos += 1;
                Tok::RBracket
            }
            b',' => {
                self.pos += 1;
                Tok::Comma
            }
            b':' => {
                self.pos += 1;
                Tok::Colon
            }
            b'=' => {
                self.pos += 1;
                match self.src.get(self.pos) {
                    Some(b'=') => {
                        self.pos += 1;
                        Tok::EqEq
                    }
                    Some(b'~') => {
                        self.pos += 1;
                        Tok::ReMatch
                    }
                    _ => Tok::EqSingle,
                }
            }
            b'!' => {
                self.pos += 1;
                match self.src.get(self.pos) {
                    Some(b'=') => {
                        self.pos += 1;
                        Tok::NeBang
                    }
                    Some(b'~') => {
                        self.pos += 1;
                        Tok::NreMatch
                    }
                    _ => {
                        return Err(ParseError::Syntax {
                            pos: start,
                            expected: "`!=` or `!~`".into(),
                        })
                    }
                }
            }
            b'<' => {
                self.pos += 1;
                if self.src.get(self.pos) == Some(&b'=') {
                    self.pos += 1;
                    Tok::Le
                } else {
                    Tok::Lt
                }
            }
            b'>' => {
                self.pos += 1;
                if self.src.get(self.pos) == Some(&b'=') {
                    self.pos += 1;
                    Tok::Ge
                } else {
                    Tok::Gt
                }
            }
            b'"' => {
                self.pos += 1;
                let mut out = String::new();
                loop {
                    match self.src.get(self.pos) {
                        None => {
                            return Err(ParseError::Syntax {
                                pos: start,
                                expected: "closing `\"`".into(),
                            })
                        }
                        Some(b'"') => {
                            self.pos += 1;
                            break;
                        }
                        Some(b'\\') => {
                            self.pos += 1;
                            match self.src.get(self.pos) {
                                Some(&e) => {
                                    out.push(match e {
                                        b'n' => '\n',
                                        b't' => '\t',
                                        other => other as char,
                                    });
                                    self.pos += 1;
                                }
                                None => {
                                    return Err(ParseError::Syntax {
                                        pos: self.pos,
                                        expected: "escape character".into(),
                                    })
                                }
                            }
                        }
                        Some(&b) => {
                            // Raw byte push keeps non-ASCII values intact.
                            out.push(b as char);
                            self.pos += 1;
                        }
                    }
                }
                Tok::Str(out)
            }
            b'0'..=b'9' | b'.' => self.lex_number_or_duration(start)?,
            c if is_ident_start(c) => {
                while self.pos < self.src.len() && is_ident_char(self.src[self.pos]) {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.src[start..self.pos])
                    .map_err(|_| ParseError::Syntax {
                        pos: start,
                        expected: "valid UTF-8 identifier".into(),
                    })?
                    .to_string();
                Tok::Ident(text)
            }
            c @ (b'/' | b'+' | b'*' | b'%' | b'^' | b'-') => {
                return Err(ParseError::Unsupported {
                    pos: start,
                    construct: format!("vector binary operator `{}`", c as char),
                })
            }
            _ => {
                return Err(ParseError::Syntax {
                    pos: start,
                    expected: "token".into(),
                })
            }
        };
        Ok((start, tok))
    }

    fn lex_number_or_duration(&mut self, start: usize) -> Result<Tok, ParseError> {
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        // Exponent part.
        if matches!(self.src.get(self.pos), Some(b'e') | Some(b'E'))
            && matches!(
                self.src.get(self.pos + 1),
                Some(b'0'..=b'9') | Some(b'+') | Some(b'-')
            )
        {
            self.pos += 2;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            let n: f64 = text.parse().map_err(|_| ParseError::Syntax {
                pos: start,
                expected: "number".into(),
            })?;
            return Ok(Tok::Number(n));
        }
        // A trailing duration unit turns the literal into a duration.
        if matches!(
            self.src.get(self.pos),
            Some(b's') | Some(b'm') | Some(b'h') | Some(b'd')
        ) {
            let num_end = self.pos;
            while self.pos < self.src.len()
                && (self.src[self.pos].is_ascii_alphanumeric())
            {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
            let _ = num_end;
            let secs = parse_duration(text).map_err(|_| ParseError::Syntax {
                pos: start,
                expected: "duration like `5m`".into(),
            })?;
            return Ok(Tok::Duration(secs));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let n: f64 = text.parse().map_err(|_| ParseError::Syntax {
            pos: start,
            expected: "number".into(),
        })?;
        Ok(Tok::Number(n))
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    idx: usize,
}

impl Parser {
    fn new(expr: &str) -> Result<Self, ParseError> {
        let mut lex = Lexer::new(expr);
        let mut toks = Vec::new();
        loop {
            let (pos, tok) = lex.next_tok()?;
            let done = tok == Tok::Eof;
            toks.push((pos, tok));
            if done {
                break;
            }
        }
        Ok(Parser { toks, idx: 0 })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.idx].1
    }

    fn peek2(&self) -> &Tok {
        let i = (self.idx + 1).min(self.toks.len() - 1);
        &self.toks[i].1
    }

    fn pos(&self) -> usize {
        self.toks[self.idx].0
    }

    fn bump(&mut self) -> Tok {
        let tok = self.toks[self.idx].1.clone();
        if self.idx + 1 < self.toks.len() {
            self.idx += 1;
        }
        tok
    }

    fn expect(&mut self, want: Tok, expected: &str) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(ParseError::Syntax {
                pos: self.pos(),
                expected: format!("{expected}, found {}", self.peek().describe()),
            })
        }
    }

    fn ident(&mut self, expected: &str) -> Result<String, ParseError> {
        match self.bump() {
            Tok::Ident(s) => Ok(s),
            other => Err(ParseError::Syntax {
                pos: self.toks[self.idx.saturating_sub(1)].0,
                expected: format!("{expected}, found {}", other.describe()),
            }),
        }
    }

    fn parse_expr(&mut self) -> Result<AlertQueryIR, ParseError> {
        let mut ir = AlertQueryIR {
            metric: String::new(),
            matchers: Vec::new(),
            range_fn: None,
            range_window: None,
            agg: None,
            agg_by: Vec::new(),
            cmp: None,
            threshold: None,
        };

        // Optional outer aggregation.
        if let Tok::Ident(name) = self.peek() {
            if *self.peek2() == Tok::LParen {
                if let Some(agg) = agg_from_name(name) {
                    ir.agg = Some(agg);
                    self.bump();
                    self.bump(); // (
                    self.parse_inner(&mut ir)?;
                    self.expect(Tok::RParen, "`)` closing aggregation")?;
                    if let Tok::Ident(kw) = self.peek() {
                        match kw.as_str() {
                            "by" => {
                                self.bump();
                                self.expect(Tok::LParen, "`(` after `by`")?;
                                loop {
                                    let key = self.ident("label name")?;
                                    check_label_key(&key, self.pos())?;
                                    ir.agg_by.push(key);
                                    if *self.peek() == Tok::Comma {
                                        self.bump();
                                    } else {
                                        break;
                                    }
                                }
                                self.expect(Tok::RParen, "`)` closing `by(...)`")?;
                            }
                            "without" => {
                                return Err(ParseError::Unsupported {
                                    pos: self.pos(),
                                    construct: "`without` aggregation modifier".into(),
                                })
                            }
                            _ => {}
                        }
                    }
                } else {
                    self.parse_inner(&mut ir)?;
                }
            } else {
                self.parse_inner(&mut ir)?;
            }
        } else {
            self.parse_inner(&mut ir)?;
        }

        // Optional scalar comparison.
        let cmp = match self.peek() {
            Tok::Gt => Some(CmpOp::Gt),
            Tok::Ge => Some(CmpOp::Ge),
            Tok::Lt => Some(CmpOp::Lt),
            Tok::Le => Some(CmpOp::Le),
            Tok::EqEq => Some(CmpOp::Eq),
            Tok::NeBang => Some(CmpOp::Ne),
            _ => None,
        };
        if let Some(op) = cmp {
            self.bump();
            match self.bump() {
                Tok::Number(n) if n.is_finite() => {
                    ir.cmp = Some(op);
                    ir.threshold = Some(n);
                }
                other => {
                    return Err(ParseError::Syntax {
                        pos: self.toks[self.idx.saturating_sub(1)].0,
                        expected: format!("threshold number, found {}", other.describe()),
                    })
                }
            }
        }

        match self.peek() {
            Tok::Eof => Ok(ir),
            Tok::Gt | Tok::Ge | Tok::Lt | Tok::Le | Tok::EqEq | Tok::NeBang => {
                Err(ParseError::Unsupported {
                    pos: self.pos(),
                    construct: "chained comparison".into(),
                })
            }
            other => Err(ParseError::Unsupported {
                pos: self.pos(),
                construct: format!("trailing input starting with {}", other.describe()),
            }),
        }
    }

    fn parse_inner(&mut self, ir: &mut AlertQueryIR) -> Result<(), ParseError> {
        if let Tok::Ident(name) = self.peek() {
            if *self.peek2() == Tok::LParen {
                let pos = self.pos();
                match range_fn_from_name(name) {
                    Some(f) => {
                        ir.range_fn = Some(f);
                        self.bump();
                        self.bump(); // (
                        self.parse_selector(ir)?;
                        if ir.range_window.is_none() {
                            return Err(ParseError::Syntax {
                                pos: self.pos(),
                                expected: format!("range window `[...]` for {f}"),
                            });
                        }
                        self.expect(Tok::RParen, "`)` closing range function")?;
                        return Ok(());
                    }
                    None => {
                        return Err(ParseError::Unsupported {
                            pos,
                            construct: format!("function `{name}`"),
                        })
                    }
                }
            }
        }
        self.parse_selector(ir)?;
        if ir.range_window.is_some() {
            return Err(ParseError::Unsupported {
                pos: self.pos(),
                construct: "bare range selector without rate/increase".into(),
            });
        }
        Ok(())
    }

    fn parse_selector(&mut self, ir: &mut AlertQueryIR) -> Result<(), ParseError> {
        let metric = self.ident("metric name")?;
        if metric == "offset" {
            return Err(ParseError::Unsupported {
                pos: self.pos(),
                construct: "`offset` modifier".into(),
            });
        }
        ir.metric = metric;
        if *self.peek() == Tok::LBrace {
            self.bump();
            if *self.peek() != Tok::RBrace {
                loop {
                    let key_pos = self.pos();
                    let key = self.ident("label name")?;
                    check_label_key(&key, key_pos)?;
                    let op = match self.bump() {
                        Tok::EqSingle => MatchOp::Eq,
                        Tok::NeBang => MatchOp::Neq,
                        Tok::ReMatch => MatchOp::Regex,
                        Tok::NreMatch => MatchOp::Nregex,
                        other => {
                            return Err(ParseError::Syntax {
                                pos: self.toks[self.idx.saturating_sub(1)].0,
                                expected: format!(
                                    "matcher operator (=, !=, =~, !~), found {}",
                                    other.describe()
                                ),
                            })
                        }
                    };
                    let val_pos = self.pos();
                    let value = match self.bump() {
                        Tok::Str(s) => s,
                        other => {
                            return Err(ParseError::Syntax {
                                pos: val_pos,
                                expected: format!("quoted label value, found {}", other.describe()),
                            })
                        }
                    };
                    if matches!(op, MatchOp::Regex | MatchOp::Nregex) {
                        regex::Regex::new(&value).map_err(|_| ParseError::Syntax {
                            pos: val_pos,
                            expected: "valid regular expression".into(),
                        })?;
                    }
                    ir.matchers.push(LabelMatcher { key, op, value });
                    if *self.peek() == Tok::Comma {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RBrace, "`}` closing matchers")?;
        }
        if let Tok::Ident(kw) = self.peek() {
            if kw == "offset" {
                return Err(ParseError::Unsupported {
                    pos: self.pos(),
                    construct: "`offset` modifier".into(),
                });
            }
        }
        if *self.peek() == Tok::LBracket {
            self.bump();
            let window = match self.bump() {
                Tok::Duration(d) => d,
                other => {
                    return Err(ParseError::Syntax {
                        pos: self.toks[self.idx.saturating_sub(1)].0,
                        expected: format!("duration like `1m`, found {}", other.describe()),
                    })
                }
            };
            if *self.peek() == Tok::Colon {
                return Err(ParseError::Unsupported {
                    pos: self.pos(),
                    construct: "subquery".into(),
                });
            }
            self.expect(Tok::RBracket, "`]` closing range window")?;
            ir.range_window = Some(window);
        }
        if let Tok::Ident(kw) = self.peek() {
            if kw == "offset" {
                return Err(ParseError::Unsupported {
                    pos: self.pos(),
                    construct: "`offset` modifier".into(),
                });
            }
        }
        Ok(())
    }
}

fn check_label_key(key: &str, pos: usize) -> Result<(), ParseError> {
    let bytes = key.as_bytes();
    let ok = !bytes.is_empty()
        && is_ident_start(bytes[0])
        && bytes
            .iter()
            .all(|&b| b.is_ascii_alphanumeric() || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(ParseError::Syntax {
            pos,
            expected: "label identifier [a-zA-Z_][a-zA-Z0-9_]*".into(),
        })
    }
}

fn agg_from_name(name: &str) -> Option<AggFn> {
    match name {
        "sum" => Some(AggFn::Sum),
        "avg" => Some(AggFn::Avg),
        "min" => Some(AggFn::Min),
        "max" => Some(AggFn::Max),
        "count" => Some(AggFn::Count),
        _ => None,
    }
}

fn range_fn_from_name(name: &str) -> Option<RangeFn> {
    match name {
        "rate" => Some(RangeFn::Rate),
        "increase" => Some(RangeFn::Increase),
        _ => None,
    }
}

/// Parses an alert expression from the supported grammar subset.
pub fn parse_alert_expr(expr: &str) -> Result<AlertQueryIR, ParseError> {
    if expr.trim().is_empty() {
        return Err(ParseError::Syntax {
            pos: 0,
            expected: "non-empty expression".into(),
        });
    }
    Parser::new(expr)?.parse_expr()
}

/// Canonical textual form of an IR: sorted matchers, seconds-normalized
/// windows, shortest float rendering. Re-parsing it yields the same IR
/// modulo matcher order.
pub fn canonical_print(ir: &AlertQueryIR) -> String {
    let mut out = String::new();
    let mut matchers = ir.matchers.clone();
    matchers.sort();
    let mut sel = ir.metric.clone();
    if !matchers.is_empty() {
        sel.push('{');
        for (i, m) in matchers.iter().enumerate() {
            if i > 0 {
                sel.push(',');
            }
            sel.push_str(&m.key);
            sel.push_str(m.op.symbol());
            sel.push('"');
            sel.push_str(&m.value.replace('\\', "\\\\").replace('"', "\\\""));
            sel.push('"');
        }
        sel.push('}');
    }
    let core = match (ir.range_fn, ir.range_window) {
        (Some(f), Some(w)) => format!("{f}({sel}[{w}s])"),
        _ => sel,
    };
    match ir.agg {
        Some(agg) => {
            out.push_str(&format!("{agg}({core})"));
            if !ir.agg_by.is_empty() {
                out.push_str(&format!(" by({})", ir.agg_by.join(",")));
            }
        }
        None => out.push_str(&core),
    }
    if let (Some(op), Some(t)) = (ir.cmp, ir.threshold) {
        out.push_str(&format!(" {} {}", op.symbol(), t));
    }
    out
}

/// Cache key under which validated scoping tools are stored: canonical
/// serialization, so semantically identical expressions share one key.
pub fn canonical_cache_key(expr: &str) -> Result<String, ParseError> {
    Ok(canonical_print(&parse_alert_expr(expr)?))
}

/// Matchers plus `by(...)` keys; group-by keys are marked with an eq op and
/// empty value.
pub fn extract_label_fields(ir: &AlertQueryIR) -> Vec<(String, MatchOp, String)> {
    let mut out: Vec<(String, MatchOp, String)> = ir
        .matchers
        .iter()
        .map(|m| (m.key.clone(), m.op, m.value.clone()))
        .collect();
    for key in &ir.agg_by {
        out.push((key.clone(), MatchOp::Eq, String::new()));
    }
    out
}
