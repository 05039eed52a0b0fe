//! Embedded, file-backed log store with a small query DSL.
//!
//! Records live in JSONL files; the store keeps everything in memory with an
//! index on request id. Time windows are half-open `[from, to)` so adjacent
//! windows compose without double-counting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Debug,
    Info,
    Warn,
    Error,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Debug => "debug",
            Level::Info => "info",
            Level::Warn => "warn",
            Level::Error => "error",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One structured log line. `seq` is assigned by the store at ingestion and
/// is not part of the wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawLogRecord {
    pub ts: i64,
    pub component: String,
    pub level: Level,
    #[serde(default)]
    pub logging_path: Option<String>,
    #[serde(default)]
    pub request_id: Option<String>,
    #[serde(default)]
    pub fields: BTreeMap<String, String>,
    pub message: String,
    #[serde(skip)]
    pub seq: u64,
}

pub const BUILTIN_FIELDS: &[&str] = &[
    "ts",
    "component",
    "level",
    "logging_path",
    "request_id",
    "message",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredicateOp {
    Eq,
    Neq,
    Regex,
    Contains,
    In,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPredicate {
    pub field: String,
    pub op: PredicateOp,
    /// Single value for eq/neq/regex/contains; `in` carries the full list.
    pub values: Vec<String>,
}

impl FieldPredicate {
    pub fn single(field: &str, op: PredicateOp, value: &str) -> Self {
        FieldPredicate {
            field: field.into(),
            op,
            values: vec![value.into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogQuery {
    pub time_from: i64,
    pub time_to: i64,
    pub predicates: Vec<FieldPredicate>,
    pub limit: Option<usize>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no line in {path} parsed as a log record")]
    Schema { path: String },
    #[error("unknown query field `{0}`")]
    UnknownField(String),
    #[error("invalid regex in predicate on `{field}`: {source}")]
    BadRegex {
        field: String,
        source: regex::Error,
    },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub ingested: usize,
    pub malformed: usize,
}

#[derive(Default)]
pub struct LogStore {
    records: Vec<RawLogRecord>,
    by_request: HashMap<String, Vec<usize>>,
    field_keys: HashSet<String>,
}

impl LogStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[RawLogRecord] {
        &self.records
    }

    /// Appends records, assigning consecutive `seq` values.
    pub fn ingest_records<I: IntoIterator<Item = RawLogRecord>>(&mut self, records: I) -> usize {
        let mut n = 0;
        for mut rec in records {
            rec.seq = self.records.len() as u64;
            for key in rec.fields.keys() {
                self.field_keys.insert(key.clone());
            }
            if let Some(id) = &rec.request_id {
                self.by_request
                    .entry(id.clone())
                    .or_default()
                    .push(self.records.len());
            }
            self.records.push(rec);
            n += 1;
        }
        n
    }

    /// Ingests a JSONL file. Malformed lines are counted and skipped; only a
    /// file where nothing parses (and at least one line exists) is an error.
    pub fn ingest_jsonl(&mut self, path: &Path) -> Result<IngestReport, StoreError> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut ingested = 0;
        let mut malformed = 0;
        let mut lines = 0;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            lines += 1;
            match serde_json::from_str::<RawLogRecord>(&line) {
                Ok(rec) if rec.ts > 0 && !rec.component.is_empty() => {
                    self.ingest_records([rec]);
                    ingested += 1;
                }
                _ => malformed += 1,
            }
        }
        if lines > 0 && ingested == 0 {
            return Err(StoreError::Schema {
                path: path.display().to_string(),
            });
        }
        Ok(IngestReport {
            ingested,
            malformed,
        })
    }

    fn check_known_field(&self, field: &str) -> Result<(), StoreError> {
        if BUILTIN_FIELDS.contains(&field) || self.field_keys.contains(field) {
            Ok(())
        } else {
            Err(StoreError::UnknownField(field.to_string()))
        }
    }

    /// Records in `[time_from, time_to)` satisfying all predicates, ordered
    /// by `(ts, seq)` and truncated to the limit.
    pub fn execute_query(&self, q: &LogQuery) -> Result<Vec<RawLogRecord>, StoreError> {
        if q.time_from > q.time_to {
            return Err(StoreError::InvalidQuery("time_from > time_to".into()));
        }
        if q.limit == Some(0) {
            return Err(StoreError::InvalidQuery("limit must be > 0".into()));
        }
        let mut compiled = Vec::with_capacity(q.predicates.len());
        for p in &q.predicates {
            self.check_known_field(&p.field)?;
            let re = if p.op == PredicateOp::Regex {
                let pattern = p.values.first().cloned().unwrap_or_default();
                Some(
                    regex::Regex::new(&format!("^(?:{pattern})$")).map_err(|e| {
                        StoreError::BadRegex {
                            field: p.field.clone(),
                            source: e,
                        }
                    })?,
                )
            } else {
                None
            };
            if p.op == PredicateOp::In && p.values.is_empty() {
                return Err(StoreError::InvalidQuery(format!(
                    "`in` predicate on `{}` carries no values",
                    p.field
                )));
            }
            compiled.push((p, re));
        }

        let mut hits: Vec<&RawLogRecord> = self
            .records
            .iter()
            .filter(|r| r.ts >= q.time_from && r.ts < q.time_to)
            .filter(|r| {
                compiled
                    .iter()
                    .all(|(p, re)| predicate_matches(r, p, re.as_ref()))
            })
            .collect();
        hits.sort_by_key(|r| (r.ts, r.seq));
        if let Some(limit) = q.limit {
            hits.truncate(limit);
        }
        Ok(hits.into_iter().cloned().collect())
    }

    /// All records carrying the given request id, in `(ts, seq)` order.
    pub fn fetch_by_request_ids(
        &self,
        ids: &[String],
    ) -> BTreeMap<String, Vec<RawLogRecord>> {
        let mut out = BTreeMap::new();
        for id in ids {
            let mut recs: Vec<RawLogRecord> = self
                .by_request
                .get(id)
                .map(|idxs| idxs.iter().map(|&i| self.records[i].clone()).collect())
                .unwrap_or_default();
            recs.sort_by_key(|r| (r.ts, r.seq));
            out.insert(id.clone(), recs);
        }
        out
    }
}

fn record_field<'a>(rec: &'a RawLogRecord, field: &str) -> Option<String> {
    match field {
        "ts" => Some(rec.ts.to_string()),
        "component" => Some(rec.component.clone()),
        "level" => Some(rec.level.as_str().to_string()),
        "logging_path" => rec.logging_path.clone(),
        "request_id" => rec.request_id.clone(),
        "message" => Some(rec.message.clone()),
        other => rec.fields.get(other).cloned(),
    }
}

fn values_equal(a: &str, b: &str) -> bool {
    // Numeric comparison only when both sides parse as numbers.
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn predicate_matches(rec: &RawLogRecord, p: &FieldPredicate, re: Option<&regex::Regex>) -> bool {
    let actual = match record_field(rec, &p.field) {
        Some(v) => v,
        None => return false,
    };
    match p.op {
        PredicateOp::Eq => p
            .values
            .first()
            .is_some_and(|v| values_equal(&actual, v)),
        PredicateOp::Neq => p
            .values
            .first()
            .is_some_and(|v| !values_equal(&actual, v)),
        PredicateOp::Regex => re.is_some_and(|re| re.is_match(&actual)),
        PredicateOp::Contains => p.values.first().is_some_and(|v| actual.contains(v)),
        PredicateOp::In => p.values.iter().any(|v| values_equal(&actual, v)),
    }
}

/// Distinct non-null request ids, ordered by first occurrence.
pub fn extract_request_ids(records: &[RawLogRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in records {
        if let Some(id) = &rec.request_id {
            if seen.insert(id.clone()) {
                out.push(id.clone());
            }
        }
    }
    out
}

// --- Textual DSL -----------------------------------------------------------
//
// `FROM <iso8601> TO <iso8601> WHERE <field> <op> <value> [AND ...] [LIMIT n]`
// This is the form shipped to the scoping agent and accepted back from it.

#[derive(Debug, Error, PartialEq)]
pub enum DslError {
    #[error("DSL syntax: {0}")]
    Syntax(String),
}

pub fn millis_to_iso(ts: i64) -> String {
    let dt: DateTime<Utc> = Utc.timestamp_millis_opt(ts).single().unwrap_or_default();
    dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

fn iso_to_millis(text: &str) -> Result<i64, DslError> {
    DateTime::parse_from_rfc3339(text)
        .map(|dt| dt.timestamp_millis())
        .map_err(|e| DslError::Syntax(format!("bad timestamp {text:?}: {e}")))
}

fn quote(v: &str) -> String {
    format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn render_dsl(q: &LogQuery) -> String {
    let mut out = format!(
        "FROM {} TO {}",
        millis_to_iso(q.time_from),
        millis_to_iso(q.time_to)
    );
    for (i, p) in q.predicates.iter().enumerate() {
        out.push_str(if i == 0 { " WHERE " } else { " AND " });
        out.push_str(&p.field);
        match p.op {
            PredicateOp::Eq => out.push_str(&format!(" = {}", quote(&p.values[0]))),
            PredicateOp::Neq => out.push_str(&format!(" != {}", quote(&p.values[0]))),
            PredicateOp::Regex => out.push_str(&format!(" =~ {}", quote(&p.values[0]))),
            PredicateOp::Contains => {
                out.push_str(&format!(" contains {}", quote(&p.values[0])))
            }
            PredicateOp::In => {
                let vals: Vec<String> = p.values.iter().map(|v| quote(v)).collect();
                out.push_str(&format!(" in ({})", vals.join(", ")));
            }
        }
    }
    if let Some(limit) = q.limit {
        out.push_str(&format!(" LIMIT {limit}"));
    }
    out
}

struct DslScanner<'a> {
    rest: &'a str,
}

impl<'a> DslScanner<'a> {
    fn word(&mut self) -> Option<&'a str> {
        self.rest = self.rest.trim_start();
        if self.rest.is_empty() {
            return None;
        }
        let end = self
            .rest
            .find(|c: char| c.is_whitespace())
            .unwrap_or(self.rest.len());
        let (word, rest) = self.rest.split_at(end);
        self.rest = rest;
        Some(word)
    }

    fn peek_word(&self) -> Option<&'a str> {
        let trimmed = self.rest.trim_start();
        if trimmed.is_empty() {
            return None;
        }
        let end = trimmed
            .find(|c: char| c.is_whitespace())
            .unwrap_or(trimmed.len());
        Some(&trimmed[..end])
    }

    fn quoted(&mut self) -> Result<String, DslError> {
        self.rest = self.rest.trim_start();
        let mut chars = self.rest.char_indices();
        match chars.next() {
            Some((_, '"')) => {}
            _ => return Err(DslError::Syntax(format!("expected quoted value at {:?}", short(self.rest)))),
        }
        let mut out = String::new();
        let mut escape = false;
        for (i, c) in chars {
            if escape {
                out.push(c);
                escape = false;
            } else if c == '\\' {
                escape = true;
            } else if c == '"' {
                self.rest = &self.rest[i + 1..];
                return Ok(out);
            } else {
                out.push(c);
            }
        }
        Err(DslError::Syntax("unterminated quoted value".into()))
    }
}

fn short(s: &str) -> String {
    s.chars().take(30).collect()
}

pub fn parse_dsl(text: &str) -> Result<LogQuery, DslError> {
    let mut sc = DslScanner { rest: text.trim() };
    let kw = sc.word().ok_or_else(|| DslError::Syntax("empty query".into()))?;
    if !kw.eq_ignore_ascii_case("FROM") {
        return Err(DslError::Syntax(format!("expected FROM, found {kw:?}")));
    }
    let from = iso_to_millis(sc.word().ok_or_else(|| DslError::Syntax("missing FROM timestamp".into()))?)?;
    let kw = sc.word().ok_or_else(|| DslError::Syntax("expected TO".into()))?;
    if !kw.eq_ignore_ascii_case("TO") {
        return Err(DslError::Syntax(format!("expected TO, found {kw:?}")));
    }
    let to = iso_to_millis(sc.word().ok_or_else(|| DslError::Syntax("missing TO timestamp".into()))?)?;

    let mut predicates = Vec::new();
    let mut limit = None;
    if let Some(next) = sc.peek_word() {
        if next.eq_ignore_ascii_case("WHERE") {
            sc.word();
            loop {
                let field = sc
                    .word()
                    .ok_or_else(|| DslError::Syntax("expected field name".into()))?
                    .to_string();
                let op_word = sc
                    .word()
                    .ok_or_else(|| DslError::Syntax("expected operator".into()))?;
                let pred = match op_word {
                    "=" => FieldPredicate::single(&field, PredicateOp::Eq, &sc.quoted()?),
                    "!=" => FieldPredicate::single(&field, PredicateOp::Neq, &sc.quoted()?),
                    "=~" => FieldPredicate::single(&field, PredicateOp::Regex, &sc.quoted()?),
                    w if w.eq_ignore_ascii_case("contains") => {
                        FieldPredicate::single(&field, PredicateOp::Contains, &sc.quoted()?)
                    }
                    w if w.eq_ignore_ascii_case("in") => {
                        sc.rest = sc.rest.trim_start();
                        if !sc.rest.starts_with('(') {
                            return Err(DslError::Syntax("expected `(` after in".into()));
                        }
                        sc.rest = &sc.rest[1..];
                        let mut values = Vec::new();
                        loop {
                            values.push(sc.quoted()?);
                            sc.rest = sc.rest.trim_start();
                            if sc.rest.starts_with(',') {
                                sc.rest = &sc.rest[1..];
                            } else if sc.rest.starts_with(')') {
                                sc.rest = &sc.rest[1..];
                                break;
                            } else {
                                return Err(DslError::Syntax(
                                    "expected `,` or `)` in value list".into(),
                                ));
                            }
                        }
                        if values.is_empty() {
                            return Err(DslError::Syntax("empty `in` list".into()));
                        }
                        FieldPredicate {
                            field,
                            op: PredicateOp::In,
                            values,
                        }
                    }
                    other => {
                        return Err(DslError::Syntax(format!("unknown operator {other:?}")))
                    }
                };
                predicates.push(pred);
                match sc.peek_word() {
                    Some(w) if w.eq_ignore_ascii_case("AND") => {
                        sc.word();
                    }
                    _ => break,
                }
            }
        }
    }
    if let Some(next) = sc.peek_word() {
        if next.eq_ignore_ascii_case("LIMIT") {
            sc.word();
            let n = sc
                .word()
                .ok_or_else(|| DslError::Syntax("missing LIMIT value".into()))?;
            let n: usize = n
                .parse()
                .map_err(|_| DslError::Syntax(format!("bad LIMIT value {n:?}")))?;
            if n == 0 {
                return Err(DslError::Syntax("LIMIT must be > 0".into()));
            }
            limit = Some(n);
        }
    }
    if let Some(w) = sc.peek_word() {
        return Err(DslError::Syntax(format!("trailing input {:?}", short(w))));
    }
    Ok(LogQuery {
        time_from: from,
        time_to: to,
        predicates,
        limit,
    })
}

/// The grammar documentation shipped to the scoping agent.
pub fn dsl_grammar_doc() -> &'static str {
    "Log query DSL grammar:\n\
     \n\
     \x20 query  := FROM <iso8601> TO <iso8601> [WHERE pred (AND pred)*] [LIMIT n]\n\
     \x20 pred   := <field> = \"value\"        exact match\n\
     \x20         | <field> != \"value\"       negated match\n\
     \x20         | <field> =~ \"regex\"       anchored full-string regex\n\
     \x20         | <field> contains \"text\"  substring match\n\
     \x20         | <field> in (\"a\", \"b\")    membership\n\
     \n\
     Fields: ts, component, level, logging_path, request_id, message, or any\n\
     structured key present in the records (e.g. code, gateway_id). The time\n\
     window is half-open [FROM, TO). Predicates are ANDed. Respond with\n\
     exactly one query on a single line.\n"
}
