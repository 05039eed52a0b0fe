//! Alert-log correlation: turn alert intent into an executable log-filter
//! query plan, validate the retrieved logs against the alert logic, refine
//! on failure (at most 3 LLM calls total), and cache validated plans keyed
//! by the canonical alert expression.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{LlmClient, LlmError, LlmRequest, Role};
use crate::promql::{
    canonical_cache_key, AlertDefinition, AlertQueryIR, LabelMatcher, MatchOp,
};
use crate::store::{
    dsl_grammar_doc, extract_request_ids, parse_dsl, render_dsl, LogQuery, LogStore,
    RawLogRecord, StoreError,
};

pub const MAX_LLM_CALLS: u32 = 3;
const SAMPLE_LIMIT: usize = 20;

/// Sentinel matcher key reported when a query returned zero records.
pub const NONEMPTY_SENTINEL: &str = "__nonempty__";

/// Maps alert label keys to the field names services actually log
/// (e.g. `code` ↔ `resp_code`). Empty by default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AliasMap(pub BTreeMap<String, String>);

impl AliasMap {
    pub fn from_json_file(path: &Path) -> Result<Self, ScopingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScopingError::Cache(format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| ScopingError::Cache(format!("parse {}: {e}", path.display())))
    }

    fn lookup<'a>(&'a self, rec: &'a RawLogRecord, key: &str) -> Option<&'a str> {
        if let Some(v) = rec.fields.get(key) {
            return Some(v);
        }
        self.0
            .get(key)
            .and_then(|alias| rec.fields.get(alias))
            .map(String::as_str)
    }
}

/// A validated (or in-progress) log-filter plan for one alert key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTool {
    pub tool_id: String,
    pub alert_key: String,
    pub query: LogQuery,
    pub request_id_field: String,
    pub validated: bool,
    pub created_at: i64,
    pub iterations_used: u32,
}

#[derive(Debug, Clone, Default)]
pub struct ScopingFeedback {
    pub execution_error: Option<String>,
    pub sample_records: Vec<RawLogRecord>,
    pub alignment_failures: Vec<AlignmentFailure>,
}

impl ScopingFeedback {
    pub fn is_empty(&self) -> bool {
        self.execution_error.is_none() && self.alignment_failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentFailure {
    pub matcher: LabelMatcher,
    pub observed_values: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ScopedLogs {
    pub alert_key: String,
    pub records: Vec<RawLogRecord>,
    pub request_ids: Vec<String>,
    pub tool_id: String,
    pub cache_hit: bool,
}

#[derive(Debug, Error)]
pub enum ScopingError {
    #[error("LLM response contains no parseable DSL statement: {0}")]
    LlmResponseUnparseable(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("scoping failed after {calls} LLM calls; last tool {tool_id} left for review")]
    ScopingFailed {
        calls: u32,
        tool_id: String,
        last_tool: Box<FilterTool>,
        last_feedback: Box<ScopingFeedback>,
    },
    #[error("alert expression: {0}")]
    Alert(#[from] crate::promql::ParseError),
    #[error("tool cache: {0}")]
    Cache(String),
    #[error("store: {0}")]
    Store(#[from] StoreError),
}

// --- Tool cache ------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedTool {
    query: String,
    request_id_field: String,
    created_at: i64,
    iterations_used: u32,
}

/// JSON-file backed cache of validated tools, keyed by canonical alert key.
/// Concurrent readers, serialized writers; last-writer-wins on equal keys.
pub struct ToolCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, CachedTool>>,
}

impl ToolCache {
    pub fn in_memory() -> Self {
        ToolCache {
            path: None,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn open(path: &Path) -> Result<Self, ScopingError> {
        let entries = if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ScopingError::Cache(format!("read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| ScopingError::Cache(format!("parse {}: {e}", path.display())))?
        } else {
            BTreeMap::new()
        };
        Ok(ToolCache {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &str) -> Option<CachedTool> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn put(&self, key: &str, tool: &FilterTool) -> Result<(), ScopingError> {
        let mut entries = self.entries.lock().unwrap();
        entries.insert(
            key.to_string(),
            CachedTool {
                query: render_dsl(&tool.query),
                request_id_field: tool.request_id_field.clone(),
                created_at: tool.created_at,
                iterations_used: tool.iterations_used,
            },
        );
        if let Some(path) = &self.path {
            let text = serde_json::to_string_pretty(&*entries)
                .map_err(|e| ScopingError::Cache(e.to_string()))?;
            std::fs::write(path, text)
                .map_err(|e| ScopingError::Cache(format!("write {}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ScopingError> {
        let entries = self.entries.lock().unwrap();
        let text = serde_json::to_string_pretty(&*entries)
            .map_err(|e| ScopingError::Cache(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| ScopingError::Cache(format!("write {}: {e}", path.display())))
    }
}

// --- Alignment checking ----------------------------------------------------

/// Deterministic alignment check: every eq/regex matcher whose key (or
/// configured alias) appears in the returned records must hold on all
/// records that carry it. Zero records is itself a failure, reported under
/// the `__nonempty__` sentinel.
pub fn check_alignment(
    ir: &AlertQueryIR,
    records: &[RawLogRecord],
    aliases: &AliasMap,
) -> Vec<AlignmentFailure> {
    if records.is_empty() {
        return vec![AlignmentFailure {
            matcher: LabelMatcher {
                key: NONEMPTY_SENTINEL.into(),
                op: MatchOp::Eq,
                value: String::new(),
            },
            observed_values: Vec::new(),
        }];
    }
    let mut failures = Vec::new();
    for matcher in &ir.matchers {
        if !matches!(matcher.op, MatchOp::Eq | MatchOp::Regex) {
            continue;
        }
        let re = if matcher.op == MatchOp::Regex {
            match regex::Regex::new(&format!("^(?:{})$", matcher.value)) {
                Ok(re) => Some(re),
                Err(_) => continue, // parse already validated; defensive skip
            }
        } else {
            None
        };
        let mut observed = Vec::new();
        let mut carried = false;
        for rec in records {
            let Some(value) = aliases.lookup(rec, &matcher.key) else {
                continue;
            };
            carried = true;
            let ok = match matcher.op {
                MatchOp::Eq => value == matcher.value,
                MatchOp::Regex => re.as_ref().is_some_and(|re| re.is_match(value)),
                _ => true,
            };
            if !ok && observed.len() < 5 && !observed.iter().any(|v| v == value) {
                observed.push(value.to_string());
            }
        }
        if carried && !observed.is_empty() {
            failures.push(AlignmentFailure {
                matcher: matcher.clone(),
                observed_values: observed,
            });
        }
    }
    failures
}

// --- Prompting -------------------------------------------------------------

/// Query window: evaluation lookback plus sustain period, up to the firing
/// instant (inclusive; the store window is half-open).
pub fn alert_window(alert: &AlertDefinition) -> (i64, i64) {
    let lookback_ms = (alert.window_hint + alert.for_duration) as i64 * 1000;
    (alert.fired_at - lookback_ms, alert.fired_at + 1)
}

fn records_as_jsonl(records: &[RawLogRecord]) -> String {
    records
        .iter()
        .take(SAMPLE_LIMIT)
        .map(|r| serde_json::to_string(r).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("\n")
}

fn generation_prompt(
    alert: &AlertDefinition,
    log_examples: &[RawLogRecord],
    dsl_doc: &str,
) -> String {
    format!(
        "You correlate service alerts with logs. Write one DSL query that \
         retrieves exactly the logs causally linked to this alert.\n\n\
         # Alert definition\n\
         name: {name}\n\
         expr: {expr}\n\
         severity: {severity:?}\n\
         for: {for_secs}s, evaluation window: {window}s, fired_at: {fired_at}\n\n\
         # Log examples\n{examples}\n\n\
         # DSL grammar\n{dsl_doc}\n\
         If the request identifier lives in a non-default field, state it on \
         its own line as `request_id_field: <field>`.\n",
        name = alert.name,
        expr = alert.expr,
        severity = alert.severity,
        for_secs = alert.for_duration,
        window = alert.window_hint,
        fired_at = alert.fired_at,
        examples = records_as_jsonl(log_examples),
        dsl_doc = dsl_doc,
    )
}

fn refinement_prompt(tool: &FilterTool, feedback: &ScopingFeedback, dsl_doc: &str) -> String {
    let mut fb = String::new();
    if let Some(err) = &feedback.execution_error {
        fb.push_str(&format!("execution error: {err}\n"));
    }
    for f in &feedback.alignment_failures {
        if f.matcher.key == NONEMPTY_SENTINEL {
            fb.push_str("the query returned zero records\n");
        } else {
            fb.push_str(&format!(
                "matcher {} {} {:?} violated; observed values: {:?}\n",
                f.matcher.key,
                match f.matcher.op {
                    MatchOp::Eq => "=",
                    MatchOp::Neq => "!=",
                    MatchOp::Regex => "=~",
                    MatchOp::Nregex => "!~",
                },
                f.matcher.value,
                f.observed_values
            ));
        }
    }
    format!(
        "Your previous log query did not align with the alert logic. Refine it.\n\n\
         # Previous query\n{query}\n\n\
         # Feedback\n{fb}\n\
         # Sample records\n{samples}\n\n\
         # DSL grammar\n{dsl_doc}\n",
        query = render_dsl(&tool.query),
        fb = fb,
        samples = records_as_jsonl(&feedback.sample_records),
        dsl_doc = dsl_doc,
    )
}

/// Pulls the DSL statement out of an LLM response: first fenced block or
/// first line starting with `FROM`.
fn extract_dsl(response: &str) -> Option<String> {
    if let Some(start) = response.find("```") {
        let after = &response[start + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        if let Some(end) = after[body_start..].find("```") {
            let block = after[body_start..body_start + end].trim();
            if !block.is_empty() {
                return Some(block.to_string());
            }
        }
    }
    response
        .lines()
        .map(str::trim)
        .find(|l| l.to_ascii_uppercase().starts_with("FROM "))
        .map(str::to_string)
}

fn extract_request_id_field(response: &str) -> String {
    response
        .lines()
        .filter_map(|l| l.trim().strip_prefix("request_id_field:"))
        .map(|v| v.trim().to_string())
        .find(|v| !v.is_empty())
        .unwrap_or_else(|| "request_id".to_string())
}

fn parse_tool_response(
    response: &str,
    alert: &AlertDefinition,
    alert_key: &str,
    iterations_used: u32,
) -> Result<FilterTool, ScopingError> {
    let dsl = extract_dsl(response).ok_or_else(|| {
        ScopingError::LlmResponseUnparseable(response.chars().take(120).collect())
    })?;
    let mut query =
        parse_dsl(&dsl).map_err(|e| ScopingError::LlmResponseUnparseable(e.to_string()))?;
    // The time window is the alert's, not the model's.
    let (from, to) = alert_window(alert);
    query.time_from = from;
    query.time_to = to;
    Ok(FilterTool {
        tool_id: format!("tool-{}-{}", short_hash(alert_key), iterations_used),
        alert_key: alert_key.to_string(),
        query,
        request_id_field: extract_request_id_field(response),
        validated: false,
        created_at: alert.fired_at,
        iterations_used,
    })
}

fn short_hash(text: &str) -> String {
    // FNV-1a, enough for a stable short id.
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:08x}")
}

/// One LLM call: generate the initial filter tool from alert intent, log
/// examples, and the DSL grammar.
pub fn generate_filter_tool(
    alert: &AlertDefinition,
    _ir: &AlertQueryIR,
    log_examples: &[RawLogRecord],
    dsl_doc: &str,
    llm: &dyn LlmClient,
) -> Result<FilterTool, ScopingError> {
    let alert_key = canonical_cache_key(&alert.expr)?;
    let prompt = generation_prompt(alert, log_examples, dsl_doc);
    let response = llm.complete(&LlmRequest::new(
        Role::Reasoning,
        "You generate log-scoping queries for alert diagnosis.",
        &prompt,
    ))?;
    parse_tool_response(&response, alert, &alert_key, 1)
}

/// One LLM call: refine a tool from feedback. The caller enforces the
/// 3-call budget.
pub fn refine_filter_tool(
    alert: &AlertDefinition,
    tool: &FilterTool,
    feedback: &ScopingFeedback,
    dsl_doc: &str,
    llm: &dyn LlmClient,
) -> Result<FilterTool, ScopingError> {
    debug_assert!(tool.iterations_used < MAX_LLM_CALLS);
    let prompt = refinement_prompt(tool, feedback, dsl_doc);
    let response = llm.complete(&LlmRequest::new(
        Role::Reasoning,
        "You refine log-scoping queries from execution feedback.",
        &prompt,
    ))?;
    parse_tool_response(&response, alert, &tool.alert_key, tool.iterations_used + 1)
}

fn execute_tool(
    tool: &FilterTool,
    ir: &AlertQueryIR,
    store: &LogStore,
    aliases: &AliasMap,
) -> Result<Vec<RawLogRecord>, ScopingFeedback> {
    match store.execute_query(&tool.query) {
        Ok(records) => {
            let failures = check_alignment(ir, &records, aliases);
            if failures.is_empty() {
                Ok(records)
            } else {
                Err(ScopingFeedback {
                    execution_error: None,
                    sample_records: records.into_iter().take(SAMPLE_LIMIT).collect(),
                    alignment_failures: failures,
                })
            }
        }
        Err(e) => Err(ScopingFeedback {
            execution_error: Some(e.to_string()),
            sample_records: Vec::new(),
            alignment_failures: Vec::new(),
        }),
    }
}

fn scoped(alert_key: &str, tool: &FilterTool, records: Vec<RawLogRecord>, cache_hit: bool) -> ScopedLogs {
    let request_ids = extract_request_ids(&records);
    ScopedLogs {
        alert_key: alert_key.to_string(),
        records,
        request_ids,
        tool_id: tool.tool_id.clone(),
        cache_hit,
    }
}

/// Full scoping flow: cache lookup, then a generate → execute → align →
/// refine loop capped at [`MAX_LLM_CALLS`] LLM calls.
pub fn scope_logs(
    alert: &AlertDefinition,
    store: &LogStore,
    cache: &ToolCache,
    llm: &dyn LlmClient,
    aliases: &AliasMap,
) -> Result<ScopedLogs, ScopingError> {
    let alert_key = canonical_cache_key(&alert.expr)?;
    let ir = crate::promql::parse_alert_expr(&alert.expr)?;

    if let Some(cached) = cache.get(&alert_key) {
        let mut query = parse_dsl(&cached.query)
            .map_err(|e| ScopingError::Cache(format!("cached query invalid: {e}")))?;
        let (from, to) = alert_window(alert);
        query.time_from = from;
        query.time_to = to;
        let tool = FilterTool {
            tool_id: format!("tool-{}-cached", short_hash(&alert_key)),
            alert_key: alert_key.clone(),
            query,
            request_id_field: cached.request_id_field,
            validated: true,
            created_at: cached.created_at,
            iterations_used: cached.iterations_used,
        };
        let records = store.execute_query(&tool.query)?;
        return Ok(scoped(&alert_key, &tool, records, true));
    }

    let (from, to) = alert_window(alert);
    let examples = store.execute_query(&LogQuery {
        time_from: from,
        time_to: to,
        predicates: vec![],
        limit: Some(SAMPLE_LIMIT),
    })?;
    let dsl_doc = dsl_grammar_doc();

    let mut tool = generate_filter_tool(alert, &ir, &examples, dsl_doc, llm)?;
    loop {
        match execute_tool(&tool, &ir, store, aliases) {
            Ok(records) => {
                tool.validated = true;
                cache.put(&alert_key, &tool)?;
                return Ok(scoped(&alert_key, &tool, records, false));
            }
            Err(feedback) => {
                if tool.iterations_used >= MAX_LLM_CALLS {
                    return Err(ScopingError::ScopingFailed {
                        calls: tool.iterations_used,
                        tool_id: tool.tool_id.clone(),
                        last_tool: Box::new(tool),
                        last_feedback: Box::new(feedback),
                    });
                }
                tool = refine_filter_tool(alert, &tool, &feedback, dsl_doc, llm)?;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScenarioRule, ScriptedLlm};
    use crate::promql::parse_alert_expr;
    use crate::store::Level;

    fn rec(ts: i64, request_id: &str, fields: &[(&str, &str)]) -> RawLogRecord {
        RawLogRecord {
            ts,
            component: "api-gw".into(),
            level: Level::Info,
            logging_path: None,
            request_id: Some(request_id.into()),
            fields: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            message: "request handled".into(),
            seq: 0,
        }
    }

    fn alert(expr: &str) -> AlertDefinition {
        AlertDefinition {
            name: "HighErrorRate".into(),
            expr: expr.into(),
            for_duration: 60,
            severity: crate::promql::Severity::Critical,
            annotations: BTreeMap::new(),
            fired_at: 1_750_000_000_000,
            window_hint: 300,
        }
    }

    fn store_with(records: Vec<RawLogRecord>) -> LogStore {
        let mut store = LogStore::new();
        store.ingest_records(records);
        store
    }

    fn in_window(offset_s: i64) -> i64 {
        1_750_000_000_000 - offset_s * 1000
    }

    fn rule(matcher: &str, response: &str) -> ScenarioRule {
        ScenarioRule {
            matcher: matcher.into(),
            regex: false,
            role: "any".into(),
            response: response.into(),
        }
    }

    const GOOD_DSL: &str = "```\nFROM 2026-01-01T00:00:00Z TO 2026-01-01T01:00:00Z WHERE code = \"403\"\n```";

    #[test]
    fn alignment_passes_on_conforming_records() {
        let ir = parse_alert_expr(r#"m{code="403"}"#).unwrap();
        let records = vec![rec(1, "r1", &[("code", "403")])];
        assert!(check_alignment(&ir, &records, &AliasMap::default()).is_empty());
    }

    #[test]
    fn alignment_reports_violating_values() {
        let ir = parse_alert_expr(r#"m{code="403"}"#).unwrap();
        let records = vec![
            rec(1, "r1", &[("code", "403")]),
            rec(2, "r2", &[("code", "500")]),
        ];
        let failures = check_alignment(&ir, &records, &AliasMap::default());
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].matcher.key, "code");
        assert_eq!(failures[0].observed_values, vec!["500"]);
    }

    #[test]
    fn alignment_empty_records_is_sentinel_failure() {
        let ir = parse_alert_expr(r#"m{code="403"}"#).unwrap();
        let failures = check_alignment(&ir, &[], &AliasMap::default());
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].matcher.key, NONEMPTY_SENTINEL);
        assert!(failures[0].observed_values.is_empty());
    }

    #[test]
    fn alignment_consults_alias_table() {
        let ir = parse_alert_expr(r#"m{code="403"}"#).unwrap();
        let records = vec![rec(1, "r1", &[("resp_code", "500")])];
        // Without the alias the key is absent, so the matcher is skipped.
        assert!(check_alignment(&ir, &records, &AliasMap::default()).is_empty());
        let aliases = AliasMap(
            [("code".to_string(), "resp_code".to_string())]
                .into_iter()
                .collect(),
        );
        let failures = check_alignment(&ir, &records, &aliases);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].observed_values, vec!["500"]);
    }

    #[test]
    fn alignment_regex_matcher_is_anchored() {
        let ir = parse_alert_expr(r#"m{gateway_id=~"gw-.*"}"#).unwrap();
        let good = vec![rec(1, "r1", &[("gateway_id", "gw-7")])];
        assert!(check_alignment(&ir, &good, &AliasMap::default()).is_empty());
        let bad = vec![rec(1, "r1", &[("gateway_id", "xx-gw-7")])];
        assert_eq!(check_alignment(&ir, &bad, &AliasMap::default()).len(), 1);
    }

    #[test]
    fn generate_parses_scripted_dsl() {
        let a = alert(r#"rate(m{code="403"}[1m]) > 0.05"#);
        let ir = parse_alert_expr(&a.expr).unwrap();
        let llm = ScriptedLlm::new(vec![rule("Write one DSL query", GOOD_DSL)]).unwrap();
        let tool = generate_filter_tool(&a, &ir, &[], dsl_grammar_doc(), &llm).unwrap();
        assert_eq!(tool.iterations_used, 1);
        assert_eq!(tool.request_id_field, "request_id");
        assert_eq!(tool.query.predicates.len(), 1);
        // Window comes from the alert, not the scripted timestamps.
        let (from, to) = alert_window(&a);
        assert_eq!((tool.query.time_from, tool.query.time_to), (from, to));
    }

    #[test]
    fn generate_prose_response_is_unparseable() {
        let a = alert(r#"m{code="403"}"#);
        let ir = parse_alert_expr(&a.expr).unwrap();
        let llm = ScriptedLlm::new(vec![rule(
            "Write one DSL query",
            "I think you should look at the gateway logs.",
        )])
        .unwrap();
        assert!(matches!(
            generate_filter_tool(&a, &ir, &[], dsl_grammar_doc(), &llm),
            Err(ScopingError::LlmResponseUnparseable(_))
        ));
    }

    #[test]
    fn custom_request_id_field_is_honored() {
        let a = alert(r#"m{code="403"}"#);
        let ir = parse_alert_expr(&a.expr).unwrap();
        let response = format!("{GOOD_DSL}\nrequest_id_field: trace_id\n");
        let llm = ScriptedLlm::new(vec![rule("Write one DSL query", &response)]).unwrap();
        let tool = generate_filter_tool(&a, &ir, &[], dsl_grammar_doc(), &llm).unwrap();
        assert_eq!(tool.request_id_field, "trace_id");
    }

    #[test]
    fn first_try_success_uses_one_call() {
        let a = alert(r#"rate(m{code="403"}[1m]) > 0.05"#);
        let store = store_with(vec![
            rec(in_window(10), "r1", &[("code", "403")]),
            rec(in_window(20), "r2", &[("code", "403")]),
        ]);
        let llm = ScriptedLlm::new(vec![rule("Write one DSL query", GOOD_DSL)]).unwrap();
        let cache = ToolCache::in_memory();
        let out = scope_logs(&a, &store, &cache, &llm, &AliasMap::default()).unwrap();
        assert_eq!(llm.usage().calls, 1);
        assert!(!out.cache_hit);
        assert_eq!(out.records.len(), 2);
        // r2 carries the earlier timestamp, so it surfaces first.
        assert_eq!(out.request_ids, vec!["r2", "r1"]);
    }

    #[test]
    fn refinement_recovers_from_unknown_field() {
        let a = alert(r#"rate(m{code="403"}[1m]) > 0.05"#);
        let store = store_with(vec![rec(in_window(10), "r1", &[("code", "403")])]);
        let llm = ScriptedLlm::new(vec![
            rule(
                "Write one DSL query",
                "```\nFROM 2026-01-01T00:00:00Z TO 2026-01-01T01:00:00Z WHERE resp_code = \"403\"\n```",
            ),
            rule("unknown query field", GOOD_DSL),
        ])
        .unwrap();
        let cache = ToolCache::in_memory();
        let out = scope_logs(&a, &store, &cache, &llm, &AliasMap::default()).unwrap();
        assert_eq!(llm.usage().calls, 2);
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn refinement_recovers_from_misalignment() {
        let a = alert(r#"rate(m{code="403"}[1m]) > 0.05"#);
        let store = store_with(vec![
            rec(in_window(10), "r1", &[("code", "403")]),
            rec(in_window(20), "r2", &[("code", "500")]),
        ]);
        let llm = ScriptedLlm::new(vec![
            rule(
                "Write one DSL query",
                // Over-broad: picks up code=500 records too.
                "```\nFROM 2026-01-01T00:00:00Z TO 2026-01-01T01:00:00Z WHERE component = \"api-gw\"\n```",
            ),
            rule("matcher code =", GOOD_DSL),
        ])
        .unwrap();
        let cache = ToolCache::in_memory();
        let out = scope_logs(&a, &store, &cache, &llm, &AliasMap::default()).unwrap();
        assert_eq!(llm.usage().calls, 2);
        assert_eq!(out.records.len(), 1);
        assert!(check_alignment(
            &parse_alert_expr(&a.expr).unwrap(),
            &out.records,
            &AliasMap::default()
        )
        .is_empty());
    }

    #[test]
    fn three_failures_exhaust_the_budget() {
        let a = alert(r#"rate(m{code="403"}[1m]) > 0.05"#);
        // Store has no matching records, so every query misaligns (empty).
        let store = store_with(vec![rec(in_window(10), "r1", &[("code", "200")])]);
        let llm = ScriptedLlm::new(vec![
            rule("Write one DSL query", GOOD_DSL),
            rule("Refine", GOOD_DSL),
        ])
        .unwrap();
        let cache = ToolCache::in_memory();
        match scope_logs(&a, &store, &cache, &llm, &AliasMap::default()) {
            Err(ScopingError::ScopingFailed { calls, last_feedback, .. }) => {
                assert_eq!(calls, 3);
                assert_eq!(llm.usage().calls, 3);
                assert_eq!(
                    last_feedback.alignment_failures[0].matcher.key,
                    NONEMPTY_SENTINEL
                );
            }
            other => panic!("expected ScopingFailed, got {other:?}"),
        }
        assert!(cache.is_empty());
    }

    #[test]
    fn warm_cache_skips_llm_and_matches_cold_run() {
        let a = alert(r#"rate(m{code="403"}[1m]) > 0.05"#);
        let store = store_with(vec![
            rec(in_window(10), "r1", &[("code", "403")]),
            rec(in_window(20), "r2", &[("code", "403")]),
        ]);
        let cache = ToolCache::in_memory();
        let llm = ScriptedLlm::new(vec![rule("Write one DSL query", GOOD_DSL)]).unwrap();
        let cold = scope_logs(&a, &store, &cache, &llm, &AliasMap::default()).unwrap();
        let warm_llm = ScriptedLlm::new(vec![]).unwrap();
        let warm = scope_logs(&a, &store, &cache, &warm_llm, &AliasMap::default()).unwrap();
        assert_eq!(warm_llm.usage().calls, 0);
        assert!(warm.cache_hit);
        assert_eq!(warm.records, cold.records);
        assert_eq!(warm.request_ids, cold.request_ids);
    }

    #[test]
    fn cache_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tool_cache.json");
        let a = alert(r#"rate(m{code="403"}[1m]) > 0.05"#);
        let store = store_with(vec![rec(in_window(10), "r1", &[("code", "403")])]);
        {
            let cache = ToolCache::open(&path).unwrap();
            let llm = ScriptedLlm::new(vec![rule("Write one DSL query", GOOD_DSL)]).unwrap();
            scope_logs(&a, &store, &cache, &llm, &AliasMap::default()).unwrap();
        }
        let cache = ToolCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        let llm = ScriptedLlm::new(vec![]).unwrap();
        let out = scope_logs(&a, &store, &cache, &llm, &AliasMap::default()).unwrap();
        assert!(out.cache_hit);
        assert_eq!(out.records.len(), 1);
    }
}
