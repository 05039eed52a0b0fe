//! Cluster-level root-cause analysis and the final diagnostic summary:
//! prompt construction, structured-response parsing with a single retry,
//! TF-IDF SOP retrieval, and deterministic logging-quality rules.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chains::LogChain;
use crate::llm::{LlmClient, LlmError, LlmRequest, Role};
use crate::pipeline::MetricsSummary;
use crate::promql::AlertDefinition;
use crate::store::{Level, RawLogRecord};

pub const DEFAULT_SOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRCAReport {
    pub cluster_id: String,
    pub root_causes: Vec<String>,
    pub faulty_components: Vec<String>,
    pub key_log_evidence: Vec<(String, String)>,
    pub inference_details: String,
    pub insufficient_logs: bool,
    pub logging_quality_notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertDiagnosisReport {
    pub alert_name: String,
    pub summary: String,
    pub root_causes: Vec<String>,
    pub faulty_components: Vec<String>,
    pub key_logs: Vec<(String, String)>,
    pub suggestions: Vec<String>,
    pub logging_quality_feedback: Vec<String>,
    pub cluster_reports: Vec<RequestRCAReport>,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SOPDocument {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    SilentFailure,
    LevelInconsistency,
    MissingPropagation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogQualityFlag {
    pub kind: FlagKind,
    pub request_id: String,
    pub component: String,
    pub detail: String,
}

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("LLM response not parseable after {calls} calls: {detail}")]
    LlmResponseUnparseable { calls: u32, detail: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("SOP index is empty")]
    EmptyIndex,
    #[error("SOP dir {0}: {1}")]
    SopIo(String, String),
}

// --- Prompting and structured responses ------------------------------------

const SCHEMA_BLOCK: &str = r#"Respond with a fenced ```json block containing exactly these keys:
{
  "root_causes": ["..."],
  "faulty_components": ["..."],
  "key_log_evidence": [["event_id", "excerpt"]],
  "inference_details": "...",
  "insufficient_logs": false,
  "logging_quality_notes": ["..."]
}
If the logs do not carry enough evidence to identify a root cause, set
insufficient_logs to true, leave root_causes empty, and explain the gap in
logging_quality_notes."#;

pub fn build_rca_prompt(
    alert: &AlertDefinition,
    chain_text: &str,
    component_info: &BTreeMap<String, String>,
) -> String {
    assert!(!chain_text.is_empty(), "chain_text must be non-empty");
    let components = if component_info.is_empty() {
        "(no component docs provided)".to_string()
    } else {
        component_info
            .iter()
            .map(|(name, doc)| format!("- {name}: {doc}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    format!(
        "You are a site-reliability analyst. Diagnose the root cause of one \
         request that contributed to the alert below.\n\n\
         # Alert\n\
         name: {name}\n\
         expr: {expr}\n\
         severity: {severity:?}\n\
         fired_at: {fired_at}\n\n\
         # Request log chain\n{chain_text}\n\n\
         # Component descriptions\n{components}\n\n\
         # Output format\n{schema}\n",
        name = alert.name,
        expr = alert.expr,
        severity = alert.severity,
        fired_at = alert.fired_at,
        chain_text = chain_text,
        components = components,
        schema = SCHEMA_BLOCK,
    )
}

/// Extracts the first fenced code block (```json or bare ```) from a
/// response; prose outside the fence is ignored.
pub fn extract_fenced_block(response: &str) -> Option<&str> {
    let start = response.find("```")?;
    let after = &response[start + 3..];
    let body_start = after.find('\n')? + 1;
    let end = after[body_start..].find("```")?;
    Some(after[body_start..body_start + end].trim())
}

#[derive(Debug, Deserialize)]
struct RcaBlock {
    #[serde(default)]
    root_causes: Vec<String>,
    #[serde(default)]
    faulty_components: Vec<String>,
    #[serde(default)]
    key_log_evidence: Vec<(String, String)>,
    #[serde(default)]
    inference_details: String,
    #[serde(default)]
    insufficient_logs: bool,
    #[serde(default)]
    logging_quality_notes: Vec<String>,
}

fn parse_json_block<T: serde::de::DeserializeOwned>(response: &str) -> Result<T, String> {
    let block = extract_fenced_block(response)
        .ok_or_else(|| "no fenced block in response".to_string())?;
    serde_json::from_str(block).map_err(|e| e.to_string())
}

/// Calls the reasoning model, parses the structured block, and retries
/// exactly once with a schema reminder on an unparseable response.
/// Components absent from `chain_components` are dropped and noted.
pub fn run_request_rca(
    llm: &dyn LlmClient,
    prompt: &str,
    cluster_id: &str,
    chain_components: &[String],
) -> Result<RequestRCAReport, DiagnosisError> {
    const SYSTEM: &str = "You diagnose request failures from log chains.";
    let first = llm.complete(&LlmRequest::new(Role::Reasoning, SYSTEM, prompt))?;
    let block = match parse_json_block::<RcaBlock>(&first) {
        Ok(b) => b,
        Err(_) => {
            let retry_prompt = format!(
                "{prompt}\nYour previous reply was not machine-readable. \
                 Respond only with the fenced json block in the schema above."
            );
            let second =
                llm.complete(&LlmRequest::new(Role::Reasoning, SYSTEM, &retry_prompt))?;
            parse_json_block::<RcaBlock>(&second).map_err(|detail| {
                DiagnosisError::LlmResponseUnparseable { calls: 2, detail }
            })?
        }
    };

    let mut notes = block.logging_quality_notes;
    let mut faulty = Vec::new();
    for comp in block.faulty_components {
        if chain_components.iter().any(|c| c == &comp) {
            faulty.push(comp);
        } else {
            notes.push(format!(
                "model named component '{comp}' which is absent from the chain; dropped"
            ));
        }
    }
    Ok(RequestRCAReport {
        cluster_id: cluster_id.to_string(),
        root_causes: block.root_causes,
        faulty_components: faulty,
        key_log_evidence: block.key_log_evidence,
        inference_details: block.inference_details,
        insufficient_logs: block.insufficient_logs,
        logging_quality_notes: notes,
    })
}

// --- SOP retrieval ---------------------------------------------------------

fn tokenize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Loads SOP documents from a directory of text files. An optional first
/// line `tags: a, b` carries tags; the first `#` heading (or the file stem)
/// becomes the title. doc_id is the file stem.
pub fn load_sop_dir(dir: &Path) -> Result<Vec<SOPDocument>, DiagnosisError> {
    let io_err = |e: std::io::Error| DiagnosisError::SopIo(dir.display().to_string(), e.to_string());
    let mut docs = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(io_err)?;
        let doc_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut tags = Vec::new();
        let mut body = text.as_str();
        if let Some(rest) = text.strip_prefix("tags:") {
            let (line, remainder) = rest.split_once('\n').unwrap_or((rest, ""));
            tags = line
                .split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect();
            body = remainder;
        }
        let body = body.trim().to_string();
        if body.is_empty() {
            continue;
        }
        let title = body
            .lines()
            .find_map(|l| l.strip_prefix('#'))
            .map(|l| l.trim_start_matches('#').trim().to_string())
            .unwrap_or_else(|| doc_id.clone());
        docs.push(SOPDocument { doc_id, title, body, tags });
    }
    Ok(docs)
}

/// Ranks documents by cosine similarity of tf-idf vectors against the
/// concatenated root-cause query; ties break by doc_id. Returns top-k.
pub fn retrieve_sops(
    root_causes: &[String],
    docs: &[SOPDocument],
    k: usize,
) -> Result<Vec<SOPDocument>, DiagnosisError> {
    if docs.is_empty() {
        return Err(DiagnosisError::EmptyIndex);
    }
    assert!(k >= 1, "k must be at least 1");

    let doc_tokens: Vec<Vec<String>> = docs
        .iter()
        .map(|d| {
            let mut toks = tokenize_text(&d.title);
            toks.extend(tokenize_text(&d.body));
            toks.extend(d.tags.iter().flat_map(|t| tokenize_text(t)));
            toks
        })
        .collect();
    let n = docs.len() as f64;
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for toks in &doc_tokens {
        for tok in toks.iter().collect::<BTreeSet<_>>() {
            *df.entry(tok).or_default() += 1;
        }
    }
    let idf = |tok: &str| df.get(tok).map_or(0.0, |&d| (n / d as f64).ln());

    let weigh = |toks: &[String]| -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
        for tok in toks {
            *tf.entry(tok).or_default() += 1.0;
        }
        tf.into_iter()
            .map(|(tok, f)| (tok.to_string(), f * idf(tok)))
            .collect()
    };
    let query_vec = weigh(&tokenize_text(&root_causes.join(" ")));
    let qnorm: f64 = query_vec.values().map(|v| v * v).sum::<f64>().sqrt();

    let mut ranked: Vec<(f64, &SOPDocument)> = docs
        .iter()
        .zip(&doc_tokens)
        .map(|(doc, toks)| {
            let dvec = weigh(toks);
            let dot: f64 = query_vec
                .iter()
                .filter_map(|(tok, qw)| dvec.get(tok).map(|dw| qw * dw))
                .sum();
            let dnorm: f64 = dvec.values().map(|v| v * v).sum::<f64>().sqrt();
            let sim = if qnorm == 0.0 || dnorm == 0.0 {
                0.0
            } else {
                dot / (qnorm * dnorm)
            };
            (sim, doc)
        })
        .collect();
    ranked.sort_by(|(sa, da), (sb, db)| {
        sb.partial_cmp(sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| da.doc_id.cmp(&db.doc_id))
    });
    Ok(ranked.into_iter().take(k).map(|(_, d)| d.clone()).collect())
}

// --- Log-quality rules -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct LogQualityConfig {
    pub code_field: String,
    pub error_pattern: Regex,
    pub success_pattern: Regex,
}

impl Default for LogQualityConfig {
    fn default() -> Self {
        LogQualityConfig {
            code_field: "code".into(),
            error_pattern: Regex::new("^[45]..$").unwrap(),
            success_pattern: Regex::new("^2..$").unwrap(),
        }
    }
}

fn is_severe(level: Level) -> bool {
    matches!(level, Level::Warn | Level::Error)
}

/// Applies the three deterministic logging-quality rules to one request.
pub fn flag_log_quality(
    chain: &LogChain,
    records: &[RawLogRecord],
    config: &LogQualityConfig,
) -> Vec<LogQualityFlag> {
    let mut flags = Vec::new();
    let request_id = chain.request_id.clone();
    let mut ordered: Vec<&RawLogRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.ts, r.seq));

    let code_of = |rec: &RawLogRecord| rec.fields.get(&config.code_field).cloned();
    let any_severe = ordered.iter().any(|r| is_severe(r.level));
    let final_code = ordered.iter().rev().find_map(|r| code_of(r));
    let final_is_error = final_code
        .as_deref()
        .is_some_and(|c| config.error_pattern.is_match(c));

    // Rule 1: request carries an error code but nothing is logged above info.
    if !any_severe {
        if let Some(rec) = ordered
            .iter()
            .find(|r| code_of(r).is_some_and(|c| config.error_pattern.is_match(&c)))
        {
            flags.push(LogQualityFlag {
                kind: FlagKind::SilentFailure,
                request_id: request_id.clone(),
                component: rec.component.clone(),
                detail: format!(
                    "request returned error code {} but no component logged at warn or error",
                    code_of(rec).unwrap_or_default()
                ),
            });
        }
    }

    // Rule 2: a success code logged at warn/error level.
    for rec in &ordered {
        if is_severe(rec.level) {
            if let Some(code) = code_of(rec) {
                if config.success_pattern.is_match(&code) {
                    flags.push(LogQualityFlag {
                        kind: FlagKind::LevelInconsistency,
                        request_id: request_id.clone(),
                        component: rec.component.clone(),
                        detail: format!(
                            "success code {} logged at {:?} level",
                            code, rec.level
                        ),
                    });
                }
            }
        }
    }

    // Rule 3: a component errors, the next component in the chain stays
    // quiet, and the request still ends in an error.
    if final_is_error {
        let components = chain.components();
        for (idx, seg_component) in components.iter().enumerate() {
            let errored = ordered
                .iter()
                .any(|r| &r.component == seg_component && r.level == Level::Error);
            if !errored {
                continue;
            }
            if let Some(next_component) = components.get(idx + 1) {
                let next_severe = ordered
                    .iter()
                    .any(|r| &r.component == next_component && is_severe(r.level));
                if !next_severe {
                    flags.push(LogQualityFlag {
                        kind: FlagKind::MissingPropagation,
                        request_id: request_id.clone(),
                        component: (*next_component).to_string(),
                        detail: format!(
                            "upstream component {seg_component} logged an error but \
                             {next_component} recorded nothing above info while the \
                             request ended with error code {}",
                            final_code.clone().unwrap_or_default()
                        ),
                    });
                }
            }
        }
    }

    flags
}

pub fn format_flag(flag: &LogQualityFlag) -> String {
    let kind = match flag.kind {
        FlagKind::SilentFailure => "silent_failure",
        FlagKind::LevelInconsistency => "level_inconsistency",
        FlagKind::MissingPropagation => "missing_propagation",
    };
    format!(
        "[{kind}] request {} component {}: {}",
        flag.request_id, flag.component, flag.detail
    )
}

// --- Summary agent ---------------------------------------------------------

#[derive(Debug, Deserialize)]
struct SummaryBlock {
    #[serde(default)]
    summary: String,
    #[serde(default)]
    root_causes: Vec<String>,
    #[serde(default)]
    suggestions: Vec<String>,
}

fn dedup_preserving<T: Clone + PartialEq>(items: impl IntoIterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn summary_prompt(
    alert: &AlertDefinition,
    cluster_reports: &[RequestRCAReport],
    sops: &[SOPDocument],
    flags: &[LogQualityFlag],
) -> String {
    let reports = cluster_reports
        .iter()
        .map(|r| serde_json::to_string(r).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("\n");
    let sop_text = if sops.is_empty() {
        "(none retrieved)".to_string()
    } else {
        sops.iter()
            .map(|s| format!("## {} ({})\n{}", s.title, s.doc_id, s.body))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let flag_text = if flags.is_empty() {
        "(none)".to_string()
    } else {
        flags.iter().map(format_flag).collect::<Vec<_>>().join("\n")
    };
    format!(
        "Synthesize one diagnostic report for the alert from the per-cluster \
         analyses below.\n\n\
         # Alert\nname: {name}\nexpr: {expr}\nseverity: {severity:?}\n\n\
         # Cluster analyses\n{reports}\n\n\
         # Relevant SOP documents\n{sop_text}\n\n\
         # Logging-quality findings\n{flag_text}\n\n\
         # Output format\n\
         Respond with a fenced ```json block containing exactly these keys:\n\
         {{\n  \"summary\": \"...\",\n  \"root_causes\": [\"...\"],\n  \"suggestions\": [\"...\"]\n}}\n",
        name = alert.name,
        expr = alert.expr,
        severity = alert.severity,
        reports = reports,
        sop_text = sop_text,
        flag_text = flag_text,
    )
}

/// Calls the fast model for the narrative parts; every field a test can
/// check (components, key logs, quality feedback, metrics) is computed
/// locally from the cluster reports and flags.
pub fn summarize(
    llm: &dyn LlmClient,
    alert: &AlertDefinition,
    cluster_reports: &[RequestRCAReport],
    sops: &[SOPDocument],
    flags: &[LogQualityFlag],
    metrics: MetricsSummary,
) -> Result<AlertDiagnosisReport, DiagnosisError> {
    assert!(!cluster_reports.is_empty(), "need at least one cluster report");
    const SYSTEM: &str = "You summarize alert diagnoses for on-call engineers.";
    let prompt = summary_prompt(alert, cluster_reports, sops, flags);
    let first = llm.complete(&LlmRequest::new(Role::Fast, SYSTEM, &prompt))?;
    let block = match parse_json_block::<SummaryBlock>(&first) {
        Ok(b) => b,
        Err(_) => {
            let retry_prompt = format!(
                "{prompt}\nYour previous reply was not machine-readable. \
                 Respond only with the fenced json block in the schema above."
            );
            let second = llm.complete(&LlmRequest::new(Role::Fast, SYSTEM, &retry_prompt))?;
            parse_json_block::<SummaryBlock>(&second).map_err(|detail| {
                DiagnosisError::LlmResponseUnparseable { calls: 2, detail }
            })?
        }
    };

    let root_causes = dedup_preserving(
        block
            .root_causes
            .iter()
            .chain(cluster_reports.iter().flat_map(|r| &r.root_causes))
            .cloned(),
    );
    let faulty_components = dedup_preserving(
        cluster_reports
            .iter()
            .flat_map(|r| r.faulty_components.iter().cloned()),
    );
    let key_logs = dedup_preserving(
        cluster_reports
            .iter()
            .flat_map(|r| r.key_log_evidence.iter().cloned()),
    );
    Ok(AlertDiagnosisReport {
        alert_name: alert.name.clone(),
        summary: block.summary,
        root_causes,
        faulty_components,
        key_logs,
        suggestions: block.suggestions,
        logging_quality_feedback: flags.iter().map(format_flag).collect(),
        cluster_reports: cluster_reports.to_vec(),
        metrics,
    })
}

/// Markdown rendering of the final report; deterministic for fixed input.
pub fn render_report_markdown(report: &AlertDiagnosisReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Alert diagnosis: {}\n\n", report.alert_name));
    out.push_str(&format!("{}\n\n", report.summary));
    let list = |title: &str, items: &[String]| -> String {
        if items.is_empty() {
            format!("## {title}\n\n(none)\n\n")
        } else {
            format!(
                "## {title}\n\n{}\n\n",
                items
                    .iter()
                    .map(|i| format!("- {i}"))
                    .collect::<Vec<_>>()
                    .join("\n")
            )
        }
    };
    out.push_str(&list("Root causes", &report.root_causes));
    out.push_str(&list("Faulty components", &report.faulty_components));
    if report.key_logs.is_empty() {
        out.push_str("## Key logs\n\n(none)\n\n");
    } else {
        out.push_str("## Key logs\n\n");
        for (event_id, excerpt) in &report.key_logs {
            out.push_str(&format!("- `{event_id}`: {excerpt}\n"));
        }
        out.push('\n');
    }
    out.push_str(&list("Suggestions", &report.suggestions));
    out.push_str(&list(
        "Logging quality feedback",
        &report.logging_quality_feedback,
    ));
    out.push_str("## Clusters\n\n");
    for r in &report.cluster_reports {
        out.push_str(&format!(
            "### {}\n\n- root causes: {}\n- faulty components: {}\n- insufficient logs: {}\n\n",
            r.cluster_id,
            if r.root_causes.is_empty() {
                "(none)".to_string()
            } else {
                r.root_causes.join("; ")
            },
            if r.faulty_components.is_empty() {
                "(none)".to_string()
            } else {
                r.faulty_components.join(", ")
            },
            r.insufficient_logs,
        ));
    }
    out.push_str(&format!(
        "## Metrics\n\n- scoped requests: {}\n- clusters: {}\n- reduction ratio: {:.4}\n- LLM calls: {}\n",
        report.metrics.scoped_requests,
        report.metrics.clusters,
        report.metrics.reduction_ratio,
        report.metrics.llm_calls,
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::{ComponentSegment, EventRef};
    use crate::llm::{ScenarioRule, ScriptedLlm};
    use crate::promql::Severity;

    fn alert() -> AlertDefinition {
        AlertDefinition {
            name: "HighErrorRate".into(),
            expr: r#"rate(m{code="500"}[1m]) > 0.05"#.into(),
            for_duration: 60,
            severity: Severity::Critical,
            annotations: BTreeMap::new(),
            fired_at: 1_750_000_000_000,
            window_hint: 300,
        }
    }

    fn rule(matcher: &str, response: &str) -> ScenarioRule {
        ScenarioRule {
            matcher: matcher.into(),
            regex: false,
            role: "any".into(),
            response: response.into(),
        }
    }

    const RCA_JSON: &str = "```json\n{\"root_causes\": [\"disk quota exceeded\"], \
        \"faulty_components\": [\"storage\"], \
        \"key_log_evidence\": [[\"e0001\", \"write failed: quota\"]], \
        \"inference_details\": \"storage rejected the write\", \
        \"insufficient_logs\": false, \"logging_quality_notes\": []}\n```";

    #[test]
    fn rca_prompt_is_deterministic_and_marks_empty_docs() {
        let a = alert();
        let empty = BTreeMap::new();
        let p1 = build_rca_prompt(&a, "## storage @ 1\nline", &empty);
        let p2 = build_rca_prompt(&a, "## storage @ 1\nline", &empty);
        assert_eq!(p1, p2);
        assert!(p1.contains("(no component docs provided)"));
        assert!(p1.contains("HighErrorRate"));
        assert!(p1.contains("insufficient_logs"));
    }

    #[test]
    fn rca_parses_valid_block() {
        let llm = ScriptedLlm::new(vec![rule("Diagnose the root cause", RCA_JSON)]).unwrap();
        let report = run_request_rca(
            &llm,
            &build_rca_prompt(&alert(), "chain", &BTreeMap::new()),
            "c0",
            &["storage".to_string()],
        )
        .unwrap();
        assert_eq!(report.root_causes, vec!["disk quota exceeded"]);
        assert_eq!(report.faulty_components, vec!["storage"]);
        assert_eq!(llm.usage().calls, 1);
    }

    #[test]
    fn rca_prose_twice_fails_after_two_calls() {
        let llm =
            ScriptedLlm::new(vec![rule("Diagnose the root cause", "it is broken")]).unwrap();
        let err = run_request_rca(
            &llm,
            &build_rca_prompt(&alert(), "chain", &BTreeMap::new()),
            "c0",
            &[],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DiagnosisError::LlmResponseUnparseable { calls: 2, .. }
        ));
        assert_eq!(llm.usage().calls, 2);
    }

    #[test]
    fn rca_prose_then_valid_recovers_on_retry() {
        let llm = ScriptedLlm::new(vec![
            rule("not machine-readable", RCA_JSON),
            rule("Diagnose the root cause", "let me think about this"),
        ])
        .unwrap();
        let report = run_request_rca(
            &llm,
            &build_rca_prompt(&alert(), "chain", &BTreeMap::new()),
            "c0",
            &["storage".to_string()],
        )
        .unwrap();
        assert_eq!(report.root_causes, vec!["disk quota exceeded"]);
        assert_eq!(llm.usage().calls, 2);
    }

    #[test]
    fn rca_drops_hallucinated_component_with_note() {
        let llm = ScriptedLlm::new(vec![rule("Diagnose the root cause", RCA_JSON)]).unwrap();
        let report = run_request_rca(
            &llm,
            &build_rca_prompt(&alert(), "chain", &BTreeMap::new()),
            "c0",
            &["api-gw".to_string()],
        )
        .unwrap();
        assert!(report.faulty_components.is_empty());
        assert!(report
            .logging_quality_notes
            .iter()
            .any(|n| n.contains("storage")));
    }

    fn sop(doc_id: &str, body: &str) -> SOPDocument {
        SOPDocument {
            doc_id: doc_id.into(),
            title: doc_id.into(),
            body: body.into(),
            tags: vec![],
        }
    }

    #[test]
    fn sop_quota_doc_ranks_first() {
        let docs = vec![
            sop("a-network", "restart the switch when packet loss is observed"),
            sop("b-quota", "when disk quota is exceeded purge old snapshots"),
            sop("c-dns", "flush the dns cache after a resolver failover"),
        ];
        let hits =
            retrieve_sops(&["disk quota exceeded".to_string()], &docs, 3).unwrap();
        assert_eq!(hits[0].doc_id, "b-quota");
    }

    #[test]
    fn sop_k_beyond_corpus_returns_all_ranked() {
        let docs = vec![sop("a", "alpha"), sop("b", "beta")];
        let hits = retrieve_sops(&["alpha".to_string()], &docs, 10).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].doc_id, "a");
    }

    #[test]
    fn sop_ties_break_by_doc_id() {
        let docs = vec![sop("z", "same words here"), sop("a", "same words here")];
        let hits = retrieve_sops(&["same words".to_string()], &docs, 2).unwrap();
        assert_eq!(hits[0].doc_id, "a");
        assert_eq!(hits[1].doc_id, "z");
    }

    #[test]
    fn sop_empty_index_errors() {
        assert!(matches!(
            retrieve_sops(&["x".to_string()], &[], 3),
            Err(DiagnosisError::EmptyIndex)
        ));
    }

    #[test]
    fn sop_dir_loads_tags_and_titles() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("quota.md"),
            "tags: storage, quota\n# Quota exhaustion\nPurge snapshots.\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("plain.md"), "Just a body.\n").unwrap();
        let docs = load_sop_dir(dir.path()).unwrap();
        assert_eq!(docs.len(), 2);
        let quota = docs.iter().find(|d| d.doc_id == "quota").unwrap();
        assert_eq!(quota.tags, vec!["storage", "quota"]);
        assert_eq!(quota.title, "Quota exhaustion");
        assert_eq!(docs.iter().find(|d| d.doc_id == "plain").unwrap().title, "plain");
    }

    fn quality_rec(
        seq: u64,
        ts: i64,
        component: &str,
        level: Level,
        code: Option<&str>,
    ) -> RawLogRecord {
        let mut fields = BTreeMap::new();
        if let Some(code) = code {
            fields.insert("code".to_string(), code.to_string());
        }
        RawLogRecord {
            ts,
            component: component.into(),
            level,
            logging_path: None,
            request_id: Some("r1".into()),
            fields,
            message: "handled".into(),
            seq,
        }
    }

    fn chain_for(components: &[&str]) -> LogChain {
        LogChain {
            request_id: "r1".into(),
            segments: components
                .iter()
                .enumerate()
                .map(|(i, c)| ComponentSegment {
                    component: c.to_string(),
                    earliest_ts: 100 + i as i64,
                    events: vec![EventRef {
                        event_id: format!("e{i}"),
                        first_ts: 100 + i as i64,
                    }],
                })
                .collect(),
            total_raw_events: components.len(),
        }
    }

    #[test]
    fn silent_failure_flags_error_code_with_all_info() {
        let chain = chain_for(&["gw", "storage"]);
        let records = vec![
            quality_rec(0, 100, "gw", Level::Info, None),
            quality_rec(1, 101, "storage", Level::Info, Some("500")),
        ];
        let flags = flag_log_quality(&chain, &records, &LogQualityConfig::default());
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].kind, FlagKind::SilentFailure);
        assert_eq!(flags[0].component, "storage");
    }

    #[test]
    fn level_inconsistency_flags_success_at_warn() {
        let chain = chain_for(&["gw"]);
        let records = vec![quality_rec(0, 100, "gw", Level::Warn, Some("200"))];
        let flags = flag_log_quality(&chain, &records, &LogQualityConfig::default());
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].kind, FlagKind::LevelInconsistency);
    }

    #[test]
    fn missing_propagation_flags_quiet_downstream() {
        let chain = chain_for(&["gw", "storage"]);
        let records = vec![
            quality_rec(0, 100, "gw", Level::Error, Some("500")),
            quality_rec(1, 101, "storage", Level::Info, Some("500")),
        ];
        let flags = flag_log_quality(&chain, &records, &LogQualityConfig::default());
        assert!(flags
            .iter()
            .any(|f| f.kind == FlagKind::MissingPropagation && f.component == "storage"));
    }

    #[test]
    fn healthy_request_has_no_flags() {
        let chain = chain_for(&["gw", "storage"]);
        let records = vec![
            quality_rec(0, 100, "gw", Level::Info, Some("200")),
            quality_rec(1, 101, "storage", Level::Info, Some("200")),
        ];
        assert!(flag_log_quality(&chain, &records, &LogQualityConfig::default()).is_empty());
    }

    fn cluster_report(id: &str, cause: &str, component: &str) -> RequestRCAReport {
        RequestRCAReport {
            cluster_id: id.into(),
            root_causes: vec![cause.into()],
            faulty_components: vec![component.into()],
            key_log_evidence: vec![(format!("e-{id}"), "excerpt".into())],
            inference_details: "details".into(),
            insufficient_logs: false,
            logging_quality_notes: vec![],
        }
    }

    const SUMMARY_JSON: &str = "```json\n{\"summary\": \"storage quota exhaustion caused \
        elevated 5xx\", \"root_causes\": [\"disk quota exceeded\"], \
        \"suggestions\": [\"purge old snapshots\"]}\n```";

    #[test]
    fn summarize_dedups_causes_and_unions_components() {
        let llm = ScriptedLlm::new(vec![rule("Synthesize one diagnostic", SUMMARY_JSON)]).unwrap();
        let reports = vec![
            cluster_report("c0", "disk quota exceeded", "storage"),
            cluster_report("c1", "disk quota exceeded", "api-gw"),
        ];
        let report = summarize(
            &llm,
            &alert(),
            &reports,
            &[],
            &[],
            MetricsSummary {
                scoped_requests: 40,
                clusters: 2,
                llm_calls: 4,
                reduction_ratio: 0.95,
                prompt_tokens: 10,
                response_tokens: 5,
            },
        )
        .unwrap();
        assert_eq!(report.root_causes, vec!["disk quota exceeded"]);
        assert_eq!(report.faulty_components, vec!["storage", "api-gw"]);
        assert_eq!(report.key_logs.len(), 2);
        assert_eq!(report.suggestions, vec!["purge old snapshots"]);
        assert_eq!(llm.usage().calls, 1);
    }

    #[test]
    fn summarize_retry_contract_matches_rca() {
        let llm = ScriptedLlm::new(vec![rule("Synthesize one diagnostic", "prose only")]).unwrap();
        let err = summarize(
            &llm,
            &alert(),
            &[cluster_report("c0", "cause", "gw")],
            &[],
            &[],
            MetricsSummary::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            DiagnosisError::LlmResponseUnparseable { calls: 2, .. }
        ));
        assert_eq!(llm.usage().calls, 2);
    }

    #[test]
    fn markdown_rendering_is_deterministic() {
        let llm = ScriptedLlm::new(vec![rule("Synthesize one diagnostic", SUMMARY_JSON)]).unwrap();
        let report = summarize(
            &llm,
            &alert(),
            &[cluster_report("c0", "disk quota exceeded", "storage")],
            &[],
            &[],
            MetricsSummary::default(),
        )
        .unwrap();
        let a = render_report_markdown(&report);
        let b = render_report_markdown(&report);
        assert_eq!(a, b);
        assert!(a.contains("# Alert diagnosis: HighErrorRate"));
        assert!(a.contains("- disk quota exceeded"));
    }
}
