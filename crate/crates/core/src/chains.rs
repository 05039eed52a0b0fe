//! Per-request spatiotemporal event chains: deduplicate to first
//! occurrences, order chronologically, group by component, and order the
//! component segments by their earliest event.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parsing::LogEvent;
use crate::store::RawLogRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRef {
    pub event_id: String,
    pub first_ts: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSegment {
    pub component: String,
    pub earliest_ts: i64,
    pub events: Vec<EventRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogChain {
    pub request_id: String,
    pub segments: Vec<ComponentSegment>,
    pub total_raw_events: usize,
}

impl LogChain {
    pub fn event_ids(&self) -> Vec<&str> {
        self.segments
            .iter()
            .flat_map(|s| s.events.iter().map(|e| e.event_id.as_str()))
            .collect()
    }

    pub fn components(&self) -> Vec<&str> {
        self.segments.iter().map(|s| s.component.as_str()).collect()
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("request {0} has no records")]
    EmptyRequest(String),
    #[error("record seq {0} has no parse assignment")]
    MissingAssignment(u64),
}

/// Builds the chain for one request. `event_of_seq` maps a record's store
/// seq to its catalog event; all occurrences of a component's events form one
/// segment regardless of interleaving.
pub fn build_chain(
    request_id: &str,
    records: &[RawLogRecord],
    event_of_seq: &dyn Fn(u64) -> Option<LogEvent>,
) -> Result<LogChain, ChainError> {
    if records.is_empty() {
        return Err(ChainError::EmptyRequest(request_id.to_string()));
    }
    let mut ordered: Vec<&RawLogRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.ts, r.seq));

    // First occurrence of each event id, in chronological order.
    let mut seen: HashMap<String, ()> = HashMap::new();
    let mut firsts: Vec<(LogEvent, i64)> = Vec::new();
    for rec in &ordered {
        let event =
            event_of_seq(rec.seq).ok_or(ChainError::MissingAssignment(rec.seq))?;
        if seen.insert(event.event_id.clone(), ()).is_none() {
            firsts.push((event, rec.ts));
        }
    }

    let mut segments: Vec<ComponentSegment> = Vec::new();
    for (event, ts) in firsts {
        match segments
            .iter_mut()
            .find(|s| s.component == event.component)
        {
            Some(seg) => seg.events.push(EventRef {
                event_id: event.event_id,
                first_ts: ts,
            }),
            None => segments.push(ComponentSegment {
                component: event.component.clone(),
                earliest_ts: ts,
                events: vec![EventRef {
                    event_id: event.event_id,
                    first_ts: ts,
                }],
            }),
        }
    }
    // Segments were created in chronological order of their first event, so
    // they are already sorted by earliest_ts; keep the sort for clarity.
    segments.sort_by_key(|s| s.earliest_ts);

    Ok(LogChain {
        request_id: request_id.to_string(),
        segments,
        total_raw_events: records.len(),
    })
}

/// Human-readable rendering of a chain, used verbatim in RCA prompts.
/// Deterministic; bounded by `budget_bytes` with an explicit elision marker.
pub fn render_chain(
    chain: &LogChain,
    catalog: &dyn Fn(&str) -> Option<LogEvent>,
    sample_messages: &HashMap<String, String>,
    levels: &HashMap<String, String>,
    budget_bytes: usize,
) -> String {
    let mut lines: Vec<String> = Vec::new();
    for seg in &chain.segments {
        lines.push(format!("## {} @ {}", seg.component, seg.earliest_ts));
        for ev in &seg.events {
            let template = catalog(&ev.event_id)
                .map(|e| e.template())
                .unwrap_or_else(|| "<unknown event>".to_string());
            let level = levels
                .get(&ev.event_id)
                .map(String::as_str)
                .unwrap_or("info");
            let mut line = format!(
                "{}  {}  {}",
                ev.first_ts,
                level.to_uppercase(),
                template
            );
            if let Some(sample) = sample_messages.get(&ev.event_id) {
                line.push_str(&format!("  | example: {sample}"));
            }
            lines.push(line);
        }
    }

    let total_events: usize = chain.segments.iter().map(|s| s.events.len()).sum();
    let full = lines.join("\n");
    if full.len() <= budget_bytes {
        return full;
    }
    // Drop trailing lines until the text plus marker fits.
    let mut kept_events = total_events;
    loop {
        let line = match lines.pop() {
            Some(l) => l,
            None => break,
        };
        if !line.starts_with("## ") {
            kept_events -= 1;
        }
        let marker = format!("\n…({} events elided)", total_events - kept_events);
        let body = lines.join("\n");
        if body.len() + marker.len() <= budget_bytes {
            return format!("{body}{marker}");
        }
    }
    format!("…({total_events} events elided)")
}
