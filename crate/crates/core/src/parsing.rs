//! Two-tier log parsing: coarse grouping by `(component, logging_path)`,
//! then template extraction within each group via a fixed-depth parse tree.
//!
//! The second tier follows the classic fixed-depth scheme: route by token
//! count, then by the first `tree_depth - 2` tokens (digit-bearing tokens
//! route to wildcard branches), then match against leaf templates by
//! positional similarity. Everything is deterministic, including event id
//! assignment.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::store::RawLogRecord;

pub const WILDCARD: &str = "<*>";
pub const NO_PATH: &str = "__nopath__";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrainParams {
    pub tree_depth: usize,
    pub sim_threshold: f64,
    pub max_children: usize,
}

impl Default for DrainParams {
    fn default() -> Self {
        DrainParams {
            tree_depth: 4,
            sim_threshold: 0.5,
            max_children: 100,
        }
    }
}

/// One extracted log template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub event_id: String,
    pub template_tokens: Vec<String>,
    pub logging_path: Option<String>,
    pub component: String,
}

impl LogEvent {
    pub fn template(&self) -> String {
        self.template_tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseAssignment {
    pub record_seq: u64,
    pub event_index: usize,
}

/// Catalog plus per-record assignments; `event_index` points into `events`.
#[derive(Debug, Clone, Default)]
pub struct ParseResult {
    pub events: Vec<LogEvent>,
    pub assignments: Vec<ParseAssignment>,
}

impl ParseResult {
    pub fn event_for_seq(&self, seq: u64) -> Option<&LogEvent> {
        self.assignments
            .iter()
            .find(|a| a.record_seq == seq)
            .map(|a| &self.events[a.event_index])
    }

    /// seq → event index, for O(1) lookups during chain building.
    pub fn seq_index(&self) -> HashMap<u64, usize> {
        self.assignments
            .iter()
            .map(|a| (a.record_seq, a.event_index))
            .collect()
    }
}

fn is_hex_string(token: &str) -> bool {
    token.len() >= 8 && token.bytes().all(|b| b.is_ascii_hexdigit())
}

fn is_ipv4(token: &str) -> bool {
    let mut parts = 0;
    for part in token.split('.') {
        if part.is_empty() || part.len() > 3 || !part.bytes().all(|b| b.is_ascii_digit()) {
            return false;
        }
        parts += 1;
    }
    parts == 4
}

fn is_pure_number(token: &str) -> bool {
    !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit())
}

/// Whitespace tokenization with the masking pass: pure integers, long hex
/// strings, and IPv4 literals become wildcards.
pub fn tokenize(message: &str) -> Vec<String> {
    message
        .split_whitespace()
        .map(|t| {
            if is_pure_number(t) || is_hex_string(t) || is_ipv4(t) {
                WILDCARD.to_string()
            } else {
                t.to_string()
            }
        })
        .collect()
}

pub type GroupKey = (String, String);

/// Tier one: coarse grouping by `(component, logging_path)`; path-less
/// records share a per-component `__nopath__` group.
pub fn coarse_group(records: &[RawLogRecord]) -> BTreeMap<GroupKey, Vec<&RawLogRecord>> {
    let mut groups: BTreeMap<GroupKey, Vec<&RawLogRecord>> = BTreeMap::new();
    for rec in records {
        let path = rec
            .logging_path
            .clone()
            .unwrap_or_else(|| NO_PATH.to_string());
        groups
            .entry((rec.component.clone(), path))
            .or_default()
            .push(rec);
    }
    groups
}

struct Leaf {
    templates: Vec<Vec<String>>,
}

enum Node {
    Internal {
        children: BTreeMap<String, Node>,
    },
    Leaf(Leaf),
}

fn similarity(template: &[String], tokens: &[String]) -> f64 {
    debug_assert_eq!(template.len(), tokens.len());
    if template.is_empty() {
        return 1.0;
    }
    let equal = template
        .iter()
        .zip(tokens)
        .filter(|(t, s)| *t == *s || t.as_str() == WILDCARD)
        .count();
    equal as f64 / template.len() as f64
}

fn merge_into(template: &mut [String], tokens: &[String]) {
    for (t, s) in template.iter_mut().zip(tokens) {
        if t != s {
            *t = WILDCARD.to_string();
        }
    }
}

struct Tree {
    root: BTreeMap<String, Node>, // keyed by token count
    params: DrainParams,
}

impl Tree {
    fn new(params: DrainParams) -> Self {
        Tree {
            root: BTreeMap::new(),
            params,
        }
    }

    /// Returns the leaf-local template index for the tokenized message,
    /// plus the routing key identifying the leaf.
    fn insert(&mut self, tokens: &[String]) -> (String, usize) {
        let depth = self.params.tree_depth.max(2);
        let max_children = self.params.max_children.max(1);
        let len_key = tokens.len().to_string();
        let mut route = vec![len_key.clone()];
        let mut node = self
            .root
            .entry(len_key)
            .or_insert_with(|| Node::Internal {
                children: BTreeMap::new(),
            });
        for level in 0..depth.saturating_sub(2) {
            let raw = tokens.get(level).map(String::as_str).unwrap_or("");
            let wanted = if raw.bytes().any(|b| b.is_ascii_digit()) {
                WILDCARD.to_string()
            } else {
                raw.to_string()
            };
            let children = match node {
                Node::Internal { children } => children,
                Node::Leaf(_) => break,
            };
            let last_level = level + 1 == depth.saturating_sub(2) || level + 1 >= tokens.len();
            let make_child = || {
                if last_level {
                    Node::Leaf(Leaf {
                        templates: Vec::new(),
                    })
                } else {
                    Node::Internal {
                        children: BTreeMap::new(),
                    }
                }
            };
            let key = if children.contains_key(&wanted)
                || children.len() < max_children
                || wanted == WILDCARD
            {
                wanted
            } else {
                // Branch overflow routes to the catch-all wildcard child.
                WILDCARD.to_string()
            };
            node = children.entry(key.clone()).or_insert_with(make_child);
            route.push(key);
            if matches!(node, Node::Leaf(_)) {
                break;
            }
        }
        // Degenerate trees (depth 2) keep templates directly under the
        // length bucket.
        if matches!(node, Node::Internal { .. }) {
            let children = match node {
                Node::Internal { children } => children,
                _ => unreachable!(),
            };
            node = children.entry(String::new()).or_insert_with(|| {
                Node::Leaf(Leaf {
                    templates: Vec::new(),
                })
            });
            route.push(String::new());
        }
        let leaf = match node {
            Node::Leaf(leaf) => leaf,
            _ => unreachable!(),
        };

        let mut best: Option<(usize, f64)> = None;
        for (i, t) in leaf.templates.iter().enumerate() {
            let sim = similarity(t, tokens);
            if best.map_or(true, |(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        let route_key = route.join("\u{1f}");
        match best {
            Some((i, sim)) if sim >= self.params.sim_threshold => {
                merge_into(&mut leaf.templates[i], tokens);
                (route_key, i)
            }
            _ if leaf.templates.len() >= max_children => {
                // Leaf is full: merge with the closest existing template.
                let (i, _) = best.expect("full leaf has templates");
                merge_into(&mut leaf.templates[i], tokens);
                (route_key, i)
            }
            _ => {
                leaf.templates.push(tokens.to_vec());
                (route_key, leaf.templates.len() - 1)
            }
        }
    }

    fn template(&self, route_key: &str, idx: usize) -> Vec<String> {
        let mut parts = route_key.split('\u{1f}');
        let first = parts.next().unwrap();
        let mut node = &self.root[first];
        for part in parts {
            node = match node {
                Node::Internal { children } => &children[part],
                Node::Leaf(_) => break,
            };
        }
        match node {
            Node::Leaf(leaf) => leaf.templates[idx].clone(),
            _ => unreachable!(),
        }
    }
}

/// Tier two: extracts templates from one coarse group. Returned events carry
/// group-local ids; [`parse_all`] renumbers them globally.
pub fn template_extract(
    group: &[&RawLogRecord],
    params: &DrainParams,
) -> (Vec<LogEvent>, Vec<ParseAssignment>) {
    let (component, logging_path) = match group.first() {
        Some(rec) => (rec.component.clone(), rec.logging_path.clone()),
        None => return (Vec::new(), Vec::new()),
    };
    let mut tree = Tree::new(*params);
    let mut slots: Vec<(String, usize)> = Vec::with_capacity(group.len());
    // First creation order per (route, idx) slot decides event ordering.
    let mut order: Vec<(String, usize)> = Vec::new();
    for rec in group {
        let tokens = tokenize(&rec.message);
        let slot = tree.insert(&tokens);
        if !order.contains(&slot) {
            order.push(slot.clone());
        }
        slots.push(slot);
    }
    let events: Vec<LogEvent> = order
        .iter()
        .enumerate()
        .map(|(i, (route, idx))| LogEvent {
            event_id: format!("e{i:04}"),
            template_tokens: tree.template(route, *idx),
            logging_path: logging_path.clone(),
            component: component.clone(),
        })
        .collect();
    let assignments = group
        .iter()
        .zip(&slots)
        .map(|(rec, slot)| ParseAssignment {
            record_seq: rec.seq,
            event_index: order.iter().position(|s| s == slot).unwrap(),
        })
        .collect();
    (events, assignments)
}

/// Both tiers composed over the whole record set. Event ids are assigned by
/// sorted group key, then template creation order within the group.
pub fn parse_all(records: &[RawLogRecord], params: &DrainParams) -> ParseResult {
    let groups = coarse_group(records);
    let mut result = ParseResult::default();
    for (_key, group) in groups {
        let (events, assignments) = template_extract(&group, params);
        let base = result.events.len();
        for (i, mut ev) in events.into_iter().enumerate() {
            ev.event_id = format!("e{:04}", base + i);
            result.events.push(ev);
        }
        for a in assignments {
            result.assignments.push(ParseAssignment {
                record_seq: a.record_seq,
                event_index: base + a.event_index,
            });
        }
    }
    result.assignments.sort_by_key(|a| a.record_seq);
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Level;

    fn rec(seq: u64, component: &str, path: Option<&str>, message: &str) -> RawLogRecord {
        RawLogRecord {
            ts: 1000 + seq as i64,
            component: component.into(),
            level: Level::Info,
            logging_path: path.map(|s| s.into()),
            request_id: None,
            fields: BTreeMap::new(),
            message: message.into(),
            seq,
        }
    }

    use std::collections::BTreeMap;

    #[test]
    fn coarse_group_by_component_and_path() {
        let records = vec![
            rec(0, "svc", Some("a.go:1"), "x"),
            rec(1, "svc", Some("a.go:1"), "y"),
            rec(2, "svc", Some("b.go:2"), "z"),
            rec(3, "svc", None, "w"),
        ];
        let groups = coarse_group(&records);
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[&("svc".into(), "a.go:1".into())].len(), 2);
        assert_eq!(groups[&("svc".into(), "b.go:2".into())].len(), 1);
        assert_eq!(groups[&("svc".into(), NO_PATH.into())].len(), 1);
    }

    #[test]
    fn coarse_group_pathless_split_by_component() {
        let records = vec![rec(0, "a", None, "x"), rec(1, "b", None, "y")];
        assert_eq!(coarse_group(&records).len(), 2);
    }

    #[test]
    fn coarse_group_empty() {
        assert!(coarse_group(&[]).is_empty());
    }

    #[test]
    fn masking_covers_numbers_hex_and_ips() {
        assert_eq!(
            tokenize("retry 42 for deadbeef01 from 10.2.3.4 now"),
            vec!["retry", WILDCARD, "for", WILDCARD, "from", WILDCARD, "now"]
        );
        // Short hex and mixed tokens stay literal.
        assert_eq!(tokenize("cafe id=7"), vec!["cafe", "id=7"]);
    }

    #[test]
    fn merges_messages_differing_in_masked_variable() {
        let r0 = rec(0, "svc", Some("net.go:10"), "connect to 10.2.3.4 failed");
        let r1 = rec(1, "svc", Some("net.go:10"), "connect to 10.9.9.9 failed");
        let group = vec![&r0, &r1];
        let (events, assignments) = template_extract(&group, &DrainParams::default());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].template(), "connect to <*> failed");
        assert_eq!(assignments[0].event_index, assignments[1].event_index);
    }

    #[test]
    fn merges_on_unmasked_variable_token() {
        let r0 = rec(0, "svc", Some("q.go:3"), "query users returned rows=5x");
        let r1 = rec(1, "svc", Some("q.go:3"), "query users returned rows=9y");
        let group = vec![&r0, &r1];
        let (events, _) = template_extract(&group, &DrainParams::default());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].template(), "query users returned <*>");
    }

    #[test]
    fn disjoint_token_counts_split_templates() {
        let r0 = rec(0, "svc", Some("p.go:1"), "started worker pool");
        let r1 = rec(1, "svc", Some("p.go:1"), "started worker pool with ten threads");
        let group = vec![&r0, &r1];
        let (events, _) = template_extract(&group, &DrainParams::default());
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn single_message_is_its_own_masked_template() {
        let r0 = rec(0, "svc", None, "flush segment 17 done");
        let group = vec![&r0];
        let (events, assignments) = template_extract(&group, &DrainParams::default());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].template(), "flush segment <*> done");
        assert_eq!(assignments.len(), 1);
    }

    #[test]
    fn parse_all_is_complete_and_deterministic() {
        let records: Vec<RawLogRecord> = (0..20)
            .map(|i| {
                let comp = if i % 2 == 0 { "alpha" } else { "beta" };
                rec(
                    i,
                    comp,
                    Some("h.go:5"),
                    &format!("handled item {} in queue", i * 7),
                )
            })
            .collect();
        let a = parse_all(&records, &DrainParams::default());
        let b = parse_all(&records, &DrainParams::default());
        assert_eq!(a.assignments.len(), records.len());
        assert!(a
            .assignments
            .iter()
            .all(|x| x.event_index < a.events.len()));
        assert_eq!(a.events, b.events);
        assert_eq!(a.assignments, b.assignments);
        // Two components, same path → two events.
        assert_eq!(a.events.len(), 2);
    }

    #[test]
    fn parse_all_empty_input() {
        let result = parse_all(&[], &DrainParams::default());
        assert!(result.events.is_empty());
        assert!(result.assignments.is_empty());
    }

    #[test]
    fn same_event_id_implies_same_group_and_token_count() {
        let records: Vec<RawLogRecord> = vec![
            rec(0, "svc", Some("a.go:1"), "user 1 logged in"),
            rec(1, "svc", Some("a.go:1"), "user 2 logged in"),
            rec(2, "svc", Some("a.go:1"), "session expired early today ok"),
            rec(3, "svc", None, "user 3 logged in"),
        ];
        let result = parse_all(&records, &DrainParams::default());
        let index = result.seq_index();
        assert_eq!(index[&0], index[&1]);
        assert_ne!(index[&0], index[&2]);
        assert_ne!(index[&0], index[&3]); // different coarse group
    }

    #[test]
    fn appending_records_keeps_existing_assignments() {
        let base: Vec<RawLogRecord> = (0..10)
            .map(|i| rec(i, "svc", Some("x.go:2"), &format!("op {} finished ok", i)))
            .collect();
        let mut extended = base.clone();
        extended.push(rec(10, "svc", Some("x.go:2"), "op 10 finished ok"));
        let a = parse_all(&base, &DrainParams::default());
        let b = parse_all(&extended, &DrainParams::default());
        let ia = a.seq_index();
        let ib = b.seq_index();
        for seq in 0..10u64 {
            assert_eq!(
                a.events[ia[&seq]].template(),
                b.events[ib[&seq]].template()
            );
        }
    }
}
