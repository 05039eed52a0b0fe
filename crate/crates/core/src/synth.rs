//! Seeded synthetic workload generator for verification: emits request logs
//! that follow per-pattern component paths, an alert whose matchers select
//! exactly those requests, and a ground-truth request→pattern map. The
//! generator asserts its own similarity separation targets and fails loudly
//! if jitter breaks them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cosine, log_scale};
use crate::promql::{AlertDefinition, Severity};
use crate::store::{Level, RawLogRecord};

pub const SYNTH_FIRED_AT: i64 = 1_750_000_000_000;
const WINDOW_S: u64 = 300;
const FOR_S: u64 = 60;
const CROSS_SIM_MAX: f64 = 0.3;
const WITHIN_SIM_MIN: f64 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultPattern {
    pub pattern_id: String,
    pub weight: f64,
    pub error_template_ids: Vec<usize>,
    pub component_path: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_requests: usize,
    pub n_components: usize,
    pub fault_patterns: Vec<FaultPattern>,
    pub seed: u64,
}

impl SynthSpec {
    /// Equal-weight spec with `n_patterns` patterns walking staggered
    /// component paths; handy default for tests and the CLI.
    pub fn uniform(n_requests: usize, n_patterns: usize, seed: u64) -> SynthSpec {
        let n_components = (n_patterns + 1).max(3);
        let fault_patterns = (0..n_patterns)
            .map(|p| FaultPattern {
                pattern_id: format!("p{p}"),
                weight: 1.0 / n_patterns as f64,
                error_template_ids: vec![p],
                component_path: vec![0, 1 + p % (n_components - 1)],
            })
            .collect();
        SynthSpec {
            n_requests,
            n_components,
            fault_patterns,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_components < 1 {
            return Err(SynthError::InvalidSpec("n_components must be ≥ 1".into()));
        }
        if self.fault_patterns.is_empty() {
            return Err(SynthError::InvalidSpec("need at least one fault pattern".into()));
        }
        let total: f64 = self.fault_patterns.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidSpec(format!(
                "pattern weights sum to {total}, expected 1"
            )));
        }
        for p in &self.fault_patterns {
            if p.component_path.is_empty() {
                return Err(SynthError::InvalidSpec(format!(
                    "pattern {} has an empty component path",
                    p.pattern_id
                )));
            }
            if let Some(&bad) = p.component_path.iter().find(|&&c| c >= self.n_components) {
                return Err(SynthError::InvalidSpec(format!(
                    "pattern {} references component {bad} but only {} exist",
                    p.pattern_id, self.n_components
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("separation unachievable: {0}")]
    SeparationUnachievable(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub records: Vec<RawLogRecord>,
    pub alert: AlertDefinition,
    pub truth: BTreeMap<String, String>,
}

fn component_name(idx: usize) -> String {
    format!("svc-{idx}")
}

/// Generates the workload in memory. Deterministic for a fixed spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Seeded multinomial pattern assignment.
    let mut assignments: Vec<usize> = Vec::with_capacity(spec.n_requests);
    for _ in 0..spec.n_requests {
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = spec.fault_patterns.len() - 1;
        for (idx, p) in spec.fault_patterns.iter().enumerate() {
            acc += p.weight;
            if draw < acc {
                chosen = idx;
                break;
            }
        }
        assignments.push(chosen);
    }

    let window_start = SYNTH_FIRED_AT - (WINDOW_S as i64) * 1000;
    let mut records = Vec::new();
    let mut truth = BTreeMap::new();
    // Count vectors over template keys, per request, for the separation check.
    let mut vectors: Vec<BTreeMap<String, u64>> = Vec::with_capacity(spec.n_requests);

    for (req_idx, &pat_idx) in assignments.iter().enumerate() {
        let pattern = &spec.fault_patterns[pat_idx];
        let request_id = format!("r{req_idx:04}");
        truth.insert(request_id.clone(), pattern.pattern_id.clone());
        let mut ts = window_start + rng.gen_range(0..(WINDOW_S as i64 - 10) * 1000);
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();

        let mut push = |ts: i64, comp: usize, path: String, level: Level, message: String| {
            let mut fields = BTreeMap::new();
            fields.insert("code".to_string(), "500".to_string());
            fields.insert("gateway_id".to_string(), "gw-1".to_string());
            records.push(RawLogRecord {
                ts,
                component: component_name(comp),
                level,
                logging_path: Some(path),
                request_id: Some(request_id.clone()),
                fields,
                message,
                seq: 0,
            });
        };

        for (stage, &comp) in pattern.component_path.iter().enumerate() {
            // Two normal templates per stage, each repeated 1–2 times
            // (benign count jitter); variable parts are numeric so template
            // extraction collapses them.
            for tpl in 0..2u32 {
                let key = format!("{}.c{comp}.s{stage}.t{tpl}", pattern.pattern_id);
                let path = format!("svc/{}/c{comp}/s{stage}/t{tpl}", pattern.pattern_id);
                let repeats = 1 + rng.gen_range(0..2u64);
                for _ in 0..repeats {
                    let message = match tpl {
                        0 => format!("stage {stage} begin handling request {req_idx}"),
                        _ => format!("stage {stage} finished step in {} ms", rng.gen_range(1..500)),
                    };
                    push(ts, comp, path.clone(), Level::Info, message);
                    *counts.entry(key.clone()).or_default() += 1;
                    ts += 1;
                }
            }
        }
        // Error templates fire on the last component of the path.
        let last_comp = *pattern.component_path.last().unwrap();
        for &err_id in &pattern.error_template_ids {
            let key = format!("{}.err{err_id}", pattern.pattern_id);
            let path = format!("svc/{}/err{err_id}", pattern.pattern_id);
            push(
                ts,
                last_comp,
                path,
                Level::Error,
                format!(
                    "fault {} e{err_id} request {req_idx} failed with code 500",
                    pattern.pattern_id
                ),
            );
            *counts.entry(key).or_default() += 1;
            ts += 1;
        }
        vectors.push(counts);
    }

    check_separation(&assignments, &vectors, spec)?;

    let alert = AlertDefinition {
        name: "SynthHighErrorRate".to_string(),
        expr: format!(
            r#"rate(http_requests_total{{code="500",gateway_id="gw-1"}}[{WINDOW_S}s]) > 0.05"#
        ),
        for_duration: FOR_S,
        severity: Severity::Critical,
        annotations: BTreeMap::new(),
        fired_at: SYNTH_FIRED_AT,
        window_hint: WINDOW_S,
    };

    Ok(SynthData { records, alert, truth })
}

fn check_separation(
    assignments: &[usize],
    vectors: &[BTreeMap<String, u64>],
    spec: &SynthSpec,
) -> Result<(), SynthError> {
    // Shared vocabulary over all template keys.
    let vocab: Vec<&String> = {
        let mut keys: Vec<&String> = vectors.iter().flat_map(|v| v.keys()).collect();
        keys.sort();
        keys.dedup();
        keys
    };
    let dense: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let counts: Vec<u64> = vocab
                .iter()
                .map(|k| v.get(*k).copied().unwrap_or(0))
                .collect();
            log_scale(&counts)
        })
        .collect();

    // One exemplar pair per pattern-pair is not enough under jitter; check
    // every request against one exemplar per pattern to stay O(n·p).
    let mut exemplar: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, &pat) in assignments.iter().enumerate() {
        exemplar.entry(pat).or_insert(idx);
    }
    for (idx, &pat) in assignments.iter().enumerate() {
        for (&other_pat, &ex_idx) in &exemplar {
            if ex_idx == idx {
                continue;
            }
            let sim = cosine(&dense[idx], &dense[ex_idx]);
            if other_pat == pat && sim <= WITHIN_SIM_MIN {
                return Err(SynthError::SeparationUnachievable(format!(
                    "within-pattern similarity {sim:.3} ≤ {WITHIN_SIM_MIN} for pattern {}",
                    spec.fault_patterns[pat].pattern_id
                )));
            }
            if other_pat != pat && sim >= CROSS_SIM_MAX {
                return Err(SynthError::SeparationUnachievable(format!(
                    "cross-pattern similarity {sim:.3} ≥ {CROSS_SIM_MAX} between {} and {}",
                    spec.fault_patterns[pat].pattern_id,
                    spec.fault_patterns[other_pat].pattern_id
                )));
            }
        }
    }
    Ok(())
}

/// Writes logs.jsonl, alert.json, and truth.json under `out`.
pub fn gen_synth(spec: &SynthSpec, out: &Path) -> Result<(PathBuf, PathBuf, PathBuf), SynthError> {
    let data = generate(spec)?;
    std::fs::create_dir_all(out)?;
    let log_file = out.join("logs.jsonl");
    let alert_file = out.join("alert.json");
    let truth_file = out.join("truth.json");

    let mut jsonl = String::new();
    for rec in &data.records {
        jsonl.push_str(&serde_json::to_string(rec)?);
        jsonl.push('\n');
    }
    std::fs::write(&log_file, jsonl)?;
    std::fs::write(&alert_file, serde_json::to_string_pretty(&data.alert)?)?;
    std::fs::write(&truth_file, serde_json::to_string_pretty(&data.truth)?)?;
    Ok((log_file, alert_file, truth_file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pattern_truth_covers_all_requests() {
        let spec = SynthSpec::uniform(10, 1, 7);
        let data = generate(&spec).unwrap();
        assert_eq!(data.truth.len(), 10);
        assert!(data.truth.values().all(|p| p == "p0"));
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::uniform(25, 3, 42);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        gen_synth(&spec, &a).unwrap();
        gen_synth(&spec, &b).unwrap();
        for name in ["logs.jsonl", "alert.json", "truth.json"] {
            assert_eq!(
                std::fs::read(a.join(name)).unwrap(),
                std::fs::read(b.join(name)).unwrap(),
                "{name} differs"
            );
        }
    }

    #[test]
    fn weighted_split_lands_near_expectation() {
        let spec = SynthSpec {
            n_requests: 100,
            n_components: 4,
            fault_patterns: vec![
                FaultPattern {
                    pattern_id: "p0".into(),
                    weight: 0.5,
                    error_template_ids: vec![0],
                    component_path: vec![0, 1],
                },
                FaultPattern {
                    pattern_id: "p1".into(),
                    weight: 0.3,
                    error_template_ids: vec![1],
                    component_path: vec![0, 2],
                },
                FaultPattern {
                    pattern_id: "p2".into(),
                    weight: 0.2,
                    error_template_ids: vec![2],
                    component_path: vec![0, 3],
                },
            ],
            seed: 99,
        };
        let data = generate(&spec).unwrap();
        let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
        for p in data.truth.values() {
            *counts.entry(p.as_str()).or_default() += 1;
        }
        assert!((counts["p0"] - 50).abs() <= 10, "p0 count {}", counts["p0"]);
        assert!((counts["p1"] - 30).abs() <= 10, "p1 count {}", counts["p1"]);
        assert!((counts["p2"] - 20).abs() <= 10, "p2 count {}", counts["p2"]);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let mut spec = SynthSpec::uniform(10, 2, 1);
        spec.fault_patterns[0].weight = 0.9;
        assert!(matches!(generate(&spec), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn out_of_range_component_is_rejected() {
        let mut spec = SynthSpec::uniform(10, 2, 1);
        spec.fault_patterns[0].component_path = vec![99];
        assert!(matches!(generate(&spec), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn records_carry_alert_matcher_fields_and_window() {
        let spec = SynthSpec::uniform(20, 2, 5);
        let data = generate(&spec).unwrap();
        let window_start = SYNTH_FIRED_AT - 300_000;
        for rec in &data.records {
            assert_eq!(rec.fields["code"], "500");
            assert_eq!(rec.fields["gateway_id"], "gw-1");
            assert!(rec.ts >= window_start && rec.ts < SYNTH_FIRED_AT);
            assert!(rec.request_id.is_some());
        }
    }
}
