//! Request clustering: event-count embeddings, log-scaled cosine similarity,
//! hierarchical agglomerative clustering under a similarity threshold, and
//! centroid-nearest representative selection.
//!
//! Counts are log-scaled (`ln(1 + v)`) before the cosine so high-frequency
//! events do not dominate the score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ordered event-id vocabulary shared by all requests of one alert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventVocabulary {
    entries: Vec<String>,
}

impl EventVocabulary {
    /// Builds the vocabulary over all events seen across requests, sorted by
    /// event id for determinism.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(
        event_ids: I,
    ) -> Result<Self, ClusterError> {
        let mut entries: Vec<String> = event_ids.into_iter().map(|s| s.to_string()).collect();
        entries.sort();
        entries.dedup();
        if entries.is_empty() {
            return Err(ClusterError::EmptyInput);
        }
        Ok(EventVocabulary { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn position(&self, event_id: &str) -> Option<usize> {
        self.entries.binary_search_by(|e| e.as_str().cmp(event_id)).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestEmbedding {
    pub request_id: String,
    pub counts: Vec<u64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no events to build a vocabulary from")]
    EmptyInput,
    #[error("event {0} is not in the vocabulary")]
    UnknownEvent(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Counts each event occurrence over the request's raw (pre-dedup) records.
pub fn embed_request<'a, I: IntoIterator<Item = &'a str>>(
    request_id: &str,
    event_occurrences: I,
    vocab: &EventVocabulary,
) -> Result<RequestEmbedding, ClusterError> {
    let mut counts = vec![0u64; vocab.len()];
    for id in event_occurrences {
        let pos = vocab
            .position(id)
            .ok_or_else(|| ClusterError::UnknownEvent(id.to_string()))?;
        counts[pos] += 1;
    }
    Ok(RequestEmbedding {
        request_id: request_id.to_string(),
        counts,
    })
}

pub fn log_scale(counts: &[u64]) -> Vec<f64> {
    counts.iter().map(|&v| (1.0 + v as f64).ln()).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Log-scaled cosine similarity between two request embeddings.
pub fn similarity(a: &RequestEmbedding, b: &RequestEmbedding) -> Result<f64, ClusterError> {
    if a.counts.len() != b.counts.len() {
        return Err(ClusterError::DimensionMismatch(
            a.counts.len(),
            b.counts.len(),
        ));
    }
    Ok(cosine(&log_scale(&a.counts), &log_scale(&b.counts)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    Average,
}

impl Default for Linkage {
    fn default() -> Self {
        Linkage::Average
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<String>,
    pub representative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub threshold: f64,
    pub clusters: Vec<Cluster>,
}

/// Incremental agglomerator. Cluster slots reuse the absorbing point's
/// index; `stat[i][j]` holds the mergeable linkage statistic between the
/// clusters in slots i and j (sum of point similarities for average
/// linkage, max for single, min for complete), so every pair similarity is
/// O(1) after the initial point-similarity matrix.
struct Agglomerator<'a> {
    stat: Vec<Vec<f64>>,
    sizes: Vec<usize>,
    members: Vec<Option<Vec<usize>>>,
    /// Sorted member-id key per active slot, kept merged for tie-breaks.
    keys: Vec<Option<Vec<&'a str>>>,
    /// Cached best merge partner per active slot (same comparator as the
    /// global scan, so the global best is the max over cached bests).
    best: Vec<Option<usize>>,
    linkage: Linkage,
}

impl<'a> Agglomerator<'a> {
    fn sim(&self, i: usize, j: usize) -> f64 {
        match self.linkage {
            Linkage::Average => self.stat[i][j] / (self.sizes[i] * self.sizes[j]) as f64,
            _ => self.stat[i][j],
        }
    }

    fn pair_key(&self, i: usize, j: usize) -> (&Vec<&'a str>, &Vec<&'a str>) {
        let ka = self.keys[i].as_ref().unwrap();
        let kb = self.keys[j].as_ref().unwrap();
        if ka <= kb {
            (ka, kb)
        } else {
            (kb, ka)
        }
    }

    /// Is pair (i1, j1) a better merge candidate than (i2, j2)? Higher
    /// similarity wins; ties go to the lexicographically smallest sorted
    /// member-id pair.
    fn is_better(&self, i1: usize, j1: usize, i2: usize, j2: usize) -> bool {
        let s1 = self.sim(i1, j1);
        let s2 = self.sim(i2, j2);
        if s1 != s2 {
            return s1 > s2;
        }
        let (lo1, hi1) = self.pair_key(i1, j1);
        let (lo2, hi2) = self.pair_key(i2, j2);
        (lo1, hi1) < (lo2, hi2)
    }

    fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|_| i))
    }

    fn compute_best(&self, i: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for j in self.active() {
            if j == i {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => self.is_better(i, j, i, b),
            };
            if better {
                best = Some(j);
            }
        }
        best
    }

    /// Merges slot `b` into slot `a` and repairs the affected caches.
    fn merge(&mut self, a: usize, b: usize) {
        let taken = self.members[b].take().unwrap();
        self.members[a].as_mut().unwrap().extend(taken);
        let kb = self.keys[b].take().unwrap();
        let ka = self.keys[a].take().unwrap();
        let mut merged_key = Vec::with_capacity(ka.len() + kb.len());
        let (mut x, mut y) = (ka.into_iter().peekable(), kb.into_iter().peekable());
        loop {
            match (x.peek(), y.peek()) {
                (Some(&kx), Some(&ky)) => {
                    if kx <= ky {
                        merged_key.push(x.next().unwrap());
                    } else {
                        merged_key.push(y.next().unwrap());
                    }
                }
                (Some(_), None) => merged_key.push(x.next().unwrap()),
                (None, Some(_)) => merged_key.push(y.next().unwrap()),
                (None, None) => break,
            }
        }
        self.keys[a] = Some(merged_key);
        self.sizes[a] += self.sizes[b];
        self.best[b] = None;

        let actives: Vec<usize> = self.active().collect();
        for &d in &actives {
            if d == a {
                continue;
            }
            let combined = match self.linkage {
                Linkage::Average => self.stat[a][d] + self.stat[b][d],
                Linkage::Single => self.stat[a][d].max(self.stat[b][d]),
                Linkage::Complete => self.stat[a][d].min(self.stat[b][d]),
            };
            self.stat[a][d] = combined;
            self.stat[d][a] = combined;
        }
        self.best[a] = self.compute_best(a);
        for &d in &actives {
            if d == a {
                continue;
            }
            match self.best[d] {
                // The cached partner's statistics changed (or vanished):
                // recompute from scratch.
                Some(p) if p == a || p == b => self.best[d] = self.compute_best(d),
                // Otherwise the merged cluster is the only new candidate.
                Some(p) => {
                    if self.is_better(d, a, d, p) {
                        self.best[d] = Some(a);
                    }
                }
                None => self.best[d] = self.compute_best(d),
            }
        }
    }
}

/// Agglomerative clustering: repeatedly merge the globally most-similar pair
/// of clusters while that similarity is at least `theta`. Ties break on the
/// lexicographically smallest (sorted) member-id pair.
pub fn hac_cluster(
    embeddings: &[RequestEmbedding],
    theta: f64,
    linkage: Linkage,
) -> Result<ClusterSet, ClusterError> {
    if embeddings.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    let n = embeddings.len();
    let scaled: Vec<Vec<f64>> = embeddings.iter().map(|e| log_scale(&e.counts)).collect();
    for e in embeddings {
        if e.counts.len() != embeddings[0].counts.len() {
            return Err(ClusterError::DimensionMismatch(
                embeddings[0].counts.len(),
                e.counts.len(),
            ));
        }
    }
    let mut sims = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        sims[i][i] = 1.0;
        for j in (i + 1)..n {
            let s = cosine(&scaled[i], &scaled[j]);
            sims[i][j] = s;
            sims[j][i] = s;
        }
    }
    let mut agg = Agglomerator {
        stat: sims,
        sizes: vec![1; n],
        members: (0..n).map(|i| Some(vec![i])).collect(),
        keys: (0..n)
            .map(|i| Some(vec![embeddings[i].request_id.as_str()]))
            .collect(),
        best: vec![None; n],
        linkage,
    };
    for i in 0..n {
        agg.best[i] = agg.compute_best(i);
    }

    loop {
        // Global best = best over the per-slot cached candidates.
        let mut global: Option<(usize, usize)> = None;
        for i in agg.active() {
            let Some(j) = agg.best[i] else { continue };
            let better = match global {
                None => true,
                Some((gi, gj)) => agg.is_better(i, j, gi, gj),
            };
            if better {
                global = Some((i, j));
            }
        }
        match global {
            Some((i, j)) if agg.sim(i, j) >= theta => {
                // Absorb into the lower slot, matching singleton creation order.
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                agg.merge(a, b);
            }
            _ => break,
        }
    }

    let mut clusters: Vec<Cluster> = agg
        .members
        .iter()
        .flatten()
        .map(|members| {
            let ids: Vec<String> = {
                let mut ids: Vec<String> = members
                    .iter()
                    .map(|&i| embeddings[i].request_id.clone())
                    .collect();
                ids.sort();
                ids
            };
            let representative = select_representative(&ids, embeddings);
            Cluster {
                members: ids,
                representative,
            }
        })
        .collect();
    clusters.sort_by(|a, b| a.members.cmp(&b.members));
    Ok(ClusterSet {
        threshold: theta,
        clusters,
    })
}

/// The member whose log-scaled vector is most cosine-similar to the cluster
/// centroid (computed in log-scaled space); ties break by smallest id.
pub fn select_representative(members: &[String], embeddings: &[RequestEmbedding]) -> String {
    assert!(!members.is_empty(), "cluster must be non-empty");
    let vectors: Vec<(&str, Vec<f64>)> = members
        .iter()
        .map(|id| {
            let e = embeddings
                .iter()
                .find(|e| &e.request_id == id)
                .expect("member has an embedding");
            (id.as_str(), log_scale(&e.counts))
        })
        .collect();
    let dim = vectors[0].1.len();
    let mut centroid = vec![0.0f64; dim];
    for (_, v) in &vectors {
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
    }
    for c in &mut centroid {
        *c /= vectors.len() as f64;
    }
    let mut best: Option<(&str, f64)> = None;
    let mut sorted: Vec<&(&str, Vec<f64>)> = vectors.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    for (id, v) in sorted {
        let s = cosine(v, &centroid);
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((id, s));
        }
    }
    best.unwrap().0.to_string()
}
