//! Cluster-level retrieval evaluation.

use log::warn;

use crate::corpus::Corpus;
use crate::error::{Error, Result};

use super::loss::cosine;
use super::EmbeddingSpace;

#[derive(Clone, Debug)]
pub struct RetrievalReport {
    pub f1: f64,
    pub clusters_evaluated: usize,
    /// Clusters with no member question in the corpus.
    pub clusters_skipped: usize,
    /// (cluster id, per-cluster F1), evaluated clusters only.
    pub per_cluster: Vec<(u32, f64)>,
}

/// For each cluster: take the lowest member KC as representative, retrieve
/// the N questions nearest its vector (N = number of questions whose KC
/// set meets the cluster), and score the retrieved set against the true
/// members. Micro-averaged over clusters; ties break toward lower ids.
pub fn retrieval_report(space: &EmbeddingSpace, corpus: &Corpus) -> Result<RetrievalReport> {
    if space.num_questions() != corpus.num_questions() || space.num_kcs() != corpus.num_kcs() {
        return Err(Error::data("space and corpus shapes disagree".to_string()));
    }
    let assignment = space.assignment();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut per_cluster = Vec::new();
    let mut skipped = 0usize;
    for cluster in 0..assignment.num_clusters() {
        let members = assignment.members(cluster);
        let truth: Vec<u32> = corpus
            .questions
            .iter()
            .filter(|q| q.kcs.iter().any(|c| members.contains(c)))
            .map(|q| q.id)
            .collect();
        if truth.is_empty() {
            warn!("cluster {cluster} has no member questions; skipped");
            skipped += 1;
            continue;
        }
        let rep = members[0];
        let rep_vec = space.kc(rep as usize);
        let mut scored: Vec<(usize, f64)> = (0..space.num_questions())
            .map(|q| (q, cosine(space.question(q), rep_vec)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        let retrieved: Vec<u32> = scored[..truth.len()].iter().map(|&(q, _)| q as u32).collect();
        let hits = retrieved.iter().filter(|q| truth.contains(q)).count();
        tp += hits;
        fp += retrieved.len() - hits;
        fn_ += truth.len() - hits;
        let cf1 = if truth.is_empty() {
            0.0
        } else {
            2.0 * hits as f64 / (2.0 * hits as f64 + (retrieved.len() - hits) as f64 + (truth.len() - hits) as f64)
        };
        per_cluster.push((cluster, cf1));
    }
    let denom = 2.0 * tp as f64 + fp as f64 + fn_ as f64;
    let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp as f64 / denom };
    Ok(RetrievalReport {
        f1,
        clusters_evaluated: per_cluster.len(),
        clusters_skipped: skipped,
        per_cluster,
    })
}

pub fn retrieval_f1(space: &EmbeddingSpace, corpus: &Corpus) -> Result<f64> {
    Ok(retrieval_report(space, corpus)?.f1)
}
