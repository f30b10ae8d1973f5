//! Evaluation protocols: sounding-action discovery, cross-modal retrieval,
//! clustering and classification probes, plus report serialization.

mod cluster;
mod probe;
mod ranking;
mod retrieval;

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

pub use cluster::{agglomerative_cluster, Clustering, Merge};
pub use probe::{class_metrics, fine_tune, linear_probe, ClassMetrics, LinearProbe, ProbeConfig};
pub use ranking::{pr_auc, pr_curve, roc_auc, roc_curve, PrPoint, RocPoint, ScoredLabel};
pub use retrieval::{
    build_pools, chance_recall_at_k, recall_at_k, retrieval_report, PoolEntry, RecallAtK, RetrievalPools,
};

use crate::binio::write_atomic;
use crate::data::{Corpus, SampleRecord};
use crate::encoders::EncoderParams;
use crate::error::{Mc3Error, Result};
use crate::math::{dot, Matrix};
use crate::modality::{ModalityId, PerModality};
use crate::trainer::EpochLog;

/// Embeddings of the given corpus records, one row per record.
pub fn embed(corpus: &Corpus, records: &[usize], encoders: &EncoderParams) -> Result<PerModality<Matrix>> {
    PerModality::try_from_fn(|m| Ok(encoders.forward(m, &corpus.features(m, records)?)?.output))
}

/// Cosine score of `pair` for every record, paired with its sounding label.
/// `embeddings[m]` holds one unit-norm row per record.
pub fn discovery_scores(
    records: &[SampleRecord],
    embeddings: &PerModality<Matrix>,
    pair: (ModalityId, ModalityId),
) -> Result<Vec<ScoredLabel>> {
    let (a, b) = pair;
    for m in [a, b] {
        if embeddings[m].rows() != records.len() {
            return Err(Mc3Error::shape(records.len(), embeddings[m].rows()));
        }
    }
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let label = r.sounding.ok_or_else(|| Mc3Error::MissingLabel(r.id.clone()))?;
            let score = dot(embeddings[a].row(i), embeddings[b].row(i));
            if !score.is_finite() {
                return Err(Mc3Error::NonFinite(format!("discovery score of {}", r.id)));
            }
            Ok(ScoredLabel::new(score, label))
        })
        .collect()
}

/// Two-letter pair name such as `AV`.
pub fn pair_name(pair: (ModalityId, ModalityId)) -> String {
    format!("{}{}", pair.0.letter(), pair.1.letter())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscoveryReport {
    pub pair: String,
    pub n: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

impl DiscoveryReport {
    pub fn new(pair: (ModalityId, ModalityId), scored: &[ScoredLabel]) -> Result<Self> {
        let positives = scored.iter().filter(|s| s.label).count();
        Ok(DiscoveryReport {
            pair: pair_name(pair),
            n: scored.len(),
            positives,
            prevalence: positives as f64 / scored.len().max(1) as f64,
            roc_auc: roc_auc(scored)?,
            pr_auc: pr_auc(scored)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub modality: ModalityId,
    pub n_points: usize,
    pub n_clusters: usize,
    pub sizes: Vec<usize>,
    /// Sample ids of the exemplars of each cluster.
    pub exemplars: Vec<Vec<String>>,
    /// Fraction of points whose cluster's majority action group matches
    /// their own; absent when records carry no groups.
    pub purity: Option<f64>,
}

impl ClusterReport {
    pub fn new(modality: ModalityId, records: &[SampleRecord], c: &Clustering) -> Self {
        let groups: Vec<Option<String>> = records.iter().map(SampleRecord::action_group).collect();
        let purity = if groups.iter().all(Option::is_some) {
            let mut agree = 0usize;
            for members in &c.members {
                let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
                for &i in members {
                    *counts.entry(groups[i].as_deref().unwrap_or_default()).or_default() += 1;
                }
                agree += counts.values().copied().max().unwrap_or(0);
            }
            Some(agree as f64 / records.len().max(1) as f64)
        } else {
            None
        };
        ClusterReport {
            modality,
            n_points: records.len(),
            n_clusters: c.members.len(),
            sizes: c.sizes(),
            exemplars: c
                .exemplars
                .iter()
                .map(|e| e.iter().map(|&i| records[i].id.clone()).collect())
                .collect(),
            purity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    /// `linear_probe` or `fine_tune`.
    pub protocol: String,
    pub modality: ModalityId,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub metrics: ClassMetrics,
}

/// Everything one evaluation run produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub discovery: Vec<DiscoveryReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub retrieval: Vec<RecallAtK>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusterReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub classification: Vec<ClassificationReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub losses: Vec<EpochLog>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold,tpr,fpr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.tpr, p.fpr);
    }
    s
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("recall,precision\n");
    for p in points {
        let _ = writeln!(s, "{},{}", p.recall, p.precision);
    }
    s
}
