//! Cross-modal retrieval over action groups.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::SampleRecord;
use crate::error::{Mc3Error, Result};
use crate::math::{dot, Matrix, Rng};
use crate::modality::{ModalityId, PerModality};

/// One sample in a retrieval pool.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub group: String,
    pub embeddings: PerModality<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalPools {
    pub query: Vec<PoolEntry>,
    pub retrieval: Vec<PoolEntry>,
}

/// Recall for one (query modality, target modality, k).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallAtK {
    pub query: ModalityId,
    pub target: ModalityId,
    pub k: usize,
    pub recall: f64,
    pub chance: f64,
}

/// Keeps sounding records whose action group has more than two members and
/// splits every group in half with a seeded shuffle; an odd member goes to
/// the retrieval pool. `embeddings[m]` holds one row per record.
pub fn build_pools(
    records: &[SampleRecord],
    embeddings: &PerModality<Matrix>,
    seed: u64,
) -> Result<RetrievalPools> {
    for (m, e) in embeddings.iter() {
        if e.rows() != records.len() {
            return Err(Mc3Error::shape(
                format!("{} {m} embeddings", records.len()),
                e.rows(),
            ));
        }
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.sounding != Some(true) {
            continue;
        }
        if let Some(g) = r.action_group() {
            groups.entry(g).or_default().push(i);
        }
    }
    let mut rng = Rng::derive(seed, &[0x9001]);
    let entry = |i: usize, g: &str| PoolEntry {
        id: records[i].id.clone(),
        group: g.to_string(),
        embeddings: PerModality::from_fn(|m| embeddings[m].row(i).to_vec()),
    };
    let mut pools = RetrievalPools {
        query: Vec::new(),
        retrieval: Vec::new(),
    };
    for (g, mut members) in groups {
        if members.len() <= 2 {
            continue;
        }
        rng.shuffle(&mut members);
        let n_query = members.len() / 2;
        for (pos, &i) in members.iter().enumerate() {
            if pos < n_query {
                pools.query.push(entry(i, &g));
            } else {
                pools.retrieval.push(entry(i, &g));
            }
        }
    }
    if pools.query.is_empty() {
        return Err(Mc3Error::EmptyPools);
    }
    Ok(pools)
}

fn check_k(pools: &RetrievalPools, k_list: &[usize]) -> Result<()> {
    if pools.query.is_empty() || pools.retrieval.is_empty() {
        return Err(Mc3Error::EmptyPools);
    }
    let n = pools.retrieval.len();
    for &k in k_list {
        if k == 0 || k > n {
            return Err(Mc3Error::OutOfRange {
                value: k as f64,
                lo: 1.0,
                hi: n as f64,
            });
        }
    }
    Ok(())
}

/// 0-based position of the first same-group item when the retrieval pool is
/// ranked by cosine similarity to the query (descending, ties by sample id).
fn first_hit(q: &PoolEntry, pools: &RetrievalPools, qm: ModalityId, tm: ModalityId) -> usize {
    let qv = &q.embeddings[qm];
    let sims: Vec<f64> = pools.retrieval.iter().map(|r| dot(qv, &r.embeddings[tm])).collect();
    let mut best: Option<usize> = None;
    for (i, r) in pools.retrieval.iter().enumerate() {
        if r.group == q.group && best.is_none_or(|b| before_hit(i, b, &sims, pools)) {
            best = Some(i);
        }
    }
    let b = best.expect("every query group is present in the retrieval pool");
    (0..pools.retrieval.len())
        .filter(|&j| before_hit(j, b, &sims, pools))
        .count()
}

/// Whether retrieval item `j` ranks ahead of item `i`.
fn before_hit(j: usize, i: usize, sims: &[f64], pools: &RetrievalPools) -> bool {
    sims[j] > sims[i] || (sims[j] == sims[i] && pools.retrieval[j].id < pools.retrieval[i].id)
}

/// Fraction of queries with at least one same-group item among the top `k`
/// retrieved, for every `k` in `k_list`.
pub fn recall_at_k(
    pools: &RetrievalPools,
    query_modality: ModalityId,
    target_modality: ModalityId,
    k_list: &[usize],
) -> Result<Vec<f64>> {
    check_k(pools, k_list)?;
    let firsts: Vec<usize> = pools
        .query
        .iter()
        .map(|q| first_hit(q, pools, query_modality, target_modality))
        .collect();
    let nq = firsts.len() as f64;
    Ok(k_list
        .iter()
        .map(|&k| firsts.iter().filter(|&&f| f < k).count() as f64 / nq)
        .collect())
}

/// Expected recall@k of a ranking drawn uniformly at random: for a query
/// whose group has `g` of the `n` retrieval items, 1 - C(n-g, k) / C(n, k).
pub fn chance_recall_at_k(pools: &RetrievalPools, k_list: &[usize]) -> Result<Vec<f64>> {
    check_k(pools, k_list)?;
    let n = pools.retrieval.len();
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &pools.retrieval {
        *sizes.entry(r.group.as_str()).or_default() += 1;
    }
    let nq = pools.query.len() as f64;
    Ok(k_list
        .iter()
        .map(|&k| {
            pools
                .query
                .iter()
                .map(|q| {
                    let g = sizes.get(q.group.as_str()).copied().unwrap_or(0);
                    let mut miss = 1.0;
                    for i in 0..k {
                        if n - i <= g {
                            miss = 0.0;
                            break;
                        }
                        miss *= (n - g - i) as f64 / (n - i) as f64;
                    }
                    1.0 - miss
                })
                .sum::<f64>()
                / nq
        })
        .collect())
}

/// Recall and chance for both directions of every requested pair.
pub fn retrieval_report(
    pools: &RetrievalPools,
    pairs: &[(ModalityId, ModalityId)],
    k_list: &[usize],
) -> Result<Vec<RecallAtK>> {
    let chance = chance_recall_at_k(pools, k_list)?;
    let mut out = Vec::new();
    for &(q, t) in pairs {
        let rec = recall_at_k(pools, q, t, k_list)?;
        for (i, &k) in k_list.iter().enumerate() {
            out.push(RecallAtK {
                query: q,
                target: t,
                k,
                recall: rec[i],
                chance: chance[i],
            });
        }
    }
    Ok(out)
}
