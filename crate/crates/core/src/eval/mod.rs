//! Retrieval ranking and recall metrics, raw and with similarity refinement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingBank, TripletRecord};
use crate::dsd::{normalized_rows, Refiner};
use crate::error::{MeltError, Result};
use crate::math::rng::derive_seed;
use crate::math::Matrix;
use crate::model::MeltModel;
use crate::ratr::RatrSwitches;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];

/// Gallery items as unit-norm pooled rows, in ascending id order.
#[derive(Clone, Debug)]
pub struct Gallery {
    pub ids: Vec<String>,
    pub pooled: Matrix,
    pub unit: Matrix,
}

impl Gallery {
    pub fn from_bank(bank: &EmbeddingBank, ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            return Err(MeltError::EmptyInput);
        }
        let mut pooled = Matrix::zeros(ids.len(), bank.d());
        let mut missing = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            match bank.get(id) {
                Some(m) => pooled.row_mut(i).copy_from_slice(m.mean_rows().data()),
                None => missing.push(id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(MeltError::data(format!("missing gallery ids: {}", missing.join(", "))));
        }
        let unit = normalized_rows(&pooled);
        Ok(Self { ids, pooled, unit })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|x| x.as_str().cmp(id)).ok()
    }

    /// Cosine similarity of a pooled query against every item.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        let q = crate::math::ops::norm(query);
        (0..self.len())
            .map(|i| {
                if q == 0.0 {
                    return 0.0;
                }
                let dot: f64 = self.unit.row(i).iter().zip(query).map(|(a, b)| a * b).sum();
                (dot / q).clamp(-1.0, 1.0)
            })
            .collect()
    }
}

/// Indices sorted by score descending, ties by ascending index.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Ranking with the top-`B` prefix reordered by refined scores. Items past
/// the prefix keep their raw order.
pub fn rerank_prefix(raw_order: &[usize], refined: &[f64]) -> Vec<usize> {
    let b = refined.len();
    let mut head: Vec<usize> = (0..b).collect();
    head.sort_by(|&x, &y| refined[y].total_cmp(&refined[x]).then(raw_order[x].cmp(&raw_order[y])));
    let mut out: Vec<usize> = head.iter().map(|&k| raw_order[k]).collect();
    out.extend_from_slice(&raw_order[b..]);
    out
}

/// Gallery ids ordered for one pooled query. With a refiner, the top `B`
/// candidates are rescored (anchored on the raw top-1).
pub fn rank(query: &[f64], gallery: &Gallery, refine: Option<(&Refiner<'_>, u64)>) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(MeltError::EmptyInput);
    }
    let scores = gallery.scores(query);
    let order = order_by_score(&scores);
    let Some((refiner, seed)) = refine else {
        return Ok(order);
    };
    let b = refiner.params.width;
    if gallery.len() < b {
        return Err(MeltError::invalid(format!("refinement needs at least {b} gallery items, got {}", gallery.len())));
    }
    let top = &order[..b];
    let row: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    let cands = gallery.pooled.gather_rows(top);
    let refined = refiner.refine_row(&row, 0, query, &cands, seed)?;
    Ok(rerank_prefix(&order, &refined))
}

/// Percentage of ranks (1-based) within `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(MeltError::EmptyInput);
    }
    if ranks.contains(&0) {
        return Err(MeltError::invalid("ranks are 1-based"));
    }
    Ok(100.0 * ranks.iter().filter(|r| **r <= k).count() as f64 / ranks.len() as f64)
}

/// 1-based position of `target` among the ranking restricted to `subset`.
pub fn subset_rank(ranking: &[&str], target: &str, subset: &[String]) -> Result<usize> {
    if !subset.iter().any(|s| s == target) {
        return Err(MeltError::data(format!("target {target} is not in its subset")));
    }
    let members: std::collections::BTreeSet<&str> = subset.iter().map(String::as_str).collect();
    ranking
        .iter()
        .filter(|id| members.contains(*id))
        .position(|id| *id == target)
        .map(|p| p + 1)
        .ok_or_else(|| MeltError::data(format!("target {target} is not in the gallery")))
}

/// Recall within each query's candidate subset.
pub fn recall_subset_at_k(subset_ranks: &[usize], k: usize) -> Result<f64> {
    recall_at_k(subset_ranks, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_subset_at: BTreeMap<usize, f64>,
    pub cirr_avg: f64,
    pub refined: bool,
    pub query_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub tau: f64,
    pub seed: u64,
    pub switches: RatrSwitches,
    pub config_hash: String,
}

/// Raw and refined reports for `records` against the gallery of their
/// targets.
pub fn evaluate(
    model: &MeltModel,
    records: &[TripletRecord],
    references: &EmbeddingBank,
    modifications: &EmbeddingBank,
    targets: &EmbeddingBank,
    opts: &EvalOptions,
) -> Result<(RetrievalReport, RetrievalReport)> {
    if records.is_empty() {
        return Err(MeltError::EmptyInput);
    }
    let gallery = Gallery::from_bank(targets, records.iter().map(|r| r.target_id.clone()))?;
    let mut missing = Vec::new();
    for r in records {
        if !references.contains(&r.ref_id) {
            missing.push(r.ref_id.clone());
        }
        if !modifications.contains(&r.mod_id) {
            missing.push(r.mod_id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(MeltError::data(format!("missing ids: {}", missing.join(", "))));
    }

    let refiner = model.refiner(opts.tau);
    let mut raw = RankSets::default();
    let mut refined = RankSets::default();
    for (qi, r) in records.iter().enumerate() {
        let composed = model.compose(
            references.get(&r.ref_id).expect("checked above"),
            modifications.get(&r.mod_id).expect("checked above"),
            opts.switches,
        )?;
        let pooled = composed.mean_rows();
        let raw_order = rank(pooled.data(), &gallery, None)?;
        let ref_order = rank(pooled.data(), &gallery, Some((&refiner, derive_seed(opts.seed, &[qi as u64]))))?;
        raw.push(&gallery, &raw_order, r)?;
        refined.push(&gallery, &ref_order, r)?;
    }
    Ok((raw.report(false, opts)?, refined.report(true, opts)?))
}

#[derive(Default)]
struct RankSets {
    full: Vec<usize>,
    subset: Vec<usize>,
}

impl RankSets {
    fn push(&mut self, gallery: &Gallery, order: &[usize], r: &TripletRecord) -> Result<()> {
        let target = gallery.position(&r.target_id).expect("gallery built from targets");
        self.full.push(order.iter().position(|&i| i == target).expect("ranking is a permutation") + 1);
        let subset = r.subset_ids.clone().unwrap_or_else(|| gallery.ids.clone());
        let ids: Vec<&str> = order.iter().map(|&i| gallery.ids[i].as_str()).collect();
        self.subset.push(subset_rank(&ids, &r.target_id, &subset)?);
        Ok(())
    }

    fn report(&self, refined: bool, opts: &EvalOptions) -> Result<RetrievalReport> {
        let mut recall_at = BTreeMap::new();
        for k in RECALL_KS {
            recall_at.insert(k, recall_at_k(&self.full, k)?);
        }
        let mut recall_subset_at = BTreeMap::new();
        for k in SUBSET_KS {
            recall_subset_at.insert(k, recall_subset_at_k(&self.subset, k)?);
        }
        Ok(RetrievalReport {
            cirr_avg: (recall_at[&5] + recall_subset_at[&1]) / 2.0,
            recall_at,
            recall_subset_at,
            refined,
            query_count: self.full.len(),
            seed: opts.seed,
            config_hash: opts.config_hash.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::{normal_matrix, seeded};
    use proptest::prelude::*;

    fn gallery_of(rows: &Matrix) -> Gallery {
        let mut bank = EmbeddingBank::new(1, rows.cols());
        for i in 0..rows.rows() {
            bank.insert(format!("g{i:03}"), Matrix::row_vector(rows.row(i).to_vec())).unwrap();
        }
        Gallery::from_bank(&bank, bank.ids().map(String::from).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 100.0);
        assert_eq!(recall_at_k(&[2], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[2], 2).unwrap(), 100.0);
        assert_eq!(recall_at_k(&[1, 3, 7, 20], 5).unwrap(), 50.0);
        assert!(recall_at_k(&[], 1).is_err());
        assert!(recall_at_k(&[0], 1).is_err());
    }

    #[test]
    fn subset_examples() {
        let ranking = ["a", "x", "b", "c", "y", "d", "e", "f"];
        let subset: Vec<String> = ["b", "c", "d", "e", "f", "a"].map(String::from).to_vec();
        assert_eq!(subset_rank(&ranking, "a", &["a".to_string()]).unwrap(), 1);
        let r = subset_rank(&ranking, "c", &subset).unwrap();
        assert_eq!(r, 3);
        let r = subset_rank(&ranking, "b", &subset).unwrap();
        assert_eq!((recall_subset_at_k(&[r], 1).unwrap(), recall_subset_at_k(&[r], 2).unwrap()), (0.0, 100.0));
        assert!(subset_rank(&ranking, "x", &subset).is_err());
        let all: Vec<String> = ranking.iter().map(|s| s.to_string()).collect();
        assert_eq!(subset_rank(&ranking, "y", &all).unwrap(), 5);
    }

    #[test]
    fn rank_examples() {
        let g = gallery_of(&Matrix::row_vector(vec![0.3, 0.4]));
        assert_eq!(rank(&[1.0, 0.0], &g, None).unwrap(), vec![0]);
        let g = gallery_of(&Matrix::identity(4));
        assert_eq!(rank(&[0.0, 0.0, 2.0, 0.0], &g, None).unwrap()[0], 2);
        // ties fall back to id order
        assert_eq!(rank(&[0.0, 0.0, 1.0, 0.0], &g, None).unwrap(), vec![2, 0, 1, 3]);
    }

    #[test]
    fn rank_matches_full_sort() {
        let mut rng = seeded(12);
        let rows = normal_matrix(&mut rng, 50, 6);
        let g = gallery_of(&rows);
        for _ in 0..20 {
            let q = normal_matrix(&mut rng, 1, 6);
            let mut brute: Vec<(f64, String, usize)> = (0..50)
                .map(|i| (crate::math::cosine_similarity(q.data(), rows.row(i)).unwrap(), g.ids[i].clone(), i))
                .collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = brute.iter().map(|t| t.2).collect();
            assert_eq!(rank(q.data(), &g, None).unwrap(), want);
        }
    }

    #[test]
    fn rerank_keeps_the_tail() {
        let raw = vec![4, 2, 0, 1, 3];
        assert_eq!(rerank_prefix(&raw, &[0.1, 0.7, 0.2]), vec![2, 0, 4, 1, 3]);
        // refined ties fall back to id order
        assert_eq!(rerank_prefix(&raw, &[0.5, 0.5, 0.5]), vec![0, 2, 4, 1, 3]);
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(ranks in prop::collection::vec(1usize..60, 1..40)) {
            let mut prev = 0.0;
            for k in 1..=60 {
                let r = recall_at_k(&ranks, k).unwrap();
                prop_assert!(r >= prev && (0.0..=100.0).contains(&r));
                prev = r;
            }
            prop_assert_eq!(prev, 100.0);
        }

        #[test]
        fn rerank_is_a_permutation(n in 3usize..30, b in 1usize..3, seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let mut rng = seeded(seed);
            let mut raw: Vec<usize> = (0..n).collect();
            raw.shuffle(&mut rng);
            let refined = crate::math::rng::normal_vec(&mut rng, b);
            let out = rerank_prefix(&raw, &refined);
            let mut sorted = out.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(&out[b..], &raw[b..]);
        }
    }
}
