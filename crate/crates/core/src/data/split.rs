use rand::seq::SliceRandom;

use crate::data::TripletRecord;
use crate::error::{MeltError, Result};
use crate::math::rng::seeded;

/// Partitions records into `fractions.len()` disjoint splits after a seeded
/// shuffle. Split sizes follow rounded cumulative fractions; records keep
/// their manifest order inside each split.
pub fn split_manifest(records: &[TripletRecord], fractions: &[f64], seed: u64) -> Result<Vec<Vec<TripletRecord>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(MeltError::config("split fractions must be non-negative"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MeltError::config(format!("split fractions sum to {total}, expected 1")));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));

    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        let mut idx = order[start..end.max(start)].to_vec();
        idx.sort_unstable();
        out.push(idx.into_iter().map(|k| records[k].clone()).collect());
        start = end.max(start);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn records(n: usize) -> Vec<TripletRecord> {
        (0..n)
            .map(|i| TripletRecord {
                ref_id: format!("r{i}"),
                mod_id: format!("m{i}"),
                target_id: format!("t{i}"),
                subset_ids: None,
                rare_truth: None,
            })
            .collect()
    }

    #[test]
    fn single_split_keeps_everything() {
        let recs = records(7);
        let parts = split_manifest(&recs, &[1.0], 3).unwrap();
        assert_eq!(parts, vec![recs]);
    }

    #[test]
    fn halves_are_disjoint() {
        let recs = records(10);
        let parts = split_manifest(&recs, &[0.5, 0.5], 9).unwrap();
        assert_eq!(parts[0].len(), 5);
        assert_eq!(parts[1].len(), 5);
        let a: BTreeSet<_> = parts[0].iter().map(|r| r.ref_id.clone()).collect();
        let b: BTreeSet<_> = parts[1].iter().map(|r| r.ref_id.clone()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 10);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let recs = records(50);
        let a = split_manifest(&recs, &[0.8, 0.1, 0.1], 4).unwrap();
        assert_eq!(a, split_manifest(&recs, &[0.8, 0.1, 0.1], 4).unwrap());
        assert_ne!(a, split_manifest(&recs, &[0.8, 0.1, 0.1], 5).unwrap());
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![40, 5, 5]);
    }

    #[test]
    fn bad_fractions() {
        let recs = records(4);
        assert!(matches!(split_manifest(&recs, &[0.5, 0.4], 0), Err(MeltError::Config(_))));
        assert!(split_manifest(&recs, &[1.5, -0.5], 0).is_err());
    }
}
