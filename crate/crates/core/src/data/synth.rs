//! Seeded synthetic triplets with a skewed concept distribution and rare
//! modification directions.
//!
//! Concepts are random unit-scale vectors drawn with Zipf weights. Frequent
//! modification directions live in a shared low-dimensional subspace; rare
//! directions live in its orthogonal complement and together receive
//! `rare_direction_fraction` of the sampling mass. Each triplet:
//!
//! - reference: concept vector plus Gaussian noise on every token row,
//! - modification: the direction vector on every token row plus noise,
//! - target: the reference with the direction added to the first
//!   `k_apply` token rows.
//!
//! Targets that share a concept with the query are the natural hard
//! negatives; each record's `subset_ids` lists a handful of them.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingBank, TripletRecord};
use crate::error::{MeltError, Result};
use crate::math::rng::{normal, normal_vec, seeded, Rng};
use crate::math::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub concept_count: usize,
    pub direction_count: usize,
    pub rare_direction_fraction: f64,
    pub zipf_exponent: f64,
    pub noise_sigma: f64,
    pub triplet_count: usize,
    pub q: usize,
    pub d: usize,
    pub seed: u64,
    /// Norm of every modification direction.
    pub direction_scale: f64,
    /// Token rows modified in the target; `None` means `max(1, Q/4)`.
    pub k_apply: Option<usize>,
    /// Size of the per-query candidate subset (target included).
    pub subset_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            concept_count: 20,
            direction_count: 20,
            rare_direction_fraction: 0.1,
            zipf_exponent: 1.0,
            noise_sigma: 0.01,
            triplet_count: 2000,
            q: 8,
            d: 32,
            seed: 0,
            direction_scale: 0.5,
            k_apply: None,
            subset_size: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("concept_count", self.concept_count),
            ("direction_count", self.direction_count),
            ("triplet_count", self.triplet_count),
            ("q", self.q),
            ("d", self.d),
            ("subset_size", self.subset_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MeltError::config(format!("{name} must be at least 1")));
            }
        }
        let f = self.rare_direction_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(MeltError::config("rare_direction_fraction must lie in (0, 1)"));
        }
        if f * (self.direction_count as f64) < 1.0 {
            return Err(MeltError::config("rare_direction_fraction * direction_count must be at least 1"));
        }
        if self.rare_direction_count() >= self.direction_count {
            return Err(MeltError::config("at least one frequent direction is required"));
        }
        if !(self.zipf_exponent >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.direction_scale > 0.0) {
            return Err(MeltError::config("zipf_exponent, noise_sigma must be >= 0 and direction_scale > 0"));
        }
        if self.d < 2 {
            return Err(MeltError::config("d must be at least 2 to hold rare and frequent subspaces"));
        }
        if let Some(k) = self.k_apply {
            if k == 0 || k > self.q {
                return Err(MeltError::config("k_apply must lie in [1, q]"));
            }
        }
        Ok(())
    }

    pub fn k_apply(&self) -> usize {
        self.k_apply.unwrap_or((self.q / 4).max(1))
    }

    pub fn rare_direction_count(&self) -> usize {
        ((self.rare_direction_fraction * self.direction_count as f64).round() as usize).max(1)
    }

    /// Dimension of the subspace spanned by frequent directions.
    pub fn frequent_subspace_dim(&self) -> usize {
        (self.d / 8).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub reference: EmbeddingBank,
    pub modification: EmbeddingBank,
    pub target: EmbeddingBank,
    pub manifest: Vec<TripletRecord>,
    /// Concept index of each triplet, in manifest order.
    pub concepts: Vec<usize>,
    /// Direction index of each triplet, in manifest order.
    pub directions: Vec<usize>,
}

/// Probability of concept rank `r` (1-based) is proportional to
/// `r^-exponent`.
pub fn zipf_weights(count: usize, exponent: f64) -> Vec<f64> {
    (1..=count).map(|r| (r as f64).powf(-exponent)).collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let (q, d) = (cfg.q, cfg.d);

    let concepts: Vec<Vec<f64>> = (0..cfg.concept_count)
        .map(|_| normal_vec(&mut rng, d).into_iter().map(|v| v / (d as f64).sqrt()).collect())
        .collect();

    let basis = orthonormal_basis(&mut rng, d);
    let sub = cfg.frequent_subspace_dim().min(d - 1);
    let n_rare = cfg.rare_direction_count();
    let n_freq = cfg.direction_count - n_rare;
    let mut directions = Vec::with_capacity(cfg.direction_count);
    for i in 0..cfg.direction_count {
        let span = if i < n_freq { &basis[..sub] } else { &basis[sub..] };
        let mut v = vec![0.0; d];
        for b in span {
            let c = normal(&mut rng);
            for (o, x) in v.iter_mut().zip(b) {
                *o += c * x;
            }
        }
        let n = crate::math::ops::norm(&v).max(1e-12);
        directions.push(v.into_iter().map(|x| x * cfg.direction_scale / n).collect::<Vec<f64>>());
    }

    let concept_dist = WeightedIndex::new(zipf_weights(cfg.concept_count, cfg.zipf_exponent))
        .map_err(|e| MeltError::config(format!("concept weights: {e}")))?;
    let k_apply = cfg.k_apply();
    let width = cfg.triplet_count.to_string().len().max(6);

    let mut reference = EmbeddingBank::new(q, d);
    let mut modification = EmbeddingBank::new(q, d);
    let mut target = EmbeddingBank::new(q, d);
    let mut manifest = Vec::with_capacity(cfg.triplet_count);
    let mut concept_of = Vec::with_capacity(cfg.triplet_count);
    let mut direction_of = Vec::with_capacity(cfg.triplet_count);

    for n in 0..cfg.triplet_count {
        let ci = concept_dist.sample(&mut rng);
        let rare = rng.gen::<f64>() < cfg.rare_direction_fraction;
        let di = if rare { n_freq + rng.gen_range(0..n_rare) } else { rng.gen_range(0..n_freq) };
        let c = &concepts[ci];
        let dir = &directions[di];

        let r = Matrix::from_fn(q, d, |_, j| c[j] + cfg.noise_sigma * normal(&mut rng));
        let m = Matrix::from_fn(q, d, |_, j| dir[j] + cfg.noise_sigma * normal(&mut rng));
        let t = Matrix::from_fn(q, d, |i, j| if i < k_apply { r.get(i, j) + dir[j] } else { r.get(i, j) });

        let (rid, mid, tid) = (format!("ref-{n:0width$}"), format!("mod-{n:0width$}"), format!("tgt-{n:0width$}"));
        reference.insert(rid.clone(), r)?;
        modification.insert(mid.clone(), m)?;
        target.insert(tid.clone(), t)?;
        manifest.push(TripletRecord {
            ref_id: rid,
            mod_id: mid,
            target_id: tid,
            subset_ids: None,
            rare_truth: Some(rare),
        });
        concept_of.push(ci);
        direction_of.push(di);
    }

    assign_subsets(&mut manifest, &concept_of, cfg.subset_size, &mut rng);

    Ok(SyntheticDataset { reference, modification, target, manifest, concepts: concept_of, directions: direction_of })
}

/// Subsets prefer targets sharing the query's concept and fall back to
/// random targets when the concept is too small.
fn assign_subsets(manifest: &mut [TripletRecord], concepts: &[usize], size: usize, rng: &mut Rng) {
    let mut by_concept: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in concepts.iter().enumerate() {
        by_concept.entry(*c).or_default().push(i);
    }
    let all: Vec<usize> = (0..manifest.len()).collect();
    let targets: Vec<String> = manifest.iter().map(|r| r.target_id.clone()).collect();
    for i in 0..manifest.len() {
        let mut peers: Vec<usize> = by_concept[&concepts[i]].iter().copied().filter(|j| *j != i).collect();
        peers.shuffle(rng);
        peers.truncate(size - 1);
        while peers.len() < (size - 1).min(manifest.len() - 1) {
            let j = *all.choose(rng).expect("nonempty manifest");
            if j != i && !peers.contains(&j) {
                peers.push(j);
            }
        }
        let mut subset: Vec<String> = peers.into_iter().map(|j| targets[j].clone()).collect();
        subset.push(targets[i].clone());
        subset.sort();
        manifest[i].subset_ids = Some(subset);
    }
}

fn orthonormal_basis(rng: &mut Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = normal_vec(rng, d);
        for b in &basis {
            let p = crate::math::ops::dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = crate::math::ops::norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}
