//! Cross-modal retrieval over object embeddings and its evaluation metrics.
//!
//! Similarity matrices are indexed `[query][candidate]`. Object `i` in the
//! query modality is paired with candidate `i`.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Movement,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::Audio => Modality::Movement,
            Modality::Movement => Modality::Audio,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Movement => "movement",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEmbedding {
    pub clip_id: String,
    pub modality: Modality,
    pub vector: Vec<f64>,
    pub label: usize,
}

/// Mean of an object's segment projections (one segment per row).
pub fn object_embedding(segments: &DMatrix<f64>) -> Result<Vec<f64>> {
    if segments.nrows() == 0 {
        return Err(Error::Shape("object has no segments".into()));
    }
    let n = segments.nrows() as f64;
    Ok(segments.column_iter().map(|c| c.sum() / n).collect())
}

/// Cosine similarity; a zero vector has similarity 0 to everything.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "embedding dimensions differ");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        warn!("cosine similarity with a zero vector");
        return 0.0;
    }
    dot / (na * nb)
}

pub fn similarity_matrix(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| candidates.iter().map(|c| cosine_similarity(q, c)).collect())
        .collect()
}

pub fn transpose(sim: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = sim.first().map_or(0, Vec::len);
    (0..cols).map(|j| sim.iter().map(|row| row[j]).collect()).collect()
}

/// Candidate indices by descending score, ties broken by ascending id.
pub fn rank_order(scores: &[f64], ids: &[String]) -> Vec<usize> {
    assert_eq!(scores.len(), ids.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

fn check_square(sim: &[Vec<f64>]) -> Result<usize> {
    let n = sim.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 objects, got {n}")));
    }
    if sim.iter().any(|row| row.len() != n) {
        return Err(Error::Shape("similarity matrix is not square".into()));
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub score: f64,
    pub successes: u64,
    pub trials: u64,
}

/// For every query `i` and non-matching object `j`, the trial succeeds when
/// both `i` and `j` are strictly closer to their own partner than to each
/// other's. Ties count as failures.
pub fn pair_accuracy(sim: &[Vec<f64>]) -> Result<PairAccuracy> {
    let n = check_square(sim)?;
    let mut successes = 0u64;
    for i in 0..n {
        for j in 0..n {
            if i != j && sim[i][i] > sim[i][j] && sim[j][j] > sim[j][i] {
                successes += 1;
            }
        }
    }
    let trials = (n * (n - 1)) as u64;
    Ok(PairAccuracy {
        score: successes as f64 / trials as f64,
        successes,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAccuracy {
    pub score: f64,
    /// 1-based rank of each query's partner.
    pub ranks: Vec<usize>,
    pub list_len: usize,
}

pub fn rank_accuracy(sim: &[Vec<f64>], candidate_ids: &[String]) -> Result<RankAccuracy> {
    let n = check_square(sim)?;
    let ranks: Vec<usize> = (0..n)
        .map(|i| {
            let order = rank_order(&sim[i], candidate_ids);
            order.iter().position(|&c| c == i).unwrap() + 1
        })
        .collect();
    let l = n as f64;
    let score = ranks.iter().map(|&r| 1.0 - (r as f64 - 1.0) / (l - 1.0)).sum::<f64>() / l;
    Ok(RankAccuracy {
        score,
        ranks,
        list_len: n,
    })
}

/// Average precision of one ranked relevance list, normalized by the number
/// of relevant items in it.
pub fn average_precision(relevant: impl IntoIterator<Item = bool>) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, rel) in relevant.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub map: f64,
    pub n_queries: usize,
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub per_class: BTreeMap<usize, ClassScore>,
    /// Unweighted mean of the class MAPs.
    pub average: f64,
    /// Mean AP over all queries.
    pub overall: f64,
}

fn map_from_orders(orders: &[Vec<usize>], query_labels: &[usize], candidate_labels: &[usize]) -> ClassMap {
    let mut per_class: BTreeMap<usize, ClassScore> = BTreeMap::new();
    for (q, order) in orders.iter().enumerate() {
        let c = query_labels[q];
        let ap = average_precision(order.iter().map(|&j| candidate_labels[j] == c));
        let entry = per_class.entry(c).or_insert(ClassScore {
            map: 0.0,
            n_queries: 0,
            ap: Vec::new(),
        });
        entry.ap.push(ap);
        entry.n_queries += 1;
    }
    for s in per_class.values_mut() {
        s.map = s.ap.iter().sum::<f64>() / s.n_queries as f64;
    }
    let average = per_class.values().map(|s| s.map).sum::<f64>() / per_class.len() as f64;
    let overall = per_class.values().flat_map(|s| &s.ap).sum::<f64>() / orders.len() as f64;
    ClassMap {
        per_class,
        average,
        overall,
    }
}

fn check_labels(query_labels: &[usize], candidate_labels: &[usize]) -> Result<()> {
    for c in query_labels {
        if !candidate_labels.contains(c) {
            return Err(Error::InvalidArgument(format!(
                "class {c} has no relevant candidates"
            )));
        }
    }
    Ok(())
}

pub fn class_map(
    sim: &[Vec<f64>],
    query_labels: &[usize],
    candidate_labels: &[usize],
    candidate_ids: &[String],
) -> Result<ClassMap> {
    if sim.len() != query_labels.len() || sim.iter().any(|r| r.len() != candidate_labels.len()) {
        return Err(Error::Shape("labels do not match similarity matrix".into()));
    }
    if sim.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    check_labels(query_labels, candidate_labels)?;
    let orders: Vec<Vec<usize>> = sim.iter().map(|row| rank_order(row, candidate_ids)).collect();
    Ok(map_from_orders(&orders, query_labels, candidate_labels))
}

/// One-sided binomial tail `P[Bin(trials, p0) ≥ successes]`.
pub fn binomial_pvalue(successes: u64, trials: u64, p0: f64) -> f64 {
    assert!(successes <= trials, "successes exceed trials");
    assert!((0.0..=1.0).contains(&p0));
    if successes == 0 {
        return 1.0;
    }
    if p0 == 0.0 {
        return 0.0;
    }
    if p0 == 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p0.ln(), (1.0 - p0).ln());
    let terms: Vec<f64> = (successes..=trials)
        .map(|k| ln_binomial(trials, k) + k as f64 * lp + (trials - k) as f64 * lq)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapBaseline {
    pub per_class: BTreeMap<usize, Estimate>,
    pub average: f64,
    pub overall: f64,
    pub samples: usize,
}

fn ap_at(positions: &[usize]) -> f64 {
    positions.iter().enumerate().map(|(h, &p)| (h + 1) as f64 / (p + 1) as f64).sum::<f64>() / positions.len() as f64
}

/// Mean AP over every placement of `r` relevant items among `n`.
fn exact_expected_ap(n: usize, r: usize) -> f64 {
    let mut idx: Vec<usize> = (0..r).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    loop {
        sum += ap_at(&idx);
        count += 1;
        // Advance to the next combination in lexicographic order.
        let Some(i) = (0..r).rev().find(|&i| idx[i] < n - r + i) else {
            break;
        };
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
    sum / count as f64
}

/// Expected MAP of a uniformly random ranking. Classes with at most
/// `samples` possible placements of their relevant candidates are enumerated
/// exactly (standard error 0); the rest are estimated by sampling.
pub fn random_map_baseline(labels: &[usize], samples: usize, seed: u64) -> Result<MapBaseline> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let n = labels.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..n).collect();
    let mut per_class = BTreeMap::new();
    for (&class, &r) in &counts {
        if ln_binomial(n as u64, r as u64) <= (samples as f64).ln() {
            let mean = exact_expected_ap(n, r);
            per_class.insert(class, Estimate { mean, std_error: 0.0 });
            continue;
        }
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            // Partial Fisher–Yates: the first r entries are the relevant positions.
            for i in 0..r {
                let j = rng.random_range(i..n);
                positions.swap(i, j);
            }
            let mut chosen = positions[..r].to_vec();
            chosen.sort_unstable();
            let ap = ap_at(&chosen);
            sum += ap;
            sum_sq += ap * ap;
        }
        let s = samples as f64;
        let mean = sum / s;
        let var = ((sum_sq - s * mean * mean) / (s - 1.0)).max(0.0);
        per_class.insert(
            class,
            Estimate {
                mean,
                std_error: (var / s).sqrt(),
            },
        );
    }
    let average = per_class.values().map(|e: &Estimate| e.mean).sum::<f64>() / per_class.len() as f64;
    let overall = counts.iter().map(|(c, &r)| per_class[c].mean * r as f64).sum::<f64>() / n as f64;
    Ok(MapBaseline {
        per_class,
        average,
        overall,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub per_class: BTreeMap<usize, f64>,
    /// p-value of the unweighted class average.
    pub average: f64,
    pub n_perm: usize,
}

/// Permutation test on class MAPs: candidate labels are shuffled while the
/// rankings and query labels stay fixed.
pub fn permutation_test_map(
    sim: &[Vec<f64>],
    query_labels: &[usize],
    candidate_labels: &[usize],
    candidate_ids: &[String],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult> {
    permutation_test_map_runs(std::slice::from_ref(&sim.to_vec()), query_labels, candidate_labels, candidate_ids, n_perm, seed)
}

fn mean_class_map(maps: &[ClassMap]) -> (BTreeMap<usize, f64>, f64) {
    let r = maps.len() as f64;
    let mut per_class: BTreeMap<usize, f64> = BTreeMap::new();
    for m in maps {
        for (c, s) in &m.per_class {
            *per_class.entry(*c).or_default() += s.map / r;
        }
    }
    (per_class, maps.iter().map(|m| m.average).sum::<f64>() / r)
}

/// [`permutation_test_map`] for class MAPs averaged over several runs on the
/// same objects. Each permutation relabels the candidates of every run alike.
pub fn permutation_test_map_runs(
    sims: &[Vec<Vec<f64>>],
    query_labels: &[usize],
    candidate_labels: &[usize],
    candidate_ids: &[String],
    n_perm: usize,
    seed: u64,
) -> Result<PermutationResult> {
    if n_perm < 1000 {
        return Err(Error::InvalidArgument(format!("n_perm = {n_perm} is below 1000")));
    }
    if sims.is_empty() {
        return Err(Error::InvalidArgument("no runs".into()));
    }
    let observed: Vec<ClassMap> = sims
        .iter()
        .map(|sim| class_map(sim, query_labels, candidate_labels, candidate_ids))
        .collect::<Result<_>>()?;
    let (obs_class, obs_avg) = mean_class_map(&observed);
    let orders: Vec<Vec<Vec<usize>>> = sims
        .iter()
        .map(|sim| sim.iter().map(|row| rank_order(row, candidate_ids)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = candidate_labels.to_vec();
    let mut exceed: BTreeMap<usize, usize> = obs_class.keys().map(|&c| (c, 0)).collect();
    let mut exceed_avg = 0usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        let maps: Vec<ClassMap> = orders.iter().map(|o| map_from_orders(o, query_labels, &shuffled)).collect();
        let (per_class, average) = mean_class_map(&maps);
        for (c, m) in &per_class {
            if *m >= obs_class[c] {
                *exceed.get_mut(c).unwrap() += 1;
            }
        }
        if average >= obs_avg {
            exceed_avg += 1;
        }
    }
    let p = |k: usize| (1 + k) as f64 / (1 + n_perm) as f64;
    Ok(PermutationResult {
        per_class: exceed.into_iter().map(|(c, k)| (c, p(k))).collect(),
        average: p(exceed_avg),
        n_perm,
    })
}
