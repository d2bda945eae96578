//! Exemplar memory: per-class K-means over representations, keeping the
//! instance nearest each centroid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans<S> {
    pub centroids: Vec<Vec<S>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after every Lloyd iteration.
    pub objective: Vec<S>,
    pub iterations: usize,
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<S: Scalar>(point: &[S], centroids: &[Vec<S>]) -> usize {
    let mut best = 0;
    let mut best_d = sq_dist(point, &centroids[0]);
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Lloyd's algorithm seeded with `k` distinct points drawn uniformly.
///
/// Stops when assignments no longer change or after 100 iterations. With
/// more clusters than points every point becomes its own cluster. An empty
/// cluster keeps its previous centroid.
pub fn kmeans<S: Scalar>(points: &[Vec<S>], k: usize, seed: u64) -> Result<KMeans<S>> {
    if points.is_empty() {
        return Err(Error::input("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(Error::input("k-means needs k >= 1"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::contract("k-means points have different widths"));
    }
    if k >= points.len() {
        return Ok(KMeans {
            centroids: points.to_vec(),
            assignments: (0..points.len()).collect(),
            objective: vec![S::zero()],
            iterations: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, points.len(), k).into_vec();
    picks.sort_unstable();
    let mut centroids: Vec<Vec<S>> = picks.iter().map(|&i| points[i].clone()).collect();
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let changed = next != assignments;
        assignments = next;

        let mut sums = vec![vec![S::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((centroid, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                let n = S::lit(count as f64);
                *centroid = sum.into_iter().map(|s| s / n).collect();
            }
        }
        objective.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &a)| sq_dist(p, &centroids[a]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        objective,
        iterations,
    })
}

/// Picks at most `budget` instances of one class: one per K-means centroid
/// (k = budget), each the nearest not-yet-chosen instance, ties to the lowest id.
pub fn select_memory<S: Scalar>(ids: &[u64], reps: &[Vec<S>], budget: usize, seed: u64) -> Result<Vec<u64>> {
    if ids.is_empty() {
        return Err(Error::input("cannot select memory from an empty class"));
    }
    if ids.len() != reps.len() {
        return Err(Error::contract("one representation per instance is required"));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }
    if ids.len() <= budget {
        return Ok(ids.to_vec());
    }
    let clusters = kmeans(reps, budget, seed)?;
    let mut used = vec![false; ids.len()];
    let mut chosen = Vec::with_capacity(budget);
    for centroid in &clusters.centroids {
        let pick = (0..ids.len())
            .filter(|&i| !used[i])
            .map(|i| (sq_dist(&reps[i], centroid), ids[i], i))
            .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
        if let Some((_, id, i)) = pick {
            used[i] = true;
            chosen.push(id);
        }
    }
    Ok(chosen)
}

/// Per-class exemplar ids with a fixed per-class budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryBank {
    budget: usize,
    classes: BTreeMap<usize, Vec<u64>>,
}

impl MemoryBank {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            classes: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn insert(&mut self, class: usize, id: u64) -> Result<()> {
        let slot = self.classes.entry(class).or_default();
        if slot.contains(&id) {
            return Err(Error::input(format!("instance {id} already stored for class {class}")));
        }
        if slot.len() >= self.budget {
            return Err(Error::input(format!("class {class} is at its budget of {}", self.budget)));
        }
        slot.push(id);
        Ok(())
    }

    pub fn set_class(&mut self, class: usize, ids: Vec<u64>) -> Result<()> {
        self.classes.remove(&class);
        for id in ids {
            self.insert(class, id)?;
        }
        Ok(())
    }

    pub fn class(&self, class: usize) -> &[u64] {
        self.classes.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, class: usize, id: u64) -> bool {
        self.class(class).contains(&id)
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, &[u64])> {
        self.classes.iter().map(|(&c, ids)| (c, ids.as_slice()))
    }

    /// Every `(class, id)` pair, by class then selection order.
    pub fn instances(&self) -> Vec<(usize, u64)> {
        self.classes
            .iter()
            .flat_map(|(&c, ids)| ids.iter().map(move |&id| (c, id)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `class_id<TAB>instance_id` lines preceded by a budget comment.
    pub fn to_manifest(&self) -> String {
        let mut out = format!("# budget={}\n", self.budget);
        for (c, id) in self.instances() {
            let _ = writeln!(out, "{c}\t{id}");
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut budget = None;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |message: &str| Error::Parse {
                line: n + 1,
                message: message.to_string(),
            };
            if let Some(c) = line.strip_prefix('#') {
                if let Some(b) = c.trim().strip_prefix("budget=") {
                    budget = Some(b.parse::<usize>().map_err(|_| bad("invalid budget"))?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split('\t');
            let class = f.next().and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| bad("invalid class id"))?;
            let id = f.next().and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| bad("invalid instance id"))?;
            pairs.push((class, id));
        }
        let mut bank = MemoryBank::new(budget.ok_or_else(|| Error::input("memory manifest lacks a budget line"))?);
        for (c, id) in pairs {
            bank.insert(c, id)?;
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn two_clusters_on_a_line() {
        for seed in 0..20 {
            let km = kmeans(&line(&[0.0, 1.0, 9.0, 10.0]), 2, seed).unwrap();
            let mut c: Vec<f64> = km.centroids.iter().map(|c| c[0]).collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![0.5, 9.5], "seed {seed}");
        }
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let km = kmeans(&line(&[1.0, 2.0, 6.0]), 1, 3).unwrap();
        assert_eq!(km.centroids, vec![vec![3.0]]);
    }

    #[test]
    fn identical_points() {
        let pts = vec![vec![2.0, -1.0]; 5];
        let km = kmeans(&pts, 2, 0).unwrap();
        assert!(km.assignments.iter().all(|&a| a == km.assignments[0]));
        assert_eq!(km.centroids[km.assignments[0]], vec![2.0, -1.0]);
    }

    #[test]
    fn more_clusters_than_points() {
        let km = kmeans(&line(&[3.0, 1.0]), 5, 0).unwrap();
        assert_eq!(km.centroids.len(), 2);
        assert_eq!(km.assignments, vec![0, 1]);
    }

    #[test]
    fn selection_cases() {
        let reps = line(&[0.0, 4.0, 8.0]);
        assert_eq!(select_memory(&[5, 6, 7], &reps, 10, 0).unwrap(), vec![5, 6, 7]);
        assert_eq!(select_memory(&[5, 6, 7], &reps, 3, 0).unwrap(), vec![5, 6, 7]);
        assert_eq!(select_memory(&[8, 3], &line(&[0.0, 10.0]), 1, 0).unwrap(), vec![3]);
        assert!(select_memory(&[8, 3], &line(&[0.0, 10.0]), 0, 0).unwrap().is_empty());
        assert!(matches!(select_memory::<f64>(&[], &[], 3, 0), Err(Error::Input(_))));
    }

    #[test]
    fn manifest_roundtrip() {
        let mut bank = MemoryBank::new(3);
        bank.set_class(4, vec![10, 11]).unwrap();
        bank.set_class(1, vec![2]).unwrap();
        let back = MemoryBank::from_manifest(&bank.to_manifest()).unwrap();
        assert_eq!(back, bank);
        assert!(bank.insert(4, 10).is_err());
    }

    proptest! {
        #[test]
        fn lloyd_objective_never_increases(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 2..60),
            k in 1usize..8,
            seed in any::<u64>(),
        ) {
            let km = kmeans(&pts, k, seed).unwrap();
            for w in km.objective.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn selection_is_unique_and_bounded(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..40),
            budget in 1usize..12,
            seed in any::<u64>(),
        ) {
            let ids: Vec<u64> = (0..pts.len() as u64).map(|i| i * 3 + 1).collect();
            let a = select_memory(&ids, &pts, budget, seed).unwrap();
            let b = select_memory(&ids, &pts, budget, seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() <= budget);
            prop_assert_eq!(a.len(), budget.min(pts.len()));
            let mut sorted = a.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), a.len());
        }
    }
}
