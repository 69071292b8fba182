//! Attribute pools and attribute sampling.
//!
//! Sampling clusters a class's attribute embeddings with k-means, scores each
//! attribute by its mean cosine to the class's image shots under a frozen
//! textual prompt, and keeps the best attribute of every cluster.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{dot, seeded_rng};
use crate::prompt::phrase_ids;

pub const POOL_VERSION: u32 = 1;
pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolAttribute {
    pub text: String,
    /// Whether the whole phrase is registered as one vocabulary token.
    pub planted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolClass {
    pub name: String,
    #[serde(rename = "type")]
    pub class_type: String,
    pub attributes: Vec<PoolAttribute>,
    pub source_template: u32,
}

impl PoolClass {
    pub fn texts(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePool {
    pub version: u32,
    pub dataset: String,
    pub classes: Vec<PoolClass>,
}

fn canonical(s: &str) -> String {
    s.trim().to_lowercase()
}

impl AttributePool {
    /// Lowercases and trims every string, then checks per-class invariants.
    pub fn validated(mut self) -> Result<Self> {
        if self.version != POOL_VERSION {
            return Err(Error::VersionMismatch {
                expected: POOL_VERSION,
                found: self.version.to_string(),
            });
        }
        for class in &mut self.classes {
            class.name = canonical(&class.name);
            class.class_type = canonical(&class.class_type);
            if class.attributes.is_empty() {
                return Err(Error::EmptyClass(class.name.clone()));
            }
            let mut seen = std::collections::BTreeSet::new();
            for a in &mut class.attributes {
                a.text = canonical(&a.text);
                if a.text.is_empty() {
                    return Err(Error::SchemaViolation(format!(
                        "empty attribute in class `{}`",
                        class.name
                    )));
                }
                if !seen.insert(a.text.clone()) {
                    return Err(Error::DuplicateAttribute {
                        class: class.name.clone(),
                        attribute: a.text.clone(),
                    });
                }
            }
        }
        Ok(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pool: AttributePool =
            serde_json::from_str(s).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        pool.validated()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pool serializes")
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Checks that every class name and attribute resolves against `vocab`.
    pub fn check_coverage(&self, vocab: &Vocabulary) -> Result<()> {
        for c in &self.classes {
            phrase_ids(vocab, &c.name)?;
            for a in &c.attributes {
                if a.planted {
                    vocab.lookup(&a.text)?;
                } else {
                    phrase_ids(vocab, &a.text)?;
                }
            }
        }
        Ok(())
    }
}

pub fn load_pool(path: &Path) -> Result<AttributePool> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AttributePool::from_json(&s)
}

/// Embeds each attribute of `class_id` on its own, without class or template.
pub fn embed_attributes(
    pool: &AttributePool,
    class_id: usize,
    encoders: &DualEncoder,
    vocab: &Vocabulary,
) -> Result<Vec<Vec<f64>>> {
    let class = pool
        .classes
        .get(class_id)
        .ok_or_else(|| Error::UnknownClass(class_id.to_string()))?;
    class
        .attributes
        .iter()
        .map(|a| {
            encoders
                .text
                .encode_ids(&phrase_ids(vocab, &a.text)?, vocab)
        })
        .collect()
}

/// Result of k-means over one class's attribute embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after every assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|i| self.assignment[*i] == cluster)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut uniq: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !uniq.contains(&p) {
            uniq.push(p);
        }
    }
    uniq.len()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn objective(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, k)| sq_dist(p, &centroids[*k]))
        .sum()
}

fn plus_plus_seeds<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
        for (i, d) in d2.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            if target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Moves the point farthest from its centroid in the largest cluster into
/// each empty cluster.
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for a in assignment.iter() {
            sizes[*a] += 1;
        }
        let Some(empty) = sizes.iter().position(|s| *s == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |b, i| if sizes[i] > sizes[b] { i } else { b });
        let far = (0..points.len())
            .filter(|i| assignment[*i] == largest)
            .fold(None::<(usize, f64)>, |best, i| {
                let d = sq_dist(&points[i], &centroids[largest]);
                match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                }
            })
            .map(|(i, _)| i)
            .expect("largest cluster is non-empty");
        assignment[far] = empty;
        centroids[empty] = points[far].clone();
    }
}

fn recompute_centroids(points: &[Vec<f64>], assignment: &[usize], centroids: &mut [Vec<f64>]) {
    let d = points[0].len();
    for (k, c) in centroids.iter_mut().enumerate() {
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for (p, a) in points.iter().zip(assignment) {
            if *a == k {
                n += 1;
                for (s, v) in sum.iter_mut().zip(p) {
                    *s += v;
                }
            }
        }
        if n > 0 {
            *c = sum.into_iter().map(|s| s / n as f64).collect();
        }
    }
}

/// Seeded k-means++ / Lloyd clustering with Euclidean distance.
///
/// `n` is clamped to the number of distinct points with a warning.
pub fn cluster_attributes(points: &[Vec<f64>], n: usize, seed: u64) -> Result<Clustering> {
    if points.is_empty() {
        return Err(Error::TooFewPoints);
    }
    let distinct = distinct_count(points);
    let k = n.clamp(1, distinct);
    if k != n {
        log::warn!("clamping cluster count {n} to {k} distinct attribute embeddings");
    }
    let mut rng = seeded_rng(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    repair_empty(points, &mut assignment, &mut centroids);
    let mut trace = vec![objective(points, &assignment, &centroids)];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        recompute_centroids(points, &assignment, &mut centroids);
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        repair_empty(points, &mut next, &mut centroids);
        trace.push(objective(points, &next, &centroids));
        if next == assignment {
            break;
        }
        assignment = next;
    }
    recompute_centroids(points, &assignment, &mut centroids);
    Ok(Clustering {
        assignment,
        k,
        centroids,
        objective: trace,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedAttribute {
    pub pool_index: usize,
    pub text: String,
    pub score: f64,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: String,
    pub selected: Vec<SelectedAttribute>,
}

impl ClassSelection {
    pub fn texts(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.text.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledAttributes {
    pub clusters: usize,
    pub seed: u64,
    pub classes: Vec<ClassSelection>,
}

impl SampledAttributes {
    /// Per-class attribute texts, in class order.
    pub fn texts(&self) -> Vec<Vec<String>> {
        self.classes.iter().map(ClassSelection::texts).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serializes")
    }
}

/// Mean cosine between each attribute's textual prompt and the class shots.
pub fn score_attributes(
    class: &PoolClass,
    image_features: &[Vec<f64>],
    encoders: &DualEncoder,
    vocab: &Vocabulary,
    template: &str,
) -> Result<Vec<f64>> {
    if image_features.is_empty() {
        return Err(Error::NoImages(class.name.clone()));
    }
    let images: Vec<Vec<f64>> = image_features
        .iter()
        .map(|x| encoders.image.encode_image(x))
        .collect::<Result<_>>()?;
    let mut prefix = vocab.tokenize(template)?;
    prefix.extend(phrase_ids(vocab, &class.name)?);
    class
        .attributes
        .iter()
        .map(|a| {
            let mut ids = prefix.clone();
            ids.extend(phrase_ids(vocab, &a.text)?);
            let w = encoders.text.encode_ids(&ids, vocab)?;
            let total: f64 = images.iter().map(|f| dot(f, &w)).sum();
            Ok(total / images.len() as f64)
        })
        .collect()
}

/// Per-cluster argmax of `scores`, ties to the lower index, ordered by cluster.
pub fn select_per_cluster(clustering: &Clustering, scores: &[f64]) -> Vec<usize> {
    (0..clustering.k)
        .filter_map(|k| {
            clustering
                .members(k)
                .into_iter()
                .fold(None, |best, i| match best {
                    Some(b) if scores[b] >= scores[i] => Some(b),
                    _ => Some(i),
                })
        })
        .collect()
}

pub fn rank_and_select(
    clustering: &Clustering,
    class: &PoolClass,
    image_features: &[Vec<f64>],
    encoders: &DualEncoder,
    vocab: &Vocabulary,
    template: &str,
) -> Result<ClassSelection> {
    let scores = score_attributes(class, image_features, encoders, vocab, template)?;
    let selected = select_per_cluster(clustering, &scores)
        .into_iter()
        .map(|i| SelectedAttribute {
            pool_index: i,
            text: class.attributes[i].text.clone(),
            score: scores[i],
            cluster: clustering.assignment[i],
        })
        .collect();
    Ok(ClassSelection {
        class: class.name.clone(),
        selected,
    })
}

/// Per-class clustering seed derived from the run seed.
pub fn class_seed(seed: u64, class_id: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(class_id as u64)
}

/// Full pipeline for every class. `class_images[c]` holds the feature
/// vectors used to score class `c`; `class_names` fixes the class order.
#[allow(clippy::too_many_arguments)]
pub fn sample_attributes(
    pool: &AttributePool,
    class_names: &[String],
    class_images: &[Vec<Vec<f64>>],
    encoders: &DualEncoder,
    vocab: &Vocabulary,
    template: &str,
    n: usize,
    seed: u64,
) -> Result<SampledAttributes> {
    if class_images.len() != class_names.len() {
        return Err(Error::DimensionMismatch {
            expected: class_names.len(),
            got: class_images.len(),
        });
    }
    let mut classes = Vec::with_capacity(class_names.len());
    for (c, name) in class_names.iter().enumerate() {
        let pid = pool.class_index(name)?;
        let emb = embed_attributes(pool, pid, encoders, vocab)?;
        let clustering = cluster_attributes(&emb, n, class_seed(seed, c))?;
        classes.push(rank_and_select(
            &clustering,
            &pool.classes[pid],
            &class_images[c],
            encoders,
            vocab,
            template,
        )?);
    }
    Ok(SampledAttributes {
        clusters: n,
        seed,
        classes,
    })
}

/// Every pool attribute for every class, in pool order, as a selection.
pub fn full_pool_selection(
    pool: &AttributePool,
    class_names: &[String],
) -> Result<SampledAttributes> {
    let classes = class_names
        .iter()
        .map(|name| {
            let class = &pool.classes[pool.class_index(name)?];
            Ok(ClassSelection {
                class: class.name.clone(),
                selected: class
                    .attributes
                    .iter()
                    .enumerate()
                    .map(|(i, a)| SelectedAttribute {
                        pool_index: i,
                        text: a.text.clone(),
                        score: 0.0,
                        cluster: i,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SampledAttributes {
        clusters: usize::MAX,
        seed: 0,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lift(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| vec![*x, 0.0]).collect()
    }

    #[test]
    fn separated_clusters() {
        let pts = lift(&[0.0, 0.1, 10.0, 10.1]);
        let c = cluster_attributes(&pts, 2, 7).unwrap();
        assert_eq!(c.assignment[0], c.assignment[1]);
        assert_eq!(c.assignment[2], c.assignment[3]);
        assert_ne!(c.assignment[0], c.assignment[2]);
        let one = cluster_attributes(&pts, 1, 7).unwrap();
        assert!(one.assignment.iter().all(|a| *a == 0));
        assert!(matches!(
            cluster_attributes(&[], 2, 0),
            Err(Error::TooFewPoints)
        ));
    }

    #[test]
    fn clamps_to_distinct_points() {
        let pts = lift(&[1.0, 1.0, 2.0]);
        let c = cluster_attributes(&pts, 5, 0).unwrap();
        assert_eq!(c.k, 2);
        assert_eq!(c.assignment[0], c.assignment[1]);
    }

    #[test]
    fn objective_non_increasing() {
        let pts: Vec<Vec<f64>> = (0..15)
            .map(|i| {
                vec![
                    (i as f64 * 1.3).sin(),
                    (i as f64 * 0.7).cos(),
                    (i as f64).sqrt(),
                ]
            })
            .collect();
        for seed in 0..20 {
            let c = cluster_attributes(&pts, 3, seed).unwrap();
            for w in c.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
            assert_eq!(c.assignment.len(), 15);
        }
    }

    #[test]
    fn selection_ties_go_to_lower_index() {
        let c = Clustering {
            assignment: vec![1, 0, 1, 0],
            k: 2,
            centroids: vec![],
            objective: vec![],
            iterations: 0,
        };
        assert_eq!(select_per_cluster(&c, &[0.5, 0.2, 0.5, 0.3]), vec![3, 0]);
    }

    #[test]
    fn pool_validation() {
        let ok = r#"{"version":1,"dataset":"d","classes":[{"name":" Cat ","type":"animal",
            "attributes":[{"text":"Long Tail","planted":false}],"source_template":0}]}"#;
        let pool = AttributePool::from_json(ok).unwrap();
        assert_eq!(pool.classes[0].name, "cat");
        assert_eq!(pool.classes[0].attributes[0].text, "long tail");
        let dup = ok.replace(
            r#"[{"text":"Long Tail","planted":false}]"#,
            r#"[{"text":"long tail","planted":false},{"text":"Long tail ","planted":false}]"#,
        );
        assert!(matches!(
            AttributePool::from_json(&dup),
            Err(Error::DuplicateAttribute { .. })
        ));
        let missing = ok.replace(
            r#""attributes":[{"text":"Long Tail","planted":false}],"#,
            "",
        );
        assert!(matches!(
            AttributePool::from_json(&missing),
            Err(Error::SchemaViolation(_))
        ));
        let empty = ok.replace(r#"[{"text":"Long Tail","planted":false}]"#, "[]");
        assert!(matches!(
            AttributePool::from_json(&empty),
            Err(Error::EmptyClass(_))
        ));
    }
}
