//! Cross-tree structure and recommendation: tree-level relations from root
//! similarity, query-to-tree retrieval and next-tree recommendation.
//!
//! Ties are always broken toward the lowest index in forest order.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::forest::{KnowledgeForest, TreeId};
use crate::linalg;
use crate::profile::MasteryState;

/// Cosine similarity of two nonzero vectors.
pub fn similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    linalg::cosine(x, y)
}

fn default_threshold() -> f64 {
    0.8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Tree-level threshold.
    #[serde(default = "default_threshold")]
    pub tau: f64,
    /// Concept-level threshold for local relation inference.
    #[serde(default = "default_threshold")]
    pub tau_c: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { tau: 0.8, tau_c: 0.8 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tau_c", self.tau_c)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::out_of_range(name, v, "[-1, 1]"));
            }
        }
        Ok(())
    }
}

/// Symmetric 0/1 matrix of tree-level links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRelationMatrix {
    threshold: f64,
    links: Vec<Vec<u8>>,
}

impl TreeRelationMatrix {
    /// Builds a matrix from explicit rows. Rows must be square, 0/1,
    /// symmetric and have a unit diagonal.
    pub fn from_rows(links: Vec<Vec<u8>>, threshold: f64) -> Result<Self> {
        let k = links.len();
        if let Some(row) = links.iter().find(|r| r.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: row.len(),
            });
        }
        for (i, row) in links.iter().enumerate() {
            if row[i] != 1 {
                return Err(Error::InvalidConfig(format!("diagonal entry {i} must be 1")));
            }
            for (j, &x) in row.iter().enumerate() {
                if x > 1 {
                    return Err(Error::InvalidConfig(format!("entry ({i},{j}) must be 0 or 1")));
                }
                if links[j][i] != x {
                    return Err(Error::InvalidConfig(format!("entry ({i},{j}) breaks symmetry")));
                }
            }
        }
        Ok(TreeRelationMatrix { threshold, links })
    }

    /// Fully linked `k × k` matrix.
    pub fn complete(k: usize) -> Self {
        TreeRelationMatrix {
            threshold: -1.0,
            links: vec![vec![1; k]; k],
        }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.links[i][j]
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.links
    }

    /// True when the link graph has a single connected component.
    pub fn is_connected(&self) -> bool {
        let k = self.len();
        if k == 0 {
            return true;
        }
        let mut seen = vec![false; k];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for (j, &l) in self.links[i].iter().enumerate() {
                if l == 1 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Links trees `i` and `j` when their root vectors have similarity at
/// least `config.tau`. The diagonal is 1 by definition.
pub fn tree_relations(
    table: &EmbeddingTable,
    forest: &KnowledgeForest,
    config: &InferenceConfig,
) -> Result<TreeRelationMatrix> {
    config.validate()?;
    let roots = root_vectors(table, forest)?;
    let k = roots.len();
    let mut links = vec![vec![0u8; k]; k];
    for i in 0..k {
        links[i][i] = 1;
        for j in (i + 1)..k {
            let linked = u8::from(similarity(roots[i], roots[j])? >= config.tau);
            links[i][j] = linked;
            links[j][i] = linked;
        }
    }
    Ok(TreeRelationMatrix {
        threshold: config.tau,
        links,
    })
}

fn root_vectors<'a>(table: &'a EmbeddingTable, forest: &KnowledgeForest) -> Result<Vec<&'a [f64]>> {
    forest
        .trees()
        .iter()
        .map(|t| {
            let v = table
                .tree_vector(t.tree_id())
                .ok_or_else(|| Error::MissingTreeVector(t.tree_id().clone()))?;
            if linalg::norm(v) == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub tree_id: TreeId,
    pub index: usize,
    pub similarity: f64,
}

/// The tree whose root vector is most similar to `query`.
pub fn retrieve_tree(query: &[f64], table: &EmbeddingTable, forest: &KnowledgeForest) -> Result<Retrieval> {
    if forest.is_empty() {
        return Err(Error::EmptyForest);
    }
    linalg::check_dim(query, table.dim())?;
    if linalg::norm(query) == 0.0 {
        return Err(Error::ZeroVector);
    }
    let roots = root_vectors(table, forest)?;
    let mut best: Option<(usize, f64)> = None;
    for (k, root) in roots.iter().enumerate() {
        let s = similarity(query, root)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    let (index, similarity) = best.expect("forest is nonempty");
    Ok(Retrieval {
        tree_id: forest.trees()[index].tree_id().clone(),
        index,
        similarity,
    })
}

/// Per-tree breakdown of the recommendation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeScore {
    /// `Σ_i r(i, k) · s_i`, the `i = k` term included.
    pub relevance: f64,
    /// `1 - s_k`
    pub unexplored: f64,
    pub score: f64,
    /// Mastered trees (`s_k = 1`) are never recommended.
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub next: Option<usize>,
    pub scores: Vec<TreeScore>,
}

/// Picks `argmax_k (Σ_i r(i,k) s_i)(1 - s_k)` over trees that are not yet
/// fully mastered. Returns `None` only when every tree is mastered.
pub fn recommend_next(matrix: &TreeRelationMatrix, mastery: &MasteryState) -> Result<Recommendation> {
    let k = matrix.len();
    let s = mastery.values();
    linalg::check_dim(s, k)?;
    let scores: Vec<TreeScore> = (0..k)
        .map(|t| {
            let relevance: f64 = (0..k).map(|i| f64::from(matrix.get(i, t)) * s[i]).sum();
            let unexplored = 1.0 - s[t];
            TreeScore {
                relevance,
                unexplored,
                score: relevance * unexplored,
                eligible: s[t] < 1.0,
            }
        })
        .collect();
    let mut next: Option<usize> = None;
    for (t, sc) in scores.iter().enumerate() {
        if sc.eligible && next.is_none_or(|b| sc.score > scores[b].score) {
            next = Some(t);
        }
    }
    Ok(Recommendation { next, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{Concept, KnowledgeTree};

    fn forest_with_roots(roots: &[Vec<f64>]) -> (KnowledgeForest, EmbeddingTable) {
        let d = roots[0].len();
        let mut table = EmbeddingTable::new(d);
        let mut forest = KnowledgeForest::new();
        for (i, r) in roots.iter().enumerate() {
            let id = format!("c{i}");
            let tree = KnowledgeTree::new(
                format!("T{}", i + 1),
                id.as_str(),
                vec![Concept::new(id.as_str(), "x")],
                vec![],
            )
            .unwrap();
            table.set_concept(id.as_str().into(), r.clone()).unwrap();
            table.set_tree_vector(tree.tree_id().clone(), r.clone()).unwrap();
            forest.insert_tree(tree).unwrap();
        }
        (forest, table)
    }

    #[test]
    fn tree_relation_examples() {
        let cfg = InferenceConfig::default();
        let (f, t) = forest_with_roots(&[vec![0.3, 0.4], vec![0.3, 0.4]]);
        assert_eq!(tree_relations(&t, &f, &cfg).unwrap().get(0, 1), 1);
        let (f, t) = forest_with_roots(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(tree_relations(&t, &f, &cfg).unwrap().get(0, 1), 0);

        // cos((1,0), (1,0.2)) = 1/sqrt(1.04) ≈ 0.9806; the rest are ≤ 0.196.
        let n = (1.0f64 + 0.04).sqrt();
        let (f, t) = forest_with_roots(&[vec![1.0, 0.0], vec![1.0 / n, 0.2 / n], vec![0.0, 1.0]]);
        let m = tree_relations(&t, &f, &InferenceConfig { tau: 0.9, tau_c: 0.8 }).unwrap();
        assert_eq!(m.rows(), &[vec![1, 1, 0], vec![1, 1, 0], vec![0, 0, 1]]);
    }

    #[test]
    fn missing_tree_vector() {
        let (f, mut t) = forest_with_roots(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        t.remove_tree_vector(&"T2".into());
        assert_eq!(
            tree_relations(&t, &f, &InferenceConfig::default()).unwrap_err(),
            Error::MissingTreeVector("T2".into())
        );
    }

    #[test]
    fn retrieval_examples() {
        let (f, t) = forest_with_roots(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let r = retrieve_tree(&[0.0, 1.0, 0.0], &t, &f).unwrap();
        assert_eq!((r.tree_id.as_str(), r.index, r.similarity), ("T2", 1, 1.0));

        let (f, t) = forest_with_roots(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(retrieve_tree(&[0.2, -1.0], &t, &f).unwrap().index, 0);

        assert_eq!(
            retrieve_tree(&[1.0, 0.0], &t, &KnowledgeForest::new()).unwrap_err(),
            Error::EmptyForest
        );
        assert_eq!(retrieve_tree(&[0.0, 0.0], &t, &f).unwrap_err(), Error::ZeroVector);
    }

    #[test]
    fn recommend_examples() {
        let all_one = MasteryState::new(vec![1.0, 1.0, 1.0]).unwrap();
        let m = TreeRelationMatrix::complete(3);
        assert_eq!(recommend_next(&m, &all_one).unwrap().next, None);

        let m = TreeRelationMatrix::from_rows(vec![vec![1, 1, 0], vec![1, 1, 0], vec![0, 0, 1]], 0.8).unwrap();
        let s = MasteryState::new(vec![1.0, 0.0, 0.0]).unwrap();
        let rec = recommend_next(&m, &s).unwrap();
        let scores: Vec<f64> = rec.scores.iter().map(|x| x.score).collect();
        assert_eq!(scores, vec![0.0, 1.0, 0.0]);
        assert_eq!(rec.next, Some(1));

        let cold = MasteryState::zeros(3);
        assert_eq!(recommend_next(&m, &cold).unwrap().next, Some(0));

        assert!(matches!(
            recommend_next(&m, &MasteryState::zeros(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mastered_trees_skipped_on_zero_ties() {
        // Tree 0 mastered but isolated; every eligible score is zero.
        let m = TreeRelationMatrix::from_rows(vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]], 0.8).unwrap();
        let s = MasteryState::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(recommend_next(&m, &s).unwrap().next, Some(1));
    }

    #[test]
    fn empty_forest_recommends_nothing() {
        let m = TreeRelationMatrix::complete(0);
        assert_eq!(recommend_next(&m, &MasteryState::zeros(0)).unwrap().next, None);
    }

    #[test]
    fn matrix_validation() {
        assert!(TreeRelationMatrix::from_rows(vec![vec![1, 1], vec![0, 1]], 0.5).is_err());
        assert!(TreeRelationMatrix::from_rows(vec![vec![0]], 0.5).is_err());
        assert!(TreeRelationMatrix::from_rows(vec![vec![1, 0, 0]], 0.5).is_err());
    }
}
