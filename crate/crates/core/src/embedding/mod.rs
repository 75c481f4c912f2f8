//! Vector representations for concepts, relation kinds and trees, the
//! losses that shape them, and the training loop.

mod gnn;
pub mod gradcheck;
mod loss;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{ConceptId, KnowledgeForest, KnowledgeTree, RelationKind, TreeId};
use crate::linalg::{self, Vector};

pub use gnn::{gnn_backward, gnn_forward, gnn_layer, Activation, GnnCache, GnnGrad, GnnLayerParams};
pub use loss::{
    combined_loss, contrastive_loss, contrastive_loss_grad, supervised_loss, supervised_loss_grad, triple_loss,
    triple_loss_grad, Classifier, LabeledConcept, Similarity, TripleGrad,
};
pub use train::{
    format_significant, ranking_accuracy, train, train_with, EpochLoss, LossBreakdown, Model, TrainOutcome,
    TrainingProblem, Triple,
};

/// Concept, relation-kind and tree vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    concepts: BTreeMap<ConceptId, Vector>,
    relations: BTreeMap<String, Vector>,
    trees: BTreeMap<TreeId, Vector>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            concepts: BTreeMap::new(),
            relations: BTreeMap::new(),
            trees: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, v: &[f64], what: &str) -> Result<()> {
        linalg::check_dim(v, self.dim)?;
        if !linalg::is_finite(v) {
            return Err(Error::NonFinite(what.to_owned()));
        }
        Ok(())
    }

    pub fn concept(&self, id: &ConceptId) -> Option<&[f64]> {
        self.concepts.get(id).map(Vec::as_slice)
    }

    pub fn set_concept(&mut self, id: ConceptId, v: Vector) -> Result<()> {
        self.check(&v, id.as_str())?;
        self.concepts.insert(id, v);
        Ok(())
    }

    pub fn remove_concept(&mut self, id: &ConceptId) -> Option<Vector> {
        self.concepts.remove(id)
    }

    pub fn concepts(&self) -> impl Iterator<Item = (&ConceptId, &Vector)> {
        self.concepts.iter()
    }

    pub fn relation(&self, kind: &RelationKind) -> Option<&[f64]> {
        self.relations.get(&kind.key()).map(Vec::as_slice)
    }

    pub fn set_relation(&mut self, kind: &RelationKind, v: Vector) -> Result<()> {
        self.check(&v, &kind.key())?;
        self.relations.insert(kind.key(), v);
        Ok(())
    }

    pub fn relations(&self) -> impl Iterator<Item = (&String, &Vector)> {
        self.relations.iter()
    }

    pub fn tree_vector(&self, id: &TreeId) -> Option<&[f64]> {
        self.trees.get(id).map(Vec::as_slice)
    }

    pub fn set_tree_vector(&mut self, id: TreeId, v: Vector) -> Result<()> {
        self.check(&v, id.as_str())?;
        self.trees.insert(id, v);
        Ok(())
    }

    pub fn remove_tree_vector(&mut self, id: &TreeId) -> Option<Vector> {
        self.trees.remove(id)
    }

    pub fn tree_vectors(&self) -> impl Iterator<Item = (&TreeId, &Vector)> {
        self.trees.iter()
    }

    /// Drops every vector that belongs to `tree`.
    pub fn forget_tree(&mut self, tree: &KnowledgeTree) {
        for c in tree.concepts() {
            self.concepts.remove(&c.id);
        }
        self.trees.remove(tree.tree_id());
    }

    /// Recomputes the root vector of every tree whose concepts are all
    /// embedded. Trees with missing concepts are left without one.
    pub fn refresh_tree_vectors(&mut self, forest: &KnowledgeForest, pooling: Pooling) {
        for tree in forest.trees() {
            match root_embedding(tree, self, pooling) {
                Ok(v) => {
                    self.trees.insert(tree.tree_id().clone(), v);
                }
                Err(_) => {
                    self.trees.remove(tree.tree_id());
                }
            }
        }
    }

    /// Re-checks dimensions and finiteness of every stored vector.
    pub fn validate(&self) -> Result<()> {
        for (id, v) in &self.concepts {
            self.check(v, id.as_str())?;
        }
        for (k, v) in &self.relations {
            self.check(v, k)?;
        }
        for (id, v) in &self.trees {
            self.check(v, id.as_str())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Element-wise mean or max over the vectors of a tree's concepts.
pub fn root_embedding(tree: &KnowledgeTree, table: &EmbeddingTable, pooling: Pooling) -> Result<Vector> {
    let mut vectors = Vec::with_capacity(tree.len());
    for c in tree.concepts() {
        vectors.push(
            table
                .concept(&c.id)
                .ok_or_else(|| Error::MissingEmbedding(c.id.clone()))?,
        );
    }
    pool(&vectors, table.dim(), pooling)
}

pub(crate) fn pool(vectors: &[&[f64]], dim: usize, pooling: Pooling) -> Result<Vector> {
    if vectors.is_empty() {
        return Err(Error::InvalidConfig("cannot pool zero vectors".into()));
    }
    let mut out = match pooling {
        Pooling::Mean => vec![0.0; dim],
        Pooling::Max => vec![f64::NEG_INFINITY; dim],
    };
    for v in vectors {
        linalg::check_dim(v, dim)?;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            match pooling {
                Pooling::Mean => *o += x,
                Pooling::Max => *o = o.max(*x),
            }
        }
    }
    if pooling == Pooling::Mean {
        let n = vectors.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

fn default_dim() -> usize {
    8
}
fn default_margin() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-2
}
fn default_epochs() -> usize {
    200
}
fn default_negatives() -> usize {
    1
}
fn default_seed() -> u64 {
    42
}
fn default_init_scale() -> f64 {
    0.1
}

/// Every optimization knob. Missing fields take their defaults when read
/// from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_one")]
    pub lambda_s: f64,
    #[serde(default = "default_one")]
    pub lambda_u: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_negatives")]
    pub negatives_per_edge: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Similarity inside the contrastive loss.
    #[serde(default)]
    pub similarity: Similarity,
    /// When set, the contrastive denominator uses the positive plus this
    /// many sampled nodes instead of every node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrastive_samples: Option<usize>,
    /// Message-passing layers applied before the losses (0 = none).
    #[serde(default)]
    pub gnn_layers: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: default_dim(),
            margin: default_margin(),
            lambda_s: 1.0,
            lambda_u: 1.0,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            negatives_per_edge: default_negatives(),
            seed: default_seed(),
            init_scale: default_init_scale(),
            similarity: Similarity::default(),
            contrastive_samples: None,
            gnn_layers: 0,
            activation: Activation::default(),
            pooling: Pooling::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::out_of_range(name, v, "(0, inf)"))
            }
        };
        let non_negative = |name: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::out_of_range(name, v, "[0, inf)"))
            }
        };
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be at least 1".into()));
        }
        if self.negatives_per_edge == 0 {
            return Err(Error::InvalidConfig("negatives_per_edge must be at least 1".into()));
        }
        if self.contrastive_samples == Some(0) {
            return Err(Error::InvalidConfig("contrastive_samples must be at least 1".into()));
        }
        positive("margin", self.margin)?;
        positive("learning_rate", self.learning_rate)?;
        positive("init_scale", self.init_scale)?;
        non_negative("lambda_s", self.lambda_s)?;
        non_negative("lambda_u", self.lambda_u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::Concept;

    fn two_concept_tree() -> (KnowledgeTree, EmbeddingTable) {
        let tree = KnowledgeTree::new(
            "t",
            "a",
            vec![Concept::new("a", "A"), Concept::new("b", "B")],
            vec![crate::forest::Relation::hierarchy("a", "b")],
        )
        .unwrap();
        let mut table = EmbeddingTable::new(2);
        table.set_concept("a".into(), vec![1.0, 0.0]).unwrap();
        table.set_concept("b".into(), vec![0.0, 1.0]).unwrap();
        (tree, table)
    }

    #[test]
    fn pooling_examples() {
        let (tree, table) = two_concept_tree();
        assert_eq!(root_embedding(&tree, &table, Pooling::Mean).unwrap(), vec![0.5, 0.5]);
        assert_eq!(root_embedding(&tree, &table, Pooling::Max).unwrap(), vec![1.0, 1.0]);

        let single = KnowledgeTree::new("s", "a", vec![Concept::new("a", "A")], vec![]).unwrap();
        for p in [Pooling::Mean, Pooling::Max] {
            assert_eq!(root_embedding(&single, &table, p).unwrap(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn pooling_missing_embedding() {
        let (tree, mut table) = two_concept_tree();
        table.remove_concept(&"b".into());
        assert_eq!(
            root_embedding(&tree, &table, Pooling::Mean).unwrap_err(),
            Error::MissingEmbedding("b".into())
        );
    }

    #[test]
    fn table_rejects_bad_vectors() {
        let mut t = EmbeddingTable::new(2);
        assert!(matches!(
            t.set_concept("a".into(), vec![1.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(matches!(
            t.set_concept("a".into(), vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        c.validate().unwrap();
        let bad = TrainConfig {
            margin: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda_u: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
