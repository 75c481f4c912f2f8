//! Engine state and the high-level operations behind the CLI and the HTTP
//! service. Both front ends serialize these results unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{train_with, EmbeddingTable, EpochLoss, TrainConfig, TrainOutcome, Triple};
use crate::error::{Error, Result};
use crate::forest::{ConceptId, KnowledgeForest, RelationKind, TreeId};
use crate::inference::{
    recommend_next, retrieve_tree, tree_relations, InferenceConfig, Recommendation, Retrieval, TreeRelationMatrix,
};
use crate::profile::{
    attention_fuse, Fusion, FusionWeights, MasteryState, ProfileEncoder, ProfileEncoderConfig, ProfileRecord,
    UserProfile,
};
use crate::prompt::{
    bind_task_slots, prompt_for_task, retrieve_task_subforest, CoverageReward, PromptTemplate, Selection, TaskSpec,
};
use crate::simulate::{simulate_learner, SimConfig, SimStep};
use crate::store::TreeDocument;

fn default_delta() -> f64 {
    0.34
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub encoder: ProfileEncoderConfig,
    /// Attention weights for profile fusion; zero weights (uniform
    /// attention) when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionWeights>,
    /// Mastery increment used when a request does not give one.
    #[serde(default = "default_delta")]
    pub default_delta: f64,
    #[serde(default)]
    pub reward: CoverageReward,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            encoder: ProfileEncoderConfig::default(),
            fusion: None,
            default_delta: default_delta(),
            reward: CoverageReward::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EngineState {
    pub forest: KnowledgeForest,
    /// Training set of (source, target, relation) triples.
    pub triples: Vec<Triple>,
    /// Present once training has run.
    pub table: Option<EmbeddingTable>,
    pub profiles: BTreeMap<String, ProfileRecord>,
    pub templates: Vec<PromptTemplate>,
    pub config: EngineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub tree_id: TreeId,
    pub root: ConceptId,
    pub concepts: usize,
    pub relations: usize,
    pub embedded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSummary {
    pub trees: Vec<TreeSummary>,
    pub concept_count: usize,
    pub triple_count: usize,
    pub trained: bool,
    /// Absent until every tree has a root vector.
    pub relation_matrix: Option<TreeRelationMatrix>,
    pub pair_comparisons: u64,
    pub local_pairs: u64,
    pub flat_pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RetrieveQuery {
    Concept(ConceptId),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inserted {
    pub tree_id: TreeId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removed {
    pub tree_id: TreeId,
    pub index: usize,
    pub dropped_triples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasteryUpdate {
    pub user_id: String,
    pub tree: usize,
    pub delta: f64,
    pub mastery: MasteryState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub trajectory: Vec<SimStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileView {
    pub profile: UserProfile,
    pub fusion: Fusion,
}

impl EngineState {
    pub fn new(forest: KnowledgeForest, triples: Vec<Triple>) -> Self {
        EngineState {
            forest,
            triples,
            ..EngineState::default()
        }
    }

    pub fn summary(&self) -> ForestSummary {
        ForestSummary {
            trees: self
                .forest
                .trees()
                .iter()
                .map(|t| TreeSummary {
                    tree_id: t.tree_id().clone(),
                    root: t.root().clone(),
                    concepts: t.len(),
                    relations: t.relations().len(),
                    embedded: self
                        .table
                        .as_ref()
                        .is_some_and(|tb| tb.tree_vector(t.tree_id()).is_some()),
                })
                .collect(),
            concept_count: self.forest.concept_count(),
            triple_count: self.triples.len(),
            trained: self.table.is_some(),
            relation_matrix: self.relation_matrix().ok(),
            pair_comparisons: self.forest.pair_comparison_count(),
            local_pairs: self.forest.local_pair_count(),
            flat_pairs: self.forest.flat_pair_count(),
        }
    }

    pub fn table(&self) -> Result<&EmbeddingTable> {
        self.table.as_ref().ok_or(Error::NotTrained)
    }

    pub fn relation_matrix(&self) -> Result<TreeRelationMatrix> {
        tree_relations(self.table()?, &self.forest, &self.config.inference)
    }

    /// Adds a tree. Every user gets zero mastery for it; it has no vectors
    /// until the next training run.
    pub fn insert_tree(&mut self, doc: &TreeDocument) -> Result<Inserted> {
        let tree = doc.to_tree("tree")?;
        let tree_id = tree.tree_id().clone();
        let k = self.forest.len();
        for p in self.profiles.values() {
            self.check_mastery_len(p)?;
        }
        self.forest.insert_tree(tree)?;
        for p in self.profiles.values_mut() {
            if !p.mastery.is_empty() {
                p.mastery.push_tree();
            }
        }
        Ok(Inserted { tree_id, index: k })
    }

    /// Removes a tree together with its vectors, its mastery entries and
    /// the triples that mention its concepts.
    pub fn remove_tree(&mut self, id: &TreeId) -> Result<Removed> {
        for p in self.profiles.values() {
            self.check_mastery_len(p)?;
        }
        let (index, tree) = self.forest.remove_tree(id)?;
        if let Some(table) = &mut self.table {
            table.forget_tree(&tree);
        }
        let before = self.triples.len();
        self.triples
            .retain(|t| !tree.contains(&t.source) && !tree.contains(&t.target));
        for p in self.profiles.values_mut() {
            if !p.mastery.is_empty() {
                p.mastery.remove_tree(index);
            }
        }
        Ok(Removed {
            tree_id: tree.tree_id().clone(),
            index,
            dropped_triples: before - self.triples.len(),
        })
    }

    pub fn train(&self, config: &TrainConfig, on_epoch: impl FnMut(&EpochLoss)) -> Result<TrainOutcome> {
        train_with(&self.forest, &self.triples, config, on_epoch)
    }

    /// Publishes a training result.
    pub fn apply_training(&mut self, config: TrainConfig, outcome: TrainOutcome) {
        self.config.train = config;
        self.table = Some(outcome.table);
    }

    pub fn retrieve(&self, query: &RetrieveQuery) -> Result<Retrieval> {
        let table = self.table()?;
        let vector = match query {
            RetrieveQuery::Concept(id) => {
                if self.forest.locate(id).is_none() {
                    return Err(Error::ConceptNotFound(id.clone()));
                }
                table.concept(id).ok_or_else(|| Error::MissingEmbedding(id.clone()))?
            }
            RetrieveQuery::Vector(v) => v.as_slice(),
        };
        retrieve_tree(vector, table, &self.forest)
    }

    pub fn profile(&self, user_id: &str) -> Result<&ProfileRecord> {
        self.profiles
            .get(user_id)
            .ok_or_else(|| Error::UserNotFound(user_id.to_owned()))
    }

    fn check_mastery_len(&self, p: &ProfileRecord) -> Result<()> {
        if !p.mastery.is_empty() && p.mastery.len() != self.forest.len() {
            return Err(Error::DimensionMismatch {
                expected: self.forest.len(),
                found: p.mastery.len(),
            });
        }
        Ok(())
    }

    /// A user's mastery; an empty stored vector means nothing studied yet.
    pub fn mastery(&self, user_id: &str) -> Result<MasteryState> {
        let p = self.profile(user_id)?;
        self.check_mastery_len(p)?;
        Ok(if p.mastery.is_empty() {
            MasteryState::zeros(self.forest.len())
        } else {
            p.mastery.clone()
        })
    }

    pub fn recommend(&self, user_id: &str) -> Result<Recommendation> {
        let mastery = self.mastery(user_id)?;
        recommend_next(&self.relation_matrix()?, &mastery)
    }

    pub fn update_mastery(&mut self, user_id: &str, tree: usize, delta: Option<f64>) -> Result<MasteryUpdate> {
        let delta = delta.unwrap_or(self.config.default_delta);
        let mut mastery = self.mastery(user_id)?;
        if tree >= mastery.len() {
            return Err(Error::IndexOutOfRange {
                index: tree,
                len: mastery.len(),
            });
        }
        mastery.update(tree, delta)?;
        self.profiles.get_mut(user_id).expect("checked above").mastery = mastery.clone();
        Ok(MasteryUpdate {
            user_id: user_id.to_owned(),
            tree,
            delta,
            mastery,
        })
    }

    /// Picks the best of `template_ids` for the task, using the user's
    /// attributes when a user is given. With no ids, every template whose
    /// slots can be filled competes.
    pub fn prompt(&self, task: &TaskSpec, template_ids: &[String], user_id: Option<&str>) -> Result<Selection> {
        let profile = user_id.map(|u| self.profile(u)).transpose()?;
        let candidates: Vec<PromptTemplate> = if template_ids.is_empty() {
            let sub = retrieve_task_subforest(&self.forest, task)?;
            let usable: Vec<PromptTemplate> = self
                .templates
                .iter()
                .filter(|t| bind_task_slots(t, &self.forest, &sub, task, profile).is_ok())
                .cloned()
                .collect();
            if usable.is_empty() {
                self.templates.clone()
            } else {
                usable
            }
        } else {
            template_ids
                .iter()
                .map(|id| {
                    self.templates
                        .iter()
                        .find(|t| t.id() == id)
                        .cloned()
                        .ok_or_else(|| Error::TemplateNotFound(id.clone()))
                })
                .collect::<Result<_>>()?
        };
        prompt_for_task(&self.forest, task, &candidates, profile, &self.config.reward)
    }

    /// Simulates from the user's mastery, or from zero without a user.
    pub fn simulate(&self, config: &SimConfig, user_id: Option<&str>) -> Result<Simulation> {
        let s0 = match user_id {
            Some(u) => self.mastery(u)?,
            None => MasteryState::zeros(self.forest.len()),
        };
        let trajectory = simulate_learner(&self.relation_matrix()?, &s0, config)?;
        Ok(Simulation { trajectory })
    }

    /// Encoded profile vectors and their attention fusion.
    pub fn profile_view(&self, user_id: &str) -> Result<ProfileView> {
        let record = self.profile(user_id)?.clone();
        let dim = self.table.as_ref().map_or(self.config.train.dim, EmbeddingTable::dim);
        let encoder = ProfileEncoder::new(dim, &self.config.encoder)?;
        let profile = encoder.encode(record, self.table.as_ref())?;
        let weights = self.config.fusion.clone().unwrap_or_else(|| FusionWeights::zeros(dim));
        let fusion = attention_fuse(&profile.vectors, &weights)?;
        Ok(ProfileView { profile, fusion })
    }

    /// Relation kinds that appear in the training triples.
    pub fn relation_kinds(&self) -> Vec<RelationKind> {
        let mut kinds: Vec<RelationKind> = self.triples.iter().map(|t| t.relation.clone()).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ConceptDocument;

    fn doc(id: &str, concepts: &[&str]) -> TreeDocument {
        TreeDocument {
            tree_id: id.into(),
            root: concepts[0].into(),
            concepts: concepts
                .iter()
                .enumerate()
                .map(|(i, c)| ConceptDocument {
                    id: (*c).into(),
                    name: c.to_uppercase(),
                    parent: (i > 0).then(|| concepts[0].into()),
                    attributes: BTreeMap::new(),
                    label: None,
                })
                .collect(),
            relations: vec![],
        }
    }

    fn user(id: &str) -> ProfileRecord {
        ProfileRecord {
            user_id: id.into(),
            attributes: BTreeMap::new(),
            behaviors: BTreeMap::new(),
            trajectory: vec![],
            mastery: MasteryState::default(),
        }
    }

    #[test]
    fn insert_then_remove_restores_summary() {
        let mut e = EngineState::default();
        e.insert_tree(&doc("t1", &["a", "b"])).unwrap();
        e.profiles.insert("u".into(), user("u"));
        e.update_mastery("u", 0, Some(0.5)).unwrap();
        let before = (e.summary(), e.clone());
        e.insert_tree(&doc("t2", &["c"])).unwrap();
        assert_eq!(e.mastery("u").unwrap().values(), &[0.5, 0.0]);
        e.remove_tree(&"t2".into()).unwrap();
        assert_eq!((e.summary(), e.clone()), before);
    }

    #[test]
    fn untrained_queries_fail_cleanly() {
        let mut e = EngineState::default();
        e.insert_tree(&doc("t1", &["a"])).unwrap();
        e.profiles.insert("u".into(), user("u"));
        assert_eq!(e.recommend("u").unwrap_err(), Error::NotTrained);
        assert_eq!(e.recommend("nobody").unwrap_err(), Error::UserNotFound("nobody".into()));
        assert!(e.summary().relation_matrix.is_none());
    }
}
