//! Knowledge-forest learning engine: concept trees and their relations,
//! graph embeddings, learner profiles, next-tree recommendation, prompt
//! templating and a learner simulator.
//!
//! ```
//! use foke_core::{recommend_next, MasteryState, TreeRelationMatrix};
//!
//! let r = TreeRelationMatrix::complete(2);
//! let s = MasteryState::new(vec![0.5, 0.0]).unwrap();
//! assert_eq!(recommend_next(&r, &s).unwrap().next, Some(1));
//! ```

// Range checks are written `!(x >= lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod engine;
pub mod error;
pub mod forest;
pub mod inference;
pub mod linalg;
pub mod profile;
pub mod prompt;
pub mod simulate;
pub mod store;

pub use embedding::{EmbeddingTable, Pooling, TrainConfig, Triple};
pub use engine::{EngineConfig, EngineState};
pub use error::{Error, Result};
pub use forest::{Concept, ConceptId, KnowledgeForest, KnowledgeTree, Relation, RelationKind, TreeId};
pub use inference::{
    recommend_next, retrieve_tree, tree_relations, InferenceConfig, Recommendation, TreeRelationMatrix,
};
pub use profile::{attention_fuse, update_mastery, MasteryState};
pub use prompt::{instantiate, select_best_template, PromptTemplate, PromptText, SlotKind, SlotValue};
pub use simulate::{simulate_learner, SimConfig};
