//! Browser bindings for the interactive demo in `www/`.
//!
//! Each export takes and returns JSON text. The `*_json` functions hold the
//! logic so they can be tested natively; the exported wrappers only turn
//! errors into JS exceptions.

use foke_core::embedding::{EmbeddingTable, Pooling};
use foke_core::profile::{FusionWeights, ProfileVectors};
use foke_core::{
    attention_fuse, recommend_next, tree_relations, Concept, InferenceConfig, KnowledgeForest, KnowledgeTree,
    MasteryState, TreeRelationMatrix,
};
use serde::Deserialize;
use wasm_bindgen::prelude::*;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationsInput {
    /// One root vector per tree.
    roots: Vec<Vec<f64>>,
    tau: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecommendInput {
    links: Vec<Vec<u8>>,
    mastery: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FuseInput {
    vectors: ProfileVectors,
    weights: FusionWeights,
}

fn parse<'a, T: Deserialize<'a>>(input: &'a str) -> Result<T, String> {
    serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))
}

fn out<T: serde::Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Relation matrix for single-concept trees with the given root vectors.
pub fn relations_json(input: &str) -> Result<String, String> {
    let req: RelationsInput = parse(input)?;
    let dim = req.roots.first().map_or(0, Vec::len);
    let mut forest = KnowledgeForest::new();
    let mut table = EmbeddingTable::new(dim);
    for (k, v) in req.roots.into_iter().enumerate() {
        let id = format!("tree-{k}");
        let tree = KnowledgeTree::new(
            id.clone(),
            id.clone(),
            vec![Concept::new(id.clone(), id.clone())],
            vec![],
        )
        .map_err(|e| e.to_string())?;
        forest.insert_tree(tree).map_err(|e| e.to_string())?;
        table.set_concept(id.into(), v).map_err(|e| e.to_string())?;
    }
    table.refresh_tree_vectors(&forest, Pooling::Mean);
    let config = InferenceConfig {
        tau: req.tau,
        ..InferenceConfig::default()
    };
    out(&tree_relations(&table, &forest, &config).map_err(|e| e.to_string())?)
}

pub fn recommend_json(input: &str) -> Result<String, String> {
    let req: RecommendInput = parse(input)?;
    let matrix = TreeRelationMatrix::from_rows(req.links, 0.0).map_err(|e| e.to_string())?;
    let mastery = MasteryState::new(req.mastery).map_err(|e| e.to_string())?;
    out(&recommend_next(&matrix, &mastery).map_err(|e| e.to_string())?)
}

pub fn fuse_json(input: &str) -> Result<String, String> {
    let req: FuseInput = parse(input)?;
    out(&attention_fuse(&req.vectors, &req.weights).map_err(|e| e.to_string())?)
}

#[wasm_bindgen]
pub fn relations(input: &str) -> Result<String, JsError> {
    relations_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn recommend(input: &str) -> Result<String, JsError> {
    recommend_json(input).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fuse(input: &str) -> Result<String, JsError> {
    fuse_json(input).map_err(|e| JsError::new(&e))
}
