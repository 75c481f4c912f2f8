//! The knowledge forest: an ordered collection of independently rooted
//! concept hierarchies that can be inserted and removed at runtime.
//!
//! Relations never cross tree boundaries. Cross-tree structure is derived
//! from root embeddings in [`crate::inference`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

string_id!(
    /// Identifier of a concept, unique across the whole forest.
    ConceptId
);
string_id!(
    /// Identifier of a knowledge tree, unique within a forest.
    TreeId
);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Concept {
    pub fn new(id: impl Into<ConceptId>, name: impl Into<String>) -> Self {
        Concept {
            id: id.into(),
            name: name.into(),
            attributes: BTreeMap::new(),
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }
}

/// Relation kinds serialize as plain strings; custom kinds carry a
/// `custom:` prefix so they can never shadow a built-in kind.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    Hierarchy,
    Prerequisite,
    Related,
    Custom(String),
}

impl RelationKind {
    pub fn key(&self) -> String {
        match self {
            RelationKind::Hierarchy => "hierarchy".into(),
            RelationKind::Prerequisite => "prerequisite".into(),
            RelationKind::Related => "related".into(),
            RelationKind::Custom(name) => format!("custom:{name}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hierarchy" => Ok(RelationKind::Hierarchy),
            "prerequisite" => Ok(RelationKind::Prerequisite),
            "related" => Ok(RelationKind::Related),
            other => match other.strip_prefix("custom:") {
                Some(name) if !name.is_empty() => Ok(RelationKind::Custom(name.to_owned())),
                _ => Err(Error::RelationKindNotFound(other.to_owned())),
            },
        }
    }

    /// Undirected kinds are stored once per unordered pair.
    pub fn is_symmetric(&self) -> bool {
        matches!(self, RelationKind::Related)
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl Serialize for RelationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.key())
    }
}

impl<'de> Deserialize<'de> for RelationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        RelationKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub source: ConceptId,
    pub target: ConceptId,
    pub kind: RelationKind,
}

impl Relation {
    pub fn new(source: impl Into<ConceptId>, target: impl Into<ConceptId>, kind: RelationKind) -> Self {
        let mut rel = Relation {
            source: source.into(),
            target: target.into(),
            kind,
        };
        if rel.kind.is_symmetric() && rel.target < rel.source {
            std::mem::swap(&mut rel.source, &mut rel.target);
        }
        rel
    }

    pub fn hierarchy(parent: impl Into<ConceptId>, child: impl Into<ConceptId>) -> Self {
        Relation::new(parent, child, RelationKind::Hierarchy)
    }

    fn unordered_pair(&self) -> (ConceptId, ConceptId) {
        if self.source <= self.target {
            (self.source.clone(), self.target.clone())
        } else {
            (self.target.clone(), self.source.clone())
        }
    }
}

/// A rooted concept hierarchy plus any extra within-tree relations.
///
/// Construction validates the rooted-tree property: every non-root concept
/// has exactly one hierarchy parent and everything is reachable from the
/// root. The fields are private so that property cannot be broken later.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTree {
    tree_id: TreeId,
    root: ConceptId,
    concepts: Vec<Concept>,
    relations: Vec<Relation>,
    index: HashMap<ConceptId, usize>,
}

/// Work done by one local inference pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct InferenceStats {
    pub comparisons: u64,
    pub added: usize,
}

impl KnowledgeTree {
    pub fn new(
        tree_id: impl Into<TreeId>,
        root: impl Into<ConceptId>,
        concepts: Vec<Concept>,
        relations: Vec<Relation>,
    ) -> Result<Self> {
        let tree_id = tree_id.into();
        let root = root.into();
        let invalid = |detail: String| Error::InvalidTree {
            tree: tree_id.clone(),
            detail,
        };

        if concepts.is_empty() {
            return Err(invalid("a tree needs at least one concept".into()));
        }
        let mut index = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            if c.id.as_str().is_empty() {
                return Err(invalid(format!("concept #{i} has an empty id")));
            }
            if c.name.trim().is_empty() {
                return Err(invalid(format!("concept `{}` has an empty name", c.id)));
            }
            if index.insert(c.id.clone(), i).is_some() {
                return Err(Error::DuplicateConceptId(c.id.clone()));
            }
        }
        if !index.contains_key(&root) {
            return Err(invalid(format!("root `{root}` is not one of the concepts")));
        }

        let mut seen = HashSet::new();
        let mut canonical = Vec::with_capacity(relations.len());
        for rel in relations {
            let rel = Relation::new(rel.source, rel.target, rel.kind);
            for end in [&rel.source, &rel.target] {
                if !index.contains_key(end) {
                    return Err(invalid(format!(
                        "relation {} -> {} references unknown concept `{end}`",
                        rel.source, rel.target
                    )));
                }
            }
            if rel.source == rel.target {
                return Err(invalid(format!("self relation on `{}` ({})", rel.source, rel.kind)));
            }
            if !seen.insert(rel.clone()) {
                return Err(invalid(format!(
                    "duplicate relation {} -> {} ({})",
                    rel.source, rel.target, rel.kind
                )));
            }
            canonical.push(rel);
        }
        // Hierarchy edges first, in child order; the rest keep their order.
        canonical.sort_by_key(|r| match r.kind {
            RelationKind::Hierarchy => (0, index[&r.target]),
            _ => (1, 0),
        });

        let tree = KnowledgeTree {
            tree_id,
            root,
            concepts,
            relations: canonical,
            index,
        };
        tree.check_hierarchy()?;
        Ok(tree)
    }

    fn check_hierarchy(&self) -> Result<()> {
        let malformed = |detail: String| Error::MalformedHierarchy {
            tree: self.tree_id.clone(),
            detail,
        };

        let mut parents: HashMap<&ConceptId, Vec<&ConceptId>> = HashMap::new();
        for rel in self.hierarchy_edges() {
            parents.entry(&rel.target).or_default().push(&rel.source);
        }
        if let Some(ps) = parents.get(&self.root) {
            return Err(malformed(format!(
                "root `{}` has a hierarchy parent (edge {} -> {})",
                self.root, ps[0], self.root
            )));
        }
        for c in &self.concepts {
            if c.id == self.root {
                continue;
            }
            match parents.get(&c.id).map(Vec::as_slice) {
                None | Some([]) => return Err(malformed(format!("concept `{}` has no hierarchy parent", c.id))),
                Some([_]) => {}
                Some(ps) => {
                    let list: Vec<String> = ps.iter().map(|p| format!("`{p}`")).collect();
                    return Err(malformed(format!(
                        "concept `{}` has {} hierarchy parents ({})",
                        c.id,
                        ps.len(),
                        list.join(", ")
                    )));
                }
            }
        }

        // Every node has exactly one parent at this point, so anything not
        // reachable from the root sits on a parent cycle.
        let reachable = self.reachable_from_root();
        if let Some(stray) = self.concepts.iter().find(|c| !reachable.contains(&c.id)) {
            let mut path = vec![&stray.id];
            let mut cur = &stray.id;
            loop {
                let p = parents[cur][0];
                if let Some(pos) = path.iter().position(|x| *x == p) {
                    let mut cycle: Vec<String> = path[pos..].iter().rev().map(|c| c.to_string()).collect();
                    cycle.push(p.to_string());
                    return Err(malformed(format!("hierarchy cycle {}", cycle.join(" -> "))));
                }
                path.push(p);
                cur = p;
            }
        }
        Ok(())
    }

    fn reachable_from_root(&self) -> HashSet<ConceptId> {
        let mut children: HashMap<&ConceptId, Vec<&ConceptId>> = HashMap::new();
        for rel in self.hierarchy_edges() {
            children.entry(&rel.source).or_default().push(&rel.target);
        }
        let mut seen = HashSet::new();
        let mut stack = vec![&self.root];
        while let Some(c) = stack.pop() {
            if seen.insert(c.clone()) {
                if let Some(kids) = children.get(c) {
                    stack.extend(kids.iter().copied());
                }
            }
        }
        seen
    }

    pub fn tree_id(&self) -> &TreeId {
        &self.tree_id
    }

    pub fn root(&self) -> &ConceptId {
        &self.root
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn contains(&self, id: &ConceptId) -> bool {
        self.index.contains_key(id)
    }

    pub fn concept(&self, id: &ConceptId) -> Option<&Concept> {
        self.index.get(id).map(|&i| &self.concepts[i])
    }

    pub fn hierarchy_edges(&self) -> impl Iterator<Item = &Relation> {
        self.relations.iter().filter(|r| r.kind == RelationKind::Hierarchy)
    }

    pub fn parent(&self, id: &ConceptId) -> Option<&ConceptId> {
        self.hierarchy_edges().find(|r| &r.target == id).map(|r| &r.source)
    }

    /// Neighbours over every relation kind, ignoring direction, in
    /// relation order with duplicates removed.
    pub fn neighbors(&self, id: &ConceptId) -> Vec<&ConceptId> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in &self.relations {
            let other = if &r.source == id {
                &r.target
            } else if &r.target == id {
                &r.source
            } else {
                continue;
            };
            if seen.insert(other) {
                out.push(other);
            }
        }
        out
    }

    /// Adds a `related` edge between every pair of concepts whose embeddings
    /// have cosine similarity at least `threshold` and that are not already
    /// linked by any relation. Looks only inside this tree, so the work is
    /// `n (n - 1) / 2` comparisons for `n` concepts.
    pub fn infer_relations_local(&mut self, table: &EmbeddingTable, threshold: f64) -> Result<InferenceStats> {
        if !(-1.0..=1.0).contains(&threshold) {
            return Err(Error::out_of_range("tau_c", threshold, "[-1, 1]"));
        }
        let mut vectors = Vec::with_capacity(self.concepts.len());
        for c in &self.concepts {
            let v = table
                .concept(&c.id)
                .ok_or_else(|| Error::MissingEmbedding(c.id.clone()))?;
            if linalg::norm(v) == 0.0 {
                return Err(Error::ZeroVector);
            }
            vectors.push(v);
        }

        let linked: HashSet<(ConceptId, ConceptId)> = self.relations.iter().map(Relation::unordered_pair).collect();
        let n = self.concepts.len();
        let mut fresh = BTreeSet::new();
        let mut comparisons = 0u64;
        for i in 0..n {
            for j in (i + 1)..n {
                comparisons += 1;
                if linalg::cosine(vectors[i], vectors[j])? < threshold {
                    continue;
                }
                let rel = Relation::new(
                    self.concepts[i].id.clone(),
                    self.concepts[j].id.clone(),
                    RelationKind::Related,
                );
                if !linked.contains(&rel.unordered_pair()) {
                    fresh.insert(rel);
                }
            }
        }
        let added = fresh.len();
        self.relations.extend(fresh);
        Ok(InferenceStats { comparisons, added })
    }
}

/// Number of unordered pairs among `n` items.
pub fn pair_count(n: usize) -> u64 {
    let n = n as u64;
    n * n.saturating_sub(1) / 2
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeForest {
    trees: Vec<KnowledgeTree>,
    comparison_counter: u64,
}

impl KnowledgeForest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trees(trees: impl IntoIterator<Item = KnowledgeTree>) -> Result<Self> {
        let mut forest = KnowledgeForest::new();
        for t in trees {
            forest.insert_tree(t)?;
        }
        Ok(forest)
    }

    pub fn trees(&self) -> &[KnowledgeTree] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn tree(&self, id: &TreeId) -> Option<&KnowledgeTree> {
        self.trees.iter().find(|t| &t.tree_id == id)
    }

    pub fn tree_index(&self, id: &TreeId) -> Option<usize> {
        self.trees.iter().position(|t| &t.tree_id == id)
    }

    /// Index of the tree holding `concept`, plus the concept itself.
    pub fn locate(&self, concept: &ConceptId) -> Option<(usize, &Concept)> {
        self.trees
            .iter()
            .enumerate()
            .find_map(|(k, t)| t.concept(concept).map(|c| (k, c)))
    }

    pub fn concept_count(&self) -> usize {
        self.trees.iter().map(KnowledgeTree::len).sum()
    }

    /// All concepts in forest order.
    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.trees.iter().flat_map(|t| t.concepts.iter())
    }

    pub fn insert_tree(&mut self, tree: KnowledgeTree) -> Result<()> {
        if self.tree(&tree.tree_id).is_some() {
            return Err(Error::DuplicateTreeId(tree.tree_id));
        }
        if let Some(c) = tree.concepts.iter().find(|c| self.locate(&c.id).is_some()) {
            return Err(Error::DuplicateConceptId(c.id.clone()));
        }
        self.trees.push(tree);
        Ok(())
    }

    /// Removes a tree and returns it with the index it occupied.
    pub fn remove_tree(&mut self, id: &TreeId) -> Result<(usize, KnowledgeTree)> {
        let idx = self.tree_index(id).ok_or_else(|| Error::TreeNotFound(id.clone()))?;
        Ok((idx, self.trees.remove(idx)))
    }

    pub fn infer_relations_local(
        &mut self,
        id: &TreeId,
        table: &EmbeddingTable,
        threshold: f64,
    ) -> Result<InferenceStats> {
        let idx = self.tree_index(id).ok_or_else(|| Error::TreeNotFound(id.clone()))?;
        let stats = self.trees[idx].infer_relations_local(table, threshold)?;
        self.comparison_counter += stats.comparisons;
        Ok(stats)
    }

    /// Runs local inference over every tree. Fails before touching anything
    /// if some concept lacks a usable embedding.
    pub fn infer_all_relations(&mut self, table: &EmbeddingTable, threshold: f64) -> Result<InferenceStats> {
        for c in self.concepts() {
            let v = table
                .concept(&c.id)
                .ok_or_else(|| Error::MissingEmbedding(c.id.clone()))?;
            if linalg::norm(v) == 0.0 {
                return Err(Error::ZeroVector);
            }
        }
        let mut total = InferenceStats::default();
        for tree in &mut self.trees {
            let s = tree.infer_relations_local(table, threshold)?;
            self.comparison_counter += s.comparisons;
            total.comparisons += s.comparisons;
            total.added += s.added;
        }
        Ok(total)
    }

    pub fn pair_comparison_count(&self) -> u64 {
        self.comparison_counter
    }

    /// Comparisons one local pass over the forest performs.
    pub fn local_pair_count(&self) -> u64 {
        self.trees.iter().map(|t| pair_count(t.len())).sum()
    }

    /// Comparisons a single global pass over the flattened concept set
    /// would perform.
    pub fn flat_pair_count(&self) -> u64 {
        pair_count(self.concept_count())
    }

    pub(crate) fn set_comparison_counter(&mut self, value: u64) {
        self.comparison_counter = value;
    }
}
