//! File formats: forest, profile and template documents, and digested
//! engine snapshots.
//!
//! Every document is JSON with a `format_version` field. Serialization is
//! canonical: struct fields in declaration order, maps sorted by key and
//! floats in shortest round-trip form, so equal values give equal bytes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingTable, Triple};
use crate::engine::{EngineConfig, EngineState};
use crate::error::{Error, Result};
use crate::forest::{Concept, ConceptId, KnowledgeForest, KnowledgeTree, Relation, RelationKind, TreeId};
use crate::profile::ProfileRecord;
use crate::prompt::PromptTemplate;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDocument {
    pub id: ConceptId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ConceptId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationDocument {
    pub source: ConceptId,
    pub target: ConceptId,
    pub kind: RelationKind,
}

/// One tree. Hierarchy edges come from `parent` fields only; `relations`
/// holds the other within-tree links.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDocument {
    pub tree_id: TreeId,
    pub root: ConceptId,
    pub concepts: Vec<ConceptDocument>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<RelationDocument>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestDocument {
    pub format_version: u32,
    pub trees: Vec<TreeDocument>,
    #[serde(default)]
    pub triples: Vec<Triple>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

/// Parses JSON, checking `format_version` before the full schema so that
/// newer documents fail with a version error rather than a field error.
fn parse_versioned<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let probe: VersionProbe = serde_json::from_slice(bytes).map_err(json_error)?;
    match probe.format_version {
        Some(FORMAT_VERSION) => serde_json::from_slice(bytes).map_err(json_error),
        Some(v) => Err(Error::UnsupportedVersion(v)),
        None => Err(Error::Document {
            location: "format_version".into(),
            detail: "missing field `format_version`".into(),
        }),
    }
}

fn json_error(e: serde_json::Error) -> Error {
    let detail = e.to_string();
    // serde_json appends " at line L column C"; keep the location separate.
    let detail = match detail.rfind(" at line ") {
        Some(i) => detail[..i].to_owned(),
        None => detail,
    };
    Error::Document {
        location: format!("line {}, column {}", e.line(), e.column()),
        detail,
    }
}

fn to_canonical<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("document types always serialize");
    out.push(b'\n');
    out
}

impl TreeDocument {
    pub fn from_tree(tree: &KnowledgeTree) -> Self {
        TreeDocument {
            tree_id: tree.tree_id().clone(),
            root: tree.root().clone(),
            concepts: tree
                .concepts()
                .iter()
                .map(|c| ConceptDocument {
                    id: c.id.clone(),
                    name: c.name.clone(),
                    parent: tree.parent(&c.id).cloned(),
                    attributes: c.attributes.clone(),
                    label: c.label.clone(),
                })
                .collect(),
            relations: tree
                .relations()
                .iter()
                .filter(|r| r.kind != RelationKind::Hierarchy)
                .map(|r| RelationDocument {
                    source: r.source.clone(),
                    target: r.target.clone(),
                    kind: r.kind.clone(),
                })
                .collect(),
        }
    }

    /// Builds the tree. `path` prefixes field locations in errors.
    pub fn to_tree(&self, path: &str) -> Result<KnowledgeTree> {
        let ids: HashSet<&ConceptId> = self.concepts.iter().map(|c| &c.id).collect();
        let parents: HashMap<&ConceptId, &ConceptId> = self
            .concepts
            .iter()
            .filter_map(|c| c.parent.as_ref().map(|p| (&c.id, p)))
            .collect();
        for (i, c) in self.concepts.iter().enumerate() {
            if let Some(p) = &c.parent {
                if !ids.contains(p) {
                    return Err(Error::Document {
                        location: format!("{path}.concepts[{i}].parent"),
                        detail: format!("unknown concept `{p}`"),
                    });
                }
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.kind == RelationKind::Hierarchy {
                return Err(Error::Document {
                    location: format!("{path}.relations[{i}].kind"),
                    detail: "hierarchy edges are declared with `parent` fields".into(),
                });
            }
            for (field, end) in [("source", &r.source), ("target", &r.target)] {
                if !ids.contains(end) {
                    return Err(Error::Document {
                        location: format!("{path}.relations[{i}].{field}"),
                        detail: format!("unknown concept `{end}`"),
                    });
                }
            }
        }
        if let Some(cycle) = find_parent_cycle(&self.concepts, &parents) {
            return Err(Error::MalformedHierarchy {
                tree: self.tree_id.clone(),
                detail: format!("hierarchy cycle {cycle}"),
            });
        }

        let concepts = self
            .concepts
            .iter()
            .map(|c| Concept {
                id: c.id.clone(),
                name: c.name.clone(),
                attributes: c.attributes.clone(),
                label: c.label.clone(),
            })
            .collect();
        let relations = self
            .concepts
            .iter()
            .filter_map(|c| c.parent.as_ref().map(|p| Relation::hierarchy(p.clone(), c.id.clone())))
            .chain(
                self.relations
                    .iter()
                    .map(|r| Relation::new(r.source.clone(), r.target.clone(), r.kind.clone())),
            )
            .collect();
        KnowledgeTree::new(self.tree_id.clone(), self.root.clone(), concepts, relations)
    }
}

/// Follows parent links from every concept; reports the first loop found
/// as `a -> b -> a` (parent order).
fn find_parent_cycle(concepts: &[ConceptDocument], parents: &HashMap<&ConceptId, &ConceptId>) -> Option<String> {
    let mut done: HashSet<&ConceptId> = HashSet::new();
    for c in concepts {
        let mut path: Vec<&ConceptId> = Vec::new();
        let mut cur = &c.id;
        loop {
            if done.contains(cur) {
                break;
            }
            if let Some(pos) = path.iter().position(|x| *x == cur) {
                let mut names: Vec<String> = path[pos..].iter().map(|x| x.to_string()).collect();
                names.push(cur.to_string());
                return Some(names.join(" -> "));
            }
            path.push(cur);
            match parents.get(cur) {
                Some(p) => cur = p,
                None => break,
            }
        }
        done.extend(path);
    }
    None
}

impl ForestDocument {
    pub fn from_forest(forest: &KnowledgeForest, triples: &[Triple]) -> Self {
        ForestDocument {
            format_version: FORMAT_VERSION,
            trees: forest.trees().iter().map(TreeDocument::from_tree).collect(),
            triples: triples.to_vec(),
        }
    }

    /// Builds the forest and checks that every triple references known
    /// concepts.
    pub fn to_forest(&self) -> Result<(KnowledgeForest, Vec<Triple>)> {
        let mut forest = KnowledgeForest::new();
        for (i, t) in self.trees.iter().enumerate() {
            forest.insert_tree(t.to_tree(&format!("trees[{i}]"))?)?;
        }
        for (i, t) in self.triples.iter().enumerate() {
            for (field, end) in [("source", &t.source), ("target", &t.target)] {
                if forest.locate(end).is_none() {
                    return Err(Error::Document {
                        location: format!("triples[{i}].{field}"),
                        detail: format!("unknown concept `{end}`"),
                    });
                }
            }
        }
        Ok((forest, self.triples.clone()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical(self)
    }
}

/// Parses and fully validates a forest document.
pub fn parse_forest_document(bytes: &[u8]) -> Result<ForestDocument> {
    let doc: ForestDocument = parse_versioned(bytes)?;
    doc.to_forest()?;
    Ok(doc)
}

pub fn load_forest(bytes: &[u8]) -> Result<(KnowledgeForest, Vec<Triple>)> {
    parse_versioned::<ForestDocument>(bytes)?.to_forest()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesDocument {
    pub format_version: u32,
    pub profiles: Vec<ProfileRecord>,
}

impl ProfilesDocument {
    pub fn new(profiles: Vec<ProfileRecord>) -> Self {
        ProfilesDocument {
            format_version: FORMAT_VERSION,
            profiles,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical(self)
    }
}

pub fn parse_profiles(bytes: &[u8]) -> Result<ProfilesDocument> {
    let doc: ProfilesDocument = parse_versioned(bytes)?;
    let mut seen = HashSet::new();
    for (i, p) in doc.profiles.iter().enumerate() {
        if !seen.insert(&p.user_id) {
            return Err(Error::Document {
                location: format!("profiles[{i}].user_id"),
                detail: format!("duplicate user `{}`", p.user_id),
            });
        }
    }
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesDocument {
    pub format_version: u32,
    pub templates: Vec<PromptTemplate>,
}

impl TemplatesDocument {
    pub fn new(templates: Vec<PromptTemplate>) -> Self {
        TemplatesDocument {
            format_version: FORMAT_VERSION,
            templates,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical(self)
    }
}

pub fn parse_templates(bytes: &[u8]) -> Result<TemplatesDocument> {
    let doc: TemplatesDocument = parse_versioned(bytes)?;
    let mut seen = HashSet::new();
    for (i, t) in doc.templates.iter().enumerate() {
        if !seen.insert(t.id()) {
            return Err(Error::Document {
                location: format!("templates[{i}].id"),
                detail: format!("duplicate template `{}`", t.id()),
            });
        }
    }
    Ok(doc)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotBody {
    format_version: u32,
    forest: ForestDocument,
    comparison_counter: u64,
    table: Option<EmbeddingTable>,
    profiles: Vec<ProfileRecord>,
    templates: Vec<PromptTemplate>,
    config: EngineConfig,
}

const DIGEST_PREFIX: &str = "sha256:";

fn digest_hex(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

/// Canonical JSON body followed by a `sha256:<hex>` trailer line over the
/// body bytes.
pub fn save_snapshot(state: &EngineState) -> Vec<u8> {
    let body = SnapshotBody {
        format_version: FORMAT_VERSION,
        forest: ForestDocument::from_forest(&state.forest, &state.triples),
        comparison_counter: state.forest.pair_comparison_count(),
        table: state.table.clone(),
        profiles: state.profiles.values().cloned().collect(),
        templates: state.templates.clone(),
        config: state.config.clone(),
    };
    let mut out = serde_json::to_vec(&body).expect("snapshot always serializes");
    out.push(b'\n');
    let digest = digest_hex(&out);
    out.extend_from_slice(DIGEST_PREFIX.as_bytes());
    out.extend_from_slice(digest.as_bytes());
    out.push(b'\n');
    out
}

pub fn load_snapshot(bytes: &[u8]) -> Result<EngineState> {
    let trimmed = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let split = trimmed
        .iter()
        .rposition(|&b| b == b'\n')
        .ok_or_else(|| Error::Corrupt("missing digest trailer".into()))?;
    let (body, trailer) = (&bytes[..=split], &trimmed[split + 1..]);
    let trailer = std::str::from_utf8(trailer).map_err(|_| Error::Corrupt("digest trailer is not UTF-8".into()))?;
    let expected = trailer
        .strip_prefix(DIGEST_PREFIX)
        .ok_or_else(|| Error::Corrupt("missing digest trailer".into()))?;
    let actual = digest_hex(body);
    if expected != actual {
        return Err(Error::Corrupt(format!(
            "digest mismatch: recorded {expected}, computed {actual}"
        )));
    }
    let body: SnapshotBody = parse_versioned(body)?;
    let (mut forest, triples) = body.forest.to_forest()?;
    forest.set_comparison_counter(body.comparison_counter);
    if let Some(table) = &body.table {
        table.validate()?;
    }
    let profiles = body.profiles.into_iter().map(|p| (p.user_id.clone(), p)).collect();
    Ok(EngineState {
        forest,
        triples,
        table: body.table,
        profiles,
        templates: body.templates,
        config: body.config,
    })
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
