//! Goal / explanation / feedback prompt templates with typed `[Slot]`
//! markers, task-driven slot binding and reward-based template selection.
//!
//! Slot syntax: `[Name]` is a slot; `[[` and `]]` are literal brackets.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{ConceptId, KnowledgeForest, Relation, TreeId};
use crate::profile::ProfileRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotKind {
    Concept,
    ConceptList,
    ProblemType,
    UserAttribute,
    FreeText,
}

impl fmt::Display for SlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlotKind::Concept => "concept",
            SlotKind::ConceptList => "concept-list",
            SlotKind::ProblemType => "problem-type",
            SlotKind::UserAttribute => "user-attribute",
            SlotKind::FreeText => "free-text",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

/// Text with embedded slot markers, kept in parsed form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlottedText {
    segments: Vec<Segment>,
}

impl SlottedText {
    pub fn parse(raw: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let bytes = raw.as_bytes();
        let mut i = 0;
        while i < raw.len() {
            let rest = &raw[i..];
            if rest.starts_with("[[") {
                literal.push('[');
                i += 2;
            } else if rest.starts_with("]]") {
                literal.push(']');
                i += 2;
            } else if bytes[i] == b'[' {
                let close = rest.find(']').ok_or_else(|| Error::TemplateSyntax {
                    offset: i,
                    detail: "unterminated slot".into(),
                })?;
                let name = &rest[1..close];
                if name.is_empty() || name.contains('[') || name.trim() != name {
                    return Err(Error::TemplateSyntax {
                        offset: i,
                        detail: format!("invalid slot name `{name}`"),
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(name.to_owned()));
                i += close + 1;
            } else if bytes[i] == b']' {
                return Err(Error::TemplateSyntax {
                    offset: i,
                    detail: "unmatched `]` (write `]]` for a literal bracket)".into(),
                });
            } else {
                let ch = rest.chars().next().expect("in bounds");
                literal.push(ch);
                i += ch.len_utf8();
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(SlottedText { segments })
    }

    /// Canonical source form, with literal brackets escaped.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(&s.replace('[', "[[").replace(']', "]]")),
                Segment::Slot(name) => {
                    out.push('[');
                    out.push_str(name);
                    out.push(']');
                }
            }
        }
        out
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(n) => Some(n.as_str()),
            Segment::Literal(_) => None,
        })
    }

    fn render(&self, values: &BTreeMap<String, String>) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Literal(l) => l.as_str(),
                Segment::Slot(n) => values[n].as_str(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateSource {
    id: String,
    goal: String,
    explanation: String,
    feedback: String,
    slots: BTreeMap<String, SlotKind>,
}

/// A (goal, explanation, feedback) template plus its slot declarations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TemplateSource", into = "TemplateSource")]
pub struct PromptTemplate {
    template_id: String,
    goal: SlottedText,
    explanation: SlottedText,
    feedback: SlottedText,
    slots: BTreeMap<String, SlotKind>,
}

impl TryFrom<TemplateSource> for PromptTemplate {
    type Error = Error;

    fn try_from(src: TemplateSource) -> Result<Self> {
        PromptTemplate::new(src.id, &src.goal, &src.explanation, &src.feedback, src.slots)
    }
}

impl From<PromptTemplate> for TemplateSource {
    fn from(t: PromptTemplate) -> Self {
        TemplateSource {
            goal: t.goal.to_source(),
            explanation: t.explanation.to_source(),
            feedback: t.feedback.to_source(),
            id: t.template_id,
            slots: t.slots,
        }
    }
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        goal: &str,
        explanation: &str,
        feedback: &str,
        slots: BTreeMap<String, SlotKind>,
    ) -> Result<Self> {
        let template_id = id.into();
        let wrap = |e: Error| Error::Template {
            template: template_id.clone(),
            source: Box::new(e),
        };
        let goal = SlottedText::parse(goal).map_err(wrap)?;
        let explanation = SlottedText::parse(explanation).map_err(wrap)?;
        let feedback = SlottedText::parse(feedback).map_err(wrap)?;
        for text in [&goal, &explanation, &feedback] {
            if let Some(undeclared) = text.slots().find(|s| !slots.contains_key(*s)) {
                return Err(wrap(Error::UndeclaredSlotInText(undeclared.to_owned())));
            }
        }
        Ok(PromptTemplate {
            template_id,
            goal,
            explanation,
            feedback,
            slots,
        })
    }

    pub fn id(&self) -> &str {
        &self.template_id
    }

    pub fn slots(&self) -> &BTreeMap<String, SlotKind> {
        &self.slots
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum SlotValue {
    Concept(String),
    ConceptList(Vec<String>),
    ProblemType(String),
    UserAttribute(String),
    FreeText(String),
}

impl SlotValue {
    pub fn kind(&self) -> SlotKind {
        match self {
            SlotValue::Concept(_) => SlotKind::Concept,
            SlotValue::ConceptList(_) => SlotKind::ConceptList,
            SlotValue::ProblemType(_) => SlotKind::ProblemType,
            SlotValue::UserAttribute(_) => SlotKind::UserAttribute,
            SlotValue::FreeText(_) => SlotKind::FreeText,
        }
    }

    fn render(&self) -> String {
        match self {
            SlotValue::ConceptList(items) => join_list(items),
            SlotValue::Concept(s)
            | SlotValue::ProblemType(s)
            | SlotValue::UserAttribute(s)
            | SlotValue::FreeText(s) => s.clone(),
        }
    }
}

/// `a`, `a and b`, `a, b and c`.
pub fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotBinding {
    pub value: SlotValue,
    /// Where the value came from, e.g. `task.problem_type`.
    pub source: String,
}

pub type SlotValues = BTreeMap<String, SlotBinding>;

/// Convenience for hand-built bindings.
pub fn bind(values: impl IntoIterator<Item = (impl Into<String>, SlotValue)>) -> SlotValues {
    values
        .into_iter()
        .map(|(k, v)| {
            (
                k.into(),
                SlotBinding {
                    value: v,
                    source: "caller".into(),
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotProvenance {
    pub source: String,
    pub value: String,
}

/// A fully rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub goal: String,
    pub explanation: String,
    pub feedback: String,
    pub provenance: BTreeMap<String, SlotProvenance>,
}

impl PromptText {
    pub fn char_count(&self) -> usize {
        self.goal.chars().count() + self.explanation.chars().count() + self.feedback.chars().count()
    }
}

/// Substitutes every declared slot. The binding must cover exactly the
/// declared slots, each with a value of the declared kind.
pub fn instantiate(template: &PromptTemplate, values: &SlotValues) -> Result<PromptText> {
    if let Some(extra) = values.keys().find(|k| !template.slots.contains_key(*k)) {
        return Err(Error::UndeclaredSlot(extra.clone()));
    }
    let mut rendered = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for (name, kind) in &template.slots {
        let binding = values.get(name).ok_or_else(|| Error::MissingSlot(name.clone()))?;
        if binding.value.kind() != *kind {
            return Err(Error::SlotKindMismatch {
                slot: name.clone(),
                expected: kind.to_string(),
                found: binding.value.kind().to_string(),
            });
        }
        if let SlotValue::ConceptList(items) = &binding.value {
            if items.is_empty() {
                return Err(Error::InvalidSlotValue {
                    slot: name.clone(),
                    detail: "empty concept list".into(),
                });
            }
        }
        let text = binding.value.render();
        rendered.insert(name.clone(), text.clone());
        provenance.insert(
            name.clone(),
            SlotProvenance {
                source: binding.source.clone(),
                value: text,
            },
        );
    }
    Ok(PromptText {
        goal: template.goal.render(&rendered),
        explanation: template.explanation.render(&rendered),
        feedback: template.feedback.render(&rendered),
        provenance,
    })
}

/// A pluggable prompt-quality score.
pub trait Reward {
    fn score(&self, text: &PromptText) -> f64;
}

impl<F: Fn(&PromptText) -> f64> Reward for F {
    fn score(&self, text: &PromptText) -> f64 {
        self(text)
    }
}

/// Slot coverage minus a penalty for overlong prompts; lies in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReward {
    pub max_chars: usize,
}

impl Default for CoverageReward {
    fn default() -> Self {
        CoverageReward { max_chars: 600 }
    }
}

impl Reward for CoverageReward {
    fn score(&self, text: &PromptText) -> f64 {
        let chars = text.char_count();
        let coverage = if text.provenance.is_empty() {
            if chars > 0 {
                1.0
            } else {
                0.0
            }
        } else {
            let filled = text.provenance.values().filter(|p| !p.value.trim().is_empty()).count();
            filled as f64 / text.provenance.len() as f64
        };
        let max = self.max_chars.max(1) as f64;
        let penalty = if chars as f64 > max {
            ((chars as f64 - max) / max).min(1.0)
        } else {
            0.0
        };
        coverage - penalty
    }
}

pub fn score_prompt(text: &PromptText, reward: &dyn Reward) -> f64 {
    reward.score(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub template_id: String,
    pub prompt: PromptText,
    pub score: f64,
}

/// Instantiates every candidate with the same binding and keeps the best
/// scoring one (earliest wins ties).
pub fn select_best_template(
    candidates: &[PromptTemplate],
    values: &SlotValues,
    reward: &dyn Reward,
) -> Result<Selection> {
    select_best_by(candidates, |_| Ok(values.clone()), reward)
}

/// Like [`select_best_template`] but binds slots per template.
pub fn select_best_by(
    candidates: &[PromptTemplate],
    mut bind: impl FnMut(&PromptTemplate) -> Result<SlotValues>,
    reward: &dyn Reward,
) -> Result<Selection> {
    let mut best: Option<Selection> = None;
    for t in candidates {
        let wrap = |e: Error| Error::Template {
            template: t.template_id.clone(),
            source: Box::new(e),
        };
        let values = bind(t).map_err(wrap)?;
        let prompt = instantiate(t, &values).map_err(wrap)?;
        let score = reward.score(&prompt);
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(Selection {
                template_id: t.template_id.clone(),
                prompt,
                score,
            });
        }
    }
    best.ok_or(Error::NoCandidates)
}

fn default_radius() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub focus_concepts: Vec<ConceptId>,
    pub problem_type: String,
    #[serde(default = "default_radius")]
    pub hop_radius: usize,
    /// Values for free-text slots, keyed by slot name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub text: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubForestConcept {
    pub id: ConceptId,
    pub name: String,
    pub tree_id: TreeId,
    pub distance: usize,
}

/// Concepts within `hop_radius` relation hops of any focus concept, with
/// the relations among them. Concepts are listed in forest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubForest {
    pub concepts: Vec<SubForestConcept>,
    pub relations: Vec<Relation>,
}

impl SubForest {
    pub fn ids(&self) -> BTreeSet<ConceptId> {
        self.concepts.iter().map(|c| c.id.clone()).collect()
    }
}

pub fn retrieve_task_subforest(forest: &KnowledgeForest, task: &TaskSpec) -> Result<SubForest> {
    if task.focus_concepts.is_empty() {
        return Err(Error::InvalidConfig("a task needs at least one focus concept".into()));
    }
    let mut trees = BTreeSet::new();
    for c in &task.focus_concepts {
        let (k, _) = forest.locate(c).ok_or_else(|| Error::ConceptNotFound(c.clone()))?;
        trees.insert(k);
    }

    let mut distance: HashMap<&ConceptId, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    for c in &task.focus_concepts {
        if !distance.contains_key(c) {
            distance.insert(c, 0);
            queue.push_back(c);
        }
    }
    while let Some(c) = queue.pop_front() {
        let d = distance[c];
        if d == task.hop_radius {
            continue;
        }
        let (k, _) = forest.locate(c).expect("visited concepts exist");
        for n in forest.trees()[k].neighbors(c) {
            if !distance.contains_key(n) {
                distance.insert(n, d + 1);
                queue.push_back(n);
            }
        }
    }

    let mut concepts = Vec::new();
    let mut relations = Vec::new();
    for &k in &trees {
        let tree = &forest.trees()[k];
        for c in tree.concepts() {
            if let Some(&d) = distance.get(&c.id) {
                concepts.push(SubForestConcept {
                    id: c.id.clone(),
                    name: c.name.clone(),
                    tree_id: tree.tree_id().clone(),
                    distance: d,
                });
            }
        }
        relations.extend(
            tree.relations()
                .iter()
                .filter(|r| distance.contains_key(&r.source) && distance.contains_key(&r.target))
                .cloned(),
        );
    }
    Ok(SubForest { concepts, relations })
}

/// Fills a template's declared slots from a task, its sub-forest and
/// (optionally) a learner profile.
///
/// * concept: name of the first focus concept
/// * concept-list: the other sub-forest concepts, nearest first
/// * problem-type: the task's problem type
/// * user-attribute: the profile attribute named like the slot
///   (exact, then lower-case, then snake_case)
/// * free-text: `task.text[slot]`
pub fn bind_task_slots(
    template: &PromptTemplate,
    forest: &KnowledgeForest,
    sub: &SubForest,
    task: &TaskSpec,
    profile: Option<&ProfileRecord>,
) -> Result<SlotValues> {
    let mut out = SlotValues::new();
    for (name, kind) in template.slots() {
        let binding = match kind {
            SlotKind::Concept => {
                let id = &task.focus_concepts[0];
                let (_, c) = forest.locate(id).ok_or_else(|| Error::ConceptNotFound(id.clone()))?;
                SlotBinding {
                    value: SlotValue::Concept(c.name.clone()),
                    source: format!("concept:{id}"),
                }
            }
            SlotKind::ConceptList => {
                let first = &task.focus_concepts[0];
                let mut others: Vec<&SubForestConcept> = sub.concepts.iter().filter(|c| &c.id != first).collect();
                others.sort_by_key(|c| c.distance);
                SlotBinding {
                    value: SlotValue::ConceptList(others.iter().map(|c| c.name.clone()).collect()),
                    source: format!("subforest:radius={}", task.hop_radius),
                }
            }
            SlotKind::ProblemType => SlotBinding {
                value: SlotValue::ProblemType(task.problem_type.clone()),
                source: "task.problem_type".into(),
            },
            SlotKind::UserAttribute => {
                let profile = profile.ok_or_else(|| Error::InvalidSlotValue {
                    slot: name.clone(),
                    detail: "no learner profile supplied".into(),
                })?;
                let (key, value) =
                    attribute_for_slot(&profile.attributes, name).ok_or_else(|| Error::InvalidSlotValue {
                        slot: name.clone(),
                        detail: format!("user `{}` has no matching attribute", profile.user_id),
                    })?;
                SlotBinding {
                    value: SlotValue::UserAttribute(value.clone()),
                    source: format!("profile:{}.{key}", profile.user_id),
                }
            }
            SlotKind::FreeText => {
                let text = task.text.get(name).ok_or_else(|| Error::MissingSlot(name.clone()))?;
                SlotBinding {
                    value: SlotValue::FreeText(text.clone()),
                    source: format!("task.text.{name}"),
                }
            }
        };
        out.insert(name.clone(), binding);
    }
    Ok(out)
}

fn attribute_for_slot<'a>(attrs: &'a BTreeMap<String, String>, slot: &str) -> Option<(&'a String, &'a String)> {
    let snake: String = slot
        .chars()
        .enumerate()
        .flat_map(|(i, ch)| {
            let sep = (i > 0 && ch.is_uppercase()).then_some('_');
            sep.into_iter().chain(ch.to_lowercase())
        })
        .collect();
    [slot.to_owned(), slot.to_lowercase(), snake]
        .iter()
        .find_map(|k| attrs.get_key_value(k.as_str()))
}

/// Retrieves the task's sub-forest, binds each candidate and returns the
/// highest scoring prompt.
pub fn prompt_for_task(
    forest: &KnowledgeForest,
    task: &TaskSpec,
    candidates: &[PromptTemplate],
    profile: Option<&ProfileRecord>,
    reward: &dyn Reward,
) -> Result<Selection> {
    let sub = retrieve_task_subforest(forest, task)?;
    select_best_by(candidates, |t| bind_task_slots(t, forest, &sub, task, profile), reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::{Concept, KnowledgeTree};

    fn goal_template() -> PromptTemplate {
        PromptTemplate::new(
            "goal",
            "Acquire knowledge about [Concept] and its relations to [RelatedConcepts] to solve problems of type [ProblemType].",
            "",
            "",
            [
                ("Concept".to_string(), SlotKind::Concept),
                ("RelatedConcepts".to_string(), SlotKind::ConceptList),
                ("ProblemType".to_string(), SlotKind::ProblemType),
            ]
            .into(),
        )
        .unwrap()
    }

    #[test]
    fn single_slot_substitution() {
        let t = PromptTemplate::new(
            "t",
            "Acquire knowledge about [Concept]",
            "",
            "",
            [("Concept".to_string(), SlotKind::Concept)].into(),
        )
        .unwrap();
        let p = instantiate(
            &t,
            &bind([("Concept", SlotValue::Concept("dynamic programming".into()))]),
        )
        .unwrap();
        assert_eq!(p.goal, "Acquire knowledge about dynamic programming");
    }

    #[test]
    fn concept_list_joining() {
        let p = instantiate(
            &goal_template(),
            &bind([
                ("Concept", SlotValue::Concept("dynamic programming".into())),
                (
                    "RelatedConcepts",
                    SlotValue::ConceptList(vec!["recursion".into(), "memoization".into()]),
                ),
                ("ProblemType", SlotValue::ProblemType("optimization".into())),
            ]),
        )
        .unwrap();
        assert_eq!(
            p.goal,
            "Acquire knowledge about dynamic programming and its relations to recursion and memoization to solve problems of type optimization."
        );
        assert_eq!(join_list(&["a".into(), "b".into(), "c".into()]), "a, b and c");
    }

    #[test]
    fn slot_errors() {
        let t = goal_template();
        let partial = bind([
            ("Concept", SlotValue::Concept("x".into())),
            ("RelatedConcepts", SlotValue::ConceptList(vec!["y".into()])),
        ]);
        assert_eq!(
            instantiate(&t, &partial).unwrap_err(),
            Error::MissingSlot("ProblemType".into())
        );

        let mut extra = partial.clone();
        extra.extend(bind([
            ("ProblemType", SlotValue::ProblemType("p".into())),
            ("Bogus", SlotValue::FreeText("z".into())),
        ]));
        assert_eq!(
            instantiate(&t, &extra).unwrap_err(),
            Error::UndeclaredSlot("Bogus".into())
        );

        let mut wrong = partial;
        wrong.extend(bind([("ProblemType", SlotValue::Concept("p".into()))]));
        assert!(matches!(instantiate(&t, &wrong), Err(Error::SlotKindMismatch { .. })));
    }

    #[test]
    fn syntax_and_declarations() {
        let t = PromptTemplate::new("e", "a [[literal]] b", "", "", BTreeMap::new()).unwrap();
        let p = instantiate(&t, &SlotValues::new()).unwrap();
        assert_eq!(p.goal, "a [literal] b");
        assert!(PromptTemplate::new("e", "oops [X", "", "", BTreeMap::new()).is_err());
        assert!(PromptTemplate::new("e", "oops ]", "", "", BTreeMap::new()).is_err());
        assert!(PromptTemplate::new("e", "[]", "", "", BTreeMap::new()).is_err());
        let err = PromptTemplate::new("e", "[X]", "", "", BTreeMap::new()).unwrap_err();
        assert_eq!(err.code(), "undeclared_slot_in_text");
    }

    #[test]
    fn template_json_round_trip() {
        let t = goal_template();
        let json = serde_json::to_string(&t).unwrap();
        let back: PromptTemplate = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    fn text(goal: &str, slots: &[(&str, &str)]) -> PromptText {
        PromptText {
            goal: goal.into(),
            explanation: String::new(),
            feedback: String::new(),
            provenance: slots
                .iter()
                .map(|(k, v)| {
                    (
                        k.to_string(),
                        SlotProvenance {
                            source: "caller".into(),
                            value: v.to_string(),
                        },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn default_reward() {
        let r = CoverageReward::default();
        assert_eq!(r.score(&text("learn dp", &[("Concept", "dp")])), 1.0);
        assert!(r.score(&text("", &[])) <= 0.0);
        let long = "x".repeat(1200);
        assert_eq!(r.score(&text(&long, &[("C", "x")])), 0.0);
        let constant = |_: &PromptText| 0.7;
        assert_eq!(score_prompt(&text("anything", &[]), &constant), 0.7);
    }

    #[test]
    fn selection_rules() {
        let mk = |id: &str, goal: &str| PromptTemplate::new(id, goal, "", "", BTreeMap::new()).unwrap();
        let only = [mk("a", "A")];
        let r = CoverageReward::default();
        assert_eq!(
            select_best_template(&only, &SlotValues::new(), &r).unwrap().template_id,
            "a"
        );

        let two = [mk("a", "low"), mk("b", "high")];
        let by_goal = |p: &PromptText| if p.goal == "high" { 0.9 } else { 0.2 };
        let s = select_best_template(&two, &SlotValues::new(), &by_goal).unwrap();
        assert_eq!((s.template_id.as_str(), s.score), ("b", 0.9));

        let flat = |_: &PromptText| 0.5;
        assert_eq!(
            select_best_template(&two, &SlotValues::new(), &flat)
                .unwrap()
                .template_id,
            "a"
        );
        assert_eq!(
            select_best_template(&[], &SlotValues::new(), &flat).unwrap_err(),
            Error::NoCandidates
        );

        let needs_slot =
            PromptTemplate::new("n", "[X]", "", "", [("X".to_string(), SlotKind::FreeText)].into()).unwrap();
        match select_best_template(&[mk("a", "A"), needs_slot], &SlotValues::new(), &flat).unwrap_err() {
            Error::Template { template, source } => {
                assert_eq!(template, "n");
                assert_eq!(*source, Error::MissingSlot("X".into()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn chain_forest() -> KnowledgeForest {
        let tree = KnowledgeTree::new(
            "t",
            "root",
            vec![
                Concept::new("root", "Root"),
                Concept::new("a", "A"),
                Concept::new("b", "B"),
            ],
            vec![Relation::hierarchy("root", "a"), Relation::hierarchy("a", "b")],
        )
        .unwrap();
        let other = KnowledgeTree::new("u", "x", vec![Concept::new("x", "X")], vec![]).unwrap();
        KnowledgeForest::from_trees([tree, other]).unwrap()
    }

    fn task(focus: &[&str], radius: usize) -> TaskSpec {
        TaskSpec {
            task_id: "task".into(),
            focus_concepts: focus.iter().map(|c| ConceptId::from(*c)).collect(),
            problem_type: "optimization".into(),
            hop_radius: radius,
            text: BTreeMap::new(),
        }
    }

    #[test]
    fn subforest_radius() {
        let f = chain_forest();
        let ids = |r| retrieve_task_subforest(&f, &task(&["root"], r)).unwrap().ids();
        assert_eq!(ids(0), ["root".into()].into());
        assert_eq!(ids(1), ["root".into(), "a".into()].into());
        assert_eq!(ids(2).len(), 3);
        let sub = retrieve_task_subforest(&f, &task(&["root"], 1)).unwrap();
        assert_eq!(sub.relations, vec![Relation::hierarchy("root", "a")]);
        assert_eq!(
            retrieve_task_subforest(&f, &task(&["nope"], 1)).unwrap_err(),
            Error::ConceptNotFound("nope".into())
        );
    }

    #[test]
    fn task_binding() {
        let f = chain_forest();
        let t = PromptTemplate::new(
            "g",
            "Study [Concept] with [Related] for [ProblemType], given your interest in [Interest].",
            "",
            "",
            [
                ("Concept".to_string(), SlotKind::Concept),
                ("Related".to_string(), SlotKind::ConceptList),
                ("ProblemType".to_string(), SlotKind::ProblemType),
                ("Interest".to_string(), SlotKind::UserAttribute),
            ]
            .into(),
        )
        .unwrap();
        let profile = ProfileRecord {
            user_id: "u1".into(),
            attributes: [("interest".to_string(), "algorithms".to_string())].into(),
            behaviors: BTreeMap::new(),
            trajectory: vec![],
            mastery: Default::default(),
        };
        let s = prompt_for_task(
            &f,
            &task(&["a"], 1),
            std::slice::from_ref(&t),
            Some(&profile),
            &CoverageReward::default(),
        )
        .unwrap();
        assert_eq!(
            s.prompt.goal,
            "Study A with Root and B for optimization, given your interest in algorithms."
        );
        assert_eq!(s.prompt.provenance["Interest"].source, "profile:u1.interest");
        let err = prompt_for_task(&f, &task(&["a"], 1), &[t], None, &CoverageReward::default()).unwrap_err();
        assert_eq!(err.code(), "invalid_slot_value");
    }
}
