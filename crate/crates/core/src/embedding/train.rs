//! Full-batch gradient descent on
//! `triple + lambda_s · supervised + lambda_u · contrastive`.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gnn::{gnn_backward, gnn_forward, GnnLayerParams};
use super::loss::{contrastive_loss_grad, supervised_loss_grad, triple_loss_grad, Classifier};
use super::{pool, EmbeddingTable, TrainConfig};
use crate::error::{Error, Result};
use crate::forest::{ConceptId, KnowledgeForest, RelationKind, TreeId};
use crate::linalg::{self, Vector};

/// One element of the training set: `source --relation--> target`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub source: ConceptId,
    pub target: ConceptId,
    pub relation: RelationKind,
}

impl Triple {
    pub fn new(source: impl Into<ConceptId>, target: impl Into<ConceptId>, relation: RelationKind) -> Self {
        Triple {
            source: source.into(),
            target: target.into(),
            relation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triple: f64,
    pub supervised: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

impl EpochLoss {
    /// `epoch,total,triple,supervised,contrastive`
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            format_significant(self.loss.total, 6),
            format_significant(self.loss.triple, 6),
            format_significant(self.loss.supervised, 6),
            format_significant(self.loss.contrastive, 6),
        )
    }
}

/// Formats like C's `%.{digits}g`: fixed notation for moderate exponents,
/// scientific otherwise, trailing zeros trimmed.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s.to_owned()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}", trim(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    }
}

/// Trainable state. Concept vectors are the GNN input; with zero layers
/// they are also the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub nodes: Vec<Vector>,
    pub relations: Vec<Vector>,
    pub classifier: Classifier,
    pub gnn: Option<GnnLayerParams>,
}

impl Model {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.nodes.iter().for_each(|v| out.extend_from_slice(v));
        self.relations.iter().for_each(|v| out.extend_from_slice(v));
        out.extend_from_slice(&self.classifier.weights.data);
        out.extend_from_slice(&self.classifier.bias);
        if let Some(g) = &self.gnn {
            out.extend_from_slice(&g.self_weight.data);
            out.extend_from_slice(&g.msg_weight.data);
            out.extend_from_slice(&g.bias);
        }
        out
    }

    /// Overwrites every parameter from a vector laid out like [`Model::flatten`].
    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| {
            dst.iter_mut()
                .for_each(|x| *x = it.next().expect("flat vector too short"))
        };
        self.nodes.iter_mut().for_each(|v| fill(v));
        self.relations.iter_mut().for_each(|v| fill(v));
        fill(&mut self.classifier.weights.data);
        fill(&mut self.classifier.bias);
        if let Some(g) = &mut self.gnn {
            fill(&mut g.self_weight.data);
            fill(&mut g.msg_weight.data);
            fill(&mut g.bias);
        }
    }

    fn is_finite(&self) -> bool {
        linalg::is_finite(&self.flatten())
    }
}

/// A forest, a triple set and a config compiled into dense index form,
/// with corrupted tails drawn once up front so the objective is fixed.
#[derive(Debug, Clone)]
pub struct TrainingProblem {
    config: TrainConfig,
    node_ids: Vec<ConceptId>,
    tree_members: Vec<(TreeId, Vec<usize>)>,
    adjacency: Vec<Vec<usize>>,
    relation_kinds: Vec<RelationKind>,
    triples: Vec<(usize, usize, usize)>,
    negatives: Vec<Vec<usize>>,
    classes: Vec<String>,
    labeled: Vec<(usize, usize)>,
    edges: Vec<(usize, usize)>,
    denominators: Option<Vec<Vec<usize>>>,
}

const INIT_STREAM: u64 = 0;
const NEGATIVE_STREAM: u64 = 1;
const CONTRASTIVE_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl TrainingProblem {
    pub fn new(forest: &KnowledgeForest, triples: &[Triple], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let node_ids: Vec<ConceptId> = forest.concepts().map(|c| c.id.clone()).collect();
        let index: HashMap<&ConceptId, usize> = node_ids.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let lookup = |id: &ConceptId| index.get(id).copied().ok_or_else(|| Error::ConceptNotFound(id.clone()));

        let mut tree_members = Vec::with_capacity(forest.len());
        let mut adjacency = vec![Vec::new(); node_ids.len()];
        let mut edges = Vec::new();
        for tree in forest.trees() {
            let members = tree.concepts().iter().map(|c| index[&c.id]).collect();
            tree_members.push((tree.tree_id().clone(), members));
            for rel in tree.relations() {
                let (u, v) = (index[&rel.source], index[&rel.target]);
                edges.push((u, v));
                if !adjacency[u].contains(&v) {
                    adjacency[u].push(v);
                }
                if !adjacency[v].contains(&u) {
                    adjacency[v].push(u);
                }
            }
        }

        let relation_kinds: Vec<RelationKind> = triples
            .iter()
            .map(|t| t.relation.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let dense_triples = triples
            .iter()
            .map(|t| {
                let r = relation_kinds
                    .iter()
                    .position(|k| k == &t.relation)
                    .expect("kind collected above");
                Ok((lookup(&t.source)?, r, lookup(&t.target)?))
            })
            .collect::<Result<Vec<_>>>()?;

        let n = node_ids.len();
        let mut neg_rng = rng(config.seed, NEGATIVE_STREAM);
        let negatives = dense_triples
            .iter()
            .map(|&(_, _, tail)| {
                if n < 2 {
                    return Vec::new();
                }
                (0..config.negatives_per_edge)
                    .map(|_| {
                        let pick = neg_rng.gen_range(0..n - 1);
                        if pick >= tail {
                            pick + 1
                        } else {
                            pick
                        }
                    })
                    .collect()
            })
            .collect();

        let classes: Vec<String> = forest
            .concepts()
            .filter_map(|c| c.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let labeled = forest
            .concepts()
            .filter_map(|c| {
                let l = c.label.as_ref()?;
                Some((
                    index[&c.id],
                    classes.iter().position(|k| k == l).expect("label collected above"),
                ))
            })
            .collect();

        let denominators = config.contrastive_samples.map(|k| {
            let mut r = rng(config.seed, CONTRASTIVE_STREAM);
            edges
                .iter()
                .map(|&(_, v)| {
                    let mut pool = vec![v];
                    pool.extend((0..k).map(|_| r.gen_range(0..n)));
                    pool
                })
                .collect()
        });

        Ok(TrainingProblem {
            config: config.clone(),
            node_ids,
            tree_members,
            adjacency,
            relation_kinds,
            triples: dense_triples,
            negatives,
            classes,
            labeled,
            edges,
            denominators,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn node_ids(&self) -> &[ConceptId] {
        &self.node_ids
    }

    /// Uniform `[-init_scale, init_scale]` draws from a ChaCha8 stream:
    /// concept vectors in forest order, then relation kinds in sorted
    /// order, then classifier weights. Classifier bias starts at zero and
    /// GNN layers start as the identity map.
    pub fn init_model(&self) -> Model {
        let d = self.config.dim;
        let s = self.config.init_scale;
        let mut r = rng(self.config.seed, INIT_STREAM);
        let mut draw = |len: usize| -> Vector { (0..len).map(|_| r.gen_range(-s..=s)).collect() };
        let nodes = (0..self.node_ids.len()).map(|_| draw(d)).collect();
        let relations = (0..self.relation_kinds.len()).map(|_| draw(d)).collect();
        let mut classifier = Classifier::zeros(self.classes.clone(), d);
        classifier.weights.data = draw(self.classes.len() * d);
        let gnn = (self.config.gnn_layers > 0).then(|| GnnLayerParams::identity(d, self.config.activation));
        Model {
            nodes,
            relations,
            classifier,
            gnn,
        }
    }

    fn propagate(&self, model: &Model) -> (Vec<Vector>, Option<super::gnn::GnnCache>) {
        match &model.gnn {
            Some(p) => {
                let (h, cache) = gnn_forward(p, self.config.gnn_layers, &model.nodes, &self.adjacency);
                (h, Some(cache))
            }
            None => (model.nodes.clone(), None),
        }
    }

    /// Objective value and its gradient w.r.t. every parameter of `model`.
    pub fn evaluate(&self, model: &Model) -> (LossBreakdown, Model) {
        let d = self.config.dim;
        let (h, cache) = self.propagate(model);
        let mut g_h = vec![vec![0.0; d]; h.len()];
        let mut g_rel = vec![vec![0.0; d]; model.relations.len()];

        let mut triple = 0.0;
        for (&(head, r, tail), negs) in self.triples.iter().zip(&self.negatives) {
            for &neg in negs {
                let (l, g) = triple_loss_grad(
                    &h[head],
                    &h[tail],
                    &model.relations[r],
                    &h[head],
                    &h[neg],
                    self.config.margin,
                )
                .expect("dimensions fixed by construction");
                triple += l;
                linalg::axpy(&mut g_h[head], 1.0, &g.head);
                linalg::axpy(&mut g_h[tail], 1.0, &g.tail);
                linalg::axpy(&mut g_h[head], 1.0, &g.neg_head);
                linalg::axpy(&mut g_h[neg], 1.0, &g.neg_tail);
                linalg::axpy(&mut g_rel[r], 1.0, &g.relation);
            }
        }

        let (lambda_s, lambda_u) = (self.config.lambda_s, self.config.lambda_u);
        let (supervised, g_sup, mut g_cls) = supervised_loss_grad(&h, &self.labeled, &model.classifier);
        for (acc, g) in g_h.iter_mut().zip(&g_sup) {
            linalg::axpy(acc, lambda_s, g);
        }
        g_cls.weights.data.iter_mut().for_each(|x| *x *= lambda_s);
        g_cls.bias.iter_mut().for_each(|x| *x *= lambda_s);

        let (contrastive, g_con) =
            contrastive_loss_grad(&h, &self.edges, self.config.similarity, self.denominators.as_deref());
        for (acc, g) in g_h.iter_mut().zip(&g_con) {
            linalg::axpy(acc, lambda_u, g);
        }

        let (g_nodes, g_gnn) = match (&model.gnn, cache) {
            (Some(p), Some(cache)) => {
                let (g_x, g_p) = gnn_backward(p, &cache, &self.adjacency, g_h);
                (
                    g_x,
                    Some(GnnLayerParams {
                        self_weight: g_p.self_weight,
                        msg_weight: g_p.msg_weight,
                        bias: g_p.bias,
                        activation: p.activation,
                    }),
                )
            }
            _ => (g_h, None),
        };

        let loss = LossBreakdown {
            triple,
            supervised,
            contrastive,
            total: triple + lambda_s * supervised + lambda_u * contrastive,
        };
        let grad = Model {
            nodes: g_nodes,
            relations: g_rel,
            classifier: g_cls,
            gnn: g_gnn,
        };
        (loss, grad)
    }

    /// Scalar objective at a flattened parameter vector, for finite
    /// differences.
    pub fn objective_at(&self, template: &Model, flat: &[f64]) -> f64 {
        let mut m = template.clone();
        m.assign(flat);
        self.evaluate(&m).0.total
    }

    /// Final concept vectors, relation vectors and pooled tree vectors.
    pub fn export(&self, model: &Model) -> Result<EmbeddingTable> {
        let (h, _) = self.propagate(model);
        let mut table = EmbeddingTable::new(self.config.dim);
        for (id, v) in self.node_ids.iter().zip(&h) {
            table.set_concept(id.clone(), v.clone())?;
        }
        for (kind, v) in self.relation_kinds.iter().zip(&model.relations) {
            table.set_relation(kind, v.clone())?;
        }
        for (tree, members) in &self.tree_members {
            let vs: Vec<&[f64]> = members.iter().map(|&i| h[i].as_slice()).collect();
            table.set_tree_vector(tree.clone(), pool(&vs, self.config.dim, self.config.pooling)?)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub table: EmbeddingTable,
    pub model: Model,
    /// Entry `k` is the objective after `k` updates; entry 0 is the
    /// initialization.
    pub history: Vec<EpochLoss>,
}

pub fn train(forest: &KnowledgeForest, triples: &[Triple], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(forest, triples, config, |_| {})
}

/// Like [`train`], calling `on_epoch` as each loss record is produced.
pub fn train_with(
    forest: &KnowledgeForest,
    triples: &[Triple],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    let problem = TrainingProblem::new(forest, triples, config)?;
    let mut model = problem.init_model();
    let mut history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (loss, grad) = problem.evaluate(&model);
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let record = EpochLoss { epoch, loss };
        on_epoch(&record);
        history.push(record);
        if epoch == config.epochs {
            break;
        }
        let step: Vec<f64> = model
            .flatten()
            .iter()
            .zip(grad.flatten())
            .map(|(p, g)| p - config.learning_rate * g)
            .collect();
        model.assign(&step);
    }
    let table = problem.export(&model)?;
    Ok(TrainOutcome { table, model, history })
}

/// Fraction of (triple, corrupted tail) pairs where the true tail is
/// closer to `head + relation` than the corrupted one. Every concept other
/// than the true tail is tried as a corruption.
pub fn ranking_accuracy(table: &EmbeddingTable, triples: &[Triple]) -> Result<f64> {
    let mut wins = 0usize;
    let mut total = 0usize;
    for t in triples {
        let head = table
            .concept(&t.source)
            .ok_or_else(|| Error::MissingEmbedding(t.source.clone()))?;
        let tail = table
            .concept(&t.target)
            .ok_or_else(|| Error::MissingEmbedding(t.target.clone()))?;
        let rel = table
            .relation(&t.relation)
            .ok_or_else(|| Error::RelationKindNotFound(t.relation.key()))?;
        let translated = linalg::add(head, rel);
        let pos = linalg::norm(&linalg::sub(&translated, tail));
        for (id, v) in table.concepts() {
            if id == &t.target {
                continue;
            }
            total += 1;
            if pos < linalg::norm(&linalg::sub(&translated, v)) {
                wins += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { wins as f64 / total as f64 })
}
