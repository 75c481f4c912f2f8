//! Loss functions with hand-written gradients.
//!
//! Table-level entry points resolve ids and validate. The `*_grad`
//! variants work on dense node arrays and are what the trainer calls.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EmbeddingTable;
use crate::error::{Error, Result};
use crate::forest::ConceptId;
use crate::linalg::{self, Matrix, Vector};

/// Translation margin-ranking loss for one positive triple and one
/// corrupted counterpart:
/// `max(0, margin + |h + r - t| - |h' + r - t'|)`.
pub fn triple_loss(
    head: &[f64],
    tail: &[f64],
    relation: &[f64],
    neg_head: &[f64],
    neg_tail: &[f64],
    margin: f64,
) -> Result<f64> {
    triple_loss_grad(head, tail, relation, neg_head, neg_tail, margin).map(|(l, _)| l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleGrad {
    pub head: Vector,
    pub tail: Vector,
    pub relation: Vector,
    pub neg_head: Vector,
    pub neg_tail: Vector,
}

/// Residual `h + r - t`, its norm and the unit direction (zero at the
/// origin, where the norm is not differentiable).
fn translation(head: &[f64], relation: &[f64], tail: &[f64]) -> (f64, Vector) {
    let diff: Vector = head
        .iter()
        .zip(relation)
        .zip(tail)
        .map(|((h, r), t)| h + r - t)
        .collect();
    let n = linalg::norm(&diff);
    let dir = if n > 0.0 {
        linalg::scale(&diff, 1.0 / n)
    } else {
        vec![0.0; diff.len()]
    };
    (n, dir)
}

pub fn triple_loss_grad(
    head: &[f64],
    tail: &[f64],
    relation: &[f64],
    neg_head: &[f64],
    neg_tail: &[f64],
    margin: f64,
) -> Result<(f64, TripleGrad)> {
    let d = head.len();
    for v in [tail, relation, neg_head, neg_tail] {
        linalg::check_dim(v, d)?;
    }
    let (pos, g_pos) = translation(head, relation, tail);
    let (neg, g_neg) = translation(neg_head, relation, neg_tail);
    let raw = margin + pos - neg;
    if raw <= 0.0 {
        let z = vec![0.0; d];
        return Ok((
            0.0,
            TripleGrad {
                head: z.clone(),
                tail: z.clone(),
                relation: z.clone(),
                neg_head: z.clone(),
                neg_tail: z,
            },
        ));
    }
    Ok((
        raw,
        TripleGrad {
            head: g_pos.clone(),
            tail: linalg::scale(&g_pos, -1.0),
            relation: linalg::sub(&g_pos, &g_neg),
            neg_head: linalg::scale(&g_neg, -1.0),
            neg_tail: g_neg,
        },
    ))
}

/// Linear classification head over concept vectors, followed by softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub classes: Vec<String>,
    /// `classes.len() × dim`
    pub weights: Matrix,
    pub bias: Vector,
}

impl Classifier {
    pub fn zeros(classes: Vec<String>, dim: usize) -> Self {
        let c = classes.len();
        Classifier {
            classes,
            weights: Matrix::zeros(c, dim),
            bias: vec![0.0; c],
        }
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_owned()))
    }

    pub fn logits(&self, h: &[f64]) -> Vector {
        linalg::add(&self.weights.matvec(h), &self.bias)
    }

    pub fn predict(&self, h: &[f64]) -> Vector {
        linalg::softmax(&self.logits(h))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledConcept {
    pub concept: ConceptId,
    pub label: String,
}

/// Cross-entropy of the classifier over the labeled concepts.
pub fn supervised_loss(table: &EmbeddingTable, labeled: &[LabeledConcept], classifier: &Classifier) -> Result<f64> {
    linalg::check_dim(&classifier.bias, classifier.classes.len())?;
    if classifier.weights.cols != table.dim() {
        return Err(Error::DimensionMismatch {
            expected: table.dim(),
            found: classifier.weights.cols,
        });
    }
    let mut nodes = Vec::with_capacity(labeled.len());
    let mut pairs = Vec::with_capacity(labeled.len());
    for (i, lc) in labeled.iter().enumerate() {
        let h = table
            .concept(&lc.concept)
            .ok_or_else(|| Error::MissingEmbedding(lc.concept.clone()))?;
        nodes.push(h.to_vec());
        pairs.push((i, classifier.class_index(&lc.label)?));
    }
    Ok(supervised_loss_grad(&nodes, &pairs, classifier).0)
}

/// Returns the loss, the gradient per node and the classifier gradient.
/// `labeled` pairs a node index with a class index.
pub fn supervised_loss_grad(
    nodes: &[Vector],
    labeled: &[(usize, usize)],
    classifier: &Classifier,
) -> (f64, Vec<Vector>, Classifier) {
    let d = classifier.weights.cols;
    let mut grad_nodes = vec![vec![0.0; d]; nodes.len()];
    let mut grad_cls = Classifier::zeros(classifier.classes.clone(), d);
    let mut loss = 0.0;
    for &(v, class) in labeled {
        let h = &nodes[v];
        let logits = classifier.logits(h);
        loss += linalg::log_sum_exp(&logits) - logits[class];
        let mut delta = linalg::softmax(&logits);
        delta[class] -= 1.0;
        grad_cls.weights.add_outer(1.0, &delta, h);
        linalg::axpy(&mut grad_cls.bias, 1.0, &delta);
        linalg::axpy(&mut grad_nodes[v], 1.0, &classifier.weights.matvec_t(&delta));
    }
    (loss, grad_nodes, grad_cls)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    /// Value and partial derivatives w.r.t. both arguments.
    fn eval(self, x: &[f64], y: &[f64]) -> (f64, Vector, Vector) {
        match self {
            Similarity::Dot => (linalg::dot(x, y), y.to_vec(), x.to_vec()),
            Similarity::Cosine => {
                let nx = linalg::norm(x);
                let ny = linalg::norm(y);
                let c = linalg::dot(x, y) / (nx * ny);
                let dx = x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| b / (nx * ny) - c * a / (nx * nx))
                    .collect();
                let dy = x
                    .iter()
                    .zip(y)
                    .map(|(a, b)| a / (nx * ny) - c * b / (ny * ny))
                    .collect();
                (c, dx, dy)
            }
        }
    }
}

/// Softmax contrastive loss over edges. The denominator of each term runs
/// over every embedded concept, the anchor included.
pub fn contrastive_loss(
    table: &EmbeddingTable,
    edges: &[(ConceptId, ConceptId)],
    similarity: Similarity,
) -> Result<f64> {
    if edges.is_empty() {
        return Ok(0.0);
    }
    let mut index = BTreeMap::new();
    let mut nodes = Vec::new();
    for (i, (id, v)) in table.concepts().enumerate() {
        index.insert(id.clone(), i);
        if similarity == Similarity::Cosine && linalg::norm(v) == 0.0 {
            return Err(Error::ZeroVector);
        }
        nodes.push(v.clone());
    }
    let lookup = |id: &ConceptId| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::MissingEmbedding(id.clone()))
    };
    let dense = edges
        .iter()
        .map(|(u, v)| Ok((lookup(u)?, lookup(v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(contrastive_loss_grad(&nodes, &dense, similarity, None).0)
}

/// Dense contrastive loss and per-node gradient. When `denominators` is
/// given, edge `e` normalizes over `denominators[e]` instead of all nodes.
pub fn contrastive_loss_grad(
    nodes: &[Vector],
    edges: &[(usize, usize)],
    similarity: Similarity,
    denominators: Option<&[Vec<usize>]>,
) -> (f64, Vec<Vector>) {
    let d = nodes.first().map_or(0, Vec::len);
    let mut grad = vec![vec![0.0; d]; nodes.len()];
    let all: Vec<usize> = (0..nodes.len()).collect();
    let mut loss = 0.0;
    for (e, &(u, v)) in edges.iter().enumerate() {
        let pool = denominators.map_or(all.as_slice(), |ds| ds[e].as_slice());
        let evals: Vec<(f64, Vector, Vector)> = pool.iter().map(|&w| similarity.eval(&nodes[u], &nodes[w])).collect();
        let scores: Vec<f64> = evals.iter().map(|(s, _, _)| *s).collect();
        let (pos, dpos_u, dpos_v) = similarity.eval(&nodes[u], &nodes[v]);
        loss += linalg::log_sum_exp(&scores) - pos;

        linalg::axpy(&mut grad[u], -1.0, &dpos_u);
        linalg::axpy(&mut grad[v], -1.0, &dpos_v);
        let probs = linalg::softmax(&scores);
        for ((&w, (_, du, dw)), p) in pool.iter().zip(&evals).zip(probs) {
            linalg::axpy(&mut grad[u], p, du);
            linalg::axpy(&mut grad[w], p, dw);
        }
    }
    (loss, grad)
}

/// `lambda_s · supervised + lambda_u · contrastive`.
pub fn combined_loss(supervised: f64, contrastive: f64, lambda_s: f64, lambda_u: f64) -> Result<f64> {
    if !(lambda_s >= 0.0) {
        return Err(Error::out_of_range("lambda_s", lambda_s, "[0, inf)"));
    }
    if !(lambda_u >= 0.0) {
        return Err(Error::out_of_range("lambda_u", lambda_u, "[0, inf)"));
    }
    Ok(lambda_s * supervised + lambda_u * contrastive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triple_examples() {
        let h = [0.3, -0.2];
        let r = [0.1, 0.4];
        let t = [0.9, 0.5];
        // Negative identical to positive: distances cancel.
        assert!((triple_loss(&h, &t, &r, &h, &t, 0.7).unwrap() - 0.7).abs() < 1e-15);
        // Hand-evaluated: |(0,0)+(1,0)-(1,0)| = 0, |(0,0)+(1,0)-(0,0)| = 1.
        let l = triple_loss(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(l, 0.0);
        // Positive distance 0, negative distance 3 >= margin.
        let l = triple_loss(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &[-2.0, 0.0], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(triple_loss(&[0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn supervised_examples() {
        let mut table = EmbeddingTable::new(2);
        table.set_concept("a".into(), vec![0.4, -1.0]).unwrap();
        let cls = Classifier::zeros(vec!["x".into(), "y".into()], 2);
        let labeled = vec![LabeledConcept {
            concept: "a".into(),
            label: "y".into(),
        }];
        let l = supervised_loss(&table, &labeled, &cls).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(supervised_loss(&table, &[], &cls).unwrap(), 0.0);

        let bad = vec![LabeledConcept {
            concept: "a".into(),
            label: "zz".into(),
        }];
        assert_eq!(
            supervised_loss(&table, &bad, &cls).unwrap_err(),
            Error::UnknownLabel("zz".into())
        );

        let mut confident = cls.clone();
        confident.bias = vec![-50.0, 50.0];
        assert!(supervised_loss(&table, &labeled, &confident).unwrap() < 1e-40);
    }

    #[test]
    fn contrastive_examples() {
        let mut table = EmbeddingTable::new(2);
        table.set_concept("u".into(), vec![1.0, 0.0]).unwrap();
        table.set_concept("v".into(), vec![1.0, 0.0]).unwrap();
        let edges = vec![(ConceptId::from("u"), ConceptId::from("v"))];
        for sim in [Similarity::Dot, Similarity::Cosine] {
            let l = contrastive_loss(&table, &edges, sim).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
        assert_eq!(contrastive_loss(&table, &[], Similarity::Dot).unwrap(), 0.0);
        let dangling = vec![(ConceptId::from("u"), ConceptId::from("w"))];
        assert_eq!(
            contrastive_loss(&table, &dangling, Similarity::Dot).unwrap_err(),
            Error::MissingEmbedding("w".into())
        );
    }

    #[test]
    fn combined_is_linear() {
        assert_eq!(combined_loss(2.0, 3.0, 0.0, 1.5).unwrap(), 4.5);
        assert_eq!(combined_loss(2.0, 3.0, 0.5, 0.0).unwrap(), 1.0);
        let a = combined_loss(2.0, 3.0, 0.5, 0.25).unwrap();
        let b = combined_loss(2.0, 3.0, 1.0, 0.5).unwrap();
        assert_eq!(b, 2.0 * a);
        assert!(combined_loss(1.0, 1.0, -0.1, 1.0).is_err());
    }
}
