use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One message-passing layer: mean aggregation over neighbours followed by
/// `act(W_self · h + W_msg · m + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnLayerParams {
    pub self_weight: Matrix,
    pub msg_weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl GnnLayerParams {
    /// `W_self = I`, `W_msg = 0`, `b = 0`.
    pub fn identity(dim: usize, activation: Activation) -> Self {
        GnnLayerParams {
            self_weight: Matrix::identity(dim),
            msg_weight: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for m in [&self.self_weight, &self.msg_weight] {
            if m.rows != d || m.cols != d || m.data.len() != d * d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: m.rows.max(m.cols),
                });
            }
        }
        if !(self.self_weight.is_finite() && self.msg_weight.is_finite() && linalg::is_finite(&self.bias)) {
            return Err(Error::NonFinite("gnn parameters".into()));
        }
        Ok(())
    }

    fn pre_activation(&self, prev: &[f64], message: &[f64]) -> Vector {
        let mut z = self.self_weight.matvec(prev);
        for ((zi, mi), bi) in z.iter_mut().zip(self.msg_weight.matvec(message)).zip(&self.bias) {
            *zi += mi + bi;
        }
        z
    }
}

fn mean_of(vectors: &[&[f64]], dim: usize) -> Vector {
    let mut m = vec![0.0; dim];
    if vectors.is_empty() {
        return m;
    }
    for v in vectors {
        linalg::axpy(&mut m, 1.0, v);
    }
    let n = vectors.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// Applies one layer to a single node given its neighbours' vectors.
pub fn gnn_layer(neighbors: &[&[f64]], prev: &[f64], params: &GnnLayerParams) -> Result<Vector> {
    params.validate()?;
    let d = params.dim();
    linalg::check_dim(prev, d)?;
    for n in neighbors {
        linalg::check_dim(n, d)?;
    }
    let message = mean_of(neighbors, d);
    let out: Vector = params
        .pre_activation(prev, &message)
        .into_iter()
        .map(|z| params.activation.apply(z))
        .collect();
    if !linalg::is_finite(&out) {
        return Err(Error::NonFinite("gnn layer output".into()));
    }
    Ok(out)
}

/// Intermediate values of a multi-layer forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct GnnCache {
    inputs: Vec<Vec<Vector>>,
    messages: Vec<Vec<Vector>>,
    pre_activations: Vec<Vec<Vector>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnGrad {
    pub self_weight: Matrix,
    pub msg_weight: Matrix,
    pub bias: Vector,
}

/// Runs `layers` applications of the shared layer over the whole graph.
pub fn gnn_forward(
    params: &GnnLayerParams,
    layers: usize,
    nodes: &[Vector],
    adjacency: &[Vec<usize>],
) -> (Vec<Vector>, GnnCache) {
    let d = params.dim();
    let mut cache = GnnCache {
        inputs: Vec::with_capacity(layers),
        messages: Vec::with_capacity(layers),
        pre_activations: Vec::with_capacity(layers),
    };
    let mut h = nodes.to_vec();
    for _ in 0..layers {
        let messages: Vec<Vector> = adjacency
            .iter()
            .map(|nbrs| {
                let vs: Vec<&[f64]> = nbrs.iter().map(|&u| h[u].as_slice()).collect();
                mean_of(&vs, d)
            })
            .collect();
        let zs: Vec<Vector> = h
            .iter()
            .zip(&messages)
            .map(|(prev, m)| params.pre_activation(prev, m))
            .collect();
        let next = zs
            .iter()
            .map(|z| z.iter().map(|&x| params.activation.apply(x)).collect())
            .collect();
        cache.inputs.push(std::mem::replace(&mut h, next));
        cache.messages.push(messages);
        cache.pre_activations.push(zs);
    }
    (h, cache)
}

/// Back-propagates `grad_out` (gradient w.r.t. the final node vectors)
/// through every cached layer.
pub fn gnn_backward(
    params: &GnnLayerParams,
    cache: &GnnCache,
    adjacency: &[Vec<usize>],
    grad_out: Vec<Vector>,
) -> (Vec<Vector>, GnnGrad) {
    let d = params.dim();
    let mut grad = GnnGrad {
        self_weight: Matrix::zeros(d, d),
        msg_weight: Matrix::zeros(d, d),
        bias: vec![0.0; d],
    };
    let mut g = grad_out;
    for layer in (0..cache.inputs.len()).rev() {
        let inputs = &cache.inputs[layer];
        let messages = &cache.messages[layer];
        let zs = &cache.pre_activations[layer];
        let mut g_prev = vec![vec![0.0; d]; inputs.len()];
        for v in 0..inputs.len() {
            let dz: Vector = g[v]
                .iter()
                .zip(&zs[v])
                .map(|(gv, z)| gv * params.activation.derivative(*z))
                .collect();
            grad.self_weight.add_outer(1.0, &dz, &inputs[v]);
            grad.msg_weight.add_outer(1.0, &dz, &messages[v]);
            linalg::axpy(&mut grad.bias, 1.0, &dz);
            linalg::axpy(&mut g_prev[v], 1.0, &params.self_weight.matvec_t(&dz));
            let nbrs = &adjacency[v];
            if !nbrs.is_empty() {
                let dm = params.msg_weight.matvec_t(&dz);
                let share = 1.0 / nbrs.len() as f64;
                for &u in nbrs {
                    linalg::axpy(&mut g_prev[u], share, &dm);
                }
            }
        }
        g = g_prev;
    }
    (g, grad)
}
