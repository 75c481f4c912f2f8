//! Learner profiles: attribute, behavior and trajectory vectors, their
//! attention fusion, and per-tree mastery.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::forest::ConceptId;
use crate::linalg::{self, Matrix, Vector};

/// Mastery values closer than this to 1 are snapped to exactly 1, so that
/// `n` increments of `1/n` always complete a tree despite rounding.
pub const MASTERY_SNAP: f64 = 1e-9;

/// Per-tree mastery in `[0, 1]`, indexed in forest order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MasteryState(Vec<f64>);

impl TryFrom<Vec<f64>> for MasteryState {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        MasteryState::new(v)
    }
}

impl From<MasteryState> for Vec<f64> {
    fn from(s: MasteryState) -> Self {
        s.0
    }
}

impl MasteryState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::out_of_range("mastery", v, "[0, 1]"));
            }
        }
        Ok(MasteryState(values))
    }

    pub fn zeros(k: usize) -> Self {
        MasteryState(vec![0.0; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn all_at_least(&self, goal: f64) -> bool {
        self.0.iter().all(|&s| s >= goal)
    }

    /// `s_k ← min(1, s_k + delta)`, leaving every other entry alone.
    pub fn update(&mut self, k: usize, delta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::out_of_range("delta", delta, "[0, 1]"));
        }
        let len = self.0.len();
        let s = self.0.get_mut(k).ok_or(Error::IndexOutOfRange { index: k, len })?;
        let next = (*s + delta).min(1.0);
        *s = if 1.0 - next < MASTERY_SNAP { 1.0 } else { next };
        Ok(())
    }

    /// A new tree starts unexplored.
    pub fn push_tree(&mut self) {
        self.0.push(0.0);
    }

    pub fn remove_tree(&mut self, k: usize) {
        if k < self.0.len() {
            self.0.remove(k);
        }
    }
}

/// Returns a copy of `state` with tree `k` advanced by `delta`.
pub fn update_mastery(state: &MasteryState, k: usize, delta: f64) -> Result<MasteryState> {
    let mut next = state.clone();
    next.update(k, delta)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryEvent {
    pub concept: ConceptId,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Exponentially decayed, weighted sum of the concept vectors visited,
/// most recent event undecayed, scaled to unit length. An empty (or
/// cancelling) history gives the zero vector.
pub fn encode_trajectory(events: &[TrajectoryEvent], table: &EmbeddingTable, decay: f64) -> Result<Vector> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::out_of_range("decay", decay, "(0, 1]"));
    }
    let mut acc = vec![0.0; table.dim()];
    let n = events.len();
    for (j, ev) in events.iter().enumerate() {
        let h = table
            .concept(&ev.concept)
            .ok_or_else(|| Error::ConceptNotFound(ev.concept.clone()))?;
        let age = (n - 1 - j) as i32;
        linalg::axpy(&mut acc, decay.powi(age) * ev.weight, h);
    }
    Ok(linalg::normalized(&acc).unwrap_or(acc))
}

/// Hashes categorical tokens into buckets and projects the bucket counts
/// through a fixed random matrix. Deterministic for a given seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoder {
    buckets: usize,
    projection: Matrix,
}

const BEHAVIOR_BINS: f64 = 4.0;

impl FeatureEncoder {
    pub fn new(dim: usize, buckets: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let scale = 1.0 / (buckets as f64).sqrt();
        let data = (0..dim * buckets).map(|_| rng.gen_range(-scale..=scale)).collect();
        FeatureEncoder {
            buckets,
            projection: Matrix {
                rows: dim,
                cols: buckets,
                data,
            },
        }
    }

    fn bucket(&self, token: &str) -> usize {
        // FNV-1a, stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % self.buckets as u64) as usize
    }

    pub fn encode_tokens<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vector {
        let mut counts = vec![0.0; self.buckets];
        for t in tokens {
            counts[self.bucket(t)] += 1.0;
        }
        let v = self.projection.matvec(&counts);
        linalg::normalized(&v).unwrap_or(v)
    }
}

/// Raw profile data as it appears in a profiles document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRecord {
    pub user_id: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    /// Behavior signals, expected in `[0, 1]` and binned into quarters.
    #[serde(default)]
    pub behaviors: BTreeMap<String, f64>,
    #[serde(default)]
    pub trajectory: Vec<TrajectoryEvent>,
    #[serde(default)]
    pub mastery: MasteryState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileVectors {
    pub attributes: Vector,
    pub behaviors: Vector,
    pub trajectory: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    #[serde(flatten)]
    pub record: ProfileRecord,
    pub vectors: ProfileVectors,
}

impl UserProfile {
    pub fn user_id(&self) -> &str {
        &self.record.user_id
    }

    pub fn mastery(&self) -> &MasteryState {
        &self.record.mastery
    }

    pub fn mastery_mut(&mut self) -> &mut MasteryState {
        &mut self.record.mastery
    }
}

fn default_buckets() -> usize {
    64
}
fn default_decay() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEncoderConfig {
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    /// Per-step decay of older trajectory events.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProfileEncoderConfig {
    fn default() -> Self {
        ProfileEncoderConfig {
            buckets: default_buckets(),
            decay: default_decay(),
            seed: 0,
        }
    }
}

/// Turns [`ProfileRecord`]s into vectors of the table's dimension.
#[derive(Debug, Clone)]
pub struct ProfileEncoder {
    attributes: FeatureEncoder,
    behaviors: FeatureEncoder,
    decay: f64,
}

impl ProfileEncoder {
    pub fn new(dim: usize, config: &ProfileEncoderConfig) -> Result<Self> {
        if config.buckets == 0 {
            return Err(Error::InvalidConfig("buckets must be at least 1".into()));
        }
        Ok(ProfileEncoder {
            attributes: FeatureEncoder::new(dim, config.buckets, config.seed, 10),
            behaviors: FeatureEncoder::new(dim, config.buckets, config.seed, 11),
            decay: config.decay,
        })
    }

    pub fn encode_attributes(&self, attrs: &BTreeMap<String, String>) -> Vector {
        let tokens: Vec<String> = attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        self.attributes.encode_tokens(tokens.iter().map(String::as_str))
    }

    pub fn encode_behaviors(&self, behaviors: &BTreeMap<String, f64>) -> Vector {
        let tokens: Vec<String> = behaviors
            .iter()
            .map(|(k, v)| {
                let bin = (v.clamp(0.0, 1.0) * BEHAVIOR_BINS).floor().min(BEHAVIOR_BINS - 1.0);
                format!("{k}#{bin}")
            })
            .collect();
        self.behaviors.encode_tokens(tokens.iter().map(String::as_str))
    }

    /// Encodes all three dimensions. Without a table the trajectory
    /// vector is zero.
    pub fn encode(&self, record: ProfileRecord, table: Option<&EmbeddingTable>) -> Result<UserProfile> {
        let dim = self.attributes.projection.rows;
        let trajectory = match table {
            Some(t) => encode_trajectory(&record.trajectory, t, self.decay)?,
            None => vec![0.0; dim],
        };
        Ok(UserProfile {
            vectors: ProfileVectors {
                attributes: self.encode_attributes(&record.attributes),
                behaviors: self.encode_behaviors(&record.behaviors),
                trajectory,
            },
            record,
        })
    }
}

/// Attention vectors scoring each profile dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub w_a: Vector,
    pub w_b: Vector,
    pub w_t: Vector,
}

impl FusionWeights {
    pub fn zeros(dim: usize) -> Self {
        FusionWeights {
            w_a: vec![0.0; dim],
            w_b: vec![0.0; dim],
            w_t: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fusion {
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub alpha_t: f64,
    pub embedding: Vector,
}

/// Softmax attention over the three dimension scores `w·x`, then the
/// convex combination of the three vectors.
pub fn attention_fuse(vectors: &ProfileVectors, weights: &FusionWeights) -> Result<Fusion> {
    let d = vectors.attributes.len();
    for v in [
        &vectors.behaviors,
        &vectors.trajectory,
        &weights.w_a,
        &weights.w_b,
        &weights.w_t,
    ] {
        linalg::check_dim(v, d)?;
    }
    let z = [
        linalg::dot(&weights.w_a, &vectors.attributes),
        linalg::dot(&weights.w_b, &vectors.behaviors),
        linalg::dot(&weights.w_t, &vectors.trajectory),
    ];
    if !linalg::is_finite(&z) {
        return Err(Error::NonFinite("attention scores".into()));
    }
    let alpha = linalg::softmax(&z);
    let embedding = (0..d)
        .map(|i| alpha[0] * vectors.attributes[i] + alpha[1] * vectors.behaviors[i] + alpha[2] * vectors.trajectory[i])
        .collect();
    Ok(Fusion {
        alpha_a: alpha[0],
        alpha_b: alpha[1],
        alpha_t: alpha[2],
        embedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vectors(a: Vector, b: Vector, t: Vector) -> ProfileVectors {
        ProfileVectors {
            attributes: a,
            behaviors: b,
            trajectory: t,
        }
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let v = vectors(vec![3.0, 0.0], vec![0.0, 3.0], vec![3.0, 3.0]);
        let f = attention_fuse(&v, &FusionWeights::zeros(2)).unwrap();
        for a in [f.alpha_a, f.alpha_b, f.alpha_t] {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((f.embedding[0] - 2.0).abs() < 1e-12);
        assert!((f.embedding[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_attention() {
        let v = vectors(vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]);
        let w = FusionWeights {
            w_a: vec![1.0, 0.0],
            w_b: vec![1.0, 0.0],
            w_t: vec![1.0, 0.0],
        };
        let f = attention_fuse(&v, &w).unwrap();
        let e = std::f64::consts::E;
        let denom = 2.0 * e + 1.0;
        assert!((f.alpha_a - e / denom).abs() < 1e-15);
        assert!((f.alpha_b - 1.0 / denom).abs() < 1e-15);
        assert!((f.alpha_t - e / denom).abs() < 1e-15);
        assert!((f.alpha_a + f.alpha_b + f.alpha_t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_dimension_mismatch() {
        let v = vectors(vec![1.0, 0.0], vec![0.0], vec![1.0, 1.0]);
        assert!(matches!(
            attention_fuse(&v, &FusionWeights::zeros(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn table() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(2);
        t.set_concept("x".into(), vec![1.0, 0.0]).unwrap();
        t.set_concept("y".into(), vec![0.0, 1.0]).unwrap();
        t.set_concept("z".into(), vec![3.0, 4.0]).unwrap();
        t
    }

    fn ev(c: &str) -> TrajectoryEvent {
        TrajectoryEvent {
            concept: c.into(),
            weight: 1.0,
        }
    }

    #[test]
    fn trajectory_examples() {
        let t = table();
        for decay in [0.1, 0.5, 1.0] {
            let v = encode_trajectory(&[ev("z")], &t, decay).unwrap();
            assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15, "{v:?}");
        }
        assert_eq!(encode_trajectory(&[], &t, 0.5).unwrap(), vec![0.0, 0.0]);

        let got = encode_trajectory(&[ev("x"), ev("y")], &t, 0.5).unwrap();
        let n = (0.25f64 + 1.0).sqrt();
        assert!((got[0] - 0.5 / n).abs() < 1e-15);
        assert!((got[1] - 1.0 / n).abs() < 1e-15);

        assert_eq!(
            encode_trajectory(&[ev("nope")], &t, 0.5).unwrap_err(),
            Error::ConceptNotFound("nope".into())
        );
        assert!(encode_trajectory(&[], &t, 0.0).is_err());
    }

    #[test]
    fn mastery_updates() {
        let s = MasteryState::zeros(2);
        assert_eq!(update_mastery(&s, 0, 0.3).unwrap().values(), &[0.3, 0.0]);
        let s = MasteryState::new(vec![0.9, 0.2]).unwrap();
        assert_eq!(update_mastery(&s, 0, 0.3).unwrap().values(), &[1.0, 0.2]);
        assert_eq!(update_mastery(&s, 1, 0.0).unwrap(), s);
        assert!(matches!(
            update_mastery(&s, 2, 0.1),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(update_mastery(&s, 0, 1.5).is_err());
        assert!(MasteryState::new(vec![1.2]).is_err());
        assert!(serde_json::from_str::<MasteryState>("[0.5, -0.1]").is_err());
    }

    #[test]
    fn tenths_reach_one() {
        let mut s = MasteryState::zeros(1);
        for _ in 0..10 {
            s.update(0, 0.1).unwrap();
        }
        assert_eq!(s.values(), &[1.0]);
    }

    #[test]
    fn encoders_are_deterministic() {
        let cfg = ProfileEncoderConfig::default();
        let a = ProfileEncoder::new(4, &cfg).unwrap();
        let b = ProfileEncoder::new(4, &cfg).unwrap();
        let attrs: BTreeMap<_, _> = [("level".to_string(), "undergrad".to_string())].into();
        let va = a.encode_attributes(&attrs);
        assert_eq!(va, b.encode_attributes(&attrs));
        assert!((linalg::norm(&va) - 1.0).abs() < 1e-12);
        assert_eq!(a.encode_attributes(&BTreeMap::new()), vec![0.0; 4]);
        let beh: BTreeMap<_, _> = [("quiz".to_string(), 0.9)].into();
        assert_eq!(a.encode_behaviors(&beh).len(), 4);
    }
}
