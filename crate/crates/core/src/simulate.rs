//! Closed-loop learner simulation: recommend a tree, study it, repeat.

use serde::{Deserialize, Serialize};

use crate::embedding::format_significant;
use crate::error::{Error, Result};
use crate::inference::{recommend_next, TreeRelationMatrix};
use crate::profile::MasteryState;

fn default_goal() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub delta: f64,
    pub max_steps: usize,
    #[serde(default = "default_goal")]
    pub mastery_goal: f64,
    /// Carried for reproducibility records; the loop itself draws no
    /// random numbers.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            delta: 0.34,
            max_steps: 50,
            mastery_goal: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::out_of_range("delta", self.delta, "(0, 1]"));
        }
        if self.max_steps == 0 {
            return Err(Error::out_of_range("max_steps", 0.0, ">= 1"));
        }
        if !(self.mastery_goal > 0.0 && self.mastery_goal <= 1.0) {
            return Err(Error::out_of_range("mastery_goal", self.mastery_goal, "(0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    pub step: usize,
    pub chosen: Option<usize>,
    pub mastery: MasteryState,
}

impl SimStep {
    /// `step,chosen,s_1,...,s_K`; an empty `chosen` field means no tree
    /// was eligible.
    pub fn to_line(&self) -> String {
        let mut out = format!(
            "{},{}",
            self.step,
            self.chosen.map(|c| c.to_string()).unwrap_or_default()
        );
        for s in self.mastery.values() {
            out.push(',');
            out.push_str(&format_significant(*s, 6));
        }
        out
    }
}

pub fn simulate_learner(matrix: &TreeRelationMatrix, s0: &MasteryState, config: &SimConfig) -> Result<Vec<SimStep>> {
    config.validate()?;
    if s0.len() != matrix.len() {
        return Err(Error::DimensionMismatch {
            expected: matrix.len(),
            found: s0.len(),
        });
    }
    let mut state = s0.clone();
    let mut out = Vec::new();
    for step in 1..=config.max_steps {
        if state.all_at_least(config.mastery_goal) {
            break;
        }
        let rec = recommend_next(matrix, &state)?;
        if let Some(k) = rec.next {
            state.update(k, config.delta)?;
        }
        out.push(SimStep {
            step,
            chosen: rec.next,
            mastery: state.clone(),
        });
        if rec.next.is_none() {
            break;
        }
    }
    Ok(out)
}

pub fn trajectory_lines(steps: &[SimStep]) -> String {
    steps.iter().map(|s| s.to_line() + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(delta: f64) -> SimConfig {
        SimConfig {
            delta,
            ..SimConfig::default()
        }
    }

    #[test]
    fn single_tree() {
        let t = simulate_learner(&TreeRelationMatrix::complete(1), &MasteryState::zeros(1), &cfg(0.5)).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].mastery.values(), &[1.0]);
    }

    #[test]
    fn mastered_start_is_empty() {
        let s0 = MasteryState::new(vec![1.0, 1.0]).unwrap();
        assert!(simulate_learner(&TreeRelationMatrix::complete(2), &s0, &cfg(0.3))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn three_trees_within_bound() {
        let t = simulate_learner(&TreeRelationMatrix::complete(3), &MasteryState::zeros(3), &cfg(0.34)).unwrap();
        assert_eq!(t.len(), 9);
        assert!(t.last().unwrap().mastery.all_at_least(1.0));
        let chosen: Vec<_> = t.iter().map(|s| s.chosen.unwrap()).collect();
        assert_eq!(chosen, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
        assert_eq!(t[0].to_line(), "1,0,0.34,0,0");
    }

    #[test]
    fn rejects_bad_config() {
        let m = TreeRelationMatrix::complete(1);
        let s = MasteryState::zeros(1);
        assert!(simulate_learner(&m, &s, &cfg(0.0)).is_err());
        assert!(simulate_learner(&m, &MasteryState::zeros(2), &cfg(0.5)).is_err());
    }
}
