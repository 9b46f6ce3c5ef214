//! Context encoder pieces that do not depend on parameters: the masked
//! transformation modeling policy and the choice of which encoder row
//! represents each transformation.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VttError};

/// Training-time row masking. With probability `sample_ratio` a sample is
/// selected for masking; each of its rows is then zeroed with probability
/// `mask_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtmPolicy {
    pub mask_ratio: f64,
    pub sample_ratio: f64,
}

impl Default for MtmPolicy {
    fn default() -> Self {
        MtmPolicy {
            mask_ratio: 0.15,
            sample_ratio: 0.5,
        }
    }
}

impl MtmPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("mask_ratio", self.mask_ratio), ("sample_ratio", self.sample_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(VttError::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// Draw a mask plan for `n_rows` encoder rows. Outside training nothing is
/// masked and no randomness is consumed.
pub fn sample_mask_plan<R: Rng + ?Sized>(policy: &MtmPolicy, n_rows: usize, training: bool, rng: &mut R) -> Vec<bool> {
    if !training {
        return vec![false; n_rows];
    }
    if !rng.random_bool(policy.sample_ratio) {
        return vec![false; n_rows];
    }
    (0..n_rows).map(|_| rng.random_bool(policy.mask_ratio)).collect()
}

/// Which encoder output row stands for transformation `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepSource {
    /// The difference row of `v_{i+1} - v_i`.
    #[default]
    Diff,
    /// The state row of `v_{i+1}`.
    State,
    /// Sum of both.
    Sum,
}

/// Row offsets (relative to the first state row) used for each of the `N`
/// transformation representations; the second entry is added to the first
/// when present. Without difference rows every source falls back to the
/// state row.
pub fn rep_rows(n_states: usize, has_diff: bool, source: RepSource) -> Vec<(usize, Option<usize>)> {
    (1..n_states)
        .map(|i| {
            let state = i;
            let diff = n_states + i;
            match (has_diff, source) {
                (false, _) | (true, RepSource::State) => (state, None),
                (true, RepSource::Diff) => (diff, None),
                (true, RepSource::Sum) => (diff, Some(state)),
            }
        })
        .collect()
}

/// Encoder outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextOutput {
    /// `N x d_model`; row `i` represents transformation `i`.
    pub transformation_reps: Array2<f64>,
    pub global_rep: Array1<f64>,
    pub category_logits: Array1<f64>,
    pub topic_logits: Array1<f64>,
}

impl ContextOutput {
    pub fn n_transformations(&self) -> usize {
        self.transformation_reps.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn inference_never_masks() {
        let mut rng = stream_rng(0, "mtm");
        let always = MtmPolicy {
            mask_ratio: 1.0,
            sample_ratio: 1.0,
        };
        for _ in 0..100 {
            assert!(sample_mask_plan(&always, 12, false, &mut rng).iter().all(|&m| !m));
        }
        assert!(sample_mask_plan(&always, 12, true, &mut rng).iter().all(|&m| m));
    }

    #[test]
    fn zero_ratio_never_masks() {
        let mut rng = stream_rng(1, "mtm");
        let p = MtmPolicy {
            mask_ratio: 0.0,
            sample_ratio: 1.0,
        };
        for _ in 0..1000 {
            assert!(!sample_mask_plan(&p, 8, true, &mut rng).contains(&true));
        }
    }

    #[test]
    fn policy_bounds() {
        assert!(MtmPolicy::default().validate().is_ok());
        assert!(MtmPolicy {
            mask_ratio: 1.5,
            sample_ratio: 0.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rep_row_layout() {
        // 3 states: rows 0..3 are states, 3..6 differences.
        assert_eq!(rep_rows(3, true, RepSource::Diff), vec![(4, None), (5, None)]);
        assert_eq!(rep_rows(3, true, RepSource::State), vec![(1, None), (2, None)]);
        assert_eq!(rep_rows(3, true, RepSource::Sum), vec![(4, Some(1)), (5, Some(2))]);
        assert_eq!(rep_rows(3, false, RepSource::Diff), vec![(1, None), (2, None)]);
        assert_eq!(rep_rows(2, true, RepSource::Diff).len(), 1);
    }
}
