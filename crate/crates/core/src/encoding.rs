//! Turning per-state embeddings into the context encoder's input rows.
//!
//! These are the reference (graph-free) versions of the operations; the
//! model builds the same computation on the autodiff tape and its tests
//! compare against these.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingStore, VttSample};
use crate::error::{Result, VttError};

/// How the first difference row is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffFirst {
    /// `v_1 - v_{N+1}`: the sequence wraps around.
    #[default]
    Wrap,
    /// The first difference row is zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureType {
    State,
    Diff,
}

impl FeatureType {
    pub fn index(self) -> usize {
        match self {
            FeatureType::State => 0,
            FeatureType::Diff => 1,
        }
    }
}

/// Affine adapter from provider width to model width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `d_enc x d_model`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ProjectionParams {
    pub fn d_enc(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.weight.ncols()
    }
}

/// Learned offsets added to state and difference rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeEmbeddings {
    pub state: Array1<f64>,
    pub diff: Array1<f64>,
}

impl TypeEmbeddings {
    pub fn zeros(d_model: usize) -> Self {
        TypeEmbeddings {
            state: Array1::zeros(d_model),
            diff: Array1::zeros(d_model),
        }
    }

    pub fn get(&self, t: FeatureType) -> &Array1<f64> {
        match t {
            FeatureType::State => &self.state,
            FeatureType::Diff => &self.diff,
        }
    }
}

/// Encoder input for one sample: `N+1` state rows, optionally followed by
/// `N+1` difference rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub features: Array2<f64>,
    pub type_ids: Vec<FeatureType>,
    /// Rows replaced by zeros.
    pub mask: Vec<bool>,
}

impl EncoderInput {
    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn has_diff(&self) -> bool {
        self.type_ids.contains(&FeatureType::Diff)
    }

    pub fn n_states(&self) -> usize {
        self.type_ids.iter().filter(|&&t| t == FeatureType::State).count()
    }
}

/// Stack a sample's stored state vectors into an `(N+1) x dim` matrix.
pub fn raw_state_matrix(sample: &VttSample, store: &EmbeddingStore) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((sample.states.len(), store.dim()));
    for (mut row, s) in m.rows_mut().into_iter().zip(&sample.states) {
        for (dst, &x) in row.iter_mut().zip(store.get(&s.state_id)?) {
            *dst = f64::from(x);
        }
    }
    Ok(m)
}

/// Apply the affine projection to every row of `raw`.
pub fn project_states(raw: &Array2<f64>, params: &ProjectionParams) -> Result<Array2<f64>> {
    if raw.ncols() != params.d_enc() {
        return Err(VttError::Shape(format!(
            "state vectors have width {}, projection expects {}",
            raw.ncols(),
            params.d_enc()
        )));
    }
    if params.bias.len() != params.d_model() {
        return Err(VttError::Shape(format!(
            "projection bias has length {}, expected {}",
            params.bias.len(),
            params.d_model()
        )));
    }
    Ok(raw.dot(&params.weight) + &params.bias)
}

/// `out[i] = v[i] - v[i-1]`, with `v[-1]` taken as the last state (wrap) or
/// the first row zeroed.
pub fn difference_features(v: &Array2<f64>, first: DiffFirst) -> Result<Array2<f64>> {
    let n = v.nrows();
    if n < 2 {
        return Err(VttError::Shape(format!("difference features need at least 2 states, got {n}")));
    }
    let mut out = Array2::zeros(v.dim());
    let tail = &v.slice(s![1.., ..]) - &v.slice(s![..n - 1, ..]);
    out.slice_mut(s![1.., ..]).assign(&tail);
    if first == DiffFirst::Wrap {
        out.row_mut(0).assign(&(&v.row(0) - &v.row(n - 1)));
    }
    Ok(out)
}

/// The `(N+1) x (N+1)` matrix `D` with `D v == difference_features(v)`.
pub fn difference_operator(n_states: usize, first: DiffFirst) -> Array2<f64> {
    let mut d = Array2::zeros((n_states, n_states));
    for i in 0..n_states {
        if i == 0 && first == DiffFirst::Zero {
            continue;
        }
        d[[i, i]] = 1.0;
        d[[i, (i + n_states - 1) % n_states]] = -1.0;
    }
    d
}

/// Concatenate state and (optional) difference rows, add the per-type
/// embedding and zero out masked rows entirely.
pub fn assemble_encoder_input(
    v_proj: &Array2<f64>,
    diff: Option<&Array2<f64>>,
    types: &TypeEmbeddings,
    mask_plan: &[bool],
) -> Result<EncoderInput> {
    let mut type_ids = vec![FeatureType::State; v_proj.nrows()];
    let features = match diff {
        Some(d) => {
            if d.dim() != v_proj.dim() {
                return Err(VttError::Shape(format!(
                    "difference rows {:?} do not match state rows {:?}",
                    d.dim(),
                    v_proj.dim()
                )));
            }
            type_ids.extend(std::iter::repeat_n(FeatureType::Diff, d.nrows()));
            concatenate(Axis(0), &[v_proj.view(), d.view()]).expect("widths agree")
        }
        None => v_proj.clone(),
    };
    if mask_plan.len() != features.nrows() {
        return Err(VttError::Shape(format!(
            "mask plan has {} entries for {} rows",
            mask_plan.len(),
            features.nrows()
        )));
    }
    let mut features = features;
    for ((mut row, &t), &m) in features.rows_mut().into_iter().zip(&type_ids).zip(mask_plan) {
        if m {
            row.fill(0.0);
        } else {
            row += types.get(t);
        }
    }
    Ok(EncoderInput {
        features,
        type_ids,
        mask: mask_plan.to_vec(),
    })
}
