//! TTNet: state projection, difference-sensitive encoder input, a
//! transformer context encoder with a global token and auxiliary heads, and
//! a shared causal decoder that adds the transformation representation to
//! every input embedding.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, ParamId, ParamSet, Reduction, RelativeBuckets, Segment, Var};
use crate::data::{DatasetManifest, EmbeddingStore, Split, VttSample};
use crate::decoder::{nucleus_support, sample_from, softmax, GenerationResult, SamplingConfig, Vocabulary, BOS, EOS, PAD};
use crate::encoder::{rep_rows, ContextOutput, RepSource};
use crate::encoding::{
    assemble_encoder_input, difference_features, difference_operator, project_states, raw_state_matrix, DiffFirst,
    EncoderInput, FeatureType, ProjectionParams, TypeEmbeddings,
};
use crate::error::{Result, VttError};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtNetConfig {
    /// Width of the stored state embeddings.
    pub d_enc: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_categories: usize,
    pub n_topics: usize,
    #[serde(default = "default_rel_buckets")]
    pub rel_buckets: usize,
    #[serde(default = "default_rel_max_distance")]
    pub rel_max_distance: usize,
}

fn default_rel_buckets() -> usize {
    32
}

fn default_rel_max_distance() -> usize {
    128
}

impl TtNetConfig {
    /// Full-size architecture: width 512, 8 heads, two layers on each side.
    pub fn full(d_enc: usize, vocab_size: usize, n_categories: usize, n_topics: usize) -> Self {
        TtNetConfig {
            d_enc,
            d_model: 512,
            n_heads: 8,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 2048,
            vocab_size,
            n_categories,
            n_topics,
            rel_buckets: default_rel_buckets(),
            rel_max_distance: default_rel_max_distance(),
        }
    }

    /// Small architecture that trains in seconds on a CPU.
    pub fn desk(d_enc: usize, vocab_size: usize, n_categories: usize, n_topics: usize) -> Self {
        TtNetConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            ..Self::full(d_enc, vocab_size, n_categories, n_topics)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_enc", self.d_enc),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_categories", self.n_categories),
            ("n_topics", self.n_topics),
            ("rel_buckets", self.rel_buckets),
            ("rel_max_distance", self.rel_max_distance),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(VttError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(VttError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= EOS {
            return Err(VttError::Config(format!("vocab_size {} leaves no room for words", self.vocab_size)));
        }
        if self.rel_buckets < 4 {
            return Err(VttError::Config("rel_buckets must be at least 4".into()));
        }
        Ok(())
    }
}

/// Where difference features are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffFusion {
    /// On the raw provider embeddings, then projected.
    Early,
    /// On the projected states.
    #[default]
    Late,
}

/// Component switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub diff: bool,
    pub mtm: bool,
    pub aux: bool,
    pub aux_category: bool,
    pub aux_topic: bool,
    pub diff_fusion: DiffFusion,
    pub rep_source: RepSource,
    pub diff_first: DiffFirst,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            diff: true,
            mtm: true,
            aux: true,
            aux_category: true,
            aux_topic: true,
            diff_fusion: DiffFusion::Late,
            rep_source: RepSource::Diff,
            diff_first: DiffFirst::Wrap,
        }
    }
}

impl Toggles {
    pub fn category_active(&self) -> bool {
        self.aux && self.aux_category
    }

    pub fn topic_active(&self) -> bool {
        self.aux && self.aux_topic
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct StackIds {
    layers: Vec<LayerIds>,
    rel: ParamId,
    ln: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Ids {
    proj_w: ParamId,
    proj_b: ParamId,
    type_emb: ParamId,
    global: ParamId,
    enc: StackIds,
    cat: (ParamId, ParamId),
    topic: (ParamId, ParamId),
    emb: ParamId,
    dec: StackIds,
    out: (ParamId, ParamId),
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder {
    seed: u64,
    params: ParamSet,
}

impl Builder {
    /// Every parameter draws from its own named stream, so enabling or
    /// disabling a component never shifts another parameter's values.
    fn add(&mut self, name: &str, shape: (usize, usize), init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::Normal(std) => {
                let mut rng = stream_rng(self.seed, &format!("init/{name}"));
                Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
            }
        };
        self.params.add(name, value)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        self.add(name, (fan_in, fan_out), Init::Normal(1.0 / (fan_in as f64).sqrt()))
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.add(&format!("{name}.g"), (1, d), Init::Ones),
            self.add(&format!("{name}.b"), (1, d), Init::Zeros),
        )
    }

    fn stack(&mut self, prefix: &str, n_layers: usize, cfg: &TtNetConfig) -> StackIds {
        let d = cfg.d_model;
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{prefix}.{l}");
                LayerIds {
                    ln1: self.layer_norm(&format!("{p}.ln1"), d),
                    wq: self.linear(&format!("{p}.attn.wq"), d, d),
                    wk: self.linear(&format!("{p}.attn.wk"), d, d),
                    wv: self.linear(&format!("{p}.attn.wv"), d, d),
                    wo: self.linear(&format!("{p}.attn.wo"), d, d),
                    ln2: self.layer_norm(&format!("{p}.ln2"), d),
                    w1: self.linear(&format!("{p}.ff.w1"), d, cfg.d_ff),
                    b1: self.add(&format!("{p}.ff.b1"), (1, cfg.d_ff), Init::Zeros),
                    w2: self.linear(&format!("{p}.ff.w2"), cfg.d_ff, d),
                    b2: self.add(&format!("{p}.ff.b2"), (1, d), Init::Zeros),
                }
            })
            .collect();
        StackIds {
            layers,
            rel: self.add(&format!("{prefix}.rel"), (cfg.rel_buckets, cfg.n_heads), Init::Normal(0.02)),
            ln: self.layer_norm(&format!("{prefix}.ln"), d),
        }
    }
}

fn build_params(cfg: &TtNetConfig, seed: u64) -> (ParamSet, Ids) {
    let d = cfg.d_model;
    let emb_std = 1.0 / (d as f64).sqrt();
    let mut b = Builder {
        seed,
        params: ParamSet::new(),
    };
    let proj_w = b.linear("proj.w", cfg.d_enc, d);
    let proj_b = b.add("proj.b", (1, d), Init::Zeros);
    let type_emb = b.add("type_emb", (2, d), Init::Normal(emb_std));
    let global = b.add("global", (1, d), Init::Normal(emb_std));
    let enc = b.stack("enc", cfg.enc_layers, cfg);
    let cat = (
        b.linear("head.cat.w", d, cfg.n_categories),
        b.add("head.cat.b", (1, cfg.n_categories), Init::Zeros),
    );
    let topic = (
        b.linear("head.topic.w", d, cfg.n_topics),
        b.add("head.topic.b", (1, cfg.n_topics), Init::Zeros),
    );
    let emb = b.add("dec.emb", (cfg.vocab_size, d), Init::Normal(emb_std));
    let dec = b.stack("dec", cfg.dec_layers, cfg);
    let out = (
        b.linear("dec.out.w", d, cfg.vocab_size),
        b.add("dec.out.b", (1, cfg.vocab_size), Init::Zeros),
    );
    let ids = Ids {
        proj_w,
        proj_b,
        type_emb,
        global,
        enc,
        cat,
        topic,
        emb,
        dec,
        out,
    };
    (b.params, ids)
}

/// One sample ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderItem {
    /// `(N+1) x d_enc` provider embeddings.
    pub raw: Array2<f64>,
    /// Per encoder row (states, then differences): replaced by zeros.
    pub mask: Vec<bool>,
    /// Per state: treated as missing (zeroed after projection, its state
    /// row masked, differences recomputed from the zero).
    pub dropped: Vec<bool>,
}

/// A training example: encoder input, encoded descriptions and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub encoder: EncoderItem,
    /// `[BOS, words..., EOS]` per transformation.
    pub targets: Vec<Vec<usize>>,
    pub category: usize,
    pub topic: usize,
}

/// Coefficients of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub reduction: Reduction,
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub text: Var,
    pub category: Option<Var>,
    pub topic: Option<Var>,
}

struct EncodedBatch {
    reps: Var,
    global: Var,
    /// Index of the first rep row of each sample.
    rep_offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtNet {
    pub config: TtNetConfig,
    pub toggles: Toggles,
    pub params: ParamSet,
    ids: IdsHolder,
}

// `Ids` only holds indices; equality of two models is decided by config,
// toggles and parameters.
#[derive(Debug, Clone)]
struct IdsHolder(Ids);

impl PartialEq for IdsHolder {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl TtNet {
    pub fn new(config: TtNetConfig, toggles: Toggles, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, ids) = build_params(&config, seed);
        Ok(TtNet {
            config,
            toggles,
            params,
            ids: IdsHolder(ids),
        })
    }

    /// Rebuild a model around stored parameter values, checking names and
    /// shapes against the configuration.
    pub fn from_params(config: TtNetConfig, toggles: Toggles, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, toggles, 0)?;
        if model.params.names() != params.names() {
            return Err(VttError::Checkpoint("parameter names do not match the model configuration".into()));
        }
        for ((_, name, expect), got) in model.params.iter().zip(params.values()) {
            if expect.dim() != got.dim() {
                return Err(VttError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.dim(),
                    expect.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    fn ids(&self) -> &Ids {
        &self.ids.0
    }

    /// Number of scalars that take part in the objective under the current
    /// toggles. Type embeddings only exist with difference features; the
    /// heads only with their auxiliary task.
    pub fn n_active_params(&self) -> usize {
        let ids = self.ids();
        let size = |id: ParamId| self.params.get(id).len();
        let mut n = self.params.n_scalars();
        if !self.toggles.diff {
            n -= size(ids.type_emb);
        }
        if !self.toggles.category_active() {
            n -= size(ids.cat.0) + size(ids.cat.1);
        }
        if !self.toggles.topic_active() {
            n -= size(ids.topic.0) + size(ids.topic.1);
        }
        n
    }

    /// Parameter ids of the two classification heads.
    pub fn head_param_ids(&self) -> Vec<ParamId> {
        let ids = self.ids();
        vec![ids.cat.0, ids.cat.1, ids.topic.0, ids.topic.1]
    }

    pub fn projection(&self) -> ProjectionParams {
        let ids = self.ids();
        ProjectionParams {
            weight: self.params.get(ids.proj_w).clone(),
            bias: self.params.get(ids.proj_b).row(0).to_owned(),
        }
    }

    pub fn type_embeddings(&self) -> TypeEmbeddings {
        let t = self.params.get(self.ids().type_emb);
        TypeEmbeddings {
            state: t.row(FeatureType::State.index()).to_owned(),
            diff: t.row(FeatureType::Diff.index()).to_owned(),
        }
    }

    pub fn n_encoder_rows(&self, n_states: usize) -> usize {
        if self.toggles.diff {
            2 * n_states
        } else {
            n_states
        }
    }

    /// Encoder item for `raw` with nothing masked or dropped.
    pub fn item(&self, raw: Array2<f64>) -> EncoderItem {
        let n = raw.nrows();
        EncoderItem {
            mask: vec![false; self.n_encoder_rows(n)],
            dropped: vec![false; n],
            raw,
        }
    }

    fn check_item(&self, item: &EncoderItem) -> Result<()> {
        let n = item.raw.nrows();
        if n < 2 {
            return Err(VttError::Shape(format!("a sample needs at least 2 states, got {n}")));
        }
        if item.raw.ncols() != self.config.d_enc {
            return Err(VttError::Shape(format!(
                "state embeddings have width {}, model expects {}",
                item.raw.ncols(),
                self.config.d_enc
            )));
        }
        if item.mask.len() != self.n_encoder_rows(n) || item.dropped.len() != n {
            return Err(VttError::Shape(format!(
                "mask of {} rows and drop list of {} for {n} states",
                item.mask.len(),
                item.dropped.len()
            )));
        }
        Ok(())
    }

    /// Reference computation of the encoder input with plain matrix code.
    pub fn encoder_input(&self, item: &EncoderItem) -> Result<EncoderInput> {
        self.check_item(item)?;
        let proj = self.projection();
        let zero_dropped = |m: &mut Array2<f64>| {
            for (mut row, &d) in m.rows_mut().into_iter().zip(&item.dropped) {
                if d {
                    row.fill(0.0);
                }
            }
        };
        let mut v = project_states(&item.raw, &proj)?;
        zero_dropped(&mut v);
        let n = v.nrows();
        let mut mask = item.mask.clone();
        for (m, &d) in mask.iter_mut().zip(&item.dropped) {
            *m |= d;
        }
        if !self.toggles.diff {
            return assemble_encoder_input(&v, None, &TypeEmbeddings::zeros(self.config.d_model), &mask);
        }
        let dv = match self.toggles.diff_fusion {
            DiffFusion::Late => difference_features(&v, self.toggles.diff_first)?,
            DiffFusion::Early => {
                let mut raw = item.raw.clone();
                zero_dropped(&mut raw);
                project_states(&difference_features(&raw, self.toggles.diff_first)?, &proj)?
            }
        };
        debug_assert_eq!(dv.nrows(), n);
        assemble_encoder_input(&v, Some(&dv), &self.type_embeddings(), &mask)
    }

    fn encoder_rows_graph(&self, g: &mut Graph, item: &EncoderItem) -> Var {
        let ids = self.ids();
        let n = item.raw.nrows();
        let raw = g.input(item.raw.clone());
        let (pw, pb) = (g.param(ids.proj_w), g.param(ids.proj_b));
        let any_dropped = item.dropped.contains(&true);
        let mut v = g.linear(raw, pw, Some(pb));
        if any_dropped {
            v = g.mask_rows(v, item.dropped.clone());
        }
        let mut mask = item.mask.clone();
        for (m, &d) in mask.iter_mut().zip(&item.dropped) {
            *m |= d;
        }
        if !self.toggles.diff {
            return g.mask_rows(v, mask);
        }
        let dop = g.input(difference_operator(n, self.toggles.diff_first));
        let dv = match self.toggles.diff_fusion {
            DiffFusion::Late => g.matmul(dop, v),
            DiffFusion::Early => {
                let r = if any_dropped {
                    g.mask_rows(raw, item.dropped.clone())
                } else {
                    raw
                };
                let dr = g.matmul(dop, r);
                g.linear(dr, pw, Some(pb))
            }
        };
        let x = g.concat_rows(vec![v, dv]);
        let table = g.param(ids.type_emb);
        let types: Vec<usize> = (0..2 * n)
            .map(|i| {
                if i < n {
                    FeatureType::State.index()
                } else {
                    FeatureType::Diff.index()
                }
            })
            .collect();
        let t = g.gather(table, types);
        let x = g.add(x, t);
        g.mask_rows(x, mask)
    }

    fn stack(&self, g: &mut Graph, x: Var, ids: &StackIds, spec: Rc<AttentionSpec>) -> Var {
        let mut h = x;
        let rel = g.param(ids.rel);
        for l in &ids.layers {
            let (lg, lb) = (g.param(l.ln1.0), g.param(l.ln1.1));
            let n = g.layer_norm(h, lg, lb);
            let (wq, wk, wv, wo) = (g.param(l.wq), g.param(l.wk), g.param(l.wv), g.param(l.wo));
            let q = g.matmul(n, wq);
            let k = g.matmul(n, wk);
            let v = g.matmul(n, wv);
            let a = g.attention(q, k, v, rel, spec.clone());
            let a = g.matmul(a, wo);
            h = g.add(h, a);
            let (lg, lb) = (g.param(l.ln2.0), g.param(l.ln2.1));
            let n = g.layer_norm(h, lg, lb);
            let (w1, b1, w2, b2) = (g.param(l.w1), g.param(l.b1), g.param(l.w2), g.param(l.b2));
            let f = g.linear(n, w1, Some(b1));
            let f = g.gelu(f);
            let f = g.linear(f, w2, Some(b2));
            h = g.add(h, f);
        }
        let (lg, lb) = (g.param(ids.ln.0), g.param(ids.ln.1));
        g.layer_norm(h, lg, lb)
    }

    fn attention_spec(&self, segments: Vec<Segment>, causal: bool) -> Rc<AttentionSpec> {
        Rc::new(AttentionSpec {
            segments,
            causal,
            n_heads: self.config.n_heads,
            buckets: RelativeBuckets {
                bidirectional: !causal,
                n_buckets: self.config.rel_buckets,
                max_distance: self.config.rel_max_distance,
            },
        })
    }

    /// Run the encoder over already-assembled rows (one `Var` per sample).
    fn encode_graph(&self, g: &mut Graph, rows: &[Var], n_states: &[usize]) -> EncodedBatch {
        let ids = self.ids();
        let global = g.param(ids.global);
        let mut parts = Vec::with_capacity(2 * rows.len());
        let mut segments = Vec::with_capacity(rows.len());
        let mut start = 0;
        for &r in rows {
            let len = 1 + g.value(r).nrows();
            parts.push(global);
            parts.push(r);
            segments.push(Segment { start, len, valid: len });
            start += len;
        }
        let x = g.concat_rows(parts);
        let spec = self.attention_spec(segments.clone(), false);
        let out = self.stack(g, x, &ids.enc, spec);
        let global_rows = g.gather(out, segments.iter().map(|s| s.start).collect());
        let has_diff = self.toggles.diff;
        let mut first = Vec::new();
        let mut second = Vec::new();
        let mut rep_offsets = Vec::with_capacity(rows.len());
        for (seg, &n) in segments.iter().zip(n_states) {
            rep_offsets.push(first.len());
            for (a, b) in rep_rows(n, has_diff, self.toggles.rep_source) {
                first.push(seg.start + 1 + a);
                if let Some(b) = b {
                    second.push(seg.start + 1 + b);
                }
            }
        }
        let mut reps = g.gather(out, first);
        if !second.is_empty() {
            let extra = g.gather(out, second);
            reps = g.add(reps, extra);
        }
        EncodedBatch {
            reps,
            global: global_rows,
            rep_offsets,
        }
    }

    fn head(&self, g: &mut Graph, global: Var, head: (ParamId, ParamId)) -> Var {
        let (w, b) = (g.param(head.0), g.param(head.1));
        g.linear(global, w, Some(b))
    }

    /// Decoder logits for each `(rep row, input ids)` sequence; rows of the
    /// result follow the concatenated inputs.
    fn decode_graph(&self, g: &mut Graph, reps: Var, seqs: &[(usize, &[usize])]) -> Var {
        let ids = self.ids();
        let mut tokens = Vec::new();
        let mut rep_idx = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for &(r, input) in seqs {
            segments.push(Segment {
                start: tokens.len(),
                len: input.len(),
                valid: input.len(),
            });
            tokens.extend_from_slice(input);
            rep_idx.extend(std::iter::repeat_n(r, input.len()));
        }
        let table = g.param(ids.emb);
        let e = g.gather(table, tokens);
        let r = g.gather(reps, rep_idx);
        let x = g.add(e, r);
        let spec = self.attention_spec(segments, true);
        let h = self.stack(g, x, &ids.dec, spec);
        let (w, b) = (g.param(ids.out.0), g.param(ids.out.1));
        g.linear(h, w, Some(b))
    }

    /// Build the combined training objective for a batch on `g`.
    pub fn loss_graph(&self, g: &mut Graph, items: &[TrainItem], weights: LossWeights) -> Result<LossVars> {
        if items.is_empty() {
            return Err(VttError::Shape("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(items.len());
        let mut n_states = Vec::with_capacity(items.len());
        for it in items {
            self.check_item(&it.encoder)?;
            if it.targets.len() + 1 != it.encoder.raw.nrows() {
                return Err(VttError::Shape(format!(
                    "{} descriptions for {} states",
                    it.targets.len(),
                    it.encoder.raw.nrows()
                )));
            }
            if it.category >= self.config.n_categories || it.topic >= self.config.n_topics {
                return Err(VttError::Shape(format!(
                    "label out of range: category {} of {}, topic {} of {}",
                    it.category, self.config.n_categories, it.topic, self.config.n_topics
                )));
            }
            for t in &it.targets {
                if t.len() < 2 || t.iter().any(|&x| x >= self.config.vocab_size) {
                    return Err(VttError::Shape("target sequence too short or outside the vocabulary".into()));
                }
            }
            rows.push(self.encoder_rows_graph(g, &it.encoder));
            n_states.push(it.encoder.raw.nrows());
        }
        let enc = self.encode_graph(g, &rows, &n_states);
        let mut seqs = Vec::new();
        let mut targets = Vec::new();
        for (it, &off) in items.iter().zip(&enc.rep_offsets) {
            for (j, t) in it.targets.iter().enumerate() {
                seqs.push((off + j, &t[..t.len() - 1]));
                targets.extend(t[1..].iter().map(|&x| Some(x)));
            }
        }
        let logits = self.decode_graph(g, enc.reps, &seqs);
        let text = g.cross_entropy(logits, targets, weights.reduction);
        let mut total = text;
        let mut category = None;
        let mut topic = None;
        if self.toggles.category_active() {
            let l = self.head(g, enc.global, self.ids().cat);
            let c = g.cross_entropy(l, items.iter().map(|it| Some(it.category)).collect(), Reduction::Mean);
            let scaled = g.scale(c, weights.alpha);
            total = g.add(total, scaled);
            category = Some(c);
        }
        if self.toggles.topic_active() {
            let l = self.head(g, enc.global, self.ids().topic);
            let c = g.cross_entropy(l, items.iter().map(|it| Some(it.topic)).collect(), Reduction::Mean);
            let scaled = g.scale(c, weights.beta);
            total = g.add(total, scaled);
            topic = Some(c);
        }
        Ok(LossVars {
            total,
            text,
            category,
            topic,
        })
    }

    fn context_outputs(&self, g: &mut Graph, enc: &EncodedBatch, n_states: &[usize]) -> Result<Vec<ContextOutput>> {
        let ids = self.ids();
        let cat = self.head(g, enc.global, ids.cat);
        let topic = self.head(g, enc.global, ids.topic);
        let reps = g.value(enc.reps);
        let (global, cat, topic) = (g.value(enc.global), g.value(cat), g.value(topic));
        if [reps, global, cat, topic].iter().any(|m| m.iter().any(|x| !x.is_finite())) {
            return Err(VttError::NonFinite {
                what: "encoder activation",
                step: 0,
            });
        }
        Ok(n_states
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let off = enc.rep_offsets[b];
                ContextOutput {
                    transformation_reps: reps.slice(ndarray::s![off..off + n - 1, ..]).to_owned(),
                    global_rep: global.row(b).to_owned(),
                    category_logits: cat.row(b).to_owned(),
                    topic_logits: topic.row(b).to_owned(),
                }
            })
            .collect())
    }

    /// Encode a batch of samples.
    pub fn encode(&self, items: &[EncoderItem]) -> Result<Vec<ContextOutput>> {
        let mut g = Graph::new(&self.params);
        let mut rows = Vec::with_capacity(items.len());
        for it in items {
            self.check_item(it)?;
            rows.push(self.encoder_rows_graph(&mut g, it));
        }
        let n_states: Vec<usize> = items.iter().map(|it| it.raw.nrows()).collect();
        let enc = self.encode_graph(&mut g, &rows, &n_states);
        self.context_outputs(&mut g, &enc, &n_states)
    }

    /// Encode pre-assembled input rows.
    pub fn encode_context(&self, input: &EncoderInput) -> Result<ContextOutput> {
        let rows = input.n_rows();
        let n = input.n_states();
        if input.features.ncols() != self.config.d_model
            || n < 2
            || rows != self.n_encoder_rows(n)
            || input.has_diff() != self.toggles.diff
        {
            return Err(VttError::Shape(format!(
                "encoder input of {rows} rows x {} does not fit the model",
                input.features.ncols()
            )));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(input.features.clone());
        let enc = self.encode_graph(&mut g, &[x], &[n]);
        Ok(self.context_outputs(&mut g, &enc, &[n])?.remove(0))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(VttError::Shape(format!("token id {t} outside vocabulary of {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    /// Logits at every position of `prefix` for one representation.
    pub fn decode_logits(&self, rep: ArrayView1<f64>, prefix: &[usize]) -> Result<Array2<f64>> {
        self.check_ids(prefix)?;
        if prefix.is_empty() || rep.len() != self.config.d_model {
            return Err(VttError::Shape("decoder needs a non-empty prefix and a d_model rep".into()));
        }
        let mut g = Graph::new(&self.params);
        let reps = g.input(rep.to_owned().insert_axis(Axis(0)));
        let logits = self.decode_graph(&mut g, reps, &[(0, prefix)]);
        Ok(g.value(logits).clone())
    }

    /// Next-token logits after `prefix`.
    pub fn decode_step(&self, rep: ArrayView1<f64>, prefix: &[usize]) -> Result<Array1<f64>> {
        if prefix.first() != Some(&BOS) {
            return Err(VttError::Shape("decoder prefix must start with BOS".into()));
        }
        let logits = self.decode_logits(rep, prefix)?;
        Ok(logits.row(logits.nrows() - 1).to_owned())
    }

    /// Sample one description per transformation representation. All
    /// descriptions advance together; each step draws from `rng` in
    /// description order.
    pub fn sample_descriptions<R: Rng + ?Sized>(
        &self,
        reps: &Array2<f64>,
        cfg: &SamplingConfig,
        rng: &mut R,
    ) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>)> {
        cfg.validate()?;
        let n = reps.nrows();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut logprobs: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..cfg.max_len {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let mut g = Graph::new(&self.params);
            let rv = g.input(reps.clone());
            let seqs: Vec<(usize, &[usize])> = active.iter().map(|&i| (i, prefixes[i].as_slice())).collect();
            let len = prefixes[active[0]].len();
            let logits = self.decode_graph(&mut g, rv, &seqs);
            let lv = g.value(logits);
            for (k, &i) in active.iter().enumerate() {
                let row = lv.row(k * len + len - 1);
                let probs = softmax(row, 1.0);
                let mut tempered = if cfg.temperature == 1.0 {
                    probs.clone()
                } else {
                    softmax(row, cfg.temperature)
                };
                // Padding and BOS are never valid continuations.
                tempered[PAD] = 0.0;
                tempered[BOS] = 0.0;
                let support = nucleus_support(&tempered, cfg.top_k, cfg.top_p);
                let id = sample_from(&support, rng);
                logprobs[i].push(probs[id].ln());
                prefixes[i].push(id);
                if id == EOS {
                    done[i] = true;
                }
            }
        }
        let ids = prefixes.into_iter().map(|mut p| p.split_off(1)).collect();
        Ok((ids, logprobs))
    }
}

/// Deterministic per-sample generator stream.
pub fn generation_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    stream_rng(seed, &format!("generate/{sample_id}"))
}

/// Decode all transformations of one encoded sample.
pub fn generate_sample(
    model: &TtNet,
    vocab: &Vocabulary,
    sample_id: &str,
    context: &ContextOutput,
    cfg: &SamplingConfig,
) -> Result<GenerationResult> {
    if context.n_transformations() == 0 {
        return Err(VttError::Shape("context has no transformation representations".into()));
    }
    let mut rng = generation_rng(cfg.seed, sample_id);
    let (token_ids, token_logprobs) = model.sample_descriptions(&context.transformation_reps, cfg, &mut rng)?;
    Ok(GenerationResult {
        sample_id: sample_id.to_string(),
        transformations: token_ids.iter().map(|ids| vocab.decode(ids)).collect(),
        token_ids,
        token_logprobs,
    })
}

/// Raw embeddings of a sample as a model item.
pub fn sample_item(model: &TtNet, sample: &VttSample, store: &EmbeddingStore) -> Result<EncoderItem> {
    Ok(model.item(raw_state_matrix(sample, store)?))
}

/// Generate descriptions for every sample of `split`, in manifest order.
pub fn generate_split(
    model: &TtNet,
    vocab: &Vocabulary,
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    split: Split,
    cfg: &SamplingConfig,
) -> Result<Vec<GenerationResult>> {
    let samples: Vec<&VttSample> = manifest.split(split).collect();
    samples
        .par_iter()
        .map(|s| {
            let item = sample_item(model, s, store)?;
            let ctx = model.encode(std::slice::from_ref(&item))?.remove(0);
            generate_sample(model, vocab, &s.sample_id, &ctx, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::nll_loss;
    use rand::SeedableRng;

    pub(crate) fn tiny_config() -> TtNetConfig {
        TtNetConfig {
            d_enc: 6,
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 16,
            vocab_size: 12,
            n_categories: 3,
            n_topics: 4,
            rel_buckets: 8,
            rel_max_distance: 16,
        }
    }

    fn raw(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn graph_input_matches_reference_assembly() {
        for toggles in [
            Toggles::default(),
            Toggles {
                diff: false,
                ..Toggles::default()
            },
            Toggles {
                diff_fusion: DiffFusion::Early,
                diff_first: DiffFirst::Zero,
                ..Toggles::default()
            },
        ] {
            let m = TtNet::new(tiny_config(), toggles, 3).unwrap();
            let mut item = m.item(raw(1, 4, 6));
            item.mask[2] = true;
            item.dropped[1] = true;
            let reference = m.encoder_input(&item).unwrap();
            let mut g = Graph::new(&m.params);
            let v = m.encoder_rows_graph(&mut g, &item);
            assert_eq!(g.value(v), &reference.features);
            let via_input = m.encode_context(&reference).unwrap();
            let via_raw = m.encode(&[item]).unwrap().remove(0);
            assert_eq!(via_input, via_raw);
        }
    }

    #[test]
    fn shapes() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 0).unwrap();
        let out = m.encode(&[m.item(raw(2, 2, 6))]).unwrap().remove(0);
        assert_eq!(out.transformation_reps.dim(), (1, 8));
        assert_eq!(out.category_logits.len(), 3);
        assert_eq!(out.topic_logits.len(), 4);
        let logits = m.decode_step(out.transformation_reps.row(0), &[BOS]).unwrap();
        assert_eq!(logits.len(), 12);
        assert!(m.decode_step(out.transformation_reps.row(0), &[BOS, 99]).is_err());
        assert!(m.decode_step(out.transformation_reps.row(0), &[4]).is_err());
    }

    #[test]
    fn permuting_middle_states_changes_reps() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 5).unwrap();
        let x = raw(3, 5, 6);
        let mut y = x.clone();
        for j in 0..6 {
            y.swap([1, j], [2, j]);
        }
        let a = m.encode(&[m.item(x)]).unwrap().remove(0);
        let b = m.encode(&[m.item(y)]).unwrap().remove(0);
        assert_ne!(a.transformation_reps, b.transformation_reps);
    }

    #[test]
    fn batch_invariance() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 6).unwrap();
        let items: Vec<EncoderItem> = [3usize, 5, 2].iter().enumerate().map(|(i, &n)| m.item(raw(10 + i as u64, n, 6))).collect();
        let batched = m.encode(&items).unwrap();
        for (it, b) in items.iter().zip(&batched) {
            let alone = m.encode(std::slice::from_ref(it)).unwrap().remove(0);
            for (x, y) in alone.transformation_reps.iter().zip(&b.transformation_reps) {
                assert!((x - y).abs() < 1e-6);
            }
            for (x, y) in alone.topic_logits.iter().zip(&b.topic_logits) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_rep_equals_rep_free_decoder() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 7).unwrap();
        let zero = Array1::zeros(8);
        let prefix = [BOS, 5, 6];
        let with_rep = m.decode_logits(zero.view(), &prefix).unwrap();
        // Rep-free path: embeddings alone through the same stack.
        let mut g = Graph::new(&m.params);
        let ids = m.ids();
        let table = g.param(ids.emb);
        let x = g.gather(table, prefix.to_vec());
        let spec = m.attention_spec(
            vec![Segment {
                start: 0,
                len: 3,
                valid: 3,
            }],
            true,
        );
        let h = m.stack(&mut g, x, &ids.dec, spec);
        let (w, b) = (g.param(ids.out.0), g.param(ids.out.1));
        let l = g.linear(h, w, Some(b));
        assert_eq!(g.value(l), &with_rep);
        let other = m.decode_step(Array1::from_elem(8, 0.5).view(), &prefix).unwrap();
        assert_ne!(other, with_rep.row(2).to_owned());
    }

    #[test]
    fn decoder_is_causal() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 8).unwrap();
        let rep = Array1::from_elem(8, 0.1);
        let a = m.decode_logits(rep.view(), &[BOS, 4, 5, 6]).unwrap();
        let b = m.decode_logits(rep.view(), &[BOS, 4, 9, 10]).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn recorded_logprobs_match_sequence_nll() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 9).unwrap();
        let reps = m.encode(&[m.item(raw(4, 3, 6))]).unwrap().remove(0).transformation_reps;
        let cfg = SamplingConfig {
            top_k: 12,
            top_p: 1.0,
            max_len: 6,
            ..SamplingConfig::default()
        };
        let (ids, lps) = m.sample_descriptions(&reps, &cfg, &mut generation_rng(1, "s")).unwrap();
        for (i, (seq, lp)) in ids.iter().zip(&lps).enumerate() {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&seq[..seq.len() - 1]);
            let logits = m.decode_logits(reps.row(i), &prefix).unwrap();
            let nll = nll_loss(&logits, seq, Reduction::Sum).unwrap();
            let prod: f64 = lp.iter().map(|x| x.exp()).product();
            assert!(((-nll).exp() - prod).abs() < 1e-6);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 10).unwrap();
        let reps = m.encode(&[m.item(raw(5, 4, 6))]).unwrap().remove(0).transformation_reps;
        let cfg = SamplingConfig::default();
        let a = m.sample_descriptions(&reps, &cfg, &mut generation_rng(3, "x")).unwrap();
        let b = m.sample_descriptions(&reps, &cfg, &mut generation_rng(3, "x")).unwrap();
        assert_eq!(a, b);
        let greedy = m.sample_descriptions(&reps, &SamplingConfig::greedy(), &mut generation_rng(3, "x")).unwrap();
        for (i, seq) in greedy.0.iter().enumerate() {
            let mut prefix = vec![BOS];
            for &t in seq {
                let logits = m.decode_step(reps.row(i), &prefix).unwrap();
                let argmax = (EOS..logits.len()).fold(EOS, |b, j| if logits[j] > logits[b] { j } else { b });
                assert_eq!(t, argmax);
                prefix.push(t);
            }
        }
    }

    #[test]
    fn active_parameter_accounting() {
        let on = TtNet::new(tiny_config(), Toggles::default(), 0).unwrap();
        let off = TtNet::new(
            tiny_config(),
            Toggles {
                diff: false,
                mtm: false,
                aux: false,
                ..Toggles::default()
            },
            0,
        )
        .unwrap();
        let c = tiny_config();
        let type_emb = 2 * c.d_model;
        let heads = (c.d_model + 1) * (c.n_categories + c.n_topics);
        assert_eq!(on.n_active_params() - off.n_active_params(), type_emb + heads);
        assert_eq!(on.params, off.params);
    }

    #[test]
    fn from_params_checks_layout() {
        let m = TtNet::new(tiny_config(), Toggles::default(), 1).unwrap();
        let back = TtNet::from_params(tiny_config(), Toggles::default(), m.params.clone()).unwrap();
        assert_eq!(back, m);
        let other = TtNet::new(TtNetConfig { d_ff: 8, ..tiny_config() }, Toggles::default(), 1).unwrap();
        assert!(TtNet::from_params(tiny_config(), Toggles::default(), other.params).is_err());
    }
}
