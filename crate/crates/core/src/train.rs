//! Optimization of the combined objective, learning-rate schedule, AdamW and
//! checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{log_softmax_rows, Graph, ParamSet, Reduction};
use crate::data::{DatasetManifest, EmbeddingStore, Split};
use crate::decoder::Vocabulary;
use crate::encoder::{sample_mask_plan, MtmPolicy};
use crate::encoding::raw_state_matrix;
use crate::error::{Result, VttError};
use crate::model::{LossWeights, Toggles, TrainItem, TtNet, TtNetConfig};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    #[default]
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub decay: Decay,
    pub reduction: Reduction,
    pub toggles: Toggles,
    pub mtm: MtmPolicy,
    /// Stop after this many updates (the schedule still spans all epochs
    /// unless this is smaller).
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.025,
            beta: 0.1,
            lr_peak: 1e-4,
            warmup_steps: 2000,
            epochs: 50,
            batch_size: 32,
            weight_decay: 0.01,
            decay: Decay::Linear,
            reduction: Reduction::Mean,
            toggles: Toggles::default(),
            mtm: MtmPolicy::default(),
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the small CPU model: a higher peak rate and a short
    /// warmup so a few thousand updates suffice.
    pub fn desk() -> Self {
        TrainConfig {
            lr_peak: 1e-3,
            warmup_steps: 100,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(VttError::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(VttError::Config("lr_peak must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(VttError::Config("batch_size and epochs must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(VttError::Config("weight_decay must be non-negative".into()));
        }
        self.mtm.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            reduction: self.reduction,
        }
    }
}

fn mean_ce(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(VttError::Shape(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(VttError::Shape(format!("label {l} out of range for {} classes", logits.ncols())));
    }
    let logp = log_softmax_rows(logits);
    Ok(-labels.iter().enumerate().map(|(r, &l)| logp[[r, l]]).sum::<f64>() / labels.len().max(1) as f64)
}

/// `text + alpha * CE(category) + beta * CE(topic)`, with a classification
/// term dropped (exactly zero) when its auxiliary task is off.
pub fn total_loss(
    text_loss: f64,
    category_logits: &Array2<f64>,
    topic_logits: &Array2<f64>,
    category_labels: &[usize],
    topic_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let cat = if cfg.toggles.category_active() {
        mean_ce(category_logits, category_labels)?
    } else {
        0.0
    };
    let topic = if cfg.toggles.topic_active() {
        mean_ce(topic_logits, topic_labels)?
    } else {
        0.0
    };
    Ok(combine_losses(text_loss, cat, topic, cfg.alpha, cfg.beta))
}

pub fn combine_losses(text: f64, category: f64, topic: f64, alpha: f64, beta: f64) -> f64 {
    text + alpha * category + beta * topic
}

/// Linear warmup from 0 to `lr_peak`, then linear (or cosine) decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, total_steps: usize) -> Result<f64> {
    if total_steps <= cfg.warmup_steps {
        return Err(VttError::Config(format!(
            "total_steps {total_steps} must exceed warmup_steps {}",
            cfg.warmup_steps
        )));
    }
    if step > total_steps {
        return Err(VttError::Config(format!("step {step} beyond total_steps {total_steps}")));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let frac = (step - cfg.warmup_steps) as f64 / (total_steps - cfg.warmup_steps) as f64;
    Ok(match cfg.decay {
        Decay::Linear => cfg.lr_peak * (1.0 - frac),
        Decay::Cosine => cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, decay) = (self.beta1, self.beta2, self.eps, 1.0 - lr * self.weight_decay);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Position of a seeded generator, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| VttError::Checkpoint(format!("bad rng {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("position"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    format: u32,
    model: TtNetConfig,
    train: TrainConfig,
    step: u64,
    epoch: usize,
    vocab: Vec<String>,
    categories: Vec<String>,
    topics: Vec<String>,
    shuffle_rng: RngState,
    mtm_rng: RngState,
    adam_t: u64,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

/// Everything needed to use or resume a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TtNet,
    pub train: TrainConfig,
    pub optimizer: AdamW,
    pub step: u64,
    pub epoch: usize,
    pub vocab: Vocabulary,
    pub categories: Vec<String>,
    pub topics: Vec<String>,
    pub shuffle_rng: RngState,
    pub mtm_rng: RngState,
}

const CKPT_MAGIC: &[u8; 4] = b"VTTC";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    /// `VTTC`, u32 version, u64 metadata length, JSON metadata, then the
    /// parameters, Adam first moments and second moments as little-endian
    /// f64 in parameter order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let meta = CheckpointMeta {
            format: CKPT_VERSION,
            model: self.model.config.clone(),
            train: self.train.clone(),
            step: self.step,
            epoch: self.epoch,
            vocab: self.vocab.tokens().to_vec(),
            categories: self.categories.clone(),
            topics: self.topics.clone(),
            shuffle_rng: self.shuffle_rng.clone(),
            mtm_rng: self.mtm_rng.clone(),
            adam_t: self.optimizer.t,
            names: params.names().to_vec(),
            shapes: params.values().iter().map(Array2::dim).collect(),
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::with_capacity(16 + meta.len() + 24 * params.n_scalars());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for group in [params.values(), &self.optimizer.m[..], &self.optimizer.v[..]] {
            for a in group {
                for x in a.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| VttError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(VttError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + meta_len).ok_or_else(|| err("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(body).map_err(|e| VttError::Checkpoint(format!("metadata: {e}")))?;
        if meta.names.len() != meta.shapes.len() {
            return Err(err("names and shapes disagree"));
        }
        let mut pos = 16 + meta_len;
        let mut read_group = || -> Result<Vec<Array2<f64>>> {
            meta.shapes
                .iter()
                .map(|&(r, c)| {
                    let n = r * c;
                    let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| err("truncated tensor data"))?;
                    pos += 8 * n;
                    let vals = raw
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    Ok(Array2::from_shape_vec((r, c), vals).expect("shape matches length"))
                })
                .collect()
        };
        let values = read_group()?;
        let m = read_group()?;
        let v = read_group()?;
        if pos != bytes.len() {
            return Err(err("trailing bytes"));
        }
        let mut params = ParamSet::new();
        for (name, value) in meta.names.iter().zip(values) {
            params.add(name.clone(), value);
        }
        let model = TtNet::from_params(meta.model.clone(), meta.train.toggles, params)?;
        let vocab_len = meta.vocab.len();
        let vocab = Vocabulary::from_tokens(meta.vocab)?;
        if vocab_len != model.config.vocab_size {
            return Err(err("vocabulary size does not match the model"));
        }
        Ok(Checkpoint {
            optimizer: AdamW {
                t: meta.adam_t,
                m,
                v,
                ..AdamW::new(&model.params, meta.train.weight_decay)
            },
            model,
            train: meta.train,
            step: meta.step,
            epoch: meta.epoch,
            vocab,
            categories: meta.categories,
            topics: meta.topics,
            shuffle_rng: meta.shuffle_rng,
            mtm_rng: meta.mtm_rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| VttError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| VttError::io(path, e))?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr_last: f64,
    pub wall_sec: f64,
}

pub fn write_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in log {
        serde_json::to_writer(&mut out, e).expect("log serializes");
        out.write_all(b"\n").expect("vec write");
    }
    fs::write(path, out).map_err(|e| VttError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation loss, or the final state without validation data.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Total loss of every update, in order.
    pub step_losses: Vec<f64>,
}

/// Model inputs, encoded descriptions and label indices for one split.
pub fn prepare_items(
    manifest: &DatasetManifest,
    split: Split,
    store: &EmbeddingStore,
    vocab: &Vocabulary,
) -> Result<Vec<TrainItem>> {
    manifest
        .split(split)
        .map(|s| {
            let raw = raw_state_matrix(s, store)?;
            let n = raw.nrows();
            Ok(TrainItem {
                encoder: crate::model::EncoderItem {
                    raw,
                    mask: Vec::new(),
                    dropped: vec![false; n],
                },
                targets: s.transformations.iter().map(|t| vocab.encode(t)).collect(),
                category: manifest
                    .category_index(&s.category)
                    .ok_or_else(|| VttError::invalid("sample", s.sample_id.clone(), "unknown category"))?,
                topic: manifest
                    .topic_index(&s.topic)
                    .ok_or_else(|| VttError::invalid("sample", s.sample_id.clone(), "unknown topic"))?,
            })
        })
        .collect()
}

fn with_masks<'a>(
    model: &TtNet,
    items: impl Iterator<Item = &'a TrainItem>,
    policy: Option<(&MtmPolicy, &mut ChaCha8Rng)>,
) -> Vec<TrainItem> {
    let mut policy = policy;
    items
        .map(|it| {
            let rows = model.n_encoder_rows(it.encoder.raw.nrows());
            let mask = match policy.as_mut() {
                Some((p, rng)) => sample_mask_plan(p, rows, true, &mut **rng),
                None => vec![false; rows],
            };
            let mut it = it.clone();
            it.encoder.mask = mask;
            it
        })
        .collect()
}

/// Mean total loss over `items` without masking, batch-size weighted.
pub fn evaluate_loss(model: &TtNet, items: &[TrainItem], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in items.chunks(cfg.batch_size) {
        let batch = with_masks(model, chunk.iter(), None);
        let mut g = Graph::new(&model.params);
        let l = model.loss_graph(&mut g, &batch, cfg.loss_weights())?;
        sum += g.scalar(l.total) * chunk.len() as f64;
    }
    Ok(sum / items.len().max(1) as f64)
}

/// Gradients of the batch objective with respect to every parameter, plus
/// the loss value.
pub fn batch_gradients(model: &TtNet, batch: &[TrainItem], cfg: &TrainConfig) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut g = Graph::new(&model.params);
    let l = model.loss_graph(&mut g, batch, cfg.loss_weights())?;
    let loss = g.scalar(l.total);
    let grads = g.backward(l.total).for_params(&g);
    Ok((loss, grads))
}

/// Fit a fresh model on the train split; validation loss (if a val split
/// exists) selects the best checkpoint. Single-threaded and deterministic
/// for a given seed.
pub fn train(
    manifest: &DatasetManifest,
    store: &EmbeddingStore,
    vocab: &Vocabulary,
    model_cfg: &TtNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_items = prepare_items(manifest, Split::Train, store, vocab)?;
    if train_items.is_empty() {
        return Err(VttError::Config("the train split is empty".into()));
    }
    let val_items = prepare_items(manifest, Split::Val, store, vocab)?;
    let mut model = TtNet::new(model_cfg.clone(), cfg.toggles, derive_seed(cfg.seed, "model"))?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut shuffle_rng = stream_rng(cfg.seed, "train/shuffle");
    let mut mtm_rng = stream_rng(cfg.seed, "train/mtm");

    let steps_per_epoch = train_items.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs * steps_per_epoch;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let started = Instant::now();
    let mut step = 0usize;
    let mut log = Vec::new();
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut lr = 0.0;
    let snapshot = |model: &TtNet, opt: &AdamW, step: usize, epoch: usize, sh: &ChaCha8Rng, mt: &ChaCha8Rng| Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        optimizer: opt.clone(),
        step: step as u64,
        epoch,
        vocab: vocab.clone(),
        categories: manifest.categories.clone(),
        topics: manifest.topics.clone(),
        shuffle_rng: RngState::capture(sh),
        mtm_rng: RngState::capture(mt),
    };

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=cfg.epochs {
        if step >= total_steps {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            let policy = cfg.toggles.mtm.then_some((&cfg.mtm, &mut mtm_rng));
            let batch = with_masks(&model, chunk.iter().map(|&i| &train_items[i]), policy);
            let (loss, grads) = batch_gradients(&model, &batch, cfg)?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(VttError::NonFinite { what: "loss", step });
            }
            lr = lr_schedule(step, cfg, total_steps)?;
            opt.step(&mut model.params, &grads, lr);
            step += 1;
            step_losses.push(loss);
            epoch_sum += loss;
            epoch_n += 1;
        }
        let val_loss = if val_items.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, &val_items, cfg)?)
        };
        let entry = EpochLog {
            epoch,
            train_loss: epoch_sum / epoch_n.max(1) as f64,
            val_loss,
            lr_last: lr,
            wall_sec: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {} lr {:.2e}",
            entry.train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
            lr
        );
        log.push(entry);
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, snapshot(&model, &opt, step, epoch, &shuffle_rng, &mtm_rng)));
            }
        }
    }
    let last = snapshot(&model, &opt, step, log.len(), &shuffle_rng, &mtm_rng);
    Ok(TrainOutcome {
        best: best.map_or_else(|| last.clone(), |(_, c)| c),
        last,
        log,
        step_losses,
    })
}
