//! Per-command option files. Every command reads its options from an
//! optional JSON file, applies command-line flags on top and echoes the
//! result before doing any work.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vtt_core::data::Split;
use vtt_core::dataset::SplitRatios;
use vtt_core::decoder::SamplingConfig;
use vtt_core::metrics::Metric;
use vtt_core::model::TtNetConfig;
use vtt_core::train::TrainConfig;
use vtt_core::VttError;

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        VttError::Parse {
            path: path.into(),
            line: e.line(),
            reason: e.to_string(),
        }
        .into()
    })
}

pub fn echo<T: Serialize>(command: &str, options: &T) {
    let line = serde_json::json!({ "command": command, "config": options });
    eprintln!("{line}");
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitOptions {
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

/// Architecture choice. Data-dependent sizes (embedding width, vocabulary,
/// label counts) are filled in from the dataset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub preset: Preset,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub d_ff: Option<usize>,
}

impl Architecture {
    pub fn resolve(&self, d_enc: usize, vocab: usize, categories: usize, topics: usize) -> TtNetConfig {
        let mut cfg = match self.preset {
            Preset::Desk => TtNetConfig::desk(d_enc, vocab, categories, topics),
            Preset::Full => TtNetConfig::full(d_enc, vocab, categories, topics),
        };
        cfg.d_model = self.d_model.unwrap_or(cfg.d_model);
        cfg.n_heads = self.n_heads.unwrap_or(cfg.n_heads);
        cfg.enc_layers = self.enc_layers.unwrap_or(cfg.enc_layers);
        cfg.dec_layers = self.dec_layers.unwrap_or(cfg.dec_layers);
        cfg.d_ff = self.d_ff.unwrap_or(cfg.d_ff);
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub model: Architecture,
    pub train: TrainConfig,
    /// Words seen fewer times than this map to the unknown token.
    pub min_freq: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            model: Architecture::default(),
            train: TrainConfig::desk(),
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub split: Split,
    pub sampling: SamplingConfig,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            split: Split::Test,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateOptions {
    pub split: Split,
    pub metrics: Vec<Metric>,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            split: Split::Test,
            metrics: Metric::ALL.to_vec(),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',')
        .map(|m| {
            serde_json::from_value(serde_json::Value::String(m.trim().to_string()))
                .map_err(|_| VttError::Config(format!("unknown metric `{m}`")).into())
        })
        .collect()
}

pub fn parse_ratios(text: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| VttError::Config(format!("ratios must be three numbers, got `{text}`")))?;
    match parts[..] {
        [a, b, c] => Ok(SplitRatios::new(a, b, c)?),
        _ => Err(VttError::Config(format!("ratios must be three numbers, got `{text}`")).into()),
    }
}
