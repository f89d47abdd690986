use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use polyadapt::adapter::{AdapterConfig, Placement};
use polyadapt::model::{Activation, ModelConfig};
use polyadapt::tasks::{Pooling, Task};
use polyadapt::training::{Batching, DataScope, FinetuneConfig, PretrainConfig, Regime, Tuning};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Flat experiment configuration. Every key is optional in the JSON file;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub tuning: Tuning,
    /// `multilingual`, `monolingual` or `cross`.
    pub scope: String,
    /// Empty means every language in the corpus.
    pub languages: Vec<String>,
    pub train_language: Option<String>,
    pub eval_language: Option<String>,
    pub batching: Option<Batching>,
    pub language_tags: Option<bool>,
    pub samples_per_language: Option<usize>,

    /// JSONL corpus; synthetic data is generated when absent.
    pub data: Option<PathBuf>,
    pub n_languages: usize,
    pub n_per_language: usize,
    pub imbalance: f64,
    pub max_tokens: usize,

    pub base_checkpoint: Option<PathBuf>,
    pub d_model: usize,
    pub n_layers_encoder: usize,
    pub n_layers_decoder: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub activation: Activation,

    pub bottleneck_dim: usize,
    pub adapter_activation: Activation,
    pub placement: Placement,
    pub moe_experts: usize,
    pub moe_expert_dim: usize,
    pub moe_top_k: usize,

    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub mask_rate: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub patience: usize,
    pub max_steps: Option<usize>,
    pub eval_per_language: Option<usize>,
    pub max_decode_len: usize,
    pub temperature: f64,
    pub pooling: Pooling,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = polyadapt::training::toy_model_config(0);
        let ft = FinetuneConfig::default();
        let pre = PretrainConfig::default();
        Self {
            seed: 0,
            task: Task::Summarization,
            tuning: Tuning::Adapter,
            scope: "multilingual".into(),
            languages: Vec::new(),
            train_language: None,
            eval_language: None,
            batching: None,
            language_tags: None,
            samples_per_language: None,
            data: None,
            n_languages: 4,
            n_per_language: 300,
            imbalance: 1.0,
            max_tokens: 256,
            base_checkpoint: None,
            d_model: model.d_model,
            n_layers_encoder: model.n_layers_encoder,
            n_layers_decoder: model.n_layers_decoder,
            n_heads: model.n_heads,
            d_ff: model.d_ff,
            max_seq_len: model.max_seq_len,
            dropout: model.dropout,
            activation: model.activation,
            bottleneck_dim: 16,
            adapter_activation: Activation::Relu,
            placement: Placement::BeforeNorm,
            moe_experts: 4,
            moe_expert_dim: 8,
            moe_top_k: 2,
            pretrain_steps: pre.steps,
            pretrain_batch_size: pre.batch_size,
            pretrain_learning_rate: pre.learning_rate,
            mask_rate: pre.mask_rate,
            epochs: ft.epochs,
            batch_size: ft.batch_size,
            learning_rate: None,
            patience: ft.patience,
            max_steps: None,
            eval_per_language: None,
            max_decode_len: ft.max_decode_len,
            temperature: ft.temperature,
            pooling: ft.pooling,
        }
    }
}

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').with_context(|| format!("override `{s}` is not key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides and validates.
    /// All unknown keys and ill-typed values are reported together.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                match serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))? {
                    Value::Object(m) => m,
                    _ => bail!("config {} must be a JSON object", p.display()),
                }
            }
            None => Map::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            doc.insert(k, v);
        }
        Self::from_map(doc)
    }

    pub fn from_map(doc: Map<String, Value>) -> Result<Self> {
        let Value::Object(defaults) = serde_json::to_value(Self::default())? else { unreachable!() };
        let mut problems = Vec::new();
        for (k, v) in &doc {
            if !defaults.contains_key(k) {
                problems.push(format!("unknown key `{k}`"));
                continue;
            }
            let mut probe = defaults.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = serde_json::from_value::<Self>(Value::Object(probe)) {
                problems.push(format!("bad value for `{k}`: {e}"));
            }
        }
        if !problems.is_empty() {
            bail!("invalid configuration:\n  {}", problems.join("\n  "));
        }
        let mut merged = defaults;
        merged.extend(doc);
        let cfg: Self = serde_json::from_value(Value::Object(merged))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !["multilingual", "monolingual", "cross"].contains(&self.scope.as_str()) {
            problems.push(format!("`scope` must be multilingual, monolingual or cross, got `{}`", self.scope));
        }
        if self.scope == "cross" && (self.train_language.is_none() || self.eval_language.is_none()) {
            problems.push("cross scope needs `train_language` and `eval_language`".into());
        }
        if self.scope == "monolingual" && self.train_language.is_none() && self.languages.len() != 1 {
            problems.push("monolingual scope needs `train_language` or exactly one entry in `languages`".into());
        }
        if self.batch_size == 0 {
            problems.push("`batch_size` must be >= 1".into());
        }
        if let Err(e) = self.model_config(8).validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.adapter_config().validate() {
            problems.push(e.to_string());
        }
        if !problems.is_empty() {
            bail!("invalid configuration:\n  {}", problems.join("\n  "));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers_encoder: self.n_layers_encoder,
            n_layers_decoder: self.n_layers_decoder,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            activation: self.activation,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            bottleneck_dim: self.bottleneck_dim,
            activation: self.adapter_activation,
            placement: self.placement,
            moe_experts: self.moe_experts,
            moe_expert_dim: self.moe_expert_dim,
            moe_top_k: self.moe_top_k,
            ..AdapterConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            mask_rate: self.mask_rate,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            adapter: self.adapter_config(),
            temperature: self.temperature,
            pooling: self.pooling,
            max_decode_len: self.max_decode_len,
            eval_per_language: self.eval_per_language,
            max_steps: self.max_steps,
        }
    }

    /// The regime, with `available` standing in for an empty `languages`.
    pub fn regime(&self, available: &[String]) -> Regime {
        let langs = if self.languages.is_empty() { available.to_vec() } else { self.languages.clone() };
        let scope = match self.scope.as_str() {
            "monolingual" => DataScope::Monolingual(self.train_language.clone().unwrap_or_else(|| langs[0].clone())),
            "cross" => DataScope::Cross {
                train: self.train_language.clone().unwrap_or_default(),
                eval: self.eval_language.clone().unwrap_or_default(),
            },
            _ => DataScope::Multilingual(langs),
        };
        let mut r = Regime::for_task(self.task, self.tuning, scope, self.seed);
        if let Some(b) = self.batching {
            r.batching = b;
        }
        if let Some(t) = self.language_tags {
            r.language_tags = t;
        }
        r.samples_per_language = self.samples_per_language;
        r
    }
}
