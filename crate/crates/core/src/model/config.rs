use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            other => Err(Error::Invalid(format!("unknown activation `{other}` (expected relu or gelu)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Gelu => "gelu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    EncoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers_encoder: usize,
    pub n_layers_decoder: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Output projection shares the token embedding table.
    pub tie_embeddings: bool,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes on a single core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers_encoder: 4,
            n_layers_decoder: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            dropout: 0.1,
            activation: Activation::Gelu,
            tie_embeddings: true,
            layer_norm_eps: 1e-5,
        }
    }

    /// RoBERTa-base-sized encoder (UniXcoder-like). Used for parameter
    /// accounting only.
    pub fn base_encoder() -> Self {
        Self {
            vocab_size: 51_416,
            d_model: 768,
            n_layers_encoder: 12,
            n_layers_decoder: 0,
            n_heads: 12,
            d_ff: 3072,
            max_seq_len: 1026,
            dropout: 0.1,
            activation: Activation::Gelu,
            tie_embeddings: true,
            layer_norm_eps: 1e-5,
        }
    }

    /// 12+12 layer encoder-decoder (CodeT5-base-like). Accounting only.
    pub fn base_encoder_decoder() -> Self {
        Self { vocab_size: 32_100, n_layers_decoder: 12, max_seq_len: 512, ..Self::base_encoder() }
    }

    pub fn mode(&self) -> Mode {
        if self.n_layers_decoder == 0 { Mode::EncoderOnly } else { Mode::EncoderDecoder }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 4 {
            problems.push(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!("d_model ({}) must be a positive multiple of n_heads ({})", self.d_model, self.n_heads));
        }
        if self.max_seq_len == 0 {
            problems.push("max_seq_len must be >= 1".into());
        }
        if self.n_layers_encoder == 0 {
            problems.push("n_layers_encoder must be >= 1".into());
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if problems.is_empty() { Ok(()) } else { Err(Error::Config(problems)) }
    }

    /// Every parameter the model owns, in registry order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.tok".into(), vec![v, d]),
            ("embed.pos".into(), vec![self.max_seq_len, d]),
        ];
        let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.g"), vec![d]));
            out.push((format!("{p}.b"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{proj}.w"), vec![d, d]));
                out.push((format!("{p}.{proj}.b"), vec![d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, ff]));
            out.push((format!("{p}.b1"), vec![ff]));
            out.push((format!("{p}.w2"), vec![ff, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        norm(&mut out, "embed.ln");
        for l in 0..self.n_layers_encoder {
            attn(&mut out, &format!("enc.{l}.attn"));
            norm(&mut out, &format!("enc.{l}.ln1"));
            ffn(&mut out, &format!("enc.{l}.ffn"));
            norm(&mut out, &format!("enc.{l}.ln2"));
        }
        if self.n_layers_decoder > 0 {
            norm(&mut out, "dec.embed.ln");
        }
        for l in 0..self.n_layers_decoder {
            attn(&mut out, &format!("dec.{l}.self"));
            norm(&mut out, &format!("dec.{l}.ln1"));
            attn(&mut out, &format!("dec.{l}.cross"));
            norm(&mut out, &format!("dec.{l}.ln2"));
            ffn(&mut out, &format!("dec.{l}.ffn"));
            norm(&mut out, &format!("dec.{l}.ln3"));
        }
        if !self.tie_embeddings {
            out.push(("lm.w".into(), vec![d, v]));
        }
        out.push(("lm.bias".into(), vec![v]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn to_meta(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        m.insert("model.vocab_size".into(), self.vocab_size.to_string());
        m.insert("model.d_model".into(), self.d_model.to_string());
        m.insert("model.n_layers_encoder".into(), self.n_layers_encoder.to_string());
        m.insert("model.n_layers_decoder".into(), self.n_layers_decoder.to_string());
        m.insert("model.n_heads".into(), self.n_heads.to_string());
        m.insert("model.d_ff".into(), self.d_ff.to_string());
        m.insert("model.max_seq_len".into(), self.max_seq_len.to_string());
        m.insert("model.dropout".into(), self.dropout.to_string());
        m.insert("model.activation".into(), self.activation.as_str().into());
        m.insert("model.tie_embeddings".into(), self.tie_embeddings.to_string());
        m.insert("model.layer_norm_eps".into(), self.layer_norm_eps.to_string());
        m
    }

    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &IndexMap<String, String>, key: &str) -> Result<T> {
            let raw = meta.get(key).ok_or_else(|| Error::Format(format!("missing `{key}`")))?;
            raw.parse().map_err(|_| Error::Format(format!("bad value `{raw}` for `{key}`")))
        }
        let cfg = Self {
            vocab_size: get(meta, "model.vocab_size")?,
            d_model: get(meta, "model.d_model")?,
            n_layers_encoder: get(meta, "model.n_layers_encoder")?,
            n_layers_decoder: get(meta, "model.n_layers_decoder")?,
            n_heads: get(meta, "model.n_heads")?,
            d_ff: get(meta, "model.d_ff")?,
            max_seq_len: get(meta, "model.max_seq_len")?,
            dropout: get(meta, "model.dropout")?,
            activation: Activation::parse(meta.get("model.activation").map_or("gelu", String::as_str))?,
            tie_embeddings: get(meta, "model.tie_embeddings")?,
            layer_norm_eps: get(meta, "model.layer_norm_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
