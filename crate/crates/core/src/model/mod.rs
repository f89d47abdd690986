//! Small transformer with two behaviours: a bidirectional encoder (search,
//! probing) and an encoder-decoder with causal self-attention and
//! cross-attention (summarization).

mod config;
mod report;

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Activation, Mode, ModelConfig};
pub use report::ParameterReport;

use crate::adapter::{AdapterBank, AdapterConfig, InsertionPoint, Position, Stack};
use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Hidden states of every encoder layer; index 0 is the embedding output.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub layers: Vec<Tensor>,
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Names of the parameters an optimizer may update.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableView {
    pub names: Vec<String>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
    adapters: Option<AdapterBank>,
    base_frozen: bool,
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or_default();
    match leaf {
        "g" => Tensor::full(shape, 1.0),
        "b" | "b1" | "b2" | "bias" => Tensor::zeros(shape),
        "tok" | "pos" => Tensor::randn(shape, 0.1, rng),
        _ => Tensor::randn(shape, (1.0 / shape[0] as f64).sqrt(), rng),
    }
}

impl TransformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        Ok(Self { config, params, adapters: None, base_frozen: false })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn adapters(&self) -> Option<&AdapterBank> {
        self.adapters.as_ref()
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    /// Hash of the base (non-adapter) parameter bytes.
    pub fn base_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Attaches a freshly initialized adapter bank. The up-projections start
    /// at zero, so outputs are unchanged until the bank is trained.
    pub fn inject(&mut self, config: AdapterConfig, seed: u64) -> Result<&AdapterBank> {
        if self.adapters.is_some() {
            return Err(Error::Invalid("adapters are already injected into this model".into()));
        }
        let bank = AdapterBank::new(config, &self.config, seed)?;
        Ok(self.adapters.insert(bank))
    }

    pub fn attach(&mut self, bank: AdapterBank) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::Invalid("adapters are already injected into this model".into()));
        }
        if bank.d_model() != self.config.d_model {
            return Err(Error::Shape { op: "attach", lhs: vec![self.config.d_model], rhs: vec![bank.d_model()] });
        }
        for p in bank.points() {
            let layers = match p.stack {
                Stack::Encoder => self.config.n_layers_encoder,
                Stack::Decoder => self.config.n_layers_decoder,
            };
            if p.layer >= layers {
                return Err(Error::Invalid(format!("adapter point {} does not exist in this model", p.prefix())));
            }
        }
        self.adapters = Some(bank);
        Ok(())
    }

    pub fn detach(&mut self) -> Option<AdapterBank> {
        self.base_frozen = false;
        self.adapters.take()
    }

    /// Freezes every base parameter; afterwards only adapter parameters are
    /// trainable.
    pub fn freeze_base(&mut self) -> Result<TrainableView> {
        let bank = self.adapters.as_ref().ok_or_else(|| Error::Invalid("freeze_base requires injected adapters".into()))?;
        self.base_frozen = true;
        Ok(TrainableView { names: bank.params().names().map(String::from).collect(), count: bank.params().count() })
    }

    pub fn trainable_view(&self) -> TrainableView {
        let mut names = Vec::new();
        let mut count = 0;
        if !self.base_frozen {
            names.extend(self.params.names().map(String::from));
            count += self.params.count();
        }
        if let Some(bank) = &self.adapters {
            names.extend(bank.params().names().map(String::from));
            count += bank.params().count();
        }
        TrainableView { names, count }
    }

    /// Mutable handles on every trainable parameter, for the optimizer.
    pub fn trainable_params_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        let mut out: Vec<(&str, &mut Tensor)> = Vec::new();
        if !self.base_frozen {
            out.extend(self.params.iter_mut());
        }
        if let Some(bank) = &mut self.adapters {
            out.extend(bank.params_mut().iter_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
        if let Some(bank) = &mut self.adapters {
            bank.params_mut().zero_grad();
        }
    }

    /// Adds gradients collected from a [`Pass`] into the parameter buffers.
    pub fn accumulate_grads(&mut self, grads: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, g) in grads {
            let t = match self.params.get_mut(name) {
                Some(t) => t,
                None => self
                    .adapters
                    .as_mut()
                    .and_then(|b| b.params_mut().get_mut(name))
                    .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?,
            };
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Forward context in evaluation mode: no dropout, no gradient tape.
    pub fn eval_pass(&self) -> Pass<'_> {
        Pass::new(self, false, false, 0)
    }

    /// Forward context recording gradients for every trainable parameter.
    pub fn train_pass(&self, seed: u64) -> Pass<'_> {
        Pass::new(self, true, true, seed)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} >= vocab_size {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Encodes one sequence in evaluation mode.
    pub fn encode(&self, ids: &[usize], capture: bool) -> Result<(Tensor, Option<LayerTrace>)> {
        let mut pass = self.eval_pass();
        let out = self.encode_in(&mut pass, ids, capture)?;
        let trace = out.trace.map(|vars| LayerTrace { layers: vars.iter().map(|v| pass.graph.tensor(*v)).collect() });
        Ok((pass.graph.tensor(out.states), trace))
    }

    /// Logits `[prefix_len x vocab]` for every decoder position.
    pub fn decode_step(&self, encoder_states: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let mut pass = self.eval_pass();
        let enc = pass.graph.constant(encoder_states)?;
        let logits = self.decode_in(&mut pass, enc, prefix)?;
        Ok(pass.graph.tensor(logits))
    }

    pub fn encode_in(&self, pass: &mut Pass<'_>, ids: &[usize], capture: bool) -> Result<EncoderOutput> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = pass.p("embed.tok")?;
        let pos = pass.p("embed.pos")?;
        let te = pass.graph.embedding(tok, ids)?;
        let pe = pass.graph.embedding(pos, &positions)?;
        let x = pass.graph.add(te, pe)?;
        let mut x = self.norm(pass, x, "embed.ln")?;
        x = pass.dropout(x)?;
        let mut trace = capture.then(|| vec![x]);
        for l in 0..self.config.n_layers_encoder {
            let a = self.attention(pass, &format!("enc.{l}.attn"), x, x, false)?;
            let a = pass.dropout(a)?;
            x = self.residual(pass, x, a, &format!("enc.{l}.ln1"), InsertionPoint::new(Stack::Encoder, l, Position::AfterAttention))?;
            let f = self.ffn(pass, &format!("enc.{l}.ffn"), x)?;
            let f = pass.dropout(f)?;
            x = self.residual(pass, x, f, &format!("enc.{l}.ln2"), InsertionPoint::new(Stack::Encoder, l, Position::AfterFfn))?;
            if let Some(t) = trace.as_mut() {
                t.push(x);
            }
        }
        Ok(EncoderOutput { states: x, trace })
    }

    pub fn decode_in(&self, pass: &mut Pass<'_>, enc: Var, prefix: &[usize]) -> Result<Var> {
        if self.mode() == Mode::EncoderOnly {
            return Err(Error::Invalid("decoding requires an encoder-decoder model".into()));
        }
        self.check_ids(prefix)?;
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let tok = pass.p("embed.tok")?;
        let pos = pass.p("embed.pos")?;
        let te = pass.graph.embedding(tok, prefix)?;
        let pe = pass.graph.embedding(pos, &positions)?;
        let y = pass.graph.add(te, pe)?;
        let mut y = self.norm(pass, y, "dec.embed.ln")?;
        y = pass.dropout(y)?;
        for l in 0..self.config.n_layers_decoder {
            let a = self.attention(pass, &format!("dec.{l}.self"), y, y, true)?;
            let a = pass.dropout(a)?;
            y = self.residual(pass, y, a, &format!("dec.{l}.ln1"), InsertionPoint::new(Stack::Decoder, l, Position::AfterAttention))?;
            let c = self.attention(pass, &format!("dec.{l}.cross"), y, enc, false)?;
            let c = pass.dropout(c)?;
            let s = pass.graph.add(y, c)?;
            y = self.norm(pass, s, &format!("dec.{l}.ln2"))?;
            let f = self.ffn(pass, &format!("dec.{l}.ffn"), y)?;
            let f = pass.dropout(f)?;
            y = self.residual(pass, y, f, &format!("dec.{l}.ln3"), InsertionPoint::new(Stack::Decoder, l, Position::AfterFfn))?;
        }
        self.project_vocab(pass, y)
    }

    /// Vocabulary logits for hidden states (tied or untied output layer).
    pub fn project_vocab(&self, pass: &mut Pass<'_>, h: Var) -> Result<Var> {
        let w = if self.config.tie_embeddings {
            match pass.tok_t {
                Some(v) => v,
                None => {
                    let tok = pass.p("embed.tok")?;
                    let t = pass.graph.transpose(tok)?;
                    pass.tok_t = Some(t);
                    t
                }
            }
        } else {
            pass.p("lm.w")?
        };
        let bias = pass.p("lm.bias")?;
        let logits = pass.graph.matmul(h, w)?;
        pass.graph.add(logits, bias)
    }

    fn norm(&self, pass: &mut Pass<'_>, x: Var, prefix: &str) -> Result<Var> {
        let g = pass.p(&format!("{prefix}.g"))?;
        let b = pass.p(&format!("{prefix}.b"))?;
        pass.graph.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    fn linear(&self, pass: &mut Pass<'_>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = pass.p(w)?;
        let b = pass.p(b)?;
        let y = pass.graph.matmul(x, w)?;
        pass.graph.add(y, b)
    }

    fn attention(&self, pass: &mut Pass<'_>, prefix: &str, x: Var, kv: Var, causal: bool) -> Result<Var> {
        let q = self.linear(pass, x, &format!("{prefix}.q.w"), &format!("{prefix}.q.b"))?;
        let k = self.linear(pass, kv, &format!("{prefix}.k.w"), &format!("{prefix}.k.b"))?;
        let v = self.linear(pass, kv, &format!("{prefix}.v.w"), &format!("{prefix}.v.b"))?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let g = &mut pass.graph;
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, causal)?;
            heads.push(g.matmul(a, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { pass.graph.concat_cols(&heads)? };
        self.linear(pass, o, &format!("{prefix}.o.w"), &format!("{prefix}.o.b"))
    }

    fn ffn(&self, pass: &mut Pass<'_>, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(pass, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = match self.config.activation {
            Activation::Gelu => pass.graph.gelu(h)?,
            Activation::Relu => pass.graph.relu(h)?,
        };
        self.linear(pass, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// `LN(x + sub)`, with the adapter for `point` (if any) applied to the
    /// sublayer output before the norm or to the normalized output after it.
    fn residual(&self, pass: &mut Pass<'_>, x: Var, sub: Var, norm: &str, point: InsertionPoint) -> Result<Var> {
        let bank = self.adapters.as_ref().filter(|b| b.contains(&point));
        match bank {
            Some(bank) if bank.config().placement == crate::adapter::Placement::AfterNorm => {
                let s = pass.graph.add(x, sub)?;
                let y = self.norm(pass, s, norm)?;
                bank.forward_in(pass, &point, y)
            }
            Some(bank) => {
                let z = bank.forward_in(pass, &point, sub)?;
                let s = pass.graph.add(x, z)?;
                self.norm(pass, s, norm)
            }
            None => {
                let s = pass.graph.add(x, sub)?;
                self.norm(pass, s, norm)
            }
        }
    }

    pub fn save(&self, path: &Path, extra: &IndexMap<String, String>) -> Result<()> {
        let mut meta = IndexMap::new();
        meta.insert("kind".to_string(), "model".to_string());
        meta.extend(self.config.to_meta());
        meta.extend(extra.clone());
        Checkpoint { meta, params: self.params.clone() }.save(path)
    }

    /// Loads a base model checkpoint; returns it with the full metadata map.
    pub fn load(path: &Path) -> Result<(Self, IndexMap<String, String>)> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(ck)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, IndexMap<String, String>)> {
        if ck.meta_str("kind")? != "model" {
            return Err(Error::Format(format!("expected a model checkpoint, found `{}`", ck.meta_str("kind")?)));
        }
        let config = ModelConfig::from_meta(&ck.meta)?;
        let expected = config.parameter_shapes();
        if expected != ck.params.shapes() {
            return Err(Error::Format("parameter registry does not match the stored configuration".into()));
        }
        Ok((Self { config, params: ck.params, adapters: None, base_frozen: false }, ck.meta))
    }
}

pub struct EncoderOutput {
    pub states: Var,
    pub trace: Option<Vec<Var>>,
}

/// One forward computation: a tape plus lazily bound parameters.
pub struct Pass<'m> {
    pub graph: Graph,
    model: &'m TransformerModel,
    bound: HashMap<&'m str, Var>,
    record: bool,
    training: bool,
    rng: ChaCha8Rng,
    tok_t: Option<Var>,
}

impl<'m> Pass<'m> {
    fn new(model: &'m TransformerModel, record: bool, training: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            model,
            bound: HashMap::new(),
            record,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tok_t: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Graph variable for a base or adapter parameter.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let model = self.model;
        let (key, tensor, trainable) = if let Some((k, t)) = model.params.entry(name) {
            (k, t, self.record && !model.base_frozen)
        } else if let Some((k, t)) = model.adapters.as_ref().and_then(|b| b.params().entry(name)) {
            (k, t, self.record)
        } else {
            return Err(Error::Invalid(format!("unknown parameter `{name}`")));
        };
        let v = if trainable { self.graph.param(tensor)? } else { self.graph.constant(tensor)? };
        self.bound.insert(key, v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.training {
            return Ok(x);
        }
        self.graph.dropout(x, self.model.config.dropout, &mut self.rng)
    }

    /// Accumulated gradients of every bound trainable parameter.
    pub fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = self
            .bound
            .iter()
            .filter_map(|(name, v)| self.graph.grad(*v).map(|g| (name.to_string(), g.to_vec())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
