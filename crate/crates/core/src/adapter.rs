//! Bottleneck adapters and their mixture-of-experts variant.
//!
//! A standard adapter maps a sublayer output `h` to
//! `up(act(down(h) + b_down)) + b_up + h`. The MoE variant splits the
//! bottleneck into several narrow experts, routes each token to the `top_k`
//! experts with the highest gate probability, mixes their outputs with the
//! renormalized gate weights and adds a single skip connection.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Activation, ModelConfig, Pass};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    AfterAttention,
    AfterFfn,
}

/// Where the adapter sits relative to the residual layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `LN(x + adapter(sublayer(x)))`
    BeforeNorm,
    /// `adapter(LN(x + sublayer(x)))`
    AfterNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    Moe,
}

/// Granularity of MoE routing decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    PerToken,
    /// One decision per sequence, from the mean-pooled input.
    PerSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InsertionPoint {
    pub stack: Stack,
    pub layer: usize,
    pub position: Position,
}

impl InsertionPoint {
    pub fn new(stack: Stack, layer: usize, position: Position) -> Self {
        Self { stack, layer, position }
    }

    pub fn prefix(&self) -> String {
        let stack = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        let pos = match self.position {
            Position::AfterAttention => "attn",
            Position::AfterFfn => "ffn",
        };
        format!("adapter.{stack}.{}.{pos}", self.layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
    pub activation: Activation,
    pub after_attention: bool,
    pub after_ffn: bool,
    pub placement: Placement,
    pub variant: Variant,
    pub moe_experts: usize,
    pub moe_expert_dim: usize,
    pub moe_top_k: usize,
    pub gating: Gating,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck_dim: 128,
            activation: Activation::Relu,
            after_attention: true,
            after_ffn: true,
            placement: Placement::BeforeNorm,
            variant: Variant::Standard,
            moe_experts: 4,
            moe_expert_dim: 32,
            moe_top_k: 2,
            gating: Gating::PerToken,
            init_std: 1e-2,
        }
    }
}

impl AdapterConfig {
    pub fn with_dim(bottleneck_dim: usize) -> Self {
        Self { bottleneck_dim, ..Self::default() }
    }

    /// MoE variant with `experts` experts of `expert_dim` each.
    pub fn moe(experts: usize, expert_dim: usize, top_k: usize) -> Self {
        Self { variant: Variant::Moe, moe_experts: experts, moe_expert_dim: expert_dim, moe_top_k: top_k, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match self.variant {
            Variant::Standard if self.bottleneck_dim == 0 => problems.push("bottleneck_dim must be >= 1".to_string()),
            Variant::Moe => {
                if self.moe_expert_dim == 0 {
                    problems.push("moe_expert_dim must be >= 1".into());
                }
                if self.moe_top_k == 0 || self.moe_top_k > self.moe_experts {
                    problems.push(format!("moe_top_k ({}) must lie in 1..={} (moe_experts)", self.moe_top_k, self.moe_experts));
                }
            }
            Variant::Standard => {}
        }
        if !self.after_attention && !self.after_ffn {
            problems.push("at least one insertion point must be enabled".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            problems.push("init_std must be finite and non-negative".into());
        }
        if problems.is_empty() { Ok(()) } else { Err(Error::Config(problems)) }
    }

    pub fn positions(&self) -> Vec<Position> {
        let mut out = Vec::new();
        if self.after_attention {
            out.push(Position::AfterAttention);
        }
        if self.after_ffn {
            out.push(Position::AfterFfn);
        }
        out
    }

    pub fn points(&self, model: &ModelConfig) -> Vec<InsertionPoint> {
        let mut out = Vec::new();
        for (stack, layers) in [(Stack::Encoder, model.n_layers_encoder), (Stack::Decoder, model.n_layers_decoder)] {
            for layer in 0..layers {
                for position in self.positions() {
                    out.push(InsertionPoint::new(stack, layer, position));
                }
            }
        }
        out
    }

    /// Shapes of one insertion point's parameters, relative to its prefix.
    pub fn point_shapes(&self, d: usize) -> Vec<(String, Vec<usize>)> {
        let bottleneck = |out: &mut Vec<(String, Vec<usize>)>, p: &str, m: usize| {
            out.push((format!("{p}down.w"), vec![d, m]));
            out.push((format!("{p}down.b"), vec![m]));
            out.push((format!("{p}up.w"), vec![m, d]));
            out.push((format!("{p}up.b"), vec![d]));
        };
        let mut out = Vec::new();
        match self.variant {
            Variant::Standard => bottleneck(&mut out, "", self.bottleneck_dim),
            Variant::Moe => {
                out.push(("gate.w".into(), vec![d, self.moe_experts]));
                for e in 0..self.moe_experts {
                    bottleneck(&mut out, &format!("e{e}."), self.moe_expert_dim);
                }
            }
        }
        out
    }

    pub fn parameter_shapes(&self, model: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let per_point = self.point_shapes(model.d_model);
        self.points(model)
            .iter()
            .flat_map(|pt| {
                let prefix = pt.prefix();
                per_point.iter().map(move |(n, s)| (format!("{prefix}.{n}"), s.clone()))
            })
            .collect()
    }

    pub fn parameter_count(&self, model: &ModelConfig) -> usize {
        let per_point: usize = self.point_shapes(model.d_model).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        per_point * self.points(model).len()
    }

    pub fn to_meta(&self) -> IndexMap<String, String> {
        let mut m = IndexMap::new();
        m.insert("adapter.config".into(), serde_json::to_string(self).expect("serializable"));
        m
    }

    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        let raw = meta.get("adapter.config").ok_or_else(|| Error::Format("missing `adapter.config`".into()))?;
        let cfg: Self = serde_json::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameters of a single bottleneck `d -> m -> d` without the skip.
pub fn bottleneck_param_count(d: usize, m: usize) -> usize {
    2 * d * m + m + d
}

/// Graph handles for one bottleneck.
#[derive(Clone, Copy, Debug)]
pub struct AdapterWeights {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

fn bottleneck(g: &mut Graph, w: &AdapterWeights, h: Var, act: Activation) -> Result<Var> {
    let d = g.shape(h).last().copied().unwrap_or(0);
    let wd = g.shape(w.down_w).to_vec();
    if g.shape(h).len() != 2 || wd[0] != d {
        return Err(Error::Shape { op: "adapter_forward", lhs: g.shape(h).to_vec(), rhs: wd });
    }
    let z = g.matmul(h, w.down_w)?;
    let z = g.add(z, w.down_b)?;
    let z = match act {
        Activation::Relu => g.relu(z)?,
        Activation::Gelu => g.gelu(z)?,
    };
    let u = g.matmul(z, w.up_w)?;
    g.add(u, w.up_b)
}

/// `up(act(down(h) + b_down)) + b_up + h` for `h: [seq_len x d]`.
pub fn adapter_forward(g: &mut Graph, w: &AdapterWeights, h: Var, act: Activation) -> Result<Var> {
    let b = bottleneck(g, w, h, act)?;
    g.add(b, h)
}

/// Routing decisions of one MoE adapter call.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeRouting {
    /// Gate probabilities per routed row (token or sample).
    pub gate: Tensor,
    /// Selected experts per routed row, best first.
    pub selected: Vec<Vec<usize>>,
    /// Renormalized mixture weights; zero for unselected experts.
    pub weights: Tensor,
}

/// Indices of the `k` largest values, ties broken by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Sparse mixture of bottleneck experts with one shared skip connection.
pub fn moe_adapter_forward(
    g: &mut Graph,
    experts: &[AdapterWeights],
    gate_w: Var,
    h: Var,
    top: usize,
    gating: Gating,
    act: Activation,
) -> Result<(Var, MoeRouting)> {
    let n_experts = experts.len();
    if top == 0 || top > n_experts {
        return Err(Error::Invalid(format!("top_k {top} must lie in 1..={n_experts}")));
    }
    let gs = g.shape(gate_w).to_vec();
    if gs.len() != 2 || gs[1] != n_experts || Some(&gs[0]) != g.shape(h).last() {
        return Err(Error::Shape { op: "moe_adapter_forward", lhs: g.shape(h).to_vec(), rhs: gs });
    }
    let router_in = match gating {
        Gating::PerToken => h,
        Gating::PerSample => g.mean_rows(h)?,
    };
    let logits = g.matmul(router_in, gate_w)?;
    let probs = g.softmax(logits, false)?;
    let rows = g.shape(probs)[0];
    let pv = g.value(probs).to_vec();
    let mut mask = vec![0.0; rows * n_experts];
    let mut selected = Vec::with_capacity(rows);
    for r in 0..rows {
        let chosen = top_k(&pv[r * n_experts..(r + 1) * n_experts], top);
        for &e in &chosen {
            mask[r * n_experts + e] = 1.0;
        }
        selected.push(chosen);
    }
    let mask = g.input(&[rows, n_experts], mask)?;
    let kept = g.mul(probs, mask)?;
    let total = g.row_sums(kept)?;
    let weights = g.div(kept, total)?;

    let mut out = h;
    for (e, w) in experts.iter().enumerate() {
        let y = bottleneck(g, w, h, act)?;
        let we = g.slice_cols(weights, e, e + 1)?;
        let contrib = g.mul(y, we)?;
        out = g.add(out, contrib)?;
    }
    let routing = MoeRouting { gate: g.tensor(probs), selected, weights: g.tensor(weights) };
    Ok((out, routing))
}

/// Overlay of adapters keyed by insertion point; never references base weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    config: AdapterConfig,
    d_model: usize,
    points: Vec<InsertionPoint>,
    params: ParamStore,
}

impl AdapterBank {
    pub fn new(config: AdapterConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_shapes(model)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("down.w") || name.ends_with("gate.w") {
                    Tensor::randn(&shape, config.init_std, &mut rng)
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { points: config.points(model), d_model: model.d_model, config, params })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn points(&self) -> &[InsertionPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, point: &InsertionPoint) -> bool {
        self.points.contains(point)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn weights(pass: &mut Pass<'_>, prefix: &str) -> Result<AdapterWeights> {
        Ok(AdapterWeights {
            down_w: pass.p(&format!("{prefix}down.w"))?,
            down_b: pass.p(&format!("{prefix}down.b"))?,
            up_w: pass.p(&format!("{prefix}up.w"))?,
            up_b: pass.p(&format!("{prefix}up.b"))?,
        })
    }

    /// Applies the adapter at `point` inside a model forward pass.
    pub fn forward_in(&self, pass: &mut Pass<'_>, point: &InsertionPoint, h: Var) -> Result<Var> {
        let prefix = point.prefix();
        match self.config.variant {
            Variant::Standard => {
                let w = Self::weights(pass, &format!("{prefix}."))?;
                adapter_forward(&mut pass.graph, &w, h, self.config.activation)
            }
            Variant::Moe => {
                let experts = (0..self.config.moe_experts)
                    .map(|e| Self::weights(pass, &format!("{prefix}.e{e}.")))
                    .collect::<Result<Vec<_>>>()?;
                let gate = pass.p(&format!("{prefix}.gate.w"))?;
                let (out, _) = moe_adapter_forward(
                    &mut pass.graph,
                    &experts,
                    gate,
                    h,
                    self.config.moe_top_k,
                    self.config.gating,
                    self.config.activation,
                )?;
                Ok(out)
            }
        }
    }

    /// Adapter-only checkpoint. `base_hash` ties the file to the base
    /// weights it was trained against.
    pub fn to_checkpoint(&self, model: &ModelConfig, base_hash: &str) -> Checkpoint {
        let mut meta = IndexMap::new();
        meta.insert("kind".to_string(), "adapter".to_string());
        meta.extend(self.config.to_meta());
        meta.insert("adapter.d_model".into(), self.d_model.to_string());
        meta.insert("adapter.n_layers_encoder".into(), model.n_layers_encoder.to_string());
        meta.insert("adapter.n_layers_decoder".into(), model.n_layers_decoder.to_string());
        meta.insert("adapter.base_hash".into(), base_hash.to_string());
        Checkpoint { meta, params: self.params.clone() }
    }

    /// Rebuilds a bank for `model`; fails when the file was trained against
    /// a different base or has a mismatched registry.
    pub fn from_checkpoint(ck: &Checkpoint, model: &ModelConfig, base_hash: Option<&str>) -> Result<Self> {
        if ck.meta_str("kind")? != "adapter" {
            return Err(Error::Format(format!("expected an adapter checkpoint, found `{}`", ck.meta_str("kind")?)));
        }
        if let Some(expected) = base_hash {
            let stored = ck.meta_str("adapter.base_hash")?;
            if stored != expected {
                return Err(Error::Format(format!("adapter was trained on base {stored}, not {expected}")));
            }
        }
        let config = AdapterConfig::from_meta(&ck.meta)?;
        if config.parameter_shapes(model) != ck.params.shapes() {
            return Err(Error::Format("adapter registry does not match the model".into()));
        }
        Ok(Self { points: config.points(model), d_model: model.d_model, config, params: ck.params.clone() })
    }
}

#[cfg(test)]
mod tests;
