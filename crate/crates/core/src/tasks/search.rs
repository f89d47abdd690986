use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Reduction, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{Pass, TransformerModel};
use crate::params::ParamStore;

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

/// Row `i` of `queries` and `codes` form a true pair; every other row in
/// the batch is a negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchBatch {
    pub queries: Vec<Vec<usize>>,
    pub codes: Vec<Vec<usize>>,
}

/// Pooled (and optionally unit-normalized) sequence embedding `[1 x d]`.
pub fn embed_in(pass: &mut Pass<'_>, model: &TransformerModel, ids: &[usize], pooling: Pooling, normalize: bool) -> Result<Var> {
    let h = model.encode_in(pass, ids, false)?.states;
    let pooled = match pooling {
        Pooling::Mean => pass.graph.mean_rows(h)?,
        Pooling::First => {
            let d = model.config().d_model;
            let t = pass.graph.transpose(h)?;
            let first = pass.graph.slice_cols(t, 0, 1)?;
            pass.graph.reshape(first, &[1, d])?
        }
    };
    if normalize { pass.graph.l2_normalize_rows(pooled) } else { Ok(pooled) }
}

pub fn embed(model: &TransformerModel, ids: &[usize], pooling: Pooling, normalize: bool) -> Result<Vec<f64>> {
    let mut pass = model.eval_pass();
    let v = embed_in(&mut pass, model, ids, pooling, normalize)?;
    Ok(pass.graph.value(v).to_vec())
}

/// Stacks `[1 x d]` rows into `[n x d]`.
fn stack_rows(g: &mut Graph, rows: &[Var]) -> Result<Var> {
    let cols = rows.iter().map(|r| g.transpose(*r)).collect::<Result<Vec<_>>>()?;
    let m = if cols.len() == 1 { cols[0] } else { g.concat_cols(&cols)? };
    g.transpose(m)
}

/// Symmetric in-batch contrastive loss over cosine similarities of the rows
/// of `q` and `c` (`[B x d]` each), scaled by `1 / temperature`.
pub fn contrastive_loss(g: &mut Graph, q: Var, c: Var, temperature: f64) -> Result<Var> {
    let b = g.shape(q)[0];
    if b < 2 {
        return Err(Error::Invalid("contrastive loss needs a batch of at least 2 (no negatives)".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let qn = g.l2_normalize_rows(q)?;
    let cn = g.l2_normalize_rows(c)?;
    let ct = g.transpose(cn)?;
    let s = g.matmul(qn, ct)?;
    let s = g.scale(s, 1.0 / temperature)?;
    let st = g.transpose(s)?;
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let l1 = g.cross_entropy(s, &diag, Reduction::Mean)?;
    let l2 = g.cross_entropy(st, &diag, Reduction::Mean)?;
    let sum = g.add(l1, l2)?;
    g.scale(sum, 0.5)
}

pub fn search_loss_in(
    pass: &mut Pass<'_>,
    model: &TransformerModel,
    batch: &SearchBatch,
    pooling: Pooling,
    temperature: f64,
) -> Result<Var> {
    if batch.queries.len() != batch.codes.len() {
        return Err(Error::Invalid("search batch has unequal query and code counts".into()));
    }
    if batch.queries.len() < 2 {
        return Err(Error::Invalid("search batch needs at least 2 pairs (no negatives)".into()));
    }
    let q = batch.queries.iter().map(|ids| embed_in(pass, model, ids, pooling, false)).collect::<Result<Vec<_>>>()?;
    let c = batch.codes.iter().map(|ids| embed_in(pass, model, ids, pooling, false)).collect::<Result<Vec<_>>>()?;
    let q = stack_rows(&mut pass.graph, &q)?;
    let c = stack_rows(&mut pass.graph, &c)?;
    contrastive_loss(&mut pass.graph, q, c, temperature)
}

pub fn search_loss(model: &TransformerModel, batch: &SearchBatch, pooling: Pooling, temperature: f64) -> Result<f64> {
    let mut pass = model.eval_pass();
    let l = search_loss_in(&mut pass, model, batch, pooling, temperature)?;
    Ok(pass.graph.scalar(l))
}

/// Candidate code embeddings with their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub ids: Vec<u64>,
    /// `[N x d]`
    pub embeddings: Tensor,
    pub normalized: bool,
    pub pooling: Pooling,
}

impl RetrievalIndex {
    pub fn build(model: &TransformerModel, candidates: &[(u64, Vec<usize>)], pooling: Pooling, normalize: bool) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Invalid("retrieval index needs at least one candidate".into()));
        }
        let d = model.config().d_model;
        let mut data = Vec::with_capacity(candidates.len() * d);
        for (_, ids) in candidates {
            data.extend(embed(model, ids, pooling, normalize)?);
        }
        Ok(Self {
            ids: candidates.iter().map(|(i, _)| *i).collect(),
            embeddings: Tensor::new(vec![candidates.len(), d], data)?,
            normalized: normalize,
            pooling,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Candidate ids by descending cosine similarity to `query`; equal
    /// similarities are ordered by ascending id.
    pub fn rank(&self, query: &[f64]) -> Vec<u64> {
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(f64, u64)> = (0..self.len())
            .map(|i| {
                let row = self.embeddings.row(i);
                let dot: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
                let cn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let denom = qn * cn;
                (if denom > 0.0 { dot / denom } else { 0.0 }, self.ids[i])
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, id)| id).collect()
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("ids")
    }

    /// Writes the embeddings as a checkpoint and the ids, one per line, to a
    /// sidecar file with extension `.ids`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = IndexMap::new();
        meta.insert("kind".into(), "retrieval_index".into());
        meta.insert("index.normalized".into(), self.normalized.to_string());
        meta.insert("index.pooling".into(), serde_json::to_string(&self.pooling)?);
        let mut params = ParamStore::new();
        params.insert("embeddings", self.embeddings.clone());
        Checkpoint { meta, params }.save(path)?;
        let ids: String = self.ids.iter().map(|i| format!("{i}\n")).collect();
        std::fs::write(Self::sidecar(path), ids)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.meta_str("kind")? != "retrieval_index" {
            return Err(Error::Format(format!("{} is not a retrieval index", path.display())));
        }
        let embeddings = ck.params.require("embeddings")?.clone();
        let ids = std::fs::read_to_string(Self::sidecar(path))?
            .lines()
            .map(|l| l.trim().parse::<u64>().map_err(|e| Error::Format(format!("bad id `{l}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if ids.len() != embeddings.rows() {
            return Err(Error::Format(format!("{} ids for {} embeddings", ids.len(), embeddings.rows())));
        }
        Ok(Self {
            ids,
            embeddings,
            normalized: ck.meta_str("index.normalized")? == "true",
            pooling: serde_json::from_str(ck.meta_str("index.pooling")?)?,
        })
    }
}

/// Ranks the index against a query sequence.
pub fn retrieve(model: &TransformerModel, query: &[usize], index: &RetrievalIndex) -> Result<Vec<u64>> {
    if index.is_empty() {
        return Err(Error::Invalid("retrieval index is empty".into()));
    }
    let q = embed(model, query, index.pooling, index.normalized)?;
    Ok(index.rank(&q))
}
