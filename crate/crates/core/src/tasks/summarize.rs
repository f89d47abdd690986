use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduction, Var};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Mode, Pass, TransformerModel};

/// Teacher-forcing batch. Rows have their own lengths (no padding needed);
/// `PAD` inside a target marks an unsupervised position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummarizationBatch {
    pub encoder: Vec<Vec<usize>>,
    pub decoder_input: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
}

impl SummarizationBatch {
    /// Decoder input is `BOS + summary`, target is `summary + EOS`.
    pub fn new(pairs: &[(Vec<usize>, Vec<usize>)]) -> Self {
        let mut b = Self { encoder: Vec::new(), decoder_input: Vec::new(), target: Vec::new() };
        for (code, summary) in pairs {
            let mut input = vec![BOS];
            input.extend(summary);
            let mut target = summary.clone();
            target.push(EOS);
            b.encoder.push(code.clone());
            b.decoder_input.push(input);
            b.target.push(target);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.encoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty()
    }
}

/// Token-level cross-entropy averaged over every non-pad target token of
/// the batch.
pub fn summarization_loss_in(pass: &mut Pass<'_>, model: &TransformerModel, batch: &SummarizationBatch) -> Result<Var> {
    if model.mode() != Mode::EncoderDecoder {
        return Err(Error::Invalid("summarization requires an encoder-decoder model".into()));
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for i in 0..batch.len() {
        let targets: Vec<Option<usize>> = batch.target[i].iter().map(|&t| (t != PAD).then_some(t)).collect();
        let n = targets.iter().flatten().count();
        if n == 0 {
            continue;
        }
        let enc = model.encode_in(pass, &batch.encoder[i], false)?.states;
        let logits = model.decode_in(pass, enc, &batch.decoder_input[i])?;
        let row = pass.graph.cross_entropy(logits, &targets, Reduction::Sum)?;
        total = Some(match total {
            Some(t) => pass.graph.add(t, row)?,
            None => row,
        });
        count += n;
    }
    let total = total.ok_or_else(|| Error::Invalid("summarization batch has no supervised target tokens".into()))?;
    pass.graph.scale(total, 1.0 / count as f64)
}

pub fn summarization_loss(model: &TransformerModel, batch: &SummarizationBatch) -> Result<f64> {
    let mut pass = model.eval_pass();
    let loss = summarization_loss_in(&mut pass, model, batch)?;
    Ok(pass.graph.scalar(loss))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

fn log_softmax_last(logits: &crate::autodiff::Tensor) -> Vec<f64> {
    let row = logits.row(logits.rows() - 1);
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|z| z - lse).collect()
}

fn decoder_budget(model: &TransformerModel, max_len: usize) -> usize {
    max_len.min(model.config().max_seq_len)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }
}

fn greedy(model: &TransformerModel, enc: &crate::autodiff::Tensor, max_len: usize) -> Result<Hyp> {
    let mut prefix = vec![BOS];
    let mut hyp = Hyp { tokens: Vec::new(), score: 0.0 };
    for _ in 0..decoder_budget(model, max_len) {
        let lp = log_softmax_last(&model.decode_step(enc, &prefix)?);
        let mut best = 0;
        for (i, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = i;
            }
        }
        hyp.tokens.push(best);
        hyp.score += lp[best];
        if best == EOS {
            break;
        }
        prefix.push(best);
    }
    Ok(hyp)
}

fn beam(model: &TransformerModel, enc: &crate::autodiff::Tensor, max_len: usize, k: usize) -> Result<Hyp> {
    let budget = decoder_budget(model, max_len);
    let mut alive = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    for step in 0..budget {
        // (score, beam index, token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, h) in alive.iter().enumerate() {
            let mut prefix = vec![BOS];
            prefix.extend(&h.tokens);
            let lp = log_softmax_last(&model.decode_step(enc, &prefix)?);
            cands.extend(lp.iter().enumerate().map(|(t, v)| (h.score + v, bi, t)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let slots = k - finished.len().min(k - 1);
        let mut next = Vec::new();
        for (score, bi, t) in cands.into_iter().take(slots) {
            let mut tokens = alive[bi].tokens.clone();
            tokens.push(t);
            let h = Hyp { tokens, score };
            if t == EOS || step + 1 == budget {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        if next.is_empty() || finished.len() >= k {
            break;
        }
        alive = next;
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.normalized() > finished[best].normalized() {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Decodes a summary. Output stops after EOS (included) or at `max_len`
/// tokens. Beam search ranks finished hypotheses by log-probability per
/// token; the greedy rollout is always among its candidates, so a wider
/// beam never scores below greedy.
pub fn generate_summary(model: &TransformerModel, code: &[usize], max_len: usize, strategy: Strategy) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be >= 1".into()));
    }
    let (enc, _) = model.encode(code, false)?;
    let hyp = match strategy {
        Strategy::Greedy | Strategy::Beam(0) | Strategy::Beam(1) => greedy(model, &enc, max_len)?,
        Strategy::Beam(k) => {
            let g = greedy(model, &enc, max_len)?;
            let b = beam(model, &enc, max_len, k)?;
            if b.normalized() >= g.normalized() { b } else { g }
        }
    };
    Ok(hyp.tokens)
}

/// Length-normalized log-probability of `tokens` as a continuation of BOS.
pub fn sequence_log_prob(model: &TransformerModel, code: &[usize], tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let (enc, _) = model.encode(code, false)?;
    let mut prefix = vec![BOS];
    prefix.extend(&tokens[..tokens.len() - 1]);
    let logits = model.decode_step(&enc, &prefix)?;
    let v = logits.cols();
    let mut total = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        let row = &logits.data()[t * v..(t + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += row[tok] - lse;
    }
    Ok(total / tokens.len() as f64)
}
