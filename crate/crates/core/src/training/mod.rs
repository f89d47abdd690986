//! Experiment orchestration: MLM pre-training, fine-tuning regimes,
//! mini-batch strategies and low-resource sampling.

mod experiments;
mod pretrain;


use std::collections::HashSet;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use experiments::{
    average_over_seeds, cross_lingual_matrix, final_layer_probe, low_resource_curve, relative_improvement,
    toy_model_config, CrossLingualReport, Lab, LabConfig, LowResourcePoint,
};
pub use pretrain::{mask_sequence, pretrain_mlm, PretrainConfig, PretrainOutcome};

use crate::adapter::{AdapterConfig, Variant};
use crate::autodiff::AdamState;
use crate::corpus::{by_language, CorpusExample, Splits, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{bleu_report, mrr, BleuReport, MrrReport};
use crate::model::{ParameterReport, Pass, TransformerModel};
use crate::tasks::{
    generate_summary, search_loss_in, summarization_loss_in, Encoding, Pooling, RetrievalIndex, SearchBatch,
    Strategy, SummarizationBatch, Task,
};
use crate::autodiff::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuning {
    Full,
    Adapter,
    AdapterMoe,
}

impl Tuning {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "adapter" => Ok(Self::Adapter),
            "adapter_moe" => Ok(Self::AdapterMoe),
            other => Err(Error::Invalid(format!("unknown tuning `{other}` (expected full, adapter or adapter_moe)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Adapter => "adapter",
            Self::AdapterMoe => "adapter_moe",
        }
    }

    pub fn uses_adapters(self) -> bool {
        self != Self::Full
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataScope {
    Monolingual(String),
    Multilingual(Vec<String>),
    Cross { train: String, eval: String },
}

impl DataScope {
    pub fn train_languages(&self) -> Vec<String> {
        match self {
            Self::Monolingual(l) => vec![l.clone()],
            Self::Multilingual(ls) => ls.clone(),
            Self::Cross { train, .. } => vec![train.clone()],
        }
    }

    pub fn eval_languages(&self) -> Vec<String> {
        match self {
            Self::Monolingual(l) => vec![l.clone()],
            Self::Multilingual(ls) => ls.clone(),
            Self::Cross { eval, .. } => vec![eval.clone()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Shuffle the combined data, then cut batches.
    Multilingual,
    /// Cut batches within each language, then shuffle the batch order.
    Monolingual,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regime {
    pub tuning: Tuning,
    pub scope: DataScope,
    pub batching: Batching,
    pub language_tags: bool,
    pub samples_per_language: Option<usize>,
    pub seed: u64,
}

impl Regime {
    /// Task defaults: summarization uses mixed batches without tags, search
    /// uses single-language batches with tags.
    pub fn for_task(task: Task, tuning: Tuning, scope: DataScope, seed: u64) -> Self {
        let (batching, language_tags) = match task {
            Task::Summarization => (Batching::Multilingual, false),
            Task::Search => (Batching::Monolingual, true),
        };
        Self { tuning, scope, batching, language_tags, samples_per_language: None, seed }
    }
}

/// Fine-tuning hyper-parameters. `learning_rate = None` selects 1e-3 for
/// adapter regimes and 3e-4 for full tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub patience: usize,
    pub adapter: AdapterConfig,
    pub temperature: f64,
    pub pooling: Pooling,
    pub max_decode_len: usize,
    /// Cap on evaluated examples per language (None = whole test split).
    pub eval_per_language: Option<usize>,
    /// Cap on optimizer steps (None = epochs only).
    pub max_steps: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learning_rate: None,
            patience: 3,
            adapter: AdapterConfig::default(),
            temperature: crate::tasks::DEFAULT_TEMPERATURE,
            pooling: Pooling::Mean,
            max_decode_len: 32,
            eval_per_language: None,
            max_steps: None,
        }
    }
}

impl FinetuneConfig {
    pub fn learning_rate_for(&self, tuning: Tuning) -> f64 {
        self.learning_rate.unwrap_or(if tuning.uses_adapters() { 1e-3 } else { 3e-4 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetrics {
    Bleu(BleuReport),
    Mrr(MrrReport),
}

impl TaskMetrics {
    /// Headline number on the human scale (BLEU and MRR times 100).
    pub fn overall(&self) -> f64 {
        100.0
            * match self {
                Self::Bleu(r) => r.scores.overall,
                Self::Mrr(r) => r.scores.overall,
            }
    }

    pub fn language(&self, lang: &str) -> Option<f64> {
        let s = match self {
            Self::Bleu(r) => &r.scores,
            Self::Mrr(r) => &r.scores,
        };
        s.language(lang).map(|v| 100.0 * v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub regime: Regime,
    pub config_hash: String,
    pub base_hash_before: String,
    pub base_hash_after: String,
    pub parameters: ParameterReport,
    pub trainable_params: usize,
    pub steps: usize,
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub best_epoch: usize,
    pub metrics: TaskMetrics,
    pub wall_clock_secs: f64,
    pub checkpoints: Vec<String>,
}

pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Batch index lists for one epoch.
pub fn make_batches(examples: &[CorpusExample], batch_size: usize, batching: Batching, seed: u64) -> Vec<Vec<usize>> {
    let bs = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match batching {
        Batching::Multilingual => {
            let mut idx: Vec<usize> = (0..examples.len()).collect();
            idx.shuffle(&mut rng);
            idx.chunks(bs).map(<[usize]>::to_vec).collect()
        }
        Batching::Monolingual => {
            let mut langs: Vec<&str> = Vec::new();
            for e in examples {
                if !langs.contains(&e.language.as_str()) {
                    langs.push(&e.language);
                }
            }
            let mut batches = Vec::new();
            for lang in langs {
                let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].language == lang).collect();
                idx.shuffle(&mut rng);
                batches.extend(idx.chunks(bs).map(<[usize]>::to_vec));
            }
            batches.shuffle(&mut rng);
            batches
        }
    }
}

/// `k` examples per language, uniformly without replacement, in corpus order.
pub fn low_resource_sample(examples: &[CorpusExample], k: usize, seed: u64) -> Result<Vec<CorpusExample>> {
    let mut keep = Vec::new();
    for (li, (lang, group)) in by_language(examples).into_iter().enumerate() {
        if k > group.len() {
            return Err(Error::Invalid(format!("asked for {k} `{lang}` examples but only {} exist", group.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (li as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut chosen: Vec<&CorpusExample> = group.choose_multiple(&mut rng, k).copied().collect();
        chosen.sort_by_key(|e| e.id);
        keep.extend(chosen.into_iter().map(|e| e.id));
    }
    let keep: HashSet<u64> = keep.into_iter().collect();
    Ok(examples.iter().filter(|e| keep.contains(&e.id)).cloned().collect())
}

fn filter_languages(examples: &[CorpusExample], langs: &[String]) -> Vec<CorpusExample> {
    examples.iter().filter(|e| langs.contains(&e.language)).cloned().collect()
}

fn task_loss(
    pass: &mut Pass<'_>,
    model: &TransformerModel,
    task: Task,
    enc: &Encoding<'_>,
    batch: &[&CorpusExample],
    cfg: &FinetuneConfig,
) -> Result<Var> {
    match task {
        Task::Summarization => {
            let pairs: Vec<(Vec<usize>, Vec<usize>)> = batch.iter().map(|e| (enc.code(e), enc.description(e))).collect();
            summarization_loss_in(pass, model, &SummarizationBatch::new(&pairs))
        }
        Task::Search => {
            let sb = SearchBatch {
                queries: batch.iter().map(|e| enc.description(e)).collect(),
                codes: batch.iter().map(|e| enc.code(e)).collect(),
            };
            search_loss_in(pass, model, &sb, cfg.pooling, cfg.temperature)
        }
    }
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    model: &mut TransformerModel,
    adam: &mut AdamState,
    task: Task,
    enc: &Encoding<'_>,
    batch: &[&CorpusExample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<f64> {
    let (loss, grads) = {
        let mut pass = model.train_pass(seed);
        let loss = task_loss(&mut pass, model, task, enc, batch, cfg)?;
        let value = pass.graph.scalar(loss);
        pass.graph.backward(loss)?;
        (value, pass.gradients())
    };
    model.zero_grad();
    model.accumulate_grads(&grads)?;
    let params: Vec<_> = model.trainable_params_mut().into_iter().filter(|(_, t)| t.grad().is_some()).collect();
    adam.step(params)?;
    model.zero_grad();
    Ok(loss)
}

/// Mean task loss over `examples` in evaluation mode, in chunks of the
/// training batch size (search needs at least two rows per chunk).
pub fn eval_loss(model: &TransformerModel, task: Task, enc: &Encoding<'_>, examples: &[CorpusExample], cfg: &FinetuneConfig) -> Result<f64> {
    let refs: Vec<&CorpusExample> = examples.iter().collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in refs.chunks(cfg.batch_size.max(2)) {
        if task == Task::Search && chunk.len() < 2 {
            continue;
        }
        let mut pass = model.eval_pass();
        let l = task_loss(&mut pass, model, task, enc, chunk, cfg)?;
        total += pass.graph.scalar(l) * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

fn eval_subset(examples: &[CorpusExample], langs: &[String], cap: Option<usize>) -> Vec<CorpusExample> {
    let mut out = Vec::new();
    for lang in langs {
        let group = examples.iter().filter(|e| &e.language == lang);
        match cap {
            Some(c) => out.extend(group.take(c).cloned()),
            None => out.extend(group.cloned()),
        }
    }
    out
}

/// Scores `model` on `examples`: BLEU for summarization, MRR against a
/// per-language candidate pool for search.
pub fn evaluate(model: &TransformerModel, task: Task, enc: &Encoding<'_>, examples: &[CorpusExample], cfg: &FinetuneConfig) -> Result<TaskMetrics> {
    if examples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    match task {
        Task::Summarization => {
            let items = examples
                .iter()
                .map(|e| {
                    let out = generate_summary(model, &enc.code(e), cfg.max_decode_len, Strategy::Greedy)?;
                    Ok((e.language.clone(), enc.vocab.decode(&out), e.description.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskMetrics::Bleu(bleu_report(&items)?))
        }
        Task::Search => {
            let (mut langs, mut ranked, mut gold) = (Vec::new(), Vec::new(), Vec::new());
            for (lang, group) in by_language(examples) {
                let cands: Vec<(u64, Vec<usize>)> = group.iter().map(|e| (e.id, enc.code(e))).collect();
                let index = RetrievalIndex::build(model, &cands, cfg.pooling, true)?;
                for e in group {
                    let q = crate::tasks::embed(model, &enc.description(e), cfg.pooling, true)?;
                    ranked.push(index.rank(&q));
                    gold.push(e.id);
                    langs.push(lang.clone());
                }
            }
            Ok(TaskMetrics::Mrr(mrr(&langs, &ranked, &gold)?))
        }
    }
}

/// Runs one fine-tuning regime starting from `base` and evaluates on the
/// test split of the regime's evaluation languages.
pub fn finetune(
    base: &TransformerModel,
    vocab: &Vocabulary,
    splits: &Splits,
    regime: &Regime,
    task: Task,
    cfg: &FinetuneConfig,
) -> Result<(TransformerModel, RunRecord)> {
    let mut model = base.clone();
    if regime.tuning.uses_adapters() {
        let mut acfg = cfg.adapter.clone();
        if regime.tuning == Tuning::AdapterMoe {
            acfg.variant = Variant::Moe;
        }
        model.inject(acfg, regime.seed ^ 0xADA9)?;
        model.freeze_base()?;
    }
    train_model(&mut model, vocab, splits, regime, task, cfg)
}

/// Trains an already prepared model (adapters injected and base frozen for
/// adapter regimes).
pub fn train_model(
    model: &mut TransformerModel,
    vocab: &Vocabulary,
    splits: &Splits,
    regime: &Regime,
    task: Task,
    cfg: &FinetuneConfig,
) -> Result<(TransformerModel, RunRecord)> {
    let start = Instant::now();
    if regime.tuning.uses_adapters() && (model.adapters().is_none() || !model.is_base_frozen()) {
        return Err(Error::Invalid("adapter regimes need injected adapters and a frozen base".into()));
    }
    let train_langs = regime.scope.train_languages();
    let eval_langs = regime.scope.eval_languages();
    let mut train = filter_languages(&splits.train, &train_langs);
    if let Some(k) = regime.samples_per_language {
        train = low_resource_sample(&train, k, regime.seed)?;
    }
    if train.is_empty() {
        return Err(Error::Invalid(format!("no training examples for {train_langs:?}")));
    }
    let dev = eval_subset(&splits.dev, &train_langs, cfg.eval_per_language);
    let test = eval_subset(&splits.test, &eval_langs, cfg.eval_per_language);
    if test.is_empty() {
        return Err(Error::Invalid(format!("no test examples for {eval_langs:?}")));
    }
    let train_ids: HashSet<u64> = train.iter().map(|e| e.id).collect();
    if test.iter().chain(&dev).any(|e| train_ids.contains(&e.id)) {
        return Err(Error::Invalid("evaluation data overlaps the training data".into()));
    }

    let enc = Encoding { vocab, max_len: model.config().max_seq_len, tags: regime.language_tags };
    let base_hash_before = model.base_hash();
    let mut adam = AdamState::new(cfg.learning_rate_for(regime.tuning));
    let (mut train_loss, mut dev_loss) = (Vec::new(), Vec::new());
    let mut best: Option<(f64, TransformerModel, usize)> = None;
    let mut since_best = 0;
    let mut steps = 0;
    'epochs: for epoch in 0..cfg.epochs.max(1) {
        let batches = make_batches(&train, cfg.batch_size, regime.batching, regime.seed.wrapping_add(epoch as u64));
        let mut sum = 0.0;
        let mut n = 0;
        for b in &batches {
            let rows: Vec<&CorpusExample> = b.iter().map(|&i| &train[i]).collect();
            if task == Task::Search && rows.len() < 2 {
                continue;
            }
            let seed = regime.seed.wrapping_mul(1_000_003).wrapping_add(steps as u64);
            sum += train_step(model, &mut adam, task, &enc, &rows, cfg, seed)?;
            n += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                train_loss.push(sum / n as f64);
                break 'epochs;
            }
        }
        train_loss.push(if n == 0 { f64::NAN } else { sum / n as f64 });
        if !dev.is_empty() {
            let d = eval_loss(model, task, &enc, &dev, cfg)?;
            dev_loss.push(d);
            if best.as_ref().is_none_or(|(b, _, _)| d < *b) {
                best = Some((d, model.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let mut best_epoch = train_loss.len().saturating_sub(1);
    if let Some((_, m, e)) = best {
        if dev_loss.last().is_some_and(|last| *last > dev_loss[e]) {
            *model = m;
        }
        best_epoch = e;
    }
    let metrics = evaluate(model, task, &enc, &test, cfg)?;
    let parameters = ParameterReport::for_model(model);
    let record = RunRecord {
        task,
        regime: regime.clone(),
        config_hash: config_hash(&(regime, cfg, task.as_str(), &base_hash_before))?,
        base_hash_before,
        base_hash_after: model.base_hash(),
        trainable_params: parameters.trainable_params,
        parameters,
        steps,
        train_loss,
        dev_loss,
        best_epoch,
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoints: Vec::new(),
    };
    Ok((model.clone(), record))
}
