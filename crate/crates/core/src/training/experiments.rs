use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, finetune, pretrain_mlm, DataScope, FinetuneConfig, PretrainConfig, PretrainOutcome, Regime, Tuning};
use crate::corpus::minilang::{languages, MiniLangSpec};
use crate::corpus::{generate_synthetic, split, CorpusExample, Splits, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::probing::{build_dataset, extract_embeddings, train_probe, ProbeTask};
use crate::tasks::{Encoding, Task};

/// Elementwise `(adapter - full) / full`.
pub fn relative_improvement(adapter: &[Vec<f64>], full: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if adapter.len() != full.len() || adapter.iter().zip(full).any(|(a, f)| a.len() != f.len()) {
        return Err(Error::Invalid("relative improvement needs matrices of equal shape".into()));
    }
    Ok(adapter.iter().zip(full).map(|(a, f)| a.iter().zip(f).map(|(x, y)| (x - y) / y).collect()).collect())
}

/// Rows are training languages, columns evaluation languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualReport {
    pub task: Task,
    pub languages: Vec<String>,
    pub adapter: Vec<Vec<f64>>,
    pub full: Vec<Vec<f64>>,
    pub relative: Vec<Vec<f64>>,
}

fn matrix_csv(languages: &[String], m: &[Vec<f64>]) -> String {
    let mut s = format!("train\\eval,{}\n", languages.join(","));
    for (lang, row) in languages.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{lang},{}", cells.join(","));
    }
    s
}

impl CrossLingualReport {
    pub fn adapter_csv(&self) -> String {
        matrix_csv(&self.languages, &self.adapter)
    }

    pub fn full_csv(&self) -> String {
        matrix_csv(&self.languages, &self.full)
    }

    pub fn relative_csv(&self) -> String {
        matrix_csv(&self.languages, &self.relative)
    }
}

/// Trains one adapter model and one fully fine-tuned model per training
/// language and scores each on every language's test split.
pub fn cross_lingual_matrix(
    base: &TransformerModel,
    vocab: &Vocabulary,
    splits: &Splits,
    template: &Regime,
    languages: &[String],
    task: Task,
    cfg: &FinetuneConfig,
) -> Result<CrossLingualReport> {
    if languages.len() < 2 {
        return Err(Error::Invalid("cross-lingual matrix needs at least two languages".into()));
    }
    let mut mats = Vec::new();
    for tuning in [if template.tuning == Tuning::Full { Tuning::Adapter } else { template.tuning }, Tuning::Full] {
        let mut m = Vec::new();
        for train in languages {
            let regime = Regime { tuning, scope: DataScope::Monolingual(train.clone()), ..template.clone() };
            let (model, _) = finetune(base, vocab, splits, &regime, task, cfg)?;
            let mut row = Vec::new();
            for eval in languages {
                let enc = Encoding { vocab, max_len: model.config().max_seq_len, tags: regime.language_tags };
                let test: Vec<_> = splits
                    .test
                    .iter()
                    .filter(|e| &e.language == eval)
                    .take(cfg.eval_per_language.unwrap_or(usize::MAX))
                    .cloned()
                    .collect();
                row.push(evaluate(&model, task, &enc, &test, cfg)?.overall());
            }
            m.push(row);
        }
        mats.push(m);
    }
    let full = mats.pop().expect("two regimes");
    let adapter = mats.pop().expect("two regimes");
    let relative = relative_improvement(&adapter, &full)?;
    Ok(CrossLingualReport { task, languages: languages.to_vec(), adapter, full, relative })
}

/// Mean of `f(seed)` over `seeds`, with the individual values.
pub fn average_over_seeds<F>(seeds: &[u64], mut f: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(u64) -> Result<f64>,
{
    if seeds.is_empty() {
        return Err(Error::Invalid("need at least one seed".into()));
    }
    let vals = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok((vals.iter().sum::<f64>() / vals.len() as f64, vals))
}

/// One row of a low-resource table: `k = None` is the full training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowResourcePoint {
    pub k: Option<usize>,
    pub per_language: Vec<(String, f64)>,
    pub overall: f64,
}

/// Adapter-tunes (per `template`) once per `k` plus once on the full
/// training set; rows follow `ks` with the full set last.
pub fn low_resource_curve(
    base: &TransformerModel,
    vocab: &Vocabulary,
    splits: &Splits,
    template: &Regime,
    ks: &[usize],
    task: Task,
    cfg: &FinetuneConfig,
) -> Result<Vec<LowResourcePoint>> {
    ks.iter()
        .map(|&k| Some(k))
        .chain(std::iter::once(None))
        .map(|k| {
            let regime = Regime { samples_per_language: k, ..template.clone() };
            let (_, record) = finetune(base, vocab, splits, &regime, task, cfg)?;
            let per_language = regime
                .scope
                .eval_languages()
                .into_iter()
                .map(|l| {
                    let v = record.metrics.language(&l).unwrap_or(f64::NAN);
                    (l, v)
                })
                .collect();
            Ok(LowResourcePoint { k, per_language, overall: record.metrics.overall() })
        })
        .collect()
}

/// Desk-scale model shape used by the directional experiments.
pub fn toy_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers_encoder: 2,
        n_layers_decoder: 2,
        n_heads: 2,
        d_ff: 64,
        ..ModelConfig::desk(vocab_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub languages: usize,
    pub per_language: usize,
    pub imbalance: f64,
    pub fractions: (f64, f64, f64),
    /// `vocab_size` is replaced by the built vocabulary's size.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

impl LabConfig {
    pub fn toy(languages: usize, per_language: usize, seed: u64) -> Self {
        Self {
            languages,
            per_language,
            imbalance: 1.0,
            fractions: (0.8, 0.1, 0.1),
            model: toy_model_config(0),
            pretrain: PretrainConfig { seed, ..PretrainConfig::default() },
            seed,
        }
    }
}

/// A synthetic corpus, its splits and vocabulary, and an MLM-pretrained base.
#[derive(Clone, Debug)]
pub struct Lab {
    pub specs: &'static [MiniLangSpec],
    pub corpus: Vec<CorpusExample>,
    pub splits: Splits,
    pub vocab: Vocabulary,
    pub base: TransformerModel,
    pub pretrain: PretrainOutcome,
}

impl Lab {
    pub fn prepare(cfg: &LabConfig) -> Result<Self> {
        if !(2..=6).contains(&cfg.languages) {
            return Err(Error::Invalid(format!("lab needs 2 to 6 languages, got {}", cfg.languages)));
        }
        let specs = languages(cfg.languages);
        let corpus = generate_synthetic(specs, cfg.per_language, cfg.imbalance, cfg.seed)?;
        let splits = split(&corpus, cfg.fractions, cfg.seed)?;
        let names: Vec<String> = specs.iter().map(|s| s.name.to_string()).collect();
        let vocab = Vocabulary::build(&splits.train, &names, true, 1);
        let mcfg = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
        let mut base = TransformerModel::new(mcfg, cfg.seed)?;
        let pretrain = pretrain_mlm(&mut base, &splits.train, &vocab, &cfg.pretrain)?;
        Ok(Self { specs, corpus, splits, vocab, base, pretrain })
    }

    pub fn language_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.to_string()).collect()
    }
}

/// Probe accuracy on the last encoder layer of `model`.
pub fn final_layer_probe(
    model: &TransformerModel,
    vocab: &Vocabulary,
    specs: &[MiniLangSpec],
    task: ProbeTask,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let ds = build_dataset(task, specs, n, seed)?;
    let codes: Vec<Vec<String>> = ds.examples.iter().map(|e| e.code.clone()).collect();
    let emb = extract_embeddings(model, vocab, &codes, model.config().n_layers_encoder)?;
    Ok(train_probe(&emb, &ds.labels(), &ds.train, &ds.test, seed)?.accuracy)
}
