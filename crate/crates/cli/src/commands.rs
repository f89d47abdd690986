use std::fmt::Write as _;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use indexmap::IndexMap;
use polyadapt::adapter::AdapterBank;
use polyadapt::checkpoint::Checkpoint;
use polyadapt::corpus::minilang::{languages as builtin, lookup, MiniLangSpec};
use polyadapt::corpus::{self, CorpusExample, Splits, Vocabulary};
use polyadapt::metrics::Table;
use polyadapt::model::{ParameterReport, TransformerModel};
use polyadapt::probing::{build_dataset, layer_sweep, sweep_csv, ProbeTask};
use polyadapt::tasks::{Encoding, Task};
use polyadapt::training::{
    config_hash, cross_lingual_matrix, evaluate, finetune, low_resource_curve, pretrain_mlm, PretrainOutcome, Regime,
    TaskMetrics, Tuning,
};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::rundir::{create_output, run_root, RunDir};

const SPLIT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Where a command writes: an explicit directory, or `<root>/<name>-<hash>`.
pub struct Placement {
    pub run_dir: Option<PathBuf>,
    pub run_root: Option<PathBuf>,
}

impl Placement {
    fn acquire<T: Serialize>(&self, command: &str, key: &T) -> Result<RunDir> {
        let path = match &self.run_dir {
            Some(p) => p.clone(),
            None => {
                let h = config_hash(&(command, key))?;
                run_root(self.run_root.as_deref()).join(format!("{command}-{}", &h[..12]))
            }
        };
        RunDir::acquire(path)
    }
}

fn specs_for(names: &[String]) -> Result<Vec<&'static MiniLangSpec>> {
    names
        .iter()
        .map(|n| lookup(n).with_context(|| format!("`{n}` is not a built-in mini-language")))
        .collect()
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<CorpusExample>> {
    match &cfg.data {
        Some(path) => {
            let accepted: Vec<String> = if cfg.languages.is_empty() {
                polyadapt::corpus::minilang::builtin_languages().iter().map(|s| s.name.to_string()).collect()
            } else {
                cfg.languages.clone()
            };
            let accepted: Vec<&str> = accepted.iter().map(String::as_str).collect();
            corpus::ingest_jsonl(path, &accepted, cfg.max_tokens).with_context(|| format!("reading corpus {}", path.display()))
        }
        None => {
            let specs: Vec<MiniLangSpec> = if cfg.languages.is_empty() {
                builtin(cfg.n_languages).to_vec()
            } else {
                specs_for(&cfg.languages)?.into_iter().cloned().collect()
            };
            Ok(corpus::generate_synthetic(&specs, cfg.n_per_language, cfg.imbalance, cfg.seed)?)
        }
    }
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(corpus::split(&load_corpus(cfg)?, SPLIT_FRACTIONS, cfg.seed)?)
}

pub struct Prepared {
    pub splits: Splits,
    pub vocab: Vocabulary,
    pub base: TransformerModel,
    pub pretrain: Option<PretrainOutcome>,
}

/// Data, vocabulary and base model for `cfg`: loaded from
/// `base_checkpoint` or pre-trained from scratch.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let splits = load_splits(cfg)?;
    if let Some(path) = &cfg.base_checkpoint {
        let (base, meta) = load_model(path)?;
        let vocab = Vocabulary::from_meta(&meta)?;
        return Ok(Prepared { splits, vocab, base, pretrain: None });
    }
    let vocab = Vocabulary::build(&splits.train, &splits.languages(), true, 1);
    let mut base = TransformerModel::new(cfg.model_config(vocab.len()), cfg.seed)?;
    let pretrain = if cfg.pretrain_steps > 0 {
        Some(pretrain_mlm(&mut base, &splits.train, &vocab, &cfg.pretrain_config())?)
    } else {
        None
    };
    Ok(Prepared { splits, vocab, base, pretrain })
}

fn load_model(path: &Path) -> Result<(TransformerModel, IndexMap<String, String>)> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    TransformerModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn model_meta(cfg: &RunConfig, vocab: &Vocabulary, regime: Option<&Regime>) -> Result<IndexMap<String, String>> {
    let mut meta = vocab.to_meta();
    meta.insert("run.config".into(), serde_json::to_string(cfg)?);
    if let Some(r) = regime {
        meta.insert("run.regime".into(), serde_json::to_string(r)?);
    }
    Ok(meta)
}

fn fmt_table(t: &Table) -> String {
    t.to_markdown(2)
}

fn metrics_row(m: &TaskMetrics, langs: &[String]) -> Vec<f64> {
    let mut row: Vec<f64> = langs.iter().map(|l| m.language(l).unwrap_or(f64::NAN)).collect();
    row.push(m.overall());
    row
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Summarization => "BLEU-4",
        Task::Search => "MRR",
    }
}

// ---------------------------------------------------------------- generate

pub struct GenerateArgs {
    pub languages: usize,
    pub n: usize,
    pub imbalance: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub force: bool,
}

pub fn generate(a: &GenerateArgs) -> Result<String> {
    if !(1..=6).contains(&a.languages) {
        bail!("--languages must be between 1 and 6, got {}", a.languages);
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let corpus_path = a.out.join("corpus.jsonl");
    let file = create_output(&corpus_path, a.force)?;
    let examples = corpus::generate_synthetic(builtin(a.languages), a.n, a.imbalance, a.seed)?;
    corpus::write_jsonl(BufWriter::new(file), &examples)?;

    let splits = corpus::split(&examples, SPLIT_FRACTIONS, a.seed)?;
    let ids = |v: &[CorpusExample]| v.iter().map(|e| e.id).collect::<Vec<_>>();
    let manifest = json!({ "train": ids(&splits.train), "dev": ids(&splits.dev), "test": ids(&splits.test) });
    std::fs::write(a.out.join("splits.json"), serde_json::to_string(&manifest)? + "\n")?;

    let mut table = Table::new("Corpus statistics", "Language", vec!["Train".into(), "Dev".into(), "Test".into(), "Total".into()]);
    let mut summary = Vec::new();
    for lang in splits.languages() {
        let count = |v: &[CorpusExample]| v.iter().filter(|e| e.language == lang).count();
        let (tr, dv, te) = (count(&splits.train), count(&splits.dev), count(&splits.test));
        table.push(lang.clone(), vec![tr as f64, dv as f64, te as f64, (tr + dv + te) as f64]);
        summary.push(json!({ "language": lang, "train": tr, "dev": dv, "test": te, "total": tr + dv + te }));
    }
    let md = table.to_markdown(0);
    std::fs::write(a.out.join("summary.md"), &md)?;
    std::fs::write(
        a.out.join("summary.json"),
        serde_json::to_string_pretty(&json!({ "seed": a.seed, "imbalance": a.imbalance, "languages": summary }))? + "\n",
    )?;
    Ok(md)
}

// ---------------------------------------------------------------- pretrain

pub fn pretrain(cfg: &RunConfig, at: &Placement) -> Result<String> {
    if cfg.base_checkpoint.is_some() {
        bail!("pretrain builds a new base; remove `base_checkpoint` from the config");
    }
    let run = at.acquire("pretrain", cfg)?;
    let p = prepare(cfg)?;
    let ckpt = run.file("base.ckpt");
    p.base.save(&ckpt, &model_meta(cfg, &p.vocab, None)?)?;
    let outcome = p.pretrain.unwrap_or(PretrainOutcome { mlm_loss: vec![], denoise_loss: vec![] });
    let metrics = json!({
        "mlm_loss_first": outcome.mlm_loss.first(),
        "mlm_loss_last": outcome.mlm_loss.last(),
        "mlm_loss": outcome.mlm_loss,
        "denoise_loss": outcome.denoise_loss,
        "base_hash": p.base.base_hash(),
        "parameters": p.base.params().count(),
        "vocab_size": p.vocab.len(),
    });
    run.write_json("metrics.json", &metrics)?;
    run.write_json("record.json", &json!({ "command": "pretrain", "config": cfg, "config_hash": config_hash(cfg)?, "checkpoint": ckpt }))?;
    let mut md = String::from("### Pre-training\n\n");
    let _ = writeln!(md, "- steps: {}", cfg.pretrain_steps);
    let _ = writeln!(md, "- parameters: {}", p.base.params().count());
    if let (Some(a), Some(b)) = (metrics["mlm_loss_first"].as_f64(), metrics["mlm_loss_last"].as_f64()) {
        let _ = writeln!(md, "- MLM loss: {a:.4} -> {b:.4}");
    }
    let _ = writeln!(md, "- checkpoint: {}", ckpt.display());
    run.write("report.md", &md)?;
    Ok(format!("{}\n{md}", run.path().display()))
}

// ---------------------------------------------------------------- finetune

pub fn finetune_cmd(cfg: &RunConfig, at: &Placement) -> Result<String> {
    let run = at.acquire("finetune", cfg)?;
    let p = prepare(cfg)?;
    let langs = p.splits.languages();
    let regime = cfg.regime(&langs);
    let (model, mut record) = finetune(&p.base, &p.vocab, &p.splits, &regime, cfg.task, &cfg.finetune_config())?;

    let ckpt = run.file("model.ckpt");
    model.save(&ckpt, &model_meta(cfg, &p.vocab, Some(&regime))?)?;
    record.checkpoints.push(ckpt.display().to_string());
    if let Some(bank) = model.adapters() {
        let path = run.file("adapters.ckpt");
        bank.to_checkpoint(model.config(), &model.base_hash()).save(&path)?;
        record.checkpoints.push(path.display().to_string());
    }
    let eval_langs = regime.scope.eval_languages();
    run.write_json("metrics.json", &json!({ "metrics": record.metrics, "train_loss": record.train_loss, "dev_loss": record.dev_loss }))?;
    run.write_json("record.json", &json!({ "config": cfg, "record": record }))?;

    let mut t = Table::per_language(
        format!("{} ({}, {})", metric_name(cfg.task), cfg.task.as_str(), regime.tuning.as_str()),
        "Tuning",
        &eval_langs,
    );
    t.push(regime.tuning.as_str(), metrics_row(&record.metrics, &eval_langs));
    let mut md = fmt_table(&t);
    let _ = writeln!(md, "\n- trainable parameters: {}", record.trainable_params);
    let _ = writeln!(md, "- steps: {}, best epoch: {}", record.steps, record.best_epoch);
    let _ = writeln!(md, "- base unchanged: {}", record.base_hash_before == record.base_hash_after);
    run.write("report.md", &md)?;
    Ok(format!("{}\n{md}", run.path().display()))
}

// ---------------------------------------------------------------- eval / probe

fn load_tuned(checkpoint: &Path, adapters: Option<&Path>) -> Result<(TransformerModel, IndexMap<String, String>)> {
    let (mut model, meta) = load_model(checkpoint)?;
    if let Some(path) = adapters {
        if !path.exists() {
            bail!("adapter checkpoint {} does not exist", path.display());
        }
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let bank = AdapterBank::from_checkpoint(&ck, model.config(), Some(&model.base_hash()))?;
        model.attach(bank)?;
    }
    Ok((model, meta))
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub adapters: Option<PathBuf>,
    pub task: Task,
    pub languages: Vec<String>,
    pub config: Option<RunConfig>,
}

pub fn eval(a: &EvalArgs, at: &Placement) -> Result<String> {
    if a.languages.is_empty() {
        bail!("--languages must name at least one language");
    }
    let (model, meta) = load_tuned(&a.checkpoint, a.adapters.as_deref())?;
    let cfg: RunConfig = match &a.config {
        Some(c) => c.clone(),
        None => {
            let raw = meta.get("run.config").context("checkpoint has no stored run configuration; pass --config")?;
            RunConfig::from_map(serde_json::from_str(raw)?)?
        }
    };
    let tags = match meta.get("run.regime") {
        Some(r) => serde_json::from_str::<Regime>(r)?.language_tags,
        None => cfg.language_tags.unwrap_or(a.task == Task::Search),
    };
    let key = (a.checkpoint.display().to_string(), a.adapters.as_ref().map(|p| p.display().to_string()), a.task, &a.languages, &cfg);
    let run = at.acquire("eval", &key)?;
    let vocab = Vocabulary::from_meta(&meta)?;
    let splits = load_splits(&cfg)?;
    let test: Vec<CorpusExample> = a
        .languages
        .iter()
        .flat_map(|l| splits.test.iter().filter(move |e| &e.language == l).take(cfg.eval_per_language.unwrap_or(usize::MAX)))
        .cloned()
        .collect();
    for l in &a.languages {
        if !test.iter().any(|e| &e.language == l) {
            bail!("no test examples for language `{l}`");
        }
    }
    let enc = Encoding { vocab: &vocab, max_len: model.config().max_seq_len, tags };
    let metrics = evaluate(&model, a.task, &enc, &test, &cfg.finetune_config())?;
    run.write_json("metrics.json", &metrics)?;
    let mut t = Table::per_language(format!("{} ({})", metric_name(a.task), a.task.as_str()), "Checkpoint", &a.languages);
    t.push(a.checkpoint.display().to_string(), metrics_row(&metrics, &a.languages));
    let md = fmt_table(&t);
    run.write("report.md", &md)?;
    Ok(format!("{}\n{md}", run.path().display()))
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub adapters: Option<PathBuf>,
    pub tasks: Vec<ProbeTask>,
    pub n: usize,
    pub seed: u64,
}

#[derive(Serialize)]
struct ProbeResult {
    task: &'static str,
    layer_accuracy: Vec<f64>,
    final_layer: f64,
}

pub fn probe(a: &ProbeArgs, at: &Placement) -> Result<String> {
    if a.tasks.is_empty() {
        bail!("--tasks must name at least one probe task");
    }
    let (model, meta) = load_tuned(&a.checkpoint, a.adapters.as_deref())?;
    let vocab = Vocabulary::from_meta(&meta)?;
    let specs: Vec<MiniLangSpec> = specs_for(vocab.languages())?.into_iter().cloned().collect();
    let names: Vec<&str> = a.tasks.iter().map(|t| t.as_str()).collect();
    let key = (a.checkpoint.display().to_string(), a.adapters.as_ref().map(|p| p.display().to_string()), &names, a.n, a.seed);
    let run = at.acquire("probe", &key)?;

    let mut results = Vec::new();
    for &task in &a.tasks {
        let ds = build_dataset(task, &specs, a.n, a.seed)?;
        let acc = layer_sweep(&model, &vocab, &ds, a.seed)?;
        run.write(&format!("probe_{}.csv", task.as_str()), &sweep_csv(&acc))?;
        results.push(ProbeResult { task: task.as_str(), final_layer: *acc.last().expect("at least one layer"), layer_accuracy: acc });
    }
    run.write_json("metrics.json", &results)?;

    let mut final_t = Table::new("Probe accuracy, final encoder layer", "Task", vec!["Accuracy".into()]);
    let layers = model.config().n_layers_encoder + 1;
    let mut curve = Table::new("Probe accuracy by layer", "Task", (0..layers).map(|l| l.to_string()).collect());
    for r in &results {
        final_t.push(r.task, vec![r.final_layer]);
        curve.push(r.task, r.layer_accuracy.clone());
    }
    let md = format!("{}\n{}", final_t.to_markdown(3), curve.to_markdown(3));
    run.write("report.md", &md)?;
    Ok(format!("{}\n{md}", run.path().display()))
}

// ---------------------------------------------------------------- sweeps

pub fn sweep_dim(cfg: &RunConfig, dims: &[usize], at: &Placement) -> Result<String> {
    if dims.is_empty() {
        bail!("--dims must list at least one bottleneck dimension");
    }
    let run = at.acquire("sweep-dim", &(cfg, dims))?;
    let p = prepare(cfg)?;
    let langs = p.splits.languages();
    let mut regime = cfg.regime(&langs);
    if regime.tuning == Tuning::Full {
        regime.tuning = Tuning::Adapter;
    }
    let eval_langs = regime.scope.eval_languages();
    let mut t = Table::per_language(format!("{} by bottleneck dimension", metric_name(cfg.task)), "Dim", &eval_langs);
    let mut params = Table::new("Adapter parameters", "Dim", vec!["Adapter".into(), "Base".into(), "Ratio %".into()]);
    let mut rows = Vec::new();
    for &m in dims {
        let mut ft = cfg.finetune_config();
        ft.adapter.bottleneck_dim = m;
        let (_, rec) = finetune(&p.base, &p.vocab, &p.splits, &regime, cfg.task, &ft)?;
        let r = ParameterReport::from_configs(p.base.config(), Some(&ft.adapter));
        t.push(m.to_string(), metrics_row(&rec.metrics, &eval_langs));
        params.push(m.to_string(), vec![r.adapter_params as f64, r.base_params as f64, 100.0 * r.adapter_params as f64 / r.base_params as f64]);
        rows.push(json!({ "dim": m, "metrics": rec.metrics, "adapter_params": r.adapter_params }));
    }
    run.write_json("metrics.json", &rows)?;
    run.write("sweep.csv", &t.to_csv())?;
    let md = format!("{}\n{}", fmt_table(&t), params.to_markdown(2));
    run.write("report.md", &md)?;
    Ok(format!("{}\n{md}", run.path().display()))
}

pub fn cross_lingual(cfg: &RunConfig, at: &Placement) -> Result<String> {
    let run = at.acquire("cross-lingual", cfg)?;
    let p = prepare(cfg)?;
    let langs = if cfg.languages.is_empty() { p.splits.languages() } else { cfg.languages.clone() };
    let template = cfg.regime(&langs);
    let rep = cross_lingual_matrix(&p.base, &p.vocab, &p.splits, &template, &langs, cfg.task, &cfg.finetune_config())?;
    run.write_json("metrics.json", &rep)?;
    run.write("adapter.csv", &rep.adapter_csv())?;
    run.write("full.csv", &rep.full_csv())?;
    run.write("relative.csv", &rep.relative_csv())?;
    let mut md = String::new();
    for (title, m, decimals) in [
        ("Adapter tuning", &rep.adapter, 2),
        ("Full fine-tuning", &rep.full, 2),
        ("Relative improvement of adapter over full", &rep.relative, 3),
    ] {
        let mut t = Table::new(title, "Train \\ Eval", langs.clone());
        for (l, row) in langs.iter().zip(m) {
            t.push(l.clone(), row.clone());
        }
        md.push_str(&t.to_markdown(decimals));
        md.push('\n');
    }
    run.write("report.md", &md)?;
    Ok(format!("{}\n{md}", run.path().display()))
}

pub fn low_resource(cfg: &RunConfig, ks: &[usize], seeds: &[u64], at: &Placement) -> Result<String> {
    if ks.is_empty() || seeds.is_empty() {
        bail!("--ks and --seeds must each list at least one value");
    }
    let run = at.acquire("low-resource", &(cfg, ks, seeds))?;
    let p = prepare(cfg)?;
    let langs = p.splits.languages();
    let eval_langs = cfg.regime(&langs).scope.eval_languages();
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; eval_langs.len() + 1]; ks.len() + 1];
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let template = Regime { seed, ..cfg.regime(&langs) };
        let points = low_resource_curve(&p.base, &p.vocab, &p.splits, &template, ks, cfg.task, &cfg.finetune_config())?;
        for (acc, pt) in sums.iter_mut().zip(&points) {
            for (i, l) in eval_langs.iter().enumerate() {
                acc[i] += pt.per_language.iter().find(|(x, _)| x == l).map_or(f64::NAN, |(_, v)| *v);
            }
            acc[eval_langs.len()] += pt.overall;
        }
        per_seed.push(json!({ "seed": seed, "points": points }));
    }
    let mut t = Table::per_language(format!("{} by training samples per language", metric_name(cfg.task)), "Samples", &eval_langs);
    for (i, row) in sums.iter().enumerate() {
        let label = ks.get(i).map_or("full".to_string(), |k| k.to_string());
        t.push(label, row.iter().map(|v| v / seeds.len() as f64).collect());
    }
    run.write_json("metrics.json", &json!({ "mean": t, "per_seed": per_seed }))?;
    run.write("low_resource.csv", &t.to_csv())?;
    let md = fmt_table(&t);
    run.write("report.md", &md)?;
    Ok(format!("{}\n{md}", run.path().display()))
}
