//! Probing: LEN/CPX/TYP datasets built by static analysis, layer-wise
//! embedding extraction and linear (hidden-unit-free) probes.

pub mod analyzer;
mod probe;


use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use analyzer::{label_cpx, label_len, mutate_types, parse, scan_decision_points, ParseInfo, TypeCheck};
pub use probe::{train_probe, LinearProbe, ProbeFit};

use crate::autodiff::Tensor;
use crate::corpus::minilang::{self, GenOptions, MiniLangSpec};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::TransformerModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeTask {
    #[serde(rename = "LEN")]
    Len,
    #[serde(rename = "CPX")]
    Cpx,
    #[serde(rename = "TYP")]
    Typ,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 3] = [ProbeTask::Len, ProbeTask::Cpx, ProbeTask::Typ];

    pub fn classes(self) -> usize {
        match self {
            Self::Len => 5,
            Self::Cpx => 10,
            Self::Typ => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Len => "LEN",
            Self::Cpx => "CPX",
            Self::Typ => "TYP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LEN" => Ok(Self::Len),
            "CPX" => Ok(Self::Cpx),
            "TYP" => Ok(Self::Typ),
            other => Err(Error::Invalid(format!("unknown probe task `{other}` (expected LEN, CPX or TYP)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub language: String,
    pub code: Vec<String>,
    pub task: ProbeTask,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub task: ProbeTask,
    pub examples: Vec<ProbeExample>,
    pub class_counts: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            language: &'a str,
            code: String,
            task: ProbeTask,
            label: usize,
        }
        for e in &self.examples {
            let line = Line { language: &e.language, code: e.code.join(" "), task: e.task, label: e.label };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Builds a class-balanced probe dataset of `n` examples. Example `i` has
/// label `i mod classes` and language `i mod languages`; 80% of each class
/// goes to the probe's training split.
pub fn build_dataset(task: ProbeTask, languages: &[MiniLangSpec], n: usize, seed: u64) -> Result<ProbeDataset> {
    let classes = task.classes();
    if n < 2 * classes {
        return Err(Error::Invalid(format!("{} probe needs at least {} examples", task.as_str(), 2 * classes)));
    }
    if languages.is_empty() {
        return Err(Error::Invalid("probe dataset needs at least one language".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = analyzer::type_pool(languages);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let spec = &languages[i % languages.len()];
        let opts = match task {
            ProbeTask::Len => {
                let lo = 50 * label;
                let hi = if label == 4 { 250 } else { lo + 50 };
                GenOptions { decisions: None, length: Some((lo, hi)), nested: false }
            }
            ProbeTask::Cpx => GenOptions { decisions: Some(label), length: None, nested: false },
            ProbeTask::Typ => GenOptions::default(),
        };
        let f = minilang::generate_function(spec, &opts, &mut rng);
        let mut code = minilang::render(spec, &f);
        if task == ProbeTask::Typ && label == 1 {
            let s = rand::Rng::random::<u64>(&mut rng);
            code = mutate_types(spec, &code, &pool, s)?.0;
        }
        examples.push(ProbeExample { language: spec.name.to_string(), code, task, label });
    }
    let mut class_counts = vec![0; classes];
    for e in &examples {
        class_counts[e.label] += 1;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| examples[i].label == c).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() * 4).div_ceil(5);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ProbeDataset { task, examples, class_counts, train, test })
}

fn code_ids(model: &TransformerModel, vocab: &Vocabulary, code: &[String]) -> Vec<usize> {
    let mut ids = vocab.encode(code);
    ids.truncate(model.config().max_seq_len);
    ids
}

/// Mean-pooled hidden states of every encoder layer: one `[N x d]` matrix
/// per layer index `0..=n_layers`.
pub fn extract_all_layers(model: &TransformerModel, vocab: &Vocabulary, codes: &[Vec<String>]) -> Result<Vec<Tensor>> {
    let layers = model.config().n_layers_encoder + 1;
    let d = model.config().d_model;
    let mut data = vec![Vec::with_capacity(codes.len() * d); layers];
    for code in codes {
        let ids = code_ids(model, vocab, code);
        let (_, trace) = model.encode(&ids, true)?;
        let trace = trace.expect("capture requested");
        for (l, h) in trace.layers.iter().enumerate() {
            data[l].extend(mean_rows(h));
        }
    }
    data.into_iter().map(|v| Tensor::new(vec![codes.len(), d], v)).collect()
}

/// Mean-pooled states of one layer (0 is the embedding output).
pub fn extract_embeddings(
    model: &TransformerModel,
    vocab: &Vocabulary,
    codes: &[Vec<String>],
    layer: usize,
) -> Result<Tensor> {
    let n = model.config().n_layers_encoder;
    if layer > n {
        return Err(Error::Invalid(format!("layer {layer} out of range 0..={n}")));
    }
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(codes.len() * d);
    for code in codes {
        let ids = code_ids(model, vocab, code);
        let (_, trace) = model.encode(&ids, true)?;
        data.extend(mean_rows(&trace.expect("capture requested").layers[layer]));
    }
    Tensor::new(vec![codes.len(), d], data)
}

pub(crate) fn mean_rows(h: &Tensor) -> Vec<f64> {
    let (rows, cols) = (h.rows(), h.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}

/// Probe accuracy at every encoder layer.
pub fn layer_sweep(model: &TransformerModel, vocab: &Vocabulary, dataset: &ProbeDataset, seed: u64) -> Result<Vec<f64>> {
    let codes: Vec<Vec<String>> = dataset.examples.iter().map(|e| e.code.clone()).collect();
    let labels = dataset.labels();
    extract_all_layers(model, vocab, &codes)?
        .iter()
        .map(|emb| Ok(train_probe(emb, &labels, &dataset.train, &dataset.test, seed)?.accuracy))
        .collect()
}

pub fn sweep_csv(accuracies: &[f64]) -> String {
    let mut s = String::from("layer,accuracy\n");
    for (l, a) in accuracies.iter().enumerate() {
        let _ = writeln!(s, "{l},{a:.6}");
    }
    s
}
