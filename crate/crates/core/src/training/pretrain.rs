use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Reduction, Var};
use crate::corpus::{CorpusExample, Vocabulary, BOS, EOS, MASK};
use crate::error::{Error, Result};
use crate::model::{Mode, TransformerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 16, learning_rate: 1e-3, mask_rate: 0.15, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    /// Masked-token loss per step.
    pub mlm_loss: Vec<f64>,
    /// Decoder reconstruction loss per step (encoder-decoder models only).
    pub denoise_loss: Vec<f64>,
}

/// Selects `rate` of the positions (at least one when `rate > 0`); selected
/// tokens become MASK 80% of the time, a random word 10%, unchanged 10%.
/// Returns the corrupted ids and per-position targets.
pub fn mask_sequence<R: Rng>(ids: &[usize], rate: f64, vocab: &Vocabulary, rng: &mut R) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut input = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    let mut chosen: Vec<usize> = (0..ids.len()).filter(|_| rng.random::<f64>() < rate).collect();
    if chosen.is_empty() && rate > 0.0 && !ids.is_empty() {
        chosen.push(rng.random_range(0..ids.len()));
    }
    let words = vocab.first_word_id()..vocab.len().max(vocab.first_word_id() + 1);
    for i in chosen {
        targets[i] = Some(ids[i]);
        let r: f64 = rng.random();
        if r < 0.8 {
            input[i] = MASK;
        } else if r < 0.9 {
            input[i] = rng.random_range(words.clone());
        }
    }
    (input, targets)
}

/// Masked-language-model pre-training over the code and description
/// sequences of `corpus`. Encoder-decoder models also learn to reconstruct
/// the uncorrupted sequence with the decoder.
pub fn pretrain_mlm(
    model: &mut TransformerModel,
    corpus: &[CorpusExample],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::Invalid("pre-training needs at least one step".into()));
    }
    let mut langs: Vec<&str> = corpus.iter().map(|e| e.language.as_str()).collect();
    langs.sort_unstable();
    langs.dedup();
    if langs.len() < 2 {
        return Err(Error::Invalid("pre-training corpus must span at least two languages".into()));
    }
    let max = model.config().max_seq_len;
    let seqs: Vec<Vec<usize>> = corpus
        .iter()
        .flat_map(|e| [vocab.encode(&e.code), vocab.encode(&e.description)])
        .map(|mut ids| {
            ids.truncate(max - 1);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let decoder = model.mode() == Mode::EncoderDecoder;
    let mut out = PretrainOutcome { mlm_loss: Vec::new(), denoise_loss: Vec::new() };
    for _ in 0..cfg.steps {
        let batch: Vec<&Vec<usize>> = (0..cfg.batch_size.max(1)).map(|_| &seqs[rng.random_range(0..seqs.len())]).collect();
        let masked: Vec<(Vec<usize>, Vec<Option<usize>>)> =
            batch.iter().map(|ids| mask_sequence(ids, cfg.mask_rate, vocab, &mut rng)).collect();
        let dropout_seed: u64 = rng.random();
        let (mlm, denoise, grads) = {
            let mut pass = model.train_pass(dropout_seed);
            let (mut mlm_sum, mut mlm_n): (Option<Var>, usize) = (None, 0);
            let (mut dn_sum, mut dn_n): (Option<Var>, usize) = (None, 0);
            for (orig, (input, targets)) in batch.iter().zip(&masked) {
                let enc = model.encode_in(&mut pass, input, false)?.states;
                let n = targets.iter().flatten().count();
                if n > 0 {
                    let logits = model.project_vocab(&mut pass, enc)?;
                    let l = pass.graph.cross_entropy(logits, targets, Reduction::Sum)?;
                    mlm_sum = Some(match mlm_sum {
                        Some(s) => pass.graph.add(s, l)?,
                        None => l,
                    });
                    mlm_n += n;
                }
                if decoder {
                    let mut dec_in = vec![BOS];
                    dec_in.extend(orig.iter());
                    let mut tgt: Vec<Option<usize>> = orig.iter().map(|&t| Some(t)).collect();
                    tgt.push(Some(EOS));
                    let logits = model.decode_in(&mut pass, enc, &dec_in)?;
                    let l = pass.graph.cross_entropy(logits, &tgt, Reduction::Sum)?;
                    dn_sum = Some(match dn_sum {
                        Some(s) => pass.graph.add(s, l)?,
                        None => l,
                    });
                    dn_n += tgt.len();
                }
            }
            let mlm_sum = mlm_sum.ok_or_else(|| Error::Invalid("masked-LM batch has no supervised positions".into()))?;
            let mlm = pass.graph.scale(mlm_sum, 1.0 / mlm_n as f64)?;
            let mlm_value = pass.graph.scalar(mlm);
            let (root, dn_value) = match dn_sum {
                Some(s) => {
                    let d = pass.graph.scale(s, 1.0 / dn_n as f64)?;
                    let v = pass.graph.scalar(d);
                    (pass.graph.add(mlm, d)?, Some(v))
                }
                None => (mlm, None),
            };
            pass.graph.backward(root)?;
            (mlm_value, dn_value, pass.gradients())
        };
        model.zero_grad();
        model.accumulate_grads(&grads)?;
        let params: Vec<_> = model.trainable_params_mut().into_iter().filter(|(_, t)| t.grad().is_some()).collect();
        adam.step(params)?;
        model.zero_grad();
        out.mlm_loss.push(mlm);
        if let Some(d) = denoise {
            out.denoise_loss.push(d);
        }
    }
    Ok(out)
}
