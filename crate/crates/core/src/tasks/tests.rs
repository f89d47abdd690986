use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{AdamState, Graph, Tensor};
use crate::corpus::{EOS, PAD};
use crate::gradcheck::check_gradients;
use crate::model::{ModelConfig, TransformerModel};

fn cfg(decoder: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers_encoder: 1,
        n_layers_decoder: decoder,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        dropout: 0.0,
        ..ModelConfig::desk(24)
    }
}

fn random_pairs(n: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let code = (0..rng.random_range(3..8)).map(|_| rng.random_range(5..24)).collect();
            let summary = (0..rng.random_range(2..5)).map(|_| rng.random_range(5..24)).collect();
            (code, summary)
        })
        .collect()
}

fn train_summarization(model: &mut TransformerModel, batch: &SummarizationBatch, steps: usize, lr: f64) -> Vec<f64> {
    let mut adam = AdamState::new(lr);
    let mut losses = Vec::new();
    for step in 0..steps {
        let grads = {
            let mut pass = model.train_pass(step as u64);
            let loss = summarization_loss_in(&mut pass, model, batch).unwrap();
            losses.push(pass.graph.scalar(loss));
            pass.graph.backward(loss).unwrap();
            pass.gradients()
        };
        model.zero_grad();
        model.accumulate_grads(&grads).unwrap();
        adam.step(model.trainable_params_mut()).unwrap();
    }
    losses
}

#[test]
fn batch_targets_are_shifted_inputs() {
    let b = SummarizationBatch::new(&[(vec![5, 6], vec![7, 8, 9])]);
    assert_eq!(b.decoder_input[0], [1, 7, 8, 9]);
    assert_eq!(b.target[0], [7, 8, 9, EOS]);
    assert_eq!(&b.decoder_input[0][1..], &b.target[0][..3]);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut model = TransformerModel::new(cfg(1), 1).unwrap();
    let shape = model.params().get("embed.tok").unwrap().shape().to_vec();
    *model.params_mut().get_mut("embed.tok").unwrap() = Tensor::zeros(&shape);
    let batch = SummarizationBatch::new(&random_pairs(3, 0));
    let loss = summarization_loss(&model, &batch).unwrap();
    assert!((loss - 24f64.ln()).abs() < 1e-12);
}

#[test]
fn all_pad_target_is_rejected() {
    let model = TransformerModel::new(cfg(1), 1).unwrap();
    let mut batch = SummarizationBatch::new(&random_pairs(1, 0));
    batch.target[0].iter_mut().for_each(|t| *t = PAD);
    assert!(summarization_loss(&model, &batch).is_err());
}

#[test]
fn encoder_only_cannot_summarize() {
    let model = TransformerModel::new(cfg(0), 1).unwrap();
    let batch = SummarizationBatch::new(&random_pairs(1, 0));
    assert!(summarization_loss(&model, &batch).is_err());
}

#[test]
fn loss_is_invariant_to_row_order() {
    let model = TransformerModel::new(cfg(1), 2).unwrap();
    let pairs = random_pairs(4, 3);
    let mut rev = pairs.clone();
    rev.reverse();
    let a = summarization_loss(&model, &SummarizationBatch::new(&pairs)).unwrap();
    let b = summarization_loss(&model, &SummarizationBatch::new(&rev)).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn memorization_lowers_loss() {
    let mut model = TransformerModel::new(cfg(1), 3).unwrap();
    let batch = SummarizationBatch::new(&random_pairs(10, 4));
    let losses = train_summarization(&mut model, &batch, 50, 3e-3);
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn decoding_contracts_and_memorized_output() {
    let mut model = TransformerModel::new(cfg(1), 5).unwrap();
    let pair = (vec![5, 9, 12, 7], vec![10, 11, 12]);
    let batch = SummarizationBatch::new(std::slice::from_ref(&pair));
    train_summarization(&mut model, &batch, 150, 1e-2);

    let greedy = generate_summary(&model, &pair.0, 10, Strategy::Greedy).unwrap();
    assert_eq!(greedy, [10, 11, 12, EOS]);
    assert_eq!(generate_summary(&model, &pair.0, 10, Strategy::Greedy).unwrap(), greedy);
    assert_eq!(generate_summary(&model, &pair.0, 10, Strategy::Beam(1)).unwrap(), greedy);
    assert_eq!(generate_summary(&model, &pair.0, 1, Strategy::Greedy).unwrap().len(), 1);
    assert!(generate_summary(&model, &pair.0, 0, Strategy::Greedy).is_err());
}

#[test]
fn wider_beam_never_scores_below_greedy() {
    let model = TransformerModel::new(cfg(1), 6).unwrap();
    for (code, _) in random_pairs(5, 8) {
        let g = generate_summary(&model, &code, 6, Strategy::Greedy).unwrap();
        let b = generate_summary(&model, &code, 6, Strategy::Beam(3)).unwrap();
        let (sg, sb) = (sequence_log_prob(&model, &code, &g).unwrap(), sequence_log_prob(&model, &code, &b).unwrap());
        assert!(sb >= sg - 1e-12, "{sb} < {sg}");
    }
}

fn rows(g: &mut Graph, data: &[f64], n: usize) -> crate::autodiff::Var {
    g.input(&[n, data.len() / n], data.to_vec()).unwrap()
}

#[test]
fn identical_embeddings_give_log_batch() {
    let mut g = Graph::new();
    let q = rows(&mut g, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 4);
    let c = rows(&mut g, &[0.5, 0.1, 0.5, 0.1, 0.5, 0.1, 0.5, 0.1], 4);
    let l = contrastive_loss(&mut g, q, c, 0.05).unwrap();
    assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn separated_pairs_approach_zero_loss() {
    let mut g = Graph::new();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let q = rows(&mut g, &eye, 3);
    let c = rows(&mut g, &eye, 3);
    let l = contrastive_loss(&mut g, q, c, 0.01).unwrap();
    assert!(g.scalar(l) < 1e-40);
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let c = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let r = check_gradients(&[q, c], 1e-5, |g, v| contrastive_loss(g, v[0], v[1], 0.5)).unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn single_pair_batch_is_rejected() {
    let model = TransformerModel::new(cfg(0), 1).unwrap();
    let batch = SearchBatch { queries: vec![vec![5, 6]], codes: vec![vec![7, 8]] };
    assert!(search_loss(&model, &batch, Pooling::Mean, DEFAULT_TEMPERATURE).is_err());
    let ok = SearchBatch { queries: vec![vec![5, 6], vec![9]], codes: vec![vec![7, 8], vec![10, 11]] };
    assert!(search_loss(&model, &ok, Pooling::Mean, DEFAULT_TEMPERATURE).unwrap().is_finite());
}

#[test]
fn embeddings_are_unit_norm() {
    let model = TransformerModel::new(cfg(0), 1).unwrap();
    for pooling in [Pooling::Mean, Pooling::First] {
        let e = embed(&model, &[5, 6, 7], pooling, true).unwrap();
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn candidates(n: usize, seed: u64) -> Vec<(u64, Vec<usize>)> {
    random_pairs(n, seed).into_iter().enumerate().map(|(i, (c, _))| (100 + i as u64, c)).collect()
}

#[test]
fn retrieval_ranks_self_first_and_breaks_ties_by_id() {
    let model = TransformerModel::new(cfg(0), 2).unwrap();
    let mut cands = candidates(6, 1);
    let index = RetrievalIndex::build(&model, &cands, Pooling::Mean, true).unwrap();
    assert_eq!(retrieve(&model, &cands[3].1, &index).unwrap()[0], 103);
    cands.push((7, cands[2].1.clone()));
    let index = RetrievalIndex::build(&model, &cands, Pooling::Mean, true).unwrap();
    let ranked = retrieve(&model, &cands[2].1, &index).unwrap();
    assert_eq!(&ranked[..2], &[7, 102]);
}

#[test]
fn retrieval_matches_brute_force_sort() {
    let model = TransformerModel::new(cfg(0), 3).unwrap();
    let cands = candidates(20, 2);
    let index = RetrievalIndex::build(&model, &cands, Pooling::Mean, false).unwrap();
    let query = vec![6, 7, 8, 9];
    let q = embed(&model, &query, Pooling::Mean, false).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut oracle: Vec<(u64, f64)> =
        cands.iter().map(|(id, ids)| (*id, cos(&q, &embed(&model, ids, Pooling::Mean, false).unwrap()))).collect();
    // insertion sort, descending similarity then ascending id
    for i in 1..oracle.len() {
        let mut j = i;
        while j > 0 && (oracle[j].1 > oracle[j - 1].1 || (oracle[j].1 == oracle[j - 1].1 && oracle[j].0 < oracle[j - 1].0)) {
            oracle.swap(j, j - 1);
            j -= 1;
        }
    }
    let expect: Vec<u64> = oracle.iter().map(|(id, _)| *id).collect();
    assert_eq!(retrieve(&model, &query, &index).unwrap(), expect);
}

#[test]
fn index_round_trips_through_disk() {
    let model = TransformerModel::new(cfg(0), 3).unwrap();
    let index = RetrievalIndex::build(&model, &candidates(5, 3), Pooling::First, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.ckpt");
    index.save(&path).unwrap();
    assert!(dir.path().join("index.ids").exists());
    assert_eq!(RetrievalIndex::load(&path).unwrap(), index);
}
