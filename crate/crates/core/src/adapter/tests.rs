use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Reduction;
use crate::model::TransformerModel;

fn weights(g: &mut Graph, d: usize, m: usize, rng: &mut ChaCha8Rng, zero_up: bool) -> (AdapterWeights, [Tensor; 4]) {
    let t = [
        Tensor::randn(&[d, m], 0.5, rng),
        Tensor::randn(&[m], 0.5, rng),
        if zero_up { Tensor::zeros(&[m, d]) } else { Tensor::randn(&[m, d], 0.5, rng) },
        if zero_up { Tensor::zeros(&[d]) } else { Tensor::randn(&[d], 0.5, rng) },
    ];
    let w = AdapterWeights {
        down_w: g.param(&t[0]).unwrap(),
        down_b: g.param(&t[1]).unwrap(),
        up_w: g.param(&t[2]).unwrap(),
        up_b: g.param(&t[3]).unwrap(),
    };
    (w, t)
}

/// Plain-loop evaluation of the adapter equation.
fn adapter_oracle(h: &Tensor, t: &[Tensor; 4], relu: bool) -> Vec<f64> {
    let (n, d) = (h.rows(), h.cols());
    let m = t[1].numel();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut z = vec![0.0; m];
        for k in 0..m {
            let mut s = t[1].data()[k];
            for j in 0..d {
                s += h.at(i, j) * t[0].at(j, k);
            }
            z[k] = if relu { s.max(0.0) } else { s };
        }
        for j in 0..d {
            let mut s = t[3].data()[j] + h.at(i, j);
            for k in 0..m {
                s += z[k] * t[2].at(k, j);
            }
            out[i * d + j] = s;
        }
    }
    out
}

#[test]
fn zero_up_projection_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let (w, _) = weights(&mut g, 6, 3, &mut rng, true);
    let h = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let hv = g.constant(&h).unwrap();
    let z = adapter_forward(&mut g, &w, hv, Activation::Relu).unwrap();
    assert_eq!(g.value(z), h.data());
}

#[test]
fn zero_input_zero_bias_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let (mut w, _) = weights(&mut g, 5, 3, &mut rng, false);
    w.down_b = g.constant(&Tensor::zeros(&[3])).unwrap();
    w.up_b = g.constant(&Tensor::zeros(&[5])).unwrap();
    let h = g.constant(&Tensor::zeros(&[2, 5])).unwrap();
    let z = adapter_forward(&mut g, &w, h, Activation::Gelu).unwrap();
    assert!(g.value(z).iter().all(|&x| x == 0.0));
}

#[test]
fn matches_loop_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let (w, t) = weights(&mut g, 7, 4, &mut rng, false);
        let h = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let hv = g.constant(&h).unwrap();
        let z = adapter_forward(&mut g, &w, hv, Activation::Relu).unwrap();
        let oracle = adapter_oracle(&h, &t, true);
        let diff = g.value(z).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let (w, _) = weights(&mut g, 6, 3, &mut rng, false);
    let h = g.constant(&Tensor::zeros(&[2, 5])).unwrap();
    assert!(matches!(adapter_forward(&mut g, &w, h, Activation::Relu), Err(Error::Shape { .. })));
}

fn experts(g: &mut Graph, n: usize, d: usize, m: usize, rng: &mut ChaCha8Rng, zero_up: bool) -> Vec<AdapterWeights> {
    (0..n).map(|_| weights(g, d, m, rng, zero_up).0).collect()
}

#[test]
fn moe_with_all_experts_equals_dense_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let ex = experts(&mut g, 4, 6, 3, &mut rng, false);
    let gate = g.param(&Tensor::randn(&[6, 4], 1.0, &mut rng)).unwrap();
    let h = g.constant(&Tensor::randn(&[5, 6], 1.0, &mut rng)).unwrap();
    let (out, routing) = moe_adapter_forward(&mut g, &ex, gate, h, 4, Gating::PerToken, Activation::Relu).unwrap();

    // dense route: softmax gate weights times every expert, computed per entry
    let gl = g.matmul(h, gate).unwrap();
    let probs = g.softmax(gl, false).unwrap();
    let pv = g.value(probs).to_vec();
    let mut dense = g.value(h).to_vec();
    for (e, w) in ex.iter().enumerate() {
        let y = adapter_forward(&mut g, w, h, Activation::Relu).unwrap();
        let yv = g.value(y).to_vec();
        let hv = g.value(h).to_vec();
        for i in 0..dense.len() {
            dense[i] += pv[(i / 6) * 4 + e] * (yv[i] - hv[i]);
        }
    }
    let diff = g.value(out).iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
    assert!(routing.selected.iter().all(|s| s.len() == 4));
}

#[test]
fn moe_with_zero_up_projections_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let ex = experts(&mut g, 4, 6, 3, &mut rng, true);
    let gate = g.param(&Tensor::randn(&[6, 4], 1.0, &mut rng)).unwrap();
    let h = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let hv = g.constant(&h).unwrap();
    let (out, _) = moe_adapter_forward(&mut g, &ex, gate, hv, 2, Gating::PerToken, Activation::Relu).unwrap();
    assert_eq!(g.value(out), h.data());
}

#[test]
fn unselected_experts_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let ex = experts(&mut g, 4, 6, 3, &mut rng, false);
    // every input coordinate is positive, so columns 0 and 2 of the gate dominate
    let mut gw = Tensor::zeros(&[6, 4]);
    for r in 0..6 {
        gw.data_mut()[r * 4] = 2.0;
        gw.data_mut()[r * 4 + 2] = 1.5;
    }
    let gate = g.param(&gw).unwrap();
    let mut h = Tensor::randn(&[5, 6], 1.0, &mut rng);
    h.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.1);
    let hv = g.constant(&h).unwrap();
    let (out, routing) = moe_adapter_forward(&mut g, &ex, gate, hv, 2, Gating::PerToken, Activation::Relu).unwrap();
    assert!(routing.selected.iter().all(|s| s == &vec![0, 2]));
    let loss = g.mean(out).unwrap();
    let sq = g.mul(loss, loss).unwrap();
    g.backward(sq).unwrap();
    for (e, w) in ex.iter().enumerate() {
        let norm: f64 = [w.down_w, w.down_b, w.up_w, w.up_b]
            .iter()
            .map(|v| g.grad(*v).map_or(0.0, |gr| gr.iter().map(|x| x.abs()).sum()))
            .sum();
        if e == 0 || e == 2 {
            assert!(norm > 0.0, "expert {e} should learn");
        } else {
            assert_eq!(norm, 0.0, "expert {e} should be untouched");
        }
    }
}

#[test]
fn top_k_larger_than_experts_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let ex = experts(&mut g, 2, 4, 2, &mut rng, false);
    let gate = g.param(&Tensor::randn(&[4, 2], 1.0, &mut rng)).unwrap();
    let h = g.constant(&Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
    assert!(moe_adapter_forward(&mut g, &ex, gate, h, 3, Gating::PerToken, Activation::Relu).is_err());
    assert!(AdapterConfig::moe(4, 32, 5).validate().is_err());
}

#[test]
fn top_k_breaks_ties_by_lower_index() {
    assert_eq!(top_k(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
    assert_eq!(top_k(&[0.1, 0.4, 0.1, 0.4], 3), vec![1, 3, 0]);
}

#[test]
fn per_sample_gating_shares_one_decision() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let ex = experts(&mut g, 4, 6, 3, &mut rng, false);
    let gate = g.param(&Tensor::randn(&[6, 4], 1.0, &mut rng)).unwrap();
    let h = g.constant(&Tensor::randn(&[5, 6], 1.0, &mut rng)).unwrap();
    let (_, routing) = moe_adapter_forward(&mut g, &ex, gate, h, 2, Gating::PerSample, Activation::Relu).unwrap();
    assert_eq!(routing.selected.len(), 1);
    assert_eq!(routing.weights.shape(), &[1, 4]);
}

proptest::proptest! {
    #[test]
    fn moe_routing_is_sparse_and_normalized(seed in 0u64..500, top in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let ex = experts(&mut g, 4, 5, 2, &mut rng, false);
        let gate = g.param(&Tensor::randn(&[5, 4], 2.0, &mut rng)).unwrap();
        let h = g.constant(&Tensor::randn(&[6, 5], 1.0, &mut rng)).unwrap();
        let (_, routing) = moe_adapter_forward(&mut g, &ex, gate, h, top, Gating::PerToken, Activation::Relu).unwrap();
        for r in 0..6 {
            let row = routing.weights.row(r);
            proptest::prop_assert_eq!(row.iter().filter(|&&w| w != 0.0).count(), top);
            proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn tiny_model(dec: usize) -> TransformerModel {
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers_encoder: 4,
        n_layers_decoder: dec,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 16,
        dropout: 0.0,
        ..ModelConfig::desk(20)
    };
    TransformerModel::new(cfg, 11).unwrap()
}

#[test]
fn injection_preserves_outputs_exactly() {
    for placement in [Placement::BeforeNorm, Placement::AfterNorm] {
        for variant in [Variant::Standard, Variant::Moe] {
            let mut model = tiny_model(2);
            let (before, _) = model.encode(&[4, 5, 6, 7], false).unwrap();
            let dec_before = model.decode_step(&before, &[1, 9]).unwrap();
            let cfg = AdapterConfig { placement, variant, moe_expert_dim: 2, ..AdapterConfig::with_dim(4) };
            model.inject(cfg, 3).unwrap();
            let (after, _) = model.encode(&[4, 5, 6, 7], false).unwrap();
            assert_eq!(before, after);
            assert_eq!(dec_before, model.decode_step(&after, &[1, 9]).unwrap());
        }
    }
}

#[test]
fn bank_layout_and_counts() {
    let mut model = tiny_model(0);
    let bank = model.inject(AdapterConfig::with_dim(3), 0).unwrap();
    assert_eq!(bank.len(), 8);
    assert_eq!(bank.parameter_count(), 8 * bottleneck_param_count(8, 3));
    assert!(model.inject(AdapterConfig::with_dim(3), 0).is_err());
    let view = model.freeze_base().unwrap();
    assert_eq!(view.count, model.adapters().unwrap().parameter_count());
    assert!(view.names.iter().all(|n| n.starts_with("adapter.")));

    let attn_only = AdapterConfig { after_ffn: false, ..AdapterConfig::with_dim(3) };
    assert_eq!(attn_only.points(model.config()).len(), 4);
}

#[test]
fn frozen_pass_only_differentiates_adapters() {
    let mut model = tiny_model(0);
    model.inject(AdapterConfig::with_dim(3), 0).unwrap();
    model.freeze_base().unwrap();
    let mut pass = model.train_pass(0);
    let out = model.encode_in(&mut pass, &[4, 5, 6], false).unwrap().states;
    let logits = model.project_vocab(&mut pass, out).unwrap();
    let loss = pass.graph.cross_entropy(logits, &[Some(1), Some(2), Some(3)], Reduction::Mean).unwrap();
    pass.graph.backward(loss).unwrap();
    let grads = pass.gradients();
    assert!(!grads.is_empty());
    assert!(grads.iter().all(|(n, _)| n.starts_with("adapter.")));
}

#[test]
fn adapter_checkpoint_round_trip_and_base_check() {
    let mut model = tiny_model(1);
    model.inject(AdapterConfig::moe(4, 2, 2), 5).unwrap();
    let bank = model.adapters().unwrap().clone();
    let ck = bank.to_checkpoint(model.config(), &model.base_hash());
    let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let back = AdapterBank::from_checkpoint(&ck, model.config(), Some(&model.base_hash())).unwrap();
    assert_eq!(back, bank);
    assert!(AdapterBank::from_checkpoint(&ck, model.config(), Some("deadbeef")).is_err());
}
