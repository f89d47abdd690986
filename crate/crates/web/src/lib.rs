//! WebAssembly bindings for the static demo page in `www/`. Every export
//! takes plain values and returns a JSON string; errors are reported as
//! `{"error": "..."}`.

use polyadapt::adapter::{moe_adapter_forward, AdapterConfig, AdapterWeights, Gating};
use polyadapt::autodiff::{Graph, Tensor};
use polyadapt::corpus::tokenize;
use polyadapt::metrics::{smoothed_bleu4, BLEU_VARIANT};
use polyadapt::model::{Activation, ModelConfig, ParameterReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Adapter and base parameter counts for a transformer of width `d` with
/// the given layer counts, two adapters per layer of bottleneck `m`.
#[wasm_bindgen]
pub fn parameter_accounting(d: usize, encoder_layers: usize, decoder_layers: usize, m: usize, copies: usize) -> String {
    respond((|| {
        let heads = if d % 12 == 0 { 12 } else { 1 };
        let model = ModelConfig {
            d_model: d,
            n_layers_encoder: encoder_layers,
            n_layers_decoder: decoder_layers,
            n_heads: heads,
            d_ff: 4 * d,
            max_seq_len: 514,
            ..ModelConfig::base_encoder()
        };
        model.validate().map_err(|e| e.to_string())?;
        let adapter = AdapterConfig::with_dim(m);
        adapter.validate().map_err(|e| e.to_string())?;
        let r = ParameterReport::from_configs(&model, Some(&adapter));
        Ok(json!({
            "adapter_params": r.adapter_params,
            "base_params": r.base_params,
            "copies": copies,
            "ratio_vs_copies": r.ratio_vs_k_monolingual(copies.max(1)),
        }))
    })())
}

/// Smoothed sentence BLEU-4 between two whitespace/punctuation-tokenized strings.
#[wasm_bindgen]
pub fn bleu(candidate: &str, reference: &str) -> String {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    respond(Ok(json!({
        "bleu": smoothed_bleu4(&c, &r),
        "candidate_tokens": c,
        "reference_tokens": r,
        "variant": BLEU_VARIANT,
    })))
}

/// Routes `tokens` random token vectors of width `d` through a randomly
/// initialized MoE gate and reports per-token selections and weights.
#[wasm_bindgen]
pub fn moe_routing(tokens: usize, d: usize, experts: usize, top_k: usize, seed: u64) -> String {
    respond((|| {
        if tokens == 0 || d == 0 || experts == 0 {
            return Err("tokens, d and experts must be positive".to_string());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let h = g.param(&Tensor::randn(&[tokens, d], 1.0, &mut rng)).map_err(|e| e.to_string())?;
        let gate = g.param(&Tensor::randn(&[d, experts], 1.0, &mut rng)).map_err(|e| e.to_string())?;
        let m = 4;
        let mut ws = Vec::new();
        for _ in 0..experts {
            let mut p = |shape: &[usize]| g.param(&Tensor::randn(shape, 0.1, &mut rng)).map_err(|e| e.to_string());
            ws.push(AdapterWeights { down_w: p(&[d, m])?, down_b: p(&[1, m])?, up_w: p(&[m, d])?, up_b: p(&[1, d])? });
        }
        let (_, routing) = moe_adapter_forward(&mut g, &ws, gate, h, top_k, Gating::PerToken, Activation::Relu)
            .map_err(|e| e.to_string())?;
        let rows: Vec<Value> = (0..tokens)
            .map(|t| {
                json!({
                    "gate": routing.gate.row(t),
                    "selected": routing.selected[t],
                    "weights": routing.weights.row(t),
                })
            })
            .collect();
        Ok(json!({ "experts": experts, "top_k": top_k, "tokens": rows }))
    })())
}
