use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::adapter::AdapterConfig;

/// Exact parameter counts over a model's registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub base_params: usize,
    pub adapter_params: usize,
    pub trainable_params: usize,
}

impl ParameterReport {
    pub fn for_model(model: &TransformerModel) -> Self {
        let base_params = model.params().count();
        let adapter_params = model.adapters().map_or(0, |b| b.parameter_count());
        let trainable_params = model.trainable_view().count;
        Self { base_params, adapter_params, trainable_params }
    }

    /// Counts from configurations alone, without allocating weights. With an
    /// adapter config the base is taken to be frozen.
    pub fn from_configs(model: &ModelConfig, adapter: Option<&AdapterConfig>) -> Self {
        let base_params = model.parameter_count();
        let adapter_params = adapter.map_or(0, |a| a.parameter_count(model));
        let trainable_params = if adapter.is_some() { adapter_params } else { base_params };
        Self { base_params, adapter_params, trainable_params }
    }

    /// Adapter size relative to storing `k` fully fine-tuned copies of the base.
    pub fn ratio_vs_k_monolingual(&self, k: usize) -> f64 {
        self.adapter_params as f64 / (k as f64 * self.base_params as f64)
    }
}
