//! Shared fixtures for the criterion benchmarks.

use earn_core::model::{init_weights, ModelConfig, RegisterSpec, Weights};

pub fn bench_model() -> (ModelConfig, RegisterSpec, Weights) {
    let config = ModelConfig {
        num_layers: 8,
        num_heads: 4,
        num_kv_heads: 4,
        head_dim: 32,
        hidden_dim: 128,
        ffn_dim: 256,
        vocab_size: 64,
        rope_base: 10000.0,
        max_positions: 1024,
    };
    let spec = RegisterSpec {
        n_prefix: 1,
        n_suffix: 1,
        register_layer: 2,
    };
    let weights = init_weights(&config, &spec, 0);
    (config, spec, weights)
}
