//! Analytical FLOPs, cache-size, and time model under a hardware envelope
//! (compute rate `v_c`, memory rate `v_m`).
//!
//! FLOP formulas count matrix multiplications only (projections, QKᵀ, AV,
//! output, FFN); softmax, normalization, and rotary costs are excluded so
//! that the engine's instrumented counters match these expressions exactly.

use serde::{Deserialize, Serialize};

use crate::kvcache::reduction_ratio;
use crate::model::{ModelConfig, RegisterSpec};

/// Hardware envelope: peak FLOPs/s, memory bytes/s, cache element width.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostEnv {
    pub v_c: f64,
    pub v_m: f64,
    pub element_bytes: usize,
}

impl Default for CostEnv {
    fn default() -> Self {
        // roughly a modern datacenter accelerator with fp16 cache entries
        CostEnv {
            v_c: 1e14,
            v_m: 2e12,
            element_bytes: 2,
        }
    }
}

/// Analytic estimate for one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub flops_prefill: f64,
    pub flops_per_decode_step: f64,
    pub cache_bytes: f64,
    pub gamma_attn: f64,
    pub gamma_cache: f64,
    pub omega: f64,
    pub t_prefill: f64,
    pub t_decode_per_token: f64,
}

/// Vanilla reference and pruned estimate side by side.
#[derive(Debug, Clone, Copy)]
pub struct CostPair {
    pub vanilla: CostEstimate,
    pub earn: CostEstimate,
}

/// Attention FLOPs of one decoder layer over `l` tokens:
/// `n_h · (8·l·d_h·d_a + 4·l²·d_a)`.
pub fn flops_mha(l: usize, config: &ModelConfig) -> u64 {
    let (l, n_h) = (l as u64, config.num_heads as u64);
    let (d_h, d_a) = (config.hidden_dim as u64, config.head_dim as u64);
    n_h * (8 * l * d_h * d_a + 4 * l * l * d_a)
}

/// FFN FLOPs of one decoder layer over `l` tokens: `4·l·d_h·d_f`.
pub fn flops_ffn(l: usize, config: &ModelConfig) -> u64 {
    4 * l as u64 * config.hidden_dim as u64 * config.ffn_dim as u64
}

/// Total FLOPs of one decoder layer: `4l[n_h·d_a(2·d_h + l) + d_h·d_f]`.
pub fn flops_layer(l: usize, config: &ModelConfig) -> u64 {
    flops_mha(l, config) + flops_ffn(l, config)
}

/// FLOPs of one decode step attending over `cached` keys: the four
/// projections plus QKᵀ/AV against the cache, plus the FFN.
pub fn flops_decode_step(cached: usize, config: &ModelConfig) -> u64 {
    let (n_h, d_h, d_a) = (
        config.num_heads as u64,
        config.hidden_dim as u64,
        config.head_dim as u64,
    );
    n_h * (8 * d_h * d_a + 4 * cached as u64 * d_a) + flops_ffn(1, config)
}

/// Prefill FLOPs ratio of the pruned model to vanilla:
/// `k/N + (1 − k/N)·(r·[n_h·d_a(2d_h+r)+d_h·d_f]) / (L·[n_h·d_a(2d_h+L)+d_h·d_f])`.
pub fn gamma_attn(n: usize, k: usize, l: usize, r: usize, config: &ModelConfig) -> f64 {
    let frac_k = k as f64 / n as f64;
    frac_k + (1.0 - frac_k) * flops_layer(r, config) as f64 / flops_layer(l, config) as f64
}

/// Theoretical end-to-end speedup `N/k`.
pub fn theoretical_speedup(n: usize, k: usize) -> f64 {
    n as f64 / k as f64
}

fn estimate_one(
    env: &CostEnv,
    config: &ModelConfig,
    k: usize,
    l: usize,
    r: usize,
    n_generate: usize,
) -> CostEstimate {
    let n = config.num_layers;
    let flops_prefill = (k as u64 * flops_layer(l, config)
        + (n - k) as u64 * flops_layer(r, config)) as f64;
    let t_prefill = flops_prefill / env.v_c;

    let pair_bytes = (config.num_kv_heads * config.head_dim * 2 * env.element_bytes) as f64;
    let mut t_decode = 0.0;
    let mut flops_decode_total = 0.0;
    let mut cache_bytes = 0.0;
    for g in 0..n_generate.max(1) {
        // per-layer cache lengths after g generated tokens
        let full = l + g;
        let kept = r + g;
        let pairs = k * full + (n - k) * kept;
        cache_bytes = pairs as f64 * pair_bytes;
        let flops_attn = (k as u64 * flops_decode_step(full + 1, config)
            + (n - k) as u64 * flops_decode_step(kept + 1, config))
            as f64
            - n as f64 * flops_ffn(1, config) as f64;
        let flops_ffn_total = n as f64 * flops_ffn(1, config) as f64;
        flops_decode_total += flops_attn + flops_ffn_total;
        t_decode += (cache_bytes / env.v_m).max(flops_attn / env.v_c) + flops_ffn_total / env.v_c;
    }
    let steps = n_generate.max(1) as f64;
    CostEstimate {
        flops_prefill,
        flops_per_decode_step: flops_decode_total / steps,
        cache_bytes,
        gamma_attn: gamma_attn(n, k, l, r, config),
        gamma_cache: reduction_ratio(n, k, l, r),
        omega: 1.0,
        t_prefill,
        t_decode_per_token: t_decode / steps,
    }
}

/// Time estimates for vanilla and pruned configurations:
/// `T = T_P + n_generate·T_d`, with `T_P = FLOPs_prefill / v_c` and
/// `T_d = max(cache/v_m, FLOPs_attn/v_c) + FLOPs_FFN/v_c`.
/// The pruned estimate's `omega` is the ratio of the two totals.
pub fn time_estimate(
    env: &CostEnv,
    config: &ModelConfig,
    spec: &RegisterSpec,
    l: usize,
    n_generate: usize,
) -> CostPair {
    let n = config.num_layers;
    let r = spec.count();
    let vanilla = estimate_one(env, config, n, l, r, n_generate);
    let mut earn = estimate_one(env, config, spec.register_layer, l, r, n_generate);
    let steps = n_generate as f64;
    let total_v = vanilla.t_prefill + steps * vanilla.t_decode_per_token;
    let total_e = earn.t_prefill + steps * earn.t_decode_per_token;
    earn.omega = total_v / total_e;
    CostPair { vanilla, earn }
}

/// CSV rows (`N,k,L,r,gamma_attn,gamma_cache,omega,t_prefill,t_decode`)
/// for each length: the pruned configuration followed by the vanilla
/// reference (`k = N`).
pub fn report_csv(
    env: &CostEnv,
    config: &ModelConfig,
    spec: &RegisterSpec,
    lengths: &[usize],
    n_generate: usize,
) -> String {
    let mut out = String::from("N,k,L,r,gamma_attn,gamma_cache,omega,t_prefill,t_decode\n");
    let n = config.num_layers;
    let r = spec.count();
    for &l in lengths {
        let pair = time_estimate(env, config, spec, l, n_generate);
        for (k, est) in [(spec.register_layer, pair.earn), (n, pair.vanilla)] {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6e},{:.6e}\n",
                n, k, l, r, est.gamma_attn, est.gamma_cache, est.omega, est.t_prefill,
                est.t_decode_per_token
            ));
        }
    }
    out
}
