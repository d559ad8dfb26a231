//! Efficiency harness: walltime speedup ω, throughput τ, cache reduction γ,
//! and cache memory σ for the pruned model against vanilla decoding, layer
//! skipping, and a window-cache baseline, swept over batch sizes and padded
//! prompt lengths.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kvcache::bytes_for;
use crate::model::{
    forward, ForwardFlops, ForwardOptions, LogitsRows, ModelConfig, RegisterSpec, SequenceLayout,
    Weights,
};
use crate::numkernel::Matrix;
use crate::runtime::{prefill_with_limit, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Method {
    Vanilla,
    Earn,
    SkipLayers { cut: usize },
    WindowCache { n_initial: usize, n_recent: usize },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Vanilla => "vanilla".into(),
            Method::Earn => "earn".into(),
            Method::SkipLayers { cut } => format!("skiplayers{cut}"),
            Method::WindowCache { n_initial, n_recent } => {
                format!("window{n_initial}+{n_recent}")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub batch_sizes: Vec<usize>,
    /// Total padded input lengths, registers included.
    pub lengths: Vec<usize>,
    pub decode_steps: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub workers: usize,
    /// Estimated-footprint ceiling; combos above it become `oom` rows.
    pub memory_budget_bytes: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec![Method::Vanilla, Method::Earn],
            batch_sizes: vec![1],
            lengths: vec![256],
            decode_steps: 4,
            repeats: 5,
            warmup: 2,
            seed: 0,
            workers: 1,
            memory_budget_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub method: String,
    pub batch: usize,
    pub length: usize,
    pub omega: f64,
    pub tau_tokens_per_s: f64,
    pub gamma_pct: f64,
    pub sigma_bytes: u64,
    pub status: String,
}

/// Run the first `cut` layers only, then final norm and head (the
/// layer-skipping baseline's forward).
pub fn skiplayers_forward(
    weights: &Weights,
    config: &ModelConfig,
    cut: usize,
    layout: &SequenceLayout,
    flops: &ForwardFlops,
) -> Result<Matrix> {
    let opts = ForwardOptions {
        layer_limit: Some(cut),
        logits_rows: LogitsRows::All,
        ..Default::default()
    };
    Ok(forward(weights, config, layout, &opts, flops)?.logits)
}

struct MethodPlan {
    spec: RegisterSpec,
    layer_limit: Option<usize>,
    window: Option<(usize, usize)>,
}

fn plan(method: &Method, spec: &RegisterSpec, config: &ModelConfig) -> MethodPlan {
    match method {
        Method::Vanilla => MethodPlan {
            spec: spec.without_pruning(config.num_layers),
            layer_limit: None,
            window: None,
        },
        Method::Earn => MethodPlan {
            spec: *spec,
            layer_limit: None,
            window: None,
        },
        Method::SkipLayers { cut } => MethodPlan {
            spec: spec.without_pruning(config.num_layers),
            layer_limit: Some(*cut),
            window: None,
        },
        Method::WindowCache { n_initial, n_recent } => MethodPlan {
            spec: spec.without_pruning(config.num_layers),
            layer_limit: None,
            window: Some((*n_initial, *n_recent)),
        },
    }
}

/// Deterministic padded prompts: `length - r` pseudo-random prompt tokens
/// per batch element.
fn batch_prompts(
    config: &ModelConfig,
    spec: &RegisterSpec,
    batch: usize,
    length: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let prompt_len = length.saturating_sub(spec.count());
    (0..batch)
        .map(|b| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9e37_79b9));
            (0..prompt_len)
                .map(|_| rng.random_range(0..config.vocab_size as u32))
                .collect()
        })
        .collect()
}

struct RunOutcome {
    elapsed: Duration,
    prefill_pairs: usize,
    final_sigma: u64,
}

fn run_batch_once(
    weights: &Weights,
    config: &ModelConfig,
    mp: &MethodPlan,
    prompts: &[Vec<u32>],
    decode_steps: usize,
    pool: &rayon::ThreadPool,
) -> Result<RunOutcome> {
    let start = Instant::now();
    let outcomes: Vec<Result<(usize, u64)>> = pool.install(|| {
        use rayon::prelude::*;
        prompts
            .par_iter()
            .map(|prompt| {
                let layout = SequenceLayout::assemble(&mp.spec, prompt, config.vocab_size);
                let mut session: Session =
                    prefill_with_limit(weights, config, &mp.spec, layout, mp.layer_limit)?;
                if let Some((n_i, n_r)) = mp.window {
                    session.evict_window(n_i, n_r);
                }
                let prefill_pairs = session.cache.stats().total_pairs;
                session.generate_greedy(decode_steps)?;
                let sigma = bytes_for(
                    &session.cache.stats(),
                    config.num_kv_heads,
                    config.head_dim,
                    4,
                );
                Ok((prefill_pairs, sigma))
            })
            .collect()
    });
    let elapsed = start.elapsed();
    let mut prefill_pairs = 0;
    let mut final_sigma = 0;
    for o in outcomes {
        let (p, s) = o?;
        prefill_pairs += p;
        final_sigma += s;
    }
    Ok(RunOutcome {
        elapsed,
        prefill_pairs,
        final_sigma,
    })
}

fn median(durations: &mut [Duration]) -> Duration {
    durations.sort();
    durations[durations.len() / 2]
}

fn iqr_over_median(durations: &[Duration]) -> f64 {
    if durations.len() < 4 {
        return 0.0;
    }
    let q1 = durations[durations.len() / 4].as_secs_f64();
    let q3 = durations[(durations.len() * 3) / 4].as_secs_f64();
    let med = durations[durations.len() / 2].as_secs_f64();
    (q3 - q1) / med
}

/// Rough peak-footprint estimate for the OOM guard: cache plus the widest
/// transient activations of concurrently running sessions.
fn estimate_bytes(
    config: &ModelConfig,
    mp: &MethodPlan,
    batch: usize,
    length: usize,
    workers: usize,
) -> u64 {
    let n = mp.layer_limit.unwrap_or(config.num_layers);
    let k = mp.spec.register_layer.min(n);
    let r = mp.spec.count();
    let pairs = crate::kvcache::expected_pairs(n, k, length, r, 0)
        * config.num_kv_heads
        * config.head_dim;
    let cache = pairs as u64 * 2 * 4;
    let scores = (length * length) as u64 * 4;
    let acts = (length * (6 * config.hidden_dim + 2 * config.ffn_dim)) as u64 * 4;
    cache * batch as u64 + (scores + acts) * workers.min(batch).max(1) as u64
}

/// Sweep `(method, batch, length)` combinations. Within a combination the
/// methods run interleaved, one full set per repeat, so machine-speed
/// drift hits every method equally; ω is the median of the per-repeat
/// `t_vanilla / t_method` ratios. Warmup runs are excluded, γ counts
/// prefill pairs, σ is measured in bytes at the last generated token.
/// Combinations whose estimated footprint exceeds the budget become `oom`
/// rows instead of being attempted.
pub fn run_bench(
    weights: &Weights,
    config: &ModelConfig,
    spec: &RegisterSpec,
    bcfg: &BenchConfig,
) -> Result<Vec<BenchResult>> {
    let mut methods = bcfg.methods.clone();
    if !methods.contains(&Method::Vanilla) {
        methods.insert(0, Method::Vanilla);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(bcfg.workers.max(1))
        .build()
        .expect("thread pool");

    let mut rows = Vec::new();
    for &batch in &bcfg.batch_sizes {
        for &length in &bcfg.lengths {
            let mut runnable = Vec::new();
            for method in &methods {
                let mp = plan(method, spec, config);
                let est = estimate_bytes(config, &mp, batch, length, bcfg.workers);
                if bcfg.memory_budget_bytes.is_some_and(|budget| est > budget) {
                    rows.push(BenchResult {
                        method: method.name(),
                        batch,
                        length,
                        omega: 0.0,
                        tau_tokens_per_s: 0.0,
                        gamma_pct: 0.0,
                        sigma_bytes: 0,
                        status: "oom".into(),
                    });
                } else {
                    let prompts = batch_prompts(config, &mp.spec, batch, length, bcfg.seed);
                    runnable.push((method, mp, prompts));
                }
            }

            let mut times: Vec<Vec<Duration>> = vec![Vec::new(); runnable.len()];
            let mut outcomes: Vec<Option<RunOutcome>> = (0..runnable.len()).map(|_| None).collect();
            for rep in 0..bcfg.warmup + bcfg.repeats {
                for (i, (_, mp, prompts)) in runnable.iter().enumerate() {
                    let o =
                        run_batch_once(weights, config, mp, prompts, bcfg.decode_steps, &pool)?;
                    if rep >= bcfg.warmup {
                        times[i].push(o.elapsed);
                    }
                    outcomes[i] = Some(o);
                }
            }

            let vanilla_idx = runnable
                .iter()
                .position(|(m, _, _)| matches!(m, Method::Vanilla));
            let vanilla_pairs =
                vanilla_idx.map(|i| outcomes[i].as_ref().unwrap().prefill_pairs);
            for (i, (method, _, _)) in runnable.iter().enumerate() {
                let outcome = outcomes[i].as_ref().unwrap();
                let mut sorted = times[i].clone();
                let med = median(&mut sorted);
                let spread = iqr_over_median(&sorted);
                let omega = match method {
                    Method::Vanilla => 1.0,
                    _ => vanilla_idx
                        .map(|v| {
                            // paired per-repeat ratios cancel machine drift
                            let mut ratios: Vec<f64> = times[v]
                                .iter()
                                .zip(&times[i])
                                .map(|(tv, tm)| tv.as_secs_f64() / tm.as_secs_f64())
                                .collect();
                            ratios.sort_by(f64::total_cmp);
                            ratios[ratios.len() / 2]
                        })
                        .unwrap_or(f64::NAN),
                };
                let gamma_pct = vanilla_pairs
                    .map(|v| 100.0 * (1.0 - outcome.prefill_pairs as f64 / v as f64))
                    .unwrap_or(f64::NAN);
                let tau = (batch * bcfg.decode_steps) as f64 / med.as_secs_f64();
                rows.push(BenchResult {
                    method: method.name(),
                    batch,
                    length,
                    omega,
                    tau_tokens_per_s: tau,
                    gamma_pct,
                    sigma_bytes: outcome.final_sigma,
                    status: if spread < 0.20 {
                        "ok".into()
                    } else {
                        "unstable".into()
                    },
                });
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchResult]) -> String {
    let mut out =
        String::from("method,batch,length,omega,tau_tokens_per_s,gamma_pct,sigma_bytes,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.2},{:.4},{},{}\n",
            r.method, r.batch, r.length, r.omega, r.tau_tokens_per_s, r.gamma_pct, r.sigma_bytes,
            r.status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::reduction_ratio;
    use crate::model::{forward_vanilla, init_weights};
    use crate::runtime::prefill;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            num_heads: 2,
            num_kv_heads: 2,
            head_dim: 4,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 12,
            rope_base: 10000.0,
            max_positions: 128,
        }
    }

    fn spec() -> RegisterSpec {
        RegisterSpec {
            n_prefix: 1,
            n_suffix: 1,
            register_layer: 1,
        }
    }

    #[test]
    fn measured_gamma_matches_formula_exactly() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 1);
        let bcfg = BenchConfig {
            methods: vec![Method::Vanilla, Method::Earn],
            lengths: vec![34],
            repeats: 1,
            warmup: 0,
            ..Default::default()
        };
        let rows = run_bench(&w, &c, &s, &bcfg).unwrap();
        let earn = rows.iter().find(|r| r.method == "earn").unwrap();
        let expect = 100.0 * reduction_ratio(c.num_layers, s.register_layer, 34, s.count());
        assert!((earn.gamma_pct - expect).abs() < 1e-9);
        // exact in pair terms: (vanilla−earn)·N·L == (N−k)(L−r)·vanilla
        let (n, k, l, r) = (c.num_layers, s.register_layer, 34usize, s.count());
        let vanilla_pairs = n * l;
        let earn_pairs = crate::kvcache::expected_pairs(n, k, l, r, 0);
        assert_eq!(
            (vanilla_pairs - earn_pairs) * n * l,
            (n - k) * (l - r) * vanilla_pairs
        );
        let vanilla = rows.iter().find(|r| r.method == "vanilla").unwrap();
        assert_eq!(vanilla.omega, 1.0);
        assert_eq!(vanilla.gamma_pct, 0.0);
        assert!(rows.iter().all(|r| r.tau_tokens_per_s > 0.0));
    }

    #[test]
    fn skiplayers_full_cut_is_vanilla() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 2);
        let layout = SequenceLayout::assemble(&s, &[1, 2, 3, 4], c.vocab_size);
        let a = skiplayers_forward(&w, &c, c.num_layers, &layout, &ForwardFlops::new()).unwrap();
        let b =
            forward_vanilla(&w, &c, &layout, &ForwardOptions::default(), &ForwardFlops::new())
                .unwrap();
        assert_eq!(a, b.logits);
    }

    #[test]
    fn skiplayers_flops_scale_with_cut() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 3);
        let layout = SequenceLayout::assemble(&s, &[1, 2, 3, 4, 5], c.vocab_size);
        let cut = 2;
        let f_skip = ForwardFlops::new();
        skiplayers_forward(&w, &c, cut, &layout, &f_skip).unwrap();
        let f_van = ForwardFlops::new();
        forward_vanilla(&w, &c, &layout, &ForwardOptions::default(), &f_van).unwrap();
        assert_eq!(
            f_skip.layer.get() * c.num_layers as u64,
            f_van.layer.get() * cut as u64
        );
    }

    #[test]
    fn skiplayers_cache_pairs_are_cut_times_length() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 4);
        let vanilla = s.without_pruning(c.num_layers);
        let layout = SequenceLayout::assemble(&vanilla, &[1, 2, 3, 4], c.vocab_size);
        let cut = 3;
        let sess = prefill_with_limit(&w, &c, &vanilla, layout.clone(), Some(cut)).unwrap();
        assert_eq!(sess.cache.stats().total_pairs, cut * layout.len());
    }

    #[test]
    fn oversized_window_is_vanilla_decode() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 5);
        let vanilla = s.without_pruning(c.num_layers);
        let layout = SequenceLayout::assemble(&vanilla, &[3, 1, 4, 1, 5], c.vocab_size);

        let mut plain = prefill(&w, &c, &vanilla, layout.clone()).unwrap();
        let mut windowed = prefill(&w, &c, &vanilla, layout).unwrap();
        windowed.evict_window(4, 4); // window >= length: no eviction
        for tok in [2u32, 6, 1] {
            let a = plain.decode_step(tok).unwrap().to_vec();
            let b = windowed.decode_step(tok).unwrap().to_vec();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn window_pairs_follow_min_formula() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 6);
        let vanilla = s.without_pruning(c.num_layers);
        for len in [10usize, 20, 40] {
            let prompt: Vec<u32> = (0..len as u32 - 2).map(|t| t % 12).collect();
            let layout = SequenceLayout::assemble(&vanilla, &prompt, c.vocab_size);
            let mut sess = prefill(&w, &c, &vanilla, layout).unwrap();
            sess.evict_window(2, 4);
            for g in 0..3usize {
                for layer in &sess.cache.layers {
                    assert_eq!(layer.len(), (2 + 4 + g).min(len + g));
                }
                sess.decode_step(1).unwrap();
            }
        }
    }

    #[test]
    fn window_gamma_grows_with_length() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 7);
        let mut prev = -1.0f64;
        for len in [16usize, 32, 64] {
            let bcfg = BenchConfig {
                methods: vec![Method::WindowCache {
                    n_initial: 2,
                    n_recent: 4,
                }],
                lengths: vec![len],
                repeats: 1,
                warmup: 0,
                ..Default::default()
            };
            let rows = run_bench(&w, &c, &s, &bcfg).unwrap();
            let win = rows.iter().find(|r| r.method.starts_with("window")).unwrap();
            assert!(win.gamma_pct > prev);
            prev = win.gamma_pct;
        }
    }

    #[test]
    fn over_budget_combination_becomes_oom_row() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 8);
        let bcfg = BenchConfig {
            lengths: vec![64],
            memory_budget_bytes: Some(16),
            repeats: 1,
            warmup: 0,
            ..Default::default()
        };
        let rows = run_bench(&w, &c, &s, &bcfg).unwrap();
        assert!(!rows.is_empty());
        assert!(rows.iter().all(|r| r.status == "oom"));
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 9);
        let bcfg = BenchConfig {
            lengths: vec![16, 24],
            repeats: 1,
            warmup: 0,
            ..Default::default()
        };
        let rows = run_bench(&w, &c, &s, &bcfg).unwrap();
        let csv = to_csv(&rows);
        assert!(csv.starts_with("method,batch,length,omega,"));
        assert_eq!(csv.trim().lines().count(), 1 + rows.len());
    }
}
