//! Register training: reverse-mode gradients through the pruned forward,
//! NLL loss on identifier tokens, AdamW with a warmup+cosine schedule, and
//! the three training modes (vanilla finetune, register training, and
//! inference-only pruning of a vanilla-trained model).

mod graph;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ModelConfig, RegisterSpec, SequenceLayout, Weights};
use crate::numkernel::Scalar;

/// Gradients are shaped exactly like the weights.
pub type Gradients<T = f32> = Weights<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Finetune with no pruning (registers still present in the input).
    Vanilla,
    /// Register training: prompt rows pruned past the register layer.
    Earn,
    /// No weight updates; evaluate a finetuned model under pruning.
    EarnNoRt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub effective_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            warmup_ratio: 0.02,
            effective_batch: 128,
            epochs: 1,
            seed: 0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mode: TrainMode::Earn,
        }
    }
}

/// One training example: the assembled input layout and the target
/// identifier tokens. Loss positions cover exactly the target tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub layout: SequenceLayout,
    pub target: Vec<u32>,
}

impl TrainExample {
    pub fn from_prompt(
        spec: &RegisterSpec,
        prompt: &[u32],
        target: Vec<u32>,
        vocab_size: usize,
    ) -> Self {
        TrainExample {
            layout: SequenceLayout::assemble(spec, prompt, vocab_size),
            target,
        }
    }
}

/// Negative log-likelihood of the target tokens under the pruned forward
/// (`spec.register_layer = num_layers` reduces to vanilla training).
pub fn loss_nll(
    weights: &Weights,
    config: &ModelConfig,
    spec: &RegisterSpec,
    example: &TrainExample,
) -> Result<f64> {
    let run = graph::forward_stashed::<f32>(weights, config, spec.register_layer, example)?;
    Ok(run.loss as f64)
}

/// Precision-generic loss; the gradient-check oracle evaluates this at f64.
pub fn loss_with_precision<T: Scalar>(
    weights: &Weights<T>,
    config: &ModelConfig,
    register_layer: usize,
    example: &TrainExample,
) -> Result<T> {
    Ok(graph::forward_stashed(weights, config, register_layer, example)?.loss)
}

/// Loss and gradients for every weight, register embeddings included.
pub fn backward(
    weights: &Weights,
    config: &ModelConfig,
    spec: &RegisterSpec,
    example: &TrainExample,
) -> Result<(f64, Gradients)> {
    let (loss, grads) =
        backward_with_precision::<f32>(weights, config, spec, spec.register_layer, example)?;
    Ok((loss as f64, grads))
}

/// Precision-generic reverse pass (the same code the engine trains with,
/// instantiated at f64 for the gradient check).
pub fn backward_with_precision<T: Scalar>(
    weights: &Weights<T>,
    config: &ModelConfig,
    spec: &RegisterSpec,
    register_layer: usize,
    example: &TrainExample,
) -> Result<(T, Gradients<T>)> {
    let run = graph::forward_stashed(weights, config, register_layer, example)?;
    let grads =
        graph::backward_from_run(weights, config, (spec.n_prefix, spec.n_suffix), &run)?;
    Ok((run.loss, grads))
}

/// Layout rows whose logits feed the loss (for parity against the masked
/// reference forward).
pub fn predictor_rows(example: &TrainExample, prune_active: bool) -> Result<Vec<usize>> {
    graph::predictor_rows(example, prune_active)
}

pub fn grads_add(acc: &mut Gradients, other: &Gradients) {
    let mut a = acc.params_mut();
    let b = other.params();
    for ((_, _, av), (_, _, bv)) in a.iter_mut().zip(&b) {
        for (x, y) in av.iter_mut().zip(*bv) {
            *x += *y;
        }
    }
}

pub fn grads_scale(g: &mut Gradients, c: f32) {
    for (_, _, v) in g.params_mut() {
        for x in v {
            *x *= c;
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Weights,
    pub v: Weights,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: &ModelConfig, spec: &RegisterSpec) -> Self {
        AdamState {
            m: Weights::zeros(config, spec),
            v: Weights::zeros(config, spec),
            step: 0,
        }
    }
}

/// Standard AdamW update with decoupled weight decay.
pub fn adamw_step(
    weights: &mut Weights,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let bias1 = 1.0 - (cfg.beta1 as f32).powi(t);
    let bias2 = 1.0 - (cfg.beta2 as f32).powi(t);
    let lr = lr as f32;
    let eps = cfg.adam_eps as f32;
    let wd = cfg.weight_decay as f32;

    let mut w = weights.params_mut();
    let g = grads.params();
    let mut m = state.m.params_mut();
    let mut v = state.v.params_mut();
    for i in 0..w.len() {
        debug_assert_eq!(w[i].0, g[i].0);
        let (wv, gv) = (&mut w[i].2, &g[i].2);
        let (mv, vv) = (&mut m[i].2, &mut v[i].2);
        for j in 0..wv.len() {
            let grad = gv[j];
            mv[j] = b1 * mv[j] + (1.0 - b1) * grad;
            vv[j] = b2 * vv[j] + (1.0 - b2) * grad * grad;
            let m_hat = mv[j] / bias1;
            let v_hat = vv[j] / bias2;
            wv[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * wv[j]);
        }
    }
}

/// Linear warmup to `peak_lr` over `warmup_ratio · total_steps` steps, then
/// cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_ratio: f64, peak_lr: f64) -> f64 {
    assert!(step <= total_steps);
    let warmup = (warmup_ratio * total_steps as f64).floor() as usize;
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return peak_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_recall10: Option<f64>,
}

/// Seeded training loop with gradient accumulation up to
/// `effective_batch` examples per optimizer step. Examples within a window
/// accumulate in a fixed order, so runs are reproducible.
///
/// `TrainMode::EarnNoRt` performs no updates and returns a single log row
/// with the pruned-model loss (the ablation that prunes a finetuned model
/// at inference time only).
pub fn train(
    weights: &mut Weights,
    config: &ModelConfig,
    spec: &RegisterSpec,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    mut valid_metric: Option<&mut dyn FnMut(&Weights) -> f64>,
) -> Result<Vec<EpochLog>> {
    let k_eff = match cfg.mode {
        TrainMode::Vanilla => config.num_layers,
        TrainMode::Earn | TrainMode::EarnNoRt => spec.register_layer,
    };
    if cfg.mode == TrainMode::EarnNoRt {
        let mut total = 0.0;
        for ex in examples {
            total += loss_with_precision::<f32>(weights, config, k_eff, ex)? as f64;
        }
        return Ok(vec![EpochLog {
            epoch: 0,
            mean_loss: total / examples.len().max(1) as f64,
            valid_recall10: valid_metric.as_mut().map(|f| f(weights)),
        }]);
    }

    let batch = cfg.effective_batch.max(1);
    let steps_per_epoch = examples.len().div_ceil(batch).max(1);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = AdamState::new(config, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let lr = cosine_lr((step + 1).min(total_steps), total_steps, cfg.warmup_ratio, cfg.learning_rate);
            let mut acc = Gradients::zeros(config, spec);
            for &i in chunk {
                let (loss, g) = backward_with_precision::<f32>(
                    weights,
                    config,
                    spec,
                    k_eff,
                    &examples[i],
                )?;
                epoch_loss += loss.into_f64();
                grads_add(&mut acc, &g);
            }
            grads_scale(&mut acc, 1.0 / chunk.len() as f32);
            adamw_step(weights, &acc, &mut state, lr, cfg);
            step += 1;
        }
        logs.push(EpochLog {
            epoch,
            mean_loss: epoch_loss / examples.len().max(1) as f64,
            valid_recall10: valid_metric.as_mut().map(|f| f(weights)),
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::oracle;
    use approx::assert_relative_eq;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            num_kv_heads: 1,
            head_dim: 4,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 16,
            rope_base: 10000.0,
            max_positions: 64,
        }
    }

    fn spec() -> RegisterSpec {
        RegisterSpec {
            n_prefix: 1,
            n_suffix: 1,
            register_layer: 1,
        }
    }

    fn example(target: Vec<u32>) -> TrainExample {
        TrainExample::from_prompt(&spec(), &[2, 5, 3, 7], target, config().vocab_size)
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let (c, s) = (config(), spec());
        let w = Weights::zeros(&c, &s); // all-zero weights ⇒ uniform logits
        let loss = loss_nll(&w, &c, &s, &example(vec![4])).unwrap();
        assert_relative_eq!(loss, (16.0f64).ln(), epsilon = 1e-5);
        let loss4 = loss_nll(&w, &c, &s, &example(vec![4, 1, 9, 14])).unwrap();
        assert_relative_eq!(loss4, 4.0 * (16.0f64).ln(), epsilon = 1e-5);
    }

    #[test]
    fn k_equals_n_loss_matches_vanilla_exactly() {
        let c = config();
        let s_full = RegisterSpec {
            register_layer: c.num_layers,
            ..spec()
        };
        let w = init_weights(&c, &s_full, 3);
        let ex = example(vec![4, 2]);
        let a = loss_nll(&w, &c, &s_full, &ex).unwrap();
        let b = loss_with_precision::<f32>(&w, &c, c.num_layers, &ex).unwrap() as f64;
        assert_eq!(a, b);
    }

    #[test]
    fn pruned_loss_matches_masked_oracle() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 5);
        let ex = example(vec![4, 2, 11]);
        let loss = loss_nll(&w, &c, &s, &ex).unwrap();

        let mut full = ex.layout.clone();
        for &t in &ex.target {
            full.push_generated(t);
        }
        let rows = predictor_rows(&ex, true).unwrap();
        let out = oracle::masked_forward(&w, &c, s.register_layer, &full, None);
        let oracle_loss = oracle::loss_from_logits(&out.logits, &rows, &ex.target);
        assert_relative_eq!(loss, oracle_loss, max_relative = 1e-5, epsilon = 1e-6);
    }

    #[test]
    fn junked_prompt_rows_do_not_move_the_loss() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 6);
        let ex = example(vec![4, 2]);
        let mut full = ex.layout.clone();
        for &t in &ex.target {
            full.push_generated(t);
        }
        let rows = predictor_rows(&ex, true).unwrap();
        let clean = oracle::masked_forward(&w, &c, s.register_layer, &full, None);
        let junked = oracle::masked_forward(&w, &c, s.register_layer, &full, Some(1e4));
        let a = oracle::loss_from_logits(&clean.logits, &rows, &ex.target);
        let b = oracle::loss_from_logits(&junked.logits, &rows, &ex.target);
        assert_relative_eq!(a, b, max_relative = 1e-6);
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 7);
        let ex = example(vec![4]); // tokens in play: 2,5,3,7 and target 4
        let (_, g) = backward(&w, &c, &s, &ex).unwrap();
        for absent in [0u32, 1, 6, 8, 15] {
            assert!(
                g.token_embedding.row(absent as usize).iter().all(|v| *v == 0.0),
                "token {absent} should be untouched"
            );
        }
        // played tokens must receive gradient somewhere
        assert!(g.token_embedding.row(7).iter().any(|v| *v != 0.0));
        assert!(g.prefix_registers.data().iter().any(|v| *v != 0.0));
        assert!(g.suffix_registers.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn empty_target_means_zero_loss_and_gradients() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 8);
        let ex = example(vec![]);
        let (loss, g) = backward(&w, &c, &s, &ex).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.params().iter().all(|(_, _, d)| d.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (c, s) = (config(), spec());
        let w = init_weights(&c, &s, 9).convert::<f64>();
        let ex = example(vec![4, 2]);
        let (_, analytic) = backward_with_precision::<f64>(&w, &c, &s, s.register_layer, &ex).unwrap();
        let numeric = oracle::finite_difference_grads(&w, &c, s.register_layer, &ex, 1e-4);
        let report = oracle::compare_grads(&analytic, &numeric, 1e-7);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn gqa_gradients_match_finite_differences() {
        let mut c = config();
        c.num_heads = 4;
        c.num_kv_heads = 2;
        c.head_dim = 2;
        let s = spec();
        let w = init_weights(&c, &s, 10).convert::<f64>();
        let ex = example(vec![1, 3]);
        let (_, analytic) = backward_with_precision::<f64>(&w, &c, &s, s.register_layer, &ex).unwrap();
        let numeric = oracle::finite_difference_grads(&w, &c, s.register_layer, &ex, 1e-4);
        let report = oracle::compare_grads(&analytic, &numeric, 1e-7);
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let (c, s) = (config(), spec());
        let mut w = init_weights(&c, &s, 11);
        let before = w.clone();
        let g = Gradients::zeros(&c, &s);
        let mut st = AdamState::new(&c, &s);
        adamw_step(&mut w, &g, &mut st, 0.1, &TrainConfig::default());
        assert_eq!(w, before);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let (c, s) = (config(), spec());
        let mut w = Weights::zeros(&c, &s);
        let mut g = Gradients::zeros(&c, &s);
        for (_, _, d) in g.params_mut() {
            for (i, v) in d.iter_mut().enumerate() {
                *v = if i % 2 == 0 { 1e3 } else { -1e3 };
            }
        }
        let mut st = AdamState::new(&c, &s);
        let cfg = TrainConfig::default();
        adamw_step(&mut w, &g, &mut st, 0.01, &cfg);
        for (_, _, d) in w.params() {
            for (i, v) in d.iter().enumerate() {
                let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
                assert_relative_eq!(*v, sign * 0.01, max_relative = 1e-3);
            }
        }
    }

    #[test]
    fn cosine_schedule_shape() {
        assert_eq!(cosine_lr(0, 100, 0.1, 1.0), 0.0);
        assert_relative_eq!(cosine_lr(10, 100, 0.1, 1.0), 1.0);
        assert_relative_eq!(cosine_lr(100, 100, 0.1, 1.0), 0.0, epsilon = 1e-12);
        // piecewise monotone: up during warmup, down after
        for s in 1..10 {
            assert!(cosine_lr(s, 100, 0.1, 1.0) > cosine_lr(s - 1, 100, 0.1, 1.0));
        }
        for s in 11..=100 {
            assert!(cosine_lr(s, 100, 0.1, 1.0) <= cosine_lr(s - 1, 100, 0.1, 1.0));
        }
    }

    fn toy_examples(n: usize) -> Vec<TrainExample> {
        (0..n)
            .map(|i| {
                let t = (i % 11) as u32;
                TrainExample::from_prompt(
                    &spec(),
                    &[t, (t + 1) % 11, (t + 2) % 11],
                    vec![(t + 3) % 11],
                    config().vocab_size,
                )
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss() {
        let (c, s) = (config(), spec());
        let mut w = init_weights(&c, &s, 12);
        let examples = toy_examples(24);
        let initial: f64 = examples
            .iter()
            .map(|e| loss_nll(&w, &c, &s, e).unwrap())
            .sum::<f64>()
            / examples.len() as f64;
        let cfg = TrainConfig {
            epochs: 3,
            effective_batch: 8,
            learning_rate: 0.01,
            ..Default::default()
        };
        let logs = train(&mut w, &c, &s, &examples, &cfg, None).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(
            logs[0].mean_loss < initial,
            "epoch-1 loss {} vs initial {initial}",
            logs[0].mean_loss
        );
        assert!(logs[2].mean_loss < logs[0].mean_loss);
    }

    #[test]
    fn no_rt_mode_never_updates_weights() {
        let (c, s) = (config(), spec());
        let mut w = init_weights(&c, &s, 13);
        let before = w.clone();
        let cfg = TrainConfig {
            mode: TrainMode::EarnNoRt,
            epochs: 5,
            ..Default::default()
        };
        let logs = train(&mut w, &c, &s, &toy_examples(6), &cfg, None).unwrap();
        assert_eq!(w, before);
        assert_eq!(logs.len(), 1);
    }

    #[test]
    fn register_training_with_full_depth_reproduces_vanilla() {
        let c = config();
        let s_full = RegisterSpec {
            register_layer: c.num_layers,
            ..spec()
        };
        let examples = toy_examples(12);
        let mut w_earn = init_weights(&c, &s_full, 14);
        let mut w_van = w_earn.clone();
        let base = TrainConfig {
            epochs: 2,
            effective_batch: 4,
            ..Default::default()
        };
        let earn_logs = train(
            &mut w_earn,
            &c,
            &s_full,
            &examples,
            &TrainConfig { mode: TrainMode::Earn, ..base.clone() },
            None,
        )
        .unwrap();
        let van_logs = train(
            &mut w_van,
            &c,
            &s_full,
            &examples,
            &TrainConfig { mode: TrainMode::Vanilla, ..base },
            None,
        )
        .unwrap();
        assert_eq!(w_earn, w_van);
        assert_eq!(earn_logs, van_logs);
    }

    #[test]
    fn training_is_deterministic() {
        let (c, s) = (config(), spec());
        let examples = toy_examples(10);
        let cfg = TrainConfig {
            epochs: 2,
            effective_batch: 4,
            ..Default::default()
        };
        let mut w1 = init_weights(&c, &s, 15);
        let mut w2 = init_weights(&c, &s, 15);
        train(&mut w1, &c, &s, &examples, &cfg, None).unwrap();
        train(&mut w2, &c, &s, &examples, &cfg, None).unwrap();
        assert_eq!(w1, w2);
    }
}
