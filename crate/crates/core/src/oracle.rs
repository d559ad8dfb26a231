//! Reference implementations used by the test suites.
//!
//! The masked forward here keeps every row at every layer and enforces the
//! pruning rule purely through an attention mask, with naive scalar loops
//! accumulating in f64 throughout. It shares no code with the engine's
//! pruned path, so the two can check each other.

use crate::model::{attention_visibility, ModelConfig, Role, SequenceLayout, Weights};
use crate::numkernel::Matrix;

#[derive(Debug)]
pub struct MaskedForwardOutput {
    /// Post-residual hidden states per layer, always full width.
    pub hidden: Vec<Matrix<f64>>,
    /// Logits for every row (full width).
    pub logits: Matrix<f64>,
}

fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0f64;
            for l in 0..a.cols() {
                acc += a.get(i, l) * b.get(l, j);
            }
            c.set(i, j, acc);
        }
    }
    c
}

fn naive_rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| g * v * inv).collect()
}

fn naive_rope(row: &mut [f64], position: usize, base: f64) {
    let d = row.len();
    for j in 0..d / 2 {
        let inv_freq = base.powf(-(2.0 * j as f64) / d as f64);
        let angle = position as f64 * inv_freq;
        let (sin, cos) = (angle.sin(), angle.cos());
        let (x, y) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = x * cos - y * sin;
        row[2 * j + 1] = x * sin + y * cos;
    }
}

/// Full-width forward where layers beyond `register_layer` merely mask
/// prompt keys instead of dropping prompt rows. Rows left with no visible
/// key (possible only for prompt rows past the register layer) produce a
/// zero attention output; their values are discarded by every consumer.
///
/// `junk_after_k`, when set, overwrites the hidden state of every prompt
/// row with that constant right after the register layer. Retained-row
/// outputs must not change, which is what makes it a useful probe.
pub fn masked_forward(
    weights: &Weights,
    config: &ModelConfig,
    register_layer: usize,
    layout: &SequenceLayout,
    junk_after_k: Option<f64>,
) -> MaskedForwardOutput {
    let w = weights.convert::<f64>();
    let n = layout.len();
    let d_a = config.head_dim;
    let d_h = config.hidden_dim;
    let scale = 1.0 / (d_a as f64).sqrt();

    let mut x: Matrix<f64> = Matrix::zeros(n, d_h);
    for i in 0..n {
        let row: Vec<f64> = match layout.roles[i] {
            Role::PrefixRegister => w
                .prefix_registers
                .row(layout.tokens[i] as usize - config.vocab_size)
                .to_vec(),
            Role::SuffixRegister => w
                .suffix_registers
                .row(layout.tokens[i] as usize - config.vocab_size - w.prefix_registers.rows())
                .to_vec(),
            Role::Prompt | Role::Generated => {
                w.token_embedding.row(layout.tokens[i] as usize).to_vec()
            }
        };
        x.row_mut(i).copy_from_slice(&row);
    }

    let mut hidden = Vec::with_capacity(config.num_layers);
    for (layer_idx, lw) in w.layers.iter().enumerate() {
        let layer = layer_idx + 1;

        let mut a = Matrix::zeros(n, d_h);
        for i in 0..n {
            let r = naive_rmsnorm(x.row(i), &lw.attn_norm, 1e-6);
            a.row_mut(i).copy_from_slice(&r);
        }
        let mut q = naive_matmul(&a, &lw.w_q);
        let mut k = naive_matmul(&a, &lw.w_k);
        let v = naive_matmul(&a, &lw.w_v);
        for i in 0..n {
            for h in 0..config.num_heads {
                naive_rope(
                    &mut q.row_mut(i)[h * d_a..(h + 1) * d_a],
                    layout.positions[i],
                    config.rope_base,
                );
            }
            for g in 0..config.num_kv_heads {
                naive_rope(
                    &mut k.row_mut(i)[g * d_a..(g + 1) * d_a],
                    layout.positions[i],
                    config.rope_base,
                );
            }
        }

        let mut concat = Matrix::zeros(n, config.num_heads * d_a);
        for h in 0..config.num_heads {
            let g = h / config.kv_group_size();
            for i in 0..n {
                let visible: Vec<usize> = (0..n)
                    .filter(|&j| {
                        attention_visibility(
                            layer,
                            layout.roles[i],
                            layout.roles[j],
                            layout.positions[i],
                            layout.positions[j],
                            register_layer,
                        )
                    })
                    .collect();
                if visible.is_empty() {
                    continue; // zero attention output for orphaned rows
                }
                let mut scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| {
                        let mut dot = 0.0f64;
                        for t in 0..d_a {
                            dot += q.get(i, h * d_a + t) * k.get(j, g * d_a + t);
                        }
                        dot * scale
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0f64;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in &mut scores {
                    *s /= sum;
                }
                for (p, &j) in scores.iter().zip(&visible) {
                    for t in 0..d_a {
                        let cur = concat.get(i, h * d_a + t);
                        concat.set(i, h * d_a + t, cur + p * v.get(j, g * d_a + t));
                    }
                }
            }
        }
        let attn_out = naive_matmul(&concat, &lw.w_o);
        for (xv, av) in x.data_mut().iter_mut().zip(attn_out.data()) {
            *xv += *av;
        }

        let mut f = Matrix::zeros(n, d_h);
        for i in 0..n {
            let r = naive_rmsnorm(x.row(i), &lw.ffn_norm, 1e-6);
            f.row_mut(i).copy_from_slice(&r);
        }
        let mut up = naive_matmul(&f, &lw.w_up);
        for u in up.data_mut() {
            *u = *u / (1.0 + (-*u).exp());
        }
        let down = naive_matmul(&up, &lw.w_down);
        for (xv, dv) in x.data_mut().iter_mut().zip(down.data()) {
            *xv += *dv;
        }

        if layer == register_layer {
            if let Some(junk) = junk_after_k {
                for i in 0..n {
                    if layout.roles[i] == Role::Prompt {
                        x.row_mut(i).iter_mut().for_each(|v| *v = junk);
                    }
                }
            }
        }
        hidden.push(x.clone());
    }

    let mut h_norm = Matrix::zeros(n, d_h);
    for i in 0..n {
        let r = naive_rmsnorm(x.row(i), &w.final_norm, 1e-6);
        h_norm.row_mut(i).copy_from_slice(&r);
    }
    let logits = naive_matmul(&h_norm, &w.output_head);
    MaskedForwardOutput { hidden, logits }
}

/// Sum of `-log softmax(logits[row])[target]` over `(row, target)` pairs.
pub fn loss_from_logits(logits: &Matrix<f64>, rows: &[usize], targets: &[u32]) -> f64 {
    assert_eq!(rows.len(), targets.len());
    let mut loss = 0.0f64;
    for (&row, &target) in rows.iter().zip(targets) {
        let r = logits.row(row);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = r.iter().map(|v| (*v - max).exp()).sum();
        let logp = (r[target as usize] - max) - sum.ln();
        loss -= logp;
    }
    loss
}

/// Scalar relative-error comparison with an absolute floor.
pub fn close(a: f32, b: f64, rel: f64, abs: f64) -> bool {
    let diff = (a as f64 - b).abs();
    diff <= abs || diff <= rel * (a as f64).abs().max(b.abs())
}

/// Row comparison at relative tolerance `rel`: the worst element-wise
/// deviation is measured against the reference row's largest magnitude.
pub fn row_close(engine: &[f32], reference: &[f64], rel: f64, abs_floor: f64) -> bool {
    debug_assert_eq!(engine.len(), reference.len());
    let scale = reference
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(abs_floor);
    engine
        .iter()
        .zip(reference)
        .all(|(a, b)| (*a as f64 - b).abs() <= rel * scale)
}

/// Infinity-norm relative deviation of an engine tensor from its
/// reference: `max|a − b| / max|b|` over all supplied row pairs.
pub fn matrix_rel_dev<'a>(
    pairs: impl Iterator<Item = (&'a [f32], &'a [f64])>,
) -> f64 {
    let mut max_diff = 0.0f64;
    let mut scale = 1e-12f64;
    for (engine, reference) in pairs {
        debug_assert_eq!(engine.len(), reference.len());
        for (a, b) in engine.iter().zip(reference) {
            max_diff = max_diff.max((*a as f64 - b).abs());
            scale = scale.max(b.abs());
        }
    }
    max_diff / scale
}

/// Central finite differences of the training loss at step `h`, evaluated
/// entirely in f64. Independent check of the analytic backward pass.
pub fn finite_difference_grads(
    weights: &Weights<f64>,
    config: &ModelConfig,
    register_layer: usize,
    example: &crate::trainer::TrainExample,
    h: f64,
) -> Weights<f64> {
    let mut w = weights.clone();
    let n_tensors = w.params().len();
    let spec = crate::model::RegisterSpec {
        n_prefix: weights.prefix_registers.rows(),
        n_suffix: weights.suffix_registers.rows(),
        register_layer: config.num_layers,
    };
    let mut grads: Weights<f64> = Weights::zeros(config, &spec);
    for t in 0..n_tensors {
        let len = w.params()[t].2.len();
        for e in 0..len {
            let orig = w.params()[t].2[e];
            w.params_mut()[t].2[e] = orig + h;
            let lp = crate::trainer::loss_with_precision::<f64>(&w, config, register_layer, example)
                .expect("fd forward");
            w.params_mut()[t].2[e] = orig - h;
            let lm = crate::trainer::loss_with_precision::<f64>(&w, config, register_layer, example)
                .expect("fd forward");
            w.params_mut()[t].2[e] = orig;
            grads.params_mut()[t].2[e] = (lp - lm) / (2.0 * h);
        }
    }
    grads
}

#[derive(Debug)]
pub struct GradCompare {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_checked: usize,
}

/// Worst relative disagreement between two gradient sets. Deviations at or
/// below `noise_floor` count as agreement: central differences at step `h`
/// carry O(h²) truncation error of their own, so a floor around `10·h²`
/// separates genuine backward-pass defects (which show up orders of
/// magnitude larger) from oracle noise.
pub fn compare_grads(
    analytic: &Weights<f64>,
    numeric: &Weights<f64>,
    noise_floor: f64,
) -> GradCompare {
    let a = analytic.params();
    let b = numeric.params();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut n_checked = 0usize;
    for ((name, _, av), (_, _, bv)) in a.iter().zip(&b) {
        for (i, (x, y)) in av.iter().zip(*bv).enumerate() {
            let diff = (x - y).abs();
            if diff <= noise_floor {
                continue;
            }
            n_checked += 1;
            let rel = diff / x.abs().max(y.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{name}[{i}]");
            }
        }
    }
    GradCompare {
        max_rel_err,
        worst_param,
        n_checked,
    }
}
