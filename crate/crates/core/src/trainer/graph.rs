//! Training graph: a full-sequence forward that stashes every intermediate,
//! and the matching reverse-mode backward. Generic over the element type so
//! the gradient check can run the identical computation in f64.
//!
//! Shapes follow the inference forward exactly: layers up to the register
//! layer run over the whole sequence, prompt rows are dropped at that
//! boundary, and the target tokens ride along as generated rows.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Role, SequenceLayout, Weights};
use crate::numkernel::{
    matmul, rmsnorm_into, sigmoid, softmax_prefix_inplace, FlopCounter, Matrix, RopeTable, Scalar,
};

use super::TrainExample;

pub(super) struct LayerStash<T: Scalar> {
    x_in: Matrix<T>,
    attn_inv_rms: Vec<T>,
    a: Matrix<T>,
    /// roped and pre-scaled queries
    q: Matrix<T>,
    /// roped keys
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    concat: Matrix<T>,
    x_mid: Matrix<T>,
    ffn_inv_rms: Vec<T>,
    f: Matrix<T>,
    up_pre: Matrix<T>,
    up_act: Matrix<T>,
    positions: Vec<usize>,
    /// rows surviving the prune applied after this layer, if any
    keep: Option<Vec<usize>>,
}

pub(super) struct GraphRun<T: Scalar> {
    pub loss: T,
    pub layers: Vec<LayerStash<T>>,
    pub x_final: Matrix<T>,
    /// (final-width row, target token, softmax probs, final-norm inv rms)
    pub loss_rows: Vec<(usize, u32, Vec<T>, T)>,
    pub full_layout: SequenceLayout,
}

/// Rows (in the un-pruned layout) whose logits predict each target token:
/// the last surviving input row, then every target row except the last.
pub(super) fn predictor_rows(
    example: &TrainExample,
    prune_active: bool,
) -> Result<Vec<usize>> {
    let x_len = example.layout.len();
    if example.target.is_empty() {
        return Ok(Vec::new());
    }
    let last_x = if prune_active {
        example
            .layout
            .roles
            .iter()
            .rposition(|r| *r != Role::Prompt)
            .ok_or_else(|| {
                Error::contract("pruned training needs at least one register token")
            })?
    } else {
        x_len - 1
    };
    let mut rows = vec![last_x];
    rows.extend(x_len..x_len + example.target.len() - 1);
    Ok(rows)
}

/// Forward with stash. `register_layer` is the effective prune depth
/// (`num_layers` disables pruning).
pub(super) fn forward_stashed<T: Scalar>(
    weights: &Weights<T>,
    config: &ModelConfig,
    register_layer: usize,
    example: &TrainExample,
) -> Result<GraphRun<T>> {
    let mut full_layout = example.layout.clone();
    for &t in &example.target {
        full_layout.push_generated(t);
    }
    if full_layout.len() > config.max_positions {
        return Err(Error::capacity(format!(
            "training sequence length {} exceeds max_positions {}",
            full_layout.len(),
            config.max_positions
        )));
    }
    let n_layers = config.num_layers;
    let prune_active = register_layer < n_layers;
    let d_a = config.head_dim;
    let d_h = config.hidden_dim;
    let inv_scale = T::from_f64(1.0 / (d_a as f64).sqrt());
    let eps = T::from_f64(1e-6);
    let rope: RopeTable<T> = RopeTable::new(
        config.rope_base,
        d_a,
        full_layout.positions.last().unwrap() + 1,
    )?;
    let flops = FlopCounter::new();

    // embedding
    let mut x: Matrix<T> = Matrix::zeros(full_layout.len(), d_h);
    for i in 0..full_layout.len() {
        let row: Vec<T> = match full_layout.roles[i] {
            Role::PrefixRegister => weights
                .prefix_registers
                .row(full_layout.tokens[i] as usize - config.vocab_size)
                .to_vec(),
            Role::SuffixRegister => weights
                .suffix_registers
                .row(
                    full_layout.tokens[i] as usize
                        - config.vocab_size
                        - weights.prefix_registers.rows(),
                )
                .to_vec(),
            Role::Prompt | Role::Generated => weights
                .token_embedding
                .row(full_layout.tokens[i] as usize)
                .to_vec(),
        };
        x.row_mut(i).copy_from_slice(&row);
    }

    let mut roles = full_layout.roles.clone();
    let mut positions = full_layout.positions.clone();
    let mut retained: Vec<usize> = (0..full_layout.len()).collect();
    let mut layers = Vec::with_capacity(n_layers);

    for layer_idx in 0..n_layers {
        let lw = &weights.layers[layer_idx];
        let width = x.rows();
        let x_in = x.clone();
        let layer_positions = positions.clone();

        let mut a = Matrix::zeros(width, d_h);
        let mut attn_inv_rms = vec![T::zero(); width];
        for i in 0..width {
            attn_inv_rms[i] = rmsnorm_into(x.row(i), &lw.attn_norm, eps, a.row_mut(i));
        }
        let mut q = matmul(&a, &lw.w_q, &flops)?;
        let mut k = matmul(&a, &lw.w_k, &flops)?;
        let v = matmul(&a, &lw.w_v, &flops)?;
        for i in 0..width {
            let pos = positions[i];
            for h in 0..config.num_heads {
                let row = &mut q.row_mut(i)[h * d_a..(h + 1) * d_a];
                rope.rotate_row(row, pos);
                for qv in row {
                    *qv = *qv * inv_scale;
                }
            }
            for g in 0..config.num_kv_heads {
                rope.rotate_row(&mut k.row_mut(i)[g * d_a..(g + 1) * d_a], pos);
            }
        }

        let mut probs = Vec::with_capacity(config.num_heads);
        let mut concat = Matrix::zeros(width, config.num_heads * d_a);
        for h in 0..config.num_heads {
            let g = h / config.kv_group_size();
            let q_h = q.col_block(h * d_a, d_a);
            let kt_g = k.col_block(g * d_a, d_a).transpose();
            let mut scores = matmul(&q_h, &kt_g, &flops)?;
            for i in 0..width {
                softmax_prefix_inplace(scores.row_mut(i), i + 1);
            }
            let out_h = matmul(&scores, &v.col_block(g * d_a, d_a), &flops)?;
            for i in 0..width {
                concat.row_mut(i)[h * d_a..(h + 1) * d_a].copy_from_slice(out_h.row(i));
            }
            probs.push(scores);
        }
        let attn_out = matmul(&concat, &lw.w_o, &flops)?;
        for (xv, av) in x.data_mut().iter_mut().zip(attn_out.data()) {
            *xv += *av;
        }
        let x_mid = x.clone();

        let mut f = Matrix::zeros(width, d_h);
        let mut ffn_inv_rms = vec![T::zero(); width];
        for i in 0..width {
            ffn_inv_rms[i] = rmsnorm_into(x.row(i), &lw.ffn_norm, eps, f.row_mut(i));
        }
        let up_pre = matmul(&f, &lw.w_up, &flops)?;
        let mut up_act = up_pre.clone();
        for u in up_act.data_mut() {
            *u = *u * sigmoid(*u);
        }
        let down = matmul(&up_act, &lw.w_down, &flops)?;
        for (xv, dv) in x.data_mut().iter_mut().zip(down.data()) {
            *xv += *dv;
        }

        let mut keep = None;
        if prune_active && register_layer == layer_idx + 1 && layer_idx + 1 < n_layers {
            let keep_idx: Vec<usize> =
                (0..width).filter(|&i| roles[i] != Role::Prompt).collect();
            if keep_idx.len() < width {
                x = x.select_rows(&keep_idx);
                roles = keep_idx.iter().map(|&i| roles[i]).collect();
                let new_positions: Vec<usize> =
                    keep_idx.iter().map(|&i| positions[i]).collect();
                retained = keep_idx.iter().map(|&i| retained[i]).collect();
                keep = Some(keep_idx);
                positions = new_positions;
            }
        }

        layers.push(LayerStash {
            x_in,
            attn_inv_rms,
            a,
            q,
            k,
            v,
            probs,
            concat,
            x_mid,
            ffn_inv_rms,
            f,
            up_pre,
            up_act,
            positions: layer_positions,
            keep,
        });
    }

    // loss rows and softmax
    let rows_full = predictor_rows(example, prune_active)?;
    let mut loss = T::zero();
    let mut loss_rows = Vec::with_capacity(rows_full.len());
    for (j, &full_row) in rows_full.iter().enumerate() {
        let final_row = retained
            .binary_search(&full_row)
            .map_err(|_| Error::contract("predictor row was pruned"))?;
        let target = example.target[j];
        let mut h_norm = vec![T::zero(); d_h];
        let inv = rmsnorm_into(x.row(final_row), &weights.final_norm, eps, &mut h_norm);
        let h_mat = Matrix::from_vec(1, d_h, h_norm)?;
        let logits = matmul(&h_mat, &weights.output_head, &flops)?;
        let mut p = logits.into_data();
        softmax_prefix_inplace(&mut p, config.vocab_size);
        let p_t = p[target as usize];
        loss = loss - p_t.ln();
        loss_rows.push((final_row, target, p, inv));
    }

    Ok(GraphRun {
        loss,
        layers,
        x_final: x,
        loss_rows,
        full_layout,
    })
}

fn rmsnorm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    gain: &[T],
    inv: T,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = T::from_f64(x.len() as f64);
    let mut dot = T::zero(); // Σ dy_i · g_i · x_i
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        dot += dy[i] * gain[i] * x[i];
    }
    let coef = inv * inv * inv * dot / n;
    for i in 0..x.len() {
        dx[i] += dy[i] * gain[i] * inv - x[i] * coef;
    }
}

/// Reverse pass over a stashed run. Returns gradients shaped like the
/// weights, register embeddings included.
pub(super) fn backward_from_run<T: Scalar>(
    weights: &Weights<T>,
    config: &ModelConfig,
    spec_counts: (usize, usize),
    run: &GraphRun<T>,
) -> Result<Weights<T>> {
    let d_a = config.head_dim;
    let d_h = config.hidden_dim;
    let inv_scale = T::from_f64(1.0 / (d_a as f64).sqrt());
    let flops = FlopCounter::new();
    let rope: RopeTable<T> = RopeTable::new(
        config.rope_base,
        d_a,
        run.full_layout.positions.last().unwrap() + 1,
    )?;
    let spec = crate::model::RegisterSpec {
        n_prefix: spec_counts.0,
        n_suffix: spec_counts.1,
        register_layer: config.num_layers,
    };
    let mut grads: Weights<T> = Weights::zeros(config, &spec);

    // loss head
    let final_width = run.x_final.rows();
    let mut d_x = Matrix::zeros(final_width, d_h);
    for (final_row, target, p, inv) in &run.loss_rows {
        let mut d_logits = p.clone();
        d_logits[*target as usize] = d_logits[*target as usize] - T::one();
        // recompute h_norm for the outer product
        let mut h_norm = vec![T::zero(); d_h];
        rmsnorm_into(
            run.x_final.row(*final_row),
            &weights.final_norm,
            T::from_f64(1e-6),
            &mut h_norm,
        );
        for (t, &dl) in d_logits.iter().enumerate() {
            if dl == T::zero() {
                continue;
            }
            for (i, &h) in h_norm.iter().enumerate() {
                let cur = grads.output_head.get(i, t);
                grads.output_head.set(i, t, cur + h * dl);
            }
        }
        let mut d_h_norm = vec![T::zero(); d_h];
        for (i, dh) in d_h_norm.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (t, &dl) in d_logits.iter().enumerate() {
                acc += dl * weights.output_head.get(i, t);
            }
            *dh = acc;
        }
        rmsnorm_backward(
            &d_h_norm,
            run.x_final.row(*final_row),
            &weights.final_norm,
            *inv,
            d_x.row_mut(*final_row),
            &mut grads.final_norm,
        );
    }

    // layers in reverse
    for layer_idx in (0..config.num_layers).rev() {
        let st = &run.layers[layer_idx];
        let lw = &weights.layers[layer_idx];
        let gl = &mut grads.layers[layer_idx];
        let width = st.x_in.rows();

        // undo the prune narrowing applied after this layer
        if let Some(keep) = &st.keep {
            let mut wide = Matrix::zeros(width, d_h);
            for (narrow_i, &full_i) in keep.iter().enumerate() {
                wide.row_mut(full_i).copy_from_slice(d_x.row(narrow_i));
            }
            d_x = wide;
        }
        debug_assert_eq!(d_x.rows(), width);

        // ffn: x_out = x_mid + W_down(silu(W_up(rmsnorm(x_mid))))
        let d_down_out = d_x.clone();
        let up_act_t = st.up_act.transpose();
        let dw_down = matmul(&up_act_t, &d_down_out, &flops)?;
        for (g, d) in gl.w_down.data_mut().iter_mut().zip(dw_down.data()) {
            *g += *d;
        }
        let mut d_up = matmul(&d_down_out, &lw.w_down.transpose(), &flops)?;
        for (du, &u) in d_up.data_mut().iter_mut().zip(st.up_pre.data()) {
            let s = sigmoid(u);
            *du = *du * (s + u * s * (T::one() - s));
        }
        let f_t = st.f.transpose();
        let dw_up = matmul(&f_t, &d_up, &flops)?;
        for (g, d) in gl.w_up.data_mut().iter_mut().zip(dw_up.data()) {
            *g += *d;
        }
        let d_f = matmul(&d_up, &lw.w_up.transpose(), &flops)?;
        let mut d_x_mid = d_x; // residual branch
        for i in 0..width {
            rmsnorm_backward(
                d_f.row(i),
                st.x_mid.row(i),
                &lw.ffn_norm,
                st.ffn_inv_rms[i],
                d_x_mid.row_mut(i),
                &mut gl.ffn_norm,
            );
        }

        // attention: x_mid = x_in + concat × W_O
        let concat_t = st.concat.transpose();
        let dw_o = matmul(&concat_t, &d_x_mid, &flops)?;
        for (g, d) in gl.w_o.data_mut().iter_mut().zip(dw_o.data()) {
            *g += *d;
        }
        let d_concat = matmul(&d_x_mid, &lw.w_o.transpose(), &flops)?;

        let mut d_q = Matrix::zeros(width, config.num_heads * d_a);
        let mut d_k = Matrix::zeros(width, config.num_kv_heads * d_a);
        let mut d_v = Matrix::zeros(width, config.num_kv_heads * d_a);
        for h in 0..config.num_heads {
            let g = h / config.kv_group_size();
            let p = &st.probs[h];
            let v_g = st.v.col_block(g * d_a, d_a);
            let d_out_h = d_concat.col_block(h * d_a, d_a);
            let mut d_p = matmul(&d_out_h, &v_g.transpose(), &flops)?;
            let d_v_g = matmul(&p.transpose(), &d_out_h, &flops)?;
            for i in 0..width {
                for t in 0..d_a {
                    let cur = d_v.get(i, g * d_a + t);
                    d_v.set(i, g * d_a + t, cur + d_v_g.get(i, t));
                }
            }
            // softmax backward: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..width {
                let p_row = p.row(i);
                let dp_row = d_p.row_mut(i);
                let mut dot = T::zero();
                for (dpv, pv) in dp_row.iter().zip(p_row) {
                    dot += *dpv * *pv;
                }
                for (dpv, pv) in dp_row.iter_mut().zip(p_row) {
                    *dpv = *pv * (*dpv - dot);
                }
            }
            let d_scores = d_p;
            let k_g = st.k.col_block(g * d_a, d_a);
            let d_q_h = matmul(&d_scores, &k_g, &flops)?;
            for i in 0..width {
                d_q.row_mut(i)[h * d_a..(h + 1) * d_a].copy_from_slice(d_q_h.row(i));
            }
            let q_h = st.q.col_block(h * d_a, d_a);
            let d_k_g = matmul(&d_scores.transpose(), &q_h, &flops)?;
            for i in 0..width {
                for t in 0..d_a {
                    let cur = d_k.get(i, g * d_a + t);
                    d_k.set(i, g * d_a + t, cur + d_k_g.get(i, t));
                }
            }
        }
        // un-scale and un-rotate
        for i in 0..width {
            let pos = st.positions[i];
            for h in 0..config.num_heads {
                let row = &mut d_q.row_mut(i)[h * d_a..(h + 1) * d_a];
                for v in row.iter_mut() {
                    *v = *v * inv_scale;
                }
                rope.rotate_row_inverse(row, pos);
            }
            for g in 0..config.num_kv_heads {
                rope.rotate_row_inverse(&mut d_k.row_mut(i)[g * d_a..(g + 1) * d_a], pos);
            }
        }

        let a_t = st.a.transpose();
        let dw_q = matmul(&a_t, &d_q, &flops)?;
        for (gr, d) in gl.w_q.data_mut().iter_mut().zip(dw_q.data()) {
            *gr += *d;
        }
        let dw_k = matmul(&a_t, &d_k, &flops)?;
        for (gr, d) in gl.w_k.data_mut().iter_mut().zip(dw_k.data()) {
            *gr += *d;
        }
        let dw_v = matmul(&a_t, &d_v, &flops)?;
        for (gr, d) in gl.w_v.data_mut().iter_mut().zip(dw_v.data()) {
            *gr += *d;
        }
        let mut d_a_mat = matmul(&d_q, &lw.w_q.transpose(), &flops)?;
        let d_a_k = matmul(&d_k, &lw.w_k.transpose(), &flops)?;
        let d_a_v = matmul(&d_v, &lw.w_v.transpose(), &flops)?;
        for ((av, kv), vv) in d_a_mat
            .data_mut()
            .iter_mut()
            .zip(d_a_k.data())
            .zip(d_a_v.data())
        {
            *av = *av + *kv + *vv;
        }

        let mut d_x_in = d_x_mid;
        for i in 0..width {
            rmsnorm_backward(
                d_a_mat.row(i),
                st.x_in.row(i),
                &lw.attn_norm,
                st.attn_inv_rms[i],
                d_x_in.row_mut(i),
                &mut gl.attn_norm,
            );
        }
        d_x = d_x_in;
    }

    // embeddings
    for (i, dr) in (0..run.full_layout.len()).map(|i| (i, d_x.row(i))) {
        match run.full_layout.roles[i] {
            Role::PrefixRegister => {
                let idx = run.full_layout.tokens[i] as usize - config.vocab_size;
                for (g, d) in grads.prefix_registers.row_mut(idx).iter_mut().zip(dr) {
                    *g += *d;
                }
            }
            Role::SuffixRegister => {
                let idx = run.full_layout.tokens[i] as usize
                    - config.vocab_size
                    - weights.prefix_registers.rows();
                for (g, d) in grads.suffix_registers.row_mut(idx).iter_mut().zip(dr) {
                    *g += *d;
                }
            }
            Role::Prompt | Role::Generated => {
                let idx = run.full_layout.tokens[i] as usize;
                for (g, d) in grads.token_embedding.row_mut(idx).iter_mut().zip(dr) {
                    *g += *d;
                }
            }
        }
    }
    Ok(grads)
}
