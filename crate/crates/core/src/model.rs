//! Decoder-only transformer with register embeddings, role-aware pruning of
//! prompt rows after a configurable layer depth, MHA/GQA attention, and a
//! pre-norm SiLU feed-forward block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    matmul, rmsnorm_into, silu_inplace, softmax_prefix_inplace, FlopCounter, Matrix, RopeTable,
    Scalar,
};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub max_positions: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        if self.num_heads * self.head_dim != self.hidden_dim {
            return Err(Error::config(format!(
                "num_heads*head_dim = {} must equal hidden_dim = {}",
                self.num_heads * self.head_dim,
                self.hidden_dim
            )));
        }
        if self.num_kv_heads == 0 || self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::config(format!(
                "num_kv_heads = {} must divide num_heads = {}",
                self.num_kv_heads, self.num_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "head_dim = {} must be even for rotary encoding",
                self.head_dim
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be >= 1"));
        }
        Ok(())
    }

    pub fn kv_group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }
}

/// Register-token knobs: how many virtual tokens flank the prompt and the
/// layer depth `k` after which prompt rows are dropped. `k = num_layers`
/// disables pruning entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterSpec {
    pub n_prefix: usize,
    pub n_suffix: usize,
    pub register_layer: usize,
}

impl RegisterSpec {
    /// Default recommendation: one-fourth of the layers, one register on
    /// each side.
    pub fn recommended(num_layers: usize) -> Self {
        RegisterSpec {
            n_prefix: 1,
            n_suffix: 1,
            register_layer: num_layers.div_ceil(4).max(1),
        }
    }

    pub fn count(&self) -> usize {
        self.n_prefix + self.n_suffix
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.register_layer == 0 || self.register_layer > config.num_layers {
            return Err(Error::config(format!(
                "register_layer = {} must satisfy 1 <= k <= num_layers = {}",
                self.register_layer, config.num_layers
            )));
        }
        Ok(())
    }

    /// Spec with pruning disabled (vanilla computation).
    pub fn without_pruning(self, num_layers: usize) -> Self {
        RegisterSpec {
            register_layer: num_layers,
            ..self
        }
    }
}

/// Per-token role in the input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    PrefixRegister,
    Prompt,
    SuffixRegister,
    Generated,
}

/// Token ids with per-token role and absolute position. Register tokens
/// carry virtual ids `vocab_size + index`, outside the prompt vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub tokens: Vec<u32>,
    pub roles: Vec<Role>,
    pub positions: Vec<usize>,
}

impl SequenceLayout {
    /// `[prefix registers | prompt | suffix registers]` with positions 0..n.
    pub fn assemble(spec: &RegisterSpec, prompt: &[u32], vocab_size: usize) -> Self {
        let mut tokens = Vec::with_capacity(spec.count() + prompt.len());
        let mut roles = Vec::with_capacity(tokens.capacity());
        for i in 0..spec.n_prefix {
            tokens.push((vocab_size + i) as u32);
            roles.push(Role::PrefixRegister);
        }
        for &t in prompt {
            tokens.push(t);
            roles.push(Role::Prompt);
        }
        for i in 0..spec.n_suffix {
            tokens.push((vocab_size + spec.n_prefix + i) as u32);
            roles.push(Role::SuffixRegister);
        }
        let positions = (0..tokens.len()).collect();
        SequenceLayout {
            tokens,
            roles,
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push_generated(&mut self, token: u32) {
        self.tokens.push(token);
        self.roles.push(Role::Generated);
        self.positions.push(self.positions.last().map_or(0, |p| p + 1));
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.tokens.len() != self.roles.len() || self.tokens.len() != self.positions.len() {
            return Err(Error::contract("layout field lengths differ"));
        }
        for (i, &p) in self.positions.iter().enumerate() {
            let expect = self.positions.first().copied().unwrap_or(0) + i;
            if p != expect {
                return Err(Error::contract("positions must increase by 1"));
            }
        }
        let rank = |r: Role| match r {
            Role::PrefixRegister => 0,
            Role::Prompt => 1,
            Role::SuffixRegister => 2,
            Role::Generated => 3,
        };
        for w in self.roles.windows(2) {
            if rank(w[0]) > rank(w[1]) {
                return Err(Error::contract("roles must appear in block order"));
            }
        }
        for (t, r) in self.tokens.iter().zip(&self.roles) {
            let is_register = matches!(r, Role::PrefixRegister | Role::SuffixRegister);
            if is_register != (*t as usize >= vocab_size) {
                return Err(Error::contract(
                    "register tokens (and only they) carry ids outside the vocabulary",
                ));
            }
        }
        Ok(())
    }
}

/// One decoder layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
    pub attn_norm: Vec<T>,
    pub ffn_norm: Vec<T>,
}

/// Full parameter set, including the register embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T = f32> {
    pub token_embedding: Matrix<T>,
    pub prefix_registers: Matrix<T>,
    pub suffix_registers: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub output_head: Matrix<T>,
}

/// Borrowed view of one named parameter tensor.
pub type ParamRef<'a, T> = (String, (usize, usize), &'a [T]);
pub type ParamMut<'a, T> = (String, (usize, usize), &'a mut [T]);

impl<T: Scalar> Weights<T> {
    pub fn zeros(config: &ModelConfig, spec: &RegisterSpec) -> Self {
        let d_h = config.hidden_dim;
        let layer = || LayerWeights {
            w_q: Matrix::zeros(d_h, config.num_heads * config.head_dim),
            w_k: Matrix::zeros(d_h, config.num_kv_heads * config.head_dim),
            w_v: Matrix::zeros(d_h, config.num_kv_heads * config.head_dim),
            w_o: Matrix::zeros(config.num_heads * config.head_dim, d_h),
            w_up: Matrix::zeros(d_h, config.ffn_dim),
            w_down: Matrix::zeros(config.ffn_dim, d_h),
            attn_norm: vec![T::zero(); d_h],
            ffn_norm: vec![T::zero(); d_h],
        };
        Weights {
            token_embedding: Matrix::zeros(config.vocab_size, d_h),
            prefix_registers: Matrix::zeros(spec.n_prefix, d_h),
            suffix_registers: Matrix::zeros(spec.n_suffix, d_h),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            final_norm: vec![T::zero(); d_h],
            output_head: Matrix::zeros(d_h, config.vocab_size),
        }
    }

    /// Named tensors in a fixed order (the checkpoint and optimizer order).
    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        fn mat<'a, T: Scalar>(name: String, m: &'a Matrix<T>) -> ParamRef<'a, T> {
            (name, (m.rows(), m.cols()), m.data())
        }
        fn vec1<'a, T: Scalar>(name: String, v: &'a [T]) -> ParamRef<'a, T> {
            (name, (1, v.len()), v)
        }
        let mut out: Vec<ParamRef<'_, T>> = Vec::new();
        out.push(mat("token_embedding".into(), &self.token_embedding));
        out.push(mat("prefix_registers".into(), &self.prefix_registers));
        out.push(mat("suffix_registers".into(), &self.suffix_registers));
        for (i, l) in self.layers.iter().enumerate() {
            out.push(mat(format!("layer{i}.w_q"), &l.w_q));
            out.push(mat(format!("layer{i}.w_k"), &l.w_k));
            out.push(mat(format!("layer{i}.w_v"), &l.w_v));
            out.push(mat(format!("layer{i}.w_o"), &l.w_o));
            out.push(mat(format!("layer{i}.w_up"), &l.w_up));
            out.push(mat(format!("layer{i}.w_down"), &l.w_down));
            out.push(vec1(format!("layer{i}.attn_norm"), &l.attn_norm));
            out.push(vec1(format!("layer{i}.ffn_norm"), &l.ffn_norm));
        }
        out.push(vec1("final_norm".into(), &self.final_norm));
        out.push(mat("output_head".into(), &self.output_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out: Vec<ParamMut<'_, T>> = Vec::new();
        out.push((
            "token_embedding".into(),
            (self.token_embedding.rows(), self.token_embedding.cols()),
            self.token_embedding.data_mut(),
        ));
        out.push((
            "prefix_registers".into(),
            (self.prefix_registers.rows(), self.prefix_registers.cols()),
            self.prefix_registers.data_mut(),
        ));
        out.push((
            "suffix_registers".into(),
            (self.suffix_registers.rows(), self.suffix_registers.cols()),
            self.suffix_registers.data_mut(),
        ));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.w_q"), (l.w_q.rows(), l.w_q.cols()), l.w_q.data_mut()));
            out.push((format!("layer{i}.w_k"), (l.w_k.rows(), l.w_k.cols()), l.w_k.data_mut()));
            out.push((format!("layer{i}.w_v"), (l.w_v.rows(), l.w_v.cols()), l.w_v.data_mut()));
            out.push((format!("layer{i}.w_o"), (l.w_o.rows(), l.w_o.cols()), l.w_o.data_mut()));
            out.push((
                format!("layer{i}.w_up"),
                (l.w_up.rows(), l.w_up.cols()),
                l.w_up.data_mut(),
            ));
            out.push((
                format!("layer{i}.w_down"),
                (l.w_down.rows(), l.w_down.cols()),
                l.w_down.data_mut(),
            ));
            out.push((format!("layer{i}.attn_norm"), (1, l.attn_norm.len()), l.attn_norm.as_mut_slice()));
            out.push((format!("layer{i}.ffn_norm"), (1, l.ffn_norm.len()), l.ffn_norm.as_mut_slice()));
        }
        out.push((
            "final_norm".into(),
            (1, self.final_norm.len()),
            self.final_norm.as_mut_slice(),
        ));
        out.push((
            "output_head".into(),
            (self.output_head.rows(), self.output_head.cols()),
            self.output_head.data_mut(),
        ));
        out
    }

    pub fn convert<U: Scalar>(&self) -> Weights<U> {
        let conv = |m: &Matrix<T>| {
            Matrix::from_vec(
                m.rows(),
                m.cols(),
                m.data().iter().map(|v| U::from_f64(v.into_f64())).collect(),
            )
            .expect("shape preserved")
        };
        let convv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.into_f64())).collect();
        Weights {
            token_embedding: conv(&self.token_embedding),
            prefix_registers: conv(&self.prefix_registers),
            suffix_registers: conv(&self.suffix_registers),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w_q: conv(&l.w_q),
                    w_k: conv(&l.w_k),
                    w_v: conv(&l.w_v),
                    w_o: conv(&l.w_o),
                    w_up: conv(&l.w_up),
                    w_down: conv(&l.w_down),
                    attn_norm: convv(&l.attn_norm),
                    ffn_norm: convv(&l.ffn_norm),
                })
                .collect(),
            final_norm: convv(&self.final_norm),
            output_head: conv(&self.output_head),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

/// Deterministic initialization: linear weights uniform in
/// `±sqrt(3/fan_in)` (standard deviation `1/sqrt(fan_in)`), norm gains 1,
/// register embeddings drawn like token embeddings.
pub fn init_weights(config: &ModelConfig, spec: &RegisterSpec, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |m: &mut Matrix<f32>, fan_in: usize| {
        let bound = (3.0 / fan_in as f32).sqrt();
        for v in m.data_mut() {
            *v = (rng.random::<f32>() * 2.0 - 1.0) * bound;
        }
    };
    let mut w = Weights::zeros(config, spec);
    let d_h = config.hidden_dim;
    uniform(&mut w.token_embedding, d_h);
    uniform(&mut w.prefix_registers, d_h);
    uniform(&mut w.suffix_registers, d_h);
    for l in &mut w.layers {
        uniform(&mut l.w_q, d_h);
        uniform(&mut l.w_k, d_h);
        uniform(&mut l.w_v, d_h);
        uniform(&mut l.w_o, config.num_heads * config.head_dim);
        uniform(&mut l.w_up, d_h);
        uniform(&mut l.w_down, config.ffn_dim);
        l.attn_norm = vec![1.0; d_h];
        l.ffn_norm = vec![1.0; d_h];
    }
    w.final_norm = vec![1.0; d_h];
    uniform(&mut w.output_head, d_h);
    w
}

/// Whether a query row may attend to a key. `layer` is 1-based. Beyond the
/// register layer, prompt keys are invisible (and in the engine their rows
/// are not computed at all).
pub fn attention_visibility(
    layer: usize,
    _query_role: Role,
    key_role: Role,
    query_pos: usize,
    key_pos: usize,
    register_layer: usize,
) -> bool {
    key_pos <= query_pos && (layer <= register_layer || key_role != Role::Prompt)
}

/// FLOP accounting split between decoder-layer matmuls and the LM head.
#[derive(Debug, Default)]
pub struct ForwardFlops {
    pub layer: FlopCounter,
    pub head: FlopCounter,
}

impl ForwardFlops {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn total(&self) -> u64 {
        self.layer.get() + self.head.get()
    }
    pub fn reset(&self) {
        self.layer.reset();
        self.head.reset();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnCapture {
    #[default]
    None,
    /// Final query row's distribution per layer/head.
    LastRow,
    /// Full row-wise attention matrices (debug mode; quadratic memory).
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitsRows {
    #[default]
    All,
    LastOnly,
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Drop prompt rows after this many layers; `None` means never.
    pub prune_after: Option<usize>,
    /// Run only the first `n` layers (layer-skipping baseline).
    pub layer_limit: Option<usize>,
    /// Keep per-layer rotated key/value projections (cache seeding).
    pub capture_kv: bool,
    /// Keep per-layer post-residual hidden states.
    pub capture_hidden: bool,
    pub attn_capture: AttnCapture,
    pub logits_rows: LogitsRows,
}

/// Rotated key/value projections of one layer, ready for cache seeding.
/// Keys are stored transposed (`[n_kv·d_a][tokens]`) so decode-time score
/// accumulation streams contiguous memory.
#[derive(Debug, Clone)]
pub struct LayerKvSnapshot {
    pub keys_t: Vec<Vec<f32>>,
    pub values: Matrix,
    pub roles: Vec<Role>,
    pub positions: Vec<usize>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// One row per computed token (`LogitsRows::All`) or a single row for
    /// the last token.
    pub logits: Matrix,
    /// Layout indices still present in the final hidden state.
    pub retained: Vec<usize>,
    pub hidden: Vec<Matrix>,
    pub kv: Vec<LayerKvSnapshot>,
    /// `[layer][head] -> distribution` when `AttnCapture::LastRow`.
    pub attn_last_row: Vec<Vec<Vec<f32>>>,
    /// `[layer][head]` full attention matrices when `AttnCapture::Full`.
    pub attn_full: Vec<Vec<Matrix>>,
}

/// Embed one token id according to its role.
pub fn embed_token(weights: &Weights, config: &ModelConfig, token: u32, role: Role) -> Vec<f32> {
    match role {
        Role::PrefixRegister => {
            let idx = token as usize - config.vocab_size;
            weights.prefix_registers.row(idx).to_vec()
        }
        Role::SuffixRegister => {
            let idx = token as usize - config.vocab_size - weights.prefix_registers.rows();
            weights.suffix_registers.row(idx).to_vec()
        }
        Role::Prompt | Role::Generated => weights.token_embedding.row(token as usize).to_vec(),
    }
}

fn embed_layout(weights: &Weights, config: &ModelConfig, layout: &SequenceLayout) -> Matrix {
    let mut x = Matrix::zeros(layout.len(), config.hidden_dim);
    for i in 0..layout.len() {
        let row = embed_token(weights, config, layout.tokens[i], layout.roles[i]);
        x.row_mut(i).copy_from_slice(&row);
    }
    x
}

/// Full-sequence forward pass. Layers `1..=k` run over every token; at the
/// output of layer `k` prompt rows are removed and the remaining layers run
/// only over registers and generated tokens, which keep their original
/// absolute positions for rotary encoding.
pub fn forward(
    weights: &Weights,
    config: &ModelConfig,
    layout: &SequenceLayout,
    opts: &ForwardOptions,
    flops: &ForwardFlops,
) -> Result<ForwardOutput> {
    if layout.len() > config.max_positions {
        return Err(Error::capacity(format!(
            "sequence length {} exceeds max_positions {}",
            layout.len(),
            config.max_positions
        )));
    }
    if layout.is_empty() {
        return Err(Error::contract("empty layout"));
    }
    let n_layers = opts.layer_limit.unwrap_or(config.num_layers);
    if n_layers == 0 || n_layers > config.num_layers {
        return Err(Error::config(format!(
            "layer_limit {n_layers} out of range 1..={}",
            config.num_layers
        )));
    }
    let d_a = config.head_dim;
    let max_pos = layout.positions.last().unwrap() + 1;
    let rope = RopeTable::new(config.rope_base, d_a, max_pos)?;
    let inv_scale = 1.0 / (d_a as f32).sqrt();

    let mut x = embed_layout(weights, config, layout);
    let mut roles = layout.roles.clone();
    let mut positions = layout.positions.clone();
    let mut retained: Vec<usize> = (0..layout.len()).collect();

    let mut out = ForwardOutput {
        logits: Matrix::zeros(0, 0),
        retained: Vec::new(),
        hidden: Vec::new(),
        kv: Vec::new(),
        attn_last_row: Vec::new(),
        attn_full: Vec::new(),
    };

    for layer_idx in 0..n_layers {
        let lw = &weights.layers[layer_idx];
        let width = x.rows();

        // attention
        let mut a = Matrix::zeros(width, config.hidden_dim);
        for i in 0..width {
            rmsnorm_into(x.row(i), &lw.attn_norm, 1e-6, a.row_mut(i));
        }
        let mut q = matmul(&a, &lw.w_q, &flops.layer)?;
        let mut k = matmul(&a, &lw.w_k, &flops.layer)?;
        let v = matmul(&a, &lw.w_v, &flops.layer)?;
        for i in 0..width {
            let pos = positions[i];
            for h in 0..config.num_heads {
                let row = &mut q.row_mut(i)[h * d_a..(h + 1) * d_a];
                rope.rotate_row(row, pos);
                for qv in row {
                    *qv *= inv_scale;
                }
            }
            for g in 0..config.num_kv_heads {
                rope.rotate_row(&mut k.row_mut(i)[g * d_a..(g + 1) * d_a], pos);
            }
        }

        let mut keys_t: Vec<Vec<f32>> = Vec::new();
        let mut group_values: Vec<Matrix> = Vec::new();
        for g in 0..config.num_kv_heads {
            let kt = k.col_block(g * d_a, d_a).transpose();
            for dim in 0..d_a {
                keys_t.push(kt.row(dim).to_vec());
            }
            group_values.push(v.col_block(g * d_a, d_a));
        }

        let mut concat = Matrix::zeros(width, config.num_heads * d_a);
        let mut layer_last_row: Vec<Vec<f32>> = Vec::new();
        let mut layer_full: Vec<Matrix> = Vec::new();
        for h in 0..config.num_heads {
            let g = h / config.kv_group_size();
            let q_h = q.col_block(h * d_a, d_a);
            let kt_g = Matrix::from_vec(
                d_a,
                width,
                keys_t[g * d_a..(g + 1) * d_a].concat(),
            )?;
            let mut scores = matmul(&q_h, &kt_g, &flops.layer)?;
            for i in 0..width {
                // causality: query i sees the key prefix 0..=i
                softmax_prefix_inplace(scores.row_mut(i), i + 1);
            }
            match opts.attn_capture {
                AttnCapture::LastRow => layer_last_row.push(scores.row(width - 1).to_vec()),
                AttnCapture::Full => layer_full.push(scores.clone()),
                AttnCapture::None => {}
            }
            let out_h = matmul(&scores, &group_values[g], &flops.layer)?;
            for i in 0..width {
                concat.row_mut(i)[h * d_a..(h + 1) * d_a].copy_from_slice(out_h.row(i));
            }
        }
        let attn_out = matmul(&concat, &lw.w_o, &flops.layer)?;
        for (xv, av) in x.data_mut().iter_mut().zip(attn_out.data()) {
            *xv += *av;
        }

        // feed-forward: down(silu(up(x)))
        let mut f = Matrix::zeros(width, config.hidden_dim);
        for i in 0..width {
            rmsnorm_into(x.row(i), &lw.ffn_norm, 1e-6, f.row_mut(i));
        }
        let mut up = matmul(&f, &lw.w_up, &flops.layer)?;
        silu_inplace(up.data_mut());
        let down = matmul(&up, &lw.w_down, &flops.layer)?;
        for (xv, dv) in x.data_mut().iter_mut().zip(down.data()) {
            *xv += *dv;
        }

        if opts.capture_kv {
            out.kv.push(LayerKvSnapshot {
                keys_t,
                values: v,
                roles: roles.clone(),
                positions: positions.clone(),
            });
        }
        if opts.capture_hidden {
            out.hidden.push(x.clone());
        }
        match opts.attn_capture {
            AttnCapture::LastRow => out.attn_last_row.push(layer_last_row),
            AttnCapture::Full => out.attn_full.push(layer_full),
            AttnCapture::None => {}
        }

        // drop prompt rows at the register layer boundary
        if opts.prune_after == Some(layer_idx + 1) && layer_idx + 1 < n_layers {
            let keep: Vec<usize> = (0..width).filter(|&i| roles[i] != Role::Prompt).collect();
            if keep.len() < width {
                x = x.select_rows(&keep);
                roles = keep.iter().map(|&i| roles[i]).collect();
                positions = keep.iter().map(|&i| positions[i]).collect();
                retained = keep.iter().map(|&i| retained[i]).collect();
            }
        }
    }

    let width = x.rows();
    let (norm_rows, logit_rows): (Vec<usize>, usize) = match opts.logits_rows {
        LogitsRows::All => ((0..width).collect(), width),
        LogitsRows::LastOnly => (vec![width - 1], 1),
    };
    let mut h_norm = Matrix::zeros(logit_rows, config.hidden_dim);
    for (dst, &src) in norm_rows.iter().enumerate() {
        rmsnorm_into(x.row(src), &weights.final_norm, 1e-6, h_norm.row_mut(dst));
    }
    out.logits = matmul(&h_norm, &weights.output_head, &flops.head)?;
    out.retained = retained;
    Ok(out)
}

/// Standard causal forward with no pruning.
pub fn forward_vanilla(
    weights: &Weights,
    config: &ModelConfig,
    layout: &SequenceLayout,
    opts: &ForwardOptions,
    flops: &ForwardFlops,
) -> Result<ForwardOutput> {
    let opts = ForwardOptions {
        prune_after: None,
        ..*opts
    };
    forward(weights, config, layout, &opts, flops)
}

/// Forward with prompt rows dropped after `spec.register_layer`.
pub fn forward_earn(
    weights: &Weights,
    config: &ModelConfig,
    spec: &RegisterSpec,
    layout: &SequenceLayout,
    opts: &ForwardOptions,
    flops: &ForwardFlops,
) -> Result<ForwardOutput> {
    spec.validate(config)?;
    let opts = ForwardOptions {
        prune_after: Some(spec.register_layer),
        ..*opts
    };
    forward(weights, config, layout, &opts, flops)
}
