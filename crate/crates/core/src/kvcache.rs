//! Per-layer key/value store with role tags, layer-dependent retention, and
//! exact size accounting.
//!
//! Keys are stored transposed (one contiguous lane per `kv_head × dim`) so
//! that decode-time score accumulation streams sequential memory; values are
//! stored row-per-token.

use crate::error::{Error, Result};
use crate::model::{LayerKvSnapshot, ModelConfig, RegisterSpec, Role};

/// One decoder layer's cache.
#[derive(Debug, Clone)]
pub struct LayerKvCache {
    pub layer: usize,
    n_kv: usize,
    head_dim: usize,
    /// `true` for layers past the register layer: prompt entries are
    /// rejected, they are never computed there.
    pruned: bool,
    /// `[n_kv · head_dim]` lanes, each `len()` long.
    keys_t: Vec<Vec<f32>>,
    /// Row-major `len() × (n_kv · head_dim)`.
    values: Vec<f32>,
    roles: Vec<Role>,
    positions: Vec<usize>,
}

/// One token's key/value rows, ready to append.
#[derive(Debug, Clone)]
pub struct KvEntry {
    pub key_row: Vec<f32>,
    pub value_row: Vec<f32>,
    pub role: Role,
    pub position: usize,
}

impl LayerKvCache {
    pub fn new(layer: usize, n_kv: usize, head_dim: usize, pruned: bool) -> Self {
        LayerKvCache {
            layer,
            n_kv,
            head_dim,
            pruned,
            keys_t: vec![Vec::new(); n_kv * head_dim],
            values: Vec::new(),
            roles: Vec::new(),
            positions: Vec::new(),
        }
    }

    /// Seed a layer cache from a forward snapshot (moves the buffers).
    pub fn from_snapshot(layer: usize, snap: LayerKvSnapshot, pruned: bool, config: &ModelConfig) -> Self {
        debug_assert_eq!(snap.keys_t.len(), config.num_kv_heads * config.head_dim);
        LayerKvCache {
            layer,
            n_kv: config.num_kv_heads,
            head_dim: config.head_dim,
            pruned,
            keys_t: snap.keys_t,
            values: snap.values.into_data(),
            roles: snap.roles,
            positions: snap.positions,
        }
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Contiguous key lane for (kv head, dim).
    pub fn key_lane(&self, kv_head: usize, dim: usize) -> &[f32] {
        &self.keys_t[kv_head * self.head_dim + dim]
    }

    pub fn value_row(&self, token: usize) -> &[f32] {
        let w = self.n_kv * self.head_dim;
        &self.values[token * w..(token + 1) * w]
    }

    pub fn append(&mut self, entry: KvEntry) -> Result<()> {
        if self.pruned && entry.role == Role::Prompt {
            return Err(Error::contract(format!(
                "prompt entry offered to pruned layer {}",
                self.layer
            )));
        }
        let w = self.n_kv * self.head_dim;
        if entry.key_row.len() != w || entry.value_row.len() != w {
            return Err(Error::contract("kv entry width mismatch"));
        }
        for (lane, v) in self.keys_t.iter_mut().zip(&entry.key_row) {
            lane.push(*v);
        }
        self.values.extend_from_slice(&entry.value_row);
        self.roles.push(entry.role);
        self.positions.push(entry.position);
        Ok(())
    }

    /// Keep the first `n_initial` and most recent `n_recent` entries
    /// (window-cache baseline). No-op when nothing falls in between.
    pub fn evict_window(&mut self, n_initial: usize, n_recent: usize) {
        let len = self.len();
        if n_initial + n_recent >= len {
            return;
        }
        let keep: Vec<usize> = (0..n_initial).chain(len - n_recent..len).collect();
        for lane in &mut self.keys_t {
            *lane = keep.iter().map(|&i| lane[i]).collect();
        }
        let w = self.n_kv * self.head_dim;
        let mut values = Vec::with_capacity(keep.len() * w);
        for &i in &keep {
            values.extend_from_slice(&self.values[i * w..(i + 1) * w]);
        }
        self.values = values;
        self.roles = keep.iter().map(|&i| self.roles[i]).collect();
        self.positions = keep.iter().map(|&i| self.positions[i]).collect();
    }
}

/// All layers of one inference session.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub layers: Vec<LayerKvCache>,
}

/// Pair counts; `bytes` follow from head count and element width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheStats {
    pub pairs_per_layer: Vec<usize>,
    pub total_pairs: usize,
}

impl KvCache {
    pub fn empty(config: &ModelConfig, spec: &RegisterSpec) -> Self {
        let layers = (0..config.num_layers)
            .map(|l| {
                LayerKvCache::new(
                    l,
                    config.num_kv_heads,
                    config.head_dim,
                    l + 1 > spec.register_layer,
                )
            })
            .collect();
        KvCache { layers }
    }

    pub fn stats(&self) -> CacheStats {
        let pairs_per_layer: Vec<usize> = self.layers.iter().map(|l| l.len()).collect();
        let total_pairs = pairs_per_layer.iter().sum();
        CacheStats {
            pairs_per_layer,
            total_pairs,
        }
    }
}

/// Per-kv-head pair count after prefilling `l_total` tokens and decoding
/// `g` more: `k·(l_total+g) + (n−k)·(r+g)`.
pub fn expected_pairs(n_layers: usize, k: usize, l_total: usize, r: usize, g: usize) -> usize {
    k * (l_total + g) + (n_layers - k) * (r + g)
}

/// Fraction of the vanilla cache removed by pruning: `(N−k)(L−r)/(N·L)`.
pub fn reduction_ratio(n_layers: usize, k: usize, l_total: usize, r: usize) -> f64 {
    ((n_layers - k) * (l_total - r)) as f64 / (n_layers * l_total) as f64
}

/// Bytes held by `total_pairs` cached tokens: keys and values across
/// `n_kv` heads of `head_dim` elements each.
pub fn bytes_for(stats: &CacheStats, n_kv: usize, head_dim: usize, element_bytes: usize) -> u64 {
    stats.total_pairs as u64 * n_kv as u64 * head_dim as u64 * 2 * element_bytes as u64
}
