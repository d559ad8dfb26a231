//! Synthetic sequential-recommendation data, interaction-log ingestion,
//! chronological splitting, identifier assignment, and ranking metrics.
//!
//! The generator draws first-order Markov user behavior over latent item
//! clusters: the next item stays in the current cluster with a configured
//! probability and item popularity within a cluster is Zipf-skewed. Each
//! item's 4-token identifier starts with its cluster token, so next-item
//! prediction is learnable by a small model.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier length in tokens.
pub const IDENT_LEN: usize = 4;
/// Reserved task-instruction tokens preceding nothing else in the vocab.
pub const TASK_TOKENS: [u32; 2] = [0, 1];
/// First identifier token id; ids below are task tokens.
pub const IDENT_BASE: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: u32,
    pub ts: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

/// Item id → 4-token identifier over the identifier sub-vocabulary
/// (cluster token followed by three base-`digit_base` digits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    pub idents: BTreeMap<u32, [u32; IDENT_LEN]>,
    pub n_clusters: usize,
    pub digit_base: usize,
}

impl Catalog {
    /// Smallest model vocabulary that covers task and identifier tokens.
    pub fn min_vocab(&self) -> usize {
        let from_idents = self
            .idents
            .values()
            .flat_map(|id| id.iter())
            .max()
            .map_or(0, |t| *t as usize + 1);
        from_idents.max(IDENT_BASE as usize + self.n_clusters + self.digit_base)
    }

    pub fn ident(&self, item: u32) -> Option<&[u32; IDENT_LEN]> {
        self.idents.get(&item)
    }

    /// Reverse map identifier → item.
    pub fn reverse(&self) -> BTreeMap<[u32; IDENT_LEN], u32> {
        self.idents.iter().map(|(k, v)| (*v, *k)).collect()
    }

    pub fn cluster_of(&self, item: u32) -> Option<usize> {
        self.idents
            .get(&item)
            .map(|id| (id[0] - IDENT_BASE) as usize)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub seq_len_range: (usize, usize),
    pub n_clusters: usize,
    pub zipf_exponent: f64,
    pub within_cluster_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_items: 200,
            seq_len_range: (8, 24),
            n_clusters: 8,
            zipf_exponent: 1.0,
            within_cluster_prob: 0.85,
            seed: 0,
        }
    }
}

/// Cumulative-weight sampler over Zipf ranks `1..=n` with exponent `s`.
struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize, s: f64) -> Self {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for rank in 1..=n {
            acc += 1.0 / (rank as f64).powf(s);
            cumulative.push(acc);
        }
        ZipfSampler { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c < u)
    }
}

/// Deterministic catalog: items are dealt round-robin into clusters and the
/// in-cluster index is written as three digits after the cluster token.
pub fn build_catalog(n_items: usize, n_clusters: usize) -> Catalog {
    let per_cluster = n_items.div_ceil(n_clusters);
    let digit_base = cube_root_ceil(per_cluster).max(2);
    let mut idents = BTreeMap::new();
    for item in 0..n_items as u32 {
        let cluster = item as usize % n_clusters;
        let index = item as usize / n_clusters;
        let digit_start = IDENT_BASE + n_clusters as u32;
        let ident = [
            IDENT_BASE + cluster as u32,
            digit_start + (index / (digit_base * digit_base)) as u32,
            digit_start + ((index / digit_base) % digit_base) as u32,
            digit_start + (index % digit_base) as u32,
        ];
        idents.insert(item, ident);
    }
    Catalog {
        idents,
        n_clusters,
        digit_base,
    }
}

fn cube_root_ceil(n: usize) -> usize {
    let mut b = 1;
    while b * b * b < n {
        b += 1;
    }
    b
}

/// Seeded Markov interaction log plus its catalog.
pub fn generate_synthetic(cfg: &SynthConfig) -> (InteractionLog, Catalog) {
    assert!(cfg.n_items >= 2, "need at least two items");
    assert!(cfg.n_clusters >= 1 && cfg.n_clusters <= cfg.n_items);
    let catalog = build_catalog(cfg.n_items, cfg.n_clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // items per cluster, in deterministic order
    let mut clusters: Vec<Vec<u32>> = vec![Vec::new(); cfg.n_clusters];
    for item in 0..cfg.n_items as u32 {
        clusters[catalog.cluster_of(item).unwrap()].push(item);
    }
    let samplers: Vec<ZipfSampler> = clusters
        .iter()
        .map(|c| ZipfSampler::new(c.len(), cfg.zipf_exponent))
        .collect();

    let (lo, hi) = cfg.seq_len_range;
    let mut remaining: Vec<usize> = (0..cfg.n_users)
        .map(|_| rng.random_range(lo..=hi))
        .collect();
    let mut current_cluster: Vec<Option<usize>> = vec![None; cfg.n_users];

    let mut records = Vec::new();
    let mut ts = 0i64;
    let mut active: Vec<usize> = (0..cfg.n_users).collect();
    while !active.is_empty() {
        let pick = active[rng.random_range(0..active.len())];
        let cluster = match current_cluster[pick] {
            Some(c) if rng.random::<f64>() < cfg.within_cluster_prob => c,
            Some(c) => {
                // jump to a different cluster
                let mut next = rng.random_range(0..cfg.n_clusters);
                if cfg.n_clusters > 1 && next == c {
                    next = (next + 1) % cfg.n_clusters;
                }
                next
            }
            None => rng.random_range(0..cfg.n_clusters),
        };
        current_cluster[pick] = Some(cluster);
        let item = clusters[cluster][samplers[cluster].sample(&mut rng)];
        records.push(Interaction {
            user: format!("u{pick}"),
            item,
            ts,
        });
        ts += 1;
        remaining[pick] -= 1;
        if remaining[pick] == 0 {
            active.retain(|&u| u != pick);
        }
    }
    (InteractionLog { records }, catalog)
}

/// Empirical fraction of consecutive same-user transitions that stay in
/// the same cluster.
pub fn within_cluster_rate(log: &InteractionLog, catalog: &Catalog) -> (f64, usize) {
    let mut per_user: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for r in &log.records {
        per_user.entry(&r.user).or_default().push(r.item);
    }
    let mut stays = 0usize;
    let mut total = 0usize;
    for seq in per_user.values() {
        for w in seq.windows(2) {
            total += 1;
            if catalog.cluster_of(w[0]) == catalog.cluster_of(w[1]) {
                stays += 1;
            }
        }
    }
    (stays as f64 / total.max(1) as f64, total)
}

// --- JSON-lines I/O -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CatalogLine {
    item: u32,
    ident: Vec<u32>,
}

pub fn write_log(log: &InteractionLog, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &log.records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Contract(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSON-lines interaction log; malformed lines are rejected with
/// their 1-based line number.
pub fn ingest(path: &Path) -> Result<InteractionLog> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Interaction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(InteractionLog { records })
}

pub fn write_catalog(catalog: &Catalog, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (item, ident) in &catalog.idents {
        let line = CatalogLine {
            item: *item,
            ident: ident.to_vec(),
        };
        serde_json::to_writer(&mut f, &line).map_err(|e| Error::Contract(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_catalog(path: &Path, n_clusters: usize, digit_base: usize) -> Result<Catalog> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut idents = BTreeMap::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: CatalogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if l.ident.len() != IDENT_LEN {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("identifier must have {IDENT_LEN} tokens"),
            });
        }
        let mut ident = [0u32; IDENT_LEN];
        ident.copy_from_slice(&l.ident);
        idents.insert(l.item, ident);
    }
    Ok(Catalog {
        idents,
        n_clusters,
        digit_base,
    })
}

// --- chronological split ---------------------------------------------------

/// One next-item example: the user's history (oldest first) and the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecExample {
    pub user: String,
    pub history: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<RecExample>,
    pub valid: Vec<RecExample>,
    pub test: Vec<RecExample>,
}

/// Region boundaries over `n` globally time-sorted interactions:
/// `[0, floor(0.8n))`, `[floor(0.8n), floor(0.9n))`, and the rest.
pub fn split_boundaries(n: usize) -> (usize, usize) {
    (n * 8 / 10, n * 9 / 10)
}

/// Sort interactions by global timestamp (stable on ties), cut 8:1:1 by
/// count, and build next-item examples. Every train-region interaction with
/// non-empty prior history becomes a training example; validation and test
/// take each user's last interaction inside their region (leave-last-out).
/// Histories may span region boundaries backwards — they contain exactly
/// the items the user had interacted with before the target's time.
pub fn chronological_split(log: &InteractionLog, max_history: usize) -> SplitDataset {
    let mut order: Vec<usize> = (0..log.records.len()).collect();
    order.sort_by_key(|&i| (log.records[i].ts, i));
    let n = order.len();
    let (b_train, b_valid) = split_boundaries(n);

    #[derive(Clone, Copy, PartialEq)]
    enum Region {
        Train,
        Valid,
        Test,
    }
    let region = |rank: usize| {
        if rank < b_train {
            Region::Train
        } else if rank < b_valid {
            Region::Valid
        } else {
            Region::Test
        }
    };

    let mut history: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    let mut train = Vec::new();
    let mut last_in_region: BTreeMap<&str, (Region, RecExample)> = BTreeMap::new();
    for (rank, &i) in order.iter().enumerate() {
        let r = &log.records[i];
        let h = history.entry(&r.user).or_default();
        if !h.is_empty() {
            let from = h.len().saturating_sub(max_history);
            let ex = RecExample {
                user: r.user.clone(),
                history: h[from..].to_vec(),
                target: r.item,
            };
            match region(rank) {
                Region::Train => train.push(ex),
                reg => {
                    last_in_region.insert(&r.user, (reg, ex));
                }
            }
        }
        h.push(r.item);
    }
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (_, (reg, ex)) in last_in_region {
        match reg {
            Region::Valid => valid.push(ex),
            Region::Test => test.push(ex),
            Region::Train => unreachable!(),
        }
    }
    SplitDataset { train, valid, test }
}

// --- ranking metrics --------------------------------------------------------

/// 1 if the single ground-truth item appears in the top-K, else 0.
pub fn recall_at_k(ranked: &[u32], truth: u32, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == truth) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a hit at 1-based `rank <= K`, else 0.
pub fn ndcg_at_k(ranked: &[u32], truth: u32, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == truth) {
        Some(pos) => 1.0 / ((pos + 2) as f64).log2(),
        None => 0.0,
    }
}

/// Mean Recall@K / NDCG@K over (ranking, truth) pairs.
pub fn mean_metrics(rankings: &[(Vec<u32>, u32)], k: usize) -> (f64, f64) {
    if rankings.is_empty() {
        return (0.0, 0.0);
    }
    let n = rankings.len() as f64;
    let recall: f64 = rankings.iter().map(|(r, t)| recall_at_k(r, *t, k)).sum();
    let ndcg: f64 = rankings.iter().map(|(r, t)| ndcg_at_k(r, *t, k)).sum();
    (recall / n, ndcg / n)
}
