//! Experiment configuration: one JSON document covering model, registers,
//! training, data, bench, cost, eval, and analyzer settings, with
//! cross-field validation before any command runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use earn_core::bench::BenchConfig;
use earn_core::costmodel::CostEnv;
use earn_core::model::{ModelConfig, RegisterSpec};
use earn_core::recdata::SynthConfig;
use earn_core::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: SynthConfig,
    /// Interaction log to ingest; defaults to `<out>/dataset.jsonl`.
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    /// Catalog to load; defaults to `<out>/catalog.jsonl`.
    #[serde(default)]
    pub catalog_path: Option<PathBuf>,
    #[serde(default = "default_max_history")]
    pub max_history: usize,
    /// Cap on training examples per run (0 = all).
    #[serde(default)]
    pub train_cap: usize,
    /// Cap on validation examples scored per epoch.
    #[serde(default = "default_valid_cap")]
    pub valid_cap: usize,
    /// Cap on test examples scored by `eval` (0 = all).
    #[serde(default)]
    pub eval_cap: usize,
}

fn default_max_history() -> usize {
    8
}
fn default_valid_cap() -> usize {
    100
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SynthConfig::default(),
            dataset_path: None,
            catalog_path: None,
            max_history: default_max_history(),
            train_cap: 0,
            valid_cap: default_valid_cap(),
            eval_cap: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_ident_len")]
    pub steps: usize,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}

fn default_beam() -> usize {
    20
}
fn default_ident_len() -> usize {
    4
}
fn default_ks() -> Vec<usize> {
    vec![10, 20]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_width: default_beam(),
            steps: default_ident_len(),
            ks: default_ks(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostConfig {
    #[serde(default)]
    pub env: CostEnv,
    #[serde(default = "default_cost_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_ident_len")]
    pub n_generate: usize,
}

fn default_cost_lengths() -> Vec<usize> {
    vec![512]
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            env: CostEnv::default(),
            lengths: default_cost_lengths(),
            n_generate: default_ident_len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnConfig {
    /// Early/latter layer split; defaults to the register layer.
    #[serde(default)]
    pub early_cutoff: Option<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Prompt length for the sampled trace when no dataset is present.
    #[serde(default = "default_attn_len")]
    pub sample_length: usize,
}

fn default_epsilon() -> f64 {
    earn_core::attnstats::DEFAULT_EPSILON
}
fn default_attn_len() -> usize {
    32
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            early_cutoff: None,
            epsilon: default_epsilon(),
            sample_length: default_attn_len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub registers: RegisterSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub attn: AttnConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field validation; every failure names the offending field.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.num_layers == 0 {
            bail!("model.num_layers: must be >= 1");
        }
        if m.num_heads * m.head_dim != m.hidden_dim {
            bail!(
                "model.hidden_dim: must equal num_heads*head_dim = {}",
                m.num_heads * m.head_dim
            );
        }
        if m.num_kv_heads == 0 || m.num_heads % m.num_kv_heads != 0 {
            bail!("model.num_kv_heads: must divide num_heads = {}", m.num_heads);
        }
        if m.head_dim % 2 != 0 {
            bail!("model.head_dim: must be even for rotary encoding");
        }
        if m.vocab_size == 0 {
            bail!("model.vocab_size: must be >= 1");
        }
        let r = &self.registers;
        if r.register_layer == 0 || r.register_layer > m.num_layers {
            bail!(
                "registers.register_layer: must satisfy 1 <= k <= model.num_layers = {}",
                m.num_layers
            );
        }
        let s = &self.data.synthetic;
        if s.n_items < 2 {
            bail!("data.synthetic.n_items: must be >= 2");
        }
        if s.n_clusters == 0 || s.n_clusters > s.n_items {
            bail!("data.synthetic.n_clusters: must be in 1..=n_items");
        }
        if s.seq_len_range.0 == 0 || s.seq_len_range.0 > s.seq_len_range.1 {
            bail!("data.synthetic.seq_len_range: must be a non-empty range with low >= 1");
        }
        if !(0.0..=1.0).contains(&s.within_cluster_prob) {
            bail!("data.synthetic.within_cluster_prob: must lie in [0,1]");
        }
        let ident_vocab =
            earn_core::recdata::build_catalog(s.n_items, s.n_clusters).min_vocab();
        if ident_vocab > m.vocab_size {
            bail!(
                "model.vocab_size: identifier vocabulary needs at least {ident_vocab} tokens"
            );
        }
        let t = &self.train;
        if t.learning_rate <= 0.0 {
            bail!("train.learning_rate: must be > 0");
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) {
            bail!("train.warmup_ratio: must lie in [0,1)");
        }
        if t.effective_batch == 0 {
            bail!("train.effective_batch: must be >= 1");
        }
        let prompt_len = self.data.max_history * earn_core::recdata::IDENT_LEN
            + earn_core::recdata::TASK_TOKENS.len();
        let needed = r.count() + prompt_len + default_ident_len();
        if needed > m.max_positions {
            bail!(
                "model.max_positions: {} positions needed for max_history = {}",
                needed,
                self.data.max_history
            );
        }
        if self.eval.beam_width == 0 {
            bail!("eval.beam_width: must be >= 1");
        }
        if self.eval.ks.iter().any(|&k| k == 0) {
            bail!("eval.ks: entries must be >= 1");
        }
        for &l in &self.bench.lengths {
            if l > m.max_positions {
                bail!("bench.lengths: {} exceeds model.max_positions", l);
            }
            if l < r.count() {
                bail!("bench.lengths: {} shorter than the register count", l);
            }
        }
        if self.bench.repeats == 0 {
            bail!("bench.repeats: must be >= 1");
        }
        if self.cost.env.v_c <= 0.0 || self.cost.env.v_m <= 0.0 {
            bail!("cost.env: v_c and v_m must be > 0");
        }
        if self.attn.epsilon < 0.0 {
            bail!("attn.epsilon: must be >= 0");
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data
            .dataset_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.data
            .catalog_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("catalog.jsonl"))
    }

    /// Apply command-line and environment overrides: `--seed` reseeds every
    /// stage, `EARN_OUT_DIR`/`EARN_WORKERS` override output and parallelism.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        out: Option<PathBuf>,
        workers: Option<usize>,
    ) {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
            self.data.synthetic.seed = s;
            self.bench.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        } else if let Ok(env_out) = std::env::var("EARN_OUT_DIR") {
            self.out_dir = PathBuf::from(env_out);
        }
        if let Some(w) = workers {
            self.bench.workers = w;
        } else if let Ok(env_w) = std::env::var("EARN_WORKERS") {
            if let Ok(w) = env_w.parse() {
                self.bench.workers = w;
            }
        }
    }
}
