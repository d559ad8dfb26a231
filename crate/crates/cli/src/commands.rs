//! Command implementations: each takes a validated configuration, reads or
//! writes files under the output directory, and emits CSV reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use earn_core::attnstats::{summarize, to_csv as attn_csv, AttentionTrace};
use earn_core::bench::{run_bench, to_csv as bench_csv};
use earn_core::costmodel::report_csv;
use earn_core::model::{
    forward_earn, init_weights, AttnCapture, ForwardFlops, ForwardOptions, ModelConfig,
    RegisterSpec, Weights,
};
use earn_core::recdata::{
    chronological_split, generate_synthetic, ingest, mean_metrics, read_catalog, write_catalog,
    write_log, Catalog, RecExample, SplitDataset, TASK_TOKENS,
};
use earn_core::runtime::generate_beam;
use earn_core::trainer::{train, TrainExample, TrainMode};
use earn_core::SequenceLayout;

use crate::checkpoint;
use crate::config::ExperimentConfig;

/// Flatten a history of items into prompt tokens: identifiers in
/// chronological order followed by the task tokens.
pub fn prompt_tokens(catalog: &Catalog, history: &[u32]) -> Result<Vec<u32>> {
    let mut prompt = Vec::with_capacity(history.len() * 4 + TASK_TOKENS.len());
    for item in history {
        let ident = catalog
            .ident(*item)
            .with_context(|| format!("item {item} missing from the catalog"))?;
        prompt.extend_from_slice(ident);
    }
    prompt.extend_from_slice(&TASK_TOKENS);
    Ok(prompt)
}

pub fn to_train_examples(
    spec: &RegisterSpec,
    catalog: &Catalog,
    recs: &[RecExample],
    vocab_size: usize,
) -> Result<Vec<TrainExample>> {
    recs.iter()
        .map(|ex| {
            Ok(TrainExample::from_prompt(
                spec,
                &prompt_tokens(catalog, &ex.history)?,
                catalog
                    .ident(ex.target)
                    .with_context(|| format!("target item {} missing from catalog", ex.target))?
                    .to_vec(),
                vocab_size,
            ))
        })
        .collect()
}

/// Beam-search every example, match outputs against the catalog (unmatched
/// beams are skipped), and return the ranked item lists with their truths.
pub fn rank_examples(
    weights: &Weights,
    config: &ModelConfig,
    spec: &RegisterSpec,
    catalog: &Catalog,
    recs: &[RecExample],
    beam_width: usize,
    steps: usize,
) -> Result<Vec<(Vec<u32>, u32)>> {
    let reverse = catalog.reverse();
    let mut rankings = Vec::with_capacity(recs.len());
    for ex in recs {
        let layout = SequenceLayout::assemble(
            spec,
            &prompt_tokens(catalog, &ex.history)?,
            config.vocab_size,
        );
        let beam = generate_beam(weights, config, spec, layout, beam_width, steps)?;
        let ranked: Vec<u32> = beam
            .items
            .iter()
            .filter_map(|(ident, _)| {
                let key: [u32; 4] = ident.as_slice().try_into().ok()?;
                reverse.get(&key).copied()
            })
            .collect();
        rankings.push((ranked, ex.target));
    }
    Ok(rankings)
}

pub struct Dataset {
    pub catalog: Catalog,
    pub split: SplitDataset,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dataset_path = cfg.dataset_path();
    let catalog_path = cfg.catalog_path();
    if !dataset_path.exists() {
        bail!(
            "dataset {} not found (run gen-data first or set data.dataset_path)",
            dataset_path.display()
        );
    }
    let log = ingest(&dataset_path)?;
    let catalog = read_catalog(
        &catalog_path,
        cfg.data.synthetic.n_clusters,
        2, // digit base floor; identifiers are read verbatim
    )?;
    let split = chronological_split(&log, cfg.data.max_history);
    Ok(Dataset { catalog, split })
}

fn write_out(cfg: &ExperimentConfig, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

/// `gen-data`: write the synthetic interaction log and catalog.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (log, catalog) = generate_synthetic(&cfg.data.synthetic);
    write_log(&log, &cfg.dataset_path())?;
    write_catalog(&catalog, &cfg.catalog_path())?;
    println!(
        "wrote {} interactions to {} and {} identifiers to {}",
        log.records.len(),
        cfg.dataset_path().display(),
        catalog.idents.len(),
        cfg.catalog_path().display()
    );
    Ok(())
}

/// `train`: finetune in the selected mode, write the checkpoint and a
/// per-epoch CSV log (epoch, loss, validation Recall@10).
pub fn cmd_train(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    init_checkpoint: Option<&Path>,
) -> Result<()> {
    let ds = load_dataset(cfg)?;
    if ds.catalog.min_vocab() > cfg.model.vocab_size {
        bail!(
            "model.vocab_size: catalog needs at least {} tokens",
            ds.catalog.min_vocab()
        );
    }
    let mut weights = match init_checkpoint {
        Some(p) => checkpoint::load(p, &cfg.model, &cfg.registers)?,
        None => init_weights(&cfg.model, &cfg.registers, cfg.seed),
    };
    let mut examples =
        to_train_examples(&cfg.registers, &ds.catalog, &ds.split.train, cfg.model.vocab_size)?;
    if cfg.data.train_cap > 0 {
        examples.truncate(cfg.data.train_cap);
    }

    let valid: Vec<RecExample> = ds
        .split
        .valid
        .iter()
        .take(if cfg.data.valid_cap == 0 {
            usize::MAX
        } else {
            cfg.data.valid_cap
        })
        .cloned()
        .collect();
    let eval_spec = match mode {
        TrainMode::Vanilla => cfg.registers.without_pruning(cfg.model.num_layers),
        TrainMode::Earn | TrainMode::EarnNoRt => cfg.registers,
    };
    let (model, catalog, eval_cfg) = (cfg.model, ds.catalog.clone(), cfg.eval.clone());
    let mut valid_metric = move |w: &Weights| -> f64 {
        if valid.is_empty() {
            return 0.0;
        }
        match rank_examples(w, &model, &eval_spec, &catalog, &valid, eval_cfg.beam_width, eval_cfg.steps)
        {
            Ok(rankings) => mean_metrics(&rankings, 10).0,
            Err(_) => f64::NAN,
        }
    };

    let mut tcfg = cfg.train.clone();
    tcfg.mode = mode;
    let logs = train(
        &mut weights,
        &cfg.model,
        &cfg.registers,
        &examples,
        &tcfg,
        Some(&mut valid_metric),
    )?;

    let ckpt_path = cfg.out_dir.join("checkpoint.earn");
    std::fs::create_dir_all(&cfg.out_dir)?;
    checkpoint::save(&weights, &ckpt_path)?;
    let mut csv = String::from("epoch,loss,valid_recall10\n");
    for l in &logs {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            l.epoch,
            l.mean_loss,
            l.valid_recall10.unwrap_or(f64::NAN)
        ));
    }
    let log_path = write_out(cfg, "train_log.csv", &csv)?;
    println!(
        "wrote {} and {} ({} epochs)",
        ckpt_path.display(),
        log_path.display(),
        logs.len()
    );
    Ok(())
}

/// `eval`: beam-search the test split and report Recall/NDCG at each K.
pub fn cmd_eval(cfg: &ExperimentConfig, mode: TrainMode, ckpt: &Path) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let weights = checkpoint::load(ckpt, &cfg.model, &cfg.registers)?;
    let spec = match mode {
        TrainMode::Vanilla => cfg.registers.without_pruning(cfg.model.num_layers),
        TrainMode::Earn | TrainMode::EarnNoRt => cfg.registers,
    };
    let recs: Vec<RecExample> = ds
        .split
        .test
        .iter()
        .take(if cfg.data.eval_cap == 0 {
            usize::MAX
        } else {
            cfg.data.eval_cap
        })
        .cloned()
        .collect();
    if recs.is_empty() {
        bail!("test split is empty");
    }
    let rankings = rank_examples(
        &weights,
        &cfg.model,
        &spec,
        &ds.catalog,
        &recs,
        cfg.eval.beam_width,
        cfg.eval.steps,
    )?;
    let method = match mode {
        TrainMode::Vanilla => "vanilla",
        TrainMode::Earn => "earn",
        TrainMode::EarnNoRt => "earn-no-rt",
    };
    let mut csv = String::from("method,K,recall,ndcg\n");
    for &k in &cfg.eval.ks {
        let (recall, ndcg) = mean_metrics(&rankings, k);
        csv.push_str(&format!("{method},{k},{recall:.6},{ndcg:.6}\n"));
    }
    let path = write_out(cfg, "metrics.csv", &csv)?;
    println!("wrote {} over {} examples", path.display(), rankings.len());
    Ok(())
}

/// `bench`: efficiency sweep; untrained weights are used when no
/// checkpoint is supplied (timing does not depend on the values).
pub fn cmd_bench(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<()> {
    let weights = match ckpt {
        Some(p) => checkpoint::load(p, &cfg.model, &cfg.registers)?,
        None => init_weights(&cfg.model, &cfg.registers, cfg.seed),
    };
    let rows = run_bench(&weights, &cfg.model, &cfg.registers, &cfg.bench)?;
    let path = write_out(cfg, "bench.csv", &bench_csv(&rows))?;
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

/// `cost-model`: analytic FLOPs/cache/time table.
pub fn cmd_cost(cfg: &ExperimentConfig) -> Result<()> {
    let csv = report_csv(
        &cfg.cost.env,
        &cfg.model,
        &cfg.registers,
        &cfg.cost.lengths,
        cfg.cost.n_generate,
    );
    let path = write_out(cfg, "cost.csv", &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// `analyze-attn`: capture the final prefill query row's attention per
/// layer/head and report sparsity and sink metrics.
pub fn cmd_attn(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<()> {
    let weights = match ckpt {
        Some(p) => checkpoint::load(p, &cfg.model, &cfg.registers)?,
        None => init_weights(&cfg.model, &cfg.registers, cfg.seed),
    };
    // trace prompt: first test example when a dataset exists, otherwise a
    // deterministic token ramp
    let prompt: Vec<u32> = match load_dataset(cfg) {
        Ok(ds) if !ds.split.test.is_empty() => {
            prompt_tokens(&ds.catalog, &ds.split.test[0].history)?
        }
        _ => (0..cfg.attn.sample_length)
            .map(|i| (i % cfg.model.vocab_size) as u32)
            .collect(),
    };
    let layout = SequenceLayout::assemble(&cfg.registers, &prompt, cfg.model.vocab_size);
    let opts = ForwardOptions {
        attn_capture: AttnCapture::LastRow,
        ..Default::default()
    };
    // distributions are measured on the unpruned forward: the analysis
    // characterizes where attention mass sits before any pruning
    let unpruned = cfg.registers.without_pruning(cfg.model.num_layers);
    let out = forward_earn(
        &weights,
        &cfg.model,
        &unpruned,
        &layout,
        &opts,
        &ForwardFlops::new(),
    )?;
    let trace = AttentionTrace {
        layers: out.attn_last_row,
    };
    let cutoff = cfg.attn.early_cutoff.unwrap_or(cfg.registers.register_layer);
    let stats = summarize(&trace, cutoff, cfg.attn.epsilon)?;
    let path = write_out(cfg, "attn.csv", &attn_csv(&stats))?;
    println!("wrote {}", path.display());
    Ok(())
}
