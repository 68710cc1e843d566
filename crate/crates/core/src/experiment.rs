//! End-to-end runs: one seed, a multi-seed experiment, and rank sweeps.
//!
//! Every random draw of a run comes from the run seed through fixed stream
//! ids (see [`RunStreams`]), so a run is a pure function of its config and
//! seed. Seeds and sweep cells are independent and may run on parallel
//! threads without affecting any output byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::adapter::{param_count, AdapterVariant};
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::merged_qkv::param_count_merged;
use crate::model::{Model, Site, Weight};
use crate::report::{aggregate, render_jsonl, render_table, AggregateRow};
use crate::tasks::{evaluate, gen_splits, Metrics, Splits, TaskKind};
use crate::train::{train_loop, RunStreams, TraceRecord, TrainReport};

const EVAL_BATCH: usize = 128;

/// Base model for `seed`, with adapters attached when the config has them.
pub fn prepare_model(config: &ExperimentConfig, seed: u64) -> Result<Model> {
    let mut model = Model::build(&config.model, &mut Rng::stream(seed, RunStreams::INIT))?;
    model.trainability = config.trainability.clone();
    if let Some(ad) = &config.adapter {
        let mut rng = Rng::stream(seed, RunStreams::ADAPTER_INIT);
        model.attach_adapters(&ad.placement(), &ad.adapter_config(), &mut rng)?;
    }
    Ok(model)
}

pub fn task_splits(config: &ExperimentConfig, seed: u64) -> Result<Splits> {
    gen_splits(&config.task, config.model.vocab_size, &mut Rng::stream(seed, RunStreams::DATA))
}

/// Adapter parameter count predicted from the per-site formulas.
pub fn expected_adapter_params(config: &ExperimentConfig) -> Result<usize> {
    let Some(ad) = &config.adapter else { return Ok(0) };
    let skeleton = Model::skeleton(&config.model)?;
    let cfg = ad.adapter_config();
    let mut total = 0;
    for (w, channels) in ad.placement().resolve(&config.model)? {
        let (d, k) = skeleton
            .tensor(&Site::new(0, w).layer_id())
            .ok_or_else(|| Error::Config(format!("model has no {}", w.name())))?
            .shape();
        total += if w == Weight::Qkv {
            param_count_merged(&cfg, d / 3, k, if channels.is_empty() { 3 } else { channels.len() })
        } else {
            param_count(&cfg, d, k)
        };
    }
    Ok(total * config.model.n_blocks)
}

pub fn adapter_params(model: &Model) -> usize {
    model.adapters().values().map(|a| a.stored_entries()).sum()
}

pub struct SeedOutcome {
    pub seed: u64,
    pub model: Model,
    pub report: TrainReport,
    pub test: Metrics,
}

/// Trains one seed. `on_record` sees every trace record as it is produced.
pub fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    on_record: impl FnMut(&TraceRecord) -> Result<()>,
) -> Result<SeedOutcome> {
    config.validate()?;
    let splits = task_splits(config, seed)?;
    let mut model = prepare_model(config, seed)?;
    let mut streams = RunStreams::new(seed);
    let report = train_loop(
        &mut model,
        &splits.train,
        &splits.val,
        &config.train,
        config.primary_metric,
        &mut streams,
        on_record,
    )?;
    let test = evaluate(&model, &splits.test, EVAL_BATCH)?;
    Ok(SeedOutcome {
        seed,
        model,
        report,
        test,
    })
}

/// Maps `f` over `items` on up to `threads` worker threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Worker count from `MTADAPT_THREADS`, defaulting to available cores.
pub fn threads_from_env() -> usize {
    std::env::var("MTADAPT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn method_label(config: &ExperimentConfig) -> String {
    match &config.adapter {
        Some(ad) => ad.variant.name().to_string(),
        None if config.trainability.frozen_base => "frozen".to_string(),
        None => "full".to_string(),
    }
}

fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for rec in trace {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::Input(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub struct ExperimentOutcome {
    pub row: AggregateRow,
    pub per_seed: Vec<(u64, Metrics)>,
    pub out_dir: PathBuf,
}

fn row_from(config: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Result<AggregateRow> {
    let mccs: Vec<f64> = outcomes.iter().map(|o| o.test.mcc).collect();
    let accs: Vec<f64> = outcomes.iter().map(|o| o.test.accuracy).collect();
    let model = &outcomes[0].model;
    Ok(AggregateRow {
        method: method_label(config),
        rank: config.adapter.as_ref().map(|a| a.rank),
        stat: config.report,
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        trainable_params: model.trainable_params(),
        total_params: model.total_params(),
        mcc: aggregate(&mccs)?,
        accuracy: aggregate(&accs)?,
        error: None,
    })
}

/// Trains every seed in the config and writes, under `out_dir`:
///
/// * `config.toml` — canonical config
/// * `seed-{s}/model.mtad`, `seed-{s}/trace.jsonl`, `seed-{s}/test.json`
/// * `report.tsv`, `report.jsonl` — one aggregate row
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<ExperimentOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), config.canonical()?)?;
    let results = parallel_map(&config.seeds, threads, |&seed| run_seed(config, seed, |_| Ok(())));
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        outcomes.push(r?);
    }
    for o in &outcomes {
        let dir = out_dir.join(format!("seed-{}", o.seed));
        fs::create_dir_all(&dir)?;
        let meta = CheckpointMeta::describe(&o.model, o.seed, Some(config));
        checkpoint::save(&dir.join("model.mtad"), &o.model, &meta)?;
        write_trace(&dir.join("trace.jsonl"), &o.report.trace)?;
        let test = serde_json::to_string(&o.test).map_err(|e| Error::Input(e.to_string()))?;
        fs::write(dir.join("test.json"), test + "\n")?;
    }
    let row = row_from(config, &outcomes)?;
    let rows = std::slice::from_ref(&row);
    fs::write(out_dir.join("report.tsv"), render_table(rows))?;
    fs::write(out_dir.join("report.jsonl"), render_jsonl(rows)?)?;
    Ok(ExperimentOutcome {
        per_seed: outcomes.iter().map(|o| (o.seed, o.test)).collect(),
        row,
        out_dir: out_dir.to_path_buf(),
    })
}

/// One cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub variant: AdapterVariant,
    pub rank: usize,
    pub adapter_params: usize,
    pub expected_params: usize,
    pub row: AggregateRow,
}

impl SweepCell {
    pub fn failed(&self) -> bool {
        self.row.error.is_some()
    }
}

fn failed_row(config: &ExperimentConfig, msg: String) -> AggregateRow {
    let zero = crate::report::Aggregate {
        n: 0,
        median: 0.0,
        mean: 0.0,
        std: 0.0,
    };
    AggregateRow {
        method: method_label(config),
        rank: config.adapter.as_ref().map(|a| a.rank),
        stat: config.report,
        seeds: config.seeds.clone(),
        trainable_params: 0,
        total_params: 0,
        mcc: zero,
        accuracy: zero,
        error: Some(msg.replace(['\t', '\n'], " ")),
    }
}

fn sweep_cell(base: &ExperimentConfig, variant: AdapterVariant, rank: usize) -> SweepCell {
    let mut config = base.clone();
    let section = config
        .adapter
        .as_mut()
        .expect("sweep configs carry an adapter section");
    section.variant = variant;
    section.rank = rank;
    let counts = config
        .validate()
        .and_then(|_| Ok((adapter_params(&prepare_model(&config, config.seeds[0])?), expected_adapter_params(&config)?)));
    let (adapter_params, expected_params) = match counts {
        Ok(c) => c,
        Err(e) => {
            return SweepCell {
                variant,
                rank,
                adapter_params: 0,
                expected_params: 0,
                row: failed_row(&config, e.to_string()),
            }
        }
    };
    let outcomes: Result<Vec<SeedOutcome>> = config
        .seeds
        .iter()
        .map(|&s| run_seed(&config, s, |_| Ok(())))
        .collect();
    let row = outcomes
        .and_then(|o| row_from(&config, &o))
        .unwrap_or_else(|e| failed_row(&config, e.to_string()));
    SweepCell {
        variant,
        rank,
        adapter_params,
        expected_params,
        row,
    }
}

/// Runs every (variant, rank) cell. A failing cell is recorded with its
/// error and the sweep continues. Writes `sweep.tsv` and `sweep.jsonl`
/// under `out_dir` when given.
pub fn run_sweep(
    base: &ExperimentConfig,
    variants: &[AdapterVariant],
    ranks: &[usize],
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<Vec<SweepCell>> {
    if base.adapter.is_none() {
        return Err(Error::Config("a sweep needs an [adapter] section".into()));
    }
    if variants.is_empty() || ranks.is_empty() {
        return Err(Error::Config("a sweep needs at least one variant and one rank".into()));
    }
    let grid: Vec<(AdapterVariant, usize)> = variants
        .iter()
        .flat_map(|&v| ranks.iter().map(move |&r| (v, r)))
        .collect();
    let cells = parallel_map(&grid, threads, |&(v, r)| sweep_cell(base, v, r));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let rows: Vec<AggregateRow> = cells.iter().map(|c| c.row.clone()).collect();
        fs::write(dir.join("sweep.tsv"), render_table(&rows))?;
        fs::write(dir.join("sweep.jsonl"), render_jsonl(&rows)?)?;
    }
    Ok(cells)
}

/// Evaluates a checkpoint on the test split its own config and seed
/// produce. `task` switches the task kind, keeping the other task settings.
pub fn eval_checkpoint(path: &Path, task: Option<TaskKind>) -> Result<Metrics> {
    let (model, meta) = checkpoint::load(path)?;
    let mut config = meta
        .experiment
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no experiment config to rebuild the task".into()))?;
    if let Some(kind) = task {
        config.task.kind = kind;
        config.validate()?;
    }
    let splits = task_splits(&config, meta.seed)?;
    evaluate(&model, &splits.test, EVAL_BATCH)
}

/// Folds the adapters of `input` into the base weights and writes a plain
/// checkpoint whose tensors are exactly the base tensors.
pub fn merge_checkpoint(input: &Path, output: &Path) -> Result<Model> {
    let (mut model, meta) = checkpoint::load(input)?;
    if meta.merged {
        return Err(Error::State("checkpoint is already merged".into()));
    }
    if model.adapters().is_empty() {
        return Err(Error::State("checkpoint has no adapters to merge".into()));
    }
    model.fold_adapters()?;
    let mut out_meta = CheckpointMeta::describe(&model, meta.seed, meta.experiment.as_ref());
    out_meta.merged = true;
    checkpoint::save(output, &model, &out_meta)?;
    Ok(model)
}
