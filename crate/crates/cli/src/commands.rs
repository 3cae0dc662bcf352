//! The work behind each subcommand, free of argument parsing and
//! manifests so the ablation driver and tests can call it directly.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unter_core::attn::Window;
use unter_core::downstream::{label_inventory, run_seed, EvalResult, Task, TaskDataset, TTest};
use unter_core::kb::{
    build_injection_examples, load_documents, load_kb_with, read_examples, read_facts, write_documents,
    write_examples, BuildConfig, BuildStats,
};
use unter_core::nn::checkpoint::{load_checkpoint, strip_decoder};
use unter_core::nn::{Model, SpanRepMode};
use unter_core::pretrain::{
    pack_documents, pretrain_vocab, run, MetricsRecord, PackStats, TrainConfig, Trainer, METRICS_FILE,
};
use unter_core::text::Vocab;
use unter_core::toy::{generate, ToyConfig, ToyPaths};
use unter_core::{Error, Result};

use crate::config::{BuildSettings, FinetuneSettings, ModelSettings};

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const FREQUENCIES_FILE: &str = "relation_freq.tsv";
pub const STATS_FILE: &str = "stats.json";
pub const BUILD_SETTINGS_FILE: &str = "build.json";
pub const PACK_STATS_FILE: &str = "pack_stats.json";
pub const ENCODER_CHECKPOINT: &str = "encoder";
pub const RESULT_FILE: &str = "result.json";
pub const EVAL_FILE: &str = "eval.json";
pub const ABLATION_TABLE: &str = "ablation.tsv";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.line(), e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn gen_toy(config: &ToyConfig, out: &Path) -> Result<ToyPaths> {
    let world = generate(config)?;
    let paths = world.write(out)?;
    log::info!(
        "toy world: {} entities, {} facts, {} documents, {} sentences",
        world.entities.len(),
        world.facts.len(),
        world.documents.len(),
        world.num_sentences()
    );
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildInputs {
    pub entities: PathBuf,
    pub facts: PathBuf,
    pub relations: Option<PathBuf>,
    pub documents: PathBuf,
    pub heldout_facts: Option<PathBuf>,
}

impl BuildInputs {
    /// The inputs of a world written by [`gen_toy`], held-out facts included.
    pub fn from_toy(paths: &ToyPaths) -> Self {
        BuildInputs {
            entities: paths.entities.clone(),
            facts: paths.facts.clone(),
            relations: Some(paths.relations.clone()),
            documents: paths.documents.clone(),
            heldout_facts: Some(paths.heldout.clone()),
        }
    }
}

/// Writes examples, the relation frequency table, stats and a copy of the
/// documents into `out`, which then serves as the pre-training data dir.
pub fn build_data(inputs: &BuildInputs, settings: &BuildSettings, out: &Path) -> Result<BuildStats> {
    let mut kb = load_kb_with(&inputs.entities, &inputs.facts, settings.page_prefix_len)?;
    if let Some(rel) = &inputs.relations {
        kb.load_relation_surfaces(rel)?;
    }
    let mut docs = load_documents(&inputs.documents)?;
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    let held_out = match &inputs.heldout_facts {
        Some(p) => Some(read_facts(p)?.into_iter().collect::<HashSet<_>>()),
        None => None,
    };
    let config = BuildConfig {
        top_k_relations: settings.top_k_relations,
        held_out,
        num_prompts: settings.num_prompts,
    };
    let built = build_injection_examples(&docs, &kb, &config)?;
    create_dir(out)?;
    write_examples(&out.join(EXAMPLES_FILE), &built.examples)?;
    write_documents(&out.join(DOCUMENTS_FILE), &docs)?;
    let freq = out.join(FREQUENCIES_FILE);
    std::fs::write(&freq, built.frequencies.to_tsv()).map_err(|e| Error::io(&freq, e))?;
    write_json(&out.join(STATS_FILE), &built.stats)?;
    write_json(&out.join(BUILD_SETTINGS_FILE), settings)?;
    log::info!(
        "{} entity-page and {} relational examples; removed {:?}, {} scrubbed",
        built.stats.entity_page_examples,
        built.stats.relational_examples,
        built.stats.removed_relations,
        built.stats.removed_by_scrub
    );
    Ok(built.stats)
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub final_checkpoint: PathBuf,
    pub encoder_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub pack: PackStats,
}

/// Pre-trains from a directory written by [`build_data`]. A fresh run
/// replaces any earlier metrics in `out`; `resume` continues from a
/// checkpoint and appends.
pub fn pretrain(
    data: &Path,
    model: &ModelSettings,
    train: &TrainConfig,
    resume: Option<&Path>,
    out: &Path,
) -> Result<PretrainSummary> {
    let docs = load_documents(&data.join(DOCUMENTS_FILE))?;
    let examples = read_examples(&data.join(EXAMPLES_FILE))?;
    let settings_path = data.join(BUILD_SETTINGS_FILE);
    let build: BuildSettings = if settings_path.exists() {
        read_json(&settings_path)?
    } else {
        BuildSettings::default()
    };
    create_dir(out)?;
    let vocab = match resume {
        Some(dir) => load_checkpoint(dir)?.vocab,
        None => pretrain_vocab(&docs, &examples, 1, build.num_prompts),
    };
    let (packed, pack) = pack_documents(&docs, &examples, &vocab, train)?;
    write_json(&out.join(PACK_STATS_FILE), &pack)?;
    log::info!(
        "{} sequences, {} structured and {} unstructured targets, vocabulary {}",
        pack.sequences,
        pack.structured_targets,
        pack.unstructured_targets,
        vocab.len()
    );
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(train.clone(), dir, &packed)?,
        None => {
            let metrics = out.join(METRICS_FILE);
            if metrics.exists() {
                std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
            }
            let m = Model::new(model.config(&vocab, train.seed))?;
            Trainer::new(train.clone(), m, vocab, &packed)?
        }
    };
    let outcome = run(&mut trainer, out)?;
    let encoder_checkpoint = out.join(ENCODER_CHECKPOINT);
    strip_decoder(&outcome.final_checkpoint, &encoder_checkpoint)?;
    Ok(PretrainSummary {
        final_checkpoint: outcome.final_checkpoint,
        encoder_checkpoint,
        metrics_path: outcome.metrics_path,
        metrics: outcome.metrics,
        pack,
    })
}

/// One fine-tuning run as written to `seed-<seed>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub task: Task,
    pub fraction: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionResult {
    pub fraction: f64,
    pub dir: PathBuf,
    pub result: EvalResult,
}

pub fn fraction_dir(out: &Path, fraction: f64) -> PathBuf {
    out.join(format!("frac-{fraction}"))
}

pub fn seed_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.json"))
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: TaskDataset,
    pub test: TaskDataset,
}

impl TaskData {
    pub fn load(task: Task, train: &Path, test: &Path, no_relation: Option<&str>) -> Result<Self> {
        let mut train = TaskDataset::load(task, train)?;
        let mut test = TaskDataset::load(task, test)?;
        train.no_relation = no_relation.map(str::to_string);
        test.no_relation = train.no_relation.clone();
        Ok(TaskData { train, test })
    }
}

/// Fine-tunes a fresh head per (fraction, seed) and writes per-seed scores
/// plus one `result.json` per fraction.
pub fn finetune(
    checkpoint: &Path,
    data: &TaskData,
    settings: &FinetuneSettings,
    out: &Path,
) -> Result<Vec<FractionResult>> {
    if settings.seeds.is_empty() || settings.fractions.is_empty() {
        return Err(Error::Config("need at least one seed and one fraction".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let encoder = ckpt.model.without_decoder();
    finetune_model(&encoder, &ckpt.vocab, data, settings, out)
}

fn finetune_model(
    encoder: &Model,
    vocab: &Vocab,
    data: &TaskData,
    settings: &FinetuneSettings,
    out: &Path,
) -> Result<Vec<FractionResult>> {
    let task = data.train.task();
    let labels = label_inventory(&[&data.train, &data.test])?;
    let mut results = Vec::new();
    for &fraction in &settings.fractions {
        let dir = fraction_dir(out, fraction);
        create_dir(&dir)?;
        let config = settings.for_run(task, fraction);
        let mut metric = String::new();
        let mut values = Vec::with_capacity(settings.seeds.len());
        for &seed in &settings.seeds {
            let score = run_seed(encoder, vocab, &data.train, &data.test, &labels, fraction, &config, seed)?;
            log::info!("{task} fraction {fraction} seed {seed}: {} {:.4}", score.metric, score.value);
            let record = SeedScore {
                task,
                fraction,
                seed,
                metric: score.metric.clone(),
                value: score.value,
            };
            write_json(&seed_file(&dir, seed), &record)?;
            metric = score.metric;
            values.push(score.value);
        }
        let result = EvalResult::new(metric, settings.seeds.clone(), values);
        write_json(&dir.join(RESULT_FILE), &result)?;
        results.push(FractionResult { fraction, dir, result });
    }
    Ok(results)
}

/// Reads every `seed-*.json` in `dir`, in seed order.
pub fn read_seed_scores(dir: &Path) -> Result<Vec<SeedScore>> {
    let mut scores = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("seed-") && name.ends_with(".json") {
            scores.push(read_json::<SeedScore>(&path)?);
        }
    }
    if scores.is_empty() {
        return Err(Error::Dataset(format!("no seed-*.json files in {}", dir.display())));
    }
    scores.sort_by_key(|s| s.seed);
    Ok(scores)
}

pub fn aggregate(scores: &[SeedScore]) -> Result<EvalResult> {
    let metric = &scores[0].metric;
    if let Some(other) = scores.iter().find(|s| &s.metric != metric) {
        return Err(Error::Dataset(format!("mixed metrics `{metric}` and `{}`", other.metric)));
    }
    Ok(EvalResult::new(
        metric.clone(),
        scores.iter().map(|s| s.seed).collect(),
        scores.iter().map(|s| s.value).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub result: EvalResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<EvalResult>,
    /// `result.mean - baseline.mean`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difference: Option<f64>,
    /// One-sided test that `result` beats `baseline`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_test: Option<TTest>,
}

/// Aggregates per-seed files and, given a baseline directory, tests for
/// improvement over it. Writes `eval.json` into `out`.
pub fn eval(results: &Path, baseline: Option<&Path>, out: &Path) -> Result<EvalReport> {
    let result = aggregate(&read_seed_scores(results)?)?;
    let report = match baseline {
        None => EvalReport {
            result,
            baseline: None,
            difference: None,
            t_test: None,
        },
        Some(dir) => {
            let base = aggregate(&read_seed_scores(dir)?)?;
            if base.metric != result.metric {
                return Err(Error::Dataset(format!(
                    "baseline metric `{}` differs from `{}`",
                    base.metric, result.metric
                )));
            }
            let t = unter_core::downstream::t_test(&base.per_seed, &result.per_seed)?;
            EvalReport {
                difference: Some(result.mean - base.mean),
                result,
                baseline: Some(base),
                t_test: Some(t),
            }
        }
    };
    create_dir(out)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Window,
    DecoderLayers,
    SpanRep,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Window => "window",
            Sweep::DecoderLayers => "decoder_layers",
            Sweep::SpanRep => "span_rep",
        }
    }
}

/// One ablation cell: the base config with a single setting changed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub sweep: Sweep,
    pub window: Window,
    pub decoder_layers: usize,
    pub span_rep: SpanRepMode,
}

impl Cell {
    pub fn setting(&self) -> String {
        match self.sweep {
            Sweep::Window => self.window.to_string(),
            Sweep::DecoderLayers => self.decoder_layers.to_string(),
            Sweep::SpanRep => span_rep_name(self.span_rep).to_string(),
        }
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.sweep.name(), self.setting())
    }
}

pub fn span_rep_name(mode: SpanRepMode) -> &'static str {
    match mode {
        SpanRepMode::Marker => "marker",
        SpanRepMode::TokenConcat => "token_concat",
    }
}

pub const WINDOW_SWEEP: [Window; 4] = [Window::Last(2), Window::Last(4), Window::Last(16), Window::All];
pub const DECODER_LAYER_SWEEP: [usize; 3] = [1, 2, 3];
pub const SPAN_REP_SWEEP: [SpanRepMode; 2] = [SpanRepMode::Marker, SpanRepMode::TokenConcat];

/// Window sweep, then decoder depth, then span representation; every other
/// setting stays at the base value.
pub fn ablation_grid(model: &ModelSettings, train: &TrainConfig) -> Vec<Cell> {
    let base = Cell {
        sweep: Sweep::Window,
        window: train.page_window,
        decoder_layers: model.decoder_layers,
        span_rep: model.span_rep,
    };
    let windows = WINDOW_SWEEP.iter().map(|&window| Cell { window, ..base.clone() });
    let layers = DECODER_LAYER_SWEEP.iter().map(|&decoder_layers| Cell {
        sweep: Sweep::DecoderLayers,
        decoder_layers,
        ..base.clone()
    });
    let reps = SPAN_REP_SWEEP.iter().map(|&span_rep| Cell {
        sweep: Sweep::SpanRep,
        span_rep,
        ..base.clone()
    });
    windows.chain(layers).chain(reps).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: Cell,
    /// Mean total loss over the last ten pre-training steps.
    pub final_loss: f64,
    pub result: EvalResult,
}

pub const ABLATION_HEADER: &str =
    "sweep\tsetting\twindow\tdecoder_layers\tspan_rep\tfinal_loss\tmetric\tmean\tstd\tseeds";

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let std = r.result.std.map(|s| format!("{s:.6}")).unwrap_or_else(|| "NA".into());
        let seeds: Vec<String> = r.result.seeds.iter().map(u64::to_string).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{:.6}\t{}\t{}",
            r.cell.sweep.name(),
            r.cell.setting(),
            r.cell.window,
            r.cell.decoder_layers,
            span_rep_name(r.cell.span_rep),
            r.final_loss,
            r.result.metric,
            r.result.mean,
            std,
            seeds.join(","),
        )
        .expect("writing to a String");
    }
    out
}

/// Pre-trains and fine-tunes every cell of [`ablation_grid`] at a single
/// data fraction, one output directory per cell, and writes the table.
pub fn ablate(
    data: &Path,
    model: &ModelSettings,
    train: &TrainConfig,
    task: &TaskData,
    finetune: &FinetuneSettings,
    fraction: f64,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let finetune = FinetuneSettings {
        fractions: vec![fraction],
        ..finetune.clone()
    };
    let mut rows = Vec::new();
    for cell in ablation_grid(model, train) {
        let cell_dir = out.join("cells").join(cell.dir_name());
        log::info!("ablation cell {}", cell.dir_name());
        let model = ModelSettings {
            decoder_layers: cell.decoder_layers,
            span_rep: cell.span_rep,
            ..model.clone()
        };
        let train = TrainConfig {
            page_window: cell.window,
            ..train.clone()
        };
        let summary = pretrain(data, &model, &train, None, &cell_dir.join("pretrain"))?;
        let tail = &summary.metrics[summary.metrics.len().saturating_sub(10)..];
        let final_loss = tail.iter().map(|m| m.total).sum::<f64>() / tail.len().max(1) as f64;
        let ckpt = load_checkpoint(&summary.encoder_checkpoint)?;
        let results = finetune_model(&ckpt.model, &ckpt.vocab, task, &finetune, &cell_dir.join("finetune"))?;
        rows.push(AblationRow {
            cell,
            final_loss,
            result: results.into_iter().next().expect("one fraction").result,
        });
    }
    create_dir(out)?;
    let table = out.join(ABLATION_TABLE);
    std::fs::write(&table, ablation_tsv(&rows)).map_err(|e| Error::io(&table, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_nine_cells_with_one_setting_changed() {
        let cells = ablation_grid(&ModelSettings::default(), &TrainConfig::default());
        assert_eq!(cells.len(), 4 + 3 + 2);
        let windows: Vec<String> = cells.iter().filter(|c| c.sweep == Sweep::Window).map(Cell::setting).collect();
        assert_eq!(windows, ["2", "4", "16", "all"]);
        for c in &cells {
            let changed = [
                c.window != Window::Last(2),
                c.decoder_layers != 1,
                c.span_rep != SpanRepMode::Marker,
            ];
            assert!(changed.iter().filter(|&&x| x).count() <= 1, "{c:?}");
        }
        let names: HashSet<String> = cells.iter().map(Cell::dir_name).collect();
        assert_eq!(names.len(), 9);
    }

    #[test]
    fn tsv_rows_have_header_width() {
        let cells = ablation_grid(&ModelSettings::default(), &TrainConfig::default());
        let rows: Vec<AblationRow> = cells
            .into_iter()
            .map(|cell| AblationRow {
                cell,
                final_loss: 1.5,
                result: EvalResult::new("accuracy", vec![42], vec![0.5]),
            })
            .collect();
        let tsv = ablation_tsv(&rows);
        let width = ABLATION_HEADER.split('\t').count();
        assert_eq!(tsv.lines().count(), 10);
        assert!(tsv.lines().all(|l| l.split('\t').count() == width));
        assert!(tsv.lines().nth(1).unwrap().contains("\tNA\t"));
    }

    #[test]
    fn aggregate_rejects_mixed_metrics() {
        let s = |seed, metric: &str| SeedScore {
            task: Task::Relc,
            fraction: 1.0,
            seed,
            metric: metric.into(),
            value: 0.5,
        };
        assert!(aggregate(&[s(1, "accuracy"), s(2, "micro_f1")]).is_err());
        assert_eq!(aggregate(&[s(2, "accuracy"), s(1, "accuracy")]).unwrap().mean, 0.5);
    }
}
