//! Command-line surface for the pipeline: toy data generation, example
//! building, pre-training, fine-tuning, evaluation and the ablation grid.
//! Every invocation writes one [`RunManifest`] into its output directory.

pub mod commands;
pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use unter_core::attn::Window;
use unter_core::downstream::Task;
use unter_core::nn::SpanRepMode;
use unter_core::pretrain::Variant;
use unter_core::toy::ToyPaths;
use unter_core::Error;

pub use commands::*;
pub use config::{BuildSettings, FileConfig, FinetuneSettings, ModelSettings};
pub use manifest::{hash_path, RunManifest};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

#[derive(Debug, Parser)]
#[command(name = "unter", version, about = "Span-level knowledge injection pipeline")]
pub struct Cli {
    /// JSON config file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for generation and pre-training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic world: KB, documents and task splits.
    GenToy(GenToyArgs),
    /// Align facts and pages with anchors and write injection examples.
    BuildData(BuildDataArgs),
    /// Pre-train an encoder and shared decoder.
    Pretrain(PretrainArgs),
    /// Fine-tune on a downstream task over fractions and seeds.
    Finetune(FinetuneArgs),
    /// Aggregate per-seed scores, optionally against a baseline.
    Eval(EvalArgs),
    /// Sweep decoder window, decoder depth and span representation.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenToy(_) => "gen-toy",
            Command::BuildData(_) => "build-data",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub num_docs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildDataArgs {
    /// Directory from `gen-toy`; supplies every input path not given
    /// explicitly, held-out facts included.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub entities: Option<PathBuf>,
    #[arg(long)]
    pub facts: Option<PathBuf>,
    /// TSV of `relation<TAB>surface words`.
    #[arg(long)]
    pub relations: Option<PathBuf>,
    #[arg(long)]
    pub documents: Option<PathBuf>,
    /// Facts whose sentences are removed from the examples.
    #[arg(long)]
    pub heldout_facts: Option<PathBuf>,
    #[arg(long)]
    pub top_k_relations: Option<usize>,
    #[arg(long)]
    pub page_prefix_len: Option<usize>,
    #[arg(long)]
    pub num_prompts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Decoder window for entity pages: a count or `all`.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<Window>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// `marker` or `token_concat`.
    #[arg(long, value_parser = parse_span_rep)]
    pub span_rep: Option<SpanRepMode>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Directory written by `build-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// mlm-only, e, r or e+r.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long)]
    pub task: Task,
    /// Directory from `gen-toy`; supplies the task's train and test splits.
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Relation label excluded from scoring (F1 instead of accuracy).
    #[arg(long)]
    pub no_relation: Option<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneOptions {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub ft_epochs: Option<usize>,
    #[arg(long)]
    pub ft_lr: Option<f64>,
    #[arg(long)]
    pub ft_batch_size: Option<usize>,
    /// Keep the base epoch count for 1% and 10% subsamples.
    #[arg(long)]
    pub no_scale: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Comma-separated training-data fractions.
    #[arg(long, alias = "fraction", value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[command(flatten)]
    pub options: FinetuneOptions,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `seed-*.json` files.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory of baseline `seed-*.json` files for a one-sided t-test.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub options: FinetuneOptions,
}

fn parse_window(s: &str) -> Result<Window, String> {
    Window::parse(s).map_err(|e| e.to_string())
}

fn parse_span_rep(s: &str) -> Result<SpanRepMode, String> {
    match s {
        "marker" => Ok(SpanRepMode::Marker),
        "token_concat" | "token-concat" => Ok(SpanRepMode::TokenConcat),
        _ => Err(format!("unknown span representation `{s}` (marker, token_concat)")),
    }
}

fn snapshot<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl ModelArgs {
    fn apply(&self, cfg: &mut FileConfig) {
        set(&mut cfg.train.page_window, self.window);
        set(&mut cfg.model.decoder_layers, self.decoder_layers);
        set(&mut cfg.model.span_rep, self.span_rep);
        set(&mut cfg.train.total_steps, self.steps);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.peak_lr, self.lr);
        set(&mut cfg.train.warmup_fraction, self.warmup_fraction);
    }
}

impl FinetuneOptions {
    fn apply(&self, s: &mut FinetuneSettings) {
        set(&mut s.seeds, self.seeds.clone());
        if self.ft_epochs.is_some() {
            s.epochs = self.ft_epochs;
        }
        if self.ft_lr.is_some() {
            s.lr = self.ft_lr;
        }
        if self.ft_batch_size.is_some() {
            s.batch_size = self.ft_batch_size;
        }
        if self.no_scale {
            s.scale_low_resource = false;
        }
    }
}

impl TaskArgs {
    fn resolve(&self, settings: &mut FinetuneSettings) -> Result<(PathBuf, PathBuf), Error> {
        if self.no_relation.is_some() {
            settings.no_relation = self.no_relation.clone();
        }
        let toy = self.world.as_deref().map(ToyPaths::in_dir);
        let pick = |flag: &Option<PathBuf>, split: &str| {
            flag.clone()
                .or_else(|| toy.as_ref().map(|p| p.task_split(self.task.name(), split)))
                .ok_or_else(|| Error::Config(format!("--{split} (or --world) is required")))
        };
        Ok((pick(&self.train, "train")?, pick(&self.test, "test")?))
    }

    fn load(&self, settings: &mut FinetuneSettings) -> Result<(TaskData, PathBuf, PathBuf), Error> {
        let (train, test) = self.resolve(settings)?;
        let data = TaskData::load(self.task, &train, &test, settings.no_relation.as_deref())?;
        Ok((data, train, test))
    }
}

fn hashes(inputs: &[(&str, &Path)]) -> Result<BTreeMap<String, String>, Error> {
    inputs
        .iter()
        .map(|(label, path)| Ok((label.to_string(), hash_path(path)?)))
        .collect()
}

/// Runs one command and writes its manifest.
pub fn run(cli: &Cli) -> Result<RunManifest, Error> {
    let started_unix = manifest::unix_now();
    let mut cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let out = cli.out.as_path();
    let mut inputs: Vec<(&str, PathBuf)> = Vec::new();
    if let Some(path) = &cli.config {
        inputs.push(("config", path.clone()));
    }
    let (config, outputs): (serde_json::Value, Vec<PathBuf>) = match &cli.command {
        Command::GenToy(args) => {
            set(&mut cfg.toy.seed, cli.seed);
            set(&mut cfg.toy.num_docs, args.num_docs);
            let paths = gen_toy(&cfg.toy, out)?;
            let outputs = vec![
                paths.entities,
                paths.facts,
                paths.relations,
                paths.heldout,
                paths.documents,
                paths.tasks,
            ];
            (snapshot(&cfg.toy), outputs)
        }
        Command::BuildData(args) => {
            set(&mut cfg.build.top_k_relations, args.top_k_relations);
            set(&mut cfg.build.page_prefix_len, args.page_prefix_len);
            set(&mut cfg.build.num_prompts, args.num_prompts);
            let toy = args.world.as_deref().map(ToyPaths::in_dir);
            let from_toy = toy.as_ref().map(BuildInputs::from_toy);
            let need = |flag: &Option<PathBuf>, name: &str, default: Option<&PathBuf>| {
                flag.clone()
                    .or_else(|| default.cloned())
                    .ok_or_else(|| Error::Config(format!("--{name} (or --world) is required")))
            };
            let build = BuildInputs {
                entities: need(&args.entities, "entities", from_toy.as_ref().map(|b| &b.entities))?,
                facts: need(&args.facts, "facts", from_toy.as_ref().map(|b| &b.facts))?,
                documents: need(&args.documents, "documents", from_toy.as_ref().map(|b| &b.documents))?,
                relations: args
                    .relations
                    .clone()
                    .or_else(|| from_toy.as_ref().and_then(|b| b.relations.clone())),
                heldout_facts: args
                    .heldout_facts
                    .clone()
                    .or_else(|| from_toy.as_ref().and_then(|b| b.heldout_facts.clone())),
            };
            inputs.push(("entities", build.entities.clone()));
            inputs.push(("facts", build.facts.clone()));
            inputs.push(("documents", build.documents.clone()));
            if let Some(p) = &build.relations {
                inputs.push(("relations", p.clone()));
            }
            if let Some(p) = &build.heldout_facts {
                inputs.push(("heldout_facts", p.clone()));
            }
            build_data(&build, &cfg.build, out)?;
            let outputs = [EXAMPLES_FILE, DOCUMENTS_FILE, FREQUENCIES_FILE, STATS_FILE, BUILD_SETTINGS_FILE]
                .iter()
                .map(|f| out.join(f))
                .collect();
            (serde_json::json!({ "build": cfg.build, "inputs": build }), outputs)
        }
        Command::Pretrain(args) => {
            set(&mut cfg.train.seed, cli.seed);
            set(&mut cfg.train.variant, args.variant);
            set(&mut cfg.train.checkpoint_every, args.checkpoint_every);
            args.model.apply(&mut cfg);
            inputs.push(("data", args.data.clone()));
            if let Some(r) = &args.resume {
                inputs.push(("resume", r.clone()));
            }
            let summary = pretrain(&args.data, &cfg.model, &cfg.train, args.resume.as_deref(), out)?;
            let outputs = vec![
                summary.final_checkpoint,
                summary.encoder_checkpoint,
                summary.metrics_path,
                out.join(PACK_STATS_FILE),
            ];
            (serde_json::json!({ "model": cfg.model, "train": cfg.train }), outputs)
        }
        Command::Finetune(args) => {
            args.options.apply(&mut cfg.finetune);
            set(&mut cfg.finetune.fractions, args.fractions.clone());
            let (data, train, test) = args.task.load(&mut cfg.finetune)?;
            inputs.push(("checkpoint", args.checkpoint.clone()));
            inputs.push(("train", train));
            inputs.push(("test", test));
            let results = finetune(&args.checkpoint, &data, &cfg.finetune, out)?;
            let outputs = results.into_iter().map(|r| r.dir).collect();
            (
                serde_json::json!({ "task": args.task.task, "finetune": cfg.finetune }),
                outputs,
            )
        }
        Command::Eval(args) => {
            inputs.push(("results", args.results.clone()));
            if let Some(b) = &args.baseline {
                inputs.push(("baseline", b.clone()));
            }
            eval(&args.results, args.baseline.as_deref(), out)?;
            (serde_json::json!({}), vec![out.join(EVAL_FILE)])
        }
        Command::Ablate(args) => {
            set(&mut cfg.train.seed, cli.seed);
            set(&mut cfg.train.variant, args.variant);
            args.model.apply(&mut cfg);
            args.options.apply(&mut cfg.finetune);
            let (data, train, test) = args.task.load(&mut cfg.finetune)?;
            inputs.push(("data", args.data.clone()));
            inputs.push(("train", train));
            inputs.push(("test", test));
            ablate(&args.data, &cfg.model, &cfg.train, &data, &cfg.finetune, args.fraction, out)?;
            (
                serde_json::json!({
                    "model": cfg.model,
                    "train": cfg.train,
                    "task": args.task.task,
                    "fraction": args.fraction,
                    "finetune": cfg.finetune,
                }),
                vec![out.join(ABLATION_TABLE), out.join("cells")],
            )
        }
    };
    let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(l, p)| (*l, p.as_path())).collect();
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config,
        inputs: hashes(&inputs)?,
        started_unix,
        finished_unix: manifest::unix_now(),
        outputs,
    };
    manifest.write(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_definitions_are_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn ablate_keeps_pretrain_and_finetune_rates_apart() {
        let cli = parse(&["ablate", "--data", "d", "--task", "relc", "--world", "w", "--lr", "0.5", "--ft-lr", "0.25"]);
        let Command::Ablate(args) = cli.command else { panic!("not ablate") };
        assert_eq!(args.model.lr, Some(0.5));
        assert_eq!(args.options.ft_lr, Some(0.25));
    }

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("unter").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn default_seeds_and_fractions() {
        let cli = parse(&["finetune", "--checkpoint", "c", "--task", "relc"]);
        let Command::Finetune(args) = cli.command else { panic!() };
        let mut s = FinetuneSettings::default();
        args.options.apply(&mut s);
        assert_eq!(s.seeds, [42, 43, 44, 45, 46]);
        assert_eq!(s.fractions, [0.01, 0.1, 1.0]);
    }

    #[test]
    fn flags_override_file_values() {
        let cli = parse(&["pretrain", "--data", "d", "--steps", "7", "--window", "all", "--variant", "mlm-only"]);
        let Command::Pretrain(args) = cli.command else { panic!() };
        let mut cfg: FileConfig =
            serde_json::from_str(r#"{"train": {"total_steps": 5, "batch_size": 3}}"#).unwrap();
        args.model.apply(&mut cfg);
        assert_eq!(cfg.train.total_steps, 7);
        assert_eq!(cfg.train.batch_size, 3);
        assert_eq!(cfg.train.page_window, Window::All);
        assert_eq!(args.variant, Some(Variant::MlmOnly));
    }

    #[test]
    fn bad_window_is_a_usage_error() {
        let err = Cli::try_parse_from(["unter", "pretrain", "--data", "d", "--window", "0"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let cli = parse(&["gen-toy", "--seed", "9", "--out", "w"]);
        assert_eq!(cli.seed, Some(9));
        assert_eq!(cli.out, PathBuf::from("w"));
    }
}
