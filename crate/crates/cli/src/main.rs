use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mwe_core::encoder::Encoder;
use mwe_core::eval::{evaluate, rarity_stats, EvalReport};
use mwe_core::extraction::{
    apply_curation, emit_annotation_template, extract_contexts, gold_sample, retain_matchable, sample_contexts,
    ContextSet,
};
use mwe_core::injection::{inject_embeddings, injected_view};
use mwe_core::mimic::{infer_embedding, CreatedFrom, EmbeddingBundle, MimicModel};
use mwe_core::pipeline::{
    evaluate_checkpoint, run_pipeline_with_manifest, sweep_contexts, sweep_epochs, train_mimic_model,
    PipelineConfig, Setting, CACHE_DIR_ENV,
};
use mwe_core::sts::{load_sts_tsv, predict_scores, train_sts, Regime, ScoreScale, TrainConfig};
use mwe_core::synth::{SynthConfig, SynthHarness, ToyRun};
use mwe_core::MweRegistry;

#[derive(Parser)]
#[command(name = "mwe", version, about = "Single-token idiom embeddings for sentence similarity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract up to max-matches context lines per registered expression.
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 250)]
        max_matches: usize,
    },
    /// Seeded subsample of a context set.
    Sample {
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop lines where the expression is not word-bounded first.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an annotation template for manual review.
    Annotate {
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply reviewed labels and optionally draw a gold sample.
    Curate {
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, num_args = 0..=1, default_missing_value = "10")]
        gold: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a mimicking model on frequent corpus words.
    MimicTrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer one embedding per expression from `<token_name>.jsonl` files.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        contexts_dir: PathBuf,
        #[arg(long)]
        gold: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append a bundle's vectors to an encoder's vocabulary.
    Inject {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the siamese similarity model.
    Train {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_parser = parse_setting)]
        setting: Setting,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spearman correlations over all pairs and each subset.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a table row with this setting label instead of JSON.
        #[arg(long)]
        table: Option<String>,
    },
    /// Per-idiom correlations on the idiom subset.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 5)]
        min_occurrences: usize,
    },
    /// Run the full pipeline.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = parse_setting, default_value = "pretrain")]
        setting: Setting,
    },
    /// Pipeline runs over several context counts.
    SweepContexts {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
    },
    /// Pipeline runs over several epoch counts.
    SweepEpochs {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = parse_setting)]
        setting: Setting,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
    },
    /// Corpus frequency of each expression relative to its words.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Generate the synthetic harness and a pipeline config for it.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    contexts_per_idiom: Option<usize>,
    #[arg(long)]
    max_matches: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    parallel_inference: bool,
    #[arg(long, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::load(&self.config)?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.contexts_per_idiom {
            c.contexts_per_idiom = v;
        }
        if let Some(v) = self.max_matches {
            c.max_matches = v;
        }
        if let Some(v) = self.pretrain_epochs {
            c.pretrain_epochs = Some(v);
        }
        if let Some(v) = self.finetune_epochs {
            c.finetune_epochs = v;
        }
        if self.parallel_inference {
            c.parallel_inference = true;
        }
        if let Some(v) = &self.cache_dir {
            c.cache_dir = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(Encoder, MweRegistry, Vec<mwe_core::sts::StsPair>)> {
        let encoder = Encoder::load(&self.encoder)?;
        let registry = injected_registry(&self.registry, &encoder)?;
        let pairs = load_sts_tsv(&self.pairs, ScoreScale::Auto)?;
        Ok((encoder, registry, pairs))
    }
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: mwe_core::Error| e.to_string())
}

fn injected_registry(path: &Path, encoder: &Encoder) -> Result<MweRegistry> {
    let registry = MweRegistry::load(path)?;
    let view = injected_view(&registry, &encoder.tokenizer)?;
    if view.len() < registry.len() {
        log::warn!(
            "{} of {} expressions are not in the encoder vocabulary",
            registry.len() - view.len(),
            registry.len()
        );
    }
    Ok(view)
}

fn context_file(dir: &Path, token_name: &str) -> PathBuf {
    dir.join(format!("{token_name}.jsonl"))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_series(points: &BTreeMap<usize, EvalReport>, label: &str) {
    println!("{}", EvalReport::TABLE_HEADER);
    for (x, r) in points {
        println!("{}", r.table_row(&format!("{label}={x}")));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mine {
            corpus,
            registry,
            out_dir,
            max_matches,
        } => {
            let registry = MweRegistry::load(&registry)?;
            fs::create_dir_all(&out_dir)?;
            for entry in registry.entries() {
                let set = extract_contexts(&corpus, entry, max_matches).map_err(|e| e.in_stage("mine"))?;
                set.save(&context_file(&out_dir, &entry.token_name))?;
                println!("{}\t{}", entry.token_name, set.len());
            }
        }
        Command::Sample {
            contexts,
            k,
            seed,
            registry,
            out,
        } => {
            let mut set = ContextSet::load(&contexts)?;
            if let Some(r) = registry {
                let registry = MweRegistry::load(&r)?;
                let entry = registry
                    .get(&set.mwe_token_name)
                    .with_context(|| format!("{} is not registered", set.mwe_token_name))?;
                set = retain_matchable(&set, entry);
            }
            sample_contexts(&set, k, seed).map_err(|e| e.in_stage("sample"))?.save(&out)?;
        }
        Command::Annotate { contexts, out } => {
            emit_annotation_template(&ContextSet::load(&contexts)?, &out)?;
        }
        Command::Curate {
            contexts,
            annotations,
            gold,
            seed,
            out,
        } => {
            let curated = apply_curation(&ContextSet::load(&contexts)?, &annotations).map_err(|e| e.in_stage("curate"))?;
            let result = match gold {
                Some(n) => gold_sample(&curated, n, seed)?,
                None => curated,
            };
            println!("{} records kept", result.len());
            result.save(&out)?;
        }
        Command::MimicTrain { config, out } => {
            let c = config.load()?;
            let encoder = Encoder::load(&c.encoder_path)?;
            let model = train_mimic_model(&c, &encoder).map_err(|e| e.in_stage("mimic-train"))?;
            model.save(&out)?;
            println!("{}", model.fingerprint());
        }
        Command::Embed {
            model,
            encoder,
            registry,
            contexts_dir,
            gold,
            out,
        } => {
            let model = MimicModel::load(&model)?;
            let encoder = Encoder::load(&encoder)?;
            let registry = MweRegistry::load(&registry)?;
            let from = if gold { CreatedFrom::Gold } else { CreatedFrom::Auto };
            let mut entries = Vec::new();
            for entry in registry.entries() {
                let path = context_file(&contexts_dir, &entry.token_name);
                if !path.exists() {
                    log::warn!("no context file for {}", entry.token_name);
                    continue;
                }
                let set = ContextSet::load(&path)?;
                entries.push(infer_embedding(entry, &set, &model, &encoder, from).map_err(|e| e.in_stage("embed"))?);
            }
            EmbeddingBundle::new(model.fingerprint(), encoder.d_model(), entries)?.save(&out)?;
        }
        Command::Inject {
            encoder,
            bundle,
            registry,
            out,
        } => {
            let mut enc = Encoder::load(&encoder)?;
            let mut reg = MweRegistry::load(&registry)?;
            let report = inject_embeddings(&mut enc, &EmbeddingBundle::load(&bundle)?, &mut reg).map_err(|e| e.in_stage("inject"))?;
            enc.save(&out)?;
            print_json(&report)?;
        }
        Command::Train {
            encoder,
            registry,
            pairs,
            setting,
            epochs,
            learning_rate,
            batch_size,
            seed,
            out,
        } => {
            let mut enc = Encoder::load(&encoder)?;
            let reg = injected_registry(&registry, &enc)?;
            let pairs = load_sts_tsv(&pairs, ScoreScale::Auto)?;
            let mut cfg = match setting {
                Setting::Pretrain => TrainConfig::pretrain(reg.language()),
                Setting::Finetune => TrainConfig::finetune(),
            };
            cfg.regime = match setting {
                Setting::Pretrain => Regime::Pretrain,
                Setting::Finetune => Regime::Finetune,
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            cfg.batch_size = batch_size;
            cfg.seed = seed;
            let history = train_sts(&mut enc, &reg, &pairs, &cfg).map_err(|e| e.in_stage("train"))?;
            enc.save(&out)?;
            print_json(&history)?;
        }
        Command::Evaluate { model, out, table } => {
            let (encoder, registry, pairs) = model.load()?;
            let predictions = predict_scores(&encoder, &registry, &pairs).map_err(|e| e.in_stage("evaluate"))?;
            let report = evaluate(&predictions, &pairs).map_err(|e| e.in_stage("evaluate"))?;
            if let Some(path) = out {
                fs::write(path, report.to_json())?;
            }
            match table {
                Some(label) => println!("{}\n{}", EvalReport::TABLE_HEADER, report.table_row(&label)),
                None => print!("{}", report.to_json()),
            }
        }
        Command::Analyze { model, min_occurrences } => {
            let (encoder, registry, pairs) = model.load()?;
            let report =
                evaluate_checkpoint(&encoder, &registry, &pairs, min_occurrences).map_err(|e| e.in_stage("analyze"))?;
            println!("idiom\tn\tsr");
            for (idiom, s) in &report.per_idiom {
                println!("{idiom}\t{}\t{:.4}", s.n, s.sr);
            }
        }
        Command::Run { config, setting } => {
            let c = config.load()?;
            let outcome = run_pipeline_with_manifest(&c, setting)?;
            log::info!("{} of {} artifacts from cache", outcome.manifest.hits(), outcome.manifest.artifacts.len());
            print!("{}", outcome.report.to_json());
        }
        Command::SweepContexts { config, ks } => {
            let points = sweep_contexts(&config.load()?, &ks)?;
            print_series(&points, "contexts");
        }
        Command::SweepEpochs { config, setting, grid } => {
            let points = sweep_epochs(&config.load()?, setting, &grid)?;
            print_series(&points, "epochs");
        }
        Command::Stats { corpus, registry } => {
            let registry = MweRegistry::load(&registry)?;
            println!("token_name\trarity");
            for entry in registry.entries() {
                match rarity_stats(&corpus, entry) {
                    Ok(r) => println!("{}\t{r:.6}", entry.token_name),
                    Err(e) => println!("{}\tNA\t{e}", entry.token_name),
                }
            }
        }
        Command::Synth { out_dir, seed } => {
            if out_dir.join("config.json").exists() {
                bail!("{} already holds a harness", out_dir.display());
            }
            let harness = SynthHarness::generate(SynthConfig {
                seed,
                ..SynthConfig::default()
            })?;
            let config = harness.prepare_run(&out_dir, &ToyRun::default())?;
            config.save(&out_dir.join("config.json"))?;
            println!("{}", out_dir.join("config.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already render their cause
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
