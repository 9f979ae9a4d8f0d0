use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rag2::corpus::{ingest, ChunkParams, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use rag2::labeling::{build_label_dataset, export_labels, CalibrationPopulation};
use rag2::metrics::{score_pairs, TextPair};
use rag2::pipeline::{compare_modes, evaluate, sibling_path, CorpusDir, Dataset, Engine, LongformPair, Mode, RunConfig};
use rag2::providers::build_provider;

#[derive(Parser)]
#[command(name = "rag2", version, about = "Rationale-guided retrieval-augmented QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a JSONL document file into a corpus directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        corpus: String,
        #[arg(long)]
        corpus_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = DEFAULT_OVERLAP)]
        overlap: usize,
    },
    /// Embed a registered corpus and write its vector index.
    Index {
        #[arg(long)]
        corpus: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Build filter-training labels from perplexity differentials.
    Label {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long, value_parser = parse_population)]
        population: Option<CalibrationPopulation>,
    },
    /// Evaluate one mode; writes the report plus predictions and timing files.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate several modes over shared providers and indexes.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Long-form answers scored with ROUGE-L and BERTScore.
    Longform {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "closed_book")]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ROUGE-L (and BERTScore with a configured embedder) for candidate/reference pairs.
    Metrics {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the offline demo workspace.
    Demo {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_population(s: &str) -> Result<CalibrationPopulation, String> {
    match s {
        "unchanged_accuracy" => Ok(CalibrationPopulation::UnchangedAccuracy),
        "all" => Ok(CalibrationPopulation::All),
        other => Err(format!("unknown population {other:?} (unchanged_accuracy | all)")),
    }
}

fn emit(json: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(json)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn corpus_dir(cfg: &RunConfig) -> Result<CorpusDir> {
    match &cfg.corpus_dir {
        Some(d) => Ok(CorpusDir::new(d)),
        None => bail!("config has no corpus_dir"),
    }
}

fn mode_file(mode: &Mode) -> String {
    mode.to_string().replace([':', '+', '@'], "_")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            corpus,
            corpus_dir,
            window,
            overlap,
        } => {
            let (entry, snippets) = ingest(&input, &corpus, ChunkParams::new(window, overlap)?)?;
            CorpusDir::new(&corpus_dir).add_corpus(entry, &snippets)?;
            println!("{corpus}: {} snippets", snippets.len());
        }
        Command::Index { corpus, config } => {
            let cfg = RunConfig::load(&config)?;
            let embedder = build_provider(cfg.embedder.as_ref().context("config has no embedder")?)?;
            let meta = corpus_dir(&cfg)?.build_index(&corpus, embedder.as_ref())?;
            println!("{corpus}: {} rows in {:.2}s", meta.rows, meta.elapsed.as_secs_f64());
        }
        Command::Label {
            config,
            dataset,
            out,
            percentile,
            population,
        } => {
            let cfg = RunConfig::load(&config)?;
            let mut lcfg = cfg.labeling.clone();
            if let Some(p) = percentile {
                lcfg.percentile = p;
            }
            if let Some(p) = population {
                lcfg.population = p;
            }
            let data = Dataset::load(dataset.as_deref().unwrap_or(&cfg.dataset), cfg.strict)?;
            let engine = Engine::from_config(&cfg)?;
            let retriever = engine.retriever().context("labeling needs an embedder and a corpus_dir")?;
            let labels = build_label_dataset(&data.items, engine.generator().as_ref(), retriever, engine.template(), &lcfg)?;
            export_labels(&labels, lcfg.percentile, &out)?;
            println!(
                "{} labels ({} helpful), tau {:?}, {} items skipped",
                labels.records.len(),
                labels.records.iter().filter(|r| r.label == rag2::labeling::Helpfulness::Helpful).count(),
                labels.calibration.as_ref().map(|c| c.tau),
                labels.skipped.len()
            );
        }
        Command::Eval { config, mode, out } => {
            let cfg = RunConfig::load(&config)?;
            let mode = mode.or(cfg.mode.clone()).context("no mode given (--mode or `mode` in the config)")?;
            cfg.validate_mode(&mode)?;
            let data = Dataset::load(&cfg.dataset, cfg.strict)?;
            let engine = Engine::from_config(&cfg)?;
            let eval = evaluate(&engine, &data, &mode)?;
            eval.write(&out)?;
            let r = &eval.report;
            println!(
                "{mode}: accuracy {:.4} ({}/{}), abstentions {}, fallbacks {}, errors {}",
                r.accuracy, r.n_correct, r.n_items, r.abstentions, r.fallbacks, r.errors
            );
        }
        Command::Compare { config, modes, out } => {
            let cfg = RunConfig::load(&config)?;
            for m in &modes {
                cfg.validate_mode(m)?;
            }
            let data = Dataset::load(&cfg.dataset, cfg.strict)?;
            let engine = Engine::from_config(&cfg)?;
            let cmp = compare_modes(&engine, &data, &modes)?;
            print!("{}", cmp.table());
            if let Some(out) = out {
                emit(&serde_json::json!({ "rows": cmp.rows }), Some(&out))?;
                for e in &cmp.evaluations {
                    e.write(&sibling_path(&out, &format!("{}.json", mode_file(&e.report.mode))))?;
                }
            }
        }
        Command::Longform {
            config,
            pairs,
            mode,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let engine = Engine::from_config(&cfg)?;
            let embedder = build_provider(cfg.embedder.as_ref().context("BERTScore needs an embedder")?)?;
            let pairs: Vec<LongformPair> = rag2::io::read_jsonl(&pairs)?;
            let report = engine.longform_eval(&pairs, &mode, embedder.as_ref())?;
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
        }
        Command::Metrics { pairs, config, out } => {
            let pairs: Vec<TextPair> = rag2::io::read_jsonl(&pairs)?;
            let embedder = match config {
                Some(c) => {
                    let cfg = RunConfig::load(&c)?;
                    Some(build_provider(cfg.embedder.as_ref().context("config has no embedder")?)?)
                }
                None => None,
            };
            let report = score_pairs(&pairs, embedder.as_deref())?;
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
        }
        Command::Demo { out } => {
            let run = rag2::demo::write_workspace(&out)?;
            println!("wrote {}", run.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
