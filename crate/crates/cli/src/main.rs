use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use bima_core::checkpoint::{load_checkpoint, save_checkpoint, write_run_snapshot};
use bima_core::config::RunConfig;
use bima_core::corpus::{load_corpus, load_vocabulary, save_corpus, save_vocabulary, Corpus};
use bima_core::eval::{
    alpha_sweep_rows, config_sweep, dump_embeddings, eval_corpus, sweep_csv, EvalReport, Evaluator, SweepAxis,
};
use bima_core::model::{FeatureSource, Toggles};
use bima_core::train::{dictionary_from_corpus, prepare_data, train, Matcher, Trained};

/// Scene-element debiased text-video retrieval at desk scale.
#[derive(Parser, Debug)]
#[command(name = "bima", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Evaluate on this JSONL corpus instead of the regenerated one.
    #[arg(long, requires = "vocab")]
    corpus: Option<PathBuf>,
    /// Vocabulary of `--corpus`; captions are re-tokenized when it differs.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, its vocabulary and lexicon.
    GenCorpus {
        #[command(flatten)]
        run: RunArgs,
        /// Use the shifted profile.
        #[arg(long)]
        ood: bool,
    },
    /// Extract the entity/activity dictionary from the training captions.
    BuildDict {
        #[command(flatten)]
        run: RunArgs,
        /// Embed the phrases with the matcher stored in this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-train, train and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Module preset exp1 … exp7, replacing `[toggles]`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Retrieval metrics of a checkpoint on its evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "content")]
        features: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        data: CorpusArgs,
    },
    /// Evaluation on the shifted-profile corpus (or `--corpus`).
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: CorpusArgs,
    },
    /// Sweep alpha (needs --checkpoint) or kappa / g_toggle / module_toggles (retrains).
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write pooled content / bias vectors and fusion attention weights.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> bima_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::write(path, report.to_json()?).with_context(|| path.display().to_string())
}

fn corpus_for(trained: &Trained, data: &CorpusArgs, ood: bool) -> anyhow::Result<Corpus> {
    match (&data.corpus, &data.vocab) {
        (Some(c), Some(v)) => {
            let corpus = load_corpus(c)?;
            let vocab = load_vocabulary(v)?;
            if vocab.sha256() == trained.vocab.sha256() {
                Ok(corpus)
            } else {
                Ok(corpus.retokenize(&vocab, &trained.vocab)?)
            }
        }
        _ => Ok(eval_corpus(&trained.config, ood)?),
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenCorpus { run, ood } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            if cfg.corpus.path.is_some() {
                return Err(bima_core::Error::Config("gen-corpus needs corpus.path unset".into()).into());
            }
            let profile = if ood { cfg.corpus.ood_profile } else { cfg.corpus.profile };
            let data = prepare_data(&cfg, &profile)?;
            write_run_snapshot(&run.out, &cfg)?;
            save_corpus(&data.corpus, &run.out.join("corpus.jsonl"))?;
            save_vocabulary(&data.vocab, &run.out.join("vocab.json"))?;
            data.lexicon.save(&run.out.join("lexicon.json"))?;
            log::info!("{} pairs written to {}", data.corpus.len(), run.out.display());
        }
        Command::BuildDict { run, checkpoint } => {
            let cfg = load_config(run.config.as_deref(), run.seed)?;
            let data = prepare_data(&cfg, &cfg.corpus.profile)?;
            let mut dict = dictionary_from_corpus(&data.train(), &data.vocab, &data.lexicon)?;
            if let Some(dir) = checkpoint {
                let t = load_checkpoint(&dir)?;
                if t.vocab.sha256() != data.vocab.sha256() {
                    return Err(anyhow!("checkpoint vocabulary differs from the corpus"));
                }
                dict = Matcher::new(&t.matcher, &t.config, &t.dims)?.embed_dictionary(&dict, &data.vocab)?;
            }
            write_run_snapshot(&run.out, &cfg)?;
            dict.save(&run.out.join("dictionary.json"))?;
            log::info!("{} entities, {} activities", dict.n_entities(), dict.n_activities());
        }
        Command::Train { run, preset } => {
            let mut cfg = load_config(run.config.as_deref(), run.seed)?;
            if let Some(p) = preset {
                cfg.toggles = Toggles::preset(&p)?;
            }
            let data = prepare_data(&cfg, &cfg.corpus.profile)?;
            let trained = train(&cfg, &data)?;
            save_checkpoint(&run.out, &trained)?;
        }
        Command::Eval {
            checkpoint,
            out,
            features,
            alpha,
            data,
        } => {
            let source: FeatureSource = features.parse()?;
            if (source == FeatureSource::Mixed) != alpha.is_some() {
                return Err(bima_core::Error::Config("--alpha is required exactly with --features mixed".into()).into());
            }
            let trained = load_checkpoint(&checkpoint)?;
            let corpus = corpus_for(&trained, &data, false)?;
            let report = Evaluator::new(&trained)?.evaluate(&corpus, source, alpha)?;
            write_run_snapshot(&out, &trained.config)?;
            write_json(&out.join("eval_report.json"), &report)?;
            println!("{}", report.to_json()?.trim_end());
        }
        Command::Ood { checkpoint, out, data } => {
            let trained = load_checkpoint(&checkpoint)?;
            let corpus = corpus_for(&trained, &data, true)?;
            let report = Evaluator::new(&trained)?.ood_evaluate(&corpus)?;
            write_run_snapshot(&out, &trained.config)?;
            write_json(&out.join("ood_report.json"), &report)?;
            println!("{}", report.to_json()?.trim_end());
        }
        Command::Sweep {
            axis,
            values,
            checkpoint,
            config,
            seed,
            out,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let (rows, cfg) = if axis == SweepAxis::Alpha {
                let dir = checkpoint
                    .ok_or_else(|| bima_core::Error::Config("the alpha sweep needs --checkpoint".into()))?;
                let trained = load_checkpoint(&dir)?;
                let corpus = eval_corpus(&trained.config, false)?;
                (alpha_sweep_rows(&trained, &corpus, &values)?, trained.config)
            } else {
                let cfg = load_config(config.as_deref(), seed)?;
                (config_sweep(&cfg, axis, &values)?, cfg)
            };
            write_run_snapshot(&out, &cfg)?;
            std::fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
            print!("{}", sweep_csv(&rows));
        }
        Command::DumpEmbeddings { checkpoint, out } => {
            let trained = load_checkpoint(&checkpoint)?;
            let corpus = eval_corpus(&trained.config, false)?;
            let ev = Evaluator::new(&trained)?;
            let (content, bias) = ev.embeddings(&corpus)?;
            write_run_snapshot(&out, &trained.config)?;
            dump_embeddings(&out, &corpus, &content, &bias)?;
            if trained.config.toggles.uses_elements() {
                std::fs::write(out.join("attention.csv"), ev.attention_csv(&corpus)?)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<bima_core::Error>() {
        Some(e) if e.is_config_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BIMA_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
