//! `mpe` — episodic training and evaluation of the multi-prototype
//! extractor on canonical corpora.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpe::config::{load_config, validate, RunConfig};
use mpe::corpus::{
    corpora_from_records, corpora_to_records, generate_synthetic, load_fewrel, read_canonical,
    split_relations, write_canonical, Corpus, SplitTag,
};
use mpe::encoder::{read_embeddings, Vocab};
use mpe::episode::EpisodeConfig;
use mpe::error::{ConfigError, DataError, MpeError};
use mpe::eval::{ablation_table, dump_predictions, evaluate, AblationVariant};
use mpe::model::MpeModel;
use mpe::train::run_training;

#[derive(Parser)]
#[command(
    name = "mpe",
    about = "Few-shot relational triple extraction with multi-prototype embeddings",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file (key = value lines with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (the MPE_SEED environment variable wins over this).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct EpisodeArgs {
    /// Corpus split to evaluate on.
    #[arg(long, default_value = "test")]
    split: String,
    /// Ways per evaluation episode.
    #[arg(long)]
    n: Option<usize>,
    /// Support instances per class.
    #[arg(long)]
    k: Option<usize>,
    /// Number of evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a FewRel-style JSON file into a canonical split corpus.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// FewRel-style input file.
        #[arg(long)]
        input: PathBuf,
        /// Canonical corpus output (one JSON record per line).
        #[arg(long)]
        output: PathBuf,
        /// Relations per split as `train,valid,test`.
        #[arg(long, default_value = "50,15,15")]
        splits: String,
    },
    /// Generate a synthetic corpus and split it by relation.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train on the `train` split, validating on `valid`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Canonical corpus with train/valid splits.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for the checkpoint and metrics log.
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Precomputed embedding file (MPEEMB) instead of the trainable
        /// encoder.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: micro F1 mean and stddev over episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant; write a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Variants to run (default: all five).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Dump per-query predictions with distances for error analysis.
    Dump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Render a metrics CSV as SVG curves.
    Plot {
        /// Metrics CSV produced by `train`.
        #[arg(long)]
        input: PathBuf,
        /// SVG output path.
        #[arg(long)]
        output: PathBuf,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig, MpeError> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    validate(&cfg)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Ok(env_seed) = std::env::var("MPE_SEED") {
        let parsed = env_seed.parse::<u64>().map_err(|_| {
            ConfigError::BadValue {
                section: "env".into(),
                key: "MPE_SEED".into(),
                message: format!("cannot parse `{env_seed}` as a seed"),
            }
        })?;
        cfg.set_seed(parsed);
    }
    Ok(cfg)
}

fn load_corpora(path: &PathBuf) -> Result<std::collections::BTreeMap<SplitTag, Corpus>, MpeError> {
    let file = std::fs::File::open(path).map_err(DataError::from)?;
    let records = read_canonical(std::io::BufReader::new(file))?;
    Ok(corpora_from_records(records)?)
}

fn split_of<'a>(
    corpora: &'a std::collections::BTreeMap<SplitTag, Corpus>,
    name: &str,
) -> Result<&'a Corpus, MpeError> {
    let tag = SplitTag::parse(name)?;
    corpora
        .get(&tag)
        .ok_or_else(|| DataError::Invalid(format!("corpus has no `{name}` split")).into())
}

fn episode_config(cfg: &RunConfig, args: &EpisodeArgs) -> (EpisodeConfig, usize) {
    let episode = EpisodeConfig {
        n_way: args.n.unwrap_or(cfg.episode.n_way),
        k_shot: args.k.unwrap_or(cfg.episode.k_shot),
        r_query: cfg.episode.r_query,
        seed: cfg.seed(),
    };
    (episode, args.episodes.unwrap_or(cfg.episode.episodes))
}

fn write_file(path: &PathBuf, contents: &[u8]) -> Result<(), MpeError> {
    let mut file = std::fs::File::create(path).map_err(DataError::from)?;
    file.write_all(contents).map_err(DataError::from)?;
    Ok(())
}

fn build_model(cfg: &RunConfig, corpora: &std::collections::BTreeMap<SplitTag, Corpus>, embeddings: &Option<PathBuf>) -> Result<MpeModel, MpeError> {
    let refs: Vec<&Corpus> = corpora.values().collect();
    let vocab = Vocab::build(&refs);
    match embeddings {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(DataError::from)?;
            let store = read_embeddings(&mut std::io::BufReader::new(file))?;
            MpeModel::with_precomputed(cfg.model.clone(), vocab, store, cfg.seed())
        }
        None => MpeModel::new(cfg.model.clone(), vocab, cfg.seed()),
    }
}

fn run(cli: Cli) -> Result<(), MpeError> {
    match cli.command {
        Command::Prepare {
            common,
            input,
            output,
            splits,
        } => {
            let cfg = resolve_config(&common)?;
            let parts: Vec<usize> = splits
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| ConfigError::BadValue {
                    section: "cli".into(),
                    key: "splits".into(),
                    message: format!("expected `train,valid,test` counts, got `{splits}`"),
                })?;
            if parts.len() != 3 {
                return Err(ConfigError::BadValue {
                    section: "cli".into(),
                    key: "splits".into(),
                    message: "expected exactly three counts".into(),
                }
                .into());
            }
            let corpus = load_fewrel(&input)?;
            let (train, valid, test) =
                split_relations(&corpus, parts[0], parts[1], parts[2], cfg.seed())?;
            let mut buf = Vec::new();
            write_canonical(&mut buf, corpora_to_records(&[&train, &valid, &test]))?;
            write_file(&output, &buf)?;
            println!(
                "prepared {} instances over {}/{}/{} relations -> {}",
                train.n_instances() + valid.n_instances() + test.n_instances(),
                train.n_relations(),
                valid.n_relations(),
                test.n_relations(),
                output.display()
            );
            Ok(())
        }
        Command::Synth { common, output } => {
            let cfg = resolve_config(&common)?;
            let corpus = generate_synthetic(&cfg.synth.synth, cfg.seed())?;
            let (train, valid, test) = split_relations(
                &corpus,
                cfg.synth.n_train_relations,
                cfg.synth.n_valid_relations,
                cfg.synth.n_test_relations,
                cfg.seed(),
            )?;
            let mut buf = Vec::new();
            write_canonical(&mut buf, corpora_to_records(&[&train, &valid, &test]))?;
            write_file(&output, &buf)?;
            println!(
                "synthesized {} instances over {} relations -> {}",
                corpus.n_instances(),
                corpus.n_relations(),
                output.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            corpus,
            out_dir,
            embeddings,
        } => {
            let cfg = resolve_config(&common)?;
            let corpora = load_corpora(&corpus)?;
            let train = split_of(&corpora, "train")?;
            let valid = corpora.get(&SplitTag::Valid);
            let mut model = build_model(&cfg, &corpora, &embeddings)?;
            let outcome = run_training(&mut model, train, valid, &cfg.train)?;
            std::fs::create_dir_all(&out_dir).map_err(DataError::from)?;
            let ckpt = out_dir.join("model.ckpt");
            model.save_to_path(&ckpt)?;
            write_file(&out_dir.join("metrics.csv"), outcome.metrics_csv.as_bytes())?;
            match (&outcome.best_step, &outcome.best_validation) {
                (Some(step), Some(summary)) => {
                    println!(
                        "trained {} steps; best validation at step {step}",
                        outcome.final_state.step
                    );
                    print!("{}", summary.render("validation"));
                }
                _ => println!(
                    "trained {} steps (no validation split)",
                    outcome.final_state.step
                ),
            }
            println!("checkpoint -> {}", ckpt.display());
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            episode,
            embeddings,
        } => {
            let cfg = resolve_config(&common)?;
            let corpora = load_corpora(&corpus)?;
            let target = split_of(&corpora, &episode.split)?;
            let mut model = MpeModel::load_from_path(&checkpoint)?;
            if let Some(path) = &embeddings {
                let file = std::fs::File::open(path).map_err(DataError::from)?;
                model.set_precomputed(read_embeddings(&mut std::io::BufReader::new(file))?)?;
            }
            let (episode_cfg, episodes) = episode_config(&cfg, &episode);
            let summary = evaluate(&model, target, &episode_cfg, episodes)?;
            print!(
                "{}",
                summary.render(&format!(
                    "{} split, {}-way-{}-shot",
                    episode.split, episode_cfg.n_way, episode_cfg.k_shot
                ))
            );
            Ok(())
        }
        Command::Ablate {
            common,
            corpus,
            output,
            variants,
        } => {
            let cfg = resolve_config(&common)?;
            let corpora = load_corpora(&corpus)?;
            let train = split_of(&corpora, "train")?;
            let valid = split_of(&corpora, "valid")?;
            let refs: Vec<&Corpus> = corpora.values().collect();
            let vocab = Vocab::build(&refs);
            let chosen: Vec<AblationVariant> = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| AblationVariant::parse(n))
                    .collect::<Result<_, _>>()?,
                None => AblationVariant::ALL.to_vec(),
            };
            let episode_cfg = EpisodeConfig {
                n_way: cfg.episode.n_way,
                k_shot: cfg.episode.k_shot,
                r_query: cfg.episode.r_query,
                seed: cfg.seed(),
            };
            let csv = ablation_table(
                &cfg.model,
                &vocab,
                train,
                valid,
                &cfg.train,
                &episode_cfg,
                cfg.episode.episodes,
                &chosen,
            )?;
            write_file(&output, csv.as_bytes())?;
            print!("{csv}");
            Ok(())
        }
        Command::Dump {
            common,
            checkpoint,
            corpus,
            output,
            episode,
            embeddings,
        } => {
            let cfg = resolve_config(&common)?;
            let corpora = load_corpora(&corpus)?;
            let target = split_of(&corpora, &episode.split)?;
            let mut model = MpeModel::load_from_path(&checkpoint)?;
            if let Some(path) = &embeddings {
                let file = std::fs::File::open(path).map_err(DataError::from)?;
                model.set_precomputed(read_embeddings(&mut std::io::BufReader::new(file))?)?;
            }
            let (episode_cfg, episodes) = episode_config(&cfg, &episode);
            let mut buf = Vec::new();
            let written = dump_predictions(&model, target, &episode_cfg, episodes, &mut buf)?;
            write_file(&output, &buf)?;
            println!("dumped {written} query records -> {}", output.display());
            Ok(())
        }
        Command::Plot { input, output } => {
            let csv = std::fs::read_to_string(&input).map_err(DataError::from)?;
            let svg = mpe::plot::render_svg(&csv)?;
            write_file(&output, svg.as_bytes())?;
            println!("plotted {} -> {}", input.display(), output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
