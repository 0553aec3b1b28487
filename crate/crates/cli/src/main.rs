use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use cocolm::config::Config;
use cocolm::corpus::{
    generate_corpus, read_documents, write_corpus, SyntheticGrammar, Vocabulary, CORPUS_FILE, HELDOUT_FILE, VOCAB_FILE,
};
use cocolm::corruption::corrupt_batch;
use cocolm::dataset::Dataset;
use cocolm::objectives::ObjectiveMode;
use cocolm::probe;
use cocolm::trainer::{self, Checkpoint, RunOptions, METRICS_DIR, PROBE_FILE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(
    name = "cocolm",
    version,
    about = "Corrective and contrastive pretraining at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; desk defaults when absent.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset: desk, micro or paper_base.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a config value by dotted key, e.g. trainer.steps=10.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and pair files into --out (default data.dir).
    GenCorpus(#[command(flatten)] Common),
    /// Build vocab.txt from the training corpus in data.dir.
    BuildVocab(#[command(flatten)] Common),
    /// Train a model into the run directory --out.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps (a checkpoint is written there).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Write the masking and replacement of held-out sequences as TSV.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; freshly initialized models when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of held-out sequences.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Measure a checkpoint: accuracies, cosines, pair histograms.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write [CLS] embeddings of sentences, one per line, as TSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sentence file; the held-out documents when absent.
        #[arg(long)]
        sentences: Option<PathBuf>,
    },
    /// Compare autodiff gradients of the total loss with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Check every objective mode, not only the configured one.
        #[arg(long)]
        all_modes: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::BuildVocab(_) => "build-vocab",
            Command::Pretrain { .. } => "pretrain",
            Command::Corrupt { .. } => "corrupt",
            Command::Probe { .. } => "probe",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::GradCheck { .. } => "grad-check",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus(c) | Command::BuildVocab(c) => c,
            Command::Pretrain { common, .. }
            | Command::Corrupt { common, .. }
            | Command::Probe { common, .. }
            | Command::ExportEmbeddings { common, .. }
            | Command::GradCheck { common, .. } => common,
        }
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        let error: anyhow::Error = error.into();
        let numeric = error
            .chain()
            .any(|e| e.downcast_ref::<cocolm::Error>().is_some_and(cocolm::Error::is_numeric));
        Self {
            code: if numeric { 2 } else { 1 },
            error,
        }
    }
}

fn effective_config(common: &Common) -> anyhow::Result<Config> {
    let base = match (&common.config, &common.preset) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(name)) => Config::preset(name)
            .with_context(|| format!("unknown preset {name:?}; valid presets: desk, micro, paper_base"))?,
        (None, None) => Config::desk(),
    };
    let mut config = base.with_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Create `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            bail!(
                "output directory {} exists and is not empty; pass --force to overwrite",
                dir.display()
            );
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_run_manifest(dir: &Path, command: &str, config: &Config, started: &str) -> anyhow::Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "seed": config.seed,
        "config": config,
        "config_hash": config.hash(),
        "started": started,
        "finished": chrono::Utc::now().to_rfc3339(),
        "git_describe": git_describe(),
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(dir: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn load_dataset(config: &Config) -> anyhow::Result<Dataset> {
    let dir = &config.data.dir;
    Dataset::load(dir, config.model.max_seq_len).with_context(|| {
        format!(
            "loading data from {}; run `cocolm gen-corpus` and `cocolm build-vocab` first",
            dir.display()
        )
    })
}

fn out_dir(common: &Common, default: &Path) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default.to_path_buf())
}

fn execute(cmd: &Command) -> Result<(), Failure> {
    let common = cmd.common();
    let config = effective_config(common)?;
    eprintln!("# effective config (seed {})\n{}", config.seed, config.to_toml_string());
    let started = chrono::Utc::now().to_rfc3339();
    match cmd {
        Command::GenCorpus(_) => {
            let dir = out_dir(common, &config.data.dir);
            if dir.join(CORPUS_FILE).exists() && !common.force {
                return Err(
                    anyhow::anyhow!("{} already holds a corpus; pass --force to overwrite", dir.display()).into(),
                );
            }
            let grammar = SyntheticGrammar::new(config.grammar.clone())?;
            let corpus = generate_corpus(&grammar, config.data.sizes(), config.seed)?;
            write_corpus(&dir, &corpus)?;
            eprintln!(
                "wrote {} training and {} held-out documents to {}",
                corpus.train.len(),
                corpus.heldout.len(),
                dir.display()
            );
        }
        Command::BuildVocab(_) => {
            let dir = &config.data.dir;
            let out = out_dir(common, dir).join(VOCAB_FILE);
            if out.exists() && !common.force {
                return Err(anyhow::anyhow!("{} exists; pass --force to overwrite", out.display()).into());
            }
            let docs = read_documents(&dir.join(CORPUS_FILE))?;
            let vocab = Vocabulary::build(&docs, config.data.max_vocab)?;
            if let Some(p) = out.parent() {
                fs::create_dir_all(p)?;
            }
            vocab.save(&out)?;
            eprintln!("wrote {} tokens to {}", vocab.len(), out.display());
        }
        Command::Pretrain { resume, stop_after, .. } => {
            let dir = out_dir(common, Path::new(&format!("runs/{}", config.trainer.mode)));
            let data = load_dataset(&config)?;
            if *resume {
                if !dir.exists() {
                    return Err(anyhow::anyhow!("nothing to resume in {}", dir.display()).into());
                }
            } else {
                prepare_out_dir(&dir, common.force)?;
            }
            let options = RunOptions {
                resume: *resume,
                stop_after: *stop_after,
            };
            let summary = trainer::run(&config, &data, &dir, &options)?;
            write_run_manifest(&dir, cmd.name(), &config, &started)?;
            if let Some(r) = summary.reports.last() {
                eprintln!("step {}: total loss {}", r.step, r.breakdown.total);
            }
            eprintln!("run directory {}", dir.display());
        }
        Command::Corrupt { checkpoint, count, .. } => {
            let dir = out_dir(common, Path::new("corrupt"));
            prepare_out_dir(&dir, common.force)?;
            let data = load_dataset(&config)?;
            let (model, store) = match checkpoint {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    (ck.model()?, ck.store)
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    cocolm::encoder::DualModel::new(&config.model, data.vocab.len(), &mut rng)?
                }
            };
            let source = if data.heldout.is_empty() {
                &data.train
            } else {
                &data.heldout
            };
            let seqs = &source[..(*count).min(source.len())];
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let records = corrupt_batch(
                &model,
                &store,
                seqs,
                config.trainer.mask_rate,
                config.trainer.replacement,
                &mut rng,
            )?;
            let mut tsv =
                String::from("seq\tposition\toriginal_token\taux_input_token\tcorrupted_token\treplaced_flag\n");
            for (s, r) in records.iter().enumerate() {
                for t in 0..r.len() {
                    tsv.push_str(&format!(
                        "{s}\t{t}\t{}\t{}\t{}\t{}\n",
                        data.vocab.token(r.original.ids()[t]),
                        data.vocab.token(r.aux_input[t]),
                        data.vocab.token(r.corrupted[t]),
                        u8::from(r.replaced[t])
                    ));
                }
            }
            let path = dir.join("corruption.tsv");
            fs::write(&path, tsv).with_context(|| format!("writing {}", path.display()))?;
            write_run_manifest(&dir, cmd.name(), &config, &started)?;
        }
        Command::Probe { checkpoint, .. } => {
            let dir = out_dir(common, Path::new("probe"));
            prepare_out_dir(&dir, common.force)?;
            let ck = load_checkpoint(checkpoint)?;
            let data = load_dataset(&ck.config)?;
            if data.vocab != ck.vocab {
                return Err(anyhow::anyhow!("data vocabulary differs from the checkpoint's").into());
            }
            let model = ck.model()?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let m = probe::probe(&model, &ck.store, &ck.config, &data.heldout, ck.step, &mut rng)?;
            let metrics = dir.join(METRICS_DIR);
            fs::create_dir_all(&metrics)?;
            fs::write(
                metrics.join(PROBE_FILE),
                format!("{}\n{}\n", probe::MetricRecord::CSV_HEADER, m.csv_row()),
            )?;
            trainer::write_pair_files(&model, &ck.store, &data, &metrics, ck.config.probe.batch_origins)?;
            write_run_manifest(&dir, cmd.name(), &config, &started)?;
        }
        Command::ExportEmbeddings {
            checkpoint, sentences, ..
        } => {
            let dir = out_dir(common, Path::new("embeddings"));
            prepare_out_dir(&dir, common.force)?;
            let ck = load_checkpoint(checkpoint)?;
            let path = sentences
                .clone()
                .unwrap_or_else(|| ck.config.data.dir.join(HELDOUT_FILE));
            let lines = read_documents(&path)?;
            let model = ck.model()?;
            let tsv = probe::export_embeddings(&model, &ck.store, &ck.vocab, &lines, ck.config.probe.batch_origins)?;
            let out = dir.join("embeddings.tsv");
            fs::write(&out, tsv).with_context(|| format!("writing {}", out.display()))?;
            write_run_manifest(&dir, cmd.name(), &config, &started)?;
        }
        Command::GradCheck { all_modes, .. } => {
            let modes: Vec<ObjectiveMode> = if *all_modes {
                ObjectiveMode::ALL.to_vec()
            } else {
                vec![config.trainer.mode]
            };
            let results = trainer::grad_check_modes(&config, &modes)?;
            let tol = config.grad_check.tolerance;
            let mut worst: f64 = 0.0;
            for r in &results {
                let w = r.report.worst.as_ref();
                println!(
                    "{}\tmax_rel_error {:.3e}\tcoords {}\tworst {}",
                    r.mode,
                    r.report.max_rel_error,
                    r.report.coords_checked,
                    w.map(|c| format!(
                        "{}[{}] autodiff {:e} fd {:e}",
                        c.param, c.index, c.autodiff, c.finite_diff
                    ))
                    .unwrap_or_default()
                );
                let e = r.report.max_rel_error;
                if e.is_nan() || e > worst {
                    worst = e;
                }
            }
            println!("max relative error {worst:.3e} (tolerance {tol:e})");
            if let Some(dir) = &common.out {
                prepare_out_dir(dir, common.force)?;
                let json: Vec<_> = results
                    .iter()
                    .map(|r| {
                        serde_json::json!({
                            "mode": r.mode.name(),
                            "max_rel_error": r.report.max_rel_error,
                            "coords_checked": r.report.coords_checked,
                        })
                    })
                    .collect();
                fs::write(dir.join("grad_check.json"), serde_json::to_string_pretty(&json)?)?;
                write_run_manifest(dir, cmd.name(), &config, &started)?;
            }
            if worst.is_nan() || worst > tol {
                return Err(Failure {
                    code: 2,
                    error: anyhow::anyhow!("gradient check failed: {worst:e} > {tol:e}"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
