//! Joint training loop, checkpoints, metrics files and the gradient check.

mod checkpoint;
mod gradcheck;
mod step;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{checkpoint_dir, list_checkpoints, Checkpoint, Manifest, TensorEntry, TensorGroup};
pub use gradcheck::{grad_check_modes, GradCheckSetup, ModeGradCheck};
pub use step::{forward_loss, forward_loss_in, loss_and_grads, lr_at, prepare_batch, ForwardPass, PreparedBatch};

use crate::config::Config;
use crate::corpus::{BatchSampler, TokenSequence, Vocabulary, VOCAB_FILE};
use crate::dataset::Dataset;
use crate::encoder::{write_relpos_table, DualModel};
use crate::objectives::LossBreakdown;
use crate::probe::{self, MetricRecord};
use crate::tensor::optim::{adam_step, clip_grad_norm, AdamState};
use crate::tensor::ParamStore;
use crate::{Error, Result};

pub const METRICS_DIR: &str = "metrics";
pub const TRAIN_LOSSES_FILE: &str = "train_losses.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const PAIR_COSINES_SIMILAR_FILE: &str = "pair_cosines_similar.csv";
pub const PAIR_COSINES_RANDOM_FILE: &str = "pair_cosines_random.csv";
pub const PAIR_HISTOGRAM_SIMILAR_FILE: &str = "pair_cosines_similar_hist.csv";
pub const PAIR_HISTOGRAM_RANDOM_FILE: &str = "pair_cosines_random_hist.csv";
pub const RELPOS_FILE: &str = "relpos_buckets.tsv";
pub const TRAIN_LOSSES_HEADER: &str = "step,l_mlm_aux,l_copy,l_lm,l_scl,total,lr,grad_norm";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Fraction of masked positions whose sampled token differs from the original.
    pub replaced_fraction: f64,
    pub clamped: usize,
}

impl StepReport {
    /// CSV line with round-trip float formatting.
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, b.l_mlm_aux, b.l_copy, b.l_lm, b.l_scl, b.total, self.lr, self.grad_norm
        )
    }
}

/// All mutable training state: model parameters, optimizer, generator and
/// data order.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: Config,
    pub model: DualModel,
    pub store: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub sampler: BatchSampler,
    pub step: u64,
}

impl Trainer {
    /// Fresh state; one generator seeded from `config.seed` initializes the
    /// model and then drives every later draw.
    pub fn new(config: &Config, vocab_size: usize, num_train: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, store) = DualModel::new(&config.model, vocab_size, &mut rng)?;
        let adam = AdamState::new(&store, config.trainer.adam);
        Ok(Self {
            config: config.clone(),
            model,
            store,
            adam,
            rng,
            sampler: BatchSampler::new(num_train, config.seed),
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, num_train: usize) -> Result<Self> {
        let model = ck.model()?;
        Ok(Self {
            sampler: BatchSampler::restore(num_train, ck.config.seed, ck.sampler_epoch, ck.sampler_cursor),
            config: ck.config,
            model,
            store: ck.store,
            adam: ck.adam,
            rng: ck.rng,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self, vocab: &Vocabulary) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            vocab: vocab.clone(),
            store: self.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            sampler_epoch: self.sampler.epoch(),
            sampler_cursor: self.sampler.cursor(),
        }
    }

    /// One update at the scheduled learning rate.
    pub fn train_step(&mut self, data: &[TokenSequence]) -> Result<StepReport> {
        let lr = lr_at(self.step + 1, &self.config.trainer);
        self.train_step_with_lr(data, lr)
    }

    /// Sample a batch, corrupt it, backpropagate the total loss once, clip
    /// and apply one Adam update with learning rate `lr`.
    pub fn train_step_with_lr(&mut self, data: &[TokenSequence], lr: f64) -> Result<StepReport> {
        let tc = &self.config.trainer;
        let idx = self.sampler.next_indices(tc.batch_origins)?;
        let originals: Vec<TokenSequence> = idx.iter().map(|&i| data[i].clone()).collect();
        let batch = prepare_batch(&self.model, &self.store, &originals, tc, &mut self.rng)?;
        let (pass, mut grads) = loss_and_grads(&self.model, &self.store, &batch, tc)?;
        let grad_norm = clip_grad_norm(&mut grads, tc.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Tensor(crate::tensor::TensorError::NonFinite {
                op: "gradient norm",
                index: 0,
            }));
        }
        adam_step(&mut self.store, &grads, &mut self.adam, lr)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            breakdown: pass.breakdown,
            lr,
            grad_norm,
            replaced_fraction: batch.replaced_fraction(),
            clamped: pass.clamped,
        })
    }

    /// Probe the current parameters with a generator derived from the seed
    /// and step, leaving the training generator untouched.
    pub fn probe(&self, heldout: &[TokenSequence]) -> Result<MetricRecord> {
        let snapshot = self.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(self.step);
        probe::probe(&self.model, &snapshot, &self.config, heldout, self.step, &mut rng)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the run directory.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub start_step: u64,
    pub final_step: u64,
    pub reports: Vec<StepReport>,
    pub probes: Vec<MetricRecord>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Keep the header and the rows whose leading step is at most `step`.
fn truncate_csv(path: &Path, header: &str, step: u64) -> Result<()> {
    let text = if path.exists() {
        fs::read_to_string(path).map_err(io_err(path))?
    } else {
        String::new()
    };
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1) {
        let s: Option<u64> = line.split(',').next().and_then(|f| f.parse().ok());
        if s.is_some_and(|s| s <= step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

fn due(step: u64, every: u64) -> bool {
    every > 0 && step.is_multiple_of(every)
}

/// Train `config` on `data`, writing checkpoints and metrics under `run_dir`.
pub fn run(config: &Config, data: &Dataset, run_dir: &Path, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let metrics = run_dir.join(METRICS_DIR);
    let losses_path = metrics.join(TRAIN_LOSSES_FILE);
    let probe_path = metrics.join(PROBE_FILE);
    let vocab = &data.vocab;
    if data.heldout.len() < 2 {
        return Err(Error::Data("probing needs at least 2 held-out sequences".into()));
    }

    let mut trainer = match list_checkpoints(run_dir)?.pop().filter(|_| options.resume) {
        Some((_, dir)) => {
            let ck = Checkpoint::load(&dir)?;
            if ck.config.hash() != config.hash() {
                return Err(Error::Checkpoint(format!(
                    "config hash {} differs from checkpoint {}; refusing to resume",
                    config.hash(),
                    ck.config.hash()
                )));
            }
            if ck.vocab != *vocab {
                return Err(Error::Checkpoint("vocabulary differs from the checkpoint".into()));
            }
            truncate_csv(&losses_path, TRAIN_LOSSES_HEADER, ck.step)?;
            truncate_csv(&probe_path, MetricRecord::CSV_HEADER, ck.step)?;
            log::info!("resuming from {} at step {}", dir.display(), ck.step);
            Trainer::from_checkpoint(ck, data.train.len())?
        }
        None => {
            if options.resume {
                return Err(Error::Checkpoint(format!(
                    "no checkpoint to resume in {}",
                    run_dir.display()
                )));
            }
            fs::create_dir_all(&metrics).map_err(io_err(&metrics))?;
            write_relpos_table(
                &run_dir.join(RELPOS_FILE),
                config.model.relpos_num_buckets,
                config.model.relpos_max_distance,
            )?;
            let cfg_path = run_dir.join("config.toml");
            fs::write(&cfg_path, config.to_toml_string()).map_err(io_err(&cfg_path))?;
            vocab.save(&run_dir.join(VOCAB_FILE))?;
            fs::write(&losses_path, format!("{TRAIN_LOSSES_HEADER}\n")).map_err(io_err(&losses_path))?;
            fs::write(&probe_path, format!("{}\n", MetricRecord::CSV_HEADER)).map_err(io_err(&probe_path))?;
            let t = Trainer::new(config, vocab.len(), data.train.len())?;
            t.checkpoint(vocab).save(&checkpoint_dir(run_dir, 0))?;
            t
        }
    };

    let start_step = trainer.step;
    let total = config.trainer.steps;
    let stop = options.stop_after.unwrap_or(total).min(total);
    let mut summary = RunSummary {
        run_dir: run_dir.to_path_buf(),
        start_step,
        final_step: start_step,
        reports: Vec::new(),
        probes: Vec::new(),
    };
    if start_step == 0 && total > 0 {
        let m = trainer.probe(&data.heldout)?;
        append_line(&probe_path, &m.csv_row())?;
        summary.probes.push(m);
    }
    while trainer.step < stop {
        let r = trainer.train_step(&data.train)?;
        append_line(&losses_path, &r.csv_row())?;
        if r.step % 50 == 0 || r.step == total {
            log::info!(
                "step {} total {:.5} aux {:.4} copy {:.4} lm {:.4} scl {:.4} lr {:.2e} replaced {:.3}",
                r.step,
                r.breakdown.total,
                r.breakdown.l_mlm_aux,
                r.breakdown.l_copy,
                r.breakdown.l_lm,
                r.breakdown.l_scl,
                r.lr,
                r.replaced_fraction
            );
        }
        summary.reports.push(r);
        if due(r.step, config.probe.every) || r.step == total {
            let m = trainer.probe(&data.heldout)?;
            append_line(&probe_path, &m.csv_row())?;
            summary.probes.push(m);
        }
        if due(r.step, config.trainer.checkpoint_every) || r.step == stop {
            trainer.checkpoint(vocab).save(&checkpoint_dir(run_dir, r.step))?;
        }
    }
    summary.final_step = trainer.step;
    if trainer.step == total {
        write_pair_files(
            &trainer.model,
            &trainer.store,
            data,
            &metrics,
            config.probe.batch_origins,
        )?;
    }
    Ok(summary)
}

/// Per-pair cosines and histograms for the similar and random pair sets.
pub fn write_pair_files(
    model: &DualModel,
    store: &ParamStore,
    data: &Dataset,
    metrics_dir: &Path,
    batch_size: usize,
) -> Result<()> {
    let sets = [
        (
            &data.similar_pairs,
            PAIR_COSINES_SIMILAR_FILE,
            PAIR_HISTOGRAM_SIMILAR_FILE,
        ),
        (&data.random_pairs, PAIR_COSINES_RANDOM_FILE, PAIR_HISTOGRAM_RANDOM_FILE),
    ];
    for (pairs, values_file, hist_file) in sets {
        if pairs.is_empty() {
            continue;
        }
        let pc = probe::pair_cosines(model, store, &data.vocab, pairs, batch_size)?;
        if pc.unknown_words > 0 {
            log::warn!(
                "{values_file}: {} out-of-vocabulary words mapped to [UNK]",
                pc.unknown_words
            );
        }
        probe::write_pair_cosines(&metrics_dir.join(values_file), &pc)?;
        probe::write_histogram(&metrics_dir.join(hist_file), &pc.values)?;
    }
    Ok(())
}
