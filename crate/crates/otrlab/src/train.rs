//! The training harness: a deterministic loop running any objective over
//! a task corpus, with exact-match evaluation, metrics emission, and
//! checkpoint/resume.
//!
//! Determinism is end-to-end: batches follow a Fisher-Yates order keyed
//! by `(seed, epoch)`, OTR rollouts are keyed by `(seed, step, sequence,
//! position)`, per-batch gradients are reduced in fixed slot order, and
//! the metrics table is byte-identical across runs of the same config,
//! corpus, and seed. The `wall_ms` column is part of the CSV schema but
//! is left empty so the bytes stay reproducible; timing goes to the
//! caller's logs instead.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainingState};
use crate::data::{Example, TaskData, Vocab, EOS};
use crate::error::Error;
use crate::loss::{
    self, build_objective, gt_count_metrics, LossSpec, Objective, RolloutKey, RolloutOutcome,
    RolloutPlan,
};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamWConfig, AdamWState, ScheduleConfig};
use crate::rng;
use crate::Result;

/// Exact header of the metrics CSV.
pub const METRICS_HEADER: &str =
    "step,epoch,lr,train_loss,gt_fraction,mean_n_gt,eval_in_acc,eval_ood_acc,tokens_seen,wall_ms";

/// Trainer-section configuration (model, loss, schedule, and optimizer
/// configs travel separately and are joined in [`Trainer::new`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Evaluate every this many steps (the final step always evaluates).
    pub eval_every: u64,
    /// Optional global-norm gradient clip.
    pub clip_norm: Option<f64>,
    /// Checkpoint every this many steps; 0 checkpoints only at the end.
    pub checkpoint_every: u64,
    /// Token budget per decoded response during evaluation.
    pub eval_max_new: usize,
    /// Measure ground-truth sampling concentration for SFT/DFT runs via a
    /// side rollout at temperature 1 (never affects the update).
    pub measure_gt: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 64,
            epochs: 2,
            seed: 1,
            eval_every: 50,
            clip_norm: None,
            checkpoint_every: 0,
            eval_max_new: 16,
            measure_gt: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("train.eval_every must be at least 1".into()));
        }
        if self.eval_max_new < 1 {
            return Err(Error::Config("train.eval_max_new must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!(
                    "train.clip_norm must be positive and finite, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One emitted metrics row. Eval cells are populated only on eval steps;
/// ground-truth cells only when measurement is on.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub gt_fraction: Option<f64>,
    pub mean_n_gt: Option<f64>,
    pub eval_in_acc: Option<f64>,
    pub eval_ood_acc: Option<f64>,
    pub tokens_seen: u64,
}

fn cell(v: &Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    /// The CSV line for this row (no newline); `wall_ms` stays empty.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},",
            self.step,
            self.epoch,
            self.lr,
            self.train_loss,
            cell(&self.gt_fraction),
            cell(&self.mean_n_gt),
            cell(&self.eval_in_acc),
            cell(&self.eval_ood_acc),
            self.tokens_seen
        )
    }
}

/// Line-buffered metrics CSV file.
pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    /// Creates (or truncates) the file and writes the header.
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let mut file = fs::File::create(path)?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { file })
    }

    /// Opens the file for appending (writing the header first if the file
    /// is missing or empty), for resumed runs.
    pub fn append(path: &Path) -> Result<MetricsWriter> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        Ok(MetricsWriter { file })
    }

    pub fn row(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.csv_line())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Decoding mode for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Argmax decoding (ties resolve to the lowest token id).
    Greedy,
    /// Nucleus sampling: temperature-flattened distribution restricted to
    /// the smallest prefix with mass `>= top_p`, renormalized.
    Stochastic { temperature: f64, top_p: f64 },
}

/// Exact-match accuracy of decoded responses over `examples`. Decoding
/// runs until `EOS`, `max_new` tokens, or the context fills; the decoded
/// string (with `EOS` stripped) must equal the reference response
/// exactly. Stochastic draws come from the stream `(seed, step, example)`.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    examples: &[Example],
    mode: EvalMode,
    max_new: usize,
    seed: u64,
    step: u64,
) -> Result<f64> {
    if max_new < 1 {
        return Err(Error::InvalidInput("max_new must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate over zero examples".into()));
    }
    if let EvalMode::Stochastic { temperature, top_p } = mode {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidInput(format!(
                "evaluation temperature must be positive, got {temperature}"
            )));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "top_p must lie in (0, 1], got {top_p}"
            )));
        }
    }
    let hits: usize = examples
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| -> Result<usize> {
            let generated = generate(model, ex.prompt_ids(), mode, max_new, seed, step, idx as u64)?;
            let decoded = vocab.decode_lossy(&generated);
            Ok(usize::from(decoded == ex.reference_text(vocab)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / examples.len() as f64)
}

/// Decodes up to `max_new` tokens after `prompt`, stopping at `EOS`
/// (excluded from the result) or a full context window.
fn generate(
    model: &Model,
    prompt: &[usize],
    mode: EvalMode,
    max_new: usize,
    seed: u64,
    step: u64,
    example_idx: u64,
) -> Result<Vec<usize>> {
    let mut stream = rng::eval_stream(seed, step, example_idx);
    let mut ctx = prompt.to_vec();
    let mut out = Vec::new();
    let vocab = model.config().vocab_size;
    for _ in 0..max_new {
        if ctx.len() > model.config().context_len {
            break;
        }
        let logits = model.logits_values(&ctx)?;
        let row = &logits[(ctx.len() - 1) * vocab..];
        let next = match mode {
            EvalMode::Greedy => argmax(row),
            EvalMode::Stochastic { temperature, top_p } => {
                let probs = loss::sampling_policy(row, temperature)?;
                nucleus_draw(&probs, top_p, stream.gen())
            }
        };
        if next == EOS {
            break;
        }
        out.push(next);
        ctx.push(next);
    }
    Ok(out)
}

/// Index of the largest value; exact ties resolve to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws from the nucleus of `probs`: tokens are ranked by probability
/// (ties by id), the smallest prefix reaching `top_p` is kept and
/// renormalized, and `u` selects by inverse CDF over the kept ids in
/// ascending order. `top_p = 1` keeps the whole distribution and is
/// exactly the plain inverse-CDF sampler.
fn nucleus_draw(probs: &[f64], top_p: f64, u: f64) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &id in &order {
        kept += 1;
        mass += probs[id];
        if mass >= top_p {
            break;
        }
    }
    let mut nucleus = order;
    nucleus.truncate(kept);
    nucleus.sort_unstable();
    if kept == probs.len() {
        mass = 1.0;
    }
    let mut acc = 0.0;
    for &id in &nucleus {
        acc += probs[id] / mass;
        if u < acc {
            return id;
        }
    }
    nucleus[kept - 1]
}

/// Fisher-Yates order of `0..n` keyed by `(seed, epoch)`.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut stream = rng::shuffle_stream(seed, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = stream.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Everything produced by one optimization step.
struct StepReport {
    row: MetricsRow,
    /// Pooled outcomes across the batch (loss rollouts for OTR, side
    /// rollouts for SFT/DFT when measurement is on).
    #[cfg_attr(not(test), allow(dead_code))]
    outcomes: Vec<RolloutOutcome>,
    /// Global gradient norm after optional clipping.
    #[cfg_attr(not(test), allow(dead_code))]
    grad_norm: f64,
}

/// A deterministic training run in progress.
#[derive(Debug)]
pub struct Trainer {
    model: Model,
    opt: AdamWState,
    loss: LossSpec,
    schedule: ScheduleConfig,
    cfg: TrainerConfig,
    corpus_size: usize,
    steps_per_epoch: u64,
    step: u64,
    tokens_seen: u64,
}

impl Trainer {
    /// Builds a fresh run. `corpus_size` fixes the step geometry:
    /// `steps_per_epoch = corpus_size / batch_size` (partial batches are
    /// dropped), and the schedule must span exactly
    /// `epochs * steps_per_epoch` steps.
    pub fn new(
        model_config: &ModelConfig,
        opt_config: AdamWConfig,
        loss: LossSpec,
        schedule: ScheduleConfig,
        cfg: TrainerConfig,
        corpus_size: usize,
    ) -> Result<Trainer> {
        let model = Model::init(model_config)?;
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.values.len()).collect();
        let opt = AdamWState::new(opt_config, &sizes)?;
        Trainer::assemble(model, opt, loss, schedule, cfg, corpus_size, 0, 0)
    }

    /// Rebuilds a run from a loaded checkpoint; the configs must match the
    /// original run for the tail to reproduce exactly.
    pub fn from_state(
        state: TrainingState,
        loss: LossSpec,
        schedule: ScheduleConfig,
        cfg: TrainerConfig,
        corpus_size: usize,
    ) -> Result<Trainer> {
        Trainer::assemble(
            state.model,
            state.opt,
            loss,
            schedule,
            cfg,
            corpus_size,
            state.step,
            state.tokens_seen,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: Model,
        opt: AdamWState,
        loss: LossSpec,
        schedule: ScheduleConfig,
        cfg: TrainerConfig,
        corpus_size: usize,
        step: u64,
        tokens_seen: u64,
    ) -> Result<Trainer> {
        loss.validate()?;
        schedule.validate()?;
        cfg.validate()?;
        if corpus_size < cfg.batch_size {
            return Err(Error::Config(format!(
                "corpus of {corpus_size} examples cannot fill a batch of {}",
                cfg.batch_size
            )));
        }
        let steps_per_epoch = (corpus_size / cfg.batch_size) as u64;
        let total = cfg.epochs * steps_per_epoch;
        if schedule.total_steps != total {
            return Err(Error::Config(format!(
                "schedule.total_steps is {} but {} epochs of {} steps require {total}",
                schedule.total_steps, cfg.epochs, steps_per_epoch
            )));
        }
        if step > total {
            return Err(Error::Config(format!(
                "checkpoint at step {step} lies past the {total}-step schedule"
            )));
        }
        Ok(Trainer {
            model,
            opt,
            loss,
            schedule,
            cfg,
            corpus_size,
            steps_per_epoch,
            step,
            tokens_seen,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.epochs * self.steps_per_epoch
    }

    /// Saves a resumable checkpoint of the current state.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save_training_state(
            dir,
            &self.model,
            &self.opt,
            self.step,
            (self.step.saturating_sub(1)) / self.steps_per_epoch,
            self.tokens_seen,
        )
    }

    /// Runs steps until the schedule ends (or `stop_after_step`), feeding
    /// every metrics row to `on_row`. When `checkpoint_dir` is given, a
    /// checkpoint lands every `checkpoint_every` steps and at the last
    /// executed step.
    pub fn run(
        &mut self,
        vocab: &Vocab,
        data: &TaskData,
        checkpoint_dir: Option<&Path>,
        stop_after_step: Option<u64>,
        mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<()> {
        if data.train.len() != self.corpus_size {
            return Err(Error::Config(format!(
                "trainer was sized for {} examples but the corpus holds {}",
                self.corpus_size,
                data.train.len()
            )));
        }
        let total = self.total_steps();
        let mut order: Option<(u64, Vec<usize>)> = None;
        while self.step < total && stop_after_step.map_or(true, |s| self.step < s) {
            let step = self.step + 1;
            let epoch = (step - 1) / self.steps_per_epoch;
            let cursor = ((step - 1) % self.steps_per_epoch) as usize;
            if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
                order = Some((epoch, epoch_order(self.cfg.seed, epoch, self.corpus_size)));
            }
            let shuffled = &order.as_ref().expect("order cached").1;
            let b = self.cfg.batch_size;
            let batch = shuffled[cursor * b..(cursor + 1) * b].to_vec();

            let report = self.train_step(vocab, data, &batch, step, epoch)?;
            on_row(&report.row)?;

            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                let last =
                    self.step == total || stop_after_step.map_or(false, |s| self.step >= s);
                if (every > 0 && step % every == 0) || last {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(())
    }

    /// One optimization step over `batch` (indices into `data.train`).
    fn train_step(
        &mut self,
        vocab: &Vocab,
        data: &TaskData,
        batch: &[usize],
        step: u64,
        epoch: u64,
    ) -> Result<StepReport> {
        let model = &self.model;
        let spec = self.loss;
        let cfg = self.cfg;
        let vocab_size = model.config().vocab_size;

        // Per-sequence graphs may run in parallel; the collected order is
        // the slot order, so the reduction below is fixed.
        let results: Vec<(f64, Vec<RolloutOutcome>, usize, Vec<Vec<f64>>)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let ex = &data.train[idx];
                let g = crate::tensor::Graph::new();
                let bound = model.bind(&g)?;
                let key = RolloutKey { seed: cfg.seed, step, seq: slot as u64 };
                let plan = match spec.objective {
                    Objective::Otr => RolloutPlan::Sample(key),
                    _ => RolloutPlan::None,
                };
                let prepared = build_objective(&g, model, &bound, ex, &spec, plan)?;
                g.backward(&prepared.total)?;
                let grads: Vec<Vec<f64>> = bound
                    .iter()
                    .zip(model.parameters())
                    .map(|(b, p)| b.grad().unwrap_or_else(|| vec![0.0; p.values.len()]))
                    .collect();
                let outcomes = match spec.objective {
                    Objective::Otr => prepared.outcomes,
                    _ if cfg.measure_gt => loss::rollout_positions(
                        &prepared.response_logits,
                        vocab_size,
                        ex.response_ids(),
                        spec.k_samples,
                        1.0,
                        key,
                    )?,
                    _ => Vec::new(),
                };
                Ok((prepared.breakdown.total, outcomes, ex.total_len(), grads))
            })
            .collect::<Result<Vec<_>>>()?;

        let b = batch.len() as f64;
        let train_loss = results.iter().map(|r| r.0).sum::<f64>() / b;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite { step: step as usize, batch: batch.to_vec() });
        }

        let mut grads: Vec<Vec<f64>> = self
            .model
            .parameters()
            .iter()
            .map(|p| vec![0.0; p.values.len()])
            .collect();
        for (_, _, _, seq_grads) in &results {
            for (acc, g) in grads.iter_mut().zip(seq_grads) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        for g in &mut grads {
            for x in g.iter_mut() {
                *x /= b;
            }
        }

        let mut norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        if let Some(clip) = cfg.clip_norm {
            if norm > clip {
                let scale = clip / norm;
                for g in &mut grads {
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                }
                norm = clip;
            }
        }

        let lr = self.schedule.lr_at(step)?;
        self.opt.apply(self.model.parameters_mut(), &grads, lr)?;
        self.step = step;
        self.tokens_seen += results.iter().map(|r| r.2 as u64).sum::<u64>();

        let outcomes: Vec<RolloutOutcome> =
            results.into_iter().flat_map(|r| r.1).collect();
        let (gt_fraction, mean_n_gt) = if outcomes.is_empty() {
            (None, None)
        } else {
            let m = gt_count_metrics(&outcomes)?;
            (Some(m.gt_fraction), Some(m.mean_n_gt))
        };

        let evaluating = step % self.cfg.eval_every == 0 || step == self.total_steps();
        let (eval_in_acc, eval_ood_acc) = if evaluating {
            let run = |set: &[Example]| -> Result<f64> {
                evaluate(
                    &self.model,
                    vocab,
                    set,
                    EvalMode::Greedy,
                    self.cfg.eval_max_new,
                    self.cfg.seed,
                    step,
                )
            };
            (Some(run(&data.eval_in)?), Some(run(&data.eval_ood)?))
        } else {
            (None, None)
        };

        Ok(StepReport {
            row: MetricsRow {
                step,
                epoch,
                lr,
                train_loss,
                gt_fraction,
                mean_n_gt,
                eval_in_acc,
                eval_ood_acc,
                tokens_seen: self.tokens_seen,
            },
            outcomes,
            grad_norm: norm,
        })
    }
}
