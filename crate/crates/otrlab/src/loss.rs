//! Training objectives: SFT, DFT, and the one-token-rollout (OTR) Monte
//! Carlo objective, plus a closed-form exact-expectation oracle.
//!
//! The OTR objective, per response position `t` with ground-truth token
//! `x_t`:
//!
//! 1. Form the sampling policy `pi' = softmax(logits / kappa)` (temperature
//!    only flattens sampling; it never rescales the scored policy).
//! 2. Draw `K` candidate tokens i.i.d. from `pi'` via a counter-keyed
//!    stream.
//! 3. Reward each candidate: 1 if it equals `x_t`, else `beta`.
//! 4. Score under the *untempered* policy:
//!    `loss_t = -(1/K) [ N_gt * log pi(x_t) + beta * sum_j log pi(a'_j) ]`
//!    where the sum runs over wrong candidates with multiplicity and `N_gt`
//!    counts candidates equal to `x_t`.
//!
//! The sequence loss is the mean of `loss_t` over response positions;
//! prompt positions never contribute. Rewards and sample identities are
//! constants of the graph — gradients flow only through the `log pi`
//! terms.
//!
//! The grouped form above is evaluated from candidate counts rather than
//! `K` separate lookups; it is algebraically identical to the per-sample
//! average and keeps the graph at `O(unique tokens)` nodes.
//!
//! [`exact_otr_expectation`] sums the same integrand over the whole
//! vocabulary instead of sampling, giving the unbiasedness suites a
//! closed-form target. With `beta = 0` and `kappa = 1` it collapses to the
//! DFT per-token loss `-pi(x_t) * log pi(x_t)` exactly.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::Error;
use crate::model::Model;
use crate::rng;
use crate::tensor::{Graph, Var};
use crate::Result;

/// Which training objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sft,
    Dft,
    Otr,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Dft => "dft",
            Objective::Otr => "otr",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Objective> {
        match s {
            "sft" => Ok(Objective::Sft),
            "dft" => Ok(Objective::Dft),
            "otr" => Ok(Objective::Otr),
            other => Err(Error::InvalidInput(format!(
                "unknown objective {other:?} (expected sft, dft, or otr)"
            ))),
        }
    }
}

/// Objective hyperparameters. `kappa`, `k_samples`, and `beta` are ignored
/// unless the objective is OTR (side-rollout diagnostics reuse `k_samples`,
/// but never the loss).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub objective: Objective,
    pub kappa: f64,
    pub k_samples: usize,
    pub beta: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { objective: Objective::Sft, kappa: 1.3, k_samples: 256, beta: -0.1 }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::Config(format!(
                "loss.kappa must be positive and finite, got {}",
                self.kappa
            )));
        }
        if self.k_samples < 1 {
            return Err(Error::Config("loss.k_samples must be at least 1".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config(format!("loss.beta must be finite, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Identifies the rollout streams of one sequence within one step.
#[derive(Debug, Clone, Copy)]
pub struct RolloutKey {
    pub seed: u64,
    pub step: u64,
    pub seq: u64,
}

/// The candidate draws at one response position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RolloutOutcome {
    gt_id: usize,
    sampled_ids: Vec<usize>,
    n_gt: usize,
    unique_wrong: BTreeMap<usize, usize>,
}

impl RolloutOutcome {
    pub fn new(gt_id: usize, sampled_ids: Vec<usize>) -> RolloutOutcome {
        let mut n_gt = 0;
        let mut unique_wrong = BTreeMap::new();
        for &id in &sampled_ids {
            if id == gt_id {
                n_gt += 1;
            } else {
                *unique_wrong.entry(id).or_insert(0) += 1;
            }
        }
        RolloutOutcome { gt_id, sampled_ids, n_gt, unique_wrong }
    }

    pub fn gt_id(&self) -> usize {
        self.gt_id
    }

    pub fn sampled_ids(&self) -> &[usize] {
        &self.sampled_ids
    }

    /// Number of candidates (`K`).
    pub fn k(&self) -> usize {
        self.sampled_ids.len()
    }

    /// Count of candidates equal to the ground-truth token.
    pub fn n_gt(&self) -> usize {
        self.n_gt
    }

    /// Wrong-token multiplicities, in ascending token order.
    pub fn unique_wrong(&self) -> &BTreeMap<usize, usize> {
        &self.unique_wrong
    }
}

/// Scalar components of one sequence loss. `total == gt_term +
/// penalty_term == mean(per_token)`; for SFT and DFT the penalty term is
/// zero by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub gt_term: f64,
    pub penalty_term: f64,
    pub per_token: Vec<f64>,
}

/// Rollout concentration diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtMetrics {
    /// Fraction of all candidates that hit the ground truth, in `[0, 1]`.
    pub gt_fraction: f64,
    /// Average ground-truth hits per position.
    pub mean_n_gt: f64,
}

/// The sampling policy `softmax(logits / kappa)`, computed with the
/// max-shift trick. Flattens toward uniform as `kappa` grows but never
/// changes the argmax.
pub fn sampling_policy(logits: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive and finite, got {kappa}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidInput("sampling policy over empty logits".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidInput("sampling policy requires finite logits".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / kappa;
    let mut probs: Vec<f64> = logits.iter().map(|&l| (l / kappa - m).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

/// Validates that `probs` is a probability vector (entries non-negative
/// and finite, total within 1e-9 of one).
fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty probability vector".into()));
    }
    if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidInput("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {total}, expected 1 within 1e-9"
        )));
    }
    Ok(())
}

/// Draws `k` i.i.d. token ids from `probs` by inverse CDF over the
/// counter-keyed stream `(seed, step, seq, pos)`. Deterministic in the
/// key; independent of any other stream.
pub fn sample_candidates(
    probs: &[f64],
    k: usize,
    key: RolloutKey,
    pos: u64,
) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidInput("candidate count must be at least 1".into()));
    }
    check_probs(probs)?;
    let mut stream = rng::rollout_stream(key.seed, key.step, key.seq, pos);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let u: f64 = stream.gen();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        out.push(chosen);
    }
    Ok(out)
}

/// The per-candidate reward: 1 for the ground-truth token, `beta`
/// otherwise. A constant of the autodiff graph.
pub fn reward(sampled_id: usize, gt_id: usize, beta: f64) -> f64 {
    if sampled_id == gt_id {
        1.0
    } else {
        beta
    }
}

/// The grouped OTR loss at one position, as a graph node over `log_probs`
/// (a 1-D `[V]` tensor of log-probabilities under the untempered policy):
///
/// `-(1/K) [ N_gt * log pi(gt) + beta * sum_wrong mult * log pi(a') ]`
///
/// Gradient support is exactly the sampled tokens' log-probabilities: the
/// ground-truth lookup is emitted only when `N_gt > 0`.
pub fn otr_token_loss(
    log_probs: &Var,
    gt_id: usize,
    outcome: &RolloutOutcome,
    beta: f64,
) -> Result<Var> {
    let (total, _, _) = otr_token_parts(log_probs, gt_id, outcome, beta)?;
    Ok(total)
}

/// As [`otr_token_loss`], additionally returning the scalar values of the
/// ground-truth and penalty terms.
fn otr_token_parts(
    log_probs: &Var,
    gt_id: usize,
    outcome: &RolloutOutcome,
    beta: f64,
) -> Result<(Var, f64, f64)> {
    let shape = log_probs.shape();
    if shape.len() != 1 {
        return Err(Error::Shape(format!(
            "otr_token_loss expects a 1-D log-probability vector, got rank {}",
            shape.len()
        )));
    }
    if outcome.gt_id() != gt_id {
        return Err(Error::InvalidInput(format!(
            "outcome ground truth {} does not match position ground truth {gt_id}",
            outcome.gt_id()
        )));
    }
    let wrong_total: usize = outcome.unique_wrong().values().sum();
    if outcome.n_gt() + wrong_total != outcome.k() {
        return Err(Error::InvalidInput("inconsistent rollout outcome counts".into()));
    }
    if gt_id >= shape[0] {
        return Err(Error::InvalidInput(format!(
            "ground-truth id {gt_id} out of range for vocabulary of {}",
            shape[0]
        )));
    }
    let g = log_probs.graph().clone();
    let k = outcome.k() as f64;

    let gt = if outcome.n_gt() > 0 {
        log_probs
            .select_indices(&[gt_id])?
            .sum()
            .scale(-(outcome.n_gt() as f64) / k)
    } else {
        g.scalar(0.0)
    };
    let gt_value = gt.scalar_value()?;

    let pen = if outcome.unique_wrong().is_empty() {
        g.scalar(0.0)
    } else {
        let ids: Vec<usize> = outcome.unique_wrong().keys().copied().collect();
        let coeffs: Vec<f64> = outcome
            .unique_wrong()
            .values()
            .map(|&m| -beta * m as f64 / k)
            .collect();
        let picked = log_probs.select_indices(&ids)?;
        let n = ids.len();
        g.constant(coeffs, &[n])?.mul(&picked)?.sum()
    };
    let pen_value = pen.scalar_value()?;

    Ok((gt.add(&pen)?, gt_value, pen_value))
}

/// Exact expectation of the OTR per-position loss over the whole
/// vocabulary: `-sum_a pi'(a) * R(a, gt) * log pi(a)`, with `pi'` the
/// tempered sampling policy recovered from `log_probs` (softmax is
/// shift-invariant, so `softmax(log_probs / kappa)` equals the tempered
/// logits policy exactly).
pub fn exact_otr_expectation(
    log_probs: &[f64],
    gt_id: usize,
    kappa: f64,
    beta: f64,
) -> Result<f64> {
    let coeffs = exact_coefficients(log_probs, gt_id, kappa, beta)?;
    Ok(-coeffs.iter().zip(log_probs).map(|(&c, &lp)| c * lp).sum::<f64>())
}

/// Graph version of [`exact_otr_expectation`]: the weights `pi'(a) * R(a)`
/// are constants of the graph, so the gradient flows only through
/// `log pi`, matching the stop-gradient treatment of rewards and sampling.
pub fn exact_otr_expectation_node(
    log_probs: &Var,
    gt_id: usize,
    kappa: f64,
    beta: f64,
) -> Result<Var> {
    let shape = log_probs.shape();
    if shape.len() != 1 {
        return Err(Error::Shape(format!(
            "exact expectation expects a 1-D log-probability vector, got rank {}",
            shape.len()
        )));
    }
    let values = log_probs.values();
    let coeffs = exact_coefficients(&values, gt_id, kappa, beta)?;
    let n = coeffs.len();
    let g = log_probs.graph().clone();
    Ok(g.constant(coeffs, &[n])?.mul(log_probs)?.sum().scale(-1.0))
}

/// `pi'(a) * R(a, gt)` for every token, after validating the inputs.
fn exact_coefficients(
    log_probs: &[f64],
    gt_id: usize,
    kappa: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if log_probs.is_empty() {
        return Err(Error::InvalidInput("empty log-probability vector".into()));
    }
    if gt_id >= log_probs.len() {
        return Err(Error::InvalidInput(format!(
            "ground-truth id {gt_id} out of range for vocabulary of {}",
            log_probs.len()
        )));
    }
    if log_probs.iter().any(|lp| !lp.is_finite()) {
        return Err(Error::InvalidInput("log probabilities must be finite".into()));
    }
    let mass: f64 = log_probs.iter().map(|&lp| lp.exp()).sum();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "log probabilities exponentiate to total mass {mass}, expected 1"
        )));
    }
    let tempered = sampling_policy(log_probs, kappa)?;
    Ok(tempered
        .iter()
        .enumerate()
        .map(|(a, &p)| p * reward(a, gt_id, beta))
        .collect())
}

/// Aggregates rollout outcomes into concentration metrics. All outcomes
/// must share one `K`.
pub fn gt_count_metrics(outcomes: &[RolloutOutcome]) -> Result<GtMetrics> {
    let k = match outcomes.first() {
        Some(o) => o.k(),
        None => return Err(Error::InvalidInput("gt_count_metrics on an empty list".into())),
    };
    if outcomes.iter().any(|o| o.k() != k) {
        return Err(Error::InvalidInput("outcomes disagree on candidate count K".into()));
    }
    let t = outcomes.len() as f64;
    let total_gt: usize = outcomes.iter().map(|o| o.n_gt()).sum();
    Ok(GtMetrics {
        gt_fraction: total_gt as f64 / (k as f64 * t),
        mean_n_gt: total_gt as f64 / t,
    })
}

/// Shannon entropy of a probability vector (nats); `p = 0` contributes 0.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// How the OTR path obtains its candidate draws.
pub enum RolloutPlan<'a> {
    /// Sample fresh candidates from the counter-keyed streams.
    Sample(RolloutKey),
    /// Reuse previously drawn outcomes (gradient checks, replay).
    Frozen(&'a [RolloutOutcome]),
    /// No rollout; valid only for SFT and DFT.
    None,
}

/// One sequence's loss, ready for `backward`.
pub struct PreparedLoss {
    /// Scalar loss node on the caller's graph.
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// One outcome per response position (empty for SFT/DFT).
    pub outcomes: Vec<RolloutOutcome>,
    /// Untempered logits of the response rows, row-major `[T, V]`; lets
    /// callers run side rollouts without a second forward pass.
    pub response_logits: Vec<f64>,
}

impl std::fmt::Debug for PreparedLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PreparedLoss")
            .field("breakdown", &self.breakdown)
            .field("outcomes", &self.outcomes.len())
            .finish_non_exhaustive()
    }
}

/// Samples one [`RolloutOutcome`] per response position from row-major
/// `[T, V]` response logits, using stream `(key, position)`.
pub fn rollout_positions(
    response_logits: &[f64],
    vocab: usize,
    response_ids: &[usize],
    k: usize,
    kappa: f64,
    key: RolloutKey,
) -> Result<Vec<RolloutOutcome>> {
    if vocab == 0 || response_logits.len() != response_ids.len() * vocab {
        return Err(Error::Shape(format!(
            "response logits length {} does not match {} positions x vocab {vocab}",
            response_logits.len(),
            response_ids.len()
        )));
    }
    response_ids
        .iter()
        .enumerate()
        .map(|(t, &gt)| {
            let row = &response_logits[t * vocab..(t + 1) * vocab];
            let probs = sampling_policy(row, kappa)?;
            let samples = sample_candidates(&probs, k, key, t as u64)?;
            Ok(RolloutOutcome::new(gt, samples))
        })
        .collect()
}

/// Builds the configured objective for one example on the caller's graph,
/// using an existing parameter binding. This is the trainer's entry point;
/// the value-only wrappers below build a private graph and discard it.
pub fn build_objective(
    g: &Graph,
    model: &Model,
    bound: &[Var],
    example: &Example,
    spec: &LossSpec,
    plan: RolloutPlan<'_>,
) -> Result<PreparedLoss> {
    spec.validate().map_err(|e| Error::InvalidInput(e.to_string()))?;
    if example.response_len() == 0 {
        return Err(Error::InvalidInput("example has an empty response".into()));
    }
    if example.total_len() > model.config().context_len {
        return Err(Error::InvalidInput(format!(
            "example length {} exceeds context length {}",
            example.total_len(),
            model.config().context_len
        )));
    }
    let vocab = model.config().vocab_size;
    let input = example.model_input();
    let rows = example.response_rows();
    let ids = example.response_ids();

    let logits = model.logits_with(g, bound, &input)?;
    let log_probs = logits.log_softmax()?;
    let all_logits = logits.values();
    let mut response_logits = Vec::with_capacity(rows.len() * vocab);
    for &r in &rows {
        response_logits.extend_from_slice(&all_logits[r * vocab..(r + 1) * vocab]);
    }

    let (total, breakdown, outcomes) = match spec.objective {
        Objective::Sft => {
            let (total, breakdown) = sft_from_log_probs(&log_probs, &rows, ids)?;
            (total, breakdown, Vec::new())
        }
        Objective::Dft => {
            let (total, breakdown) = dft_from_log_probs(&log_probs, &rows, ids, None)?;
            (total, breakdown, Vec::new())
        }
        Objective::Otr => {
            let outcomes = match plan {
                RolloutPlan::Sample(key) => rollout_positions(
                    &response_logits,
                    vocab,
                    ids,
                    spec.k_samples,
                    spec.kappa,
                    key,
                )?,
                RolloutPlan::Frozen(outcomes) => {
                    if outcomes.len() != ids.len() {
                        return Err(Error::InvalidInput(format!(
                            "{} frozen outcomes for {} response positions",
                            outcomes.len(),
                            ids.len()
                        )));
                    }
                    if let Some(o) = outcomes.iter().find(|o| o.k() != spec.k_samples) {
                        return Err(Error::InvalidInput(format!(
                            "outcome has K={} but the loss spec requires K={}",
                            o.k(),
                            spec.k_samples
                        )));
                    }
                    outcomes.to_vec()
                }
                RolloutPlan::None => {
                    return Err(Error::InvalidInput(
                        "the OTR objective requires a rollout plan".into(),
                    ))
                }
            };
            let (total, breakdown) =
                otr_from_log_probs(&log_probs, &rows, ids, &outcomes, spec.beta)?;
            (total, breakdown, outcomes)
        }
    };
    Ok(PreparedLoss { total, breakdown, outcomes, response_logits })
}

/// Mean negative log-likelihood over response positions (prompt masked).
pub fn sft_loss(model: &Model, example: &Example) -> Result<LossBreakdown> {
    let spec = LossSpec { objective: Objective::Sft, ..LossSpec::default() };
    value_only(model, example, &spec, RolloutPlan::None).map(|p| p.breakdown)
}

/// Mean of `-sg(pi(x_t)) * log pi(x_t)` over response positions: SFT
/// reweighted by the gradient-stopped token probability.
pub fn dft_loss(model: &Model, example: &Example) -> Result<LossBreakdown> {
    let spec = LossSpec { objective: Objective::Dft, ..LossSpec::default() };
    value_only(model, example, &spec, RolloutPlan::None).map(|p| p.breakdown)
}

/// The Monte Carlo OTR loss for a whole sequence: one forward pass, a
/// keyed rollout per response position, and the mean of the per-position
/// losses. Returns the breakdown and the outcomes (for diagnostics).
pub fn otr_sequence_loss(
    model: &Model,
    example: &Example,
    spec: &LossSpec,
    key: RolloutKey,
) -> Result<(LossBreakdown, Vec<RolloutOutcome>)> {
    let spec = LossSpec { objective: Objective::Otr, ..*spec };
    let prepared = value_only(model, example, &spec, RolloutPlan::Sample(key))?;
    Ok((prepared.breakdown, prepared.outcomes))
}

fn value_only(
    model: &Model,
    example: &Example,
    spec: &LossSpec,
    plan: RolloutPlan<'_>,
) -> Result<PreparedLoss> {
    let g = Graph::new();
    let bound: Vec<Var> = model
        .parameters()
        .iter()
        .map(|p| g.leaf(p.values.clone(), &p.shape, false))
        .collect::<Result<_>>()?;
    build_objective(&g, model, &bound, example, spec, plan)
}

/// SFT head over `[L, V]` log-probabilities: gathers the response rows and
/// their target entries, then averages the negated values.
pub fn sft_from_log_probs(
    log_probs: &Var,
    rows: &[usize],
    ids: &[usize],
) -> Result<(Var, LossBreakdown)> {
    let picked = log_probs.gather_rows(rows)?.select_per_row(ids)?;
    let total = picked.mean().scale(-1.0);
    let per_token: Vec<f64> = picked.values().iter().map(|&lp| -lp).collect();
    let value = total.scalar_value()?;
    Ok((total, LossBreakdown { total: value, gt_term: value, penalty_term: 0.0, per_token }))
}

/// DFT head over `[L, V]` log-probabilities. The per-position weights are
/// `pi(x_t)` evaluated at the current values and treated as constants
/// (stop-gradient); `frozen_weights` overrides them, which is what keeps
/// finite-difference checks meaningful — both sides must see the same
/// constants.
pub fn dft_from_log_probs(
    log_probs: &Var,
    rows: &[usize],
    ids: &[usize],
    frozen_weights: Option<&[f64]>,
) -> Result<(Var, LossBreakdown)> {
    let picked = log_probs.gather_rows(rows)?.select_per_row(ids)?;
    let weights: Vec<f64> = match frozen_weights {
        Some(w) => {
            if w.len() != ids.len() {
                return Err(Error::InvalidInput(format!(
                    "{} frozen weights for {} response positions",
                    w.len(),
                    ids.len()
                )));
            }
            w.to_vec()
        }
        None => picked.values().iter().map(|&lp| lp.exp()).collect(),
    };
    let n = weights.len();
    let g = log_probs.graph().clone();
    let coeff = g.constant(weights.clone(), &[n])?;
    let total = coeff.mul(&picked)?.mean().scale(-1.0);
    let per_token: Vec<f64> =
        picked.values().iter().zip(&weights).map(|(&lp, &w)| -w * lp).collect();
    let value = total.scalar_value()?;
    Ok((total, LossBreakdown { total: value, gt_term: value, penalty_term: 0.0, per_token }))
}

/// OTR head over `[L, V]` log-probabilities with fixed outcomes: the mean
/// of grouped per-position losses, accumulated in position order.
pub fn otr_from_log_probs(
    log_probs: &Var,
    rows: &[usize],
    ids: &[usize],
    outcomes: &[RolloutOutcome],
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    if rows.len() != ids.len() || outcomes.len() != ids.len() || ids.is_empty() {
        return Err(Error::InvalidInput(format!(
            "inconsistent OTR inputs: {} rows, {} ids, {} outcomes",
            rows.len(),
            ids.len(),
            outcomes.len()
        )));
    }
    let vocab = *log_probs.shape().last().unwrap();
    let mut total: Option<Var> = None;
    let mut per_token = Vec::with_capacity(ids.len());
    let mut gt_sum = 0.0;
    let mut pen_sum = 0.0;
    for ((&row, &gt), outcome) in rows.iter().zip(ids).zip(outcomes) {
        let row_probs = log_probs.gather_rows(&[row])?.reshape(&[vocab])?;
        let (loss_t, gt_v, pen_v) = otr_token_parts(&row_probs, gt, outcome, beta)?;
        per_token.push(loss_t.scalar_value()?);
        gt_sum += gt_v;
        pen_sum += pen_v;
        total = Some(match total {
            Some(acc) => acc.add(&loss_t)?,
            None => loss_t,
        });
    }
    let t = ids.len() as f64;
    let total = total.expect("at least one position").scale(1.0 / t);
    let value = total.scalar_value()?;
    Ok((
        total,
        LossBreakdown {
            total: value,
            gt_term: gt_sum / t,
            penalty_term: pen_sum / t,
            per_token,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::model::{ModelConfig, ModelKind};
    use proptest::prelude::*;
    use rand::Rng;

    const KEY: RolloutKey = RolloutKey { seed: 11, step: 1, seq: 0 };

    fn bigram(vocab: usize) -> Model {
        let cfg = ModelConfig {
            kind: ModelKind::Bigram,
            vocab_size: vocab,
            ..ModelConfig::default()
        };
        Model::init(&cfg).unwrap()
    }

    fn log_probs_leaf(g: &Graph, probs: &[f64]) -> Var {
        let lp: Vec<f64> = probs.iter().map(|&p| p.ln()).collect();
        let n = lp.len();
        g.leaf(lp, &[n], true).unwrap()
    }

    #[test]
    fn sampling_policy_uniform_on_symmetric_logits() {
        let p = sampling_policy(&[0.0, 0.0, 0.0, 0.0], 1.3).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn sampling_policy_matches_direct_softmax() {
        let p = sampling_policy(&[(2.0f64).ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_policy_tempered_value() {
        let p = sampling_policy(&[1.0, 0.0], 2.0).unwrap();
        assert!((p[0] - 0.622459).abs() < 1e-6, "got {}", p[0]);
        assert!((p[1] - 0.377541).abs() < 1e-6, "got {}", p[1]);
    }

    #[test]
    fn sampling_policy_rejects_bad_temperature() {
        assert!(sampling_policy(&[0.0], 0.0).is_err());
        assert!(sampling_policy(&[0.0], -1.0).is_err());
        assert!(sampling_policy(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn one_hot_probs_always_sample_the_hot_id() {
        let probs = [0.0, 0.0, 0.0, 1.0];
        let samples = sample_candidates(&probs, 64, KEY, 0).unwrap();
        assert!(samples.iter().all(|&s| s == 3));
    }

    #[test]
    fn uniform_sampling_counts_stay_in_binomial_band() {
        // Binomial(4096, 1/4): sd = sqrt(4096 * 0.25 * 0.75) ~ 27.7, so a
        // 4-sigma band is 1024 +/- 111.
        let probs = [0.25; 4];
        let samples = sample_candidates(&probs, 4096, KEY, 0).unwrap();
        let mut counts = [0usize; 4];
        for &s in &samples {
            counts[s] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as i64 - 1024).abs() <= 111,
                "id {i} drawn {c} times, outside 1024 +/- 111"
            );
        }
    }

    #[test]
    fn same_key_same_samples_different_position_differs() {
        let probs = [0.25; 4];
        let a = sample_candidates(&probs, 32, KEY, 0).unwrap();
        let b = sample_candidates(&probs, 32, KEY, 0).unwrap();
        let c = sample_candidates(&probs, 32, KEY, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn non_normalized_probs_are_rejected() {
        let err = sample_candidates(&[0.5, 0.6], 4, KEY, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "got {err:?}");
        assert!(sample_candidates(&[0.5, 0.5], 0, KEY, 0).is_err());
    }

    #[test]
    fn reward_values() {
        assert_eq!(reward(3, 3, -0.1), 1.0);
        assert_eq!(reward(2, 3, -0.1), -0.1);
        assert_eq!(reward(2, 3, 0.0), 0.0);
    }

    #[test]
    fn otr_token_loss_matches_worked_example() {
        // K=4, two ground-truth hits, one each of two wrong ids,
        // pi = [0.5 (gt), 0.25, 0.25], beta = -0.1:
        // -(1/4)[2 ln .5 - 0.1 (ln .25 + ln .25)] = 0.2772588722239781
        let g = Graph::new();
        let lp = log_probs_leaf(&g, &[0.5, 0.25, 0.25]);
        let outcome = RolloutOutcome::new(0, vec![0, 0, 1, 2]);
        let loss = otr_token_loss(&lp, 0, &outcome, -0.1).unwrap();
        let v = loss.scalar_value().unwrap();
        assert!((v - 0.2772588722239781).abs() < 1e-12, "got {v}");
        assert!((v - 0.277259).abs() < 1e-6);
    }

    #[test]
    fn all_gt_samples_reduce_to_nll() {
        let g = Graph::new();
        let lp = log_probs_leaf(&g, &[0.7, 0.2, 0.1]);
        let outcome = RolloutOutcome::new(0, vec![0; 16]);
        for beta in [-1.0, 0.0, 0.4] {
            let v = otr_token_loss(&lp, 0, &outcome, beta).unwrap().scalar_value().unwrap();
            assert!((v - (-(0.7f64).ln())).abs() < 1e-15, "beta {beta}: got {v}");
        }
    }

    #[test]
    fn zero_hits_zero_beta_is_exactly_zero_with_zero_gradient() {
        let g = Graph::new();
        let lp = log_probs_leaf(&g, &[0.5, 0.25, 0.25]);
        let outcome = RolloutOutcome::new(0, vec![1, 2, 2, 1]);
        assert_eq!(outcome.n_gt(), 0);
        let loss = otr_token_loss(&lp, 0, &outcome, 0.0).unwrap();
        assert_eq!(loss.scalar_value().unwrap(), 0.0);
        g.backward(&loss).unwrap();
        assert!(lp.grad().unwrap().iter().all(|&gr| gr == 0.0));
    }

    #[test]
    fn gradient_support_is_the_sampled_token_set() {
        let support = |beta: f64| -> Vec<usize> {
            let g = Graph::new();
            let lp = log_probs_leaf(&g, &[0.4, 0.3, 0.2, 0.1]);
            let outcome = RolloutOutcome::new(1, vec![1, 3, 3, 1, 1]);
            let loss = otr_token_loss(&lp, 1, &outcome, beta).unwrap();
            g.backward(&loss).unwrap();
            lp.grad()
                .unwrap()
                .iter()
                .enumerate()
                .filter(|(_, &gr)| gr != 0.0)
                .map(|(i, _)| i)
                .collect()
        };
        // Sampled set {1, 3}; changing beta changes values, never support.
        assert_eq!(support(-0.1), vec![1, 3]);
        assert_eq!(support(0.7), vec![1, 3]);
    }

    #[test]
    fn mismatched_outcome_gt_is_rejected() {
        let g = Graph::new();
        let lp = log_probs_leaf(&g, &[0.5, 0.5]);
        let outcome = RolloutOutcome::new(0, vec![0, 1]);
        let err = otr_token_loss(&lp, 1, &outcome, -0.1).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "got {err:?}");
    }

    #[test]
    fn sft_reduction_with_degenerate_sampler() {
        // beta = 0 plus "always sample gt" makes the OTR loss exactly the
        // per-token SFT loss.
        let g = Graph::new();
        let lp = log_probs_leaf(&g, &[0.6, 0.3, 0.1]);
        let outcome = RolloutOutcome::new(0, vec![0; 8]);
        let v = otr_token_loss(&lp, 0, &outcome, 0.0).unwrap().scalar_value().unwrap();
        assert_eq!(v, -lp.values()[0]);
    }

    #[test]
    fn exact_expectation_two_token_example() {
        let lp = [(0.5f64).ln(), (0.5f64).ln()];
        let v = exact_otr_expectation(&lp, 0, 1.0, -0.1).unwrap();
        assert!((v - 0.311916).abs() < 1e-6, "got {v}");
        // Closed form: -0.5 ln .5 (1 - 0.1)
        assert!((v - (-0.5 * (0.5f64).ln() * 0.9)).abs() < 1e-15);
    }

    #[test]
    fn exact_expectation_uniform_closed_form() {
        for v in [2usize, 3, 5, 8, 13] {
            for beta in [-1.0, -0.1, 0.0, 0.01, 0.3] {
                let lp = vec![-(v as f64).ln(); v];
                let got = exact_otr_expectation(&lp, v / 2, 1.0, beta).unwrap();
                let want = ((v as f64).ln() / v as f64) * (1.0 + beta * (v as f64 - 1.0));
                assert!((got - want).abs() < 1e-12, "V={v} beta={beta}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn exact_expectation_beta0_kappa1_equals_dft_per_token() {
        let probs = [0.62f64, 0.2, 0.13, 0.05];
        let lp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        for gt in 0..4 {
            let got = exact_otr_expectation(&lp, gt, 1.0, 0.0).unwrap();
            let want = -probs[gt] * probs[gt].ln();
            assert!((got - want).abs() < 1e-12, "gt {gt}: {got} vs {want}");
        }
    }

    #[test]
    fn exact_expectation_rejects_unnormalized_input() {
        let err = exact_otr_expectation(&[-0.1, -0.1], 0, 1.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "got {err:?}");
    }

    #[test]
    fn dft_per_token_value_and_maximum() {
        let half = 0.5f64;
        assert!((-half * half.ln() - 0.346574).abs() < 1e-6);
        let e_inv = 1.0 / std::f64::consts::E;
        let max = -e_inv * e_inv.ln();
        assert!((max - e_inv).abs() < 1e-15);
        for p in [0.1, 0.3, 0.5, 0.9, 0.99] {
            assert!(-p * f64::ln(p) <= max + 1e-15);
        }
    }

    #[test]
    fn dft_logits_gradient_is_weighted_softmax_minus_onehot() {
        // d/dz of -sg(pi_gt) log pi_gt = pi_gt * (softmax(z) - onehot(gt))
        let g = Graph::new();
        let z = g.leaf(vec![0.3, -0.8, 1.2], &[1, 3], true).unwrap();
        let lp = z.log_softmax().unwrap();
        let (total, _) = dft_from_log_probs(&lp, &[0], &[2], None).unwrap();
        g.backward(&total).unwrap();
        let grad = z.grad().unwrap();
        let p: Vec<f64> = lp.values().iter().map(|&v| v.exp()).collect();
        for i in 0..3 {
            let want = p[2] * (p[i] - if i == 2 { 1.0 } else { 0.0 });
            assert!((grad[i] - want).abs() < 1e-14, "coord {i}: {} vs {want}", grad[i]);
        }
    }

    #[test]
    fn sft_loss_of_uniform_model_is_ln_v() {
        let vocab = Vocab::default_task();
        let mut model = bigram(vocab.size());
        let n = model.param_count();
        model.set_flat_values(&vec![0.0; n]).unwrap();
        let ex = Example::from_text(&vocab, "1+2=", "3", 32).unwrap();
        let b = sft_loss(&model, &ex).unwrap();
        let want = (vocab.size() as f64).ln();
        assert!((b.total - want).abs() < 1e-12, "{} vs {want}", b.total);
        assert_eq!(b.per_token.len(), ex.response_len());
        assert!(b.per_token.iter().all(|&t| (t - want).abs() < 1e-12));
    }

    #[test]
    fn sft_loss_is_zero_under_a_certain_model() {
        // Saturated logits make pi(target) = 1 exactly in f64.
        let mut model = bigram(4);
        let ex = Example::from_ids(vec![1], vec![2], 4, 32).unwrap();
        {
            let table = &mut model.parameters_mut()[0];
            // Row for token 1 (the only input): certain of id 2.
            for c in 0..4 {
                table.values[4 + c] = if c == 2 { 1000.0 } else { -1000.0 };
            }
        }
        let b = sft_loss(&model, &ex).unwrap();
        assert_eq!(b.total, 0.0);
        let d = dft_loss(&model, &ex).unwrap();
        assert_eq!(d.total, 0.0);
    }

    #[test]
    fn sft_loss_matches_hand_summed_bigram() {
        let mut model = bigram(4);
        let table: Vec<f64> = (0..16).map(|i| (i as f64) * 0.17 - 1.1).collect();
        model.set_flat_values(&table).unwrap();
        let ex = Example::from_ids(vec![1], vec![3, 0, 2], 4, 32).unwrap();
        let b = sft_loss(&model, &ex).unwrap();

        // Input [1, 3, 0]; position t is scored by the table row of
        // input[t] against target response[t].
        let nll = |row: usize, target: usize| -> f64 {
            let logits = &table[row * 4..(row + 1) * 4];
            let z: f64 = logits.iter().map(|&l| l.exp()).sum();
            -(logits[target] - z.ln())
        };
        let want = (nll(1, 3) + nll(3, 0) + nll(0, 2)) / 3.0;
        assert!((b.total - want).abs() < 1e-12, "{} vs {want}", b.total);
    }

    #[test]
    fn sequence_loss_masks_prompt_and_averages() {
        let vocab = Vocab::default_task();
        let model = bigram(vocab.size());
        let ex = Example::from_text(&vocab, "12+34=", "46", 32).unwrap();
        let spec = LossSpec { objective: Objective::Otr, k_samples: 8, ..LossSpec::default() };
        let (b, outcomes) = otr_sequence_loss(&model, &ex, &spec, KEY).unwrap();
        assert_eq!(b.per_token.len(), ex.response_len());
        assert_eq!(outcomes.len(), ex.response_len());
        let mean: f64 = b.per_token.iter().sum::<f64>() / b.per_token.len() as f64;
        assert!((b.total - mean).abs() < 1e-12);
        assert!((b.total - (b.gt_term + b.penalty_term)).abs() < 1e-12);
    }

    #[test]
    fn single_response_token_equals_token_loss() {
        let vocab = Vocab::default_task();
        let model = bigram(vocab.size());
        let ex = Example::from_ids(vec![BOS_ID, 5], vec![2], vocab.size(), 32).unwrap();
        let spec = LossSpec {
            objective: Objective::Otr,
            k_samples: 16,
            ..LossSpec::default()
        };
        let (b, outcomes) = otr_sequence_loss(&model, &ex, &spec, KEY).unwrap();

        // Recompute the single position by hand through the public pieces.
        let input = ex.model_input();
        let logits = model.logits_values(&input).unwrap();
        let v = vocab.size();
        let row = &logits[(input.len() - 1) * v..];
        let g = Graph::new();
        let lp_full: Vec<f64> = {
            let z: f64 = row.iter().map(|&l| l.exp()).sum();
            row.iter().map(|&l| l - z.ln()).collect()
        };
        let lp = g.leaf(lp_full, &[v], false).unwrap();
        let token = otr_token_loss(&lp, 2, &outcomes[0], spec.beta).unwrap();
        let tv = token.scalar_value().unwrap();
        assert!((b.total - tv).abs() < 1e-9, "{} vs {tv}", b.total);
    }

    const BOS_ID: usize = crate::data::BOS;

    #[test]
    fn otr_requires_a_rollout_plan() {
        let vocab = Vocab::default_task();
        let model = bigram(vocab.size());
        let ex = Example::from_text(&vocab, "1+1=", "2", 32).unwrap();
        let spec = LossSpec { objective: Objective::Otr, ..LossSpec::default() };
        let g = Graph::new();
        let bound = model.bind(&g).unwrap();
        let err =
            build_objective(&g, &model, &bound, &ex, &spec, RolloutPlan::None).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "got {err:?}");
    }

    #[test]
    fn frozen_outcomes_with_wrong_k_are_rejected() {
        let vocab = Vocab::default_task();
        let model = bigram(vocab.size());
        let ex = Example::from_ids(vec![1, 5], vec![2], vocab.size(), 32).unwrap();
        let spec = LossSpec { objective: Objective::Otr, k_samples: 8, ..LossSpec::default() };
        let outcomes = vec![RolloutOutcome::new(2, vec![2, 3])]; // K=2, spec wants 8
        let g = Graph::new();
        let bound = model.bind(&g).unwrap();
        let err = build_objective(&g, &model, &bound, &ex, &spec, RolloutPlan::Frozen(&outcomes))
            .unwrap_err();
        assert!(err.to_string().contains("K=2"), "got: {err}");
    }

    #[test]
    fn gt_metrics_boundaries() {
        let all = vec![RolloutOutcome::new(1, vec![1; 8]), RolloutOutcome::new(2, vec![2; 8])];
        let m = gt_count_metrics(&all).unwrap();
        assert_eq!(m.gt_fraction, 1.0);
        assert_eq!(m.mean_n_gt, 8.0);
        let none = vec![RolloutOutcome::new(1, vec![0; 8])];
        let m = gt_count_metrics(&none).unwrap();
        assert_eq!(m.gt_fraction, 0.0);
        assert!(gt_count_metrics(&[]).is_err());
    }

    #[test]
    fn tempering_raises_entropy_and_keeps_argmax() {
        let logits = [2.0, 0.5, -1.0, 0.0];
        let base = sampling_policy(&logits, 1.0).unwrap();
        for kappa in [1.1, 1.3, 2.0] {
            let tempered = sampling_policy(&logits, kappa).unwrap();
            assert!(
                entropy(&tempered) > entropy(&base),
                "kappa {kappa}: entropy did not rise"
            );
            let argmax = |p: &[f64]| {
                p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
            };
            assert_eq!(argmax(&tempered), argmax(&base));
        }
    }

    proptest! {
        /// Grouped Eq-9-style evaluation agrees with the ungrouped
        /// per-sample average.
        #[test]
        fn prop_grouped_matches_ungrouped(
            seed in 0u64..500,
            k in 1usize..32,
            vocab in 2usize..8,
            beta in -1.0f64..1.0,
        ) {
            use rand::SeedableRng;
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..vocab).map(|_| r.gen_range(-2.0..2.0)).collect();
            let z: f64 = logits.iter().map(|&l| l.exp()).sum();
            let lp: Vec<f64> = logits.iter().map(|&l| l - z.ln()).collect();
            let gt = r.gen_range(0..vocab);
            let samples: Vec<usize> = (0..k).map(|_| r.gen_range(0..vocab)).collect();
            let outcome = RolloutOutcome::new(gt, samples.clone());

            let g = Graph::new();
            let lp_var = g.leaf(lp.clone(), &[vocab], false).unwrap();
            let grouped = otr_token_loss(&lp_var, gt, &outcome, beta)
                .unwrap().scalar_value().unwrap();
            let ungrouped: f64 = -samples.iter()
                .map(|&a| reward(a, gt, beta) * lp[a])
                .sum::<f64>() / k as f64;
            let denom = f64::max(1e-12, grouped.abs().max(ungrouped.abs()));
            prop_assert!(((grouped - ungrouped) / denom).abs() < 1e-12,
                "grouped {} vs ungrouped {}", grouped, ungrouped);
        }

        /// Breakdown bookkeeping holds for any sampled sequence loss.
        #[test]
        fn prop_breakdown_consistency(seed in 0u64..40) {
            let vocab = Vocab::default_task();
            let model = bigram(vocab.size());
            let ex = Example::from_text(&vocab, "7+8=", "15", 32).unwrap();
            let spec = LossSpec {
                objective: Objective::Otr, k_samples: 8, ..LossSpec::default()
            };
            let key = RolloutKey { seed, step: 1, seq: 0 };
            let (b, outcomes) = otr_sequence_loss(&model, &ex, &spec, key).unwrap();
            let mean: f64 = b.per_token.iter().sum::<f64>() / b.per_token.len() as f64;
            prop_assert!((b.total - mean).abs() < 1e-12);
            prop_assert!((b.total - (b.gt_term + b.penalty_term)).abs() < 1e-12);
            for o in &outcomes {
                let wrong: usize = o.unique_wrong().values().sum();
                prop_assert_eq!(o.n_gt() + wrong, o.k());
            }
        }
    }
}
