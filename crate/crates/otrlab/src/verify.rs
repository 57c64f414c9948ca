//! Verification suites: finite-difference gradient checks for every
//! primitive, Monte Carlo unbiasedness checks against the closed-form
//! expectation, and the exact DFT/SFT reduction identities.
//!
//! Each suite returns a list of named [`Check`]s with measured errors so
//! callers can print one pass/fail line per property. All randomness is
//! derived from the caller's seed; a suite run is fully deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::gradcheck::{grad_check, grad_check_multi};
use crate::loss::{
    self, dft_from_log_probs, exact_otr_expectation, exact_otr_expectation_node,
    otr_from_log_probs, sft_from_log_probs, LossSpec, Objective, RolloutKey, RolloutOutcome,
};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::tensor::{Graph, Var};
use crate::Result;

/// Which verification suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteKind {
    GradCheck,
    Estimator,
    Equivalence,
}

impl SuiteKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteKind::GradCheck => "gradcheck",
            SuiteKind::Estimator => "estimator",
            SuiteKind::Equivalence => "equivalence",
        }
    }
}

impl std::str::FromStr for SuiteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<SuiteKind> {
        match s {
            "gradcheck" => Ok(SuiteKind::GradCheck),
            "estimator" => Ok(SuiteKind::Estimator),
            "equivalence" => Ok(SuiteKind::Equivalence),
            other => Err(Error::Config(format!(
                "unknown suite {other:?} (expected gradcheck, estimator, or equivalence)"
            ))),
        }
    }
}

/// One verified property.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn tol_check(name: &str, err: f64, tol: f64) -> Check {
    Check {
        name: name.to_string(),
        passed: err < tol,
        detail: format!("max err {err:.3e} (tol {tol:.0e})"),
    }
}

/// Runs the named suite with randomness derived from `seed`.
pub fn run_suite(kind: SuiteKind, seed: u64) -> Result<Vec<Check>> {
    match kind {
        SuiteKind::GradCheck => gradcheck_suite(seed),
        SuiteKind::Estimator => Ok(vec![
            estimator_value_check(seed)?,
            estimator_gradient_check(seed)?,
            estimator_trend_check(seed)?,
        ]),
        SuiteKind::Equivalence => equivalence_suite(seed),
    }
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

const POINTS_PER_PRIMITIVE: usize = 100;
const PRIMITIVE_H: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Checks one primitive at [`POINTS_PER_PRIMITIVE`] random points. `build`
/// receives the point's RNG so constants can vary per point, and must
/// return a closure producing a scalar head from the input leaf.
fn primitive_check<F, H>(name: &str, seed: u64, shape: &[usize], mut build: F) -> Result<Check>
where
    F: FnMut(&mut ChaCha8Rng) -> H,
    H: Fn(&Graph, &Var) -> Result<Var> + Sync,
{
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let mut worst = 0.0f64;
    for _ in 0..POINTS_PER_PRIMITIVE {
        let x = uniform(&mut rng, n, -1.0, 1.0);
        let head = build(&mut rng);
        let err = grad_check(head, &x, shape, PRIMITIVE_H)?;
        worst = worst.max(err);
    }
    Ok(tol_check(&format!("gradcheck/{name}"), worst, PRIMITIVE_TOL))
}

/// FNV-1a over the check name, for per-check seed separation.
fn fnv1a(name: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

fn gradcheck_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let weighted = |w: Vec<f64>, v: &Var| -> Result<Var> {
        let n = w.len();
        v.graph().constant(w, &[n])?.mul(&v.reshape(&[n])?).map(|p| p.sum())
    };

    checks.push(primitive_check("add", seed, &[2, 3], |rng| {
        let c = uniform(rng, 6, -1.0, 1.0);
        let w = uniform(rng, 6, -2.0, 2.0);
        move |g: &Graph, x: &Var| weighted(w.clone(), &x.add(&g.constant(c.clone(), &[2, 3])?)?)
    })?);
    checks.push(primitive_check("sub", seed, &[2, 3], |rng| {
        let c = uniform(rng, 6, -1.0, 1.0);
        let w = uniform(rng, 6, -2.0, 2.0);
        move |g: &Graph, x: &Var| weighted(w.clone(), &x.sub(&g.constant(c.clone(), &[2, 3])?)?)
    })?);
    checks.push(primitive_check("mul", seed, &[2, 3], |rng| {
        let c = uniform(rng, 6, 0.5, 1.5);
        let w = uniform(rng, 6, -2.0, 2.0);
        move |g: &Graph, x: &Var| weighted(w.clone(), &x.mul(&g.constant(c.clone(), &[2, 3])?)?)
    })?);
    checks.push(primitive_check("scale", seed, &[5], |rng| {
        let w = uniform(rng, 5, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.scale(1.7))
    })?);
    checks.push(primitive_check("matmul", seed, &[2, 3], |rng| {
        let c = uniform(rng, 6, -1.0, 1.0);
        let w = uniform(rng, 4, -2.0, 2.0);
        move |g: &Graph, x: &Var| {
            weighted(w.clone(), &x.matmul(&g.constant(c.clone(), &[3, 2])?)?)
        }
    })?);
    checks.push(primitive_check("transpose", seed, &[2, 4], |rng| {
        let w = uniform(rng, 8, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.transpose()?)
    })?);
    checks.push(primitive_check("reshape", seed, &[2, 3], |rng| {
        let w = uniform(rng, 6, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.reshape(&[3, 2])?)
    })?);
    checks.push(primitive_check("gather_rows", seed, &[4, 3], |rng| {
        let rows: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let w = uniform(rng, 9, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.gather_rows(&rows)?)
    })?);
    checks.push(primitive_check("slice", seed, &[8], |rng| {
        let w = uniform(rng, 5, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.slice(2, 5)?)
    })?);
    checks.push(primitive_check("masked_add", seed, &[3, 3], |rng| {
        // The mask feeds log_softmax exactly as attention does. The head
        // reads only unmasked outputs (masked ones sit near -1e9 and would
        // swamp the finite difference); a masked input still participates
        // through the normalizer, where both gradients must vanish.
        let mask: Vec<bool> =
            vec![false, true, true, false, false, true, false, false, false];
        let mut w = uniform(rng, 9, -2.0, 2.0);
        for (wi, &m) in w.iter_mut().zip(&mask) {
            if m {
                *wi = 0.0;
            }
        }
        move |_: &Graph, x: &Var| {
            weighted(w.clone(), &x.masked_add(&mask, -1e9)?.log_softmax()?)
        }
    })?);
    checks.push(primitive_check("log_softmax", seed, &[2, 4], |rng| {
        let w = uniform(rng, 8, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.log_softmax()?)
    })?);
    checks.push(primitive_check("exp", seed, &[6], |rng| {
        let w = uniform(rng, 6, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.exp()?)
    })?);
    checks.push(primitive_check("gelu", seed, &[6], |rng| {
        let w = uniform(rng, 6, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.gelu()?)
    })?);
    checks.push(primitive_check("layer_norm", seed, &[2, 5], |rng| {
        let gain = uniform(rng, 5, 0.5, 1.5);
        let bias = uniform(rng, 5, -0.5, 0.5);
        let w = uniform(rng, 10, -2.0, 2.0);
        move |g: &Graph, x: &Var| {
            let gain = g.constant(gain.clone(), &[5])?;
            let bias = g.constant(bias.clone(), &[5])?;
            weighted(w.clone(), &x.layer_norm(&gain, &bias)?)
        }
    })?);
    checks.push(primitive_check("layer_norm_params", seed, &[10], |rng| {
        let xv = uniform(rng, 10, -1.0, 1.0);
        let w = uniform(rng, 10, -2.0, 2.0);
        move |g: &Graph, leaf: &Var| {
            // The leaf packs gain (first 5) and bias (last 5).
            let gain = leaf.slice(0, 5)?;
            let bias = leaf.slice(5, 5)?;
            let x = g.constant(xv.clone(), &[2, 5])?;
            weighted(w.clone(), &x.layer_norm(&gain, &bias)?)
        }
    })?);
    checks.push(primitive_check("sum", seed, &[2, 3], |_| {
        |_: &Graph, x: &Var| Ok(x.sum().scale(0.7))
    })?);
    checks.push(primitive_check("mean", seed, &[2, 3], |_| {
        |_: &Graph, x: &Var| Ok(x.mean().scale(1.3))
    })?);
    checks.push(primitive_check("select_per_row", seed, &[3, 4], |rng| {
        let ids: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let w = uniform(rng, 3, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.select_per_row(&ids)?)
    })?);
    checks.push(primitive_check("select_indices", seed, &[6], |rng| {
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
        let w = uniform(rng, 4, -2.0, 2.0);
        move |_: &Graph, x: &Var| weighted(w.clone(), &x.select_indices(&ids)?)
    })?);

    checks.push(transformer_heads_check(seed)?);
    Ok(checks)
}

/// Configuration of the small transformer used by the objective-level
/// gradient checks.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Transformer,
        vocab_size: 8,
        context_len: 8,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        init_seed: 7,
    }
}

/// SFT, DFT (frozen weights), and OTR (frozen outcomes) losses of a tiny
/// transformer, all finite-difference-checked through one shared forward
/// per perturbation.
pub fn objective_heads_error(
    model: &Model,
    tokens: &[usize],
    rows: &[usize],
    ids: &[usize],
    outcomes: &[RolloutOutcome],
    beta: f64,
    h: f64,
) -> Result<Vec<f64>> {
    // Freeze the DFT weights at the unperturbed point; the stop-gradient
    // makes them constants of the objective, so both sides of the finite
    // difference must use the same values.
    let frozen = {
        let g = Graph::new();
        let bound: Vec<Var> = model
            .parameters()
            .iter()
            .map(|p| g.leaf(p.values.clone(), &p.shape, false))
            .collect::<Result<_>>()?;
        let logits = model.logits_with(&g, &bound, tokens)?;
        let picked = logits.log_softmax()?.gather_rows(rows)?.select_per_row(ids)?;
        picked.values().iter().map(|&lp| lp.exp()).collect::<Vec<f64>>()
    };
    let flat = model.flat_values();
    grad_check_multi(
        |g, flat_leaf| {
            let bound = model.bind_flat(flat_leaf)?;
            let logits = model.logits_with(g, &bound, tokens)?;
            let log_probs = logits.log_softmax()?;
            let (sft, _) = sft_from_log_probs(&log_probs, rows, ids)?;
            let (dft, _) = dft_from_log_probs(&log_probs, rows, ids, Some(&frozen))?;
            let (otr, _) = otr_from_log_probs(&log_probs, rows, ids, outcomes, beta)?;
            Ok(vec![sft, dft, otr])
        },
        3,
        &flat,
        &[flat.len()],
        h,
    )
}

fn transformer_heads_check(seed: u64) -> Result<Check> {
    let cfg = ModelConfig { init_seed: seed ^ 0x5eed, ..check_model_config() };
    let model = Model::init(&cfg)?;
    let tokens: Vec<usize> = vec![1, 4, 2, 7, 0, 3, 5, 6];
    let rows: Vec<usize> = (2..7).collect();
    let ids: Vec<usize> = vec![7, 0, 3, 5, 6];
    let spec = LossSpec { objective: Objective::Otr, k_samples: 8, ..LossSpec::default() };
    let outcomes = sample_outcomes(&model, &tokens, &rows, &ids, &spec, seed)?;
    let errs =
        objective_heads_error(&model, &tokens, &rows, &ids, &outcomes, spec.beta, 1e-4)?;
    let worst = errs.iter().cloned().fold(0.0f64, f64::max);
    Ok(tol_check("gradcheck/transformer_objectives", worst, 1e-4))
}

/// Draws one frozen rollout per response row from the model's current
/// logits.
fn sample_outcomes(
    model: &Model,
    tokens: &[usize],
    rows: &[usize],
    ids: &[usize],
    spec: &LossSpec,
    seed: u64,
) -> Result<Vec<RolloutOutcome>> {
    let vocab = model.config().vocab_size;
    let logits = model.logits_values(tokens)?;
    let mut response = Vec::with_capacity(rows.len() * vocab);
    for &r in rows {
        response.extend_from_slice(&logits[r * vocab..(r + 1) * vocab]);
    }
    loss::rollout_positions(
        &response,
        vocab,
        ids,
        spec.k_samples,
        spec.kappa,
        RolloutKey { seed, step: 1, seq: 0 },
    )
}

// ---------------------------------------------------------------------------
// Estimator checks
// ---------------------------------------------------------------------------

/// Parameters shared by the unbiasedness checks: K = 16 candidates at the
/// default temperature and penalty over a small tabular-bigram vocabulary.
const ESTIMATOR_K: usize = 16;
const ESTIMATOR_KAPPA: f64 = 1.3;
const ESTIMATOR_BETA: f64 = -0.1;
const ESTIMATOR_DRAWS: usize = 10_000;

fn estimator_model(seed: u64) -> Result<(Model, Vec<f64>, Vec<f64>, usize)> {
    let cfg = ModelConfig {
        kind: ModelKind::Bigram,
        vocab_size: 8,
        init_seed: seed ^ 0xb19, // distinct stream from the caller's other models
        ..ModelConfig::default()
    };
    let model = Model::init(&cfg)?;
    // Spread the logits so the distribution is far from uniform.
    let mut model = model;
    for v in &mut model.parameters_mut()[0].values {
        *v *= 40.0;
    }
    let token = 3usize;
    let logits: Vec<f64> = model.logits_values(&[token])?;
    let z = logits.iter().map(|&l| l.exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = logits.iter().map(|&l| l - z).collect();
    Ok((model, logits, log_probs, 5 /* ground-truth id */))
}

/// Direct scalar evaluation of the grouped per-position loss.
fn mc_loss_value(log_probs: &[f64], outcome: &RolloutOutcome, beta: f64) -> f64 {
    let k = outcome.k() as f64;
    let mut total = (outcome.n_gt() as f64) * log_probs[outcome.gt_id()];
    for (&id, &mult) in outcome.unique_wrong() {
        total += beta * mult as f64 * log_probs[id];
    }
    -total / k
}

/// Monte Carlo mean of the loss over `draws` rollouts matches the exact
/// expectation within 4 standard errors.
pub fn estimator_value_check(seed: u64) -> Result<Check> {
    let (_, logits, log_probs, gt) = estimator_model(seed)?;
    let exact = exact_otr_expectation(&log_probs, gt, ESTIMATOR_KAPPA, ESTIMATOR_BETA)?;
    let policy = loss::sampling_policy(&logits, ESTIMATOR_KAPPA)?;
    let key = RolloutKey { seed, step: 0, seq: 0 };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..ESTIMATOR_DRAWS {
        let samples = loss::sample_candidates(&policy, ESTIMATOR_K, key, i as u64)?;
        let value = mc_loss_value(&log_probs, &RolloutOutcome::new(gt, samples), ESTIMATOR_BETA);
        sum += value;
        sum_sq += value * value;
    }
    let n = ESTIMATOR_DRAWS as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let se = (var / n).sqrt();
    let gap = (mean - exact).abs();
    Ok(Check {
        name: "estimator/value_unbiased".into(),
        passed: gap <= 4.0 * se,
        detail: format!("|mean - exact| = {gap:.3e}, 4 SE = {:.3e}", 4.0 * se),
    })
}

/// Mean gradient over `draws` rollouts matches the gradient of the
/// exact expectation (with the sampling distribution and rewards frozen,
/// exactly as the stop-gradient prescribes) within 4 standard errors per
/// coordinate.
pub fn estimator_gradient_check(seed: u64) -> Result<Check> {
    let (_, logits, _, gt) = estimator_model(seed)?;
    let v = logits.len();
    let exact_grad = {
        let g = Graph::new();
        let z = g.leaf(logits.clone(), &[1, v], true)?;
        let lp = z.log_softmax()?.reshape(&[v])?;
        let head = exact_otr_expectation_node(&lp, gt, ESTIMATOR_KAPPA, ESTIMATOR_BETA)?;
        g.backward(&head)?;
        z.grad().expect("logits gradient")
    };

    let policy = loss::sampling_policy(&logits, ESTIMATOR_KAPPA)?;
    let key = RolloutKey { seed, step: 1, seq: 0 };
    let mut sum = vec![0.0; v];
    let mut sum_sq = vec![0.0; v];
    for i in 0..ESTIMATOR_DRAWS {
        let samples = loss::sample_candidates(&policy, ESTIMATOR_K, key, i as u64)?;
        let outcome = RolloutOutcome::new(gt, samples);
        let g = Graph::new();
        let z = g.leaf(logits.clone(), &[1, v], true)?;
        let lp = z.log_softmax()?.reshape(&[v])?;
        let head = loss::otr_token_loss(&lp, gt, &outcome, ESTIMATOR_BETA)?;
        g.backward(&head)?;
        let grad = z.grad().expect("logits gradient");
        for (c, &x) in grad.iter().enumerate() {
            sum[c] += x;
            sum_sq[c] += x * x;
        }
    }
    let n = ESTIMATOR_DRAWS as f64;
    let mut worst_sigma = 0.0f64;
    for c in 0..v {
        let mean = sum[c] / n;
        let var = (sum_sq[c] / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        let gap = (mean - exact_grad[c]).abs();
        // A coordinate with zero spread must agree to rounding error.
        let sigmas = if se > 0.0 { gap / se } else if gap < 1e-12 { 0.0 } else { f64::INFINITY };
        worst_sigma = worst_sigma.max(sigmas);
    }
    Ok(Check {
        name: "estimator/gradient_unbiased".into(),
        passed: worst_sigma <= 4.0,
        detail: format!("worst coordinate at {worst_sigma:.2} SE (tol 4)"),
    })
}

/// The spread of the Monte Carlo mean shrinks like 1/sqrt(N): over a grid
/// of N values, the empirical standard error rescaled by sqrt(N) stays
/// within a factor of 3.
pub fn estimator_trend_check(seed: u64) -> Result<Check> {
    let (_, logits, log_probs, gt) = estimator_model(seed)?;
    let policy = loss::sampling_policy(&logits, ESTIMATOR_KAPPA)?;
    const REPEATS: u64 = 50;
    let grid = [100usize, 400, 1600, 6400];
    let mut scaled = Vec::new();
    for (gi, &n) in grid.iter().enumerate() {
        let mut means = Vec::new();
        for rep in 0..REPEATS {
            let key = RolloutKey { seed, step: 2 + gi as u64, seq: rep };
            let mut sum = 0.0;
            for i in 0..n {
                let samples = loss::sample_candidates(&policy, ESTIMATOR_K, key, i as u64)?;
                sum += mc_loss_value(
                    &log_probs,
                    &RolloutOutcome::new(gt, samples),
                    ESTIMATOR_BETA,
                );
            }
            means.push(sum / n as f64);
        }
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64;
        scaled.push(var.sqrt() * (n as f64).sqrt());
    }
    let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scaled.iter().cloned().fold(0.0f64, f64::max);
    Ok(Check {
        name: "estimator/root_n_trend".into(),
        passed: hi <= 3.0 * lo,
        detail: format!("sqrt(N)-scaled SE spread {:.2}x (tol 3x)", hi / lo),
    })
}

// ---------------------------------------------------------------------------
// Equivalence checks
// ---------------------------------------------------------------------------

fn random_log_probs(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    let logits = uniform(rng, v, -3.0, 3.0);
    let z = logits.iter().map(|&l| l.exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - z).collect()
}

fn equivalence_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a("equivalence"));
    let mut checks = Vec::new();

    // beta = 0, kappa = 1: the exact expectation IS the DFT per-token loss.
    let mut worst_value = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..100 {
        let v = rng.gen_range(2..12);
        let lp = random_log_probs(&mut rng, v);
        let gt = rng.gen_range(0..v);
        let exact = exact_otr_expectation(&lp, gt, 1.0, 0.0)?;
        let pi = lp[gt].exp();
        worst_value = worst_value.max((exact - (-pi * lp[gt])).abs());

        // Gradients with respect to the logits, each on its own graph.
        let logits = uniform(&mut rng, v, -3.0, 3.0);
        let grad_of = |head: &dyn Fn(&Graph, &Var) -> Result<Var>| -> Result<Vec<f64>> {
            let g = Graph::new();
            let z = g.leaf(logits.clone(), &[1, v], true)?;
            let h = head(&g, &z)?;
            g.backward(&h)?;
            Ok(z.grad().expect("logits gradient"))
        };
        let exact_grad = grad_of(&|_, z| {
            let lp = z.log_softmax()?.reshape(&[v])?;
            exact_otr_expectation_node(&lp, gt, 1.0, 0.0)
        })?;
        let dft_grad = grad_of(&|_, z| {
            let lp = z.log_softmax()?;
            dft_from_log_probs(&lp, &[0], &[gt], None).map(|(total, _)| total)
        })?;
        for (a, b) in exact_grad.iter().zip(&dft_grad) {
            worst_grad = worst_grad.max((a - b).abs());
        }
    }
    checks.push(tol_check("equivalence/dft_value", worst_value, 1e-12));
    checks.push(tol_check("equivalence/dft_gradient", worst_grad, 1e-10));

    // beta = 0 plus a sampler that always returns the ground truth: OTR
    // collapses to per-token SFT exactly.
    let mut worst_sft = 0.0f64;
    for _ in 0..100 {
        let v = rng.gen_range(2..12);
        let lp = random_log_probs(&mut rng, v);
        let gt = rng.gen_range(0..v);
        let g = Graph::new();
        let lp_var = g.leaf(lp.clone(), &[v], false)?;
        let outcome = RolloutOutcome::new(gt, vec![gt; 32]);
        let otr = loss::otr_token_loss(&lp_var, gt, &outcome, 0.0)?.scalar_value()?;
        worst_sft = worst_sft.max((otr - (-lp[gt])).abs());
    }
    checks.push(tol_check("equivalence/sft_reduction", worst_sft, 1e-12));

    // Grouped evaluation vs the ungrouped per-sample average over fuzzed
    // outcomes.
    let mut worst_identity = 0.0f64;
    for _ in 0..1000 {
        let v = rng.gen_range(2..10);
        let k = rng.gen_range(1..64);
        let beta = rng.gen_range(-1.0..1.0);
        let lp = random_log_probs(&mut rng, v);
        let gt = rng.gen_range(0..v);
        let samples: Vec<usize> = (0..k).map(|_| rng.gen_range(0..v)).collect();
        let outcome = RolloutOutcome::new(gt, samples.clone());
        let g = Graph::new();
        let lp_var = g.leaf(lp.clone(), &[v], false)?;
        let grouped = loss::otr_token_loss(&lp_var, gt, &outcome, beta)?.scalar_value()?;
        let ungrouped = -samples
            .iter()
            .map(|&a| loss::reward(a, gt, beta) * lp[a])
            .sum::<f64>()
            / k as f64;
        let denom = f64::max(1e-12, grouped.abs().max(ungrouped.abs()));
        worst_identity = worst_identity.max(((grouped - ungrouped) / denom).abs());
    }
    checks.push(tol_check("equivalence/loss_identity", worst_identity, 1e-12));

    Ok(checks)
}
