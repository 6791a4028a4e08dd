//! Composite occupancy loss: cross-entropy, Lovasz-softmax, and the
//! geometric/semantic scene-class affinity terms, each with analytic
//! gradients with respect to the per-voxel class probabilities.
//!
//! Probabilities are passed voxel-major: `probs[i * num_classes + k]` is
//! voxel `i`'s probability of class `k`. Gradients come back in the same
//! layout. The functions do not require rows to sum to one, which keeps
//! them well-defined under finite-difference perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Clamp floor for cross-entropy log arguments.
pub const CE_PROB_FLOOR: f64 = 1e-12;
/// Clamp interval half-width for the affinity losses.
pub const SCAL_CLAMP: f64 = 1e-6;

/// Total-loss weights for (ce, lovasz, scal-geo, scal-sem).
pub const LOSS_WEIGHTS: [f64; 4] = [1.0, 5.0, 1.0, 1.0];

/// A loss value and its gradient w.r.t. every probability entry.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossResult {
    fn zeros(n: usize) -> Self {
        LossResult {
            value: 0.0,
            gradient: vec![0.0; n],
        }
    }
}

fn check_inputs(probs: &[f64], num_classes: usize, labels: &[u8]) -> Result<usize> {
    if num_classes == 0 {
        return Err(Error::invalid("loss", "class count must be positive"));
    }
    if probs.len() != labels.len() * num_classes {
        return Err(Error::shape(
            "loss",
            format!(
                "{} probabilities for {} voxels x {} classes",
                probs.len(),
                labels.len(),
                num_classes
            ),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::invalid(
            "loss labels",
            format!("label {bad} >= class count {num_classes}"),
        ));
    }
    Ok(labels.len())
}

/// Mean negative log-probability of the true class over non-ignored
/// voxels, with optional per-class weights (uniform by default).
pub fn cross_entropy(
    probs: &[f64],
    num_classes: usize,
    labels: &[u8],
    ignore: Option<&[bool]>,
    class_weights: Option<&[f64]>,
) -> Result<LossResult> {
    let n = check_inputs(probs, num_classes, labels)?;
    if let Some(mask) = ignore {
        if mask.len() != n {
            return Err(Error::CountMismatch(format!(
                "{} ignore flags for {n} voxels",
                mask.len()
            )));
        }
    }
    if let Some(w) = class_weights {
        if w.len() != num_classes {
            return Err(Error::CountMismatch(format!(
                "{} class weights for {num_classes} classes",
                w.len()
            )));
        }
    }
    let weight = |c: usize| class_weights.map_or(1.0, |w| w[c]);

    let mut total_weight = 0.0;
    let mut sum = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if ignore.is_some_and(|m| m[i]) {
            continue;
        }
        let w = weight(label as usize);
        let p = probs[i * num_classes + label as usize].max(CE_PROB_FLOOR);
        sum += w * -p.ln();
        total_weight += w;
    }
    if total_weight <= 0.0 {
        return Err(Error::EmptyLossSupport);
    }

    let mut out = LossResult::zeros(probs.len());
    out.value = sum / total_weight;
    for (i, &label) in labels.iter().enumerate() {
        if ignore.is_some_and(|m| m[i]) {
            continue;
        }
        let idx = i * num_classes + label as usize;
        // Below the floor the clamped log is constant.
        if probs[idx] >= CE_PROB_FLOOR {
            out.gradient[idx] = -weight(label as usize) / (probs[idx] * total_weight);
        }
    }
    Ok(out)
}

/// Lovasz extension of the Jaccard loss, averaged over the classes present
/// in `labels`. The gradient treats the sorting permutation as fixed; ties
/// in the error vector break by voxel index.
pub fn lovasz_softmax(probs: &[f64], num_classes: usize, labels: &[u8]) -> Result<LossResult> {
    let n = check_inputs(probs, num_classes, labels)?;
    if n == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let mut present = vec![false; num_classes];
    for &l in labels {
        present[l as usize] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count();

    let mut out = LossResult::zeros(probs.len());
    for c in (0..num_classes).filter(|&c| present[c]) {
        // Per-voxel Jaccard errors for class c.
        let errors: Vec<f64> = (0..n)
            .map(|i| {
                let p = probs[i * num_classes + c];
                if labels[i] as usize == c {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

        let positives = labels.iter().filter(|&&l| l as usize == c).count() as f64;
        let mut intersection = positives;
        let mut union = positives;
        let mut prev_jaccard = 0.0;
        for &i in &order {
            if labels[i] as usize == c {
                intersection -= 1.0;
            } else {
                union += 1.0;
            }
            let jaccard = 1.0 - intersection / union;
            let g = jaccard - prev_jaccard;
            prev_jaccard = jaccard;

            out.value += errors[i] * g / n_present as f64;
            let sign = if labels[i] as usize == c { -1.0 } else { 1.0 };
            out.gradient[i * num_classes + c] += sign * g / n_present as f64;
        }
    }
    Ok(out)
}

/// Soft precision/recall/specificity log loss over binary scores `x`
/// against a binary ground truth, with clamped scores. Returns the value
/// and d(value)/d(x_i); terms whose ground-truth side is empty are
/// dropped.
fn affinity_terms(x: &[f64], gt: &[bool]) -> (f64, Vec<f64>) {
    let clamp = |v: f64| v.clamp(SCAL_CLAMP, 1.0 - SCAL_CLAMP);
    let clamped_away = |v: f64| !(SCAL_CLAMP..=1.0 - SCAL_CLAMP).contains(&v);

    let n_pos = gt.iter().filter(|&&g| g).count() as f64;
    let n_neg = gt.len() as f64 - n_pos;
    let mut a = 0.0; // sum of clamped scores on positives
    let mut b = 0.0; // sum of all clamped scores
    let mut c = 0.0; // sum of (1 - clamped score) on negatives
    for (i, &g) in gt.iter().enumerate() {
        let xc = clamp(x[i]);
        b += xc;
        if g {
            a += xc;
        } else {
            c += 1.0 - xc;
        }
    }

    let mut value = 0.0;
    if n_pos > 0.0 {
        value += -(a / b).ln(); // precision
        value += -(a / n_pos).ln(); // recall
    }
    if n_neg > 0.0 {
        value += -(c / n_neg).ln(); // specificity
    }

    let gradient = (0..x.len())
        .map(|i| {
            if clamped_away(x[i]) {
                return 0.0;
            }
            let g = gt[i];
            let mut d = 0.0;
            if n_pos > 0.0 {
                if g {
                    d += -2.0 / a;
                }
                d += 1.0 / b;
            }
            if n_neg > 0.0 && !g {
                d += 1.0 / c;
            }
            d
        })
        .collect();
    (value, gradient)
}

/// Geometric scene-class affinity loss over binary occupancy, with the
/// occupied score `1 - p(free)`.
pub fn scal_geo(probs: &[f64], num_classes: usize, labels: &[u8]) -> Result<LossResult> {
    let n = check_inputs(probs, num_classes, labels)?;
    if n == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let x: Vec<f64> = (0..n).map(|i| 1.0 - probs[i * num_classes]).collect();
    let gt: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
    let (value, dx) = affinity_terms(&x, &gt);
    let mut out = LossResult::zeros(probs.len());
    out.value = value;
    // x depends only on the free-class probability, with dx/dp = -1.
    for (i, &d) in dx.iter().enumerate() {
        out.gradient[i * num_classes] = -d;
    }
    Ok(out)
}

/// Semantic scene-class affinity loss: the affinity term applied per
/// class present in the labels (free included when present), averaged.
pub fn scal_sem(probs: &[f64], num_classes: usize, labels: &[u8]) -> Result<LossResult> {
    let n = check_inputs(probs, num_classes, labels)?;
    if n == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let mut present = vec![false; num_classes];
    for &l in labels {
        present[l as usize] = true;
    }
    let n_present = present.iter().filter(|&&p| p).count() as f64;

    let mut out = LossResult::zeros(probs.len());
    for c in (0..num_classes).filter(|&c| present[c]) {
        let x: Vec<f64> = (0..n).map(|i| probs[i * num_classes + c]).collect();
        let gt: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
        let (value, dx) = affinity_terms(&x, &gt);
        out.value += value / n_present;
        for (i, &d) in dx.iter().enumerate() {
            out.gradient[i * num_classes + c] += d / n_present;
        }
    }
    Ok(out)
}

/// Weighted composite loss: `1*ce + 5*lovasz + 1*scal_geo + 1*scal_sem`.
pub fn total_loss(probs: &[f64], num_classes: usize, labels: &[u8]) -> Result<LossResult> {
    let terms = [
        cross_entropy(probs, num_classes, labels, None, None)?,
        lovasz_softmax(probs, num_classes, labels)?,
        scal_geo(probs, num_classes, labels)?,
        scal_sem(probs, num_classes, labels)?,
    ];
    let mut out = LossResult::zeros(probs.len());
    for (term, weight) in terms.iter().zip(LOSS_WEIGHTS) {
        out.value += weight * term.value;
        for (o, g) in out.gradient.iter_mut().zip(&term.gradient) {
            *o += weight * g;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor when comparing analytic vs numeric gradients; below
/// this scale a central difference is dominated by cancellation noise.
pub const FD_NOISE_FLOOR: f64 = 1e-3;

/// Max relative disagreement between an analytic gradient and central
/// finite differences of `f` over every coordinate.
pub fn max_fd_error(probs: &[f64], gradient: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut work = probs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..probs.len() {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let hi = f(&work);
        work[i] = orig - FD_STEP;
        let lo = f(&work);
        work[i] = orig;
        let fd = (hi - lo) / (2.0 * FD_STEP);
        let a = gradient[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_NOISE_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Minimum gap between Lovasz error values for a finite-difference check
/// to stay on one linear piece of the extension.
const TIE_GAP: f64 = 1e-5;

/// Nudge probabilities until, per class column, all Jaccard error values
/// are separated by more than the FD stencil. Exact ties are
/// non-differentiable kinks of the Lovasz extension where a central
/// difference averages two linear pieces; the subgradient convention at
/// ties is covered by the oracle and permutation tests instead.
fn separate_lovasz_errors(probs: &mut [f64], num_classes: usize, labels: &[u8]) {
    let n = labels.len();
    loop {
        let mut nudged = false;
        for c in 0..num_classes {
            let mut errors: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    let p = probs[i * num_classes + c];
                    let m = if labels[i] as usize == c { 1.0 - p } else { p };
                    (m, i)
                })
                .collect();
            errors.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in errors.windows(2) {
                if pair[1].0 - pair[0].0 < TIE_GAP {
                    let i = pair[1].1;
                    let idx = i * num_classes + c;
                    if labels[i] as usize == c {
                        probs[idx] -= 2.0 * TIE_GAP;
                    } else {
                        probs[idx] += 2.0 * TIE_GAP;
                    }
                    nudged = true;
                }
            }
        }
        if !nudged {
            return;
        }
    }
}

/// One random problem instance for the gradient checker. Every fifth
/// trial uses near-one-hot probabilities with steep log terms.
fn random_case(rng: &mut ChaCha8Rng, trial: usize) -> (Vec<f64>, usize, Vec<u8>) {
    let num_classes = rng.gen_range(3..=6usize);
    let n = rng.gen_range(4..=24usize);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..num_classes) as u8).collect();
    let mut probs = vec![0.0; n * num_classes];
    let near_one_hot = trial % 5 == 4;
    for i in 0..n {
        let row = &mut probs[i * num_classes..(i + 1) * num_classes];
        if near_one_hot {
            let hot = rng.gen_range(0..num_classes);
            let eps = 1e-3 * rng.gen_range(0.8..1.2);
            for (k, v) in row.iter_mut().enumerate() {
                *v = if k == hot {
                    1.0 - eps
                } else {
                    eps * rng.gen_range(0.5..1.5) / (num_classes - 1) as f64
                };
            }
        } else {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.05..1.0);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    separate_lovasz_errors(&mut probs, num_classes, &labels);
    (probs, num_classes, labels)
}

pub const LOSS_NAMES: [&str; 5] = ["ce", "lovasz", "scal_geo", "scal_sem", "total"];

/// Run the finite-difference suite: returns the max relative gradient
/// error seen for each loss across `trials` random cases.
pub fn gradient_check(seed: u64, trials: usize) -> Result<Vec<(&'static str, f64)>> {
    if trials == 0 {
        return Err(Error::invalid("gradcheck", "trial count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 5];
    for trial in 0..trials {
        let (probs, k, labels) = random_case(&mut rng, trial);
        let evals: [(usize, LossResult); 5] = [
            (0, cross_entropy(&probs, k, &labels, None, None)?),
            (1, lovasz_softmax(&probs, k, &labels)?),
            (2, scal_geo(&probs, k, &labels)?),
            (3, scal_sem(&probs, k, &labels)?),
            (4, total_loss(&probs, k, &labels)?),
        ];
        for (slot, result) in evals {
            let err = max_fd_error(&probs, &result.gradient, |p| match slot {
                0 => cross_entropy(p, k, &labels, None, None).unwrap().value,
                1 => lovasz_softmax(p, k, &labels).unwrap().value,
                2 => scal_geo(p, k, &labels).unwrap().value,
                3 => scal_sem(p, k, &labels).unwrap().value,
                _ => total_loss(p, k, &labels).unwrap().value,
            });
            worst[slot] = worst[slot].max(err);
        }
    }
    Ok(LOSS_NAMES.iter().copied().zip(worst).collect())
}
