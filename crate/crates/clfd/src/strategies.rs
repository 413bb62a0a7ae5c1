//! Rehearsal loss composition.
//!
//! Three strategies over (fresh, replay) logits: plain replay concatenates
//! fresh and buffer examples into one cross-entropy mean; logit-consistency
//! replay adds an MSE term against the outputs stored at insertion plus a
//! second replay cross-entropy draw; and asymmetric cross-entropy masks the
//! fresh term to the classes present in the incoming batch so old-class
//! logits are only trained through the replay term.
//!
//! Every loss comes in a value-only form (the contract surface, used by the
//! oracle tests) and the trainer pairs them with the `*_with_grad` helpers
//! below, which return d loss / d logits for manual backprop.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Er,
    Derpp,
    ErAce,
}

impl StrategyKind {
    pub fn id(&self) -> &'static str {
        match self {
            StrategyKind::Er => "er",
            StrategyKind::Derpp => "derpp",
            StrategyKind::ErAce => "erace",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "er" => Ok(StrategyKind::Er),
            "derpp" => Ok(StrategyKind::Derpp),
            "erace" => Ok(StrategyKind::ErAce),
            // Reserved: dual-EMA semantic memories are out of scope.
            "clser" => Err(Error::Config(
                "strategy `clser` is reserved but not implemented".into(),
            )),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected er|derpp|erace)"
            ))),
        }
    }

    /// Whether buffer entries must record logits at insertion.
    pub fn needs_logits(&self) -> bool {
        matches!(self, StrategyKind::Derpp)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Logit-consistency weight.
    pub alpha: f64,
    /// Replay-label cross-entropy weight.
    pub beta: f64,
    pub replay_batch: usize,
    /// Reuse one replay draw for both consistency and label terms.
    pub single_draw: bool,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("strategy weights must be nonnegative".into()));
        }
        if self.replay_batch == 0 {
            return Err(Error::Config("replay batch must be positive".into()));
        }
        Ok(())
    }
}

/// log-sum-exp by row, numerically stable.
fn logsumexp<F: Scalar>(row: ndarray::ArrayView1<F>) -> F {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    sum.ln() + max
}

/// Mean cross-entropy and its logits gradient; `(softmax - onehot) / B`.
pub fn ce_mean_with_grad<F: Scalar>(
    logits: ArrayView2<F>,
    labels: &[usize],
) -> Result<(F, Array2<F>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "cross entropy",
            expected: format!("{} labels", logits.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::Precondition("empty batch in cross entropy".into()));
    }
    let b = F::from_count(labels.len());
    let mut grad = Array2::zeros(logits.dim());
    let mut total = F::zero();
    for (i, (row, &label)) in logits.outer_iter().zip(labels.iter()).enumerate() {
        let lse = logsumexp(row);
        total += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad[[i, j]] = (p - if j == label { F::one() } else { F::zero() }) / b;
        }
    }
    Ok((total / b, grad))
}

/// Cross-entropy restricted to an allowed class set: disallowed logits are
/// treated as negative infinity (zero probability, zero gradient).
pub fn masked_ce_mean_with_grad<F: Scalar>(
    logits: ArrayView2<F>,
    labels: &[usize],
    allowed: &BTreeSet<usize>,
) -> Result<(F, Array2<F>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "masked cross entropy",
            expected: format!("{} labels", logits.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::Precondition("empty batch in cross entropy".into()));
    }
    let b = F::from_count(labels.len());
    let mut grad = Array2::zeros(logits.dim());
    let mut total = F::zero();
    for (i, (row, &label)) in logits.outer_iter().zip(labels.iter()).enumerate() {
        if !allowed.contains(&label) {
            return Err(Error::Precondition(format!(
                "label {label} masked out of its own loss"
            )));
        }
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed.contains(j))
            .map(|(_, &v)| v)
            .fold(F::neg_infinity(), |m, v| m.max(v));
        let sum: F = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed.contains(j))
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let lse = sum.ln() + max;
        total += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            if !allowed.contains(&j) {
                continue;
            }
            let p = (v - lse).exp();
            grad[[i, j]] = (p - if j == label { F::one() } else { F::zero() }) / b;
        }
    }
    Ok((total / b, grad))
}

/// Mean squared error over all elements and its gradient on `logits`.
pub fn mse_mean_with_grad<F: Scalar>(
    logits: ArrayView2<F>,
    target: ArrayView2<F>,
) -> Result<(F, Array2<F>)> {
    if logits.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            context: "logit consistency",
            expected: format!("{:?}", target.dim()),
            got: format!("{:?}", logits.dim()),
        });
    }
    let n = F::from_count(logits.len());
    let diff = &logits - &target;
    let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
    let grad = diff.mapv(|d| d + d) / n;
    Ok((loss, grad))
}

/// Mean cross-entropy over the concatenation of fresh and replay examples.
/// An empty replay batch (first steps of training) degrades to the fresh
/// term alone; an empty fresh batch is an error.
pub fn loss_er<'a, F: Scalar>(
    fresh_logits: ArrayView2<'a, F>,
    fresh_labels: &[usize],
    replay_logits: Option<ArrayView2<'a, F>>,
    replay_labels: &[usize],
) -> Result<F> {
    if fresh_labels.is_empty() {
        return Err(Error::Precondition("empty fresh batch".into()));
    }
    match replay_logits {
        None => Ok(ce_mean_with_grad(fresh_logits, fresh_labels)?.0),
        Some(replay) => {
            let all = ndarray::concatenate(Axis(0), &[fresh_logits, replay])
                .map_err(|e| Error::Precondition(format!("batch concat: {e}")))?;
            let labels: Vec<usize> = fresh_labels
                .iter()
                .chain(replay_labels.iter())
                .copied()
                .collect();
            Ok(ce_mean_with_grad(all.view(), &labels)?.0)
        }
    }
}

/// CE(fresh) + alpha * MSE(current logits on draw A, stored logits) +
/// beta * CE(current logits on draw B, labels).
#[allow(clippy::too_many_arguments)]
pub fn loss_derpp<F: Scalar>(
    fresh_logits: ArrayView2<F>,
    fresh_labels: &[usize],
    replay_a_logits: ArrayView2<F>,
    stored_logits: ArrayView2<F>,
    replay_b_logits: ArrayView2<F>,
    replay_b_labels: &[usize],
    alpha: F,
    beta: F,
) -> Result<F> {
    let (ce_fresh, _) = ce_mean_with_grad(fresh_logits, fresh_labels)?;
    let (mse, _) = mse_mean_with_grad(replay_a_logits, stored_logits)?;
    let (ce_b, _) = ce_mean_with_grad(replay_b_logits, replay_b_labels)?;
    Ok(ce_fresh + alpha * mse + beta * ce_b)
}

/// Fresh examples: cross-entropy with logits outside the current batch's
/// class set forced to negative infinity (only once old classes exist
/// outside that set); replay examples: full-class cross-entropy. The two
/// means are summed.
pub fn loss_erace<F: Scalar>(
    fresh_logits: ArrayView2<F>,
    fresh_labels: &[usize],
    replay_logits: Option<ArrayView2<F>>,
    replay_labels: &[usize],
    seen_classes: &BTreeSet<usize>,
    batch_classes: &BTreeSet<usize>,
) -> Result<F> {
    let masking = erace_masking_active(seen_classes, batch_classes);
    let fresh = if masking {
        masked_ce_mean_with_grad(fresh_logits, fresh_labels, batch_classes)?.0
    } else {
        ce_mean_with_grad(fresh_logits, fresh_labels)?.0
    };
    let replay = match replay_logits {
        Some(logits) => ce_mean_with_grad(logits, replay_labels)?.0,
        None => F::zero(),
    };
    Ok(fresh + replay)
}

/// Masking engages once previously seen classes exist outside the current
/// batch's class set.
pub fn erace_masking_active(seen: &BTreeSet<usize>, batch: &BTreeSet<usize>) -> bool {
    seen.iter().any(|c| !batch.contains(c))
}
