//! Empirical risks over mini-batches: the stochastic-label risk estimator in
//! its two weighting modes, the ordinary supervised risk, and the
//! single-term ablations.
//!
//! Every function works on a score matrix (one row per sample) and returns
//! the gradient of the risk with respect to those scores; the `*_with`
//! wrappers run a [`ScorerParams`] forward and backward around them.
//! Contributions are summed in row order, so results are bit-stable for a
//! fixed batch order.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_mech::{LabeledExample, Selector, SelectorStats, StochasticSample};
use crate::loss::{complementary_loss, ClassLoss};
use crate::model::ScorerParams;

/// How labeled and "None" samples are weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// `(1/n) [Σ_labeled L(f(x), s) + Σ_none L̃(f(x), Ỹ)]`, the plain sample
    /// mean whose expectation is the classification risk.
    #[default]
    Consistent,
    /// Per-sample weights `P̂(s_i) / (n - n_s)` for labeled samples and
    /// `P̂(K+1) / n_s` for "None" samples.
    Literal,
}

impl fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingMode::Consistent => "consistent",
            WeightingMode::Literal => "literal",
        })
    }
}

impl FromStr for WeightingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(WeightingMode::Consistent),
            "literal" => Ok(WeightingMode::Literal),
            _ => Err(Error::param(format!("unknown weighting mode `{s}`"))),
        }
    }
}

/// Where the literal mode takes `n` and `n_s` from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountScope {
    /// Counts within the current batch.
    #[default]
    Batch,
    /// Counts over the whole training set (taken from the selector stats).
    Global,
}

impl fmt::Display for CountScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountScope::Batch => "batch",
            CountScope::Global => "global",
        })
    }
}

impl FromStr for CountScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(CountScope::Batch),
            "global" => Ok(CountScope::Global),
            _ => Err(Error::param(format!("unknown count scope `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Weighting {
    pub mode: WeightingMode,
    pub scope: CountScope,
}

impl Weighting {
    pub fn consistent() -> Self {
        Self::default()
    }

    pub fn literal() -> Self {
        Self {
            mode: WeightingMode::Literal,
            scope: CountScope::Batch,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub supervised_term: f64,
    pub complementary_term: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    SupOnly,
    CompOnly,
}

/// Risk plus its gradient with respect to the score matrix.
#[derive(Clone, Debug)]
pub struct ScoredRisk {
    pub risk: RiskBreakdown,
    pub grad_scores: Array2<f64>,
}

fn check_batch(n: usize, scores: &ArrayView2<'_, f64>) -> Result<()> {
    if n == 0 {
        return Err(Error::input("empty batch"));
    }
    if scores.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: scores.nrows(),
        });
    }
    Ok(())
}

fn row<'a>(scores: &'a ArrayView2<'_, f64>, i: usize) -> std::borrow::Cow<'a, [f64]> {
    let r = scores.row(i);
    match r.to_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(r.to_vec()),
    }
}

/// Accumulates weighted per-sample losses in row order.
struct Accumulator {
    risk: RiskBreakdown,
    grad: Array2<f64>,
}

impl Accumulator {
    fn new(n: usize, k: usize) -> Self {
        Self {
            risk: RiskBreakdown::default(),
            grad: Array2::zeros((n, k)),
        }
    }

    fn add(&mut self, i: usize, value: f64, grad: &[f64], weight: f64, absent: bool) {
        let c = value * weight;
        self.risk.total += c;
        if absent {
            self.risk.complementary_term += c;
        } else {
            self.risk.supervised_term += c;
        }
        for (g, &d) in self.grad.row_mut(i).iter_mut().zip(grad) {
            *g = d * weight;
        }
    }

    fn finish(self) -> ScoredRisk {
        ScoredRisk {
            risk: self.risk,
            grad_scores: self.grad,
        }
    }
}

fn sample_loss<L: ClassLoss + ?Sized>(
    loss: &L,
    scores: &[f64],
    sample: &StochasticSample,
) -> Result<crate::loss::LossValueGrad> {
    match sample.selector {
        Selector::Found(j) => loss.eval(scores, j),
        Selector::Absent => complementary_loss(loss, scores, &sample.candidate_set),
    }
}

/// Stochastic-label empirical risk of one batch.
///
/// `stats` must come from the full training set. In literal mode an empty
/// labeled or "None" part contributes nothing.
pub fn risk_from_scores<L: ClassLoss + ?Sized>(
    samples: &[&StochasticSample],
    scores: ArrayView2<'_, f64>,
    stats: &SelectorStats,
    weighting: Weighting,
    loss: &L,
) -> Result<ScoredRisk> {
    let n = samples.len();
    check_batch(n, &scores)?;
    let k = scores.ncols();
    if stats.k() != k {
        return Err(Error::Dimension {
            expected: stats.k(),
            actual: k,
        });
    }
    let (labeled_count, absent_count) = match weighting.scope {
        CountScope::Batch => {
            let absent = samples.iter().filter(|s| s.selector.is_absent()).count();
            (n - absent, absent)
        }
        CountScope::Global => (stats.total() - stats.absent_count(), stats.absent_count()),
    };
    let inv_n = 1.0 / n as f64;
    let mut acc = Accumulator::new(n, k);
    for (i, sample) in samples.iter().enumerate() {
        let lv = sample_loss(loss, &row(&scores, i), sample)?;
        let absent = sample.selector.is_absent();
        let weight = match weighting.mode {
            WeightingMode::Consistent => inv_n,
            WeightingMode::Literal if absent => stats.prob(Selector::Absent) / absent_count as f64,
            WeightingMode::Literal => stats.prob(sample.selector) / labeled_count as f64,
        };
        acc.add(i, lv.value, &lv.grad_scores, weight, absent);
    }
    Ok(acc.finish())
}

/// Ordinary-label empirical risk `(1/n) Σ L(f(x_i), y_i)`.
pub fn supervised_from_scores<L: ClassLoss + ?Sized>(
    labels: &[usize],
    scores: ArrayView2<'_, f64>,
    loss: &L,
) -> Result<ScoredRisk> {
    let n = labels.len();
    check_batch(n, &scores)?;
    let inv_n = 1.0 / n as f64;
    let mut acc = Accumulator::new(n, scores.ncols());
    for (i, &y) in labels.iter().enumerate() {
        let lv = loss.eval(&row(&scores, i), y)?;
        acc.add(i, lv.value, &lv.grad_scores, inv_n, false);
    }
    Ok(acc.finish())
}

/// Consistent-mode risk restricted to one term, averaged over the samples
/// that contribute to it.
pub fn ablation_from_scores<L: ClassLoss + ?Sized>(
    samples: &[&StochasticSample],
    scores: ArrayView2<'_, f64>,
    which: Ablation,
    loss: &L,
) -> Result<ScoredRisk> {
    let n = samples.len();
    check_batch(n, &scores)?;
    let keep = |s: &StochasticSample| match which {
        Ablation::SupOnly => !s.selector.is_absent(),
        Ablation::CompOnly => s.selector.is_absent(),
    };
    let contributing = samples.iter().filter(|s| keep(s)).count();
    if contributing == 0 {
        return Err(Error::AblationEmpty);
    }
    let weight = 1.0 / contributing as f64;
    let mut acc = Accumulator::new(n, scores.ncols());
    for (i, sample) in samples.iter().enumerate().filter(|(_, s)| keep(s)) {
        let lv = sample_loss(loss, &row(&scores, i), sample)?;
        acc.add(i, lv.value, &lv.grad_scores, weight, sample.selector.is_absent());
    }
    Ok(acc.finish())
}

/// Stacks feature rows into an `n×d` matrix.
pub fn stack_features<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, d: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: r.len(),
            });
        }
        data.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((n, d), data).expect("shape"))
}

/// Risk and its gradient with respect to the scorer parameters.
#[derive(Clone, Debug)]
pub struct ParamRisk {
    pub risk: RiskBreakdown,
    pub grad: Vec<f64>,
}

fn through_scorer(
    params: &ScorerParams,
    features: Array2<f64>,
    f: impl FnOnce(ArrayView2<'_, f64>) -> Result<ScoredRisk>,
) -> Result<ParamRisk> {
    let (scores, cache) = params.forward_batch(features.view())?;
    let scored = f(scores.view())?;
    let grad = params.backward(&cache, scored.grad_scores.view())?;
    Ok(ParamRisk {
        risk: scored.risk,
        grad,
    })
}

pub fn empirical_risk<L: ClassLoss + ?Sized>(
    batch: &[&StochasticSample],
    params: &ScorerParams,
    stats: &SelectorStats,
    weighting: Weighting,
    loss: &L,
) -> Result<ParamRisk> {
    let x = stack_features(batch.iter().map(|s| s.features.as_slice()), params.input_dim())?;
    through_scorer(params, x, |scores| risk_from_scores(batch, scores, stats, weighting, loss))
}

pub fn supervised_risk<L: ClassLoss + ?Sized>(
    batch: &[&LabeledExample],
    params: &ScorerParams,
    loss: &L,
) -> Result<ParamRisk> {
    let x = stack_features(batch.iter().map(|e| e.features.as_slice()), params.input_dim())?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    through_scorer(params, x, |scores| supervised_from_scores(&labels, scores, loss))
}

pub fn ablation_risk<L: ClassLoss + ?Sized>(
    batch: &[&StochasticSample],
    params: &ScorerParams,
    which: Ablation,
    loss: &L,
) -> Result<ParamRisk> {
    let x = stack_features(batch.iter().map(|s| s.features.as_slice()), params.input_dim())?;
    through_scorer(params, x, |scores| ablation_from_scores(batch, scores, which, loss))
}

/// Convenience for callers holding a single score row.
pub fn scores_row(scores: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView1::from(scores).insert_axis(ndarray::Axis(0))
}
