//! The training loop: shuffle into mini-batches, assemble the risk for the
//! chosen method, back-propagate, step the optimizer, and evaluate.
//!
//! Training is single-threaded and fully determined by the seed: the
//! parameter initialisation and the batch shuffles draw from separate ChaCha8
//! streams of that seed. Only evaluation fans out (see [`Exec`]).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::estimator::{
    ablation_risk, empirical_risk, stack_features, supervised_risk, Ablation, ParamRisk, Weighting,
    WeightingMode,
};
use crate::exec::Exec;
use crate::label_mech::{selector_stats, LabeledExample, StochasticDataset};
use crate::loss::OvrSquare;
use crate::model::{Architecture, ScorerParams};
use crate::optim::{epoch_batches, sgd_step, OptimState};

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Stochastic labels with the unbiased risk estimator.
    #[default]
    Sl,
    /// Ordinary labels.
    Ol,
    /// Only the labeled (`s ≤ K`) term.
    SupOnly,
    /// Only the "None" term.
    CompOnly,
}

impl Method {
    pub fn needs_stochastic_data(self) -> bool {
        self != Method::Ol
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sl => "sl",
            Method::Ol => "ol",
            Method::SupOnly => "sup-only",
            Method::CompOnly => "comp-only",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sl" => Ok(Method::Sl),
            "ol" => Ok(Method::Ol),
            "sup-only" | "sup_only" => Ok(Method::SupOnly),
            "comp-only" | "comp_only" => Ok(Method::CompOnly),
            _ => Err(Error::param(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Only used by [`Method::Sl`].
    pub weighting: Weighting,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub architecture: Architecture,
    pub eval_every: usize,
    /// Off by default so metrics stay byte-identical across runs.
    pub record_wall_clock: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sl,
            weighting: Weighting::consistent(),
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
            architecture: Architecture::Mlp {
                hidden: crate::model::DEFAULT_HIDDEN,
            },
            eval_every: 1,
            record_wall_clock: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::param("eval_every must be at least 1"));
        }
        Ok(())
    }
}

/// One metrics record, serialized as one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub method: Method,
    pub mode: Option<WeightingMode>,
    pub l: Option<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    pub risk_total: f64,
    pub risk_sup: f64,
    pub risk_comp: f64,
    pub test_acc: f64,
    pub ms: u64,
}

#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Stochastic(&'a StochasticDataset),
    Labeled(&'a LabeledDataset),
}

impl TrainData<'_> {
    fn k(&self) -> usize {
        match self {
            TrainData::Stochastic(d) => d.k(),
            TrainData::Labeled(d) => d.k(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            TrainData::Stochastic(d) => d.dim(),
            TrainData::Labeled(d) => d.dim(),
        }
    }

    fn len(&self) -> usize {
        match self {
            TrainData::Stochastic(d) => d.len(),
            TrainData::Labeled(d) => d.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs `config.epochs` epochs and returns the final parameters with one
/// metrics record per evaluated epoch (every `eval_every` epochs and the last).
/// `observer` sees each record as soon as it is produced.
///
/// Ablation batches without any contributing sample are skipped.
pub fn train(
    data: TrainData<'_>,
    test: &LabeledDataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let stochastic = match (config.method.needs_stochastic_data(), data) {
        (true, TrainData::Stochastic(d)) => Some(d),
        (false, TrainData::Labeled(_)) => None,
        (true, _) => {
            return Err(Error::input(format!("method {} needs stochastic-label data", config.method)))
        }
        (false, _) => return Err(Error::input("method ol needs ordinary-label data")),
    };
    let (k, d, n) = (data.k(), data.dim(), data.len());
    if n == 0 {
        return Err(Error::input("empty training set"));
    }
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    if test.k() != k || test.dim() != d {
        return Err(Error::input(format!(
            "test set has K={} d={}, training set has K={k} d={d}",
            test.k(),
            test.dim()
        )));
    }
    let stats = stochastic.map(selector_stats).transpose()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(INIT_STREAM);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);
    batch_rng.set_stream(BATCH_STREAM);

    let mut params = ScorerParams::init(config.architecture, d, k, &mut init_rng)?;
    let mut opt = OptimState::new(params.len(), config.lr, config.momentum, config.weight_decay)?;
    let loss = OvrSquare;
    let mut metrics = Vec::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let (mut total, mut sup, mut comp, mut counted) = (0.0, 0.0, 0.0, 0usize);
        for (b, mut batch) in epoch_batches(n, config.batch_size, &mut batch_rng)?
            .into_iter()
            .enumerate()
        {
            batch.sort_unstable();
            let step: Result<ParamRisk> = match (config.method, data) {
                (Method::Ol, TrainData::Labeled(ds)) => {
                    let refs: Vec<&LabeledExample> = batch.iter().map(|&i| &ds.examples()[i]).collect();
                    supervised_risk(&refs, &params, &loss)
                }
                (method, TrainData::Stochastic(ds)) => {
                    let refs: Vec<_> = batch.iter().map(|&i| &ds.samples()[i]).collect();
                    match method {
                        Method::Sl => empirical_risk(&refs, &params, stats.as_ref().unwrap(), config.weighting, &loss),
                        Method::SupOnly => ablation_risk(&refs, &params, Ablation::SupOnly, &loss),
                        Method::CompOnly => ablation_risk(&refs, &params, Ablation::CompOnly, &loss),
                        Method::Ol => unreachable!(),
                    }
                }
                _ => unreachable!(),
            };
            let step = match step {
                Err(Error::AblationEmpty) => continue,
                other => other?,
            };
            if !step.risk.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    epoch,
                    batch: b,
                });
            }
            sgd_step(params.values_mut(), &step.grad, &mut opt, epoch, b)?;
            total += step.risk.total;
            sup += step.risk.supervised_term;
            comp += step.risk.complementary_term;
            counted += 1;
        }
        if epoch % config.eval_every != 0 && epoch != config.epochs {
            continue;
        }
        let denom = counted.max(1) as f64;
        let test_acc = evaluate_with(&params, test.examples(), config.exec)?;
        let record = EpochMetrics {
            epoch,
            method: config.method,
            mode: (config.method == Method::Sl).then_some(config.weighting.mode),
            l: stochastic.map(StochasticDataset::set_size),
            k,
            risk_total: total / denom,
            risk_sup: sup / denom,
            risk_comp: comp / denom,
            test_acc,
            ms: if config.record_wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        observer(&record);
        metrics.push(record);
    }
    Ok(TrainOutcome { params, metrics })
}

const EVAL_CHUNK: usize = 512;

/// Fraction of examples whose arg-max score (ties to the smallest class) is
/// the true label.
pub fn evaluate(params: &ScorerParams, test: &[LabeledExample]) -> Result<f64> {
    evaluate_with(params, test, Exec::default())
}

pub fn evaluate_with(params: &ScorerParams, test: &[LabeledExample], exec: Exec) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::input("empty test set"));
    }
    let chunks = test.len().div_ceil(EVAL_CHUNK);
    let counts = exec.map(chunks, |c| -> Result<usize> {
        let part = &test[c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(test.len())];
        let x = stack_features(part.iter().map(|e| e.features.as_slice()), params.input_dim())?;
        let predicted = params.predict(x.view())?;
        Ok(predicted.iter().zip(part).filter(|(p, e)| **p == e.label).count())
    });
    let correct = counts.into_iter().sum::<Result<usize>>()?;
    Ok(correct as f64 / test.len() as f64)
}

/// Scores for a whole dataset, in example order.
pub fn score_all(params: &ScorerParams, examples: &[LabeledExample]) -> Result<ndarray::Array2<f64>> {
    let x = stack_features(examples.iter().map(|e| e.features.as_slice()), params.input_dim())?;
    params.scores(ArrayView2::from(&x))
}
