//! Differentiable multi-class scorers `f: R^d -> R^K`.
//!
//! Parameters live in one flat vector so the optimizer does not care about the
//! architecture. Layout (all matrices row-major, one row per output unit):
//!
//! * linear: `W (K×d)`, `b (K)`
//! * mlp:    `W1 (h×d)`, `b1 (h)`, `W2 (K×h)`, `b2 (K)`

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn param_count(self, d: usize, k: usize) -> usize {
        match self {
            Architecture::Linear => (d + 1) * k,
            Architecture::Mlp { hidden } => (d + 1) * hidden + (hidden + 1) * k,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear => write!(f, "linear"),
            Architecture::Mlp { hidden } => write!(f, "mlp:{hidden}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `linear`, `mlp` (default width) or `mlp:<width>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp" => Ok(Architecture::Mlp {
                hidden: DEFAULT_HIDDEN,
            }),
            _ => s
                .strip_prefix("mlp:")
                .and_then(|h| h.parse().ok())
                .filter(|&h| h > 0)
                .map(|hidden| Architecture::Mlp { hidden })
                .ok_or_else(|| Error::param(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    arch: Architecture,
    d: usize,
    k: usize,
    values: Vec<f64>,
}

/// Activations kept by a batched forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Array2<f64>,
    hidden_pre: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
}

struct LayerRange {
    weight: std::ops::Range<usize>,
    bias: std::ops::Range<usize>,
    rows: usize,
    cols: usize,
}

impl ScorerParams {
    pub fn zeros(arch: Architecture, d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::param("d and K must be positive"));
        }
        if let Architecture::Mlp { hidden: 0 } = arch {
            return Err(Error::param("hidden width must be positive"));
        }
        Ok(Self {
            arch,
            d,
            k,
            values: vec![0.0; arch.param_count(d, k)],
        })
    }

    /// Weights uniform on `±sqrt(6 / fan_in)` (variance `2 / fan_in`), biases
    /// zero. Draws layer by layer in layout order.
    pub fn init(arch: Architecture, d: usize, k: usize, rng: &mut impl RngCore) -> Result<Self> {
        let mut params = Self::zeros(arch, d, k)?;
        for layer in params.layers() {
            let bound = (6.0 / layer.cols as f64).sqrt();
            for w in &mut params.values[layer.weight] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn from_values(arch: Architecture, d: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(arch, d, k)?;
        if values.len() != params.values.len() {
            return Err(Error::Dimension {
                expected: params.values.len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("parameters must be finite"));
        }
        params.values = values;
        Ok(params)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn layers(&self) -> Vec<LayerRange> {
        let layer = |start: usize, rows: usize, cols: usize| LayerRange {
            weight: start..start + rows * cols,
            bias: start + rows * cols..start + rows * cols + rows,
            rows,
            cols,
        };
        match self.arch {
            Architecture::Linear => vec![layer(0, self.k, self.d)],
            Architecture::Mlp { hidden } => {
                let first = layer(0, hidden, self.d);
                let second = layer(first.bias.end, self.k, hidden);
                vec![first, second]
            }
        }
    }

    fn weight(&self, layer: &LayerRange) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((layer.rows, layer.cols), &self.values[layer.weight.clone()])
            .expect("layout")
    }

    fn bias(&self, layer: &LayerRange) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[layer.bias.clone()])
    }

    fn affine(&self, layer: &LayerRange, input: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((input.nrows(), layer.rows));
        general_mat_mul(1.0, input, &self.weight(layer).t(), 0.0, &mut out);
        out += &self.bias(layer);
        out
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Scores for each row of `x` (n×d), without keeping activations.
    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let layers = self.layers();
        Ok(match self.arch {
            Architecture::Linear => self.affine(&layers[0], &x),
            Architecture::Mlp { .. } => {
                let hidden = self.affine(&layers[0], &x).mapv_into(relu);
                self.affine(&layers[1], &hidden.view())
            }
        })
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let layers = self.layers();
        match self.arch {
            Architecture::Linear => {
                let scores = self.affine(&layers[0], &x);
                let cache = ForwardCache {
                    input: x.to_owned(),
                    hidden_pre: None,
                    hidden: None,
                };
                Ok((scores, cache))
            }
            Architecture::Mlp { .. } => {
                let hidden_pre = self.affine(&layers[0], &x);
                let hidden = hidden_pre.mapv(relu);
                let scores = self.affine(&layers[1], &hidden.view());
                let cache = ForwardCache {
                    input: x.to_owned(),
                    hidden_pre: Some(hidden_pre),
                    hidden: Some(hidden),
                };
                Ok((scores, cache))
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let (scores, cache) = self.forward_batch(view)?;
        Ok((scores.into_raw_vec_and_offset().0, cache))
    }

    /// Gradient of `Σ_i scores_iᵀ · grad_scores_i` with respect to the
    /// parameters, in layout order.
    pub fn backward(&self, cache: &ForwardCache, grad_scores: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let n = cache.input.nrows();
        if grad_scores.dim() != (n, self.k) {
            return Err(Error::Dimension {
                expected: n * self.k,
                actual: grad_scores.len(),
            });
        }
        if cache.input.ncols() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                actual: cache.input.ncols(),
            });
        }
        let layers = self.layers();
        let mut grad = vec![0.0; self.values.len()];
        match self.arch {
            Architecture::Linear => {
                accumulate_layer(&mut grad, &layers[0], &grad_scores, &cache.input.view());
            }
            Architecture::Mlp { .. } => {
                let (hidden_pre, hidden) = match (&cache.hidden_pre, &cache.hidden) {
                    (Some(p), Some(h)) => (p, h),
                    _ => return Err(Error::input("cache does not come from an mlp forward pass")),
                };
                accumulate_layer(&mut grad, &layers[1], &grad_scores, &hidden.view());
                let mut grad_hidden = Array2::zeros((n, layers[1].cols));
                general_mat_mul(1.0, &grad_scores, &self.weight(&layers[1]), 0.0, &mut grad_hidden);
                grad_hidden.zip_mut_with(hidden_pre, |g, &pre| {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                });
                accumulate_layer(&mut grad, &layers[0], &grad_hidden.view(), &cache.input.view());
            }
        }
        Ok(grad)
    }

    /// Index of the largest score for each row, ties going to the smallest
    /// index. Returned as 1-based labels.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self.scores(x)?.rows().into_iter().map(|r| argmax(r.as_slice().unwrap()) + 1).collect())
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// First maximum; NaN scores never win.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn accumulate_layer(
    grad: &mut [f64],
    layer: &LayerRange,
    grad_out: &ArrayView2<'_, f64>,
    input: &ArrayView2<'_, f64>,
) {
    let (weights, rest) = grad[layer.weight.start..layer.bias.end].split_at_mut(layer.rows * layer.cols);
    let mut gw = ArrayViewMut2::from_shape((layer.rows, layer.cols), weights).expect("layout");
    general_mat_mul(1.0, &grad_out.t(), input, 0.0, &mut gw);
    let mut gb = ArrayViewMut1::from(rest);
    gb.assign(&grad_out.sum_axis(Axis(0)));
}

/// Compares analytic gradients against central differences.
///
/// `objective` returns the value and analytic gradient at the given
/// parameters. The result is `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check(
    params: &[f64],
    mut objective: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::param(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = objective(params);
    if analytic.len() != params.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let (plus, _) = objective(&probe);
        probe[i] = params[i] - eps;
        let (minus, _) = objective(&probe);
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

const CKPT_TAG: &str = "#stochlab-ckpt v1";

/// Text header line, then the parameters as little-endian f64 in layout order.
pub fn write_checkpoint_to(params: &ScorerParams, mut w: impl Write) -> Result<()> {
    let (arch, hidden) = match params.arch {
        Architecture::Linear => ("linear", 0),
        Architecture::Mlp { hidden } => ("mlp", hidden),
    };
    writeln!(
        w,
        "{CKPT_TAG} arch={arch} d={} K={} hidden={hidden} params={}",
        params.d,
        params.k,
        params.values.len()
    )?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint(params: &ScorerParams, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint_to(params, BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint_from(r: impl Read) -> Result<ScorerParams> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let rest = header
        .trim_end()
        .strip_prefix(CKPT_TAG)
        .ok_or_else(|| Error::parse(1, "not a checkpoint header"))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let get = |key: &str| {
        fields
            .iter()
            .find_map(|f| f.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .ok_or_else(|| Error::parse(1, format!("checkpoint header missing `{key}=`")))
    };
    let num = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|e| Error::parse(1, format!("checkpoint `{key}`: {e}")))
    };
    let arch = match get("arch")? {
        "linear" => Architecture::Linear,
        "mlp" => Architecture::Mlp {
            hidden: num("hidden")?,
        },
        other => return Err(Error::parse(1, format!("unknown architecture `{other}`"))),
    };
    let (d, k, count) = (num("d")?, num("K")?, num("params")?);
    if count != arch.param_count(d, k) {
        return Err(Error::parse(1, "parameter count does not match architecture"));
    }
    let offset = header.len();
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Format {
            offset: offset + bytes.len(),
            message: format!("expected {} parameter bytes, found {}", count * 8, bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScorerParams::from_values(arch, d, k, values)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ScorerParams> {
    read_checkpoint_from(File::open(path)?)
}
