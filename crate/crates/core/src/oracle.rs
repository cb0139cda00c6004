//! Exact enumeration oracles for the stochastic-label risk estimator.
//!
//! A [`FiniteWorld`] is a fully enumerable distribution over
//! `(x, Ỹ, s)` on a handful of support points. It is built from the selector
//! prior `P(s)`, the labeled conditionals `P(x | s = j)` and the "None"
//! conditional `P(x, Ỹ | s = K+1)`, and assumes that given a "None" answer the
//! true label is uniform over the `K - l` labels not shown. The ordinary joint
//! `P(x, y)` is derived from those pieces, which lets the tests compare the
//! true classification risk with the population value of the estimator
//! exactly, without any sampling.
//!
//! Losses enter through a [`LossTable`] holding `L(f(x), j)` for every support
//! point and class, so the identities are checked for arbitrary losses.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::RiskBreakdown;
use crate::exec::Exec;
use crate::loss::ClassLoss;

/// All `l`-subsets of `1..=k` in lexicographic order.
pub fn k_subsets(k: usize, l: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, l: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == l {
            out.push(cur.clone());
            return;
        }
        for j in start..=k {
            if k - j + 1 < l - cur.len() {
                break;
            }
            cur.push(j);
            rec(j + 1, k, l, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(1, k, l, &mut Vec::with_capacity(l), &mut out);
    out
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

fn random_distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteWorld {
    k: usize,
    l: usize,
    m: usize,
    candidate_sets: Vec<Vec<usize>>,
    selector_prior: Vec<f64>,
    cond_labeled: Vec<Vec<f64>>,
    cond_none: Vec<Vec<f64>>,
    derived_joint: Vec<Vec<f64>>,
}

impl FiniteWorld {
    /// * `selector_prior`: `K + 1` probabilities, the last one for "None";
    /// * `cond_labeled[j - 1][x]` = `P(x | s = j)`;
    /// * `cond_none[x][c]` = `P(x, Ỹ_c | s = K+1)` with `Ỹ_c` the `c`-th set of
    ///   [`k_subsets`]`(K, l)`.
    pub fn new(
        k: usize,
        l: usize,
        selector_prior: Vec<f64>,
        cond_labeled: Vec<Vec<f64>>,
        cond_none: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if k < 2 || l < 1 || l >= k {
            return Err(Error::param(format!("need K >= 2 and 1 <= l <= K-1 (K={k}, l={l})")));
        }
        let candidate_sets = k_subsets(k, l);
        let m = cond_none.len();
        if m == 0 {
            return Err(Error::param("need at least one support point"));
        }
        if selector_prior.len() != k + 1 || !is_distribution(&selector_prior) {
            return Err(Error::input("selector prior must be a distribution over K+1 outcomes"));
        }
        if cond_labeled.len() != k || cond_labeled.iter().any(|p| p.len() != m || !is_distribution(p)) {
            return Err(Error::input("each P(x | s=j) must be a distribution over the support"));
        }
        let flat: Vec<f64> = cond_none.iter().flatten().copied().collect();
        if cond_none.iter().any(|r| r.len() != candidate_sets.len()) || !is_distribution(&flat) {
            return Err(Error::input("P(x, Ỹ | s=K+1) must be a distribution over support × sets"));
        }
        let mut world = Self {
            k,
            l,
            m,
            candidate_sets,
            selector_prior,
            cond_labeled,
            cond_none,
            derived_joint: Vec::new(),
        };
        world.derived_joint = world.derive_joint();
        Ok(world)
    }

    /// `P(x, y=j) = P(x | s=j) P(s=j) + (1/(K-l)) Σ_{Ỹ ∌ j} P(x, Ỹ | s=K+1) P(s=K+1)`.
    fn derive_joint(&self) -> Vec<Vec<f64>> {
        let p_none = self.selector_prior[self.k];
        let spread = 1.0 / (self.k - self.l) as f64;
        (0..self.m)
            .map(|x| {
                (1..=self.k)
                    .map(|j| {
                        let labeled = self.cond_labeled[j - 1][x] * self.selector_prior[j - 1];
                        let none: f64 = self
                            .candidate_sets
                            .iter()
                            .zip(&self.cond_none[x])
                            .filter(|(set, _)| !set.contains(&j))
                            .map(|(_, p)| p)
                            .sum();
                        labeled + spread * none * p_none
                    })
                    .collect()
            })
            .collect()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set_size(&self) -> usize {
        self.l
    }

    pub fn support_len(&self) -> usize {
        self.m
    }

    pub fn candidate_sets(&self) -> &[Vec<usize>] {
        &self.candidate_sets
    }

    pub fn selector_prior(&self) -> &[f64] {
        &self.selector_prior
    }

    pub fn cond_labeled(&self) -> &[Vec<f64>] {
        &self.cond_labeled
    }

    pub fn cond_none(&self) -> &[Vec<f64>] {
        &self.cond_none
    }

    /// `P(x, y)`, indexed `[x][j - 1]`.
    pub fn derived_joint(&self) -> &[Vec<f64>] {
        &self.derived_joint
    }

    pub fn joint_total(&self) -> f64 {
        self.derived_joint.iter().flatten().sum()
    }
}

/// Random strictly positive world.
pub fn build_finite_world(k: usize, l: usize, m: usize, rng: &mut impl Rng) -> Result<FiniteWorld> {
    if !(2..=6).contains(&k) || l < 1 || l >= k || !(1..=5).contains(&m) {
        return Err(Error::param(format!(
            "finite worlds need 2 <= K <= 6, 1 <= l <= K-1, 1 <= m <= 5 (K={k}, l={l}, m={m})"
        )));
    }
    let sets = k_subsets(k, l).len();
    let selector_prior = random_distribution(k + 1, rng);
    let cond_labeled = (0..k).map(|_| random_distribution(m, rng)).collect();
    let flat = random_distribution(m * sets, rng);
    let cond_none = flat.chunks(sets).map(<[f64]>::to_vec).collect();
    FiniteWorld::new(k, l, selector_prior, cond_labeled, cond_none)
}

/// Explicit score table for the support points, `m × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedScorer {
    scores: Vec<Vec<f64>>,
}

impl FixedScorer {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        let k = scores.first().map_or(0, Vec::len);
        if k == 0 || scores.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::input("score table must be rectangular, non-empty and finite"));
        }
        Ok(Self { scores })
    }

    pub fn random(m: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            scores: (0..m).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
        }
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn loss_table<L: ClassLoss + ?Sized>(&self, loss: &L) -> Result<LossTable> {
        let k = self.scores[0].len();
        let values = self
            .scores
            .iter()
            .map(|row| (1..=k).map(|j| loss.value(row, j)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        LossTable::new(values)
    }
}

/// `L(f(x), j)` for each support point `x` and class `j`, indexed `[x][j - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTable {
    values: Vec<Vec<f64>>,
}

impl LossTable {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let k = values.first().map_or(0, Vec::len);
        if k == 0 || values.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::input("loss table must be rectangular, non-empty and finite"));
        }
        Ok(Self { values })
    }

    pub fn get(&self, x: usize, j: usize) -> f64 {
        self.values[x][j - 1]
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn classes(&self) -> usize {
        self.values[0].len()
    }

    /// Mean loss over the labels outside `set`.
    pub fn complementary(&self, x: usize, set: &[usize]) -> f64 {
        let k = self.classes();
        let sum: f64 = (1..=k).filter(|j| !set.contains(j)).map(|j| self.get(x, j)).sum();
        sum / (k - set.len()) as f64
    }

    fn check_against(&self, m: usize, k: usize) -> Result<()> {
        if self.rows() != m || self.classes() != k {
            return Err(Error::input(format!(
                "loss table is {}×{}, world needs {m}×{k}",
                self.rows(),
                self.classes()
            )));
        }
        Ok(())
    }
}

fn joint_risk(joint: &[Vec<f64>], table: &LossTable) -> f64 {
    joint
        .iter()
        .enumerate()
        .map(|(x, row)| row.iter().enumerate().map(|(j, p)| p * table.get(x, j + 1)).sum::<f64>())
        .sum()
}

/// Classification risk `Σ_x Σ_j P(x, y=j) L(f(x), j)` under the derived joint.
pub fn true_risk(world: &FiniteWorld, table: &LossTable) -> Result<f64> {
    table.check_against(world.m, world.k)?;
    Ok(joint_risk(&world.derived_joint, table))
}

fn labeled_term(world: &FiniteWorld, table: &LossTable, weight: impl Fn(usize) -> f64) -> f64 {
    (1..=world.k)
        .map(|j| {
            let expected: f64 = (0..world.m).map(|x| world.cond_labeled[j - 1][x] * table.get(x, j)).sum();
            weight(j) * expected
        })
        .sum()
}

fn none_expectation(world: &FiniteWorld, table: &LossTable, spread: f64) -> f64 {
    (0..world.m)
        .map(|x| {
            world
                .candidate_sets
                .iter()
                .zip(&world.cond_none[x])
                .map(|(set, p)| {
                    let sum: f64 = (1..=world.k).filter(|j| !set.contains(j)).map(|j| table.get(x, j)).sum();
                    p * spread * sum
                })
                .sum::<f64>()
        })
        .sum()
}

fn population_value(world: &FiniteWorld, table: &LossTable, spread: f64) -> RiskBreakdown {
    let supervised_term = labeled_term(world, table, |j| world.selector_prior[j - 1]);
    let complementary_term = world.selector_prior[world.k] * none_expectation(world, table, spread);
    RiskBreakdown {
        supervised_term,
        complementary_term,
        total: supervised_term + complementary_term,
    }
}

/// `Σ_j P(s=j) E[L(f(x), j) | s=j] + P(s=K+1) E[L̃(f(x), Ỹ) | s=K+1]`, the
/// expectation of the consistent-mode estimator.
pub fn estimator_population_value(world: &FiniteWorld, table: &LossTable) -> Result<RiskBreakdown> {
    table.check_against(world.m, world.k)?;
    Ok(population_value(world, table, 1.0 / (world.k - world.l) as f64))
}

/// Expectation of the literal weighting, where each labeled sample is also
/// weighted by `P(s = s_i)` and averaged over labeled samples only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiteralGap {
    pub value: f64,
    /// `value - estimator_population_value`.
    pub gap: f64,
}

pub fn literal_mode_population_value(world: &FiniteWorld, table: &LossTable) -> Result<LiteralGap> {
    table.check_against(world.m, world.k)?;
    let p_labeled: f64 = world.selector_prior[..world.k].iter().sum();
    let labeled = if p_labeled > 0.0 {
        labeled_term(world, table, |j| {
            let p = world.selector_prior[j - 1];
            (p / p_labeled) * p
        })
    } else {
        0.0
    };
    let spread = 1.0 / (world.k - world.l) as f64;
    let value = labeled + world.selector_prior[world.k] * none_expectation(world, table, spread);
    let reference = population_value(world, table, spread).total;
    Ok(LiteralGap {
        value,
        gap: value - reference,
    })
}

/// An ordinary labeled distribution `P(x, y)` on a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWorld {
    joint: Vec<Vec<f64>>,
}

impl LabeledWorld {
    /// `joint[x][j - 1] = P(x, y = j)`.
    pub fn new(joint: Vec<Vec<f64>>) -> Result<Self> {
        let k = joint.first().map_or(0, Vec::len);
        let flat: Vec<f64> = joint.iter().flatten().copied().collect();
        if k < 2 || joint.iter().any(|r| r.len() != k) || !is_distribution(&flat) {
            return Err(Error::input("joint must be a distribution over support × (K >= 2) classes"));
        }
        Ok(Self { joint })
    }

    pub fn random(m: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let flat = random_distribution(m * k, rng);
        Self::new(flat.chunks(k).map(<[f64]>::to_vec).collect())
    }

    pub fn k(&self) -> usize {
        self.joint[0].len()
    }

    pub fn joint(&self) -> &[Vec<f64>] {
        &self.joint
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NaturalProcess {
    /// Expectation of the consistent-mode estimator under uniform shown sets
    /// and membership-determined selectors.
    pub value: f64,
    pub true_risk: f64,
    pub bias: f64,
}

/// Enumerates every `(x, y, Ỹ)` of the natural annotation process: `Ỹ`
/// uniform over all `l`-subsets, `s = y` when `y ∈ Ỹ` and "None" otherwise.
pub fn natural_process_value(world: &LabeledWorld, l: usize, table: &LossTable) -> Result<NaturalProcess> {
    let k = world.k();
    if l < 1 || l >= k {
        return Err(Error::param(format!("need 1 <= l <= K-1 (K={k}, l={l})")));
    }
    table.check_against(world.joint.len(), k)?;
    let sets = k_subsets(k, l);
    let p_set = 1.0 / sets.len() as f64;
    let mut value = 0.0;
    for (x, row) in world.joint.iter().enumerate() {
        for (y0, &p) in row.iter().enumerate() {
            let y = y0 + 1;
            let per_set: f64 = sets
                .iter()
                .map(|set| {
                    if set.contains(&y) {
                        table.get(x, y)
                    } else {
                        table.complementary(x, set)
                    }
                })
                .sum();
            value += p * p_set * per_set;
        }
    }
    let true_risk = joint_risk(&world.joint, table);
    Ok(NaturalProcess {
        value,
        true_risk,
        bias: value - true_risk,
    })
}

/// `((K-l-1)/K) [ (1/(K-1)) E Σ_{j≠y} L(f(x), j) - R ]`.
pub fn natural_bias_closed_form(world: &LabeledWorld, l: usize, table: &LossTable) -> Result<f64> {
    let k = world.k();
    table.check_against(world.joint.len(), k)?;
    let mut others = 0.0;
    let mut risk = 0.0;
    for (x, row) in world.joint.iter().enumerate() {
        let all: f64 = (1..=k).map(|j| table.get(x, j)).sum();
        for (y0, &p) in row.iter().enumerate() {
            let own = table.get(x, y0 + 1);
            others += p * (all - own);
            risk += p * own;
        }
    }
    let (kf, lf) = (k as f64, l as f64);
    Ok(((kf - lf - 1.0) / kf) * (others / (kf - 1.0) - risk))
}

/// Least-squares slope of `ln(y)` against `ln(x)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub mean_abs_dev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTable {
    pub risk: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Log-log slope of mean deviation against `n`; `NaN` when any deviation is 0.
    pub slope: f64,
}

impl ConvergenceTable {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_abs_dev < w[0].mean_abs_dev)
    }
}

/// Inverse-CDF sampler over a finite distribution.
struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    fn new(p: impl IntoIterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = p
            .into_iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

/// Draws `n` samples from the world for each size and trial, evaluates the
/// consistent-mode estimate, and records the mean `|R̂ - R|` per size.
///
/// Trial `t` of size index `i` uses stream `i * trials + t` of a ChaCha8
/// generator seeded with `seed`, so results do not depend on `exec`.
pub fn mc_convergence(
    world: &FiniteWorld,
    table: &LossTable,
    sample_sizes: &[usize],
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<ConvergenceTable> {
    if trials < 30 {
        return Err(Error::param(format!("need at least 30 trials, got {trials}")));
    }
    if sample_sizes.is_empty() || sample_sizes.windows(2).any(|w| w[0] >= w[1]) || sample_sizes[0] == 0 {
        return Err(Error::param("sample sizes must be positive and strictly increasing"));
    }
    let risk = true_risk(world, table)?;
    let selector = Categorical::new(world.selector_prior.iter().copied());
    let labeled: Vec<Categorical> = world.cond_labeled.iter().map(|p| Categorical::new(p.iter().copied())).collect();
    let none_cells = Categorical::new(world.cond_none.iter().flatten().copied());
    let sets = world.candidate_sets.len();
    let none_loss: Vec<f64> = (0..world.m)
        .flat_map(|x| world.candidate_sets.iter().map(move |set| (x, set)))
        .map(|(x, set)| table.complementary(x, set))
        .collect();

    let deviations = exec.map(sample_sizes.len() * trials, |case| {
        let n = sample_sizes[case / trials];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(case as u64);
        let mut sum = 0.0;
        for _ in 0..n {
            let s = selector.sample(&mut rng);
            sum += if s < world.k {
                table.get(labeled[s].sample(&mut rng), s + 1)
            } else {
                none_loss[none_cells.sample(&mut rng)]
            };
        }
        debug_assert!(none_loss.len() == world.m * sets);
        (sum / n as f64 - risk).abs()
    });
    let rows: Vec<ConvergenceRow> = sample_sizes
        .iter()
        .zip(deviations.chunks(trials))
        .map(|(&n, devs)| ConvergenceRow {
            n,
            mean_abs_dev: devs.iter().sum::<f64>() / trials as f64,
        })
        .collect();
    let slope = if rows.iter().all(|r| r.mean_abs_dev > 0.0) {
        loglog_slope(&rows.iter().map(|r| (r.n as f64, r.mean_abs_dev)).collect::<Vec<_>>())
    } else {
        f64::NAN
    };
    Ok(ConvergenceTable { risk, rows, slope })
}

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;
pub const ZERO_BIAS_TOLERANCE: f64 = 1e-12;
pub const JOINT_TOLERANCE: f64 = 1e-12;
pub const SLOPE_RANGE: (f64, f64) = (-0.65, -0.35);

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Largest class count in the grid (3..=max_k).
    pub max_k: usize,
    /// Worlds per `(K, l, m)` cell.
    pub repeats: usize,
    pub sample_sizes: Vec<usize>,
    pub trials: usize,
    /// Test hook: swaps the complementary weight `1/(K-l)` for `1/l`.
    pub fault: bool,
    pub exec: Exec,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_k: 5,
            repeats: 3,
            sample_sizes: vec![256, 1024, 4096, 16384],
            trials: 100,
            fault: false,
            exec: Exec::default(),
        }
    }
}

impl SuiteConfig {
    pub fn quick() -> Self {
        Self {
            max_k: 4,
            trials: 50,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvergenceCase {
    pub k: usize,
    pub l: usize,
    pub table: ConvergenceTable,
}

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub identity_cases: usize,
    pub identity_max_residual: f64,
    pub joint_max_residual: f64,
    pub natural_cases: usize,
    pub natural_max_residual: f64,
    pub natural_max_bias_at_full: f64,
    pub natural_bias_range: (f64, f64),
    pub literal_gap_range: (f64, f64),
    pub convergence: Vec<ConvergenceCase>,
}

impl OracleReport {
    pub fn identities_hold(&self) -> bool {
        self.identity_max_residual <= IDENTITY_TOLERANCE
            && self.joint_max_residual <= JOINT_TOLERANCE
            && self.natural_max_residual <= CLOSED_FORM_TOLERANCE
            && self.natural_max_bias_at_full <= ZERO_BIAS_TOLERANCE
    }

    pub fn convergence_holds(&self) -> bool {
        self.convergence.iter().all(|c| {
            c.table.strictly_decreasing() && (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&c.table.slope)
        })
    }

    pub fn passed(&self) -> bool {
        self.identities_hold() && self.convergence_holds()
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<44} {:>12} {:>12}  status", "check", "value", "tolerance")?;
        let mut line = |name: &str, value: f64, tol: f64| {
            writeln!(f, "{name:<44} {value:>12.3e} {tol:>12.0e}  {}", verdict(value <= tol))
        };
        line(
            &format!("identity max residual ({} worlds)", self.identity_cases),
            self.identity_max_residual,
            IDENTITY_TOLERANCE,
        )?;
        line("derived joint |sum - 1|", self.joint_max_residual, JOINT_TOLERANCE)?;
        line(
            &format!("natural bias vs closed form ({} cases)", self.natural_cases),
            self.natural_max_residual,
            CLOSED_FORM_TOLERANCE,
        )?;
        line("natural bias at l = K-1", self.natural_max_bias_at_full, ZERO_BIAS_TOLERANCE)?;
        writeln!(
            f,
            "natural-process bias range                   [{:+.4e}, {:+.4e}]",
            self.natural_bias_range.0, self.natural_bias_range.1
        )?;
        writeln!(
            f,
            "literal-weighting gap range                  [{:+.4e}, {:+.4e}]",
            self.literal_gap_range.0, self.literal_gap_range.1
        )?;
        writeln!(f)?;
        writeln!(f, "{:<8} {:>10} {:>16}", "world", "N", "mean |R^-R|")?;
        for case in &self.convergence {
            for row in &case.table.rows {
                writeln!(f, "K={} l={} {:>10} {:>16.6e}", case.k, case.l, row.n, row.mean_abs_dev)?;
            }
            let ok = case.table.strictly_decreasing()
                && (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&case.table.slope);
            writeln!(
                f,
                "K={} l={} log-log slope {:+.4} (want [{}, {}])  {}",
                case.k,
                case.l,
                case.table.slope,
                SLOPE_RANGE.0,
                SLOPE_RANGE.1,
                verdict(ok)
            )?;
        }
        Ok(())
    }
}

struct CaseResult {
    identity: f64,
    joint: f64,
    natural_residual: f64,
    natural_bias: f64,
    full: bool,
    literal_gap: f64,
}

fn run_case(k: usize, l: usize, m: usize, seed: u64, stream: u64, fault: bool) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let world = build_finite_world(k, l, m, &mut rng)?;
    let table = FixedScorer::random(m, k, &mut rng).loss_table(&crate::loss::OvrSquare)?;
    let spread = if fault { 1.0 / l as f64 } else { 1.0 / (k - l) as f64 };
    let estimate = population_value(&world, &table, spread).total;
    let identity = (true_risk(&world, &table)? - estimate).abs();
    let joint = (world.joint_total() - 1.0).abs();
    let literal_gap = literal_mode_population_value(&world, &table)?.gap;

    let labeled = LabeledWorld::random(m, k, &mut rng)?;
    let natural = natural_process_value(&labeled, l, &table)?;
    let closed = natural_bias_closed_form(&labeled, l, &table)?;
    Ok(CaseResult {
        identity,
        joint,
        natural_residual: (natural.bias - closed).abs(),
        natural_bias: natural.bias,
        full: l + 1 == k,
        literal_gap,
    })
}

/// Runs the identity checks over a seeded grid of worlds and a Monte-Carlo
/// convergence study on a few of them.
pub fn run_suite(config: &SuiteConfig) -> Result<OracleReport> {
    if !(3..=6).contains(&config.max_k) {
        return Err(Error::param("max_k must be in 3..=6"));
    }
    let mut cases = Vec::new();
    for k in 3..=config.max_k {
        for l in 1..k {
            for m in 1..=5 {
                for _ in 0..config.repeats {
                    cases.push((k, l, m));
                }
            }
        }
    }
    let results = config.exec.map(cases.len(), |i| {
        let (k, l, m) = cases[i];
        run_case(k, l, m, config.seed, i as u64, config.fault)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let max = |f: &dyn Fn(&CaseResult) -> f64| results.iter().map(f).fold(0.0, f64::max);
    let range = |f: &dyn Fn(&CaseResult) -> f64| {
        results
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };

    let mut convergence = Vec::new();
    let picks = [(3, 1), (4, 2), (config.max_k, 2)];
    for (idx, &(k, l)) in picks.iter().enumerate() {
        if convergence.iter().any(|c: &ConvergenceCase| c.k == k && c.l == l) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        rng.set_stream(idx as u64);
        let world = build_finite_world(k, l, 4, &mut rng)?;
        let table = FixedScorer::random(4, k, &mut rng).loss_table(&crate::loss::OvrSquare)?;
        let table = mc_convergence(&world, &table, &config.sample_sizes, config.trials, config.seed, config.exec)?;
        convergence.push(ConvergenceCase { k, l, table });
    }

    Ok(OracleReport {
        identity_cases: results.len(),
        identity_max_residual: max(&|r| r.identity),
        joint_max_residual: max(&|r| r.joint),
        natural_cases: results.len(),
        natural_max_residual: max(&|r| r.natural_residual),
        natural_max_bias_at_full: max(&|r| if r.full { r.natural_bias.abs() } else { 0.0 }),
        natural_bias_range: range(&|r| r.natural_bias),
        literal_gap_range: range(&|r| r.literal_gap),
        convergence,
    })
}
