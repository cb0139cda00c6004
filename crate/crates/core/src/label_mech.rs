//! Stochastic-label annotation: data types, the simulated annotator, selector
//! statistics and the text file format for annotated datasets.
//!
//! # Random draw order
//!
//! [`sample_subset`] runs a partial Fisher–Yates shuffle over `1..=K` and
//! consumes exactly `l` calls to [`RngCore::next_u64`]. Step `i` maps the
//! 64-bit draw onto `i..K` with a widening multiply (no rejection loop), so the
//! number of draws never depends on the values drawn. [`annotate`] draws
//! nothing beyond its subset, and [`annotate_all`] walks the examples in order
//! with a single ChaCha8 stream seeded from the dataset seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An instance with its ordinary (ground-truth) label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    /// 1-based class label.
    pub label: usize,
}

/// Outcome of one annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Selector {
    /// The true label was among the shown labels.
    Found(usize),
    /// The true label was not shown ("None").
    Absent,
}

impl Selector {
    /// Numeric selector code: `j` for `Found(j)`, `K + 1` for `Absent`.
    pub fn code(self, k: usize) -> usize {
        match self {
            Selector::Found(j) => j,
            Selector::Absent => k + 1,
        }
    }

    pub fn from_code(code: usize, k: usize) -> Result<Self> {
        match code {
            c if (1..=k).contains(&c) => Ok(Selector::Found(c)),
            c if c == k + 1 => Ok(Selector::Absent),
            c => Err(Error::param(format!("selector {c} outside 1..={}", k + 1))),
        }
    }

    pub fn label(self) -> Option<usize> {
        match self {
            Selector::Found(j) => Some(j),
            Selector::Absent => None,
        }
    }

    pub fn is_absent(self) -> bool {
        self == Selector::Absent
    }
}

/// One annotated instance `(x, Ỹ, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticSample {
    /// Empty when the features live in an external source (see [`StochasticDataset::attach_features`]).
    pub features: Vec<f64>,
    /// Shown labels, strictly increasing.
    pub candidate_set: Vec<usize>,
    pub selector: Selector,
}

impl StochasticSample {
    fn validate(&self, k: usize, l: usize) -> std::result::Result<(), String> {
        if self.candidate_set.len() != l {
            return Err(format!(
                "expected {l} candidates, found {}",
                self.candidate_set.len()
            ));
        }
        if self.candidate_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err("candidate set must be strictly increasing".into());
        }
        if let Some(&c) = self.candidate_set.iter().find(|&&c| c == 0 || c > k) {
            return Err(format!("candidate {c} outside 1..={k}"));
        }
        if let Selector::Found(j) = self.selector {
            if j == 0 || j > k {
                return Err(format!("selector {j} outside 1..={}", k + 1));
            }
            if self.candidate_set.binary_search(&j).is_err() {
                return Err(format!("selector {j} is not in the candidate set"));
            }
        }
        Ok(())
    }
}

/// An annotated dataset; every sample shares `K`, `l` and the feature length.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticDataset {
    k: usize,
    set_size: usize,
    seed: u64,
    samples: Vec<StochasticSample>,
}

impl StochasticDataset {
    pub fn new(k: usize, set_size: usize, seed: u64, samples: Vec<StochasticSample>) -> Result<Self> {
        check_set_size(k, set_size)?;
        let dim = samples.first().map_or(0, |s| s.features.len());
        for (i, s) in samples.iter().enumerate() {
            s.validate(k, set_size)
                .map_err(|m| Error::input(format!("sample {i}: {m}")))?;
            if s.features.len() != dim {
                return Err(Error::input(format!(
                    "sample {i}: feature length {} differs from {dim}",
                    s.features.len()
                )));
            }
        }
        Ok(Self {
            k,
            set_size,
            seed,
            samples,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set_size(&self) -> usize {
        self.set_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> &[StochasticSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature dimension (0 when features are held externally).
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    /// Fills in features from the source examples, matched by row index.
    pub fn attach_features(&mut self, source: &[LabeledExample]) -> Result<()> {
        if source.len() != self.samples.len() {
            return Err(Error::input(format!(
                "feature source has {} rows, dataset has {}",
                source.len(),
                self.samples.len()
            )));
        }
        let dim = source.first().map_or(0, |e| e.features.len());
        if let Some(i) = source.iter().position(|e| e.features.len() != dim) {
            return Err(Error::input(format!("feature source row {i} has a different length")));
        }
        for (s, e) in self.samples.iter_mut().zip(source) {
            s.features.clone_from(&e.features);
        }
        Ok(())
    }

    /// Recovers ordinary labels when they are implied by the annotations, which
    /// is the case exactly when `l = K - 1` (a "None" leaves one label).
    pub fn recovered_labels(&self) -> Result<Vec<LabeledExample>> {
        if self.set_size + 1 != self.k {
            return Err(Error::param(format!(
                "labels are only implied when l = K - 1 (K={}, l={})",
                self.k, self.set_size
            )));
        }
        Ok(self
            .samples
            .iter()
            .map(|s| {
                let label = match s.selector {
                    Selector::Found(j) => j,
                    Selector::Absent => (1..=self.k)
                        .find(|j| s.candidate_set.binary_search(j).is_err())
                        .expect("one label is excluded when l = K - 1"),
                };
                LabeledExample {
                    features: s.features.clone(),
                    label,
                }
            })
            .collect())
    }
}

fn check_set_size(k: usize, l: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::param("class count K must be positive"));
    }
    if l < 1 || l > k {
        return Err(Error::param(format!("set size l={l} outside 1..={k}")));
    }
    Ok(())
}

/// Uniform index in `0..n` from one 64-bit draw.
fn index_below(rng: &mut impl RngCore, n: usize) -> usize {
    ((u128::from(rng.next_u64()) * n as u128) >> 64) as usize
}

/// Draws `l` distinct labels from `1..=K`, uniformly over all `C(K, l)`
/// subsets, returned in ascending order.
pub fn sample_subset(rng: &mut impl RngCore, k: usize, l: usize) -> Result<Vec<usize>> {
    check_set_size(k, l)?;
    let mut pool: Vec<usize> = (1..=k).collect();
    for i in 0..l {
        let j = i + index_below(rng, k - i);
        pool.swap(i, j);
    }
    pool.truncate(l);
    pool.sort_unstable();
    Ok(pool)
}

/// Simulates one annotator query for a labeled example.
pub fn annotate(
    example: &LabeledExample,
    rng: &mut impl RngCore,
    k: usize,
    l: usize,
) -> Result<StochasticSample> {
    if example.label == 0 || example.label > k {
        return Err(Error::param(format!(
            "label {} outside 1..={k}",
            example.label
        )));
    }
    let candidate_set = sample_subset(rng, k, l)?;
    let selector = if candidate_set.binary_search(&example.label).is_ok() {
        Selector::Found(example.label)
    } else {
        Selector::Absent
    };
    Ok(StochasticSample {
        features: example.features.clone(),
        candidate_set,
        selector,
    })
}

/// Annotates every example in order from a generator seeded with `seed`.
pub fn annotate_all(
    examples: &[LabeledExample],
    k: usize,
    l: usize,
    seed: u64,
) -> Result<StochasticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = examples
        .iter()
        .map(|e| annotate(e, &mut rng, k, l))
        .collect::<Result<Vec<_>>>()?;
    StochasticDataset::new(k, l, seed, samples)
}

/// Empirical selector distribution `P̂(s = z)`, `z = 1..=K+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorStats {
    counts: Vec<usize>,
    probs: Vec<f64>,
}

impl SelectorStats {
    pub fn from_selectors(k: usize, selectors: impl IntoIterator<Item = Selector>) -> Result<Self> {
        let mut counts = vec![0usize; k + 1];
        let mut n = 0usize;
        for s in selectors {
            let code = s.code(k);
            if code == 0 || code > k + 1 {
                return Err(Error::input(format!("selector {code} outside 1..={}", k + 1)));
            }
            counts[code - 1] += 1;
            n += 1;
        }
        if n == 0 {
            return Err(Error::input("selector statistics need a non-empty dataset"));
        }
        let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
        Ok(Self { counts, probs })
    }

    pub fn k(&self) -> usize {
        self.counts.len() - 1
    }

    /// Counts indexed by `code - 1`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Probabilities indexed by `code - 1`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, s: Selector) -> f64 {
        self.probs[s.code(self.k()) - 1]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn absent_count(&self) -> usize {
        self.counts[self.k()]
    }
}

pub fn selector_stats(dataset: &StochasticDataset) -> Result<SelectorStats> {
    SelectorStats::from_selectors(dataset.k(), dataset.samples().iter().map(|s| s.selector))
}

const HEADER_TAG: &str = "#stochlab v1";

/// Writes the dataset in the `#stochlab v1` text format. Features are written
/// only when `with_features` is set; otherwise rows refer to an external
/// feature source by index.
pub fn write_dataset_to(dataset: &StochasticDataset, mut w: impl Write, with_features: bool) -> Result<()> {
    writeln!(
        w,
        "{HEADER_TAG} K={} l={} N={} seed={}",
        dataset.k,
        dataset.set_size,
        dataset.samples.len(),
        dataset.seed
    )?;
    let mut line = String::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        use std::fmt::Write as _;
        line.clear();
        write!(line, "{i},{},", s.selector.code(dataset.k)).unwrap();
        for (n, c) in s.candidate_set.iter().enumerate() {
            if n > 0 {
                line.push(';');
            }
            write!(line, "{c}").unwrap();
        }
        if with_features {
            for v in &s.features {
                write!(line, ",{v}").unwrap();
            }
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(dataset: &StochasticDataset, path: impl AsRef<Path>, with_features: bool) -> Result<()> {
    let file = File::create(path)?;
    write_dataset_to(dataset, BufWriter::new(file), with_features)
}

fn header_field<'a>(fields: &'a [&str], key: &str) -> Option<&'a str> {
    fields
        .iter()
        .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

struct Header {
    k: usize,
    l: usize,
    n: usize,
    seed: u64,
}

fn parse_header(line: &str) -> Result<Header> {
    let rest = line
        .strip_prefix(HEADER_TAG)
        .ok_or_else(|| Error::parse(1, format!("expected header starting with `{HEADER_TAG}`")))?;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let get = |key: &str| -> Result<u64> {
        header_field(&fields, key)
            .ok_or_else(|| Error::parse(1, format!("header missing `{key}=`")))?
            .parse::<u64>()
            .map_err(|e| Error::parse(1, format!("header field `{key}`: {e}")))
    };
    let header = Header {
        k: get("K")? as usize,
        l: get("l")? as usize,
        n: get("N")? as usize,
        seed: get("seed")?,
    };
    if header.k == 0 || header.l == 0 || header.l > header.k {
        return Err(Error::parse(1, format!("invalid K={} l={}", header.k, header.l)));
    }
    Ok(header)
}

fn parse_row(line: &str, lineno: usize, row: usize, h: &Header) -> Result<StochasticSample> {
    let err = |m: String| Error::parse(lineno, m);
    let mut parts = line.split(',');
    let index: usize = parts
        .next()
        .unwrap_or("")
        .trim()
        .parse()
        .map_err(|e| err(format!("row index: {e}")))?;
    if index != row {
        return Err(err(format!("row index {index}, expected {row}")));
    }
    let code: usize = parts
        .next()
        .ok_or_else(|| err("missing selector".into()))?
        .trim()
        .parse()
        .map_err(|e| err(format!("selector: {e}")))?;
    let selector = Selector::from_code(code, h.k).map_err(|_| {
        err(format!("selector {code} outside 1..={}", h.k + 1))
    })?;
    let candidate_set = parts
        .next()
        .ok_or_else(|| err("missing candidate set".into()))?
        .split(';')
        .map(|c| c.trim().parse::<usize>().map_err(|e| err(format!("candidate: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let features = parts
        .map(|v| v.trim().parse::<f64>().map_err(|e| err(format!("feature: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let sample = StochasticSample {
        features,
        candidate_set,
        selector,
    };
    sample.validate(h.k, h.l).map_err(err)?;
    Ok(sample)
}

pub fn read_dataset_from(r: impl BufRead) -> Result<StochasticDataset> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file"))??;
    let header = parse_header(header_line.trim_end())?;
    let mut samples = Vec::with_capacity(header.n);
    for (row, line) in lines.enumerate() {
        let line = line?;
        let lineno = row + 2;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_row(line.trim_end(), lineno, samples.len(), &header)?;
        if let Some(first) = samples.first() {
            let first: &StochasticSample = first;
            if first.features.len() != sample.features.len() {
                return Err(Error::parse(
                    lineno,
                    format!(
                        "row has {} features, earlier rows have {}",
                        sample.features.len(),
                        first.features.len()
                    ),
                ));
            }
        }
        samples.push(sample);
    }
    if samples.len() != header.n {
        return Err(Error::parse(
            samples.len() + 2,
            format!("header declares N={} but file has {} rows", header.n, samples.len()),
        ));
    }
    StochasticDataset::new(header.k, header.l, header.seed, samples)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<StochasticDataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn full_subset_when_l_equals_k() {
        let mut r = rng(3);
        for _ in 0..50 {
            assert_eq!(sample_subset(&mut r, 10, 10).unwrap(), (1..=10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_bad_set_sizes() {
        let mut r = rng(0);
        assert!(matches!(sample_subset(&mut r, 10, 0), Err(Error::InvalidParameter(_))));
        assert!(matches!(sample_subset(&mut r, 10, 11), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn subset_consumes_exactly_l_draws() {
        let mut a = rng(11);
        let mut b = rng(11);
        sample_subset(&mut a, 10, 4).unwrap();
        for _ in 0..4 {
            b.next_u64();
        }
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn membership_frequency_is_l_over_k() {
        let (k, l, n) = (10, 3, 100_000);
        let mut r = rng(7);
        let mut hits = vec![0usize; k + 1];
        for _ in 0..n {
            for c in sample_subset(&mut r, k, l).unwrap() {
                hits[c] += 1;
            }
        }
        let p = l as f64 / k as f64;
        let band = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
        for (j, &h) in hits.iter().enumerate().skip(1) {
            let f = h as f64 / n as f64;
            assert!((f - p).abs() <= band, "label {j}: {f}");
        }
    }

    #[test]
    fn subsets_are_uniform_chi_square() {
        // All C(4,2) = 6 subsets, enumerated independently of the sampler.
        let mut all = Vec::new();
        for a in 1..=4 {
            for b in a + 1..=4 {
                all.push(vec![a, b]);
            }
        }
        assert_eq!(all.len(), 6);
        let n = 60_000;
        let mut r = rng(2024);
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        for _ in 0..n {
            *counts.entry(sample_subset(&mut r, 4, 2).unwrap()).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let expected = n as f64 / 6.0;
        let sigma = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        let mut chi2 = 0.0;
        for s in &all {
            let c = counts[s] as f64;
            assert!((c - expected).abs() <= 3.0 * sigma, "{s:?}: {c}");
            chi2 += (c - expected).powi(2) / expected;
        }
        // 99.9% quantile of chi-square with 5 degrees of freedom.
        assert!(chi2 < 20.515, "chi2 = {chi2}");
    }

    #[test]
    fn annotate_membership_and_none_rates() {
        let ex = |label| LabeledExample {
            features: vec![0.5, 1.0],
            label,
        };
        let mut r = rng(1);
        for label in 1..=10 {
            let s = annotate(&ex(label), &mut r, 10, 10).unwrap();
            assert_eq!(s.selector, Selector::Found(label));
            assert_eq!(s.features, vec![0.5, 1.0]);
        }
        for (l, expected) in [(8, 0.2), (5, 0.5)] {
            let n = 100_000;
            let mut none = 0;
            for i in 0..n {
                let s = annotate(&ex(1 + i % 10), &mut r, 10, l).unwrap();
                if let Selector::Found(j) = s.selector {
                    assert!(s.candidate_set.contains(&j));
                } else {
                    none += 1;
                }
            }
            let f = none as f64 / n as f64;
            let band = 4.0 * (expected * (1.0 - expected) / n as f64).sqrt();
            assert!((f - expected).abs() <= band, "l={l}: {f}");
        }
    }

    #[test]
    fn annotate_rejects_out_of_range_label() {
        let e = LabeledExample {
            features: vec![],
            label: 11,
        };
        assert!(annotate(&e, &mut rng(0), 10, 3).is_err());
    }

    #[test]
    fn stats_counting() {
        let sel: Vec<Selector> = [1, 1, 3, 4]
            .iter()
            .map(|&c| Selector::from_code(c, 3).unwrap())
            .collect();
        let stats = SelectorStats::from_selectors(3, sel).unwrap();
        assert_eq!(stats.probs(), &[0.5, 0.0, 0.25, 0.25]);
        assert_eq!(stats.counts(), &[2, 0, 1, 1]);

        let stats = SelectorStats::from_selectors(3, vec![Selector::Absent; 5]).unwrap();
        assert_eq!(stats.probs(), &[0.0, 0.0, 0.0, 1.0]);

        assert!(matches!(
            SelectorStats::from_selectors(3, Vec::new()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn stats_of_annotated_dataset() {
        let examples: Vec<_> = (0..50_000)
            .map(|i| LabeledExample {
                features: vec![],
                label: 1 + i % 10,
            })
            .collect();
        let ds = annotate_all(&examples, 10, 8, 5).unwrap();
        let stats = selector_stats(&ds).unwrap();
        assert!((stats.prob(Selector::Absent) - 0.2).abs() < 0.01);
        assert!((stats.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    fn small_dataset(with_features: bool) -> StochasticDataset {
        let examples: Vec<_> = (0..20)
            .map(|i| LabeledExample {
                features: if with_features {
                    vec![i as f64 / 7.0, -0.1 * i as f64, 1e-300]
                } else {
                    vec![]
                },
                label: 1 + i % 5,
            })
            .collect();
        annotate_all(&examples, 5, 3, 99).unwrap()
    }

    #[test]
    fn file_round_trip() {
        for with in [true, false] {
            let ds = small_dataset(with);
            let mut buf = Vec::new();
            write_dataset_to(&ds, &mut buf, with).unwrap();
            let back = read_dataset_from(&buf[..]).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let write = || {
            let mut buf = Vec::new();
            write_dataset_to(&small_dataset(true), &mut buf, true).unwrap();
            buf
        };
        assert_eq!(write(), write());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let bad_selector = "#stochlab v1 K=4 l=2 N=2 seed=0\n0,1,1;2\n1,0,1;3\n";
        match read_dataset_from(bad_selector.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("selector"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let short_row = "#stochlab v1 K=4 l=3 N=2 seed=0\n0,5,1;2;3\n1,5,1;2\n";
        assert!(matches!(
            read_dataset_from(short_row.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
        let bad_header = "#stochlab v2 K=4 l=3 N=0 seed=0\n";
        assert!(matches!(
            read_dataset_from(bad_header.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        let not_member = "#stochlab v1 K=4 l=2 N=1 seed=0\n0,3,1;2\n";
        assert!(read_dataset_from(not_member.as_bytes()).is_err());
        let wrong_n = "#stochlab v1 K=4 l=2 N=3 seed=0\n0,3,1;3\n";
        assert!(read_dataset_from(wrong_n.as_bytes()).is_err());
    }

    #[test]
    fn recovered_labels_need_l_k_minus_1() {
        let ds = small_dataset(false);
        assert!(ds.recovered_labels().is_err());
        let examples: Vec<_> = (0..100)
            .map(|i| LabeledExample {
                features: vec![i as f64],
                label: 1 + i % 4,
            })
            .collect();
        let ds = annotate_all(&examples, 4, 3, 1).unwrap();
        let rec = ds.recovered_labels().unwrap();
        assert_eq!(rec, examples);
    }
}
