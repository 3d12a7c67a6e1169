//! Datasets: the SVMLight-multilabel text format, hashed text input, the
//! Hellinger transform and a seeded Gaussian-cluster generator.
//!
//! On disk a data line is `labels features`, where `labels` is a comma list
//! of 0-based class ids (possibly empty, in which case the line starts with a
//! feature) and `features` are `index:value` pairs with 1-based, strictly
//! increasing indices. `#` starts a comment, either on its own line or after
//! the last feature. Two header comments are understood:
//!
//! ```text
//! #d 128
//! #c 1000
//! ```
//!
//! declaring the feature and class counts so train and test files agree.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::hashing;
use crate::sparse::{CsrMatrix, SparseRow};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Multiclass,
    Multilabel,
}

impl std::fmt::Display for TaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskMode::Multiclass => "multiclass",
            TaskMode::Multilabel => "multilabel",
        })
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(TaskMode::Multiclass),
            "multilabel" => Ok(TaskMode::Multilabel),
            other => Err(Error::invalid(format!("unknown task mode {other:?}"))),
        }
    }
}

/// Features, binary labels, task mode and per-example importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: CsrMatrix,
    labels: CsrMatrix,
    mode: TaskMode,
    weights: Vec<f64>,
}

impl Dataset {
    /// Validates the label matrix against `mode`; weights start at one.
    pub fn new(features: CsrMatrix, labels: CsrMatrix, mode: TaskMode) -> Result<Self> {
        let n = features.n_rows();
        Self::with_weights(features, labels, mode, vec![1.0; n])
    }

    pub fn with_weights(
        features: CsrMatrix,
        labels: CsrMatrix,
        mode: TaskMode,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if labels.n_rows() != features.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: features.n_rows(),
                actual: labels.n_rows(),
                context: "label rows",
            });
        }
        if weights.len() != features.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: features.n_rows(),
                actual: weights.len(),
                context: "example weights",
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("example weights must be finite and >= 0"));
        }
        if labels.values().iter().any(|&v| v != 1.0) {
            return Err(Error::invalid("label values must all be 1"));
        }
        if mode == TaskMode::Multiclass {
            if let Some(i) = (0..labels.n_rows()).find(|&i| labels.row(i).nnz() != 1) {
                return Err(Error::invalid(format!(
                    "multiclass example {i} has {} labels, expected exactly one",
                    labels.row(i).nnz()
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            mode,
            weights,
        })
    }

    /// Builds a dataset from per-example label lists.
    pub fn from_label_lists(
        features: CsrMatrix,
        labels: &[Vec<u32>],
        n_classes: usize,
        mode: TaskMode,
    ) -> Result<Self> {
        let labels = label_matrix(labels, n_classes)?;
        Self::new(features, labels, mode)
    }

    pub fn features(&self) -> &CsrMatrix {
        &self.features
    }

    pub fn labels(&self) -> &CsrMatrix {
        &self.labels
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_examples(&self) -> usize {
        self.features.n_rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.n_cols()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.n_cols()
    }

    #[inline]
    pub fn x(&self, i: usize) -> SparseRow<'_> {
        self.features.row(i)
    }

    #[inline]
    pub fn y(&self, i: usize) -> &[u32] {
        self.labels.row(i).indices
    }

    /// Average number of labels per example.
    pub fn avg_labels(&self) -> f64 {
        if self.n_examples() == 0 {
            0.0
        } else {
            self.labels.nnz() as f64 / self.n_examples() as f64
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            n: self.n_examples(),
            d: self.n_features(),
            c: self.n_classes(),
            s: self.avg_labels(),
            mode: self.mode,
            nnz: self.features.nnz(),
        }
    }

    pub fn with_mode(self, mode: TaskMode) -> Result<Self> {
        Self::with_weights(self.features, self.labels, mode, self.weights)
    }

    pub fn set_weights(self, weights: Vec<f64>) -> Result<Self> {
        Self::with_weights(self.features, self.labels, self.mode, weights)
    }

    /// Widens the feature and label spaces, e.g. to align a test file with training.
    pub fn with_dims(self, n_features: usize, n_classes: usize) -> Result<Self> {
        let features = self.features.with_n_cols(n_features)?;
        let labels = self.labels.with_n_cols(n_classes)?;
        Self::with_weights(features, labels, self.mode, self.weights)
    }

    /// Keeps the listed examples, in order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: self.labels.select_rows(rows),
            mode: self.mode,
            weights: rows.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub s: f64,
    pub mode: TaskMode,
    pub nnz: usize,
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "n={} d={} c={} s={:.2} mode={} nnz={}",
            self.n, self.d, self.c, self.s, self.mode, self.nnz
        )
    }
}

pub(crate) fn label_matrix(labels: &[Vec<u32>], n_classes: usize) -> Result<CsrMatrix> {
    CsrMatrix::from_rows(
        n_classes,
        labels.iter().map(|ls| {
            let mut ls = ls.clone();
            ls.sort_unstable();
            ls.dedup();
            ls.into_iter().map(|c| (c, 1.0)).collect::<Vec<_>>()
        }),
    )
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Overrides mode inference.
    pub mode: Option<TaskMode>,
    /// Minimum feature count (the file's `#d` header or max index otherwise).
    pub n_features: Option<usize>,
    /// Minimum class count.
    pub n_classes: Option<usize>,
}

enum Line {
    Blank,
    Header { key: char, value: usize },
    Data {
        labels: Vec<u32>,
        features: Vec<(u32, f64)>,
    },
}

fn parse_line(raw: &str, hash_bits: Option<u32>) -> std::result::Result<Line, String> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Ok(Line::Blank);
    }
    if let Some(rest) = trimmed.strip_prefix('#') {
        let mut parts = rest.split_whitespace();
        if let (Some(key @ ("d" | "c")), Some(v), None) = (parts.next(), parts.next(), parts.next())
        {
            let value = v
                .parse::<usize>()
                .map_err(|e| format!("bad #{key} header value {v:?}: {e}"))?;
            return Ok(Line::Header {
                key: key.chars().next().unwrap_or('d'),
                value,
            });
        }
        return Ok(Line::Blank);
    }
    let body = match trimmed.find('#') {
        Some(p) => trimmed[..p].trim_end(),
        None => trimmed,
    };
    let mut tokens = body.split_whitespace().peekable();
    let mut labels = Vec::new();
    let first_is_labels = match tokens.peek() {
        Some(t) if hash_bits.is_some() => !t.is_empty(),
        Some(t) => !t.contains(':'),
        None => false,
    };
    if first_is_labels {
        let tok = tokens.next().unwrap_or_default();
        for part in tok.split(',') {
            let c = part
                .parse::<u32>()
                .map_err(|e| format!("bad label {part:?}: {e}"))?;
            labels.push(c);
        }
        labels.sort_unstable();
        labels.dedup();
    }
    let features = match hash_bits {
        Some(bits) => {
            let toks: Vec<&str> = tokens.collect();
            let row = hashing::hash_features(&toks, bits).map_err(|e| e.to_string())?;
            row.indices.into_iter().zip(row.values).collect()
        }
        None => {
            let mut features: Vec<(u32, f64)> = Vec::new();
            for tok in tokens {
                let (idx, val) = tok
                    .split_once(':')
                    .ok_or_else(|| format!("feature token {tok:?} has no ':'"))?;
                let idx: u32 = idx
                    .parse()
                    .map_err(|e| format!("bad feature index {idx:?}: {e}"))?;
                if idx == 0 {
                    return Err("feature indices are 1-based; found 0".into());
                }
                let val: f64 = val
                    .parse()
                    .map_err(|e| format!("bad feature value {val:?}: {e}"))?;
                if !val.is_finite() {
                    return Err(format!("non-finite feature value {val}"));
                }
                let j = idx - 1;
                if let Some(&(last, _)) = features.last() {
                    if j == last {
                        return Err(format!("duplicate feature index {idx}"));
                    }
                    if j < last {
                        return Err(format!(
                            "feature indices not increasing ({} then {idx})",
                            last + 1
                        ));
                    }
                }
                features.push((j, val));
            }
            features
        }
    };
    Ok(Line::Data { labels, features })
}

fn assemble(lines: &[String], opts: ParseOptions, hash_bits: Option<u32>) -> Result<Dataset> {
    let parsed = exec::map_range(lines.len(), |i| parse_line(&lines[i], hash_bits));
    let mut d_header = None;
    let mut c_header = None;
    let mut label_rows = Vec::new();
    let mut feature_rows = Vec::new();
    for (i, p) in parsed.into_iter().enumerate() {
        match p.map_err(|msg| Error::Parse { line: i + 1, msg })? {
            Line::Blank => {}
            Line::Header { key: 'd', value } => d_header = Some(value),
            Line::Header { value, .. } => c_header = Some(value),
            Line::Data { labels, features } => {
                label_rows.push(labels);
                feature_rows.push(features);
            }
        }
    }
    let max_idx = feature_rows
        .iter()
        .filter_map(|r| r.last().map(|&(j, _)| j as usize + 1))
        .max()
        .unwrap_or(0);
    let max_label = label_rows
        .iter()
        .filter_map(|r| r.last().map(|&c| c as usize + 1))
        .max()
        .unwrap_or(0);
    let d = hash_bits
        .map(|b| 1usize << b)
        .unwrap_or(0)
        .max(max_idx)
        .max(d_header.unwrap_or(0))
        .max(opts.n_features.unwrap_or(0));
    let c = max_label
        .max(c_header.unwrap_or(0))
        .max(opts.n_classes.unwrap_or(0));
    if let Some(dh) = d_header {
        if max_idx > dh {
            return Err(Error::invalid(format!(
                "feature index {max_idx} exceeds declared dimension #d {dh}"
            )));
        }
    }
    let mode = match opts.mode {
        Some(m) => m,
        None if label_rows.iter().all(|r| r.len() == 1) => TaskMode::Multiclass,
        None => TaskMode::Multilabel,
    };
    if mode == TaskMode::Multiclass {
        // report the offending line rather than the example index
        let mut example = 0;
        for (i, line) in lines.iter().enumerate() {
            if let Ok(Line::Data { labels, .. }) = parse_line(line, hash_bits) {
                if labels.len() != 1 {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!(
                            "multiclass data needs exactly one label, found {}",
                            labels.len()
                        ),
                    });
                }
                example += 1;
            }
        }
        debug_assert_eq!(example, label_rows.len());
    }
    let features = CsrMatrix::from_rows(d, feature_rows)?;
    let labels = label_matrix(&label_rows, c)?;
    Dataset::new(features, labels, mode)
}

fn read_lines(reader: impl BufRead) -> Result<Vec<String>> {
    Ok(reader.lines().collect::<std::io::Result<Vec<_>>>()?)
}

/// Parses SVMLight-multilabel text.
pub fn parse_svmlight(reader: impl BufRead, opts: ParseOptions) -> Result<Dataset> {
    assemble(&read_lines(reader)?, opts, None)
}

/// Parses `labels token token ...` lines, hashing unigrams and bigrams into
/// `2^bits` features.
pub fn parse_hashed_text(reader: impl BufRead, bits: u32, opts: ParseOptions) -> Result<Dataset> {
    if !(1..=hashing::MAX_HASH_BITS).contains(&bits) {
        return Err(Error::invalid(format!("hash bits must be in 1..=30, got {bits}")));
    }
    assemble(&read_lines(reader)?, opts, Some(bits))
}

/// Writes the dataset with `#d`/`#c` headers. Values use the shortest
/// representation that parses back to the same `f64`. An example with no
/// labels and no features becomes a blank line, which the parser skips.
pub fn write_svmlight(ds: &Dataset, mut out: impl Write) -> Result<()> {
    writeln!(out, "#d {}", ds.n_features())?;
    writeln!(out, "#c {}", ds.n_classes())?;
    let mut line = String::new();
    for i in 0..ds.n_examples() {
        line.clear();
        for (t, c) in ds.y(i).iter().enumerate() {
            if t > 0 {
                line.push(',');
            }
            line.push_str(&c.to_string());
        }
        for (j, v) in ds.x(i).iter() {
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&format!("{}:{}", j + 1, v));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// L1-normalizes each row and takes elementwise square roots. Rows that sum
/// to zero are left alone.
pub fn hellinger_transform(ds: &Dataset) -> Result<Dataset> {
    let x = ds.features();
    if let Some(v) = x.values().iter().find(|v| **v < 0.0) {
        return Err(Error::invalid(format!(
            "Hellinger transform needs nonnegative features, found {v}"
        )));
    }
    let mut values = x.values().to_vec();
    let offsets = x.row_offsets();
    for i in 0..x.n_rows() {
        let row = &mut values[offsets[i]..offsets[i + 1]];
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v / sum).sqrt());
        }
    }
    let features = CsrMatrix::new(
        x.n_rows(),
        x.n_cols(),
        offsets.to_vec(),
        x.col_indices().to_vec(),
        values,
    )?;
    Dataset::with_weights(
        features,
        ds.labels().clone(),
        ds.mode(),
        ds.weights().to_vec(),
    )
}

/// Gaussian clusters around class centers on a sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub dim: usize,
    pub examples_per_class: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 || self.examples_per_class == 0 {
            return Err(Error::invalid("synthetic counts must all be >= 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.cluster_separation.is_finite() {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// Draws `(train, test)` with a 90:10 split per class. Class centers lie on a
/// sphere of radius `cluster_separation`; every example is its center plus
/// isotropic noise. Rows are shuffled, and everything derives from `seed`.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let mut centers = Vec::with_capacity(cfg.n_classes * d);
    for _ in 0..cfg.n_classes {
        let mut c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 0.0 {
            cfg.cluster_separation / norm
        } else {
            0.0
        };
        c.iter_mut().for_each(|v| *v *= scale);
        centers.extend(c);
    }

    let n_test = cfg.examples_per_class / 10;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..cfg.n_classes {
        let center = &centers[class * d..(class + 1) * d];
        for e in 0..cfg.examples_per_class {
            let x: Vec<f64> = center
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + cfg.noise_sigma * z
                })
                .collect();
            if e < cfg.examples_per_class - n_test {
                train.push((class as u32, x));
            } else {
                test.push((class as u32, x));
            }
        }
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);

    let build = |rows: Vec<(u32, Vec<f64>)>| -> Result<Dataset> {
        let labels: Vec<Vec<u32>> = rows.iter().map(|(c, _)| vec![*c]).collect();
        let features = CsrMatrix::from_rows(
            d,
            rows.iter().map(|(_, x)| {
                x.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, &v)| (j as u32, v))
                    .collect::<Vec<_>>()
            }),
        )?;
        Dataset::from_label_lists(features, &labels, cfg.n_classes, TaskMode::Multiclass)
    };
    Ok((build(train)?, build(test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Dataset> {
        parse_svmlight(text.as_bytes(), ParseOptions::default())
    }

    #[test]
    fn minimal_two_line_file() {
        let ds = parse("0 1:1 2:1\n1 2:1 3:1\n").unwrap();
        assert_eq!((ds.n_examples(), ds.n_features(), ds.n_classes()), (2, 3, 2));
        assert_eq!(ds.mode(), TaskMode::Multiclass);
        assert_eq!(ds.x(1).indices, &[1, 2]);
        assert_eq!(ds.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn comma_labels_make_multilabel() {
        let ds = parse("0,2 1:0.5\n").unwrap();
        assert_eq!(ds.mode(), TaskMode::Multilabel);
        assert_eq!(ds.y(0), &[0, 2]);
        assert_eq!(ds.n_classes(), 3);
    }

    #[test]
    fn lines_without_labels_and_comments() {
        let ds = parse("# a comment\n1:2 3:-1 # trailing\n\n4 2:1\n").unwrap();
        assert_eq!(ds.n_examples(), 2);
        assert_eq!(ds.mode(), TaskMode::Multilabel);
        assert!(ds.y(0).is_empty());
        assert_eq!(ds.x(0).values, &[2.0, -1.0]);
    }

    #[test]
    fn header_declares_dimensions() {
        let ds = parse("#d 10\n#c 7\n0 1:1\n").unwrap();
        assert_eq!((ds.n_features(), ds.n_classes()), (10, 7));
        assert!(parse("#d 2\n0 3:1\n").is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("0 1:1\n0 1:1 1:2\n", 2),
            ("0 1:1\n\n0 x:1\n", 3),
            ("0 2:1 1:1\n", 1),
            ("a 1:1\n", 1),
            ("0 0:1\n", 1),
            ("0 1:nan\n", 1),
            ("0 1\n", 1),
        ];
        for (text, line) in cases {
            match parse(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn mode_override() {
        let ds = parse_svmlight(
            "1 1:1\n0 2:1\n".as_bytes(),
            ParseOptions {
                mode: Some(TaskMode::Multilabel),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(ds.mode(), TaskMode::Multilabel);
        let forced = parse_svmlight(
            "1,2 1:1\n".as_bytes(),
            ParseOptions {
                mode: Some(TaskMode::Multiclass),
                ..Default::default()
            },
        );
        assert!(matches!(forced, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn average_labels_summary() {
        // 50 rows with 3 labels and 50 rows with ... chosen to average 3.26
        let mut text = String::new();
        for i in 0..100 {
            let n_labels = if i < 26 { 4 } else { 3 };
            let labels: Vec<String> = (0..n_labels).map(|c| (c + i % 5).to_string()).collect();
            text.push_str(&format!("{} 1:1\n", labels.join(",")));
        }
        let ds = parse(&text).unwrap();
        assert!((ds.avg_labels() - 3.26).abs() < 1e-12);
        assert!(ds.summary().to_string().contains("s=3.26"));
    }

    #[test]
    fn hashed_text_input() {
        let ds = parse_hashed_text(
            "0 the cat sat\n1,2 a dog\n".as_bytes(),
            10,
            ParseOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.n_features(), 1024);
        assert_eq!(ds.mode(), TaskMode::Multilabel);
        assert_eq!(ds.x(0).values.iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn parallel_parse_matches_sequential() {
        let (train, _) = make_synthetic(&SynthConfig {
            n_classes: 20,
            dim: 6,
            examples_per_class: 30,
            cluster_separation: 3.0,
            noise_sigma: 1.0,
            seed: 1,
        })
        .unwrap();
        let mut buf = Vec::new();
        write_svmlight(&train, &mut buf).unwrap();
        let par = parse_svmlight(buf.as_slice(), ParseOptions::default()).unwrap();
        let seq = exec::sequential(|| parse_svmlight(buf.as_slice(), ParseOptions::default()))
            .unwrap();
        assert_eq!(par, seq);
        assert_eq!(par, train);
    }

    #[test]
    fn hellinger_examples() {
        let x = CsrMatrix::from_rows(3, vec![vec![(0, 4.0), (2, 12.0)], vec![(1, 1.0)], vec![]])
            .unwrap();
        let ds = Dataset::from_label_lists(x, &[vec![0], vec![0], vec![0]], 1, TaskMode::Multiclass)
            .unwrap();
        let h = hellinger_transform(&ds).unwrap();
        assert!((h.x(0).values[0] - 0.5).abs() < 1e-15);
        assert!((h.x(0).values[1] - 0.866_025_403_784_438_6).abs() < 1e-15);
        assert_eq!(h.x(1).values, &[1.0]);
        assert!(h.x(2).is_empty());

        let neg = CsrMatrix::from_rows(1, vec![vec![(0, -1.0)]]).unwrap();
        let ds = Dataset::from_label_lists(neg, &[vec![0]], 1, TaskMode::Multiclass).unwrap();
        assert!(hellinger_transform(&ds).is_err());
    }

    #[test]
    fn synthetic_noiseless_and_deterministic() {
        let cfg = SynthConfig {
            n_classes: 5,
            dim: 4,
            examples_per_class: 10,
            cluster_separation: 2.0,
            noise_sigma: 0.0,
            seed: 42,
        };
        let (train, test) = make_synthetic(&cfg).unwrap();
        assert_eq!((train.n_examples(), test.n_examples()), (45, 5));
        assert_eq!(make_synthetic(&cfg).unwrap(), (train.clone(), test.clone()));

        // every example sits on its center, so 1-NN over train is exact
        for i in 0..test.n_examples() {
            let xi = test.x(i).to_owned();
            let nearest = (0..train.n_examples())
                .min_by(|&a, &b| {
                    let da: f64 = dist2(&xi.values, train.x(a).values);
                    let db: f64 = dist2(&xi.values, train.x(b).values);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(train.y(nearest), test.y(i));
            assert!(dist2(&xi.values, train.x(nearest).values) < 1e-24);
        }
    }

    fn dist2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn row_strategy() -> impl Strategy<Value = (Vec<u32>, Vec<(u32, f64)>)> {
        (
            prop::collection::btree_set(0u32..6, 0..3),
            prop::collection::btree_map(0u32..12, -50.0f64..50.0, 0..6),
        )
            .prop_filter("an example with neither labels nor features writes a blank line", |(ls, fs)| {
                !ls.is_empty() || !fs.is_empty()
            })
            .prop_map(|(ls, fs)| (ls.into_iter().collect(), fs.into_iter().collect()))
    }

    proptest! {
        #[test]
        fn svmlight_round_trip(rows in prop::collection::vec(row_strategy(), 1..20)) {
            let labels: Vec<Vec<u32>> = rows.iter().map(|r| r.0.clone()).collect();
            let x = CsrMatrix::from_rows(12, rows.iter().map(|r| r.1.clone())).unwrap();
            let ds = Dataset::from_label_lists(x, &labels, 6, TaskMode::Multilabel).unwrap();
            let mut buf = Vec::new();
            write_svmlight(&ds, &mut buf).unwrap();
            let back = parse_svmlight(
                buf.as_slice(),
                ParseOptions { mode: Some(TaskMode::Multilabel), ..Default::default() },
            ).unwrap();
            prop_assert_eq!(back.n_features(), 12);
            prop_assert_eq!(back.n_classes(), 6);
            prop_assert_eq!(back.labels(), ds.labels());
            prop_assert_eq!(back.features().col_indices(), ds.features().col_indices());
            for (a, b) in back.features().values().iter().zip(ds.features().values()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        #[test]
        fn hellinger_rows_have_unit_norm(
            rows in prop::collection::vec(prop::collection::btree_map(0u32..10, 0.0f64..100.0, 1..6), 1..10)
        ) {
            let x = CsrMatrix::from_rows(10, rows.iter().cloned()).unwrap();
            let n = x.n_rows();
            let ds = Dataset::from_label_lists(x, &vec![vec![0]; n], 1, TaskMode::Multiclass).unwrap();
            let once = hellinger_transform(&ds).unwrap();
            let twice = hellinger_transform(&once).unwrap();
            for i in 0..n {
                let r = once.x(i);
                if ds.x(i).values.iter().sum::<f64>() > 0.0 {
                    prop_assert!((r.norm_squared().sqrt() - 1.0).abs() <= 1e-12);
                    // squaring the output recovers the L1-normalized input
                    let raw = ds.x(i);
                    let total: f64 = raw.values.iter().sum();
                    for (h, v) in r.values.iter().zip(raw.values) {
                        prop_assert!((h * h - v / total).abs() <= 1e-12);
                    }
                    // a second pass is the definition applied to the first output
                    let s: f64 = r.values.iter().sum();
                    for (t, v) in twice.x(i).values.iter().zip(r.values) {
                        prop_assert!((t - (v / s).sqrt()).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}
