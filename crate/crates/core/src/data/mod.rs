//! Dataset representation, CSV persistence, synthetic benchmark generation,
//! stratified splitting, batch sampling, and feature-space augmentation.

mod sampling;
mod synthetic;

pub use sampling::{augment_features, make_batches, stratified_kfold, Batch, FoldAssignment, SampleMode};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::fmt;
use std::path::Path;

pub type DomainId = usize;
pub type ClassId = usize;

#[derive(Debug)]
pub enum DataError {
    /// Malformed row, non-finite feature, bad header, or unparsable field.
    Parse { line: usize, message: String },
    /// Ragged rows or a feature vector of the wrong width.
    DimensionMismatch { expected: usize, got: usize },
    InvalidSpec(String),
    TooFewSamples { have: usize, need: usize },
    EmptyDataset,
    Io(std::io::Error),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            DataError::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected} values, got {got}")
            }
            DataError::InvalidSpec(msg) => write!(f, "invalid spec: {msg}"),
            DataError::TooFewSamples { have, need } => {
                write!(f, "too few samples: have {have}, need {need}")
            }
            DataError::EmptyDataset => write!(f, "dataset is empty"),
            DataError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// One labeled feature vector tagged with its source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub domain: DomainId,
    pub class: ClassId,
    pub features: Vec<f64>,
}

/// An immutable collection of samples with a per-(domain, class) count table.
///
/// The count table is recomputed on every construction, so it always agrees
/// with a fresh recount of the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_domains: usize,
    num_classes: usize,
    feature_dim: usize,
    counts: Vec<usize>, // row-major [domain][class]
}

impl Dataset {
    /// Validate samples against the declared shape and build the count table.
    pub fn new(
        samples: Vec<Sample>,
        num_domains: usize,
        num_classes: usize,
        feature_dim: usize,
    ) -> Result<Self, DataError> {
        if num_domains == 0 {
            return Err(DataError::InvalidSpec("need at least one domain".into()));
        }
        let mut counts = vec![0usize; num_domains * num_classes];
        for s in &samples {
            if s.domain >= num_domains || s.class >= num_classes {
                return Err(DataError::InvalidSpec(format!(
                    "sample index out of range: domain {} class {} (have {} domains, {} classes)",
                    s.domain, s.class, num_domains, num_classes
                )));
            }
            if s.features.len() != feature_dim {
                return Err(DataError::DimensionMismatch {
                    expected: feature_dim,
                    got: s.features.len(),
                });
            }
            if !s.features.iter().all(|v| v.is_finite()) {
                return Err(DataError::InvalidSpec("non-finite feature value".into()));
            }
            counts[s.domain * num_classes + s.class] += 1;
        }
        Ok(Dataset { samples, num_domains, num_classes, feature_dim, counts })
    }

    /// Infer domain and class cardinalities from the samples themselves.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let num_domains = samples.iter().map(|s| s.domain).max().unwrap() + 1;
        let num_classes = samples.iter().map(|s| s.class).max().unwrap() + 1;
        let feature_dim = samples[0].features.len();
        Dataset::new(samples, num_domains, num_classes, feature_dim)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Samples of domain `d`, class `c`.
    pub fn count(&self, d: DomainId, c: ClassId) -> usize {
        self.counts[d * self.num_classes + c]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Populated (domain, class) pairs, in ascending order.
    pub fn populated_pairs(&self) -> Vec<(DomainId, ClassId)> {
        let mut out = Vec::new();
        for d in 0..self.num_domains {
            for c in 0..self.num_classes {
                if self.count(d, c) > 0 {
                    out.push((d, c));
                }
            }
        }
        out
    }

    /// Total samples per class, summed over domains.
    pub fn class_totals(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.num_classes];
        for d in 0..self.num_domains {
            for c in 0..self.num_classes {
                out[c] += self.count(d, c);
            }
        }
        out
    }

    /// New dataset from a subset of sample indices. Shape metadata is kept,
    /// counts are rebuilt from the surviving samples.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(samples, self.num_domains, self.num_classes, self.feature_dim)
            .expect("subset of a valid dataset is valid")
    }

    pub fn without_domain(&self, d: DomainId) -> Dataset {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| self.samples[i].domain != d).collect();
        self.subset(&idx)
    }

    pub fn only_domain(&self, d: DomainId) -> Dataset {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| self.samples[i].domain == d).collect();
        self.subset(&idx)
    }

    /// Serialize to the dataset CSV format: a `domain,label,f0,...` header
    /// then one row per sample. Floats are printed with the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("domain,label");
        for j in 0..self.feature_dim {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{}", s.domain, s.class));
            for v in &s.features {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parse the dataset CSV format.
    ///
    /// Domain and class cardinalities are inferred as max index + 1. The
    /// header may override either with `domain:<D>` / `label:<C>` in place of
    /// the plain column names, which matters for files that do not mention
    /// every class.
    pub fn from_csv(text: &str) -> Result<Dataset, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DataError::EmptyDataset)?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 {
            return Err(DataError::Parse { line: 1, message: "header needs domain,label,f0,...".into() });
        }
        let parse_override = |field: &str, name: &str| -> Result<Option<usize>, DataError> {
            if field == name {
                return Ok(None);
            }
            match field.strip_prefix(&format!("{name}:")) {
                Some(n) => n.parse::<usize>().map(Some).map_err(|_| DataError::Parse {
                    line: 1,
                    message: format!("bad {name} override: {field}"),
                }),
                None => Err(DataError::Parse {
                    line: 1,
                    message: format!("expected header field `{name}`, got `{field}`"),
                }),
            }
        };
        let domain_override = parse_override(cols[0], "domain")?;
        let class_override = parse_override(cols[1], "label")?;
        let feature_dim = cols.len() - 2;

        let mut samples = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != feature_dim + 2 {
                return Err(DataError::DimensionMismatch {
                    expected: feature_dim + 2,
                    got: fields.len(),
                });
            }
            let domain: usize = fields[0].parse().map_err(|_| DataError::Parse {
                line: lineno,
                message: format!("bad domain `{}`", fields[0]),
            })?;
            let class: usize = fields[1].parse().map_err(|_| DataError::Parse {
                line: lineno,
                message: format!("bad label `{}`", fields[1]),
            })?;
            let mut features = Vec::with_capacity(feature_dim);
            for f in &fields[2..] {
                let v: f64 = f.parse().map_err(|_| DataError::Parse {
                    line: lineno,
                    message: format!("bad feature `{f}`"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Parse {
                        line: lineno,
                        message: format!("non-finite feature `{f}`"),
                    });
                }
                features.push(v);
            }
            samples.push(Sample { domain, class, features });
        }
        if samples.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let num_domains = samples
            .iter()
            .map(|s| s.domain + 1)
            .max()
            .unwrap()
            .max(domain_override.unwrap_or(0));
        let num_classes = samples
            .iter()
            .map(|s| s.class + 1)
            .max()
            .unwrap()
            .max(class_override.unwrap_or(0));
        Dataset::new(samples, num_domains, num_classes, feature_dim)
    }

    pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(d: usize, c: usize, f: &[f64]) -> Sample {
        Sample { domain: d, class: c, features: f.to_vec() }
    }

    #[test]
    fn csv_readback_counts_match_rows() {
        let text = "domain,label,f0,f1\n0,0,1.0,2.0\n1,1,3.0,4.0\n0,1,5.0,6.0\n";
        let ds = Dataset::from_csv(text).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_domains(), 2);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.count(0, 0), 1);
        assert_eq!(ds.count(0, 1), 1);
        assert_eq!(ds.count(1, 1), 1);
        assert_eq!(ds.count(1, 0), 0);
    }

    #[test]
    fn csv_rejects_nan_feature() {
        let text = "domain,label,f0\n0,0,NaN\n";
        let err = Dataset::from_csv(text).unwrap_err();
        assert!(matches!(err, DataError::Parse { .. }), "{err:?}");
    }

    #[test]
    fn csv_rejects_ragged_row() {
        let text = "domain,label,f0,f1\n0,0,1.0\n";
        let err = Dataset::from_csv(text).unwrap_err();
        assert!(matches!(err, DataError::DimensionMismatch { .. }));
    }

    #[test]
    fn csv_header_override_extends_class_space() {
        let text = "domain:3,label:13,f0\n0,0,1.0\n";
        let ds = Dataset::from_csv(text).unwrap();
        assert_eq!(ds.num_domains(), 3);
        assert_eq!(ds.num_classes(), 13);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = Dataset::from_samples(vec![
            sample(0, 0, &[0.1, -1.5e-7]),
            sample(1, 2, &[3.25, 7.000000001]),
            sample(0, 1, &[1.0 / 3.0, 2.0f64.sqrt()]),
        ])
        .unwrap();
        let back = Dataset::from_csv(&ds.to_csv()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn counts_recomputed_on_subset() {
        let ds = Dataset::from_samples(vec![
            sample(0, 0, &[1.0]),
            sample(0, 1, &[2.0]),
            sample(1, 0, &[3.0]),
        ])
        .unwrap();
        let sub = ds.subset(&[0, 2]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.count(0, 0), 1);
        assert_eq!(sub.count(0, 1), 0);
        assert_eq!(sub.count(1, 0), 1);
        // shape metadata preserved
        assert_eq!(sub.num_classes(), ds.num_classes());
    }

    #[test]
    fn without_domain_removes_all_of_it() {
        let ds = Dataset::from_samples(vec![
            sample(0, 0, &[1.0]),
            sample(1, 0, &[2.0]),
            sample(2, 0, &[3.0]),
        ])
        .unwrap();
        let rest = ds.without_domain(1);
        assert_eq!(rest.len(), 2);
        assert!(rest.samples().iter().all(|s| s.domain != 1));
        assert_eq!(rest.num_domains(), 3);
    }

    #[test]
    fn rejects_out_of_range_class() {
        let err = Dataset::new(vec![sample(0, 5, &[1.0])], 1, 3, 1).unwrap_err();
        assert!(matches!(err, DataError::InvalidSpec(_)));
    }
}
