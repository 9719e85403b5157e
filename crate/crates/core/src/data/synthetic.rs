//! Parametric multi-domain benchmark generator.
//!
//! Each domain applies its own affine map to a shared set of class
//! prototypes, and each (domain, class) pair has an explicit sample count,
//! with zero encoding a missing class. This reproduces the three failure
//! shapes the toolkit targets: severe head-heavy imbalance, missing classes,
//! and long-tailed totals, each behind a per-domain distribution shift.

use std::collections::BTreeMap;
use std::path::Path;

use super::{DataError, Dataset, Sample};
use crate::numerics::{Mat, RngStream};

/// Stream ids for the generator's independent draw sequences.
const STREAM_CLASS_MEANS: u64 = 0x11;
const STREAM_SAMPLES: u64 = 0x12;
const STREAM_TEMPLATE: u64 = 0x13;

/// Per-coordinate scale of auto-generated class prototype means.
const MEAN_SCALE: f64 = 1.2;

/// Declarative description of a synthetic multi-domain dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Within-class isotropic noise level, applied before the domain map.
    pub sigma: f64,
    /// Default generation seed; `generate_synthetic` takes an explicit seed
    /// that callers usually resolve from this.
    pub seed: u64,
    /// Sample count per (domain, class). Zero entries mark missing classes
    /// and still declare the domain.
    pub counts: BTreeMap<(usize, usize), usize>,
    /// Explicit class prototype means; generated from the seed when absent.
    pub class_means: Option<Vec<Vec<f64>>>,
    /// Per-domain additive shift `b_d` (defaults to zero).
    pub shifts: BTreeMap<usize, Vec<f64>>,
    /// Per-domain mixing matrix `A_d` (defaults to identity).
    pub mixes: BTreeMap<usize, Mat>,
}

impl SyntheticSpec {
    pub fn num_domains(&self) -> usize {
        self.counts.keys().map(|&(d, _)| d + 1).max().unwrap_or(0)
    }

    pub fn total_samples(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(DataError::InvalidSpec("num_classes and feature_dim must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(DataError::InvalidSpec(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.total_samples() == 0 {
            return Err(DataError::InvalidSpec("all counts are zero".into()));
        }
        for (&(d, c), _) in &self.counts {
            if c >= self.num_classes {
                return Err(DataError::InvalidSpec(format!(
                    "count.{d}.{c} references class {c} >= num_classes {}",
                    self.num_classes
                )));
            }
        }
        if let Some(means) = &self.class_means {
            if means.len() != self.num_classes
                || means.iter().any(|m| m.len() != self.feature_dim)
            {
                return Err(DataError::InvalidSpec("class means have the wrong shape".into()));
            }
        }
        for (d, b) in &self.shifts {
            if b.len() != self.feature_dim {
                return Err(DataError::InvalidSpec(format!("shift.{d} has wrong dimension")));
            }
        }
        for (d, a) in &self.mixes {
            if a.rows() != self.feature_dim || a.cols() != self.feature_dim {
                return Err(DataError::InvalidSpec(format!("mix.{d} must be {0}x{0}", self.feature_dim)));
            }
        }
        Ok(())
    }

    /// Parse the key=value spec format. Lines starting with `#` and blank
    /// lines are ignored; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<SyntheticSpec, DataError> {
        let mut spec = SyntheticSpec {
            num_classes: 0,
            feature_dim: 0,
            sigma: 1.0,
            seed: 0,
            counts: BTreeMap::new(),
            class_means: None,
            shifts: BTreeMap::new(),
            mixes: BTreeMap::new(),
        };
        let mut pending_mixes: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| DataError::Parse {
                line: lineno,
                message: format!("expected key=value, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |message: String| DataError::Parse { line: lineno, message };
            match key {
                "num_classes" => {
                    spec.num_classes = value.parse().map_err(|_| bad(format!("bad num_classes `{value}`")))?
                }
                "feature_dim" => {
                    spec.feature_dim = value.parse().map_err(|_| bad(format!("bad feature_dim `{value}`")))?
                }
                "sigma" => spec.sigma = value.parse().map_err(|_| bad(format!("bad sigma `{value}`")))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad(format!("bad seed `{value}`")))?,
                _ => {
                    let parts: Vec<&str> = key.split('.').collect();
                    match parts.as_slice() {
                        ["count", d, c] => {
                            let d: usize = d.parse().map_err(|_| bad(format!("bad domain in `{key}`")))?;
                            let c: usize = c.parse().map_err(|_| bad(format!("bad class in `{key}`")))?;
                            let n: usize = value.parse().map_err(|_| bad(format!("bad count `{value}`")))?;
                            spec.counts.insert((d, c), n);
                        }
                        ["shift", d] => {
                            let d: usize = d.parse().map_err(|_| bad(format!("bad domain in `{key}`")))?;
                            spec.shifts.insert(d, parse_float_list(value, lineno)?);
                        }
                        ["mix", d] => {
                            let d: usize = d.parse().map_err(|_| bad(format!("bad domain in `{key}`")))?;
                            pending_mixes.insert(d, parse_float_list(value, lineno)?);
                        }
                        _ => return Err(bad(format!("unknown key `{key}`"))),
                    }
                }
            }
        }
        if spec.feature_dim == 0 {
            return Err(DataError::InvalidSpec("feature_dim missing or zero".into()));
        }
        for (d, flat) in pending_mixes {
            let f = spec.feature_dim;
            if flat.len() != f * f {
                return Err(DataError::InvalidSpec(format!(
                    "mix.{d} needs {} entries, got {}",
                    f * f,
                    flat.len()
                )));
            }
            spec.mixes.insert(d, Mat::from_vec(f, f, flat));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<SyntheticSpec, DataError> {
        SyntheticSpec::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical key=value serialization (stable ordering, round-trips
    /// through [`SyntheticSpec::parse`]).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("num_classes={}\n", self.num_classes));
        out.push_str(&format!("feature_dim={}\n", self.feature_dim));
        out.push_str(&format!("sigma={}\n", self.sigma));
        out.push_str(&format!("seed={}\n", self.seed));
        for (&(d, c), &n) in &self.counts {
            out.push_str(&format!("count.{d}.{c}={n}\n"));
        }
        for (d, b) in &self.shifts {
            out.push_str(&format!("shift.{d}={}\n", join_floats(b)));
        }
        for (d, a) in &self.mixes {
            out.push_str(&format!("mix.{d}={}\n", join_floats(a.data())));
        }
        out
    }

    /// The built-in three-domain benchmark.
    ///
    /// Shapes: domain 0 is head-heavy (650 majority down to 5-sample
    /// minorities), domain 1 is roughly balanced but missing the last three
    /// classes, domain 2 is long-tailed. Domain maps are mild random affine
    /// transforms derived from the seed.
    pub fn appendix_template(seed: u64) -> SyntheticSpec {
        const D0: [usize; 13] = [650, 320, 160, 120, 80, 45, 30, 20, 15, 10, 8, 5, 5];
        const D1: [usize; 13] = [120, 118, 116, 114, 114, 112, 112, 112, 112, 112, 0, 0, 0];
        const D2: [usize; 13] = [800, 600, 400, 250, 180, 130, 90, 60, 45, 30, 25, 18, 10];
        let f = 32usize;
        let mut counts = BTreeMap::new();
        for (d, table) in [D0, D1, D2].iter().enumerate() {
            for (c, &n) in table.iter().enumerate() {
                counts.insert((d, c), n);
            }
        }
        let mut rng = RngStream::with_stream(seed, STREAM_TEMPLATE);
        let mut shifts = BTreeMap::new();
        let mut mixes = BTreeMap::new();
        for d in 0..3 {
            let b: Vec<f64> = (0..f).map(|_| 1.5 * rng.next_normal()).collect();
            let mut a = Mat::from_fn(f, f, |_, _| 0.15 * rng.next_normal());
            for i in 0..f {
                let v = a.at(i, i) + 1.0;
                a.set(i, i, v);
            }
            shifts.insert(d, b);
            mixes.insert(d, a);
        }
        SyntheticSpec {
            num_classes: 13,
            feature_dim: f,
            sigma: 1.0,
            seed,
            counts,
            class_means: None,
            shifts,
            mixes,
        }
    }
}

fn parse_float_list(value: &str, lineno: usize) -> Result<Vec<f64>, DataError> {
    value
        .split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| DataError::Parse { line: lineno, message: format!("bad number `{v}`") })
        })
        .collect()
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Materialize a dataset from a spec.
///
/// Every sample of pair `(d, c)` is `A_d (mu_c + sigma * eps) + b_d` with
/// `eps` standard normal. Pairs are generated in ascending `(d, c)` order
/// from a single sample stream, so output is a pure function of
/// `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    let f = spec.feature_dim;
    let means: Vec<Vec<f64>> = match &spec.class_means {
        Some(m) => m.clone(),
        None => {
            let mut rng = RngStream::with_stream(seed, STREAM_CLASS_MEANS);
            (0..spec.num_classes)
                .map(|_| (0..f).map(|_| MEAN_SCALE * rng.next_normal()).collect())
                .collect()
        }
    };
    let mut rng = RngStream::with_stream(seed, STREAM_SAMPLES);
    let mut samples = Vec::with_capacity(spec.total_samples());
    for (&(d, c), &n) in &spec.counts {
        let shift = spec.shifts.get(&d);
        let mix = spec.mixes.get(&d);
        for _ in 0..n {
            let mut x: Vec<f64> =
                means[c].iter().map(|m| m + spec.sigma * rng.next_normal()).collect();
            if let Some(a) = mix {
                let mut y = vec![0.0; f];
                for (i, yi) in y.iter_mut().enumerate() {
                    *yi = crate::numerics::dot(a.row(i), &x);
                }
                x = y;
            }
            if let Some(b) = shift {
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi += bi;
                }
            }
            samples.push(Sample { domain: d, class: c, features: x });
        }
    }
    Dataset::new(samples, spec.num_domains(), spec.num_classes, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_domain_spec() -> SyntheticSpec {
        let mut counts = BTreeMap::new();
        counts.insert((0, 0), 5);
        counts.insert((1, 0), 5);
        counts.insert((0, 1), 0);
        SyntheticSpec {
            num_classes: 2,
            feature_dim: 3,
            sigma: 1.0,
            seed: 0,
            counts,
            class_means: None,
            shifts: BTreeMap::new(),
            mixes: BTreeMap::new(),
        }
    }

    #[test]
    fn counts_by_construction() {
        let ds = generate_synthetic(&two_domain_spec(), 1).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.count(0, 0), 5);
        assert_eq!(ds.count(1, 0), 5);
        assert_eq!(ds.count(0, 1), 0);
        assert_eq!(ds.count(1, 1), 0);
    }

    #[test]
    fn missing_pairs_are_excluded_from_populated_set() {
        let ds = generate_synthetic(&two_domain_spec(), 1).unwrap();
        assert_eq!(ds.populated_pairs(), vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn zero_noise_limit_reproduces_class_means() {
        // sigma must stay positive, so use one tiny enough to vanish at
        // print precision and explicit means
        let mut spec = two_domain_spec();
        spec.sigma = 1e-300;
        spec.class_means = Some(vec![vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]);
        let ds = generate_synthetic(&spec, 9).unwrap();
        for s in ds.samples() {
            for (v, m) in s.features.iter().zip(&[1.0, 2.0, 3.0]) {
                assert!((v - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_all_zero_counts() {
        let mut spec = two_domain_spec();
        spec.counts.values_mut().for_each(|n| *n = 0);
        let err = generate_synthetic(&spec, 1).unwrap_err();
        assert!(matches!(err, DataError::InvalidSpec(_)));
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let mut spec = two_domain_spec();
        spec.sigma = 0.0;
        assert!(matches!(spec.validate(), Err(DataError::InvalidSpec(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec::appendix_template(7);
        let a = generate_synthetic(&spec, 7).unwrap();
        let b = generate_synthetic(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SyntheticSpec::appendix_template(3);
        let back = SyntheticSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn parse_rejects_unknown_key() {
        let err = SyntheticSpec::parse("feature_dim=2\nnum_classes=1\ncount.0.0=1\nwat=3\n");
        assert!(err.is_err());
    }

    #[test]
    fn appendix_template_shapes() {
        let spec = SyntheticSpec::appendix_template(7);
        assert_eq!(spec.num_domains(), 3);
        assert_eq!(spec.num_classes, 13);
        let d0: usize = (0..13).map(|c| spec.counts[&(0, c)]).sum();
        let d1_pop = (0..13).filter(|&c| spec.counts[&(1, c)] > 0).count();
        let d2: usize = (0..13).map(|c| spec.counts[&(2, c)]).sum();
        assert_eq!(d0, 1468);
        assert_eq!(d1_pop, 10);
        assert_eq!(d2, 2638);
        assert_eq!(spec.counts[&(0, 0)], 650);
        assert_eq!(spec.counts[&(0, 12)], 5);
    }

    #[test]
    fn empirical_pair_means_track_affine_map() {
        // standard-error bound: || mean - (A mu + b) ||_2 is at most
        // 3 sigma ||A||_F / sqrt(N) for each pair with a usable sample size
        let spec = SyntheticSpec::appendix_template(11);
        let ds = generate_synthetic(&spec, 11).unwrap();
        let means: Vec<Vec<f64>> = {
            let mut rng = RngStream::with_stream(11, STREAM_CLASS_MEANS);
            (0..13).map(|_| (0..32).map(|_| MEAN_SCALE * rng.next_normal()).collect()).collect()
        };
        let mut checked = 0;
        for d in 0..3 {
            for c in 0..13 {
                let n = ds.count(d, c);
                if n < 30 {
                    continue;
                }
                let a = &spec.mixes[&d];
                let b = &spec.shifts[&d];
                let expect: Vec<f64> = (0..32)
                    .map(|i| crate::numerics::dot(a.row(i), &means[c]) + b[i])
                    .collect();
                let mut acc = vec![0.0; 32];
                for s in ds.samples().iter().filter(|s| s.domain == d && s.class == c) {
                    for (t, v) in acc.iter_mut().zip(&s.features) {
                        *t += v;
                    }
                }
                let dev = (0..32)
                    .map(|i| {
                        let e = acc[i] / n as f64 - expect[i];
                        e * e
                    })
                    .sum::<f64>()
                    .sqrt();
                let a_frob = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let bound = 3.0 * spec.sigma * a_frob / (n as f64).sqrt();
                assert!(dev <= bound, "pair ({d},{c}): deviation {dev} > {bound}");
                checked += 1;
            }
        }
        assert!(checked >= 20, "expected many populated pairs with n >= 30");
    }
}
