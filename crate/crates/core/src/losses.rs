//! Training objectives: softmax cross-entropy, the calibrated domain-class
//! alignment loss (BoDA), the covariance-alignment baseline (CORAL), and the
//! per-pair statistics they consume.
//!
//! Losses return their value together with analytic gradients with respect
//! to the tensors they read: logits for cross-entropy, embeddings for the
//! alignment losses. Prototypes, covariances, and calibration weights are
//! treated as constants during differentiation (stop-gradient); gradients
//! flow only through the anchor embeddings.

use std::collections::{BTreeMap, BTreeSet};

use crate::numerics::{
    cholesky_factor, cholesky_solve_factored, dot, log_sum_exp, Mat, NumericsError,
};

/// Calibration weights are clamped to this range.
const WEIGHT_CLAMP: (f64, f64) = (1e-3, 1e3);

/// Ridge escalation ceiling for rank-deficient batch covariances.
const MAX_RIDGE: f64 = 1e-1;

#[derive(Debug)]
pub enum LossError {
    LabelOutOfRange { label: usize, num_classes: usize },
    /// Mahalanobis distance requested but the stats carry no covariance.
    MissingCovariance,
    /// Fewer than two domains present; the alignment numerator is empty.
    SingleDomain,
    TooFewSamples { have: usize, need: usize },
    NotPositiveDefinite(NumericsError),
}

impl std::fmt::Display for LossError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossError::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            LossError::MissingCovariance => write!(f, "stats entry has no covariance"),
            LossError::SingleDomain => write!(f, "need at least two domains"),
            LossError::TooFewSamples { have, need } => {
                write!(f, "too few samples: have {have}, need {need}")
            }
            LossError::NotPositiveDefinite(e) => write!(f, "covariance not usable: {e}"),
        }
    }
}

impl std::error::Error for LossError {}

/// A loss value with the gradients it produces.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Option<Mat>,
    pub grad_z: Option<Mat>,
}

/// Which cross-entropy form to apply to the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeForm {
    /// Multiclass softmax cross-entropy.
    Softmax,
    /// Per-logit sigmoid cross-entropy against the one-hot target.
    Bernoulli,
}

/// Distance between an embedding and a pair prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Euclidean,
    /// Covariance-scaled distance, additionally divided by the anchor
    /// pair's sample count.
    Mahalanobis,
}

/// Mean softmax cross-entropy over a batch of logits.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> Result<LossOutput, LossError> {
    cross_entropy_with_form(logits, labels, CeForm::Softmax)
}

pub fn cross_entropy_with_form(
    logits: &Mat,
    labels: &[usize],
    form: CeForm,
) -> Result<LossOutput, LossError> {
    let n = logits.rows();
    let c = logits.cols();
    assert_eq!(labels.len(), n, "one label per row");
    assert!(n >= 1, "empty batch");
    for &y in labels {
        if y >= c {
            return Err(LossError::LabelOutOfRange { label: y, num_classes: c });
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Mat::zeros(n, c);
    match form {
        CeForm::Softmax => {
            for i in 0..n {
                let row = logits.row(i);
                let lse = log_sum_exp(row);
                value -= (row[labels[i]] - lse) * inv_n;
                let g = grad.row_mut(i);
                for j in 0..c {
                    g[j] = (row[j] - lse).exp() * inv_n;
                }
                g[labels[i]] -= inv_n;
            }
        }
        CeForm::Bernoulli => {
            // -[y log sigmoid(x) + (1-y) log(1 - sigmoid(x))] per logit,
            // computed through softplus for stability
            let softplus = |x: f64| {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            };
            let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
            for i in 0..n {
                let row = logits.row(i);
                let g = grad.row_mut(i);
                for j in 0..c {
                    let y = if j == labels[i] { 1.0 } else { 0.0 };
                    value += (softplus(row[j]) - y * row[j]) * inv_n;
                    g[j] = (sigmoid(row[j]) - y) * inv_n;
                }
            }
        }
    }
    Ok(LossOutput { value, grad_logits: Some(grad), grad_z: None })
}

/// Prototype statistics for one populated (domain, class) pair.
#[derive(Debug, Clone)]
pub struct PairStats {
    pub mean: Vec<f64>,
    pub count: usize,
    cov: Option<CovEntry>,
}

#[derive(Debug, Clone)]
struct CovEntry {
    sigma: Mat,
    chol: Mat,
}

impl PairStats {
    pub fn new(mean: Vec<f64>, count: usize) -> PairStats {
        PairStats { mean, count, cov: None }
    }

    /// Attach a covariance taken as final (any ridge already applied). Fails
    /// if it does not factor.
    pub fn with_covariance(mean: Vec<f64>, count: usize, sigma: Mat) -> Result<PairStats, LossError> {
        let chol = cholesky_factor(&sigma).map_err(LossError::NotPositiveDefinite)?;
        Ok(PairStats { mean, count, cov: Some(CovEntry { sigma, chol }) })
    }

    pub fn covariance(&self) -> Option<&Mat> {
        self.cov.as_ref().map(|c| &c.sigma)
    }

    fn chol(&self) -> Option<&Mat> {
        self.cov.as_ref().map(|c| &c.chol)
    }
}

/// Prototype means (and optional ridged covariances) for every populated
/// (domain, class) pair of one batch or dataset.
#[derive(Debug, Clone)]
pub struct DomainClassStats {
    dim: usize,
    pairs: BTreeMap<(usize, usize), PairStats>,
}

impl DomainClassStats {
    pub fn from_parts(dim: usize, pairs: BTreeMap<(usize, usize), PairStats>) -> DomainClassStats {
        DomainClassStats { dim, pairs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, d: usize, c: usize) -> Option<&PairStats> {
        self.pairs.get(&(d, c))
    }

    pub fn pairs(&self) -> &BTreeMap<(usize, usize), PairStats> {
        &self.pairs
    }

    pub fn domains(&self) -> BTreeSet<usize> {
        self.pairs.keys().map(|&(d, _)| d).collect()
    }

    pub fn counts(&self) -> BTreeMap<(usize, usize), usize> {
        self.pairs.iter().map(|(&k, v)| (k, v.count)).collect()
    }
}

/// Per-pair sample means and, optionally, unbiased sample covariances with a
/// diagonal ridge.
///
/// A pair with a single member gets the zero covariance (plus ridge). If a
/// ridged covariance fails to factor, the ridge escalates tenfold up to
/// [`MAX_RIDGE`] before the error is surfaced.
pub fn domain_class_statistics(
    z: &Mat,
    labels: &[usize],
    domains: &[usize],
    with_covariance: bool,
    ridge: f64,
) -> Result<DomainClassStats, LossError> {
    let n = z.rows();
    assert!(n >= 1, "empty batch");
    assert_eq!(labels.len(), n);
    assert_eq!(domains.len(), n);
    let e = z.cols();
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups.entry((domains[i], labels[i])).or_default().push(i);
    }
    let mut pairs = BTreeMap::new();
    for (key, rows) in groups {
        let count = rows.len();
        let mut mean = vec![0.0; e];
        for &r in &rows {
            for (m, v) in mean.iter_mut().zip(z.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let stats = if with_covariance {
            let mut sigma = Mat::zeros(e, e);
            if count > 1 {
                let scale = 1.0 / (count as f64 - 1.0);
                for &r in &rows {
                    let row = z.row(r);
                    for i in 0..e {
                        let di = row[i] - mean[i];
                        for j in 0..e {
                            let v = sigma.at(i, j) + scale * di * (row[j] - mean[j]);
                            sigma.set(i, j, v);
                        }
                    }
                }
            }
            let mut eps = ridge;
            loop {
                let mut ridged = sigma.clone();
                for i in 0..e {
                    let v = ridged.at(i, i) + eps;
                    ridged.set(i, i, v);
                }
                match PairStats::with_covariance(mean.clone(), count, ridged) {
                    Ok(s) => break s,
                    Err(err) => {
                        if eps >= MAX_RIDGE {
                            return Err(err);
                        }
                        eps *= 10.0;
                    }
                }
            }
        } else {
            PairStats::new(mean, count)
        };
        pairs.insert(key, stats);
    }
    Ok(DomainClassStats { dim: e, pairs })
}

/// Calibration table: `w[(d,c) -> (d',c')] = (N_{d',c'} / N_{d,c})^gamma`,
/// clamped to a fixed positive range. `gamma = 0` makes every weight one.
#[derive(Debug, Clone)]
pub struct CalibrationTable {
    gamma: f64,
    counts: BTreeMap<(usize, usize), usize>,
}

impl CalibrationTable {
    pub fn new(gamma: f64, counts: BTreeMap<(usize, usize), usize>) -> CalibrationTable {
        assert!(gamma >= 0.0, "gamma must be non-negative");
        assert!(counts.values().all(|&n| n > 0), "calibration counts must be positive");
        CalibrationTable { gamma, counts }
    }

    pub fn from_stats(gamma: f64, stats: &DomainClassStats) -> CalibrationTable {
        CalibrationTable::new(gamma, stats.counts())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Weight for transferring the anchor pair `from` toward pair `to`.
    pub fn weight(&self, from: (usize, usize), to: (usize, usize)) -> f64 {
        let n_from = self.counts.get(&from).copied().unwrap_or(1) as f64;
        let n_to = self.counts.get(&to).copied().unwrap_or(1) as f64;
        let w = (n_to / n_from).powf(self.gamma);
        w.clamp(WEIGHT_CLAMP.0, WEIGHT_CLAMP.1)
    }
}

/// Distance from `z` to the prototype of `entry`.
///
/// Euclidean is the plain L2 distance. Mahalanobis solves against the
/// entry's ridged covariance and scales by the reciprocal of the anchor
/// pair's count.
pub fn pair_distance(
    z: &[f64],
    entry: &PairStats,
    kind: DistanceKind,
    anchor_count: usize,
) -> Result<f64, LossError> {
    Ok(pair_distance_grad(z, entry, kind, anchor_count)?.0)
}

/// Distance plus its gradient with respect to `z`. The gradient is zero at
/// the prototype itself, where the distance is not differentiable.
fn pair_distance_grad(
    z: &[f64],
    entry: &PairStats,
    kind: DistanceKind,
    anchor_count: usize,
) -> Result<(f64, Vec<f64>), LossError> {
    assert_eq!(z.len(), entry.mean.len(), "dimension mismatch");
    let diff: Vec<f64> = z.iter().zip(&entry.mean).map(|(a, b)| a - b).collect();
    match kind {
        DistanceKind::Euclidean => {
            let d = dot(&diff, &diff).sqrt();
            if d <= 1e-300 {
                return Ok((0.0, vec![0.0; z.len()]));
            }
            let grad = diff.iter().map(|v| v / d).collect();
            Ok((d, grad))
        }
        DistanceKind::Mahalanobis => {
            assert!(anchor_count >= 1, "anchor count must be positive");
            let chol = entry.chol().ok_or(LossError::MissingCovariance)?;
            let v = cholesky_solve_factored(chol, &diff);
            let q = dot(&diff, &v);
            let inv_n = 1.0 / anchor_count as f64;
            if q <= 1e-300 {
                return Ok((0.0, vec![0.0; z.len()]));
            }
            let root = q.sqrt();
            let d = inv_n * root;
            // d = sqrt(q)/N, dq/dz = 2 Sigma^{-1} diff
            let grad = v.iter().map(|vi| inv_n * vi / root).collect();
            Ok((d, grad))
        }
    }
}

/// Output of [`boda_loss`] with its anchor bookkeeping.
#[derive(Debug, Clone)]
pub struct BodaOutput {
    pub loss: LossOutput,
    /// Anchors whose class is populated in no other domain.
    pub skipped_anchors: usize,
    pub contributing_anchors: usize,
}

/// Balanced domain-class distribution alignment loss.
///
/// For each anchor embedding, the same-class prototypes of the other
/// domains are attracted and every other populated pair is repelled through
/// a softmax over negated calibrated distances. Anchors without any
/// cross-domain same-class partner contribute nothing and are excluded from
/// the mean. Prototypes, covariances, counts, and weights are constants
/// under differentiation.
pub fn boda_loss(
    z: &Mat,
    labels: &[usize],
    domains: &[usize],
    stats: &DomainClassStats,
    calib: &CalibrationTable,
    kind: DistanceKind,
) -> Result<BodaOutput, LossError> {
    let n = z.rows();
    assert_eq!(labels.len(), n);
    assert_eq!(domains.len(), n);
    assert_eq!(z.cols(), stats.dim(), "embedding dim mismatch");
    let domain_set = stats.domains();
    if domain_set.len() < 2 {
        return Err(LossError::SingleDomain);
    }
    let inv_dm1 = 1.0 / (domain_set.len() as f64 - 1.0);

    let mut value = 0.0;
    let mut grad = Mat::zeros(n, z.cols());
    let mut skipped = 0usize;
    let mut contributing = 0usize;

    for i in 0..n {
        let (di, ci) = (domains[i], labels[i]);
        let own = (di, ci);
        let anchor_entry = stats
            .get(di, ci)
            .expect("anchor's (domain, class) pair must be present in the statistics");
        let anchor_count = anchor_entry.count;
        let zi = z.row(i);

        let partners: Vec<usize> = domain_set
            .iter()
            .copied()
            .filter(|&d| d != di && stats.get(d, ci).is_some())
            .collect();
        if partners.is_empty() {
            skipped += 1;
            continue;
        }
        contributing += 1;

        // calibrated distances and gradients to every candidate pair
        let mut keys: Vec<(usize, usize)> = Vec::new();
        let mut terms: Vec<f64> = Vec::new(); // w * d
        let mut grads: Vec<Vec<f64>> = Vec::new(); // w * d'
        for (&key, entry) in stats.pairs() {
            if key == own {
                continue;
            }
            let w = calib.weight(own, key);
            let (d, g) = pair_distance_grad(zi, entry, kind, anchor_count)?;
            keys.push(key);
            terms.push(w * d);
            grads.push(g.into_iter().map(|v| w * v).collect());
        }

        // log of the denominator sum
        let neg: Vec<f64> = terms.iter().map(|t| -t).collect();
        let lse = log_sum_exp(&neg);
        let m = partners.len() as f64;

        let mut anchor_value = m * lse * inv_dm1;
        let g_row = grad.row_mut(i);
        // repulsion: softmax-weighted push away from every other pair
        for ((t, g), _) in terms.iter().zip(&grads).zip(&keys) {
            let p = (-t - lse).exp();
            let coeff = -m * inv_dm1 * p;
            for (gr, gv) in g_row.iter_mut().zip(g) {
                *gr += coeff * gv;
            }
        }
        // attraction toward each cross-domain same-class prototype
        for &d in &partners {
            let idx = keys.iter().position(|&k| k == (d, ci)).expect("partner is a candidate");
            anchor_value += terms[idx] * inv_dm1;
            for (gr, gv) in g_row.iter_mut().zip(&grads[idx]) {
                *gr += inv_dm1 * gv;
            }
        }
        value += anchor_value;
    }

    if contributing > 0 {
        let inv_a = 1.0 / contributing as f64;
        value *= inv_a;
        grad.scale(inv_a);
    } else {
        value = 0.0;
    }
    Ok(BodaOutput {
        loss: LossOutput { value, grad_logits: None, grad_z: Some(grad) },
        skipped_anchors: skipped,
        contributing_anchors: contributing,
    })
}

/// CORAL between two embedding batches: squared Frobenius distance of their
/// unbiased covariances over `4 E^2`, with analytic gradients for both.
pub struct CoralOutput {
    pub value: f64,
    pub grad_a: Mat,
    pub grad_b: Mat,
}

pub fn coral_loss(a: &Mat, b: &Mat) -> Result<CoralOutput, LossError> {
    assert_eq!(a.cols(), b.cols(), "embedding dims must agree");
    for m in [a, b] {
        if m.rows() < 2 {
            return Err(LossError::TooFewSamples { have: m.rows(), need: 2 });
        }
    }
    let e = a.cols();
    let center = |m: &Mat| {
        let mut out = m.clone();
        let mut mean = vec![0.0; e];
        for r in 0..m.rows() {
            for (s, v) in mean.iter_mut().zip(m.row(r)) {
                *s += v;
            }
        }
        for s in &mut mean {
            *s /= m.rows() as f64;
        }
        for r in 0..out.rows() {
            for (v, mu) in out.row_mut(r).iter_mut().zip(&mean) {
                *v -= mu;
            }
        }
        out
    };
    let xa = center(a);
    let xb = center(b);
    let ca = {
        let mut c = xa.matmul_transpose_a(&xa);
        c.scale(1.0 / (a.rows() as f64 - 1.0));
        c
    };
    let cb = {
        let mut c = xb.matmul_transpose_a(&xb);
        c.scale(1.0 / (b.rows() as f64 - 1.0));
        c
    };
    let scale = 1.0 / (4.0 * (e * e) as f64);
    let mut value = 0.0;
    let mut g = Mat::zeros(e, e);
    for i in 0..e {
        for j in 0..e {
            let d = ca.at(i, j) - cb.at(i, j);
            value += d * d * scale;
            g.set(i, j, d * 2.0 * scale);
        }
    }
    // dL/dZ_a = 2/(n-1) X_a G with G symmetric; rows of X are centered so
    // the centering projector is a no-op on the gradient
    let mut grad_a = xa.matmul(&g);
    grad_a.scale(2.0 / (a.rows() as f64 - 1.0));
    let mut grad_b = xb.matmul(&g);
    grad_b.scale(-2.0 / (b.rows() as f64 - 1.0));
    Ok(CoralOutput { value, grad_a, grad_b })
}

/// CORAL averaged over all domain pairs present in the batch. Domains with
/// fewer than two rows are ignored; fails with [`LossError::SingleDomain`]
/// when fewer than two usable domains remain.
pub fn coral_multi_domain(z: &Mat, domains: &[usize]) -> Result<LossOutput, LossError> {
    assert_eq!(z.rows(), domains.len());
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domains.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    let usable: Vec<(&usize, &Vec<usize>)> =
        groups.iter().filter(|(_, rows)| rows.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(LossError::SingleDomain);
    }
    let gather = |rows: &[usize]| {
        let mut m = Mat::zeros(rows.len(), z.cols());
        for (r, &i) in rows.iter().enumerate() {
            m.row_mut(r).copy_from_slice(z.row(i));
        }
        m
    };
    let mut value = 0.0;
    let mut grad = Mat::zeros(z.rows(), z.cols());
    let mut pairs = 0usize;
    for i in 0..usable.len() {
        for j in (i + 1)..usable.len() {
            let (rows_a, rows_b) = (usable[i].1, usable[j].1);
            let out = coral_loss(&gather(rows_a), &gather(rows_b))?;
            value += out.value;
            for (r, &row) in rows_a.iter().enumerate() {
                for (g, v) in grad.row_mut(row).iter_mut().zip(out.grad_a.row(r)) {
                    *g += v;
                }
            }
            for (r, &row) in rows_b.iter().enumerate() {
                for (g, v) in grad.row_mut(row).iter_mut().zip(out.grad_b.row(r)) {
                    *g += v;
                }
            }
            pairs += 1;
        }
    }
    let inv = 1.0 / pairs as f64;
    value *= inv;
    grad.scale(inv);
    Ok(LossOutput { value, grad_logits: None, grad_z: Some(grad) })
}

/// Combined objective: cross-entropy plus `lambda` times an alignment term.
pub fn total_objective(ce: &LossOutput, aux: &LossOutput, lambda: f64) -> LossOutput {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let grad_z = aux.grad_z.as_ref().map(|g| {
        let mut g = g.clone();
        g.scale(lambda);
        g
    });
    LossOutput {
        value: ce.value + lambda * aux.value,
        grad_logits: ce.grad_logits.clone(),
        grad_z,
    }
}
