//! Training variants (plain cross-entropy, CORAL-regularized, coupled and
//! decoupled alignment training), the leave-one-domain-out protocol, and
//! k-fold cross-validation orchestration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{
    augment_features, make_batches, stratified_kfold, Batch, DataError, Dataset, SampleMode,
};
use crate::eval::{evaluate, EvalError, MetricsReport, RunMeta};
use crate::losses::{
    boda_loss, coral_multi_domain, cross_entropy_with_form, domain_class_statistics,
    total_objective, CalibrationTable, CeForm, DistanceKind, DomainClassStats, LossError,
    LossOutput, PairStats,
};
use crate::model::{
    backward, forward, init_params, sgd_step_layers, ModelError, ModelParams, SgdState,
};
use crate::numerics::substream_seed;

// Stream salts; each purpose gets an independent draw sequence per run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_HEAD_INIT: u64 = 4;
const STREAM_HEAD_SAMPLER: u64 = 5;
const STREAM_HEAD_AUGMENT: u64 = 6;
const STREAM_SOURCE_SPLIT: u64 = 7;
const STREAM_TARGET_SPLIT: u64 = 8;
const STREAM_FOLD: u64 = 9;

fn stream_at(seed: u64, salt: u64, epoch: usize, batch: usize) -> u64 {
    substream_seed(seed, (salt << 56) | ((epoch as u64) << 28) | batch as u64)
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    SingleDomain,
    UnknownDomain(usize),
    DivergedLoss { epoch: usize, batch: usize, value: f64 },
    Data(DataError),
    Model(ModelError),
    Loss(LossError),
    Eval(EvalError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "config error: {msg}"),
            TrainError::SingleDomain => write!(f, "variant needs at least two training domains"),
            TrainError::UnknownDomain(d) => write!(f, "domain {d} not present in the dataset"),
            TrainError::DivergedLoss { epoch, batch, value } => {
                write!(f, "loss diverged at epoch {epoch}, batch {batch}: {value}")
            }
            TrainError::Data(e) => write!(f, "data error: {e}"),
            TrainError::Model(e) => write!(f, "model error: {e}"),
            TrainError::Loss(e) => write!(f, "loss error: {e}"),
            TrainError::Eval(e) => write!(f, "eval error: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}
impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}
impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Erm,
    Coral,
    BodaCoupled,
    BodaDecoupled,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Erm => "erm",
            Variant::Coral => "coral",
            Variant::BodaCoupled => "boda_coupled",
            Variant::BodaDecoupled => "boda_decoupled",
        }
    }
}

/// Where the alignment loss takes its prototype statistics from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    /// Fresh statistics from the current batch (the default).
    Batch,
    /// Exponential moving average over batches, decay 0.9 (experimental).
    Running,
}

/// Everything a training run depends on. Parsed from key=value text where
/// unknown keys are a hard error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub gamma: f64,
    pub distance: DistanceKind,
    pub ce_form: CeForm,
    pub stats_mode: StatsMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub augment: bool,
    pub jitter_sigma: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub decoupled_head_epochs: usize,
    pub head_reinit: bool,
    pub ridge: f64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Erm,
            lambda: 1.0,
            gamma: 1.0,
            distance: DistanceKind::Euclidean,
            ce_form: CeForm::Softmax,
            stats_mode: StatsMode::Batch,
            epochs: 100,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            augment: true,
            jitter_sigma: 0.05,
            scale_lo: 0.9,
            scale_hi: 1.1,
            decoupled_head_epochs: 20,
            head_reinit: true,
            ridge: 1e-4,
            hidden_dims: vec![64],
            embed_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::Config("lambda must be non-negative".into()));
        }
        if self.gamma < 0.0 {
            return Err(TrainError::Config("gamma must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi) {
            return Err(TrainError::Config("need 0 < scale_lo <= scale_hi".into()));
        }
        if self.jitter_sigma < 0.0 {
            return Err(TrainError::Config("jitter_sigma must be non-negative".into()));
        }
        if !(self.ridge > 0.0) {
            return Err(TrainError::Config("ridge must be positive".into()));
        }
        if self.embed_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(TrainError::Config("layer dims must be positive".into()));
        }
        Ok(())
    }

    /// Parse key=value text. Every key must be known; `#` comments and blank
    /// lines are ignored.
    pub fn parse(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| TrainError::Config(format!("line {}: {msg}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key=value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |k: &str, v: &str| format!("bad value `{v}` for key `{k}`");
        match key {
            "variant" => {
                self.variant = match value {
                    "erm" => Variant::Erm,
                    "coral" => Variant::Coral,
                    "boda_coupled" => Variant::BodaCoupled,
                    "boda_decoupled" => Variant::BodaDecoupled,
                    _ => return Err(bad(key, value)),
                }
            }
            "lambda" => self.lambda = value.parse().map_err(|_| bad(key, value))?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad(key, value))?,
            "distance" => {
                self.distance = match value {
                    "euclidean" => DistanceKind::Euclidean,
                    "mahalanobis" => DistanceKind::Mahalanobis,
                    _ => return Err(bad(key, value)),
                }
            }
            "ce_form" => {
                self.ce_form = match value {
                    "softmax" => CeForm::Softmax,
                    "bernoulli" => CeForm::Bernoulli,
                    _ => return Err(bad(key, value)),
                }
            }
            "stats" => {
                self.stats_mode = match value {
                    "batch" => StatsMode::Batch,
                    "running" => StatsMode::Running,
                    _ => return Err(bad(key, value)),
                }
            }
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "lr" => self.lr = value.parse().map_err(|_| bad(key, value))?,
            "momentum" => self.momentum = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "augment" => self.augment = value.parse().map_err(|_| bad(key, value))?,
            "jitter_sigma" => self.jitter_sigma = value.parse().map_err(|_| bad(key, value))?,
            "scale_lo" => self.scale_lo = value.parse().map_err(|_| bad(key, value))?,
            "scale_hi" => self.scale_hi = value.parse().map_err(|_| bad(key, value))?,
            "decoupled_head_epochs" => {
                self.decoupled_head_epochs = value.parse().map_err(|_| bad(key, value))?
            }
            "head_reinit" => self.head_reinit = value.parse().map_err(|_| bad(key, value))?,
            "ridge" => self.ridge = value.parse().map_err(|_| bad(key, value))?,
            "hidden_dims" => {
                self.hidden_dims = value
                    .split(',')
                    .map(|v| v.trim().parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(key, value))?
            }
            "embed_dim" => self.embed_dim = value.parse().map_err(|_| bad(key, value))?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Canonical key=value rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let stats = match self.stats_mode {
            StatsMode::Batch => "batch",
            StatsMode::Running => "running",
        };
        let distance = match self.distance {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::Mahalanobis => "mahalanobis",
        };
        let ce_form = match self.ce_form {
            CeForm::Softmax => "softmax",
            CeForm::Bernoulli => "bernoulli",
        };
        let hidden =
            self.hidden_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "variant={}\nlambda={}\ngamma={}\ndistance={distance}\nce_form={ce_form}\nstats={stats}\n\
             epochs={}\nbatch_size={}\nlr={}\nmomentum={}\nseed={}\naugment={}\njitter_sigma={}\n\
             scale_lo={}\nscale_hi={}\ndecoupled_head_epochs={}\nhead_reinit={}\nridge={}\n\
             hidden_dims={hidden}\nembed_dim={}\n",
            self.variant.as_str(),
            self.lambda,
            self.gamma,
            self.epochs,
            self.batch_size,
            self.lr,
            self.momentum,
            self.seed,
            self.augment,
            self.jitter_sigma,
            self.scale_lo,
            self.scale_hi,
            self.decoupled_head_epochs,
            self.head_reinit,
            self.ridge,
            self.embed_dim,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Main,
    Head,
}

/// Per-epoch training record.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub ce_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub train_f1_micro: f64,
    pub train_f1_macro: f64,
    pub val_f1_micro: f64,
    pub val_f1_macro: f64,
    pub param_checksum: u64,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    pub reports: BTreeMap<String, MetricsReport>,
    pub skipped_anchors: u64,
    pub single_domain_batches: u64,
}

/// Exponential moving average of per-pair statistics across batches.
struct RunningStats {
    decay: f64,
    dim: usize,
    pairs: BTreeMap<(usize, usize), PairStats>,
}

impl RunningStats {
    fn new(dim: usize) -> RunningStats {
        RunningStats { decay: 0.9, dim, pairs: BTreeMap::new() }
    }

    fn update(&mut self, batch_stats: &DomainClassStats) -> Result<(), LossError> {
        for (&key, fresh) in batch_stats.pairs() {
            match self.pairs.get(&key) {
                None => {
                    self.pairs.insert(key, fresh.clone());
                }
                Some(old) => {
                    let mean: Vec<f64> = old
                        .mean
                        .iter()
                        .zip(&fresh.mean)
                        .map(|(o, f)| self.decay * o + (1.0 - self.decay) * f)
                        .collect();
                    let merged = match (old.covariance(), fresh.covariance()) {
                        (Some(co), Some(cf)) => {
                            let mut sigma = co.clone();
                            sigma.scale(self.decay);
                            let mut add = cf.clone();
                            add.scale(1.0 - self.decay);
                            sigma.add_assign(&add);
                            PairStats::with_covariance(mean, fresh.count, sigma)?
                        }
                        _ => PairStats::new(mean, fresh.count),
                    };
                    self.pairs.insert(key, merged);
                }
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> DomainClassStats {
        DomainClassStats::from_parts(self.dim, self.pairs.clone())
    }
}

fn distinct_domains(ds: &Dataset) -> usize {
    (0..ds.num_domains())
        .filter(|&d| (0..ds.num_classes()).any(|c| ds.count(d, c) > 0))
        .count()
}

/// Train a model under `config` on `train`, tracking validation metrics on
/// `val` each epoch. Pure in `(config, train, val)`.
pub fn run_training(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<RunResult, TrainError> {
    run_training_guarded(config, train, val, None)
}

/// As [`run_training`], additionally asserting that no batch ever contains
/// the given domain (the held-out target under the OOD protocol).
pub fn run_training_guarded(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    forbidden_domain: Option<usize>,
) -> Result<RunResult, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    let needs_domains = matches!(
        config.variant,
        Variant::Coral | Variant::BodaCoupled | Variant::BodaDecoupled
    );
    if needs_domains && distinct_domains(train) < 2 {
        return Err(TrainError::SingleDomain);
    }

    let mut layer_dims = vec![train.feature_dim()];
    layer_dims.extend_from_slice(&config.hidden_dims);
    layer_dims.push(config.embed_dim);
    layer_dims.push(train.num_classes());
    let seed = config.seed;
    let mut params = init_params(&layer_dims, substream_seed(seed, STREAM_INIT))?;
    let mut velocity = SgdState::zeros_like(&params);
    let mut running = RunningStats::new(config.embed_dim);

    let mut history = Vec::new();
    let mut skipped_anchors = 0u64;
    let mut single_domain_batches = 0u64;
    let mut warned_single_domain = false;

    let run_phase = |phase: Phase,
                         epochs: usize,
                         params: &mut ModelParams,
                         velocity: &mut SgdState,
                         history: &mut Vec<EpochStats>,
                         skipped_anchors: &mut u64,
                         single_domain_batches: &mut u64,
                         warned: &mut bool,
                         running: &mut RunningStats|
     -> Result<(), TrainError> {
        let (sampler_salt, augment_salt, mode, use_aux, update_from) = match phase {
            Phase::Main => (
                STREAM_SAMPLER,
                STREAM_AUGMENT,
                SampleMode::Standard,
                !matches!(config.variant, Variant::Erm),
                0usize,
            ),
            Phase::Head => (
                STREAM_HEAD_SAMPLER,
                STREAM_HEAD_AUGMENT,
                SampleMode::ClassBalanced,
                false,
                params.encoder_depth(),
            ),
        };
        for epoch in 0..epochs {
            let batches =
                make_batches(train, config.batch_size, mode, stream_at(seed, sampler_salt, epoch, 0))?;
            let mut ce_sum = 0.0;
            let mut aux_sum = 0.0;
            let mut total_sum = 0.0;
            for (bi, raw_batch) in batches.iter().enumerate() {
                if let Some(banned) = forbidden_domain {
                    assert!(
                        raw_batch.domains.iter().all(|&d| d != banned),
                        "held-out domain {banned} leaked into a training batch"
                    );
                }
                let batch: Batch = if config.augment {
                    augment_features(
                        raw_batch,
                        config.jitter_sigma,
                        (config.scale_lo, config.scale_hi),
                        stream_at(seed, augment_salt, epoch, bi + 1),
                    )
                } else {
                    raw_batch.clone()
                };
                let cache = forward(params, &batch.features)?;
                let ce = cross_entropy_with_form(cache.logits(), &batch.labels, config.ce_form)?;
                let aux: Option<LossOutput> = if use_aux {
                    match config.variant {
                        Variant::Coral => {
                            match coral_multi_domain(cache.embeddings(), &batch.domains) {
                                Ok(out) => Some(out),
                                Err(LossError::SingleDomain) => None,
                                Err(e) => return Err(e.into()),
                            }
                        }
                        Variant::BodaCoupled | Variant::BodaDecoupled => {
                            let distinct =
                                batch.domains.iter().collect::<std::collections::BTreeSet<_>>();
                            if distinct.len() < 2 {
                                None
                            } else {
                                let with_cov = config.distance == DistanceKind::Mahalanobis;
                                let batch_stats = domain_class_statistics(
                                    cache.embeddings(),
                                    &batch.labels,
                                    &batch.domains,
                                    with_cov,
                                    config.ridge,
                                )?;
                                let stats = match config.stats_mode {
                                    StatsMode::Batch => batch_stats,
                                    StatsMode::Running => {
                                        running.update(&batch_stats)?;
                                        running.snapshot()
                                    }
                                };
                                // transfer strength follows the relative
                                // pair sizes observed by the statistics
                                let calib = CalibrationTable::from_stats(config.gamma, &stats);
                                let out = boda_loss(
                                    cache.embeddings(),
                                    &batch.labels,
                                    &batch.domains,
                                    &stats,
                                    &calib,
                                    config.distance,
                                )?;
                                *skipped_anchors += out.skipped_anchors as u64;
                                Some(out.loss)
                            }
                        }
                        Variant::Erm => None,
                    }
                } else {
                    None
                };
                if use_aux && aux.is_none() {
                    *single_domain_batches += 1;
                    if !*warned {
                        eprintln!(
                            "warning: batch with a single domain; alignment term skipped \
                             (further occurrences counted silently)"
                        );
                        *warned = true;
                    }
                }
                let (total, aux_value) = match &aux {
                    Some(a) => (total_objective(&ce, a, config.lambda), a.value),
                    None => (ce.clone(), 0.0),
                };
                if !total.value.is_finite() {
                    return Err(TrainError::DivergedLoss {
                        epoch,
                        batch: bi,
                        value: total.value,
                    });
                }
                let grads = backward(
                    params,
                    &cache,
                    total.grad_logits.as_ref().expect("cross-entropy always yields logit grads"),
                    total.grad_z.as_ref(),
                )?;
                sgd_step_layers(params, &grads, config.lr, config.momentum, velocity, update_from)?;
                ce_sum += ce.value;
                aux_sum += aux_value;
                total_sum += total.value;
            }
            let nb = batches.len() as f64;
            let train_report = evaluate(params, train, RunMeta::default())?;
            let val_report = evaluate(params, val, RunMeta::default())?;
            history.push(EpochStats {
                epoch,
                phase,
                ce_loss: ce_sum / nb,
                aux_loss: aux_sum / nb,
                total_loss: total_sum / nb,
                train_f1_micro: train_report.f1_micro,
                train_f1_macro: train_report.f1_macro,
                val_f1_micro: val_report.f1_micro,
                val_f1_macro: val_report.f1_macro,
                param_checksum: params.checksum(),
            });
        }
        Ok(())
    };

    run_phase(
        Phase::Main,
        config.epochs,
        &mut params,
        &mut velocity,
        &mut history,
        &mut skipped_anchors,
        &mut single_domain_batches,
        &mut warned_single_domain,
        &mut running,
    )?;

    if config.variant == Variant::BodaDecoupled {
        if config.head_reinit {
            let head = init_params(
                &[params.embed_dim(), train.num_classes()],
                substream_seed(seed, STREAM_HEAD_INIT),
            )?;
            params.set_classifier(head.layers()[0].clone());
        }
        let mut head_velocity = SgdState::zeros_like(&params);
        run_phase(
            Phase::Head,
            config.decoupled_head_epochs,
            &mut params,
            &mut head_velocity,
            &mut history,
            &mut skipped_anchors,
            &mut single_domain_batches,
            &mut warned_single_domain,
            &mut running,
        )?;
    }

    let mut reports = BTreeMap::new();
    let meta = |_split: &str| RunMeta {
        seed,
        variant: config.variant.as_str().to_string(),
        fold: None,
    };
    reports.insert("train".to_string(), {
        let mut r = evaluate(&params, train, meta("train"))?;
        r.run_meta = meta("train");
        r
    });
    reports.insert("val".to_string(), evaluate(&params, val, meta("val"))?);

    Ok(RunResult { params, history, reports, skipped_anchors, single_domain_batches })
}

/// The three datasets of one leave-one-domain-out run: pooled source train
/// split, source validation fold, and the fixed 20% target test subset.
pub fn lodo_splits(
    ds: &Dataset,
    target_domain: usize,
    val_fold: usize,
    k: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), TrainError> {
    if target_domain >= ds.num_domains()
        || (0..ds.num_classes()).all(|c| ds.count(target_domain, c) == 0)
    {
        return Err(TrainError::UnknownDomain(target_domain));
    }
    let sources = ds.without_domain(target_domain);
    if sources.is_empty() {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    let folds = stratified_kfold(&sources, k, substream_seed(seed, STREAM_SOURCE_SPLIT))?;
    let train = sources.subset(&folds.complement_indices(val_fold));
    let val = sources.subset(&folds.fold_indices(val_fold));
    let target = ds.only_domain(target_domain);
    let target_folds = stratified_kfold(&target, k, substream_seed(seed, STREAM_TARGET_SPLIT))?;
    let target_test = target.subset(&target_folds.fold_indices(0));
    Ok((train, val, target_test))
}

/// Out-of-distribution protocol: hold out one domain entirely, train on the
/// remaining domains with an 80/20 stratified split, and evaluate on both
/// the source validation fold and a fixed 20% stratified subset of the
/// held-out domain. `seed` drives splits and training alike.
pub fn leave_one_domain_out(
    config: &TrainConfig,
    ds: &Dataset,
    target_domain: usize,
    seed: u64,
) -> Result<RunResult, TrainError> {
    leave_one_domain_out_fold(config, ds, target_domain, 0, seed)
}

fn leave_one_domain_out_fold(
    config: &TrainConfig,
    ds: &Dataset,
    target_domain: usize,
    val_fold: usize,
    seed: u64,
) -> Result<RunResult, TrainError> {
    let (train, val, target_test) = lodo_splits(ds, target_domain, val_fold, 5, seed)?;
    let mut cfg = config.clone();
    cfg.seed = seed;
    let mut result = run_training_guarded(&cfg, &train, &val, Some(target_domain))?;
    let meta = RunMeta { seed, variant: cfg.variant.as_str().to_string(), fold: Some(val_fold) };
    let source_val = result.reports.remove("val").expect("training always reports val");
    result.reports.insert("source_val".to_string(), source_val);
    let mut target_report = evaluate(&result.params, &target_test, meta)?;
    target_report.run_meta.fold = Some(val_fold);
    result.reports.insert("target_test".to_string(), target_report);
    Ok(result)
}

/// Mean and sample standard deviation (n - 1 denominator; zero for n = 1).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty());
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Aggregate of a k-fold cross-validation, keyed by metric name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValAggregate {
    pub variant: String,
    pub seed: u64,
    pub k: usize,
    pub target_domain: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

pub struct CrossValOutcome {
    pub fold_results: Vec<RunResult>,
    pub aggregate: CrossValAggregate,
}

/// k-fold cross-validation under the leave-one-domain-out protocol: fold i
/// serves as the source validation split of run i; the target test subset
/// stays fixed across folds. Runs execute in waves of `jobs` threads.
pub fn cross_validate(
    config: &TrainConfig,
    ds: &Dataset,
    k: usize,
    target_domain: usize,
    seed: u64,
    jobs: usize,
) -> Result<CrossValOutcome, TrainError> {
    assert!(k >= 2, "k must be at least 2");
    let jobs = jobs.max(1);
    let mut fold_results: Vec<Option<Result<RunResult, TrainError>>> =
        (0..k).map(|_| None).collect();
    for wave in (0..k).collect::<Vec<_>>().chunks(jobs) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &fold in wave {
                let fold_seed = substream_seed(seed, (STREAM_FOLD << 56) | fold as u64);
                let cfg = config.clone();
                handles.push((
                    fold,
                    scope.spawn(move || {
                        let (train, val, target_test) =
                            lodo_splits(ds, target_domain, fold, k, seed)?;
                        let mut cfg = cfg;
                        cfg.seed = fold_seed;
                        let mut result =
                            run_training_guarded(&cfg, &train, &val, Some(target_domain))?;
                        let source_val =
                            result.reports.remove("val").expect("training always reports val");
                        result.reports.insert("source_val".to_string(), source_val);
                        let meta = RunMeta {
                            seed: fold_seed,
                            variant: cfg.variant.as_str().to_string(),
                            fold: Some(fold),
                        };
                        let target_report = evaluate(&result.params, &target_test, meta)?;
                        result.reports.insert("target_test".to_string(), target_report);
                        Ok(result)
                    }),
                ));
            }
            for (fold, handle) in handles {
                fold_results[fold] = Some(handle.join().expect("fold thread panicked"));
            }
        });
    }
    let fold_results: Vec<RunResult> =
        fold_results.into_iter().map(|r| r.expect("all folds ran")).collect::<Result<_, _>>()?;

    let metric = |split: &str, which: &str, r: &RunResult| -> f64 {
        let rep = &r.reports[split];
        if which == "f1_micro" {
            rep.f1_micro
        } else {
            rep.f1_macro
        }
    };
    let mut metrics = BTreeMap::new();
    for split in ["source_val", "target_test"] {
        for which in ["f1_micro", "f1_macro"] {
            let values: Vec<f64> = fold_results.iter().map(|r| metric(split, which, r)).collect();
            let (mean, std) = mean_std(&values);
            metrics.insert(format!("{split}_{which}"), MeanStd { mean, std });
        }
    }
    Ok(CrossValOutcome {
        fold_results,
        aggregate: CrossValAggregate {
            variant: config.variant.as_str().to_string(),
            seed,
            k,
            target_domain,
            metrics,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use std::collections::BTreeMap as Map;

    /// Small well-separated two-class, two-domain dataset.
    fn separable_dataset(n_per: usize, seed: u64) -> Dataset {
        let mut counts = Map::new();
        for d in 0..2 {
            for c in 0..2 {
                counts.insert((d, c), n_per);
            }
        }
        let spec = SyntheticSpec {
            num_classes: 2,
            feature_dim: 6,
            sigma: 0.3,
            seed,
            counts,
            class_means: Some(vec![vec![3.0; 6], vec![-3.0; 6]]),
            shifts: Map::new(),
            mixes: Map::new(),
        };
        generate_synthetic(&spec, seed).unwrap()
    }

    fn quick_config(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            epochs: 5,
            batch_size: 8,
            hidden_dims: vec![16],
            embed_dim: 8,
            augment: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn erm_reaches_perfect_train_f1_on_separable_data() {
        let ds = separable_dataset(20, 3);
        let cfg = TrainConfig {
            epochs: 200,
            ..quick_config(Variant::Erm)
        };
        let result = run_training(&cfg, &ds, &ds).unwrap();
        let reached = result.history.iter().any(|e| e.train_f1_micro == 1.0);
        assert!(reached, "never reached train f1 1.0");
    }

    #[test]
    fn lambda_zero_coupled_equals_erm_bitwise() {
        let ds = separable_dataset(12, 5);
        let erm = run_training(&quick_config(Variant::Erm), &ds, &ds).unwrap();
        let cfg = TrainConfig { lambda: 0.0, ..quick_config(Variant::BodaCoupled) };
        let coupled = run_training(&cfg, &ds, &ds).unwrap();
        assert_eq!(erm.params, coupled.params);
        for (a, b) in erm.history.iter().zip(&coupled.history) {
            assert_eq!(a.param_checksum, b.param_checksum);
            assert_eq!(a.ce_loss.to_bits(), b.ce_loss.to_bits());
            assert_eq!(a.total_loss.to_bits(), b.total_loss.to_bits());
        }
    }

    #[test]
    fn boda_training_is_deterministic() {
        let ds = separable_dataset(12, 7);
        let cfg = quick_config(Variant::BodaCoupled);
        let a = run_training(&cfg, &ds, &ds).unwrap();
        let b = run_training(&cfg, &ds, &ds).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.reports["val"], b.reports["val"]);
        assert_eq!(a.skipped_anchors, b.skipped_anchors);
    }

    #[test]
    fn decoupled_head_phase_leaves_encoder_bitwise_unchanged() {
        let ds = separable_dataset(12, 9);
        let coupled = run_training(&quick_config(Variant::BodaCoupled), &ds, &ds).unwrap();
        let mut cfg = quick_config(Variant::BodaDecoupled);
        cfg.decoupled_head_epochs = 3;
        let decoupled = run_training(&cfg, &ds, &ds).unwrap();
        // phase 1 of the decoupled run consumes the same streams as the
        // coupled run, so encoders must agree bitwise; classifiers differ
        let depth = coupled.params.encoder_depth();
        for l in 0..depth {
            assert_eq!(coupled.params.layers()[l], decoupled.params.layers()[l]);
        }
        assert_ne!(coupled.params.layers()[depth], decoupled.params.layers()[depth]);
        assert_eq!(
            decoupled.history.len(),
            cfg.epochs + cfg.decoupled_head_epochs,
            "history covers both phases"
        );
    }

    #[test]
    fn variants_needing_domains_reject_single_domain_data() {
        let ds = separable_dataset(10, 1).only_domain(0);
        for variant in [Variant::Coral, Variant::BodaCoupled, Variant::BodaDecoupled] {
            let err = run_training(&quick_config(variant), &ds, &ds).unwrap_err();
            assert!(matches!(err, TrainError::SingleDomain));
        }
        assert!(run_training(&quick_config(Variant::Erm), &ds, &ds).is_ok());
    }

    #[test]
    fn coral_training_runs_and_tracks_aux() {
        let ds = separable_dataset(12, 11);
        let result = run_training(&quick_config(Variant::Coral), &ds, &ds).unwrap();
        assert!(result.history.iter().any(|e| e.aux_loss != 0.0));
    }

    #[test]
    fn lodo_excludes_target_domain_everywhere() {
        let ds = three_domain_dataset();
        let (train, val, target_test) = lodo_splits(&ds, 2, 0, 5, 4).unwrap();
        assert!(train.samples().iter().all(|s| s.domain != 2));
        assert!(val.samples().iter().all(|s| s.domain != 2));
        assert!(target_test.samples().iter().all(|s| s.domain == 2));
        // 80/20 split per stratum, within one sample
        for d in 0..2 {
            for c in 0..2 {
                let total = train.count(d, c) + val.count(d, c);
                assert_eq!(total, ds.count(d, c));
                let expect_val = total / 5;
                assert!(
                    val.count(d, c) >= expect_val && val.count(d, c) <= expect_val + 1,
                    "val stratum ({d},{c}) holds {} of {total}",
                    val.count(d, c)
                );
            }
        }
        // target subset is about 20%
        let target_total = ds.only_domain(2).len();
        assert!(target_test.len() >= target_total / 5);
        assert!(target_test.len() <= target_total / 5 + ds.num_classes());
    }

    fn three_domain_dataset() -> Dataset {
        let mut counts = Map::new();
        for d in 0..3 {
            for c in 0..2 {
                counts.insert((d, c), 25);
            }
        }
        let spec = SyntheticSpec {
            num_classes: 2,
            feature_dim: 6,
            sigma: 0.5,
            seed: 2,
            counts,
            class_means: Some(vec![vec![2.0; 6], vec![-2.0; 6]]),
            shifts: Map::new(),
            mixes: Map::new(),
        };
        generate_synthetic(&spec, 2).unwrap()
    }

    #[test]
    fn lodo_rejects_unknown_target() {
        let ds = three_domain_dataset();
        let err = leave_one_domain_out(&quick_config(Variant::Erm), &ds, 9, 1).unwrap_err();
        assert!(matches!(err, TrainError::UnknownDomain(9)));
    }

    #[test]
    fn lodo_produces_target_report() {
        let ds = three_domain_dataset();
        let result = leave_one_domain_out(&quick_config(Variant::Erm), &ds, 2, 4).unwrap();
        assert!(result.reports.contains_key("source_val"));
        assert!(result.reports.contains_key("target_test"));
        assert_eq!(result.reports["target_test"].run_meta.fold, Some(0));
    }

    #[test]
    fn cross_validate_runs_every_fold_once() {
        let ds = three_domain_dataset();
        let mut cfg = quick_config(Variant::Erm);
        cfg.epochs = 2;
        let outcome = cross_validate(&cfg, &ds, 5, 2, 7, 2).unwrap();
        assert_eq!(outcome.fold_results.len(), 5);
        for (i, r) in outcome.fold_results.iter().enumerate() {
            assert_eq!(r.reports["target_test"].run_meta.fold, Some(i));
        }
        assert!(outcome.aggregate.metrics.contains_key("target_test_f1_macro"));
        // val folds partition the source set
        let sizes: usize = {
            let folds = stratified_kfold(
                &ds.without_domain(2),
                5,
                substream_seed(7, STREAM_SOURCE_SPLIT),
            )
            .unwrap();
            (0..5).map(|f| folds.fold_indices(f).len()).sum()
        };
        assert_eq!(sizes, ds.without_domain(2).len());
    }

    #[test]
    fn cross_validate_is_independent_of_job_count() {
        let ds = three_domain_dataset();
        let mut cfg = quick_config(Variant::Erm);
        cfg.epochs = 2;
        let serial = cross_validate(&cfg, &ds, 3, 2, 7, 1).unwrap();
        let parallel = cross_validate(&cfg, &ds, 3, 2, 7, 3).unwrap();
        for (a, b) in serial.fold_results.iter().zip(&parallel.fold_results) {
            assert_eq!(a.params, b.params);
        }
        assert_eq!(serial.aggregate.metrics, parallel.aggregate.metrics);
    }

    #[test]
    fn mean_std_hand_case() {
        let (m, s) = mean_std(&[0.6, 0.7, 0.8]);
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        let (m1, s1) = mean_std(&[0.42]);
        assert_eq!((m1, s1), (0.42, 0.0));
    }

    #[test]
    fn aggregate_of_identical_metrics_has_zero_std() {
        let (m, s) = mean_std(&[0.33, 0.33, 0.33, 0.33]);
        assert!((m - 0.33).abs() < 1e-12);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn config_file_round_trip_and_unknown_key() {
        let cfg = TrainConfig { variant: Variant::BodaDecoupled, lambda: 0.5, ..Default::default() };
        let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        let err = TrainConfig::parse("variant=erm\nwhoops=1\n").unwrap_err();
        assert!(matches!(err, TrainError::Config(msg) if msg.contains("unknown key")));
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 1;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let mut cfg = TrainConfig::default();
        cfg.lambda = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn running_stats_mode_trains() {
        let ds = separable_dataset(12, 13);
        let mut cfg = quick_config(Variant::BodaCoupled);
        cfg.stats_mode = StatsMode::Running;
        let result = run_training(&cfg, &ds, &ds).unwrap();
        assert_eq!(result.history.len(), cfg.epochs);
    }

    #[test]
    fn boda_loss_decreases_over_training_on_benchmark_slice() {
        // trimmed benchmark: fewer samples and epochs, same structure
        let mut spec = SyntheticSpec::appendix_template(21);
        for n in spec.counts.values_mut() {
            *n = (*n / 8).min(40);
        }
        let ds = generate_synthetic(&spec, 21).unwrap();
        let sources = ds.without_domain(2);
        let mut first_sum = 0.0;
        let mut last_sum = 0.0;
        for seed in 0..3u64 {
            let cfg = TrainConfig {
                epochs: 30,
                seed,
                batch_size: 32,
                ..quick_config(Variant::BodaCoupled)
            };
            let result = run_training(&cfg, &sources, &sources).unwrap();
            first_sum += result.history.first().unwrap().aux_loss;
            last_sum += result.history.last().unwrap().aux_loss;
        }
        assert!(
            last_sum < first_sum,
            "alignment loss should fall on average: first {first_sum} last {last_sum}"
        );
    }
}
