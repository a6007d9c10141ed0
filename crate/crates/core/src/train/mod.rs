//! Adam training with dropout and early stopping, and evaluation passes.

mod adam;

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::data::{batches, pair_datasets, EmbeddingDataset};
use crate::error::{dim_err, usage_err, validation_err, Result};
use crate::graph::{Graph, Var};
use crate::losses::total_loss;
use crate::metrics::MetricsReport;
use crate::models::{init_params, Arch, ArchConfig, BoundParams, Mode, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows scored per eval-mode graph.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub s: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub dropout_rate: f64,
}

impl TrainConfig {
    pub fn new(arch: ArchConfig) -> Self {
        Self {
            arch,
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            lambda: 0.1,
            s: 0.3,
            patience: 5,
            min_delta: 1e-4,
            val_fraction: 0.1,
            seed: 0,
            dropout_rate: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_hyperparameters()?;
        self.model_config().validate()
    }

    /// Checks every knob except the input dimensions.
    pub fn validate_hyperparameters(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(usage_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return Err(usage_err!("s must lie in (0, 1), got {}", self.s));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(usage_err!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.epochs == 0 {
            return Err(usage_err!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(usage_err!("batch size must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(usage_err!("validation fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(usage_err!("dropout rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Architecture config with the run-level `s` and dropout rate applied.
    pub fn model_config(&self) -> ArchConfig {
        ArchConfig {
            chernoff_s: self.s,
            dropout_rate: self.dropout_rate,
            ..self.arch.clone()
        }
    }

    fn effective_lambda(&self) -> f64 {
        if self.arch.arch == Arch::Coffe {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub ce: f64,
    pub cd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub train_loss: Vec<EpochLoss>,
    pub val_loss: Vec<EpochLoss>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    /// Logged only; omitted from JSON so reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
    /// Metrics of the restored model on the validation split.
    pub metrics: MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once validation loss fails to improve by `min_delta` for
/// `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        match self.best {
            Some(b) if loss > b - self.min_delta => {
                self.stale += 1;
                if self.patience > 0 && self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some(loss);
                self.best_epoch = epoch;
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best
    }
}

/// Graph handles of one recorded loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    /// Batch-mean Chernoff distance (`coffe` only).
    pub cd: Option<Var>,
}

/// Records `ce + lambda · mean(cd)` for one batch. The CD term is omitted
/// from the total when `lambda` is zero.
#[allow(clippy::too_many_arguments)]
pub fn record_loss<T: Scalar>(
    params: &ModelParams<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    xa: Var,
    xb: Option<Var>,
    labels: &[usize],
    lambda: f64,
    mode: Mode,
) -> Result<LossVars> {
    let fwd = params.forward_graph(g, bound, xa, xb, mode)?;
    let ce = g.cross_entropy(fwd.probs, labels)?;
    let cd = fwd.cd.map(|v| g.mean(v)).transpose()?;
    let total = match cd {
        Some(cd) if lambda != 0.0 => {
            let weighted = g.scale(cd, T::of(lambda))?;
            g.add(ce, weighted)?
        }
        _ => ce,
    };
    Ok(LossVars { total, ce, cd })
}

/// Row-aligned inputs for one or two views.
struct Views {
    a: EmbeddingDataset,
    b: Option<EmbeddingDataset>,
}

impl Views {
    fn new(cfg: &ArchConfig, a: &EmbeddingDataset, b: Option<&EmbeddingDataset>) -> Result<Self> {
        let views = match (cfg.arch.is_fusion(), b) {
            (true, Some(b)) => {
                let p = pair_datasets(a, b)?;
                Views { a: p.a, b: Some(p.b) }
            }
            (true, None) => return Err(usage_err!("{} needs a paired second view", cfg.arch)),
            (false, Some(_)) => return Err(usage_err!("{} takes a single view", cfg.arch)),
            (false, None) => {
                a.validate()?;
                Views { a: a.clone(), b: None }
            }
        };
        if views.a.dim != cfg.input_dim_a {
            return Err(dim_err!(
                "view a has dimension {}, model expects {}",
                views.a.dim,
                cfg.input_dim_a
            ));
        }
        if let (Some(b), Some(db)) = (&views.b, cfg.input_dim_b) {
            if b.dim != db {
                return Err(dim_err!("view b has dimension {}, model expects {db}", b.dim));
            }
        }
        if views.a.n_classes() > cfg.n_classes {
            return Err(validation_err!(
                "data has {} classes, model has {} outputs",
                views.a.n_classes(),
                cfg.n_classes
            ));
        }
        Ok(views)
    }

    fn tensors<T: Scalar>(&self, rows: &[usize]) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let a = self.a.features(rows)?;
        let b = self.b.as_ref().map(|b| b.features(rows)).transpose()?;
        Ok((a, b))
    }

    fn labels(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&i| self.a.labels[i] as usize).collect()
    }
}

/// Seeded per-class split; each class with at least two rows contributes
/// `round(n · fraction)` (clamped to `1..n`) rows to validation.
pub fn stratified_split(labels: &[u16], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..n_classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize == c).collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        let n = rows.len();
        let n_val = if n < 2 {
            0
        } else {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        };
        val.extend_from_slice(&rows[..n_val]);
        train.extend_from_slice(&rows[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn mean_loss<T: Scalar>(
    params: &ModelParams<T>,
    views: &Views,
    rows: &[usize],
    lambda: f64,
) -> Result<EpochLoss> {
    let mut acc = EpochLoss::default();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (xa, xb) = views.tensors::<T>(chunk)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let va = g.constant(xa);
        let vb = xb.map(|t| g.constant(t));
        let lv = record_loss(params, &mut g, &bound, va, vb, &views.labels(chunk), lambda, Mode::Eval)?;
        let w = chunk.len() as f64;
        acc.ce += w * g.value(lv.ce).data()[0].to_f64_lossy();
        if let Some(cd) = lv.cd {
            acc.cd += w * g.value(cd).data()[0].to_f64_lossy();
        }
    }
    let n = rows.len() as f64;
    acc.ce /= n;
    acc.cd /= n;
    acc.total = total_loss(acc.ce, acc.cd, lambda);
    Ok(acc)
}

/// Trains `cfg.arch` on `a` (paired with `b` for fusion architectures) and
/// returns the parameters of the best validation epoch.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    a: &EmbeddingDataset,
    b: Option<&EmbeddingDataset>,
) -> Result<(ModelParams<T>, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let model_cfg = cfg.model_config();
    let views = Views::new(&model_cfg, a, b)?;
    let distinct = {
        let mut l = views.a.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(validation_err!("training data contains a single class"));
    }
    let (train_rows, val_rows) = stratified_split(&views.a.labels, cfg.val_fraction, cfg.seed);
    let lambda = cfg.effective_lambda();
    let adam = AdamConfig::with_lr(cfg.lr);

    let mut params: ModelParams<T> = init_params(&model_cfg, cfg.seed)?;
    let mut state = AdamState::new(params.layers().iter().map(|(_, t)| t));
    let mut best = params.clone();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut stopped_epoch = cfg.epochs;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut acc = EpochLoss::default();
        for batch in batches(train_rows.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            let rows: Vec<usize> = batch.iter().map(|&i| train_rows[i]).collect();
            let (xa, xb) = views.tensors::<T>(&rows)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let va = g.constant(xa);
            let vb = xb.map(|t| g.constant(t));
            let mode = Mode::Train {
                seed: cfg.seed,
                step,
            };
            let lv = record_loss(&params, &mut g, &bound, va, vb, &views.labels(&rows), lambda, mode)?;
            g.backward(lv.total)?;
            let grads: Vec<&[T]> = bound
                .vars
                .iter()
                .map(|&v| g.grad(v).expect("trainable leaves receive gradients"))
                .collect();
            adam_step(params.layers_mut(), &grads, &mut state, &adam)?;
            step += 1;

            let w = rows.len() as f64;
            acc.total += w * g.value(lv.total).data()[0].to_f64_lossy();
            acc.ce += w * g.value(lv.ce).data()[0].to_f64_lossy();
            if let Some(cd) = lv.cd {
                acc.cd += w * g.value(cd).data()[0].to_f64_lossy();
            }
        }
        let n = train_rows.len() as f64;
        acc.total /= n;
        acc.ce /= n;
        acc.cd /= n;
        train_loss.push(acc);

        let val = mean_loss(&params, &views, &val_rows, lambda)?;
        val_loss.push(val);
        debug!(
            "epoch {epoch}: train {:.6} (ce {:.6}, cd {:.6}) val {:.6}",
            acc.total, acc.ce, acc.cd, val.total
        );
        match stopper.observe(epoch, val.total) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_epoch = epoch;
                info!("early stop at epoch {epoch}, best epoch {}", stopper.best_epoch());
                break;
            }
        }
    }

    let metrics = evaluate_views(&best, &views, &val_rows)?;
    let wall_clock_seconds = started.elapsed().as_secs_f64();
    info!(
        "trained {} for {stopped_epoch} epochs in {wall_clock_seconds:.1}s; val accuracy {:.4}",
        model_cfg.arch, metrics.accuracy
    );
    let report = TrainReport {
        config: cfg.clone(),
        n_train: train_rows.len(),
        n_val: val_rows.len(),
        train_loss,
        val_loss,
        stopped_epoch,
        best_epoch: stopper.best_epoch(),
        wall_clock_seconds,
        metrics,
    };
    Ok((best, report))
}

/// Eval-mode posteriors for `rows`, flattened row-major.
fn posteriors<T: Scalar>(params: &ModelParams<T>, views: &Views, rows: &[usize]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(rows.len() * params.config.n_classes);
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (xa, xb) = views.tensors::<T>(chunk)?;
        let (probs, _) = params.predict(&xa, xb.as_ref())?;
        out.extend_from_slice(probs.data());
    }
    Ok(out)
}

fn evaluate_views<T: Scalar>(params: &ModelParams<T>, views: &Views, rows: &[usize]) -> Result<MetricsReport> {
    let scores = posteriors(params, views, rows)?;
    MetricsReport::from_posteriors(&scores, &views.labels(rows), params.config.n_classes)
}

/// Single deterministic eval-mode pass over every row of the test data.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    a: &EmbeddingDataset,
    b: Option<&EmbeddingDataset>,
) -> Result<MetricsReport> {
    let views = Views::new(&params.config, a, b)?;
    let rows: Vec<usize> = (0..views.a.count()).collect();
    evaluate_views(params, &views, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    #[test]
    fn early_stop_contract() {
        let mut es = EarlyStopping::new(1, 1e-4);
        assert_eq!(es.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(es.observe(2, 1.1), StopDecision::Stop);
        assert_eq!(es.best_epoch(), 1);

        let mut es = EarlyStopping::new(2, 1e-4);
        es.observe(1, 1.0);
        // below min-delta counts as no improvement
        assert_eq!(es.observe(2, 0.99995), StopDecision::Continue);
        assert_eq!(es.observe(3, 0.5), StopDecision::Improved);
        assert_eq!(es.observe(4, 0.6), StopDecision::Continue);
        assert_eq!(es.observe(5, 0.7), StopDecision::Stop);
        assert_eq!((es.best_epoch(), es.best_loss()), (3, Some(0.5)));
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let labels: Vec<u16> = (0..100).map(|i| (i % 4) as u16).collect();
        let (tr, va) = stratified_split(&labels, 0.1, 3);
        assert_eq!(tr.len() + va.len(), 100);
        assert_eq!(va.len(), 4 * 3);
        for c in 0..4u16 {
            assert!(va.iter().any(|&i| labels[i] == c));
        }
        assert_eq!((tr.clone(), va.clone()), stratified_split(&labels, 0.1, 3));
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig::new(ArchConfig::new(Arch::Fcn, 8, None));
        assert!(base.validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..base.clone() },
            TrainConfig { s: 1.0, ..base.clone() },
            TrainConfig { lambda: -0.1, ..base.clone() },
            TrainConfig { epochs: 0, ..base.clone() },
            TrainConfig { val_fraction: 1.0, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn small_data() -> crate::data::SyntheticData {
        synth_dataset(&SynthConfig::new(16, 12, 4.0, 2)).unwrap()
    }

    #[test]
    fn single_class_is_rejected() {
        let data = small_data();
        let rows: Vec<usize> = (0..data.train.count()).filter(|&i| data.train.a.labels[i] == 0).collect();
        let only = data.train.a.subset(&rows);
        let cfg = TrainConfig::new(ArchConfig::new(Arch::Fcn, 16, None));
        assert!(matches!(
            train::<f64>(&cfg, &only, None),
            Err(crate::error::Error::Validation(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let data = small_data();
        let cfg = TrainConfig::new(ArchConfig::new(Arch::Fcn, 17, None));
        assert!(matches!(
            train::<f64>(&cfg, &data.train.a, None),
            Err(crate::error::Error::Dimension(_))
        ));
        let cfg = TrainConfig::new(ArchConfig::new(Arch::Coffe, 16, Some(16)));
        assert!(train::<f64>(&cfg, &data.train.a, None).is_err());
    }

    #[test]
    fn short_run_is_deterministic_and_consistent() {
        let data = small_data();
        let mut cfg = TrainConfig::new(ArchConfig::new(Arch::Coffe, 16, Some(16)));
        cfg.epochs = 3;
        cfg.seed = 5;
        let (p1, r1) = train::<f64>(&cfg, &data.train.a, Some(&data.train.b)).unwrap();
        let (p2, r2) = train::<f64>(&cfg, &data.train.a, Some(&data.train.b)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.train_loss, r2.train_loss);
        assert!(r1.best_epoch <= r1.stopped_epoch && r1.stopped_epoch <= cfg.epochs);
        for l in r1.train_loss.iter().chain(&r1.val_loss) {
            assert!(l.cd >= 0.0);
        }
        let m1 = evaluate(&p1, &data.test.a, Some(&data.test.b)).unwrap();
        let m2 = evaluate(&p1, &data.test.a, Some(&data.test.b)).unwrap();
        assert_eq!(m1, m2);
        let mean: f64 = m1.eer_per_class.iter().flatten().sum::<f64>() / 8.0;
        assert!((m1.eer_avg.unwrap() - mean).abs() <= 1e-12);
    }

    #[test]
    fn zero_lambda_coffe_tracks_concat() {
        let data = small_data();
        let mut coffe = TrainConfig::new(ArchConfig::new(Arch::Coffe, 16, Some(16)));
        coffe.epochs = 2;
        coffe.lambda = 0.0;
        let concat = TrainConfig {
            arch: ArchConfig::new(Arch::Concat, 16, Some(16)),
            ..coffe.clone()
        };
        let (pa, ra) = train::<f64>(&coffe, &data.train.a, Some(&data.train.b)).unwrap();
        let (pb, rb) = train::<f64>(&concat, &data.train.a, Some(&data.train.b)).unwrap();
        let totals = |r: &TrainReport| r.train_loss.iter().map(|l| l.total).collect::<Vec<_>>();
        assert_eq!(totals(&ra), totals(&rb));
        assert_eq!(pa.layers(), pb.layers());
    }

    #[test]
    fn restored_params_come_from_best_epoch() {
        let data = small_data();
        let mut cfg = TrainConfig::new(ArchConfig::new(Arch::Fcn, 16, None));
        cfg.epochs = 8;
        cfg.lr = 0.05;
        cfg.patience = 2;
        let (p, r) = train::<f64>(&cfg, &data.train.a, None).unwrap();
        let best_val = r.val_loss[r.best_epoch - 1].total;
        assert!(r.val_loss.iter().all(|l| l.total >= best_val - cfg.min_delta));
        // re-evaluating the restored parameters reproduces the best validation loss
        let views = Views::new(&p.config, &data.train.a, None).unwrap();
        let (_, val_rows) = stratified_split(&views.a.labels, cfg.val_fraction, cfg.seed);
        let again = mean_loss(&p, &views, &val_rows, 0.0).unwrap();
        assert_eq!(again.total, best_val);
    }
}
