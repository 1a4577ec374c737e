//! Masking, Adam with per-epoch exponential decay, and the epoch loop.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    batch_loss, loss_components, Aetn, BatchItem, Checkpoint, LossOptions, LossTerms, MaskedPositions,
    ModelConfig, OutputHead, LAMBDA_REG,
};
use crate::record::{Behavior, RecordShape, UserRecord};
pub use crate::seed::stream_seed;

/// Apps hidden per sequence when the sequence has enough real operations.
pub const MASKED_PER_SEQUENCE: usize = 3;

/// Epoch tag of the fixed plan used to score validation `L_mask`.
pub const VALIDATION_EPOCH: u64 = u64::MAX;

/// Masked positions for one record: `min(3, n_real)` per sequence, drawn
/// uniformly without replacement among real positions.
pub fn mask_record(record: &UserRecord, seed: u64, epoch: u64) -> MaskedPositions {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch, "mask", &record.user_id));
    let mut draw = |b: Behavior| {
        let real = record.real_positions(b);
        let k = MASKED_PER_SEQUENCE.min(real.len());
        let mut picked: Vec<usize> = sample(&mut rng, real.len(), k)
            .into_iter()
            .map(|i| real.start + i)
            .collect();
        picked.sort_unstable();
        picked
    };
    let install = draw(Behavior::Install);
    let uninstall = draw(Behavior::Uninstall);
    MaskedPositions { install, uninstall }
}

/// The masking plan of an epoch, one entry per record.
pub fn make_mask_plan(records: &[UserRecord], seed: u64, epoch: u64) -> Vec<MaskedPositions> {
    records.iter().map(|r| mask_record(r, seed, epoch)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are kept per stored parameter, so a tied
/// matrix has exactly one set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Missing gradients count as zero. A non-finite
    /// gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.get(*id).name.clone()));
            }
            if g.shape() != store.value(*id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} for `{}`", g.shape(), store.get(*id).name),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let i = id.index();
            let g = grads.get(&id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let value = store.value_mut(id);
            for k in 0..value.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                value.data_mut()[k] -= lr * (mk / c1) / ((vk / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Multiplier applied to the learning rate at each epoch boundary.
    pub decay: f64,
    pub lambda_reg: f64,
    pub seed: u64,
    /// Share of records held out for validation. With zero, validation is
    /// scored on the training records.
    pub validation_fraction: f64,
    pub use_aux: bool,
    pub workers: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 10,
            base_lr: 1e-4,
            decay: 0.8,
            lambda_reg: LAMBDA_REG,
            seed: 0,
            validation_fraction: 0.1,
            use_aux: true,
            workers: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Invalid(format!("decay {} outside (0, 1]", self.decay)));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Invalid(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0) {
            return Err(Error::Invalid(format!("lambda_reg {} must be >= 0", self.lambda_reg)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Invalid(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi(epoch as i32)
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda_reg: self.lambda_reg,
            use_aux: self.use_aux,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub main: f64,
    pub aux: f64,
    pub mask: f64,
    pub reg: f64,
    pub val_main_plus_mask: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tlr\tL_main\tL_aux\tL_mask\tL_reg\tval_main_plus_mask";

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("metrics line has {} fields: `{line}`", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number `{s}` in metrics line")))
        };
        Ok(EpochLog {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad epoch `{}`", f[0])))?,
            lr: num(f[1])?,
            main: num(f[2])?,
            aux: num(f[3])?,
            mask: num(f[4])?,
            reg: num(f[5])?,
            val_main_plus_mask: num(f[6])?,
        })
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:e}\t{:.9}\t{:.9}\t{:.9}\t{:.9e}\t{:.9}",
            self.epoch, self.lr, self.main, self.aux, self.mask, self.reg, self.val_main_plus_mask
        )
    }
}

/// Read a metrics log, skipping the header and `#` comments.
pub fn parse_metrics(text: &str) -> Result<Vec<EpochLog>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#') && !l.starts_with("epoch"))
        .map(EpochLog::parse)
        .collect()
}

/// Records split into training and validation parts.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<UserRecord>,
    pub validation: Vec<UserRecord>,
}

pub fn split_records(records: &[UserRecord], fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, "split", "")));
    let n_val = (records.len() as f64 * fraction).floor() as usize;
    let n_val = n_val.min(records.len().saturating_sub(1));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Split {
        train: train.iter().map(|&i| records[i].clone()).collect(),
        validation: val.iter().map(|&i| records[i].clone()).collect(),
    }
}

/// Validation `L_main` (nothing masked) plus `L_mask` (fixed plan), both
/// without dropout.
pub fn validation_metric(model: &Aetn, records: &[UserRecord], cfg: &TrainConfig) -> Result<f64> {
    let opts = cfg.loss_options();
    let none = MaskedPositions::default();
    let plan = make_mask_plan(records, cfg.seed, VALIDATION_EPOCH);
    let mut main = 0.0;
    let mut mask = 0.0;
    let mut n = 0.0;
    let mut n_mask = 0.0;
    for (chunk, plan) in records.chunks(cfg.batch_size).zip(plan.chunks(cfg.batch_size)) {
        let plain: Vec<BatchItem> = chunk
            .iter()
            .map(|r| BatchItem {
                record: r,
                masked: &none,
                dropout_seed: 0,
            })
            .collect();
        let out = batch_loss(model, &plain, &opts, false, false, cfg.workers)?;
        main += out.terms.main * chunk.len() as f64;
        n += chunk.len() as f64;
        let masked: Vec<BatchItem> = chunk
            .iter()
            .zip(plan)
            .map(|(r, p)| BatchItem {
                record: r,
                masked: p,
                dropout_seed: 0,
            })
            .collect();
        let k: usize = plan.iter().map(|p| p.len()).sum();
        if k > 0 {
            let out = batch_loss(model, &masked, &opts, false, false, cfg.workers)?;
            mask += out.terms.mask * k as f64;
            n_mask += k as f64;
        }
    }
    Ok(main / n.max(1.0) + mask / n_mask.max(1.0))
}

/// Check that every output head reads the shared app matrix.
pub fn check_tying(model: &Aetn) -> Result<()> {
    let expect = model.shared_app_matrix().transpose();
    for head in OutputHead::ALL {
        if model.head_weight(head) != expect {
            return Err(Error::Invalid(format!("{head:?} head weight drifted from the shared app matrix")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last completed epoch.
    pub model: Aetn,
    /// Checkpoint with the lowest validation metric.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Set when training stopped because the loss stopped being finite.
    pub diverged_at: Option<usize>,
}

/// Train in place from `model`'s current parameters. `on_epoch` sees every
/// log line as soon as it is produced.
pub fn train(
    model: Aetn,
    records: &[UserRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    train_until(model, records, cfg, |e, _| {
        on_epoch(e);
        ControlFlow::Continue(())
    })
}

/// As [`train`], but `on_epoch` also sees the current model and may stop
/// training early by returning `Break`.
pub fn train_until(
    model: Aetn,
    records: &[UserRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Aetn) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Invalid("no training records".into()));
    }
    for r in records {
        model.check_record(r)?;
    }
    let split = split_records(records, cfg.validation_fraction, cfg.seed);
    let validation = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };
    let mut model = model;
    let mut adam = Adam::new(model.params(), cfg.adam);
    let opts = cfg.loss_options();
    let mut log = Vec::new();
    let mut best = Checkpoint::from_model(&model)?;
    let mut best_epoch = 0;
    let mut best_metric = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let plan = make_mask_plan(&split.train, cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, "shuffle", "")));
        let mut sum = LossTerms::default();
        let mut diverged = false;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<BatchItem> = batch
                .iter()
                .map(|&i| BatchItem {
                    record: &split.train[i],
                    masked: &plan[i],
                    dropout_seed: stream_seed(cfg.seed, epoch as u64, "dropout", &split.train[i].user_id),
                })
                .collect();
            let out = match batch_loss(&model, &items, &opts, true, true, cfg.workers) {
                Ok(o) => o,
                Err(Error::NonFiniteGradient(_) | Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !out.terms.total().is_finite() {
                diverged = true;
                break;
            }
            let w = batch.len() as f64;
            sum.main += out.terms.main * w;
            sum.aux += out.terms.aux * w;
            sum.mask += out.terms.mask * w;
            let grads = out.grads.expect("gradients requested");
            match adam.step(model.params_mut(), &grads, lr) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let val = if diverged {
            f64::NAN
        } else {
            match validation_metric(&model, validation, cfg) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e),
            }
        };
        if diverged || !val.is_finite() {
            return Ok(TrainOutcome {
                model,
                best,
                best_epoch,
                log,
                diverged_at: Some(epoch),
            });
        }
        check_tying(&model)?;
        let n = split.train.len() as f64;
        let entry = EpochLog {
            epoch,
            lr,
            main: sum.main / n,
            aux: sum.aux / n,
            mask: sum.mask / n,
            reg: cfg.lambda_reg * model.params().trainable_sum_sq(),
            val_main_plus_mask: val,
        };
        let flow = on_epoch(&entry, &model);
        log.push(entry);
        if val < best_metric {
            best_metric = val;
            best_epoch = epoch;
            best = Checkpoint::from_model(&model)?;
        }
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        log,
        diverged_at: None,
    })
}

/// The small network used for whole-loss gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        num_apps: 30,
        num_categories: 5,
        d_model: 16,
        d_ffn: 32,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 1,
        d_emb: 8,
        seq_len: 6,
        num_dates: 20,
        ae_mid_dim: 8,
        ..ModelConfig::desk(30, 5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSettings {
    pub n_records: usize,
    pub seed: u64,
    pub eps: f64,
    /// Coordinates sampled per parameter tensor.
    pub per_param: usize,
    pub lambda_reg: f64,
    /// Half-width of the uniform noise added to every parameter, so biases
    /// and norm gains are not at their special initial values.
    pub jitter: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            n_records: 3,
            seed: 0,
            eps: 1e-5,
            per_param: 6,
            lambda_reg: 1e-3,
            jitter: 0.3,
        }
    }
}

/// Central differences of the joint loss (dropout off, masking on) against
/// the tape gradients, on random records and a jittered random model.
pub fn joint_gradcheck(config: &ModelConfig, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(settings.seed, 0, "gradcheck", ""));
    let cats = (0..config.num_apps)
        .map(|m| (m % config.num_categories) as u32)
        .collect();
    let mut model = Aetn::new(config.clone(), cats, &mut rng)?;
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += rng.gen_range(-settings.jitter..=settings.jitter);
        }
    }
    let shape = RecordShape {
        num_apps: config.num_apps,
        seq_len: config.seq_len,
        num_dates: config.num_dates,
    };
    let records: Vec<UserRecord> = (0..settings.n_records)
        .map(|i| UserRecord::random(format!("g{i}"), &shape, &mut rng))
        .collect();
    let plan = make_mask_plan(&records, settings.seed, 0);
    let items: Vec<BatchItem> = records
        .iter()
        .zip(&plan)
        .map(|(record, masked)| BatchItem {
            record,
            masked,
            dropout_seed: 0,
        })
        .collect();
    let opts = LossOptions {
        lambda_reg: settings.lambda_reg,
        use_aux: true,
    };
    let grads = batch_loss(&model, &items, &opts, false, true, 1)?
        .grads
        .expect("gradients requested");
    let mut store = model.params().clone();
    let mut probe = model.clone();
    grad_check(
        &mut store,
        &grads,
        |s: &ParamStore| {
            probe.params_mut().copy_values_from(s)?;
            loss_components(&probe, &items, &opts)
        },
        settings.eps,
        settings.per_param,
        &mut rng,
    )
}
