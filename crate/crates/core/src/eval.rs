//! Embedding evaluation: AUC, exact nearest neighbours, app-overlap of
//! neighbour pairs, a denoising-autoencoder baseline, a logistic probe and
//! convergence-curve comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{ParamId, ParamStore, Reduction, Tape, Tensor};
use crate::catalog::FIRST_APP;
use crate::error::{Error, Result};
use crate::model::{Aetn, MaskedPositions};
use crate::record::{Behavior, UserRecord};
use crate::seed::stream_seed;
use crate::train::{Adam, AdamConfig, EpochLog};

/// Area under the ROC curve by the rank statistic, ties sharing their
/// average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One embedded user.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub user_id: String,
    pub vector: Vec<f64>,
}

/// For each query, the pool user at least Euclidean distance, skipping the
/// pool entry with the query's own id. Ties go to the smallest user id.
pub fn nearest_neighbor(queries: &[Embedded], pool: &[Embedded]) -> Result<Vec<String>> {
    let dim = queries.first().or(pool.first()).map_or(0, |e| e.vector.len());
    if let Some(bad) = queries.iter().chain(pool).find(|e| e.vector.len() != dim) {
        return Err(Error::shape(
            "nearest_neighbor",
            format!("`{}` has dimension {}, expected {dim}", bad.user_id, bad.vector.len()),
        ));
    }
    queries
        .iter()
        .map(|q| {
            let mut best: Option<(f64, &str)> = None;
            for p in pool.iter().filter(|p| p.user_id != q.user_id) {
                let d = sq_dist(&q.vector, &p.vector);
                let better = match best {
                    None => true,
                    Some((bd, bid)) => d < bd || (d == bd && p.user_id.as_str() < bid),
                };
                if better {
                    best = Some((d, &p.user_id));
                }
            }
            best.map(|(_, id)| id.to_string())
                .ok_or_else(|| Error::Invalid(format!("empty pool for query `{}`", q.user_id)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapBehavior {
    Retention,
    Install,
    Uninstall,
}

impl OverlapBehavior {
    pub const ALL: [OverlapBehavior; 3] = [
        OverlapBehavior::Retention,
        OverlapBehavior::Install,
        OverlapBehavior::Uninstall,
    ];
}

/// Apps of one behaviour as a set; dates and repeats are dropped.
pub fn app_set(record: &UserRecord, behavior: OverlapBehavior) -> BTreeSet<u32> {
    match behavior {
        OverlapBehavior::Retention => record.retention.iter().copied().collect(),
        OverlapBehavior::Install => record.apps(Behavior::Install)[record.real_positions(Behavior::Install)]
            .iter()
            .copied()
            .collect(),
        OverlapBehavior::Uninstall => record.apps(Behavior::Uninstall)
            [record.real_positions(Behavior::Uninstall)]
        .iter()
        .copied()
        .collect(),
    }
}

/// `|U ∩ V| / |U|`, zero when `U` is empty.
pub fn overlap_rate(u: &BTreeSet<u32>, v: &BTreeSet<u32>) -> f64 {
    if u.is_empty() {
        return 0.0;
    }
    u.intersection(v).count() as f64 / u.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OverlapRates {
    pub retention: f64,
    pub install: f64,
    pub uninstall: f64,
}

impl OverlapRates {
    pub fn get(&self, b: OverlapBehavior) -> f64 {
        match b {
            OverlapBehavior::Retention => self.retention,
            OverlapBehavior::Install => self.install,
            OverlapBehavior::Uninstall => self.uninstall,
        }
    }
}

/// Sample `n_query` queries and an `n_pool` pool (both without
/// replacement, from `embeddings`), pair every query with its nearest pool
/// neighbour and average the overlap rate of each behaviour.
pub fn neighbor_overlap_study(
    embeddings: &[Embedded],
    records: &[UserRecord],
    n_query: usize,
    n_pool: usize,
    seed: u64,
) -> Result<OverlapRates> {
    let by_id: BTreeMap<&str, &UserRecord> = records.iter().map(|r| (r.user_id.as_str(), r)).collect();
    let n = embeddings.len();
    if n_query > n || n_pool > n {
        return Err(Error::Invalid(format!(
            "{n_query} queries / {n_pool} pool from {n} embeddings"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, "overlap", ""));
    let queries: Vec<Embedded> = sample(&mut rng, n, n_query)
        .into_iter()
        .map(|i| embeddings[i].clone())
        .collect();
    let pool: Vec<Embedded> = sample(&mut rng, n, n_pool)
        .into_iter()
        .map(|i| embeddings[i].clone())
        .collect();
    let neighbors = nearest_neighbor(&queries, &pool)?;
    let record = |id: &str| {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no record for `{id}`")))
    };
    let mut sums = [0.0; 3];
    for (q, v) in queries.iter().zip(&neighbors) {
        let (ru, rv) = (record(&q.user_id)?, record(v)?);
        for (k, b) in OverlapBehavior::ALL.iter().enumerate() {
            sums[k] += overlap_rate(&app_set(ru, *b), &app_set(rv, *b));
        }
    }
    let m = queries.len().max(1) as f64;
    Ok(OverlapRates {
        retention: sums[0] / m,
        install: sums[1] / m,
        uninstall: sums[2] / m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeConfig {
    pub num_apps: usize,
    pub d_model: usize,
    /// Width of the middle layer, which is the embedding.
    pub d_emb: usize,
    pub dropout_input: f64,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay: f64,
    pub seed: u64,
}

/// Denoising autoencoder on retention: `x / |x|`, input dropout, then
/// leaky layers of widths `d_model, d_emb, d_model` and a sigmoid output
/// through the transposed first-layer matrix.
#[derive(Debug, Clone)]
pub struct Dae {
    pub config: DaeConfig,
    store: ParamStore,
    ids: [ParamId; 7],
}

struct DaeOut {
    logits: crate::autodiff::Var,
    embedding: crate::autodiff::Var,
}

impl Dae {
    pub fn new(config: DaeConfig, seed: u64) -> Result<Self> {
        if config.num_apps == 0 || config.d_model == 0 || config.d_emb == 0 {
            return Err(Error::Invalid("DAE dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, "dae_init", ""));
        let mut store = ParamStore::new();
        let (m, d, e) = (config.num_apps, config.d_model, config.d_emb);
        let ids = [
            store.add("dae.app", Tensor::randn(m, d, 0.02, &mut rng), true),
            store.add("dae.b1", Tensor::zeros(1, d), true),
            store.add("dae.w2", Tensor::xavier(d, e, &mut rng), true),
            store.add("dae.b2", Tensor::zeros(1, e), true),
            store.add("dae.w3", Tensor::xavier(e, d, &mut rng), true),
            store.add("dae.b3", Tensor::zeros(1, d), true),
            store.add("dae.b4", Tensor::zeros(1, m), true),
        ];
        Ok(Dae { config, store, ids })
    }

    fn forward<R: rand::Rng + ?Sized>(&self, tape: &mut Tape, x: &[f64], training: bool, rng: &mut R) -> Result<DaeOut> {
        let c = &self.config;
        let v: Vec<_> = self.ids.iter().map(|&id| tape.param(&self.store, id)).collect();
        let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let x0: Vec<f64> = x.iter().map(|a| if norm > 0.0 { a / norm } else { 0.0 }).collect();
        let x0 = tape.constant(Tensor::row_vector(x0));
        let x0 = tape.dropout(x0, c.dropout_input, training, rng)?;
        let h = tape.matmul(x0, v[0])?;
        let h = tape.add_row(h, v[1])?;
        let h = tape.leaky_relu(h, c.leaky_slope)?;
        let h = tape.matmul(h, v[2])?;
        let h = tape.add_row(h, v[3])?;
        let embedding = tape.leaky_relu(h, c.leaky_slope)?;
        let h = tape.matmul(embedding, v[4])?;
        let h = tape.add_row(h, v[5])?;
        let h = tape.leaky_relu(h, c.leaky_slope)?;
        let h = tape.matmul_t(h, v[0])?;
        let logits = tape.add_row(h, v[6])?;
        Ok(DaeOut { logits, embedding })
    }

    pub fn embed(&self, record: &UserRecord) -> Result<Vec<f64>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &record.retention_multi_hot(self.config.num_apps), false, &mut rng)?;
        Ok(tape.value(out.embedding).data().to_vec())
    }

    /// Reconstruction probabilities, eval mode.
    pub fn reconstruct(&self, record: &UserRecord) -> Result<Vec<f64>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &record.retention_multi_hot(self.config.num_apps), false, &mut rng)?;
        let p = tape.sigmoid(out.logits)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Mean sigmoid cross-entropy of the reconstruction, eval mode.
    pub fn loss(&self, records: &[UserRecord]) -> Result<f64> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut total = 0.0;
        for r in records {
            let mut tape = Tape::new();
            let x = r.retention_multi_hot(self.config.num_apps);
            let out = self.forward(&mut tape, &x, false, &mut rng)?;
            let l = tape.sigmoid_ce(out.logits, &Tensor::row_vector(x), Reduction::Mean)?;
            total += tape.value(l).item();
        }
        Ok(total / records.len().max(1) as f64)
    }

    /// Train with Adam on mean sigmoid cross-entropy; returns the mean
    /// training loss per epoch.
    pub fn train(&mut self, records: &[UserRecord], cfg: &DaeTrainConfig) -> Result<Vec<f64>> {
        if records.is_empty() || cfg.batch_size == 0 {
            return Err(Error::Invalid("DAE training needs records and batch_size >= 1".into()));
        }
        let mut adam = Adam::new(&self.store, AdamConfig::default());
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let lr = cfg.base_lr * cfg.decay.powi(epoch as i32);
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, "dae_shuffle", "")));
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
                for &i in batch {
                    let r = &records[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, "dae_dropout", &r.user_id));
                    let mut tape = Tape::new();
                    let x = r.retention_multi_hot(self.config.num_apps);
                    let out = self.forward(&mut tape, &x, true, &mut rng)?;
                    let l = tape.sigmoid_ce(out.logits, &Tensor::row_vector(x), Reduction::Mean)?;
                    epoch_loss += tape.value(l).item();
                    let l = tape.scale(l, 1.0 / batch.len() as f64)?;
                    for (id, g) in tape.backward(l)?.into_params() {
                        match grads.get_mut(&id) {
                            Some(a) => a.add_assign(&g),
                            None => {
                                grads.insert(id, g);
                            }
                        }
                    }
                }
                adam.step(&mut self.store, &grads, lr)?;
            }
            curve.push(epoch_loss / records.len() as f64);
        }
        Ok(curve)
    }
}

/// Test AUC of a logistic-regression probe, averaged over runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub mean_auc: f64,
    pub run_aucs: Vec<f64>,
}

fn standardize(train: &[Vec<f64>], all: &[&Vec<f64>]) -> Vec<Vec<f64>> {
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    all.iter()
        .map(|x| (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect())
        .collect()
}

/// L2-regularised logistic regression by full-batch gradient descent.
fn fit_logistic(x: &[Vec<f64>], y: &[bool], l2: f64, iters: usize) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z = b + xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = crate::autodiff::sigmoid(z) - if yi { 1.0 } else { 0.0 };
            for (g, a) in gw.iter_mut().zip(xi) {
                *g += err * a;
            }
            gb += err;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * (g / n + l2 * *wj);
        }
        b -= lr * gb / n;
    }
    (w, b)
}

fn score(x: &[Vec<f64>], w: &[f64], b: f64) -> Vec<f64> {
    x.iter()
        .map(|xi| b + xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Split 3:1:1 into train/validation/test, pick the L2 strength on the
/// validation part, report test AUC; repeated `runs` times with fresh
/// splits.
pub fn downstream_probe(features: &[Vec<f64>], labels: &[bool], runs: usize, seed: u64) -> Result<ProbeReport> {
    if features.len() != labels.len() {
        return Err(Error::Invalid("features and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Invalid("probe target has a single class".into()));
    }
    if features.len() < 10 {
        return Err(Error::Invalid("probe needs at least 10 examples".into()));
    }
    let mut run_aucs = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, run as u64, "probe", ""));
        // Stratified so every part holds both classes.
        let mut parts: [Vec<usize>; 3] = Default::default();
        for class in [true, false] {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let n = idx.len();
            let a = n * 3 / 5;
            let b = n * 4 / 5;
            parts[0].extend_from_slice(&idx[..a]);
            parts[1].extend_from_slice(&idx[a..b]);
            parts[2].extend_from_slice(&idx[b..]);
        }
        let pick = |ix: &[usize]| -> (Vec<&Vec<f64>>, Vec<bool>) {
            (ix.iter().map(|&i| &features[i]).collect(), ix.iter().map(|&i| labels[i]).collect())
        };
        let (tr_x, tr_y) = pick(&parts[0]);
        let (va_x, va_y) = pick(&parts[1]);
        let (te_x, te_y) = pick(&parts[2]);
        let train_raw: Vec<Vec<f64>> = tr_x.iter().map(|v| (*v).clone()).collect();
        let tr = standardize(&train_raw, &tr_x);
        let va = standardize(&train_raw, &va_x);
        let te = standardize(&train_raw, &te_x);
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for l2 in [1e-4, 1e-2, 1e-1, 1.0] {
            let (w, b) = fit_logistic(&tr, &tr_y, l2, 300);
            let v = auc(&score(&va, &w, b), &va_y)?;
            if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                best = Some((v, w, b));
            }
        }
        let (_, w, b) = best.expect("grid is non-empty");
        run_aucs.push(auc(&score(&te, &w, b), &te_y)?);
    }
    let mean_auc = run_aucs.iter().sum::<f64>() / run_aucs.len().max(1) as f64;
    Ok(ProbeReport { mean_auc, run_aucs })
}

/// First epoch whose validation metric is at or below `threshold`.
pub fn epochs_to_threshold(log: &[EpochLog], threshold: f64) -> Option<usize> {
    log.iter()
        .find(|e| e.val_main_plus_mask <= threshold)
        .map(|e| e.epoch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveWinner {
    First,
    Second,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveComparison {
    pub threshold: f64,
    /// `None` when the curve never reaches the threshold.
    pub first_epochs: Option<usize>,
    pub second_epochs: Option<usize>,
    pub first_final: f64,
    pub second_final: f64,
    /// Faster to the threshold; ties broken by the lower final value.
    pub winner: CurveWinner,
}

pub fn curve_compare(first: &[EpochLog], second: &[EpochLog], threshold: f64) -> Result<CurveComparison> {
    let last = |l: &[EpochLog]| {
        l.last()
            .map(|e| e.val_main_plus_mask)
            .ok_or_else(|| Error::Invalid("empty metrics log".into()))
    };
    let (first_final, second_final) = (last(first)?, last(second)?);
    let a = epochs_to_threshold(first, threshold);
    let b = epochs_to_threshold(second, threshold);
    let key = |e: Option<usize>| e.unwrap_or(usize::MAX);
    let winner = match key(a).cmp(&key(b)) {
        std::cmp::Ordering::Less => CurveWinner::First,
        std::cmp::Ordering::Greater => CurveWinner::Second,
        std::cmp::Ordering::Equal => match first_final.total_cmp(&second_final) {
            std::cmp::Ordering::Less => CurveWinner::First,
            std::cmp::Ordering::Greater => CurveWinner::Second,
            std::cmp::Ordering::Equal => CurveWinner::Tie,
        },
    };
    Ok(CurveComparison {
        threshold,
        first_epochs: a,
        second_epochs: b,
        first_final,
        second_final,
        winner,
    })
}

/// Results for one embedding set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingEval {
    pub name: String,
    pub overlap: Option<OverlapRates>,
    pub probe_auc: Option<f64>,
    /// Share of neighbour pairs with the same label.
    pub neighbor_purity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub embeddings: Vec<EmbeddingEval>,
    pub curves: Vec<CurveComparison>,
}

impl EvalReport {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.embeddings {
            let mut v = serde_json::to_value(e).expect("plain data");
            v["record"] = "embedding".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        for c in &self.curves {
            let mut v = serde_json::to_value(c).expect("plain data");
            v["record"] = "curve".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.embeddings {
            writeln!(f, "[{}]", e.name)?;
            if let Some(o) = e.overlap {
                writeln!(
                    f,
                    "  neighbour overlap: retention {:.4}  install {:.4}  uninstall {:.4}",
                    o.retention, o.install, o.uninstall
                )?;
            }
            if let Some(a) = e.probe_auc {
                writeln!(f, "  probe AUC: {a:.4}")?;
            }
            if let Some(p) = e.neighbor_purity {
                writeln!(f, "  neighbour label purity: {p:.4}")?;
            }
        }
        for c in &self.curves {
            let show = |e: Option<usize>| e.map_or("not reached".to_string(), |v| v.to_string());
            writeln!(
                f,
                "curve threshold {:.4}: first {} (final {:.4}), second {} (final {:.4}), winner {:?}",
                c.threshold,
                show(c.first_epochs),
                c.first_final,
                show(c.second_epochs),
                c.second_final,
                c.winner
            )?;
        }
        Ok(())
    }
}

/// Share of queries whose nearest neighbour carries the same label.
pub fn neighbor_purity(embeddings: &[Embedded], labels: &BTreeMap<String, u32>) -> Result<f64> {
    let nn = nearest_neighbor(embeddings, embeddings)?;
    let same = embeddings
        .iter()
        .zip(&nn)
        .filter(|(q, v)| labels.get(&q.user_id) == labels.get(*v))
        .count();
    Ok(same as f64 / embeddings.len().max(1) as f64)
}

/// How well a model reproduces its own training records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Memorization {
    /// Mean per-user AUC of the retention head against the input retention.
    pub retention_auc: f64,
    /// Top-1 accuracy of the decoder over real positions.
    pub decoder_top1: f64,
    /// Top-1 accuracy of the masked head under `plan`.
    pub masked_top1: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Users whose retention is empty or full are skipped for the AUC.
pub fn memorization(model: &Aetn, records: &[UserRecord], plan: &[MaskedPositions]) -> Result<Memorization> {
    if records.len() != plan.len() {
        return Err(Error::Invalid("one mask plan entry per record".into()));
    }
    let m = model.config().num_apps;
    let (mut auc_sum, mut auc_n) = (0.0, 0usize);
    let (mut dec_hit, mut dec_n, mut mask_hit, mut mask_n) = (0usize, 0usize, 0usize, 0usize);
    for (r, masked) in records.iter().zip(plan) {
        let p = model.predict(r, masked)?;
        let labels: Vec<bool> = r.retention_multi_hot(m).iter().map(|&v| v > 0.0).collect();
        if let Ok(a) = auc(&p.retention, &labels) {
            auc_sum += a;
            auc_n += 1;
        }
        let targets: Vec<u32> = [Behavior::Install, Behavior::Uninstall]
            .iter()
            .flat_map(|&b| r.apps(b)[r.real_positions(b)].to_vec())
            .collect();
        for (k, &t) in targets.iter().enumerate() {
            dec_hit += (argmax(p.decoder.row(k)) as u32 + FIRST_APP == t) as usize;
            dec_n += 1;
        }
        let masked_targets: Vec<u32> = [Behavior::Install, Behavior::Uninstall]
            .iter()
            .flat_map(|&b| masked.get(b).iter().map(move |&i| r.apps(b)[i]))
            .collect();
        for (k, &t) in masked_targets.iter().enumerate() {
            mask_hit += (argmax(p.masked.row(k)) as u32 + FIRST_APP == t) as usize;
            mask_n += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Memorization {
        retention_auc: if auc_n == 0 { 0.0 } else { auc_sum / auc_n as f64 },
        decoder_top1: ratio(dec_hit, dec_n),
        masked_top1: ratio(mask_hit, mask_n),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::catalog::PAD;

    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_hand_example() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4, 0.7];
        let l = [false, false, true, true, true, false];
        // positives 0.35, 0.8, 0.4 vs negatives 0.1, 0.4, 0.7:
        // 0.35 beats 1; 0.8 beats 3; 0.4 beats 1 and ties 1 -> 5.5 / 9
        assert!((auc(&s, &l).unwrap() - 5.5 / 9.0).abs() < 1e-15);
        assert_eq!(auc(&s, &l).unwrap(), mann_whitney(&s, &l));
    }

    #[test]
    fn auc_extremes_and_errors() {
        assert_eq!(auc(&[1.0, 2.0, 3.0], &[false, true, true]).unwrap(), 1.0);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..2000).map(|_| rng.gen()).collect();
        let l: Vec<bool> = (0..2000).map(|_| rng.gen()).collect();
        assert!((auc(&s, &l).unwrap() - 0.5).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(
            pts in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let s: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
            let l: Vec<bool> = pts.iter().map(|p| p.1).collect();
            prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
            prop_assert!((auc(&s, &l).unwrap() - mann_whitney(&s, &l)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|v| (v * 0.7).exp()).collect();
            prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
        }
    }

    fn emb(id: &str, v: &[f64]) -> Embedded {
        Embedded {
            user_id: id.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn nearest_neighbor_small_cases() {
        let pool = [emb("a", &[0.0, 0.0]), emb("b", &[3.0, 0.0]), emb("c", &[0.0, 0.0])];
        assert_eq!(nearest_neighbor(&[emb("a", &[0.0, 0.0])], &pool).unwrap(), vec!["c"]);
        assert_eq!(nearest_neighbor(&[emb("q", &[2.0, 0.0])], &pool[..2]).unwrap(), vec!["b"]);
        // a and c tie at distance 0 from q: smaller id wins
        assert_eq!(nearest_neighbor(&[emb("q", &[0.0, 0.0])], &pool).unwrap(), vec!["a"]);
        assert!(nearest_neighbor(&[emb("a", &[0.0, 0.0])], &pool[..1]).is_err());
        assert!(nearest_neighbor(&[emb("q", &[0.0])], &pool).is_err());
    }

    #[test]
    fn nearest_neighbor_matches_pairwise_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool: Vec<Embedded> = (0..1000)
            .map(|i| emb(&format!("p{i:04}"), &[rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        let queries: Vec<Embedded> = pool.iter().step_by(37).cloned().collect();
        let got = nearest_neighbor(&queries, &pool).unwrap();
        for (q, g) in queries.iter().zip(&got) {
            let mut table: Vec<(f64, &str)> = pool
                .iter()
                .filter(|p| p.user_id != q.user_id)
                .map(|p| {
                    let d: f64 = q.vector.iter().zip(&p.vector).map(|(a, b)| (a - b).powi(2)).sum();
                    (d.sqrt(), p.user_id.as_str())
                })
                .collect();
            table.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
            assert_eq!(g, table[0].1);
        }
    }

    fn rec(id: &str, retention: &[u32], installs: &[u32]) -> UserRecord {
        let mut r = UserRecord::empty(id, 4);
        r.retention = retention.to_vec();
        let n = installs.len();
        for (k, &a) in installs.iter().enumerate() {
            r.install_apps[4 - n + k] = a;
        }
        r.n_install = n as u32;
        r
    }

    #[test]
    fn overlap_hand_cases() {
        let u = rec("u", &[2, 3, 4], &[2, 2, 3]);
        let v = rec("v", &[3, 4, 5], &[3]);
        let set = |r: &UserRecord, b| app_set(r, b);
        assert_eq!(overlap_rate(&set(&u, OverlapBehavior::Retention), &set(&u, OverlapBehavior::Retention)), 1.0);
        assert!((overlap_rate(&set(&u, OverlapBehavior::Retention), &set(&v, OverlapBehavior::Retention)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap_rate(&set(&u, OverlapBehavior::Install), &set(&v, OverlapBehavior::Install)), 0.5);
        assert_eq!(overlap_rate(&set(&u, OverlapBehavior::Uninstall), &set(&v, OverlapBehavior::Uninstall)), 0.0);
        assert!(!set(&u, OverlapBehavior::Install).contains(&PAD));
    }

    #[test]
    fn overlap_study_three_users() {
        let recs = vec![
            rec("a", &[2, 3], &[4]),
            rec("b", &[2, 5], &[4, 6]),
            rec("c", &[7], &[]),
        ];
        let embs = vec![emb("a", &[0.0]), emb("b", &[1.0]), emb("c", &[5.0])];
        let r = neighbor_overlap_study(&embs, &recs, 3, 3, 0).unwrap();
        // a->b: ret 1/2, inst 1; b->a: ret 1/2, inst 1/2; c->b: ret 0, inst 0
        assert!((r.retention - (0.5 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
        assert!((r.install - (1.0 + 0.5 + 0.0) / 3.0).abs() < 1e-15);
        assert_eq!(r.uninstall, 0.0);
    }

    #[test]
    fn overlap_study_with_duplicate_pool_is_one() {
        let recs: Vec<UserRecord> = (0..6).map(|i| rec(&format!("u{i}"), &[2 + i / 2], &[9 + i / 2])).collect();
        let embs: Vec<Embedded> = (0..6).map(|i| emb(&format!("u{i}"), &[(i / 2) as f64 * 10.0])).collect();
        let r = neighbor_overlap_study(&embs, &recs, 6, 6, 1).unwrap();
        assert_eq!((r.retention, r.install), (1.0, 1.0));
    }

    #[test]
    fn probe_separable_and_single_class() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64, 1.0]).collect();
        let y: Vec<bool> = (0..200).map(|i| i >= 100).collect();
        let r = downstream_probe(&x, &y, 5, 0).unwrap();
        assert_eq!(r.run_aucs.len(), 5);
        assert_eq!(r.mean_auc, 1.0);
        assert!(downstream_probe(&x, &[true; 200], 5, 0).is_err());
    }

    #[test]
    fn probe_on_noise_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<Vec<f64>> = (0..2000).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        let y: Vec<bool> = (0..2000).map(|_| rng.gen()).collect();
        let r = downstream_probe(&x, &y, 5, 0).unwrap();
        assert!((r.mean_auc - 0.5).abs() < 0.05, "{}", r.mean_auc);
    }

    fn curve(vals: &[f64]) -> Vec<EpochLog> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| EpochLog {
                epoch: i,
                lr: 1e-3,
                main: v,
                aux: 0.0,
                mask: 0.0,
                reg: 0.0,
                val_main_plus_mask: v,
            })
            .collect()
    }

    #[test]
    fn curve_comparison_cases() {
        let a = curve(&[5.0, 4.0, 3.0, 2.0]);
        let same = curve_compare(&a, &a, 3.0).unwrap();
        assert_eq!(same.winner, CurveWinner::Tie);
        let b = curve(&[5.5, 4.5, 3.5, 2.5]);
        let c = curve_compare(&a, &b, 3.0).unwrap();
        assert_eq!((c.first_epochs, c.second_epochs), (Some(2), Some(3)));
        assert_eq!(c.winner, CurveWinner::First);
        let never = curve_compare(&a, &b, 1.0).unwrap();
        assert_eq!(never.first_epochs, None);
        assert_eq!(never.winner, CurveWinner::First);
    }

    #[test]
    fn dae_overfits_small_population() {
        let recs: Vec<UserRecord> = (0..32u32)
            .map(|u| {
                let mut r = UserRecord::empty(format!("u{u}"), 2);
                let mut ret: Vec<u32> = (0..5).map(|k| 2 + (u * 7 + k * 11) % 60).collect();
                ret.sort_unstable();
                ret.dedup();
                r.retention = ret;
                r
            })
            .collect();
        let mut dae = Dae::new(
            DaeConfig {
                num_apps: 60,
                d_model: 32,
                d_emb: 8,
                dropout_input: 0.0,
                leaky_slope: 0.01,
            },
            1,
        )
        .unwrap();
        let curve = dae
            .train(
                &recs,
                &DaeTrainConfig {
                    epochs: 300,
                    batch_size: 8,
                    base_lr: 1e-2,
                    decay: 1.0,
                    seed: 1,
                },
            )
            .unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let mut aucs = Vec::new();
        for r in &recs {
            let p = dae.reconstruct(r).unwrap();
            let labels: Vec<bool> = r.retention_multi_hot(60).iter().map(|&v| v > 0.0).collect();
            aucs.push(auc(&p, &labels).unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!(mean > 0.99, "reconstruction AUC {mean}");
        let twin = recs[0].clone();
        assert_eq!(dae.embed(&twin).unwrap(), dae.embed(&recs[0]).unwrap());
    }

    #[test]
    fn report_renders_text_and_json() {
        let report = EvalReport {
            embeddings: vec![EmbeddingEval {
                name: "aetn".into(),
                overlap: Some(OverlapRates {
                    retention: 0.5,
                    install: 0.25,
                    uninstall: 0.125,
                }),
                probe_auc: Some(0.8),
                neighbor_purity: None,
            }],
            curves: vec![curve_compare(&curve(&[2.0, 1.0]), &curve(&[2.0, 1.5]), 1.2).unwrap()],
        };
        let text = report.to_string();
        assert!(text.contains("probe AUC: 0.8000"));
        let lines: Vec<serde_json::Value> = report
            .to_json_lines()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["record"], "embedding");
        assert_eq!(lines[0]["overlap"]["install"], 0.25);
        assert_eq!(lines[1]["winner"], "first");
    }
}
