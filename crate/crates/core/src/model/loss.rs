use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{app_class, Aetn, MaskedPositions, Mode};
use crate::autodiff::{ParamId, Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::record::{Behavior, UserRecord};

/// Regularisation factor used for the production model.
pub const LAMBDA_REG: f64 = 1.5e-7;

/// The four loss terms; the objective is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub main: f64,
    pub aux: f64,
    pub mask: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.main + self.aux + self.mask + self.reg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub lambda_reg: f64,
    /// Train the retention autoencoder's reconstruction; turning this off
    /// gives the ablated model.
    pub use_aux: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            lambda_reg: LAMBDA_REG,
            use_aux: true,
        }
    }
}

/// One record of a batch: the full record, the positions hidden from the
/// encoder, and the seed of its dropout stream.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub record: &'a UserRecord,
    pub masked: &'a MaskedPositions,
    pub dropout_seed: u64,
}

/// Per-record sums before batch normalisation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecordSums {
    pub retention: f64,
    pub decoder: f64,
    pub decoder_positions: usize,
    pub aux: f64,
    pub mask: f64,
    pub mask_positions: usize,
}

/// Divisors turning record sums into per-position batch means.
#[derive(Debug, Clone, Copy)]
struct Divisors {
    retention: f64,
    decoder: f64,
    mask: f64,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub terms: LossTerms,
    pub sums: Vec<RecordSums>,
    /// Gradient of `terms.total()`; present when requested.
    pub grads: Option<BTreeMap<ParamId, Tensor>>,
}

struct RecordVars {
    retention: Var,
    decoder: Option<Var>,
    aux: Option<Var>,
    mask: Option<Var>,
}

fn real_rows(record: &UserRecord) -> Result<(Vec<usize>, Vec<usize>)> {
    let i = record.seq_len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, offset) in [(Behavior::Install, 0), (Behavior::Uninstall, i)] {
        for pos in record.real_positions(b) {
            rows.push(offset + pos);
            targets.push(app_class(record.apps(b)[pos])?);
        }
    }
    Ok((rows, targets))
}

fn masked_rows(record: &UserRecord, masked: &MaskedPositions) -> Result<(Vec<usize>, Vec<usize>)> {
    let i = record.seq_len();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, offset) in [(Behavior::Install, 1), (Behavior::Uninstall, 1 + i)] {
        for &pos in masked.get(b) {
            if !record.real_positions(b).contains(&pos) {
                return Err(Error::Invalid(format!(
                    "record `{}`: masked {b:?} position {pos} is not a real operation",
                    record.user_id
                )));
            }
            rows.push(offset + pos);
            targets.push(app_class(record.apps(b)[pos])?);
        }
    }
    Ok((rows, targets))
}

/// Forward one record and record the per-term sums on `tape`.
fn record_forward(
    model: &Aetn,
    tape: &mut Tape,
    item: &BatchItem,
    opts: &LossOptions,
    mode: &mut Mode,
) -> Result<RecordVars> {
    let record = item.record;
    model.check_record(record)?;
    let b = model.bind(tape)?;
    let x = record.retention_multi_hot(model.config.num_apps);
    let x_t = Tensor::row_vector(x.clone());

    let ae = b.retention_ae(tape, &x, mode)?;
    let aux = if opts.use_aux {
        Some(tape.sigmoid_ce(ae.logits4, &x_t, Reduction::Sum)?)
    } else {
        None
    };

    let encoder_view = item.masked.apply(record);
    let inputs = b.encoder_inputs(tape, &encoder_view, ae.x1)?;
    let h = b.encoder_forward(tape, &inputs, mode)?;
    let (emb, recon) = b.bottleneck(tape, h)?;

    let ret_logits = b.retention_head(tape, emb)?;
    let retention = tape.sigmoid_ce(ret_logits, &x_t, Reduction::Sum)?;

    let (rows, targets) = real_rows(record)?;
    let decoder = if rows.is_empty() {
        None
    } else {
        let hd = b.decoder_forward(tape, record, recon, mode)?;
        let logits = b.decoder_logits(tape, hd, Some(&rows))?;
        Some(tape.softmax_ce(logits, &targets, Reduction::Sum)?)
    };

    let (mrows, mtargets) = masked_rows(record, item.masked)?;
    let mask = if mrows.is_empty() {
        None
    } else {
        let logits = b.masked_head(tape, h, &mrows)?;
        Some(tape.softmax_ce(logits, &mtargets, Reduction::Sum)?)
    };

    Ok(RecordVars {
        retention,
        decoder,
        aux,
        mask,
    })
}

fn record_pass(
    model: &Aetn,
    item: &BatchItem,
    opts: &LossOptions,
    training: bool,
    div: Option<Divisors>,
) -> Result<(RecordSums, Option<BTreeMap<ParamId, Tensor>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(item.dropout_seed);
    let mut mode = Mode {
        training,
        rng: &mut rng,
    };
    let mut tape = Tape::new();
    let v = record_forward(model, &mut tape, item, opts, &mut mode)?;
    let value = |var: Option<Var>| var.map_or(0.0, |v| tape.value(v).item());
    let sums = RecordSums {
        retention: tape.value(v.retention).item(),
        decoder: value(v.decoder),
        decoder_positions: item.record.count(Behavior::Install) + item.record.count(Behavior::Uninstall),
        aux: value(v.aux),
        mask: value(v.mask),
        mask_positions: item.masked.len(),
    };
    let Some(div) = div else {
        return Ok((sums, None));
    };
    let mut parts = vec![tape.scale(v.retention, 1.0 / div.retention)?];
    if let Some(d) = v.decoder {
        parts.push(tape.scale(d, 1.0 / div.decoder)?);
    }
    if let Some(a) = v.aux {
        parts.push(tape.scale(a, 1.0 / div.retention)?);
    }
    if let Some(m) = v.mask {
        parts.push(tape.scale(m, 1.0 / div.mask)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    let grads = tape.backward(total)?;
    Ok((sums, Some(grads.into_params())))
}

fn divisors(model: &Aetn, items: &[BatchItem]) -> Divisors {
    let n_dec: usize = items
        .iter()
        .map(|it| it.record.count(Behavior::Install) + it.record.count(Behavior::Uninstall))
        .sum();
    let n_mask: usize = items.iter().map(|it| it.masked.len()).sum();
    Divisors {
        retention: (items.len() * model.config.num_apps) as f64,
        decoder: n_dec.max(1) as f64,
        mask: n_mask.max(1) as f64,
    }
}

/// Loss of a batch as per-position means over the whole batch:
/// retention terms average over `B * M` entries, the decoder term over all
/// real positions, the mask term over all masked positions.
///
/// Records are processed on `workers` threads; gradients are summed in
/// record order, so the result does not depend on the worker count.
pub fn batch_loss(
    model: &Aetn,
    items: &[BatchItem],
    opts: &LossOptions,
    training: bool,
    want_grads: bool,
    workers: usize,
) -> Result<BatchOutput> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let div = divisors(model, items);
    let grad_div = want_grads.then_some(div);
    let workers = workers.clamp(1, items.len());
    let results: Vec<Result<(RecordSums, Option<BTreeMap<ParamId, Tensor>>)>> = if workers == 1 {
        items
            .iter()
            .map(|it| record_pass(model, it, opts, training, grad_div))
            .collect()
    } else {
        let chunk = items.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|it| record_pass(model, it, opts, training, grad_div))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("loss worker panicked"))
                .collect()
        })
    };

    let mut sums = Vec::with_capacity(items.len());
    let mut grads: Option<BTreeMap<ParamId, Tensor>> = want_grads.then(BTreeMap::new);
    for r in results {
        let (s, g) = r?;
        sums.push(s);
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            for (id, t) in g {
                match acc.get_mut(&id) {
                    Some(a) => a.add_assign(&t),
                    None => {
                        acc.insert(id, t);
                    }
                }
            }
        }
    }

    let store = model.params();
    let reg = opts.lambda_reg * store.trainable_sum_sq();
    if let Some(acc) = grads.as_mut() {
        if opts.lambda_reg != 0.0 {
            for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
                let g = acc
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(p.value.rows(), p.value.cols()));
                g.add_scaled(&p.value, 2.0 * opts.lambda_reg);
            }
        }
    }

    let total = |f: fn(&RecordSums) -> f64| sums.iter().map(f).sum::<f64>();
    let terms = LossTerms {
        main: total(|s| s.retention) / div.retention + total(|s| s.decoder) / div.decoder,
        aux: total(|s| s.aux) / div.retention,
        mask: total(|s| s.mask) / div.mask,
        reg,
    };
    Ok(BatchOutput {
        terms,
        sums,
        grads,
    })
}

/// The loss split into `[retention, decoder, aux, mask, reg]`, computed
/// with dropout off. Used for finite-difference checks.
pub fn loss_components(model: &Aetn, items: &[BatchItem], opts: &LossOptions) -> Result<Vec<f64>> {
    let out = batch_loss(model, items, opts, false, false, 1)?;
    let div = divisors(model, items);
    let total = |f: fn(&RecordSums) -> f64| out.sums.iter().map(f).sum::<f64>();
    Ok(vec![
        total(|s| s.retention) / div.retention,
        total(|s| s.decoder) / div.decoder,
        out.terms.aux,
        out.terms.mask,
        out.terms.reg,
    ])
}
