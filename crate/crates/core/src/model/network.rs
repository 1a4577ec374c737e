use rand::{Rng, RngCore};

use super::ModelConfig;
use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::catalog::{FIRST_APP, MASK, PAD};
use crate::error::{Error, Result};
use crate::record::{Behavior, UserRecord};

/// Parameters of one transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Handles into the [`ParamStore`].
///
/// `app` holds `M + 2` rows: PAD, MASK, then the real apps. The shared app
/// matrix is `app[2..] + category[cat(m)]`; it is the first layer of the
/// retention autoencoder, the encoder's app embedding and, transposed, the
/// weight of all four output layers.
#[derive(Debug, Clone)]
pub struct AetnParams {
    pub app: ParamId,
    pub category: ParamId,
    pub ae_b1: ParamId,
    pub ae_w2: ParamId,
    pub ae_b2: ParamId,
    pub ae_w3: ParamId,
    pub ae_b3: ParamId,
    pub ae_b4: ParamId,
    pub date: ParamId,
    pub type_retention: ParamId,
    pub type_install: ParamId,
    pub type_uninstall: ParamId,
    pub encoder: Vec<BlockParams>,
    pub decoder: Vec<BlockParams>,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub head_out_b: ParamId,
}

impl AetnParams {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let d = c.d_model;
        let std = c.init_std;
        let embed = |store: &mut ParamStore, name: &str, rows: usize, rng: &mut R| {
            store.add(name, Tensor::randn(rows, d, std, rng), true)
        };
        let app = embed(store, "app_embedding", c.num_apps + 2, rng);
        let category = embed(store, "category_embedding", c.num_categories, rng);
        let date = embed(store, "date_embedding", c.num_dates, rng);
        let type_retention = embed(store, "type.retention", 1, rng);
        let type_install = embed(store, "type.install", 1, rng);
        let type_uninstall = embed(store, "type.uninstall", 1, rng);

        let weight = |store: &mut ParamStore, name: String, i: usize, o: usize, rng: &mut R| {
            store.add(name, Tensor::xavier(i, o, rng), true)
        };
        let bias = |store: &mut ParamStore, name: String, n: usize| {
            store.add(name, Tensor::zeros(1, n), true)
        };
        let ae_b1 = bias(store, "ae.b1".into(), d);
        let ae_w2 = weight(store, "ae.w2".into(), d, c.ae_mid_dim, rng);
        let ae_b2 = bias(store, "ae.b2".into(), c.ae_mid_dim);
        let ae_w3 = weight(store, "ae.w3".into(), c.ae_mid_dim, d, rng);
        let ae_b3 = bias(store, "ae.b3".into(), d);
        let ae_b4 = bias(store, "ae.b4".into(), c.num_apps);

        let block = |store: &mut ParamStore, prefix: String, rng: &mut R| BlockParams {
            wq: weight(store, format!("{prefix}.wq"), d, d, rng),
            bq: bias(store, format!("{prefix}.bq"), d),
            wk: weight(store, format!("{prefix}.wk"), d, d, rng),
            bk: bias(store, format!("{prefix}.bk"), d),
            wv: weight(store, format!("{prefix}.wv"), d, d, rng),
            bv: bias(store, format!("{prefix}.bv"), d),
            wo: weight(store, format!("{prefix}.wo"), d, d, rng),
            bo: bias(store, format!("{prefix}.bo"), d),
            ln1_gain: store.add(format!("{prefix}.ln1.gain"), Tensor::full(1, d, 1.0), true),
            ln1_bias: bias(store, format!("{prefix}.ln1.bias"), d),
            ffn_w1: weight(store, format!("{prefix}.ffn.w1"), d, c.d_ffn, rng),
            ffn_b1: bias(store, format!("{prefix}.ffn.b1"), c.d_ffn),
            ffn_w2: weight(store, format!("{prefix}.ffn.w2"), c.d_ffn, d, rng),
            ffn_b2: bias(store, format!("{prefix}.ffn.b2"), d),
            ln2_gain: store.add(format!("{prefix}.ln2.gain"), Tensor::full(1, d, 1.0), true),
            ln2_bias: bias(store, format!("{prefix}.ln2.bias"), d),
        };
        let encoder = (0..c.n_encoder_layers)
            .map(|l| block(store, format!("encoder.{l}"), rng))
            .collect();
        let decoder = (0..c.n_decoder_layers)
            .map(|l| block(store, format!("decoder.{l}"), rng))
            .collect();

        let down_w = weight(store, "bottleneck.down.w".into(), d, c.d_emb, rng);
        let down_b = bias(store, "bottleneck.down.b".into(), c.d_emb);
        let up_w = weight(store, "bottleneck.up.w".into(), c.d_emb, d, rng);
        let up_b = bias(store, "bottleneck.up.b".into(), d);
        let head_w = weight(store, "retention_head.w".into(), c.d_emb, d, rng);
        let head_b = bias(store, "retention_head.b".into(), d);
        let head_out_b = bias(store, "retention_head.out_b".into(), c.num_apps);

        AetnParams {
            app,
            category,
            ae_b1,
            ae_w2,
            ae_b2,
            ae_w3,
            ae_b3,
            ae_b4,
            date,
            type_retention,
            type_install,
            type_uninstall,
            encoder,
            decoder,
            down_w,
            down_b,
            up_w,
            up_b,
            head_w,
            head_b,
            head_out_b,
        }
    }

    /// Recover the handles from a store laid out by [`Aetn::new`].
    pub(crate) fn locate(store: &ParamStore, c: &ModelConfig) -> Result<Self> {
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
        };
        let block = |prefix: String| -> Result<BlockParams> {
            Ok(BlockParams {
                wq: id(&format!("{prefix}.wq"))?,
                bq: id(&format!("{prefix}.bq"))?,
                wk: id(&format!("{prefix}.wk"))?,
                bk: id(&format!("{prefix}.bk"))?,
                wv: id(&format!("{prefix}.wv"))?,
                bv: id(&format!("{prefix}.bv"))?,
                wo: id(&format!("{prefix}.wo"))?,
                bo: id(&format!("{prefix}.bo"))?,
                ln1_gain: id(&format!("{prefix}.ln1.gain"))?,
                ln1_bias: id(&format!("{prefix}.ln1.bias"))?,
                ffn_w1: id(&format!("{prefix}.ffn.w1"))?,
                ffn_b1: id(&format!("{prefix}.ffn.b1"))?,
                ffn_w2: id(&format!("{prefix}.ffn.w2"))?,
                ffn_b2: id(&format!("{prefix}.ffn.b2"))?,
                ln2_gain: id(&format!("{prefix}.ln2.gain"))?,
                ln2_bias: id(&format!("{prefix}.ln2.bias"))?,
            })
        };
        Ok(AetnParams {
            app: id("app_embedding")?,
            category: id("category_embedding")?,
            ae_b1: id("ae.b1")?,
            ae_w2: id("ae.w2")?,
            ae_b2: id("ae.b2")?,
            ae_w3: id("ae.w3")?,
            ae_b3: id("ae.b3")?,
            ae_b4: id("ae.b4")?,
            date: id("date_embedding")?,
            type_retention: id("type.retention")?,
            type_install: id("type.install")?,
            type_uninstall: id("type.uninstall")?,
            encoder: (0..c.n_encoder_layers)
                .map(|l| block(format!("encoder.{l}")))
                .collect::<Result<_>>()?,
            decoder: (0..c.n_decoder_layers)
                .map(|l| block(format!("decoder.{l}")))
                .collect::<Result<_>>()?,
            down_w: id("bottleneck.down.w")?,
            down_b: id("bottleneck.down.b")?,
            up_w: id("bottleneck.up.w")?,
            up_b: id("bottleneck.up.b")?,
            head_w: id("retention_head.w")?,
            head_b: id("retention_head.b")?,
            head_out_b: id("retention_head.out_b")?,
        })
    }
}

/// The four layers whose weight is the transposed shared app matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Last layer of the retention autoencoder.
    RetentionAutoencoder,
    /// Masked app prediction over encoder outputs.
    Masked,
    /// Retention reconstruction from the user embedding.
    Retention,
    /// Sequence reconstruction from decoder outputs.
    Decoder,
}

impl OutputHead {
    pub const ALL: [OutputHead; 4] = [
        OutputHead::RetentionAutoencoder,
        OutputHead::Masked,
        OutputHead::Retention,
        OutputHead::Decoder,
    ];
}

/// Positions replaced by the MASK token in the encoder input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskedPositions {
    pub install: Vec<usize>,
    pub uninstall: Vec<usize>,
}

impl MaskedPositions {
    pub fn get(&self, b: Behavior) -> &[usize] {
        match b {
            Behavior::Install => &self.install,
            Behavior::Uninstall => &self.uninstall,
        }
    }

    pub fn len(&self) -> usize {
        self.install.len() + self.uninstall.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The record the encoder sees: masked apps become MASK, dates kept.
    pub fn apply(&self, record: &UserRecord) -> UserRecord {
        let mut out = record.clone();
        for &i in &self.install {
            out.install_apps[i] = MASK;
        }
        for &i in &self.uninstall {
            out.uninstall_apps[i] = MASK;
        }
        out
    }
}

/// The autoencoder-coupled transformer network.
#[derive(Debug, Clone)]
pub struct Aetn {
    pub(crate) config: ModelConfig,
    pub(crate) store: ParamStore,
    pub(crate) p: AetnParams,
    /// Category of each real app, indexed by `app - 2`.
    pub(crate) app_category: Vec<u32>,
}

/// Train or eval behaviour for one forward pass.
pub struct Mode<'r> {
    pub training: bool,
    pub rng: &'r mut dyn RngCore,
}

/// Outputs of the retention autoencoder; `x4` is `sigmoid(logits4)`.
#[derive(Debug, Clone, Copy)]
pub struct AeOutputs {
    pub x0: Var,
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
    pub logits4: Var,
    pub x4: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderInputs {
    /// `(2I + 1) x d_model`; row 0 is the retention token.
    pub tokens: Var,
    /// Retention representation fed to every encoder attention as the
    /// extra key/value.
    pub extra: Var,
    /// Key validity per token; PAD positions are `false`.
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    /// Per head, `L x (L + 1)` attention weights; the last column is the
    /// extra key.
    pub weights: Vec<Var>,
}

/// Every parameter bound onto one tape, plus the composed app tables.
pub struct Bound<'m> {
    model: &'m Aetn,
    vars: Vec<Var>,
    /// `M x d_model` shared app matrix.
    pub w_app: Var,
    /// `(M + 2) x d_model`: PAD and MASK rows followed by `w_app`.
    pub app_table: Var,
    /// `3 x d_model`: retention, install, uninstall type embeddings.
    pub type_table: Var,
}

impl Aetn {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, app_category: Vec<u32>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        check_categories(&config, &app_category)?;
        let mut store = ParamStore::new();
        let p = AetnParams::register(&mut store, &config, rng);
        Ok(Aetn {
            config,
            store,
            p,
            app_category,
        })
    }

    /// Initialise from a seed (ChaCha8 stream).
    pub fn from_seed(config: ModelConfig, app_category: Vec<u32>, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        Self::new(config, app_category, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub(crate) fn from_parts(config: ModelConfig, store: ParamStore, app_category: Vec<u32>) -> Result<Self> {
        config.validate()?;
        check_categories(&config, &app_category)?;
        let p = AetnParams::locate(&store, &config)?;
        Ok(Aetn {
            config,
            store,
            p,
            app_category,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn ids(&self) -> &AetnParams {
        &self.p
    }

    pub fn app_category(&self) -> &[u32] {
        &self.app_category
    }

    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Result<Bound<'m>> {
        let vars: Vec<Var> = self.store.ids().map(|id| tape.param(&self.store, id)).collect();
        let v = |id: ParamId| vars[id.index()];
        let m = self.config.num_apps;
        let categories: Vec<usize> = self.app_category.iter().map(|&c| c as usize).collect();
        let cat_rows = tape.embedding_lookup(v(self.p.category), &categories)?;
        let real = tape.slice(v(self.p.app), Axis::Rows, FIRST_APP as usize, m)?;
        let w_app = tape.add(real, cat_rows)?;
        let specials = tape.slice(v(self.p.app), Axis::Rows, 0, FIRST_APP as usize)?;
        let app_table = tape.concat(&[specials, w_app], Axis::Rows)?;
        let type_table = tape.concat(
            &[
                v(self.p.type_retention),
                v(self.p.type_install),
                v(self.p.type_uninstall),
            ],
            Axis::Rows,
        )?;
        Ok(Bound {
            model: self,
            vars,
            w_app,
            app_table,
            type_table,
        })
    }

    /// The shared `M x d_model` app matrix, evaluated outside any tape.
    pub fn shared_app_matrix(&self) -> Tensor {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape).expect("parameter shapes fixed at construction");
        tape.value(b.w_app).clone()
    }

    /// The `d_model x M` weight an output layer multiplies by.
    pub fn head_weight(&self, head: OutputHead) -> Tensor {
        // Every head reads the same composed matrix; the match documents
        // that none of them owns a private copy.
        match head {
            OutputHead::RetentionAutoencoder
            | OutputHead::Masked
            | OutputHead::Retention
            | OutputHead::Decoder => self.shared_app_matrix().transpose(),
        }
    }

    /// The user embedding of one record, eval mode, no masking.
    pub fn embed(&self, record: &UserRecord) -> Result<Vec<f64>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut mode = Mode {
            training: false,
            rng: &mut rng,
        };
        let mut tape = Tape::new();
        let b = self.bind(&mut tape)?;
        let x = record.retention_multi_hot(self.config.num_apps);
        let ae = b.retention_ae(&mut tape, &x, &mut mode)?;
        let inputs = b.encoder_inputs(&mut tape, record, ae.x1)?;
        let h = b.encoder_forward(&mut tape, &inputs, &mut mode)?;
        let (emb, _) = b.bottleneck(&mut tape, h)?;
        Ok(tape.value(emb).data().to_vec())
    }

    pub fn check_record(&self, record: &UserRecord) -> Result<()> {
        if record.seq_len() != self.config.seq_len {
            return Err(Error::ConfigMismatch(format!(
                "record `{}` has seq_len {} but model seq_len is {}",
                record.user_id,
                record.seq_len(),
                self.config.seq_len
            )));
        }
        record.validate(&crate::record::RecordShape {
            num_apps: self.config.num_apps,
            seq_len: self.config.seq_len,
            num_dates: self.config.num_dates,
        })
    }
}

fn check_categories(config: &ModelConfig, app_category: &[u32]) -> Result<()> {
    if app_category.len() != config.num_apps {
        return Err(Error::ConfigMismatch(format!(
            "{} category assignments for num_apps {}",
            app_category.len(),
            config.num_apps
        )));
    }
    if let Some(c) = app_category
        .iter()
        .find(|&&c| c as usize >= config.num_categories)
    {
        return Err(Error::ConfigMismatch(format!(
            "category {c} outside num_categories {}",
            config.num_categories
        )));
    }
    Ok(())
}

impl<'m> Bound<'m> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn model(&self) -> &'m Aetn {
        self.model
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = tape.matmul(x, self.var(w))?;
        tape.add_row(y, self.var(b))
    }

    /// Retention autoencoder on a multi-hot vector of length `M`.
    pub fn retention_ae(&self, tape: &mut Tape, x: &[f64], mode: &mut Mode) -> Result<AeOutputs> {
        let c = &self.model.config;
        let p = &self.model.p;
        if x.len() != c.num_apps {
            return Err(Error::shape(
                "retention_ae",
                format!("retention of length {} for M = {}", x.len(), c.num_apps),
            ));
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let x0: Vec<f64> = if norm > 0.0 {
            x.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; x.len()]
        };
        let x0 = tape.constant(Tensor::row_vector(x0));
        let noisy = tape.dropout(x0, c.dropout_input, mode.training, mode.rng)?;
        let h = tape.matmul(noisy, self.w_app)?;
        let h = tape.add_row(h, self.var(p.ae_b1))?;
        let x1 = tape.leaky_relu(h, c.leaky_slope)?;
        let h = self.linear(tape, x1, p.ae_w2, p.ae_b2)?;
        let x2 = tape.leaky_relu(h, c.leaky_slope)?;
        let h = self.linear(tape, x2, p.ae_w3, p.ae_b3)?;
        let x3 = tape.leaky_relu(h, c.leaky_slope)?;
        let h = tape.matmul_t(x3, self.w_app)?;
        let logits4 = tape.add_row(h, self.var(p.ae_b4))?;
        let x4 = tape.sigmoid(logits4)?;
        Ok(AeOutputs {
            x0,
            x1,
            x2,
            x3,
            logits4,
            x4,
        })
    }

    fn check_dates(&self, record: &UserRecord) -> Result<()> {
        let t = self.model.config.num_dates;
        for b in [Behavior::Install, Behavior::Uninstall] {
            if let Some(d) = record.dates(b).iter().find(|&&d| d as usize >= t) {
                return Err(Error::Invalid(format!(
                    "record `{}`: date bucket {d} >= T = {t}",
                    record.user_id
                )));
            }
        }
        if record.seq_len() != self.model.config.seq_len {
            return Err(Error::ConfigMismatch(format!(
                "record `{}` has seq_len {}, model expects {}",
                record.user_id,
                record.seq_len(),
                self.model.config.seq_len
            )));
        }
        Ok(())
    }

    /// Date plus behaviour-type rows for the `2I` sequence positions.
    fn date_type_rows(&self, tape: &mut Tape, record: &UserRecord) -> Result<Var> {
        let dates: Vec<usize> = record
            .install_dates
            .iter()
            .chain(&record.uninstall_dates)
            .map(|&d| d as usize)
            .collect();
        let types: Vec<usize> = (0..2 * record.seq_len())
            .map(|i| if i < record.seq_len() { 1 } else { 2 })
            .collect();
        let date_rows = tape.embedding_lookup(self.var(self.model.p.date), &dates)?;
        let type_rows = tape.embedding_lookup(self.type_table, &types)?;
        tape.add(date_rows, type_rows)
    }

    /// Token matrix for the encoder. `record` is the (possibly masked)
    /// record the encoder is allowed to see.
    pub fn encoder_inputs(&self, tape: &mut Tape, record: &UserRecord, x1: Var) -> Result<EncoderInputs> {
        self.check_dates(record)?;
        let extra = tape.add(x1, self.var(self.model.p.type_retention))?;
        let apps: Vec<usize> = record
            .install_apps
            .iter()
            .chain(&record.uninstall_apps)
            .map(|&a| a as usize)
            .collect();
        let app_rows = tape.embedding_lookup(self.app_table, &apps)?;
        let context = self.date_type_rows(tape, record)?;
        let seq = tape.add(app_rows, context)?;
        let tokens = tape.concat(&[extra, seq], Axis::Rows)?;
        let mut valid = Vec::with_capacity(apps.len() + 1);
        valid.push(true);
        valid.extend(apps.iter().map(|&a| a != PAD as usize));
        Ok(EncoderInputs {
            tokens,
            extra,
            valid,
        })
    }

    /// Multi-head attention whose keys and values are the rows of `x`
    /// followed by one extra row projected from `extra` with the same maps.
    /// Queries come from `x` only.
    pub fn modified_attention(
        &self,
        tape: &mut Tape,
        blk: &BlockParams,
        x: Var,
        extra: Var,
        valid: &[bool],
        mode: &mut Mode,
    ) -> Result<AttentionOutput> {
        let c = &self.model.config;
        let rows = tape.value(x).rows();
        if valid.len() != rows {
            return Err(Error::shape(
                "modified_attention",
                format!("mask of {} for {rows} positions", valid.len()),
            ));
        }
        let kv_in = tape.concat(&[x, extra], Axis::Rows)?;
        let q = self.linear(tape, x, blk.wq, blk.bq)?;
        let k = self.linear(tape, kv_in, blk.wk, blk.bk)?;
        let v = self.linear(tape, kv_in, blk.wv, blk.bv)?;
        let mut key_valid = valid.to_vec();
        key_valid.push(true);
        let dk = c.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(c.n_heads);
        let mut weights = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let qh = tape.slice(q, Axis::Cols, h * dk, dk)?;
            let kh = tape.slice(k, Axis::Cols, h * dk, dk)?;
            let vh = tape.slice(v, Axis::Cols, h * dk, dk)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let w = tape.masked_softmax(scores, &key_valid)?;
            weights.push(w);
            let w = tape.dropout(w, c.dropout_attn_ffn, mode.training, mode.rng)?;
            heads.push(tape.matmul(w, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, Axis::Cols)?
        };
        let out = self.linear(tape, joined, blk.wo, blk.bo)?;
        Ok(AttentionOutput { out, weights })
    }

    /// Post-norm block: attention, residual, norm, ReLU FFN, residual, norm.
    pub fn block(
        &self,
        tape: &mut Tape,
        blk: &BlockParams,
        x: Var,
        extra: Var,
        valid: &[bool],
        mode: &mut Mode,
    ) -> Result<Var> {
        let c = &self.model.config;
        let att = self.modified_attention(tape, blk, x, extra, valid, mode)?;
        let a = tape.dropout(att.out, c.dropout_attn_ffn, mode.training, mode.rng)?;
        let r = tape.add(x, a)?;
        let h = tape.layer_norm(r, self.var(blk.ln1_gain), self.var(blk.ln1_bias), c.layer_norm_eps)?;
        let f = self.linear(tape, h, blk.ffn_w1, blk.ffn_b1)?;
        let f = tape.relu(f)?;
        let f = self.linear(tape, f, blk.ffn_w2, blk.ffn_b2)?;
        let f = tape.dropout(f, c.dropout_attn_ffn, mode.training, mode.rng)?;
        let r = tape.add(h, f)?;
        tape.layer_norm(r, self.var(blk.ln2_gain), self.var(blk.ln2_bias), c.layer_norm_eps)
    }

    /// Encoder stack; the same `extra` is injected at every layer.
    pub fn encoder_forward(&self, tape: &mut Tape, inputs: &EncoderInputs, mode: &mut Mode) -> Result<Var> {
        let mut h = inputs.tokens;
        for blk in &self.model.p.encoder {
            h = self.block(tape, blk, h, inputs.extra, &inputs.valid, mode)?;
        }
        Ok(h)
    }

    /// From the encoder output's retention row to `(embedding, reconstruction)`.
    pub fn bottleneck(&self, tape: &mut Tape, encoder_out: Var) -> Result<(Var, Var)> {
        let p = &self.model.p;
        let e = tape.slice(encoder_out, Axis::Rows, 0, 1)?;
        let z = self.linear(tape, e, p.down_w, p.down_b)?;
        let emb = tape.tanh(z)?;
        let recon = self.linear(tape, emb, p.up_w, p.up_b)?;
        Ok((emb, recon))
    }

    /// Retention logits (pre-sigmoid) from the user embedding.
    pub fn retention_head(&self, tape: &mut Tape, emb: Var) -> Result<Var> {
        let p = &self.model.p;
        let h = self.linear(tape, emb, p.head_w, p.head_b)?;
        let h = tape.leaky_relu(h, self.model.config.leaky_slope)?;
        let z = tape.matmul_t(h, self.w_app)?;
        tape.add_row(z, self.var(p.head_out_b))
    }

    /// Logits over the `M` real apps for selected encoder rows (row 0 is
    /// the retention token, so sequence position `i` is row `i + 1`).
    pub fn masked_head(&self, tape: &mut Tape, encoder_out: Var, rows: &[usize]) -> Result<Var> {
        let h = tape.embedding_lookup(encoder_out, rows)?;
        tape.matmul_t(h, self.w_app)
    }

    /// Decoder hidden states, `2I x d_model`. Queries carry only date and
    /// behaviour type; `recon` is the extra key/value.
    pub fn decoder_forward(&self, tape: &mut Tape, record: &UserRecord, recon: Var, mode: &mut Mode) -> Result<Var> {
        self.check_dates(record)?;
        let mut h = self.date_type_rows(tape, record)?;
        let valid: Vec<bool> = record
            .install_apps
            .iter()
            .chain(&record.uninstall_apps)
            .map(|&a| a != PAD)
            .collect();
        for blk in &self.model.p.decoder {
            h = self.block(tape, blk, h, recon, &valid, mode)?;
        }
        Ok(h)
    }

    /// Project selected decoder rows (all of them if `rows` is `None`) onto
    /// the `M` real apps.
    pub fn decoder_logits(&self, tape: &mut Tape, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => tape.embedding_lookup(hidden, r)?,
            None => hidden,
        };
        tape.matmul_t(h, self.w_app)
    }
}

/// Class index of a real app; PAD and MASK are not classes.
pub fn app_class(app: u32) -> Result<usize> {
    if app < FIRST_APP {
        return Err(Error::Invalid(format!(
            "app index {app} is PAD/MASK and cannot be a target"
        )));
    }
    Ok((app - FIRST_APP) as usize)
}

/// Eval-mode outputs of every head for one record.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub embedding: Vec<f64>,
    /// Retention-head probabilities over the `M` real apps.
    pub retention: Vec<f64>,
    /// Decoder logits, one row per real position (install then uninstall).
    pub decoder: Tensor,
    /// Masked-head logits, one row per masked position (install then
    /// uninstall).
    pub masked: Tensor,
}

impl Aetn {
    /// Run all heads with dropout off. `masked` hides positions from the
    /// encoder exactly as during training.
    pub fn predict(&self, record: &UserRecord, masked: &MaskedPositions) -> Result<Predictions> {
        self.check_record(record)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut mode = Mode {
            training: false,
            rng: &mut rng,
        };
        let mut tape = Tape::new();
        let b = self.bind(&mut tape)?;
        let x = record.retention_multi_hot(self.config.num_apps);
        let ae = b.retention_ae(&mut tape, &x, &mut mode)?;
        let inputs = b.encoder_inputs(&mut tape, &masked.apply(record), ae.x1)?;
        let h = b.encoder_forward(&mut tape, &inputs, &mut mode)?;
        let (emb, recon) = b.bottleneck(&mut tape, h)?;
        let ret = b.retention_head(&mut tape, emb)?;
        let ret = tape.sigmoid(ret)?;
        let i = record.seq_len();
        let real: Vec<usize> = record
            .real_positions(Behavior::Install)
            .chain(record.real_positions(Behavior::Uninstall).map(|p| p + i))
            .collect();
        let decoder = if real.is_empty() {
            Tensor::zeros(0, self.config.num_apps)
        } else {
            let hd = b.decoder_forward(&mut tape, record, recon, &mut mode)?;
            let l = b.decoder_logits(&mut tape, hd, Some(&real))?;
            tape.value(l).clone()
        };
        let rows: Vec<usize> = masked
            .install
            .iter()
            .map(|p| p + 1)
            .chain(masked.uninstall.iter().map(|p| p + 1 + i))
            .collect();
        let masked = if rows.is_empty() {
            Tensor::zeros(0, self.config.num_apps)
        } else {
            let l = b.masked_head(&mut tape, h, &rows)?;
            tape.value(l).clone()
        };
        Ok(Predictions {
            embedding: tape.value(emb).data().to_vec(),
            retention: tape.value(ret).data().to_vec(),
            decoder,
            masked,
        })
    }
}
