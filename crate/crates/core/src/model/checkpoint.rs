//! Checkpoint file (little endian):
//!
//! ```text
//! "AETNCKPT" | version u32
//! config: M K d_model d_ffn H enc dec d_emb I T ae_mid (u32 each)
//!         dropout_input dropout_attn_ffn leaky_slope layer_norm_eps init_std (f64 each)
//! app_category u32[M]
//! param_count u32
//! per parameter: name_len u32 | name | trainable u8 | rows u32 | cols u32 | f32[rows * cols]
//! sha256 of everything above (32 bytes)
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{Aetn, ModelConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AETNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model as stored on disk (parameters rounded to `f32`) together with
/// its content-derived feature id.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    model: Aetn,
    bytes: Vec<u8>,
    feature_id: String,
}

fn encode(model: &Aetn) -> Vec<u8> {
    let c = model.config();
    let mut w = Vec::new();
    w.extend_from_slice(CHECKPOINT_MAGIC);
    let ints = [
        CHECKPOINT_VERSION as usize,
        c.num_apps,
        c.num_categories,
        c.d_model,
        c.d_ffn,
        c.n_heads,
        c.n_encoder_layers,
        c.n_decoder_layers,
        c.d_emb,
        c.seq_len,
        c.num_dates,
        c.ae_mid_dim,
    ];
    for v in ints {
        w.write_u32::<LE>(v as u32).unwrap();
    }
    for v in [
        c.dropout_input,
        c.dropout_attn_ffn,
        c.leaky_slope,
        c.layer_norm_eps,
        c.init_std,
    ] {
        w.write_f64::<LE>(v).unwrap();
    }
    for &cat in model.app_category() {
        w.write_u32::<LE>(cat).unwrap();
    }
    w.write_u32::<LE>(model.params().len() as u32).unwrap();
    for (_, p) in model.params().iter() {
        w.write_u32::<LE>(p.name.len() as u32).unwrap();
        w.extend_from_slice(p.name.as_bytes());
        w.write_u8(p.trainable as u8).unwrap();
        w.write_u32::<LE>(p.value.rows() as u32).unwrap();
        w.write_u32::<LE>(p.value.cols() as u32).unwrap();
        for &v in p.value.data() {
            w.write_f32::<LE>(v as f32).unwrap();
        }
    }
    let digest = Sha256::digest(&w);
    w.extend_from_slice(&digest);
    w
}

fn decode(bytes: &[u8]) -> Result<Aetn> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut r = Cursor::new(body);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut u = || -> Result<usize> { Ok(r.read_u32::<LE>()? as usize) };
    let (num_apps, num_categories, d_model, d_ffn, n_heads) = (u()?, u()?, u()?, u()?, u()?);
    let (n_encoder_layers, n_decoder_layers, d_emb, seq_len, num_dates, ae_mid_dim) =
        (u()?, u()?, u()?, u()?, u()?, u()?);
    let mut f = || -> Result<f64> { Ok(r.read_f64::<LE>()?) };
    let config = ModelConfig {
        num_apps,
        num_categories,
        d_model,
        d_ffn,
        n_heads,
        n_encoder_layers,
        n_decoder_layers,
        d_emb,
        seq_len,
        num_dates,
        ae_mid_dim,
        dropout_input: f()?,
        dropout_attn_ffn: f()?,
        leaky_slope: f()?,
        layer_norm_eps: f()?,
        init_std: f()?,
    };
    config.validate()?;
    let mut app_category = vec![0u32; num_apps];
    r.read_u32_into::<LE>(&mut app_category)?;
    let count = r.read_u32::<LE>()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let trainable = r.read_u8()? != 0;
        let rows = r.read_u32::<LE>()? as usize;
        let cols = r.read_u32::<LE>()? as usize;
        let mut vals = vec![0f32; rows * cols];
        r.read_f32_into::<LE>(&mut vals)?;
        if store.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        let data = vals.into_iter().map(f64::from).collect();
        store.add(name, Tensor::from_vec(rows, cols, data)?, trainable);
    }
    if r.position() as usize != body.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let model = Aetn::from_parts(config, store, app_category)?;
    // Shapes must match a freshly laid out model exactly.
    let mut reference = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let fresh = Aetn::new(model.config().clone(), model.app_category().to_vec(), &mut reference)?;
    for ((_, a), (_, b)) in fresh.params().iter().zip(model.params().iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::Format(format!(
                "parameter `{}` {:?} does not match layout `{}` {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    if fresh.params().len() != model.params().len() {
        return Err(Error::Format("parameter count does not match layout".into()));
    }
    Ok(model)
}

/// Version tag derived from checkpoint content.
pub fn feature_id_of(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    format!("aetn-{}", hex::encode(&digest[..12]))
}

impl Checkpoint {
    /// Snapshot a model; parameters are rounded to `f32`.
    pub fn from_model(model: &Aetn) -> Result<Self> {
        Self::from_bytes(encode(model))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let model = decode(&bytes)?;
        let feature_id = feature_id_of(&bytes);
        Ok(Checkpoint {
            model,
            bytes,
            feature_id,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, &self.bytes)?;
        Ok(())
    }

    pub fn model(&self) -> &Aetn {
        &self.model
    }

    pub fn into_model(self) -> Aetn {
        self.model
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn feature_id(&self) -> &str {
        &self.feature_id
    }
}
