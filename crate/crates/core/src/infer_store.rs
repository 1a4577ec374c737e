//! Batch inference of user embeddings and a versioned embedding store.
//!
//! A store holds vectors from exactly one checkpoint, named by its
//! `feature_id`. Refreshing users with the same checkpoint keeps the id;
//! a new checkpoint needs a new store.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::record::UserRecord;

pub const STORE_MAGIC: &[u8; 8] = b"AETNSTOR";
pub const STORE_VERSION: u32 = 1;

/// Embeddings for `records` in input order: eval mode, no masking.
/// `workers` threads each take a contiguous chunk.
pub fn infer(checkpoint: &Checkpoint, records: &[UserRecord], workers: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let model = checkpoint.model();
    for r in records {
        model.check_record(r)?;
    }
    let workers = workers.max(1);
    let chunk = records.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<(String, Vec<f64>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|r| Ok((r.user_id.clone(), model.embed(r)?)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Narrow to `f32`, keeping the value strictly inside (-1, 1).
pub fn to_stored(v: &[f64]) -> Vec<f32> {
    let below_one = f32::from_bits(1.0f32.to_bits() - 1);
    v.iter()
        .map(|&x| (x as f32).clamp(-below_one, below_one))
        .collect()
}

/// One stored row. `updated` is the store's logical clock at write time.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredVector {
    pub vector: Arc<[f32]>,
    pub updated: u64,
}

#[derive(Debug)]
pub struct EmbeddingStore {
    feature_id: String,
    d_emb: usize,
    rows: RwLock<BTreeMap<String, StoredVector>>,
    clock: AtomicU64,
}

impl EmbeddingStore {
    pub fn new(feature_id: impl Into<String>, d_emb: usize) -> Result<Self> {
        let feature_id = feature_id.into();
        if feature_id.is_empty() || d_emb == 0 {
            return Err(Error::Invalid("store needs a feature_id and d_emb >= 1".into()));
        }
        Ok(EmbeddingStore {
            feature_id,
            d_emb,
            rows: RwLock::new(BTreeMap::new()),
            clock: AtomicU64::new(0),
        })
    }

    /// An empty store for a checkpoint.
    pub fn for_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        Self::new(checkpoint.feature_id(), checkpoint.model().config().d_emb)
    }

    pub fn feature_id(&self) -> &str {
        &self.feature_id
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn len(&self) -> usize {
        self.rows.read().expect("store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current value of the logical clock.
    pub fn clock(&self) -> u64 {
        self.clock.load(Ordering::SeqCst)
    }

    fn check_vector(&self, user_id: &str, v: &[f32]) -> Result<()> {
        if v.len() != self.d_emb {
            return Err(Error::shape(
                "store_put",
                format!("vector for `{user_id}` has length {}, store d_emb is {}", v.len(), self.d_emb),
            ));
        }
        if let Some(x) = v.iter().find(|x| !(x.abs() < 1.0)) {
            return Err(Error::Invalid(format!("component {x} for `{user_id}` outside (-1, 1)")));
        }
        Ok(())
    }

    /// Replace the whole row; returns the new timestamp.
    pub fn put(&self, user_id: &str, vector: &[f32]) -> Result<u64> {
        self.check_vector(user_id, vector)?;
        let row: Arc<[f32]> = vector.into();
        let mut rows = self.rows.write().expect("store lock poisoned");
        let ts = self.clock.fetch_add(1, Ordering::SeqCst) + 1;
        rows.insert(user_id.to_string(), StoredVector { vector: row, updated: ts });
        Ok(ts)
    }

    /// `None` when the user is not in the store.
    pub fn get(&self, user_id: &str) -> Option<StoredVector> {
        self.rows.read().expect("store lock poisoned").get(user_id).cloned()
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.rows.read().expect("store lock poisoned").keys().cloned().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let rows = self.rows.read().expect("store lock poisoned");
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.write_u32::<LE>(STORE_VERSION).unwrap();
        write_str(&mut out, &self.feature_id);
        out.write_u32::<LE>(self.d_emb as u32).unwrap();
        out.write_u64::<LE>(rows.len() as u64).unwrap();
        for (id, row) in rows.iter() {
            write_str(&mut out, id);
            for &x in row.vector.iter() {
                out.write_f32::<LE>(x).unwrap();
            }
            out.write_u64::<LE>(row.updated).unwrap();
        }
        out
    }

    /// Load a store image regardless of its feature_id.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let image = StoreImage::parse(bytes)?;
        let store = EmbeddingStore::new(image.feature_id.clone(), image.d_emb)?;
        let mut max_ts = 0;
        {
            let mut rows = store.rows.write().expect("store lock poisoned");
            for i in 0..image.len() {
                let (id, vector, updated) = image.row(i);
                store.check_vector(id, &vector)?;
                max_ts = max_ts.max(updated);
                rows.insert(
                    id.to_string(),
                    StoredVector {
                        vector: vector.into(),
                        updated,
                    },
                );
            }
        }
        store.clock.store(max_ts, Ordering::SeqCst);
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load a store and require it to carry `feature_id`.
    pub fn open(path: impl AsRef<Path>, feature_id: &str) -> Result<Self> {
        let store = Self::read(path)?;
        if store.feature_id != feature_id {
            return Err(Error::FeatureIdMismatch {
                store: store.feature_id,
                checkpoint: feature_id.to_string(),
            });
        }
        Ok(store)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LE>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_str(c: &mut Cursor<&[u8]>) -> Result<String> {
    let n = c.read_u32::<LE>().map_err(truncated)? as usize;
    let remaining = c.get_ref().len() - c.position() as usize;
    if n > remaining {
        return Err(Error::Format("store truncated".into()));
    }
    let mut buf = vec![0; n];
    c.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Format("user id is not UTF-8".into()))
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("store truncated".into())
}

/// A store file held as bytes with a row index, searchable without
/// building the map.
#[derive(Debug)]
pub struct StoreImage<'a> {
    pub feature_id: String,
    pub d_emb: usize,
    bytes: &'a [u8],
    /// Byte offset of each row, in user-id order.
    offsets: Vec<usize>,
}

impl<'a> StoreImage<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        c.read_exact(&mut magic).map_err(truncated)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format("not an embedding store".into()));
        }
        let version = c.read_u32::<LE>().map_err(truncated)?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let feature_id = read_str(&mut c)?;
        let d_emb = c.read_u32::<LE>().map_err(truncated)? as usize;
        let count = c.read_u64::<LE>().map_err(truncated)?;
        let mut offsets = Vec::new();
        let mut prev: Option<String> = None;
        for _ in 0..count {
            offsets.push(c.position() as usize);
            let id = read_str(&mut c)?;
            let skip = (d_emb * 4 + 8) as u64;
            if c.position() + skip > bytes.len() as u64 {
                return Err(Error::Format("store truncated".into()));
            }
            c.set_position(c.position() + skip);
            if prev.as_ref().is_some_and(|p| p >= &id) {
                return Err(Error::Format(format!("rows not sorted at `{id}`")));
            }
            prev = Some(id);
        }
        if c.position() as usize != bytes.len() {
            return Err(Error::Format("trailing bytes after last row".into()));
        }
        Ok(StoreImage {
            feature_id,
            d_emb,
            bytes,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn id_at(&self, i: usize) -> &'a str {
        let o = self.offsets[i];
        let n = u32::from_le_bytes(self.bytes[o..o + 4].try_into().unwrap()) as usize;
        std::str::from_utf8(&self.bytes[o + 4..o + 4 + n]).expect("validated in parse")
    }

    /// Row `i` as (user id, vector, timestamp).
    pub fn row(&self, i: usize) -> (&'a str, Vec<f32>, u64) {
        let id = self.id_at(i);
        let mut c = Cursor::new(self.bytes);
        c.set_position((self.offsets[i] + 4 + id.len()) as u64);
        let v = (0..self.d_emb).map(|_| c.read_f32::<LE>().unwrap()).collect();
        (id, v, c.read_u64::<LE>().unwrap())
    }

    /// Binary search by user id.
    pub fn lookup(&self, user_id: &str) -> Option<(Vec<f32>, u64)> {
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.id_at(mid).cmp(user_id) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => {
                    let (_, v, ts) = self.row(mid);
                    return Some((v, ts));
                }
            }
        }
        None
    }
}

/// Recompute and overwrite the listed users with the store's own
/// checkpoint; everyone else is left as is. Returns the number updated.
pub fn feature_update(
    store: &EmbeddingStore,
    checkpoint: &Checkpoint,
    records: &[UserRecord],
    workers: usize,
) -> Result<usize> {
    if checkpoint.feature_id() != store.feature_id() {
        return Err(Error::FeatureIdMismatch {
            store: store.feature_id().to_string(),
            checkpoint: checkpoint.feature_id().to_string(),
        });
    }
    let fresh = infer(checkpoint, records, workers)?;
    for (id, v) in &fresh {
        store.put(id, &to_stored(v))?;
    }
    Ok(fresh.len())
}

/// A fresh store for a new checkpoint, filled from `records`. The old
/// store is not touched; its id differs unless the checkpoint is the same.
pub fn model_update(checkpoint: &Checkpoint, records: &[UserRecord], workers: usize) -> Result<EmbeddingStore> {
    let store = EmbeddingStore::for_checkpoint(checkpoint)?;
    feature_update(&store, checkpoint, records, workers)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::catalog::PAD;
    use crate::model::{Aetn, ModelConfig};

    fn model(seed: u64) -> Aetn {
        let config = ModelConfig {
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            d_emb: 4,
            ae_mid_dim: 4,
            seq_len: 4,
            num_dates: 8,
            ..ModelConfig::desk(10, 3)
        };
        let cats = (0..10).map(|m| (m % 3) as u32).collect();
        Aetn::new(config, cats, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn record(u: u32) -> UserRecord {
        let mut r = UserRecord::empty(format!("u{u:04}"), 4);
        r.retention = vec![2 + u % 10, 2 + (u + 3) % 10];
        r.retention.sort_unstable();
        r.install_apps = vec![PAD, 2 + (u + 1) % 10, 2 + (u + 5) % 10, 2 + u % 10];
        r.install_dates = vec![0, 6, 3, u % 3];
        r.n_install = 3;
        r.uninstall_apps = vec![PAD, PAD, PAD, 2 + (u + 7) % 10];
        r.uninstall_dates = vec![0, 0, 0, 2];
        r.n_uninstall = 1;
        r
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.gen_range(-0.999f32..0.999)).collect()
    }

    #[test]
    fn infer_is_deterministic_and_worker_independent() {
        let ck = Checkpoint::from_model(&model(1)).unwrap();
        let mut recs: Vec<UserRecord> = (0..9).map(record).collect();
        let mut twin = recs[2].clone();
        twin.user_id = "twin".into();
        recs.push(twin);
        let a = infer(&ck, &recs, 1).unwrap();
        let b = infer(&ck, &recs, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[2].1, a[9].1);
        assert_eq!(a[0].1.len(), 4);
        assert!(a.iter().all(|(_, v)| v.iter().all(|x| x.abs() < 1.0)));
        let mut bad = record(0);
        bad.install_dates[3] = 8;
        assert!(infer(&ck, &[bad], 1).is_err());
        assert!(matches!(infer(&ck, &[UserRecord::empty("x", 5)], 1), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn put_get_and_absence() {
        let s = EmbeddingStore::new("fid", 3).unwrap();
        let v = [0.25f32, -0.5, 1e-30];
        assert_eq!(s.put("a", &v).unwrap(), 1);
        assert_eq!(&*s.get("a").unwrap().vector, &v);
        assert!(s.get("b").is_none());
        assert!(s.put("a", &[0.1, 0.2]).is_err());
        assert!(s.put("a", &[0.1, 1.0, 0.0]).is_err());
        assert!(s.put("a", &[0.1, f32::NAN, 0.0]).is_err());
        assert_eq!(to_stored(&[1.0, -1.0, 0.5]).iter().filter(|x| x.abs() < 1.0).count(), 3);
    }

    #[test]
    fn ten_thousand_rows_round_trip_under_concurrent_readers() {
        let d = 8;
        let store = EmbeddingStore::new("fid", d).unwrap();
        let expected = |i: usize, version: u64| {
            random_vec(&mut ChaCha8Rng::seed_from_u64(i as u64 * 2 + version), d)
        };
        for i in 0..10_000 {
            store.put(&format!("user{i:05}"), &expected(i, 0)).unwrap();
        }
        std::thread::scope(|s| {
            for t in 0..4 {
                let store = &store;
                s.spawn(move || {
                    for k in 0..20_000 {
                        let i = (k * 7 + t * 131) % 10_000;
                        let got = store.get(&format!("user{i:05}")).unwrap();
                        // either the old or the new row, never a mix
                        assert!(*got.vector == *expected(i, 0) || *got.vector == *expected(i, 1));
                    }
                });
            }
            s.spawn(|| {
                for i in (0..10_000).step_by(3) {
                    store.put(&format!("user{i:05}"), &expected(i, 1)).unwrap();
                }
            });
        });
        let back = EmbeddingStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(back.len(), 10_000);
        assert_eq!(back.clock(), store.clock());
        let bytes = store.to_bytes();
        let image = StoreImage::parse(&bytes).unwrap();
        for i in 0..10_000 {
            let id = format!("user{i:05}");
            let want = expected(i, (i % 3 == 0) as u64);
            let got = back.get(&id).unwrap();
            assert!(got.vector.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(image.lookup(&id).unwrap(), (want, got.updated));
        }
        assert!(image.lookup("user99999").is_none());
        assert!(image.lookup("").is_none());
    }

    #[test]
    fn open_checks_feature_id_and_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let s = EmbeddingStore::new("fid-a", 2).unwrap();
        s.put("u", &[0.5, 0.5]).unwrap();
        s.write(&path).unwrap();
        assert!(EmbeddingStore::open(&path, "fid-a").is_ok());
        assert!(matches!(
            EmbeddingStore::open(&path, "fid-b"),
            Err(Error::FeatureIdMismatch { .. })
        ));
        let bytes = s.to_bytes();
        assert!(EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EmbeddingStore::from_bytes(&bad).is_err());
    }

    #[test]
    fn feature_update_touches_only_active_users() {
        let ck = Checkpoint::from_model(&model(2)).unwrap();
        let mut recs: Vec<UserRecord> = (0..1000).map(record).collect();
        let store = model_update(&ck, &recs, 2).unwrap();
        assert_eq!(store.feature_id(), ck.feature_id());
        let before: BTreeMap<String, StoredVector> =
            store.user_ids().into_iter().map(|id| (id.clone(), store.get(&id).unwrap())).collect();

        let snapshot = store.to_bytes();
        assert_eq!(feature_update(&store, &ck, &[], 1).unwrap(), 0);
        assert_eq!(store.to_bytes(), snapshot);

        let mut active = Vec::new();
        for u in (0..1000).step_by(10) {
            let r = &mut recs[u];
            r.install_apps[1] = 2 + (r.install_apps[1] - 2 + 1) % 10;
            active.push(r.clone());
        }
        assert_eq!(feature_update(&store, &ck, &active, 1).unwrap(), 100);
        let mut advanced = 0;
        let mut changed = 0;
        for (id, old) in &before {
            let now = store.get(id).unwrap();
            if now.updated > old.updated {
                advanced += 1;
                changed += (now.vector != old.vector) as usize;
            } else {
                assert_eq!(now, *old);
            }
        }
        assert_eq!(advanced, 100);
        assert!(changed > 90, "{changed}");

        let other = Checkpoint::from_model(&model(3)).unwrap();
        assert!(matches!(
            feature_update(&store, &other, &active, 1),
            Err(Error::FeatureIdMismatch { .. })
        ));
        let fresh = model_update(&other, &recs[..5], 1).unwrap();
        assert_ne!(fresh.feature_id(), store.feature_id());
        assert_eq!(store.len(), 1000);
    }
}
