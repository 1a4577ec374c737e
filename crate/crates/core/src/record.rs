//! Fixed-shape per-user behaviour record and its binary file format.
//!
//! File layout (little endian):
//!
//! ```text
//! "AETN" | version u32 | M u32 | I u32 | T u32 | user_count u64
//! per user:
//!   id_len u32 | id bytes
//!   retention_len u32 | retention u32[retention_len]   (sorted app indices)
//!   install_apps u32[I] | install_dates u32[I]
//!   uninstall_apps u32[I] | uninstall_dates u32[I]
//!   n_install u32 | n_uninstall u32
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::catalog::{FIRST_APP, PAD};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: &[u8; 4] = b"AETN";
pub const RECORD_VERSION: u32 = 1;

/// Operation type of a sequence token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Behavior {
    Install,
    Uninstall,
}

/// One user's retention snapshot plus the two most-recent operation
/// sequences, each left-padded with [`PAD`] and stored oldest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    /// Sorted, distinct dense app indices of currently installed apps.
    pub retention: Vec<u32>,
    pub install_apps: Vec<u32>,
    pub install_dates: Vec<u32>,
    pub uninstall_apps: Vec<u32>,
    pub uninstall_dates: Vec<u32>,
    pub n_install: u32,
    pub n_uninstall: u32,
}

/// Shape shared by every record in a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordShape {
    pub num_apps: usize,
    pub seq_len: usize,
    pub num_dates: usize,
}

impl UserRecord {
    /// A user with no retention and no operations.
    pub fn empty(user_id: impl Into<String>, seq_len: usize) -> Self {
        UserRecord {
            user_id: user_id.into(),
            retention: Vec::new(),
            install_apps: vec![PAD; seq_len],
            install_dates: vec![0; seq_len],
            uninstall_apps: vec![PAD; seq_len],
            uninstall_dates: vec![0; seq_len],
            n_install: 0,
            n_uninstall: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.install_apps.len()
    }

    pub fn apps(&self, b: Behavior) -> &[u32] {
        match b {
            Behavior::Install => &self.install_apps,
            Behavior::Uninstall => &self.uninstall_apps,
        }
    }

    pub fn dates(&self, b: Behavior) -> &[u32] {
        match b {
            Behavior::Install => &self.install_dates,
            Behavior::Uninstall => &self.uninstall_dates,
        }
    }

    pub fn count(&self, b: Behavior) -> usize {
        match b {
            Behavior::Install => self.n_install as usize,
            Behavior::Uninstall => self.n_uninstall as usize,
        }
    }

    /// Positions holding real operations (the suffix after the PAD prefix).
    pub fn real_positions(&self, b: Behavior) -> std::ops::Range<usize> {
        let len = self.seq_len();
        len - self.count(b)..len
    }

    /// Retention as a dense multi-hot vector over the `num_apps` real apps.
    pub fn retention_multi_hot(&self, num_apps: usize) -> Vec<f64> {
        let mut x = vec![0.0; num_apps];
        for &a in &self.retention {
            x[(a - FIRST_APP) as usize] = 1.0;
        }
        x
    }

    /// A structurally valid record with random content: each sequence holds
    /// `0..=seq_len` real operations with non-increasing date buckets.
    pub fn random<R: rand::Rng + ?Sized>(user_id: impl Into<String>, shape: &RecordShape, rng: &mut R) -> Self {
        let mut r = UserRecord::empty(user_id, shape.seq_len);
        let app = |rng: &mut R| FIRST_APP + rng.gen_range(0..shape.num_apps as u32);
        let mut retention: Vec<u32> = (0..rng.gen_range(0..=shape.num_apps.min(8))).map(|_| app(rng)).collect();
        retention.sort_unstable();
        retention.dedup();
        r.retention = retention;
        for b in [Behavior::Install, Behavior::Uninstall] {
            let n = rng.gen_range(0..=shape.seq_len);
            let mut dates: Vec<u32> = (0..n).map(|_| rng.gen_range(0..shape.num_dates as u32)).collect();
            dates.sort_unstable_by(|a, b| b.cmp(a));
            let start = shape.seq_len - n;
            let (apps, ds, count) = match b {
                Behavior::Install => (&mut r.install_apps, &mut r.install_dates, &mut r.n_install),
                Behavior::Uninstall => (&mut r.uninstall_apps, &mut r.uninstall_dates, &mut r.n_uninstall),
            };
            for (k, d) in dates.into_iter().enumerate() {
                apps[start + k] = app(rng);
                ds[start + k] = d;
            }
            *count = n as u32;
        }
        r
    }

    /// Check the structural invariants against a shape.
    pub fn validate(&self, shape: &RecordShape) -> Result<()> {
        let bad = |msg: String| Err(Error::Format(format!("record `{}`: {msg}", self.user_id)));
        let max_app = FIRST_APP as usize + shape.num_apps;
        if self.retention.windows(2).any(|w| w[0] >= w[1]) {
            return bad("retention not sorted and distinct".into());
        }
        if self
            .retention
            .iter()
            .any(|&a| a < FIRST_APP || a as usize >= max_app)
        {
            return bad("retention app out of range".into());
        }
        for b in [Behavior::Install, Behavior::Uninstall] {
            let (apps, dates) = (self.apps(b), self.dates(b));
            if apps.len() != shape.seq_len || dates.len() != shape.seq_len {
                return bad(format!("{b:?} sequence length {} != {}", apps.len(), shape.seq_len));
            }
            let n = self.count(b);
            if n > shape.seq_len {
                return bad(format!("{b:?} count {n} exceeds {}", shape.seq_len));
            }
            let real = self.real_positions(b);
            for i in 0..shape.seq_len {
                let is_real = real.contains(&i);
                if is_real != (apps[i] != PAD) {
                    return bad(format!("{b:?} PAD entries must form a prefix"));
                }
                if is_real && (apps[i] < FIRST_APP || apps[i] as usize >= max_app) {
                    return bad(format!("{b:?} app {} out of range", apps[i]));
                }
                if is_real && dates[i] as usize >= shape.num_dates {
                    return bad(format!("{b:?} date bucket {} >= T", dates[i]));
                }
            }
            if dates[real].windows(2).any(|w| w[0] < w[1]) {
                return bad(format!("{b:?} dates not chronological"));
            }
        }
        Ok(())
    }
}

pub fn write_records<W: Write>(mut w: W, shape: &RecordShape, records: &[UserRecord]) -> Result<()> {
    w.write_all(RECORD_MAGIC)?;
    w.write_u32::<LE>(RECORD_VERSION)?;
    w.write_u32::<LE>(shape.num_apps as u32)?;
    w.write_u32::<LE>(shape.seq_len as u32)?;
    w.write_u32::<LE>(shape.num_dates as u32)?;
    w.write_u64::<LE>(records.len() as u64)?;
    for r in records {
        if r.seq_len() != shape.seq_len {
            return Err(Error::Format(format!(
                "record `{}` has sequence length {}, file has {}",
                r.user_id,
                r.seq_len(),
                shape.seq_len
            )));
        }
        w.write_u32::<LE>(r.user_id.len() as u32)?;
        w.write_all(r.user_id.as_bytes())?;
        w.write_u32::<LE>(r.retention.len() as u32)?;
        for &a in &r.retention {
            w.write_u32::<LE>(a)?;
        }
        for seq in [
            &r.install_apps,
            &r.install_dates,
            &r.uninstall_apps,
            &r.uninstall_dates,
        ] {
            for &v in seq.iter() {
                w.write_u32::<LE>(v)?;
            }
        }
        w.write_u32::<LE>(r.n_install)?;
        w.write_u32::<LE>(r.n_uninstall)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(mut r: R) -> Result<(RecordShape, Vec<UserRecord>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RECORD_MAGIC {
        return Err(Error::Format("not a record file (bad magic)".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != RECORD_VERSION {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let shape = RecordShape {
        num_apps: r.read_u32::<LE>()? as usize,
        seq_len: r.read_u32::<LE>()? as usize,
        num_dates: r.read_u32::<LE>()? as usize,
    };
    let count = r.read_u64::<LE>()?;
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    let read_vec = |r: &mut R, n: usize| -> Result<Vec<u32>> {
        let mut v = vec![0u32; n];
        r.read_u32_into::<LE>(&mut v)?;
        Ok(v)
    };
    for _ in 0..count {
        let id_len = r.read_u32::<LE>()? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let user_id =
            String::from_utf8(id).map_err(|_| Error::Format("user id is not UTF-8".into()))?;
        let n_ret = r.read_u32::<LE>()? as usize;
        let retention = read_vec(&mut r, n_ret)?;
        let install_apps = read_vec(&mut r, shape.seq_len)?;
        let install_dates = read_vec(&mut r, shape.seq_len)?;
        let uninstall_apps = read_vec(&mut r, shape.seq_len)?;
        let uninstall_dates = read_vec(&mut r, shape.seq_len)?;
        let rec = UserRecord {
            user_id,
            retention,
            install_apps,
            install_dates,
            uninstall_apps,
            uninstall_dates,
            n_install: r.read_u32::<LE>()?,
            n_uninstall: r.read_u32::<LE>()?,
        };
        rec.validate(&shape)?;
        records.push(rec);
    }
    Ok((shape, records))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const SHAPE: RecordShape = RecordShape {
        num_apps: 20,
        seq_len: 5,
        num_dates: 30,
    };

    fn seq() -> impl Strategy<Value = (Vec<u32>, Vec<u32>, u32)> {
        (0usize..=5).prop_flat_map(|n| {
            (
                prop::collection::vec(2u32..22, n),
                prop::collection::vec(0u32..30, n),
            )
                .prop_map(move |(apps, mut dates)| {
                    dates.sort_unstable_by(|a, b| b.cmp(a));
                    let mut a = vec![PAD; 5 - n];
                    a.extend(apps);
                    let mut d = vec![0; 5 - n];
                    d.extend(dates);
                    (a, d, n as u32)
                })
        })
    }

    fn record() -> impl Strategy<Value = UserRecord> {
        (
            "[a-z0-9]{0,12}",
            prop::collection::btree_set(2u32..22, 0..10),
            seq(),
            seq(),
        )
            .prop_map(|(id, ret, (ia, id_, ni), (ua, ud, nu))| UserRecord {
                user_id: id,
                retention: ret.into_iter().collect(),
                install_apps: ia,
                install_dates: id_,
                uninstall_apps: ua,
                uninstall_dates: ud,
                n_install: ni,
                n_uninstall: nu,
            })
    }

    proptest! {
        #[test]
        fn binary_round_trip(records in prop::collection::vec(record(), 0..8)) {
            let mut buf = Vec::new();
            write_records(&mut buf, &SHAPE, &records).unwrap();
            let (shape, back) = read_records(buf.as_slice()).unwrap();
            prop_assert_eq!(shape, SHAPE);
            prop_assert_eq!(back, records);
        }
    }

    #[test]
    fn random_records_are_valid() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for i in 0..500 {
            UserRecord::random(format!("r{i}"), &SHAPE, &mut rng).validate(&SHAPE).unwrap();
        }
    }

    #[test]
    fn empty_record_is_valid_and_all_pad() {
        let r = UserRecord::empty("u", 5);
        r.validate(&SHAPE).unwrap();
        assert_eq!(r.retention_multi_hot(20), vec![0.0; 20]);
        assert!(r.real_positions(Behavior::Install).is_empty());
    }

    #[test]
    fn validate_rejects_pad_gap_and_bad_header() {
        let mut r = UserRecord::empty("u", 5);
        r.install_apps = vec![PAD, 3, PAD, 4, 5];
        r.n_install = 3;
        assert!(r.validate(&SHAPE).is_err());
        assert!(read_records(&b"NOPE0000"[..]).is_err());
    }
}
