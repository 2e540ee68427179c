//! Single-file store of per-user evolved group matrices.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! header (56 bytes)
//!   0  magic "DMGC"
//!   4  u16 version (1)
//!   6  u16 reserved (0)
//!   8  u32 k
//!  12  u32 d_g
//!  16  u64 count
//!  24  [u8; 32] model hash (SHA-256)
//! index: count × u64 user id, strictly increasing
//! records: count × (8 + 8k + 4·k·d_g) bytes, in index order
//!   u32 n_valid, u32 reserved,
//!   k × i64 group max timestamp,
//!   k × d_g f32 row-major G′ (rows ≥ n_valid are zero)
//! ```

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{Dmgin, LongState, UserContext};
use crate::numeric::{Matrix, ParamSet};

pub const MAGIC: &[u8; 4] = b"DMGC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 56;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub version: u16,
    pub k: u32,
    pub d_g: u32,
    pub count: u64,
    pub model_hash: [u8; 32],
}

impl CacheHeader {
    pub fn record_len(&self) -> usize {
        record_len(self.k as usize, self.d_g as usize)
    }

    pub fn hash_hex(&self) -> String {
        self.model_hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.k.to_le_bytes());
        b[12..16].copy_from_slice(&self.d_g.to_le_bytes());
        b[16..24].copy_from_slice(&self.count.to_le_bytes());
        b[24..56].copy_from_slice(&self.model_hash);
        b
    }

    fn parse(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(Error::CacheCorrupt(format!("file shorter than the {HEADER_LEN}-byte header")));
        }
        if &b[0..4] != MAGIC {
            return Err(Error::CacheCorrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(Error::CacheCorrupt(format!("unsupported version {version}")));
        }
        let mut model_hash = [0u8; 32];
        model_hash.copy_from_slice(&b[24..56]);
        Ok(Self {
            version,
            k: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            d_g: u32::from_le_bytes(b[12..16].try_into().unwrap()),
            count: u64::from_le_bytes(b[16..24].try_into().unwrap()),
            model_hash,
        })
    }
}

pub fn record_len(k: usize, d_g: usize) -> usize {
    8 + 8 * k + 4 * k * d_g
}

/// Raw 32 bytes of a 64-character hex digest.
pub fn hash_bytes(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 || !hex.is_ascii() {
        return Err(Error::invalid(format!("expected a 64-character hex digest, got {hex:?}")));
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::invalid(format!("not a hex digest: {hex:?}")))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserLongRepr {
    pub user_id: u32,
    pub long: LongState,
    pub model_hash: [u8; 32],
}

fn encode_record(long: &LongState, k: usize, d_g: usize, out: &mut Vec<u8>) {
    let n_valid = long.n_valid();
    out.extend_from_slice(&(n_valid as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for s in 0..k {
        let ts = if long.valid[s] { long.timestamps[s] } else { 0 };
        out.extend_from_slice(&ts.to_le_bytes());
    }
    for s in 0..k {
        for &v in &long.g_prime.row(s)[..d_g] {
            let v = if long.valid[s] { v as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Computes `G′` for every user context and writes the cache.
///
/// Users are stored sorted by id; a repeated id is an error. Returns the
/// header written.
pub fn precompute_all(model: &Dmgin, params: &ParamSet, users: &[UserContext], path: &Path) -> Result<CacheHeader> {
    model.check_params(params)?;
    let (k, d_g) = (model.cfg.top_k, model.cfg.d_g());
    let mut order: Vec<&UserContext> = users.iter().collect();
    order.sort_by_key(|c| c.user_id);
    if let Some(w) = order.windows(2).find(|w| w[0].user_id == w[1].user_id) {
        return Err(Error::invalid(format!("user {} appears twice", w[0].user_id)));
    }
    let header = CacheHeader {
        version: VERSION,
        k: k as u32,
        d_g: d_g as u32,
        count: order.len() as u64,
        model_hash: hash_bytes(&model.model_hash(params))?,
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + order.len() * (8 + header.record_len()));
    bytes.extend_from_slice(&header.to_bytes());
    for c in &order {
        bytes.extend_from_slice(&(c.user_id as u64).to_le_bytes());
    }
    for c in &order {
        let long = model.long_state(params, c)?;
        encode_record(&long, k, d_g, &mut bytes);
    }
    std::fs::write(path, bytes)?;
    Ok(header)
}

/// An opened, validated cache file held in memory.
#[derive(Debug)]
pub struct CacheReader {
    header: CacheHeader,
    index: Vec<u64>,
    records: Vec<u8>,
    reads: AtomicU64,
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn from_bytes(mut bytes: Vec<u8>) -> Result<Self> {
        let header = CacheHeader::parse(&bytes)?;
        let count = usize::try_from(header.count).map_err(|_| Error::CacheCorrupt("count overflows".into()))?;
        let index_end = count
            .checked_mul(8)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::CacheCorrupt("count overflows".into()))?;
        let expected = count
            .checked_mul(header.record_len())
            .and_then(|n| n.checked_add(index_end))
            .ok_or_else(|| Error::CacheCorrupt("size overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::CacheCorrupt(format!(
                "file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let index: Vec<u64> = bytes[HEADER_LEN..index_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if index.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CacheCorrupt("index is not strictly increasing".into()));
        }
        let records = bytes.split_off(index_end);
        Ok(Self {
            header,
            index,
            records,
            reads: AtomicU64::new(0),
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn user_ids(&self) -> &[u64] {
        &self.index
    }

    /// Number of record reads so far.
    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// Fails unless the cache was written by the model identified by `hash_hex`.
    pub fn check_model(&self, hash_hex: &str) -> Result<()> {
        if hash_bytes(hash_hex)? != self.header.model_hash {
            return Err(Error::StaleCache {
                cached: self.header.hash_hex(),
                serving: hash_hex.to_string(),
            });
        }
        Ok(())
    }

    pub fn lookup(&self, user_id: u32) -> Result<Option<UserLongRepr>> {
        match self.index.binary_search(&(user_id as u64)) {
            Ok(pos) => self.record(pos).map(Some),
            Err(_) => Ok(None),
        }
    }

    /// Decodes the record at index position `pos`.
    pub fn record(&self, pos: usize) -> Result<UserLongRepr> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let (k, d_g) = (self.header.k as usize, self.header.d_g as usize);
        let len = self.header.record_len();
        let rec = self
            .records
            .get(pos * len..(pos + 1) * len)
            .ok_or_else(|| Error::CacheCorrupt(format!("record {pos} out of range")))?;
        let n_valid = u32::from_le_bytes(rec[0..4].try_into().unwrap()) as usize;
        if n_valid > k {
            return Err(Error::CacheCorrupt(format!("record {pos}: {n_valid} valid groups > k = {k}")));
        }
        let timestamps: Vec<i64> = rec[8..8 + 8 * k]
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values: Vec<f64> = rec[8 + 8 * k..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(UserLongRepr {
            user_id: self.index[pos] as u32,
            long: LongState {
                g_prime: Matrix::from_vec(k, d_g, values)?,
                valid: (0..k).map(|s| s < n_valid).collect(),
                timestamps,
            },
            model_hash: self.header.model_hash,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServeSource {
    Cache,
    /// User absent from the cache; the long-term state was recomputed.
    Recompute,
}

/// pCTRs for `candidates`, taking `G′` from the cache when the user is
/// present. `request` supplies the short-term events and the request time;
/// `snapshot` is the long-term context used on a miss.
pub fn serve_predict(
    cache: &CacheReader,
    model: &Dmgin,
    params: &ParamSet,
    request: &UserContext,
    snapshot: &UserContext,
    candidates: &[u32],
) -> Result<(Vec<f64>, ServeSource)> {
    let (long, source) = match cache.lookup(request.user_id)? {
        Some(r) => (r.long, ServeSource::Cache),
        None => (model.long_state(params, snapshot)?, ServeSource::Recompute),
    };
    let logits = model.score(params, request, &long, candidates)?;
    Ok((logits.into_iter().map(crate::cagam::pctr).collect(), source))
}

/// Header and one record as human-readable text.
pub fn inspect(cache: &CacheReader, user_id: Option<u32>) -> Result<String> {
    let h = cache.header();
    let mut s = format!(
        "magic DMGC\nversion {}\nk {}\nd_g {}\ncount {}\nrecord_bytes {}\nmodel_hash {}\n",
        h.version,
        h.k,
        h.d_g,
        h.count,
        h.record_len(),
        h.hash_hex()
    );
    let pos = match user_id {
        Some(u) => cache
            .user_ids()
            .binary_search(&(u as u64))
            .map_err(|_| Error::invalid(format!("user {u} is not in the cache")))?,
        None if h.count > 0 => 0,
        None => return Ok(s),
    };
    let r = cache.record(pos)?;
    s.push_str(&format!("user {}\nvalid_groups {}\n", r.user_id, r.long.n_valid()));
    for row in 0..r.long.n_valid() {
        let vals: Vec<String> = r.long.g_prime.row(row).iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&format!("group {row} max_ts {} [{}]\n", r.long.timestamps[row], vals.join(", ")));
    }
    Ok(s)
}
