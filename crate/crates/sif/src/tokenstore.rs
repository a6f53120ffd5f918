//! Offline tokenization pipeline: bit-exact token codecs, a write-once
//! sorted key-value store for the serving path, and the storage-compression
//! accounting for the token-representation variants.

use crate::datagen::ImpressionLog;
use crate::error::{Result, SifError};
use crate::tokenizer::{TokenSample, TokenizerState};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

pub const STORE_MAGIC: &[u8; 4] = b"SIFS";
pub const STORE_VERSION: u16 = 1;
/// Record-count placeholder while the store is being written; readers treat
/// it as "build never completed".
const COUNT_UNFINISHED: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoreHeader {
    pub version: u16,
    pub schema_hash: u64,
    pub t: u16,
    pub m: u8,
    pub bits_per_index: u8,
    pub record_count: u64,
}

pub const HEADER_BYTES: usize = 4 + 2 + 8 + 2 + 1 + 1 + 8;

impl StoreHeader {
    pub fn packed_token_bytes(&self) -> usize {
        packed_bytes(self.t as usize, self.m as usize, self.bits_per_index as usize)
    }

    pub fn record_bytes(&self) -> usize {
        8 + self.packed_token_bytes()
    }
}

pub fn packed_bytes(t: usize, m: usize, bits_per_index: usize) -> usize {
    (t * m * bits_per_index).div_ceil(8)
}

/// Packs indices slot-major, level-ascending, each in `bits_per_index` bits,
/// little-endian bit order within bytes.
pub fn pack(token: &TokenSample, bits_per_index: usize) -> Result<Vec<u8>> {
    assert!(bits_per_index <= 16);
    let n_bits = token.indices.len() * bits_per_index;
    let mut out = vec![0u8; n_bits.div_ceil(8)];
    let mut bit = 0usize;
    for &q in &token.indices {
        if bits_per_index < 16 && (q as u32) >= (1u32 << bits_per_index) {
            return Err(SifError::Data(format!(
                "index {} overflows {} bits",
                q, bits_per_index
            )));
        }
        for b in 0..bits_per_index {
            if (q >> b) & 1 == 1 {
                out[bit >> 3] |= 1 << (bit & 7);
            }
            bit += 1;
        }
    }
    Ok(out)
}

pub fn unpack(bytes: &[u8], t: usize, m: usize, bits_per_index: usize) -> Result<TokenSample> {
    let n = t * m;
    let need = packed_bytes(t, m, bits_per_index);
    if bytes.len() < need {
        return Err(SifError::Data(format!(
            "truncated token buffer: {} bytes, need {}",
            bytes.len(),
            need
        )));
    }
    let mut indices = Vec::with_capacity(n);
    let mut bit = 0usize;
    for _ in 0..n {
        let mut q: u16 = 0;
        for b in 0..bits_per_index {
            if (bytes[bit >> 3] >> (bit & 7)) & 1 == 1 {
                q |= 1 << b;
            }
            bit += 1;
        }
        indices.push(q);
    }
    Ok(TokenSample { indices })
}

/// Tokenizes every positive sample in the log with a frozen tokenizer and
/// writes the sorted store. The final header (with the real record count) is
/// written last, so a crashed build is detectable.
pub fn build_store(log: &ImpressionLog, tokenizer: &TokenizerState, path: &Path) -> Result<StoreHeader> {
    if tokenizer.schema_hash != log.schema.hash() {
        return Err(SifError::Data(
            "tokenizer/log schema hash mismatch".into(),
        ));
    }
    let t = tokenizer.num_slots();
    let m = tokenizer.m_levels;
    let bits = tokenizer.v.trailing_zeros() as usize;
    let mut header = StoreHeader {
        version: STORE_VERSION,
        schema_hash: tokenizer.schema_hash,
        t: t as u16,
        m: m as u8,
        bits_per_index: bits as u8,
        record_count: COUNT_UNFINISHED,
    };
    let mut file = BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut file, &header)?;
    // samples are ordered by (user, timestamp); records must be sorted by id
    let mut ids: Vec<u64> = log
        .samples
        .iter()
        .filter(|s| s.label)
        .map(|s| s.sample_id)
        .collect();
    ids.sort_unstable();
    for &id in &ids {
        let s = log.get(id).expect("id from log");
        let token = tokenizer.tokenize(&log.schema, s)?;
        let packed = pack(&token, bits)?;
        file.write_all(&id.to_le_bytes())?;
        file.write_all(&packed)?;
    }
    header.record_count = ids.len() as u64;
    let mut inner = file.into_inner().map_err(|e| e.into_error())?;
    inner.seek(SeekFrom::Start(0))?;
    let mut w = BufWriter::new(&mut inner);
    write_header(&mut w, &header)?;
    w.flush()?;
    drop(w);
    inner.sync_all()?;
    Ok(header)
}

fn write_header<W: Write>(w: &mut W, h: &StoreHeader) -> Result<()> {
    w.write_all(STORE_MAGIC)?;
    w.write_all(&h.version.to_le_bytes())?;
    w.write_all(&h.schema_hash.to_le_bytes())?;
    w.write_all(&h.t.to_le_bytes())?;
    w.write_all(&[h.m])?;
    w.write_all(&[h.bits_per_index])?;
    w.write_all(&h.record_count.to_le_bytes())?;
    Ok(())
}

/// Completed, immutable store mapped into memory for binary-search lookup.
pub struct TokenStore {
    pub header: StoreHeader,
    records: Vec<u8>,
}

impl TokenStore {
    pub fn open(path: &Path) -> Result<TokenStore> {
        let file = path.display().to_string();
        let fmt = |msg: String| SifError::Format { file: file.clone(), msg };
        let mut f = std::fs::File::open(path)?;
        let mut head = [0u8; HEADER_BYTES];
        f.read_exact(&mut head)
            .map_err(|_| fmt("file shorter than header".into()))?;
        if &head[0..4] != STORE_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let header = StoreHeader {
            version: u16::from_le_bytes(head[4..6].try_into().unwrap()),
            schema_hash: u64::from_le_bytes(head[6..14].try_into().unwrap()),
            t: u16::from_le_bytes(head[14..16].try_into().unwrap()),
            m: head[16],
            bits_per_index: head[17],
            record_count: u64::from_le_bytes(head[18..26].try_into().unwrap()),
        };
        if header.version != STORE_VERSION {
            return Err(fmt(format!("unsupported version {}", header.version)));
        }
        if header.record_count == COUNT_UNFINISHED {
            return Err(fmt("store build never completed".into()));
        }
        let mut records = Vec::new();
        f.read_to_end(&mut records)?;
        let expect = header.record_count as usize * header.record_bytes();
        if records.len() != expect {
            return Err(fmt(format!(
                "record bytes {} != count {} x record size {}",
                records.len(),
                header.record_count,
                header.record_bytes()
            )));
        }
        Ok(TokenStore { header, records })
    }

    pub fn len(&self) -> usize {
        self.header.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record_id(&self, i: usize) -> u64 {
        let off = i * self.header.record_bytes();
        u64::from_le_bytes(self.records[off..off + 8].try_into().unwrap())
    }

    /// Binary search by sample id. A missing key is None, not an error.
    pub fn lookup(&self, sample_id: u64) -> Option<TokenSample> {
        let mut lo = 0usize;
        let mut hi = self.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.record_id(mid).cmp(&sample_id) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => {
                    let rb = self.header.record_bytes();
                    let off = mid * rb + 8;
                    return unpack(
                        &self.records[off..mid * rb + rb],
                        self.header.t as usize,
                        self.header.m as usize,
                        self.header.bits_per_index as usize,
                    )
                    .ok();
                }
            }
        }
        None
    }
}

// --- compression accounting ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRepr {
    Hgaq,
    ItemIdOnly,
    ItemPlusKey,
    DenseRaw,
}

impl TokenRepr {
    pub fn name(&self) -> &'static str {
        match self {
            TokenRepr::Hgaq => "hgaq",
            TokenRepr::ItemIdOnly => "item_id_only",
            TokenRepr::ItemPlusKey => "item_plus_key",
            TokenRepr::DenseRaw => "dense_raw",
        }
    }
}

/// Accounting inputs. Defaults mirror the reference setup: 600 non-sequence
/// fields at d_e = 8 stored as float32, T = 27 sub-tokens, M = 3 levels,
/// V = 256 codes, 24 scalar key fields, a 512-wide dense embedding.
#[derive(Clone, Copy, Debug)]
pub struct CompressionParams {
    pub n_fields: u64,
    pub embed_dim: u64,
    pub t: u64,
    pub m: u64,
    pub v: u64,
    pub key_fields: u64,
    pub dense_dim: u64,
}

impl Default for CompressionParams {
    fn default() -> Self {
        CompressionParams {
            n_fields: 600,
            embed_dim: 8,
            t: 27,
            m: 3,
            v: 256,
            key_fields: 24,
            dense_dim: 512,
        }
    }
}

impl CompressionParams {
    pub fn from_schema(schema: &crate::schema::FeatureSchema, key_fields: u64) -> Self {
        let embed_dim = schema
            .fields
            .iter()
            .map(|f| f.embed_dim as u64)
            .max()
            .unwrap_or(8);
        CompressionParams {
            n_fields: schema.fields.len() as u64,
            embed_dim,
            t: schema.num_slots() as u64,
            m: schema.rvq_levels as u64,
            v: schema.codebook_size as u64,
            key_fields,
            dense_dim: 512,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CompressionReport {
    pub variant: TokenRepr,
    pub snapshot_bits: u64,
    pub token_bits: u64,
    pub ratio: f64,
}

/// Bit budget of one stored history token against the raw float32 snapshot.
pub fn compression_report(params: &CompressionParams, variant: TokenRepr) -> CompressionReport {
    let snapshot_bits = params.n_fields * params.embed_dim * 32;
    let token_bits = match variant {
        TokenRepr::Hgaq => params.t * params.m * (params.v.trailing_zeros() as u64),
        TokenRepr::ItemIdOnly => 64,
        TokenRepr::ItemPlusKey => 64 + params.key_fields * 32,
        TokenRepr::DenseRaw => params.dense_dim * 32,
    };
    CompressionReport {
        variant,
        snapshot_bits,
        token_bits,
        ratio: snapshot_bits as f64 / token_bits as f64,
    }
}
