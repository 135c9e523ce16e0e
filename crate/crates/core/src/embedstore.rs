//! Precomputed embedding-pair datasets and the `EMBD` binary cache format.
//!
//! Layout (little-endian, no padding, no checksum):
//!
//! ```text
//! "EMBD" | version u16 = 1 | flags u16 (bit 0 = labeled) | dim_a u32 | dim_b u32 | record_count u64
//! record: pair_id u64 | label i32 | dim_a x f32 | dim_b x f32
//! ```
//!
//! The label field is always present; unlabeled records carry `-1`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const EMBD_MAGIC: [u8; 4] = *b"EMBD";
pub const EMBD_VERSION: u16 = 1;
pub const EMBD_HEADER_LEN: usize = 24;
const FLAG_LABELED: u16 = 1;

/// Label value for records without a class.
pub const UNLABELED: i32 = -1;

/// One aligned (modality A, modality B) pair as produced by the frozen encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub pair_id: u64,
    pub label: i32,
    pub vec_a: Vec<f32>,
    pub vec_b: Vec<f32>,
}

/// An immutable cache of encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub dim_a: usize,
    pub dim_b: usize,
    pub labeled: bool,
    pub records: Vec<PairRecord>,
}

/// A train/validation partition of record indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks dims, finiteness and pair_id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.dim_a == 0 || self.dim_b == 0 {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive (dim_a={}, dim_b={})",
                self.dim_a, self.dim_b
            )));
        }
        if self.dim_a > u32::MAX as usize || self.dim_b > u32::MAX as usize {
            return Err(Error::InvalidArgument("dimension exceeds u32".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for (i, rec) in self.records.iter().enumerate() {
            if rec.vec_a.len() != self.dim_a || rec.vec_b.len() != self.dim_b {
                return Err(Error::Shape(format!(
                    "record {i}: vector lengths {}/{} do not match dataset dims {}/{}",
                    rec.vec_a.len(),
                    rec.vec_b.len(),
                    self.dim_a,
                    self.dim_b
                )));
            }
            if rec.vec_a.iter().chain(&rec.vec_b).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "record {i} (pair_id {})",
                    rec.pair_id
                )));
            }
            if !seen.insert(rec.pair_id) {
                return Err(Error::DuplicatePairId(rec.pair_id));
            }
        }
        Ok(())
    }

    /// Modality-A vectors of the given records, promoted to f64, one row per index.
    pub fn gather_a(&self, indices: &[usize]) -> Array2<f64> {
        gather(indices, self.dim_a, |i| &self.records[i].vec_a)
    }

    /// Modality-B vectors of the given records, promoted to f64, one row per index.
    pub fn gather_b(&self, indices: &[usize]) -> Array2<f64> {
        gather(indices, self.dim_b, |i| &self.records[i].vec_b)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<i32> {
        indices.iter().map(|&i| self.records[i].label).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let mut w = BufWriter::new(File::create(path)?);
        let n = write_dataset(self, &mut w)?;
        w.flush()?;
        Ok(n)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_dataset(BufReader::new(File::open(path)?))
    }
}

fn gather<'a>(indices: &[usize], dim: usize, row: impl Fn(usize) -> &'a Vec<f32>) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), dim));
    for (mut dst, &i) in out.rows_mut().into_iter().zip(indices) {
        for (d, &s) in dst.iter_mut().zip(row(i)) {
            *d = f64::from(s);
        }
    }
    out
}

/// Serializes `dataset` as EMBD and returns the number of bytes written.
pub fn write_dataset<W: Write>(dataset: &PairDataset, mut sink: W) -> Result<u64> {
    dataset.validate()?;
    let flags = if dataset.labeled { FLAG_LABELED } else { 0 };
    let mut header = Vec::with_capacity(EMBD_HEADER_LEN);
    header.extend_from_slice(&EMBD_MAGIC);
    header.extend_from_slice(&EMBD_VERSION.to_le_bytes());
    header.extend_from_slice(&flags.to_le_bytes());
    header.extend_from_slice(&(dataset.dim_a as u32).to_le_bytes());
    header.extend_from_slice(&(dataset.dim_b as u32).to_le_bytes());
    header.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());
    sink.write_all(&header)?;

    let record_len = 12 + 4 * (dataset.dim_a + dataset.dim_b);
    let mut buf = Vec::with_capacity(record_len);
    for rec in &dataset.records {
        buf.clear();
        buf.extend_from_slice(&rec.pair_id.to_le_bytes());
        buf.extend_from_slice(&rec.label.to_le_bytes());
        for v in rec.vec_a.iter().chain(&rec.vec_b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    Ok((EMBD_HEADER_LEN + record_len * dataset.records.len()) as u64)
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], what: impl FnOnce() -> String) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what()),
        _ => Error::Io(e),
    })
}

/// Parses and validates an EMBD stream. Rejects trailing bytes.
pub fn read_dataset<R: Read>(mut source: R) -> Result<PairDataset> {
    let mut header = [0u8; EMBD_HEADER_LEN];
    read_exact_or(&mut source, &mut header[..4], || "magic".into())?;
    let magic: [u8; 4] = header[..4].try_into().unwrap();
    if magic != EMBD_MAGIC {
        return Err(Error::BadMagic {
            expected: EMBD_MAGIC,
            found: magic,
        });
    }
    read_exact_or(&mut source, &mut header[4..], || "header".into())?;
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != EMBD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let flags = u16::from_le_bytes([header[6], header[7]]);
    let dim_a = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let dim_b = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[16..24].try_into().unwrap());
    if dim_a == 0 || dim_b == 0 {
        return Err(Error::InvalidArgument(format!(
            "dims must be positive (dim_a={dim_a}, dim_b={dim_b})"
        )));
    }

    let record_len = 12 + 4 * (dim_a + dim_b);
    let mut buf = vec![0u8; record_len];
    // Capacity is bounded so a corrupt count cannot trigger a huge allocation.
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        read_exact_or(&mut source, &mut buf, || format!("record {i}"))?;
        let pair_id = u64::from_le_bytes(buf[..8].try_into().unwrap());
        let label = i32::from_le_bytes(buf[8..12].try_into().unwrap());
        let floats: Vec<f32> = buf[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (vec_a, vec_b) = floats.split_at(dim_a);
        records.push(PairRecord {
            pair_id,
            label,
            vec_a: vec_a.to_vec(),
            vec_b: vec_b.to_vec(),
        });
    }
    let mut probe = [0u8; 1];
    loop {
        match source.read(&mut probe) {
            Ok(0) => break,
            Ok(_) => return Err(Error::TrailingBytes),
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::Io(e)),
        }
    }

    let dataset = PairDataset {
        dim_a,
        dim_b,
        labeled: flags & FLAG_LABELED != 0,
        records,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Number of training records for `n` records at `train_fraction`:
/// round half away from zero, then clamp to `[1, n - 1]`.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    let raw = (train_fraction * n as f64).round() as usize;
    raw.clamp(1, n - 1)
}

/// Seeded shuffle of all record indices, partitioned into train and validation.
pub fn split_dataset(dataset: &PairDataset, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    split_indices(dataset.len(), train_fraction, seed)
}

/// [`split_dataset`] on a bare record count.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} record(s); need at least 2"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(train_count(n, train_fraction));
    Ok(SplitIndices {
        train: order,
        val,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, labeled: bool) -> PairDataset {
        PairDataset {
            dim_a: 2,
            dim_b: 3,
            labeled,
            records: (0..n)
                .map(|i| PairRecord {
                    pair_id: i as u64 * 7 + 1,
                    label: if labeled { (i % 3) as i32 } else { UNLABELED },
                    vec_a: vec![i as f32, -0.5],
                    vec_b: vec![1.0, 2.0, f32::MIN_POSITIVE * i as f32],
                })
                .collect(),
        }
    }

    fn bytes(d: &PairDataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(d, &mut out).unwrap();
        out
    }

    #[test]
    fn single_record_is_56_bytes() {
        let d = tiny(1, false);
        let mut out = Vec::new();
        assert_eq!(write_dataset(&d, &mut out).unwrap(), 56);
        assert_eq!(out.len(), 56);
        // label slot holds -1 even though the labeled flag is clear
        assert_eq!(&out[6..8], &[0, 0]);
        assert_eq!(&out[32..36], &(-1i32).to_le_bytes());
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let d = tiny(0, true);
        let out = bytes(&d);
        assert_eq!(out.len(), EMBD_HEADER_LEN);
        assert_eq!(read_dataset(&out[..]).unwrap(), d);
    }

    #[test]
    fn round_trip() {
        let d = tiny(5, true);
        assert_eq!(read_dataset(&bytes(&d)[..]).unwrap(), d);
    }

    #[test]
    fn bad_magic() {
        let mut out = bytes(&tiny(2, false));
        out[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_dataset(&out[..]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version() {
        let mut out = bytes(&tiny(2, false));
        out[4] = 2;
        assert!(matches!(read_dataset(&out[..]), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn truncation_names_record() {
        let out = bytes(&tiny(3, false));
        let cut = &out[..EMBD_HEADER_LEN + 32 + 10];
        match read_dataset(cut) {
            Err(Error::Truncated(what)) => assert_eq!(what, "record 1"),
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(read_dataset(&out[..10]), Err(Error::Truncated(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut out = bytes(&tiny(2, false));
        out.push(0);
        assert!(matches!(read_dataset(&out[..]), Err(Error::TrailingBytes)));
    }

    #[test]
    fn non_finite_rejected_both_ways() {
        let mut d = tiny(2, false);
        d.records[1].vec_b[0] = f32::NAN;
        assert!(matches!(write_dataset(&d, Vec::new()), Err(Error::NonFinite(_))));

        let mut out = bytes(&tiny(2, false));
        let off = EMBD_HEADER_LEN + 12;
        out[off..off + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(read_dataset(&out[..]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_pair_id_rejected() {
        let mut d = tiny(3, false);
        d.records[2].pair_id = d.records[0].pair_id;
        assert!(matches!(d.validate(), Err(Error::DuplicatePairId(1))));
        let mut ok = bytes(&tiny(3, false));
        let second = EMBD_HEADER_LEN + 32;
        ok[second..second + 8].copy_from_slice(&1u64.to_le_bytes());
        assert!(matches!(read_dataset(&ok[..]), Err(Error::DuplicatePairId(1))));
    }

    #[test]
    fn dim_mismatch_rejected() {
        let mut d = tiny(2, false);
        d.records[0].vec_a.push(0.0);
        assert!(matches!(write_dataset(&d, Vec::new()), Err(Error::Shape(_))));
    }

    #[test]
    fn split_sizes() {
        let s = split_indices(100, 0.67, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (67, 33));
        let s = split_indices(2, 0.99, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (1, 1));
        let s = split_indices(2, 0.01, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (1, 1));
        // 0.5 * 5 = 2.5 rounds away from zero
        assert_eq!(train_count(5, 0.5), 3);
    }

    #[test]
    fn split_is_deterministic() {
        assert_eq!(split_indices(3, 0.67, 7).unwrap(), split_indices(3, 0.67, 7).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
        assert!(split_indices(10, f64::NAN, 0).is_err());
    }

    #[test]
    fn seeds_change_permutation() {
        for s in 0..10u64 {
            let a = split_indices(16, 0.5, 2 * s).unwrap();
            let b = split_indices(16, 0.5, 2 * s + 1).unwrap();
            assert_ne!((a.train, a.val), (b.train, b.val));
        }
    }

    #[test]
    fn gather_promotes_rows() {
        let d = tiny(3, false);
        let a = d.gather_a(&[2, 0]);
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a[[0, 0]], 2.0);
        assert_eq!(a[[1, 1]], -0.5);
    }
}
