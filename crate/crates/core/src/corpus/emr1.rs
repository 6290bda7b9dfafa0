//! EMR1 record container.
//!
//! ```text
//! header   "EMR1" | u32 version | u64 record count
//! record   u32 presence bitmap | attribute block (172 bytes) | u32 sample count | f32 I,Q pairs
//! footer   "EMRM" | u32 dataset count | (u16 len, utf-8 name)* | (record entry, 32 bytes)*
//! trailer  u64 footer offset | "EMRE"
//! ```
//!
//! A record entry is `u64 offset | u32 sample count | u32 presence | u32 dataset
//! index | u32 crc32 | f64 snr (NaN when absent)`. All integers little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::schema::{IqRecord, SegmentationType};
use crate::error::{Error, Result};
use crate::synth::{IqWaveform, ModScheme, RadarKind};

pub const MAGIC: &[u8; 4] = b"EMR1";
pub const FORMAT_VERSION: u32 = 1;
const FOOTER_MAGIC: &[u8; 4] = b"EMRM";
const TRAILER_MAGIC: &[u8; 4] = b"EMRE";
const HEADER_LEN: u64 = 16;
const TRAILER_LEN: u64 = 12;
const ENTRY_LEN: usize = 32;
const NAME_FIELD: usize = 64;
pub(crate) const ATTR_BLOCK_LEN: usize = NAME_FIELD + 8 * 12 + 4 * 3;
const ABSENT_CODE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub offset: u64,
    pub sample_count: u32,
    pub presence: u32,
    pub dataset: u32,
    pub checksum: u32,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub record_count: u64,
    /// Byte offsets of this dataset's records, in file order.
    pub offsets: Vec<u64>,
    /// Sample count -> number of records.
    pub length_histogram: BTreeMap<u32, u64>,
    /// Union of the presence bitmaps of the dataset's records.
    pub presence: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub datasets: Vec<DatasetEntry>,
    pub records: Vec<RecordEntry>,
}

impl CorpusManifest {
    fn from_entries(dataset_names: Vec<String>, records: Vec<RecordEntry>) -> Self {
        let mut datasets: Vec<DatasetEntry> = dataset_names
            .into_iter()
            .map(|name| DatasetEntry {
                name,
                record_count: 0,
                offsets: Vec::new(),
                length_histogram: BTreeMap::new(),
                presence: 0,
            })
            .collect();
        for r in &records {
            let d = &mut datasets[r.dataset as usize];
            d.record_count += 1;
            d.offsets.push(r.offset);
            *d.length_histogram.entry(r.sample_count).or_default() += 1;
            d.presence |= r.presence;
        }
        Self { version: FORMAT_VERSION, datasets, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dataset_of(&self, index: usize) -> &str {
        &self.datasets[self.records[index].dataset as usize].name
    }

    /// Checks the manifest's structural invariants.
    pub fn validate(&self) -> Result<()> {
        for d in &self.datasets {
            let hist: u64 = d.length_histogram.values().sum();
            if hist != d.record_count || d.offsets.len() as u64 != d.record_count {
                return Err(Error::Corpus(format!("dataset {} counts disagree with its histogram", d.name)));
            }
        }
        if self.records.windows(2).any(|w| w[1].offset <= w[0].offset) {
            return Err(Error::Corpus("record offsets are not strictly increasing".into()));
        }
        if self.records.iter().any(|r| r.dataset as usize >= self.datasets.len()) {
            return Err(Error::Corpus("record references an unknown dataset".into()));
        }
        Ok(())
    }

    /// Human-readable JSON rendering for tooling.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn encode_record(rec: &IqRecord, out: &mut Vec<u8>) -> Result<()> {
    let name = rec.dataset_name.as_bytes();
    if name.len() >= NAME_FIELD {
        return Err(Error::Config(format!(
            "dataset name {:?} exceeds {} bytes",
            rec.dataset_name,
            NAME_FIELD - 1
        )));
    }
    out.extend_from_slice(&rec.presence_bitmap().to_le_bytes());
    let start = out.len();
    out.push(name.len() as u8);
    out.extend_from_slice(name);
    out.resize(start + NAME_FIELD, 0);
    let f = |out: &mut Vec<u8>, v: Option<f64>| out.extend_from_slice(&v.unwrap_or(0.0).to_le_bytes());
    let i = |out: &mut Vec<u8>, v: Option<i64>| out.extend_from_slice(&v.unwrap_or(0).to_le_bytes());
    let c = |out: &mut Vec<u8>, v: Option<u32>| out.extend_from_slice(&v.unwrap_or(ABSENT_CODE).to_le_bytes());
    f(out, Some(rec.sampling_rate()));
    i(out, rec.device_id);
    i(out, rec.transmission_id);
    i(out, rec.infer_class);
    f(out, rec.snr_db);
    f(out, rec.isr_db);
    c(out, rec.modulation_type.map(|m| m as u32));
    c(out, rec.radar_waveform_type.map(|k| k as u32));
    f(out, rec.pri_us);
    f(out, rec.pulse_time_delay_us);
    i(out, rec.num_pulses);
    f(out, rec.pulse_width_us);
    f(out, rec.band_width_hz);
    f(out, rec.amplitude);
    c(out, rec.radar_segmentation_type.map(SegmentationType::code));
    debug_assert_eq!(out.len() - start, ATTR_BLOCK_LEN);
    let n = u32::try_from(rec.len()).map_err(|_| Error::Config("record too long".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    for s in rec.waveform.samples() {
        out.extend_from_slice(&s.re.to_le_bytes());
        out.extend_from_slice(&s.im.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self.buf.get(self.pos..end).ok_or_else(|| Error::Corpus("truncated record".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_record(buf: &[u8]) -> Result<IqRecord> {
    let mut c = Cursor { buf, pos: 0 };
    let presence = c.u32()?;
    let has = |bit: usize| presence & (1 << bit) != 0;
    let name_field = c.take(NAME_FIELD)?;
    let name_len = name_field[0] as usize;
    let name = std::str::from_utf8(name_field.get(1..1 + name_len).ok_or_else(|| Error::Corpus("bad name length".into()))?)
        .map_err(|_| Error::Corpus("dataset name is not utf-8".into()))?
        .to_string();
    let sampling_rate = c.f64()?;
    let opt_i = |c: &mut Cursor, bit| c.i64().map(|v| has(bit).then_some(v));
    let opt_f = |c: &mut Cursor, bit| c.f64().map(|v| has(bit).then_some(v));
    let device_id = opt_i(&mut c, 0)?;
    let transmission_id = opt_i(&mut c, 1)?;
    let infer_class = opt_i(&mut c, 2)?;
    let snr_db = opt_f(&mut c, 3)?;
    let isr_db = opt_f(&mut c, 4)?;
    let modulation_code = c.u32()?;
    let radar_code = c.u32()?;
    let pri_us = opt_f(&mut c, 7)?;
    let pulse_time_delay_us = opt_f(&mut c, 8)?;
    let num_pulses = opt_i(&mut c, 9)?;
    let pulse_width_us = opt_f(&mut c, 10)?;
    let band_width_hz = opt_f(&mut c, 11)?;
    let amplitude = opt_f(&mut c, 12)?;
    let segmentation_code = c.u32()?;
    let modulation_type = if has(5) {
        Some(*ModScheme::ALL.get(modulation_code as usize).ok_or_else(|| Error::Corpus("bad modulation code".into()))?)
    } else {
        None
    };
    let radar_waveform_type = if has(6) {
        Some(*RadarKind::ALL.get(radar_code as usize).ok_or_else(|| Error::Corpus("bad radar code".into()))?)
    } else {
        None
    };
    let radar_segmentation_type = if has(13) { Some(SegmentationType::from_code(segmentation_code)?) } else { None };
    let n = c.u32()? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let re = c.f32()?;
        let im = c.f32()?;
        samples.push(Complex::new(re, im));
    }
    if c.pos != buf.len() {
        return Err(Error::Corpus("trailing bytes after record".into()));
    }
    let waveform = IqWaveform::new(samples, sampling_rate).map_err(|e| Error::Corpus(format!("invalid waveform: {e}")))?;
    Ok(IqRecord {
        waveform,
        dataset_name: name,
        device_id,
        transmission_id,
        infer_class,
        snr_db,
        isr_db,
        modulation_type,
        radar_waveform_type,
        pri_us,
        pulse_time_delay_us,
        num_pulses,
        pulse_width_us,
        band_width_hz,
        amplitude,
        radar_segmentation_type,
    })
}

/// Streaming writer. The header's record count is patched in `finish`.
pub struct CorpusWriter<W: Write + Seek> {
    inner: W,
    pos: u64,
    datasets: Vec<String>,
    entries: Vec<RecordEntry>,
    scratch: Vec<u8>,
}

impl CorpusWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write + Seek> CorpusWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        inner.write_all(&0u64.to_le_bytes())?;
        Ok(Self { inner, pos: HEADER_LEN, datasets: Vec::new(), entries: Vec::new(), scratch: Vec::new() })
    }

    pub fn push(&mut self, rec: &IqRecord) -> Result<()> {
        self.scratch.clear();
        encode_record(rec, &mut self.scratch)?;
        let dataset = match self.datasets.iter().position(|d| *d == rec.dataset_name) {
            Some(i) => i,
            None => {
                self.datasets.push(rec.dataset_name.clone());
                self.datasets.len() - 1
            }
        };
        self.entries.push(RecordEntry {
            offset: self.pos,
            sample_count: rec.len() as u32,
            presence: rec.presence_bitmap(),
            dataset: dataset as u32,
            checksum: crc32fast::hash(&self.scratch),
            snr_db: rec.snr_db,
        });
        self.inner.write_all(&self.scratch)?;
        self.pos += self.scratch.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(CorpusManifest, W)> {
        let footer_offset = self.pos;
        let mut f = Vec::new();
        f.extend_from_slice(FOOTER_MAGIC);
        f.extend_from_slice(&(self.datasets.len() as u32).to_le_bytes());
        for name in &self.datasets {
            f.extend_from_slice(&(name.len() as u16).to_le_bytes());
            f.extend_from_slice(name.as_bytes());
        }
        for e in &self.entries {
            f.extend_from_slice(&e.offset.to_le_bytes());
            f.extend_from_slice(&e.sample_count.to_le_bytes());
            f.extend_from_slice(&e.presence.to_le_bytes());
            f.extend_from_slice(&e.dataset.to_le_bytes());
            f.extend_from_slice(&e.checksum.to_le_bytes());
            f.extend_from_slice(&e.snr_db.unwrap_or(f64::NAN).to_le_bytes());
        }
        f.extend_from_slice(&footer_offset.to_le_bytes());
        f.extend_from_slice(TRAILER_MAGIC);
        self.inner.write_all(&f)?;
        self.inner.seek(SeekFrom::Start(8))?;
        self.inner.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        self.inner.seek(SeekFrom::End(0))?;
        self.inner.flush()?;
        Ok((CorpusManifest::from_entries(self.datasets, self.entries), self.inner))
    }
}

pub fn write_records(records: &[IqRecord], path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let mut w = CorpusWriter::create(path)?;
    for r in records {
        w.push(r)?;
    }
    Ok(w.finish()?.0)
}

/// Random-access reader. Opening touches only the header, trailer and footer.
pub struct CorpusReader<R: Read + Seek> {
    inner: R,
    manifest: CorpusManifest,
    footer_offset: u64,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

fn corrupt(what: &str) -> Error {
    Error::Corpus(format!("{what}: file is truncated or not an EMR1 corpus"))
}

impl<R: Read + Seek> CorpusReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let file_len = inner.seek(SeekFrom::End(0))?;
        if file_len < HEADER_LEN + TRAILER_LEN {
            return Err(corrupt("too short"));
        }
        inner.seek(SeekFrom::Start(0))?;
        let mut header = [0u8; HEADER_LEN as usize];
        inner.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(Error::Corpus("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Corpus(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
        inner.seek(SeekFrom::Start(file_len - TRAILER_LEN))?;
        let mut trailer = [0u8; TRAILER_LEN as usize];
        inner.read_exact(&mut trailer)?;
        if &trailer[8..] != TRAILER_MAGIC {
            return Err(corrupt("missing trailer"));
        }
        let footer_offset = u64::from_le_bytes(trailer[..8].try_into().unwrap());
        if footer_offset < HEADER_LEN || footer_offset > file_len - TRAILER_LEN {
            return Err(corrupt("footer offset out of range"));
        }
        inner.seek(SeekFrom::Start(footer_offset))?;
        let mut footer = vec![0u8; (file_len - TRAILER_LEN - footer_offset) as usize];
        inner.read_exact(&mut footer)?;
        let mut c = Cursor { buf: &footer, pos: 0 };
        if c.take(4).map_err(|_| corrupt("footer"))? != FOOTER_MAGIC {
            return Err(corrupt("bad footer magic"));
        }
        let n_datasets = c.u32()? as usize;
        let mut names = Vec::with_capacity(n_datasets);
        for _ in 0..n_datasets {
            let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
            names.push(String::from_utf8(c.take(len)?.to_vec()).map_err(|_| corrupt("dataset name"))?);
        }
        if footer.len() - c.pos != count as usize * ENTRY_LEN {
            return Err(corrupt("record table size disagrees with header count"));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let offset = c.u64()?;
            let sample_count = c.u32()?;
            let presence = c.u32()?;
            let dataset = c.u32()?;
            let checksum = c.u32()?;
            let snr = c.f64()?;
            records.push(RecordEntry {
                offset,
                sample_count,
                presence,
                dataset,
                checksum,
                snr_db: (!snr.is_nan()).then_some(snr),
            });
        }
        let manifest = CorpusManifest::from_entries(names, records);
        manifest.validate()?;
        if manifest.records.last().is_some_and(|r| r.offset >= footer_offset) {
            return Err(corrupt("record offset beyond footer"));
        }
        Ok(Self { inner, manifest, footer_offset })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn read(&mut self, index: usize) -> Result<IqRecord> {
        let entry = self.manifest.records.get(index).ok_or_else(|| {
            Error::Corpus(format!("record index {index} out of range for {} records", self.manifest.len()))
        })?;
        let end = self.manifest.records.get(index + 1).map_or(self.footer_offset, |r| r.offset);
        let mut buf = vec![0u8; (end - entry.offset) as usize];
        self.inner.seek(SeekFrom::Start(entry.offset))?;
        self.inner.read_exact(&mut buf)?;
        if crc32fast::hash(&buf) != entry.checksum {
            return Err(Error::Corpus(format!("checksum mismatch for record {index}")));
        }
        decode_record(&buf)
    }

    pub fn read_many(&mut self, indices: &[usize]) -> Result<Vec<IqRecord>> {
        indices.iter().map(|&i| self.read(i)).collect()
    }

    pub fn read_all(&mut self) -> Result<Vec<IqRecord>> {
        (0..self.len()).map(|i| self.read(i)).collect()
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

pub fn read_records(path: impl AsRef<Path>, indices: &[usize]) -> Result<Vec<IqRecord>> {
    CorpusReader::open(path)?.read_many(indices)
}
