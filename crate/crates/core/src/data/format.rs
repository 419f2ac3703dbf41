//! The MSD1 dataset file: "MSD1" magic, little-endian u32 header length,
//! a JSON header (shape, sample rate, class names, domain ids, epoch
//! count), then one fixed-size record per epoch: d as u16, y as u8, k as
//! u32, and the signal as little-endian f32, channel-major. Everything is
//! little-endian. Records stream; a reader never needs more than one
//! record in memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{Dataset, DatasetHeader, EpochSample};

const MAGIC: [u8; 4] = *b"MSD1";
const VERSION: u32 = 1;

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut header = ds.header.clone();
    header.version = VERSION;
    let header_bytes = serde_json::to_vec(&header)?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let mut record = Vec::with_capacity(7 + 4 * header.channels * header.samples_per_epoch);
    for e in &ds.epochs {
        record.clear();
        record.extend_from_slice(&e.d.to_le_bytes());
        record.push(e.y);
        record.extend_from_slice(&e.k.to_le_bytes());
        for &v in e.signal.data() {
            record.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Streaming reader: the header is parsed eagerly, epochs are decoded one
/// record at a time as the iterator advances.
pub struct DatasetReader {
    header: DatasetHeader,
    reader: BufReader<File>,
    remaining: usize,
    buf: Vec<u8>,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let mut len_bytes = [0u8; 4];
        reader.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        if header_len > 1 << 20 {
            return Err(Error::Corrupt {
                detail: format!("implausible header length {header_len}"),
            });
        }
        let mut header_bytes = vec![0u8; header_len];
        reader.read_exact(&mut header_bytes)?;
        let header: DatasetHeader = serde_json::from_slice(&header_bytes)?;
        if header.version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: header.version,
            });
        }
        if header.channels == 0 || header.samples_per_epoch == 0 {
            return Err(Error::Corrupt {
                detail: "zero-sized epoch shape in header".into(),
            });
        }
        let record_len = 7 + 4 * header.channels * header.samples_per_epoch;
        Ok(DatasetReader {
            remaining: header.epochs,
            buf: vec![0u8; record_len],
            header,
            reader,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<EpochSample> {
        self.reader.read_exact(&mut self.buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Corrupt {
                    detail: "file ends mid-record".into(),
                }
            } else {
                Error::Io(e)
            }
        })?;
        let d = u16::from_le_bytes([self.buf[0], self.buf[1]]);
        let y = self.buf[2];
        let k = u32::from_le_bytes([self.buf[3], self.buf[4], self.buf[5], self.buf[6]]);
        let n_classes = self.header.class_names.len();
        if y as usize >= n_classes {
            return Err(Error::LabelOutOfRange {
                kind: "class",
                value: y as u32,
                max: n_classes as u32 - 1,
            });
        }
        if !self.header.domains.contains(&d) {
            return Err(Error::LabelOutOfRange {
                kind: "domain",
                value: d as u32,
                max: *self.header.domains.iter().max().unwrap_or(&0) as u32,
            });
        }
        let count = self.header.channels * self.header.samples_per_epoch;
        let mut data = Vec::with_capacity(count);
        for chunk in self.buf[7..].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let signal = Matrix::from_vec(self.header.channels, self.header.samples_per_epoch, data)?;
        Ok(EpochSample { d, y, k, signal })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<EpochSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.read_record())
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let mut epochs = Vec::with_capacity(header.epochs);
    for rec in reader.by_ref() {
        epochs.push(rec?);
    }
    let ds = Dataset { header, epochs };
    ds.validate()?;
    Ok(ds)
}
