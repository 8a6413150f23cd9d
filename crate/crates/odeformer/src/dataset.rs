//! Binary CSI sequence files.
//!
//! Little-endian layout:
//!
//! ```text
//! header   "CSIQ" · version u16 = 1 · flags u16 = 0 · n_sequences u32
//!          · n_ant u16 · n_sc u16 · float_width u8 = 8 · 7 zero bytes
//! sequence n_points u16 · target flag u8 = 1
//!          · n_points × (timestamp f64 · n_ant·n_sc × (re f64, im f64))
//! ```
//!
//! `n_points` counts the inputs plus the target, which is stored last.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use odeformer_core::channel::{CsiMatrix, CsiSequence};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CSIQ";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

/// Sequences sharing one channel shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_ant: usize,
    pub n_sc: usize,
    pub sequences: Vec<CsiSequence>,
}

impl Dataset {
    pub fn new(n_ant: usize, n_sc: usize, sequences: Vec<CsiSequence>) -> Result<Self> {
        if let Some(s) = sequences.iter().find(|s| s.dims() != (n_ant, n_sc)) {
            return Err(Error::DimensionMismatch {
                expected: (n_ant, n_sc),
                found: s.dims(),
            });
        }
        Ok(Self { n_ant, n_sc, sequences })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_ant, self.n_sc)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Fails unless the stored shape is `expected`.
    pub fn expect_dims(&self, expected: (usize, usize)) -> Result<()> {
        if self.dims() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: self.dims(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let narrow = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the file format")))
        };
        let entries = self.n_ant * self.n_sc;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (3 + 6 * (8 + 16 * entries)));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        let count = u32::try_from(self.len()).map_err(|_| Error::Config("too many sequences".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&narrow(self.n_ant, "n_ant")?.to_le_bytes());
        out.extend_from_slice(&narrow(self.n_sc, "n_sc")?.to_le_bytes());
        out.push(8);
        out.extend_from_slice(&[0u8; 7]);
        for s in &self.sequences {
            out.extend_from_slice(&narrow(s.len() + 1, "sequence length")?.to_le_bytes());
            out.push(1);
            let points = s.timestamps().iter().zip(s.inputs());
            for (t, m) in points.chain(std::iter::once((&s.target_time(), s.target()))) {
                out.extend_from_slice(&t.to_le_bytes());
                for v in m.values() {
                    out.extend_from_slice(&v.re.to_le_bytes());
                    out.extend_from_slice(&v.im.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                what: "dataset",
                found: version.into(),
            });
        }
        let flags = r.u16()?;
        if flags != 0 {
            return Err(Error::malformed("dataset header", format!("unknown flags {flags:#x}")));
        }
        let count = r.u32()? as usize;
        let n_ant = r.u16()? as usize;
        let n_sc = r.u16()? as usize;
        let width = r.take(1)?[0];
        if width != 8 {
            return Err(Error::malformed("dataset header", format!("float width {width}, expected 8")));
        }
        r.take(7)?;
        let mut sequences = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let n_points = r.u16()? as usize;
            let flag = r.take(1)?[0];
            if flag != 1 || n_points < 2 {
                return Err(Error::malformed(
                    "dataset",
                    format!("sequence {i}: {n_points} points with target flag {flag}"),
                ));
            }
            let mut times = Vec::with_capacity(n_points);
            let mut mats = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                times.push(r.f64()?);
                let raw = r.take(16 * n_ant * n_sc)?;
                let values = raw
                    .chunks_exact(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..].try_into().unwrap()),
                        )
                    })
                    .collect();
                mats.push(CsiMatrix::new(n_ant, n_sc, values).map_err(|e| Error::malformed("dataset", e))?);
            }
            let target = mats.pop().unwrap();
            let target_time = times.pop().unwrap();
            let seq = CsiSequence::new(times, mats, target_time, target)
                .map_err(|e| Error::malformed("dataset", format!("sequence {i}: {e}")))?;
            sequences.push(seq);
        }
        if r.pos != bytes.len() {
            return Err(Error::malformed(
                "dataset",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self { n_ant, n_sc, sequences })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
