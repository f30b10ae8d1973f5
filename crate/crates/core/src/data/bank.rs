//! Feature bank files.
//!
//! ```text
//! magic    4 bytes  "MC3F"
//! version  u32      1
//! modality u8       0 = audio, 1 = video, 2 = language
//! count    u32      number of rows
//! dim      u32      row length
//! payload  count*dim f32, row-major
//! ```
//!
//! All integers and floats are little-endian. Rows are widened to `f64` in
//! memory; saving narrows back to `f32`.

use std::path::Path;

use crate::binio::{read_file, write_atomic, LeReader, LeWriter};
use crate::error::{Mc3Error, Result};
use crate::math::Matrix;
use crate::modality::ModalityId;

pub const BANK_MAGIC: [u8; 4] = *b"MC3F";
pub const BANK_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    modality: ModalityId,
    features: Matrix,
}

/// Header fields of a bank file, readable without the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankHeader {
    pub modality: ModalityId,
    pub count: usize,
    pub dim: usize,
}

impl FeatureBank {
    pub fn new(modality: ModalityId, features: Matrix) -> Result<Self> {
        features.check_finite("feature bank")?;
        Ok(FeatureBank { modality, features })
    }

    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn count(&self) -> usize {
        self.features.rows()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Rounds every entry to the nearest `f32`, the precision stored on disk.
    pub fn round_to_f32(&mut self) {
        for v in self.features.as_mut_slice() {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new(Vec::with_capacity(HEADER_LEN + self.features.len() * 4));
        let _ = (|| -> std::io::Result<()> {
            w.bytes(&BANK_MAGIC)?;
            w.u32(BANK_VERSION)?;
            w.u8(self.modality.code())?;
            w.u32(self.count() as u32)?;
            w.u32(self.dim() as u32)?;
            w.f32s(self.features.as_slice())
        })();
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = LeReader::new(buf);
        let header = parse_header(&mut r, path)?;
        let n = header.count * header.dim;
        let data = r.f32s_as_f64(n).ok_or_else(|| Mc3Error::TruncatedFile {
            path: path.to_path_buf(),
            reason: format!(
                "header promises {} rows of {} floats, payload holds {} bytes",
                header.count,
                header.dim,
                buf.len() - HEADER_LEN
            ),
        })?;
        if r.remaining() != 0 {
            return Err(Mc3Error::TruncatedFile {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes after payload", r.remaining()),
            });
        }
        FeatureBank::new(header.modality, Matrix::new(header.count, header.dim, data)?)
    }
}

fn parse_header(r: &mut LeReader<'_>, path: &Path) -> Result<BankHeader> {
    let short = || Mc3Error::TruncatedFile {
        path: path.to_path_buf(),
        reason: "incomplete header".into(),
    };
    let magic = r.magic().ok_or_else(short)?;
    if magic != BANK_MAGIC {
        return Err(Mc3Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let version = r.u32().ok_or_else(short)?;
    if version != BANK_VERSION {
        return Err(Mc3Error::VersionMismatch(format!(
            "{}: bank version {version}, expected {BANK_VERSION}",
            path.display()
        )));
    }
    let code = r.u8().ok_or_else(short)?;
    let modality = ModalityId::from_code(code).ok_or_else(|| Mc3Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("unknown modality code {code}"),
    })?;
    let count = r.u32().ok_or_else(short)? as usize;
    let dim = r.u32().ok_or_else(short)? as usize;
    Ok(BankHeader {
        modality,
        count,
        dim,
    })
}

pub fn save_bank(bank: &FeatureBank, path: &Path) -> Result<()> {
    write_atomic(path, &bank.to_bytes())
}

pub fn load_bank(path: &Path) -> Result<FeatureBank> {
    FeatureBank::from_bytes(&read_file(path)?, path)
}

/// Reads only the header of a bank file.
pub fn read_bank_header(path: &Path) -> Result<BankHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Mc3Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    f.by_ref()
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Mc3Error::io(path, e))?;
    parse_header(&mut LeReader::new(&buf), path)
}
