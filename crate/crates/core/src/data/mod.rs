//! Corpus ingestion, synthetic generation and batching.

mod bank;
mod manifest;
mod synth;

use std::collections::HashMap;
use std::path::Path;

pub use bank::{load_bank, read_bank_header, save_bank, BankHeader, FeatureBank, BANK_MAGIC, BANK_VERSION};
pub use manifest::{
    load_manifest, manifest_to_string, parse_manifest, save_manifest, FeatureRef, RegionLabel, SampleRecord, Split,
};
pub use synth::{bank_file_name, generate_synthetic, noun_tag, verb_tag, SynthConfig, SyntheticCorpus};

use crate::error::{Mc3Error, Result};
use crate::math::{Matrix, Rng};
use crate::modality::{ModalityId, PerModality};

/// Records together with every bank they reference. Immutable once built.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<SampleRecord>,
    banks: HashMap<String, FeatureBank>,
}

impl Corpus {
    pub fn new(records: Vec<SampleRecord>, banks: HashMap<String, FeatureBank>) -> Result<Self> {
        for r in &records {
            for (m, fref) in r.features.iter() {
                let bank = banks.get(&fref.bank).ok_or_else(|| Mc3Error::DanglingReference {
                    record: r.id.clone(),
                    modality: m.to_string(),
                    bank: fref.bank.clone(),
                    row: fref.row,
                    count: 0,
                })?;
                if bank.modality() != m {
                    return Err(Mc3Error::InvalidDims(format!(
                        "record {}: {m} refers to a {} bank",
                        r.id,
                        bank.modality()
                    )));
                }
                if fref.row >= bank.count() {
                    return Err(Mc3Error::DanglingReference {
                        record: r.id.clone(),
                        modality: m.to_string(),
                        bank: fref.bank.clone(),
                        row: fref.row,
                        count: bank.count(),
                    });
                }
            }
        }
        let c = Corpus { records, banks };
        c.input_dims()?;
        Ok(c)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let mut banks = HashMap::new();
        for r in &records {
            for (_, fref) in r.features.iter() {
                if !banks.contains_key(&fref.bank) {
                    let b = load_bank(&manifest::bank_path(manifest, &fref.bank))?;
                    banks.insert(fref.bank.clone(), b);
                }
            }
        }
        Corpus::new(records, banks)
    }

    pub fn from_synthetic(s: &SyntheticCorpus) -> Result<Self> {
        let banks = s
            .banks
            .iter()
            .map(|(m, b)| (bank_file_name(m), b.clone()))
            .collect();
        Corpus::new(s.records.clone(), banks)
    }

    /// Feature dimension per modality; all banks of one modality must agree.
    pub fn input_dims(&self) -> Result<PerModality<usize>> {
        let mut dims: [Option<usize>; 3] = [None; 3];
        for b in self.banks.values() {
            let slot = &mut dims[b.modality().index()];
            match slot {
                Some(d) if *d != b.dim() => {
                    return Err(Mc3Error::InvalidDims(format!(
                        "{} banks disagree on dimension ({} vs {})",
                        b.modality(),
                        d,
                        b.dim()
                    )))
                }
                _ => *slot = Some(b.dim()),
            }
        }
        Ok(PerModality::from_fn(|m| dims[m.index()].unwrap_or(0)))
    }

    /// Indices of the records in `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Raw features for the given records, one row each.
    pub fn features(&self, m: ModalityId, records: &[usize]) -> Result<Matrix> {
        let dim = self.input_dims()?[m];
        let mut out = Matrix::zeros(records.len(), dim);
        for (o, &i) in records.iter().enumerate() {
            let fref = &self.records[i].features[m];
            let bank = &self.banks[&fref.bank];
            out.row_mut(o).copy_from_slice(bank.row(fref.row));
        }
        Ok(out)
    }

    pub fn bank(&self, name: &str) -> Option<&FeatureBank> {
        self.banks.get(name)
    }
}

/// Shuffles `0..n` with `rng` and cuts it into batches. With `drop_last` the
/// trailing partial batch is discarded.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut Rng, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}
