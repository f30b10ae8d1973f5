//! Synthetic three-modality corpus with known overlap structure.
//!
//! Each concept `k` owns a unit latent `z_k`. Every sample draws an action
//! concept and one of five overlap regions, and each modality then carries one
//! of three signals:
//!
//! | region | audio          | video          | language |
//! |--------|----------------|----------------|----------|
//! | I      | action         | action         | action   |
//! | II     | distractor     | distractor     | action   |
//! | III    | independent    | action         | action   |
//! | IV     | action         | distractor     | action   |
//! | V      | independent    | independent    | independent |
//!
//! * action: `W_m z_k`
//! * distractor: `D_m z_k'` for a second concept `k' != k`, shared between the
//!   modalities that carry it
//! * independent: `W_m u` for a fresh random unit latent `u` per modality
//!
//! `W_m` and `D_m` are fixed seeded Gaussian maps; every modality adds
//! isotropic noise of scale `noise`. The distractor maps are separate from the
//! action maps, so co-occurring background content is correlated across audio
//! and video without being the narrated action. Only region I is sounding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bank::{save_bank, FeatureBank};
use super::manifest::{save_manifest, FeatureRef, RegionLabel, SampleRecord, Split};
use crate::error::{Mc3Error, Result};
use crate::math::{Matrix, Rng};
use crate::modality::{ModalityId, PerModality};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub concepts: usize,
    pub latent_dim: usize,
    pub dims: PerModality<usize>,
    /// Probabilities of regions I..V.
    pub region_probs: [f64; 5],
    pub noise: f64,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub verbs: usize,
    pub nouns: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            concepts: 100,
            latent_dim: 32,
            dims: PerModality([64, 96, 48]),
            region_probs: [0.4, 0.2, 0.15, 0.15, 0.1],
            noise: 0.25,
            seed: 7,
            train: 10_000,
            val: 1_000,
            test: 2_000,
            verbs: 12,
            nouns: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concepts < 2 {
            return Err(Mc3Error::config("concepts", "need at least two concepts"));
        }
        if self.latent_dim == 0 {
            return Err(Mc3Error::config("latent_dim", "must be >= 1"));
        }
        for (m, d) in self.dims.iter() {
            if *d == 0 {
                return Err(Mc3Error::config(format!("dim_{}", m.name()), "must be >= 1"));
            }
        }
        if self.region_probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Mc3Error::config("region_probs", "probabilities must be nonnegative"));
        }
        let total: f64 = self.region_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Mc3Error::config(
                "region_probs",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Mc3Error::config("noise", "must be nonnegative"));
        }
        if self.verbs * self.nouns < self.concepts {
            return Err(Mc3Error::config(
                "verbs",
                format!(
                    "{} verbs x {} nouns cannot label {} concepts",
                    self.verbs, self.nouns, self.concepts
                ),
            ));
        }
        if self.train + self.val + self.test == 0 {
            return Err(Mc3Error::config("train", "corpus would be empty"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Generated banks and records plus the ground truth behind them.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub banks: PerModality<FeatureBank>,
    pub records: Vec<SampleRecord>,
    /// Action concept of each record.
    pub concept_of: Vec<usize>,
    /// `(verb, noun)` tag indices per concept.
    pub groups: Vec<(usize, usize)>,
}

pub fn bank_file_name(m: ModalityId) -> String {
    format!("{}.mc3f", m.name())
}

pub fn verb_tag(i: usize) -> String {
    format!("verb{i:02}")
}

pub fn noun_tag(i: usize) -> String {
    format!("noun{i:02}")
}

#[derive(Clone, Copy)]
enum Signal {
    Action,
    Distractor,
    Independent,
}

fn signals(region: RegionLabel) -> [Signal; 3] {
    use Signal::*;
    match region {
        RegionLabel::AllAgree => [Action, Action, Action],
        RegionLabel::AvOnly => [Distractor, Distractor, Action],
        RegionLabel::VlOnly => [Independent, Action, Action],
        RegionLabel::AlOnly => [Action, Distractor, Action],
        RegionLabel::None => [Independent, Independent, Independent],
    }
}

fn gaussian_map(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn apply(map: &Matrix, z: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(map.row_iter()) {
        *o += crate::math::dot(row, z);
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    // separate streams keep the structure fixed when only counts change
    let mut structure = Rng::derive(cfg.seed, &[0]);
    let latents: Vec<Vec<f64>> = (0..cfg.concepts)
        .map(|_| structure.unit_vector(cfg.latent_dim))
        .collect();
    let action_maps = PerModality::from_fn(|m| gaussian_map(&mut structure, cfg.dims[m], cfg.latent_dim));
    let distractor_maps = PerModality::from_fn(|m| gaussian_map(&mut structure, cfg.dims[m], cfg.latent_dim));

    let mut grid: Vec<(usize, usize)> = (0..cfg.verbs)
        .flat_map(|v| (0..cfg.nouns).map(move |n| (v, n)))
        .collect();
    structure.shuffle(&mut grid);
    let groups: Vec<(usize, usize)> = grid.into_iter().take(cfg.concepts).collect();

    let mut rng = Rng::derive(cfg.seed, &[1]);
    let n = cfg.total();
    let mut feats = PerModality::from_fn(|m| Matrix::zeros(n, cfg.dims[m]));
    let mut records = Vec::with_capacity(n);
    let mut concept_of = Vec::with_capacity(n);
    for i in 0..n {
        let region = RegionLabel::ALL[rng.categorical(&cfg.region_probs)];
        let k = rng.below(cfg.concepts);
        let distractor = {
            let d = rng.below(cfg.concepts - 1);
            if d >= k {
                d + 1
            } else {
                d
            }
        };
        for (m, sig) in ModalityId::ALL.into_iter().zip(signals(region)) {
            let row = feats[m].row_mut(i);
            match sig {
                Signal::Action => apply(&action_maps[m], &latents[k], row),
                Signal::Distractor => apply(&distractor_maps[m], &latents[distractor], row),
                Signal::Independent => {
                    let u = rng.unit_vector(cfg.latent_dim);
                    apply(&action_maps[m], &u, row);
                }
            }
            if cfg.noise > 0.0 {
                for v in row.iter_mut() {
                    *v += cfg.noise * rng.normal();
                }
            }
        }
        let split = if i < cfg.train {
            Split::Train
        } else if i < cfg.train + cfg.val {
            Split::Val
        } else {
            Split::Test
        };
        let (verb, noun) = groups[k];
        records.push(SampleRecord {
            id: format!("s{i:06}"),
            features: PerModality::from_fn(|m| FeatureRef {
                bank: bank_file_name(m),
                row: i,
            }),
            sounding: Some(region == RegionLabel::AllAgree),
            verb: Some(verb_tag(verb)),
            noun: Some(noun_tag(noun)),
            split,
            timestamp: Some((rng.uniform(0.0, 3600.0) * 10.0).round() / 10.0),
            region: Some(region),
        });
        concept_of.push(k);
    }
    let banks = PerModality::try_from_fn(|m| {
        let mut b = FeatureBank::new(m, std::mem::replace(&mut feats[m], Matrix::zeros(0, 0)))?;
        b.round_to_f32();
        Ok::<_, Mc3Error>(b)
    })?;
    Ok(SyntheticCorpus {
        banks,
        records,
        concept_of,
        groups,
    })
}

impl SyntheticCorpus {
    /// Writes the three banks and `manifest.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (m, b) in self.banks.iter() {
            save_bank(b, &dir.join(bank_file_name(m)))?;
        }
        save_manifest(&self.records, &dir.join("manifest.jsonl"))
    }

    pub fn region_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for r in &self.records {
            if let Some(reg) = r.region {
                c[reg.index()] += 1;
            }
        }
        c
    }
}
