//! Classification on top of learned embeddings: a softmax linear probe on
//! frozen features, and a fine-tune variant that also updates one encoder
//! head.

use serde::{Deserialize, Serialize};

use super::ranking::{pr_auc, roc_auc, ScoredLabel};
use crate::data::make_batches;
use crate::encoders::EncoderParams;
use crate::error::{Mc3Error, Result};
use crate::math::{AdamConfig, AdamState, Matrix, Rng};
use crate::modality::ModalityId;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            lr: 1e-2,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Mc3Error::config("probe_batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Mc3Error::config("probe_lr", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub top1: f64,
    pub top5: f64,
    /// Mean per-class accuracy over the classes present in the test labels.
    pub mca: f64,
    /// Mean one-vs-rest average precision.
    pub map: f64,
    /// Mean one-vs-rest ROC-AUC.
    pub mauc: f64,
}

/// Softmax affine classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearProbe {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LinearProbe {
            weight: Matrix::zeros(classes, dim),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_nt(&self.weight)?;
        z.add_row_broadcast(self.bias.as_slice())?;
        Ok(z)
    }

    /// Row-wise softmax probabilities.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.logits(x)?;
        softmax_rows(&mut z);
        Ok(z)
    }
}

fn softmax_rows(z: &mut Matrix) {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let mut p = logits.clone();
    softmax_rows(&mut p);
    let b = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= p.get(i, y).max(f64::MIN_POSITIVE).ln();
        let v = p.get(i, y);
        p.set(i, y, v - 1.0);
    }
    p.scale_inplace(1.0 / b);
    (loss / b, p)
}

fn class_count(train: &[usize], test: &[usize]) -> Result<usize> {
    let c = train.iter().chain(test).max().map_or(0, |m| m + 1);
    let mut seen = vec![false; c];
    for &y in train {
        seen[y] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Mc3Error::DegenerateLabels("probe training labels need at least two classes".into()));
    }
    Ok(c)
}

fn check_rows(x: &Matrix, y: &[usize], what: &str) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Mc3Error::shape(format!("{} {what} labels", x.rows()), y.len()));
    }
    Ok(())
}

/// Trains a softmax probe with Adam on fixed features and reports metrics on
/// the test split.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<(ClassMetrics, LinearProbe)> {
    cfg.validate()?;
    check_rows(train_x, train_y, "train")?;
    check_rows(test_x, test_y, "test")?;
    let classes = class_count(train_y, test_y)?;
    let mut probe = LinearProbe::zeros(classes, train_x.cols());
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut sw = AdamState::for_params(adam, &probe.weight);
    let mut sb = AdamState::for_params(adam, &probe.bias);
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derive(cfg.seed, &[0x960B, epoch as u64]);
        for batch in make_batches(train_x.rows(), cfg.batch_size, &mut rng, false) {
            let x = train_x.select_rows(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (_, dz) = cross_entropy(&probe.logits(&x)?, &y);
            let gw = dz.matmul_tn(&x)?;
            let gb = Matrix::row_vector(&dz.sum_rows())?;
            sw.update(&mut probe.weight, &gw)?;
            sb.update(&mut probe.bias, &gb)?;
        }
    }
    let metrics = class_metrics(&probe.predict(test_x)?, test_y)?;
    Ok((metrics, probe))
}

/// Like [`linear_probe`] on raw features of modality `m`, but the head of
/// `m` is trained jointly with the probe. Returns the metrics and the
/// updated encoders.
pub fn fine_tune(
    encoders: &EncoderParams,
    m: ModalityId,
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<(ClassMetrics, EncoderParams)> {
    cfg.validate()?;
    check_rows(train_x, train_y, "train")?;
    check_rows(test_x, test_y, "test")?;
    let classes = class_count(train_y, test_y)?;
    let mut enc = encoders.clone();
    let mut probe = LinearProbe::zeros(classes, enc.latent_dim());
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut sw = AdamState::for_params(adam, &probe.weight);
    let mut sb = AdamState::for_params(adam, &probe.bias);
    let mut head_states: Vec<AdamState> = enc
        .head(m)
        .layers()
        .iter()
        .flat_map(|l| [AdamState::for_params(adam, &l.weight), AdamState::for_params(adam, &l.bias)])
        .collect();
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derive(cfg.seed, &[0xF17E, epoch as u64]);
        for batch in make_batches(train_x.rows(), cfg.batch_size, &mut rng, false) {
            let x = train_x.select_rows(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let cache = enc.forward(m, &x)?;
            let (_, dz) = cross_entropy(&probe.logits(&cache.output)?, &y);
            let gw = dz.matmul_tn(&cache.output)?;
            let gb = Matrix::row_vector(&dz.sum_rows())?;
            let de = dz.matmul(&probe.weight)?;
            let (hg, _) = enc.backward(&cache, &de, false)?;
            sw.update(&mut probe.weight, &gw)?;
            sb.update(&mut probe.bias, &gb)?;
            let params = enc.head_mut(m).layers_mut().iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]);
            let grads = hg.layers.iter().flat_map(|l| [&l.weight, &l.bias]);
            for ((p, g), st) in params.zip(grads).zip(head_states.iter_mut()) {
                st.update(p, g)?;
            }
        }
    }
    let test_e = enc.forward(m, test_x)?.output;
    let metrics = class_metrics(&probe.predict(&test_e)?, test_y)?;
    Ok((metrics, enc))
}

/// Metrics from per-class scores (one row per sample, one column per
/// class). Ranking ties go to the lower class index.
pub fn class_metrics(scores: &Matrix, labels: &[usize]) -> Result<ClassMetrics> {
    check_rows(scores, labels, "scored")?;
    let c = scores.cols();
    if labels.is_empty() {
        return Err(Mc3Error::DegenerateLabels("no test samples".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Mc3Error::DegenerateLabels(format!("label {y} outside {c} scored classes")));
    }
    scores.check_finite("class scores")?;
    let n = labels.len() as f64;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut per_class = vec![(0usize, 0usize); c];
    for (i, &y) in labels.iter().enumerate() {
        let row = scores.row(i);
        let rank = (0..c)
            .filter(|&k| row[k] > row[y] || (row[k] == row[y] && k < y))
            .count();
        top1 += (rank == 0) as usize;
        top5 += (rank < 5) as usize;
        per_class[y].1 += 1;
        per_class[y].0 += (rank == 0) as usize;
    }
    let present: Vec<usize> = (0..c).filter(|&k| per_class[k].1 > 0).collect();
    let mca = present
        .iter()
        .map(|&k| per_class[k].0 as f64 / per_class[k].1 as f64)
        .sum::<f64>()
        / present.len() as f64;

    let (mut ap, mut auc, mut counted) = (0.0, 0.0, 0usize);
    for &k in &present {
        if per_class[k].1 == labels.len() {
            continue;
        }
        let s: Vec<ScoredLabel> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| ScoredLabel::new(scores.get(i, k), y == k))
            .collect();
        ap += pr_auc(&s)?;
        auc += roc_auc(&s)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(Mc3Error::DegenerateLabels("test labels contain a single class".into()));
    }
    Ok(ClassMetrics {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        mca,
        map: ap / counted as f64,
        mauc: auc / counted as f64,
    })
}
