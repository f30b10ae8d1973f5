//! Contrastive-consensus objective and its gradients with respect to the
//! unit-norm embeddings.
//!
//! * pairwise InfoNCE between modality `i` and `j`, negatives drawn from `j`;
//! * the per-sample consensus score, the bottleneck anchor similarity after a
//!   per-modality remap `K(x) = ((x + 1) / 2)^alpha`;
//! * the consensus loss pulling every anchor similarity toward that score.
//!
//! Gradients are with respect to the embedding rows as free variables; the
//! projection onto the sphere is handled by the encoder backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Mc3Error, Result};
use crate::math::{dot, Matrix};
use crate::modality::{ModalityId, PerModality};

/// Slack allowed outside [-1, 1] before a similarity is rejected.
pub const SIM_TOLERANCE: f64 = 1e-9;
const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConsensusGradient {
    /// The consensus score is a constant target.
    #[default]
    Detached,
    /// Gradients also flow through the bottleneck similarity.
    Full,
}

impl std::str::FromStr for ConsensusGradient {
    type Err = Mc3Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "detached" => Ok(ConsensusGradient::Detached),
            "full" => Ok(ConsensusGradient::Full),
            o => Err(Mc3Error::config("consensus_gradient", format!("unknown mode {o:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub anchor: ModalityId,
    /// Scaling exponent per modality; the anchor's entry is ignored.
    pub alpha: PerModality<f64>,
    pub consensus_gradient: ConsensusGradient,
    /// Ordered (query, negatives) modality pairs summed in the contrastive term.
    pub pairs: Vec<(ModalityId, ModalityId)>,
    /// Multiplier on the consensus term of the combined loss. 1 is the plain sum.
    pub consensus_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            anchor: ModalityId::Audio,
            alpha: PerModality([1.0, 0.5, 1.0]),
            consensus_gradient: ConsensusGradient::Detached,
            pairs: ModalityId::ordered_pairs(),
            consensus_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Mc3Error::config("temperature", "must be positive"));
        }
        for (m, a) in self.alpha.iter() {
            if m != self.anchor && !(*a > 0.0 && a.is_finite()) {
                return Err(Mc3Error::config(format!("alpha_{}", m.name()), "must be positive"));
            }
        }
        if self.pairs.is_empty() {
            return Err(Mc3Error::config("pairs", "at least one modality pair is required"));
        }
        if self.pairs.iter().any(|(i, j)| i == j) {
            return Err(Mc3Error::config("pairs", "a pair needs two distinct modalities"));
        }
        if !(self.consensus_weight >= 0.0) || !self.consensus_weight.is_finite() {
            return Err(Mc3Error::config("consensus_weight", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn non_anchor(&self) -> impl Iterator<Item = ModalityId> + '_ {
        ModalityId::ALL.into_iter().filter(move |m| *m != self.anchor)
    }
}

/// One `(batch, d)` matrix of unit-norm rows per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    mats: PerModality<Matrix>,
}

impl BatchEmbeddings {
    pub fn new(audio: Matrix, video: Matrix, language: Matrix) -> Result<Self> {
        let b = Self::unchecked(audio, video, language)?;
        for (m, mat) in b.mats.iter() {
            for (t, row) in mat.row_iter().enumerate() {
                let n = dot(row, row).sqrt();
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Mc3Error::InvalidDims(format!(
                        "{m} row {t} has norm {n}, expected unit norm"
                    )));
                }
            }
        }
        Ok(b)
    }

    /// Skips the unit-norm check; shapes are still validated. Meant for
    /// derivative probes that perturb rows off the sphere.
    pub fn unchecked(audio: Matrix, video: Matrix, language: Matrix) -> Result<Self> {
        audio.same_shape(&video)?;
        audio.same_shape(&language)?;
        for m in [&audio, &video, &language] {
            m.check_finite("embeddings")?;
        }
        Ok(BatchEmbeddings {
            mats: PerModality([audio, video, language]),
        })
    }

    pub fn from_per_modality(mats: PerModality<Matrix>) -> Result<Self> {
        let [a, v, l] = mats.0;
        Self::new(a, v, l)
    }

    pub fn get(&self, m: ModalityId) -> &Matrix {
        &self.mats[m]
    }

    pub fn with(&self, m: ModalityId, mat: Matrix) -> Result<Self> {
        let mut mats = self.mats.clone();
        mats[m] = mat;
        let [a, v, l] = mats.0;
        Self::unchecked(a, v, l)
    }

    pub fn batch_size(&self) -> usize {
        self.mats[ModalityId::Audio].rows()
    }

    pub fn dim(&self) -> usize {
        self.mats[ModalityId::Audio].cols()
    }

    fn zero_grads(&self) -> PerModality<Matrix> {
        self.mats.map(|_, m| Matrix::zeros(m.rows(), m.cols()))
    }
}

/// Scalar loss plus its gradient for each modality's embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: PerModality<Matrix>,
}

/// Combined loss with both addends reported separately.
#[derive(Clone, Debug, PartialEq)]
pub struct Mc3Output {
    pub loss: f64,
    pub grads: PerModality<Matrix>,
    pub contrastive: f64,
    pub consensus: f64,
}

/// InfoNCE of `ei` against `ej`: row `t` of `ei` must pick row `t` of `ej`
/// out of the whole batch. Returns `(loss, dL/d ei, dL/d ej)`.
pub fn infonce_pair(ei: &Matrix, ej: &Matrix, temperature: f64) -> Result<(f64, Matrix, Matrix)> {
    ei.same_shape(ej)?;
    if ei.rows() == 0 {
        return Err(Mc3Error::InvalidDims("empty batch".into()));
    }
    if !(temperature > 0.0) {
        return Err(Mc3Error::config("temperature", "must be positive"));
    }
    let b = ei.rows();
    let inv_t = 1.0 / temperature;
    let mut logits = ei.matmul_nt(ej)?;
    logits.scale_inplace(inv_t);
    let mut loss = 0.0;
    // logits become dL/dS in place
    for t in 0..b {
        let row = logits.row_mut(t);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let positive = row[t];
        loss += z.ln() - positive.ln();
        for v in row.iter_mut() {
            *v /= z * b as f64;
        }
        row[t] -= 1.0 / b as f64;
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Mc3Error::NonFinite("infonce loss".into()));
    }
    let mut gi = logits.matmul(ej)?;
    gi.scale_inplace(inv_t);
    let mut gj = logits.matmul_tn(ei)?;
    gj.scale_inplace(inv_t);
    Ok((loss, gi, gj))
}

/// Sum of InfoNCE over the configured ordered pairs.
pub fn contrastive_total(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossOutput> {
    if cfg.pairs.is_empty() {
        return Err(Mc3Error::config("pairs", "at least one modality pair is required"));
    }
    let mut grads = batch.zero_grads();
    let mut loss = 0.0;
    for &(i, j) in &cfg.pairs {
        let (l, gi, gj) = infonce_pair(batch.get(i), batch.get(j), cfg.temperature)?;
        loss += l;
        grads[i].add_assign(&gi)?;
        grads[j].add_assign(&gj)?;
    }
    Ok(LossOutput { loss, grads })
}

fn clamp_similarity(x: f64) -> Result<f64> {
    if !(x >= -1.0 - SIM_TOLERANCE && x <= 1.0 + SIM_TOLERANCE) {
        return Err(Mc3Error::OutOfRange {
            value: x,
            lo: -1.0,
            hi: 1.0,
        });
    }
    Ok(x.clamp(-1.0, 1.0))
}

/// `((x + 1) / 2)^alpha`, mapping a cosine similarity into [0, 1].
pub fn scale(x: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Mc3Error::config("alpha", "must be positive"));
    }
    let x = clamp_similarity(x)?;
    Ok(((x + 1.0) / 2.0).powf(alpha))
}

/// Inverse of [`scale`]: `2 y^(1/alpha) - 1`.
pub fn unscale(y: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Mc3Error::config("alpha", "must be positive"));
    }
    if !(-SIM_TOLERANCE..=1.0 + SIM_TOLERANCE).contains(&y) {
        return Err(Mc3Error::OutOfRange {
            value: y,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok(2.0 * y.clamp(0.0, 1.0).powf(1.0 / alpha) - 1.0)
}

/// Bottleneck of the anchor similarities of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Consensus {
    /// Raw similarity of the bottleneck modality.
    pub score: f64,
    pub argmin: ModalityId,
}

/// Picks the non-anchor modality whose scaled similarity is smallest (ties go
/// to the earlier modality). The score is that modality's raw similarity.
pub fn consensus_score(anchor_sims: &[(ModalityId, f64)], cfg: &LossConfig) -> Result<Consensus> {
    let mut sims: Vec<(ModalityId, f64)> = anchor_sims.to_vec();
    sims.sort_by_key(|(m, _)| *m);
    let expected: Vec<ModalityId> = cfg.non_anchor().collect();
    if sims.iter().map(|(m, _)| *m).collect::<Vec<_>>() != expected {
        return Err(Mc3Error::shape(
            format!("one similarity for each of {expected:?}"),
            format!("{:?}", sims.iter().map(|(m, _)| *m).collect::<Vec<_>>()),
        ));
    }
    let mut best: Option<(f64, ModalityId, f64)> = None;
    for (m, s) in sims {
        let k = scale(s, cfg.alpha[m])?;
        if best.is_none_or(|(bk, _, _)| k < bk) {
            best = Some((k, m, s));
        }
    }
    let (_, argmin, raw) = best.expect("at least one non-anchor modality");
    Ok(Consensus { score: raw, argmin })
}

fn anchor_similarities(batch: &BatchEmbeddings, cfg: &LossConfig, t: usize) -> Vec<(ModalityId, f64)> {
    let ea = batch.get(cfg.anchor).row(t);
    cfg.non_anchor()
        .map(|m| (m, dot(batch.get(m).row(t), ea)))
        .collect()
}

/// Consensus score for every sample in the batch.
pub fn consensus_targets(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<Vec<Consensus>> {
    (0..batch.batch_size())
        .map(|t| consensus_score(&anchor_similarities(batch, cfg, t), cfg))
        .collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Consensus loss against fixed per-sample targets. With detached gradients
/// this is exactly the training objective; it is exposed so that derivative
/// probes can hold the targets constant.
pub fn consensus_loss_with_targets(
    batch: &BatchEmbeddings,
    cfg: &LossConfig,
    targets: &[Consensus],
) -> Result<LossOutput> {
    let b = batch.batch_size();
    if targets.len() != b {
        return Err(Mc3Error::shape(b, targets.len()));
    }
    if b == 0 {
        return Err(Mc3Error::InvalidDims("empty batch".into()));
    }
    let full = cfg.consensus_gradient == ConsensusGradient::Full;
    let inv_b = 1.0 / b as f64;
    let anchor = cfg.anchor;
    let mut grads = batch.zero_grads();
    let mut loss = 0.0;
    for (t, target) in targets.iter().enumerate() {
        let ea = batch.get(anchor).row(t).to_vec();
        let bottleneck = batch.get(target.argmin).row(t).to_vec();
        for m in cfg.non_anchor() {
            let em = batch.get(m).row(t).to_vec();
            let s = dot(&em, &ea);
            let diff = s - target.score;
            loss += diff.abs();
            let g = sign(diff) * inv_b;
            if g == 0.0 {
                continue;
            }
            // d s / d e_m = e_a, d s / d e_a = e_m
            for (d, v) in grads[m].row_mut(t).iter_mut().zip(&ea) {
                *d += g * v;
            }
            for (d, v) in grads[anchor].row_mut(t).iter_mut().zip(&em) {
                *d += g * v;
            }
            if full && m != target.argmin {
                // the target is the bottleneck similarity e_k . e_a
                for (d, v) in grads[target.argmin].row_mut(t).iter_mut().zip(&ea) {
                    *d -= g * v;
                }
                for (d, v) in grads[anchor].row_mut(t).iter_mut().zip(&bottleneck) {
                    *d -= g * v;
                }
            }
        }
    }
    Ok(LossOutput {
        loss: loss * inv_b,
        grads,
    })
}

pub fn consensus_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossOutput> {
    let targets = consensus_targets(batch, cfg)?;
    consensus_loss_with_targets(batch, cfg, &targets)
}

/// Contrastive term plus (weighted) consensus term.
pub fn mc3_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<Mc3Output> {
    let c = contrastive_total(batch, cfg)?;
    let k = consensus_loss(batch, cfg)?;
    let mut grads = c.grads;
    for m in ModalityId::ALL {
        let mut g = k.grads[m].clone();
        g.scale_inplace(cfg.consensus_weight);
        grads[m].add_assign(&g)?;
    }
    Ok(Mc3Output {
        loss: c.loss + cfg.consensus_weight * k.loss,
        grads,
        contrastive: c.loss,
        consensus: k.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_check, normalize_unit, Rng};
    use ModalityId::*;

    fn unit_rows(rng: &mut Rng, b: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..b).map(|_| rng.unit_vector(d)).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn random_batch(seed: u64, b: usize, d: usize) -> BatchEmbeddings {
        let mut rng = Rng::new(seed);
        BatchEmbeddings::new(
            unit_rows(&mut rng, b, d),
            unit_rows(&mut rng, b, d),
            unit_rows(&mut rng, b, d),
        )
        .unwrap()
    }

    fn cfg_alpha(v: f64, l: f64) -> LossConfig {
        LossConfig {
            alpha: PerModality([1.0, v, l]),
            ..LossConfig::default()
        }
    }

    #[test]
    fn single_sample_infonce_is_zero() {
        let b = random_batch(1, 1, 8);
        let (l, gi, gj) = infonce_pair(b.get(Audio), b.get(Video), 0.07).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(gi.max_abs(), 0.0);
        assert_eq!(gj.max_abs(), 0.0);
        let all = contrastive_total(&b, &LossConfig::default()).unwrap();
        assert_eq!(all.loss, 0.0);
    }

    #[test]
    fn two_sample_closed_form() {
        // positives have similarity 1, negatives 0, tau = 1
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (l, _, _) = infonce_pair(&e, &e, 1.0).unwrap();
        // each term: -log(e / (e + 1)) = log(1 + e^-1)
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    #[test]
    fn infonce_rejects_bad_input() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 3);
        assert!(matches!(infonce_pair(&a, &b, 0.1), Err(Mc3Error::ShapeMismatch { .. })));
        assert!(infonce_pair(&a, &a, 0.0).is_err());
        assert!(infonce_pair(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3), 0.1).is_err());
    }

    #[test]
    fn bimodal_subset_and_symmetry() {
        let b = random_batch(5, 6, 4);
        let cfg = LossConfig {
            pairs: vec![(Audio, Video), (Video, Audio)],
            ..LossConfig::default()
        };
        let sub = contrastive_total(&b, &cfg).unwrap();
        let (l1, _, _) = infonce_pair(b.get(Audio), b.get(Video), cfg.temperature).unwrap();
        let (l2, _, _) = infonce_pair(b.get(Video), b.get(Audio), cfg.temperature).unwrap();
        assert!((sub.loss - (l1 + l2)).abs() < 1e-12);
        assert_eq!(sub.grads[Language].max_abs(), 0.0);

        let same = BatchEmbeddings::new(b.get(Audio).clone(), b.get(Audio).clone(), b.get(Audio).clone()).unwrap();
        let (x, _, _) = infonce_pair(same.get(Audio), same.get(Video), 0.07).unwrap();
        let (y, _, _) = infonce_pair(same.get(Video), same.get(Audio), 0.07).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn scale_values() {
        for a in [0.3, 1.0, 2.7] {
            assert_eq!(scale(1.0, a).unwrap(), 1.0);
            assert_eq!(scale(-1.0, a).unwrap(), 0.0);
        }
        assert!((scale(0.5, 0.5).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((scale(0.5, 0.5).unwrap() - 0.8660).abs() < 1e-4);
        for x in [-0.9, -0.1, 0.0, 0.4, 0.99] {
            assert_eq!(scale(x, 1.0).unwrap(), (x + 1.0) / 2.0);
            assert!((unscale(scale(x, 0.5).unwrap(), 0.5).unwrap() - x).abs() < 1e-12);
        }
        assert!(scale(1.0 + 1e-10, 1.0).is_ok());
        assert!(matches!(scale(1.01, 1.0), Err(Mc3Error::OutOfRange { .. })));
        assert!(scale(0.0, 0.0).is_err());
    }

    #[test]
    fn consensus_examples() {
        let c = consensus_score(&[(Video, 0.5), (Language, -0.2)], &cfg_alpha(1.0, 1.0)).unwrap();
        assert_eq!(c, Consensus { score: -0.2, argmin: Language });

        let c = consensus_score(&[(Video, 0.5), (Language, 0.9)], &cfg_alpha(0.5, 1.0)).unwrap();
        assert_eq!(c, Consensus { score: 0.5, argmin: Video });

        let c = consensus_score(&[(Language, 0.3), (Video, 0.3)], &cfg_alpha(1.0, 1.0)).unwrap();
        assert_eq!(c, Consensus { score: 0.3, argmin: Video });

        assert!(consensus_score(&[(Video, 0.3)], &cfg_alpha(1.0, 1.0)).is_err());
        assert!(matches!(
            consensus_score(&[(Video, 1.5), (Language, 0.0)], &cfg_alpha(1.0, 1.0)),
            Err(Mc3Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn consensus_loss_examples() {
        // single sample with anchor-video 0.8 and anchor-language 0.2
        let ea = vec![1.0, 0.0];
        let ev = vec![0.8, 0.6];
        let el = normalize_unit(&[0.2, (1.0f64 - 0.04).sqrt()]).unwrap();
        let b = BatchEmbeddings::new(
            Matrix::row_vector(&ea).unwrap(),
            Matrix::row_vector(&ev).unwrap(),
            Matrix::row_vector(&el).unwrap(),
        )
        .unwrap();
        let out = consensus_loss(&b, &cfg_alpha(1.0, 1.0)).unwrap();
        assert!((out.loss - 0.6).abs() < 1e-12, "{}", out.loss);

        // all three identical: consensus met
        let same = BatchEmbeddings::new(
            Matrix::row_vector(&ea).unwrap(),
            Matrix::row_vector(&ea).unwrap(),
            Matrix::row_vector(&ea).unwrap(),
        )
        .unwrap();
        let cfg = cfg_alpha(1.0, 1.0);
        assert_eq!(consensus_loss(&same, &cfg).unwrap().loss, 0.0);
        let m = mc3_loss(&same, &cfg).unwrap();
        assert_eq!(m.loss, 0.0);
        assert_eq!(m.consensus, 0.0);
    }

    #[test]
    fn all_agree_batch_adds_nothing() {
        let b = random_batch(3, 5, 6);
        let a = b.get(Audio).clone();
        let agree = BatchEmbeddings::new(a.clone(), a.clone(), a).unwrap();
        let cfg = LossConfig::default();
        let m = mc3_loss(&agree, &cfg).unwrap();
        let c = contrastive_total(&agree, &cfg).unwrap();
        assert_eq!(m.loss, c.loss);
        assert_eq!(m.grads, c.grads);
    }

    fn check_all_grads(
        batch: &BatchEmbeddings,
        analytic: &PerModality<Matrix>,
        f: impl Fn(&BatchEmbeddings) -> Result<f64>,
    ) -> f64 {
        let mut worst = 0.0f64;
        for m in ModalityId::ALL {
            let err = finite_diff_check(|p| f(&batch.with(m, p.clone())?), batch.get(m), &analytic[m], 1e-5).unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..6 {
            let b = random_batch(100 + seed, 2 + seed as usize, 5);
            let cfg = LossConfig::default();
            let c = contrastive_total(&b, &cfg).unwrap();
            let err = check_all_grads(&b, &c.grads, |x| Ok(contrastive_total(x, &cfg)?.loss));
            assert!(err < 1e-6, "contrastive {err}");

            let targets = consensus_targets(&b, &cfg).unwrap();
            let k = consensus_loss(&b, &cfg).unwrap();
            let err = check_all_grads(&b, &k.grads, |x| {
                Ok(consensus_loss_with_targets(x, &cfg, &targets)?.loss)
            });
            assert!(err < 1e-6, "consensus {err}");

            let full = LossConfig {
                consensus_gradient: ConsensusGradient::Full,
                ..cfg.clone()
            };
            let kf = consensus_loss(&b, &full).unwrap();
            // with the bottleneck choice fixed, the full-mode loss is a smooth
            // function of the rows away from kinks
            let err = check_all_grads(&b, &kf.grads, |x| {
                let tg: Vec<Consensus> = targets
                    .iter()
                    .enumerate()
                    .map(|(t, c)| Consensus {
                        score: dot(x.get(c.argmin).row(t), x.get(cfg.anchor).row(t)),
                        argmin: c.argmin,
                    })
                    .collect();
                Ok(consensus_loss_with_targets(x, &full, &tg)?.loss)
            });
            assert!(err < 1e-6, "full consensus {err}");
        }
    }

    #[test]
    fn validate_config() {
        assert!(LossConfig::default().validate().is_ok());
        let mut c = LossConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.alpha[Video] = -1.0;
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.alpha[Audio] = -1.0; // anchor exponent unused
        assert!(c.validate().is_ok());
        let mut c = LossConfig::default();
        c.pairs.clear();
        assert!(c.validate().is_err());
    }
}
