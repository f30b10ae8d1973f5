//! Central-difference verification of every analytic gradient in the crate:
//! the pairwise InfoNCE term, the six-pair contrastive sum, the detached
//! consensus term, the combined objective and the encoder backward pass.

use serde::Serialize;

use crate::encoders::{init_params, Activation, EncoderDims};
use crate::error::Result;
use crate::losses::{
    consensus_loss_with_targets, consensus_targets, contrastive_total, infonce_pair, mc3_loss, BatchEmbeddings,
    LossConfig,
};
use crate::math::{dot, finite_diff_check, Matrix, Rng, DEFAULT_STEP};
use crate::modality::{ModalityId, PerModality};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub max_batch: usize,
    pub max_dim: usize,
    pub step: f64,
    /// Scales one analytic gradient by 1.5 so the suite must fail. Used to
    /// verify that the harness can detect a broken derivative.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances: 20,
            max_batch: 8,
            max_dim: 16,
            step: DEFAULT_STEP,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub check: &'static str,
    pub instance: usize,
    pub batch: usize,
    pub dim: usize,
    pub max_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub results: Vec<GradCheckResult>,
}

impl GradCheckReport {
    pub const CHECKS: [&'static str; 5] = ["infonce_pair", "contrastive", "consensus_detached", "mc3", "encoder"];

    /// Largest error per check name, in `CHECKS` order.
    pub fn worst(&self) -> Vec<(&'static str, f64)> {
        Self::CHECKS
            .iter()
            .map(|&c| {
                let w = self
                    .results
                    .iter()
                    .filter(|r| r.check == c)
                    .map(|r| r.max_error)
                    .fold(0.0, f64::max);
                (c, w)
            })
            .collect()
    }

    pub fn max_error(&self) -> f64 {
        self.results.iter().map(|r| r.max_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.results.is_empty() && self.results.iter().all(|r| r.max_error < tol)
    }
}

fn unit_rows(rng: &mut Rng, b: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(b, d);
    for t in 0..b {
        m.row_mut(t).copy_from_slice(&rng.unit_vector(d));
    }
    m
}

fn fault(g: &Matrix, on: bool) -> Matrix {
    if on {
        g.scaled(1.5)
    } else {
        g.clone()
    }
}

/// Worst error over the three embedding matrices of `batch`.
fn check_batch(
    batch: &BatchEmbeddings,
    analytic: &PerModality<Matrix>,
    h: f64,
    f: impl Fn(&BatchEmbeddings) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for m in ModalityId::ALL {
        let e = finite_diff_check(|p| f(&batch.with(m, p.clone())?), batch.get(m), &analytic[m], h)?;
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn run_grad_checks(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let h = cfg.step;
    for inst in 0..cfg.instances {
        let mut rng = Rng::derive(cfg.seed, &[0x6AD, inst as u64]);
        let b = 1 + rng.below(cfg.max_batch.max(1));
        let d = 2 + rng.below(cfg.max_dim.max(2) - 1);
        let loss_cfg = LossConfig {
            temperature: rng.uniform(0.1, 1.0),
            ..LossConfig::default()
        };
        let batch = BatchEmbeddings::new(unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d))?;
        let push = |report: &mut GradCheckReport, check, max_error| {
            report.results.push(GradCheckResult {
                check,
                instance: inst,
                batch: b,
                dim: d,
                max_error,
            })
        };
        let broken = cfg.inject_fault && inst == 0;

        let (ea, ev) = (batch.get(ModalityId::Audio), batch.get(ModalityId::Video));
        let tau = loss_cfg.temperature;
        let (_, ga, gv) = infonce_pair(ea, ev, tau)?;
        let e1 = finite_diff_check(|p| Ok(infonce_pair(p, ev, tau)?.0), ea, &fault(&ga, broken), h)?;
        let e2 = finite_diff_check(|p| Ok(infonce_pair(ea, p, tau)?.0), ev, &gv, h)?;
        push(&mut report, "infonce_pair", e1.max(e2));

        let c = contrastive_total(&batch, &loss_cfg)?;
        let err = check_batch(&batch, &c.grads, h, |x| Ok(contrastive_total(x, &loss_cfg)?.loss))?;
        push(&mut report, "contrastive", err);

        let targets = consensus_targets(&batch, &loss_cfg)?;
        let k = consensus_loss_with_targets(&batch, &loss_cfg, &targets)?;
        let err = check_batch(&batch, &k.grads, h, |x| {
            Ok(consensus_loss_with_targets(x, &loss_cfg, &targets)?.loss)
        })?;
        push(&mut report, "consensus_detached", err);

        let m = mc3_loss(&batch, &loss_cfg)?;
        let err = check_batch(&batch, &m.grads, h, |x| {
            Ok(contrastive_total(x, &loss_cfg)?.loss
                + loss_cfg.consensus_weight * consensus_loss_with_targets(x, &loss_cfg, &targets)?.loss)
        })?;
        push(&mut report, "mc3", err);

        let hidden = if rng.below(2) == 0 { 0 } else { 1 + rng.below(8) };
        let dims = EncoderDims {
            input: PerModality::from_fn(|_| 1 + rng.below(cfg.max_dim.max(1))),
            hidden,
            latent: d,
        };
        let activation = if rng.below(2) == 0 { Activation::Tanh } else { Activation::Identity };
        let params = init_params(&dims, activation, &mut rng)?;
        let mut worst = 0.0f64;
        for modality in ModalityId::ALL {
            let x = Matrix::from_fn(b, dims.input[modality], |_, _| rng.normal());
            let up = Matrix::from_fn(b, d, |_, _| rng.normal());
            let cache = params.forward(modality, &x)?;
            let (grads, _) = params.backward(&cache, &up, false)?;
            let n_layers = grads.layers.len();
            for li in 0..n_layers {
                for which in 0..2 {
                    let analytic = if which == 0 { &grads.layers[li].weight } else { &grads.layers[li].bias };
                    let start = {
                        let l = &params.head(modality).layers()[li];
                        if which == 0 {
                            l.weight.clone()
                        } else {
                            l.bias.clone()
                        }
                    };
                    let err = finite_diff_check(
                        |p| {
                            let mut q = params.clone();
                            let l = &mut q.head_mut(modality).layers_mut()[li];
                            if which == 0 {
                                l.weight = p.clone();
                            } else {
                                l.bias = p.clone();
                            }
                            let out = q.forward(modality, &x)?.output;
                            Ok(dot(out.as_slice(), up.as_slice()))
                        },
                        &start,
                        analytic,
                        h,
                    )?;
                    worst = worst.max(err);
                }
            }
        }
        push(&mut report, "encoder", worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_and_is_repeatable() {
        let cfg = GradCheckConfig {
            instances: 6,
            ..GradCheckConfig::default()
        };
        let a = run_grad_checks(&cfg).unwrap();
        assert!(a.passed(DEFAULT_TOLERANCE), "{:?}", a.worst());
        assert_eq!(a.results.len(), 30);
        assert_eq!(a, run_grad_checks(&cfg).unwrap());
    }

    #[test]
    fn injected_fault_is_detected() {
        let cfg = GradCheckConfig {
            instances: 2,
            inject_fault: true,
            ..GradCheckConfig::default()
        };
        let r = run_grad_checks(&cfg).unwrap();
        assert!(!r.passed(DEFAULT_TOLERANCE));
    }
}
