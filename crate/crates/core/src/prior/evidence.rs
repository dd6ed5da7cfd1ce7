//! Importance-sampled estimates of the log evidence `log P(X)`, using the
//! encoder posterior as the proposal.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::elbo::diag_gaussian_logpdf;
use super::{NormativePrior, PriorKind};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvidenceEstimate {
    pub log_evidence: f64,
    /// Delta-method standard error of `log_evidence`.
    pub std_error: f64,
}

fn log_mean_exp(log_w: &[f64]) -> EvidenceEstimate {
    let n = log_w.len() as f64;
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    EvidenceEstimate {
        log_evidence: max + mean.ln(),
        std_error: (var / n).sqrt() / mean,
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

/// Estimates `log P(X)` for every row of `x` from `samples` importance draws.
pub fn log_evidence_importance<R: Rng + ?Sized>(
    model: &NormativePrior,
    x: ArrayView2<f64>,
    rng: &mut R,
    samples: usize,
) -> Result<Vec<EvidenceEstimate>> {
    if samples < 2 {
        return Err(Error::Argument("importance sampling needs at least two draws".into()));
    }
    let enc = model.encode(x)?;
    let (batch, pixels) = x.dim();
    let m = model.latent_dim();
    let var_x = model.config.output_std.powi(2);
    let rec_const = -0.5 * pixels as f64 * (LN_2PI + var_x.ln());
    let zeros = vec![0.0; m];
    let ones = vec![1.0; m];
    let mut log_w = vec![Vec::with_capacity(samples); batch];
    for _ in 0..samples {
        let eps = Array2::from_shape_simple_fn((batch, m), || rng.sample::<f64, _>(StandardNormal));
        let z = &enc.mu_z + &(&enc.sigma_z * &eps);
        let mu_x = model.decode(z.view())?;
        let omega = match model.kind() {
            PriorKind::Vae => None,
            PriorKind::Gmvae => {
                let eps_w = Array2::from_shape_simple_fn((batch, m), || rng.sample::<f64, _>(StandardNormal));
                Some(enc.mu_omega.as_ref().expect("GMVAE") + &(enc.sigma_omega.as_ref().expect("GMVAE") * &eps_w))
            }
        };
        let mixture = match &omega {
            Some(w) => Some(model.mixture_params(w.view())?),
            None => None,
        };
        for b in 0..batch {
            let sq: f64 = x
                .row(b)
                .iter()
                .zip(mu_x.row(b))
                .map(|(a, m)| (a - m).powi(2))
                .sum();
            let zb = z.row(b).to_vec();
            let log_lik = rec_const - sq / (2.0 * var_x);
            let log_q_z = diag_gaussian_logpdf(
                &zb,
                enc.mu_z.row(b).as_slice().expect("contiguous"),
                enc.sigma_z.row(b).as_slice().expect("contiguous"),
            );
            let lw = match (&omega, &mixture) {
                (Some(w), Some((mu_k, sig_k))) => {
                    let wb = w.row(b).to_vec();
                    let c = model.config.mixture_count;
                    let comps: Vec<f64> = (0..c)
                        .map(|k| {
                            diag_gaussian_logpdf(
                                &zb,
                                mu_k.slice(s![b, k, ..]).as_slice().expect("contiguous"),
                                sig_k.slice(s![b, k, ..]).as_slice().expect("contiguous"),
                            )
                        })
                        .collect();
                    let log_p_z = log_sum_exp(&comps) - (c as f64).ln();
                    let log_p_w = diag_gaussian_logpdf(&wb, &zeros, &ones);
                    let log_q_w = diag_gaussian_logpdf(
                        &wb,
                        enc.mu_omega.as_ref().expect("GMVAE").row(b).as_slice().expect("contiguous"),
                        enc.sigma_omega.as_ref().expect("GMVAE").row(b).as_slice().expect("contiguous"),
                    );
                    log_lik + log_p_z + log_p_w - log_q_z - log_q_w
                }
                _ => log_lik + diag_gaussian_logpdf(&zb, &zeros, &ones) - log_q_z,
            };
            log_w[b].push(lw);
        }
    }
    Ok(log_w.iter().map(|lw| log_mean_exp(lw)).collect())
}
