//! Reparameterized ELBO estimates with analytic gradients.
//!
//! VAE, per image:
//!
//! ```text
//! L = E_Q[log P(X|z)] - KL(Q(z|X) || N(0, I))
//! ```
//!
//! GMVAE, per image, with `p_k = P(k | z, omega)`:
//!
//! ```text
//! L = E_Q[log P(X|z)]
//!   - E_Q[ sum_k p_k KL(Q(z|X) || P(z|omega,k)) ]
//!   - KL(Q(omega|X) || N(0, I))
//!   - E_Q[ sum_k p_k log(c p_k) ]
//! ```
//!
//! The outer expectations are averaged over `S` reparameterized samples. The
//! returned gradients are those of the per-image ELBO summed over the batch.

use ndarray::{s, Array2, Array3, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{positive_std, NormativePrior, PriorKind};
use crate::error::{Error, Result};
use crate::nn::Mlp;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Standard-normal draws for the reparameterization trick, shaped
/// `samples x batch x latent`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    pub eps_z: Array3<f64>,
    pub eps_omega: Option<Array3<f64>>,
}

impl ElboNoise {
    /// Draws every `eps_z` first and then every `eps_omega`, so a VAE and a
    /// GMVAE fed from identically seeded generators see the same `eps_z`.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        kind: PriorKind,
        samples: usize,
        batch: usize,
        latent: usize,
    ) -> Self {
        let shape = (samples, batch, latent);
        let eps_z = Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
        let eps_omega = match kind {
            PriorKind::Vae => None,
            PriorKind::Gmvae => Some(Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))),
        };
        Self { eps_z, eps_omega }
    }

    pub fn samples(&self) -> usize {
        self.eps_z.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub input: bool,
    pub params: bool,
}

impl GradRequest {
    pub const NONE: Self = Self {
        input: false,
        params: false,
    };
    pub const INPUT: Self = Self {
        input: true,
        params: false,
    };
    pub const PARAMS: Self = Self {
        input: false,
        params: true,
    };
}

/// Per-image ELBO decomposition, averaged over samples. For the VAE
/// `latent_kl` is the KL to the standard normal and the omega and assignment
/// terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub latent_kl: f64,
    pub omega_kl: f64,
    pub assignment_kl: f64,
    pub elbo: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorGrads {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub mixture: Option<Mlp>,
}

impl PriorGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for net in [Some(&self.encoder), Some(&self.decoder), self.mixture.as_ref()]
            .into_iter()
            .flatten()
        {
            for layer in &net.layers {
                out.push(layer.weight.as_slice().expect("standard layout"));
                out.push(layer.bias.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for net in [Some(&mut self.encoder), Some(&mut self.decoder), self.mixture.as_mut()]
            .into_iter()
            .flatten()
        {
            for layer in &mut net.layers {
                layer.weight *= factor;
                layer.bias *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboOutput {
    pub terms: Vec<ElboTerms>,
    /// Gradient of the summed ELBO with respect to the input batch.
    pub input_grad: Option<Array2<f64>>,
    /// Gradient of the summed ELBO with respect to every parameter.
    pub param_grads: Option<PriorGrads>,
}

impl ElboOutput {
    pub fn elbos(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.elbo).collect()
    }
}

pub(crate) fn diag_gaussian_logpdf(z: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&z, &m), &s)| -0.5 * LN_2PI - s.ln() - 0.5 * ((z - m) / s).powi(2))
        .sum()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))` for one coordinate.
#[inline]
fn kl_normal(mu_q: f64, s_q: f64, mu_p: f64, s_p: f64) -> f64 {
    (s_p / s_q).ln() + (s_q * s_q + (mu_q - mu_p).powi(2)) / (2.0 * s_p * s_p) - 0.5
}

/// KL of a diagonal Gaussian to `N(0, I)`, added to `grad_mu`/`grad_sigma`
/// scaled by `-1` (the ELBO subtracts it).
fn standard_kl_rows(
    mu: &Array2<f64>,
    sigma: &Array2<f64>,
    mut grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
) -> Vec<f64> {
    let mut out = vec![0.0; mu.nrows()];
    for b in 0..mu.nrows() {
        let mut kl = 0.0;
        for j in 0..mu.ncols() {
            let (m, s) = (mu[[b, j]], sigma[[b, j]]);
            kl += kl_normal(m, s, 0.0, 1.0);
            if let Some((gm, gs)) = grads.as_mut() {
                gm[[b, j]] -= m;
                gs[[b, j]] -= s - 1.0 / s;
            }
        }
        out[b] = kl;
    }
    out
}

impl NormativePrior {
    /// Monte-Carlo ELBO of every row of `x` with `n_samples` draws each.
    pub fn elbo<R: Rng + ?Sized>(&self, x: ArrayView2<f64>, rng: &mut R, n_samples: usize) -> Result<Vec<f64>> {
        let noise = ElboNoise::sample(rng, self.kind(), n_samples, x.nrows(), self.latent_dim());
        Ok(self.elbo_with_noise(x, &noise, GradRequest::NONE)?.elbos())
    }

    /// ELBO for fixed reparameterization noise, optionally with gradients.
    pub fn elbo_with_noise(&self, x: ArrayView2<f64>, noise: &ElboNoise, request: GradRequest) -> Result<ElboOutput> {
        self.check_batch(&x)?;
        let (batch, pixels) = x.dim();
        let m = self.latent_dim();
        let samples = noise.samples();
        if samples == 0 {
            return Err(Error::Argument("ELBO needs at least one sample".into()));
        }
        if noise.eps_z.shape() != [samples, batch, m] {
            return Err(Error::Argument(format!(
                "noise shape {:?} does not match batch {batch} x latent {m}",
                noise.eps_z.shape()
            )));
        }
        let gmvae = self.kind() == PriorKind::Gmvae;
        if gmvae && noise.eps_omega.as_ref().map(|e| e.shape()) != Some(noise.eps_z.shape()) {
            return Err(Error::Argument("GMVAE needs omega noise matching eps_z".into()));
        }
        let want_grad = request.input || request.params;
        let mut param_grads = request.params.then(|| PriorGrads {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            mixture: self.mixture.as_ref().map(Mlp::zeros_like),
        });

        let (enc_out, enc_tape) = self.encoder.forward_tape(x.to_owned());
        let raw_z = enc_out.slice(s![.., m..2 * m]);
        let mu_z = enc_out.slice(s![.., 0..m]).to_owned();
        let sig_z = raw_z.mapv(|r| positive_std(r).0);
        let mut g_head = Array2::<f64>::zeros(enc_out.raw_dim());
        let mut g_mu_z = Array2::<f64>::zeros((batch, m));
        let mut g_sig_z = Array2::<f64>::zeros((batch, m));

        let var_x = self.config.output_std.powi(2);
        let rec_const = -0.5 * pixels as f64 * (LN_2PI + var_x.ln());
        let weight = 1.0 / samples as f64;
        let mut terms = vec![ElboTerms::default(); batch];
        let mut input_grad = request.input.then(|| Array2::<f64>::zeros((batch, pixels)));

        let (mu_w, sig_w) = if gmvae {
            (
                Some(enc_out.slice(s![.., 2 * m..3 * m]).to_owned()),
                Some(enc_out.slice(s![.., 3 * m..4 * m]).mapv(|r| positive_std(r).0)),
            )
        } else {
            (None, None)
        };
        let mut g_mu_w = Array2::<f64>::zeros((batch, m));
        let mut g_sig_w = Array2::<f64>::zeros((batch, m));

        for smp in 0..samples {
            let eps = noise.eps_z.slice(s![smp, .., ..]);
            let z = &mu_z + &(&sig_z * &eps);
            let (mu_x, dec_tape) = self.decoder.forward_tape(z.clone());
            let resid = &x - &mu_x;
            for b in 0..batch {
                let sq: f64 = resid.row(b).iter().map(|r| r * r).sum();
                terms[b].reconstruction += weight * (rec_const - sq / (2.0 * var_x));
            }
            let mut g_z = Array2::<f64>::zeros((batch, m));
            if want_grad {
                let g_mux = resid.mapv(|r| weight * r / var_x);
                if let Some(gx) = input_grad.as_mut() {
                    *gx -= &g_mux;
                }
                g_z = self.decoder.backward(
                    &dec_tape,
                    g_mux,
                    param_grads.as_mut().map(|g| &mut g.decoder),
                );
            }

            if gmvae {
                let mixture = self.mixture.as_ref().expect("GMVAE has a mixture network");
                let c = self.config.mixture_count;
                let eps_w = noise.eps_omega.as_ref().expect("checked").slice(s![smp, .., ..]);
                let mu_w = mu_w.as_ref().expect("GMVAE");
                let sig_w = sig_w.as_ref().expect("GMVAE");
                let omega = mu_w + &(sig_w * &eps_w);
                let (mix_out, mix_tape) = mixture.forward_tape(omega);
                let mut g_mix = Array2::<f64>::zeros(mix_out.raw_dim());
                let mut logits = vec![0.0; c];
                let mut kls = vec![0.0; c];
                for b in 0..batch {
                    let row = mix_out.row(b);
                    let mu_k = row.slice(s![0..c * m]);
                    let raw_k = row.slice(s![c * m..2 * c * m]);
                    let sig_k: Vec<(f64, f64)> = raw_k.iter().map(|&r| positive_std(r)).collect();
                    for k in 0..c {
                        let (mut a, mut kl) = (0.0, 0.0);
                        for j in 0..m {
                            let i = k * m + j;
                            let sk = sig_k[i].0;
                            a += -0.5 * LN_2PI - sk.ln() - 0.5 * ((z[[b, j]] - mu_k[i]) / sk).powi(2);
                            kl += kl_normal(mu_z[[b, j]], sig_z[[b, j]], mu_k[i], sk);
                        }
                        logits[k] = a;
                        kls[k] = kl;
                    }
                    let post = softmax(&logits);
                    let t2: f64 = post.iter().zip(&kls).map(|(p, kl)| p * kl).sum();
                    let log_cp: Vec<f64> = post
                        .iter()
                        .map(|&p| if p > 0.0 { (c as f64 * p).ln() } else { 0.0 })
                        .collect();
                    let t4: f64 = post.iter().zip(&log_cp).map(|(p, l)| p * l).sum();
                    terms[b].latent_kl += weight * t2;
                    terms[b].assignment_kl += weight * t4;
                    if !want_grad {
                        continue;
                    }
                    for k in 0..c {
                        let p = post[k];
                        let g_a = -weight * p * ((kls[k] - t2) + (log_cp[k] - t4));
                        let g_kl = -weight * p;
                        for j in 0..m {
                            let i = k * m + j;
                            let (sk, dsk) = sig_k[i];
                            let (zz, mq, sq) = (z[[b, j]], mu_z[[b, j]], sig_z[[b, j]]);
                            let dz = zz - mu_k[i];
                            let dq = mq - mu_k[i];
                            let inv_v = 1.0 / (sk * sk);
                            // assignment path through a_k
                            g_z[[b, j]] -= g_a * dz * inv_v;
                            let mut g_mu_k = g_a * dz * inv_v;
                            let mut g_sig_k = g_a * (-1.0 / sk + dz * dz * inv_v / sk);
                            // KL path
                            g_mu_z[[b, j]] += g_kl * dq * inv_v;
                            g_sig_z[[b, j]] += g_kl * (-1.0 / sq + sq * inv_v);
                            g_mu_k -= g_kl * dq * inv_v;
                            g_sig_k += g_kl * (1.0 / sk - (sq * sq + dq * dq) * inv_v / sk);
                            g_mix[[b, i]] += g_mu_k;
                            g_mix[[b, c * m + i]] += g_sig_k * dsk;
                        }
                    }
                }
                if want_grad {
                    let g_omega = mixture.backward(
                        &mix_tape,
                        g_mix,
                        param_grads.as_mut().and_then(|g| g.mixture.as_mut()),
                    );
                    g_mu_w += &g_omega;
                    g_sig_w += &(&g_omega * &eps_w);
                }
            }

            if want_grad {
                g_mu_z += &g_z;
                g_sig_z += &(&g_z * &eps);
            }
        }

        if gmvae {
            let (mu_w, sig_w) = (mu_w.as_ref().expect("GMVAE"), sig_w.as_ref().expect("GMVAE"));
            let kl = standard_kl_rows(mu_w, sig_w, want_grad.then_some((&mut g_mu_w, &mut g_sig_w)));
            for (t, k) in terms.iter_mut().zip(kl) {
                t.omega_kl = k;
            }
        } else {
            let kl = standard_kl_rows(&mu_z, &sig_z, want_grad.then_some((&mut g_mu_z, &mut g_sig_z)));
            for (t, k) in terms.iter_mut().zip(kl) {
                t.latent_kl = k;
            }
        }
        for t in &mut terms {
            t.elbo = t.reconstruction - t.latent_kl - t.omega_kl - t.assignment_kl;
        }

        if want_grad {
            g_head.slice_mut(s![.., 0..m]).assign(&g_mu_z);
            Zip::from(g_head.slice_mut(s![.., m..2 * m]))
                .and(&g_sig_z)
                .and(&raw_z)
                .for_each(|g, &gs, &r| *g = gs * positive_std(r).1);
            if gmvae {
                g_head.slice_mut(s![.., 2 * m..3 * m]).assign(&g_mu_w);
                Zip::from(g_head.slice_mut(s![.., 3 * m..4 * m]))
                    .and(&g_sig_w)
                    .and(enc_out.slice(s![.., 3 * m..4 * m]))
                    .for_each(|g, &gs, &r| *g = gs * positive_std(r).1);
            }
            let g_x = self.encoder.backward(
                &enc_tape,
                g_head,
                param_grads.as_mut().map(|g| &mut g.encoder),
            );
            if let Some(gx) = input_grad.as_mut() {
                *gx += &g_x;
            }
        }

        Ok(ElboOutput {
            terms,
            input_grad,
            param_grads,
        })
    }
}
