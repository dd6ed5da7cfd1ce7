//! VAE and Gaussian-mixture VAE normative priors.
//!
//! Both models share the encoder trunk and decoder layout:
//!
//! * `Q(z|X) = N(mu_z(X), diag sigma_z(X)^2)` from the encoder,
//! * `P(X|z) = N(mu_X(z), sigma_X^2 I)` with a fixed output deviation,
//! * VAE: `P(z) = N(0, I)`,
//! * GMVAE: `omega ~ N(0, I)`, `k ~ Uniform{1..c}`,
//!   `P(z|omega, k) = N(mu_k(omega), diag sigma_k(omega)^2)`, with
//!   `Q(omega|X)` a second diagonal Gaussian head on the encoder and the
//!   mixture maps produced by a small network of `omega`.
//!
//! All standard deviations are `exp` of a raw network output, clamped so they
//! never drop below [`SIGMA_FLOOR`].

mod checkpoint;
mod elbo;
mod evidence;
mod train;

use ndarray::{s, Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, Mlp};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use elbo::{ElboNoise, ElboOutput, ElboTerms, GradRequest, PriorGrads};
pub use evidence::{log_evidence_importance, EvidenceEstimate};
pub use train::{train_prior, train_prior_from, EpochRecord, TrainConfig};

pub const SIGMA_FLOOR: f64 = 1e-6;
const RAW_SIGMA_MAX: f64 = 10.0;

/// Maps a raw network output to a standard deviation and its derivative.
#[inline]
pub(crate) fn positive_std(raw: f64) -> (f64, f64) {
    let lo = SIGMA_FLOOR.ln();
    if raw.is_nan() {
        (f64::NAN, 0.0)
    } else if raw <= lo {
        (SIGMA_FLOOR, 0.0)
    } else if raw >= RAW_SIGMA_MAX {
        (RAW_SIGMA_MAX.exp(), 0.0)
    } else {
        let s = raw.exp();
        (s, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Vae,
    Gmvae,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorKind::Vae => "vae",
            PriorKind::Gmvae => "gmvae",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// Image height and width.
    pub image_shape: [usize; 2],
    pub latent_dim: usize,
    /// Number of mixture components; ignored by the VAE.
    pub mixture_count: usize,
    /// Hidden widths of the encoder trunk; the decoder mirrors them.
    pub hidden: Vec<usize>,
    /// Hidden width of the network mapping omega to the mixture parameters.
    pub mixture_hidden: usize,
    /// Fixed per-pixel standard deviation of `P(X|z)`.
    pub output_std: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Vae,
            image_shape: [32, 32],
            latent_dim: 32,
            mixture_count: 1,
            hidden: vec![256],
            mixture_hidden: 64,
            output_std: std::f64::consts::FRAC_1_SQRT_2,
        }
    }
}

impl PriorConfig {
    pub fn pixels(&self) -> usize {
        self.image_shape[0] * self.image_shape[1]
    }

    /// Number of mixture components actually used by the model.
    pub fn components(&self) -> usize {
        match self.kind {
            PriorKind::Vae => 1,
            PriorKind::Gmvae => self.mixture_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("prior.latent_dim must be positive".into()));
        }
        if self.kind == PriorKind::Gmvae && self.mixture_count == 0 {
            return Err(Error::Config("prior.mixture_count must be positive".into()));
        }
        if self.image_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("prior.image_shape must be positive".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) || self.mixture_hidden == 0 {
            return Err(Error::Config("prior hidden widths must be positive".into()));
        }
        if !(self.output_std > 0.0 && self.output_std.is_finite()) {
            return Err(Error::Config("prior.output_std must be positive".into()));
        }
        Ok(())
    }

    /// Short label used for artifact names, e.g. `gmvae-c3-m32`.
    pub fn label(&self) -> String {
        match self.kind {
            PriorKind::Vae => format!("vae-m{}", self.latent_dim),
            PriorKind::Gmvae => format!("gmvae-c{}-m{}", self.mixture_count, self.latent_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub history: Vec<EpochRecord>,
    pub initial_val_elbo: Option<f64>,
    pub final_val_elbo: Option<f64>,
}

/// Posterior moments produced by the encoder for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub mu_z: Array2<f64>,
    pub sigma_z: Array2<f64>,
    pub mu_omega: Option<Array2<f64>>,
    pub sigma_omega: Option<Array2<f64>>,
}

/// A trained (or freshly initialized) normative prior. Immutable during
/// evaluation, so it can be shared across threads by reference.
#[derive(Debug, Clone, PartialEq)]
pub struct NormativePrior {
    pub config: PriorConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub mixture: Option<Mlp>,
    pub training: TrainingMeta,
    /// Optimizer state, kept so training can resume exactly.
    pub optimizer: Option<Adam>,
}

impl NormativePrior {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = config.latent_dim;
        let heads = match config.kind {
            PriorKind::Vae => 2 * m,
            PriorKind::Gmvae => 4 * m,
        };
        let mut enc_widths = vec![config.pixels()];
        enc_widths.extend(&config.hidden);
        enc_widths.push(heads);
        let mut dec_widths = vec![m];
        dec_widths.extend(config.hidden.iter().rev());
        dec_widths.push(config.pixels());
        let encoder = Mlp::new(&enc_widths, &mut rng);
        let decoder = Mlp::new(&dec_widths, &mut rng);
        let mixture = match config.kind {
            PriorKind::Vae => None,
            PriorKind::Gmvae => {
                let c = config.mixture_count;
                let mut net = Mlp::new(&[m, config.mixture_hidden, 2 * c * m], &mut rng);
                // Spread the component means apart at initialization so the
                // assignment posterior is not degenerate from the start.
                if c > 1 {
                    let last = net.layers.len() - 1;
                    for v in net.layers[last].bias.slice_mut(s![0..c * m]).iter_mut() {
                        *v = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    }
                }
                Some(net)
            }
        };
        Ok(Self {
            config,
            encoder,
            decoder,
            mixture,
            training: TrainingMeta::default(),
            optimizer: None,
        })
    }

    pub fn kind(&self) -> PriorKind {
        self.config.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub(crate) fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.pixels() {
            return Err(Error::Argument(format!(
                "batch has {} pixels per row, model expects {}",
                x.ncols(),
                self.config.pixels()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Encoding> {
        self.check_batch(&x)?;
        let out = self.encoder.forward(x);
        Ok(self.split_heads(&out))
    }

    pub(crate) fn split_heads(&self, out: &Array2<f64>) -> Encoding {
        let m = self.config.latent_dim;
        let sig = |a: ndarray::ArrayView2<f64>| a.mapv(|r| positive_std(r).0);
        let (mu_omega, sigma_omega) = match self.config.kind {
            PriorKind::Vae => (None, None),
            PriorKind::Gmvae => (
                Some(out.slice(s![.., 2 * m..3 * m]).to_owned()),
                Some(sig(out.slice(s![.., 3 * m..4 * m]))),
            ),
        };
        Encoding {
            mu_z: out.slice(s![.., 0..m]).to_owned(),
            sigma_z: sig(out.slice(s![.., m..2 * m])),
            mu_omega,
            sigma_omega,
        }
    }

    /// Decoder mean `mu_X(z)` for a batch of latent codes.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.config.latent_dim {
            return Err(Error::Argument(format!(
                "latent batch has width {}, model expects {}",
                z.ncols(),
                self.config.latent_dim
            )));
        }
        Ok(self.decoder.forward(z))
    }

    /// Component means and deviations `(mu_k(omega), sigma_k(omega))`, each
    /// shaped `batch x c x M`.
    pub fn mixture_params(&self, omega: ArrayView2<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
        let net = self
            .mixture
            .as_ref()
            .ok_or_else(|| Error::Argument("mixture parameters requested from a VAE".into()))?;
        let m = self.config.latent_dim;
        if omega.ncols() != m {
            return Err(Error::Argument(format!(
                "omega has width {}, model expects {m}",
                omega.ncols()
            )));
        }
        let c = self.config.mixture_count;
        let out = net.forward(omega);
        let b = out.nrows();
        let mu = out
            .slice(s![.., 0..c * m])
            .to_owned()
            .into_shape_with_order((b, c, m))
            .expect("contiguous");
        let sigma = out
            .slice(s![.., c * m..2 * c * m])
            .mapv(|r| positive_std(r).0)
            .into_shape_with_order((b, c, m))
            .expect("contiguous");
        Ok((mu, sigma))
    }

    /// Prior projection: `mu_X(mu_z(X))`, no sampling.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let (h, w) = image.dim();
        if [h, w] != self.config.image_shape {
            return Err(Error::Argument(format!(
                "image shape {:?} does not match model shape {:?}",
                [h, w],
                self.config.image_shape
            )));
        }
        let row = image
            .to_shape((1, h * w))
            .map_err(|e| Error::Argument(e.to_string()))?;
        let enc = self.encode(row.view())?;
        let out = self.decode(enc.mu_z.view())?;
        Ok(out
            .into_shape_with_order((h, w))
            .expect("decoder width equals pixel count"))
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.param_count()
            + self.mixture.as_ref().map_or(0, Mlp::param_count)
    }

    /// Named parameter tensors in canonical checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = self.encoder.named_params("encoder");
        out.extend(self.decoder.named_params("decoder"));
        if let Some(m) = &self.mixture {
            out.extend(m.named_params("mixture"));
        }
        out
    }

    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.param_slices_mut();
        out.extend(self.decoder.param_slices_mut());
        if let Some(m) = &mut self.mixture {
            out.extend(m.param_slices_mut());
        }
        out
    }

    /// SHA-256 over the configuration and every parameter value.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, _, values) in self.named_params() {
            hasher.update(name.as_bytes());
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// A GMVAE with a single component whose prior maps are pinned to
    /// `N(0, I)` and whose omega posterior is `N(0, I)`, sharing the encoder
    /// and decoder weights of `vae`. Its ELBO equals the VAE's ELBO.
    pub fn collapsed_gmvae(vae: &NormativePrior, mixture_hidden: usize) -> Result<Self> {
        if vae.kind() != PriorKind::Vae {
            return Err(Error::Argument("collapsed_gmvae expects a VAE".into()));
        }
        let m = vae.config.latent_dim;
        let config = PriorConfig {
            kind: PriorKind::Gmvae,
            mixture_count: 1,
            mixture_hidden,
            ..vae.config.clone()
        };
        let mut encoder = vae.encoder.clone();
        let last = encoder.layers.len() - 1;
        let head = &mut encoder.layers[last];
        let mut weight = Array2::zeros((head.inputs(), 4 * m));
        weight.slice_mut(s![.., 0..2 * m]).assign(&head.weight);
        let mut bias = ndarray::Array1::zeros(4 * m);
        bias.slice_mut(s![0..2 * m]).assign(&head.bias);
        head.weight = weight;
        head.bias = bias;
        let mixture = Mlp {
            layers: vec![
                crate::nn::Dense::zeros(m, mixture_hidden),
                crate::nn::Dense::zeros(mixture_hidden, 2 * m),
            ],
        };
        Ok(Self {
            config,
            encoder,
            decoder: vae.decoder.clone(),
            mixture: Some(mixture),
            training: vae.training.clone(),
            optimizer: None,
        })
    }
}

/// Log-density of `z` under mixture component `k` given `omega`:
/// `log N(z; mu_k(omega), diag sigma_k(omega)^2)`.
pub fn gmvae_prior_logdensity(
    z: &[f64],
    omega: &[f64],
    k: usize,
    model: &NormativePrior,
) -> Result<f64> {
    let c = model.config.components();
    if model.kind() != PriorKind::Gmvae {
        return Err(Error::Argument("component log-density needs a GMVAE".into()));
    }
    if k >= c {
        return Err(Error::Argument(format!("component {k} out of range 0..{c}")));
    }
    let (mu, sigma) = component_params(z, omega, model)?;
    Ok(elbo::diag_gaussian_logpdf(
        z,
        mu.slice(s![0, k, ..]).as_slice().expect("contiguous"),
        sigma.slice(s![0, k, ..]).as_slice().expect("contiguous"),
    ))
}

/// Posterior over mixture assignments `P(k | z, omega)` under a uniform
/// categorical prior, computed in log space.
pub fn gm_component_posterior(z: &[f64], omega: &[f64], model: &NormativePrior) -> Result<Vec<f64>> {
    if model.kind() != PriorKind::Gmvae {
        return Err(Error::Argument("component posterior needs a GMVAE".into()));
    }
    let (mu, sigma) = component_params(z, omega, model)?;
    let c = model.config.components();
    let logp: Vec<f64> = (0..c)
        .map(|k| {
            elbo::diag_gaussian_logpdf(
                z,
                mu.slice(s![0, k, ..]).as_slice().expect("contiguous"),
                sigma.slice(s![0, k, ..]).as_slice().expect("contiguous"),
            )
        })
        .collect();
    Ok(elbo::softmax(&logp))
}

fn component_params(z: &[f64], omega: &[f64], model: &NormativePrior) -> Result<(Array3<f64>, Array3<f64>)> {
    let m = model.latent_dim();
    if z.len() != m || omega.len() != m {
        return Err(Error::Argument(format!(
            "z and omega must have length {m}, got {} and {}",
            z.len(),
            omega.len()
        )));
    }
    let w = ArrayView2::from_shape((1, m), omega).expect("length checked");
    model.mixture_params(w)
}

/// Monte-Carlo ELBO of a VAE for every row of `x`.
pub fn vae_elbo<R: rand::Rng + ?Sized>(
    model: &NormativePrior,
    x: ArrayView2<f64>,
    rng: &mut R,
    n_samples: usize,
) -> Result<Vec<f64>> {
    if model.kind() != PriorKind::Vae {
        return Err(Error::Argument("vae_elbo called on a GMVAE".into()));
    }
    model.elbo(x, rng, n_samples)
}

/// Monte-Carlo ELBO of a GMVAE for every row of `x`.
pub fn gmvae_elbo<R: rand::Rng + ?Sized>(
    model: &NormativePrior,
    x: ArrayView2<f64>,
    rng: &mut R,
    n_samples: usize,
) -> Result<Vec<f64>> {
    if model.kind() != PriorKind::Gmvae {
        return Err(Error::Argument("gmvae_elbo called on a VAE".into()));
    }
    model.elbo(x, rng, n_samples)
}

/// Prior-projection reconstruction `mu_X(mu_z(X))`.
pub fn reconstruct(model: &NormativePrior, image: &Image) -> Result<Image> {
    model.reconstruct(image)
}

/// Flattens images into a `batch x pixels` matrix.
pub fn stack_images<'a, I>(images: I, pixels: usize) -> Result<Array2<f64>>
where
    I: IntoIterator<Item = &'a Image>,
{
    let mut data = Vec::new();
    let mut rows = 0;
    for img in images {
        if img.len() != pixels {
            return Err(Error::Argument(format!(
                "image has {} pixels, expected {pixels}",
                img.len()
            )));
        }
        data.extend(img.iter().copied());
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, pixels), data).expect("sizes match"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny_config(kind: PriorKind, c: usize) -> PriorConfig {
        PriorConfig {
            kind,
            image_shape: [4, 4],
            latent_dim: 3,
            mixture_count: c,
            hidden: vec![8],
            mixture_hidden: 5,
            output_std: std::f64::consts::FRAC_1_SQRT_2,
        }
    }

    #[test]
    fn component_logdensity_at_mean_with_unit_sigma() {
        // Zero mixture network: mu_k = 0, sigma_k = exp(0) = 1.
        let mut model = NormativePrior::new(tiny_config(PriorKind::Gmvae, 2), 0).unwrap();
        for layer in &mut model.mixture.as_mut().unwrap().layers {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        let z = [0.0; 3];
        let omega = [0.3, -0.2, 0.9];
        let lp = gmvae_prior_logdensity(&z, &omega, 1, &model).unwrap();
        let expected = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-12);

        // Doubling every sigma at the mean lowers the density by M log 2.
        let last = model.mixture.as_ref().unwrap().layers.len() - 1;
        let bias = &mut model.mixture.as_mut().unwrap().layers[last].bias;
        for j in 6..12 {
            bias[j] = 2f64.ln();
        }
        let lp2 = gmvae_prior_logdensity(&z, &omega, 1, &model).unwrap();
        assert!((lp - lp2 - 3.0 * 2f64.ln()).abs() < 1e-12);

        assert!(gmvae_prior_logdensity(&z, &omega, 2, &model).is_err());
    }

    #[test]
    fn identical_components_give_uniform_posterior() {
        let mut model = NormativePrior::new(tiny_config(PriorKind::Gmvae, 4), 3).unwrap();
        let net = model.mixture.as_mut().unwrap();
        let last = net.layers.len() - 1;
        net.layers[last].weight.fill(0.0);
        net.layers[last].bias.fill(0.1);
        let p = gm_component_posterior(&[0.5, 0.1, -2.0], &[0.0, 1.0, 2.0], &model).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn distant_components_concentrate_posterior() {
        let mut model = NormativePrior::new(tiny_config(PriorKind::Gmvae, 3), 3).unwrap();
        let net = model.mixture.as_mut().unwrap();
        let last = net.layers.len() - 1;
        net.layers[last].weight.fill(0.0);
        let bias = &mut net.layers[last].bias;
        bias.fill(0.0); // unit sigmas
        let z = [0.2, -0.4, 1.0];
        for j in 0..3 {
            bias[3 + j] = z[j]; // component 1 centred on z
            bias[j] = z[j] + 1e3;
            bias[6 + j] = z[j] - 1e3;
        }
        let p = gm_component_posterior(&z, &[0.0; 3], &model).unwrap();
        assert!(p[1] >= 1.0 - 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_direct_bayes() {
        let model = NormativePrior::new(tiny_config(PriorKind::Gmvae, 3), 11).unwrap();
        let z = [0.3, -0.7, 0.25];
        let omega = [-0.4, 0.8, 0.1];
        let post = gm_component_posterior(&z, &omega, &model).unwrap();
        let dens: Vec<f64> = (0..3)
            .map(|k| gmvae_prior_logdensity(&z, &omega, k, &model).unwrap().exp() / 3.0)
            .collect();
        let total: f64 = dens.iter().sum();
        for k in 0..3 {
            assert!((post[k] - dens[k] / total).abs() < 1e-8);
        }
    }

    #[test]
    fn reconstruct_preserves_shape() {
        let model = NormativePrior::new(tiny_config(PriorKind::Vae, 1), 1).unwrap();
        let img = Image::from_elem((4, 4), 0.5);
        assert_eq!(model.reconstruct(&img).unwrap().dim(), (4, 4));
        assert!(model.reconstruct(&Image::zeros((3, 3))).is_err());
    }

    #[test]
    fn elbo_rejects_shape_mismatch() {
        let model = NormativePrior::new(tiny_config(PriorKind::Vae, 1), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::zeros((2, 15));
        assert!(matches!(vae_elbo(&model, x.view(), &mut rng, 1), Err(Error::Argument(_))));
        assert!(gmvae_elbo(&model, Array2::zeros((2, 16)).view(), &mut rng, 1).is_err());
    }

    proptest! {
        #[test]
        fn sigmas_positive_for_any_raw(raw in proptest::num::f64::ANY) {
            let (s, _) = positive_std(raw);
            prop_assert!(raw.is_nan() || (s >= SIGMA_FLOOR && s.is_finite()));
        }

        #[test]
        fn posterior_is_a_simplex(
            z in proptest::collection::vec(-50.0f64..50.0, 3),
            omega in proptest::collection::vec(-5.0f64..5.0, 3),
            seed in 0u64..1000,
        ) {
            let model = NormativePrior::new(tiny_config(PriorKind::Gmvae, 4), seed).unwrap();
            let p = gm_component_posterior(&z, &omega, &model).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
