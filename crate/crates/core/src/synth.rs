//! Synthetic "healthy" phantoms, lesion insertion and intensity normalization.
//!
//! A healthy phantom is a soft-edged head ellipse containing a darker inner
//! ellipse, two ventricles, a handful of thin sulcus-like grooves, a
//! low-frequency intensity field and pixel noise. Every anatomical parameter is
//! jittered per subject, so the family lives on a low-dimensional manifold that
//! a latent-variable model can learn, while the grooves and noise give each
//! subject fine detail the model cannot reproduce exactly.
//!
//! Lesions are additive intensity shifts inside round blobs with a cosine
//! falloff, matching the additive observation model `Y = X + D`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    masked_stats, Image, LabeledImage, Mask, NormStats, BACKGROUND_INTENSITY,
};

/// Stream separator so lesion draws never reuse the anatomy stream.
const LESION_STREAM: u64 = 0x6c65_7369_6f6e_0001;
const SLICE_STREAM: u64 = 0x736c_6963_6500_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Image side length; images are square.
    pub size: usize,
    /// Head semi-axes as fractions of `size` (vertical, horizontal).
    pub head_axes: [f64; 2],
    /// Relative jitter of every semi-axis.
    pub axis_jitter: f64,
    /// Center jitter as a fraction of `size`.
    pub center_jitter: f64,
    /// Maximum absolute rotation in radians.
    pub rotation_jitter: f64,
    /// Width of the soft structure edges, in pixels.
    pub edge_softness: f64,
    /// Inner ellipse size relative to the head.
    pub inner_scale: f64,
    pub outer_intensity: [f64; 2],
    pub inner_intensity: [f64; 2],
    pub ventricle_intensity: [f64; 2],
    /// Number of thin grooves running inward from the head boundary.
    pub grooves: usize,
    /// Intensity drop along a groove.
    pub groove_depth: f64,
    /// Amplitude of the smooth additive intensity field.
    pub field_amplitude: f64,
    /// Standard deviation of independent pixel noise.
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 32,
            head_axes: [0.42, 0.36],
            axis_jitter: 0.06,
            center_jitter: 0.03,
            rotation_jitter: 0.2,
            edge_softness: 0.8,
            inner_scale: 0.68,
            outer_intensity: [0.9, 1.2],
            inner_intensity: [-0.1, 0.3],
            ventricle_intensity: [-1.9, -1.4],
            grooves: 4,
            groove_depth: 0.8,
            field_amplitude: 0.15,
            noise_std: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size != 32 && self.size != 64 {
            return Err(Error::Config(format!(
                "phantom.size must be 32 or 64, got {}",
                self.size
            )));
        }
        let axes_ok = self
            .head_axes
            .iter()
            .all(|&a| a > 0.05 && a * (1.0 + self.axis_jitter) + self.center_jitter < 0.5);
        if !axes_ok {
            return Err(Error::Config(format!(
                "phantom.head_axes {:?} do not fit inside the image",
                self.head_axes
            )));
        }
        if !(0.0..1.0).contains(&self.axis_jitter)
            || self.center_jitter < 0.0
            || self.rotation_jitter < 0.0
        {
            return Err(Error::Config("phantom jitter values out of range".into()));
        }
        if !(self.inner_scale > 0.0 && self.inner_scale < 1.0) {
            return Err(Error::Config("phantom.inner_scale must lie in (0, 1)".into()));
        }
        if self.edge_softness <= 0.0 || self.noise_std < 0.0 || self.field_amplitude < 0.0 {
            return Err(Error::Config(
                "phantom.edge_softness must be positive, noise and field non-negative".into(),
            ));
        }
        for (name, r) in [
            ("outer_intensity", self.outer_intensity),
            ("inner_intensity", self.inner_intensity),
            ("ventricle_intensity", self.ventricle_intensity),
        ] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("phantom.{name} range is reversed")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LesionConfig {
    /// Inclusive range of lesions per image.
    pub count: [usize; 2],
    /// Range of the flat-top radius, in pixels.
    pub radius: [f64; 2],
    /// Range of the additive intensity shift; negative values give hypo-intense lesions.
    pub shift: [f64; 2],
    /// When set, the sign of each drawn shift is flipped with probability 1/2.
    pub random_polarity: bool,
    /// Width of the cosine falloff around the flat top, in pixels.
    pub blur: f64,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self {
            count: [1, 2],
            radius: [2.0, 4.0],
            shift: [1.5, 2.5],
            random_polarity: false,
            blur: 1.0,
        }
    }
}

impl LesionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count[0] == 0 || self.count[0] > self.count[1] {
            return Err(Error::Config(format!(
                "lesion.count {:?} must be a non-empty range of positive counts",
                self.count
            )));
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return Err(Error::Config(format!("lesion.radius {:?} invalid", self.radius)));
        }
        if self.shift[0] > self.shift[1] || self.blur < 0.0 {
            return Err(Error::Config("lesion.shift reversed or negative blur".into()));
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized elliptical radius: 1 on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = self.cos * dy + self.sin * dx;
        let v = -self.sin * dy + self.cos * dx;
        ((u / self.ay).powi(2) + (v / self.ax).powi(2)).sqrt()
    }

    /// Soft indicator: ~1 inside, ~0 outside, transition `softness` pixels wide.
    fn soft(&self, y: f64, x: f64, softness: f64) -> f64 {
        let scale = 0.5 * (self.ay + self.ax);
        let signed = (1.0 - self.radius(y, x)) * scale / softness;
        1.0 / (1.0 + (-4.0 * signed).exp())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    if amount == 0.0 {
        0.0
    } else {
        rng.random_range(-amount..amount)
    }
}

fn subject_id(seed: u64) -> String {
    format!("subj{seed:08}")
}

/// Healthy phantom for slice 0 of the subject identified by `seed`.
pub fn generate_healthy(seed: u64, config: &PhantomConfig) -> Result<LabeledImage> {
    generate_healthy_slice(seed, 0, config)
}

/// Healthy phantom for one slice of a subject. Slices of a subject share the
/// anatomy draw and differ by a small scale change and their noise.
pub fn generate_healthy_slice(
    seed: u64,
    slice: u32,
    config: &PhantomConfig,
) -> Result<LabeledImage> {
    config.validate()?;
    let size = config.size;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let slice_scale = 1.0 - 0.04 * slice as f64;
    let center = (s - 1.0) / 2.0;
    let angle = jitter(&mut rng, config.rotation_jitter);
    let head = Ellipse {
        cy: center + jitter(&mut rng, config.center_jitter) * s,
        cx: center + jitter(&mut rng, config.center_jitter) * s,
        ay: config.head_axes[0] * s * (1.0 + jitter(&mut rng, config.axis_jitter)) * slice_scale,
        ax: config.head_axes[1] * s * (1.0 + jitter(&mut rng, config.axis_jitter)) * slice_scale,
        cos: angle.cos(),
        sin: angle.sin(),
    };
    let inner_scale = config.inner_scale * (1.0 + jitter(&mut rng, config.axis_jitter));
    let inner = Ellipse {
        ay: head.ay * inner_scale,
        ax: head.ax * inner_scale * (1.0 + jitter(&mut rng, config.axis_jitter)),
        ..head
    };
    let vent_offset = 0.11 * s * (1.0 + jitter(&mut rng, 0.15));
    let vent_ay = 0.13 * s * (1.0 + jitter(&mut rng, 0.15)) * slice_scale;
    let vent_ax = 0.045 * s * (1.0 + jitter(&mut rng, 0.15)) * slice_scale;
    let vent_tilt = jitter(&mut rng, 0.25);
    let ventricles: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|&side| {
            let a = angle + side * vent_tilt;
            Ellipse {
                cy: head.cy - head.sin * side * vent_offset,
                cx: head.cx + head.cos * side * vent_offset,
                ay: vent_ay,
                ax: vent_ax,
                cos: a.cos(),
                sin: a.sin(),
            }
        })
        .collect();

    let outer_level = uniform(&mut rng, config.outer_intensity);
    let inner_level = uniform(&mut rng, config.inner_intensity);
    let vent_level = uniform(&mut rng, config.ventricle_intensity);

    // Grooves: thin dark segments entering the head from its boundary.
    let grooves: Vec<(f64, f64, f64, f64)> = (0..config.grooves)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let depth = rng.random_range(0.25..0.45);
            (theta, depth, jitter(&mut rng, 0.3), rng.random_range(0.6..1.0))
        })
        .collect();

    let field_phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let field_freq = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ SLICE_STREAM.wrapping_mul(slice as u64 + 1));

    let mut pixels = Image::from_elem((size, size), BACKGROUND_INTENSITY);
    let mut foreground = Mask::from_elem((size, size), false);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64, j as f64);
            let noise: f64 = noise_rng.sample::<f64, _>(StandardNormal) * config.noise_std;
            if head.radius(y, x) >= 1.0 {
                continue;
            }
            foreground[[i, j]] = true;
            let head_soft = head.soft(y, x, config.edge_softness);
            let inner_soft = inner.soft(y, x, config.edge_softness);
            let vent_soft = ventricles
                .iter()
                .map(|v| v.soft(y, x, config.edge_softness))
                .fold(0.0, f64::max);
            let mut v = outer_level * head_soft;
            v += (inner_level - outer_level) * inner_soft;
            v += (vent_level - inner_level) * vent_soft;
            for &(theta, depth, bend, strength) in &grooves {
                v -= config.groove_depth * strength * groove_profile(&head, y, x, theta, depth, bend);
            }
            let field = (field_freq[0] * PI * (y / s) + field_phase[0]).cos()
                * (field_freq[1] * PI * (x / s) + field_phase[1]).cos();
            v += config.field_amplitude * field;
            pixels[[i, j]] = v + noise;
        }
    }

    Ok(LabeledImage {
        pixels,
        anomaly_mask: Mask::from_elem((size, size), false),
        foreground_mask: foreground,
        subject_id: subject_id(seed),
        slice_id: slice,
        seed,
        normalization: None,
    })
}

/// Membership of (y, x) in a groove: a slightly bent radial segment from the
/// boundary inward to normalized radius `1 - depth`, about one pixel wide.
fn groove_profile(head: &Ellipse, y: f64, x: f64, theta: f64, depth: f64, bend: f64) -> f64 {
    let dy = y - head.cy;
    let dx = x - head.cx;
    let u = head.cos * dy + head.sin * dx;
    let v = -head.sin * dy + head.cos * dx;
    let (nu, nv) = (u / head.ay, v / head.ax);
    let r = (nu * nu + nv * nv).sqrt();
    if r < 1.0 - depth || r > 1.0 || r == 0.0 {
        return 0.0;
    }
    let phi = nv.atan2(nu);
    let along = (1.0 - r) / depth;
    let target = theta + bend * along;
    let mut dphi = (phi - target).rem_euclid(2.0 * PI);
    if dphi > PI {
        dphi -= 2.0 * PI;
    }
    // Arc distance in pixels at this radius.
    let arc = dphi.abs() * r * 0.5 * (head.ay + head.ax);
    (-(arc * arc) / 0.5).exp() * (1.0 - along).sqrt()
}

/// Lesioned variant of a healthy subject: the same anatomy plus additive blobs.
pub fn generate_lesioned(
    seed: u64,
    config: &PhantomConfig,
    lesion: &LesionConfig,
) -> Result<LabeledImage> {
    generate_lesioned_slice(seed, 0, config, lesion)
}

pub fn generate_lesioned_slice(
    seed: u64,
    slice: u32,
    config: &PhantomConfig,
    lesion: &LesionConfig,
) -> Result<LabeledImage> {
    lesion.validate()?;
    let mut image = generate_healthy_slice(seed, slice, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LESION_STREAM ^ ((slice as u64) << 40));
    let n = rng.random_range(lesion.count[0]..=lesion.count[1]);
    let depth = distance_to_background(&image.foreground_mask);
    let size = config.size;
    for _ in 0..n {
        let radius = uniform(&mut rng, lesion.radius);
        let reach = radius + lesion.blur;
        let candidates: Vec<(usize, usize)> = depth
            .indexed_iter()
            .filter(|(_, &d)| d > reach)
            .map(|(ij, _)| ij)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Generation(format!(
                "lesion radius {radius:.2} (+{:.2} blur) does not fit inside the foreground of {}",
                lesion.blur, image.subject_id
            )));
        }
        let (ci, cj) = candidates[rng.random_range(0..candidates.len())];
        let mut shift = uniform(&mut rng, lesion.shift);
        if lesion.random_polarity && rng.random_bool(0.5) {
            shift = -shift;
        }
        for i in 0..size {
            for j in 0..size {
                let d = ((i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2)).sqrt();
                let weight = lesion_weight(d, radius, lesion.blur);
                if weight > 0.0 {
                    image.pixels[[i, j]] += shift * weight;
                    image.anomaly_mask[[i, j]] = true;
                }
            }
        }
    }
    Ok(image)
}

/// Flat top of height 1 up to `radius`, cosine falloff to 0 over `blur` pixels.
fn lesion_weight(d: f64, radius: f64, blur: f64) -> f64 {
    if d <= radius {
        1.0
    } else if blur > 0.0 && d < radius + blur {
        0.5 * (1.0 + (PI * (d - radius) / blur).cos())
    } else {
        0.0
    }
}

/// Euclidean distance from every foreground pixel to the nearest background
/// pixel (or to the outside of the image). Zero on the background.
fn distance_to_background(foreground: &Mask) -> Image {
    let (h, w) = foreground.dim();
    let background: Vec<(f64, f64)> = foreground
        .indexed_iter()
        .filter(|(_, &f)| !f)
        .map(|((i, j), _)| (i as f64, j as f64))
        .collect();
    let mut out = Image::zeros((h, w));
    for ((i, j), &f) in foreground.indexed_iter() {
        if !f {
            continue;
        }
        let (y, x) = (i as f64, j as f64);
        let border = (y + 1.0).min(x + 1.0).min(h as f64 - y).min(w as f64 - x);
        let nearest = background
            .iter()
            .map(|&(by, bx)| ((by - y).powi(2) + (bx - x).powi(2)).sqrt())
            .fold(border, f64::min);
        out[[i, j]] = nearest;
    }
    out
}

/// Maps foreground pixels through `(I - ref_mean) / ref_std` and resets the
/// background to [`BACKGROUND_INTENSITY`]. Masks are untouched.
pub fn normalize(image: &LabeledImage, ref_mean: f64, ref_std: f64) -> Result<LabeledImage> {
    if !(ref_std > 0.0) || !ref_std.is_finite() || !ref_mean.is_finite() {
        return Err(Error::Argument(format!(
            "normalization needs a positive finite std, got mean {ref_mean}, std {ref_std}"
        )));
    }
    let mut out = image.clone();
    ndarray::Zip::from(&mut out.pixels)
        .and(&image.foreground_mask)
        .for_each(|p, &fg| {
            *p = if fg {
                (*p - ref_mean) / ref_std
            } else {
                BACKGROUND_INTENSITY
            };
        });
    out.normalization = Some(NormStats {
        mean: ref_mean,
        std: ref_std,
    });
    Ok(out)
}

/// Foreground statistics of a reference image, for use with [`normalize`].
pub fn reference_stats(image: &LabeledImage) -> Result<NormStats> {
    masked_stats(&image.pixels, &image.foreground_mask)
        .filter(|s| s.std > 0.0)
        .ok_or_else(|| Error::Argument(format!("reference {} has no usable foreground", image.subject_id)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Number of subjects in the split.
    pub subjects: usize,
    /// Offset added to the generator seed to get the first subject seed.
    pub seed_offset: u64,
}

impl SplitSpec {
    fn seeds(&self, base: u64) -> std::ops::Range<u64> {
        let start = base.wrapping_add(self.seed_offset);
        start..start + self.subjects as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub lesion: LesionConfig,
    pub train: SplitSpec,
    pub val: SplitSpec,
    pub test_lesioned: SplitSpec,
    pub test_healthy: SplitSpec,
    pub slices_per_subject: u32,
    /// Seed of the reference subject for normalization; defaults to the first
    /// training subject.
    pub reference_seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomConfig::default(),
            lesion: LesionConfig::default(),
            train: SplitSpec {
                subjects: 200,
                seed_offset: 0,
            },
            val: SplitSpec {
                subjects: 20,
                seed_offset: 100_000,
            },
            test_lesioned: SplitSpec {
                subjects: 50,
                seed_offset: 200_000,
            },
            test_healthy: SplitSpec {
                subjects: 20,
                seed_offset: 300_000,
            },
            slices_per_subject: 1,
            reference_seed: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.lesion.validate()?;
        if self.slices_per_subject == 0 {
            return Err(Error::Config("dataset.slices_per_subject must be positive".into()));
        }
        let splits = [
            ("train", self.train),
            ("val", self.val),
            ("test_lesioned", self.test_lesioned),
            ("test_healthy", self.test_healthy),
        ];
        for (name, split) in &splits {
            if split.subjects == 0 {
                return Err(Error::Config(format!("dataset.{name}.subjects must be positive")));
            }
        }
        for a in 0..splits.len() {
            for b in a + 1..splits.len() {
                let ra = splits[a].1.seeds(self.seed);
                let rb = splits[b].1.seeds(self.seed);
                if ra.start < rb.end && rb.start < ra.end {
                    return Err(Error::Config(format!(
                        "dataset seed ranges of {} ({ra:?}) and {} ({rb:?}) overlap",
                        splits[a].0, splits[b].0
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train_healthy: Vec<LabeledImage>,
    pub val_healthy: Vec<LabeledImage>,
    pub test_lesioned: Vec<LabeledImage>,
    pub test_healthy: Vec<LabeledImage>,
    pub generator_seed: u64,
    pub reference: NormStats,
}

impl DatasetSplits {
    pub fn split(&self, name: SplitName) -> &[LabeledImage] {
        match name {
            SplitName::TrainHealthy => &self.train_healthy,
            SplitName::ValHealthy => &self.val_healthy,
            SplitName::TestLesioned => &self.test_lesioned,
            SplitName::TestHealthy => &self.test_healthy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    TrainHealthy,
    ValHealthy,
    TestLesioned,
    TestHealthy,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::TrainHealthy,
        SplitName::ValHealthy,
        SplitName::TestLesioned,
        SplitName::TestHealthy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::TrainHealthy => "train_healthy",
            SplitName::ValHealthy => "val_healthy",
            SplitName::TestLesioned => "test_lesioned",
            SplitName::TestHealthy => "test_healthy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Generates all four splits and normalizes them with one shared reference subject.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetSplits> {
    config.validate()?;
    let reference_seed = config
        .reference_seed
        .unwrap_or_else(|| config.train.seeds(config.seed).start);
    let reference = reference_stats(&generate_healthy(reference_seed, &config.phantom)?)?;

    let make = |spec: &SplitSpec, lesioned: bool| -> Result<Vec<LabeledImage>> {
        let mut images = Vec::with_capacity(spec.subjects * config.slices_per_subject as usize);
        for seed in spec.seeds(config.seed) {
            for slice in 0..config.slices_per_subject {
                let raw = if lesioned {
                    generate_lesioned_slice(seed, slice, &config.phantom, &config.lesion)?
                } else {
                    generate_healthy_slice(seed, slice, &config.phantom)?
                };
                images.push(normalize(&raw, reference.mean, reference.std)?);
            }
        }
        Ok(images)
    };

    Ok(DatasetSplits {
        train_healthy: make(&config.train, false)?,
        val_healthy: make(&config.val, false)?,
        test_lesioned: make(&config.test_lesioned, true)?,
        test_healthy: make(&config.test_healthy, false)?,
        generator_seed: config.seed,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::count;
    use std::collections::HashSet;

    #[test]
    fn healthy_generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a = generate_healthy(7, &cfg).unwrap();
        let b = generate_healthy(7, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lesion_size(), 0);
        a.validate().unwrap();
        assert_ne!(a.pixels, generate_healthy(8, &cfg).unwrap().pixels);
    }

    #[test]
    fn invalid_size_is_a_config_error() {
        let cfg = PhantomConfig {
            size: 48,
            ..PhantomConfig::default()
        };
        assert!(matches!(generate_healthy(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_shift_leaves_image_unchanged_but_marks_region() {
        let cfg = PhantomConfig::default();
        let lesion = LesionConfig {
            shift: [0.0, 0.0],
            ..LesionConfig::default()
        };
        let healthy = generate_healthy(3, &cfg).unwrap();
        let lesioned = generate_lesioned(3, &cfg, &lesion).unwrap();
        assert_eq!(healthy.pixels, lesioned.pixels);
        assert!(lesioned.lesion_size() > 0);
        lesioned.validate().unwrap();
    }

    #[test]
    fn hyperintense_lesion_raises_masked_mean() {
        let cfg = PhantomConfig::default();
        let lesion = LesionConfig {
            count: [1, 1],
            radius: [5.0, 5.0],
            shift: [2.0, 2.0],
            ..LesionConfig::default()
        };
        let img = generate_lesioned(7, &cfg, &lesion).unwrap();
        let inside = crate::image::masked_values(&img.pixels, &img.anomaly_mask);
        let rest_mask = ndarray::Zip::from(&img.foreground_mask)
            .and(&img.anomaly_mask)
            .map_collect(|&f, &a| f && !a);
        let outside = crate::image::masked_values(&img.pixels, &rest_mask);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&inside) > mean(&outside));
    }

    #[test]
    fn mask_grows_strictly_with_radius() {
        let cfg = PhantomConfig {
            size: 64,
            ..PhantomConfig::default()
        };
        let mut last = 0;
        for r in 2..=10 {
            let lesion = LesionConfig {
                count: [1, 1],
                radius: [r as f64, r as f64],
                shift: [1.0, 1.0],
                blur: 1.0,
                random_polarity: false,
            };
            let n = generate_lesioned(11, &cfg, &lesion).unwrap().lesion_size();
            assert!(n > last, "radius {r}: {n} <= {last}");
            last = n;
        }
    }

    #[test]
    fn oversized_lesion_fails() {
        let lesion = LesionConfig {
            radius: [20.0, 20.0],
            ..LesionConfig::default()
        };
        let err = generate_lesioned(1, &PhantomConfig::default(), &lesion).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn lesioned_changes_stay_within_dilated_mask() {
        let cfg = PhantomConfig::default();
        let lesion = LesionConfig::default();
        for seed in 0..10 {
            let h = generate_healthy(seed, &cfg).unwrap();
            let l = generate_lesioned(seed, &cfg, &lesion).unwrap();
            let allowed = crate::image::dilate(&l.anomaly_mask, lesion.blur.ceil() as usize);
            for ((ij, &a), &b) in h.pixels.indexed_iter().zip(l.pixels.iter()) {
                if a != b {
                    assert!(allowed[ij]);
                }
            }
        }
    }

    #[test]
    fn identity_normalization_only_touches_background() {
        let img = generate_healthy(2, &PhantomConfig::default()).unwrap();
        let n = normalize(&img, 0.0, 1.0).unwrap();
        assert_eq!(n.pixels, img.pixels);
        assert!(normalize(&img, 0.0, 0.0).is_err());
        assert!(normalize(&img, 0.0, -1.0).is_err());
    }

    #[test]
    fn constant_foreground_maps_to_zero() {
        let mut img = generate_healthy(2, &PhantomConfig::default()).unwrap();
        let fg = img.foreground_mask.clone();
        ndarray::Zip::from(&mut img.pixels).and(&fg).for_each(|p, &f| {
            if f {
                *p = 0.75;
            }
        });
        let n = normalize(&img, 0.75, 2.0).unwrap();
        for (&p, &f) in n.pixels.iter().zip(fg.iter()) {
            assert_eq!(p, if f { 0.0 } else { BACKGROUND_INTENSITY });
        }
    }

    #[test]
    fn renormalized_reference_has_unit_stats() {
        let cfg = PhantomConfig::default();
        let reference = generate_healthy(0, &cfg).unwrap();
        let stats = reference_stats(&reference).unwrap();
        let again = reference_stats(&normalize(&reference, stats.mean, stats.std).unwrap()).unwrap();
        assert!(again.mean.abs() < 1e-6);
        assert!((again.std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dataset_counts_and_disjointness() {
        let cfg = DatasetConfig {
            train: SplitSpec {
                subjects: 12,
                seed_offset: 0,
            },
            val: SplitSpec {
                subjects: 3,
                seed_offset: 100,
            },
            test_lesioned: SplitSpec {
                subjects: 5,
                seed_offset: 200,
            },
            test_healthy: SplitSpec {
                subjects: 4,
                seed_offset: 300,
            },
            ..DatasetConfig::default()
        };
        let splits = build_dataset(&cfg).unwrap();
        assert_eq!(splits.train_healthy.len(), 12);
        assert_eq!(splits.val_healthy.len(), 3);
        assert_eq!(splits.test_lesioned.len(), 5);
        assert_eq!(splits.test_healthy.len(), 4);
        let mut ids = HashSet::new();
        for name in SplitName::ALL {
            for img in splits.split(name) {
                assert!(ids.insert(img.subject_id.clone()));
                img.validate().unwrap();
                assert_eq!(img.is_healthy(), name != SplitName::TestLesioned);
            }
        }
        assert!(splits.test_lesioned.iter().all(|i| count(&i.anomaly_mask) > 0));
    }

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let cfg = DatasetConfig {
            val: SplitSpec {
                subjects: 20,
                seed_offset: 150,
            },
            ..DatasetConfig::default()
        };
        assert!(matches!(build_dataset(&cfg), Err(Error::Config(_))));
    }
}
