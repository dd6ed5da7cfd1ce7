//! MAP restoration under a normative prior with a total-variation data term.
//!
//! Starting from `X = Y`, the image is moved uphill on
//!
//! ```text
//! J(X) = -lambda * TV(X - Y) + ELBO(X)
//! ```
//!
//! Only foreground pixels move. The ELBO gradient comes from fresh
//! reparameterized samples each step, while the recorded objective uses one
//! fixed draw per image so that iterates can be compared with each other.
//! The TV term can be handled either by a plain subgradient step or by a
//! proximal (forward-backward) step, which stays stable for very large
//! `lambda`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, Array3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{dilate, Image, LabeledImage, Mask};
use crate::prior::{stack_images, ElboNoise, GradRequest, NormativePrior, PriorKind};

/// Anisotropic total variation over horizontally and vertically adjacent
/// pixel pairs that both lie inside `mask`.
pub fn tv_norm(image: &Image, mask: &Mask) -> f64 {
    let (h, w) = image.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] {
                continue;
            }
            if j + 1 < w && mask[[i, j + 1]] {
                total += (image[[i, j + 1]] - image[[i, j]]).abs();
            }
            if i + 1 < h && mask[[i + 1, j]] {
                total += (image[[i + 1, j]] - image[[i, j]]).abs();
            }
        }
    }
    total
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`tv_norm`] using `sign(0) = 0`.
pub fn tv_subgradient(image: &Image, mask: &Mask) -> Image {
    let (h, w) = image.dim();
    let mut g = Image::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] {
                continue;
            }
            if j + 1 < w && mask[[i, j + 1]] {
                let s = sign(image[[i, j + 1]] - image[[i, j]]);
                g[[i, j + 1]] += s;
                g[[i, j]] -= s;
            }
            if i + 1 < h && mask[[i + 1, j]] {
                let s = sign(image[[i + 1, j]] - image[[i, j]]);
                g[[i + 1, j]] += s;
                g[[i, j]] -= s;
            }
        }
    }
    g
}

/// How the TV term enters each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvUpdate {
    /// `X += alpha * (G - lambda * s)` with `s` a TV subgradient.
    Subgradient,
    /// `X = Y + prox_{alpha lambda TV}(X + alpha G - Y)`.
    Proximal,
}

/// Which pixel pairs the TV of the difference image covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvSupport {
    /// Pairs with both pixels in the foreground.
    Foreground,
    /// Foreground plus the one-pixel background ring around it. The
    /// difference is zero on the ring, so these pairs penalize offsets of
    /// whole foreground regions.
    Anchored,
}

/// Step size for iterations `start..=end` (1-based). An open `end` extends
/// to the last iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRange {
    pub start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationConfig {
    pub lambda: f64,
    pub total_steps: usize,
    pub step_schedule: Vec<StepRange>,
    /// Reparameterized samples per ELBO gradient.
    pub elbo_samples: usize,
    pub seed: u64,
    /// Reuse the first iteration's noise for every iteration.
    pub freeze_noise: bool,
    pub tv_update: TvUpdate,
    pub tv_support: TvSupport,
    /// Record the difference map every this many iterations.
    pub snapshot_every: Option<usize>,
    /// Inner iterations of the proximal TV solver.
    pub prox_iterations: usize,
    /// Differences smaller than this after a proximal step are set to zero.
    /// The inner solver is inexact, and its leftovers would otherwise show
    /// up as tiny nonzero scores on pixels an exact prox leaves untouched.
    pub prox_resolution: f64,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            total_steps: 500,
            step_schedule: vec![
                StepRange {
                    start: 1,
                    end: Some(100),
                    step_size: 5e-3,
                },
                StepRange {
                    start: 101,
                    end: None,
                    step_size: 3e-3,
                },
            ],
            elbo_samples: 1,
            seed: 0,
            freeze_noise: false,
            tv_update: TvUpdate::Proximal,
            tv_support: TvSupport::Anchored,
            snapshot_every: None,
            prox_iterations: 100,
            prox_resolution: 1e-4,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("restoration.lambda must be finite and nonnegative".into()));
        }
        if self.elbo_samples == 0 {
            return Err(Error::Config("restoration.elbo_samples must be positive".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::Config("restoration.snapshot_every must be positive".into()));
        }
        if !(self.prox_resolution >= 0.0 && self.prox_resolution.is_finite()) {
            return Err(Error::Config("restoration.prox_resolution must be finite and nonnegative".into()));
        }
        if self.tv_update == TvUpdate::Proximal && self.prox_iterations == 0 {
            return Err(Error::Config("restoration.prox_iterations must be positive".into()));
        }
        let mut next = 1;
        for (k, r) in self.step_schedule.iter().enumerate() {
            if !(r.step_size > 0.0 && r.step_size.is_finite()) {
                return Err(Error::Config(format!("step_schedule[{k}].step_size must be positive")));
            }
            if r.start != next {
                return Err(Error::Config(format!(
                    "step_schedule[{k}] starts at {} but iteration {next} is next (ranges must be contiguous from 1)",
                    r.start
                )));
            }
            match r.end {
                Some(end) if end < r.start => {
                    return Err(Error::Config(format!("step_schedule[{k}] ends before it starts")));
                }
                Some(end) => next = end + 1,
                None => {
                    if k + 1 != self.step_schedule.len() {
                        return Err(Error::Config("only the last step range may be open-ended".into()));
                    }
                    next = usize::MAX;
                }
            }
        }
        if self.total_steps > 0 && next <= self.total_steps {
            return Err(Error::Config(format!(
                "step_schedule covers iterations up to {} but total_steps is {}",
                next - 1,
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Step size of the 1-based iteration `i`.
    pub fn step_size(&self, i: usize) -> f64 {
        self.step_schedule
            .iter()
            .find(|r| i >= r.start && r.end.is_none_or(|e| i <= e))
            .map(|r| r.step_size)
            .expect("validated schedule covers every iteration")
    }
}

/// Objective values at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// `-lambda * TV(X - Y)`.
    pub data_term: f64,
    /// ELBO estimate under noise drawn once per image, so values along the
    /// trace are comparable.
    pub elbo: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestorationResult {
    pub restored: Image,
    /// Signed difference `Y - X`.
    pub difference: Image,
    pub abs_difference: Image,
    pub foreground: Mask,
    /// One entry per iterate `X^0 ..= X^T`.
    pub trace: Vec<TracePoint>,
    /// `(iteration, |Y - X^iteration|)` every `snapshot_every` iterations.
    pub snapshots: Vec<(usize, Image)>,
}

/// Continuous anomaly map: `|Y - X|` on the foreground, zero elsewhere.
pub fn detect(result: &RestorationResult) -> Image {
    let mut out = result.abs_difference.clone();
    Zip::from(&mut out)
        .and(&result.foreground)
        .for_each(|v, &f| {
            if !f {
                *v = 0.0
            }
        });
    out
}

/// Seed of the per-image noise stream, independent of batch composition.
pub fn image_seed(seed: u64, subject_id: &str, slice_id: u32) -> u64 {
    let mut h = DefaultHasher::new();
    subject_id.hash(&mut h);
    slice_id.hash(&mut h);
    seed ^ h.finish()
}

/// Edge list for the TV of a difference image supported on the foreground.
/// A fixed (zero) background endpoint is stored as index `n`, one past the
/// last pixel, where the working buffers keep a permanent zero.
struct TvGraph {
    edges: Vec<(u32, u32)>,
    pixels: usize,
    mask: Mask,
}

impl TvGraph {
    fn new(foreground: &Mask, support: TvSupport) -> Self {
        let mask = match support {
            TvSupport::Foreground => foreground.clone(),
            TvSupport::Anchored => dilate(foreground, 1),
        };
        let (h, w) = foreground.dim();
        let zero = (h * w) as u32;
        let mut edges = Vec::new();
        let mut add = |p: (usize, usize), q: (usize, usize)| {
            let (ip, iq) = ((p.0 * w + p.1) as u32, (q.0 * w + q.1) as u32);
            match (foreground[p], foreground[q]) {
                (true, true) => edges.push((ip, iq)),
                (true, false) => edges.push((ip, zero)),
                (false, true) => edges.push((iq, zero)),
                (false, false) => {}
            }
        };
        for i in 0..h {
            for j in 0..w {
                if !mask[[i, j]] {
                    continue;
                }
                if j + 1 < w && mask[[i, j + 1]] {
                    add((i, j), (i, j + 1));
                }
                if i + 1 < h && mask[[i + 1, j]] {
                    add((i, j), (i + 1, j));
                }
            }
        }
        Self {
            edges,
            pixels: h * w,
            mask,
        }
    }

    /// `D = V - K^T u`, where `(K D)_e = D_p - D_q`.
    fn primal(&self, v: &[f64], u: &[f64], d: &mut [f64]) {
        d[..self.pixels].copy_from_slice(v);
        for (&(p, q), &ue) in self.edges.iter().zip(u) {
            d[p as usize] -= ue;
            d[q as usize] += ue;
        }
        d[self.pixels] = 0.0;
    }

    /// `min_D 0.5 |D - V|^2 + t * sum_e |D_p - D_q|` by accelerated projected
    /// gradient on the dual, warm-started from `dual`.
    fn prox(&self, v: &[f64], t: f64, dual: &mut [f64], iterations: usize) -> Vec<f64> {
        const STEP: f64 = 1.0 / 8.0;
        const TOL: f64 = 1e-7;
        let n = self.pixels;
        for u in dual.iter_mut() {
            *u = u.clamp(-t, t);
        }
        let mut d = vec![0.0; n + 1];
        let mut d_prev = vec![0.0; n + 1];
        let mut y = dual.to_vec();
        let mut u_prev = dual.to_vec();
        let mut theta = 1.0f64;
        self.primal(v, dual, &mut d_prev);
        for _ in 0..iterations {
            self.primal(v, &y, &mut d);
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_next;
            for (e, &(p, q)) in self.edges.iter().enumerate() {
                let u = (y[e] + STEP * (d[p as usize] - d[q as usize])).clamp(-t, t);
                y[e] = u + beta * (u - u_prev[e]);
                u_prev[e] = u;
            }
            theta = theta_next;
            self.primal(v, &u_prev, &mut d);
            let change = d.iter().zip(&d_prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut d, &mut d_prev);
            if change < TOL {
                break;
            }
        }
        dual.copy_from_slice(&u_prev);
        self.primal(v, dual, &mut d);
        d.truncate(n);
        d
    }
}

const TRACE_STREAM: u64 = 0x7472_6163_655f_6e7a;

struct Workspace<'a> {
    image: &'a LabeledImage,
    graph: TvGraph,
    rng: ChaCha8Rng,
    dual: Vec<f64>,
}

/// Restores one image. Equivalent to [`restore_batch`] on a single image.
pub fn map_restore(
    model: &NormativePrior,
    image: &LabeledImage,
    config: &RestorationConfig,
) -> Result<RestorationResult> {
    Ok(restore_batch(model, &[image], config, 1)?.pop().expect("one result"))
}

/// Restores several images at once. Each image has its own noise stream, so
/// the result for an image does not depend on the rest of the batch.
/// `workers > 1` splits the batch across threads.
pub fn restore_batch(
    model: &NormativePrior,
    images: &[&LabeledImage],
    config: &RestorationConfig,
    workers: usize,
) -> Result<Vec<RestorationResult>> {
    config.validate()?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let workers = workers.max(1).min(images.len());
    if workers == 1 {
        return restore_chunk(model, images, config);
    }
    let chunk = images.len().div_ceil(workers);
    let parts: Vec<Result<Vec<RestorationResult>>> = images
        .par_chunks(chunk)
        .map(|c| restore_chunk(model, c, config))
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn draw_noise<'r>(
    model: &NormativePrior,
    rngs: impl ExactSizeIterator<Item = &'r mut ChaCha8Rng>,
    samples: usize,
) -> ElboNoise {
    let m = model.latent_dim();
    let b = rngs.len();
    let mut eps_z = Array3::zeros((samples, b, m));
    let mut eps_omega = (model.kind() == PriorKind::Gmvae).then(|| Array3::zeros((samples, b, m)));
    for (k, rng) in rngs.enumerate() {
        let one = ElboNoise::sample(rng, model.kind(), samples, 1, m);
        eps_z.index_axis_mut(Axis(1), k).assign(&one.eps_z.index_axis(Axis(1), 0));
        if let (Some(dst), Some(src)) = (eps_omega.as_mut(), one.eps_omega.as_ref()) {
            dst.index_axis_mut(Axis(1), k).assign(&src.index_axis(Axis(1), 0));
        }
    }
    ElboNoise { eps_z, eps_omega }
}

fn restore_chunk(
    model: &NormativePrior,
    images: &[&LabeledImage],
    config: &RestorationConfig,
) -> Result<Vec<RestorationResult>> {
    let shape = model.config.image_shape;
    for img in images {
        if img.shape() != (shape[0], shape[1]) {
            return Err(Error::Argument(format!(
                "image {}/{} has shape {:?}, model expects {:?}",
                img.subject_id,
                img.slice_id,
                img.shape(),
                shape
            )));
        }
    }
    let (h, w) = (shape[0], shape[1]);
    let pixels = h * w;
    let b = images.len();
    let y = stack_images(images.iter().map(|i| &i.pixels), pixels)?;
    let fg = stack_images(
        images.iter().map(|i| i.foreground_mask.mapv(|f| if f { 1.0 } else { 0.0 })).collect::<Vec<_>>().iter(),
        pixels,
    )?;
    let mut ws: Vec<Workspace<'_>> = images
        .iter()
        .map(|img| {
            let graph = TvGraph::new(&img.foreground_mask, config.tv_support);
            let dual = vec![0.0; graph.edges.len()];
            Workspace {
                image: img,
                rng: ChaCha8Rng::seed_from_u64(image_seed(config.seed, &img.subject_id, img.slice_id)),
                graph,
                dual,
            }
        })
        .collect();

    let lambda = config.lambda;
    let mut x = y.clone();
    let mut traces: Vec<Vec<TracePoint>> = vec![Vec::with_capacity(config.total_steps + 1); b];
    let mut snapshots: Vec<Vec<(usize, Image)>> = vec![Vec::new(); b];
    let frozen = config
        .freeze_noise
        .then(|| draw_noise(model, ws.iter_mut().map(|w| &mut w.rng), config.elbo_samples));
    let trace_noise = match &frozen {
        Some(n) => n.clone(),
        None => {
            let mut rngs: Vec<ChaCha8Rng> = images
                .iter()
                .map(|img| ChaCha8Rng::seed_from_u64(image_seed(config.seed ^ TRACE_STREAM, &img.subject_id, img.slice_id)))
                .collect();
            draw_noise(model, rngs.iter_mut(), config.elbo_samples)
        }
    };

    let data_terms = |x: &Array2<f64>, ws: &[Workspace<'_>]| -> Vec<f64> {
        ws.iter()
            .enumerate()
            .map(|(k, wk)| {
                let d = (&x.row(k) - &y.row(k)).into_shape_with_order((h, w)).expect("row").to_owned();
                -lambda * tv_norm(&d, &wk.graph.mask)
            })
            .collect()
    };

    for it in 0..=config.total_steps {
        let last = it == config.total_steps;
        let eval = model.elbo_with_noise(x.view(), &trace_noise, GradRequest::NONE)?;
        let data = data_terms(&x, &ws);
        for k in 0..b {
            let elbo = eval.terms[k].elbo;
            let total = data[k] + elbo;
            if !total.is_finite() {
                return Err(Error::Restoration { iteration: it });
            }
            traces[k].push(TracePoint {
                data_term: data[k],
                elbo,
                total,
            });
        }
        if last {
            break;
        }
        let fresh;
        let noise = match &frozen {
            Some(n) => n,
            None => {
                fresh = draw_noise(model, ws.iter_mut().map(|w| &mut w.rng), config.elbo_samples);
                &fresh
            }
        };
        let out = model.elbo_with_noise(x.view(), noise, GradRequest::INPUT)?;
        let alpha = config.step_size(it + 1);
        let mut grad = out.input_grad.expect("requested");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Restoration { iteration: it });
        }
        grad *= &fg;
        match config.tv_update {
            TvUpdate::Subgradient => {
                for (k, wk) in ws.iter().enumerate() {
                    let d = (&x.row(k) - &y.row(k)).into_shape_with_order((h, w)).expect("row").to_owned();
                    let s = tv_subgradient(&d, &wk.graph.mask);
                    let mut row = x.row_mut(k);
                    Zip::from(&mut row)
                        .and(grad.row(k))
                        .and(s.as_slice().expect("standard layout"))
                        .and(fg.row(k))
                        .for_each(|xv, &g, &sv, &f| *xv += f * alpha * (g - lambda * sv));
                }
            }
            TvUpdate::Proximal => {
                for (k, wk) in ws.iter_mut().enumerate() {
                    let v: Vec<f64> = x
                        .row(k)
                        .iter()
                        .zip(y.row(k))
                        .zip(grad.row(k))
                        .map(|((&xv, &yv), &g)| xv + alpha * g - yv)
                        .collect();
                    let mut d = wk.graph.prox(&v, alpha * lambda, &mut wk.dual, config.prox_iterations);
                    for dv in &mut d {
                        if dv.abs() < config.prox_resolution {
                            *dv = 0.0;
                        }
                    }
                    let mut row = x.row_mut(k);
                    Zip::from(&mut row)
                        .and(y.row(k))
                        .and(&ndarray::ArrayView1::from(&d[..]))
                        .and(fg.row(k))
                        .for_each(|xv, &yv, &dv, &f| *xv = if f > 0.0 { yv + dv } else { yv });
                }
            }
        }
        if let Some(every) = config.snapshot_every {
            if (it + 1) % every == 0 {
                for k in 0..b {
                    let abs = (&y.row(k) - &x.row(k)).mapv(f64::abs).into_shape_with_order((h, w)).expect("row");
                    snapshots[k].push((it + 1, abs));
                }
            }
        }
    }

    let results = ws
        .iter()
        .enumerate()
        .map(|(k, wk)| {
            let restored = x.row(k).to_owned().into_shape_with_order((h, w)).expect("row");
            let difference = &wk.image.pixels - &restored;
            let abs_difference = difference.mapv(f64::abs);
            RestorationResult {
                restored,
                difference,
                abs_difference,
                foreground: wk.image.foreground_mask.clone(),
                trace: std::mem::take(&mut traces[k]),
                snapshots: std::mem::take(&mut snapshots[k]),
            }
        })
        .collect();
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::{PriorConfig, PriorKind};
    use crate::synth::{generate_lesioned, LesionConfig, PhantomConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn full(h: usize, w: usize) -> Mask {
        Mask::from_elem((h, w), true)
    }

    fn bump() -> Image {
        let mut img = Image::zeros((5, 5));
        img[[2, 2]] = 1.0;
        img
    }

    #[test]
    fn tv_norm_examples() {
        assert_eq!(tv_norm(&Image::from_elem((4, 6), 2.5), &full(4, 6)), 0.0);
        assert_eq!(tv_norm(&bump(), &full(5, 5)), 4.0);
        let ramp = Image::from_shape_fn((3, 5), |(_, j)| j as f64);
        assert_eq!(tv_norm(&ramp, &full(3, 5)), 3.0 * 4.0);
    }

    #[test]
    fn tv_norm_skips_pairs_leaving_the_mask() {
        let mut mask = full(5, 5);
        mask[[2, 3]] = false;
        assert_eq!(tv_norm(&bump(), &mask), 3.0);
    }

    #[test]
    fn tv_subgradient_examples() {
        let g = tv_subgradient(&Image::from_elem((3, 3), 1.0), &full(3, 3));
        assert!(g.iter().all(|&v| v == 0.0));
        let g = tv_subgradient(&bump(), &full(5, 5));
        assert_eq!(g[[2, 2]], 4.0);
        assert_eq!(g[[1, 2]], -1.0);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn tv_subgradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = Image::from_shape_simple_fn((7, 9), || rng.random_range(-1.0..1.0));
        let mut mask = full(7, 9);
        mask[[0, 0]] = false;
        mask[[3, 4]] = false;
        let g = tv_subgradient(&img, &mask);
        let h = 1e-5;
        for i in 0..7 {
            for j in 0..9 {
                let mut p = img.clone();
                p[[i, j]] += h;
                let mut m = img.clone();
                m[[i, j]] -= h;
                let fd = (tv_norm(&p, &mask) - tv_norm(&m, &mask)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-4, "({i},{j}) fd {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn prox_of_two_pixels_matches_closed_form() {
        let mut fg = Mask::from_elem((3, 4), false);
        fg[[1, 1]] = true;
        fg[[1, 2]] = true;
        let graph = TvGraph::new(&fg, TvSupport::Foreground);
        assert_eq!(graph.edges.len(), 1);
        let (a, b) = (5, 6);
        for (v1, v2, t) in [(1.0, 0.2, 0.1), (1.0, 0.2, 0.5), (-0.3, 0.9, 0.25)] {
            let mut v = vec![0.0; 12];
            v[a] = v1;
            v[b] = v2;
            let mut dual = vec![0.0; 1];
            let d = graph.prox(&v, t, &mut dual, 500);
            let (e1, e2) = if (v1 - v2).abs() <= 2.0 * t {
                let m = 0.5 * (v1 + v2);
                (m, m)
            } else {
                let s = sign(v1 - v2);
                (v1 - s * t, v2 + s * t)
            };
            assert!((d[a] - e1).abs() < 1e-6 && (d[b] - e2).abs() < 1e-6, "{:?}", (d[a], d[b], e1, e2));
        }
    }

    #[test]
    fn anchored_prox_of_isolated_pixel_soft_thresholds() {
        let mut fg = Mask::from_elem((3, 3), false);
        fg[[1, 1]] = true;
        let graph = TvGraph::new(&fg, TvSupport::Anchored);
        assert_eq!(graph.edges.len(), 4);
        for (v, t, expected) in [(1.0, 0.1, 0.6), (-1.0, 0.1, -0.6), (0.3, 0.1, 0.0)] {
            let mut x = vec![0.0; 9];
            x[4] = v;
            let mut dual = vec![0.0; 4];
            let d = graph.prox(&x, t, &mut dual, 500);
            assert!((d[4] - expected).abs() < 1e-6, "{v} {t}: {}", d[4]);
        }
    }

    fn toy_model() -> NormativePrior {
        let cfg = PriorConfig {
            kind: PriorKind::Gmvae,
            latent_dim: 4,
            mixture_count: 2,
            hidden: vec![16],
            mixture_hidden: 8,
            ..PriorConfig::default()
        };
        NormativePrior::new(cfg, 1).unwrap()
    }

    fn phantom(seed: u64) -> LabeledImage {
        generate_lesioned(seed, &PhantomConfig::default(), &LesionConfig::default()).unwrap()
    }

    #[test]
    fn zero_steps_is_identity() {
        let model = toy_model();
        let y = phantom(3);
        let cfg = RestorationConfig {
            total_steps: 0,
            ..RestorationConfig::default()
        };
        let r = map_restore(&model, &y, &cfg).unwrap();
        assert_eq!(r.restored, y.pixels);
        assert!(r.difference.iter().all(|&d| d == 0.0));
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.trace[0].data_term, 0.0);
        assert!(detect(&r).iter().all(|&d| d == 0.0));
    }

    #[test]
    fn one_subgradient_step_is_a_plain_elbo_step() {
        let model = toy_model();
        let y = phantom(4);
        let cfg = RestorationConfig {
            total_steps: 1,
            lambda: 3.0,
            tv_update: TvUpdate::Subgradient,
            ..RestorationConfig::default()
        };
        let r = map_restore(&model, &y, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, &y.subject_id, y.slice_id));
        let noise = ElboNoise::sample(&mut rng, model.kind(), 1, 1, model.latent_dim());
        let x0 = y.pixels.to_shape((1, 1024)).unwrap().to_owned();
        let g = model
            .elbo_with_noise(x0.view(), &noise, GradRequest::INPUT)
            .unwrap()
            .input_grad
            .unwrap();
        for (k, ((&xr, &yv), &f)) in r.restored.iter().zip(&y.pixels).zip(&y.foreground_mask).enumerate() {
            let expected = if f { yv + 5e-3 * g[[0, k]] } else { yv };
            assert_eq!(xr, expected);
        }
    }

    #[test]
    fn result_invariants_hold() {
        let model = toy_model();
        let y = phantom(5);
        for update in [TvUpdate::Subgradient, TvUpdate::Proximal] {
            let cfg = RestorationConfig {
                total_steps: 30,
                tv_update: update,
                snapshot_every: Some(10),
                ..RestorationConfig::default()
            };
            let r = map_restore(&model, &y, &cfg).unwrap();
            assert_eq!(r.trace.len(), 31);
            assert_eq!(r.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![10, 20, 30]);
            for ((&x, &d), &yv) in r.restored.iter().zip(&r.difference).zip(&y.pixels) {
                assert_eq!(d, yv - x);
                assert!((x + d - yv).abs() <= 1e-12);
            }
            for ((&x, &yv), &f) in r.restored.iter().zip(&y.pixels).zip(&y.foreground_mask) {
                if !f {
                    assert_eq!(x, yv);
                }
            }
            let again = map_restore(&model, &y, &cfg).unwrap();
            assert_eq!(again, r);
        }
    }

    #[test]
    fn huge_lambda_keeps_the_observation() {
        let model = toy_model();
        let y = phantom(6);
        let cfg = RestorationConfig {
            total_steps: 50,
            lambda: 1e6,
            ..RestorationConfig::default()
        };
        let r = map_restore(&model, &y, &cfg).unwrap();
        let max = r.abs_difference.iter().copied().fold(0.0, f64::max);
        assert!(max <= 1e-2, "{max}");
    }

    #[test]
    fn batch_matches_single_restoration() {
        let model = toy_model();
        let imgs: Vec<LabeledImage> = (10..13).map(phantom).collect();
        let refs: Vec<&LabeledImage> = imgs.iter().collect();
        let cfg = RestorationConfig {
            total_steps: 10,
            ..RestorationConfig::default()
        };
        let batch = restore_batch(&model, &refs, &cfg, 1).unwrap();
        let threaded = restore_batch(&model, &refs, &cfg, 2).unwrap();
        for (k, img) in imgs.iter().enumerate() {
            let single = map_restore(&model, img, &cfg).unwrap();
            for r in [&batch[k], &threaded[k]] {
                let gap = (&r.restored - &single.restored).iter().fold(0.0f64, |a, d| a.max(d.abs()));
                assert!(gap <= 1e-9, "{gap}");
            }
        }
    }

    #[test]
    fn non_finite_objective_reports_iteration() {
        let model = toy_model();
        let mut y = phantom(7);
        y.pixels.mapv_inplace(|v| v * 1e160);
        let err = map_restore(&model, &y, &RestorationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Restoration { iteration: 0 }), "{err}");
    }

    #[test]
    fn detect_scores_foreground_magnitudes() {
        let mut fg = Mask::from_elem((2, 2), true);
        fg[[0, 0]] = false;
        let diff = ndarray::array![[0.5, -2.0], [0.0, 1.0]];
        let r = RestorationResult {
            restored: Image::zeros((2, 2)),
            abs_difference: diff.mapv(f64::abs),
            difference: diff,
            foreground: fg,
            trace: vec![],
            snapshots: vec![],
        };
        assert_eq!(detect(&r), ndarray::array![[0.0, 2.0], [0.0, 1.0]]);
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = RestorationConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.step_size(1), 5e-3);
        assert_eq!(cfg.step_size(100), 5e-3);
        assert_eq!(cfg.step_size(101), 3e-3);
        cfg.step_schedule[1].start = 100;
        assert!(cfg.validate().is_err());
        cfg.step_schedule[1].start = 102;
        assert!(cfg.validate().is_err());
        cfg.step_schedule = vec![StepRange {
            start: 1,
            end: Some(10),
            step_size: 1e-3,
        }];
        cfg.total_steps = 11;
        assert!(cfg.validate().is_err());
        cfg.total_steps = 10;
        assert!(cfg.validate().is_ok());
        cfg.step_schedule[0].step_size = 0.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn tv_is_nonnegative_and_shift_invariant(
            vals in proptest::collection::vec(-10.0f64..10.0, 20),
            shift in -5.0f64..5.0,
        ) {
            let img = Image::from_shape_vec((4, 5), vals).unwrap();
            let mask = full(4, 5);
            let tv = tv_norm(&img, &mask);
            prop_assert!(tv >= 0.0);
            let shifted = img.mapv(|v| v + shift);
            prop_assert!((tv_norm(&shifted, &mask) - tv).abs() < 1e-9);
        }
    }
}
