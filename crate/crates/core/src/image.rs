//! Labeled 2D images and small mask utilities shared by every stage.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity assigned to every non-tissue pixel.
pub const BACKGROUND_INTENSITY: f64 = -3.5;

pub type Image = Array2<f64>;
pub type Mask = Array2<bool>;

/// Affine normalization statistics taken from a reference subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// A 2D scalar image with its tissue and anomaly masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    pub anomaly_mask: Mask,
    pub foreground_mask: Mask,
    pub subject_id: String,
    pub slice_id: u32,
    /// Generator seed the image was produced from.
    pub seed: u64,
    /// Statistics used to normalize the image, if it has been normalized.
    pub normalization: Option<NormStats>,
}

impl LabeledImage {
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn lesion_size(&self) -> usize {
        count(&self.anomaly_mask)
    }

    pub fn is_healthy(&self) -> bool {
        self.lesion_size() == 0
    }

    /// Checks the structural invariants: matching shapes, finite pixels,
    /// anomalies inside tissue, constant background.
    pub fn validate(&self) -> Result<()> {
        let dim = self.pixels.dim();
        if self.anomaly_mask.dim() != dim || self.foreground_mask.dim() != dim {
            return Err(Error::Argument(format!(
                "mask shapes {:?}/{:?} do not match image shape {:?}",
                self.anomaly_mask.dim(),
                self.foreground_mask.dim(),
                dim
            )));
        }
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "image {}/{} contains non-finite pixels",
                self.subject_id, self.slice_id
            )));
        }
        let mut ok = true;
        Zip::from(&self.pixels)
            .and(&self.anomaly_mask)
            .and(&self.foreground_mask)
            .for_each(|&p, &a, &f| {
                if (a && !f) || (!f && p != BACKGROUND_INTENSITY) {
                    ok = false;
                }
            });
        if !ok {
            return Err(Error::Argument(format!(
                "image {}/{} violates mask invariants",
                self.subject_id, self.slice_id
            )));
        }
        Ok(())
    }
}

pub fn count(mask: &Mask) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Values of `image` at the pixels selected by `mask`, in row-major order.
pub fn masked_values(image: &Image, mask: &Mask) -> Vec<f64> {
    image
        .iter()
        .zip(mask.iter())
        .filter_map(|(&v, &m)| m.then_some(v))
        .collect()
}

/// Mean and population standard deviation of the masked pixels.
pub fn masked_stats(image: &Image, mask: &Mask) -> Option<NormStats> {
    let values = masked_values(image, mask);
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(NormStats {
        mean,
        std: var.sqrt(),
    })
}

/// Binary dilation with a 4-connected structuring element applied `radius` times.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.dim();
    let mut current = mask.clone();
    for _ in 0..radius {
        let prev = current.clone();
        for i in 0..h {
            for j in 0..w {
                if prev[[i, j]] {
                    continue;
                }
                let hit = (i > 0 && prev[[i - 1, j]])
                    || (i + 1 < h && prev[[i + 1, j]])
                    || (j > 0 && prev[[i, j - 1]])
                    || (j + 1 < w && prev[[i, j + 1]]);
                current[[i, j]] = hit;
            }
        }
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dilation_grows_a_point_into_a_diamond() {
        let mut m = Mask::from_elem((5, 5), false);
        m[[2, 2]] = true;
        assert_eq!(count(&dilate(&m, 1)), 5);
        assert_eq!(count(&dilate(&m, 2)), 13);
    }

    #[test]
    fn masked_stats_ignores_unselected_pixels() {
        let img = array![[1.0, 3.0], [100.0, -50.0]];
        let mask = array![[true, true], [false, false]];
        let s = masked_stats(&img, &mask).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert!(masked_stats(&img, &Mask::from_elem((2, 2), false)).is_none());
    }

    #[test]
    fn validate_rejects_lesion_outside_tissue() {
        let img = LabeledImage {
            pixels: Image::from_elem((2, 2), BACKGROUND_INTENSITY),
            anomaly_mask: array![[true, false], [false, false]],
            foreground_mask: Mask::from_elem((2, 2), false),
            subject_id: "s".into(),
            slice_id: 0,
            seed: 0,
            normalization: None,
        };
        assert!(img.validate().is_err());
    }
}
