//! Detection metrics: pooled pixel ROC, Dice, subject-wise scores and the
//! prior-projection baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabeledImage, Mask};
use crate::prior::NormativePrior;

/// Empirical ROC. A pixel is flagged when its score is strictly greater than
/// the threshold. Thresholds run from the largest score (nothing flagged)
/// down to below the smallest score (everything flagged).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// ROC of a flat pool of scores and labels.
pub fn roc_from_pool(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation(format!(
            "ROC undefined with {pos} positive and {neg} negative pixels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = Vec::new();
    let mut tpr = Vec::new();
    let mut fpr = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        thresholds.push(s);
        tpr.push(tp as f64 / pos as f64);
        fpr.push(fp as f64 / neg as f64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    thresholds.push(scores[order[order.len() - 1]] - 1.0);
    tpr.push(1.0);
    fpr.push(1.0);
    let auc = trapezoid(&fpr, &tpr);
    Ok(RocCurve {
        thresholds,
        tpr,
        fpr,
        auc,
    })
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| (xw[1] - xw[0]) * 0.5 * (yw[0] + yw[1]))
        .sum()
}

/// Foreground scores and labels of a set of images, pooled.
pub fn pool_foreground(score_maps: &[Image], gt: &[Mask], foreground: &[Mask]) -> Result<(Vec<f64>, Vec<bool>)> {
    if score_maps.len() != gt.len() || gt.len() != foreground.len() {
        return Err(Error::Evaluation("every score map needs a mask".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ((s, g), f) in score_maps.iter().zip(gt).zip(foreground) {
        if s.dim() != g.dim() || s.dim() != f.dim() {
            return Err(Error::Evaluation("score map and mask shapes differ".into()));
        }
        for ((&sv, &gv), &fv) in s.iter().zip(g).zip(f) {
            if fv {
                scores.push(sv);
                labels.push(gv);
            }
        }
    }
    Ok((scores, labels))
}

/// Dataset-level ROC over the foreground pixels of every image.
pub fn roc_auc(score_maps: &[Image], gt: &[Mask], foreground: &[Mask]) -> Result<RocCurve> {
    let (scores, labels) = pool_foreground(score_maps, gt, foreground)?;
    roc_from_pool(&scores, &labels)
}

/// Threshold maximizing `TPR - FPR`; ties go to the higher threshold.
pub fn dsc_auc_threshold(curve: &RocCurve) -> Result<f64> {
    let n = curve.thresholds.len();
    if n < 2 || curve.tpr.len() != n || curve.fpr.len() != n {
        return Err(Error::Evaluation("degenerate ROC curve".into()));
    }
    let mut best = 0;
    for i in 1..n {
        let j = curve.tpr[i] - curve.fpr[i];
        let b = curve.tpr[best] - curve.fpr[best];
        if j > b || (j == b && curve.thresholds[i] > curve.thresholds[best]) {
            best = i;
        }
    }
    Ok(curve.thresholds[best])
}

/// `2|A & B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(pred: &Mask, gt: &Mask) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// One slice of a subject with its continuous detection and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct SliceDetection<'a> {
    pub subject_id: &'a str,
    pub scores: &'a Image,
    pub gt: &'a Mask,
    pub foreground: &'a Mask,
}

fn subject_counts<'a>(
    slices: &[SliceDetection<'a>],
    threshold: f64,
) -> BTreeMap<&'a str, [usize; 5]> {
    // [intersection, predicted, truth, flagged healthy, healthy]
    let mut acc: BTreeMap<&str, [usize; 5]> = BTreeMap::new();
    for s in slices {
        let c = acc.entry(s.subject_id).or_default();
        for ((&v, &g), &f) in s.scores.iter().zip(s.gt).zip(s.foreground) {
            let p = f && v > threshold;
            c[0] += (p && g) as usize;
            c[1] += p as usize;
            c[2] += g as usize;
            if f && !g {
                c[3] += p as usize;
                c[4] += 1;
            }
        }
    }
    acc
}

/// Dice per subject with all its slices pooled, at threshold `T`.
pub fn subject_dsc(slices: &[SliceDetection<'_>], threshold: f64) -> BTreeMap<String, f64> {
    subject_counts(slices, threshold)
        .into_iter()
        .map(|(id, c)| {
            let d = if c[1] + c[2] == 0 {
                1.0
            } else {
                2.0 * c[0] as f64 / (c[1] + c[2]) as f64
            };
            (id.to_string(), d)
        })
        .collect()
}

/// Dice of one subject; unknown ids are an error.
pub fn subject_dsc_of(slices: &[SliceDetection<'_>], subject_id: &str, threshold: f64) -> Result<f64> {
    subject_dsc(slices, threshold)
        .remove(subject_id)
        .ok_or_else(|| Error::Argument(format!("unknown subject {subject_id}")))
}

/// Per-subject FPR: flagged healthy foreground pixels over healthy
/// foreground pixels.
pub fn subject_fpr(slices: &[SliceDetection<'_>], threshold: f64) -> BTreeMap<String, f64> {
    subject_counts(slices, threshold)
        .into_iter()
        .map(|(id, c)| {
            let f = if c[4] == 0 { 0.0 } else { c[3] as f64 / c[4] as f64 };
            (id.to_string(), f)
        })
        .collect()
}

/// Baseline: `|Y - mu_X(mu_z(Y))|` on the foreground.
pub fn prior_projection_detect(model: &NormativePrior, image: &LabeledImage) -> Result<Image> {
    let rec = model.reconstruct(&image.pixels)?;
    let mut out = (&image.pixels - &rec).mapv(f64::abs);
    ndarray::Zip::from(&mut out)
        .and(&image.foreground_mask)
        .for_each(|v, &f| {
            if !f {
                *v = 0.0
            }
        });
    Ok(out)
}

/// A named detection threshold, e.g. `DSC5` at the 5% FPR limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedThreshold {
    pub label: String,
    pub fpr_limit: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscSummary {
    pub label: String,
    pub fpr_limit: Option<f64>,
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: String,
    pub lesion_size: usize,
    /// One entry per threshold, in the order of `EvaluationReport::dsc`.
    pub dsc: Vec<f64>,
    pub fpr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub auc: f64,
    pub dsc: Vec<DscSummary>,
    pub rows: Vec<SubjectRow>,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Scores one method on a test set: pooled AUC, then subject-wise Dice and
/// FPR at each calibrated threshold plus the ROC-optimal one (`DSC_AUC`).
pub fn evaluate_method(
    method: &str,
    images: &[&LabeledImage],
    score_maps: &[Image],
    thresholds: &[NamedThreshold],
) -> Result<EvaluationReport> {
    if images.len() != score_maps.len() {
        return Err(Error::Evaluation("one score map per image is required".into()));
    }
    let gt: Vec<Mask> = images.iter().map(|i| i.anomaly_mask.clone()).collect();
    let fg: Vec<Mask> = images.iter().map(|i| i.foreground_mask.clone()).collect();
    let roc = roc_auc(score_maps, &gt, &fg)?;
    let mut all = thresholds.to_vec();
    all.push(NamedThreshold {
        label: "DSC_AUC".into(),
        fpr_limit: None,
        threshold: dsc_auc_threshold(&roc)?,
    });
    let slices: Vec<SliceDetection<'_>> = images
        .iter()
        .zip(score_maps)
        .map(|(img, s)| SliceDetection {
            subject_id: &img.subject_id,
            scores: s,
            gt: &img.anomaly_mask,
            foreground: &img.foreground_mask,
        })
        .collect();
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for img in images {
        *sizes.entry(&img.subject_id).or_default() += img.lesion_size();
    }
    let per_threshold: Vec<(BTreeMap<String, f64>, BTreeMap<String, f64>)> = all
        .iter()
        .map(|t| (subject_dsc(&slices, t.threshold), subject_fpr(&slices, t.threshold)))
        .collect();
    let rows: Vec<SubjectRow> = sizes
        .iter()
        .map(|(&id, &size)| SubjectRow {
            subject_id: id.to_string(),
            lesion_size: size,
            dsc: per_threshold.iter().map(|(d, _)| d[id]).collect(),
            fpr: per_threshold.iter().map(|(_, f)| f[id]).collect(),
        })
        .collect();
    let dsc = all
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let vals: Vec<f64> = rows.iter().map(|r| r.dsc[k]).collect();
            let (mean, std) = mean_std(&vals);
            DscSummary {
                label: t.label.clone(),
                fpr_limit: t.fpr_limit,
                threshold: t.threshold,
                mean,
                std,
            }
        })
        .collect();
    Ok(EvaluationReport {
        method: method.to_string(),
        auc: roc.auc,
        dsc,
        rows,
        roc: Some(roc),
    })
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for k in i..=j {
            out[order[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side has no variance.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return 0.0;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeAnalysis {
    pub threshold_label: String,
    pub size_dsc: Vec<(f64, f64)>,
    pub size_fpr: Vec<(f64, f64)>,
    pub spearman_size_dsc: f64,
    pub spearman_size_fpr: f64,
}

/// Lesion size against Dice and against FPR at one of the report's
/// thresholds. Subjects without lesions are left out.
pub fn size_analysis(report: &EvaluationReport, threshold_index: usize) -> Result<SizeAnalysis> {
    let label = report
        .dsc
        .get(threshold_index)
        .ok_or_else(|| Error::Argument(format!("no threshold #{threshold_index} in report")))?
        .label
        .clone();
    let rows: Vec<&SubjectRow> = report.rows.iter().filter(|r| r.lesion_size > 0).collect();
    let size_dsc: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.lesion_size as f64, r.dsc[threshold_index]))
        .collect();
    let size_fpr: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.lesion_size as f64, r.fpr[threshold_index]))
        .collect();
    let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
    let (s1, d1) = split(&size_dsc);
    let (s2, f2) = split(&size_fpr);
    Ok(SizeAnalysis {
        threshold_label: label,
        spearman_size_dsc: spearman(&s1, &d1),
        spearman_size_fpr: spearman(&s2, &f2),
        size_dsc,
        size_fpr,
    })
}
