//! Experiment configuration and the pipeline stages behind the CLI.
//!
//! A run directory holds everything a stage produces:
//!
//! ```text
//! <run>/config.toml              resolved configuration
//! <run>/manifest.json            run manifest with a hash of every file
//! <run>/dataset/                 dataset container
//! <run>/models/<label>.ckpt      trained priors
//! <run>/calibration/<label>.json calibration profiles
//! <run>/detect/<label>/<split>/  restorations, difference maps, masks, traces
//! <run>/report/                  summary.json, rows.csv, roc/, figures/
//! ```
//!
//! Each stage reads only what earlier stages wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{
    calibrate, default_lambda_grid, pool_fpr, select_threshold, threshold_map, CalibrationProfile,
    DEFAULT_FPR_LIMITS,
};
use crate::container::{
    list_files, read_image_f32, read_json, read_split, sha256_file, write_dataset, write_image_f32,
    write_json, write_mask_u8, image_stem,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    dsc_auc_threshold, evaluate_method, prior_projection_detect, roc_auc, size_analysis, DscSummary,
    EvaluationReport, NamedThreshold, SizeAnalysis, SubjectRow,
};
use crate::figures::{line_chart, scatter_chart, thin, Series};
use crate::image::{masked_values, Image, LabeledImage, Mask};
use crate::prior::{load_checkpoint, save_checkpoint, train_prior, train_prior_from, PriorConfig, PriorKind, TrainConfig};
use crate::restoration::{detect, restore_batch, RestorationConfig, RestorationResult, TracePoint};
use crate::synth::{build_dataset, DatasetConfig, SplitName};

/// Environment variable naming the directory that relative output paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "MAPDETECT_OUTPUT_ROOT";

/// Priors to train. Every kind is combined with every latent size, and the
/// GMVAE additionally with every mixture count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub kinds: Vec<PriorKind>,
    pub latent_dims: Vec<usize>,
    pub mixture_counts: Vec<usize>,
    pub hidden: Vec<usize>,
    pub mixture_hidden: usize,
    pub output_std: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        let base = PriorConfig::default();
        Self {
            kinds: vec![PriorKind::Vae, PriorKind::Gmvae],
            latent_dims: vec![base.latent_dim],
            mixture_counts: vec![3],
            hidden: base.hidden,
            mixture_hidden: base.mixture_hidden,
            output_std: base.output_std,
        }
    }
}

impl PriorSection {
    /// One prior configuration per sweep cell.
    pub fn cells(&self, image_size: usize) -> Vec<PriorConfig> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            for &m in &self.latent_dims {
                let counts: &[usize] = match kind {
                    PriorKind::Vae => &[1],
                    PriorKind::Gmvae => &self.mixture_counts,
                };
                for &c in counts {
                    out.push(PriorConfig {
                        kind,
                        image_shape: [image_size, image_size],
                        latent_dim: m,
                        mixture_count: c,
                        hidden: self.hidden.clone(),
                        mixture_hidden: self.mixture_hidden,
                        output_std: self.output_std,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub lambda_grid: Vec<f64>,
    pub fpr_limits: Vec<f64>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            lambda_grid: default_lambda_grid(),
            fpr_limits: DEFAULT_FPR_LIMITS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Also score the prior-projection baseline.
    pub baseline: bool,
    /// Restore the lesioned test set at every grid value of lambda.
    pub lambda_sweep: bool,
    /// Iteration spacing of the convergence curve.
    pub convergence_every: usize,
    /// FPR limit whose threshold is used for the lesion-size analysis.
    pub size_analysis_limit: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            baseline: true,
            lambda_sweep: true,
            convergence_every: 50,
            size_analysis_limit: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory. Relative paths are resolved against
    /// `$MAPDETECT_OUTPUT_ROOT` when it is set.
    pub output_dir: PathBuf,
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub prior: PriorSection,
    pub training: TrainConfig,
    pub restoration: RestorationConfig,
    pub calibration: CalibrationSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            workers: 1,
            dataset: DatasetConfig::default(),
            prior: PriorSection::default(),
            training: TrainConfig::default(),
            restoration: RestorationConfig::default(),
            calibration: CalibrationSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`. The value is read as a TOML value, falling back to a
/// bare string.
fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.trim().to_string(), value))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut table, &k, v)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed of the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.training.seed = seed;
        self.restoration.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.training.validate()?;
        self.restoration.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        let cells = self.prior.cells(self.dataset.phantom.size);
        if cells.is_empty() {
            return Err(Error::Config("prior section selects no models".into()));
        }
        for c in &cells {
            c.validate()?;
        }
        let grid = &self.calibration.lambda_grid;
        if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("calibration.lambda_grid needs finite nonnegative values".into()));
        }
        if self.calibration.fpr_limits.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::Config("calibration.fpr_limits must lie in (0, 1)".into()));
        }
        if self.evaluation.convergence_every == 0 {
            return Err(Error::Config("evaluation.convergence_every must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Run directory with the output root applied.
    pub fn run_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    fn restoration_for_run(&self) -> RestorationConfig {
        RestorationConfig {
            snapshot_every: Some(self.evaluation.convergence_every),
            ..self.restoration.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Seconds since the Unix epoch.
    pub finished_at: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
    pub model_checksums: BTreeMap<String, String>,
    /// Relative path to SHA-256 of every file in the run directory.
    pub files: BTreeMap<String, String>,
}

/// A configured run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn missing(path: &Path, what: &str) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        detail: format!("{what} not found; run the earlier stage first"),
    }
}

fn limit_tag(limit: f64) -> String {
    let pct = limit * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{:02}", pct.round() as u64)
    } else {
        format!("{pct}").replace('.', "p")
    }
}

/// Report label of an FPR-limited threshold, e.g. `DSC5`.
pub fn dsc_label(limit: f64) -> String {
    let pct = limit * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("DSC{}", pct.round() as u64)
    } else {
        format!("DSC{pct}")
    }
}

impl Run {
    pub fn new(config: ExperimentConfig) -> Self {
        let dir = config.run_dir();
        Self { config, dir }
    }

    pub fn at(config: ExperimentConfig, dir: impl Into<PathBuf>) -> Self {
        Self { config, dir: dir.into() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dir.join("dataset")
    }

    pub fn model_path(&self, label: &str) -> PathBuf {
        self.dir.join("models").join(format!("{label}.ckpt"))
    }

    pub fn profile_path(&self, label: &str) -> PathBuf {
        self.dir.join("calibration").join(format!("{label}.json"))
    }

    pub fn detect_dir(&self, label: &str, split: SplitName) -> PathBuf {
        self.dir.join("detect").join(label).join(split.as_str())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.dir.join("report")
    }

    pub fn labels(&self) -> Vec<String> {
        self.config
            .prior
            .cells(self.config.dataset.phantom.size)
            .iter()
            .map(PriorConfig::label)
            .collect()
    }

    fn split(&self, name: SplitName) -> Result<Vec<LabeledImage>> {
        let root = self.dataset_dir();
        if !root.join("manifest.json").exists() {
            return Err(missing(&root.join("manifest.json"), "dataset"));
        }
        read_split(&root, name)
    }

    fn model(&self, label: &str) -> Result<crate::prior::NormativePrior> {
        let path = self.model_path(label);
        if !path.exists() {
            return Err(missing(&path, "checkpoint"));
        }
        load_checkpoint(&path)
    }

    fn profile(&self, label: &str) -> Result<CalibrationProfile> {
        let path = self.profile_path(label);
        if !path.exists() {
            return Err(missing(&path, "calibration profile"));
        }
        CalibrationProfile::load(&path)
    }

    /// Rewrites `config.toml` and `manifest.json` after a stage.
    fn finish_stage(&self, stage: &str, started: std::time::Instant) -> Result<()> {
        mkdir(&self.dir)?;
        std::fs::write(self.dir.join("config.toml"), self.config.to_toml()?)
            .map_err(|e| Error::io(self.dir.join("config.toml"), e))?;
        let path = self.dir.join("manifest.json");
        let mut manifest = if path.exists() {
            read_json::<RunManifest>(&path)?
        } else {
            RunManifest {
                config_hash: String::new(),
                code_version: String::new(),
                seeds: BTreeMap::new(),
                stages: BTreeMap::new(),
                model_checksums: BTreeMap::new(),
                files: BTreeMap::new(),
            }
        };
        manifest.config_hash = self.config.hash();
        manifest.code_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.seeds = BTreeMap::from([
            ("dataset".to_string(), self.config.dataset.seed),
            ("training".to_string(), self.config.training.seed),
            ("restoration".to_string(), self.config.restoration.seed),
        ]);
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                finished_at: now,
                seconds: started.elapsed().as_secs_f64(),
            },
        );
        manifest.model_checksums.clear();
        for label in self.labels() {
            let p = self.model_path(&label);
            if p.exists() {
                manifest.model_checksums.insert(label, load_checkpoint(&p)?.checksum());
            }
        }
        manifest.files.clear();
        for rel in list_files(&self.dir)? {
            if rel == Path::new("manifest.json") {
                continue;
            }
            manifest
                .files
                .insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(&self.dir.join(&rel))?);
        }
        write_json(&path, &manifest)
    }
}

/// Generates the dataset container.
pub fn cmd_generate(run: &Run) -> Result<crate::container::DatasetManifest> {
    let t = std::time::Instant::now();
    let data = build_dataset(&run.config.dataset)?;
    for name in SplitName::ALL {
        if data.split(name).is_empty() {
            log::warn!("split {} is empty", name.as_str());
        }
    }
    let root = run.dataset_dir();
    mkdir(&root)?;
    let json = serde_json::to_string(&run.config.dataset)?;
    let manifest = write_dataset(&root, &data, &hex::encode(Sha256::digest(json.as_bytes())))?;
    log::info!("wrote dataset to {}", root.display());
    run.finish_stage("generate", t)?;
    Ok(manifest)
}

/// Trains every configured prior. With `resume`, an existing checkpoint is
/// trained further up to `training.epochs`.
pub fn cmd_train(run: &Run, resume: bool) -> Result<Vec<String>> {
    let t = std::time::Instant::now();
    let train = run.split(SplitName::TrainHealthy)?;
    let val = run.split(SplitName::ValHealthy)?;
    mkdir(&run.dir.join("models"))?;
    let mut labels = Vec::new();
    for cell in run.config.prior.cells(run.config.dataset.phantom.size) {
        let label = cell.label();
        let path = run.model_path(&label);
        let model = if resume && path.exists() {
            let prev = load_checkpoint(&path)?;
            if prev.config != cell {
                return Err(Error::Config(format!(
                    "cannot resume {label}: checkpoint was trained with a different prior configuration"
                )));
            }
            log::info!("resuming {label} from epoch {}", prev.training.epochs);
            train_prior_from(prev, &train, &val, &run.config.training)?
        } else {
            log::info!("training {label}");
            train_prior(&train, &val, &cell, &run.config.training)?
        };
        log::info!(
            "{label}: validation ELBO {:?} -> {:?}",
            model.training.initial_val_elbo,
            model.training.final_val_elbo
        );
        save_checkpoint(&model, &path)?;
        labels.push(label);
    }
    run.finish_stage("train", t)?;
    Ok(labels)
}

/// Calibrates lambda and the thresholds of every trained prior.
pub fn cmd_calibrate(run: &Run) -> Result<Vec<CalibrationProfile>> {
    let t = std::time::Instant::now();
    let val = run.split(SplitName::ValHealthy)?;
    if val.is_empty() {
        return Err(Error::Calibration("validation split is empty".into()));
    }
    let refs: Vec<&LabeledImage> = val.iter().collect();
    mkdir(&run.dir.join("calibration"))?;
    let mut out = Vec::new();
    for label in run.labels() {
        let model = run.model(&label)?;
        let profile = calibrate(
            &model,
            &refs,
            &run.config.calibration.lambda_grid,
            &run.config.calibration.fpr_limits,
            &run.config.restoration,
            run.config.workers,
        )?;
        for w in &profile.warnings {
            log::warn!("{label}: {w}");
        }
        log::info!("{label}: lambda* = {}", profile.lambda_star);
        profile.save(&run.profile_path(&label))?;
        out.push(profile);
    }
    run.finish_stage("calibrate", t)?;
    Ok(out)
}

/// Per-image record written next to the restored images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub subject_id: String,
    pub slice_id: u32,
    pub model_checksum: String,
    pub restoration: RestorationConfig,
    pub trace: Vec<TracePoint>,
    /// Iterations stored, in order, in `<stem>.snapshots.f32`.
    pub snapshot_iterations: Vec<usize>,
    /// FPR limit and the threshold used for each `<stem>.fprNN.u8` mask.
    pub thresholds: Vec<(f64, f64)>,
}

fn write_stack(path: &Path, images: &[&Image]) -> Result<()> {
    let mut bytes = Vec::new();
    for img in images {
        for &v in img.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_stack(path: &Path, count: usize, shape: [usize; 2]) -> Result<Vec<Image>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = shape[0] * shape[1];
    if bytes.len() != 4 * n * count {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            detail: format!("expected {count} images of shape {shape:?}"),
        });
    }
    Ok(bytes
        .chunks_exact(4 * n)
        .map(|c| {
            let v: Vec<f64> = c
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            Image::from_shape_vec((shape[0], shape[1]), v).expect("length checked")
        })
        .collect())
}

fn write_detection(
    dir: &Path,
    img: &LabeledImage,
    result: &RestorationResult,
    profile: &CalibrationProfile,
    config: &RestorationConfig,
) -> Result<()> {
    let stem = image_stem(&img.subject_id, img.slice_id);
    write_image_f32(&dir.join(format!("{stem}.restored.f32")), &result.restored)?;
    write_image_f32(&dir.join(format!("{stem}.diff.f32")), &result.difference)?;
    let scores = detect(result);
    for t in &profile.thresholds {
        let mask = threshold_map(&scores, &img.foreground_mask, t.threshold);
        write_mask_u8(&dir.join(format!("{stem}.fpr{}.u8", limit_tag(t.fpr_limit))), &mask)?;
    }
    let snaps: Vec<&Image> = result.snapshots.iter().map(|(_, s)| s).collect();
    write_stack(&dir.join(format!("{stem}.snapshots.f32")), &snaps)?;
    write_json(
        &dir.join(format!("{stem}.trace.json")),
        &DetectionRecord {
            subject_id: img.subject_id.clone(),
            slice_id: img.slice_id,
            model_checksum: profile.model_checksum.clone(),
            restoration: config.clone(),
            trace: result.trace.clone(),
            snapshot_iterations: result.snapshots.iter().map(|(i, _)| *i).collect(),
            thresholds: profile.thresholds.iter().map(|t| (t.fpr_limit, t.threshold)).collect(),
        },
    )
}

/// Restores every image of the given splits at the calibrated lambda and
/// writes the difference maps and thresholded masks.
pub fn cmd_detect(run: &Run, splits: &[SplitName]) -> Result<()> {
    let t = std::time::Instant::now();
    for label in run.labels() {
        let model = run.model(&label)?;
        let profile = run.profile(&label)?;
        profile.check_model(&model)?;
        let config = RestorationConfig {
            lambda: profile.lambda_star,
            ..run.config.restoration_for_run()
        };
        for &split in splits {
            let images = run.split(split)?;
            if images.is_empty() {
                log::warn!("split {} is empty; nothing to detect", split.as_str());
                continue;
            }
            let dir = run.detect_dir(&label, split);
            mkdir(&dir)?;
            let refs: Vec<&LabeledImage> = images.iter().collect();
            log::info!("{label}: restoring {} images of {}", refs.len(), split.as_str());
            let results = restore_batch(&model, &refs, &config, run.config.workers)?;
            for (img, r) in images.iter().zip(&results) {
                write_detection(&dir, img, r, &profile, &config)?;
            }
        }
    }
    run.finish_stage("detect", t)?;
    Ok(())
}

/// Stored detection output of one image.
struct StoredDetection {
    scores: Image,
    trace: Vec<TracePoint>,
    snapshots: Vec<(usize, Image)>,
}

fn read_detection(dir: &Path, img: &LabeledImage, checksum: &str) -> Result<StoredDetection> {
    let stem = image_stem(&img.subject_id, img.slice_id);
    let trace_path = dir.join(format!("{stem}.trace.json"));
    if !trace_path.exists() {
        return Err(missing(&trace_path, "detection output"));
    }
    let record: DetectionRecord = read_json(&trace_path)?;
    if record.model_checksum != checksum {
        return Err(Error::Artifact {
            path: trace_path,
            detail: "detection was produced by a different checkpoint".into(),
        });
    }
    let (h, w) = img.shape();
    let diff = read_image_f32(&dir.join(format!("{stem}.diff.f32")), [h, w])?;
    let scores = foreground_abs(&diff, &img.foreground_mask);
    let stack = read_stack(
        &dir.join(format!("{stem}.snapshots.f32")),
        record.snapshot_iterations.len(),
        [h, w],
    )?;
    let snapshots = record
        .snapshot_iterations
        .iter()
        .copied()
        .zip(stack)
        .map(|(i, s)| (i, foreground_abs(&s, &img.foreground_mask)))
        .collect();
    Ok(StoredDetection {
        scores,
        trace: record.trace,
        snapshots,
    })
}

fn foreground_abs(diff: &Image, fg: &Mask) -> Image {
    let mut out = diff.mapv(f64::abs);
    out.zip_mut_with(fg, |v, &f| {
        if !f {
            *v = 0.0
        }
    });
    out
}

fn sorted_pool(images: &[&LabeledImage], maps: &[Image]) -> Vec<f64> {
    let mut pool: Vec<f64> = images
        .iter()
        .zip(maps)
        .flat_map(|(img, m)| masked_values(m, &img.foreground_mask))
        .collect();
    pool.sort_by(f64::total_cmp);
    pool
}

/// Achieved FPR of each threshold on a held-out healthy set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutFpr {
    pub fpr_limit: f64,
    pub threshold: f64,
    pub calibration_fpr: f64,
    pub heldout_fpr: f64,
}

/// Everything reported for one detection method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub model: String,
    pub auc: f64,
    pub dsc: Vec<DscSummary>,
    pub heldout_fpr: Vec<HeldOutFpr>,
    pub size: Option<SizeAnalysis>,
    /// MAP methods only.
    pub lambda_star: Option<f64>,
    /// `(lambda, epsilon)` on the healthy validation images.
    pub epsilon_curve: Vec<(f64, Option<f64>)>,
    /// `(lambda, AUC)` on the lesioned test images.
    pub lambda_sweep: Vec<(f64, f64)>,
    /// `(iteration, AUC)` at `lambda*`.
    pub convergence: Vec<(usize, f64)>,
    /// Test images whose final objective is at least the initial one.
    pub objective_improved: Option<(usize, usize)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub methods: Vec<MethodSummary>,
}

impl ExperimentSummary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn heldout(thresholds: &[(f64, f64, f64)], healthy_pool: Option<&[f64]>) -> Vec<HeldOutFpr> {
    let Some(pool) = healthy_pool.filter(|p| !p.is_empty()) else {
        return Vec::new();
    };
    thresholds
        .iter()
        .map(|&(limit, t, cal)| HeldOutFpr {
            fpr_limit: limit,
            threshold: t,
            calibration_fpr: cal,
            heldout_fpr: pool_fpr(pool, t),
        })
        .collect()
}

fn size_index(report: &EvaluationReport, limit: f64) -> usize {
    report
        .dsc
        .iter()
        .position(|d| d.fpr_limit.is_some_and(|l| (l - limit).abs() < 1e-12))
        .unwrap_or(0)
}

fn write_rows(path: &Path, reports: &[EvaluationReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Artifact {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let err = |e: csv::Error| Error::Artifact {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    w.write_record(["method", "subject_id", "lesion_size", "threshold", "dsc", "fpr"]).map_err(err)?;
    for r in reports {
        for row in &r.rows {
            let SubjectRow {
                subject_id,
                lesion_size,
                dsc,
                fpr,
            } = row;
            for (k, d) in r.dsc.iter().enumerate() {
                w.write_record([
                    r.method.clone(),
                    subject_id.clone(),
                    lesion_size.to_string(),
                    d.label.clone(),
                    dsc[k].to_string(),
                    fpr[k].to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn auc_of(images: &[&LabeledImage], maps: &[Image]) -> Result<f64> {
    let gt: Vec<Mask> = images.iter().map(|i| i.anomaly_mask.clone()).collect();
    let fg: Vec<Mask> = images.iter().map(|i| i.foreground_mask.clone()).collect();
    Ok(roc_auc(maps, &gt, &fg)?.auc)
}

/// Scores every method on the lesioned test set and writes the report
/// tables.
pub fn cmd_evaluate(run: &Run) -> Result<ExperimentSummary> {
    let t = std::time::Instant::now();
    let lesioned = run.split(SplitName::TestLesioned)?;
    if lesioned.is_empty() {
        return Err(Error::Evaluation("lesioned test split is empty".into()));
    }
    if lesioned.iter().all(|i| i.is_healthy()) {
        return Err(Error::Evaluation("lesioned test split has no ground-truth lesions".into()));
    }
    let healthy = run.split(SplitName::TestHealthy)?;
    let val = run.split(SplitName::ValHealthy)?;
    let les: Vec<&LabeledImage> = lesioned.iter().collect();
    let hel: Vec<&LabeledImage> = healthy.iter().collect();
    let valr: Vec<&LabeledImage> = val.iter().collect();
    let ev = &run.config.evaluation;

    let report_dir = run.report_dir();
    mkdir(&report_dir.join("roc"))?;
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    for label in run.labels() {
        let model = run.model(&label)?;
        let profile = run.profile(&label)?;
        profile.check_model(&model)?;
        let checksum = model.checksum();

        let dir = run.detect_dir(&label, SplitName::TestLesioned);
        let stored = les
            .iter()
            .map(|img| read_detection(&dir, img, &checksum))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<Image> = stored.iter().map(|s| s.scores.clone()).collect();
        let named: Vec<NamedThreshold> = profile
            .thresholds
            .iter()
            .map(|t| NamedThreshold {
                label: dsc_label(t.fpr_limit),
                fpr_limit: Some(t.fpr_limit),
                threshold: t.threshold,
            })
            .collect();
        let method = format!("MAP+{label}");
        let report = evaluate_method(&method, &les, &scores, &named)?;

        let hdir = run.detect_dir(&label, SplitName::TestHealthy);
        let healthy_pool = if hel.is_empty() {
            None
        } else {
            let maps = hel
                .iter()
                .map(|img| read_detection(&hdir, img, &checksum).map(|s| s.scores))
                .collect::<Result<Vec<_>>>()?;
            Some(sorted_pool(&hel, &maps))
        };
        let triples: Vec<(f64, f64, f64)> = profile
            .thresholds
            .iter()
            .map(|t| (t.fpr_limit, t.threshold, t.achieved_fpr))
            .collect();

        let iterations: Vec<usize> = stored[0].snapshots.iter().map(|(i, _)| *i).collect();
        let convergence = iterations
            .iter()
            .enumerate()
            .map(|(k, &it)| {
                let maps: Vec<Image> = stored.iter().map(|s| s.snapshots[k].1.clone()).collect();
                Ok((it, auc_of(&les, &maps)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let improved = stored
            .iter()
            .filter(|s| s.trace.last().map(|p| p.total) >= s.trace.first().map(|p| p.total))
            .count();

        let mut sweep = Vec::new();
        if ev.lambda_sweep {
            for &lambda in &profile.lambda_grid {
                let auc = if lambda == profile.lambda_star {
                    report.auc
                } else {
                    let cfg = RestorationConfig {
                        lambda,
                        ..run.config.restoration.clone()
                    };
                    let rs = restore_batch(&model, &les, &cfg, run.config.workers)?;
                    let maps: Vec<Image> = rs.iter().map(detect).collect();
                    auc_of(&les, &maps)?
                };
                log::info!("{label}: lambda {lambda} AUC {auc:.4}");
                sweep.push((lambda, auc));
            }
        }

        let idx = size_index(&report, ev.size_analysis_limit);
        summaries.push(MethodSummary {
            method: method.clone(),
            model: label.clone(),
            auc: report.auc,
            dsc: report.dsc.clone(),
            heldout_fpr: heldout(&triples, healthy_pool.as_deref()),
            size: Some(size_analysis(&report, idx)?),
            lambda_star: Some(profile.lambda_star),
            epsilon_curve: profile
                .lambda_grid
                .iter()
                .zip(&profile.epsilon_values)
                .map(|(&l, &e)| (l, e.is_finite().then_some(e)))
                .collect(),
            lambda_sweep: sweep,
            convergence,
            objective_improved: Some((improved, stored.len())),
            warnings: profile.warnings.clone(),
        });
        write_roc(&report_dir, &report)?;
        reports.push(report);

        if ev.baseline {
            let method = format!("projection+{label}");
            let project = |imgs: &[&LabeledImage]| -> Result<Vec<Image>> {
                imgs.iter().map(|i| prior_projection_detect(&model, i)).collect()
            };
            let cal_pool = sorted_pool(&valr, &project(&valr)?);
            let mut triples = Vec::new();
            let mut named = Vec::new();
            if !cal_pool.is_empty() {
                let mut limits = run.config.calibration.fpr_limits.clone();
                limits.sort_by(f64::total_cmp);
                limits.dedup();
                for l in limits {
                    let t = select_threshold(&cal_pool, l)?;
                    triples.push((l, t, pool_fpr(&cal_pool, t)));
                    named.push(NamedThreshold {
                        label: dsc_label(l),
                        fpr_limit: Some(l),
                        threshold: t,
                    });
                }
            }
            let report = evaluate_method(&method, &les, &project(&les)?, &named)?;
            let healthy_pool = if hel.is_empty() {
                None
            } else {
                Some(sorted_pool(&hel, &project(&hel)?))
            };
            let idx = size_index(&report, ev.size_analysis_limit);
            summaries.push(MethodSummary {
                method,
                model: label.clone(),
                auc: report.auc,
                dsc: report.dsc.clone(),
                heldout_fpr: heldout(&triples, healthy_pool.as_deref()),
                size: Some(size_analysis(&report, idx)?),
                lambda_star: None,
                epsilon_curve: Vec::new(),
                lambda_sweep: Vec::new(),
                convergence: Vec::new(),
                objective_improved: None,
                warnings: Vec::new(),
            });
            write_roc(&report_dir, &report)?;
            reports.push(report);
        }
    }
    for s in &summaries {
        log::info!("{}: AUC {:.4}", s.method, s.auc);
    }
    let summary = ExperimentSummary {
        config_hash: run.config.hash(),
        methods: summaries,
    };
    write_json(&report_dir.join("summary.json"), &summary)?;
    write_rows(&report_dir.join("rows.csv"), &reports)?;
    run.finish_stage("evaluate", t)?;
    Ok(summary)
}

/// Thinned ROC points of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRoc {
    pub method: String,
    pub auc: f64,
    /// `(FPR, TPR)`.
    pub points: Vec<(f64, f64)>,
    pub dsc_auc_threshold: f64,
}

fn write_roc(dir: &Path, report: &EvaluationReport) -> Result<()> {
    let roc = report.roc.as_ref().expect("fresh report carries its curve");
    let pts: Vec<(f64, f64)> = roc.fpr.iter().copied().zip(roc.tpr.iter().copied()).collect();
    write_json(
        &dir.join("roc").join(format!("{}.json", report.method)),
        &StoredRoc {
            method: report.method.clone(),
            auc: roc.auc,
            points: thin(&pts, 400),
            dsc_auc_threshold: dsc_auc_threshold(roc)?,
        },
    )
}

/// Renders the report figures and a Markdown results table from the stored
/// evaluation.
pub fn cmd_report(run: &Run) -> Result<Vec<PathBuf>> {
    let t = std::time::Instant::now();
    let dir = run.report_dir();
    let summary_path = dir.join("summary.json");
    if !summary_path.exists() {
        return Err(missing(&summary_path, "evaluation summary"));
    }
    let summary: ExperimentSummary = read_json(&summary_path)?;
    let figs = dir.join("figures");
    mkdir(&figs)?;
    let mut written = Vec::new();

    let rocs = summary
        .methods
        .iter()
        .map(|m| read_json::<StoredRoc>(&dir.join("roc").join(format!("{}.json", m.method))))
        .collect::<Result<Vec<_>>>()?;
    let series: Vec<Series> = rocs
        .iter()
        .map(|r| (format!("{} (AUC {:.3})", r.method, r.auc), r.points.clone()))
        .collect();
    let p = figs.join("roc.svg");
    line_chart(&p, "ROC, lesioned test set", "FPR", "TPR", &series, Some((0.0, 1.0)), Some((0.0, 1.0)), false)?;
    written.push(p);

    let map_methods: Vec<&MethodSummary> = summary.methods.iter().filter(|m| m.lambda_star.is_some()).collect();
    let eps: Vec<Series> = map_methods
        .iter()
        .map(|m| {
            let pts = m
                .epsilon_curve
                .iter()
                .filter_map(|&(l, e)| e.map(|e| (l.max(1e-12).log2(), e)))
                .collect();
            (m.model.clone(), pts)
        })
        .collect();
    let p = figs.join("epsilon.svg");
    line_chart(&p, "Restoration change on healthy images", "log2(lambda)", "epsilon", &eps, None, None, true)?;
    written.push(p);

    let sweep: Vec<Series> = map_methods
        .iter()
        .filter(|m| !m.lambda_sweep.is_empty())
        .map(|m| {
            (
                m.model.clone(),
                m.lambda_sweep.iter().map(|&(l, a)| (l.max(1e-12).log2(), a)).collect(),
            )
        })
        .collect();
    if !sweep.is_empty() {
        let p = figs.join("lambda_sweep.svg");
        line_chart(&p, "AUC against lambda", "log2(lambda)", "AUC", &sweep, None, None, true)?;
        written.push(p);
    }

    let conv: Vec<Series> = map_methods
        .iter()
        .map(|m| (m.model.clone(), m.convergence.iter().map(|&(i, a)| (i as f64, a)).collect()))
        .collect();
    let p = figs.join("convergence.svg");
    line_chart(&p, "AUC against restoration steps", "iteration", "AUC", &conv, None, None, true)?;
    written.push(p);

    for (name, pick, ylabel) in [
        ("size_dsc", 0usize, "Dice"),
        ("size_fpr", 1usize, "subject FPR"),
    ] {
        let series: Vec<Series> = map_methods
            .iter()
            .filter_map(|m| {
                m.size.as_ref().map(|s| {
                    let pts = if pick == 0 { s.size_dsc.clone() } else { s.size_fpr.clone() };
                    (format!("{} ({})", m.model, s.threshold_label), pts)
                })
            })
            .collect();
        let p = figs.join(format!("{name}.svg"));
        scatter_chart(&p, &format!("Lesion size against {ylabel}"), "lesion size (pixels)", ylabel, &series)?;
        written.push(p);
    }

    let p = dir.join("table.md");
    std::fs::write(&p, results_table(&summary)).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    run.finish_stage("report", t)?;
    Ok(written)
}

/// Markdown table with AUC and the mean Dice columns.
pub fn results_table(summary: &ExperimentSummary) -> String {
    let labels: Vec<String> = summary
        .methods
        .first()
        .map(|m| m.dsc.iter().map(|d| d.label.clone()).collect())
        .unwrap_or_default();
    let mut out = format!("| method | AUC | {} |\n", labels.join(" | "));
    out.push_str(&format!("|---|---|{}\n", "---|".repeat(labels.len())));
    for m in &summary.methods {
        let cells: Vec<String> = m.dsc.iter().map(|d| format!("{:.3} ± {:.3}", d.mean, d.std)).collect();
        out.push_str(&format!("| {} | {:.4} | {} |\n", m.method, m.auc, cells.join(" | ")));
    }
    out
}

/// Runs every stage in order.
pub fn run_all(run: &Run) -> Result<ExperimentSummary> {
    cmd_generate(run)?;
    cmd_train(run, false)?;
    cmd_calibrate(run)?;
    cmd_detect(run, &[SplitName::TestLesioned, SplitName::TestHealthy])?;
    let summary = cmd_evaluate(run)?;
    cmd_report(run)?;
    Ok(summary)
}
