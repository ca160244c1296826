//! Interventions over trained checkpoints: background activation sweeps,
//! background replacement (random and fixed), mask boundary ablation, and
//! per-class F1 comparisons between two reports.

use std::fs;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::Detection;
use crate::maskpool::{morph_perturb, MaskError, MaskPyramid, MorphMode};
use crate::metrics::{
    f1_diff, hierarchical_f1, map50, render_diff_table, ClassHierarchy, DiffRow, MapReport, MetricsError, IOU_50,
};
use crate::minidet::{
    decode, images_to_tensor, mask_pyramids, BgScaleSite, Checkpoint, DetError, ForwardOptions, Model,
    PoolingVariant,
};
use crate::scenegen::{self, composite_fixed_bg, composite_random_bg, Dataset, ImageRecord, SceneError};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("the dataset has no masks for {0} images")]
    MissingMasks(usize),
    #[error("background pool is empty")]
    EmptyPool,
    #[error("{path}: {reason}")]
    Output { path: String, reason: String },
    #[error(transparent)]
    Detector(#[from] DetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Background activation weights, strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct SweepSpec {
    weights: Vec<f32>,
}

impl SweepSpec {
    pub fn new(weights: Vec<f32>) -> Result<Self> {
        if weights.is_empty() {
            return Err(ExperimentError::Config("sweep needs at least one weight".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ExperimentError::Config(format!("sweep weights must be finite and >= 0: {weights:?}")));
        }
        if weights.windows(2).any(|p| p[0] >= p[1]) {
            return Err(ExperimentError::Config(format!("sweep weights must increase strictly: {weights:?}")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
}

impl Default for SweepSpec {
    /// 0.5, 0.75, ..., 2.75 (includes the identity weight 1.0).
    fn default() -> Self {
        Self {
            weights: (0..10).map(|i| 0.5 + 0.25 * i as f32).collect(),
        }
    }
}

impl TryFrom<Vec<f32>> for SweepSpec {
    type Error = ExperimentError;
    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SweepSpec> for Vec<f32> {
    fn from(s: SweepSpec) -> Self {
        s.weights
    }
}

pub const DEFAULT_ABLATION_FACTORS: [f64; 4] = [0.8, 0.9, 1.1, 1.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Images per inference batch.
    pub batch_size: usize,
    /// Detections below this score are ignored by hierarchical F1.
    pub hf_min_score: f32,
    pub bg_site: BgScaleSite,
    pub feather_radius: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            hf_min_score: 0.5,
            bg_site: BgScaleSite::PoolInput,
            feather_radius: 0,
        }
    }
}

/// One evaluation of one model on one (possibly intervened) dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub dataset_id: String,
    pub intervention_id: String,
    pub repetition: usize,
    pub map50: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_hf: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator), 0 for one row.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub diff: f64,
}

impl Aggregates {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            n,
            mean,
            std,
            min,
            max,
            diff: max - min,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: u32,
    pub experiment: String,
    pub classes: Vec<String>,
    /// In-domain mAP50 of the same model and dataset, when measured.
    pub baseline_map50: Option<f64>,
    pub rows: Vec<ReportRow>,
    /// mAP50 statistics over the intervention rows (baseline rows excluded).
    pub aggregates: Option<Aggregates>,
}

pub const BASELINE_ID: &str = "baseline";

impl ExperimentReport {
    fn new(experiment: &str, classes: &[String], baseline_map50: Option<f64>, rows: Vec<ReportRow>) -> Self {
        let values: Vec<f64> = rows
            .iter()
            .filter(|r| r.intervention_id != BASELINE_ID)
            .map(|r| r.map50)
            .collect();
        Self {
            schema: REPORT_SCHEMA,
            experiment: experiment.to_string(),
            classes: classes.to_vec(),
            baseline_map50,
            aggregates: Aggregates::of(&values),
            rows,
        }
    }

    /// Mean hierarchical F1 per class over the intervention rows (all rows
    /// when there are no intervention rows).
    pub fn class_hf(&self) -> Vec<(String, Option<f64>)> {
        let mut rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.intervention_id != BASELINE_ID).collect();
        if rows.is_empty() {
            rows = self.rows.iter().collect();
        }
        self.classes
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.per_class_hf.get(c).copied().flatten()).collect();
                let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                (name.clone(), mean)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "model_id".to_string(),
            "dataset_id".into(),
            "intervention_id".into(),
            "repetition".into(),
            "map50".into(),
        ];
        header.extend(self.classes.iter().map(|c| format!("ap_{c}")));
        header.extend(self.classes.iter().map(|c| format!("hf_{c}")));
        let csv_err = |e: csv::Error| ExperimentError::Output {
            path: "<csv>".into(),
            reason: e.to_string(),
        };
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: &Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.rows {
            let mut rec = vec![
                r.model_id.clone(),
                r.dataset_id.clone(),
                r.intervention_id.clone(),
                r.repetition.to_string(),
                r.map50.to_string(),
            ];
            rec.extend(r.per_class_ap.iter().map(opt));
            rec.extend(r.per_class_hf.iter().map(opt));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| ExperimentError::Output {
            path: "<csv>".into(),
            reason: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let out_err = |path: &Path, e: std::io::Error| ExperimentError::Output {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, self.to_csv()?).map_err(|e| out_err(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(self).expect("reports are serializable");
        fs::write(&json_path, json + "\n").map_err(|e| out_err(&json_path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let err = |reason: String| ExperimentError::Output {
            path: path.display().to_string(),
            reason,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        let report: Self = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        if report.schema != REPORT_SCHEMA {
            return Err(err(format!("unsupported report schema {}", report.schema)));
        }
        Ok(report)
    }
}

/// A trained model bound to an evaluation dataset.
pub struct EvalContext<'a> {
    pub model: Model,
    pub model_id: String,
    pub dataset: &'a Dataset,
    pub dataset_id: String,
    pub settings: EvalSettings,
    hierarchy: Option<ClassHierarchy>,
}

/// Inference-time interventions for one evaluation.
#[derive(Clone, Copy, Debug, Default)]
struct Intervention<'a> {
    bg_weight: Option<f32>,
    /// Replacement masks for the pooling slot and background scaling.
    masks: Option<&'a [MaskPyramid]>,
}

pub struct Evaluation {
    pub map: MapReport,
    pub per_class_hf: Vec<Option<f64>>,
    pub detections: Vec<Vec<Detection>>,
}

impl<'a> EvalContext<'a> {
    pub fn new(ckpt: &Checkpoint, dataset: &'a Dataset, dataset_id: &str, settings: EvalSettings) -> Result<Self> {
        let model = ckpt.to_model()?;
        if model.config().num_classes != dataset.num_classes() {
            return Err(ExperimentError::Config(format!(
                "model predicts {} classes, dataset has {}",
                model.config().num_classes,
                dataset.num_classes()
            )));
        }
        if settings.batch_size == 0 {
            return Err(ExperimentError::Config("batch_size must be positive".into()));
        }
        let hierarchy = hierarchy_for(&dataset.classes);
        Ok(Self {
            model_id: format!("{}-s{}", model.variant().name(), ckpt.seed),
            model,
            dataset,
            dataset_id: dataset_id.to_string(),
            settings,
            hierarchy,
        })
    }

    fn check_masks(&self) -> Result<()> {
        let (h, w) = (self.model.config().image_size, self.model.config().image_size);
        let bad = self
            .dataset
            .records
            .iter()
            .filter(|r| r.fg_mask.dims() != (h, w))
            .count();
        if bad > 0 {
            return Err(ExperimentError::MissingMasks(bad));
        }
        Ok(())
    }

    fn run(&self, records: &[ImageRecord], iv: Intervention) -> Result<Evaluation> {
        let cfg = self.model.config();
        let mut detections = Vec::with_capacity(records.len());
        for (i, chunk) in records.chunks(self.settings.batch_size).enumerate() {
            let refs: Vec<&ImageRecord> = chunk.iter().collect();
            let images = images_to_tensor(&refs);
            let own;
            let masks = match iv.masks {
                Some(m) => {
                    let start = i * self.settings.batch_size;
                    &m[start..start + chunk.len()]
                }
                None => {
                    own = mask_pyramids(&refs, cfg)?;
                    &own[..]
                }
            };
            let opts = ForwardOptions {
                masks: Some(masks),
                bg_weight: iv.bg_weight,
                bg_site: self.settings.bg_site,
                pool_masks: None,
            };
            let head = self.model.forward(&images, &opts)?;
            detections.extend(decode(&head, cfg));
        }
        let gts: Vec<_> = records.iter().map(|r| r.instances.clone()).collect();
        score_detections(detections, &gts, cfg.num_classes, self.hierarchy.as_ref(), &self.settings)
    }

    /// Unperturbed evaluation.
    pub fn evaluate(&self) -> Result<Evaluation> {
        self.run(&self.dataset.records, Intervention::default())
    }

    fn row(&self, intervention_id: String, repetition: usize, e: &Evaluation) -> ReportRow {
        ReportRow {
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
            intervention_id,
            repetition,
            map50: e.map.map50,
            per_class_ap: e.map.per_class_ap.clone(),
            per_class_hf: e.per_class_hf.clone(),
        }
    }

    /// Scales background activations at the configured site by each sweep
    /// weight; Min/Max/Diff are over the sweep rows.
    pub fn run_bg_activation_sweep(&self, sweep: &SweepSpec) -> Result<ExperimentReport> {
        self.check_masks()?;
        let pyramids = mask_pyramids(&self.dataset.records.iter().collect::<Vec<_>>(), self.model.config())?;
        let rows = sweep
            .weights()
            .par_iter()
            .map(|&w| {
                let e = self.run(
                    &self.dataset.records,
                    Intervention {
                        bg_weight: Some(w),
                        masks: Some(&pyramids),
                    },
                )?;
                Ok(self.row(format!("bg_w{w:.2}"), 0, &e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentReport::new("bg_activation_sweep", &self.dataset.classes, None, rows))
    }

    /// Recomposes every image onto a pool background drawn from
    /// `(seed ^ r, image id)` for each repetition `r`.
    pub fn run_random_bg_eval(&self, pool: &BgPool, repetitions: usize, seed: u64) -> Result<ExperimentReport> {
        self.check_masks()?;
        pool.check()?;
        if repetitions == 0 {
            return Err(ExperimentError::Config("repetitions must be >= 1".into()));
        }
        let baseline = self.evaluate()?.map.map50;
        let rows = (0..repetitions)
            .into_par_iter()
            .map(|r| {
                let rep_seed = seed ^ r as u64;
                let records = self
                    .dataset
                    .records
                    .iter()
                    .map(|rec| pool.recompose(rec, rep_seed, self.settings.feather_radius))
                    .collect::<Result<Vec<_>>>()?;
                let e = self.run(&records, Intervention::default())?;
                Ok(self.row("random_bg".into(), r, &e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentReport::new("random_bg", &self.dataset.classes, Some(baseline), rows))
    }

    /// Draws `repetitions` distinct pool backgrounds and recomposes the whole
    /// dataset onto each one in turn.
    pub fn run_fixed_bg_eval(&self, pool: &BgPool, repetitions: usize, seed: u64) -> Result<ExperimentReport> {
        self.check_masks()?;
        let BgPool::Images(images) = pool else {
            return Err(ExperimentError::Config("fixed-background evaluation needs an image pool".into()));
        };
        pool.check()?;
        let picks = scenegen::sample_pool_indices(images.len(), repetitions, seed)?;
        let baseline = self.evaluate()?.map.map50;
        let rows = picks
            .par_iter()
            .enumerate()
            .map(|(r, &idx)| {
                let ds = composite_fixed_bg(self.dataset, &images[idx], self.settings.feather_radius)?;
                let e = self.run(&ds.records, Intervention::default())?;
                Ok(self.row(format!("fixed_bg{idx}"), r, &e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentReport::new("fixed_bg", &self.dataset.classes, Some(baseline), rows))
    }

    /// Feeds morphologically perturbed masks to a mask-variant model. The
    /// first row is the unperturbed baseline.
    pub fn run_boundary_ablation(&self, factors: &[f64]) -> Result<ExperimentReport> {
        if self.model.variant() != PoolingVariant::Mask {
            return Err(ExperimentError::Config(format!(
                "boundary ablation needs a mask-variant checkpoint, got {}",
                self.model.variant().name()
            )));
        }
        self.check_masks()?;
        let base = self.evaluate()?;
        let mut rows = vec![self.row(BASELINE_ID.into(), 0, &base)];
        let strides = self.model.config().pyramid_strides();
        let perturbed = factors
            .par_iter()
            .map(|&f| {
                let mode = if f > 1.0 { MorphMode::Dilate } else { MorphMode::Erode };
                let pyramids = self
                    .dataset
                    .records
                    .iter()
                    .map(|r| Ok(MaskPyramid::build(&morph_perturb(&r.fg_mask, mode, f)?, &strides)?))
                    .collect::<Result<Vec<_>>>()?;
                let e = self.run(
                    &self.dataset.records,
                    Intervention {
                        bg_weight: None,
                        masks: Some(&pyramids),
                    },
                )?;
                Ok(self.row(format!("morph_{f}"), 0, &e))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(perturbed);
        Ok(ExperimentReport::new(
            "boundary_ablation",
            &self.dataset.classes,
            Some(base.map.map50),
            rows,
        ))
    }
}

/// Hierarchy used for hF: the built-in shape tree when the class names
/// match it, otherwise a flat tree under one root.
pub fn hierarchy_for(classes: &[String]) -> Option<ClassHierarchy> {
    let shapes = ClassHierarchy::default_shapes();
    if (0..shapes.num_classes())
        .map(|c| shapes.class_name(c))
        .eq(classes.iter().map(|n| Some(n.as_str())))
    {
        return Some(shapes);
    }
    let names: Vec<&str> = classes.iter().map(String::as_str).collect();
    let edges: Vec<(&str, &str)> = names.iter().map(|n| (*n, "root")).collect();
    ClassHierarchy::new("root", &edges, &names).ok()
}

/// mAP50 and per-class hF of precomputed detections.
pub fn score_detections(
    detections: Vec<Vec<Detection>>,
    ground_truth: &[Vec<crate::boxes::Instance>],
    num_classes: usize,
    hierarchy: Option<&ClassHierarchy>,
    settings: &EvalSettings,
) -> Result<Evaluation> {
    let map = map50(&detections, ground_truth, num_classes)?;
    let per_class_hf = match hierarchy {
        Some(h) => hierarchical_f1(&detections, ground_truth, h, IOU_50, settings.hf_min_score)?
            .into_iter()
            .map(|s| s.map(|s| s.h_f1))
            .collect(),
        None => vec![None; num_classes],
    };
    Ok(Evaluation {
        map,
        per_class_hf,
        detections,
    })
}

/// A single-row report for one plain evaluation.
pub fn baseline_report(model_id: &str, dataset_id: &str, classes: &[String], e: &Evaluation) -> ExperimentReport {
    let row = ReportRow {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        intervention_id: BASELINE_ID.into(),
        repetition: 0,
        map50: e.map.map50,
        per_class_ap: e.map.per_class_ap.clone(),
        per_class_hf: e.per_class_hf.clone(),
    };
    ExperimentReport::new("eval", classes, Some(e.map.map50), vec![row])
}

/// Backgrounds for replacement experiments.
#[derive(Clone, Debug)]
pub enum BgPool {
    Images(Vec<RgbImage>),
    /// Each image is its own background (an identity recomposition).
    Own,
}

impl BgPool {
    fn check(&self) -> Result<()> {
        match self {
            BgPool::Images(v) if v.is_empty() => Err(ExperimentError::EmptyPool),
            _ => Ok(()),
        }
    }

    fn recompose(&self, record: &ImageRecord, seed: u64, feather: usize) -> Result<ImageRecord> {
        Ok(match self {
            BgPool::Images(pool) => composite_random_bg(record, pool, seed, feather)?,
            BgPool::Own => composite_random_bg(record, std::slice::from_ref(&record.image), seed, feather)?,
        })
    }
}

/// Per-class F1 comparison of two reports (A then B; Diff = B - A).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<DiffRow>,
    pub improved: usize,
    pub pairs: usize,
}

impl DiffReport {
    pub fn summary(&self) -> String {
        format!("improved {} of {} pairs", self.improved, self.pairs)
    }

    pub fn render(&self) -> String {
        format!("{}{}\n", render_diff_table(&self.rows, &self.label_a, &self.label_b), self.summary())
    }
}

pub fn diff_report(a: &ExperimentReport, b: &ExperimentReport, label_a: &str, label_b: &str) -> DiffReport {
    if !a.classes.iter().any(|c| b.classes.contains(c)) {
        log::warn!("reports share no classes; every Diff will be a dash");
    }
    let rows = f1_diff(&a.class_hf(), &b.class_hf());
    let pairs = rows.iter().filter(|r| r.diff.is_some()).count();
    let improved = rows.iter().filter(|r| r.diff.is_some_and(|d| d > 0.0)).count();
    DiffReport {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        rows,
        improved,
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(hf: &[(&str, Option<f64>)]) -> ExperimentReport {
        let classes: Vec<String> = hf.iter().map(|(c, _)| c.to_string()).collect();
        let row = ReportRow {
            model_id: "m".into(),
            dataset_id: "d".into(),
            intervention_id: "x".into(),
            repetition: 0,
            map50: 10.0,
            per_class_ap: vec![None; hf.len()],
            per_class_hf: hf.iter().map(|(_, v)| *v).collect(),
        };
        ExperimentReport::new("t", &classes, None, vec![row])
    }

    #[test]
    fn default_sweep() {
        let s = SweepSpec::default();
        assert_eq!(s.weights().len(), 10);
        assert_eq!(s.weights()[0], 0.5);
        assert_eq!(*s.weights().last().unwrap(), 2.75);
        assert!(s.weights().contains(&1.0));
    }

    #[test]
    fn sweep_validation() {
        assert!(SweepSpec::new(vec![]).is_err());
        assert!(SweepSpec::new(vec![1.0, 1.0]).is_err());
        assert!(SweepSpec::new(vec![2.0, 1.0]).is_err());
        assert!(serde_json::from_str::<SweepSpec>("[0.5, 0.25]").is_err());
        assert_eq!(serde_json::from_str::<SweepSpec>("[1.0]").unwrap().weights(), &[1.0]);
    }

    #[test]
    fn aggregates() {
        let a = Aggregates::of(&[1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!((a.mean, a.min, a.max, a.diff), (3.0, 1.0, 6.0, 5.0));
        assert!((a.std - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let one = Aggregates::of(&[4.5]).unwrap();
        assert_eq!((one.std, one.diff), (0.0, 0.0));
        assert!(Aggregates::of(&[]).is_none());
    }

    #[test]
    fn identical_reports_have_zero_diff() {
        let r = report(&[("circle", Some(0.5)), ("square", Some(0.7))]);
        let d = diff_report(&r, &r, "A", "B");
        assert!(d.rows.iter().all(|row| row.diff == Some(0.0)));
        assert_eq!(d.summary(), "improved 0 of 2 pairs");
    }

    #[test]
    fn one_improved_class() {
        let a = report(&[("circle", Some(0.5)), ("square", Some(0.7)), ("triangle", Some(0.2))]);
        let b = report(&[("circle", Some(0.5)), ("square", Some(0.9)), ("triangle", Some(0.1))]);
        let d = diff_report(&a, &b, "max", "mask");
        let positive: Vec<&str> = d
            .rows
            .iter()
            .filter(|r| r.diff.is_some_and(|v| v > 0.0))
            .map(|r| r.class.as_str())
            .collect();
        assert_eq!(positive, vec!["square"]);
        assert_eq!(d.summary(), "improved 1 of 3 pairs");
        assert!(d.render().contains("improved 1 of 3 pairs"));
    }

    #[test]
    fn disjoint_classes_render_dashes() {
        let a = report(&[("circle", Some(0.5))]);
        let b = report(&[("square", Some(0.9))]);
        let d = diff_report(&a, &b, "A", "B");
        assert_eq!(d.pairs, 0);
        let table = d.render();
        assert!(table.lines().nth(1).unwrap().contains('-'));
        assert!(table.lines().nth(2).unwrap().contains('-'));
    }

    #[test]
    fn csv_and_json_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(&[("circle", Some(0.5)), ("square", None)]);
        r.write(dir.path(), "rep").unwrap();
        let csv = fs::read_to_string(dir.path().join("rep.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model_id,dataset_id,intervention_id,repetition,map50,ap_circle,ap_square,hf_circle,hf_square"
        );
        assert_eq!(lines.next().unwrap(), "m,d,x,0,10,,,0.5,");
        let back = ExperimentReport::read_json(&dir.path().join("rep.json")).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.schema, 1);
    }
}
