//! Detection evaluation: greedy matching, all-points AP, mAP at IoU 0.5 and
//! hierarchical precision/recall/F1 over a class tree.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{BBox, Detection, Instance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no class has ground truth; mAP is undefined")]
    NoGroundTruth,
    #[error("class {0} is not a leaf of the hierarchy")]
    UnknownClass(usize),
    #[error("invalid hierarchy: {0}")]
    Hierarchy(String),
    #[error("{detections} detection lists for {images} ground-truth images")]
    ImageCountMismatch { detections: usize, images: usize },
    #[error("brute-force oracle refuses {0} detections (limit 1000)")]
    OracleTooLarge(usize),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub const IOU_50: f32 = 0.5;

/// Output of greedy one-to-one matching within a single image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(detection index, gt index, iou)`
    pub pairs: Vec<(usize, usize, f32)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Greedy matching: detections are visited in the given order (callers
/// pass them sorted by descending score) and each takes the unmatched gt
/// with the highest IoU >= `iou_thresh`, lower gt index on ties. With
/// `class_aware`, only gts of the detection's class are candidates.
fn greedy_match<'a>(
    dets: impl Iterator<Item = (usize, usize, &'a BBox)>,
    gts: &[(usize, &BBox)],
    iou_thresh: f32,
    class_aware: bool,
) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for (di, class, bbox) in dets {
        let mut best: Option<(usize, f32)> = None;
        for (gi, (gclass, gbox)) in gts.iter().enumerate() {
            if taken[gi] || (class_aware && *gclass != class) {
                continue;
            }
            let iou = bbox.iou(gbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) => {
                taken[gi] = true;
                result.pairs.push((di, gi, iou));
            }
            None => result.unmatched_detections.push(di),
        }
    }
    result.unmatched_gts = (0..gts.len()).filter(|&i| !taken[i]).collect();
    result
}

/// Class-gated greedy matching of one image's detections (already sorted by
/// descending score) against its ground truth.
pub fn match_detections(dets: &[Detection], gts: &[Instance], iou_thresh: f32) -> MatchResult {
    let gt_view: Vec<(usize, &BBox)> = gts.iter().map(|g| (g.class_id, &g.bbox)).collect();
    greedy_match(
        dets.iter().enumerate().map(|(i, d)| (i, d.class_id, &d.bbox)),
        &gt_view,
        iou_thresh,
        true,
    )
}

/// One detection of a single class, tagged with the image it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f32,
    pub bbox: BBox,
}

/// One point of the precision/recall sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PRPoint {
    pub precision: f64,
    pub recall: f64,
    pub score_threshold: f32,
}

/// Stable order by descending score.
fn score_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// True-positive flags for `order`, matching image by image in that order.
fn true_positives(dets: &[ScoredBox], order: &[usize], gts: &[Vec<BBox>], iou_thresh: f32) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let Some(image_gts) = gts.get(d.image) else {
                return false;
            };
            let mut best: Option<(usize, f32)> = None;
            for (gi, g) in image_gts.iter().enumerate() {
                if taken[d.image][gi] {
                    continue;
                }
                let iou = d.bbox.iou(g);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                taken[d.image][gi] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Precision/recall after each group of equal scores, in descending score order.
pub fn pr_curve(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thresh: f32) -> Vec<PRPoint> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let order = score_order(dets);
    let tps = true_positives(dets, &order, gts, iou_thresh);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if tps[k] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order
            .get(k + 1)
            .is_none_or(|&j| dets[j].score != dets[i].score);
        if last_of_group {
            points.push(PRPoint {
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
                score_threshold: dets[i].score,
            });
        }
    }
    points
}

/// All-points interpolated AP for one class across a dataset.
///
/// `gts[i]` holds this class's boxes in image `i`. Returns `None` when there
/// are neither gts nor detections, `Some(0.0)` for detections without gts.
pub fn average_precision(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thresh: f32) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let points = pr_curve(dets, gts, iou_thresh);
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    Some(ap)
}

/// Test oracle for [`average_precision`]: for every distinct score
/// threshold, rematch from scratch the detections at or above it, then
/// integrate the precision envelope `max{P : R >= r}` over recall directly.
pub fn brute_force_ap(dets: &[ScoredBox], gts: &[Vec<BBox>], iou_thresh: f32) -> Result<Option<f64>> {
    if dets.len() > 1000 {
        return Err(MetricsError::OracleTooLarge(dets.len()));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(if dets.is_empty() { None } else { Some(0.0) });
    }
    let mut thresholds: Vec<f32> = dets.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut points: Vec<(f64, f64)> = Vec::new();
    for &t in &thresholds {
        let kept: Vec<ScoredBox> = dets.iter().copied().filter(|d| d.score >= t).collect();
        let order = score_order(&kept);
        let tp = true_positives(&kept, &order, gts, iou_thresh)
            .into_iter()
            .filter(|&b| b)
            .count();
        points.push((tp as f64 / n_gt as f64, tp as f64 / kept.len() as f64));
    }

    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        if r <= prev {
            continue;
        }
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0f64, f64::max);
        ap += (r - prev) * best;
        prev = r;
    }
    Ok(Some(ap))
}

/// Per-class split of a dataset's detections and ground truth.
fn per_class_inputs(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Instance>],
    class_id: usize,
) -> (Vec<ScoredBox>, Vec<Vec<BBox>>) {
    let dets = detections
        .iter()
        .enumerate()
        .flat_map(|(image, ds)| {
            ds.iter().filter(move |d| d.class_id == class_id).map(move |d| ScoredBox {
                image,
                score: d.score,
                bbox: d.bbox,
            })
        })
        .collect();
    let gts = ground_truth
        .iter()
        .map(|g| g.iter().filter(|i| i.class_id == class_id).map(|i| i.bbox).collect())
        .collect();
    (dets, gts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Mean of the defined per-class APs, in percent, rounded to 3 decimals.
    pub map50: f64,
    /// AP in `[0, 1]` per class id; `None` where undefined.
    pub per_class_ap: Vec<Option<f64>>,
}

pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// mAP at IoU 0.5 over `num_classes` classes. `detections[i]` and
/// `ground_truth[i]` belong to the same image.
pub fn map50(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Instance>],
    num_classes: usize,
) -> Result<MapReport> {
    if detections.len() != ground_truth.len() {
        return Err(MetricsError::ImageCountMismatch {
            detections: detections.len(),
            images: ground_truth.len(),
        });
    }
    if ground_truth.iter().all(Vec::is_empty) {
        return Err(MetricsError::NoGroundTruth);
    }
    let per_class_ap: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let (dets, gts) = per_class_inputs(detections, ground_truth, c);
            average_precision(&dets, &gts, IOU_50)
        })
        .collect();
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MapReport {
        map50: round3(mean * 100.0),
        per_class_ap,
    })
}

/// A rooted class tree whose leaves are the detector classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHierarchy {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    /// Node index of each detector class.
    leaves: Vec<usize>,
}

impl ClassHierarchy {
    /// `edges` are `(child, parent)` pairs by name; `classes` lists the
    /// detector classes in class-id order and must all be leaves.
    pub fn new(root: &str, edges: &[(&str, &str)], classes: &[&str]) -> Result<Self> {
        let mut names = vec![root.to_string()];
        let mut index: BTreeMap<String, usize> = BTreeMap::from([(root.to_string(), 0)]);
        let mut node = |name: &str, names: &mut Vec<String>| -> usize {
            *index.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                names.len() - 1
            })
        };
        let mut parent_of: BTreeMap<usize, usize> = BTreeMap::new();
        for (child, parent) in edges {
            let c = node(child, &mut names);
            let p = node(parent, &mut names);
            if c == 0 {
                return Err(MetricsError::Hierarchy(format!("root {root} cannot have a parent")));
            }
            if parent_of.insert(c, p).is_some() {
                return Err(MetricsError::Hierarchy(format!("{child} has two parents")));
            }
        }
        let parent: Vec<Option<usize>> = (0..names.len()).map(|i| parent_of.get(&i).copied()).collect();
        for start in 1..names.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > names.len() {
                    return Err(MetricsError::Hierarchy(format!("cycle through {}", names[start])));
                }
            }
            if cur != 0 {
                return Err(MetricsError::Hierarchy(format!("{} is not under {root}", names[start])));
            }
        }
        let leaves = classes
            .iter()
            .map(|c| {
                let i = *index
                    .get(*c)
                    .ok_or_else(|| MetricsError::Hierarchy(format!("class {c} missing from hierarchy")))?;
                if parent.contains(&Some(i)) {
                    return Err(MetricsError::Hierarchy(format!("class {c} is not a leaf")));
                }
                Ok(i)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            names,
            parent,
            leaves,
        })
    }

    /// root → {round → circle, angular → {square, triangle}}
    pub fn default_shapes() -> Self {
        Self::new(
            "root",
            &[
                ("round", "root"),
                ("angular", "root"),
                ("circle", "round"),
                ("square", "angular"),
                ("triangle", "angular"),
            ],
            &["circle", "square", "triangle"],
        )
        .expect("static hierarchy")
    }

    pub fn num_classes(&self) -> usize {
        self.leaves.len()
    }

    pub fn class_name(&self, class_id: usize) -> Option<&str> {
        self.leaves.get(class_id).map(|&i| self.names[i].as_str())
    }

    /// The class leaf plus its ancestors, excluding the root, as node ids.
    pub fn label_set(&self, class_id: usize) -> Result<Vec<usize>> {
        let mut cur = *self.leaves.get(class_id).ok_or(MetricsError::UnknownClass(class_id))?;
        let mut set = Vec::new();
        while cur != 0 {
            set.push(cur);
            cur = self.parent[cur].expect("validated: every node reaches the root");
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HierCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

/// Hierarchical precision, recall and F1 for one class row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierScore {
    pub h_precision: f64,
    pub h_recall: f64,
    pub h_f1: f64,
    pub counts: HierCounts,
}

impl HierCounts {
    fn score(&self) -> HierScore {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let hp = ratio(self.intersection, self.predicted);
        let hr = ratio(self.intersection, self.truth);
        let hf = if hp + hr > 0.0 { 2.0 * hp * hr / (hp + hr) } else { 0.0 };
        HierScore {
            h_precision: hp,
            h_recall: hr,
            h_f1: hf,
            counts: *self,
        }
    }
}

/// Hierarchical F1 per class row. Only detections with
/// `score >= min_score` take part. Spatial matching ignores class; matched
/// pairs count toward the gt class row, unmatched gts add to that row's
/// recall denominator and unmatched detections add to the predicted class
/// row's precision denominator. Rows with no contributions are `None`.
pub fn hierarchical_f1(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Instance>],
    hierarchy: &ClassHierarchy,
    iou_thresh: f32,
    min_score: f32,
) -> Result<Vec<Option<HierScore>>> {
    if detections.len() != ground_truth.len() {
        return Err(MetricsError::ImageCountMismatch {
            detections: detections.len(),
            images: ground_truth.len(),
        });
    }
    let n = hierarchy.num_classes();
    let sets: Vec<Vec<usize>> = (0..n).map(|c| hierarchy.label_set(c)).collect::<Result<_>>()?;
    let set_of = |c: usize| sets.get(c).ok_or(MetricsError::UnknownClass(c));
    let mut rows = vec![HierCounts::default(); n];
    let mut touched = vec![false; n];

    for (dets, gts) in detections.iter().zip(ground_truth) {
        let mut kept: Vec<&Detection> = dets.iter().filter(|d| d.score >= min_score).collect();
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
        let gt_view: Vec<(usize, &BBox)> = gts.iter().map(|g| (g.class_id, &g.bbox)).collect();
        let m = greedy_match(
            kept.iter().enumerate().map(|(i, d)| (i, d.class_id, &d.bbox)),
            &gt_view,
            iou_thresh,
            false,
        );
        for &(di, gi, _) in &m.pairs {
            let (pc, gc) = (kept[di].class_id, gts[gi].class_id);
            let (p, t) = (set_of(pc)?, set_of(gc)?);
            let inter = p.iter().filter(|x| t.contains(x)).count() as u64;
            rows[gc].intersection += inter;
            rows[gc].predicted += p.len() as u64;
            rows[gc].truth += t.len() as u64;
            touched[gc] = true;
        }
        for &gi in &m.unmatched_gts {
            let gc = gts[gi].class_id;
            rows[gc].truth += set_of(gc)?.len() as u64;
            touched[gc] = true;
        }
        for &di in &m.unmatched_detections {
            let pc = kept[di].class_id;
            rows[pc].predicted += set_of(pc)?.len() as u64;
            touched[pc] = true;
        }
    }
    Ok(rows
        .iter()
        .zip(touched)
        .map(|(r, t)| t.then(|| r.score()))
        .collect())
}

/// One row of a per-class F1 comparison; `None` renders as a dash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub class: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub diff: Option<f64>,
}

/// `hF(b) - hF(a)` per class, over the union of class names (order of
/// first appearance in `a`, then `b`).
pub fn f1_diff(a: &[(String, Option<f64>)], b: &[(String, Option<f64>)]) -> Vec<DiffRow> {
    let mut classes: Vec<&str> = a.iter().map(|(c, _)| c.as_str()).collect();
    for (c, _) in b {
        if !classes.contains(&c.as_str()) {
            classes.push(c);
        }
    }
    let lookup = |side: &[(String, Option<f64>)], c: &str| side.iter().find(|(n, _)| n == c).and_then(|(_, v)| *v);
    classes
        .into_iter()
        .map(|c| {
            let (va, vb) = (lookup(a, c), lookup(b, c));
            DiffRow {
                class: c.to_string(),
                a: va,
                b: vb,
                diff: va.zip(vb).map(|(x, y)| y - x),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Plain-text `fg | A | B | Diff` table.
pub fn render_diff_table(rows: &[DiffRow], label_a: &str, label_b: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>10} {:>10} {:>10}", "fg", label_a, label_b, "Diff");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10} {:>10}",
            r.class,
            cell(r.a),
            cell(r.b),
            cell(r.diff)
        );
    }
    out
}
