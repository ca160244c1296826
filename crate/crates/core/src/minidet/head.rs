//! Target assignment, loss, decoding and NMS for the dense head.

use serde::{Deserialize, Serialize};

use super::{DetHeadOutput, ModelConfig, Result};
use crate::boxes::{BBox, Detection, Instance};
use crate::tensor::{loss_bce_logits, loss_smooth_l1, loss_softmax_ce, Scalar, Tensor};

/// Per-image training targets on a `grid x grid` lattice, indexed
/// `y * grid + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub grid: usize,
    pub stride: usize,
    pub objectness: Vec<f32>,
    pub classes: Vec<usize>,
    /// `(l, t, r, b)` pixel distances from the cell centre.
    pub boxes: Vec<[f32; 4]>,
    pub positive: Vec<bool>,
}

impl Targets {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

fn cell_center(i: usize, stride: usize) -> f32 {
    (i as f32 + 0.5) * stride as f32
}

/// Marks the cell holding each box centre as positive. When two centres
/// share a cell the smaller box wins.
pub fn assign_targets(instances: &[Instance], grid: usize, stride: usize) -> Targets {
    let cells = grid * grid;
    let mut t = Targets {
        grid,
        stride,
        objectness: vec![0.0; cells],
        classes: vec![0; cells],
        boxes: vec![[0.0; 4]; cells],
        positive: vec![false; cells],
    };
    let mut owner_area = vec![f32::INFINITY; cells];
    for inst in instances {
        let (cx, cy) = inst.bbox.center();
        let to_cell = |c: f32| ((c / stride as f32).floor().max(0.0) as usize).min(grid - 1);
        let (gx, gy) = (to_cell(cx), to_cell(cy));
        let cell = gy * grid + gx;
        let area = inst.bbox.area();
        if t.positive[cell] && area >= owner_area[cell] {
            continue;
        }
        let (px, py) = (cell_center(gx, stride), cell_center(gy, stride));
        let b = &inst.bbox;
        owner_area[cell] = area;
        t.positive[cell] = true;
        t.objectness[cell] = 1.0;
        t.classes[cell] = inst.class_id;
        t.boxes[cell] = [px - b.x_min, py - b.y_min, b.x_max - px, b.y_max - py];
    }
    t
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub objectness: f64,
    pub class: f64,
    pub bbox: f64,
}

/// BCE over every cell, softmax CE and smooth-L1 (beta 1) over positive
/// cells, unit weights. Returns the gradient with respect to each head
/// output.
pub fn compute_loss(head: &DetHeadOutput, targets: &[Targets]) -> Result<(LossBreakdown, DetHeadOutput)> {
    let (breakdown, [objectness, class_logits, box_reg]) =
        head_loss(&head.objectness, &head.class_logits, &head.box_reg, targets)?;
    Ok((
        breakdown,
        DetHeadOutput {
            objectness,
            class_logits,
            box_reg,
        },
    ))
}

pub(crate) fn head_loss<T: Scalar>(
    objectness: &Tensor<T>,
    class_logits: &Tensor<T>,
    box_reg: &Tensor<T>,
    targets: &[Targets],
) -> Result<(LossBreakdown, [Tensor<T>; 3])> {
    let [n, _, g, _] = objectness.shape();
    let cells = n * g * g;
    let mut obj = Vec::with_capacity(cells);
    let mut classes = Vec::with_capacity(cells);
    let mut valid = Vec::with_capacity(cells);
    let mut boxes = vec![T::zero(); n * 4 * g * g];
    for (i, t) in targets.iter().enumerate() {
        obj.extend(t.objectness.iter().map(|&v| T::from_f64(v as f64)));
        classes.extend_from_slice(&t.classes);
        valid.extend_from_slice(&t.positive);
        for (cell, b) in t.boxes.iter().enumerate() {
            for (c, &v) in b.iter().enumerate() {
                boxes[(i * 4 + c) * g * g + cell] = T::from_f64(v as f64);
            }
        }
    }
    let obj_t = Tensor::from_vec([n, 1, g, g], obj)?;
    let box_t = Tensor::from_vec([n, 4, g, g], boxes)?;
    let lo = loss_bce_logits(objectness, &obj_t)?;
    let lc = loss_softmax_ce(class_logits, &classes, &valid)?;
    let lb = loss_smooth_l1(box_reg, &box_t, &valid, 1.0)?;
    let breakdown = LossBreakdown {
        total: lo.loss + lc.loss + lb.loss,
        objectness: lo.loss,
        class: lc.loss,
        bbox: lb.loss,
    };
    Ok((breakdown, [lo.grad, lc.grad, lb.grad]))
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Detections for image `n` of a head output, after per-class NMS.
pub fn decode_image(head: &DetHeadOutput, n: usize, cfg: &ModelConfig) -> Vec<Detection> {
    let [_, classes, g, _] = head.class_logits.shape();
    let stride = cfg.grid_stride;
    let size = cfg.image_size as f32;
    let mut dets = Vec::new();
    let mut probs = vec![0.0f32; classes];
    for gy in 0..g {
        for gx in 0..g {
            let p_obj = sigmoid(head.objectness.at(n, 0, gy, gx));
            let max = (0..classes)
                .map(|c| head.class_logits.at(n, c, gy, gx))
                .fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (head.class_logits.at(n, c, gy, gx) - max).exp();
                z += *p;
            }
            let (px, py) = (cell_center(gx, stride), cell_center(gy, stride));
            let r = |c| head.box_reg.at(n, c, gy, gx);
            let bbox = BBox::new(px - r(0), py - r(1), px + r(2), py + r(3)).clip(size, size);
            for (class_id, p) in probs.iter().enumerate() {
                let score = p_obj * p / z;
                if score >= cfg.score_threshold && score > 0.0 {
                    dets.push(Detection { class_id, score, bbox });
                }
            }
        }
    }
    nms(dets, cfg.nms_iou)
}

/// Decodes every image of a batch.
pub fn decode(head: &DetHeadOutput, cfg: &ModelConfig) -> Vec<Vec<Detection>> {
    (0..head.objectness.n()).map(|n| decode_image(head, n, cfg)).collect()
}

/// Greedy per-class NMS by descending score; equal scores keep input order.
/// A box is dropped when its IoU with a kept box of its class is at least
/// `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f32) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) >= iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
