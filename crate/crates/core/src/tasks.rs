//! Task definitions, per-task losses, the weighted objective and evaluation metrics.

use std::fmt;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Segmentation { classes: usize },
    Depth,
    Normals,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
}

impl TaskSpec {
    pub fn segmentation(classes: usize) -> Self {
        TaskSpec {
            name: "segmentation".into(),
            kind: TaskKind::Segmentation { classes },
        }
    }

    pub fn depth() -> Self {
        TaskSpec {
            name: "depth".into(),
            kind: TaskKind::Depth,
        }
    }

    pub fn normals() -> Self {
        TaskSpec {
            name: "normals".into(),
            kind: TaskKind::Normals,
        }
    }

    /// Channels of the prediction head.
    pub fn out_channels(&self) -> usize {
        match self.kind {
            TaskKind::Segmentation { classes } => classes,
            TaskKind::Depth => 1,
            TaskKind::Normals => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Segmentation { classes } if classes < 2 => Err(TensorError::invalid(
                "task",
                format!("segmentation needs at least 2 classes, got {classes}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Ground truth for one task over a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelMap {
    /// Class id per pixel, `(b, h, w)` row-major; `None` is ignored.
    Segmentation {
        batch: usize,
        height: usize,
        width: usize,
        ids: Vec<Option<u32>>,
    },
    /// `[B, 1, H, W]` depth with a per-pixel validity mask.
    Depth { values: Tensor, valid: Vec<bool> },
    /// `[B, 3, H, W]` unit normals with a per-pixel validity mask.
    Normals { values: Tensor, valid: Vec<bool> },
}

/// Tolerance on ground-truth normal lengths.
const UNIT_TOL: f64 = 1e-6;

impl LabelMap {
    pub fn segmentation(batch: usize, height: usize, width: usize, ids: Vec<Option<u32>>) -> Result<Self> {
        if ids.len() != batch * height * width {
            return Err(TensorError::invalid(
                "label_map",
                format!("{} ids for a {batch}x{height}x{width} map", ids.len()),
            ));
        }
        Ok(LabelMap::Segmentation {
            batch,
            height,
            width,
            ids,
        })
    }

    pub fn depth(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        let (b, c, h, w) = values.shape().dims4("label_map")?;
        if c != 1 || valid.len() != b * h * w {
            return Err(TensorError::invalid(
                "label_map",
                format!("depth labels {} with {} validity flags", values.shape(), valid.len()),
            ));
        }
        Ok(LabelMap::Depth { values, valid })
    }

    pub fn normals(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        let (b, c, h, w) = values.shape().dims4("label_map")?;
        let hw = h * w;
        if c != 3 || valid.len() != b * hw {
            return Err(TensorError::invalid(
                "label_map",
                format!("normal labels {} with {} validity flags", values.shape(), valid.len()),
            ));
        }
        for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
            let (bi, p) = (i / hw, i % hw);
            let norm: f64 = (0..3).map(|ci| values.data()[(bi * 3 + ci) * hw + p].powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(TensorError::invalid(
                    "label_map",
                    format!("normal at pixel {i} has length {norm}"),
                ));
            }
        }
        Ok(LabelMap::Normals { values, valid })
    }

    /// Number of pixels that contribute to losses and metrics.
    pub fn valid_count(&self) -> usize {
        match self {
            LabelMap::Segmentation { ids, .. } => ids.iter().filter(|i| i.is_some()).count(),
            LabelMap::Depth { valid, .. } | LabelMap::Normals { valid, .. } => valid.iter().filter(|v| **v).count(),
        }
    }
}

fn label_kind_error(expected: &str) -> TensorError {
    TensorError::invalid("loss", format!("expected {expected} labels"))
}

/// Pixel-wise cross entropy from log-probabilities, averaged over non-ignored pixels.
pub fn seg_loss(tape: &mut Tape, log_probs: Var, labels: &LabelMap) -> Result<Var> {
    let LabelMap::Segmentation { ids, .. } = labels else {
        return Err(label_kind_error("segmentation"));
    };
    let targets: Vec<Option<usize>> = ids.iter().map(|i| i.map(|c| c as usize)).collect();
    tape.nll_loss(log_probs, &targets)
}

/// Mean absolute depth error over valid pixels.
pub fn depth_loss(tape: &mut Tape, pred: Var, labels: &LabelMap) -> Result<Var> {
    let LabelMap::Depth { values, valid } = labels else {
        return Err(label_kind_error("depth"));
    };
    tape.masked_l1(pred, values, valid)
}

/// Negative mean dot product between predicted and true unit normals.
pub fn normal_loss(tape: &mut Tape, pred: Var, labels: &LabelMap) -> Result<Var> {
    let LabelMap::Normals { values, valid } = labels else {
        return Err(label_kind_error("normals"));
    };
    tape.masked_neg_dot(pred, values, valid)
}

/// Weighted sum of per-task losses.
pub fn total_loss(tape: &mut Tape, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(TensorError::invalid("total_loss", format!("task weight {w} is negative")));
    }
    tape.weighted_sum(losses, weights)
}

/// One loss per task, dispatched on the task kind.
pub fn task_losses(tape: &mut Tape, preds: &[Var], labels: &[LabelMap], specs: &[TaskSpec]) -> Result<Vec<Var>> {
    if preds.len() != specs.len() || labels.len() != specs.len() {
        return Err(TensorError::invalid(
            "task_losses",
            format!("{} predictions, {} labels, {} tasks", preds.len(), labels.len(), specs.len()),
        ));
    }
    preds
        .iter()
        .zip(labels)
        .zip(specs)
        .map(|((&p, l), s)| match s.kind {
            TaskKind::Segmentation { .. } => seg_loss(tape, p, l),
            TaskKind::Depth => depth_loss(tape, p, l),
            TaskKind::Normals => normal_loss(tape, p, l),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub pix_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalMetrics {
    pub angle_mean_deg: f64,
    pub angle_median_deg: f64,
    pub within_11_25: f64,
    pub within_22_5: f64,
    pub within_30: f64,
}

/// Validation metrics; a group is `None` when no task of that kind exists.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub seg: Option<SegMetrics>,
    pub depth: Option<DepthMetrics>,
    pub normals: Option<NormalMetrics>,
}

impl MetricReport {
    /// Column names matching [`MetricReport::values`].
    pub const COLUMNS: [&'static str; 9] = [
        "miou",
        "pix_acc",
        "abs_err",
        "rel_err",
        "angle_mean",
        "angle_median",
        "within_11_25",
        "within_22_5",
        "within_30",
    ];

    /// Flat values in [`MetricReport::COLUMNS`] order; absent groups are `None`.
    pub fn values(&self) -> [Option<f64>; 9] {
        let s = self.seg;
        let d = self.depth;
        let n = self.normals;
        [
            s.map(|m| m.miou),
            s.map(|m| m.pix_acc),
            d.map(|m| m.abs_err),
            d.map(|m| m.rel_err),
            n.map(|m| m.angle_mean_deg),
            n.map(|m| m.angle_median_deg),
            n.map(|m| m.within_11_25),
            n.map(|m| m.within_22_5),
            n.map(|m| m.within_30),
        ]
    }
}

/// Ground-truth depths below this are left out of the relative error.
pub const REL_ERR_MIN_DEPTH: f64 = 1e-6;

/// Streams predictions batch by batch and produces a [`MetricReport`] over all of them.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    specs: Vec<TaskSpec>,
    /// `confusion[gt * C + pred]` per segmentation task.
    confusion: Vec<Vec<u64>>,
    depth_abs: f64,
    depth_rel: f64,
    depth_count: u64,
    depth_rel_count: u64,
    angles: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new(specs: &[TaskSpec]) -> Self {
        let confusion = specs
            .iter()
            .map(|s| match s.kind {
                TaskKind::Segmentation { classes } => vec![0; classes * classes],
                _ => Vec::new(),
            })
            .collect();
        MetricAccumulator {
            specs: specs.to_vec(),
            confusion,
            depth_abs: 0.0,
            depth_rel: 0.0,
            depth_count: 0,
            depth_rel_count: 0,
            angles: Vec::new(),
        }
    }

    pub fn add_batch(&mut self, preds: &[Tensor], labels: &[LabelMap]) -> Result<()> {
        if preds.len() != self.specs.len() || labels.len() != self.specs.len() {
            return Err(TensorError::invalid(
                "metrics",
                format!("{} predictions and {} labels for {} tasks", preds.len(), labels.len(), self.specs.len()),
            ));
        }
        for (k, (pred, label)) in preds.iter().zip(labels).enumerate() {
            match (self.specs[k].kind, label) {
                (TaskKind::Segmentation { classes }, LabelMap::Segmentation { ids, .. }) => {
                    let (b, c, h, w) = pred.shape().dims4("metrics")?;
                    if c != classes || ids.len() != b * h * w {
                        return Err(TensorError::invalid("metrics", "segmentation prediction/label mismatch"));
                    }
                    let hw = h * w;
                    for (i, gt) in ids.iter().enumerate() {
                        let Some(gt) = *gt else { continue };
                        let (bi, p) = (i / hw, i % hw);
                        let at = |ci: usize| pred.data()[(bi * c + ci) * hw + p];
                        let best = (1..c).fold(0, |best, ci| if at(ci) > at(best) { ci } else { best });
                        self.confusion[k][gt as usize * classes + best] += 1;
                    }
                }
                (TaskKind::Depth, LabelMap::Depth { values, valid }) => {
                    if pred.shape() != values.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "metrics (depth)",
                            left: pred.shape().clone(),
                            right: values.shape().clone(),
                        });
                    }
                    for ((p, g), _) in pred.data().iter().zip(values.data()).zip(valid).filter(|(_, v)| **v) {
                        let err = (p - g).abs();
                        self.depth_abs += err;
                        self.depth_count += 1;
                        if *g >= REL_ERR_MIN_DEPTH {
                            self.depth_rel += err / g;
                            self.depth_rel_count += 1;
                        }
                    }
                }
                (TaskKind::Normals, LabelMap::Normals { values, valid }) => {
                    let (b, c, h, w) = pred.shape().dims4("metrics")?;
                    if pred.shape() != values.shape() || c != 3 || valid.len() != b * h * w {
                        return Err(TensorError::invalid("metrics", "normal prediction/label mismatch"));
                    }
                    let hw = h * w;
                    for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
                        let (bi, p) = (i / hw, i % hw);
                        let dot: f64 = (0..3)
                            .map(|ci| pred.data()[(bi * 3 + ci) * hw + p] * values.data()[(bi * 3 + ci) * hw + p])
                            .sum();
                        self.angles.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
                    }
                }
                _ => {
                    return Err(TensorError::invalid(
                        "metrics",
                        format!("labels for task {} have the wrong kind", self.specs[k]),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let mut report = MetricReport::default();
        for (k, spec) in self.specs.iter().enumerate() {
            match spec.kind {
                TaskKind::Segmentation { classes } => {
                    report.seg = Some(seg_metrics(&self.confusion[k], classes));
                }
                TaskKind::Depth => {
                    report.depth = Some(DepthMetrics {
                        abs_err: ratio(self.depth_abs, self.depth_count),
                        rel_err: ratio(self.depth_rel, self.depth_rel_count),
                    });
                }
                TaskKind::Normals => report.normals = Some(normal_metrics(&self.angles)),
            }
        }
        report
    }
}

fn ratio(total: f64, count: u64) -> f64 {
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

/// mIoU over classes that occur in the ground truth or the prediction;
/// pixel accuracy over all counted pixels.
fn seg_metrics(confusion: &[u64], classes: usize) -> SegMetrics {
    let total: u64 = confusion.iter().sum();
    let correct: u64 = (0..classes).map(|c| confusion[c * classes + c]).sum();
    let mut iou_sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        let gt_c: u64 = (0..classes).map(|p| confusion[c * classes + p]).sum();
        let pred_c: u64 = (0..classes).map(|g| confusion[g * classes + c]).sum();
        let union = gt_c + pred_c - tp;
        if union > 0 {
            iou_sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    SegMetrics {
        miou: if present == 0 { f64::NAN } else { iou_sum / present as f64 },
        pix_acc: ratio(correct as f64, total),
    }
}

fn normal_metrics(angles: &[f64]) -> NormalMetrics {
    if angles.is_empty() {
        return NormalMetrics {
            angle_mean_deg: f64::NAN,
            angle_median_deg: f64::NAN,
            within_11_25: f64::NAN,
            within_22_5: f64::NAN,
            within_30: f64::NAN,
        };
    }
    let n = angles.len();
    let mut sorted = angles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let within = |t: f64| angles.iter().filter(|a| **a <= t).count() as f64 / n as f64;
    NormalMetrics {
        angle_mean_deg: angles.iter().sum::<f64>() / n as f64,
        angle_median_deg: median,
        within_11_25: within(11.25),
        within_22_5: within(22.5),
        within_30: within(30.0),
    }
}

/// Metrics for a single batch of predictions.
pub fn compute_metrics(preds: &[Tensor], labels: &[LabelMap], specs: &[TaskSpec]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(specs);
    acc.add_batch(preds, labels)?;
    Ok(acc.finish())
}
