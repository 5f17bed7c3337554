//! Desk-scale localization metrics for a single query.
//!
//! With one predicted interval per query, average precision at a fixed IoU
//! threshold reduces to a hit indicator, so `tap25`/`stap25` are 0 or 1 for
//! one query and become accuracies when averaged over several.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use vql_core::fusion::TemporalInterval;
use vql_core::pipeline::TrackOutput;

use crate::scenario::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report2D {
    /// Temporal IoU of the predicted and true intervals (0 without a prediction).
    pub t_iou: f64,
    /// Mean per-frame box IoU over the union of both intervals; frames outside
    /// the overlap, or without a predicted box, score 0.
    pub st_iou: f64,
    pub tap25: f64,
    pub stap25: f64,
    /// Share of true-interval frames inside the predicted interval whose box
    /// reaches IoU 0.5, in percent.
    pub recovery_pct: f64,
    /// 100 if any predicted-interval box overlaps the truth with IoU >= 0.05.
    pub success_pct: f64,
}

fn frames_of(iv: &TemporalInterval) -> std::ops::RangeInclusive<usize> {
    iv.start_frame..=iv.end_frame
}

/// IoU of the predicted and true boxes at `frame`, 0 when either is missing.
fn frame_iou(pred: &TrackOutput, gt: &Scenario, frame: usize) -> f64 {
    let p = pred.frame(frame).and_then(|f| f.bbox);
    let g = gt.frames.get(frame).and_then(|f| f.gt_bbox);
    match (p, g) {
        (Some(p), Some(g)) => p.iou(&g),
        _ => 0.0,
    }
}

pub fn eval_2d(pred: &TrackOutput, gt: &Scenario) -> Report2D {
    let Some(iv) = pred.interval else {
        return Report2D {
            t_iou: 0.0,
            st_iou: 0.0,
            tap25: 0.0,
            stap25: 0.0,
            recovery_pct: 0.0,
            success_pct: 0.0,
        };
    };
    let truth = gt.gt_interval;
    let t_iou = iv.iou(&truth);

    let lo = iv.start_frame.max(truth.start_frame);
    let hi = iv.end_frame.min(truth.end_frame);
    let overlap: Vec<usize> = if lo <= hi { (lo..=hi).collect() } else { Vec::new() };
    let union = iv.len() + truth.len() - overlap.len();
    let st_iou = overlap.iter().map(|&f| frame_iou(pred, gt, f)).sum::<f64>() / union as f64;

    let recovered = overlap.iter().filter(|&&f| frame_iou(pred, gt, f) >= 0.5).count();
    let success = frames_of(&iv).any(|f| frame_iou(pred, gt, f) >= 0.05);

    Report2D {
        t_iou,
        st_iou,
        tap25: if t_iou >= 0.25 { 1.0 } else { 0.0 },
        stap25: if st_iou >= 0.25 { 1.0 } else { 0.0 },
        recovery_pct: 100.0 * recovered as f64 / truth.len() as f64,
        success_pct: if success { 100.0 } else { 0.0 },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds3D {
    /// Largest displacement error counted as a success (scene units).
    pub max_l2: f64,
    /// Largest angle between predicted and true displacement (radians).
    pub max_angle: f64,
}

impl Default for Thresholds3D {
    fn default() -> Self {
        Self {
            max_l2: 6.0,
            max_angle: std::f64::consts::FRAC_PI_4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report3D {
    /// Mean `|delta_pred - delta_gt|` over true-interval frames that have
    /// both; `None` when no frame does.
    pub l2: Option<f64>,
    /// Mean angle between the two displacements over the same frames.
    pub angle: Option<f64>,
    /// Share of true-interval frames with a prediction inside both gates.
    pub success_pct: f64,
    /// The same share counted only over frames with a valid pose.
    pub success_star_pct: f64,
    /// Share of true-interval frames with a valid pose.
    pub qwp_pct: f64,
}

/// Angle between two vectors in `[0, pi]`; 0 if either is zero.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    // atan2 stays accurate near 0 and pi where acos does not
    a.cross(b).norm().atan2(a.dot(b))
}

pub fn eval_3d(pred: &TrackOutput, gt: &Scenario, th: &Thresholds3D) -> Report3D {
    let truth = gt.gt_interval;
    let mut with_pose = 0usize;
    let mut hits = 0usize;
    let mut l2 = Vec::new();
    let mut angles = Vec::new();
    for f in frames_of(&truth) {
        let Some(want) = gt.gt_displacement(f) else {
            continue;
        };
        with_pose += 1;
        let Some(got) = pred.displacements.iter().find(|d| d.frame_index == f) else {
            continue;
        };
        let err = (got.displacement - want).norm();
        let ang = angle_between(&got.displacement, &want);
        if err < th.max_l2 && ang < th.max_angle {
            hits += 1;
        }
        l2.push(err);
        angles.push(ang);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
    Report3D {
        l2: mean(&l2),
        angle: mean(&angles),
        success_pct: pct(hits, truth.len()),
        success_star_pct: pct(hits, with_pose),
        qwp_pct: pct(with_pose, truth.len()),
    }
}

/// What `eval` prints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics_2d: Report2D,
    pub metrics_3d: Option<Report3D>,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = &self.metrics_2d;
        writeln!(f, "tIoU      {:.6}", m.t_iou)?;
        writeln!(f, "stIoU     {:.6}", m.st_iou)?;
        writeln!(f, "tAP25     {:.6}", m.tap25)?;
        writeln!(f, "stAP25    {:.6}", m.stap25)?;
        writeln!(f, "recovery  {:.2}%", m.recovery_pct)?;
        writeln!(f, "success   {:.2}%", m.success_pct)?;
        if let Some(m) = &self.metrics_3d {
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
            writeln!(f, "L2        {}", opt(m.l2))?;
            writeln!(f, "angle     {}", opt(m.angle))?;
            writeln!(f, "succ      {:.2}%", m.success_pct)?;
            writeln!(f, "succ*     {:.2}%", m.success_star_pct)?;
            writeln!(f, "QwP       {:.2}%", m.qwp_pct)?;
        }
        Ok(())
    }
}
