//! Lifting 2D detections into a shared 3D frame.
//!
//! Cameras follow the pinhole model with camera-to-world poses. A pixel
//! `(u, v)` (column, row) with depth `d` maps to the camera point
//! `d * K^-1 [u, v, 1]^T`, then through the pose into the reconstruction's
//! world frame, then through a similarity `T_eta` into the benchmark frame.

use nalgebra::{Matrix3, Matrix4, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{running_mean, BinaryMask, ScoreMap};

const ROTATION_TOLERANCE: f64 = 1e-9;

fn check_rotation(r: &Matrix3<f64>, what: &str) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ensure!(
        ortho <= ROTATION_TOLERANCE && (r.determinant() - 1.0).abs() <= ROTATION_TOLERANCE,
        Parameter,
        "{what} is not a rotation (|R^T R - I| = {ortho:e}, det = {})",
        r.determinant()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCamera")]
pub struct CameraFrame {
    pose: Matrix4<f64>,
    intrinsics: Matrix3<f64>,
    depth: ScoreMap,
    depth_uncertainty: ScoreMap,
}

#[derive(Deserialize)]
struct RawCamera {
    pose: Matrix4<f64>,
    intrinsics: Matrix3<f64>,
    depth: ScoreMap,
    depth_uncertainty: ScoreMap,
}

impl TryFrom<RawCamera> for CameraFrame {
    type Error = Error;

    fn try_from(raw: RawCamera) -> Result<Self> {
        CameraFrame::new(raw.pose, raw.intrinsics, raw.depth, raw.depth_uncertainty)
    }
}

impl CameraFrame {
    pub fn new(
        pose: Matrix4<f64>,
        intrinsics: Matrix3<f64>,
        depth: ScoreMap,
        depth_uncertainty: ScoreMap,
    ) -> Result<Self> {
        ensure!(
            pose.iter().all(|v| v.is_finite()) && intrinsics.iter().all(|v| v.is_finite()),
            Parameter,
            "camera matrices must be finite"
        );
        check_rotation(&pose.fixed_view::<3, 3>(0, 0).into_owned(), "camera pose rotation")?;
        ensure!(
            pose[(3, 0)] == 0.0 && pose[(3, 1)] == 0.0 && pose[(3, 2)] == 0.0 && pose[(3, 3)] == 1.0,
            Parameter,
            "camera pose bottom row must be [0, 0, 0, 1]"
        );
        ensure!(
            intrinsics[(1, 0)] == 0.0
                && intrinsics[(2, 0)] == 0.0
                && intrinsics[(2, 1)] == 0.0
                && intrinsics[(2, 2)] == 1.0,
            Parameter,
            "intrinsics must be upper triangular with K[2][2] = 1"
        );
        ensure!(
            intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0,
            Parameter,
            "focal lengths must be positive"
        );
        ensure!(
            depth.dims() == depth_uncertainty.dims(),
            Dimension,
            "depth is {:?}, uncertainty is {:?}",
            depth.dims(),
            depth_uncertainty.dims()
        );
        ensure!(
            depth_uncertainty.data().iter().all(|&v| v >= 0.0),
            Parameter,
            "depth uncertainty must be non-negative"
        );
        Ok(Self {
            pose,
            intrinsics,
            depth,
            depth_uncertainty,
        })
    }

    pub fn pose(&self) -> &Matrix4<f64> {
        &self.pose
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn depth(&self) -> &ScoreMap {
        &self.depth
    }

    pub fn depth_uncertainty(&self) -> &ScoreMap {
        &self.depth_uncertainty
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Nearest pixel `(row, col)` to continuous coordinates, if inside.
    pub fn nearest_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (h, w) = self.depth.dims();
        let col = (u + 0.5).floor();
        let row = (v + 0.5).floor();
        (col >= 0.0 && row >= 0.0 && (col as usize) < w && (row as usize) < h)
            .then(|| (row as usize, col as usize))
    }

    /// `d * K^-1 [u, v, 1]` with depth looked up at the nearest pixel.
    pub fn camera_point(&self, u: f64, v: f64) -> Result<Vector3<f64>> {
        let (row, col) = self.nearest_pixel(u, v).ok_or_else(|| {
            Error::InvalidSample(format!("pixel ({u}, {v}) outside the depth map"))
        })?;
        let d = self.depth.at(row, col);
        ensure!(
            d > 0.0,
            InvalidSample,
            "no valid depth at pixel ({u}, {v}): {d}"
        );
        let k_inv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::Parameter("singular intrinsics".into()))?;
        Ok(k_inv * Vector3::new(u, v, 1.0) * d)
    }

    /// Depth uncertainty at the nearest pixel.
    pub fn uncertainty_at(&self, u: f64, v: f64) -> Result<f64> {
        let (row, col) = self.nearest_pixel(u, v).ok_or_else(|| {
            Error::InvalidSample(format!("pixel ({u}, {v}) outside the uncertainty map"))
        })?;
        Ok(self.depth_uncertainty.at(row, col))
    }
}

/// `p -> scale * rotation * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSim3")]
pub struct Sim3Transform {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Deserialize)]
struct RawSim3 {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl TryFrom<RawSim3> for Sim3Transform {
    type Error = Error;

    fn try_from(raw: RawSim3) -> Result<Self> {
        Sim3Transform::new(raw.scale, raw.rotation, raw.translation)
    }
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        ensure!(
            scale > 0.0 && scale.is_finite(),
            Parameter,
            "similarity scale must be positive, got {scale}"
        );
        ensure!(
            translation.iter().all(|v| v.is_finite()),
            Parameter,
            "similarity translation must be finite"
        );
        check_rotation(&rotation, "similarity rotation")?;
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_only(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let rt = self.rotation.transpose();
        Sim3Transform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Least-squares similarity taking `src` onto `dst` (closed form via the SVD
/// of the cross-covariance, reflections excluded).
pub fn align_sim3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3Transform> {
    ensure!(
        src.len() == dst.len(),
        Dimension,
        "{} source points but {} targets",
        src.len(),
        dst.len()
    );
    ensure!(
        src.len() >= 3,
        Degenerate,
        "similarity alignment needs at least 3 pairs, got {}",
        src.len()
    );
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    let mut cov_s = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (s, d) = (s - mu_s, d - mu_d);
        cross += d * s.transpose();
        cov_s += s * s.transpose();
    }
    cross /= n;
    cov_s /= n;
    let var_s = cov_s.trace();
    let spread = cov_s.symmetric_eigenvalues();
    let mut spread: Vec<f64> = spread.iter().copied().collect();
    spread.sort_by(|a, b| b.total_cmp(a));
    ensure!(
        var_s > 0.0 && spread[1] > 1e-12 * spread[0],
        Degenerate,
        "source points are collinear or coincident"
    );
    let svd = SVD::new(cross, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[2] = -1.0;
    }
    // singular values come sorted in decreasing order
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = svd.singular_values.dot(&d) / var_s;
    ensure!(scale > 0.0, Degenerate, "alignment produced non-positive scale");
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Sim3Transform {
        scale,
        rotation,
        translation,
    })
}

fn pose_as_sim3(frame: &CameraFrame) -> Sim3Transform {
    Sim3Transform {
        scale: 1.0,
        rotation: frame.rotation(),
        translation: frame.translation(),
    }
}

/// World point seen at pixel `(u, v)` (column, row), expressed in the
/// benchmark frame.
pub fn backproject(
    frame: &CameraFrame,
    u: f64,
    v: f64,
    t_eta: &Sim3Transform,
) -> Result<Vector3<f64>> {
    let cam = frame.camera_point(u, v)?;
    Ok(t_eta.apply(&pose_as_sim3(frame).apply(&cam)))
}

/// `(T_eta T_i)^-1 p`: the point in frame `i`'s camera coordinates.
pub fn relative_displacement(
    frame: &CameraFrame,
    world_point: &Vector3<f64>,
    t_eta: &Sim3Transform,
) -> Vector3<f64> {
    let to_world = t_eta.compose(&pose_as_sim3(frame));
    to_world.inverse().apply(world_point)
}

/// Mixing weights `(phi, psi, mu)` for the mean, above-threshold mean and max.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticWeights {
    pub phi: f64,
    pub psi: f64,
    pub mu: f64,
}

impl Default for SemanticWeights {
    fn default() -> Self {
        Self {
            phi: 1.0 / 3.0,
            psi: 1.0 / 3.0,
            mu: 1.0 / 3.0,
        }
    }
}

impl SemanticWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.phi >= 0.0 && self.psi >= 0.0 && self.mu >= 0.0,
            Parameter,
            "semantic weights must be non-negative"
        );
        ensure!(
            (self.phi + self.psi + self.mu - 1.0).abs() <= 1e-9,
            Parameter,
            "semantic weights must sum to 1, got {}",
            self.phi + self.psi + self.mu
        );
        Ok(())
    }
}

/// Confidence from mask probabilities: `phi * mean + psi * mean(p > lambda) +
/// mu * max`, zero for an empty mask.
pub fn semantic_confidence_from_probs(
    probs: &[f64],
    lambda_thr: f64,
    weights: &SemanticWeights,
) -> Result<f64> {
    weights.validate()?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let p_av = running_mean(probs.iter().copied()).unwrap_or(0.0);
    let p_lambda = running_mean(probs.iter().copied().filter(|&p| p > lambda_thr)).unwrap_or(0.0);
    let p_max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((weights.phi * p_av + weights.psi * p_lambda + weights.mu * p_max).clamp(0.0, 1.0))
}

pub fn semantic_confidence(
    prob: &ScoreMap,
    mask: &BinaryMask,
    lambda_thr: f64,
    weights: &SemanticWeights,
) -> Result<f64> {
    ensure!(
        prob.dims() == mask.dims(),
        Dimension,
        "probability map is {:?}, mask is {:?}",
        prob.dims(),
        mask.dims()
    );
    let probs: Vec<f64> = mask.pixels().map(|(r, c)| prob.at(r, c)).collect();
    semantic_confidence_from_probs(&probs, lambda_thr, weights)
}

/// `exp(-zeta * tau)`.
pub fn geometric_confidence(tau: f64, zeta: f64) -> Result<f64> {
    ensure!(tau >= 0.0, Parameter, "depth uncertainty must be non-negative, got {tau}");
    ensure!(zeta > 0.0, Parameter, "zeta must be positive, got {zeta}");
    Ok((-zeta * tau).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewContribution {
    pub world_point: Vector3<f64>,
    pub s_conf: f64,
    pub g_conf: f64,
    pub fused_weight: f64,
    pub frame_index: usize,
}

impl ViewContribution {
    pub fn new(world_point: Vector3<f64>, s_conf: f64, g_conf: f64, frame_index: usize) -> Self {
        Self {
            world_point,
            s_conf,
            g_conf,
            fused_weight: s_conf * g_conf,
            frame_index,
        }
    }
}

/// Fused-weight average of the contributing points.
pub fn aggregate(contributions: &[ViewContribution]) -> Result<Vector3<f64>> {
    ensure!(!contributions.is_empty(), EmptyInput, "nothing to aggregate");
    ensure!(
        contributions.iter().all(|c| c.fused_weight >= 0.0),
        Parameter,
        "fused weights must be non-negative"
    );
    let total: f64 = contributions.iter().map(|c| c.fused_weight).sum();
    ensure!(total > 0.0, Degenerate, "all fused weights are zero");
    let mut out = Vector3::zeros();
    for c in contributions {
        out += c.world_point * (c.fused_weight / total);
    }
    // an exact convex combination stays in the bounding box; clamp rounding
    for axis in 0..3 {
        let lo = contributions.iter().map(|c| c.world_point[axis]).fold(f64::INFINITY, f64::min);
        let hi = contributions.iter().map(|c| c.world_point[axis]).fold(f64::NEG_INFINITY, f64::max);
        out[axis] = out[axis].clamp(lo, hi);
    }
    Ok(out)
}
