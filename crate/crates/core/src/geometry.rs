//! Coordinate frames, the 6-parameter rigid transform and the point-source
//! projection model.
//!
//! World frame: right-handed, origin at the X-ray source, `+z` pointing to
//! the detector. The detector plane sits at `z = D` with its `u` axis
//! parallel to `x` and `v` parallel to `y`. Detector pixels are addressed
//! row-major from the top-left, pixel centers at integer indices.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn normalize_angle(deg: f64) -> f64 {
    if (-180.0..180.0).contains(&deg) {
        return deg;
    }
    let wrapped = (deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// The six registration parameters.
///
/// Translations are in mm, rotations in degrees. `tz` is the depth of the
/// object's gravity center along the projection axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformParams {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl TransformParams {
    pub const NAMES: [&'static str; 6] = ["x", "y", "z", "theta", "alpha", "beta"];

    pub fn new(tx: f64, ty: f64, tz: f64, theta: f64, alpha: f64, beta: f64) -> Self {
        Self {
            tx,
            ty,
            tz,
            theta,
            alpha,
            beta,
        }
    }

    /// Pure translation along the projection axis.
    pub fn at_depth(tz: f64) -> Self {
        Self {
            tz,
            ..Self::default()
        }
    }

    /// Order is `(tx, ty, tz, theta, alpha, beta)` everywhere in the crate.
    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.theta, self.alpha, self.beta]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        let arr: [f64; 6] = a.try_into().map_err(|_| {
            Error::InvalidParameter(format!("expected 6 parameters, got {}", a.len()))
        })?;
        Ok(Self::from_array(arr))
    }

    pub fn get(&self, index: usize) -> f64 {
        self.to_array()[index]
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let mut a = self.to_array();
        a[index] = value;
        *self = Self::from_array(a);
    }

    /// Component-wise sum with angles re-normalized.
    pub fn offset(&self, delta: &[f64; 6]) -> Self {
        let a = self.to_array();
        let mut out = [0.0; 6];
        for i in 0..6 {
            out[i] = a[i] + delta[i];
        }
        Self::from_array(out).normalized()
    }

    /// Component-wise difference `self - other`, angles wrapped into
    /// `[-180, 180)`.
    pub fn delta_from(&self, other: &Self) -> [f64; 6] {
        let a = self.to_array();
        let b = other.to_array();
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = a[i] - b[i];
            if i >= 3 {
                d[i] = normalize_angle(d[i]);
            }
        }
        d
    }

    pub fn normalized(&self) -> Self {
        Self {
            theta: normalize_angle(self.theta),
            alpha: normalize_angle(self.alpha),
            beta: normalize_angle(self.beta),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Checks that the object lies strictly between source and detector.
    pub fn check_depth(&self, geom: &ProjectionGeometry) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite transform parameters {:?}",
                self.to_array()
            )));
        }
        if !(self.tz > 0.0 && self.tz < geom.source_to_detector_mm) {
            return Err(Error::Pose(format!(
                "t_z = {} mm outside (0, {})",
                self.tz, geom.source_to_detector_mm
            )));
        }
        Ok(())
    }
}

/// Point-source projection geometry with a flat detector perpendicular to
/// the principal ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    #[serde(rename = "D_mm")]
    pub source_to_detector_mm: f64,
    #[serde(rename = "det_px")]
    pub det_px: [usize; 2],
    pub pixel_spacing_mm: f64,
    /// `(col, row)` of the principal point. Defaults to the detector center.
    #[serde(rename = "principal_point_px", default)]
    pub principal_point_px: Option<[f64; 2]>,
}

impl ProjectionGeometry {
    pub fn new(d_mm: f64, width_px: usize, height_px: usize, pixel_spacing_mm: f64) -> Result<Self> {
        let g = Self {
            source_to_detector_mm: d_mm,
            det_px: [width_px, height_px],
            pixel_spacing_mm,
            principal_point_px: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_principal_point(mut self, col: f64, row: f64) -> Self {
        self.principal_point_px = Some([col, row]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source_to_detector_mm.is_finite() && self.source_to_detector_mm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "source-to-detector distance must be positive, got {}",
                self.source_to_detector_mm
            )));
        }
        if !(self.pixel_spacing_mm.is_finite() && self.pixel_spacing_mm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel spacing must be positive, got {}",
                self.pixel_spacing_mm
            )));
        }
        if self.det_px[0] == 0 || self.det_px[1] == 0 {
            return Err(Error::InvalidParameter("detector has zero pixels".into()));
        }
        if let Some(pp) = self.principal_point_px {
            if !pp.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidParameter("principal point is not finite".into()));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.det_px[0]
    }

    pub fn height(&self) -> usize {
        self.det_px[1]
    }

    pub fn principal_point(&self) -> [f64; 2] {
        self.principal_point_px.unwrap_or([
            (self.det_px[0] as f64 - 1.0) / 2.0,
            (self.det_px[1] as f64 - 1.0) / 2.0,
        ])
    }

    /// Detector-plane mm to fractional pixel `(col, row)`.
    pub fn mm_to_pixel(&self, uv: [f64; 2]) -> [f64; 2] {
        let pp = self.principal_point();
        [
            pp[0] + uv[0] / self.pixel_spacing_mm,
            pp[1] + uv[1] / self.pixel_spacing_mm,
        ]
    }

    pub fn pixel_to_mm(&self, px: [f64; 2]) -> [f64; 2] {
        let pp = self.principal_point();
        [
            (px[0] - pp[0]) * self.pixel_spacing_mm,
            (px[1] - pp[1]) * self.pixel_spacing_mm,
        ]
    }

    /// Parses the JSON geometry file format.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let g: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::format("geometry", e.to_string()))?;
        g.validate()
            .map_err(|e| Error::format("geometry", e.to_string()))?;
        Ok(g)
    }
}

/// Perspective projection of a world point onto the detector plane, in mm.
pub fn project_point(p: &Vector3<f64>, geom: &ProjectionGeometry) -> Result<[f64; 2]> {
    if !(p.z > 0.0) {
        return Err(Error::BehindSource { z: p.z });
    }
    let d = geom.source_to_detector_mm;
    Ok([d * p.x / p.z, d * p.y / p.z])
}

/// Perspective projection straight to fractional pixel coordinates.
pub fn project_to_pixel(p: &Vector3<f64>, geom: &ProjectionGeometry) -> Result<[f64; 2]> {
    Ok(geom.mm_to_pixel(project_point(p, geom)?))
}

fn rot_x(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(deg: f64) -> Matrix3<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation `R_z(theta) * R_x(alpha) * R_y(beta)`.
pub fn rotation_from_angles(theta: f64, alpha: f64, beta: f64) -> Matrix3<f64> {
    rot_z(theta) * rot_x(alpha) * rot_y(beta)
}

/// A rigid map `p -> R p + translation` from object-local to world mm.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.apply(&p.coords))
    }

    /// World to object-local.
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Rotates a direction into the object frame.
    pub fn inverse_direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * d
    }
}

/// Builds the pose for `t`, rotating about `center` (the object's gravity
/// center in local coordinates) and placing it at `(tx, ty, tz)`.
pub fn pose_from_params(t: &TransformParams, center: &Vector3<f64>) -> Result<RigidPose> {
    if !t.is_finite() || !center.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite pose input t = {:?}, center = {:?}",
            t.to_array(),
            center.as_slice()
        )));
    }
    let rotation = rotation_from_angles(t.theta, t.alpha, t.beta);
    let translation = Vector3::new(t.tx, t.ty, t.tz) - rotation * center;
    Ok(RigidPose {
        rotation,
        translation,
    })
}

/// Axis-aligned box in object-local mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl BoundingBox {
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (lo, hi) = (self.min, self.max);
        let mut out = [Vector3::zeros(); 8];
        for (k, c) in out.iter_mut().enumerate() {
            *c = Vector3::new(
                if k & 1 == 0 { lo.x } else { hi.x },
                if k & 2 == 0 { lo.y } else { hi.y },
                if k & 4 == 0 { lo.z } else { hi.z },
            );
        }
        out
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }
}
