//! Points, rays and the range-manifold decomposition.
//!
//! The sensor sits at the origin. Every point is split into a unit ray
//! direction and a scalar range; diffusion only ever touches the range.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Points closer to the origin than this cannot be decomposed.
pub const DEGENERATE_RANGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, other: &Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (*self - *other).norm()
    }

    pub fn distance_sq(&self, other: &Point3) -> f64 {
        let d = *self - *other;
        d.dot(&d)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, rhs: Point3) -> Point3 {
        Point3::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, rhs: Point3) -> Point3 {
        Point3::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, rhs: f64) -> Point3 {
        Point3::new(self.x * rhs, self.y * rhs, self.z * rhs)
    }
}

/// A unit direction from the sensor origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    direction: Point3,
}

impl Ray {
    /// Normalizes `v`. Fails on vectors shorter than [`DEGENERATE_RANGE`].
    pub fn new(v: Point3) -> Result<Self, GeometryError> {
        let n = v.norm();
        if !(n > DEGENERATE_RANGE) {
            return Err(GeometryError::DegeneratePoint { norm: n });
        }
        Ok(Self {
            direction: v * (1.0 / n),
        })
    }

    /// Wraps an already unit-length vector without renormalizing.
    pub fn from_unit(direction: Point3) -> Self {
        debug_assert!((direction.norm() - 1.0).abs() < 1e-6);
        Self { direction }
    }

    /// Direction for a beam at the given azimuth and elevation (radians).
    pub fn from_angles(azimuth: f64, elevation: f64) -> Self {
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        Self {
            direction: Point3::new(ce * ca, ce * sa, se),
        }
    }

    pub fn direction(&self) -> Point3 {
        self.direction
    }

    pub fn azimuth(&self) -> f64 {
        self.direction.y.atan2(self.direction.x)
    }

    pub fn elevation(&self) -> f64 {
        self.direction.z.clamp(-1.0, 1.0).asin()
    }

    /// Angle between two rays in radians.
    pub fn angle_to(&self, other: &Ray) -> f64 {
        // atan2 form stays accurate for nearly parallel rays.
        let c = self.direction.dot(&other.direction);
        let x = self.direction;
        let y = other.direction;
        let cross = Point3::new(
            x.y * y.z - x.z * y.y,
            x.z * y.x - x.x * y.z,
            x.x * y.y - x.y * y.x,
        );
        cross.norm().atan2(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayDecomposition {
    pub ray: Ray,
    pub range: f64,
    pub valid: bool,
}

impl RayDecomposition {
    pub fn point(&self) -> Point3 {
        self.ray.direction() * self.range
    }
}

/// Per-point scanline attributes of a LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScanlineAttr {
    pub ring_id: u16,
    /// Radians in [-pi, pi).
    pub azimuth: f32,
    /// Seconds since the start of the sweep.
    pub timestamp: f32,
}

/// A flat set of points with optional scanline attributes (one per point when present).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub attrs: Option<Vec<ScanlineAttr>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            attrs: None,
        }
    }

    pub fn with_attrs(points: Vec<Point3>, attrs: Vec<ScanlineAttr>) -> Self {
        assert_eq!(points.len(), attrs.len(), "one attribute per point");
        Self {
            points,
            attrs: Some(attrs),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn decompose(p: Point3) -> Result<RayDecomposition, GeometryError> {
    let range = p.norm();
    if !(range > DEGENERATE_RANGE) {
        return Err(GeometryError::DegeneratePoint { norm: range });
    }
    Ok(RayDecomposition {
        ray: Ray::from_unit(p * (1.0 / range)),
        range,
        valid: true,
    })
}

pub fn reconstruct(ray: &Ray, range: f64) -> Result<Point3, GeometryError> {
    if range < 0.0 || range.is_nan() {
        return Err(GeometryError::NegativeRange { range });
    }
    Ok(ray.direction() * range)
}

/// Perpendicular distance from `p` to the line through the origin along `ray`.
pub fn lateral_distance(p: &Point3, ray: &Ray) -> f64 {
    let d = ray.direction();
    let along = p.dot(&d);
    (*p - d * along).norm()
}

/// Signed projection of `p` onto the ray direction.
pub fn projected_range(p: &Point3, ray: &Ray) -> f64 {
    p.dot(&ray.direction())
}

/// `max(0, gt_range - p.d)`: how far in front of the true return the point projects.
///
/// Uses the signed projection, so a point behind the sensor yields an
/// occlusion depth larger than `gt_range`.
pub fn radial_occlusion(p: &Point3, ray: &Ray, gt_range: f64) -> f64 {
    (gt_range - projected_range(p, ray)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn decompose_three_four_five() {
        let d = decompose(Point3::new(3.0, 0.0, 4.0)).unwrap();
        assert!(close(d.range, 5.0));
        let dir = d.ray.direction();
        assert!(close(dir.x, 0.6) && close(dir.y, 0.0) && close(dir.z, 0.8));
        assert!(d.valid);
    }

    #[test]
    fn decompose_unit_axis() {
        let d = decompose(Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(d.range, 1.0);
        assert_eq!(d.ray.direction(), Point3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn decompose_origin_is_degenerate() {
        assert!(matches!(
            decompose(Point3::new(1e-12, 0.0, 0.0)),
            Err(GeometryError::DegeneratePoint { .. })
        ));
        assert!(decompose(Point3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let p = reconstruct(&Ray::new(Point3::new(0.0, 1.0, 0.0)).unwrap(), 2.5).unwrap();
        assert_eq!(p, Point3::new(0.0, 2.5, 0.0));
        let p = reconstruct(&Ray::new(Point3::new(0.6, 0.0, 0.8)).unwrap(), 5.0).unwrap();
        assert!(close(p.x, 3.0) && close(p.y, 0.0) && close(p.z, 4.0));
        let p = reconstruct(&Ray::new(Point3::new(1.0, 0.0, 0.0)).unwrap(), 0.0).unwrap();
        assert_eq!(p, Point3::default());
    }

    #[test]
    fn reconstruct_rejects_negative_range() {
        let ray = Ray::new(Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(matches!(
            reconstruct(&ray, -0.1),
            Err(GeometryError::NegativeRange { .. })
        ));
    }

    #[test]
    fn lateral_examples() {
        let x = Ray::new(Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(lateral_distance(&Point3::new(0.0, 1.0, 0.0), &x), 1.0));
        assert!(close(lateral_distance(&Point3::new(5.0, 0.0, 0.0), &x), 0.0));
        assert!(close(lateral_distance(&Point3::new(3.0, 4.0, 0.0), &x), 4.0));
    }

    #[test]
    fn radial_examples() {
        let x = Ray::new(Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(radial_occlusion(&Point3::new(3.0, 0.0, 0.0), &x, 5.0), 2.0));
        assert!(close(radial_occlusion(&Point3::new(7.0, 0.0, 0.0), &x, 5.0), 0.0));
        // dot-product oracle: (0,1,0).(1,0,0) = 0, so the deficit is the full range
        let proj = 0.0 * 1.0 + 1.0 * 0.0 + 0.0 * 0.0;
        assert!(close(
            radial_occlusion(&Point3::new(0.0, 1.0, 0.0), &x, 5.0),
            5.0 - proj
        ));
    }

    #[test]
    fn point_behind_sensor_uses_signed_projection() {
        let x = Ray::new(Point3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(radial_occlusion(&Point3::new(-2.0, 0.0, 0.0), &x, 5.0), 7.0));
    }

    #[test]
    fn angle_between_rays() {
        let a = Ray::from_angles(0.0, 0.0);
        let b = Ray::from_angles(0.25, 0.0);
        assert!((a.angle_to(&b) - 0.25).abs() < 1e-12);
        assert!(a.angle_to(&a).abs() < 1e-12);
    }
}
