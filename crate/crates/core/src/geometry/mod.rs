//! Point clouds, oriented boxes and the deterministic geometric primitives
//! built on them.

mod crop;
mod iou;
mod sampling;
mod voxel;

use std::f64::consts::PI;

use onestream_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crop::{crop_and_sample, points_in_box, sample_points, Crop};
pub use iou::{iou3d, polygon_area, rotated_rect_intersection};
pub use sampling::{ball_query, ball_query_all, farthest_point_sample, knn, squared_distance};
pub use voxel::{voxel_cells, voxelize, VoxelSpec};

pub type Point3 = [f64; 3];

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Ordered set of 3-D points in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("non-finite coordinate at point {i}")));
        }
        Ok(PointCloud { points })
    }

    pub fn empty() -> Self {
        PointCloud { points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        Some(c.map(|v| v / n))
    }

    /// `N x 3` tensor of coordinates.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![self.points.len(), 3], |i| T::lit(self.points[i / 3][i % 3]))
    }

    pub fn map(&self, f: impl Fn(&Point3) -> Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
        }
    }
}

/// Oriented 3-D box. `l` extends along the heading direction, `w` across it
/// and `h` vertically; `heading` rotates about +z and is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub heading: f64,
}

impl Box3D {
    pub fn new(center: Point3, w: f64, l: f64, h: f64, heading: f64) -> Result<Self> {
        if !(w > 0.0 && l > 0.0 && h > 0.0) {
            return Err(Error::invalid(format!("box sizes must be positive: {w} {l} {h}")));
        }
        if center.iter().chain([&heading]).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite box parameter"));
        }
        Ok(Box3D {
            center,
            w,
            l,
            h,
            heading: wrap_angle(heading),
        })
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// Same pose, every extent grown by `e` (so `e / 2` on each side).
    pub fn enlarged(&self, e: f64) -> Box3D {
        Box3D {
            w: self.w + e,
            l: self.l + e,
            h: self.h + e,
            ..*self
        }
    }

    pub fn frame(&self) -> RigidTransform {
        RigidTransform {
            translation: self.center,
            yaw: self.heading,
        }
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: &Point3) -> bool {
        let q = self.frame().to_local(p);
        q[0].abs() <= self.l / 2.0 && q[1].abs() <= self.w / 2.0 && q[2].abs() <= self.h / 2.0
    }

    /// Footprint corners in counter-clockwise order.
    pub fn corners_xy(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        })
    }

    pub fn center_distance(&self, other: &Box3D) -> f64 {
        squared_distance(&self.center, &other.center).sqrt()
    }
}

/// Rotation about +z by `yaw` followed by a translation; maps box-frame
/// coordinates to world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub translation: Point3,
    pub yaw: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            translation: [0.0; 3],
            yaw: 0.0,
        }
    }

    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let d = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn to_world(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
            p[2] + self.translation[2],
        ]
    }

    pub fn box_to_local(&self, b: &Box3D) -> Box3D {
        Box3D {
            center: self.to_local(&b.center),
            heading: wrap_angle(b.heading - self.yaw),
            ..*b
        }
    }

    pub fn box_to_world(&self, b: &Box3D) -> Box3D {
        Box3D {
            center: self.to_world(&b.center),
            heading: wrap_angle(b.heading + self.yaw),
            ..*b
        }
    }
}

/// Expresses `pc` in the frame of `b` (its center at the origin, heading
/// along +x).
pub fn transform_to_box_frame(pc: &PointCloud, b: &Box3D) -> PointCloud {
    let f = b.frame();
    pc.map(|p| f.to_local(p))
}

/// Inverse of [`transform_to_box_frame`].
pub fn transform_from_box_frame(pc: &PointCloud, b: &Box3D) -> PointCloud {
    let f = b.frame();
    pc.map(|p| f.to_world(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn box_frame_examples() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0], [-0.5, 0.0, 4.0]]).unwrap();
        let origin = Box3D::new([0.0; 3], 1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(transform_to_box_frame(&pc, &origin), pc);
        let b = Box3D::new([1.0, 2.0, 3.0], 1.0, 2.0, 1.0, 0.7).unwrap();
        let local = transform_to_box_frame(&pc, &b);
        assert!(local.points()[0].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(Box3D::new([0.0; 3], 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(Box3D::new([f64::NAN, 0.0, 0.0], 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(PointCloud::new(vec![[0.0, f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn contains_uses_heading() {
        let b = Box3D::new([0.0; 3], 1.0, 4.0, 1.0, PI / 2.0).unwrap();
        assert!(b.contains(&[0.0, 1.9, 0.0]));
        assert!(!b.contains(&[1.9, 0.0, 0.0]));
    }
}
