//! Azimuthal camera ring and pinhole projection.
//!
//! World frame is right-handed with +y up. A camera at azimuth `a` and
//! elevation `e` sits at `r·(cos e·sin a, sin e, cos e·cos a)` and looks at the
//! origin; azimuth 0 is on +z. Pixel coordinates follow the image
//! convention: u grows right, v grows down, depth is positive in front.

use crate::error::{Error, Result};
use crate::so3::{Mat3, Vec3};
use nalgebra::{Matrix2x3, Vector2};
use std::f64::consts::{FRAC_PI_2, PI};

/// Points closer than this to the image plane are not projectable.
pub const NEAR_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub principal: [f64; 2],
    pub image_size: (u32, u32),
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            focal: 640.0,
            principal: [256.0, 256.0],
            image_size: (512, 512),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub view_id: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub visible: bool,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let Intrinsics { focal, principal, image_size } = self.intrinsics;
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::invalid(format!("camera {}: radius must be > 0", self.view_id)));
        }
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::invalid(format!("camera {}: focal must be > 0", self.view_id)));
        }
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        if !(principal[0] >= 0.0 && principal[0] <= w && principal[1] >= 0.0 && principal[1] <= h) {
            return Err(Error::invalid(format!("camera {}: principal point outside image", self.view_id)));
        }
        if !(self.elevation.abs() < FRAC_PI_2) || !self.azimuth.is_finite() {
            return Err(Error::invalid(format!("camera {}: elevation must lie in (-π/2, π/2)", self.view_id)));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Vec3::new(ce * sa, se, ce * ca) * self.radius
    }

    /// World-to-camera rotation; rows are right, down, forward.
    pub fn rotation(&self) -> Mat3 {
        let c = self.position();
        let forward = -c.normalize();
        let right = forward.cross(&Vec3::y()).normalize();
        let up = right.cross(&forward);
        Mat3::from_rows(&[right.transpose(), (-up).transpose(), forward.transpose()])
    }

    pub fn to_camera(&self, point: &Vec3) -> Vec3 {
        self.rotation() * (point - self.position())
    }

    pub fn project(&self, point: &Vec3) -> Projection {
        self.project_with_jacobian(point).0
    }

    /// Projection plus `∂(u, v)/∂point` in world coordinates.
    pub fn project_with_jacobian(&self, point: &Vec3) -> (Projection, Matrix2x3<f64>) {
        let rot = self.rotation();
        let pc = rot * (point - self.position());
        let depth = pc.z;
        let f = self.intrinsics.focal;
        let [cx, cy] = self.intrinsics.principal;
        if depth <= NEAR_EPSILON {
            let p = Projection { pixel: [f64::NAN, f64::NAN], depth, visible: false };
            return (p, Matrix2x3::zeros());
        }
        let inv = 1.0 / depth;
        let u = f * pc.x * inv + cx;
        let v = f * pc.y * inv + cy;
        let dc = Matrix2x3::new(f * inv, 0.0, -f * pc.x * inv * inv, 0.0, f * inv, -f * pc.y * inv * inv);
        (Projection { pixel: [u, v], depth, visible: true }, dc * rot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRig {
    cameras: Vec<Camera>,
}

impl ViewRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("camera rig needs at least one camera"));
        }
        for (i, c) in cameras.iter().enumerate() {
            if c.view_id != i {
                return Err(Error::invalid(format!("camera view ids must be dense 0..N-1 (found {} at {i})", c.view_id)));
            }
            c.validate()?;
        }
        Ok(ViewRig { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, view: usize) -> Option<&Camera> {
        self.cameras.get(view)
    }
}

/// `n_views` cameras evenly spaced in azimuth, all aimed at the origin.
pub fn make_ring_rig(n_views: usize, elevation: f64, radius: f64, intrinsics: Intrinsics) -> Result<ViewRig> {
    if n_views == 0 {
        return Err(Error::invalid("n_views must be ≥ 1"));
    }
    let cameras = (0..n_views)
        .map(|k| Camera {
            view_id: k,
            azimuth: 2.0 * PI * k as f64 / n_views as f64,
            elevation,
            radius,
            intrinsics,
        })
        .collect();
    ViewRig::new(cameras)
}

pub fn pixel_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (Vector2::from(a) - Vector2::from(b)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rig(n: usize, elev: f64) -> ViewRig {
        make_ring_rig(n, elev, 4.0, Intrinsics::default()).unwrap()
    }

    #[test]
    fn eight_views_are_45_degrees_apart() {
        let r = rig(8, 0.2);
        for (k, c) in r.cameras().iter().enumerate() {
            assert_relative_eq!(c.azimuth.to_degrees(), 45.0 * k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_view_and_zero_views() {
        let r = rig(1, 0.0);
        assert_eq!(r.cameras()[0].azimuth, 0.0);
        assert!(make_ring_rig(0, 0.0, 4.0, Intrinsics::default()).is_err());
    }

    #[test]
    fn opposite_cameras_are_reflections() {
        let r = rig(4, 0.0);
        assert_relative_eq!(r.cameras()[2].position(), -r.cameras()[0].position(), epsilon = 1e-12);
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let r = rig(3, 0.3);
        for c in r.cameras() {
            let p = c.project(&Vec3::zeros());
            assert_relative_eq!(p.pixel[0], 256.0, epsilon = 1e-9);
            assert_relative_eq!(p.pixel[1], 256.0, epsilon = 1e-9);
            assert_relative_eq!(p.depth, 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lateral_offset_scales_with_focal_over_depth() {
        let c = rig(1, 0.0).cameras()[0].clone();
        // camera 0 on +z looking down -z: world +x is image right, world +y is image up
        let p = c.project(&Vec3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(p.pixel[0] - 256.0, 640.0 * 0.5 / 4.0, epsilon = 1e-9);
        let q = c.project(&Vec3::new(0.0, 0.5, 0.0));
        assert_relative_eq!(q.pixel[1] - 256.0, -640.0 * 0.5 / 4.0, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let c = rig(1, 0.0).cameras()[0].clone();
        assert!(!c.project(&Vec3::new(0.0, 0.0, 5.0)).visible);
        assert!(!c.project(&c.position()).visible);
    }

    #[test]
    fn validation() {
        let mut c = rig(1, 0.0).cameras()[0].clone();
        c.intrinsics.focal = 0.0;
        assert!(c.validate().is_err());
        let mut c = rig(1, 0.0).cameras()[0].clone();
        c.intrinsics.principal = [600.0, 10.0];
        assert!(c.validate().is_err());
        let mut c = rig(1, 0.0).cameras()[0].clone();
        c.view_id = 1;
        assert!(ViewRig::new(vec![c]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let c = rig(8, 0.35).cameras()[3].clone();
        let p = Vec3::new(0.3, -0.2, 0.4);
        let (_, j) = c.project_with_jacobian(&p);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vec3::zeros();
            d[i] = h;
            let a = c.project(&(p + d)).pixel;
            let b = c.project(&(p - d)).pixel;
            assert_relative_eq!((a[0] - b[0]) / (2.0 * h), j[(0, i)], epsilon = 1e-5);
            assert_relative_eq!((a[1] - b[1]) / (2.0 * h), j[(1, i)], epsilon = 1e-5);
        }
    }
}
