//! Optional silhouette term, off by default (`weight = 0`).

use super::{accumulate_point_gradient, AlignProblem, Gradient};
use crate::error::{Error, Result};
use crate::mvcam::ViewRig;
use crate::rig::{Anchor, AnchorTerm};
use crate::so3::Vec3;

/// Row-major indicator image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl SilhouetteMask {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::dim(format!("mask data has {} entries for {width}x{height}", data.len())));
        }
        if data.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(SilhouetteMask { width, height, data })
    }

    fn at(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0.0
        } else {
            self.data[y as usize * self.width as usize + x as usize]
        }
    }

    /// Value of the pixel containing `(u, v)`; zero outside the image.
    pub fn sample_nearest(&self, p: [f64; 2]) -> f64 {
        self.at(p[0].floor() as i64, p[1].floor() as i64)
    }

    /// Bilinear sample (pixel centers at `i + 0.5`) and its pixel gradient.
    pub fn sample_bilinear(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let x = p[0] - 0.5;
        let y = p[1] - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (i, j) = (x0 as i64, y0 as i64);
        let (a, b, c, d) = (self.at(i, j), self.at(i + 1, j), self.at(i, j + 1), self.at(i + 1, j + 1));
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        let value = top + (bottom - top) * fy;
        let du = (b - a) * (1.0 - fy) + (d - c) * fy;
        let dv = bottom - top;
        (value, [du, dv])
    }
}

/// Mean squared difference of two silhouettes sampled at `points`.
pub fn mask_loss(rendered: &SilhouetteMask, target: &SilhouetteMask, points: &[[f64; 2]]) -> Result<f64> {
    if (rendered.width, rendered.height) != (target.width, target.height) {
        return Err(Error::dim(format!(
            "mask resolutions differ: {}x{} vs {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    if points.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = points
        .iter()
        .map(|&p| {
            let d = rendered.sample_nearest(p) - target.sample_nearest(p);
            d * d
        })
        .sum();
    Ok(sum / points.len() as f64)
}

/// Silhouette term inside the alignment objective.
///
/// Every projected mesh vertex lies on the rendered silhouette (indicator 1),
/// so the term is the mean of `(1 − target(proj(v)))²` over visible vertices,
/// with the target sampled bilinearly to keep it differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTerm {
    pub weight: f64,
    /// One optional target mask per view.
    pub targets: Vec<Option<SilhouetteMask>>,
}

impl MaskTerm {
    pub(crate) fn check(&self, rig: &ViewRig) -> Result<()> {
        if self.targets.len() != rig.len() {
            return Err(Error::dim(format!("{} masks for {} views", self.targets.len(), rig.len())));
        }
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::invalid("mask weight must be finite and ≥ 0"));
        }
        for (cam, m) in rig.cameras().iter().zip(&self.targets) {
            if let Some(m) = m {
                if (m.width, m.height) != cam.intrinsics.image_size {
                    return Err(Error::dim(format!("mask for view {} does not match image size", cam.view_id)));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn evaluate(&self, problem: &AlignProblem, with_gradient: bool) -> (f64, Option<Gradient>) {
        let skeleton = problem.skeleton();
        let mesh = problem.mesh();
        let anchors: Vec<Anchor> = mesh
            .vertices
            .iter()
            .zip(&mesh.weights)
            .map(|(v, w)| Anchor {
                terms: w.iter().map(|&(bone, weight)| AnchorTerm { bone, weight, rest_point: *v }).collect(),
            })
            .collect();
        let shared_local = problem.shared_local();
        let n = problem.n_views();
        let parts = problem.execution.map(n, |view| {
            let Some(mask) = &self.targets[view] else {
                return (0.0, 0usize, None);
            };
            let world = problem.view_world(view, &shared_local);
            let cam = &problem.rig().cameras()[view];
            let mut wg = vec![Vec3::zeros(); if with_gradient { skeleton.len() } else { 0 }];
            let mut tg = Vec3::zeros();
            let (mut sum, mut count) = (0.0, 0usize);
            for a in &anchors {
                let x = a.position(skeleton, &world);
                let (proj, jac) = cam.project_with_jacobian(&x);
                if !proj.visible {
                    continue;
                }
                let (t, dt) = mask.sample_bilinear(proj.pixel);
                let r = 1.0 - t;
                sum += r * r;
                count += 1;
                if with_gradient {
                    let gpix = nalgebra::Vector2::new(dt[0], dt[1]) * (-2.0 * r);
                    let gx = jac.transpose() * gpix;
                    accumulate_point_gradient(skeleton, &world, a, &gx, &mut wg, &mut tg);
                }
            }
            let grad = with_gradient.then(|| problem.pullback(view, &world, &wg, tg));
            (sum, count, grad)
        });
        let count: usize = parts.iter().map(|p| p.1).sum();
        if count == 0 {
            return (0.0, with_gradient.then(|| Gradient::zeros(skeleton.len(), n)));
        }
        let inv = 1.0 / count as f64;
        let loss = parts.iter().map(|p| p.0).sum::<f64>() * inv;
        let grad = with_gradient.then(|| {
            let mut g = Gradient::zeros(skeleton.len(), n);
            for (view, (_, _, vg)) in parts.iter().enumerate() {
                if let Some(vg) = vg {
                    for (acc, x) in g.rotations.iter_mut().zip(&vg.rotations) {
                        *acc += x;
                    }
                    g.root_translation += vg.translation;
                    g.view_rotations[view] = vg.view_rotation;
                    g.view_translations[view] = vg.translation;
                }
            }
            g.scale(inv);
            g
        });
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: u32, h: u32, invert: bool) -> SilhouetteMask {
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (((x + y) % 2 == 0) != invert) as u8 as f64))
            .collect();
        SilhouetteMask::new(w, h, data).unwrap()
    }

    #[test]
    fn identical_masks_give_zero() {
        let m = checker(8, 8, false);
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 0.37, i as f64 * 0.29]).collect();
        assert_eq!(mask_loss(&m, &m, &pts).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_against_inverse_is_one() {
        let a = checker(8, 8, false);
        let b = checker(8, 8, true);
        let pts: Vec<[f64; 2]> = (0..8).flat_map(|x| (0..8).map(move |y| [x as f64 + 0.5, y as f64 + 0.5])).collect();
        assert_eq!(mask_loss(&a, &b, &pts).unwrap(), 1.0);
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        assert!(mask_loss(&checker(4, 4, false), &checker(4, 5, false), &[[0.0, 0.0]]).is_err());
    }

    #[test]
    fn bilinear_gradient_matches_finite_difference() {
        let data = (0..36).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let m = SilhouetteMask::new(6, 6, data).unwrap();
        let p = [2.3, 3.7];
        let (_, g) = m.sample_bilinear(p);
        let h = 1e-6;
        let du = (m.sample_bilinear([p[0] + h, p[1]]).0 - m.sample_bilinear([p[0] - h, p[1]]).0) / (2.0 * h);
        let dv = (m.sample_bilinear([p[0], p[1] + h]).0 - m.sample_bilinear([p[0], p[1] - h]).0) / (2.0 * h);
        assert!((du - g[0]).abs() < 1e-6 && (dv - g[1]).abs() < 1e-6);
    }
}
