//! Multi-view keypoint alignment: rendered-vs-target keypoint loss, its
//! analytic gradient, and the adaptive-moment optimization loop.
//!
//! Parameters are the shared per-bone rotations, the shared root translation,
//! and for every view a root rotation and root translation. The per-view root
//! rotation `r_k` is attenuated by `s` and applied on top of the shared root:
//! `R_root,k = exp(s·r_k)·exp(ω_root)`; the root position is `τ + u_k`.

mod mask;
mod optim;

pub use mask::{mask_loss, MaskTerm, SilhouetteMask};
pub use optim::{optimize_pose, AlignResult, OptimReport, OptimStatus, OptimizerConfig};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mvcam::ViewRig;
use crate::rig::{self, Anchor, KeypointBinding, Pose, RigidTransform, Skeleton, SkinnedMesh};
use crate::so3::{self, Mat3, Vec3};
use std::collections::{BTreeMap, BTreeSet, HashSet};

pub const DEFAULT_ROOT_ATTENUATION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointObservation {
    pub view_id: usize,
    pub keypoint_id: String,
    pub position: [f64; 2],
    pub visible: bool,
    pub confidence: f64,
}

/// Target keypoints, sorted by `(view_id, keypoint_id)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetSet {
    observations: Vec<KeypointObservation>,
}

impl TargetSet {
    pub fn new(mut observations: Vec<KeypointObservation>) -> Result<Self> {
        observations.sort_by(|a, b| (a.view_id, &a.keypoint_id).cmp(&(b.view_id, &b.keypoint_id)));
        let mut seen = HashSet::new();
        for o in &observations {
            if !seen.insert((o.view_id, o.keypoint_id.as_str())) {
                return Err(Error::invalid(format!(
                    "duplicate target for view {} keypoint '{}'",
                    o.view_id, o.keypoint_id
                )));
            }
            if !(0.0..=1.0).contains(&o.confidence) {
                return Err(Error::invalid(format!(
                    "target view {} keypoint '{}': confidence {} outside [0, 1]",
                    o.view_id, o.keypoint_id, o.confidence
                )));
            }
            if o.visible && !o.position.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!(
                    "target view {} keypoint '{}': visible with non-finite position",
                    o.view_id, o.keypoint_id
                )));
            }
        }
        Ok(TargetSet { observations })
    }

    pub fn observations(&self) -> &[KeypointObservation] {
        &self.observations
    }
}

/// Per-view root override: axis-angle rotation (attenuated) and translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ViewRoot {
    pub rotation: Vec3,
    pub translation: Vec3,
}

#[derive(Debug, Clone)]
struct Match {
    anchor: usize,
    target: [f64; 2],
    confidence: f64,
}

#[derive(Debug, Clone)]
pub struct AlignProblem {
    skeleton: Skeleton,
    mesh: SkinnedMesh,
    bindings: Vec<KeypointBinding>,
    rig: ViewRig,
    targets: TargetSet,
    anchors: Vec<(String, Anchor)>,
    matches: Vec<Vec<Match>>,
    unmatched_targets: usize,
    pub shared_pose: Pose,
    pub per_view_root: Vec<ViewRoot>,
    pub root_attenuation: f64,
    pub mask: Option<MaskTerm>,
    pub freeze: Freeze,
    pub execution: Execution,
}

/// Parameters held fixed by the optimizer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Freeze {
    /// Bone indices whose rotation is fixed.
    pub bones: BTreeSet<usize>,
    pub root_translation: bool,
    /// Fixes every per-view root rotation and translation.
    pub view_roots: bool,
}

impl AlignProblem {
    /// Problem at the identity pose with zero per-view roots.
    pub fn new(
        skeleton: Skeleton,
        mesh: SkinnedMesh,
        bindings: Vec<KeypointBinding>,
        rig: ViewRig,
        targets: TargetSet,
        root_attenuation: f64,
    ) -> Result<Self> {
        let anchors = rig::resolve_bindings(&skeleton, &mesh, &bindings)?;
        let index: BTreeMap<&str, usize> = anchors.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
        let mut matches = vec![Vec::new(); rig.len()];
        let mut unmatched_targets = 0;
        for o in targets.observations() {
            if o.view_id >= rig.len() {
                return Err(Error::invalid(format!(
                    "target references view {} but the rig has {} views",
                    o.view_id,
                    rig.len()
                )));
            }
            match index.get(o.keypoint_id.as_str()) {
                Some(&anchor) if o.visible => matches[o.view_id].push(Match {
                    anchor,
                    target: o.position,
                    confidence: o.confidence,
                }),
                Some(_) => {}
                None => unmatched_targets += 1,
            }
        }
        let n = rig.len();
        let problem = AlignProblem {
            shared_pose: Pose::identity(skeleton.len()),
            per_view_root: vec![ViewRoot::default(); n],
            skeleton,
            mesh,
            bindings,
            rig,
            targets,
            anchors,
            matches,
            unmatched_targets,
            root_attenuation,
            mask: None,
            freeze: Freeze::default(),
            execution: Execution::default(),
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.shared_pose.check(&self.skeleton)?;
        if self.per_view_root.len() != self.rig.len() {
            return Err(Error::dim(format!(
                "{} per-view roots for {} views",
                self.per_view_root.len(),
                self.rig.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.root_attenuation) {
            return Err(Error::invalid(format!(
                "root attenuation {} outside [0, 1]",
                self.root_attenuation
            )));
        }
        if let Some(m) = &self.mask {
            m.check(&self.rig)?;
        }
        Ok(())
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn mesh(&self) -> &SkinnedMesh {
        &self.mesh
    }

    pub fn bindings(&self) -> &[KeypointBinding] {
        &self.bindings
    }

    pub fn rig(&self) -> &ViewRig {
        &self.rig
    }

    pub fn targets(&self) -> &TargetSet {
        &self.targets
    }

    pub fn n_views(&self) -> usize {
        self.rig.len()
    }

    /// Target keypoints whose id has no binding.
    pub fn unmatched_targets(&self) -> usize {
        self.unmatched_targets
    }

    /// Visible target observations that match a binding, before rendered visibility.
    pub fn candidate_pairs(&self) -> usize {
        self.matches.iter().map(Vec::len).sum()
    }

    /// Replaces the targets, keeping the rig and parameters.
    pub fn with_targets(&self, targets: TargetSet) -> Result<Self> {
        let mut p = AlignProblem::new(
            self.skeleton.clone(),
            self.mesh.clone(),
            self.bindings.clone(),
            self.rig.clone(),
            targets,
            self.root_attenuation,
        )?;
        p.shared_pose = self.shared_pose.clone();
        p.per_view_root = self.per_view_root.clone();
        p.mask = self.mask.clone();
        p.freeze = self.freeze.clone();
        p.execution = self.execution;
        Ok(p)
    }

    /// Root rotation actually applied in `view`.
    pub fn effective_root_rotation(&self, view: usize) -> Mat3 {
        let r = self.per_view_root[view].rotation * self.root_attenuation;
        so3::exp(&r) * so3::exp(&self.shared_pose.rotations[0])
    }

    fn shared_local(&self) -> Vec<Mat3> {
        self.shared_pose.rotations.iter().map(so3::exp).collect()
    }

    fn view_world(&self, view: usize, shared_local: &[Mat3]) -> Vec<RigidTransform> {
        let mut local = shared_local.to_vec();
        let attenuated = self.per_view_root[view].rotation * self.root_attenuation;
        local[0] = so3::exp(&attenuated) * shared_local[0];
        let translation = self.shared_pose.root_translation + self.per_view_root[view].translation;
        rig::fk_from_local(&self.skeleton, &local, &translation)
    }

    /// Posed world transforms as seen from `view`.
    pub fn world_transforms(&self, view: usize) -> Result<Vec<RigidTransform>> {
        self.validate()?;
        if view >= self.n_views() {
            return Err(Error::invalid(format!("view {view} out of range")));
        }
        Ok(self.view_world(view, &self.shared_local()))
    }

    /// Projected keypoints for `view`: id → (pixel, visible).
    pub fn render_keypoints(&self, view: usize) -> Result<BTreeMap<String, ([f64; 2], bool)>> {
        let world = self.world_transforms(view)?;
        let cam = &self.rig.cameras()[view];
        Ok(self
            .anchors
            .iter()
            .map(|(id, a)| {
                let p = cam.project(&a.position(&self.skeleton, &world));
                (id.clone(), (p.pixel, p.visible))
            })
            .collect())
    }

    /// Keypoint MSE over visible matched pairs.
    pub fn keypoint_loss(&self) -> Result<f64> {
        Ok(self.evaluate_keypoints(false)?.loss)
    }

    /// Gradient of [`keypoint_loss`](Self::keypoint_loss).
    pub fn loss_gradient(&self) -> Result<Gradient> {
        let ev = self.evaluate_keypoints(true)?;
        let g = ev.gradient.expect("gradient requested");
        self.check_gradient(&g)?;
        Ok(g)
    }

    /// Total objective `L_kp + λ·L_mask` and its gradient.
    pub fn objective(&self, with_gradient: bool) -> Result<Evaluation> {
        let mut ev = self.evaluate_keypoints(with_gradient)?;
        if let Some(mask) = self.mask.as_ref().filter(|m| m.weight != 0.0) {
            let (ml, mg) = mask.evaluate(self, with_gradient);
            ev.loss += mask.weight * ml;
            if let (Some(g), Some(mg)) = (ev.gradient.as_mut(), mg) {
                g.axpy(mask.weight, &mg);
            }
        }
        if let Some(g) = &ev.gradient {
            self.check_gradient(g)?;
        }
        Ok(ev)
    }

    fn evaluate_keypoints(&self, with_gradient: bool) -> Result<Evaluation> {
        self.validate()?;
        let shared_local = self.shared_local();
        let n = self.n_views();
        let parts = self.execution.map(n, |view| self.view_terms(view, &shared_local, with_gradient));

        let matched: usize = parts.iter().map(|p| p.count).sum();
        if matched == 0 {
            return Err(Error::NoMatchedPairs);
        }
        let inv_m = 1.0 / matched as f64;
        let loss = parts.iter().map(|p| p.weighted_sq).sum::<f64>() * inv_m;
        let per_view_loss = parts
            .iter()
            .map(|p| if p.count > 0 { p.weighted_sq / p.count as f64 } else { 0.0 })
            .collect();
        let gradient = with_gradient.then(|| {
            let mut g = Gradient::zeros(self.skeleton.len(), n);
            for (view, p) in parts.iter().enumerate() {
                let vg = p.grad.as_ref().expect("gradient requested");
                for (acc, x) in g.rotations.iter_mut().zip(&vg.rotations) {
                    *acc += x;
                }
                g.root_translation += vg.translation;
                g.view_rotations[view] = vg.view_rotation;
                g.view_translations[view] = vg.translation;
            }
            g.scale(inv_m);
            g
        });
        Ok(Evaluation { loss, per_view_loss, matched_pairs: matched, gradient })
    }

    /// Unnormalized loss and gradient contributions of one view.
    fn view_terms(&self, view: usize, shared_local: &[Mat3], with_gradient: bool) -> ViewTerms {
        let world = self.view_world(view, shared_local);
        let cam = &self.rig.cameras()[view];
        let nb = self.skeleton.len();
        let mut terms = ViewTerms::default();
        let mut world_grad = vec![Vec3::zeros(); if with_gradient { nb } else { 0 }];
        let mut trans_grad = Vec3::zeros();

        for m in &self.matches[view] {
            let anchor = &self.anchors[m.anchor].1;
            let x = anchor.position(&self.skeleton, &world);
            let (proj, jac) = cam.project_with_jacobian(&x);
            if !proj.visible {
                continue;
            }
            let r = [proj.pixel[0] - m.target[0], proj.pixel[1] - m.target[1]];
            terms.weighted_sq += m.confidence * (r[0] * r[0] + r[1] * r[1]);
            terms.count += 1;
            if !with_gradient || m.confidence == 0.0 {
                continue;
            }
            let gx = jac.transpose() * nalgebra::Vector2::new(r[0], r[1]) * (2.0 * m.confidence);
            accumulate_point_gradient(&self.skeleton, &world, anchor, &gx, &mut world_grad, &mut trans_grad);
        }

        if with_gradient {
            terms.grad = Some(self.pullback(view, &world, &world_grad, trans_grad));
        }
        terms
    }

    /// Maps world-frame rotation gradients (about each bone's posed head) to
    /// parameter gradients for one view.
    pub(crate) fn pullback(&self, view: usize, world: &[RigidTransform], world_grad: &[Vec3], trans_grad: Vec3) -> ViewGradient {
        let s = self.root_attenuation;
        let rotations = world_grad
            .iter()
            .enumerate()
            .map(|(b, wg)| {
                let jr = so3::right_jacobian(&self.shared_pose.rotations[b]);
                jr.transpose() * (world[b].rotation.transpose() * wg)
            })
            .collect();
        let attenuated = self.per_view_root[view].rotation * s;
        let view_rotation = so3::left_jacobian(&attenuated).transpose() * world_grad[0] * s;
        ViewGradient { rotations, view_rotation, translation: trans_grad }
    }

    fn check_gradient(&self, g: &Gradient) -> Result<()> {
        match g.as_flat().iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFiniteGradient { parameter: self.parameter_name(i) }),
        }
    }

    /// Human-readable name of flat parameter `i` (see [`Gradient::as_flat`]).
    pub fn parameter_name(&self, i: usize) -> String {
        const AXES: [&str; 3] = ["x", "y", "z"];
        let nb = self.skeleton.len();
        if i < 3 * nb {
            let b = &self.skeleton.bones()[i / 3];
            return format!("bone {} ('{}') rotation.{}", b.id, b.name, AXES[i % 3]);
        }
        let i = i - 3 * nb;
        if i < 3 {
            return format!("root translation.{}", AXES[i]);
        }
        let i = i - 3;
        let view = i / 6;
        let kind = if i % 6 < 3 { "rotation" } else { "translation" };
        format!("view {view} root {kind}.{}", AXES[i % 3])
    }

    /// Flat parameter vector in [`Gradient::as_flat`] order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.skeleton.len() + 3 + 6 * self.n_views());
        for r in &self.shared_pose.rotations {
            out.extend(r.iter());
        }
        out.extend(self.shared_pose.root_translation.iter());
        for v in &self.per_view_root {
            out.extend(v.rotation.iter());
            out.extend(v.translation.iter());
        }
        out
    }

    /// `false` for every frozen entry of the flat parameter vector.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(3 * self.skeleton.len() + 3 + 6 * self.n_views());
        for b in 0..self.skeleton.len() {
            out.extend([!self.freeze.bones.contains(&b); 3]);
        }
        out.extend([!self.freeze.root_translation; 3]);
        out.extend(std::iter::repeat_n(!self.freeze.view_roots, 6 * self.n_views()));
        out
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let nb = self.skeleton.len();
        assert_eq!(p.len(), 3 * nb + 3 + 6 * self.n_views(), "parameter length");
        let v3 = |i: usize| Vec3::new(p[i], p[i + 1], p[i + 2]);
        for b in 0..nb {
            self.shared_pose.rotations[b] = v3(3 * b);
        }
        self.shared_pose.root_translation = v3(3 * nb);
        let base = 3 * nb + 3;
        for (k, v) in self.per_view_root.iter_mut().enumerate() {
            v.rotation = v3(base + 6 * k);
            v.translation = v3(base + 6 * k + 3);
        }
    }
}

/// Accumulates `∂L/∂x = gx` of one anchored point into world-frame rotation
/// gradients of every bone that moves it, and into the root translation.
pub(crate) fn accumulate_point_gradient(
    skeleton: &Skeleton,
    world: &[RigidTransform],
    anchor: &Anchor,
    gx: &Vec3,
    world_grad: &mut [Vec3],
    trans_grad: &mut Vec3,
) {
    for t in &anchor.terms {
        let y = rig::delta_apply(&skeleton.bones()[t.bone], &world[t.bone], &t.rest_point);
        let wg = gx * t.weight;
        *trans_grad += wg;
        for a in skeleton.ancestors_inclusive(t.bone) {
            world_grad[a] += (y - world[a].translation).cross(&wg);
        }
    }
}

#[derive(Debug, Default)]
struct ViewTerms {
    weighted_sq: f64,
    count: usize,
    grad: Option<ViewGradient>,
}

#[derive(Debug, Clone)]
pub(crate) struct ViewGradient {
    pub rotations: Vec<Vec3>,
    pub view_rotation: Vec3,
    pub translation: Vec3,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    /// Mean weighted squared residual per view (0 for views with no pairs).
    pub per_view_loss: Vec<f64>,
    pub matched_pairs: usize,
    pub gradient: Option<Gradient>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub rotations: Vec<Vec3>,
    pub root_translation: Vec3,
    pub view_rotations: Vec<Vec3>,
    pub view_translations: Vec<Vec3>,
}

impl Gradient {
    pub fn zeros(bones: usize, views: usize) -> Self {
        Gradient {
            rotations: vec![Vec3::zeros(); bones],
            root_translation: Vec3::zeros(),
            view_rotations: vec![Vec3::zeros(); views],
            view_translations: vec![Vec3::zeros(); views],
        }
    }

    /// Bone rotations, root translation, then per view (rotation, translation).
    pub fn as_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for r in &self.rotations {
            out.extend(r.iter());
        }
        out.extend(self.root_translation.iter());
        for (r, t) in self.view_rotations.iter().zip(&self.view_translations) {
            out.extend(r.iter());
            out.extend(t.iter());
        }
        out
    }

    fn scale(&mut self, k: f64) {
        self.rotations.iter_mut().for_each(|v| *v *= k);
        self.root_translation *= k;
        self.view_rotations.iter_mut().for_each(|v| *v *= k);
        self.view_translations.iter_mut().for_each(|v| *v *= k);
    }

    fn axpy(&mut self, a: f64, other: &Gradient) {
        let pairs = self
            .rotations
            .iter_mut()
            .zip(&other.rotations)
            .chain(self.view_rotations.iter_mut().zip(&other.view_rotations))
            .chain(self.view_translations.iter_mut().zip(&other.view_translations));
        for (x, y) in pairs {
            *x += y * a;
        }
        self.root_translation += other.root_translation * a;
    }

    pub fn is_zero(&self) -> bool {
        self.as_flat().iter().all(|&x| x == 0.0)
    }
}

/// Per-bone geodesic angle error (radians) of an alignment result against a
/// reference pose. The root entry averages the effective per-view root
/// rotation error over all views, since the shared and per-view root
/// rotations are only jointly determined.
pub fn joint_angle_errors(problem: &AlignProblem, truth: &Pose) -> Vec<f64> {
    let nb = problem.skeleton().len();
    let mut errs = Vec::with_capacity(nb);
    let truth_root = so3::exp(&truth.rotations[0]);
    let n = problem.n_views();
    let root_err = (0..n)
        .map(|v| so3::angle_between(&problem.effective_root_rotation(v), &truth_root))
        .sum::<f64>()
        / n as f64;
    errs.push(root_err);
    for b in 1..nb {
        errs.push(so3::angle_between(
            &so3::exp(&problem.shared_pose.rotations[b]),
            &so3::exp(&truth.rotations[b]),
        ));
    }
    errs
}
