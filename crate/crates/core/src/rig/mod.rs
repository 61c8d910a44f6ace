//! Skeletal rig: bone hierarchy, forward kinematics, linear blend skinning
//! and the keypoint bindings that anchor 2D keypoints to the mesh.
//!
//! Every bone's rest frame has identity orientation and sits at the bone's
//! rest head. A bone's local rotation pivots about its head, so
//! `world(b) = world(parent(b)) ∘ translate(head_b − head_parent) ∘ rot(ω_b)`.

pub mod obj;

pub use obj::{parse_obj, write_obj};

use crate::error::{Error, Result};
use crate::so3::{self, Mat3, Vec3};
use std::collections::{BTreeMap, BTreeSet, HashSet};

#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    pub id: usize,
    pub parent: Option<usize>,
    pub rest_head: Vec3,
    pub rest_tail: Vec3,
    pub name: String,
}

impl Bone {
    pub fn rest_length(&self) -> f64 {
        (self.rest_tail - self.rest_head).norm()
    }
}

/// Topologically sorted bone list: `parent < id`, single root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    bones: Vec<Bone>,
}

impl Skeleton {
    /// Builds a skeleton from bones already in topological order with dense ids.
    pub fn new(bones: Vec<Bone>) -> Result<Self> {
        if bones.is_empty() {
            return Err(Error::invalid("skeleton has no bones"));
        }
        let mut roots = 0;
        for (i, b) in bones.iter().enumerate() {
            if b.id != i {
                return Err(Error::invalid(format!("bone {} stored at index {i}", b.id)));
            }
            match b.parent {
                None => roots += 1,
                Some(p) if p >= i => {
                    return Err(Error::invalid(format!(
                        "bone {i} ('{}') has parent {p} not preceding it",
                        b.name
                    )))
                }
                Some(_) => {}
            }
            let finite = b.rest_head.iter().chain(b.rest_tail.iter()).all(|x| x.is_finite());
            if !finite || !(b.rest_length() > 0.0) {
                return Err(Error::invalid(format!(
                    "bone {i} ('{}') has degenerate or non-finite rest geometry",
                    b.name
                )));
            }
        }
        if roots != 1 {
            return Err(Error::invalid(format!("skeleton must have exactly one root, found {roots}")));
        }
        Ok(Skeleton { bones })
    }

    /// Sorts arbitrarily ordered bones so parents precede children.
    ///
    /// Returns the skeleton and a map from the input ids to the new indices.
    pub fn from_unsorted(bones: Vec<Bone>) -> Result<(Self, BTreeMap<usize, usize>)> {
        let mut by_id = BTreeMap::new();
        for b in &bones {
            if by_id.insert(b.id, b).is_some() {
                return Err(Error::invalid(format!("duplicate bone id {}", b.id)));
            }
        }
        for b in &bones {
            if let Some(p) = b.parent {
                if !by_id.contains_key(&p) {
                    return Err(Error::invalid(format!("bone {} references unknown parent {p}", b.id)));
                }
            }
        }
        // Smallest ready id first, so already sorted input keeps its order.
        let mut ready: BTreeSet<usize> = by_id.values().filter(|b| b.parent.is_none()).map(|b| b.id).collect();
        let mut order = Vec::with_capacity(bones.len());
        while let Some(cur) = ready.pop_first() {
            order.push(cur);
            ready.extend(by_id.values().filter(|b| b.parent == Some(cur)).map(|b| b.id));
        }
        if order.len() != bones.len() {
            return Err(Error::invalid("bone hierarchy contains a cycle"));
        }
        let remap: BTreeMap<usize, usize> = order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let sorted = order
            .iter()
            .enumerate()
            .map(|(new, old)| {
                let b = by_id[old];
                Bone {
                    id: new,
                    parent: b.parent.map(|p| remap[&p]),
                    ..b.clone()
                }
            })
            .collect();
        Ok((Skeleton::new(sorted)?, remap))
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    pub fn bone_index(&self, name: &str) -> Option<usize> {
        self.bones.iter().position(|b| b.name == name)
    }

    /// `b` and all its ancestors, starting at `b`.
    pub fn ancestors_inclusive(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(b), move |&i| self.bones[i].parent)
    }
}

/// Per-bone axis-angle rotations plus a root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotations: Vec<Vec3>,
    pub root_translation: Vec3,
}

impl Pose {
    pub fn identity(bone_count: usize) -> Self {
        Pose {
            rotations: vec![Vec3::zeros(); bone_count],
            root_translation: Vec3::zeros(),
        }
    }

    pub fn canonicalized(&self) -> Self {
        Pose {
            rotations: self.rotations.iter().map(so3::canonicalize).collect(),
            root_translation: self.root_translation,
        }
    }

    pub(crate) fn check(&self, skeleton: &Skeleton) -> Result<()> {
        if self.rotations.len() != skeleton.len() {
            return Err(Error::dim(format!(
                "pose has {} rotations, skeleton has {} bones",
                self.rotations.len(),
                skeleton.len()
            )));
        }
        for (i, r) in self.rotations.iter().enumerate() {
            if !r.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid(format!("non-finite rotation on bone {i}")));
            }
        }
        if !self.root_translation.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("non-finite root translation"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Per-bone world transforms for a pose.
pub fn forward_kinematics(skeleton: &Skeleton, pose: &Pose) -> Result<Vec<RigidTransform>> {
    pose.check(skeleton)?;
    let local: Vec<Mat3> = pose.rotations.iter().map(so3::exp).collect();
    Ok(fk_from_local(skeleton, &local, &pose.root_translation))
}

/// FK from precomputed local rotation matrices.
pub(crate) fn fk_from_local(skeleton: &Skeleton, local: &[Mat3], root_translation: &Vec3) -> Vec<RigidTransform> {
    let mut world: Vec<RigidTransform> = Vec::with_capacity(skeleton.len());
    for (b, bone) in skeleton.bones.iter().enumerate() {
        let t = match bone.parent {
            None => RigidTransform {
                rotation: local[b],
                translation: bone.rest_head + root_translation,
            },
            Some(p) => {
                let parent = &world[p];
                RigidTransform {
                    rotation: parent.rotation * local[b],
                    translation: parent.apply(&(bone.rest_head - skeleton.bones[p].rest_head)),
                }
            }
        };
        world.push(t);
    }
    world
}

/// Rest-to-posed map of bone `b`: `x ↦ G_b (x − head_b) + p_b`.
pub(crate) fn delta_apply(bone: &Bone, world: &RigidTransform, x: &Vec3) -> Vec3 {
    world.rotation * (x - bone.rest_head) + world.translation
}

pub const MAX_INFLUENCES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub weights: Vec<Vec<(usize, f64)>>,
}

impl SkinnedMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, weights: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if weights.len() != vertices.len() {
            return Err(Error::dim(format!(
                "{} weight lists for {} vertices",
                weights.len(),
                vertices.len()
            )));
        }
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::invalid(format!("face {i} references a vertex out of range")));
            }
        }
        for (i, w) in weights.iter().enumerate() {
            if w.is_empty() || w.len() > MAX_INFLUENCES {
                return Err(Error::invalid(format!("vertex {i} has {} influences (1..=4 allowed)", w.len())));
            }
            if w.iter().any(|&(_, x)| !(x >= 0.0)) {
                return Err(Error::invalid(format!("vertex {i} has a negative weight")));
            }
            let sum: f64 = w.iter().map(|&(_, x)| x).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("vertex {i} weights sum to {sum}")));
            }
        }
        Ok(SkinnedMesh { vertices, faces, weights })
    }

    /// Mesh with no geometry; only bone-attached keypoints can bind to it.
    pub fn empty() -> Self {
        SkinnedMesh {
            vertices: Vec::new(),
            faces: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub(crate) fn check_bones(&self, skeleton: &Skeleton) -> Result<()> {
        for (i, w) in self.weights.iter().enumerate() {
            if let Some(&(b, _)) = w.iter().find(|&&(b, _)| b >= skeleton.len()) {
                return Err(Error::invalid(format!("vertex {i} weight references nonexistent bone {b}")));
            }
        }
        Ok(())
    }
}

/// Linear blend skinning: `v' = Σ_b w_b · (T_b ∘ T_b,rest⁻¹)(v)`.
pub fn skin(skeleton: &Skeleton, mesh: &SkinnedMesh, transforms: &[RigidTransform]) -> Result<Vec<Vec3>> {
    if transforms.len() != skeleton.len() {
        return Err(Error::dim(format!(
            "{} transforms for {} bones",
            transforms.len(),
            skeleton.len()
        )));
    }
    mesh.check_bones(skeleton)?;
    Ok(mesh
        .vertices
        .iter()
        .zip(&mesh.weights)
        .map(|(v, w)| {
            w.iter().fold(Vec3::zeros(), |acc, &(b, wt)| {
                acc + delta_apply(&skeleton.bones[b], &transforms[b], v) * wt
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attachment {
    /// Point at `fraction` of the way from head to tail.
    Bone { bone: usize, fraction: f64 },
    /// Barycentric point on a mesh face, following the skinned surface.
    Face { face: usize, barycentric: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointBinding {
    pub keypoint_id: String,
    pub attachment: Attachment,
}

/// One weighted rest-space point carried rigidly by a bone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AnchorTerm {
    pub bone: usize,
    pub weight: f64,
    pub rest_point: Vec3,
}

/// A keypoint expressed as a blend of bone-rigid points; weights sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Anchor {
    pub terms: Vec<AnchorTerm>,
}

impl Anchor {
    pub fn position(&self, skeleton: &Skeleton, world: &[RigidTransform]) -> Vec3 {
        self.terms.iter().fold(Vec3::zeros(), |acc, t| {
            acc + delta_apply(&skeleton.bones[t.bone], &world[t.bone], &t.rest_point) * t.weight
        })
    }
}

/// Resolves bindings to anchors, sorted by keypoint id.
pub(crate) fn resolve_bindings(
    skeleton: &Skeleton,
    mesh: &SkinnedMesh,
    bindings: &[KeypointBinding],
) -> Result<Vec<(String, Anchor)>> {
    mesh.check_bones(skeleton)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(bindings.len());
    for kb in bindings {
        if !seen.insert(kb.keypoint_id.as_str()) {
            return Err(Error::invalid(format!("duplicate keypoint id '{}'", kb.keypoint_id)));
        }
        let terms = match kb.attachment {
            Attachment::Bone { bone, fraction } => {
                if bone >= skeleton.len() {
                    return Err(Error::invalid(format!(
                        "keypoint '{}' references nonexistent bone {bone}",
                        kb.keypoint_id
                    )));
                }
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::invalid(format!(
                        "keypoint '{}' fraction {fraction} outside [0, 1]",
                        kb.keypoint_id
                    )));
                }
                let b = &skeleton.bones[bone];
                vec![AnchorTerm {
                    bone,
                    weight: 1.0,
                    rest_point: b.rest_head + (b.rest_tail - b.rest_head) * fraction,
                }]
            }
            Attachment::Face { face, barycentric } => {
                let f = mesh.faces.get(face).ok_or_else(|| {
                    Error::invalid(format!("keypoint '{}' references nonexistent face {face}", kb.keypoint_id))
                })?;
                let sum: f64 = barycentric.iter().sum();
                if barycentric.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "keypoint '{}' has invalid barycentric coordinates",
                        kb.keypoint_id
                    )));
                }
                f.iter()
                    .zip(barycentric)
                    .filter(|&(_, l)| l > 0.0)
                    .flat_map(|(&v, l)| {
                        mesh.weights[v].iter().map(move |&(bone, w)| AnchorTerm {
                            bone,
                            weight: l * w,
                            rest_point: mesh.vertices[v],
                        })
                    })
                    .collect()
            }
        };
        out.push((kb.keypoint_id.clone(), Anchor { terms }));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Posed 3D position of every bound keypoint.
pub fn evaluate_keypoints_3d(
    skeleton: &Skeleton,
    pose: &Pose,
    mesh: &SkinnedMesh,
    bindings: &[KeypointBinding],
) -> Result<BTreeMap<String, Vec3>> {
    let world = forward_kinematics(skeleton, pose)?;
    let anchors = resolve_bindings(skeleton, mesh, bindings)?;
    Ok(anchors
        .into_iter()
        .map(|(id, a)| {
            let p = a.position(skeleton, &world);
            (id, p)
        })
        .collect())
}
