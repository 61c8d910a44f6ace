use super::finite3;
use crate::align::ViewRoot;
use crate::error::{Error, Result};
use crate::rig::{Pose, Skeleton};
use crate::so3::Vec3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoneRotationDoc {
    pub name: String,
    /// Axis-angle, radians.
    pub rotation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRootDoc {
    pub view_id: usize,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

/// Pose keyed by bone name. Bones left out stay at rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDoc {
    pub bones: Vec<BoneRotationDoc>,
    #[serde(default)]
    pub root_translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_view_root: Vec<ViewRootDoc>,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl PoseDoc {
    pub fn from_pose(skeleton: &Skeleton, pose: &Pose, per_view_root: &[ViewRoot]) -> Self {
        PoseDoc {
            bones: skeleton
                .bones()
                .iter()
                .zip(&pose.rotations)
                .map(|(b, r)| BoneRotationDoc { name: b.name.clone(), rotation: arr(r) })
                .collect(),
            root_translation: arr(&pose.root_translation),
            per_view_root: per_view_root
                .iter()
                .enumerate()
                .map(|(i, v)| ViewRootDoc { view_id: i, rotation: arr(&v.rotation), translation: arr(&v.translation) })
                .collect(),
        }
    }

    /// The shared pose and, when present, the per-view roots ordered by view.
    pub fn build(&self, skeleton: &Skeleton) -> Result<(Pose, Vec<ViewRoot>)> {
        let mut pose = Pose::identity(skeleton.len());
        let mut seen = vec![false; skeleton.len()];
        for (i, b) in self.bones.iter().enumerate() {
            let idx = skeleton
                .bone_index(&b.name)
                .ok_or_else(|| Error::invalid(format!("bones[{i}].name: unknown bone '{}'", b.name)))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::invalid(format!("bones[{i}].name: bone '{}' listed twice", b.name)));
            }
            pose.rotations[idx] = Vec3::from(finite3(b.rotation, &format!("bones[{i}].rotation"))?);
        }
        pose.root_translation = Vec3::from(finite3(self.root_translation, "root_translation")?);

        let mut roots: Vec<&ViewRootDoc> = self.per_view_root.iter().collect();
        roots.sort_by_key(|r| r.view_id);
        let per_view_root = roots
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.view_id != i {
                    return Err(Error::invalid(format!("per_view_root: view ids must be dense 0..N-1 (found {})", r.view_id)));
                }
                Ok(ViewRoot {
                    rotation: Vec3::from(finite3(r.rotation, &format!("per_view_root[{i}].rotation"))?),
                    translation: Vec3::from(finite3(r.translation, &format!("per_view_root[{i}].translation"))?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((pose, per_view_root))
    }
}
