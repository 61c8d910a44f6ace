use super::finite3;
use crate::error::{Error, Result};
use crate::rig::{Attachment, Bone, KeypointBinding, Skeleton, SkinnedMesh};
use crate::so3::Vec3;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoneDoc {
    pub id: usize,
    pub name: String,
    pub parent: Option<usize>,
    pub rest_head: [f64; 3],
    pub rest_tail: [f64; 3],
}

/// Either `bone` + `fraction` or `face` + `barycentric`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingDoc {
    pub keypoint_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bone: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barycentric: Option<[f64; 3]>,
}

/// Skeleton, keypoint bindings and per-vertex skinning weights. Vertex
/// positions and faces live in a separate OBJ file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigDoc {
    pub bones: Vec<BoneDoc>,
    #[serde(default)]
    pub bindings: Vec<BindingDoc>,
    /// One `[[bone_id, weight], ...]` list per mesh vertex.
    #[serde(default)]
    pub weights: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
pub struct LoadedRig {
    pub skeleton: Skeleton,
    pub mesh: SkinnedMesh,
    pub bindings: Vec<KeypointBinding>,
}

impl RigDoc {
    pub fn from_rig(skeleton: &Skeleton, mesh: &SkinnedMesh, bindings: &[KeypointBinding]) -> Self {
        let arr = |v: &Vec3| [v.x, v.y, v.z];
        let bones = skeleton
            .bones()
            .iter()
            .map(|b| BoneDoc {
                id: b.id,
                name: b.name.clone(),
                parent: b.parent,
                rest_head: arr(&b.rest_head),
                rest_tail: arr(&b.rest_tail),
            })
            .collect();
        let bindings = bindings
            .iter()
            .map(|b| {
                let mut doc = BindingDoc {
                    keypoint_id: b.keypoint_id.clone(),
                    bone: None,
                    fraction: None,
                    face: None,
                    barycentric: None,
                };
                match b.attachment {
                    Attachment::Bone { bone, fraction } => {
                        doc.bone = Some(bone);
                        doc.fraction = Some(fraction);
                    }
                    Attachment::Face { face, barycentric } => {
                        doc.face = Some(face);
                        doc.barycentric = Some(barycentric);
                    }
                }
                doc
            })
            .collect();
        RigDoc { bones, bindings, weights: mesh.weights.clone() }
    }

    /// Sorts bones topologically and remaps every bone reference.
    ///
    /// `geometry` supplies vertices and faces for the weights; without it
    /// the weights list must be empty.
    pub fn build(&self, geometry: Option<(Vec<Vec3>, Vec<[usize; 3]>)>) -> Result<LoadedRig> {
        let bones = self
            .bones
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(Bone {
                    id: b.id,
                    parent: b.parent,
                    rest_head: Vec3::from(finite3(b.rest_head, &format!("bones[{i}].rest_head"))?),
                    rest_tail: Vec3::from(finite3(b.rest_tail, &format!("bones[{i}].rest_tail"))?),
                    name: b.name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (skeleton, remap) = Skeleton::from_unsorted(bones)?;
        let bone_ref = |id: usize, field: String| -> Result<usize> {
            remap.get(&id).copied().ok_or_else(|| Error::invalid(format!("{field}: unknown bone id {id}")))
        };

        let bindings = self
            .bindings
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let attachment = match (b.bone, b.fraction, b.face, b.barycentric) {
                    (Some(bone), Some(fraction), None, None) => {
                        Attachment::Bone { bone: bone_ref(bone, format!("bindings[{i}].bone"))?, fraction }
                    }
                    (None, None, Some(face), Some(barycentric)) => Attachment::Face { face, barycentric },
                    _ => {
                        return Err(Error::invalid(format!(
                            "bindings[{i}]: needs either `bone` and `fraction` or `face` and `barycentric`"
                        )))
                    }
                };
                Ok(KeypointBinding { keypoint_id: b.keypoint_id.clone(), attachment })
            })
            .collect::<Result<Vec<_>>>()?;

        let mesh = match geometry {
            Some((vertices, faces)) => {
                let weights = self
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(v, list)| {
                        list.iter()
                            .map(|&(b, w)| Ok((bone_ref(b, format!("weights[{v}]"))?, w)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mesh = SkinnedMesh::new(vertices, faces, weights)?;
                mesh.check_bones(&skeleton)?;
                mesh
            }
            None if self.weights.is_empty() => SkinnedMesh::empty(),
            None => return Err(Error::invalid("weights: skinning weights given without mesh geometry")),
        };
        Ok(LoadedRig { skeleton, mesh, bindings })
    }
}
