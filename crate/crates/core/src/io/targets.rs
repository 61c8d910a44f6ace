use crate::align::{KeypointObservation, TargetSet};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Pixel coordinates may be `null` for invisible keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetKeypointDoc {
    pub id: String,
    pub u: Option<f64>,
    pub v: Option<f64>,
    pub visible: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetViewDoc {
    pub view_id: usize,
    pub keypoints: Vec<TargetKeypointDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsDoc {
    pub views: Vec<TargetViewDoc>,
    /// Free-form record of how the targets were produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl TargetsDoc {
    pub fn from_targets(targets: &TargetSet, provenance: Option<serde_json::Value>) -> Self {
        let mut views: Vec<TargetViewDoc> = Vec::new();
        for o in targets.observations() {
            if views.last().is_none_or(|v| v.view_id != o.view_id) {
                views.push(TargetViewDoc { view_id: o.view_id, keypoints: Vec::new() });
            }
            let (u, v) = if o.visible { (Some(o.position[0]), Some(o.position[1])) } else { (None, None) };
            views.last_mut().expect("pushed above").keypoints.push(TargetKeypointDoc {
                id: o.keypoint_id.clone(),
                u,
                v,
                visible: o.visible,
                confidence: o.confidence,
            });
        }
        TargetsDoc { views, provenance }
    }

    pub fn build(&self) -> Result<TargetSet> {
        let mut obs = Vec::new();
        for (vi, view) in self.views.iter().enumerate() {
            for (ki, k) in view.keypoints.iter().enumerate() {
                let position = match (k.u, k.v) {
                    (Some(u), Some(v)) => [u, v],
                    _ if k.visible => {
                        return Err(Error::invalid(format!(
                            "views[{vi}].keypoints[{ki}]: visible keypoint '{}' needs both `u` and `v`",
                            k.id
                        )))
                    }
                    _ => [0.0, 0.0],
                };
                obs.push(KeypointObservation {
                    view_id: view.view_id,
                    keypoint_id: k.id.clone(),
                    position,
                    visible: k.visible,
                    confidence: k.confidence,
                });
            }
        }
        TargetSet::new(obs)
    }
}
