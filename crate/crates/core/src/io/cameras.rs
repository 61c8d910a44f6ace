use crate::error::Result;
use crate::mvcam::{Camera, Intrinsics, ViewRig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDoc {
    pub view_id: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub focal: f64,
    pub principal: [f64; 2],
    pub image_size: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasDoc {
    pub cameras: Vec<CameraDoc>,
}

impl CamerasDoc {
    pub fn from_rig(rig: &ViewRig) -> Self {
        let cameras = rig
            .cameras()
            .iter()
            .map(|c| CameraDoc {
                view_id: c.view_id,
                azimuth: c.azimuth,
                elevation: c.elevation,
                radius: c.radius,
                focal: c.intrinsics.focal,
                principal: c.intrinsics.principal,
                image_size: [c.intrinsics.image_size.0, c.intrinsics.image_size.1],
            })
            .collect();
        CamerasDoc { cameras }
    }

    pub fn build(&self) -> Result<ViewRig> {
        let mut docs: Vec<&CameraDoc> = self.cameras.iter().collect();
        docs.sort_by_key(|c| c.view_id);
        let cameras = docs
            .into_iter()
            .map(|c| Camera {
                view_id: c.view_id,
                azimuth: c.azimuth,
                elevation: c.elevation,
                radius: c.radius,
                intrinsics: Intrinsics {
                    focal: c.focal,
                    principal: c.principal,
                    image_size: (c.image_size[0], c.image_size[1]),
                },
            })
            .collect();
        ViewRig::new(cameras)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{parse_json, to_json};
    use crate::mvcam::make_ring_rig;

    #[test]
    fn round_trip_ring() {
        let rig = make_ring_rig(8, 0.35, 4.5, Intrinsics::default()).unwrap();
        let doc = CamerasDoc::from_rig(&rig);
        let back: CamerasDoc = parse_json(&to_json(&doc), "cameras").unwrap();
        assert_eq!(back.build().unwrap(), rig);
    }

    #[test]
    fn rejects_sparse_views() {
        let mut doc = CamerasDoc::from_rig(&make_ring_rig(3, 0.0, 4.0, Intrinsics::default()).unwrap());
        doc.cameras[2].view_id = 5;
        assert!(doc.build().is_err());
        let mut doc = CamerasDoc::from_rig(&make_ring_rig(1, 0.0, 4.0, Intrinsics::default()).unwrap());
        doc.cameras[0].focal = -1.0;
        assert!(doc.build().is_err());
    }
}
