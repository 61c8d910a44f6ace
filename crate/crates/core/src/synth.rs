//! Synthetic rigs, poses and targets for controlled experiments where the
//! ground-truth articulation is known.

use crate::align::{AlignProblem, KeypointObservation, OptimizerConfig, TargetSet};
use crate::error::{Error, Result};
use crate::mvcam::{make_ring_rig, Intrinsics, ViewRig};
use crate::rig::{Attachment, Bone, KeypointBinding, Pose, Skeleton, SkinnedMesh};
use crate::so3::Vec3;
use crate::io::{self, CamerasDoc, PoseDoc, RigDoc};
use crate::pipeline::RunConfig;
use crate::rig::write_obj;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use rand_distr::{Distribution, Normal, StandardNormal};

#[derive(Debug, Clone)]
pub struct SyntheticRig {
    pub skeleton: Skeleton,
    pub mesh: SkinnedMesh,
    pub bindings: Vec<KeypointBinding>,
}

/// The camera ring used by the synthetic protocols: 8 views at 512×512.
pub fn default_ring() -> ViewRig {
    make_ring_rig(8, 0.35, 4.5, Intrinsics::default()).expect("valid default ring")
}

fn unit(v: Vec3) -> Vec3 {
    v.normalize()
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, v: Vec3, amount: f64) -> Vec3 {
    let v = v * rng.random_range(0.85..1.15);
    let n: Vec3 = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    unit(v + n * amount) * v.norm()
}

struct Builder {
    bones: Vec<Bone>,
}

impl Builder {
    fn push(&mut self, name: String, parent: Option<usize>, head: Vec3, dir: Vec3) -> usize {
        let id = self.bones.len();
        self.bones.push(Bone { id, parent, rest_head: head, rest_tail: head + dir, name });
        id
    }

    fn chain(&mut self, prefix: &str, parent: usize, head: Vec3, dirs: &[Vec3]) -> usize {
        let mut parent = parent;
        let mut head = head;
        for (i, d) in dirs.iter().enumerate() {
            parent = self.push(format!("{prefix}_{}", i + 1), Some(parent), head, *d);
            head += d;
        }
        parent
    }
}

/// Quadruped-topology rig with `n_bones` bones (8..=20): pelvis root, spine,
/// neck, tail and four legs, a box of mesh around every bone, and four
/// keypoints per bone (the bone tip plus three surface points).
pub fn quadruped<R: Rng + ?Sized>(rng: &mut R, n_bones: usize) -> Result<SyntheticRig> {
    if !(8..=20).contains(&n_bones) {
        return Err(Error::invalid(format!("quadruped needs 8..=20 bones, got {n_bones}")));
    }
    let leg_segments = if n_bones >= 14 {
        3
    } else if n_bones >= 10 {
        2
    } else {
        1
    };
    let rest = n_bones - 1 - 4 * leg_segments;
    let mut counts = [0usize; 3]; // spine, neck, tail
    for i in 0..rest {
        counts[i % 3] += 1;
    }

    let mut b = Builder { bones: Vec::new() };
    let root_dir = jitter(rng, Vec3::new(0.4, 0.0, 0.0), 0.05);
    let hip = Vec3::new(-0.6, 1.0, 0.0);
    let root = b.push("pelvis".into(), None, hip, root_dir);

    let spine_dirs: Vec<Vec3> = (0..counts[0])
        .map(|_| jitter(rng, Vec3::new(0.35, 0.03, 0.0), 0.05))
        .collect();
    let shoulder_bone = if spine_dirs.is_empty() {
        root
    } else {
        b.chain("spine", root, hip + root_dir, &spine_dirs)
    };
    let shoulder = b.bones[shoulder_bone].rest_tail;

    let neck_dirs: Vec<Vec3> = (0..counts[1])
        .map(|i| {
            let base = if i == 0 { Vec3::new(0.2, 0.25, 0.0) } else { Vec3::new(0.28, -0.05, 0.0) };
            jitter(rng, base, 0.08)
        })
        .collect();
    if !neck_dirs.is_empty() {
        b.chain("neck", shoulder_bone, shoulder, &neck_dirs);
    }
    let tail_dirs: Vec<Vec3> = (0..counts[2])
        .map(|_| jitter(rng, Vec3::new(-0.28, 0.1, 0.0), 0.1))
        .collect();
    if !tail_dirs.is_empty() {
        b.chain("tail", root, hip, &tail_dirs);
    }

    let leg_len = 0.9 / leg_segments as f64;
    for (tag, parent, anchor, side) in [
        ("leg_hl", root, hip, 1.0),
        ("leg_hr", root, hip, -1.0),
        ("leg_fl", shoulder_bone, shoulder, 1.0),
        ("leg_fr", shoulder_bone, shoulder, -1.0),
    ] {
        let dirs: Vec<Vec3> = (0..leg_segments)
            .map(|i| {
                let knee = if i % 2 == 0 { 0.12 } else { -0.12 };
                jitter(rng, Vec3::new(knee, -1.0, 0.04 * side) * leg_len, 0.05)
            })
            .collect();
        let head = anchor + Vec3::new(0.0, -0.06, 0.2 * side);
        b.chain(tag, parent, head, &dirs);
    }

    // Center the rest bounding box on the origin.
    let (lo, hi) = b.bones.iter().flat_map(|x| [x.rest_head, x.rest_tail]).fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(&p), hi.sup(&p)),
    );
    let center = (lo + hi) * 0.5;
    for bone in &mut b.bones {
        bone.rest_head -= center;
        bone.rest_tail -= center;
    }

    let skeleton = Skeleton::new(b.bones)?;
    let (mesh, bindings) = box_mesh_and_bindings(rng, &skeleton)?;
    Ok(SyntheticRig { skeleton, mesh, bindings })
}

/// Straight `n`-bone chain along +x with unit bones and one tip keypoint per bone.
pub fn chain_rig(n: usize) -> Result<SyntheticRig> {
    let bones = (0..n)
        .map(|i| Bone {
            id: i,
            parent: i.checked_sub(1),
            rest_head: Vec3::new(i as f64 - n as f64 / 2.0, 0.0, 0.0),
            rest_tail: Vec3::new(i as f64 + 1.0 - n as f64 / 2.0, 0.0, 0.0),
            name: format!("b{i}"),
        })
        .collect();
    let skeleton = Skeleton::new(bones)?;
    let bindings = (0..n)
        .map(|i| KeypointBinding {
            keypoint_id: format!("b{i}_tip"),
            attachment: Attachment::Bone { bone: i, fraction: 1.0 },
        })
        .collect();
    Ok(SyntheticRig { skeleton, mesh: SkinnedMesh::empty(), bindings })
}

const BOX_FACES: [[usize; 3]; 12] = [
    [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
    [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
    [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
];

/// A box around every bone, rigidly weighted, with tip and surface keypoints.
pub fn box_mesh_and_bindings<R: Rng + ?Sized>(
    rng: &mut R,
    skeleton: &Skeleton,
) -> Result<(SkinnedMesh, Vec<KeypointBinding>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    let mut bindings = Vec::new();
    for bone in skeleton.bones() {
        let axis = bone.rest_tail - bone.rest_head;
        let len = axis.norm();
        let d = axis / len;
        let helper = if d.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
        let e1 = d.cross(&helper).normalize();
        let e2 = d.cross(&e1);
        let hw = (0.5 * len).max(0.08);
        let base = vertices.len();
        for end in [bone.rest_head, bone.rest_tail] {
            for (s1, s2) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                vertices.push(end + e1 * (s1 * hw) + e2 * (s2 * hw));
                weights.push(vec![(bone.id, 1.0)]);
            }
        }
        let face_base = faces.len();
        faces.extend(BOX_FACES.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));

        bindings.push(KeypointBinding {
            keypoint_id: format!("{}_tip", bone.name),
            attachment: Attachment::Bone { bone: bone.id, fraction: 1.0 },
        });
        for k in 0..3 {
            // side faces only (indices 4..12), so the point is off the bone axis
            let face = face_base + rng.random_range(4..12);
            let a: f64 = rng.random_range(0.1..0.8);
            let b: f64 = rng.random_range(0.1..(0.9 - a).max(0.1 + 1e-9));
            let c = 1.0 - a - b;
            bindings.push(KeypointBinding {
                keypoint_id: format!("{}_s{k}", bone.name),
                attachment: Attachment::Face { face, barycentric: [a, b, c] },
            });
        }
    }
    Ok((SkinnedMesh::new(vertices, faces, weights)?, bindings))
}

/// Random pose: non-root bones rotate by up to `max_angle` about a random
/// axis; the root by up to `root_angle`, translated by up to `max_translation`
/// per axis.
pub fn random_pose<R: Rng + ?Sized>(
    rng: &mut R,
    bone_count: usize,
    max_angle: f64,
    root_angle: f64,
    max_translation: f64,
) -> Pose {
    let mut axis_angle = |limit: f64| {
        let axis: Vec3 = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        axis * rng.random_range(0.0..=limit)
    };
    let rotations = (0..bone_count)
        .map(|b| axis_angle(if b == 0 { root_angle } else { max_angle }))
        .collect();
    let root_translation = if max_translation > 0.0 {
        Vec3::from_fn(|_, _| rng.random_range(-max_translation..=max_translation))
    } else {
        Vec3::zeros()
    };
    Pose { rotations, root_translation }
}

/// Renders targets of `problem`'s rig at `pose` (zero per-view roots), adds
/// Gaussian pixel noise and drops each keypoint with probability `drop_rate`.
pub fn render_targets<R: Rng + ?Sized>(
    rng: &mut R,
    problem: &AlignProblem,
    pose: &Pose,
    noise_sigma: f64,
    drop_rate: f64,
) -> Result<TargetSet> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::invalid(format!("drop rate {drop_rate} outside [0, 1)")));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::invalid("noise sigma must be finite and ≥ 0"));
    }
    let mut at_pose = problem.clone();
    at_pose.shared_pose = pose.clone();
    at_pose.per_view_root.iter_mut().for_each(|v| *v = Default::default());
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut obs = Vec::new();
    for view in 0..at_pose.n_views() {
        for (id, (pixel, visible)) in at_pose.render_keypoints(view)? {
            let mut position = pixel;
            if noise_sigma > 0.0 {
                position[0] += normal.sample(rng);
                position[1] += normal.sample(rng);
            }
            let dropped = drop_rate > 0.0 && rng.random::<f64>() < drop_rate;
            let visible = visible && !dropped;
            obs.push(KeypointObservation {
                view_id: view,
                keypoint_id: id,
                position: if visible { position } else { [0.0, 0.0] },
                visible,
                confidence: 1.0,
            });
        }
    }
    TargetSet::new(obs)
}

/// Optimizer settings used for synthetic recovery runs.
pub fn recovery_optimizer() -> OptimizerConfig {
    OptimizerConfig { learning_rate: 0.02, max_iterations: 2000, tolerance: 1e-9, ..Default::default() }
}

/// Files written by [`write_scene`].
#[derive(Debug, Clone)]
pub struct SceneFiles {
    pub config: PathBuf,
    pub pose: PathBuf,
}

/// Writes a random quadruped scene into `dir`: `rig.json`, `mesh.obj`,
/// `cameras.json`, a ground-truth `pose.json` and a `config.json` whose
/// targets entry points at `targets.json`.
pub fn write_scene(dir: &Path, seed: u64, n_bones: usize) -> Result<SceneFiles> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = quadruped(&mut rng, n_bones)?;
    let pose = random_pose(&mut rng, n_bones, 0.5, 0.3, 0.1);
    let cameras = default_ring();
    let config = RunConfig {
        rig: Some("rig.json".into()),
        mesh: Some("mesh.obj".into()),
        cameras: Some("cameras.json".into()),
        targets: Some("targets.json".into()),
        optimizer: recovery_optimizer(),
        seed,
        ..Default::default()
    };
    let files = [
        ("rig.json", io::to_json(&RigDoc::from_rig(&r.skeleton, &r.mesh, &r.bindings))),
        ("mesh.obj", write_obj(&r.mesh.vertices, &r.mesh.faces)),
        ("cameras.json", io::to_json(&CamerasDoc::from_rig(&cameras))),
        ("pose.json", io::to_json(&PoseDoc::from_pose(&r.skeleton, &pose, &[]))),
        ("config.json", io::to_json(&config)),
    ];
    std::fs::create_dir_all(dir)
        .map_err(|source| Error::Io { context: format!("cannot create '{}'", dir.display()), source })?;
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text)
            .map_err(|source| Error::Io { context: format!("cannot write '{}'", path.display()), source })?;
    }
    Ok(SceneFiles { config: dir.join("config.json"), pose: dir.join("pose.json") })
}
