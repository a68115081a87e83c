//! Software z-buffer rasterizer and depth back-projection.
//!
//! Cuboid faces render as flat-shaded triangles with perspective-correct
//! depth (1/z interpolated in screen space), so depth values of planar
//! faces are analytically exact up to floating-point error.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::{camera_pose, CameraPose, CameraRing, Category, Cuboid, Scene, SynthError};
use crate::geom::{JointParams, PointCloud, RigidTransform};

const NEAR_PLANE: f64 = 0.05;
const LIGHT_DIR: [f64; 3] = [0.42, 0.26, 0.87];
const AMBIENT: f64 = 0.35;
const ROI_DILATION: i64 = 2;

/// Rendering knobs; `n_points` is the fixed cloud size after subsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub resolution: usize,
    pub n_points: usize,
    pub ring: CameraRing,
    /// Standard deviation of seeded Gaussian depth noise, meters; 0 = off.
    pub depth_noise_sigma: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            resolution: 64,
            n_points: 256,
            ring: CameraRing::default(),
            depth_noise_sigma: 0.0,
        }
    }
}

/// One rendered view: rasters, the selected part's point cloud, and the
/// camera-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// H×W×3 row-major, values in [0, 1].
    pub rgb: Vec<f64>,
    /// H×W depth in meters along the camera z axis; 0 = no hit.
    pub depth: Vec<f64>,
    /// H×W part index per pixel; -1 = background.
    pub part_mask: Vec<i32>,
    /// Exactly `n_points` camera-frame points (all zeros when degenerate).
    pub cloud: PointCloud,
    /// Pixels hit by the selected part, before dilation and subsampling.
    pub raw_point_count: usize,
    pub pose: CameraPose,
    /// World joint mapped into the camera frame.
    pub ground_truth: JointParams,
    pub state_max: f64,
    /// True when the selected part is the movable one.
    pub movable_selected: bool,
    /// Selected part contributed zero valid depth pixels.
    pub degenerate: bool,
    pub category: Category,
    pub selected_part: usize,
}

struct Tri {
    v: [Vector3<f64>; 3],
    color: [f64; 3],
    part: usize,
}

/// Triangulates one cuboid face given four corners in fan order and its
/// outward normal (already in world frame).
fn face_tris(corners: [Vector3<f64>; 4], normal: Vector3<f64>, color: [f64; 3], part: usize, out: &mut Vec<Tri>) {
    let l = Vector3::new(LIGHT_DIR[0], LIGHT_DIR[1], LIGHT_DIR[2]).normalize();
    let shade = AMBIENT + (1.0 - AMBIENT) * normal.dot(&l).max(0.0);
    let shaded = [
        (color[0] * shade).clamp(0.0, 1.0),
        (color[1] * shade).clamp(0.0, 1.0),
        (color[2] * shade).clamp(0.0, 1.0),
    ];
    out.push(Tri { v: [corners[0], corners[1], corners[2]], color: shaded, part });
    out.push(Tri { v: [corners[0], corners[2], corners[3]], color: shaded, part });
}

/// Emits the 12 triangles of a cuboid, optionally mapped by a rigid motion.
fn cuboid_tris(c: &Cuboid, motion: Option<&RigidTransform>, part: usize, out: &mut Vec<Tri>) {
    let h = c.half_extents;
    let corner = |sx: f64, sy: f64, sz: f64| {
        let p = c.center + Vector3::new(sx * h.x, sy * h.y, sz * h.z);
        motion.map_or(p, |m| m.apply_point(&p))
    };
    let normal = |n: Vector3<f64>| motion.map_or(n, |m| m.apply_direction(&n));
    // +x, -x, +y, -y, +z, -z faces; corners wound consistently per face.
    let faces: [([Vector3<f64>; 4], Vector3<f64>); 6] = [
        (
            [corner(1.0, -1.0, -1.0), corner(1.0, 1.0, -1.0), corner(1.0, 1.0, 1.0), corner(1.0, -1.0, 1.0)],
            normal(Vector3::x()),
        ),
        (
            [corner(-1.0, -1.0, -1.0), corner(-1.0, -1.0, 1.0), corner(-1.0, 1.0, 1.0), corner(-1.0, 1.0, -1.0)],
            normal(-Vector3::x()),
        ),
        (
            [corner(-1.0, 1.0, -1.0), corner(-1.0, 1.0, 1.0), corner(1.0, 1.0, 1.0), corner(1.0, 1.0, -1.0)],
            normal(Vector3::y()),
        ),
        (
            [corner(-1.0, -1.0, -1.0), corner(1.0, -1.0, -1.0), corner(1.0, -1.0, 1.0), corner(-1.0, -1.0, 1.0)],
            normal(-Vector3::y()),
        ),
        (
            [corner(-1.0, -1.0, 1.0), corner(1.0, -1.0, 1.0), corner(1.0, 1.0, 1.0), corner(-1.0, 1.0, 1.0)],
            normal(Vector3::z()),
        ),
        (
            [corner(-1.0, -1.0, -1.0), corner(-1.0, 1.0, -1.0), corner(1.0, 1.0, -1.0), corner(1.0, -1.0, -1.0)],
            normal(-Vector3::z()),
        ),
    ];
    for (corners, n) in faces {
        face_tris(corners, n, c.color, part, out);
    }
}

/// Renders with the movable part selected.
pub fn render(scene: &Scene, pose: &CameraPose, opts: &RenderOptions) -> Result<Observation, SynthError> {
    render_selected(scene, pose, opts, scene.movable_index())
}

/// Renders the scene and extracts the point cloud of `selected_part`.
pub fn render_selected(
    scene: &Scene,
    pose: &CameraPose,
    opts: &RenderOptions,
    selected_part: usize,
) -> Result<Observation, SynthError> {
    let res = opts.resolution;
    if res < 16 {
        return Err(SynthError::ResolutionTooSmall(res));
    }
    assert!(selected_part < scene.parts.len(), "selected part out of range");
    let (w, h) = (pose.intrinsics.width, pose.intrinsics.height);

    let motion = scene.articulation();
    let mut tris = Vec::with_capacity(scene.parts.len() * 12);
    for (i, part) in scene.parts.iter().enumerate() {
         cuboid_tris(part, part.movable.then_some(&motion), i, &mut tris);
    }

    let mut rgb = vec![0.0f64; w * h * 3];
    let mut depth = vec![0.0f64; w * h];
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut part_mask = vec![-1i32; w * h];

    for tri in &tris {
        let cam: Vec<Vector3<f64>> = tri.v.iter().map(|p| pose.extrinsic.apply_point(p)).collect();
        if cam.iter().any(|p| p.z <= NEAR_PLANE) {
            continue;
        }
        let proj: Vec<(f64, f64)> = cam
            .iter()
            .map(|p| {
                let (px, py, _) = pose.project(p);
                (px, py)
            })
            .collect();
        let area = edge(proj[0], proj[1], proj[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_x = (proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(w.saturating_sub(1));
        let min_y = proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let max_y = (proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(h.saturating_sub(1));
        let inv_z: Vec<f64> = cam.iter().map(|p| 1.0 / p.z).collect();

        for iy in min_y..=max_y {
            for ix in min_x..=max_x {
                let px = (ix as f64 + 0.5, iy as f64 + 0.5);
                let w0 = edge(proj[1], proj[2], px) / area;
                let w1 = edge(proj[2], proj[0], px) / area;
                let w2 = edge(proj[0], proj[1], px) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
                let idx = iy * w + ix;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    depth[idx] = z;
                    part_mask[idx] = tri.part as i32;
                    rgb[idx * 3..idx * 3 + 3].copy_from_slice(&tri.color);
                }
            }
        }
    }

    if opts.depth_noise_sigma > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(super::derive_seed(scene.seed, 0xD0 + pose.viewpoint_id as u64));
        let normal = Normal::new(0.0, opts.depth_noise_sigma).expect("positive sigma");
        for d in depth.iter_mut() {
            if *d > 0.0 {
                *d = (*d + normal.sample(&mut rng)).max(NEAR_PLANE);
            }
        }
    }

    let raw_point_count = part_mask.iter().filter(|m| **m == selected_part as i32).count();

    // Region of interest: selected-part pixels dilated by 2, valid depth only.
    let mut roi_points: Vec<Vector3<f64>> = Vec::new();
    for iy in 0..h {
        for ix in 0..w {
            let idx = iy * w + ix;
            if depth[idx] <= 0.0 {
                continue;
            }
            let mut near_part = false;
            'scan: for dy in -ROI_DILATION..=ROI_DILATION {
                for dx in -ROI_DILATION..=ROI_DILATION {
                    let (sx, sy) = (ix as i64 + dx, iy as i64 + dy);
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h
                        && part_mask[sy as usize * w + sx as usize] == selected_part as i32
                    {
                        near_part = true;
                        break 'scan;
                    }
                }
            }
            if near_part {
                roi_points.push(pose.back_project(ix, iy, depth[idx]));
            }
        }
    }

    let degenerate = roi_points.is_empty();
    let mut sub_rng = ChaCha12Rng::seed_from_u64(super::derive_seed(scene.seed, 0x5B + pose.viewpoint_id as u64));
    let cloud_points = if degenerate {
        vec![Vector3::zeros(); opts.n_points]
    } else if roi_points.len() >= opts.n_points {
        // Partial Fisher-Yates: the first n_points entries are a uniform
        // sample without replacement.
        let mut indices: Vec<usize> = (0..roi_points.len()).collect();
        for i in 0..opts.n_points {
            let j = sub_rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        indices[..opts.n_points].iter().map(|i| roi_points[*i]).collect()
    } else {
        let mut pts = roi_points.clone();
        while pts.len() < opts.n_points {
            pts.push(roi_points[sub_rng.gen_range(0..roi_points.len())]);
        }
        pts
    };

    let ground_truth = scene.joint.transformed(&pose.extrinsic);
    Ok(Observation {
        rgb,
        depth,
        part_mask,
        cloud: PointCloud::new(cloud_points)?,
        raw_point_count,
        pose: pose.clone(),
        ground_truth,
        state_max: scene.state_max,
        movable_selected: selected_part == scene.movable_index(),
        degenerate,
        category: scene.category,
        selected_part,
    })
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Convenience: pose + render for one ring station.
pub fn observe(
    scene: &Scene,
    viewpoint_id: usize,
    opts: &RenderOptions,
) -> Result<Observation, SynthError> {
    let pose = camera_pose(viewpoint_id, scene, &opts.ring, opts.resolution)?;
    render(scene, &pose, opts)
}
