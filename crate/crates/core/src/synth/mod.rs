//! Procedural articulated scenes, pinhole rendering, and dataset files.
//!
//! Scenes are cuboid assemblies with exactly one movable part attached by a
//! revolute or prismatic joint. The movable part is stored in its closed
//! pose; its pose at state v is that geometry mapped through the screw
//! motion of the joint, so rendering and manipulation share one definition
//! of articulation.

mod dataset;
mod render;

pub use dataset::{make_dataset, DatasetConfig, DatasetReader, DatasetSummary, IndexEntry, SampleRecord, Split};
pub use render::{render, render_selected, Observation, RenderOptions};

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::geom::{manipulation_matrix, JointParams, JointType, RigidTransform};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("viewpoint id {0} outside [0, 16)")]
    BadViewpoint(usize),
    #[error("resolution {0} below minimum 16")]
    ResolutionTooSmall(usize),
    #[error("geometry error: {0}")]
    Geom(#[from] crate::geom::GeomError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset corrupt: {0}")]
    Corrupt(String),
}

/// The four scene families; two revolute, two prismatic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    CabinetDoor,
    Laptop,
    Drawer,
    Slider,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::CabinetDoor,
        Category::Laptop,
        Category::Drawer,
        Category::Slider,
    ];

    pub fn joint_type(self) -> JointType {
        match self {
            Category::CabinetDoor | Category::Laptop => JointType::Revolute,
            Category::Drawer | Category::Slider => JointType::Prismatic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::CabinetDoor => "cabinet-door",
            Category::Laptop => "laptop",
            Category::Drawer => "drawer",
            Category::Slider => "slider",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, SynthError> {
        match name {
            "cabinet-door" => Ok(Category::CabinetDoor),
            "laptop" => Ok(Category::Laptop),
            "drawer" => Ok(Category::Drawer),
            "slider" => Ok(Category::Slider),
            other => Err(SynthError::UnknownCategory(other.to_string())),
        }
    }

    fn index(self) -> u64 {
        match self {
            Category::CabinetDoor => 0,
            Category::Laptop => 1,
            Category::Drawer => 2,
            Category::Slider => 3,
        }
    }
}

/// Axis-aligned cuboid in its closed-state pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Cuboid {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub color: [f64; 3],
    pub movable: bool,
}

/// One articulated object: fixed cuboids plus one movable cuboid and the
/// world-frame joint that drives it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub parts: Vec<Cuboid>,
    pub joint: JointParams,
    pub category: Category,
    pub state_max: f64,
    pub seed: u64,
}

impl Scene {
    pub fn movable_index(&self) -> usize {
        self.parts
            .iter()
            .position(|p| p.movable)
            .expect("scene invariant: exactly one movable part")
    }

    /// Screw motion carrying the movable part from closed to the current state.
    pub fn articulation(&self) -> RigidTransform {
        let closed = JointParams {
            state: 0.0,
            ..self.joint.clone()
        };
        manipulation_matrix(&closed, self.joint.state).expect("scene joint is valid")
    }

    /// Mean of part centers at the current state; cameras aim here.
    pub fn centroid(&self) -> Vector3<f64> {
        let art = self.articulation();
        let mut sum = Vector3::zeros();
        for p in &self.parts {
            sum += if p.movable { art.apply_point(&p.center) } else { p.center };
        }
        sum / self.parts.len() as f64
    }
}

fn rand_color(rng: &mut ChaCha12Rng) -> [f64; 3] {
    [
        rng.gen_range(0.2..0.9),
        rng.gen_range(0.2..0.9),
        rng.gen_range(0.2..0.9),
    ]
}

/// Deterministic procedural scene for (category, seed).
///
/// Per-category ranges (documented here, sampled uniformly):
/// - cabinet-door: body 0.5–0.7 × 0.30–0.45 × 0.6–0.9, door thickness 0.02,
///   hinge on a random vertical front edge, axis ±z, state_max = π/2.
/// - laptop: slabs 0.45–0.6 × 0.3–0.4, thickness 0.03, hinge along the back
///   edge, axis +x, state_max = 110°.
/// - drawer: body 0.5–0.7 deep, drawer box in the front opening, slides
///   along +x, state_max = 0.30.
/// - slider: backing panel with a front panel sliding along +y,
///   state_max = 0.35.
///
/// Joint state is uniform in [0, state_max]; colors uniform in [0.2, 0.9].
pub fn generate_scene(category: Category, seed: u64) -> Scene {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(category.index());
    match category {
        Category::CabinetDoor => cabinet_door(seed, &mut rng),
        Category::Laptop => laptop(seed, &mut rng),
        Category::Drawer => drawer(seed, &mut rng),
        Category::Slider => slider(seed, &mut rng),
    }
}

fn cabinet_door(seed: u64, rng: &mut ChaCha12Rng) -> Scene {
    let hx = rng.gen_range(0.25..0.35); // body half depth along x (front = +x)
    let hy = rng.gen_range(0.15..0.225);
    let hz = rng.gen_range(0.30..0.45);
    let door_t = 0.02;
    let state_max = std::f64::consts::FRAC_PI_2;
    let state = rng.gen_range(0.0..state_max);
    let hinge_left = rng.gen_bool(0.5);

    let body = Cuboid {
        center: Vector3::new(0.0, 0.0, hz),
        half_extents: Vector3::new(hx, hy, hz),
        color: rand_color(rng),
        movable: false,
    };
    let door = Cuboid {
        center: Vector3::new(hx + door_t, 0.0, hz),
        half_extents: Vector3::new(door_t, hy, hz * 0.95),
        color: rand_color(rng),
        movable: true,
    };
    // Hinge on a vertical edge of the door; the axis sign is chosen so a
    // positive state swings the door outward (+x side).
    let (hinge_y, axis) = if hinge_left {
        (-hy, -Vector3::z())
    } else {
        (hy, Vector3::z())
    };
    let joint = JointParams::new(
        JointType::Revolute,
        Vector3::new(hx + door_t, hinge_y, hz),
        axis,
        state,
    )
    .expect("unit axis by construction");
    Scene {
        parts: vec![body, door],
        joint,
        category: Category::CabinetDoor,
        state_max,
        seed,
    }
}

fn laptop(seed: u64, rng: &mut ChaCha12Rng) -> Scene {
    let hx = rng.gen_range(0.225..0.3);
    let hy = rng.gen_range(0.15..0.2);
    let t = 0.015;
    let state_max = 110.0_f64.to_radians();
    let state = rng.gen_range(0.0..state_max);

    let base = Cuboid {
        center: Vector3::new(0.0, 0.0, t),
        half_extents: Vector3::new(hx, hy, t),
        color: rand_color(rng),
        movable: false,
    };
    // Closed lid lies flat on the base; it opens about the back edge (+y).
    let lid = Cuboid {
        center: Vector3::new(0.0, 0.0, 3.0 * t),
        half_extents: Vector3::new(hx, hy, t),
        color: rand_color(rng),
        movable: true,
    };
    let joint = JointParams::new(
        JointType::Revolute,
        Vector3::new(0.0, hy, 2.0 * t),
        Vector3::x(),
        state,
    )
    .expect("unit axis by construction");
    Scene {
        parts: vec![base, lid],
        joint,
        category: Category::Laptop,
        state_max,
        seed,
    }
}

fn drawer(seed: u64, rng: &mut ChaCha12Rng) -> Scene {
    let hx = rng.gen_range(0.25..0.35);
    let hy = rng.gen_range(0.175..0.25);
    let hz = rng.gen_range(0.175..0.25);
    let state_max = 0.30;
    let state = rng.gen_range(0.0..state_max);

    // Body: a shell behind and around the drawer (back slab + side walls +
    // top/bottom), so the drawer is hidden from behind but visible in front.
    let wall = 0.03;
    let back = Cuboid {
        center: Vector3::new(-hx + wall / 2.0, 0.0, hz),
        half_extents: Vector3::new(wall / 2.0, hy, hz),
        color: rand_color(rng),
        movable: false,
    };
    let side_color = rand_color(rng);
    let left = Cuboid {
        center: Vector3::new(0.0, -hy + wall / 2.0, hz),
        half_extents: Vector3::new(hx, wall / 2.0, hz),
        color: side_color,
        movable: false,
    };
    let right = Cuboid {
        center: Vector3::new(0.0, hy - wall / 2.0, hz),
        half_extents: Vector3::new(hx, wall / 2.0, hz),
        color: side_color,
        movable: false,
    };
    let top = Cuboid {
        center: Vector3::new(0.0, 0.0, 2.0 * hz - wall / 2.0),
        half_extents: Vector3::new(hx, hy, wall / 2.0),
        color: side_color,
        movable: false,
    };
    let drawer_box = Cuboid {
        center: Vector3::new(wall, 0.0, hz - wall / 2.0),
        half_extents: Vector3::new(hx - wall, hy - 1.5 * wall, hz - 1.5 * wall),
        color: rand_color(rng),
        movable: true,
    };
    let position = drawer_box.center;
    let joint = JointParams::new(JointType::Prismatic, position, Vector3::x(), state)
        .expect("unit axis by construction");
    Scene {
        parts: vec![back, left, right, top, drawer_box],
        joint,
        category: Category::Drawer,
        state_max,
        seed,
    }
}

fn slider(seed: u64, rng: &mut ChaCha12Rng) -> Scene {
    let hy = rng.gen_range(0.3..0.4);
    let hz = rng.gen_range(0.225..0.3);
    let t = 0.02;
    let state_max = 0.35;
    let state = rng.gen_range(0.0..state_max);

    let backing = Cuboid {
        center: Vector3::new(-t, 0.0, hz),
        half_extents: Vector3::new(t, hy, hz),
        color: rand_color(rng),
        movable: false,
    };
    // Front panel covers the -y half of the backing and slides toward +y.
    let panel = Cuboid {
        center: Vector3::new(t + 0.005, -hy / 2.0, hz),
        half_extents: Vector3::new(t, hy / 2.0, hz * 0.9),
        color: rand_color(rng),
        movable: true,
    };
    let position = panel.center;
    let joint = JointParams::new(JointType::Prismatic, position, Vector3::y(), state)
        .expect("unit axis by construction");
    Scene {
        parts: vec![backing, panel],
        joint,
        category: Category::Slider,
        state_max,
        seed,
    }
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Ring of sixteen camera stations: 22.5° azimuth steps at two alternating
/// elevations, all aimed at the scene centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRing {
    pub radius: f64,
    pub elevation_low: f64,
    pub elevation_high: f64,
    pub fov_deg: f64,
}

impl Default for CameraRing {
    fn default() -> Self {
        CameraRing {
            radius: 2.1,
            elevation_low: 0.3,
            elevation_high: 0.75,
            fov_deg: 55.0,
        }
    }
}

pub const NUM_VIEWPOINTS: usize = 16;

/// Camera station on the sixteen-viewpoint ring.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub viewpoint_id: usize,
    /// world → camera; camera frame is x-right, y-down, z-forward.
    pub extrinsic: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

impl CameraPose {
    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, p_cam: &Vector3<f64>) -> (f64, f64, f64) {
        let k = &self.intrinsics;
        (
            k.fx * p_cam.x / p_cam.z + k.cx,
            k.fy * p_cam.y / p_cam.z + k.cy,
            p_cam.z,
        )
    }

    /// Camera-frame point for a pixel center (ix, iy) at depth `z`.
    pub fn back_project(&self, ix: usize, iy: usize, z: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new(
            (ix as f64 + 0.5 - k.cx) * z / k.fx,
            (iy as f64 + 0.5 - k.cy) * z / k.fy,
            z,
        )
    }
}

/// Pose for one of the sixteen ring stations. Even ids use the low
/// elevation, odd ids the high one.
pub fn camera_pose(
    viewpoint_id: usize,
    scene: &Scene,
    ring: &CameraRing,
    resolution: usize,
) -> Result<CameraPose, SynthError> {
    if viewpoint_id >= NUM_VIEWPOINTS {
        return Err(SynthError::BadViewpoint(viewpoint_id));
    }
    if resolution < 16 {
        return Err(SynthError::ResolutionTooSmall(resolution));
    }
    let target = scene.centroid();
    let azimuth = viewpoint_id as f64 * (2.0 * std::f64::consts::PI / NUM_VIEWPOINTS as f64);
    let elevation = if viewpoint_id % 2 == 0 {
        ring.elevation_low
    } else {
        ring.elevation_high
    };
    let eye = target
        + ring.radius
            * Vector3::new(
                azimuth.cos() * elevation.cos(),
                azimuth.sin() * elevation.cos(),
                elevation.sin(),
            );
    let forward = (target - eye).normalize();
    let right = forward.cross(&Vector3::z()).normalize();
    let down = forward.cross(&right).normalize();
    let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let extrinsic = RigidTransform::from_parts(rot, -(rot * eye));

    let f = resolution as f64 / 2.0 / (ring.fov_deg.to_radians() / 2.0).tan();
    Ok(CameraPose {
        viewpoint_id,
        extrinsic,
        intrinsics: CameraIntrinsics {
            fx: f,
            fy: f,
            cx: resolution as f64 / 2.0,
            cy: resolution as f64 / 2.0,
            width: resolution,
            height: resolution,
        },
    })
}

/// splitmix64; used to derive independent per-sample seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
