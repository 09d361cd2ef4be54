//! Analytic shelf world: box and bag objects on a support plane in front of
//! a back wall, a ray-cast wrist camera and a rule-based suction model.
//!
//! World frame: x points into the shelf, y to the left, z up. Objects are
//! oriented boxes resting on `z = 0`; their local x axis points into the
//! shelf, so the face at local `-x` is the one presented to the camera.
//! Bags replace that face with a crinkled height field.

use std::f64::consts::PI;
use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{tool_frame, EnvError, Environment, Observation, RobotPose};
use crate::projection::RigidTransform;
use crate::rgbd::{Aabb, CameraIntrinsics, ColorFrame, DepthFrame, PixelMask};
use crate::Vec3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not place object {index} ({name}) after {attempts} attempts")]
    Placement {
        index: usize,
        name: String,
        attempts: usize,
    },
    #[error("no object surface within {tolerance} m of {point:?}")]
    NoSurface { point: [f64; 3], tolerance: f64 },
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Box,
    Bag,
}

impl ObjectKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectKind::Box => "box",
            ObjectKind::Bag => "bag",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Surface {
    FlatRigid,
    Crinkled { amplitude: f64, wavelength: f64 },
}

impl Surface {
    /// Height of the crinkle at in-face coordinates `(y, z)`, meters.
    pub fn height(&self, y: f64, z: f64) -> f64 {
        match *self {
            Surface::FlatRigid => 0.0,
            Surface::Crinkled {
                amplitude,
                wavelength,
            } => {
                let k = 2.0 * PI / wavelength;
                amplitude * (k * y).sin() * (k * z).sin()
            }
        }
    }

    fn gradient(&self, y: f64, z: f64) -> (f64, f64) {
        match *self {
            Surface::FlatRigid => (0.0, 0.0),
            Surface::Crinkled {
                amplitude,
                wavelength,
            } => {
                let k = 2.0 * PI / wavelength;
                (
                    amplitude * k * (k * y).cos() * (k * z).sin(),
                    amplitude * k * (k * y).sin() * (k * z).cos(),
                )
            }
        }
    }

    fn amplitude(&self) -> f64 {
        match *self {
            Surface::FlatRigid => 0.0,
            Surface::Crinkled { amplitude, .. } => amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ObjectKind,
    /// Full extents along local x (depth), y (width) and z (height).
    pub dims: [f64; 3],
    #[serde(default)]
    pub surface: Option<Surface>,
    #[serde(default)]
    pub porosity: f64,
    /// Taken from the catalog when absent.
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShelfSpec {
    /// x of the back wall.
    pub back_x: f64,
    /// Objects are placed with |y| below this.
    pub half_width: f64,
    /// Largest distance between an object's back and the wall.
    pub max_setback: f64,
    pub max_yaw_deg: f64,
}

impl Default for ShelfSpec {
    fn default() -> Self {
        Self {
            back_x: 0.5,
            half_width: 0.2,
            max_setback: 0.04,
            max_yaw_deg: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub intrinsics: CameraIntrinsics,
    /// Distance from the tool tip back to the optical center, along the tool axis.
    pub mount_offset: f64,
    /// Initial tool tip position; the tool starts looking along +x.
    pub start: [f64; 3],
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics {
                fx: 140.0,
                fy: 140.0,
                cx: 79.5,
                cy: 59.5,
                width: 160,
                height: 120,
                depth_scale: 0.0001,
            },
            mount_offset: 0.12,
            start: [0.1, 0.0, 0.06],
        }
    }
}

pub const DEFAULT_BOX_NAMES: [&str; 6] = [
    "green tea box",
    "cereal box",
    "tissue box",
    "cracker box",
    "chocolate box",
    "cookie box",
];

pub const DEFAULT_BAG_NAMES: [&str; 6] = [
    "coffee bag",
    "potato chips bag",
    "gummy candy bag",
    "rice cracker bag",
    "dried fruit bag",
    "pretzel bag",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub shelf: ShelfSpec,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub catalog: Vec<String>,
}

impl SceneSpec {
    pub fn from_json_str(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::InvalidSpec(e.to_string()))
    }

    /// `count` objects of one kind with dimensions, surfaces and porosity
    /// drawn from the default ranges.
    pub fn sampled(kind: ObjectKind, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce7e);
        let objects = (0..count)
            .map(|_| match kind {
                ObjectKind::Box => ObjectSpec::random_box(&mut rng),
                ObjectKind::Bag => ObjectSpec::random_bag(&mut rng),
            })
            .collect();
        let names = match kind {
            ObjectKind::Box => DEFAULT_BOX_NAMES,
            ObjectKind::Bag => DEFAULT_BAG_NAMES,
        };
        Self {
            objects,
            shelf: ShelfSpec::default(),
            camera: CameraSpec::default(),
            catalog: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidSpec(m));
        self.camera
            .intrinsics
            .validate()
            .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        for (i, o) in self.objects.iter().enumerate() {
            if o.dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
                return bad(format!("object {i}: dimensions must be positive"));
            }
            if !(0.0..=1.0).contains(&o.porosity) {
                return bad(format!("object {i}: porosity must be in [0, 1]"));
            }
            if let Some(Surface::Crinkled {
                amplitude,
                wavelength,
            }) = o.surface
            {
                let min_dim = o.dims.iter().cloned().fold(f64::INFINITY, f64::min);
                if !(amplitude >= 0.0 && amplitude < min_dim / 4.0 && wavelength > 0.0) {
                    return bad(format!(
                        "object {i}: crinkle amplitude must be below a quarter of the smallest dimension"
                    ));
                }
            }
        }
        let unnamed = self.objects.iter().filter(|o| o.name.is_none()).count();
        if unnamed > self.catalog.len() {
            return bad(format!(
                "{unnamed} unnamed objects but only {} catalog names",
                self.catalog.len()
            ));
        }
        Ok(())
    }
}

impl ObjectSpec {
    pub fn random_box<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            kind: ObjectKind::Box,
            dims: [
                rng.random_range(0.05..0.09),
                rng.random_range(0.075..0.10),
                rng.random_range(0.11..0.16),
            ],
            surface: Some(Surface::FlatRigid),
            porosity: 0.0,
            name: None,
        }
    }

    pub fn random_bag<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            kind: ObjectKind::Bag,
            dims: [
                rng.random_range(0.04..0.07),
                rng.random_range(0.08..0.10),
                rng.random_range(0.12..0.17),
            ],
            surface: Some(Surface::Crinkled {
                amplitude: rng.random_range(0.0003..0.0016),
                wavelength: rng.random_range(0.03..0.05),
            }),
            porosity: rng.random_range(0.05..0.25),
            name: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    /// 1-based; 0 is reserved for the background in id masks.
    pub id: u16,
    pub kind: ObjectKind,
    /// Object frame to world.
    pub pose: RigidTransform,
    pub dims: [f64; 3],
    pub surface: Surface,
    pub porosity: f64,
    pub name: String,
}

impl SimObject {
    fn half(&self) -> Vec3 {
        Vec3::new(self.dims[0], self.dims[1], self.dims[2]) / 2.0
    }

    fn local(&self, p: &Vec3) -> Vec3 {
        self.pose.rotation().transpose() * (p - self.pose.translation())
    }

    /// World normal of a face of the undeformed box.
    pub fn face_normal(&self, face: Face) -> Vec3 {
        let mut n = Vec3::zeros();
        n[face.axis] = face.sign as f64;
        self.pose.apply_vector(&n)
    }

    fn crinkled_front(&self) -> bool {
        matches!(self.surface, Surface::Crinkled { .. })
    }

    /// Footprint corners on the support plane.
    fn footprint(&self) -> [[f64; 2]; 4] {
        let h = self.half();
        let mut out = [[0.0; 2]; 4];
        for (i, (sx, sy)) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            let p = self.pose.apply_point(&Vec3::new(sx * h.x, sy * h.y, 0.0));
            out[i] = [p.x, p.y];
        }
        out
    }
}

/// A face of an object's box: the axis it is normal to and which side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Face {
    pub axis: usize,
    pub sign: i8,
}

impl Face {
    pub const FRONT: Face = Face { axis: 0, sign: -1 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shelf {
    pub back_x: f64,
    pub support_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScene {
    pub objects: Vec<SimObject>,
    pub shelf: Shelf,
    pub camera: CameraSpec,
    pub rng_seed: u64,
}

const PLACEMENT_ATTEMPTS: usize = 200;
const PLACEMENT_RESTARTS: usize = 25;

fn separated(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let p = poly[i];
            let q = poly[(i + 1) % 4];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |pts: &[[f64; 2]; 4]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                    let d = c[0] * axis[0] + c[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(a);
            let (b0, b1) = proj(b);
            if a1 <= b0 || b1 <= a0 {
                return true;
            }
        }
    }
    false
}

/// True when the footprints of two objects overlap (separating axis test).
pub fn footprints_overlap(a: &SimObject, b: &SimObject) -> bool {
    !separated(&a.footprint(), &b.footprint())
}

/// Places the scene's objects on the shelf by rejection sampling. The same
/// scene spec and seed always give the same scene.
pub fn generate_scene(spec: &SceneSpec, rng_seed: u64) -> Result<SimScene, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut last_err = None;
    for _ in 0..PLACEMENT_RESTARTS {
        match place_objects(spec, &mut rng) {
            Ok(objects) => {
                return Ok(SimScene {
                    objects,
                    shelf: Shelf {
                        back_x: spec.shelf.back_x,
                        support_z: 0.0,
                    },
                    camera: spec.camera.clone(),
                    rng_seed,
                })
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one placement round"))
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SimObject>, SimError> {
    let mut catalog: Vec<String> = spec.catalog.clone();
    let shelf = spec.shelf;
    let mut placed: Vec<SimObject> = Vec::with_capacity(spec.objects.len());
    for (i, o) in spec.objects.iter().enumerate() {
        let name = match &o.name {
            Some(n) => n.clone(),
            None => catalog.remove(rng.random_range(0..catalog.len())),
        };
        let surface = o.surface.unwrap_or(match o.kind {
            ObjectKind::Box => Surface::FlatRigid,
            ObjectKind::Bag => Surface::Crinkled {
                amplitude: 0.001,
                wavelength: 0.04,
            },
        });
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let yaw = rng.random_range(-1.0..=1.0) * shelf.max_yaw_deg.to_radians();
            let y = rng.random_range(-shelf.half_width..=shelf.half_width);
            let setback = rng.random_range(0.002..=shelf.max_setback.max(0.002));
            let (hx, hy) = (o.dims[0] / 2.0, o.dims[1] / 2.0);
            let reach_x = hx * yaw.cos().abs() + hy * yaw.sin().abs();
            let reach_y = hx * yaw.sin().abs() + hy * yaw.cos().abs();
            if y.abs() + reach_y > shelf.half_width {
                continue;
            }
            let x = shelf.back_x - setback - reach_x;
            let cand = SimObject {
                id: i as u16 + 1,
                kind: o.kind,
                pose: RigidTransform::from_axis_angle(Vec3::z(), yaw, Vec3::new(x, y, o.dims[2] / 2.0)),
                dims: o.dims,
                surface,
                porosity: o.porosity,
                name: name.clone(),
            };
            if placed.iter().all(|p| !footprints_overlap(p, &cand)) {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(obj) => placed.push(obj),
            None => {
                return Err(SimError::Placement {
                    index: i,
                    name,
                    attempts: PLACEMENT_ATTEMPTS * PLACEMENT_RESTARTS,
                })
            }
        }
    }
    Ok(placed)
}

impl SimScene {
    /// Camera frame to tool frame.
    pub fn hand_eye(&self) -> RigidTransform {
        RigidTransform::translation_only(Vec3::new(0.0, 0.0, -self.camera.mount_offset))
    }

    pub fn start_pose(&self) -> RobotPose {
        RobotPose {
            position: Vec3::from(self.camera.start),
            approach_axis: Vec3::x(),
        }
    }

    /// Camera frame to world for a tool pose.
    pub fn camera_pose(&self, tool: &RobotPose) -> RigidTransform {
        tool_frame(tool).compose(&self.hand_eye())
    }

    /// World-frame box that drops the back wall and the support plane.
    pub fn workspace(&self) -> Aabb {
        Aabb {
            min: [-100.0, -100.0, self.shelf.support_z + 0.003],
            max: [self.shelf.back_x - 0.003, 100.0, 100.0],
        }
    }

    pub fn object_by_name(&self, name: &str) -> Option<&SimObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    /// The object whose name appears in `directive`; the longest match wins.
    pub fn ground(&self, directive: &str) -> Option<&SimObject> {
        let d = directive.to_lowercase();
        self.objects
            .iter()
            .filter(|o| d.contains(&o.name.to_lowercase()))
            .max_by_key(|o| (o.name.len(), std::cmp::Reverse(o.id)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    id: u16,
    normal: Vec3,
}

fn intersect_object(obj: &SimObject, o_w: &Vec3, d_w: &Vec3) -> Option<(f64, Vec3)> {
    let rt = obj.pose.rotation().transpose();
    let o = rt * (o_w - obj.pose.translation());
    let d = rt * d_w;
    let h = obj.half();
    let a = obj.surface.amplitude();
    let lo = Vec3::new(-h.x - a, -h.y, -h.z);
    let hi = h;
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    let mut entry = Face { axis: 0, sign: -1 };
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[i] - o[i]) / d[i], (hi[i] - o[i]) / d[i]);
        let mut face = Face { axis: i, sign: -1 };
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            face.sign = 1;
        }
        if ta > t0 {
            t0 = ta;
            entry = face;
        }
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    let face_normal = |f: Face| {
        let mut n = Vec3::zeros();
        n[f.axis] = f.sign as f64;
        obj.pose.apply_vector(&n)
    };
    if !obj.crinkled_front() {
        return Some((t0, face_normal(entry)));
    }
    // Solid is x >= -hx + height(y, z) inside the bounding box.
    let f = |t: f64| {
        let p = o + d * t;
        p.x - (-h.x + obj.surface.height(p.y, p.z))
    };
    if f(t0) >= 0.0 {
        return Some((t0, face_normal(entry)));
    }
    let dt = 0.0003 / d.norm();
    let (mut a_t, mut b_t) = (t0, t0);
    let mut crossed = false;
    while b_t < t1 {
        a_t = b_t;
        b_t = (b_t + dt).min(t1);
        if f(b_t) >= 0.0 {
            crossed = true;
            break;
        }
    }
    if !crossed {
        return None;
    }
    for _ in 0..40 {
        let m = 0.5 * (a_t + b_t);
        if f(m) >= 0.0 {
            b_t = m;
        } else {
            a_t = m;
        }
    }
    let p = o + d * b_t;
    let (gy, gz) = obj.surface.gradient(p.y, p.z);
    let n_local = Vec3::new(-1.0, gy, gz).normalize();
    Some((b_t, obj.pose.apply_vector(&n_local)))
}

fn cast(scene: &SimScene, o: &Vec3, d: &Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut offer = |h: Hit| {
        if h.t > 0.0 && best.is_none_or(|b| h.t < b.t) {
            best = Some(h);
        }
    };
    if d.x > 0.0 {
        let t = (scene.shelf.back_x - o.x) / d.x;
        if (o + d * t).z >= scene.shelf.support_z {
            offer(Hit {
                t,
                id: 0,
                normal: -Vec3::x(),
            });
        }
    }
    if d.z < 0.0 {
        let t = (scene.shelf.support_z - o.z) / d.z;
        if (o + d * t).x <= scene.shelf.back_x {
            offer(Hit {
                t,
                id: 0,
                normal: Vec3::z(),
            });
        }
    }
    for obj in &scene.objects {
        if let Some((t, normal)) = intersect_object(obj, o, d) {
            offer(Hit {
                t,
                id: obj.id,
                normal,
            });
        }
    }
    best
}

const PALETTE: [(&str, [u8; 3]); 8] = [
    ("green", [60, 150, 70]),
    ("red", [190, 50, 45]),
    ("blue", [50, 80, 180]),
    ("yellow", [220, 190, 50]),
    ("orange", [230, 130, 40]),
    ("brown", [130, 85, 50]),
    ("white", [235, 235, 230]),
    ("purple", [120, 60, 150]),
];

fn object_color(obj: &SimObject) -> [u8; 3] {
    let name = obj.name.to_lowercase();
    PALETTE
        .iter()
        .find(|(w, _)| name.contains(w))
        .map(|(_, c)| *c)
        .unwrap_or(PALETTE[(obj.id as usize + 1) % PALETTE.len()].1)
}

/// One rendered view with its per-pixel object ids (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub depth: DepthFrame,
    pub color: ColorFrame,
    pub ids: Vec<u16>,
}

impl Rendering {
    pub fn mask_of(&self, id: u16) -> PixelMask {
        PixelMask::from_ids(self.depth.width, self.depth.height, &self.ids, id)
    }

    /// 8-bit mask PNG of one object, 255 inside.
    pub fn save_mask_png(&self, id: u16, path: &Path) -> Result<(), SimError> {
        let data: Vec<u8> = self.ids.iter().map(|&x| if x == id { 255 } else { 0 }).collect();
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.depth.width, self.depth.height, data).expect("mask buffer matches frame size");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| SimError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn save_ids_png(&self, path: &Path) -> Result<(), SimError> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.depth.width, self.depth.height, self.ids.clone())
                .expect("id buffer matches frame size");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| SimError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }
}

/// Ray-casts depth, shaded color and the id mask. `camera_pose` maps the
/// camera frame into the world.
pub fn render_depth(scene: &SimScene, camera_pose: &RigidTransform) -> Rendering {
    let intr = &scene.camera.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let n = w as usize * h as usize;
    let mut depth = vec![0u16; n];
    let mut color = vec![0u8; 3 * n];
    let mut ids = vec![0u16; n];
    let origin = *camera_pose.translation();
    let colors: Vec<[u8; 3]> = scene.objects.iter().map(object_color).collect();
    for v in 0..h {
        for u in 0..w {
            let i = v as usize * w as usize + u as usize;
            let d_cam = Vec3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
            let d = camera_pose.apply_vector(&d_cam);
            let Some(hit) = cast(scene, &origin, &d) else {
                continue;
            };
            let raw = (hit.t / intr.depth_scale).round();
            if raw >= 1.0 && raw <= u16::MAX as f64 {
                depth[i] = raw as u16;
            }
            ids[i] = hit.id;
            let base = match hit.id {
                0 if hit.normal.z > 0.5 => [170, 150, 120],
                0 => [200, 200, 195],
                id => colors[id as usize - 1],
            };
            let shade = 0.3 + 0.7 * hit.normal.dot(&-d.normalize()).max(0.0);
            for c in 0..3 {
                color[3 * i + c] = (base[c] as f64 * shade).round().min(255.0) as u8;
            }
        }
    }
    Rendering {
        depth: DepthFrame::new(w, h, depth).expect("buffer sized from intrinsics"),
        color: ColorFrame::new(w, h, color).expect("buffer sized from intrinsics"),
        ids,
    }
}

/// Nearest object surface point to `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceContact {
    pub object: u16,
    pub face: Face,
    /// Surface point in world coordinates.
    pub point: Vec3,
    pub distance: f64,
    /// Position within the face, in face-local coordinates.
    pub face_uv: [f64; 2],
    pub face_half: [f64; 2],
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

pub fn closest_surface(scene: &SimScene, p: &Vec3) -> Option<SurfaceContact> {
    let mut best: Option<SurfaceContact> = None;
    for obj in &scene.objects {
        let q = obj.local(p);
        let h = obj.half();
        for axis in 0..3 {
            for sign in [-1i8, 1] {
                let face = Face { axis, sign };
                let (a, b) = other_axes(axis);
                let ca = q[a].clamp(-h[a], h[a]);
                let cb = q[b].clamp(-h[b], h[b]);
                let mut plane = sign as f64 * h[axis];
                if face == Face::FRONT {
                    plane += obj.surface.height(ca, cb);
                }
                let mut c = Vec3::zeros();
                c[axis] = plane;
                c[a] = ca;
                c[b] = cb;
                let dist = (q - c).norm();
                if best.is_none_or(|s| dist < s.distance) {
                    best = Some(SurfaceContact {
                        object: obj.id,
                        face,
                        point: obj.pose.apply_point(&c),
                        distance: dist,
                        face_uv: [ca, cb],
                        face_half: [h[a], h[b]],
                    });
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuctionModel {
    pub cup_radius: f64,
    pub theta_max_deg: f64,
    pub leak_gap: f64,
    /// The cup must be this close to a surface to engage.
    pub contact_tolerance: f64,
}

impl Default for SuctionModel {
    fn default() -> Self {
        Self {
            cup_radius: 0.015,
            theta_max_deg: 15.0,
            leak_gap: 0.0015,
            contact_tolerance: 0.005,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    BadAngle,
    EdgeLeak,
    CrinkleLeak,
    PorosityLeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PickOutcome {
    pub object: u16,
    pub sealed: bool,
    pub held_through_lift: bool,
    pub failure_mode: Option<FailureMode>,
}

/// Largest crinkle height difference between the cup center and any point
/// of the cup disk, sampled on a 0.5 mm grid.
fn crinkle_deviation(surface: &Surface, center: [f64; 2], r: f64) -> f64 {
    if matches!(surface, Surface::FlatRigid) {
        return 0.0;
    }
    let h0 = surface.height(center[0], center[1]);
    let n = (r / 0.0005).ceil() as i64;
    let mut worst: f64 = 0.0;
    for i in -n..=n {
        for j in -n..=n {
            let (dy, dz) = (i as f64 * r / n as f64, j as f64 * r / n as f64);
            if dy * dy + dz * dz <= r * r {
                worst = worst.max((surface.height(center[0] + dy, center[1] + dz) - h0).abs());
            }
        }
    }
    worst
}

/// Adjudicates a suction attempt at `point` with the cup moving along
/// `approach_dir`. The first violated rule is reported; two uniform draws
/// are always consumed from `rng` so outcomes stay aligned across runs.
pub fn attempt_suction<R: Rng + ?Sized>(
    scene: &SimScene,
    point: &Vec3,
    approach_dir: &Vec3,
    model: &SuctionModel,
    rng: &mut R,
) -> Result<PickOutcome, SimError> {
    let seal_draw: f64 = rng.random();
    let hold_draw: f64 = rng.random();
    let contact = closest_surface(scene, point)
        .filter(|c| c.distance <= model.contact_tolerance)
        .ok_or(SimError::NoSurface {
            point: [point.x, point.y, point.z],
            tolerance: model.contact_tolerance,
        })?;
    let obj = &scene.objects[contact.object as usize - 1];
    let fail = |mode| PickOutcome {
        object: obj.id,
        sealed: false,
        held_through_lift: false,
        failure_mode: Some(mode),
    };
    let n = obj.face_normal(contact.face);
    let cos = (-approach_dir.normalize()).dot(&n).clamp(-1.0, 1.0);
    if cos.acos() > model.theta_max_deg.to_radians() {
        return Ok(fail(FailureMode::BadAngle));
    }
    let r = model.cup_radius;
    let [u, v] = contact.face_uv;
    let [hu, hv] = contact.face_half;
    if u.abs() + r > hu || v.abs() + r > hv {
        return Ok(fail(FailureMode::EdgeLeak));
    }
    if contact.face == Face::FRONT && crinkle_deviation(&obj.surface, [u, v], r) > model.leak_gap {
        return Ok(fail(FailureMode::CrinkleLeak));
    }
    if seal_draw < obj.porosity {
        return Ok(fail(FailureMode::PorosityLeak));
    }
    let held = hold_draw >= obj.porosity;
    Ok(PickOutcome {
        object: obj.id,
        sealed: true,
        held_through_lift: held,
        failure_mode: (!held).then_some(FailureMode::PorosityLeak),
    })
}

/// The shelf world as an [`Environment`] for the pick loop.
pub struct SimEnv {
    scene: SimScene,
    model: SuctionModel,
    rng: ChaCha8Rng,
    pose: RobotPose,
    vacuum: bool,
    attempt: Option<PickOutcome>,
    engaged: bool,
    sealed: bool,
    frame_id: u64,
    last: Option<Rendering>,
    fault_after_moves: Option<u32>,
    moves: u32,
}

impl SimEnv {
    pub fn new(scene: SimScene, model: SuctionModel, seed: u64) -> Self {
        let pose = scene.start_pose();
        Self {
            scene,
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pose,
            vacuum: false,
            attempt: None,
            engaged: false,
            sealed: false,
            frame_id: 0,
            last: None,
            fault_after_moves: None,
            moves: 0,
        }
    }

    /// Makes every `move_to` after the first `n` fail, for fault testing.
    pub fn with_fault_after_moves(mut self, n: u32) -> Self {
        self.fault_after_moves = Some(n);
        self
    }

    pub fn scene(&self) -> &SimScene {
        &self.scene
    }

    pub fn pose(&self) -> RobotPose {
        self.pose
    }

    pub fn vacuum_on(&self) -> bool {
        self.vacuum
    }

    /// Outcome of the most recent suction attempt, kept after release.
    pub fn last_attempt(&self) -> Option<PickOutcome> {
        self.attempt
    }

    pub fn last_rendering(&self) -> Option<&Rendering> {
        self.last.as_ref()
    }

    fn try_engage(&mut self) {
        if !self.vacuum || self.engaged {
            return;
        }
        if let Ok(out) = attempt_suction(
            &self.scene,
            &self.pose.position,
            &self.pose.approach_axis,
            &self.model,
            &mut self.rng,
        ) {
            self.sealed = out.sealed;
            self.engaged = true;
            self.attempt = Some(out);
        }
    }
}

impl Environment for SimEnv {
    fn observe(&mut self) -> Result<Observation, EnvError> {
        self.frame_id += 1;
        let r = render_depth(&self.scene, &self.scene.camera_pose(&self.pose));
        let obs = Observation {
            frame_id: self.frame_id,
            color: r.color.clone(),
            depth: r.depth.clone(),
            pose: self.pose,
        };
        self.last = Some(r);
        Ok(obs)
    }

    fn move_to(&mut self, pose: &RobotPose) -> Result<(), EnvError> {
        pose.validate()?;
        if let Some(n) = self.fault_after_moves {
            if self.moves >= n {
                return Err(EnvError::Fault(format!("injected fault on move {}", self.moves + 1)));
            }
        }
        self.moves += 1;
        let moved = (pose.position - self.pose.position).norm() > 1e-12;
        self.pose = *pose;
        if self.sealed && moved && self.attempt.is_some_and(|a| !a.held_through_lift) {
            self.sealed = false;
        }
        self.try_engage();
        Ok(())
    }

    fn set_vacuum(&mut self, on: bool) -> Result<(), EnvError> {
        self.vacuum = on;
        if on {
            self.try_engage();
        } else {
            self.sealed = false;
            self.engaged = false;
        }
        Ok(())
    }

    fn vacuum_sealed(&mut self) -> Result<bool, EnvError> {
        Ok(self.vacuum && self.sealed)
    }

    fn intrinsics(&self) -> &CameraIntrinsics {
        &self.scene.camera.intrinsics
    }

    fn hand_eye(&self) -> RigidTransform {
        self.scene.hand_eye()
    }

    fn target_mask(&self, directive: &str) -> Option<PixelMask> {
        let r = self.last.as_ref()?;
        Some(match self.scene.ground(directive) {
            Some(obj) => r.mask_of(obj.id),
            None => PixelMask::empty(r.depth.width, r.depth.height),
        })
    }
}
