//! Procedural rooms with analytic signed distances, and a sphere-tracing depth renderer.
//!
//! World frame is z-up, in meters. Cameras follow the usual vision convention:
//! x right, y down, z forward.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Hit tolerance of the sphere tracer, meters.
pub const HIT_TOLERANCE: f64 = 1e-4;
/// Rays travelling further than this report no depth.
pub const MAX_RANGE: f64 = 10.0;
const MAX_STEPS: usize = 1024;

/// Analytic shape.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box given by its center and half extents.
    Box { center: Vec3, half: Vec3 },
    Sphere { center: Vec3, radius: f64 },
    /// Half-space `n·p <= offset` is solid; `normal` is unit length.
    Plane { normal: Vec3, offset: f64 },
}

impl Primitive {
    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Box { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Plane { normal, offset } => normal.dot(p) - offset,
        }
    }

    /// Axis-aligned bounds; `None` for unbounded primitives.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        match self {
            Primitive::Box { center, half } => Some((center - half, center + half)),
            Primitive::Sphere { center, radius } => {
                let r = Vec3::repeat(*radius);
                Some((center - r, center + r))
            }
            Primitive::Plane { .. } => None,
        }
    }

    fn to_line(&self) -> String {
        match self {
            Primitive::Box { center: c, half: h } => {
                format!("box {} {} {} {} {} {}", c.x, c.y, c.z, h.x, h.y, h.z)
            }
            Primitive::Sphere { center: c, radius } => {
                format!("sphere {} {} {} {}", c.x, c.y, c.z, radius)
            }
            Primitive::Plane { normal: n, offset } => {
                format!("plane {} {} {} {}", n.x, n.y, n.z, offset)
            }
        }
    }
}

/// Axis-aligned region in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn expanded(&self, by: f64) -> Aabb {
        Aabb::new(self.min - Vec3::repeat(by), self.max + Vec3::repeat(by))
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

/// A set of primitives whose union is the solid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Region containing every bounded primitive.
    pub extent: Aabb,
    /// Free-space region a scanner can move around in; surfaces on its
    /// boundary face inward. Ground-truth comparisons are restricted to it.
    pub interior: Aabb,
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>, extent: Aabb) -> Self {
        Self {
            primitives,
            extent,
            interior: extent,
        }
    }

    /// Composite signed distance: minimum over primitives, `+inf` for an empty scene.
    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Text form: `extent`/`interior` header lines then one primitive per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let e = &self.extent;
        let i = &self.interior;
        s.push_str(&format!(
            "extent {} {} {} {} {} {}\n",
            e.min.x, e.min.y, e.min.z, e.max.x, e.max.y, e.max.z
        ));
        s.push_str(&format!(
            "interior {} {} {} {} {} {}\n",
            i.min.x, i.min.y, i.min.z, i.max.x, i.max.y, i.max.z
        ));
        for p in &self.primitives {
            s.push_str(&p.to_line());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Scene> {
        let mut prims = Vec::new();
        let mut extent = None;
        let mut interior = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap_or_default();
            let nums: Vec<f64> = parts
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("scene line {}: {e}", lineno + 1)))?;
            let want = |n: usize| -> Result<()> {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(Error::Format(format!(
                        "scene line {}: '{kind}' takes {n} numbers, got {}",
                        lineno + 1,
                        nums.len()
                    )))
                }
            };
            match kind {
                "box" => {
                    want(6)?;
                    prims.push(Primitive::Box {
                        center: Vec3::new(nums[0], nums[1], nums[2]),
                        half: Vec3::new(nums[3], nums[4], nums[5]),
                    });
                }
                "sphere" => {
                    want(4)?;
                    prims.push(Primitive::Sphere {
                        center: Vec3::new(nums[0], nums[1], nums[2]),
                        radius: nums[3],
                    });
                }
                "plane" => {
                    want(4)?;
                    let n = Vec3::new(nums[0], nums[1], nums[2]);
                    let len = n.norm();
                    if len == 0.0 {
                        return Err(Error::Format(format!("scene line {}: zero plane normal", lineno + 1)));
                    }
                    prims.push(Primitive::Plane {
                        normal: n / len,
                        offset: nums[3] / len,
                    });
                }
                "extent" | "interior" => {
                    want(6)?;
                    let b = Aabb::new(
                        Vec3::new(nums[0], nums[1], nums[2]),
                        Vec3::new(nums[3], nums[4], nums[5]),
                    );
                    if kind == "extent" {
                        extent = Some(b);
                    } else {
                        interior = Some(b);
                    }
                }
                other => {
                    return Err(Error::Format(format!(
                        "scene line {}: unknown primitive '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        let extent = match extent {
            Some(e) => e,
            None => bounds_of(&prims).ok_or_else(|| {
                Error::Format("scene has no bounded primitive and no extent line".into())
            })?,
        };
        Ok(Scene {
            primitives: prims,
            extent,
            interior: interior.unwrap_or(extent),
        })
    }
}

fn bounds_of(prims: &[Primitive]) -> Option<Aabb> {
    let mut out: Option<Aabb> = None;
    for (lo, hi) in prims.iter().filter_map(Primitive::bounds) {
        out = Some(match out {
            None => Aabb::new(lo, hi),
            Some(b) => Aabb::new(b.min.inf(&lo), b.max.sup(&hi)),
        });
    }
    out
}

/// Generates a room: a floor slab, two to four wall slabs and two to six
/// pieces of box or sphere furniture, all inside a 3–6 m extent.
pub fn make_room_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce0e);
    let width: f64 = rng.gen_range(3.0..4.6);
    let depth: f64 = rng.gen_range(3.0..4.6);
    let height: f64 = rng.gen_range(2.3..2.7);
    let t = 0.1;
    let interior = Aabb::new(Vec3::zeros(), Vec3::new(width, depth, height));
    let extent = interior.expanded(t);

    let mut prims = Vec::new();
    // Floor slab covering the full footprint.
    prims.push(Primitive::Box {
        center: Vec3::new(width / 2.0, depth / 2.0, -t / 2.0),
        half: Vec3::new(width / 2.0 + t, depth / 2.0 + t, t / 2.0),
    });
    let n_walls = rng.gen_range(2..=4usize);
    let mut sides = [0usize, 1, 2, 3];
    for i in 0..4 {
        let j = rng.gen_range(i..4);
        sides.swap(i, j);
    }
    for &side in sides.iter().take(n_walls) {
        let zc = (height - t) / 2.0;
        let hz = (height + t) / 2.0;
        let wall = match side {
            0 => Primitive::Box {
                center: Vec3::new(-t / 2.0, depth / 2.0, zc),
                half: Vec3::new(t / 2.0, depth / 2.0 + t, hz),
            },
            1 => Primitive::Box {
                center: Vec3::new(width + t / 2.0, depth / 2.0, zc),
                half: Vec3::new(t / 2.0, depth / 2.0 + t, hz),
            },
            2 => Primitive::Box {
                center: Vec3::new(width / 2.0, -t / 2.0, zc),
                half: Vec3::new(width / 2.0 + t, t / 2.0, hz),
            },
            _ => Primitive::Box {
                center: Vec3::new(width / 2.0, depth + t / 2.0, zc),
                half: Vec3::new(width / 2.0 + t, t / 2.0, hz),
            },
        };
        prims.push(wall);
    }

    let n_furniture = rng.gen_range(2..=6usize);
    let margin = 0.15;
    let mut placed: Vec<(Vec3, Vec3)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n_furniture && attempts < 200 {
        attempts += 1;
        let sphere = rng.gen_bool(0.35);
        let (center, half, prim) = if sphere {
            let r: f64 = rng.gen_range(0.15..0.4);
            let c = Vec3::new(
                rng.gen_range(margin + r..width - margin - r),
                rng.gen_range(margin + r..depth - margin - r),
                r,
            );
            (c, Vec3::repeat(r), Primitive::Sphere { center: c, radius: r })
        } else {
            let h = Vec3::new(
                rng.gen_range(0.15..0.6),
                rng.gen_range(0.15..0.6),
                rng.gen_range(0.2..0.6),
            );
            let c = Vec3::new(
                rng.gen_range(margin + h.x..width - margin - h.x),
                rng.gen_range(margin + h.y..depth - margin - h.y),
                h.z,
            );
            (c, h, Primitive::Box { center: c, half: h })
        };
        // Keep a walkway free around each object so the scanner can orbit.
        let overlaps = placed.iter().any(|(c, h)| {
            (0..2).all(|i| (center[i] - c[i]).abs() < half[i] + h[i] + 0.2)
        });
        if !overlaps {
            placed.push((center, half));
            prims.push(prim);
        }
    }
    Scene {
        primitives: prims,
        extent,
        interior,
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    /// 160×120 pixels with a roughly 60° horizontal field of view.
    fn default() -> Self {
        Self::with_fov(160, 120, 60.0)
    }
}

impl CameraIntrinsics {
    pub fn with_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Camera-space ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-space point to the nearest pixel; `None` when behind
    /// the camera or outside the image.
    pub fn project(&self, p: &Vec3) -> Option<(usize, usize)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = (self.fx * p.x / p.z + self.cx).round();
        let v = (self.fy * p.y / p.z + self.cy).round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose(pub Matrix4<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Pose(m)
    }

    /// Camera at `eye` looking at `target` with world z up.
    pub fn look_at(eye: Vec3, target: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&Vec3::z());
        if right.norm() < 1e-9 {
            right = Vec3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Self::from_parts(Matrix3::from_columns(&[right, down, forward]), eye)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Checks orthonormality and `det = +1` within `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = self.rotation();
        let last_row_ok = (self.0[(3, 0)].abs() + self.0[(3, 1)].abs() + self.0[(3, 2)].abs()) < tol
            && (self.0[(3, 3)] - 1.0).abs() < tol;
        (r.transpose() * r - Matrix3::identity()).abs().max() < tol
            && (r.determinant() - 1.0).abs() < tol
            && last_row_ok
    }
}

/// Depth raster with camera parameters. Depth is the camera-space z of the
/// first surface along each pixel ray, in meters; `0` marks no measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    /// Row-major, `width * height` values.
    pub depths: Vec<f32>,
}

impl DepthFrame {
    pub fn depth(&self, u: usize, v: usize) -> f32 {
        self.depths[v * self.intrinsics.width + u]
    }

    /// World-space point seen at pixel `(u, v)`, if the pixel has a depth.
    pub fn backproject(&self, u: usize, v: usize) -> Option<Vec3> {
        let d = self.depth(u, v);
        if d <= 0.0 {
            return None;
        }
        let cam = self.intrinsics.ray(u as f64, v as f64) * d as f64;
        Some(self.pose.transform_point(&cam))
    }

    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Distance along the unit direction `dir` from `origin` to the first surface.
pub fn sphere_trace(scene: &Scene, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let p = origin + dir * t;
        let s = scene.sdf(&p);
        if s < HIT_TOLERANCE {
            return Some(t);
        }
        t += s;
        if t > MAX_RANGE {
            return None;
        }
    }
    None
}

/// Renders a depth frame by sphere tracing every pixel ray.
pub fn render_depth(scene: &Scene, pose: Pose, intrinsics: CameraIntrinsics) -> Result<DepthFrame> {
    intrinsics.validate()?;
    if !pose.is_rigid(1e-6) {
        return Err(Error::Argument("pose is not a rigid transform".into()));
    }
    let rot = pose.rotation();
    let origin = pose.translation();
    let mut depths = vec![0.0f32; intrinsics.width * intrinsics.height];
    for v in 0..intrinsics.height {
        for u in 0..intrinsics.width {
            let ray = intrinsics.ray(u as f64, v as f64);
            let len = ray.norm();
            let dir = rot * (ray / len);
            if let Some(t) = sphere_trace(scene, &origin, &dir) {
                depths[v * intrinsics.width + u] = (t / len) as f32;
            }
        }
    }
    Ok(DepthFrame {
        intrinsics,
        pose,
        depths,
    })
}

/// Minimum clearance between a sampled camera and any surface, meters.
pub const CAMERA_CLEARANCE: f64 = 0.3;

/// Samples `n` camera poses orbiting the room interior, each looking across
/// the room at a point near the floor on the far side.
pub fn sample_trajectory(scene: &Scene, n: usize, seed: u64) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::Argument("trajectory needs at least one pose".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1e_c70a);
    let room = scene.interior;
    let center = room.center();
    let half = (room.max - room.min) * 0.5;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        let mut chosen = None;
        for attempt in 0..200 {
            let shrink = 1.0 - 0.004 * attempt as f64;
            let angle = phase + std::f64::consts::TAU * i as f64 / n as f64 + rng.gen_range(-0.15..0.15);
            let radius = rng.gen_range(0.35..0.6) * shrink;
            let eye = Vec3::new(
                center.x + radius * half.x * angle.cos(),
                center.y + radius * half.y * angle.sin(),
                room.min.z + rng.gen_range(1.2..1.8f64).min(room.max.z - 0.4).max(0.4),
            );
            if scene.sdf(&eye) <= CAMERA_CLEARANCE || !room.contains(&eye, 0.0) {
                continue;
            }
            let across = Vec3::new(
                center.x - 0.5 * radius * half.x * angle.cos() + rng.gen_range(-0.3..0.3),
                center.y - 0.5 * radius * half.y * angle.sin() + rng.gen_range(-0.3..0.3),
                room.min.z + rng.gen_range(0.2..0.7),
            );
            chosen = Some(Pose::look_at(eye, across));
            break;
        }
        let pose = chosen.ok_or_else(|| {
            Error::Sampling(format!("no free camera position found for trajectory pose {i}"))
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

/// Renders `n` frames along a sampled trajectory.
pub fn scan_scene(scene: &Scene, n: usize, intrinsics: CameraIntrinsics, seed: u64) -> Result<Vec<DepthFrame>> {
    sample_trajectory(scene, n, seed)?
        .into_iter()
        .map(|pose| render_depth(scene, pose, intrinsics))
        .collect()
}

/// Convenience for tests and examples: world point of a voxel center.
pub fn voxel_center(c: [i32; 3], voxel_size: f64) -> Vec3 {
    Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * voxel_size
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall_scene() -> Scene {
        Scene::new(
            vec![Primitive::Plane {
                normal: Vec3::new(0.0, 0.0, -1.0),
                offset: -1.0,
            }],
            Aabb::new(Vec3::repeat(-5.0), Vec3::repeat(5.0)),
        )
    }

    #[test]
    fn room_is_deterministic() {
        assert_eq!(make_room_scene(0), make_room_scene(0));
        assert_ne!(make_room_scene(0).primitives, make_room_scene(1).primitives);
    }

    #[test]
    fn room_primitives_inside_extent() {
        for seed in 0..20 {
            let scene = make_room_scene(seed);
            let w = scene.extent.max.x - scene.extent.min.x;
            assert!(w >= 3.0 && w <= 6.0);
            for prim in &scene.primitives {
                let (lo, hi) = prim.bounds().unwrap();
                // Sample the primitive's bounding box corners and center.
                for &fx in &[0.0, 0.5, 1.0] {
                    for &fy in &[0.0, 0.5, 1.0] {
                        for &fz in &[0.0, 0.5, 1.0] {
                            let p = Vec3::new(
                                lo.x + fx * (hi.x - lo.x),
                                lo.y + fy * (hi.y - lo.y),
                                lo.z + fz * (hi.z - lo.z),
                            );
                            assert!(scene.extent.contains(&p, 1e-9), "seed {seed}: {p:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn room_has_expected_primitive_counts() {
        for seed in 0..20 {
            let scene = make_room_scene(seed);
            let spheres = scene
                .primitives
                .iter()
                .filter(|p| matches!(p, Primitive::Sphere { .. }))
                .count();
            // floor + walls + furniture
            let n = scene.primitives.len();
            assert!(n >= 1 + 2 + 2 && n <= 1 + 4 + 6, "seed {seed}: {n}");
            assert!(spheres <= 6);
        }
    }

    #[test]
    fn wall_depth_one_meter() {
        let intr = CameraIntrinsics::with_fov(33, 25, 60.0);
        let frame = render_depth(&wall_scene(), Pose::identity(), intr).unwrap();
        let d = frame.depth(16, 12);
        assert!((d - 1.0).abs() < 1e-3, "{d}");
        // Off-axis pixels report z-depth, which is also 1 for a fronto-parallel wall.
        assert!((frame.depth(0, 0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn empty_view_is_all_zero() {
        let scene = Scene::new(
            vec![Primitive::Sphere {
                center: Vec3::new(0.0, 0.0, -3.0),
                radius: 0.5,
            }],
            Aabb::new(Vec3::repeat(-4.0), Vec3::repeat(4.0)),
        );
        let frame = render_depth(&scene, Pose::identity(), CameraIntrinsics::with_fov(16, 12, 60.0)).unwrap();
        assert_eq!(frame.valid_count(), 0);
    }

    #[test]
    fn sphere_on_axis_depth() {
        for &(z, r) in &[(2.0, 0.5), (1.3, 0.2), (4.0, 1.0)] {
            let scene = Scene::new(
                vec![Primitive::Sphere {
                    center: Vec3::new(0.0, 0.0, z),
                    radius: r,
                }],
                Aabb::new(Vec3::repeat(-6.0), Vec3::repeat(6.0)),
            );
            let intr = CameraIntrinsics::with_fov(21, 21, 40.0);
            let frame = render_depth(&scene, Pose::identity(), intr).unwrap();
            let d = frame.depth(10, 10) as f64;
            assert!((d - (z - r)).abs() < 1e-3, "z={z} r={r} depth={d}");
        }
    }

    #[test]
    fn rendered_points_lie_on_surfaces() {
        let scene = make_room_scene(3);
        let poses = sample_trajectory(&scene, 3, 3).unwrap();
        for pose in poses {
            let frame = render_depth(&scene, pose, CameraIntrinsics::with_fov(40, 30, 60.0)).unwrap();
            assert!(frame.valid_count() > 0);
            for v in 0..30 {
                for u in 0..40 {
                    if let Some(p) = frame.backproject(u, v) {
                        assert!(scene.sdf(&p).abs() < 1e-3, "{}", scene.sdf(&p));
                    }
                }
            }
        }
    }

    #[test]
    fn trajectory_deterministic_and_clear() {
        let scene = make_room_scene(5);
        let a = sample_trajectory(&scene, 12, 9).unwrap();
        let b = sample_trajectory(&scene, 12, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_trajectory(&scene, 1, 0).unwrap().len(), 1);
        for pose in &a {
            assert!(pose.is_rigid(1e-6));
            assert!(scene.sdf(&pose.translation()) > CAMERA_CLEARANCE);
        }
        assert!(sample_trajectory(&scene, 0, 0).is_err());
    }

    #[test]
    fn scene_text_round_trip() {
        let scene = make_room_scene(2);
        let back = Scene::from_text(&scene.to_text()).unwrap();
        assert_eq!(back.primitives.len(), scene.primitives.len());
        for (a, b) in back.primitives.iter().zip(&scene.primitives) {
            let p = Vec3::new(0.3, 1.1, 0.7);
            assert!((a.sdf(&p) - b.sdf(&p)).abs() < 1e-12);
        }
        assert!(Scene::from_text("cone 1 2 3").is_err());
        assert!(Scene::from_text("box 1 2").is_err());
    }

    #[test]
    fn look_at_is_rigid() {
        let p = Pose::look_at(Vec3::new(1.0, 2.0, 1.5), Vec3::new(3.0, 0.5, 0.2));
        assert!(p.is_rigid(1e-9));
        let fwd = p.rotation().column(2).into_owned();
        let expected = (Vec3::new(3.0, 0.5, 0.2) - Vec3::new(1.0, 2.0, 1.5)).normalize();
        assert!((fwd - expected).norm() < 1e-12);
        // Image "down" points toward negative world z.
        assert!(p.rotation().column(1).z < 0.0);
    }
}
