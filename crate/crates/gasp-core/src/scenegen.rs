//! Procedural multi-view scene synthesis with exact ground truth.
//!
//! A scene is a cloud of feature points sampled on randomly oriented
//! planar or gently curved rectangular patches, plus optional featureless
//! occluder surfaces that only block visibility. Rendering a frame
//! projects every point through a pinhole camera and z-buffers depths per
//! pixel, so depth maps, token grids, and tracks are all derived from the
//! same point cloud and agree exactly.
//!
//! Visual tokens are synthesized directly at patch resolution: each token
//! is the noise-perturbed mean of the descriptors of the visible points
//! landing in that patch, and the empty patch is a zero vector. Descriptors
//! are unit-norm samples of a smooth random field over each surface, which
//! keeps patch means informative while distant patches decorrelate.
//!
//! Everything is deterministic in the scene seed; per-frame token noise is
//! keyed by the frame's timeline index, so rendering any subset of frames
//! reproduces the same tokens those frames would have in any other subset.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::{
    self, patch_index, CameraFrame, CameraModel, GeometryError, SamplingPolicy, TrackSet,
};
use crate::linalg::{Mat3, Vec3};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(&'static str),
    #[error("trajectory produces no camera motion")]
    InvalidTrajectory,
    #[error("invalid render request: {0}")]
    InvalidRequest(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Camera path family followed over the virtual timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    /// Fixed pose; only useful for tests and diagnostics.
    Static,
    /// Circular arc around the scene center at constant radius.
    Orbit,
    /// Straight lateral translation at constant distance.
    Dolly,
    /// Seeded Gaussian position steps, always looking at the center.
    RandomWalk,
}

/// What to synthesize.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Total surface count, including the backdrop.
    pub num_surfaces: usize,
    /// Average feature points per surface; the total
    /// `num_surfaces * points_per_surface` is distributed over surfaces
    /// proportionally to area.
    pub points_per_surface: usize,
    /// Length scale of the scene in world units.
    pub world_extent: f64,
    /// Descriptor dimensionality.
    pub feature_dim: usize,
    /// Probability of inserting one opaque occluder surface.
    pub occluder_prob: f64,
    pub trajectory: Trajectory,
    /// Std of i.i.d. Gaussian noise added to non-empty tokens per frame.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_surfaces == 0 || self.points_per_surface == 0 {
            return Err(SceneError::InvalidSpec("surface and point counts must be positive"));
        }
        if self.feature_dim < 8 {
            return Err(SceneError::InvalidSpec("feature_dim must be at least 8"));
        }
        if !(self.world_extent > 0.0) {
            return Err(SceneError::InvalidSpec("world_extent must be positive"));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) {
            return Err(SceneError::InvalidSpec("occluder_prob must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(SceneError::InvalidSpec("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_surfaces: 6,
            points_per_surface: 2500,
            world_extent: 2.0,
            feature_dim: 32,
            occluder_prob: 0.3,
            trajectory: Trajectory::Orbit,
            noise_sigma: 0.05,
            rng_seed: 0,
        }
    }
}

/// Camera and timeline parameters for rendering.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderParams {
    pub image_height: usize,
    pub image_width: usize,
    /// Focal length in pixels (fx = fy; principal point at image center).
    pub focal: f64,
    /// Virtual timeline length; frame indices live in `[0, t_max)`.
    pub t_max: usize,
    /// Camera distance from the scene center, as a multiple of
    /// `world_extent`.
    pub radius_factor: f64,
    /// Total orbit sweep over the timeline, radians.
    pub orbit_arc: f64,
    /// Total dolly translation over the timeline, as a multiple of
    /// `world_extent`.
    pub dolly_span: f64,
    /// Random-walk step std per timeline step, as a multiple of
    /// `world_extent`.
    pub walk_step_frac: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            focal: 64.0,
            t_max: 64,
            radius_factor: 2.2,
            orbit_arc: 0.9,
            dolly_span: 0.8,
            walk_step_frac: 0.02,
        }
    }
}

/// Rectangular surface patch, optionally bulged along its normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePatch {
    pub center: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
    pub normal: Vec3,
    /// Normal displacement at the rim; 0 for planar patches.
    pub curvature: f64,
}

impl SurfacePatch {
    /// Point at local coordinates `(a, b)`, each in `[-1, 1]`.
    pub fn point_at(&self, a: f64, b: f64) -> Vec3 {
        self.center
            .add(self.axis_u.scale(a * self.half_u))
            .add(self.axis_v.scale(b * self.half_v))
            .add(self.normal.scale(self.curvature * 0.5 * (a * a + b * b)))
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_u * self.half_v
    }
}

/// One feature point: a position, the surface it lies on, and a unit-norm
/// descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub position: Vec3,
    pub surface: usize,
    pub descriptor: Vec<f64>,
}

/// A synthesized scene: feature points plus featureless occluder geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub surfaces: Vec<SurfacePatch>,
    pub points: Vec<ScenePoint>,
    pub occluders: Vec<SurfacePatch>,
    /// Dense samples on the occluders; they write depth but carry no
    /// descriptor, so they block without contributing tokens.
    pub occluder_samples: Vec<Vec3>,
}

/// One rendered multi-view sequence with exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSequence {
    pub frames: Vec<CameraFrame>,
    /// Timeline index of each frame; offsets between them define the
    /// temporal distance between frame pairs.
    pub frame_indices: Vec<usize>,
    /// Per frame: `P*P x feature_dim`, patch-major row-major.
    pub token_grids: Vec<Vec<f64>>,
    pub patch_grid: (usize, usize),
    pub feature_dim: usize,
    pub tracks: TrackSet,
    /// Per frame: mean valid depth per patch; `0.0` marks a patch with no
    /// visible feature points, which is excluded from depth pooling.
    pub patch_depths: Vec<Vec<f64>>,
}

impl RenderedSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.frames[0].height, self.frames[0].width)
    }
}

/// Number of smooth descriptor-field waves per surface.
const FIELD_WAVES: usize = 6;

/// Builds the deterministic point cloud for a spec.
///
/// Surface 0 is a large backdrop facing the canonical viewing direction
/// (`-z` toward the camera start); the remaining surfaces are smaller,
/// randomly oriented, and may be gently curved. The total point budget
/// `num_surfaces * points_per_surface` is split across surfaces by area
/// (largest-remainder rounding), so dense backdrops stay well covered.
pub fn synthesize_scene(spec: &SceneSpec) -> Result<Scene, SceneError> {
    spec.validate()?;
    let e = spec.world_extent;
    let mut rng = rng_from_seed(derive_seed(spec.rng_seed, "scene"));

    let mut surfaces = Vec::with_capacity(spec.num_surfaces);
    surfaces.push(SurfacePatch {
        center: Vec3::new(0.0, 0.0, 0.6 * e),
        axis_u: Vec3::new(1.0, 0.0, 0.0),
        axis_v: Vec3::new(0.0, 1.0, 0.0),
        half_u: 1.55 * e,
        half_v: 1.55 * e,
        normal: Vec3::new(0.0, 0.0, -1.0),
        curvature: 0.0,
    });
    for _ in 1..spec.num_surfaces {
        let center = Vec3::new(
            rng.gen_range(-0.5..0.5) * e,
            rng.gen_range(-0.5..0.5) * e,
            rng.gen_range(-0.5..0.3) * e,
        );
        // Normal within a cone of the viewing axis, never edge-on.
        let normal = Vec3::new(
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
            -1.0,
        )
        .normalized();
        let axis_u = Vec3::new(0.0, 1.0, 0.0).cross(normal).normalized();
        let axis_v = normal.cross(axis_u);
        let half_u = rng.gen_range(0.18..0.35) * e;
        let half_v = rng.gen_range(0.18..0.35) * e;
        let curvature = rng.gen_range(-0.5..0.5) * half_u.min(half_v);
        surfaces.push(SurfacePatch {
            center,
            axis_u,
            axis_v,
            half_u,
            half_v,
            normal,
            curvature,
        });
    }

    let counts = allocate_by_area(&surfaces, spec.num_surfaces * spec.points_per_surface);
    let mut points = Vec::with_capacity(spec.num_surfaces * spec.points_per_surface);
    for (sid, (surface, &count)) in surfaces.iter().zip(&counts).enumerate() {
        let field = DescriptorField::sample(spec.feature_dim, &mut rng);
        for _ in 0..count {
            let a = rng.gen_range(-1.0..1.0);
            let b = rng.gen_range(-1.0..1.0);
            points.push(ScenePoint {
                position: surface.point_at(a, b),
                surface: sid,
                descriptor: field.descriptor_at(a, b),
            });
        }
    }

    let mut occluders = Vec::new();
    let mut occluder_samples = Vec::new();
    if rng.gen_bool(spec.occluder_prob) {
        let occ = SurfacePatch {
            center: Vec3::new(
                rng.gen_range(-0.4..0.4) * e,
                rng.gen_range(-0.4..0.4) * e,
                -0.9 * e,
            ),
            axis_u: Vec3::new(1.0, 0.0, 0.0),
            axis_v: Vec3::new(0.0, 1.0, 0.0),
            half_u: rng.gen_range(0.25..0.35) * e,
            half_v: rng.gen_range(0.25..0.35) * e,
            normal: Vec3::new(0.0, 0.0, -1.0),
            curvature: 0.0,
        };
        sample_opaque(&occ, 56, &mut occluder_samples);
        occluders.push(occ);
    }

    Ok(Scene {
        spec: *spec,
        surfaces,
        points,
        occluders,
        occluder_samples,
    })
}

/// Splits `total` over surfaces proportionally to area, exactly.
fn allocate_by_area(surfaces: &[SurfacePatch], total: usize) -> Vec<usize> {
    let area_sum: f64 = surfaces.iter().map(|s| s.area()).sum();
    let shares: Vec<f64> = surfaces
        .iter()
        .map(|s| total as f64 * s.area() / area_sum)
        .collect();
    let mut counts: Vec<usize> = shares.iter().map(|&x| x as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    // Largest remainder, ties to the lower index.
    let mut order: Vec<usize> = (0..surfaces.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = shares[i] - counts[i] as f64;
        let rj = shares[j] - counts[j] as f64;
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    let mut k = 0;
    while assigned < total {
        counts[order[k % order.len()]] += 1;
        assigned += 1;
        k += 1;
    }
    counts
}

/// Dense deterministic grid of samples over a surface.
fn sample_opaque(surface: &SurfacePatch, per_side: usize, out: &mut Vec<Vec3>) {
    for i in 0..per_side {
        for j in 0..per_side {
            let a = (2 * i + 1) as f64 / per_side as f64 - 1.0;
            let b = (2 * j + 1) as f64 / per_side as f64 - 1.0;
            out.push(surface.point_at(a, b));
        }
    }
}

/// Smooth random descriptor field over a surface's local coordinates:
/// a few random plane waves with random coefficient directions. Nearby
/// points get similar descriptors, patches a few cells apart decorrelate,
/// and every sampled descriptor is normalized to unit length.
struct DescriptorField {
    omegas: [(f64, f64); FIELD_WAVES],
    phases: [f64; FIELD_WAVES],
    coeffs: Vec<f64>, // FIELD_WAVES x dim
    dim: usize,
}

impl DescriptorField {
    fn sample(dim: usize, rng: &mut crate::rng::DetRng) -> Self {
        let mut omegas = [(0.0, 0.0); FIELD_WAVES];
        let mut phases = [0.0; FIELD_WAVES];
        for k in 0..FIELD_WAVES {
            let mag = rng.gen_range(4.0..12.0);
            let dir = rng.gen_range(0.0..2.0 * scalar::PI);
            omegas[k] = (mag * scalar::cos(dir), mag * scalar::sin(dir));
            phases[k] = rng.gen_range(0.0..2.0 * scalar::PI);
        }
        let scale = 1.0 / scalar::sqrt(FIELD_WAVES as f64);
        let coeffs = (0..FIELD_WAVES * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self {
            omegas,
            phases,
            coeffs,
            dim,
        }
    }

    fn descriptor_at(&self, a: f64, b: f64) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for k in 0..FIELD_WAVES {
            let (wa, wb) = self.omegas[k];
            let c = scalar::cos(wa * a + wb * b + self.phases[k]);
            let row = &self.coeffs[k * self.dim..(k + 1) * self.dim];
            for (dst, &w) in d.iter_mut().zip(row) {
                *dst += c * w;
            }
        }
        let norm = scalar::sqrt(d.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
        for x in &mut d {
            *x /= norm;
        }
        d
    }
}

/// Camera pose on the trajectory at timeline index `t`.
fn camera_pose(
    trajectory: Trajectory,
    params: &RenderParams,
    extent: f64,
    t: usize,
    walk: &[Vec3],
) -> Result<CameraModel, SceneError> {
    let rho = params.radius_factor * extent;
    let steps = (params.t_max.max(2) - 1) as f64;
    let center = match trajectory {
        Trajectory::Static => Vec3::new(0.0, 0.0, -rho),
        Trajectory::Orbit => {
            let theta = -params.orbit_arc / 2.0 + params.orbit_arc * t as f64 / steps;
            Vec3::new(rho * scalar::sin(theta), 0.0, -rho * scalar::cos(theta))
        }
        Trajectory::Dolly => {
            let span = params.dolly_span * extent;
            let center = Vec3::new(-span / 2.0 + span * t as f64 / steps, 0.0, -rho);
            // A dolly translates with fixed orientation, so frame-to-frame
            // image motion of a fronto-parallel plane is a pure shift.
            let r = Mat3::identity();
            return CameraModel::new(intrinsics(params), r, r.mul_vec(center).scale(-1.0))
                .map_err(|_| SceneError::InvalidTrajectory);
        }
        Trajectory::RandomWalk => walk[t],
    };
    look_at_camera(center, Vec3::zero(), intrinsics(params))
        .map_err(|_| SceneError::InvalidTrajectory)
}

fn intrinsics(params: &RenderParams) -> Mat3 {
    Mat3::new([
        [params.focal, 0.0, params.image_width as f64 / 2.0],
        [0.0, params.focal, params.image_height as f64 / 2.0],
        [0.0, 0.0, 1.0],
    ])
}

/// Builds a camera at `center` looking at `target`, `+y` world pointing
/// down the image.
pub fn look_at_camera(
    center: Vec3,
    target: Vec3,
    k: Mat3,
) -> Result<CameraModel, GeometryError> {
    let forward = target.sub(center).normalized();
    let up = Vec3::new(0.0, 1.0, 0.0);
    let right = up.cross(forward).normalized();
    let down = forward.cross(right);
    let r = Mat3::from_rows(right, down, forward);
    let t = r.mul_vec(center).scale(-1.0);
    CameraModel::new(k, r, t)
}

/// Projects points into the frame and keeps the nearest depth per pixel.
/// Pixels nothing lands in stay `0.0`, the invalid-depth marker.
fn splat_points(
    camera: &CameraModel,
    points: impl Iterator<Item = Vec3>,
    depth_map: &mut [f64],
    h: usize,
    w: usize,
) {
    for pos in points {
        if let Ok(((u, v), d)) = geometry::project(camera, pos) {
            if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
                let idx = scalar::floor(v) as usize * w + scalar::floor(u) as usize;
                if depth_map[idx] <= 0.0 || d < depth_map[idx] {
                    depth_map[idx] = d;
                }
            }
        }
    }
}

fn walk_positions(scene: &Scene, params: &RenderParams) -> Vec<Vec3> {
    let rho = params.radius_factor * scene.spec.world_extent;
    let step = params.walk_step_frac * scene.spec.world_extent;
    let mut rng = rng_from_seed(derive_seed(scene.spec.rng_seed, "walk"));
    let mut pos = Vec3::new(0.0, 0.0, -rho);
    let mut out = Vec::with_capacity(params.t_max);
    for _ in 0..params.t_max {
        out.push(pos);
        let g = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        pos = pos.add(g.scale(step));
    }
    out
}

/// Renders the frames at `frame_indices` (strictly increasing timeline
/// positions) and derives tokens, patch depths, and ground-truth tracks.
pub fn render_sequence(
    scene: &Scene,
    params: &RenderParams,
    frame_indices: &[usize],
    patch_grid: (usize, usize),
    track_grid: (usize, usize),
    policy: &SamplingPolicy,
) -> Result<RenderedSequence, SceneError> {
    scene.spec.validate()?;
    if frame_indices.len() < 2 {
        return Err(SceneError::InvalidRequest("at least two frames are required"));
    }
    if !frame_indices.windows(2).all(|w| w[0] < w[1]) {
        return Err(SceneError::InvalidRequest("frame indices must be strictly increasing"));
    }
    if *frame_indices.last().unwrap() >= params.t_max {
        return Err(SceneError::InvalidRequest("frame index beyond the timeline"));
    }
    if patch_grid.0 == 0 || patch_grid.1 == 0 || track_grid.0 == 0 || track_grid.1 == 0 {
        return Err(SceneError::InvalidRequest("grids must be non-empty"));
    }

    let walk = if scene.spec.trajectory == Trajectory::RandomWalk {
        walk_positions(scene, params)
    } else {
        Vec::new()
    };
    let poses: Vec<CameraModel> = frame_indices
        .iter()
        .map(|&t| camera_pose(scene.spec.trajectory, params, scene.spec.world_extent, t, &walk))
        .collect::<Result<_, _>>()?;
    if scene.spec.trajectory != Trajectory::Static {
        let first = poses[0].center();
        if poses.iter().all(|p| p.center().sub(first).norm() < 1e-12) {
            return Err(SceneError::InvalidTrajectory);
        }
    }

    let (h, w) = (params.image_height, params.image_width);
    let num_patches = patch_grid.0 * patch_grid.1;
    let dim = scene.spec.feature_dim;

    let mut frames = Vec::with_capacity(poses.len());
    let mut token_grids = Vec::with_capacity(poses.len());
    let mut patch_depths_all = Vec::with_capacity(poses.len());

    for (&t, camera) in frame_indices.iter().zip(&poses) {
        // Z-buffer every point; feature and occluder samples both block.
        let mut depth_map = vec![0.0f64; h * w];
        splat_points(camera, scene.points.iter().map(|p| p.position), &mut depth_map, h, w);
        splat_points(camera, scene.occluder_samples.iter().copied(), &mut depth_map, h, w);

        // Tokens: mean descriptor of visible points per patch.
        let mut tokens = vec![0.0f64; num_patches * dim];
        let mut counts = vec![0usize; num_patches];
        let mut depth_sum = vec![0.0f64; num_patches];
        let mut depth_cnt = vec![0usize; num_patches];
        for p in &scene.points {
            let Ok(((u, v), d)) = geometry::project(camera, p.position) else {
                continue;
            };
            if !(u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64) {
                continue;
            }
            let z = depth_map[scalar::floor(v) as usize * w + scalar::floor(u) as usize];
            if z <= 0.0 || scalar::abs(d - z) >= policy.depth_rel_tol * d.min(z) {
                continue; // occluded at this pixel
            }
            let patch = patch_index((u, v), (h, w), patch_grid);
            counts[patch] += 1;
            let row = &mut tokens[patch * dim..(patch + 1) * dim];
            for (dst, &x) in row.iter_mut().zip(&p.descriptor) {
                *dst += x;
            }
        }
        // Patch depths pool the valid depth-map pixels.
        for iy in 0..h {
            for ix in 0..w {
                let d = depth_map[iy * w + ix];
                if d > 0.0 {
                    let patch =
                        patch_index((ix as f64 + 0.5, iy as f64 + 0.5), (h, w), patch_grid);
                    depth_sum[patch] += d;
                    depth_cnt[patch] += 1;
                }
            }
        }

        let mut noise_rng = rng_from_seed(derive_seed_indexed(
            scene.spec.rng_seed,
            "token-noise",
            t as u64,
        ));
        let noise: Vec<f64> = (0..num_patches * dim)
            .map(|_| noise_rng.sample::<f64, _>(StandardNormal) * scene.spec.noise_sigma)
            .collect();
        let mut patch_depths = vec![0.0f64; num_patches];
        for patch in 0..num_patches {
            if counts[patch] == 0 {
                continue; // empty: zero token, invalid depth
            }
            let inv = 1.0 / counts[patch] as f64;
            let row = &mut tokens[patch * dim..(patch + 1) * dim];
            for (k, x) in row.iter_mut().enumerate() {
                *x = *x * inv + noise[patch * dim + k];
            }
            if depth_cnt[patch] > 0 {
                patch_depths[patch] = depth_sum[patch] / depth_cnt[patch] as f64;
            }
        }

        frames.push(CameraFrame::new(*camera, depth_map, h, w)?);
        token_grids.push(tokens);
        patch_depths_all.push(patch_depths);
    }

    let tracks = geometry::generate_tracks(&frames, track_grid, policy)?;

    Ok(RenderedSequence {
        frames,
        frame_indices: frame_indices.to_vec(),
        token_grids,
        patch_grid,
        feature_dim: dim,
        tracks,
        patch_depths: patch_depths_all,
    })
}

/// A rendered twin-object fixture: two clusters with bit-identical
/// descriptors at different depths.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinScene {
    pub sequence: RenderedSequence,
    /// World translation mapping a foreground cluster point to its twin.
    pub cluster_offset: Vec3,
    /// Surface index of the foreground cluster in the scene.
    pub foreground_surface: usize,
    /// Surface index of the background twin.
    pub background_surface: usize,
    pub scene: Scene,
}

impl TwinScene {
    /// Classifies a tracked world point by its nearest scene point's
    /// surface.
    pub fn surface_of(&self, world: Vec3) -> usize {
        let mut best = (f64::INFINITY, 0usize);
        for p in &self.scene.points {
            let d2 = {
                let d = p.position.sub(world);
                d.dot(d)
            };
            if d2 < best.0 {
                best = (d2, p.surface);
            }
        }
        best.1
    }
}

/// Builds and renders the canonical foreground/background ambiguity
/// fixture: a backdrop plus two planar clusters whose point layouts and
/// descriptors are identical bit-for-bit, separated laterally and by more
/// than half the world extent in depth.
pub fn twin_object_scene(
    spec: &SceneSpec,
    params: &RenderParams,
    frame_indices: &[usize],
    patch_grid: (usize, usize),
    track_grid: (usize, usize),
    policy: &SamplingPolicy,
) -> Result<TwinScene, SceneError> {
    spec.validate()?;
    let e = spec.world_extent;
    let mut rng = rng_from_seed(derive_seed(spec.rng_seed, "twin-scene"));

    let backdrop = SurfacePatch {
        center: Vec3::new(0.0, 0.0, 1.1 * e),
        axis_u: Vec3::new(1.0, 0.0, 0.0),
        axis_v: Vec3::new(0.0, 1.0, 0.0),
        half_u: 1.8 * e,
        half_v: 1.8 * e,
        normal: Vec3::new(0.0, 0.0, -1.0),
        curvature: 0.0,
    };
    let fg = SurfacePatch {
        center: Vec3::new(-0.32 * e, 0.0, -0.45 * e),
        axis_u: Vec3::new(1.0, 0.0, 0.0),
        axis_v: Vec3::new(0.0, 1.0, 0.0),
        half_u: 0.32 * e,
        half_v: 0.32 * e,
        normal: Vec3::new(0.0, 0.0, -1.0),
        curvature: 0.0,
    };
    // Depth separation of 1.0 * world_extent, twice the e/2 minimum.
    let cluster_offset = Vec3::new(0.64 * e, 0.0, 1.0 * e);
    let bg = SurfacePatch {
        center: fg.center.add(cluster_offset),
        ..fg
    };

    let surfaces = vec![backdrop, fg, bg];
    let total = spec.num_surfaces * spec.points_per_surface;
    // The clusters get a fixed generous share so they stay densely
    // covered; area-proportional allocation would starve them next to the
    // backdrop.
    let cluster_count = (total / 8).max(400).min(total / 3);
    let backdrop_count = total - 2 * cluster_count;

    let mut points = Vec::with_capacity(backdrop_count + 2 * cluster_count);
    let field = DescriptorField::sample(spec.feature_dim, &mut rng);
    for _ in 0..backdrop_count {
        let a = rng.gen_range(-1.0..1.0);
        let b = rng.gen_range(-1.0..1.0);
        points.push(ScenePoint {
            position: backdrop.point_at(a, b),
            surface: 0,
            descriptor: field.descriptor_at(a, b),
        });
    }
    let twin_field = DescriptorField::sample(spec.feature_dim, &mut rng);
    let mut twin_points = Vec::with_capacity(cluster_count);
    for _ in 0..cluster_count {
        let a = rng.gen_range(-1.0..1.0);
        let b = rng.gen_range(-1.0..1.0);
        twin_points.push((a, b, twin_field.descriptor_at(a, b)));
    }
    for (a, b, d) in &twin_points {
        points.push(ScenePoint {
            position: fg.point_at(*a, *b),
            surface: 1,
            descriptor: d.clone(),
        });
    }
    for (a, b, d) in &twin_points {
        points.push(ScenePoint {
            position: bg.point_at(*a, *b),
            surface: 2,
            descriptor: d.clone(),
        });
    }

    let scene = Scene {
        spec: *spec,
        surfaces,
        points,
        occluders: Vec::new(),
        occluder_samples: Vec::new(),
    };
    let sequence = render_sequence(&scene, params, frame_indices, patch_grid, track_grid, policy)?;
    Ok(TwinScene {
        sequence,
        cluster_offset,
        foreground_surface: 1,
        background_surface: 2,
        scene,
    })
}
