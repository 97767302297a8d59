//! Pinhole cameras and exact multi-view correspondence bookkeeping.
//!
//! Pixel coordinates are continuous: the image spans `[0, w) x [0, h)`,
//! pixel `(ix, iy)` covers the unit square `[ix, ix+1) x [iy, iy+1)`, and a
//! patch grid with `cols` columns splits `[0, w)` evenly, so the center of
//! grid cell `(0, 0)` on a 16x16 grid over a 256-pixel-wide image is
//! `(8, 8)`. Depth-map lookups use the pixel containing the coordinate.
//!
//! Depth values at or below zero (or non-finite) mark invalid pixels.
//! A correspondence proposed in some frame is accepted only when it lands
//! at least `margin` pixels inside the image bounds and its projected depth
//! agrees with the frame's depth map within a relative tolerance:
//! `|d_proj - d_map| < tol * min(d_proj, d_map)`. Disagreement is how
//! occlusion shows up, since the map then holds the occluder's depth.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::UnitDisc;

use crate::linalg::{Mat3, Vec3};
use crate::rng::rng_from_seed;
use crate::scalar;

/// Smallest depth treated as being in front of the camera.
pub const MIN_PROJECT_DEPTH: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("depth {0} is not a valid positive finite value")]
    InvalidDepth(f64),
    #[error("camera intrinsics are singular")]
    SingularIntrinsics,
    #[error("point projects behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("invalid sampling policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("invalid frame: {0}")]
    InvalidFrame(&'static str),
    #[error("no track survived visibility filtering")]
    EmptyTrackSet,
    #[error("sampling window holds {available} frames but {needed} are required")]
    WindowTooSmall { needed: usize, available: usize },
}

/// Calibrated pinhole camera: `x_cam = R x_world + t`, `u ~ K x_cam`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraModel {
    /// Intrinsics; upper triangular, positive focal lengths, `k[2][2] = 1`.
    pub k: Mat3,
    /// World-to-camera rotation; orthonormal with determinant +1.
    pub r: Mat3,
    /// World-to-camera translation.
    pub t: Vec3,
}

impl CameraModel {
    /// Validates and builds a camera. Orthonormality and the structural
    /// intrinsics constraints are enforced within `1e-9`.
    pub fn new(k: Mat3, r: Mat3, t: Vec3) -> Result<Self, GeometryError> {
        const TOL: f64 = 1e-9;
        if scalar::abs(k.m[1][0]) > TOL || scalar::abs(k.m[2][0]) > TOL
            || scalar::abs(k.m[2][1]) > TOL
        {
            return Err(GeometryError::InvalidCamera("intrinsics are not upper triangular"));
        }
        if !(k.m[0][0] > 0.0) || !(k.m[1][1] > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive"));
        }
        if scalar::abs(k.m[2][2] - 1.0) > TOL {
            return Err(GeometryError::InvalidCamera("intrinsics must be normalized (k[2][2] = 1)"));
        }
        let rtr = r.transpose().mul_mat(&r);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if scalar::abs(rtr.m[i][j] - want) > TOL {
                    return Err(GeometryError::InvalidCamera("rotation is not orthonormal"));
                }
            }
        }
        if scalar::abs(r.det() - 1.0) > TOL {
            return Err(GeometryError::InvalidCamera("rotation determinant must be +1"));
        }
        Ok(Self { k, r, t })
    }

    /// Camera center in world coordinates (`-R^T t`).
    pub fn center(&self) -> Vec3 {
        self.r.transpose().mul_vec(self.t).scale(-1.0)
    }
}

/// One rendered view: camera plus per-pixel depth (`<= 0` means invalid).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub camera: CameraModel,
    /// Row-major `height x width` depth values.
    pub depth_map: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl CameraFrame {
    pub fn new(
        camera: CameraModel,
        depth_map: Vec<f64>,
        height: usize,
        width: usize,
    ) -> Result<Self, GeometryError> {
        if height == 0 || width == 0 {
            return Err(GeometryError::InvalidFrame("image dimensions must be positive"));
        }
        if depth_map.len() != height * width {
            return Err(GeometryError::InvalidFrame("depth map size does not match dimensions"));
        }
        Ok(Self { camera, depth_map, height, width })
    }

    /// Depth of the pixel containing `(u, v)`, clamped to the image;
    /// `None` when the stored value is invalid.
    pub fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        let ix = (scalar::floor(u).max(0.0) as usize).min(self.width - 1);
        let iy = (scalar::floor(v).max(0.0) as usize).min(self.height - 1);
        let d = self.depth_map[iy * self.width + ix];
        if d > 0.0 && d.is_finite() {
            Some(d)
        } else {
            None
        }
    }
}

/// Knobs controlling track generation and frame sampling.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SamplingPolicy {
    /// Temporal window half-width around the anchor frame.
    pub window_radius: usize,
    /// Inclusive frame-count range `[f_min, f_max]` per sampled sequence.
    pub seq_len_range: (usize, usize),
    /// Minimum distance from every image edge, in pixels.
    pub margin: f64,
    /// Relative depth-agreement tolerance for visibility.
    pub depth_rel_tol: f64,
    /// Fraction of surviving tracks retained, ranked by visibility.
    pub visibility_keep_frac: f64,
    /// Negative-sample perturbation radius as a fraction of the image
    /// diagonal.
    pub neg_perturb_frac: f64,
}

impl SamplingPolicy {
    pub fn new(
        window_radius: usize,
        seq_len_range: (usize, usize),
        margin: f64,
        depth_rel_tol: f64,
        visibility_keep_frac: f64,
        neg_perturb_frac: f64,
    ) -> Result<Self, GeometryError> {
        let p = Self {
            window_radius,
            seq_len_range,
            margin,
            depth_rel_tol,
            visibility_keep_frac,
            neg_perturb_frac,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (f_min, f_max) = self.seq_len_range;
        if f_min < 2 || f_max < f_min {
            return Err(GeometryError::InvalidPolicy(
                "sequence length range must satisfy 2 <= f_min <= f_max",
            ));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(GeometryError::InvalidPolicy("margin must be finite and non-negative"));
        }
        if !(self.depth_rel_tol > 0.0 && self.depth_rel_tol < 1.0) {
            return Err(GeometryError::InvalidPolicy("depth tolerance must lie in (0, 1)"));
        }
        if !(self.visibility_keep_frac > 0.0 && self.visibility_keep_frac <= 1.0) {
            return Err(GeometryError::InvalidPolicy("keep fraction must lie in (0, 1]"));
        }
        if !(self.neg_perturb_frac > 0.0) {
            // Zero perturbation would make every negative coincide with its
            // positive, so the policy is rejected outright.
            return Err(GeometryError::InvalidPolicy("negative perturbation must be positive"));
        }
        Ok(())
    }
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            window_radius: 48,
            seq_len_range: (8, 8),
            margin: 4.0,
            depth_rel_tol: 0.05,
            visibility_keep_frac: 0.5,
            neg_perturb_frac: 0.5,
        }
    }
}

/// Lifts a pixel observed at `depth` into world coordinates.
pub fn back_project(
    camera: &CameraModel,
    pixel: (f64, f64),
    depth: f64,
) -> Result<Vec3, GeometryError> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidDepth(depth));
    }
    let k_inv = camera.k.inverse().ok_or(GeometryError::SingularIntrinsics)?;
    let hom = Vec3::new(pixel.0 * depth, pixel.1 * depth, depth);
    let p_cam = k_inv.mul_vec(hom);
    Ok(camera.r.transpose().mul_vec(p_cam.sub(camera.t)))
}

/// Projects a world point, returning the pixel and its camera-space depth.
pub fn project(
    camera: &CameraModel,
    world: Vec3,
) -> Result<((f64, f64), f64), GeometryError> {
    let p_cam = camera.r.mul_vec(world).add(camera.t);
    if p_cam.z <= MIN_PROJECT_DEPTH {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    let h = camera.k.mul_vec(p_cam);
    Ok(((h.x / p_cam.z, h.y / p_cam.z), p_cam.z))
}

/// Accepts a projected correspondence when it lands inside the frame's
/// margins and its depth agrees with the depth map.
pub fn validate_correspondence(
    frame: &CameraFrame,
    pixel: (f64, f64),
    proj_depth: f64,
    policy: &SamplingPolicy,
) -> bool {
    if !(proj_depth > 0.0) || !proj_depth.is_finite() {
        return false;
    }
    let (u, v) = pixel;
    if !u.is_finite() || !v.is_finite() {
        return false;
    }
    let m = policy.margin;
    if u < m || u > frame.width as f64 - m || v < m || v > frame.height as f64 - m {
        return false;
    }
    match frame.depth_at(u, v) {
        None => false,
        Some(d_map) => {
            scalar::abs(proj_depth - d_map) < policy.depth_rel_tol * proj_depth.min(d_map)
        }
    }
}

/// Center of grid cell `(row, col)` in pixel coordinates.
pub fn cell_center(
    cell: (usize, usize),
    image_size: (usize, usize),
    grid: (usize, usize),
) -> (f64, f64) {
    let (h, w) = image_size;
    let (rows, cols) = grid;
    (
        (cell.1 as f64 + 0.5) * w as f64 / cols as f64,
        (cell.0 as f64 + 0.5) * h as f64 / rows as f64,
    )
}

/// Grid cell index (row-major) containing a pixel, clamped to the grid.
pub fn patch_index(
    pixel: (f64, f64),
    image_size: (usize, usize),
    grid: (usize, usize),
) -> usize {
    let (h, w) = image_size;
    let (rows, cols) = grid;
    let col = (scalar::floor(pixel.0 * cols as f64 / w as f64).max(0.0) as usize).min(cols - 1);
    let row = (scalar::floor(pixel.1 * rows as f64 / h as f64).max(0.0) as usize).min(rows - 1);
    row * cols + col
}

/// Per-frame observation of one tracked world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    /// Projected pixel; NaN when the point fell behind the camera.
    pub pixel: (f64, f64),
    /// Cell containing the pixel on the query grid (0 when unprojectable).
    pub patch: usize,
    /// Camera-space depth of the projection (sign included).
    pub depth: f64,
    /// Whether the correspondence passed margin, depth-map, and occlusion
    /// checks in this frame.
    pub visible: bool,
}

/// One world point followed through every frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    /// Query-grid cell (row-major index) the track was seeded from.
    pub seed_cell: usize,
    /// The tracked world point.
    pub world: Vec3,
    /// Exactly one record per frame.
    pub records: Vec<TrackRecord>,
}

impl Track {
    pub fn visible_count(&self) -> usize {
        self.records.iter().filter(|r| r.visible).count()
    }
}

/// Ground-truth tracks for one sequence, seeded on a query grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub query_grid: (usize, usize),
    pub num_frames: usize,
    pub tracks: Vec<Track>,
}

/// Seeds one track per query-grid cell of the first frame, follows each
/// through all frames, and keeps the best-visible fraction.
///
/// A cell is skipped when the first frame has no valid depth at its center.
/// Tracks visible in fewer than two frames are dropped; of the survivors,
/// exactly `ceil(keep_frac * survivors)` are retained, ranked by visible
/// frame count with ties broken toward the lower grid index. The output is
/// ordered by seed cell.
pub fn generate_tracks(
    frames: &[CameraFrame],
    query_grid: (usize, usize),
    policy: &SamplingPolicy,
) -> Result<TrackSet, GeometryError> {
    policy.validate()?;
    let first = frames.first().ok_or(GeometryError::InvalidFrame("no frames"))?;
    if query_grid.0 == 0 || query_grid.1 == 0 {
        return Err(GeometryError::InvalidFrame("query grid must be non-empty"));
    }
    if frames
        .iter()
        .any(|f| f.height != first.height || f.width != first.width)
    {
        return Err(GeometryError::InvalidFrame("frames disagree on image size"));
    }
    let image_size = (first.height, first.width);

    let mut tracks: Vec<Track> = Vec::new();
    for row in 0..query_grid.0 {
        for col in 0..query_grid.1 {
            let seed_cell = row * query_grid.1 + col;
            let center = cell_center((row, col), image_size, query_grid);
            let Some(seed_depth) = first.depth_at(center.0, center.1) else {
                continue;
            };
            let world = back_project(&first.camera, center, seed_depth)?;
            let records: Vec<TrackRecord> = frames
                .iter()
                .map(|frame| match project(&frame.camera, world) {
                    Ok((pixel, depth)) => TrackRecord {
                        pixel,
                        patch: patch_index(pixel, image_size, query_grid),
                        depth,
                        visible: validate_correspondence(frame, pixel, depth, policy),
                    },
                    Err(GeometryError::BehindCamera(z)) => TrackRecord {
                        pixel: (f64::NAN, f64::NAN),
                        patch: 0,
                        depth: z,
                        visible: false,
                    },
                    Err(_) => unreachable!("camera was validated at construction"),
                })
                .collect();
            tracks.push(Track { seed_cell, world, records });
        }
    }

    tracks.retain(|t| t.visible_count() >= 2);
    if tracks.is_empty() {
        return Err(GeometryError::EmptyTrackSet);
    }

    let survivors = tracks.len();
    let retained = ceil_frac(policy.visibility_keep_frac, survivors);
    let mut order: Vec<usize> = (0..survivors).collect();
    order.sort_by(|&a, &b| {
        tracks[b]
            .visible_count()
            .cmp(&tracks[a].visible_count())
            .then(tracks[a].seed_cell.cmp(&tracks[b].seed_cell))
    });
    order.truncate(retained);
    order.sort_unstable();
    let kept: Vec<Track> = order.into_iter().map(|i| tracks[i].clone()).collect();

    Ok(TrackSet {
        query_grid,
        num_frames: frames.len(),
        tracks: kept,
    })
}

/// `ceil(frac * n)` computed exactly for `frac` in `(0, 1]`.
fn ceil_frac(frac: f64, n: usize) -> usize {
    let raw = frac * n as f64;
    let mut k = raw as usize;
    if (k as f64) < raw {
        k += 1;
    }
    k.clamp(1, n)
}

/// A perturbed (wrong) pixel paired with a visible track record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeSample {
    pub pixel: (f64, f64),
    /// Query-grid cell of the perturbed pixel; never the true cell.
    pub patch: usize,
}

/// Draws one spatial negative per visible record of every track.
///
/// The perturbation is uniform over a disc whose radius is
/// `neg_perturb_frac` times the image diagonal, clamped to the image
/// margins, and resampled until it leaves the true pixel's query-grid cell.
/// Entries for invisible records are `None`. Deterministic in the seed.
pub fn sample_negatives(
    track_set: &TrackSet,
    image_size: (usize, usize),
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<Vec<Vec<Option<NegativeSample>>>, GeometryError> {
    policy.validate()?;
    let (h, w) = image_size;
    if track_set.query_grid.0 * track_set.query_grid.1 < 2 {
        return Err(GeometryError::InvalidPolicy(
            "negative sampling needs at least two query-grid cells",
        ));
    }
    let diag = scalar::hypot(w as f64, h as f64);
    let radius = policy.neg_perturb_frac * diag;
    let clamp = |x: f64, limit: f64| x.max(policy.margin).min(limit - policy.margin);
    let mut rng = rng_from_seed(seed);

    let mut out = Vec::with_capacity(track_set.tracks.len());
    for track in &track_set.tracks {
        let mut per_frame = Vec::with_capacity(track.records.len());
        for record in &track.records {
            if !record.visible {
                per_frame.push(None);
                continue;
            }
            let true_patch = patch_index(record.pixel, image_size, track_set.query_grid);
            let mut chosen = None;
            for _ in 0..64 {
                let [dx, dy]: [f64; 2] = rng.sample(UnitDisc);
                let cand = (
                    clamp(record.pixel.0 + dx * radius, w as f64),
                    clamp(record.pixel.1 + dy * radius, h as f64),
                );
                let patch = patch_index(cand, image_size, track_set.query_grid);
                if patch != true_patch {
                    chosen = Some(NegativeSample { pixel: cand, patch });
                    break;
                }
            }
            let sample = chosen.unwrap_or_else(|| {
                // Exhausted resampling (tiny perturbations on a coarse
                // grid); fall back to the next grid cell's center.
                let cells = track_set.query_grid.0 * track_set.query_grid.1;
                let patch = (true_patch + 1) % cells;
                let cell = (patch / track_set.query_grid.1, patch % track_set.query_grid.1);
                NegativeSample {
                    pixel: cell_center(cell, image_size, track_set.query_grid),
                    patch,
                }
            });
            per_frame.push(Some(sample));
        }
        out.push(per_frame);
    }
    Ok(out)
}

/// Samples `f` distinct frame indices around a random anchor.
///
/// The anchor is uniform over `[0, t_max)`, the window extends
/// `window_radius` to each side (clipped to the timeline), the sequence
/// length is uniform over `seq_len_range`, and the remaining frames are
/// drawn without replacement from the window. The result is ascending and
/// always contains the anchor.
pub fn sample_sequence_indices(
    t_max: usize,
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<Vec<usize>, GeometryError> {
    policy.validate()?;
    if t_max == 0 {
        return Err(GeometryError::InvalidFrame("timeline must be non-empty"));
    }
    let mut rng = rng_from_seed(seed);
    let (f_min, f_max) = policy.seq_len_range;
    let f = rng.gen_range(f_min..=f_max);
    let anchor = rng.gen_range(0..t_max);
    let lo = anchor.saturating_sub(policy.window_radius);
    let hi = (anchor + policy.window_radius).min(t_max - 1);
    let available = hi - lo + 1;
    if available < f {
        return Err(GeometryError::WindowTooSmall { needed: f, available });
    }
    let mut candidates: Vec<usize> = (lo..=hi).filter(|&i| i != anchor).collect();
    let mut picked = Vec::with_capacity(f);
    picked.push(anchor);
    for k in 0..f - 1 {
        let j = rng.gen_range(k..candidates.len());
        candidates.swap(k, j);
        picked.push(candidates[k]);
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use crate::linalg::random_orthogonal;
    use alloc::vec;

    fn simple_k(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat3 {
        Mat3::new([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    }

    fn identity_camera() -> CameraModel {
        CameraModel::new(Mat3::identity(), Mat3::identity(), Vec3::zero()).unwrap()
    }

    fn random_rotation(rng: &mut DetRng) -> Mat3 {
        let q = random_orthogonal(3, rng);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = q[i * 3 + j];
            }
        }
        let mut r = Mat3::new(m);
        if r.det() < 0.0 {
            for j in 0..3 {
                r.m[2][j] = -r.m[2][j];
            }
        }
        r
    }

    fn uniform_frame(camera: CameraModel, depth: f64, h: usize, w: usize) -> CameraFrame {
        CameraFrame::new(camera, vec![depth; h * w], h, w).unwrap()
    }

    #[test]
    fn back_project_identity_example() {
        let cam = identity_camera();
        let p = back_project(&cam, (32.0, 32.0), 2.0).unwrap();
        assert_eq!(p, Vec3::new(64.0, 64.0, 2.0));
        let ((u, v), d) = project(&cam, p).unwrap();
        assert_eq!((u, v, d), (32.0, 32.0, 2.0));
    }

    #[test]
    fn back_project_rejects_invalid_depth() {
        let cam = identity_camera();
        assert_eq!(
            back_project(&cam, (1.0, 1.0), 0.0),
            Err(GeometryError::InvalidDepth(0.0))
        );
        assert!(back_project(&cam, (1.0, 1.0), -2.0).is_err());
        assert!(back_project(&cam, (1.0, 1.0), f64::NAN).is_err());
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let cam = identity_camera();
        match project(&cam, Vec3::new(0.0, 0.0, -1.0)) {
            Err(GeometryError::BehindCamera(z)) => assert_eq!(z, -1.0),
            other => panic!("expected BehindCamera, got {other:?}"),
        }
    }

    #[test]
    fn camera_validation_rejects_bad_inputs() {
        let r = Mat3::identity();
        let t = Vec3::zero();
        let lower = Mat3::new([[50.0, 0.0, 32.0], [0.5, 50.0, 32.0], [0.0, 0.0, 1.0]]);
        assert!(CameraModel::new(lower, r, t).is_err());
        let neg_focal = simple_k(-50.0, 50.0, 32.0, 32.0);
        assert!(CameraModel::new(neg_focal, r, t).is_err());
        let unnormalized = Mat3::new([[50.0, 0.0, 32.0], [0.0, 50.0, 32.0], [0.0, 0.0, 2.0]]);
        assert!(CameraModel::new(unnormalized, r, t).is_err());
        let skew = Mat3::new([[2.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]]);
        let bad_r = Mat3::new([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(CameraModel::new(skew, bad_r, t).is_err());
    }

    #[test]
    fn round_trip_random_cameras() {
        let mut rng = rng_from_seed(1234);
        for _ in 0..1000 {
            let k = simple_k(
                rng.gen_range(30.0..120.0),
                rng.gen_range(30.0..120.0),
                rng.gen_range(20.0..44.0),
                rng.gen_range(20.0..44.0),
            );
            let r = random_rotation(&mut rng);
            let t = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let cam = CameraModel::new(k, r, t).unwrap();
            let pixel = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
            let depth = rng.gen_range(0.1..10.0);
            let world = back_project(&cam, pixel, depth).unwrap();
            let ((u, v), d) = project(&cam, world).unwrap();
            assert!(scalar::abs(u - pixel.0) < 1e-9, "u {} vs {}", u, pixel.0);
            assert!(scalar::abs(v - pixel.1) < 1e-9);
            assert!(scalar::abs(d - depth) < 1e-9);
        }
    }

    #[test]
    fn validation_applies_margin() {
        let frame = uniform_frame(identity_camera(), 2.0, 64, 64);
        let policy = SamplingPolicy::default();
        assert!(!validate_correspondence(&frame, (2.0, 32.0), 2.0, &policy));
        assert!(!validate_correspondence(&frame, (62.5, 32.0), 2.0, &policy));
        assert!(!validate_correspondence(&frame, (32.0, 3.9), 2.0, &policy));
        assert!(validate_correspondence(&frame, (4.0, 60.0), 2.0, &policy));
        assert!(validate_correspondence(&frame, (32.0, 32.0), 2.0, &policy));
    }

    #[test]
    fn validation_applies_relative_depth_tolerance() {
        let frame = uniform_frame(identity_camera(), 2.05, 64, 64);
        let policy = SamplingPolicy::default();
        // 2.5% relative disagreement is inside the 5% tolerance.
        assert!(validate_correspondence(&frame, (32.0, 32.0), 2.0, &policy));
        let far = uniform_frame(identity_camera(), 2.2, 64, 64);
        assert!(!validate_correspondence(&far, (32.0, 32.0), 2.0, &policy));
        let occluded = uniform_frame(identity_camera(), 1.0, 64, 64);
        assert!(!validate_correspondence(&occluded, (32.0, 32.0), 2.0, &policy));
    }

    #[test]
    fn validation_rejects_invalid_map_depth() {
        let frame = uniform_frame(identity_camera(), 0.0, 64, 64);
        let policy = SamplingPolicy::default();
        assert!(!validate_correspondence(&frame, (32.0, 32.0), 2.0, &policy));
    }

    #[test]
    fn grid_helpers_match_convention() {
        assert_eq!(cell_center((0, 0), (256, 256), (16, 16)), (8.0, 8.0));
        assert_eq!(cell_center((1, 2), (64, 64), (8, 8)), (20.0, 12.0));
        assert_eq!(patch_index((8.0, 8.0), (256, 256), (16, 16)), 0);
        assert_eq!(patch_index((16.0, 0.0), (256, 256), (16, 16)), 1);
        assert_eq!(patch_index((255.9, 255.9), (256, 256), (16, 16)), 255);
        // Out-of-range pixels clamp to the border cells.
        assert_eq!(patch_index((-3.0, -3.0), (256, 256), (16, 16)), 0);
        assert_eq!(patch_index((300.0, 300.0), (256, 256), (16, 16)), 255);
    }

    /// Two identical cameras separated by a pure x-translation: the
    /// projected pixel shift is `fx * baseline / depth`, exactly.
    #[test]
    fn translation_fixture_shifts_pixels_analytically() {
        let k = simple_k(64.0, 64.0, 32.0, 32.0);
        let cam1 = CameraModel::new(k, Mat3::identity(), Vec3::zero()).unwrap();
        let baseline = 0.5;
        let cam2 =
            CameraModel::new(k, Mat3::identity(), Vec3::new(-baseline, 0.0, 0.0)).unwrap();
        let depth = 4.0;
        let pixel = (30.0, 28.0);
        let world = back_project(&cam1, pixel, depth).unwrap();
        let ((u2, v2), d2) = project(&cam2, world).unwrap();
        let expected_shift = 64.0 * baseline / depth;
        assert!(scalar::abs(u2 - (pixel.0 - expected_shift)) < 1e-9);
        assert!(scalar::abs(v2 - pixel.1) < 1e-9);
        assert!(scalar::abs(d2 - depth) < 1e-9);
    }

    /// Backdrop behind a half-image occluder: acceptance must agree exactly
    /// with the analytic side-of-edge predicate.
    #[test]
    fn occluder_fixture_matches_analytic_visibility() {
        let k = simple_k(64.0, 64.0, 32.0, 32.0);
        let cam = CameraModel::new(k, Mat3::identity(), Vec3::zero()).unwrap();
        let (h, w) = (64usize, 64usize);
        let z_back = 4.0;
        let z_occ = 2.0;
        let edge = 33; // occluder covers pixel columns [0, 33)
        let backdrop = uniform_frame(cam, z_back, h, w);
        let mut occluded_map = vec![z_back; h * w];
        for row in occluded_map.chunks_mut(w) {
            for d in &mut row[..edge] {
                *d = z_occ;
            }
        }
        let frame2 = CameraFrame::new(cam, occluded_map, h, w).unwrap();
        let policy = SamplingPolicy::default();

        let mut rng = rng_from_seed(77);
        for _ in 0..500 {
            // Backdrop points, kept clear of the occluder edge pixel.
            let u = loop {
                let u = rng.gen_range(5.0..59.0);
                if !(edge as f64 - 1.0..edge as f64 + 1.0).contains(&u) {
                    break u;
                }
            };
            let v = rng.gen_range(5.0..59.0);
            let world = back_project(&cam, (u, v), z_back).unwrap();
            let ((u2, v2), d2) = project(&frame2.camera, world).unwrap();
            assert!(validate_correspondence(&backdrop, (u2, v2), d2, &policy));
            let expect_visible = u2 >= edge as f64;
            assert_eq!(
                validate_correspondence(&frame2, (u2, v2), d2, &policy),
                expect_visible,
                "pixel ({u2}, {v2})"
            );
        }
    }

    #[test]
    fn tracks_on_static_plane_keep_lowest_cells_on_ties() {
        let cam = CameraModel::new(
            simple_k(64.0, 64.0, 32.0, 32.0),
            Mat3::identity(),
            Vec3::zero(),
        )
        .unwrap();
        let frames: Vec<CameraFrame> =
            (0..4).map(|_| uniform_frame(cam, 3.0, 64, 64)).collect();
        let ts = generate_tracks(&frames, (8, 8), &SamplingPolicy::default()).unwrap();
        // All 64 seeds stay valid and fully visible, so exactly
        // ceil(0.5 * 64) = 32 survive, ties resolved to the lowest cells.
        assert_eq!(ts.tracks.len(), 32);
        for (i, track) in ts.tracks.iter().enumerate() {
            assert_eq!(track.seed_cell, i);
            assert_eq!(track.visible_count(), 4);
            for rec in &track.records {
                assert!(scalar::abs(rec.depth - 3.0) < 1e-12);
            }
        }
    }

    #[test]
    fn tracks_skip_cells_without_valid_seed_depth() {
        let cam = CameraModel::new(
            simple_k(64.0, 64.0, 32.0, 32.0),
            Mat3::identity(),
            Vec3::zero(),
        )
        .unwrap();
        let mut map = vec![3.0; 64 * 64];
        // Kill the depth under the first grid row of cell centers (v = 4).
        for u in 0..64 {
            map[4 * 64 + u] = 0.0;
        }
        let frames = vec![
            CameraFrame::new(cam, map.clone(), 64, 64).unwrap(),
            CameraFrame::new(cam, map, 64, 64).unwrap(),
        ];
        let ts = generate_tracks(&frames, (8, 8), &SamplingPolicy::default()).unwrap();
        assert!(ts.tracks.iter().all(|t| t.seed_cell >= 8));
    }

    #[test]
    fn tracks_error_when_nothing_survives() {
        let cam = CameraModel::new(
            simple_k(64.0, 64.0, 32.0, 32.0),
            Mat3::identity(),
            Vec3::zero(),
        )
        .unwrap();
        let frames = vec![uniform_frame(cam, 0.0, 64, 64); 3];
        assert_eq!(
            generate_tracks(&frames, (8, 8), &SamplingPolicy::default()),
            Err(GeometryError::EmptyTrackSet)
        );
    }

    /// Records with valid depth must back-project to the track's world
    /// point from any frame, within float tolerance.
    #[test]
    fn track_records_are_world_consistent() {
        let k = simple_k(64.0, 64.0, 32.0, 32.0);
        let plane_z = 5.0;
        let mut frames = Vec::new();
        for i in 0..4 {
            let t = Vec3::new(-0.2 * i as f64, 0.1 * i as f64, 0.0);
            let cam = CameraModel::new(k, Mat3::identity(), t).unwrap();
            // Plane z = plane_z in world; with identity rotation the
            // camera-space depth is constant per frame.
            frames.push(uniform_frame(cam, plane_z, 64, 64));
        }
        let ts = generate_tracks(&frames, (8, 8), &SamplingPolicy::default()).unwrap();
        assert!(!ts.tracks.is_empty());
        for track in &ts.tracks {
            for (f, rec) in track.records.iter().enumerate() {
                if !rec.visible {
                    continue;
                }
                let p = back_project(&frames[f].camera, rec.pixel, rec.depth).unwrap();
                let err = p.sub(track.world).norm();
                assert!(err < 1e-6, "frame {f}: {err}");
            }
        }
    }

    #[test]
    fn negatives_leave_true_patch_and_stay_bounded() {
        let cam = CameraModel::new(
            simple_k(64.0, 64.0, 32.0, 32.0),
            Mat3::identity(),
            Vec3::zero(),
        )
        .unwrap();
        let frames: Vec<CameraFrame> =
            (0..3).map(|_| uniform_frame(cam, 3.0, 64, 64)).collect();
        let policy = SamplingPolicy::default();
        let ts = generate_tracks(&frames, (8, 8), &policy).unwrap();
        let negs = sample_negatives(&ts, (64, 64), &policy, 5).unwrap();
        let negs2 = sample_negatives(&ts, (64, 64), &policy, 5).unwrap();
        assert_eq!(negs, negs2);
        let diag = scalar::hypot(64.0, 64.0);
        for (track, per_frame) in ts.tracks.iter().zip(&negs) {
            for (rec, neg) in track.records.iter().zip(per_frame) {
                if !rec.visible {
                    assert!(neg.is_none());
                    continue;
                }
                let neg = neg.expect("visible records get a negative");
                assert_ne!(neg.patch, patch_index(rec.pixel, (64, 64), ts.query_grid));
                assert!(neg.pixel.0 >= policy.margin && neg.pixel.0 <= 64.0 - policy.margin);
                assert!(neg.pixel.1 >= policy.margin && neg.pixel.1 <= 64.0 - policy.margin);
                let dist = scalar::hypot(neg.pixel.0 - rec.pixel.0, neg.pixel.1 - rec.pixel.1);
                assert!(dist <= policy.neg_perturb_frac * diag + 1e-9);
            }
        }
    }

    #[test]
    fn zero_perturbation_policy_is_rejected() {
        assert_eq!(
            SamplingPolicy::new(48, (8, 8), 4.0, 0.05, 0.5, 0.0),
            Err(GeometryError::InvalidPolicy("negative perturbation must be positive"))
        );
    }

    #[test]
    fn policy_validation_covers_edge_cases() {
        assert!(SamplingPolicy::new(48, (1, 8), 4.0, 0.05, 0.5, 0.5).is_err());
        assert!(SamplingPolicy::new(48, (8, 4), 4.0, 0.05, 0.5, 0.5).is_err());
        assert!(SamplingPolicy::new(48, (8, 8), 4.0, 0.0, 0.5, 0.5).is_err());
        assert!(SamplingPolicy::new(48, (8, 8), 4.0, 1.0, 0.5, 0.5).is_err());
        assert!(SamplingPolicy::new(48, (8, 8), 4.0, 0.05, 0.0, 0.5).is_err());
        assert!(SamplingPolicy::new(48, (8, 8), 4.0, 0.05, 1.5, 0.5).is_err());
        assert!(SamplingPolicy::new(48, (8, 8), -1.0, 0.05, 0.5, 0.5).is_err());
        assert!(SamplingPolicy::new(48, (8, 8), 4.0, 0.05, 0.5, 0.5).is_ok());
    }

    #[test]
    fn sequence_indices_are_sorted_distinct_and_windowed() {
        let policy = SamplingPolicy {
            seq_len_range: (4, 8),
            window_radius: 10,
            ..SamplingPolicy::default()
        };
        for seed in 0..200 {
            let idx = sample_sequence_indices(100, &policy, seed).unwrap();
            assert!(idx.len() >= 4 && idx.len() <= 8);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            let span = idx[idx.len() - 1] - idx[0];
            assert!(span <= 2 * policy.window_radius);
            assert!(idx.iter().all(|&i| i < 100));
        }
        let a = sample_sequence_indices(100, &policy, 7).unwrap();
        let b = sample_sequence_indices(100, &policy, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequence_indices_report_small_windows() {
        let policy = SamplingPolicy::default(); // needs 8 frames
        match sample_sequence_indices(3, &policy, 0) {
            Err(GeometryError::WindowTooSmall { needed, available }) => {
                assert_eq!(needed, 8);
                assert!(available <= 3);
            }
            other => panic!("expected WindowTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn ceil_frac_is_exact() {
        assert_eq!(ceil_frac(0.5, 64), 32);
        assert_eq!(ceil_frac(0.5, 63), 32);
        assert_eq!(ceil_frac(1.0, 17), 17);
        assert_eq!(ceil_frac(0.3, 10), 3);
        assert_eq!(ceil_frac(0.31, 10), 4);
        assert_eq!(ceil_frac(0.01, 5), 1);
    }
}
