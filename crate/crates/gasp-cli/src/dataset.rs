//! On-disk dataset format.
//!
//! Each sequence is one little-endian binary record: magic + version, a
//! fixed header, per-frame blocks (camera pose as 12 doubles, depth map as
//! f32, token grid as f32, pooled patch depths as f32), then one or more
//! track tables whose rows are `{frame u16, u f32, v f32, patch u16,
//! depth f32, visible u8}`. A JSON manifest lists every record with its
//! SHA-256; readers verify checksums and split disjointness on every load.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gasp_core::eval::{DataSplit, EvalSequence};
use gasp_core::geometry::{Track, TrackRecord, TrackSet};
use gasp_core::linalg::Vec3;
use gasp_core::scenegen::RenderedSequence;
use gasp_core::trainer::TrainSequence;

use crate::errors::CliError;

pub const DATASET_MAGIC: &[u8; 6] = b"GASPDS";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Everything one record file holds. Floating-point image payloads are
/// quantized to f32 on disk; camera poses and track world points stay f64.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSequence {
    pub seed: u64,
    pub frame_indices: Vec<usize>,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub patch_grid: (usize, usize),
    pub feature_dim: usize,
    /// Shared intrinsics, row-major.
    pub intrinsics: [f64; 9],
    /// Per frame: world-to-camera rotation (row-major) and translation.
    pub poses: Vec<([f64; 9], [f64; 3])>,
    /// Per frame row-major depth maps.
    pub depth_maps: Vec<Vec<f32>>,
    /// Per frame `patches x feature_dim` token grids.
    pub token_grids: Vec<Vec<f32>>,
    /// Per frame pooled ground-truth depth per patch (0 = invalid).
    pub patch_depths: Vec<Vec<f32>>,
    /// Coarse queries first, then any denser sets.
    pub track_sets: Vec<TrackSet>,
    /// Attached instruction tokens; empty for held-out sequences.
    pub lang: Vec<u32>,
}

/// Rounds every per-record pixel and depth through f32, matching the disk
/// precision; world points and the grid layout stay untouched.
fn quantize_tracks(set: &TrackSet) -> TrackSet {
    let mut out = set.clone();
    for track in &mut out.tracks {
        for rec in &mut track.records {
            rec.pixel.0 = (rec.pixel.0 as f32) as f64;
            rec.pixel.1 = (rec.pixel.1 as f32) as f64;
            rec.depth = (rec.depth as f32) as f64;
        }
    }
    out
}

impl StoredSequence {
    pub fn from_rendered(
        coarse: &RenderedSequence,
        fine_tracks: Option<&TrackSet>,
        seed: u64,
        lang: Vec<u32>,
    ) -> Self {
        let f0 = &coarse.frames[0];
        let k = f0.camera.k.m;
        let mut intrinsics = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                intrinsics[r * 3 + c] = k[r][c];
            }
        }
        let poses = coarse
            .frames
            .iter()
            .map(|f| {
                let mut rot = [0.0; 9];
                for r in 0..3 {
                    for c in 0..3 {
                        rot[r * 3 + c] = f.camera.r.m[r][c];
                    }
                }
                (rot, [f.camera.t.x, f.camera.t.y, f.camera.t.z])
            })
            .collect();
        // Tracks are quantized here so the in-memory record always equals
        // what a reader gets back from disk.
        let mut track_sets = vec![quantize_tracks(&coarse.tracks)];
        track_sets.extend(fine_tracks.map(quantize_tracks));
        Self {
            seed,
            frame_indices: coarse.frame_indices.clone(),
            image_size: (f0.height, f0.width),
            patch_grid: coarse.patch_grid,
            feature_dim: coarse.feature_dim,
            intrinsics,
            poses,
            depth_maps: coarse
                .frames
                .iter()
                .map(|f| f.depth_map.iter().map(|&d| d as f32).collect())
                .collect(),
            token_grids: coarse
                .token_grids
                .iter()
                .map(|g| g.iter().map(|&v| v as f32).collect())
                .collect(),
            patch_depths: coarse
                .patch_depths
                .iter()
                .map(|g| g.iter().map(|&v| v as f32).collect())
                .collect(),
            track_sets,
            lang,
        }
    }

    fn quantized(&self) -> bool {
        self.track_sets.iter().all(|s| {
            s.tracks.iter().all(|t| {
                t.records.iter().all(|r| {
                    let ok = |x: f64| x.is_nan() || x == (x as f32) as f64;
                    ok(r.pixel.0) && ok(r.pixel.1) && ok(r.depth)
                })
            })
        })
    }

    pub fn to_train_sequence(&self) -> TrainSequence {
        TrainSequence {
            tokens: self.token_grids.iter().flatten().map(|&v| v as f64).collect(),
            num_frames: self.frame_indices.len(),
            feature_dim: self.feature_dim,
            patch_grid: self.patch_grid,
            image_size: self.image_size,
            track_sets: self.track_sets.clone(),
            patch_depths: self
                .patch_depths
                .iter()
                .map(|g| g.iter().map(|&v| v as f64).collect())
                .collect(),
            lang: self.lang.clone(),
        }
    }

    pub fn to_eval_sequence(&self, split: DataSplit) -> EvalSequence {
        EvalSequence {
            tokens: self.token_grids.iter().flatten().map(|&v| v as f64).collect(),
            num_frames: self.frame_indices.len(),
            feature_dim: self.feature_dim,
            patch_grid: self.patch_grid,
            image_size: self.image_size,
            frame_indices: self.frame_indices.clone(),
            tracks: self.track_sets[0].clone(),
            split,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.buf.len() {
            return Err(CliError::CorruptDataset("record file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CliError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_record(seq: &StoredSequence) -> Vec<u8> {
    debug_assert!(seq.quantized(), "track payloads must be rounded through f32 before writing");
    let mut w = Writer::new();
    w.buf.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u64(seq.seed);
    let num_frames = seq.frame_indices.len();
    w.u32(num_frames as u32);
    w.u32(seq.image_size.0 as u32);
    w.u32(seq.image_size.1 as u32);
    w.u32(seq.patch_grid.0 as u32);
    w.u32(seq.patch_grid.1 as u32);
    w.u32(seq.feature_dim as u32);
    w.u32(seq.lang.len() as u32);
    w.u32(seq.track_sets.len() as u32);
    for &t in &seq.frame_indices {
        w.u32(t as u32);
    }
    for &tok in &seq.lang {
        w.u32(tok);
    }
    for &v in &seq.intrinsics {
        w.f64(v);
    }
    for f in 0..num_frames {
        let (rot, trans) = &seq.poses[f];
        for &v in rot {
            w.f64(v);
        }
        for &v in trans {
            w.f64(v);
        }
        for &d in &seq.depth_maps[f] {
            w.f32(d);
        }
        for &t in &seq.token_grids[f] {
            w.f32(t);
        }
        for &d in &seq.patch_depths[f] {
            w.f32(d);
        }
    }
    for set in &seq.track_sets {
        w.u16(set.query_grid.0 as u16);
        w.u16(set.query_grid.1 as u16);
        w.u32(set.tracks.len() as u32);
        for track in &set.tracks {
            w.u16(track.seed_cell as u16);
            w.f64(track.world.x);
            w.f64(track.world.y);
            w.f64(track.world.z);
            for (frame, rec) in track.records.iter().enumerate() {
                w.u16(frame as u16);
                w.f32(rec.pixel.0 as f32);
                w.f32(rec.pixel.1 as f32);
                w.u16(rec.patch as u16);
                w.f32(rec.depth as f32);
                w.u8(rec.visible as u8);
            }
        }
    }
    w.buf
}

pub fn decode_record(bytes: &[u8]) -> Result<StoredSequence, CliError> {
    let mut r = Reader::new(bytes);
    if r.take(6)? != DATASET_MAGIC {
        return Err(CliError::CorruptDataset("bad magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(CliError::CorruptDataset(format!("unknown record version {version}")));
    }
    let seed = r.u64()?;
    let num_frames = r.u32()? as usize;
    let image_size = (r.u32()? as usize, r.u32()? as usize);
    let patch_grid = (r.u32()? as usize, r.u32()? as usize);
    let feature_dim = r.u32()? as usize;
    let lang_len = r.u32()? as usize;
    let num_sets = r.u32()? as usize;
    if num_frames == 0 || patch_grid.0 == 0 || patch_grid.1 == 0 {
        return Err(CliError::CorruptDataset("empty header dimensions".into()));
    }
    let mut frame_indices = Vec::with_capacity(num_frames);
    for _ in 0..num_frames {
        frame_indices.push(r.u32()? as usize);
    }
    let mut lang = Vec::with_capacity(lang_len);
    for _ in 0..lang_len {
        lang.push(r.u32()?);
    }
    let mut intrinsics = [0.0; 9];
    for v in &mut intrinsics {
        *v = r.f64()?;
    }
    let n_pix = image_size.0 * image_size.1;
    let n_patch = patch_grid.0 * patch_grid.1;
    let mut poses = Vec::with_capacity(num_frames);
    let mut depth_maps = Vec::with_capacity(num_frames);
    let mut token_grids = Vec::with_capacity(num_frames);
    let mut patch_depths = Vec::with_capacity(num_frames);
    for _ in 0..num_frames {
        let mut rot = [0.0; 9];
        for v in &mut rot {
            *v = r.f64()?;
        }
        let mut trans = [0.0; 3];
        for v in &mut trans {
            *v = r.f64()?;
        }
        poses.push((rot, trans));
        let mut depth = Vec::with_capacity(n_pix);
        for _ in 0..n_pix {
            depth.push(r.f32()?);
        }
        depth_maps.push(depth);
        let mut tokens = Vec::with_capacity(n_patch * feature_dim);
        for _ in 0..n_patch * feature_dim {
            tokens.push(r.f32()?);
        }
        token_grids.push(tokens);
        let mut pooled = Vec::with_capacity(n_patch);
        for _ in 0..n_patch {
            pooled.push(r.f32()?);
        }
        patch_depths.push(pooled);
    }
    let mut track_sets = Vec::with_capacity(num_sets);
    for _ in 0..num_sets {
        let query_grid = (r.u16()? as usize, r.u16()? as usize);
        let n_tracks = r.u32()? as usize;
        let mut tracks = Vec::with_capacity(n_tracks);
        for _ in 0..n_tracks {
            let seed_cell = r.u16()? as usize;
            let world = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
            let mut records = Vec::with_capacity(num_frames);
            for expect in 0..num_frames {
                let frame = r.u16()? as usize;
                if frame != expect {
                    return Err(CliError::CorruptDataset("track rows out of order".into()));
                }
                records.push(TrackRecord {
                    pixel: (r.f32()? as f64, r.f32()? as f64),
                    patch: r.u16()? as usize,
                    depth: r.f32()? as f64,
                    visible: r.u8()? != 0,
                });
            }
            tracks.push(Track { seed_cell, world, records });
        }
        track_sets.push(TrackSet { query_grid, num_frames, tracks });
    }
    if !r.done() {
        return Err(CliError::CorruptDataset("trailing bytes after track tables".into()));
    }
    Ok(StoredSequence {
        seed,
        frame_indices,
        image_size,
        patch_grid,
        feature_dim,
        intrinsics,
        poses,
        depth_maps,
        token_grids,
        patch_depths,
        track_sets,
        lang,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub id: String,
    pub split: DataSplit,
    /// Record file name relative to the manifest.
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
    pub frame_count: usize,
    pub patch_grid: (usize, usize),
    pub seed: u64,
    pub frame_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub num_sequences: usize,
    pub sequences: Vec<SequenceMeta>,
}

impl DatasetManifest {
    /// Structural checks that need no file IO: version, id uniqueness,
    /// split disjointness.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != MANIFEST_VERSION {
            return Err(CliError::CorruptDataset(format!(
                "unknown manifest version {}",
                self.format_version
            )));
        }
        if self.num_sequences != self.sequences.len() {
            return Err(CliError::CorruptDataset("manifest sequence count mismatch".into()));
        }
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for s in &self.sequences {
            let fresh = match s.split {
                DataSplit::Train => train.insert(s.id.clone()),
                DataSplit::Test => test.insert(s.id.clone()),
            };
            if !fresh {
                return Err(CliError::CorruptDataset(format!("duplicate sequence id {}", s.id)));
            }
        }
        if train.intersection(&test).next().is_some() {
            return Err(CliError::CorruptDataset("train and test ids overlap".into()));
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

/// Reads and structurally validates the manifest; checksums are verified
/// per record as files are read.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, CliError> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::CorruptDataset(format!("cannot read {}: {e}", path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_record_file(dir: &Path, meta: &SequenceMeta) -> Result<StoredSequence, CliError> {
    let bytes = std::fs::read(dir.join(&meta.file))?;
    if sha256_hex(&bytes) != meta.sha256 {
        return Err(CliError::CorruptDataset(format!("checksum mismatch for {}", meta.file)));
    }
    decode_record(&bytes)
}

/// Loads every record of one split, verifying checksums.
pub fn load_split(dir: &Path, split: DataSplit) -> Result<Vec<StoredSequence>, CliError> {
    let manifest = read_manifest(dir)?;
    manifest
        .sequences
        .iter()
        .filter(|m| m.split == split)
        .map(|m| read_record_file(dir, m))
        .collect()
}

pub fn record_file_name(split: DataSplit, index: usize) -> (String, PathBuf) {
    let tag = match split {
        DataSplit::Train => "train",
        DataSplit::Test => "test",
    };
    let id = format!("{tag}-{index:04}");
    let file = PathBuf::from(format!("{id}.gaspds"));
    (id, file)
}
