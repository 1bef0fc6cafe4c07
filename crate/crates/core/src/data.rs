//! Volumetric sequences: binary tensor files, cohort manifests,
//! preprocessing, windowing, axial clip extraction and a seeded synthetic
//! cohort.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dims4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Control,
    Patient,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Control => "control",
            Group::Patient => "patient",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "control" => Ok(Group::Control),
            "patient" => Ok(Group::Patient),
            other => Err(Error::invalid("group", format!("unknown group {other:?}"))),
        }
    }
}

/// One subject's 4-D scan with its masks and motion trace.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSequence {
    pub subject_id: String,
    pub group: Group,
    /// `[X, Y, Z, N]`
    pub data: Tensor,
    /// `[X, Y, Z]`, values 0 or 1.
    pub mask: Tensor,
    /// `[X, Y, Z]`, non-negative integer region labels (0 = unlabelled).
    pub atlas: Option<Tensor>,
    /// Frame-wise displacement in mm, one per frame.
    pub fd: Option<Vec<f64>>,
    /// Frames removed by motion scrubbing upstream.
    pub scrubbed: Option<Vec<bool>>,
}

impl VolumeSequence {
    pub fn spatial_dims(&self) -> [usize; 3] {
        let [x, y, z, _] = dims4(self.data.dims());
        [x, y, z]
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn validate(&self) -> Result<()> {
        let what = "volume";
        if self.data.ndim() != 4 {
            return Err(Error::invalid(what, format!("{}: data must be 4-d, got {:?}", self.subject_id, self.data.dims())));
        }
        let spatial = self.spatial_dims();
        self.mask.ensure_dims("volume mask", &spatial)?;
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid(what, format!("{}: mask is not binary", self.subject_id)));
        }
        if let Some(atlas) = &self.atlas {
            atlas.ensure_dims("volume atlas", &spatial)?;
            if atlas.data().iter().any(|&l| l < 0.0 || l.fract() != 0.0) {
                return Err(Error::invalid(what, format!("{}: atlas labels must be non-negative integers", self.subject_id)));
            }
        }
        let n = self.frames();
        if let Some(fd) = &self.fd {
            if fd.len() != n {
                return Err(Error::invalid(what, format!("{}: {} fd values for {n} frames", self.subject_id, fd.len())));
            }
        }
        if let Some(s) = &self.scrubbed {
            if s.len() != n {
                return Err(Error::invalid(what, format!("{}: {} scrub flags for {n} frames", self.subject_id, s.len())));
            }
        }
        Ok(())
    }
}

/// One axial slice over one window, padded for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceClip {
    pub subject_id: String,
    pub z: usize,
    /// Source frames `window.start .. window.start + frames.len`.
    pub window: Range<usize>,
    /// `[1, H, W, L]`, where `L` is the window length plus any lookahead.
    pub frames: Tensor,
    /// `[H, W]`; padding is 0.
    pub mask: Tensor,
    /// Rows and columns of padding before the source slice.
    pub pad_before: [usize; 2],
    /// Unpadded slice size `[X, Y]`.
    pub source_hw: [usize; 2],
}

impl SliceClip {
    /// Volume coordinates `(x, y)` of padded pixel `(h, w)`, if it is not padding.
    pub fn source_pixel(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let x = h.checked_sub(self.pad_before[0])?;
        let y = w.checked_sub(self.pad_before[1])?;
        (x < self.source_hw[0] && y < self.source_hw[1]).then_some((x, y))
    }
}

// ---------------------------------------------------------------------------
// tensor files

const MAGIC: &[u8; 4] = b"VXT1";
const HEADER_FIXED: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    U8,
    I32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::U8 => 1,
            DType::I32 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::U8),
            2 => Some(DType::I32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U8 => 1,
            DType::I32 => 4,
        }
    }
}

/// Serialises a tensor; integer dtypes require integral in-range values.
pub fn encode_tensor(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid("write_tensor", "too many dimensions"));
    }
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * t.ndim() + t.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("write_tensor", format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, &v) in t.data().iter().enumerate() {
        match dtype {
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            DType::U8 | DType::I32 => {
                let (lo, hi) = if dtype == DType::U8 {
                    (0.0, 255.0)
                } else {
                    (i32::MIN as f64, i32::MAX as f64)
                };
                if v.fract() != 0.0 || !(lo..=hi).contains(&v) {
                    return Err(Error::invalid(
                        "write_tensor",
                        format!("element {i} = {v} is not representable as {dtype:?}"),
                    ));
                }
                if dtype == DType::U8 {
                    out.push(v as u8);
                } else {
                    out.extend_from_slice(&(v as i32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Parses a tensor file image; `path` is only used in diagnostics.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Tensor, DType)> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_FIXED {
        return Err(fail(bytes.len(), format!("file is {} bytes, header needs {HEADER_FIXED}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}, expected \"VXT1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| fail(4, format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let dims_end = HEADER_FIXED + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(fail(bytes.len(), format!("header declares {ndim} dims but file ends at byte {}", bytes.len())));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for k in 0..ndim {
        let off = HEADER_FIXED + 4 * k;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| fail(off, "element count overflows".into()))?;
        dims.push(d);
    }
    let payload = count
        .checked_mul(dtype.width())
        .ok_or_else(|| fail(dims_end, "payload size overflows".into()))?;
    let expected = dims_end + payload;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes for dims {dims:?} as {dtype:?}, found {}", bytes.len()),
        ));
    }
    let body = &bytes[dims_end..];
    let data: Vec<f64> = match dtype {
        DType::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::U8 => body.iter().map(|&b| f64::from(b)).collect(),
        DType::I32 => body
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((Tensor::from_vec(&dims, data)?, dtype))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode_tensor(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Reads a tensor and checks its dtype.
pub fn read_tensor_as(path: &Path, dtype: DType) -> Result<Tensor> {
    let (t, found) = read_tensor(path)?;
    if found != dtype {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 4,
            msg: format!("expected dtype {dtype:?}, found {found:?}"),
        });
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// motion files and manifests

/// One float per line; blank lines are skipped.
pub fn parse_fd(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let s = line.trim();
        if s.is_empty() {
            continue;
        }
        let v: f64 = s.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected a number, found {s:?}"),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn load_fd(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fd(&text, path)
}

fn write_lines<T: fmt::Display>(path: &Path, values: impl Iterator<Item = T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for v in values {
        writeln!(f, "{v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Scrub flags: one `0` or `1` per line.
pub fn load_scrub(path: &Path) -> Result<Vec<bool>> {
    load_fd(path)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            v if v == 0.0 => Ok(false),
            v if v == 1.0 => Ok(true),
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("scrub flag must be 0 or 1, found {v}"),
            }),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub group: Group,
    pub data_path: String,
    pub mask_path: String,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub atlas_path: Option<String>,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub fd_path: Option<String>,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub scrub_path: Option<String>,
}

fn empty_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|s| !s.is_empty()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for row in rdr.deserialize() {
        rows.push(row.map_err(|e| csv_error(path, e))?);
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every subject listed in a manifest; relative paths are taken from
/// the manifest's directory.
pub fn load_cohort(manifest: &Path) -> Result<Vec<VolumeSequence>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for row in read_manifest(manifest)? {
        let data = read_tensor_as(&resolve(base, &row.data_path), DType::F64)?;
        let mask = read_tensor(&resolve(base, &row.mask_path))?.0;
        let atlas = row
            .atlas_path
            .as_ref()
            .map(|p| read_tensor(&resolve(base, p)).map(|t| t.0))
            .transpose()?;
        let fd = row.fd_path.as_ref().map(|p| load_fd(&resolve(base, p))).transpose()?;
        let scrubbed = row.scrub_path.as_ref().map(|p| load_scrub(&resolve(base, p))).transpose()?;
        let vol = VolumeSequence {
            subject_id: row.subject_id,
            group: row.group,
            data,
            mask,
            atlas,
            fd,
            scrubbed,
        };
        vol.validate()?;
        out.push(vol);
    }
    Ok(out)
}

/// Writes one set of files per subject plus `manifest.csv` into `dir`.
/// Returns the manifest path.
pub fn save_cohort(dir: &Path, volumes: &[VolumeSequence]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(volumes.len());
    for v in volumes {
        v.validate()?;
        let id = &v.subject_id;
        let data_path = format!("{id}_data.vxt");
        let mask_path = format!("{id}_mask.vxt");
        write_tensor(&dir.join(&data_path), &v.data, DType::F64)?;
        write_tensor(&dir.join(&mask_path), &v.mask, DType::U8)?;
        let atlas_path = match &v.atlas {
            Some(a) => {
                let p = format!("{id}_atlas.vxt");
                write_tensor(&dir.join(&p), a, DType::I32)?;
                Some(p)
            }
            None => None,
        };
        let fd_path = match &v.fd {
            Some(fd) => {
                let p = format!("{id}_fd.txt");
                write_lines(&dir.join(&p), fd.iter().map(|v| format!("{v:e}")))?;
                Some(p)
            }
            None => None,
        };
        let scrub_path = match &v.scrubbed {
            Some(s) => {
                let p = format!("{id}_scrub.txt");
                write_lines(&dir.join(&p), s.iter().map(|&b| u8::from(b)))?;
                Some(p)
            }
            None => None,
        };
        rows.push(ManifestRow {
            subject_id: id.clone(),
            group: v.group,
            data_path,
            mask_path,
            atlas_path,
            fd_path,
            scrub_path,
        });
    }
    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// preprocessing

/// Per-voxel min-max scaling of a `[X, Y, Z, N]` tensor; constant voxels become 0.
pub fn minmax_scale(data: &mut Tensor) {
    let n = *data.dims().last().expect("minmax_scale on scalar");
    if n == 0 {
        return;
    }
    for series in data.data_mut().chunks_mut(n) {
        let (lo, hi) = series
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in series.iter_mut() {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
}

/// Zeroes every voxel outside the mask at all time points.
pub fn apply_mask(volume: &mut VolumeSequence) -> Result<()> {
    let spatial = volume.spatial_dims();
    volume.mask.ensure_dims("apply_mask", &spatial)?;
    let n = volume.frames();
    let mask = volume.mask.data().to_vec();
    for (series, m) in volume.data.data_mut().chunks_mut(n.max(1)).zip(mask) {
        if m == 0.0 {
            series.fill(0.0);
        }
    }
    Ok(())
}

/// Non-overlapping windows of `t + 1` frames from frame 0; the remainder is dropped.
pub fn segment_windows(n_frames: usize, t: usize) -> Vec<Range<usize>> {
    let len = t + 1;
    let count = n_frames / len;
    if count == 0 {
        log::warn!("{n_frames} frames cannot hold a window of {len}");
    }
    (0..count).map(|k| k * len..(k + 1) * len).collect()
}

/// Smallest multiple of `multiple` that is at least `n`.
pub fn pad_to_multiple(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// One clip per (window, z) with a non-empty mask slice, padded
/// symmetrically to `target_hw`.
pub fn extract_axial_clips(volume: &VolumeSequence, windows: &[Range<usize>], target_hw: [usize; 2]) -> Result<Vec<SliceClip>> {
    extract_axial_clips_with_lookahead(volume, windows, target_hw, 0)
}

/// As [`extract_axial_clips`], appending `lookahead` frames after each
/// window. Windows without enough trailing frames are skipped.
pub fn extract_axial_clips_with_lookahead(
    volume: &VolumeSequence,
    windows: &[Range<usize>],
    target_hw: [usize; 2],
    lookahead: usize,
) -> Result<Vec<SliceClip>> {
    let [nx, ny, nz] = volume.spatial_dims();
    let n = volume.frames();
    let [th, tw] = target_hw;
    if th < nx || tw < ny {
        return Err(Error::invalid(
            "extract_axial_clips",
            format!("target {target_hw:?} smaller than slice [{nx}, {ny}]"),
        ));
    }
    let pad = [(th - nx) / 2, (tw - ny) / 2];
    let src = volume.data.data();
    let mut clips = Vec::new();
    for w in windows {
        if w.start >= w.end || w.end > n {
            return Err(Error::invalid("extract_axial_clips", format!("window {w:?} outside 0..{n}")));
        }
        let len = w.len() + lookahead;
        if w.start + len > n {
            continue;
        }
        for z in 0..nz {
            let mut mask = Tensor::zeros(&[th, tw]);
            let mut any = false;
            for x in 0..nx {
                for y in 0..ny {
                    let m = volume.mask.get(&[x, y, z]);
                    if m != 0.0 {
                        any = true;
                        mask.set(&[x + pad[0], y + pad[1]], 1.0);
                    }
                }
            }
            if !any {
                continue;
            }
            let mut frames = Tensor::zeros(&[1, th, tw, len]);
            let out = frames.data_mut();
            for x in 0..nx {
                for y in 0..ny {
                    let s = ((x * ny + y) * nz + z) * n + w.start;
                    let d = ((x + pad[0]) * tw + y + pad[1]) * len;
                    out[d..d + len].copy_from_slice(&src[s..s + len]);
                }
            }
            clips.push(SliceClip {
                subject_id: volume.subject_id.clone(),
                z,
                window: w.start..w.start + len,
                frames,
                mask,
                pad_before: pad,
                source_hw: [nx, ny],
            });
        }
    }
    Ok(clips)
}

/// Clips for training or scoring: `T + 1` frame windows plus `lookahead`,
/// slices padded to a multiple of `spatial_multiple`.
pub fn clips_for(volume: &VolumeSequence, t: usize, spatial_multiple: usize, lookahead: usize) -> Result<Vec<SliceClip>> {
    let [nx, ny, _] = volume.spatial_dims();
    let windows = segment_windows(volume.frames(), t);
    let hw = [pad_to_multiple(nx, spatial_multiple), pad_to_multiple(ny, spatial_multiple)];
    extract_axial_clips_with_lookahead(volume, &windows, hw, lookahead)
}

// ---------------------------------------------------------------------------
// synthetic cohort

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_control: usize,
    pub n_patient: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub n: usize,
    pub seed: u64,
    pub anomaly_strength: f64,
    /// Spatial blobs per subject.
    pub blobs: usize,
    /// Atlas blocks along x, y and z.
    pub atlas_blocks: [usize; 3],
    /// Number of atlas regions perturbed in patients.
    pub anomalous_regions: usize,
    /// Scale of the band-limited signal before min-max scaling; with
    /// `noise_sigma` it sets the per-voxel signal-to-noise ratio.
    pub signal_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_control: 8,
            n_patient: 8,
            x: 16,
            y: 16,
            z: 4,
            n: 64,
            seed: 0,
            anomaly_strength: 1.0,
            blobs: 4,
            atlas_blocks: [2, 2, 2],
            anomalous_regions: 2,
            signal_amplitude: 0.25,
            noise_sigma: 0.02,
        }
    }
}

/// High-pass noise added to patient voxels, relative to the signal.
const HF_NOISE: f64 = 0.3;
const MIN_PERIOD: f64 = 10.0;
const MAX_PERIOD: f64 = 24.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.x, self.y, self.z, self.n];
        if dims.contains(&0) {
            return Err(Error::invalid("synth_cohort", format!("dims must be positive, got {dims:?}")));
        }
        if self.atlas_blocks.contains(&0) {
            return Err(Error::invalid("synth_cohort", "atlas_blocks must be positive"));
        }
        let regions = self.atlas_blocks.iter().product::<usize>();
        if self.anomalous_regions > regions {
            return Err(Error::invalid(
                "synth_cohort",
                format!("{} anomalous regions requested but the atlas has {regions}", self.anomalous_regions),
            ));
        }
        if !(self.anomaly_strength >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.signal_amplitude > 0.0) {
            return Err(Error::invalid(
                "synth_cohort",
                "anomaly_strength and noise_sigma must be non-negative, signal_amplitude positive",
            ));
        }
        Ok(())
    }

    fn cohort_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn subject_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }
}

/// Ellipsoid touching 95% of each half-extent.
pub fn ellipsoid_mask(dims: [usize; 3]) -> Tensor {
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let radius = dims.map(|d| (0.475 * d as f64).max(0.5));
    Tensor::from_fn(&dims, |i| {
        let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        let r: f64 = (0..3).map(|k| ((p[k] as f64 - centre[k]) / radius[k]).powi(2)).sum();
        if r <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Block atlas: labels `1..=bx*by*bz` inside the mask, 0 outside.
pub fn block_atlas(mask: &Tensor, blocks: [usize; 3]) -> Tensor {
    let d: [usize; 3] = mask.dims().try_into().expect("3-d mask");
    Tensor::from_fn(&d, |i| {
        if mask.data()[i] == 0.0 {
            return 0.0;
        }
        let p = [i / (d[1] * d[2]), (i / d[2]) % d[1], i % d[2]];
        let b: [usize; 3] = std::array::from_fn(|k| (p[k] * blocks[k] / d[k]).min(blocks[k] - 1));
        (1 + (b[0] * blocks[1] + b[1]) * blocks[2] + b[2]) as f64
    })
}

/// Atlas labels perturbed in synthetic patients, ascending.
pub fn planted_regions(config: &SynthConfig) -> Vec<usize> {
    let regions = config.atlas_blocks.iter().product::<usize>();
    let mut rng = config.cohort_rng();
    let mut picked = rand::seq::index::sample(&mut rng, regions, config.anomalous_regions)
        .into_iter()
        .map(|r| r + 1)
        .collect::<Vec<_>>();
    picked.sort_unstable();
    picked
}

struct Oscillator {
    amp: f64,
    freq: f64,
    phase: f64,
}

fn band_limited(rng: &mut ChaCha8Rng, components: usize) -> Vec<Oscillator> {
    (0..components)
        .map(|_| Oscillator {
            amp: rng.gen_range(0.5..1.0),
            freq: 1.0 / rng.gen_range(MIN_PERIOD..MAX_PERIOD),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        })
        .collect()
}

fn oscillate(osc: &[Oscillator], t: f64, phase_shift: f64) -> f64 {
    osc.iter()
        .map(|o| o.amp * (std::f64::consts::TAU * o.freq * t + o.phase + phase_shift).sin())
        .sum()
}

/// Seeded cohort: controls first (`ctrl000`, ...), then patients (`pat000`, ...).
///
/// Each voxel is a weighted sum of a global band-limited signal and `blobs`
/// Gaussian spatial blobs carrying their own band-limited signals, plus
/// white noise. Patients get phase-scrambled, high-pass noise corrupted
/// dynamics in [`planted_regions`], scaled by `anomaly_strength`.
pub fn synth_cohort(config: &SynthConfig) -> Result<Vec<VolumeSequence>> {
    config.validate()?;
    let dims = [config.x, config.y, config.z];
    let mask = ellipsoid_mask(dims);
    let atlas = block_atlas(&mask, config.atlas_blocks);
    let planted = planted_regions(config);
    let total = config.n_control + config.n_patient;
    (0..total)
        .map(|i| {
            let (group, id) = if i < config.n_control {
                (Group::Control, format!("ctrl{i:03}"))
            } else {
                (Group::Patient, format!("pat{:03}", i - config.n_control))
            };
            let strength = if group == Group::Patient {
                config.anomaly_strength
            } else {
                0.0
            };
            let mut rng = config.subject_rng(i);
            synth_subject(config, &mut rng, id, group, &mask, &atlas, &planted, strength)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn synth_subject(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    subject_id: String,
    group: Group,
    mask: &Tensor,
    atlas: &Tensor,
    planted: &[usize],
    strength: f64,
) -> Result<VolumeSequence> {
    let [nx, ny, nz] = [config.x, config.y, config.z];
    let n = config.n;
    let global = band_limited(rng, 2);
    struct Blob {
        centre: [f64; 3],
        width: f64,
        weight: f64,
        osc: Vec<Oscillator>,
    }
    let blobs: Vec<Blob> = (0..config.blobs)
        .map(|_| Blob {
            centre: [
                rng.gen_range(0.0..nx as f64),
                rng.gen_range(0.0..ny as f64),
                rng.gen_range(0.0..nz as f64),
            ],
            width: rng.gen_range(0.15..0.3) * nx.max(ny) as f64,
            weight: rng.gen_range(0.8..1.5),
            osc: band_limited(rng, 2),
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");

    let mut data = Tensor::zeros(&[nx, ny, nz, n]);
    let out = data.data_mut();
    let mut series = vec![0.0; n];
    let mut white = vec![0.0; n + 1];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let voxel = (x * ny + y) * nz + z;
                let label = atlas.data()[voxel] as usize;
                let perturbed = strength > 0.0 && planted.contains(&label);
                let weights: Vec<f64> = blobs
                    .iter()
                    .map(|b| {
                        let d2 = (x as f64 - b.centre[0]).powi(2)
                            + (y as f64 - b.centre[1]).powi(2)
                            + (z as f64 - b.centre[2]).powi(2);
                        b.weight * (-d2 / (2.0 * b.width * b.width)).exp()
                    })
                    .collect();
                let scramble: Vec<f64> = if perturbed {
                    (0..=blobs.len())
                        .map(|_| strength * rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
                        .collect()
                } else {
                    vec![0.0; blobs.len() + 1]
                };
                if perturbed {
                    for w in white.iter_mut() {
                        *w = unit.sample(rng);
                    }
                }
                for (k, s) in series.iter_mut().enumerate() {
                    let t = k as f64;
                    let mut v = 0.5 * oscillate(&global, t, scramble[0]);
                    for (j, b) in blobs.iter().enumerate() {
                        v += weights[j] * oscillate(&b.osc, t, scramble[j + 1]);
                    }
                    if perturbed {
                        // first difference of white noise: power rises towards Nyquist
                        v += strength * HF_NOISE * (white[k + 1] - white[k]);
                    }
                    *s = config.signal_amplitude * v + noise.sample(rng);
                }
                let o = voxel * n;
                out[o..o + n].copy_from_slice(&series);
            }
        }
    }

    let fd: Vec<f64> = (0..n)
        .map(|_| {
            let base = (0.08 + 0.04 * unit.sample(rng)).abs();
            if rng.gen_bool(0.05) {
                base + rng.gen_range(0.5..1.5)
            } else {
                base
            }
        })
        .collect();
    let scrubbed = fd.iter().map(|&v| v > 0.5).collect();

    minmax_scale(&mut data);
    let mut vol = VolumeSequence {
        subject_id,
        group,
        data,
        mask: mask.clone(),
        atlas: Some(atlas.clone()),
        fd: Some(fd),
        scrubbed: Some(scrubbed),
    };
    apply_mask(&mut vol)?;
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_volume() -> VolumeSequence {
        let data = Tensor::from_fn(&[4, 4, 2, 5], |i| (i as f64 * 0.37).sin().abs());
        VolumeSequence {
            subject_id: "s1".into(),
            group: Group::Control,
            data,
            mask: Tensor::full(&[4, 4, 2], 1.0),
            atlas: None,
            fd: None,
            scrubbed: None,
        }
    }

    #[test]
    fn tensor_file_round_trip_and_rejections() {
        let v = small_volume();
        let bytes = encode_tensor(&v.data, DType::F64).unwrap();
        let (back, dt) = decode_tensor(&bytes, Path::new("mem")).unwrap();
        assert_eq!(dt, DType::F64);
        assert_eq!(back, v.data);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bad, Path::new("mem")), Err(Error::Format { offset: 0, .. })));

        let short = &bytes[..bytes.len() - 3];
        let err = decode_tensor(short, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {} bytes", bytes.len())), "{err}");

        let mut dt_bad = bytes.clone();
        dt_bad[4] = 9;
        assert!(decode_tensor(&dt_bad, Path::new("mem")).is_err());

        let labels = Tensor::from_vec(&[3], vec![0.0, 7.0, -2.0]).unwrap();
        let (l, _) = decode_tensor(&encode_tensor(&labels, DType::I32).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(l, labels);
        assert!(encode_tensor(&labels, DType::U8).is_err());
    }

    #[test]
    fn minmax_examples() {
        let mut t = Tensor::from_vec(&[1, 1, 2, 3], vec![2.0, 4.0, 6.0, 5.0, 5.0, 5.0]).unwrap();
        minmax_scale(&mut t);
        assert_eq!(t.data(), &[0.0, 0.5, 1.0, 0.0, 0.0, 0.0]);
        let once = t.clone();
        minmax_scale(&mut t);
        assert_eq!(t, once);
    }

    #[test]
    fn mask_examples() {
        let mut v = small_volume();
        let orig = v.data.clone();
        apply_mask(&mut v).unwrap();
        assert_eq!(v.data, orig);
        v.mask = Tensor::from_fn(&[4, 4, 2], |i| ((i + i / 2 / 4) % 2) as f64);
        apply_mask(&mut v).unwrap();
        let zeroed = v.data.data().chunks(5).filter(|s| s.iter().all(|&x| x == 0.0)).count();
        assert_eq!(zeroed, 16);
        v.mask = Tensor::zeros(&[4, 4, 2]);
        apply_mask(&mut v).unwrap();
        assert!(v.data.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn window_examples() {
        assert_eq!(segment_windows(47, 20), vec![0..21, 21..42]);
        assert_eq!(segment_windows(21, 20), vec![0..21]);
        assert!(segment_windows(20, 20).is_empty());
    }

    #[test]
    fn clip_extraction_indexes_source() {
        let mut v = small_volume();
        v.data = Tensor::from_fn(&[3, 5, 2, 7], |i| i as f64);
        v.mask = Tensor::full(&[3, 5, 2], 1.0);
        v.mask.set(&[0, 0, 1], 0.0);
        assert_eq!(pad_to_multiple(45, 4), 48);
        assert_eq!(pad_to_multiple(54, 4), 56);
        let windows = segment_windows(7, 2);
        let clips = extract_axial_clips(&v, &windows, [4, 8]).unwrap();
        assert_eq!(clips.len(), 4);
        for c in &clips {
            assert_eq!(c.pad_before, [0, 1]);
            for h in 0..4 {
                for w in 0..8 {
                    match c.source_pixel(h, w) {
                        Some((x, y)) => {
                            assert_eq!(c.mask.get(&[h, w]), v.mask.get(&[x, y, c.z]));
                            for k in 0..3 {
                                assert_eq!(c.frames.get(&[0, h, w, k]), v.data.get(&[x, y, c.z, c.window.start + k]));
                            }
                        }
                        None => assert_eq!(c.mask.get(&[h, w]), 0.0),
                    }
                }
            }
        }
        // an empty slice is dropped
        v.mask = Tensor::zeros(&[3, 5, 2]);
        v.mask.set(&[1, 1, 0], 1.0);
        assert_eq!(extract_axial_clips(&v, &windows, [4, 8]).unwrap().len(), 2);
        // lookahead skips windows that run off the end
        assert_eq!(extract_axial_clips_with_lookahead(&v, &windows, [4, 8], 1).unwrap().len(), 2);
        assert_eq!(extract_axial_clips_with_lookahead(&v, &windows[..1], [4, 8], 2).unwrap()[0].frames.dims(), &[1, 4, 8, 5]);
    }

    #[test]
    fn fd_parsing() {
        let p = Path::new("fd.txt");
        assert_eq!(parse_fd("0.1\n0.2\n", p).unwrap(), vec![0.1, 0.2]);
        assert!(parse_fd("", p).unwrap().is_empty());
        match parse_fd("0.1\n0.2\nabc\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atlas_and_planted_regions() {
        let mask = ellipsoid_mask([16, 16, 4]);
        let atlas = block_atlas(&mask, [2, 2, 2]);
        let mut labels: Vec<usize> = atlas.data().iter().map(|&l| l as usize).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, (0..=8).collect::<Vec<_>>());
        let cfg = SynthConfig::default();
        let p = planted_regions(&cfg);
        assert_eq!(p.len(), 2);
        assert_eq!(p, planted_regions(&cfg));
    }
}
