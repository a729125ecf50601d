//! File formats: dataset bundles, TUM trajectories, pipeline configs and run manifests.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ba::{AlphaDenominator, DepthResidualSpace};
use crate::bundle::{
    DatasetBundle, EdgeRecord, FrameInfo, GroundTruth, GtPatch, Mask, PatchCandidate, PriorRecord,
};
use crate::eval::{Trajectory, TrajectoryEntry};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::loop_detection::{decode_descriptors, encode_descriptors};
use crate::pipeline::{PipelineConfig, PostRefine};
use crate::sim::WorldSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Offset(usize),
    Whole,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Offset(n) => write!(f, "byte {n}"),
            Location::Whole => f.write_str("file"),
        }
    }
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}, {location}: {message}")]
    Format { file: PathBuf, location: Location, message: String },
    #[error("{file}: {source}")]
    Io { file: PathBuf, source: std::io::Error },
    #[error("unknown config key `{key}` (line {line})")]
    UnknownKey { key: String, line: usize },
    #[error("invalid value for config key `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

fn format_err(file: &Path, location: Location, message: impl Into<String>) -> IoError {
    IoError::Format { file: file.to_path_buf(), location, message: message.into() }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IoError::MissingFile(path.to_path_buf()),
        _ => IoError::Io { file: path.to_path_buf(), source: e },
    })
}

fn read_text(path: &Path) -> Result<String, IoError> {
    let bytes = read_bytes(path)?;
    String::from_utf8(bytes).map_err(|e| format_err(path, Location::Offset(e.utf8_error().valid_up_to()), "not UTF-8"))
}

fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| IoError::Io { file: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, data).map_err(|e| IoError::Io { file: path.to_path_buf(), source: e })
}

// ---------------------------------------------------------------- CSV

/// Rows of a CSV file addressed by column name. Extra columns are tolerated with a warning.
struct Table {
    file: PathBuf,
    rows: Vec<(usize, csv::StringRecord)>,
    cols: HashMap<String, usize>,
}

impl Table {
    fn read(path: &Path, required: &[&str]) -> Result<Self, IoError> {
        let text = read_text(path)?;
        let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| format_err(path, Location::Line(1), e.to_string()))?.clone();
        let cols: HashMap<String, usize> = header.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        for r in required {
            if !cols.contains_key(*r) {
                return Err(format_err(path, Location::Line(1), format!("missing column `{r}`")));
            }
        }
        let extra: Vec<&str> = header.iter().filter(|h| !required.contains(h)).collect();
        if !extra.is_empty() {
            log::warn!("{}: ignoring unknown columns {:?}", path.display(), extra);
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                format_err(path, Location::Line(line), e.to_string())
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            rows.push((line, rec));
        }
        Ok(Self { file: path.to_path_buf(), rows, cols })
    }

    fn get<T: std::str::FromStr>(&self, row: usize, col: &str) -> Result<T, IoError>
    where
        T::Err: fmt::Display,
    {
        let (line, rec) = &self.rows[row];
        let raw = rec.get(self.cols[col]).unwrap_or("");
        raw.parse::<T>()
            .map_err(|e| format_err(&self.file, Location::Line(*line), format!("column `{col}`: cannot parse `{raw}`: {e}")))
    }

    fn len(&self) -> usize {
        self.rows.len()
    }
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- PGM masks

fn encode_pgm(m: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    out.extend_from_slice(&m.data);
    out
}

fn decode_pgm(path: &Path, data: &[u8]) -> Result<Mask, IoError> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, Location::Offset(pos), "truncated PGM header"));
        }
        fields.push((start, String::from_utf8_lossy(&data[start..pos]).into_owned()));
    }
    if fields[0].1 != "P5" {
        return Err(format_err(path, Location::Offset(0), "expected binary PGM (P5)"));
    }
    let num = |i: usize| -> Result<u32, IoError> {
        fields[i].1.parse().map_err(|_| format_err(path, Location::Offset(fields[i].0), "bad PGM header number"))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(format_err(path, Location::Offset(fields[3].0), "PGM maxval must be 255"));
    }
    pos += 1;
    let n = width as usize * height as usize;
    let body = data.get(pos..pos + n).ok_or_else(|| format_err(path, Location::Offset(data.len()), "truncated PGM data"))?;
    if pos + n != data.len() {
        return Err(format_err(path, Location::Offset(pos + n), "trailing bytes after PGM data"));
    }
    Ok(Mask { width, height, data: body.to_vec() })
}

// ---------------------------------------------------------------- bundles

const FRAMES: &str = "frames.csv";
const IMAGE: &str = "image.csv";
const PATCHES: &str = "patches.csv";
const EDGES: &str = "edges.csv";
const PRIORS: &str = "priors.csv";
const MASKS: &str = "masks";
const DESCRIPTORS: &str = "descriptors.bin";
const GT_TRAJ: &str = "gt_traj.txt";
const GT_DIR: &str = "gt";
const WORLD: &str = "world.json";

fn quat(x: f64, y: f64, z: f64, w: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
}

/// Write a bundle directory. `world` is echoed as `world.json` when given.
pub fn write_bundle(bundle: &DatasetBundle, world: Option<&WorldSpec>, dir: &Path) -> Result<(), IoError> {
    write_file(&dir.join(IMAGE), csv_text(&["width", "height"], [vec![bundle.width.to_string(), bundle.height.to_string()]]))?;
    write_file(
        &dir.join(FRAMES),
        csv_text(&["frame_id", "timestamp"], bundle.frames.iter().map(|f| vec![f.id.to_string(), f.timestamp.to_string()])),
    )?;
    write_file(
        &dir.join(PATCHES),
        csv_text(
            &["frame_id", "patch_id", "u", "v", "footprint"],
            bundle.patches.iter().map(|p| {
                vec![
                    p.frame_id.to_string(),
                    p.patch_id.to_string(),
                    p.center.x.to_string(),
                    p.center.y.to_string(),
                    p.footprint.to_string(),
                ]
            }),
        ),
    )?;
    write_file(
        &dir.join(EDGES),
        csv_text(
            &["src_frame", "patch_id", "dst_frame", "u", "v", "confidence", "dst_prior_depth"],
            bundle.edges.iter().map(|e| {
                vec![
                    e.src_frame.to_string(),
                    e.patch_id.to_string(),
                    e.dst_frame.to_string(),
                    e.observed.x.to_string(),
                    e.observed.y.to_string(),
                    e.confidence.to_string(),
                    e.dst_prior_depth.to_string(),
                ]
            }),
        ),
    )?;
    write_file(
        &dir.join(PRIORS),
        csv_text(
            &["frame_id", "patch_id", "prior_depth"],
            bundle.priors.iter().map(|p| vec![p.frame_id.to_string(), p.patch_id.to_string(), p.prior_depth.to_string()]),
        ),
    )?;
    let mask_dir = dir.join(MASKS);
    fs::create_dir_all(&mask_dir).map_err(|e| IoError::Io { file: mask_dir.clone(), source: e })?;
    for (id, m) in &bundle.masks {
        write_file(&mask_dir.join(format!("{id}.pgm")), encode_pgm(m))?;
    }
    write_file(&dir.join(DESCRIPTORS), encode_descriptors(&bundle.descriptors))?;
    if let Some(gt) = &bundle.ground_truth {
        let traj = Trajectory {
            entries: bundle
                .frames
                .iter()
                .zip(&gt.poses)
                .map(|(f, p)| TrajectoryEntry { timestamp: f.timestamp, frame_id: f.id, pose: Some(*p) })
                .collect(),
        };
        write_file(&dir.join(GT_TRAJ), tum_text(&traj))?;
        write_ground_truth(bundle, gt, &dir.join(GT_DIR))?;
    }
    if let Some(w) = world {
        let json = serde_json::to_string_pretty(w).expect("world spec serializes");
        write_file(&dir.join(WORLD), json + "\n")?;
    }
    Ok(())
}

fn write_ground_truth(bundle: &DatasetBundle, gt: &GroundTruth, dir: &Path) -> Result<(), IoError> {
    let k = &gt.intrinsics;
    write_file(
        &dir.join("camera.csv"),
        csv_text(
            &["fx", "fy", "cx", "cy", "width", "height"],
            [vec![k.fx.to_string(), k.fy.to_string(), k.cx.to_string(), k.cy.to_string(), k.width.to_string(), k.height.to_string()]],
        ),
    )?;
    write_file(
        &dir.join("frames.csv"),
        csv_text(
            &["frame_id", "place_id", "prior_scale", "qx", "qy", "qz", "qw", "tx", "ty", "tz"],
            bundle.frames.iter().enumerate().map(|(i, f)| {
                let p = &gt.poses[i];
                let q = p.rotation.coords;
                let t = p.translation;
                vec![
                    f.id.to_string(),
                    gt.place_ids[i].to_string(),
                    gt.prior_scales[i].to_string(),
                    q.x.to_string(),
                    q.y.to_string(),
                    q.z.to_string(),
                    q.w.to_string(),
                    t.x.to_string(),
                    t.y.to_string(),
                    t.z.to_string(),
                ]
            }),
        ),
    )?;
    write_file(
        &dir.join("landmarks.csv"),
        csv_text(
            &["x", "y", "z", "vx", "vy", "vz"],
            gt.landmarks.iter().zip(&gt.velocities).map(|(x, v)| {
                [x.x, x.y, x.z, v.x, v.y, v.z].iter().map(|c| c.to_string()).collect()
            }),
        ),
    )?;
    write_file(
        &dir.join("patches.csv"),
        csv_text(
            &["frame_id", "patch_id", "landmark", "true_depth", "dynamic"],
            gt.patches.iter().map(|p| {
                vec![
                    p.frame_id.to_string(),
                    p.patch_id.to_string(),
                    p.landmark.to_string(),
                    p.true_depth.to_string(),
                    (p.dynamic as u8).to_string(),
                ]
            }),
        ),
    )
}

fn read_ground_truth(dir: &Path, n_frames: usize) -> Result<GroundTruth, IoError> {
    let path = dir.join("camera.csv");
    let t = Table::read(&path, &["fx", "fy", "cx", "cy", "width", "height"])?;
    if t.len() != 1 {
        return Err(format_err(&path, Location::Whole, "expected exactly one row"));
    }
    let intrinsics = CameraIntrinsics {
        fx: t.get(0, "fx")?,
        fy: t.get(0, "fy")?,
        cx: t.get(0, "cx")?,
        cy: t.get(0, "cy")?,
        width: t.get(0, "width")?,
        height: t.get(0, "height")?,
    };
    let path = dir.join("frames.csv");
    let t = Table::read(&path, &["frame_id", "place_id", "prior_scale", "qx", "qy", "qz", "qw", "tx", "ty", "tz"])?;
    if t.len() != n_frames {
        return Err(format_err(&path, Location::Whole, format!("{} rows for {n_frames} frames", t.len())));
    }
    let (mut poses, mut place_ids, mut prior_scales) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..t.len() {
        let rotation = quat(t.get(i, "qx")?, t.get(i, "qy")?, t.get(i, "qz")?, t.get(i, "qw")?);
        let translation = Vector3::new(t.get(i, "tx")?, t.get(i, "ty")?, t.get(i, "tz")?);
        poses.push(Pose::new(rotation, translation));
        place_ids.push(t.get(i, "place_id")?);
        prior_scales.push(t.get(i, "prior_scale")?);
    }
    let t = Table::read(&dir.join("landmarks.csv"), &["x", "y", "z", "vx", "vy", "vz"])?;
    let (mut landmarks, mut velocities) = (Vec::new(), Vec::new());
    for i in 0..t.len() {
        landmarks.push(Vector3::new(t.get(i, "x")?, t.get(i, "y")?, t.get(i, "z")?));
        velocities.push(Vector3::new(t.get(i, "vx")?, t.get(i, "vy")?, t.get(i, "vz")?));
    }
    let t = Table::read(&dir.join("patches.csv"), &["frame_id", "patch_id", "landmark", "true_depth", "dynamic"])?;
    let mut patches = Vec::new();
    for i in 0..t.len() {
        patches.push(GtPatch {
            frame_id: t.get(i, "frame_id")?,
            patch_id: t.get(i, "patch_id")?,
            landmark: t.get(i, "landmark")?,
            true_depth: t.get(i, "true_depth")?,
            dynamic: t.get::<u8>(i, "dynamic")? != 0,
        });
    }
    Ok(GroundTruth { intrinsics, poses, landmarks, velocities, place_ids, patches, prior_scales })
}

/// Read a bundle directory; `gt/` is optional.
pub fn read_bundle(dir: &Path) -> Result<DatasetBundle, IoError> {
    let path = dir.join(IMAGE);
    let t = Table::read(&path, &["width", "height"])?;
    if t.len() != 1 {
        return Err(format_err(&path, Location::Whole, "expected exactly one row"));
    }
    let (width, height) = (t.get(0, "width")?, t.get(0, "height")?);

    let t = Table::read(&dir.join(FRAMES), &["frame_id", "timestamp"])?;
    let mut frames = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        frames.push(FrameInfo { id: t.get(i, "frame_id")?, timestamp: t.get(i, "timestamp")? });
    }

    let t = Table::read(&dir.join(PATCHES), &["frame_id", "patch_id", "u", "v", "footprint"])?;
    let mut patches = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        patches.push(PatchCandidate {
            frame_id: t.get(i, "frame_id")?,
            patch_id: t.get(i, "patch_id")?,
            center: Vector2::new(t.get(i, "u")?, t.get(i, "v")?),
            footprint: t.get(i, "footprint")?,
        });
    }

    let t = Table::read(&dir.join(EDGES), &["src_frame", "patch_id", "dst_frame", "u", "v", "confidence", "dst_prior_depth"])?;
    let mut edges = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        edges.push(EdgeRecord {
            src_frame: t.get(i, "src_frame")?,
            patch_id: t.get(i, "patch_id")?,
            dst_frame: t.get(i, "dst_frame")?,
            observed: Vector2::new(t.get(i, "u")?, t.get(i, "v")?),
            confidence: t.get(i, "confidence")?,
            dst_prior_depth: t.get(i, "dst_prior_depth")?,
        });
    }

    let t = Table::read(&dir.join(PRIORS), &["frame_id", "patch_id", "prior_depth"])?;
    let mut priors = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        priors.push(PriorRecord {
            frame_id: t.get(i, "frame_id")?,
            patch_id: t.get(i, "patch_id")?,
            prior_depth: t.get(i, "prior_depth")?,
        });
    }

    let mut masks = BTreeMap::new();
    let mask_dir = dir.join(MASKS);
    if mask_dir.is_dir() {
        let entries = fs::read_dir(&mask_dir).map_err(|e| IoError::Io { file: mask_dir.clone(), source: e })?;
        for entry in entries {
            let entry = entry.map_err(|e| IoError::Io { file: mask_dir.clone(), source: e })?;
            let path = entry.path();
            if path.extension().and_then(|s| s.to_str()) != Some("pgm") {
                continue;
            }
            let id: u32 = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format_err(&path, Location::Whole, "mask file name must be <frame_id>.pgm"))?;
            masks.insert(id, decode_pgm(&path, &read_bytes(&path)?)?);
        }
    }

    let path = dir.join(DESCRIPTORS);
    let descriptors = decode_descriptors(&read_bytes(&path)?)
        .map_err(|e| format_err(&path, Location::Offset(e.offset), e.message))?;

    let gt_dir = dir.join(GT_DIR);
    let ground_truth = if gt_dir.is_dir() { Some(read_ground_truth(&gt_dir, frames.len())?) } else { None };

    Ok(DatasetBundle { width, height, frames, patches, edges, priors, masks, descriptors, ground_truth })
}

pub fn read_world(path: &Path) -> Result<WorldSpec, IoError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, Location::Line(e.line()), e.to_string()))
}

/// SHA-256 over every regular file below `dir` except `manifest.json`, in sorted relative-path order.
pub fn hash_dir(dir: &Path) -> Result<String, IoError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| IoError::Io { file: d.clone(), source: e })?;
        for entry in entries {
            let entry = entry.map_err(|e| IoError::Io { file: d.clone(), source: e })?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                files.push(p);
            }
        }
    }
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/"), p))
        .collect();
    rel.sort();
    let mut h = Sha256::new();
    for (name, p) in rel {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(Sha256::digest(read_bytes(&p)?));
    }
    Ok(hex(&h.finalize()))
}

pub fn hash_file(path: &Path) -> Result<String, IoError> {
    Ok(hex(&Sha256::digest(read_bytes(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------- TUM

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mant.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One line per entry: `timestamp tx ty tz qx qy qz qw`, camera-to-world (camera center and
/// orientation), `nan` fields for unregistered frames.
pub fn tum_text(traj: &Trajectory) -> String {
    let mut out = String::new();
    for e in &traj.entries {
        let vals: [f64; 7] = match &e.pose {
            Some(p) => {
                let c = p.center();
                let q = p.rotation.inverse().coords;
                [c.x, c.y, c.z, q.x, q.y, q.z, q.w]
            }
            None => [f64::NAN; 7],
        };
        out.push_str(&fmt_sig9(e.timestamp));
        for v in vals {
            out.push(' ');
            out.push_str(&fmt_sig9(v));
        }
        out.push('\n');
    }
    out
}

pub fn write_tum(traj: &Trajectory, path: &Path) -> Result<(), IoError> {
    write_file(path, tum_text(traj))
}

/// Parse TUM text; frame ids are assigned by line order. `#` lines and blank lines are skipped.
pub fn parse_tum(text: &str, file: &Path) -> Result<Trajectory, IoError> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| format_err(file, Location::Line(n + 1), m);
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("cannot parse `{t}`"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", v.len())));
        }
        let pose = if v[1..].iter().any(|x| x.is_nan()) {
            None
        } else {
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            if !(q.norm() > 0.5 && q.norm() < 1.5) {
                return Err(bad("quaternion is not unit length".into()));
            }
            let r = UnitQuaternion::from_quaternion(q).inverse();
            let c = Vector3::new(v[1], v[2], v[3]);
            Some(Pose::new(r, -(r * c)))
        };
        entries.push(TrajectoryEntry { timestamp: v[0], frame_id: entries.len() as u32, pose });
    }
    Ok(Trajectory { entries })
}

pub fn read_tum(path: &Path) -> Result<Trajectory, IoError> {
    parse_tum(&read_text(path)?, path)
}

// ---------------------------------------------------------------- config

/// `key = value` lines for every config field, in declaration order.
pub fn config_text(cfg: &PipelineConfig) -> String {
    let space = match cfg.depth_residual_space {
        DepthResidualSpace::Inverse => "inverse",
        DepthResidualSpace::Metric => "metric",
    };
    let denom = match cfg.alpha_denominator {
        AlphaDenominator::Depth => "depth",
        AlphaDenominator::InverseDepth => "inverse_depth",
    };
    let focal = cfg.focal.map(|f| f.to_string()).unwrap_or_else(|| "none".into());
    let pairs: Vec<(&str, String)> = vec![
        ("n_init", cfg.n_init.to_string()),
        ("flow_threshold_px", cfg.flow_threshold_px.to_string()),
        ("window_size", cfg.window_size.to_string()),
        ("patches_per_frame", cfg.patches_per_frame.to_string()),
        ("patch_footprint", cfg.patch_footprint.to_string()),
        ("mu", cfg.mu.to_string()),
        ("huber_delta", cfg.huber_delta.to_string()),
        ("depth_residual_space", space.into()),
        ("alpha_denominator", denom.into()),
        ("ba_iterations", cfg.ba_iterations.to_string()),
        ("keyframe_flow_px", cfg.keyframe_flow_px.to_string()),
        ("tracking_lost_px", cfg.tracking_lost_px.to_string()),
        ("loop_closure", cfg.loop_closure.to_string()),
        ("loop_threshold", cfg.loop_threshold.to_string()),
        ("loop_exclusion", cfg.loop_exclusion.to_string()),
        ("loop_streak", cfg.loop_streak.to_string()),
        ("loop_tolerance", cfg.loop_tolerance.to_string()),
        ("loop_cooldown", cfg.loop_cooldown.to_string()),
        ("loop_min_points", cfg.loop_min_points.to_string()),
        ("loop_information", cfg.loop_information.to_string()),
        ("use_masks", cfg.use_masks.to_string()),
        ("seed", cfg.seed.to_string()),
        ("post_refine", cfg.post_refine.to_string()),
        ("focal", focal),
    ];
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, IoError> {
    raw.parse().map_err(|_| IoError::InvalidValue { key: key.to_string(), message: format!("cannot parse `{raw}`") })
}

/// Apply one `key = value` setting to a config (no invariant checks).
pub fn set_config_value(cfg: &mut PipelineConfig, key: &str, raw: &str, line: usize) -> Result<(), IoError> {
    let k = key;
    match key {
        "n_init" => cfg.n_init = parse_value(k, raw)?,
        "flow_threshold_px" => cfg.flow_threshold_px = parse_value(k, raw)?,
        "window_size" => cfg.window_size = parse_value(k, raw)?,
        "patches_per_frame" => cfg.patches_per_frame = parse_value(k, raw)?,
        "patch_footprint" => cfg.patch_footprint = parse_value(k, raw)?,
        "mu" => cfg.mu = parse_value(k, raw)?,
        "huber_delta" => cfg.huber_delta = parse_value(k, raw)?,
        "depth_residual_space" => {
            cfg.depth_residual_space = match raw {
                "inverse" => DepthResidualSpace::Inverse,
                "metric" => DepthResidualSpace::Metric,
                _ => return Err(IoError::InvalidValue { key: k.into(), message: "expected inverse or metric".into() }),
            }
        }
        "alpha_denominator" => {
            cfg.alpha_denominator = match raw {
                "depth" => AlphaDenominator::Depth,
                "inverse_depth" => AlphaDenominator::InverseDepth,
                _ => return Err(IoError::InvalidValue { key: k.into(), message: "expected depth or inverse_depth".into() }),
            }
        }
        "ba_iterations" => cfg.ba_iterations = parse_value(k, raw)?,
        "keyframe_flow_px" => cfg.keyframe_flow_px = parse_value(k, raw)?,
        "tracking_lost_px" => cfg.tracking_lost_px = parse_value(k, raw)?,
        "loop_closure" => cfg.loop_closure = parse_value(k, raw)?,
        "loop_threshold" => cfg.loop_threshold = parse_value(k, raw)?,
        "loop_exclusion" => cfg.loop_exclusion = parse_value(k, raw)?,
        "loop_streak" => cfg.loop_streak = parse_value(k, raw)?,
        "loop_tolerance" => cfg.loop_tolerance = parse_value(k, raw)?,
        "loop_cooldown" => cfg.loop_cooldown = parse_value(k, raw)?,
        "loop_min_points" => cfg.loop_min_points = parse_value(k, raw)?,
        "loop_information" => cfg.loop_information = parse_value(k, raw)?,
        "use_masks" => cfg.use_masks = parse_value(k, raw)?,
        "seed" => cfg.seed = parse_value(k, raw)?,
        "post_refine" => {
            cfg.post_refine = raw.parse::<PostRefine>().map_err(|m| IoError::InvalidValue { key: k.into(), message: m })?
        }
        "focal" => cfg.focal = if raw == "none" { None } else { Some(parse_value(k, raw)?) },
        _ => return Err(IoError::UnknownKey { key: key.to_string(), line }),
    }
    Ok(())
}

/// Parse config text. Missing keys keep their defaults; the result is validated and an
/// invariant violation is reported against the offending key.
pub fn parse_config_str(text: &str) -> Result<PipelineConfig, IoError> {
    let mut cfg = PipelineConfig::default();
    let mut seen = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(IoError::InvalidValue { key: line.to_string(), message: format!("line {}: expected `key = value`", n + 1) });
        };
        let (k, v) = (k.trim(), v.trim());
        set_config_value(&mut cfg, k, v, n + 1)?;
        // check the key alone against the defaults so the error names it
        let mut one = PipelineConfig::default();
        set_config_value(&mut one, k, v, n + 1)?;
        if let Err(e) = one.validate() {
            return Err(IoError::InvalidValue { key: k.to_string(), message: e.to_string() });
        }
        seen.push(k.to_string());
    }
    cfg.validate().map_err(|e| IoError::InvalidValue { key: seen.join(","), message: e.to_string() })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<PipelineConfig, IoError> {
    parse_config_str(&read_text(path)?)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Config echo, `key = value` lines.
    pub config: String,
    pub input_hash: Option<String>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config,
            input_hash: None,
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Hash each named file in `dir` into `outputs`.
    pub fn record_outputs(&mut self, dir: &Path, names: &[&str]) -> Result<(), IoError> {
        for n in names {
            self.outputs.insert(n.to_string(), hash_file(&dir.join(n))?);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        write_file(path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| format_err(path, Location::Line(e.line()), e.to_string()))
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    write_file(path, text)
}
