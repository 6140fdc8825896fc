//! Binary feature-grid and depth-map files with JSON sidecars, and JSON
//! results documents.
//!
//! Binary layout (little-endian): magic (4 bytes), version `u32`, rows `u32`,
//! cols `u32`, dim `u32`, kind `u8`, 3 zero bytes, then `rows * cols * dim`
//! `f32` values in row-major order. Depth maps use dim 1.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3, SimilarityTransform2D};
use crate::lifting::{AerialMeta, CameraModel, DepthKind, DepthMap, RayModel};
use crate::matching::{FeatureGrid, GridMeta};
use crate::metrics::{ErrorSample, Summary};

pub const FEATURE_MAGIC: [u8; 4] = *b"FGRD";
pub const DEPTH_MAGIC: [u8; 4] = *b"DPTH";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub magic: [u8; 4],
    pub version: u32,
    pub rows: u32,
    pub cols: u32,
    pub dim: u32,
    pub kind: u8,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&self.magic);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.rows.to_le_bytes());
        b[12..16].copy_from_slice(&self.cols.to_le_bytes());
        b[16..20].copy_from_slice(&self.dim.to_le_bytes());
        b[20] = self.kind;
        b
    }

    /// Parses and validates a header against the expected magic.
    pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        if bytes[21..24] != [0, 0, 0] {
            return Err(Error::Malformed("reserved header bytes are not zero".into()));
        }
        Ok(Self {
            magic,
            version,
            rows: word(8),
            cols: word(12),
            dim: word(16),
            kind: bytes[20],
        })
    }

    fn payload_len(&self) -> usize {
        self.rows as usize * self.cols as usize * self.dim as usize
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit in 32 bits")))
}

fn encode_file(header: Header, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(&header.encode());
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn decode_file(bytes: &[u8], magic: [u8; 4]) -> Result<(Header, Vec<f64>)> {
    let header = Header::decode(bytes, magic)?;
    let expected = HEADER_LEN + 4 * header.payload_len();
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: bytes.len(),
            });
        }
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header, values))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Geometric metadata stored next to a feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "grid", rename_all = "snake_case")]
pub enum GridSidecar {
    Aerial(AerialMeta),
    Ground {
        camera: CameraModel,
        /// Cells whose ray differs from the camera model at the cell center.
        #[serde(default)]
        ray_overrides: Vec<(usize, Point3)>,
    },
}

impl GridSidecar {
    pub fn of(grid: &FeatureGrid) -> Self {
        match &grid.meta {
            GridMeta::Aerial(m) => GridSidecar::Aerial(*m),
            GridMeta::Ground(r) => GridSidecar::Ground {
                camera: r.model,
                ray_overrides: r.overrides(),
            },
        }
    }

    fn kind_flag(&self) -> u8 {
        match self {
            GridSidecar::Aerial(_) => 0,
            GridSidecar::Ground { .. } => 1,
        }
    }

    fn into_meta(self, rows: usize, cols: usize) -> Result<GridMeta> {
        Ok(match self {
            GridSidecar::Aerial(m) => GridMeta::Aerial(m),
            GridSidecar::Ground { camera, ray_overrides } => {
                let mut rays = RayModel::new(camera, rows, cols);
                for (cell, dir) in ray_overrides {
                    rays.restore_direction(cell, dir)?;
                }
                GridMeta::Ground(rays)
            }
        })
    }
}

pub fn encode_feature_grid(grid: &FeatureGrid) -> Result<Vec<u8>> {
    let header = Header {
        magic: FEATURE_MAGIC,
        version: FORMAT_VERSION,
        rows: to_u32(grid.rows, "rows")?,
        cols: to_u32(grid.cols, "cols")?,
        dim: to_u32(grid.dim, "dim")?,
        kind: GridSidecar::of(grid).kind_flag(),
    };
    Ok(encode_file(header, &grid.data))
}

/// Decodes a grid payload and combines it with its sidecar.
pub fn decode_feature_grid(bytes: &[u8], sidecar: GridSidecar) -> Result<FeatureGrid> {
    let (h, data) = decode_file(bytes, FEATURE_MAGIC)?;
    if h.kind > 1 {
        return Err(Error::Malformed(format!("unknown grid kind flag {}", h.kind)));
    }
    if h.kind != sidecar.kind_flag() {
        return Err(Error::Malformed("grid kind flag disagrees with its sidecar".into()));
    }
    let (rows, cols) = (h.rows as usize, h.cols as usize);
    FeatureGrid::new(rows, cols, h.dim as usize, data, sidecar.into_meta(rows, cols)?)
}

/// Writes the binary grid and its `<path>.json` sidecar. Values are stored
/// as `f32`.
pub fn write_feature_grid(grid: &FeatureGrid, path: &Path) -> Result<()> {
    write_atomic(path, &encode_feature_grid(grid)?)?;
    write_json(&GridSidecar::of(grid), &sidecar_path(path))
}

pub fn read_feature_grid(path: &Path) -> Result<FeatureGrid> {
    let bytes = fs::read(path)?;
    let side = sidecar_path(path);
    if !side.exists() {
        // Header errors take precedence over the missing sidecar.
        Header::decode(&bytes, FEATURE_MAGIC)?;
        return Err(Error::MetadataMissing(side));
    }
    decode_feature_grid(&bytes, read_json(&side)?)
}

fn depth_flag(kind: DepthKind) -> u8 {
    match kind {
        DepthKind::Metric => 0,
        DepthKind::Relative => 1,
    }
}

/// Depth payloads are `f32`; cells without depth are stored as `+inf`.
pub fn encode_depth_map(depth: &DepthMap) -> Result<Vec<u8>> {
    let header = Header {
        magic: DEPTH_MAGIC,
        version: FORMAT_VERSION,
        rows: to_u32(depth.rows, "rows")?,
        cols: to_u32(depth.cols, "cols")?,
        dim: 1,
        kind: depth_flag(depth.kind),
    };
    Ok(encode_file(header, &depth.data))
}

pub fn decode_depth_map(bytes: &[u8]) -> Result<DepthMap> {
    let (h, data) = decode_file(bytes, DEPTH_MAGIC)?;
    if h.dim != 1 {
        return Err(Error::Malformed(format!("depth map with dim {}", h.dim)));
    }
    let kind = match h.kind {
        0 => DepthKind::Metric,
        1 => DepthKind::Relative,
        k => return Err(Error::Malformed(format!("unknown depth kind flag {k}"))),
    };
    DepthMap::new(h.rows as usize, h.cols as usize, kind, data)
}

pub fn write_depth_map(depth: &DepthMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_depth_map(depth)?)
}

pub fn read_depth_map(path: &Path) -> Result<DepthMap> {
    decode_depth_map(&fs::read(path)?)
}

/// One estimated pose in a results document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub label: String,
    pub transform: SimilarityTransform2D,
    pub correspondences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inlier_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<SimilarityTransform2D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<ErrorSample>,
    /// Matched ground points placed in the aerial frame by the estimate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlay: Vec<Point2>,
}

/// Results of one command run. Holds no timestamps, so identical runs give
/// identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub command: String,
    /// Everything needed to rerun the command.
    pub config: serde_json::Value,
    #[serde(default)]
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<Summary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<f64>,
    /// Command-specific report.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub report: serde_json::Value,
}

impl ResultsFile {
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            samples: Vec::new(),
            summary: None,
            loss_curve: Vec::new(),
            report: serde_json::Value::Null,
        })
    }

    pub fn errors(&self) -> Vec<ErrorSample> {
        self.samples.iter().filter_map(|s| s.errors).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aerial_grid(seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c, d) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5));
        let data = (0..r * c * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        FeatureGrid::new(r, c, d, data, GridMeta::Aerial(AerialMeta::new(1.25))).unwrap()
    }

    fn ground_grid() -> FeatureGrid {
        let mut rays = RayModel::equirectangular(2, 4);
        rays.set_direction(5, Point3::new(0.3, 0.4, 0.1)).unwrap();
        FeatureGrid::new(2, 4, 2, (0..16).map(|k| k as f64 * 0.5).collect(), GridMeta::Ground(rays)).unwrap()
    }

    #[test]
    fn header_layout() {
        let h = Header {
            magic: FEATURE_MAGIC,
            version: 1,
            rows: 2,
            cols: 3,
            dim: 4,
            kind: 1,
        };
        let b = h.encode();
        assert_eq!(&b[..4], b"FGRD");
        assert_eq!(b[4..8], [1, 0, 0, 0]);
        assert_eq!(b[8..12], [2, 0, 0, 0]);
        assert_eq!(b[16..20], [4, 0, 0, 0]);
        assert_eq!(b[20..24], [1, 0, 0, 0]);
        assert_eq!(Header::decode(&b, FEATURE_MAGIC).unwrap(), h);
    }

    #[test]
    fn round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        for grid in [aerial_grid(3), ground_grid()] {
            let path = dir.path().join("g.fgrd");
            write_feature_grid(&grid, &path).unwrap();
            let back = read_feature_grid(&path).unwrap();
            assert_eq!(back.meta, grid.meta);
            for (a, b) in back.data.iter().zip(&grid.data) {
                assert_eq!(*a, *b as f32 as f64);
            }
            let first = fs::read(&path).unwrap();
            write_feature_grid(&back, &path).unwrap();
            assert_eq!(fs::read(&path).unwrap(), first);
        }
    }

    #[test]
    fn depth_round_trip_keeps_missing_cells() {
        let d = DepthMap::new(1, 3, DepthKind::Relative, vec![1.5, f64::INFINITY, 0.0]).unwrap();
        let back = decode_depth_map(&encode_depth_map(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let grid = aerial_grid(1);
        let bytes = encode_feature_grid(&grid).unwrap();
        let side = GridSidecar::of(&grid);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_feature_grid(&bad, side.clone()), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_feature_grid(&bad, side.clone()), Err(Error::VersionUnsupported(9))));
        assert!(matches!(
            decode_feature_grid(&bytes[..bytes.len() - 1], side.clone()),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(decode_feature_grid(&bytes[..10], side), Err(Error::TruncatedPayload { .. })));
        assert!(matches!(decode_depth_map(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn missing_sidecar_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.fgrd");
        write_feature_grid(&aerial_grid(2), &path).unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(read_feature_grid(&path), Err(Error::MetadataMissing(_))));
    }

    #[test]
    fn results_round_trip() {
        let mut r = ResultsFile::new("solve", &serde_json::json!({"seed": 7})).unwrap();
        r.samples.push(SampleRecord {
            label: "seed 7".into(),
            transform: SimilarityTransform2D::new(1.5, 0.3, Point2::new(1.0, -2.0)),
            correspondences: 10,
            inlier_count: Some(8),
            truth: None,
            errors: None,
            overlay: vec![Point2::new(0.1, 0.2)],
        });
        r.loss_curve = vec![3.0, 2.5];
        let text = serde_json::to_string_pretty(&r).unwrap();
        let back: ResultsFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), text);
    }
}
