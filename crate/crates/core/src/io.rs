//! File formats: contour and prediction JSON Lines, CHM1 heatmap tensors and
//! shape-model JSON.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{validate_contour, Contour, Frame, Landmarks, View};
use crate::heatmap::{ContourDistribution, Heatmap, HeatmapStack, PointGaussian};
use crate::linalg::{Mat2, Vec2};
use crate::shape_model::{ModelKind, ShapeModel};

pub const CHM1_MAGIC: &[u8; 4] = b"CHM1";

/// One contour per (id, view, frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourRecord {
    pub id: String,
    pub view: View,
    pub frame: Frame,
    pub spacing_mm: [f64; 2],
    pub points: Vec<[f64; 2]>,
    pub landmarks: [usize; 3],
}

impl ContourRecord {
    pub fn from_contour(id: &str, c: &Contour) -> Self {
        Self {
            id: id.to_string(),
            view: c.view,
            frame: c.frame,
            spacing_mm: c.spacing_mm,
            points: c.points.iter().map(|p| [p.x, p.y]).collect(),
            landmarks: c.landmarks.as_array(),
        }
    }

    /// Validated contour.
    pub fn to_contour(&self) -> Result<Contour> {
        let [b1, apex, b2] = self.landmarks;
        Ok(validate_contour(
            self.points.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
            Landmarks::new(b1, apex, b2),
            self.spacing_mm,
            self.view,
            self.frame,
        )?)
    }
}

/// Per-point predicted Gaussians for one image. `spacing_mm` defaults to
/// `[1, 1]` and `landmarks` to the canonical layout when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub view: View,
    pub frame: Frame,
    pub points: Vec<[f64; 2]>,
    pub covariances: Vec<[[f64; 2]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<[usize; 3]>,
}

impl PredictionRecord {
    pub fn from_distribution(id: &str, d: &ContourDistribution) -> Self {
        Self {
            id: id.to_string(),
            view: d.view,
            frame: d.frame,
            points: d.points.iter().map(|g| [g.mu.x, g.mu.y]).collect(),
            covariances: d
                .points
                .iter()
                .map(|g| [[g.sigma[(0, 0)], g.sigma[(0, 1)]], [g.sigma[(1, 0)], g.sigma[(1, 1)]]])
                .collect(),
            spacing_mm: Some(d.spacing_mm),
            landmarks: Some(d.landmarks.as_array()),
        }
    }

    pub fn to_distribution(&self) -> Result<ContourDistribution> {
        if self.points.len() != self.covariances.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} covariances",
                self.points.len(),
                self.covariances.len()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(&self.covariances)
            .map(|(p, c)| PointGaussian::new(Vec2::new(p[0], p[1]), Mat2::new(c[0][0], c[0][1], c[1][0], c[1][1])))
            .collect();
        let k = self.points.len();
        let landmarks =
            self.landmarks.map(|[a, b, c]| Landmarks::new(a, b, c)).unwrap_or_else(|| Landmarks::canonical(k));
        ContourDistribution::new(points, landmarks, self.view, self.frame, self.spacing_mm.unwrap_or([1.0, 1.0]))
    }
}

/// One sampled contour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub sample_index: usize,
    pub view: View,
    pub frame: Frame,
    pub points: Vec<[f64; 2]>,
    pub self_intersecting: bool,
}

impl SampleRecord {
    pub fn from_contour(id: &str, sample_index: usize, c: &Contour) -> Self {
        Self {
            id: id.to_string(),
            sample_index,
            view: c.view,
            frame: c.frame,
            points: c.points.iter().map(|p| [p.x, p.y]).collect(),
            self_intersecting: c.is_self_intersecting(),
        }
    }
}

/// Parses JSON Lines, skipping blank lines. `source` names the input in errors.
pub fn parse_jsonl<T: DeserializeOwned>(reader: impl BufRead, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: source.to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    parse_jsonl(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Reads contour records and validates every contour.
pub fn read_contours(path: &Path) -> Result<Vec<(String, Contour)>> {
    let records: Vec<ContourRecord> = read_jsonl(path)?;
    let source = path.display().to_string();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_contour().map(|c| (r.id.clone(), c)).map_err(|e| Error::Record {
                path: source.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, ContourDistribution)>> {
    let records: Vec<PredictionRecord> = read_jsonl(path)?;
    let source = path.display().to_string();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_distribution().map(|d| (r.id.clone(), d)).map_err(|e| Error::Record {
                path: source.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes.get(offset..offset + 4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        message: format!("truncated header: expected 4 bytes at offset {offset}"),
    })
}

/// Decodes a CHM1 tensor into a raw (unnormalized) stack.
pub fn decode_chm1(bytes: &[u8]) -> Result<HeatmapStack> {
    if bytes.len() < 4 || &bytes[..4] != CHM1_MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic, expected \"CHM1\"".into() });
    }
    let k = read_u32(bytes, 4)? as usize;
    let h = read_u32(bytes, 8)? as usize;
    let w = read_u32(bytes, 12)? as usize;
    if k == 0 {
        return Err(Error::Empty("empty stack".into()));
    }
    if h == 0 || w == 0 {
        return Err(Error::Format { offset: 8, message: format!("grid size {h}x{w}") });
    }
    let cells = h
        .checked_mul(w)
        .and_then(|c| c.checked_mul(k))
        .ok_or_else(|| Error::Format { offset: 4, message: "tensor size overflows".into() })?;
    let header = 16;
    let expected = cells.checked_mul(4).and_then(|b| b.checked_add(header));
    if expected != Some(bytes.len()) {
        let want = expected.map_or("overflow".to_string(), |e| e.to_string());
        return Err(Error::Format {
            offset: bytes.len().min(expected.unwrap_or(usize::MAX)) as u64,
            message: format!("expected {want} bytes for K={k} H={h} W={w}, file has {}", bytes.len()),
        });
    }
    let mut maps = Vec::with_capacity(k);
    for p in 0..k {
        let start = header + p * h * w * 4;
        let data = bytes[start..start + h * w * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        maps.push(Heatmap::from_vec(h, w, data)?);
    }
    HeatmapStack::new(maps)
}

pub fn encode_chm1(stack: &HeatmapStack) -> Vec<u8> {
    let (h, w) = (stack.height(), stack.width());
    let mut out = Vec::with_capacity(16 + stack.len() * h * w * 4);
    out.extend_from_slice(CHM1_MAGIC);
    for v in [stack.len(), h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in stack.maps() {
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Serialized shape model; `factors` is row-major `dim x rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeModelFile {
    pub dim: usize,
    pub rank: usize,
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub factors: Vec<f64>,
    pub kind: ModelKind,
    pub k: usize,
}

impl From<&ShapeModel> for ShapeModelFile {
    fn from(m: &ShapeModel) -> Self {
        let (d, r) = (m.dim(), m.rank());
        let mut factors = Vec::with_capacity(d * r);
        for i in 0..d {
            for j in 0..r {
                factors.push(m.factors[(i, j)]);
            }
        }
        Self {
            dim: d,
            rank: r,
            mean: m.mean.iter().copied().collect(),
            eigenvalues: m.eigenvalues.iter().copied().collect(),
            factors,
            kind: m.kind,
            k: m.k,
        }
    }
}

impl TryFrom<&ShapeModelFile> for ShapeModel {
    type Error = Error;

    fn try_from(f: &ShapeModelFile) -> Result<Self> {
        if f.mean.len() != f.dim || f.eigenvalues.len() != f.rank || f.factors.len() != f.dim * f.rank {
            return Err(Error::Dimension(format!(
                "shape model file: dim {} rank {} but {} mean, {} eigenvalues, {} factor entries",
                f.dim,
                f.rank,
                f.mean.len(),
                f.eigenvalues.len(),
                f.factors.len()
            )));
        }
        if f.dim != 2 * f.k * f.kind.frames() {
            return Err(Error::Dimension(format!(
                "shape model file: dim {} inconsistent with K = {} ({:?})",
                f.dim, f.k, f.kind
            )));
        }
        Ok(ShapeModel {
            mean: DVector::from_vec(f.mean.clone()),
            factors: DMatrix::from_row_slice(f.dim, f.rank, &f.factors),
            eigenvalues: DVector::from_vec(f.eigenvalues.clone()),
            kind: f.kind,
            k: f.k,
        })
    }
}

pub fn read_shape_model(path: &Path) -> Result<ShapeModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ShapeModelFile = serde_json::from_str(&text)?;
    ShapeModel::try_from(&file)
}
